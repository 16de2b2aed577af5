import math

import numpy as np
import pytest

from brightsign import nn
from conftest import random_model
from oracles import naive_cross_entropy, naive_forward, relative_error

RNG = np.random.default_rng(1234)


def small_arch():
    return nn.Architecture((1, 4, 4), (nn.Flatten(), nn.Dense(5), nn.Relu(), nn.Dense(3)), 3)


# ---------------------------------------------------------------- forward

def test_forward_zero_weights_gives_zero_logits():
    arch = small_arch()
    params = (None, (np.zeros((5, 16)), np.zeros(5)), None, (np.zeros((3, 5)), np.zeros(3)))
    model = nn.TrainedModel(arch, params)
    logits = nn.forward(model, RNG.uniform(0, 1, (4, 1, 4, 4)))
    assert np.all(logits == 0.0)


def test_forward_identity_dense_passes_input_through():
    arch = nn.Architecture((1, 2, 2), (nn.Flatten(), nn.Dense(4)), 4)
    params = (None, (np.eye(4), np.zeros(4)))
    model = nn.TrainedModel(arch, params)
    v = np.array([[0.1, 0.7], [0.3, 0.9]])
    logits = nn.forward(model, v[None, None])
    assert np.array_equal(logits[0], v.reshape(-1))


def test_forward_matches_naive_oracle_dense():
    arch = small_arch()
    model = random_model(arch, seed=7)
    x = np.random.default_rng(8).uniform(0, 1, (1, 4, 4))
    expected = naive_forward(arch, model.params, x)
    got = nn.forward(model, x[None])[0]
    np.testing.assert_allclose(got, expected, rtol=1e-12, atol=1e-14)
    # frozen values from the oracle (arch seed 7, input seed 8)
    np.testing.assert_allclose(
        expected, [0.3485654040264282, 0.08860379663971446, 0.27464800188536104],
        rtol=0, atol=1e-15)


def test_forward_matches_naive_oracle_conv_pipeline():
    arch = nn.Architecture(
        (2, 6, 6),
        (nn.Conv2d(3, 3, 4), nn.Relu(), nn.MaxPool2x2(), nn.Flatten(), nn.Dense(3)),
        3,
    )
    model = random_model(arch, seed=21)
    x = np.random.default_rng(22).uniform(0, 1, (2, 6, 6))
    np.testing.assert_allclose(nn.forward(model, x[None])[0],
                               naive_forward(arch, model.params, x),
                               rtol=1e-12, atol=1e-14)


def test_forward_rejects_shape_mismatch():
    model = random_model(small_arch(), seed=3)
    with pytest.raises(ValueError, match=r"\(N, 1, 4, 4\)"):
        nn.forward(model, np.zeros((2, 1, 5, 5)))


def test_forward_is_pure():
    model = random_model(small_arch(), seed=5)
    x = RNG.uniform(0, 1, (3, 1, 4, 4))
    a = nn.forward(model, x)
    b = nn.forward(model, x)
    assert np.array_equal(a, b)


# ---------------------------------------------------------------- loss

def test_loss_uniform_logits_is_log_k():
    logits = np.ones((2, 10)) * 3.7
    assert abs(nn.loss(logits, [0, 9]) - math.log(10)) < 1e-12


def test_loss_saturated_logit_goes_to_zero():
    logits = np.zeros((1, 5))
    logits[0, 2] = 1000.0
    assert nn.loss(logits, [2]) <= 1e-12


def test_loss_matches_naive_oracle():
    logits = np.random.default_rng(77).normal(0, 2, size=(4, 3))
    labels = [0, 2, 1, 2]
    assert abs(nn.loss(logits, labels) - naive_cross_entropy(logits, labels)) < 1e-12


def test_loss_rejects_out_of_range_labels():
    with pytest.raises(ValueError, match="out of range"):
        nn.loss(np.zeros((2, 3)), [0, 3])


def test_softmax_rows_sum_to_one():
    logits = np.random.default_rng(4).normal(0, 30, size=(6, 8))
    sums = nn.softmax(logits).sum(axis=1)
    np.testing.assert_allclose(sums, 1.0, rtol=0, atol=1e-12)


# ---------------------------------------------------------------- input gradients

def test_input_gradient_logistic_closed_form():
    # 2-class linear model, logits (w.x, 0): loss at class 0 is -log sigmoid(w.x)
    # and its input gradient is -(1 - sigmoid(w.x)) * w.
    rng = np.random.default_rng(15)
    w = rng.normal(0, 1, 16)
    arch = nn.Architecture((1, 4, 4), (nn.Flatten(), nn.Dense(2)), 2)
    params = (None, (np.stack([w, np.zeros(16)]), np.zeros(2)))
    model = nn.TrainedModel(arch, params)
    x = rng.uniform(0, 1, (1, 4, 4))
    sigma = 1.0 / (1.0 + math.exp(-float(w @ x.reshape(-1))))
    expected = (-(1.0 - sigma) * w).reshape(1, 4, 4)
    np.testing.assert_allclose(nn.input_gradient(model, x, 0), expected, rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_input_gradient_matches_central_differences(tiny_conv_model, seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 1, (1, 16, 16))
    y = int(rng.integers(4))
    grad = nn.input_gradient(tiny_conv_model, x, y)
    h = 1e-4
    for _ in range(20):
        idx = tuple(int(rng.integers(s)) for s in x.shape)
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        fd = (nn.loss(nn.forward(tiny_conv_model, xp[None]), [y])
              - nn.loss(nn.forward(tiny_conv_model, xm[None]), [y])) / (2 * h)
        assert relative_error(grad[idx], fd) < 1e-4


def test_input_gradient_dead_relu_is_zero():
    arch = nn.Architecture((1, 2, 2), (nn.Flatten(), nn.Dense(3), nn.Relu(), nn.Dense(2)), 2)
    w1 = np.random.default_rng(9).normal(0, 1, (3, 4))
    params = (None, (w1, np.full(3, -100.0)), None,
              (np.random.default_rng(10).normal(0, 1, (2, 3)), np.zeros(2)))
    model = nn.TrainedModel(arch, params)
    grad = nn.input_gradient(model, np.random.default_rng(11).uniform(0, 1, (1, 2, 2)), 1)
    assert np.all(grad == 0.0)


def test_input_gradient_is_pure(tiny_conv_model):
    x = np.random.default_rng(33).uniform(0, 1, (1, 16, 16))
    a = nn.input_gradient(tiny_conv_model, x, 2)
    b = nn.input_gradient(tiny_conv_model, x, 2)
    assert np.array_equal(a, b)


def test_per_example_gradients_independent_of_batch(tiny_conv_model):
    rng = np.random.default_rng(44)
    batch = rng.uniform(0, 1, (5, 1, 16, 16))
    labels = rng.integers(0, 4, 5)
    _, grads = nn.per_example_losses_and_input_gradients(tiny_conv_model, batch, labels)
    solo = nn.input_gradient(tiny_conv_model, batch[3], int(labels[3]))
    np.testing.assert_allclose(grads[3], solo, rtol=1e-12, atol=1e-15)


# ---------------------------------------------------------------- parameter gradients

def test_param_gradient_zero_input_dense():
    arch = nn.Architecture((1, 2, 2), (nn.Flatten(), nn.Dense(2)), 2)
    model = random_model(arch, seed=2)
    grads = nn.param_gradients(model, np.zeros((3, 1, 2, 2)), [0, 1, 0])
    assert np.all(grads[1][0] == 0.0)  # weight gradient


def test_param_gradient_outer_product_oracle():
    arch = nn.Architecture((1, 2, 2), (nn.Flatten(), nn.Dense(3)), 3)
    model = random_model(arch, seed=6)
    x = np.random.default_rng(7).uniform(0, 1, (1, 1, 2, 2))
    y = [1]
    logits = nn.forward(model, x)
    p = nn.softmax(logits)[0]
    dlogits = p.copy()
    dlogits[1] -= 1.0
    expected_w = np.outer(dlogits, x.reshape(-1))
    grads = nn.param_gradients(model, x, y)
    np.testing.assert_allclose(grads[1][0], expected_w, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(grads[1][1], dlogits, rtol=1e-12, atol=1e-14)


def test_param_gradients_match_central_differences(tiny_conv_model, tiny_dataset):
    model = tiny_conv_model
    batch = tiny_dataset.images[:6]
    labels = tiny_dataset.labels[:6]
    grads = nn.param_gradients(model, batch, labels)
    rng = np.random.default_rng(50)
    h = 1e-4
    checked = 0
    for li, entry in enumerate(model.params):
        if entry is None:
            continue
        w, b = entry
        for _ in range(25):
            idx = tuple(int(rng.integers(s)) for s in w.shape)
            perturbed = [None if p is None else [p[0].copy(), p[1].copy()] for p in model.params]
            perturbed[li][0][idx] += h
            mp = nn.TrainedModel(model.architecture,
                                 tuple(None if p is None else (p[0], p[1]) for p in perturbed))
            lp = nn.loss(nn.forward(mp, batch), labels)
            perturbed[li][0][idx] -= 2 * h
            mm = nn.TrainedModel(model.architecture,
                                 tuple(None if p is None else (p[0], p[1]) for p in perturbed))
            lm = nn.loss(nn.forward(mm, batch), labels)
            fd = (lp - lm) / (2 * h)
            assert relative_error(grads[li][0][idx], fd) < 1e-4
            checked += 1
    assert checked >= 50


# ---------------------------------------------------------------- training

def test_train_zero_epochs_keeps_initialization(tiny_arch, tiny_dataset):
    cfg = nn.TrainConfig(epochs=0, seed=123)
    model = nn.train(tiny_arch, tiny_dataset, cfg)
    fresh = nn.init_params(tiny_arch, np.random.default_rng(np.random.SeedSequence((123, 0))))
    for got, want in zip(model.params, fresh):
        if want is None:
            assert got is None
        else:
            assert np.array_equal(got[0], want[0])
            assert np.array_equal(got[1], want[1])


def test_train_separable_toy_set_reaches_high_accuracy():
    # two blobs far apart in pixel space
    rng = np.random.default_rng(0)
    n = 120
    images = np.zeros((n, 1, 16, 16))
    labels = np.zeros(n, dtype=np.int64)
    for i in range(n):
        label = i % 2
        base = 0.15 if label == 0 else 0.75
        images[i] = np.clip(base + rng.uniform(-0.05, 0.05, (1, 16, 16)), 0, 1)
        labels[i] = label
    from brightsign.data import Dataset
    ds = Dataset(images, labels, class_count=2)
    arch = nn.Architecture((1, 16, 16), (nn.Flatten(), nn.Dense(8), nn.Relu(), nn.Dense(2)), 2)
    model = nn.train(arch, ds, nn.TrainConfig(epochs=10, batch_size=16, seed=4))
    assert model.train_accuracy >= 0.99


def test_train_is_bit_deterministic(tiny_arch, tiny_dataset):
    cfg = nn.TrainConfig(epochs=2, batch_size=32, seed=77)
    a = nn.train(tiny_arch, tiny_dataset, cfg)
    b = nn.train(tiny_arch, tiny_dataset, cfg)
    for pa, pb in zip(a.params, b.params):
        if pa is None:
            continue
        assert np.array_equal(pa[0], pb[0]) and np.array_equal(pa[1], pb[1])


def test_adversarial_train_zero_mix_matches_train(tiny_arch, tiny_dataset):
    cfg = nn.TrainConfig(epochs=2, batch_size=32, seed=13, adversarial_mix=0.0)
    a = nn.train(tiny_arch, tiny_dataset, cfg)
    b = nn.adversarial_train(tiny_arch, tiny_dataset, cfg)
    assert b.training_kind == "normal"
    for pa, pb in zip(a.params, b.params):
        if pa is None:
            continue
        assert np.array_equal(pa[0], pb[0]) and np.array_equal(pa[1], pb[1])


def test_adversarial_train_sets_kind_and_differs(tiny_arch, tiny_dataset):
    cfg = nn.TrainConfig(epochs=2, batch_size=32, seed=13, adversarial_mix=0.5)
    plain = nn.train(tiny_arch, tiny_dataset, nn.TrainConfig(epochs=2, batch_size=32, seed=13))
    adv = nn.adversarial_train(tiny_arch, tiny_dataset, cfg, name="adv")
    assert adv.training_kind == "adversarial"
    assert any(not np.array_equal(pa[0], pb[0])
               for pa, pb in zip(plain.params, adv.params) if pa is not None)


def test_train_rejects_empty_and_bad_labels(tiny_arch):
    from brightsign.data import Dataset
    with pytest.raises(ValueError):
        ds = Dataset(np.zeros((2, 1, 16, 16)), np.array([0, 9]), class_count=10)
        nn.train(nn.Architecture((1, 16, 16), (nn.Flatten(), nn.Dense(4)), 4), ds,
                 nn.TrainConfig(epochs=1))


def test_train_aborts_on_nonfinite_loss():
    # poisoned inputs reach the loss as NaN; training must stop with diagnostics
    import types
    images = np.zeros((8, 1, 16, 16))
    images[3, 0, 2, 2] = np.nan
    poisoned = types.SimpleNamespace(images=images, labels=np.zeros(8, dtype=np.int64))
    arch = nn.Architecture((1, 16, 16), (nn.Flatten(), nn.Dense(4)), 4)
    with pytest.raises(RuntimeError, match="non-finite"):
        nn.train(arch, poisoned, nn.TrainConfig(epochs=1, batch_size=8, seed=0))


# ---------------------------------------------------------------- predict

def test_predict_argmax_and_tie_rule():
    arch = nn.Architecture((1, 2, 2), (nn.Flatten(), nn.Dense(3)), 3)
    params = (None, (np.zeros((3, 4)), np.array([0.0, 5.0, 1.0])))
    model = nn.TrainedModel(arch, params)
    assert nn.predict(model, np.zeros((1, 2, 2))) == 1
    tie = nn.TrainedModel(arch, (None, (np.zeros((3, 4)), np.zeros(3))))
    assert nn.predict(tie, np.ones((1, 2, 2))) == 0


def test_predict_matches_forward_argmax_composition(tiny_conv_model):
    rng = np.random.default_rng(60)
    for _ in range(100):
        x = rng.uniform(0, 1, (1, 16, 16))
        expected = int(np.argmax(nn.forward(tiny_conv_model, x[None])[0]))
        assert nn.predict(tiny_conv_model, x) == expected


def test_trained_model_params_immutable(tiny_model):
    with pytest.raises(ValueError):
        tiny_model.params[1][0][0, 0] = 5.0
