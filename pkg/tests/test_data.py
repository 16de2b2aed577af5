import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from brightsign import data as D
from brightsign import nn
from conftest import random_model


# ---------------------------------------------------------------- synthetic generator

def test_generator_is_deterministic():
    a = D.generate_synthetic(50, 5, (1, 16, 16), seed=9)
    b = D.generate_synthetic(50, 5, (1, 16, 16), seed=9)
    assert np.array_equal(a.images, b.images)
    assert np.array_equal(a.labels, b.labels)


def test_generator_balanced_classes():
    ds = D.generate_synthetic(100, 10, (1, 16, 16), seed=1)
    counts = np.bincount(ds.labels, minlength=10)
    assert np.all(counts == 10)


def test_generator_extension_is_prefix_stable():
    small = D.generate_synthetic(40, 7, (1, 16, 16), seed=3)
    big = D.generate_synthetic(90, 7, (1, 16, 16), seed=3)
    assert np.array_equal(big.images[:40], small.images)
    assert np.array_equal(big.labels[:40], small.labels)


def test_generator_pixels_in_range_and_shape():
    ds = D.generate_synthetic(30, 3, (3, 12, 12), seed=5)
    assert ds.images.shape == (30, 3, 12, 12)
    assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0


def test_generator_rejects_bad_sizes():
    with pytest.raises(ValueError, match="square"):
        D.generate_synthetic(10, 3, (1, 16, 12), seed=0)
    with pytest.raises(ValueError, match="side >= 12"):
        D.generate_synthetic(10, 3, (1, 8, 8), seed=0)
    with pytest.raises(ValueError, match="k must be"):
        D.generate_synthetic(10, 27, (1, 16, 16), seed=0)


def test_generator_different_seeds_differ():
    a = D.generate_synthetic(10, 2, (1, 16, 16), seed=1)
    b = D.generate_synthetic(10, 2, (1, 16, 16), seed=2)
    assert not np.array_equal(a.images, b.images)


# ---------------------------------------------------------------- IDX

def idx_image_bytes(images):
    n, rows, cols = images.shape
    return struct.pack(">4I", 0x803, n, rows, cols) + images.astype(np.uint8).tobytes()


def idx_label_bytes(labels):
    return struct.pack(">2I", 0x801, len(labels)) + bytes(int(v) for v in labels)


def test_load_idx_hand_built_fixture(tmp_path):
    # two 2x2 images, constructed byte by byte
    images = np.array([[[0, 255], [128, 64]], [[255, 255], [0, 1]]], dtype=np.uint8)
    labels = [1, 0]
    ip = tmp_path / "imgs.idx"
    lp = tmp_path / "labs.idx"
    ip.write_bytes(idx_image_bytes(images))
    lp.write_bytes(idx_label_bytes(labels))
    ds = D.load_idx(ip, lp)
    assert ds.images.shape == (2, 1, 2, 2)
    expected = images.astype(np.float64) / 255.0
    assert np.array_equal(ds.images[:, 0], expected)
    assert ds.images[0, 0, 0, 1] == 1.0   # byte 0xFF -> 1.0
    assert ds.images[0, 0, 0, 0] == 0.0   # byte 0x00 -> 0.0
    assert list(ds.labels) == labels


def test_load_idx_roundtrip_identity_on_bytes(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(5, 3, 3), dtype=np.uint8)
    labels = rng.integers(0, 4, size=5)
    ip, lp = tmp_path / "i.idx", tmp_path / "l.idx"
    ip.write_bytes(idx_image_bytes(images))
    lp.write_bytes(idx_label_bytes(labels))
    ds = D.load_idx(ip, lp)
    recovered = np.round(ds.images[:, 0] * 255.0).astype(np.uint8)
    assert np.array_equal(recovered, images)


def test_load_idx_rejects_wrong_magic(tmp_path):
    ip, lp = tmp_path / "i.idx", tmp_path / "l.idx"
    # label magic in the image slot
    ip.write_bytes(struct.pack(">4I", 0x801, 1, 2, 2) + b"\x00" * 4)
    lp.write_bytes(idx_label_bytes([0]))
    with pytest.raises(ValueError, match="bad image magic"):
        D.load_idx(ip, lp)


def test_load_idx_rejects_truncation_and_mismatch(tmp_path):
    images = np.zeros((2, 2, 2), dtype=np.uint8)
    ip, lp = tmp_path / "i.idx", tmp_path / "l.idx"
    ip.write_bytes(idx_image_bytes(images)[:-3])
    lp.write_bytes(idx_label_bytes([0, 1]))
    with pytest.raises(ValueError, match="truncated image data"):
        D.load_idx(ip, lp)
    ip.write_bytes(idx_image_bytes(images))
    lp.write_bytes(idx_label_bytes([0, 1, 0]))
    with pytest.raises(ValueError, match="count mismatch"):
        D.load_idx(ip, lp)


# ---------------------------------------------------------------- filtering

def test_filter_correct_identity_when_all_correct(tiny_model, tiny_dataset):
    correct = nn.predict_batch(tiny_model, tiny_dataset.images) == tiny_dataset.labels
    keep = tiny_dataset.subset(np.nonzero(correct)[0])
    subset = D.filter_correct(keep, [tiny_model])
    assert np.array_equal(subset.indices, np.arange(len(keep)))
    assert subset.model_names == ("tiny",)


def test_filter_correct_matches_set_intersection_oracle(tiny_model, tiny_conv_model, tiny_dataset):
    subset = D.filter_correct(tiny_dataset, [tiny_model, tiny_conv_model])
    sets = []
    for m in (tiny_model, tiny_conv_model):
        preds = nn.predict_batch(m, tiny_dataset.images)
        sets.append({i for i in range(len(tiny_dataset)) if preds[i] == tiny_dataset.labels[i]})
    expected = sorted(sets[0] & sets[1])
    assert list(subset.indices) == expected


def test_filter_correct_order_invariant(tiny_model, tiny_conv_model, tiny_dataset):
    a = D.filter_correct(tiny_dataset, [tiny_model, tiny_conv_model])
    b = D.filter_correct(tiny_dataset, [tiny_conv_model, tiny_model])
    assert np.array_equal(a.indices, b.indices)


def test_filter_correct_disjoint_sets_gives_empty_with_warning(tiny_dataset, caplog):
    # a model that always predicts class 0 vs one that always predicts class 1
    arch = nn.Architecture((1, 16, 16), (nn.Flatten(), nn.Dense(4)), 4)
    w = np.zeros((4, 256))
    m0 = nn.TrainedModel(arch, (None, (w, np.array([1.0, 0, 0, 0]))), name="always0")
    m1 = nn.TrainedModel(arch, (None, (w, np.array([0, 1.0, 0, 0]))), name="always1")
    import logging
    with caplog.at_level(logging.WARNING):
        subset = D.filter_correct(tiny_dataset, [m0, m1])
    assert len(subset) == 0
    assert any("no example" in r.message for r in caplog.records)


# ---------------------------------------------------------------- image export

def test_export_all_zero_pgm(tmp_path):
    paths = D.export_images(np.zeros((1, 1, 2, 2)), tmp_path, "z")
    blob = paths[0].read_bytes()
    assert blob == b"P5\n2 2\n255\n" + b"\x00" * 4


def test_export_rounds_half_up(tmp_path):
    img = np.full((1, 1, 1, 1), 0.5)
    path = D.export_images(img, tmp_path, "half")[0]
    assert path.read_bytes().endswith(bytes([128]))


def test_export_ppm_for_three_channels(tmp_path):
    img = np.zeros((1, 3, 2, 2))
    img[0, 0] = 1.0  # red channel
    path = D.export_images(img, tmp_path, "rgb")[0]
    blob = path.read_bytes()
    assert blob.startswith(b"P6\n2 2\n255\n")
    assert blob[-12:] == bytes([255, 0, 0] * 4)


def parse_pgm(path):
    blob = path.read_bytes()
    header, rest = blob.split(b"\n255\n", 1)
    magic, dims = header.split(b"\n")
    w, h = (int(v) for v in dims.split())
    return np.frombuffer(rest, dtype=np.uint8).reshape(h, w)


@given(st.integers(0, 1_000_000))
@settings(max_examples=25, deadline=None)
def test_export_reparse_quantization_bound(seed):
    rng = np.random.default_rng(seed)
    img = rng.uniform(0, 1, (1, 1, 4, 4))
    import tempfile, pathlib
    with tempfile.TemporaryDirectory() as d:
        path = D.export_images(img, pathlib.Path(d), "q")[0]
        back = parse_pgm(path).astype(np.float64) / 255.0
    assert np.abs(back - img[0, 0]).max() <= 1 / 510 + 1e-12


def test_export_rejects_bad_channel_count(tmp_path):
    with pytest.raises(ValueError, match="expected"):
        D.export_images(np.zeros((1, 2, 4, 4)), tmp_path, "bad")
