"""brightsign: sign-gradient adversarial attacks with randomized brightness
transforms, evaluated for black-box transferability on a self-trained zoo of
small networks."""

from .attacks import (
    AttackConfig,
    AttackResult,
    EnsembleSpec,
    attack_trace,
    fuse_ensemble_gradient,
    preset,
    replay_attack,
    run_attack,
)
from .data import Dataset, EvalSubset, export_images, filter_correct, generate_synthetic, load_idx
from .evaluation import (
    SuccessTable,
    SweepCurve,
    build_eval_subset,
    emit_report,
    ensemble_holdout,
    proportion_greater,
    single_model_matrix,
    success_rate,
    sweep_constant_r,
    sweep_probability,
    sweep_random_r,
)
from .model_io import load_model, save_model
from .nn import (
    Architecture,
    Conv2d,
    Dense,
    Flatten,
    MaxPool2x2,
    Relu,
    TrainConfig,
    TrainedModel,
    accuracy,
    adversarial_train,
    forward,
    input_gradient,
    loss,
    param_gradients,
    predict,
    predict_batch,
    train,
)
from .transforms import (
    BrightnessConfig,
    DiverseInputConfig,
    ErasingConfig,
    NoiseConfig,
    TransformRecord,
    brightness_gradient_backward,
    clip_to_ball,
    diverse_input,
    diverse_input_gradient_backward,
    gaussian_noise,
    random_brightness,
    random_erasing,
)

__version__ = "0.1.0"
