from pathlib import Path

from .augpipe import (
    AugConfig,
    ViewPair,
    apply_bg_random,
    apply_bg_rm,
    corrupt_mask_if_configured,
    derive_rng,
    make_matched_negative,
    make_view_pair,
    standard_view,
)
from .cachestore import build_cache, load_cached
from .config import ExperimentConfig
from .errors import ConfigError, IntegrityError, NumericalError, RejectedInputError
from .evalkit import eval_splits, fgsm, pgd, robust_accuracy, train_probe
from .imgcore import (
    composite,
    fill_grayscale,
    foreground_fraction,
    sample_mask_corruption,
    sample_rrc,
    tiled_background,
    transform_mask,
)
from .learner import contrastive_step, grad_check, infonce_loss, momentum_update, supervised_step
from .network import encode
from .synthgen import gen_challenge_splits, gen_dataset, gen_sample

# get the version
__version__ = open(Path(__file__).parent / "version.txt").read().strip()

__all__ = [
    "AugConfig",
    "ExperimentConfig",
    "ViewPair",
    "ConfigError",
    "IntegrityError",
    "NumericalError",
    "RejectedInputError",
    "apply_bg_random",
    "apply_bg_rm",
    "build_cache",
    "composite",
    "contrastive_step",
    "corrupt_mask_if_configured",
    "derive_rng",
    "encode",
    "eval_splits",
    "fgsm",
    "fill_grayscale",
    "foreground_fraction",
    "gen_challenge_splits",
    "gen_dataset",
    "gen_sample",
    "grad_check",
    "infonce_loss",
    "load_cached",
    "make_matched_negative",
    "make_view_pair",
    "momentum_update",
    "pgd",
    "robust_accuracy",
    "sample_mask_corruption",
    "sample_rrc",
    "standard_view",
    "supervised_step",
    "tiled_background",
    "train_probe",
    "transform_mask",
    "__version__",
]
