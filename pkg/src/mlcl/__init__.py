"""Multi-level supervised contrastive learning on numpy, with numba kernels."""

from mlcl._accel import USE_NUMBA
from mlcl.labels import (
    AugmentedBatchLabels,
    MultiLevelLabel,
    PositiveSet,
    expand_to_views,
    global_positive_set,
    inject_label_noise,
    jaccard,
    level_positive_set,
)
from mlcl.loss import (
    Global,
    HeadConfig,
    Level,
    LossReport,
    combined_loss,
    cross_entropy,
    global_head_loss,
    head_loss,
    head_loss_gradient,
    relative_similarity,
    tau_inf_limit_form,
    tau_zero_limit_form,
)

__version__ = "0.1.0"

__all__ = [
    "USE_NUMBA",
    "AugmentedBatchLabels",
    "MultiLevelLabel",
    "PositiveSet",
    "expand_to_views",
    "global_positive_set",
    "inject_label_noise",
    "jaccard",
    "level_positive_set",
    "Global",
    "HeadConfig",
    "Level",
    "LossReport",
    "combined_loss",
    "cross_entropy",
    "global_head_loss",
    "head_loss",
    "head_loss_gradient",
    "relative_similarity",
    "tau_inf_limit_form",
    "tau_zero_limit_form",
]
