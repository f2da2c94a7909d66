"""tialab: a desk-scale laboratory for temporal-informative adapter tuning.

The package implements, from scratch on numpy, the full mechanism chain of
parameter-efficient temporal action detection: a reverse-mode tensor engine,
temporal-informative adapters with inside/outside placement, a frozen
transformer video backbone with frame and snippet representations, a
one-stage anchor-free detection head, interval-AP evaluation, and an
analytic model of fine-tuning memory traffic.
"""

from .tensor import (
    Tensor,
    Parameter,
    backward,
    no_grad,
    region,
    backward_counts,
    reset_backward_counts,
    retained_stats,
    reset_retained_stats,
    checkpointed_sequence,
    gradcheck,
)
from .backbone import BackboneConfig, encode, init_backbone
from .head import PyramidConfig, Proposal
from .data import SyntheticSpec, VideoSample, generate_dataset
from .evaluation import EvalConfig, mean_ap, tiou
from .training import AdamW, DetectionModel, TrainSettings, train
from .estimator import TemporalActionDetector

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "Parameter",
    "backward",
    "no_grad",
    "region",
    "backward_counts",
    "reset_backward_counts",
    "retained_stats",
    "reset_retained_stats",
    "checkpointed_sequence",
    "gradcheck",
    "BackboneConfig",
    "encode",
    "init_backbone",
    "PyramidConfig",
    "Proposal",
    "SyntheticSpec",
    "VideoSample",
    "generate_dataset",
    "EvalConfig",
    "mean_ap",
    "tiou",
    "AdamW",
    "DetectionModel",
    "TrainSettings",
    "train",
    "TemporalActionDetector",
    "__version__",
]
