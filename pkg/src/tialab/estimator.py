"""Scikit-learn style front door for the whole pipeline.

X is a list of VideoSample objects; labels ride along inside each sample's
annotations, so fit accepts y=None. predict returns per-video proposal
lists and score returns average mAP over the standard thresholds.
"""

from __future__ import annotations

from sklearn.base import BaseEstimator

from .backbone import BackboneConfig
from .evaluation import EvalConfig, mean_ap
from .head import PyramidConfig
from .tensor import ConfigError
from .training import DetectionModel, TrainSettings, train


class TemporalActionDetector(BaseEstimator):
    """Detects class-labelled time intervals in synthetic videos.

    Parameters mirror the CLI config; the trailing-underscore attributes
    (model_, history_) exist only after fit.
    """

    def __init__(self, mode: str = "adapter_inside",
                 representation: str = "frame", adapter_kind: str = "tia",
                 gamma: int = 4, kernel_k: int = 3, snippet_len: int = 16,
                 adapt_last_half: bool = False, use_checkpointing: bool = False,
                 num_layers: int = 4, dim: int = 64, heads: int = 4,
                 patch: int = 4, frame_hw=(8, 8), chunk_len: int = 16,
                 mlp_ratio: int = 2, num_classes: int = 3, levels: int = 4,
                 head_kernel: int = 7, epochs: int = 30, lr: float = 5e-3,
                 adapter_lr_scale: float = 0.1, warmup_epochs: int = 3,
                 weight_decay: float = 0.01, window: int = 128,
                 augment: bool = True, eval_interval: int = 3,
                 early_stop_map: float = 0.0, eval_overlap: float = 0.25,
                 seed: int = 0):
        self.mode = mode
        self.representation = representation
        self.adapter_kind = adapter_kind
        self.gamma = gamma
        self.kernel_k = kernel_k
        self.snippet_len = snippet_len
        self.adapt_last_half = adapt_last_half
        self.use_checkpointing = use_checkpointing
        self.num_layers = num_layers
        self.dim = dim
        self.heads = heads
        self.patch = patch
        self.frame_hw = frame_hw
        self.chunk_len = chunk_len
        self.mlp_ratio = mlp_ratio
        self.num_classes = num_classes
        self.levels = levels
        self.head_kernel = head_kernel
        self.epochs = epochs
        self.lr = lr
        self.adapter_lr_scale = adapter_lr_scale
        self.warmup_epochs = warmup_epochs
        self.weight_decay = weight_decay
        self.window = window
        self.augment = augment
        self.eval_interval = eval_interval
        self.early_stop_map = early_stop_map
        self.eval_overlap = eval_overlap
        self.seed = seed

    def _build(self) -> DetectionModel:
        cfg = BackboneConfig(
            num_layers=self.num_layers, dim=self.dim, heads=self.heads,
            patch=self.patch, frame_hw=tuple(self.frame_hw),
            chunk_len=self.chunk_len, mlp_ratio=self.mlp_ratio,
            frozen=self.mode not in ("full_ft", "full_ft_plus_tia"))
        head_cfg = PyramidConfig(self.num_classes, levels=self.levels,
                                 kernel=self.head_kernel)
        return DetectionModel(
            cfg, head_cfg, mode=self.mode, representation=self.representation,
            adapter_kind=self.adapter_kind, gamma=self.gamma,
            kernel_k=self.kernel_k, snippet_len=self.snippet_len,
            adapt_last_half=self.adapt_last_half,
            use_checkpointing=self.use_checkpointing, seed=self.seed)

    def fit(self, X, y=None):
        if not X:
            raise ConfigError("fit needs at least one video")
        self.model_ = self._build()
        settings = TrainSettings(
            epochs=self.epochs, lr=self.lr,
            adapter_lr_scale=self.adapter_lr_scale,
            warmup_epochs=self.warmup_epochs,
            weight_decay=self.weight_decay, window=self.window,
            augment=self.augment, eval_interval=self.eval_interval,
            early_stop_map=self.early_stop_map,
            eval_overlap=self.eval_overlap, seed=self.seed)
        self.history_ = train(self.model_, list(X), settings)
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise ConfigError("this TemporalActionDetector is not fitted; "
                              "call fit first")

    def predict(self, X):
        """Per-video lists of Proposal objects."""
        self._check_fitted()
        return [self.model_.predict(v, self.window, self.eval_overlap)
                for v in X]

    def score(self, X, y=None) -> float:
        """Average mAP over the standard tIoU thresholds."""
        self._check_fitted()
        predictions = []
        for props in self.predict(X):
            predictions.extend(props)
        ground_truth = {v.id: v.annotations for v in X}
        return mean_ap(predictions, ground_truth, EvalConfig()).average
