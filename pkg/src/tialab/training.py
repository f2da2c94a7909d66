"""Model assembly, optimization, and the shared inference path.

One window per optimizer step keeps the loop simple; the schedule is a
linear warmup into a cosine decay over epochs. Frozen-trunk runs train
from features computed once per full video and sliced per window
(chunk-aligned starts, no pixel augmentation), which is the defining
shape of the conventional feature-based pipeline: extract offline, fit
the head on top.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as tt
from . import backbone as bb
from .adapters import count_params
from .data import VideoSample, augment, sliding_windows, truncate_window
from .evaluation import EvalConfig, EvalResult, mean_ap
from .head import (HeadWeights, PyramidConfig, Proposal, assign_targets,
                   compute_loss, decode_proposals, head_forward, nms)
from .tensor import ConfigError, NumericError, Parameter, Tensor


class TrainingError(Exception):
    pass


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay; decay skips vectors and scalars.

    lr_scales, when given, is a per-parameter multiplier on whatever lr a
    step uses, so one optimizer can run the head and the adapters at
    different speeds.
    """

    def __init__(self, params: list[Parameter], lr: float = 1e-3,
                 betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01,
                 lr_scales: list[float] | None = None):
        if lr < 0:
            raise ConfigError(f"lr must be >= 0, got {lr}")
        if lr_scales is not None and len(lr_scales) != len(params):
            raise ConfigError("lr_scales must match params in length")
        keep = [i for i, p in enumerate(params) if p.trainable]
        self.params = [params[i] for i in keep]
        self.scales = ([1.0] * len(keep) if lr_scales is None
                       else [lr_scales[i] for i in keep])
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = [np.zeros_like(p.tensor.data) for p in self.params]
        self._v = [np.zeros_like(p.tensor.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.tensor.grad = None

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for p, m, v, sc in zip(self.params, self._m, self._v, self.scales):
            g = p.tensor.grad
            if g is None:
                continue
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            step_lr = lr * sc
            if self.weight_decay and p.tensor.data.ndim >= 2:
                p.tensor.data -= step_lr * self.weight_decay * p.tensor.data
            p.tensor.data -= step_lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def schedule_lr(epoch: int, base_lr: float, warmup_epochs: int,
                total_epochs: int) -> float:
    if epoch < warmup_epochs:
        return base_lr * (epoch + 1) / max(warmup_epochs, 1)
    span = max(total_epochs - warmup_epochs, 1)
    frac = (epoch - warmup_epochs) / span
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


# ---------------------------------------------------------------------------
# model bundle
# ---------------------------------------------------------------------------

TRUNK_TRAINED = ("full_ft", "full_ft_plus_tia")


class DetectionModel:
    """Encoder + optional adapters + pyramid head under one parameter list."""

    def __init__(self, cfg: bb.BackboneConfig, head_cfg: PyramidConfig,
                 mode: str = "frozen", representation: str = "frame",
                 adapter_kind: str = "tia", gamma: int = 4, kernel_k: int = 3,
                 snippet_len: int = 16, adapt_last_half: bool = False,
                 use_checkpointing: bool = False, seed: int = 0):
        if mode not in bb.MODES:
            raise ConfigError(f"unknown mode {mode!r}")
        if representation not in ("frame", "snippet"):
            raise ConfigError(f"unknown representation {representation!r}")
        self.cfg = cfg
        self.head_cfg = head_cfg
        self.mode = mode
        self.representation = representation
        self.adapter_kind = adapter_kind
        self.snippet_len = snippet_len
        self.adapt_last_half = adapt_last_half
        self.use_checkpointing = use_checkpointing
        self.backbone = bb.init_backbone(cfg, seed=seed)
        bb.set_backbone_trainable(self.backbone, mode in TRUNK_TRAINED)
        if mode in ("adapter_inside", "full_ft_plus_tia"):
            self.adapters = bb.build_adapters(cfg, adapter_kind, gamma=gamma,
                                              k=kernel_k, seed=seed)
        elif mode == "adapter_outside":
            n = bb.side_adapter_count(cfg, adapt_last_half)
            self.adapters = bb.build_adapters(cfg, adapter_kind, gamma=gamma,
                                              k=kernel_k, seed=seed, count=n)
        else:
            self.adapters = None
        self.head = HeadWeights(cfg.dim, head_cfg, seed=seed + 1)

    def params(self) -> list[Parameter]:
        out = list(self.backbone.params())
        if self.adapters is not None:
            for a in self.adapters:
                out.extend(a.params())
        out.extend(self.head.params())
        return out

    def trainable_params(self) -> list[Parameter]:
        return [p for p in self.params() if p.trainable]

    def adapter_params(self) -> list[Parameter]:
        if self.adapters is None:
            return []
        out: list[Parameter] = []
        for a in self.adapters:
            out.extend(a.params())
        return out

    def trainable_count(self) -> int:
        return sum(p.tensor.data.size for p in self.trainable_params())

    def adapter_param_count(self) -> int:
        if not self.adapters:
            return 0
        return sum(count_params(a) for a in self.adapters)

    def encode(self, frames) -> bb.FeatureMap:
        return bb.encode(frames, self.backbone, mode=self.mode,
                         representation=self.representation,
                         adapters=self.adapters,
                         adapter_kind=self.adapter_kind,
                         snippet_len=self.snippet_len,
                         adapt_last_half=self.adapt_last_half,
                         use_checkpointing=self.use_checkpointing)

    def forward(self, frames):
        fm = self.encode(frames)
        return fm, head_forward(fm, self.head)

    def predict(self, v: VideoSample, win_len: int,
                overlap: float = 0.25) -> list[Proposal]:
        """Sliding-window inference with a final cross-window suppression.

        Mapped-back intervals are clipped to the video's duration.
        """
        props: list[Proposal] = []
        with tt.no_grad():
            for start, frames in sliding_windows(v, win_len, overlap):
                fm = self.encode(frames)
                outputs = head_forward(fm, self.head)
                props.extend(decode_proposals(
                    outputs, self.head_cfg, base_stride=fm.stride, fps=v.fps,
                    frame_offset=float(start), video_id=v.id))
        clipped = []
        for p in props:
            ts, te = max(0.0, p.t_start), min(v.duration, p.t_end)
            if te > ts:
                clipped.append(Proposal(ts, te, p.class_id, p.score, p.video_id))
        return nms(clipped, self.head_cfg.nms_tiou, self.head_cfg.max_proposals)

    def save(self, path) -> None:
        bb.save_params(path, self.params())

    def load(self, path) -> None:
        bb.load_params(path, self.params())


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

class TrainSettings:
    def __init__(self, epochs: int = 20, lr: float = 1e-3,
                 adapter_lr_scale: float = 1.0,
                 warmup_epochs: int = 5, weight_decay: float = 0.01,
                 window: int = 96, keep_ratio: float = 0.25,
                 augment: bool = True, flip_p: float = 0.5,
                 min_area: float = 0.7, eval_interval: int = 3,
                 early_stop_map: float = 0.0, eval_overlap: float = 0.25,
                 seed: int = 0):
        if epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {epochs}")
        if lr < 0:
            raise ConfigError(f"lr must be >= 0, got {lr}")
        if adapter_lr_scale < 0:
            raise ConfigError(
                f"adapter_lr_scale must be >= 0, got {adapter_lr_scale}")
        self.epochs = epochs
        self.lr = lr
        self.adapter_lr_scale = adapter_lr_scale
        self.warmup_epochs = warmup_epochs
        self.weight_decay = weight_decay
        self.window = window
        self.keep_ratio = keep_ratio
        self.augment = augment
        self.flip_p = flip_p
        self.min_area = min_area
        self.eval_interval = eval_interval
        self.early_stop_map = early_stop_map
        self.eval_overlap = eval_overlap
        self.seed = seed


def _cache_features(model: DetectionModel, videos) -> dict:
    """Frozen-trunk features for whole videos, one pass each.

    Both representations yield one feature per frame index at stride 1,
    so window slicing works uniformly on the cached array.
    """
    out = {}
    with tt.no_grad():
        for v in videos:
            out[v.id] = model.encode(v.frames).values.data.copy()
    return out


def _loss_on_window(model: DetectionModel, window: VideoSample,
                    fm: bb.FeatureMap) -> Tensor:
    outputs = head_forward(fm, model.head)
    targets = assign_targets(window.annotations, model.head_cfg, fm.length,
                             base_stride=fm.stride, fps=window.fps)
    return compute_loss(outputs, targets, model.head_cfg)


def train_step(model: DetectionModel, v: VideoSample, s: TrainSettings,
               rng: np.random.Generator, opt: AdamW, lr_now: float,
               cache: dict | None = None) -> float:
    align = model.cfg.chunk_len if cache is not None else 1
    window, start = truncate_window(v, s.window, rng=rng,
                                    keep_ratio=s.keep_ratio, align=align)
    if cache is None and s.augment:
        window = augment(window, rng, min_area=s.min_area, flip_p=s.flip_p)
    opt.zero_grad()
    try:
        if cache is not None:
            feats = cache[v.id][start:start + s.window]
            fm = bb.FeatureMap(Tensor(feats), stride=1.0)
        else:
            fm = model.encode(window.frames)
        loss = _loss_on_window(model, window, fm)
        val = float(loss.data)
        if not np.isfinite(val):
            raise TrainingError(
                f"non-finite loss {val} on video {v.id} (lr={lr_now})")
        tt.backward(loss)
    except NumericError as e:
        raise TrainingError(
            f"non-finite value on video {v.id} (lr={lr_now}): {e}") from e
    opt.step(lr_now)
    return val


def evaluate_model(model: DetectionModel, videos, win_len: int,
                   overlap: float = 0.25,
                   eval_cfg: EvalConfig | None = None) -> EvalResult:
    predictions: list[Proposal] = []
    ground_truth = {}
    for v in videos:
        predictions.extend(model.predict(v, win_len, overlap))
        ground_truth[v.id] = v.annotations
    return mean_ap(predictions, ground_truth, eval_cfg)


def collect_predictions(model: DetectionModel, videos, win_len: int,
                        overlap: float = 0.25) -> list[Proposal]:
    out: list[Proposal] = []
    for v in videos:
        out.extend(model.predict(v, win_len, overlap))
    return out


def train(model: DetectionModel, videos, s: TrainSettings,
          log_path=None, eval_cfg: EvalConfig | None = None) -> list[dict]:
    """Runs the loop, returns per-epoch history dicts.

    train_map is measured every eval_interval epochs (and on the last);
    rows in between carry None. Early stop fires when the measured train
    mAP reaches early_stop_map.
    """
    if not videos:
        raise TrainingError("empty training set")
    if model.mode == "frozen":
        for v in videos:
            if v.num_frames < s.window:
                raise TrainingError(
                    f"video {v.id} shorter ({v.num_frames}) than the training"
                    f" window ({s.window}); feature caching needs full windows")
        cache = _cache_features(model, videos)
    else:
        cache = None
    rng = np.random.default_rng([s.seed, 7331])
    all_params = model.trainable_params()
    adapter_ids = {id(p) for p in model.adapter_params()}
    scales = [s.adapter_lr_scale if id(p) in adapter_ids else 1.0
              for p in all_params]
    opt = AdamW(all_params, lr=s.lr, weight_decay=s.weight_decay,
                lr_scales=scales)
    if not opt.params:
        raise TrainingError("no trainable parameters")
    history: list[dict] = []
    log_fp = open(log_path, "w") if log_path else None
    try:
        if log_fp:
            log_fp.write("epoch,lr,loss,train_map\n")
        for epoch in range(s.epochs):
            lr_now = schedule_lr(epoch, s.lr, s.warmup_epochs, s.epochs)
            losses = []
            for idx in rng.permutation(len(videos)):
                losses.append(train_step(model, videos[int(idx)], s, rng,
                                         opt, lr_now, cache))
            mean_loss = float(np.mean(losses))
            train_map = None
            last = epoch == s.epochs - 1
            if s.eval_interval and ((epoch + 1) % s.eval_interval == 0 or last):
                train_map = evaluate_model(model, videos, s.window,
                                           s.eval_overlap, eval_cfg).average
            history.append({"epoch": epoch, "lr": lr_now, "loss": mean_loss,
                            "train_map": train_map})
            if log_fp:
                tm = "" if train_map is None else f"{train_map:.6f}"
                log_fp.write(f"{epoch},{lr_now:.8f},{mean_loss:.6f},{tm}\n")
                log_fp.flush()
            if (train_map is not None and s.early_stop_map
                    and train_map >= s.early_stop_map):
                break
    finally:
        if log_fp:
            log_fp.close()
    return history
