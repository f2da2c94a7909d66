"""One-stage anchor-free temporal action detection head.

A small pyramid is built over the per-frame features by repeated stride-2
depth-wise temporal convolution + layer norm. Every pyramid location emits
K class logits and two non-negative boundary distances (via softplus),
measured in that level's stride. Each ground-truth action is assigned to
locations inside it whose max boundary distance falls in the level's range;
overlapping assignments go to the shortest action. Training uses a sigmoid
focal classification loss plus (1 - temporal IoU) on positive locations.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as tt
from .tensor import ConfigError, Parameter, ShapeError, Tensor
from .evaluation import tiou

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0


class PyramidConfig:
    def __init__(self, num_classes: int, levels: int = 4,
                 ranges=((0.0, 4.0), (4.0, 8.0), (8.0, 16.0), (16.0, math.inf)),
                 score_thresh: float = 0.05, nms_tiou: float = 0.6,
                 max_proposals: int = 200, kernel: int = 3):
        if levels < 1:
            raise ConfigError(f"levels must be >= 1, got {levels}")
        if len(ranges) != levels:
            raise ConfigError(f"{levels} levels need {levels} ranges, got {len(ranges)}")
        if ranges[0][0] != 0.0 or not math.isinf(ranges[-1][1]):
            raise ConfigError("regression ranges must start at 0 and end at inf")
        for (lo, hi), (lo2, _) in zip(ranges, ranges[1:]):
            if hi != lo2:
                raise ConfigError("regression ranges must partition (0, inf)")
        if num_classes < 1:
            raise ConfigError("need at least one class")
        self.num_classes = num_classes
        self.levels = levels
        self.ranges = tuple((float(lo), float(hi)) for lo, hi in ranges)
        self.score_thresh = score_thresh
        self.nms_tiou = nms_tiou
        self.max_proposals = max_proposals
        self.kernel = kernel


class Proposal:
    """Scored candidate action interval, in seconds."""

    __slots__ = ("t_start", "t_end", "class_id", "score", "video_id")

    def __init__(self, t_start: float, t_end: float, class_id: int,
                 score: float, video_id: str = ""):
        self.t_start = float(t_start)
        self.t_end = float(t_end)
        self.class_id = int(class_id)
        self.score = float(score)
        self.video_id = video_id

    def __repr__(self):
        return (f"Proposal({self.t_start:.3f}, {self.t_end:.3f}, "
                f"c={self.class_id}, s={self.score:.3f})")


class HeadWeights:
    def __init__(self, channels: int, cfg: PyramidConfig, seed: int = 0,
                 cls_bias_init: float = -2.0):
        self.channels = channels
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        c, k_sz = channels, cfg.kernel

        def u(fan_in, shape, name):
            b = 1.0 / math.sqrt(fan_in)
            return Parameter(rng.uniform(-b, b, size=shape).astype(np.float32), name)

        def const(value, shape, name):
            return Parameter(np.full(shape, value, dtype=np.float32), name)

        self.downs = []
        for i in range(cfg.levels - 1):
            p = f"head.down{i}"
            ident = np.zeros((c, k_sz), dtype=np.float32)
            ident[:, (k_sz - 1) // 2] = 1.0
            self.downs.append({
                "kernel": Parameter(ident, f"{p}.kernel"),
                "bias": const(0.0, (c,), f"{p}.bias"),
                "ln_g": const(1.0, (c,), f"{p}.ln_g"),
                "ln_b": const(0.0, (c,), f"{p}.ln_b"),
            })
        self.cls_w1 = u(c, (c, c), "head.cls_w1")
        self.cls_b1 = const(0.0, (c,), "head.cls_b1")
        self.cls_w = u(c, (c, cfg.num_classes), "head.cls_w")
        self.cls_b = const(cls_bias_init, (cfg.num_classes,), "head.cls_b")
        self.reg_w1 = u(c, (c, c), "head.reg_w1")
        self.reg_b1 = const(0.0, (c,), "head.reg_b1")
        self.reg_w = u(c, (c, 2), "head.reg_w")
        self.reg_b = const(0.0, (2,), "head.reg_b")

    def params(self) -> list[Parameter]:
        out = []
        for dn in self.downs:
            out.extend(dn.values())
        out.extend([self.cls_w1, self.cls_b1, self.cls_w, self.cls_b,
                    self.reg_w1, self.reg_b1, self.reg_w, self.reg_b])
        return out


def head_param_count(channels: int, cfg: PyramidConfig) -> int:
    c, k = channels, cfg.kernel
    per_down = c * k + c + 2 * c
    branch = (c * c + c) + (c * cfg.num_classes + cfg.num_classes) \
        + (c * c + c) + (c * 2 + 2)
    return (cfg.levels - 1) * per_down + branch


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def _downsample(x: Tensor, dn) -> Tensor:
    t, c = x.shape
    y = tt.reshape(tt.transpose(x, (1, 0)), (c, t, 1, 1))
    y = tt.depthwise_temporal_conv(y, dn["kernel"].tensor, dn["bias"].tensor,
                                   stride=2)
    t2 = y.shape[1]
    y = tt.transpose(tt.reshape(y, (c, t2)), (1, 0))
    return tt.layer_norm(y, dn["ln_g"].tensor, dn["ln_b"].tensor)


def head_forward(f, w: HeadWeights):
    """FeatureMap -> per level (class logits [T_l, K], distances [T_l, 2])."""
    cfg = w.cfg
    if f.length < 2 ** cfg.levels:
        raise ConfigError(f"feature length {f.length} too short for "
                          f"{cfg.levels} pyramid levels")
    if f.channels != w.channels:
        raise ShapeError(f"head built for {w.channels} channels, "
                         f"feature map has {f.channels}")
    outputs = []
    with tt.region("head"):
        x = f.values
        for lvl in range(cfg.levels):
            if lvl > 0:
                x = _downsample(x, w.downs[lvl - 1])
            h_cls = tt.gelu(tt.matmul(x, w.cls_w1.tensor) + w.cls_b1.tensor)
            logits = tt.matmul(h_cls, w.cls_w.tensor) + w.cls_b.tensor
            h_reg = tt.gelu(tt.matmul(x, w.reg_w1.tensor) + w.reg_b1.tensor)
            dists = tt.softplus(tt.matmul(h_reg, w.reg_w.tensor) + w.reg_b.tensor)
            outputs.append((logits, dists))
    return outputs


def level_lengths(t: int, levels: int) -> list[int]:
    out = [t]
    for _ in range(levels - 1):
        out.append((out[-1] + 1) // 2)
    return out


# ---------------------------------------------------------------------------
# target assignment
# ---------------------------------------------------------------------------

def assign_targets(annotations, cfg: PyramidConfig, t: int,
                   base_stride: float = 1.0, fps: float = 1.0):
    """Per-level location targets for one feature window.

    Location i on level l sits at frame i * base_stride * 2^l. It is
    positive for an action iff the location lies inside the action and its
    max boundary distance (in base-stride units) falls in the level's
    range; competing actions resolve to the shortest. Regression targets
    are boundary distances in the level's own stride.
    """
    lengths = level_lengths(t, cfg.levels)
    anns = [(a.t_s * fps, a.t_e * fps, a.c) for a in annotations]
    targets = []
    for lvl, t_l in enumerate(lengths):
        stride = base_stride * (2 ** lvl)
        lo, hi = cfg.ranges[lvl]
        lo_f, hi_f = lo * base_stride, hi * base_stride
        cls = np.zeros((t_l, cfg.num_classes), dtype=np.float32)
        reg = np.zeros((t_l, 2), dtype=np.float32)
        pos = np.zeros(t_l, dtype=bool)
        gs = np.zeros(t_l, dtype=np.float32)
        ge = np.ones(t_l, dtype=np.float32)           # dummy span off positives
        times = np.arange(t_l, dtype=np.float64) * stride
        for i, tc in enumerate(times):
            best = None
            for ts, te, c in anns:
                if not (ts <= tc <= te):
                    continue
                reach = max(tc - ts, te - tc)
                if not (lo_f <= reach < hi_f):
                    continue
                if best is None or (te - ts) < (best[1] - best[0]):
                    best = (ts, te, c)
            if best is not None:
                ts, te, c = best
                pos[i] = True
                cls[i, c] = 1.0
                reg[i, 0] = (tc - ts) / stride
                reg[i, 1] = (te - tc) / stride
                gs[i] = ts
                ge[i] = te
        targets.append({"cls": cls, "reg": reg, "pos": pos, "gs": gs, "ge": ge,
                        "stride": stride, "times": times.astype(np.float32)})
    return targets


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def compute_loss(outputs, targets, cfg: PyramidConfig) -> Tensor:
    """Sigmoid focal classification (mean over locations) + 1 - tIoU over
    positives, weighted 1:1."""
    total_locations = sum(tgt["cls"].shape[0] for tgt in targets)
    total_pos = sum(int(tgt["pos"].sum()) for tgt in targets)
    cls_sum = None
    reg_sum = None
    with tt.region("head"):
        for (logits, dists), tgt in zip(outputs, targets):
            y = Tensor(tgt["cls"])
            p = tt.sigmoid(logits)
            one = Tensor(np.float32(1.0))
            # stable log terms: log p = -softplus(-z), log(1-p) = -softplus(z)
            pos_term = tt.mul(y, tt.pow_const(one - p, FOCAL_GAMMA)) \
                * tt.softplus(-logits) * FOCAL_ALPHA
            neg_term = tt.mul(one - y, tt.pow_const(p, FOCAL_GAMMA)) \
                * tt.softplus(logits) * (1.0 - FOCAL_ALPHA)
            level_sum = tt.sum_(pos_term + neg_term)
            cls_sum = level_sum if cls_sum is None else cls_sum + level_sum

            if tgt["pos"].any():
                stride = tgt["stride"]
                times = Tensor(tgt["times"])
                d_s = tt.reshape(tt.slice_(dists, 1, 0, 1), (dists.shape[0],))
                d_e = tt.reshape(tt.slice_(dists, 1, 1, 2), (dists.shape[0],))
                ps = times - d_s * stride
                pe = times + d_e * stride
                gs = Tensor(tgt["gs"])
                ge = Tensor(tgt["ge"])
                zero = Tensor(np.float32(0.0))
                inter = tt.maximum(tt.minimum(pe, ge) - tt.maximum(ps, gs), zero)
                union = (pe - ps) + (ge - gs) - inter
                iou = tt.div(inter, union)
                mask = Tensor(tgt["pos"].astype(np.float32))
                lvl_reg = tt.sum_(tt.mul(one - iou, mask))
                reg_sum = lvl_reg if reg_sum is None else reg_sum + lvl_reg

        loss = cls_sum * (1.0 / total_locations)
        if reg_sum is not None:
            loss = loss + reg_sum * (1.0 / max(total_pos, 1))
    return loss


# ---------------------------------------------------------------------------
# decoding and suppression
# ---------------------------------------------------------------------------

def decode_proposals(outputs, cfg: PyramidConfig, base_stride: float = 1.0,
                     fps: float = 1.0, frame_offset: float = 0.0,
                     video_id: str = "") -> list[Proposal]:
    """Thresholded per-location decoding followed by class-wise NMS.

    Interval per location: (t - d_s * stride_l, t + d_e * stride_l) in
    frames, shifted by frame_offset and converted to seconds.
    """
    raw: list[Proposal] = []
    for lvl, (logits, dists) in enumerate(outputs):
        stride = base_stride * (2 ** lvl)
        z = logits.data
        probs = 1.0 / (1.0 + np.exp(-z))
        cls = probs.argmax(axis=1)
        score = probs.max(axis=1)
        keep = np.nonzero(score > cfg.score_thresh)[0]
        dd = dists.data
        for i in keep:
            tc = i * stride
            ts = tc - dd[i, 0] * stride + frame_offset
            te = tc + dd[i, 1] * stride + frame_offset
            if te <= ts:  # both distances underflowed; invalid interval
                continue
            raw.append(Proposal(ts / fps, te / fps, int(cls[i]),
                                float(score[i]), video_id=video_id))
    return nms(raw, cfg.nms_tiou, cfg.max_proposals)


def nms(proposals: list[Proposal], tiou_thresh: float,
        max_keep: int) -> list[Proposal]:
    """Greedy hard suppression within each class; top max_keep overall."""
    by_class: dict[int, list[Proposal]] = {}
    for p in proposals:
        by_class.setdefault(p.class_id, []).append(p)
    kept: list[Proposal] = []
    for props in by_class.values():
        props = sorted(props, key=lambda p: -p.score)
        alive = []
        for p in props:
            if all(tiou((p.t_start, p.t_end), (q.t_start, q.t_end)) <= tiou_thresh
                   for q in alive):
                alive.append(p)
        kept.extend(alive)
    kept.sort(key=lambda p: -p.score)
    return kept[:max_keep]
