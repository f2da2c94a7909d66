"""Analytic model of training-memory traffic per fine-tuning strategy.

The model counts four components. Activations retained for backward scale
with (retained tensors per block) * width * effective frames * blocks
backpropagated through; full fine-tuning and inside adapters keep the whole
trunk's activations (interleaved adapters still need them), while outside
placement keeps only per-layer taps plus the adapters' bottleneck
internals, and a frozen encoder keeps nothing. Snippet encoding multiplies
effective frames by the snippet length; activation checkpointing replaces
the block count by the number of retained segment boundaries. Gradient and
optimizer bytes scale with the trainable parameter count alone.

The absolute numbers deliberately exclude framework overheads (allocator
caching, workspaces, fragmentation); only directions and ratios are meant
to be compared.
"""

from __future__ import annotations

import math

from . import adapters as ad
from .backbone import (BackboneConfig, backbone_param_count,
                       side_adapter_count, MODES)
from .head import PyramidConfig, head_param_count
from .tensor import ConfigError

ACTIVATIONS_PER_BLOCK = 4       # post-attention, post-MLP, two norms
ADAPTER_ACTIVATIONS = 4         # retained inside one adapter bottleneck
OPTIMIZER_STATES = 2            # first and second moment estimates


class ShapeDescriptor:
    """Everything the model needs to size one training setup."""

    def __init__(self, cfg: BackboneConfig, t: int, snippet_len: int = 16,
                 gamma: int = 4, kernel: int = 3, n_classes: int = 3,
                 adapt_last_half: bool = False, head_levels: int = 4):
        self.cfg = cfg
        self.t = int(t)
        self.snippet_len = snippet_len
        self.gamma = gamma
        self.kernel = kernel
        self.n_classes = n_classes
        self.adapt_last_half = adapt_last_half
        self.head_levels = head_levels


class MemoryEstimate:
    FIELDS = ("strategy", "representation", "n_layers", "dim", "t",
              "activation_bytes", "parameter_bytes", "gradient_bytes",
              "optimizer_bytes", "total_bytes")

    def __init__(self, strategy, representation, n_layers, dim, t,
                 activation_bytes, parameter_bytes, gradient_bytes,
                 optimizer_bytes):
        self.strategy = strategy
        self.representation = representation
        self.n_layers = n_layers
        self.dim = dim
        self.t = t
        self.activation_bytes = int(activation_bytes)
        self.parameter_bytes = int(parameter_bytes)
        self.gradient_bytes = int(gradient_bytes)
        self.optimizer_bytes = int(optimizer_bytes)

    @property
    def total_bytes(self) -> int:
        return (self.activation_bytes + self.parameter_bytes
                + self.gradient_bytes + self.optimizer_bytes)

    def row(self) -> list[str]:
        return [self.strategy, self.representation, str(self.n_layers),
                str(self.dim), str(self.t), str(self.activation_bytes),
                str(self.parameter_bytes), str(self.gradient_bytes),
                str(self.optimizer_bytes), str(self.total_bytes)]


def _tia_count(shape: ShapeDescriptor) -> int:
    return ad.count_params(ad.init_tia(shape.cfg.dim, shape.gamma, shape.kernel))


def _param_split(strategy: str, shape: ShapeDescriptor) -> tuple[int, int]:
    """(total, trainable) parameter elements for one strategy."""
    cfg = shape.cfg
    bb = backbone_param_count(cfg)
    hd = head_param_count(cfg.dim, PyramidConfig(shape.n_classes,
                                                 levels=shape.head_levels))
    per_adapter = _tia_count(shape)
    if strategy == "frozen":
        return bb + hd, hd
    if strategy == "full_ft":
        return bb + hd, bb + hd
    if strategy == "adapter_inside":
        n_ad = cfg.num_layers
        return bb + hd + n_ad * per_adapter, hd + n_ad * per_adapter
    if strategy == "adapter_outside":
        n_ad = side_adapter_count(cfg, shape.adapt_last_half)
        return bb + hd + n_ad * per_adapter, hd + n_ad * per_adapter
    if strategy == "full_ft_plus_tia":
        n_ad = cfg.num_layers
        total = bb + hd + n_ad * per_adapter
        return total, total
    raise ConfigError(f"unknown strategy {strategy!r}")


def estimate(strategy: str, shape: ShapeDescriptor,
             representation: str = "frame", checkpointing: bool = False,
             precision: str = "fp32") -> MemoryEstimate:
    if strategy not in MODES:
        raise ConfigError(f"unknown strategy {strategy!r}")
    if representation not in ("frame", "snippet"):
        raise ConfigError(f"unknown representation {representation!r}")
    if precision not in ("fp32", "mixed"):
        raise ConfigError(f"unknown precision {precision!r}")
    cfg = shape.cfg
    bpe_act = 2 if precision == "mixed" else 4
    bpe_master = 4
    t_eff = shape.t if representation == "frame" else shape.t * shape.snippet_len
    n = cfg.num_layers
    n_bp = math.ceil(math.sqrt(n)) if checkpointing else n

    if strategy in ("full_ft", "adapter_inside", "full_ft_plus_tia"):
        act = ACTIVATIONS_PER_BLOCK * cfg.dim * t_eff * n_bp * bpe_act
    elif strategy == "adapter_outside":
        n_ad = side_adapter_count(cfg, shape.adapt_last_half)
        per_tap = cfg.dim + ADAPTER_ACTIVATIONS * (cfg.dim // shape.gamma)
        act = n_ad * per_tap * t_eff * bpe_act
    else:                                   # frozen: no backprop anywhere
        act = 0

    total_p, trainable_p = _param_split(strategy, shape)
    return MemoryEstimate(
        strategy, representation, n, cfg.dim, shape.t,
        activation_bytes=act,
        parameter_bytes=total_p * bpe_master,
        gradient_bytes=trainable_p * bpe_master,
        optimizer_bytes=OPTIMIZER_STATES * trainable_p * bpe_master,
    )


def compare_strategies(shape: ShapeDescriptor, strategies=None,
                       representations=("frame",), checkpointing: bool = False,
                       precision: str = "fp32") -> list[MemoryEstimate]:
    strategies = list(strategies or MODES)
    out = []
    for rep in representations:
        for s in strategies:
            out.append(estimate(s, shape, representation=rep,
                                checkpointing=checkpointing,
                                precision=precision))
    return out


def check_orderings(estimates: list[MemoryEstimate]) -> list[str]:
    """Direction checks the model must satisfy; returns violations."""
    problems = []
    by_key = {(e.strategy, e.representation): e for e in estimates}

    def total(s, rep="frame"):
        e = by_key.get((s, rep))
        return None if e is None else e.total_bytes

    chain = [("full_ft", "adapter_inside"), ("adapter_inside", "adapter_outside")]
    for hi, lo in chain:
        a, b = total(hi), total(lo)
        if a is not None and b is not None and not a > b:
            problems.append(f"total({hi})={a} not > total({lo})={b}")
    for s in ("full_ft", "adapter_inside"):
        fr = by_key.get((s, "frame"))
        sn = by_key.get((s, "snippet"))
        if fr and sn and fr.activation_bytes > 0:
            ratio = sn.activation_bytes / fr.activation_bytes
            if abs(ratio - 16.0) > 1e-9:
                problems.append(f"snippet/frame activation ratio for {s} is "
                                f"{ratio}, expected 16")
    return problems


MEMBENCH_HEADER_COMMENTS = (
    "# analytic training-memory model",
    "# excluded on purpose: framework allocator caching, attention/conv"
    " workspaces, fragmentation, CUDA context and library buffers",
)


def write_membench_csv(path, estimates: list[MemoryEstimate],
                       extra_comments=()) -> None:
    with open(path, "w") as fp:
        for line in MEMBENCH_HEADER_COMMENTS:
            fp.write(line + "\n")
        for line in extra_comments:
            fp.write(f"# {line}\n")
        fp.write(",".join(MemoryEstimate.FIELDS) + "\n")
        for e in estimates:
            fp.write(",".join(e.row()) + "\n")
