"""Bottleneck adapters for frozen video backbones.

Two families live here. The standard adapter is a down-project / GELU /
up-project residual block. The temporal-informative adapter (TIA) inserts a
depth-wise temporal convolution inside the bottleneck so each frame's
feature can borrow evidence from its neighbours, plus a learnable output
scale. The up-projection starts at exactly zero, which makes every freshly
initialized adapter an identity map (or a zero map in side placement) and
keeps early training anchored to the frozen trunk.

All forwards accept channel-first feature maps shaped [d, t, h, w] and run
inside the "adapter" region tag.
"""

from __future__ import annotations

import numpy as np

from . import tensor as tt
from .tensor import ConfigError, Parameter, Tensor


class TIAWeights:
    """Weights of one temporal-informative adapter.

    Bottleneck width is d // gamma. dw_kernel holds one temporal kernel row
    per bottleneck channel. alpha scales the whole up-projected branch.
    """

    kind = "tia"

    def __init__(self, d, gamma, k, w_down, b_down, w_mid, b_mid,
                 dw_kernel, dw_bias, w_up, b_up, alpha):
        self.d = d
        self.gamma = gamma
        self.k = k
        self.w_down = w_down
        self.b_down = b_down
        self.w_mid = w_mid
        self.b_mid = b_mid
        self.dw_kernel = dw_kernel
        self.dw_bias = dw_bias
        self.w_up = w_up
        self.b_up = b_up
        self.alpha = alpha

    def params(self) -> list[Parameter]:
        return [self.w_down, self.b_down, self.w_mid, self.b_mid,
                self.dw_kernel, self.dw_bias, self.w_up, self.b_up, self.alpha]

    @property
    def hidden(self) -> int:
        return self.d // self.gamma


class StandardAdapterWeights:
    """Plain bottleneck adapter: up(gelu(down(x))) + x."""

    kind = "standard"

    def __init__(self, d, gamma, w_down, b_down, w_up, b_up):
        self.d = d
        self.gamma = gamma
        self.k = 1
        self.w_down = w_down
        self.b_down = b_down
        self.w_up = w_up
        self.b_up = b_up

    def params(self) -> list[Parameter]:
        return [self.w_down, self.b_down, self.w_up, self.b_up]

    @property
    def hidden(self) -> int:
        return self.d // self.gamma


class PlacementMode:
    """Where adapters sit: inside each block, or outside on a side path.

    Outside placement optionally adapts only the last half of the trunk's
    layers.
    """

    def __init__(self, kind: str = "inside", adapt_last_half: bool = False):
        if kind not in ("inside", "outside"):
            raise ConfigError(f"unknown placement {kind!r}")
        if kind == "inside" and adapt_last_half:
            raise ConfigError("adapt_last_half applies to outside placement only")
        self.kind = kind
        self.adapt_last_half = adapt_last_half

    def __repr__(self):
        return f"PlacementMode({self.kind!r}, adapt_last_half={self.adapt_last_half})"


def _check_dims(d: int, gamma: int, k: int) -> int:
    if gamma < 2:
        raise ConfigError(f"gamma must be >= 2, got {gamma}")
    if d % gamma != 0:
        raise ConfigError(f"channels d={d} not divisible by gamma={gamma}")
    if k < 1 or k % 2 == 0:
        raise ConfigError(f"temporal kernel size must be odd and positive, got {k}")
    return d // gamma


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def init_tia(d: int, gamma: int = 4, k: int = 3, seed: int = 0,
             name: str = "tia") -> TIAWeights:
    """Fresh TIA weights: zero up-projection and bias, alpha 1, identity
    temporal kernel, bounded-uniform down/mid projections."""
    h = _check_dims(d, gamma, k)
    rng = np.random.default_rng(seed)
    ident = np.zeros((h, k), dtype=np.float32)
    ident[:, (k - 1) // 2] = 1.0
    return TIAWeights(
        d, gamma, k,
        w_down=Parameter(_uniform(rng, d, (d, h)), f"{name}.w_down"),
        b_down=Parameter(np.zeros(h, dtype=np.float32), f"{name}.b_down"),
        w_mid=Parameter(_uniform(rng, h, (h, h)), f"{name}.w_mid"),
        b_mid=Parameter(np.zeros(h, dtype=np.float32), f"{name}.b_mid"),
        dw_kernel=Parameter(ident, f"{name}.dw_kernel"),
        dw_bias=Parameter(np.zeros(h, dtype=np.float32), f"{name}.dw_bias"),
        w_up=Parameter(np.zeros((h, d), dtype=np.float32), f"{name}.w_up"),
        b_up=Parameter(np.zeros(d, dtype=np.float32), f"{name}.b_up"),
        alpha=Parameter(np.float32(1.0), f"{name}.alpha"),
    )


def init_standard(d: int, gamma: int = 4, seed: int = 0,
                  name: str = "adapter") -> StandardAdapterWeights:
    h = _check_dims(d, gamma, 1)
    rng = np.random.default_rng(seed)
    return StandardAdapterWeights(
        d, gamma,
        w_down=Parameter(_uniform(rng, d, (d, h)), f"{name}.w_down"),
        b_down=Parameter(np.zeros(h, dtype=np.float32), f"{name}.b_down"),
        w_up=Parameter(np.zeros((h, d), dtype=np.float32), f"{name}.w_up"),
        b_up=Parameter(np.zeros(d, dtype=np.float32), f"{name}.b_up"),
    )


def make_adapter(kind: str, d: int, gamma: int = 4, k: int = 3, seed: int = 0,
                 name: str = "adapter"):
    """Factory over the ablation family {standard, tia, tia_no_residual}."""
    if kind == "standard":
        return init_standard(d, gamma, seed=seed, name=name)
    if kind in ("tia", "tia_no_residual"):
        return init_tia(d, gamma, k, seed=seed, name=name)
    raise ConfigError(f"unknown adapter kind {kind!r}")


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def _to_tokens(x: Tensor):
    d, t, h, w = x.shape
    tok = tt.reshape(tt.transpose(x, (1, 2, 3, 0)), (t * h * w, d))
    return tok, (t, h, w)


def _from_tokens(tok: Tensor, thw, d: int) -> Tensor:
    t, h, w = thw
    return tt.transpose(tt.reshape(tok, (t, h, w, d)), (3, 0, 1, 2))


def _bottleneck(w: TIAWeights, x: Tensor, inner_residual: bool):
    """Shared TIA body up to (but excluding) the up-projection."""
    if x.ndim != 4 or x.shape[0] != w.d:
        raise tt.ShapeError(f"adapter expects [{w.d},t,h,w], got {x.shape}")
    tok, thw = _to_tokens(x)
    down = tt.gelu(tt.matmul(tok, w.w_down.tensor) + w.b_down.tensor)
    mixed = _from_tokens(down, thw, w.hidden)
    mixed = tt.depthwise_temporal_conv(mixed, w.dw_kernel.tensor, w.dw_bias.tensor)
    mixed = _to_tokens(mixed)[0]
    hat = tt.matmul(mixed, w.w_mid.tensor) + w.b_mid.tensor
    if inner_residual:
        hat = hat + down
    return tok, hat, thw


def tia_forward(w: TIAWeights, x: Tensor) -> Tensor:
    """Full temporal-informative adapter with both residual connections."""
    with tt.region("adapter"):
        tok, hat, thw = _bottleneck(w, x, inner_residual=True)
        up = (tt.matmul(hat, w.w_up.tensor) + w.b_up.tensor) * w.alpha.tensor
        return _from_tokens(up + tok, thw, w.d)


def tia_no_residual_forward(w: TIAWeights, x: Tensor) -> Tensor:
    """Ablation variant: the bottleneck's inner residual is removed."""
    with tt.region("adapter"):
        tok, hat, thw = _bottleneck(w, x, inner_residual=False)
        up = (tt.matmul(hat, w.w_up.tensor) + w.b_up.tensor) * w.alpha.tensor
        return _from_tokens(up + tok, thw, w.d)


def tia_side_forward(w: TIAWeights, x: Tensor) -> Tensor:
    """Side-path variant: returns only the scaled branch, no addition of x.

    Fresh weights therefore return an all-zero tensor.
    """
    with tt.region("adapter"):
        _, hat, thw = _bottleneck(w, x, inner_residual=True)
        up = (tt.matmul(hat, w.w_up.tensor) + w.b_up.tensor) * w.alpha.tensor
        return _from_tokens(up, thw, w.d)


def standard_adapter_forward(w: StandardAdapterWeights, x: Tensor) -> Tensor:
    if x.ndim != 4 or x.shape[0] != w.d:
        raise tt.ShapeError(f"adapter expects [{w.d},t,h,w], got {x.shape}")
    with tt.region("adapter"):
        tok, thw = _to_tokens(x)
        down = tt.gelu(tt.matmul(tok, w.w_down.tensor) + w.b_down.tensor)
        up = tt.matmul(down, w.w_up.tensor) + w.b_up.tensor
        return _from_tokens(up + tok, thw, w.d)


def apply_adapter(w, x: Tensor, kind: str | None = None, side: bool = False) -> Tensor:
    """Dispatch by adapter kind; `side` switches off the outer residual."""
    kind = kind or w.kind
    if side:
        if not isinstance(w, TIAWeights):
            raise ConfigError("side placement requires TIA weights")
        return tia_side_forward(w, x)
    if kind == "standard":
        return standard_adapter_forward(w, x)
    if kind == "tia":
        return tia_forward(w, x)
    if kind == "tia_no_residual":
        return tia_no_residual_forward(w, x)
    raise ConfigError(f"unknown adapter kind {kind!r}")


# ---------------------------------------------------------------------------
# parameter accounting
# ---------------------------------------------------------------------------

def count_params(w, include_bias: bool = True) -> int:
    """Stored parameter elements, closed form.

    The alpha scale counts as a weight, so it survives include_bias=False.
    """
    h = w.hidden
    d = w.d
    if isinstance(w, TIAWeights):
        n = d * h + h * h + h * w.k + h * d + 1
        if include_bias:
            n += h + h + h + d
        return n
    if isinstance(w, StandardAdapterWeights):
        n = d * h + h * d
        if include_bias:
            n += h + d
        return n
    raise ConfigError(f"cannot count {type(w).__name__}")


# ---------------------------------------------------------------------------
# serialization: one-line text header, then tensor blobs in fixed order
# ---------------------------------------------------------------------------

def save_adapter(path, w) -> None:
    with open(path, "wb") as fp:
        if isinstance(w, TIAWeights):
            fp.write(f"tia d={w.d} gamma={w.gamma} k={w.k}\n".encode())
        else:
            fp.write(f"standard d={w.d} gamma={w.gamma}\n".encode())
        for p in w.params():
            tt.write_tensor(fp, p.tensor)


def load_adapter(path):
    with open(path, "rb") as fp:
        header = b""
        while True:
            ch = fp.read(1)
            if not ch or ch == b"\n":
                break
            header += ch
        fields = header.decode().split()
        if not fields:
            raise ConfigError(f"empty adapter header in {path}")
        meta = dict(f.split("=") for f in fields[1:])
        d, gamma = int(meta["d"]), int(meta["gamma"])
        if fields[0] == "tia":
            w = init_tia(d, gamma, int(meta["k"]))
        elif fields[0] == "standard":
            w = init_standard(d, gamma)
        else:
            raise ConfigError(f"unknown adapter header kind {fields[0]!r}")
        for p in w.params():
            loaded = tt.read_tensor(fp)
            if loaded.shape != p.tensor.shape:
                raise ConfigError(f"blob shape {loaded.shape} does not match "
                                  f"{p.name} {p.tensor.shape}")
            p.tensor.data = loaded.data.reshape(p.tensor.data.shape)
        return w
