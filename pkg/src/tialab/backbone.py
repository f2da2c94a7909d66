"""Transformer video encoder with chunked attention and adapter placements.

The encoder patchifies each frame, groups frames into fixed-length chunks,
and runs self-attention within each chunk. That keeps attention cost linear
in video length while the temporal adapters, applied on the full reassembled
sequence, mix information across chunk boundaries.

Three representations of one video:

* frame: the whole video is one sequence; one pooled feature per frame.
* snippet: one chunk-sized window is encoded independently per frame
  position and pooled over space and time; same feature count, chunk_len
  times the frames pushed through the trunk.
* side: the frozen trunk runs without recording any graph; per-layer taps
  feed side adapters whose outputs sum onto the trunk's final state.

Trunk ops are tagged region "backbone"; the side path's fusion and pooling
are tagged "side" because no gradient ever crosses into trunk ops there.
"""

from __future__ import annotations

import math

import numpy as np

from . import adapters as ad
from . import tensor as tt
from .tensor import ConfigError, Parameter, ShapeError, Tensor

MODES = ("frozen", "full_ft", "adapter_inside", "adapter_outside",
         "full_ft_plus_tia")


class BackboneConfig:
    def __init__(self, num_layers: int = 4, dim: int = 64, heads: int = 4,
                 chunk_len: int = 16, patch: int = 4, mlp_ratio: int = 2,
                 frame_hw: tuple[int, int] = (8, 8), in_channels: int = 3,
                 frozen: bool = True):
        if dim % heads != 0:
            raise ConfigError(f"dim {dim} not divisible by heads {heads}")
        if frame_hw[0] % patch or frame_hw[1] % patch:
            raise ConfigError(f"frame size {frame_hw} not divisible by patch {patch}")
        if chunk_len < 1 or num_layers < 1:
            raise ConfigError("chunk_len and num_layers must be positive")
        self.num_layers = num_layers
        self.dim = dim
        self.heads = heads
        self.chunk_len = chunk_len
        self.patch = patch
        self.mlp_ratio = mlp_ratio
        self.frame_hw = tuple(frame_hw)
        self.in_channels = in_channels
        self.frozen = frozen

    @property
    def grid(self) -> tuple[int, int]:
        return (self.frame_hw[0] // self.patch, self.frame_hw[1] // self.patch)

    @property
    def n_patches(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads


class FeatureMap:
    """Per-frame features after pooling: values [T, C], stride in frames."""

    def __init__(self, values: Tensor, stride: float = 1.0):
        if values.ndim != 2 or values.shape[0] < 1:
            raise ShapeError(f"FeatureMap needs [T,C] with T>=1, got {values.shape}")
        self.values = values
        self.stride = float(stride)

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[1]


class BackboneWeights:
    """All trunk parameters; construction order fixes the manifest order."""

    def __init__(self, cfg: BackboneConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d = cfg.dim
        pdim = cfg.in_channels * cfg.patch * cfg.patch

        def w(shape, name, std=0.02):
            return Parameter(rng.normal(0.0, std, size=shape).astype(np.float32), name)

        def zeros(shape, name):
            return Parameter(np.zeros(shape, dtype=np.float32), name)

        def ones(shape, name):
            return Parameter(np.ones(shape, dtype=np.float32), name)

        self.patch_w = w((pdim, d), "backbone.patch_w")
        self.patch_b = zeros((d,), "backbone.patch_b")
        # zero-init positions: identical tokens stay identical at init
        self.pos_time = zeros((cfg.chunk_len, 1, d), "backbone.pos_time")
        self.pos_space = zeros((1, cfg.n_patches, d), "backbone.pos_space")
        self.blocks = []
        for i in range(cfg.num_layers):
            p = f"backbone.block{i}"
            self.blocks.append({
                "ln1_g": ones((d,), f"{p}.ln1_g"),
                "ln1_b": zeros((d,), f"{p}.ln1_b"),
                "qkv_w": w((d, 3 * d), f"{p}.qkv_w"),
                "qkv_b": zeros((3 * d,), f"{p}.qkv_b"),
                "proj_w": w((d, d), f"{p}.proj_w"),
                "proj_b": zeros((d,), f"{p}.proj_b"),
                "ln2_g": ones((d,), f"{p}.ln2_g"),
                "ln2_b": zeros((d,), f"{p}.ln2_b"),
                "mlp_w1": w((d, cfg.mlp_ratio * d), f"{p}.mlp_w1"),
                "mlp_b1": zeros((cfg.mlp_ratio * d,), f"{p}.mlp_b1"),
                "mlp_w2": w((cfg.mlp_ratio * d, d), f"{p}.mlp_w2"),
                "mlp_b2": zeros((d,), f"{p}.mlp_b2"),
            })
        self.final_g = ones((d,), "backbone.final_g")
        self.final_b = zeros((d,), "backbone.final_b")
        if cfg.frozen:
            freeze_backbone(self)

    def params(self) -> list[Parameter]:
        out = [self.patch_w, self.patch_b, self.pos_time, self.pos_space]
        for blk in self.blocks:
            out.extend(blk.values())
        out.extend([self.final_g, self.final_b])
        return out


def init_backbone(cfg: BackboneConfig, seed: int = 0) -> BackboneWeights:
    return BackboneWeights(cfg, seed=seed)


def freeze_backbone(w: BackboneWeights) -> None:
    for p in w.params():
        p.trainable = False


def set_backbone_trainable(w: BackboneWeights, flag: bool) -> None:
    for p in w.params():
        p.trainable = flag


def backbone_param_count(cfg: BackboneConfig) -> int:
    """Closed-form element count; tests pin it to the enumerated weights."""
    d, r = cfg.dim, cfg.mlp_ratio
    pdim = cfg.in_channels * cfg.patch * cfg.patch
    per_block = (2 * d) + (d * 3 * d + 3 * d) + (d * d + d) + (2 * d) \
        + (d * r * d + r * d) + (r * d * d + d)
    return (pdim * d + d) + (cfg.chunk_len * d + cfg.n_patches * d) \
        + cfg.num_layers * per_block + 2 * d


# ---------------------------------------------------------------------------
# trunk forward
# ---------------------------------------------------------------------------

def _patchify_raw(video: np.ndarray, cfg: BackboneConfig) -> np.ndarray:
    """[3,T,H,W] -> [T, n_patches, 3*p*p], zero-padded to whole chunks."""
    c, t, hh, ww = video.shape
    if (hh, ww) != cfg.frame_hw:
        raise ShapeError(f"backbone configured for frames {cfg.frame_hw}, "
                         f"got {(hh, ww)}")
    p = cfg.patch
    gh, gw = cfg.grid
    pad = (-t) % cfg.chunk_len
    if pad:
        video = np.concatenate(
            [video, np.zeros((c, pad, hh, ww), dtype=video.dtype)], axis=1)
    t_pad = t + pad
    v = video.transpose(1, 2, 3, 0)                   # [T,H,W,3]
    v = v.reshape(t_pad, gh, p, gw, p, c)
    v = v.transpose(0, 1, 3, 2, 4, 5)                 # [T,gh,gw,p,p,3]
    return np.ascontiguousarray(v.reshape(t_pad, gh * gw, p * p * c),
                                dtype=np.float32)


def _proj(tok: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Token-wise affine map for [*, L, d_in] via a flat 2-d matmul."""
    lead = tok.shape[:-1]
    flat = tt.reshape(tok, (int(np.prod(lead)), tok.shape[-1]))
    out = tt.matmul(flat, w) + b
    return tt.reshape(out, lead + (w.shape[1],))


def _attention(x: Tensor, blk, cfg: BackboneConfig) -> Tensor:
    nc, L, d = x.shape
    h, hd = cfg.heads, cfg.head_dim
    qkv = _proj(x, blk["qkv_w"].tensor, blk["qkv_b"].tensor)
    qkv = tt.reshape(qkv, (nc, L, 3, h, hd))
    qkv = tt.transpose(qkv, (2, 0, 3, 1, 4))          # [3,nc,h,L,hd]
    parts = []
    for i in range(3):
        piece = tt.slice_(qkv, 0, i, i + 1)
        parts.append(tt.reshape(piece, (nc * h, L, hd)))
    q, k, v = parts
    scores = tt.matmul(q, tt.transpose(k, (0, 2, 1))) * (1.0 / math.sqrt(hd))
    att = tt.softmax(scores)
    o = tt.matmul(att, v)
    o = tt.transpose(tt.reshape(o, (nc, h, L, hd)), (0, 2, 1, 3))
    o = tt.reshape(o, (nc, L, d))
    return _proj(o, blk["proj_w"].tensor, blk["proj_b"].tensor)


def _block_forward(x: Tensor, blk, cfg: BackboneConfig) -> Tensor:
    h = tt.layer_norm(x, blk["ln1_g"].tensor, blk["ln1_b"].tensor)
    x = x + _attention(h, blk, cfg)
    h = tt.layer_norm(x, blk["ln2_g"].tensor, blk["ln2_b"].tensor)
    h = _proj(tt.gelu(_proj(h, blk["mlp_w1"].tensor, blk["mlp_b1"].tensor)),
              blk["mlp_w2"].tensor, blk["mlp_b2"].tensor)
    return x + h


def _chunked_to_conv(x: Tensor, cfg: BackboneConfig, reassemble: bool) -> Tensor:
    """Chunked tokens [nc, cl*n_p, d] -> adapter layout [d, t, h, w].

    reassemble=True lays out the full frame sequence on the temporal axis
    (t = nc*cl) so temporal kernels cross chunk boundaries; False keeps each
    chunk independent (t = cl, chunks stacked on a spatial axis), which is
    what snippet encoding needs.
    """
    nc, L, d = x.shape
    cl = cfg.chunk_len
    n_p = L // cl
    gh, gw = cfg.grid
    if reassemble:
        y = tt.reshape(x, (nc * cl, gh, gw, d))
        return tt.transpose(y, (3, 0, 1, 2))          # [d, T, gh, gw]
    y = tt.reshape(x, (nc, cl, n_p, d))
    y = tt.transpose(y, (3, 1, 0, 2))                 # [d, cl, nc, n_p]
    return y


def _conv_to_chunked(y: Tensor, cfg: BackboneConfig, nc: int,
                     reassemble: bool) -> Tensor:
    cl = cfg.chunk_len
    n_p = cfg.n_patches
    d = y.shape[0]
    if reassemble:
        x = tt.transpose(y, (1, 2, 3, 0))             # [T, gh, gw, d]
        return tt.reshape(x, (nc, cl * n_p, d))
    x = tt.transpose(y, (2, 1, 3, 0))                 # [nc, cl, n_p, d]
    return tt.reshape(x, (nc, cl * n_p, d))


def _pos_embed(x: Tensor, w: BackboneWeights, nc: int) -> Tensor:
    """Add zero-init learned positions: per-patch and per-frame-in-chunk."""
    cfg = w.cfg
    x = x + w.pos_space.tensor                        # [T,n_p,d] + [1,n_p,d]
    pt = tt.repeat(w.pos_time.tensor, 1, cfg.n_patches)
    if nc > 1:
        pt = tt.concat([pt] * nc, axis=0)
    return x + pt


def _trunk_tokens(video: np.ndarray, w: BackboneWeights,
                  inside_adapters=None, adapter_kind: str | None = None,
                  reassemble: bool = True, taps: list | None = None,
                  num_checkpoint_segments: int | None = None,
                  use_checkpointing: bool = False):
    """Run the encoder; returns (final tokens [T_pad, n_p, d], t_pad)."""
    cfg = w.cfg
    tok_raw = _patchify_raw(video, cfg)
    t_pad = tok_raw.shape[0]
    nc = t_pad // cfg.chunk_len

    if inside_adapters is not None and len(inside_adapters) != cfg.num_layers:
        raise ConfigError(f"need {cfg.num_layers} inside adapters, "
                          f"got {len(inside_adapters)}")

    with tt.region("backbone"):
        x = tt.Tensor(tok_raw)
        x = _proj(x, w.patch_w.tensor, w.patch_b.tensor)
        x = _pos_embed(x, w, nc)
        x = tt.reshape(x, (nc, cfg.chunk_len * cfg.n_patches, x.shape[-1]))

        def layer_fn(i):
            blk = w.blocks[i]

            def fn(t: Tensor) -> Tensor:
                t = _block_forward(t, blk, cfg)
                if taps is not None:
                    taps.append(_chunked_to_conv(t, cfg, reassemble))
                if inside_adapters is not None:
                    y = _chunked_to_conv(t, cfg, reassemble)
                    y = ad.apply_adapter(inside_adapters[i], y, kind=adapter_kind)
                    t = _conv_to_chunked(y, cfg, nc, reassemble)
                return t
            return fn

        fns = [layer_fn(i) for i in range(cfg.num_layers)]
        if use_checkpointing and tt.grad_enabled():
            x = tt.checkpointed_sequence(fns, x, num_segments=num_checkpoint_segments)
        else:
            for fn in fns:
                x = fn(x)

        x = tt.reshape(x, (t_pad, cfg.n_patches, cfg.dim))
        x = tt.layer_norm(x, w.final_g.tensor, w.final_b.tensor)
    return x, t_pad


def _pool_frames(tokens: Tensor, t: int, region_name: str = "backbone") -> FeatureMap:
    with tt.region(region_name):
        pooled = tt.mean(tokens, axis=1)              # [T_pad, d]
        if pooled.shape[0] != t:
            pooled = tt.slice_(pooled, 0, 0, t)
    return FeatureMap(pooled, stride=1.0)


def _video_array(video) -> np.ndarray:
    arr = video.data if isinstance(video, Tensor) else np.asarray(video)
    if arr.ndim != 4:
        raise ShapeError(f"video must be [3,T,H,W], got {arr.shape}")
    if arr.shape[1] == 0:
        raise ShapeError("video has zero frames")
    return arr.astype(np.float32, copy=False)


# ---------------------------------------------------------------------------
# public encode entry points
# ---------------------------------------------------------------------------

def encode_frame_repr(video, w: BackboneWeights, adapters=None,
                      mode: str = "frozen", adapter_kind: str | None = None,
                      use_checkpointing: bool = False) -> FeatureMap:
    """Whole-video encoding, one feature per frame, spatial pooling only."""
    arr = _video_array(video)
    t = arr.shape[1]
    if mode not in MODES:
        raise ConfigError(f"unknown encode mode {mode!r}")
    if mode == "adapter_outside":
        return encode_with_side_adapters(arr, w, adapters)
    if mode == "frozen":
        with tt.no_grad():
            tokens, _ = _trunk_tokens(arr, w)
            return _pool_frames(tokens, t)
    inside = adapters if mode in ("adapter_inside", "full_ft_plus_tia") else None
    tokens, _ = _trunk_tokens(arr, w, inside_adapters=inside,
                              adapter_kind=adapter_kind,
                              use_checkpointing=use_checkpointing)
    return _pool_frames(tokens, t)


def encode_snippet_repr(video, w: BackboneWeights, snippet_len: int = 16,
                        mode: str = "frozen", adapters=None,
                        adapter_kind: str | None = None) -> FeatureMap:
    """One chunk-sized window per frame position, pooled over space and time.

    Processes snippet_len times more frames than frame encoding for the same
    feature count; that factor is the whole point of the comparison.
    """
    arr = _video_array(video)
    t = arr.shape[1]
    if snippet_len > t:
        raise ConfigError(f"snippet_len {snippet_len} exceeds video length {t}")
    if mode not in MODES:
        raise ConfigError(f"unknown encode mode {mode!r}")
    cfg = w.cfg
    if snippet_len != cfg.chunk_len:
        raise ConfigError(f"snippet_len {snippet_len} must equal backbone "
                          f"chunk_len {cfg.chunk_len}")
    starts = np.clip(np.arange(t) - snippet_len // 2, 0, t - snippet_len)
    idx = (starts[:, None] + np.arange(snippet_len)[None, :]).reshape(-1)
    big = arr[:, idx]                                 # [3, t*snippet_len, H, W]

    def run():
        taps = None
        inside = adapters if mode in ("adapter_inside", "full_ft_plus_tia") else None
        tokens, _ = _trunk_tokens(big, w, inside_adapters=inside,
                                  adapter_kind=adapter_kind,
                                  reassemble=False, taps=taps)
        with tt.region("backbone"):
            grouped = tt.reshape(tokens, (t, snippet_len * cfg.n_patches, cfg.dim))
            pooled = tt.mean(grouped, axis=1)         # [t, d]
        return FeatureMap(pooled, stride=1.0)

    if mode == "adapter_outside":
        return _side_encode(big, w, adapters, group=(t, snippet_len),
                            reassemble=False)
    if mode == "frozen":
        with tt.no_grad():
            return run()
    return run()


def encode_with_side_adapters(video, w: BackboneWeights, adapters,
                              adapt_last_half: bool = False) -> FeatureMap:
    """Frozen trunk plus a ladder of side adapters.

    The trunk runs without building any differentiation graph, so no
    backward rule ever fires in the backbone region; only the side branch
    and its fusion train.
    """
    arr = _video_array(video)
    return _side_encode(arr, w, adapters, adapt_last_half=adapt_last_half)


def _side_encode(arr: np.ndarray, w: BackboneWeights, adapters,
                 adapt_last_half: bool = False, group=None,
                 reassemble: bool = True) -> FeatureMap:
    cfg = w.cfg
    n = cfg.num_layers
    tapped = list(range(n // 2, n)) if adapt_last_half else list(range(n))
    if adapters is None or len(adapters) != len(tapped):
        raise ConfigError(f"side placement needs {len(tapped)} adapters, "
                          f"got {0 if adapters is None else len(adapters)}")
    taps: list[Tensor] = []
    with tt.no_grad():
        tokens, t_pad = _trunk_tokens(arr, w, taps=taps, reassemble=reassemble)
    base = Tensor(tokens.data)                        # graph-free trunk output
    nc = t_pad // cfg.chunk_len
    with tt.region("side"):
        acc = base
        for li in tapped:
            tap = Tensor(taps[li].data)               # detached tap
            branch = ad.apply_adapter(adapters[tapped.index(li)], tap, side=True)
            branch = _conv_to_chunked(branch, cfg, nc, reassemble)
            branch = tt.reshape(branch, (t_pad, cfg.n_patches, cfg.dim))
            acc = acc + branch
        if group is not None:
            t, sl = group
            grouped = tt.reshape(acc, (t, sl * cfg.n_patches, cfg.dim))
            pooled = tt.mean(grouped, axis=1)
            return FeatureMap(pooled, stride=1.0)
        pooled = tt.mean(acc, axis=1)
        t = arr.shape[1]
        if pooled.shape[0] != t:
            pooled = tt.slice_(pooled, 0, 0, t)
    return FeatureMap(pooled, stride=1.0)


def encode(video, w: BackboneWeights, mode: str = "frozen",
           representation: str = "frame", adapters=None,
           adapter_kind: str | None = None, snippet_len: int = 16,
           adapt_last_half: bool = False,
           use_checkpointing: bool = False) -> FeatureMap:
    """Mode/representation dispatcher used by the training loop."""
    if representation == "frame":
        if mode == "adapter_outside":
            return encode_with_side_adapters(video, w, adapters,
                                             adapt_last_half=adapt_last_half)
        return encode_frame_repr(video, w, adapters=adapters, mode=mode,
                                 adapter_kind=adapter_kind,
                                 use_checkpointing=use_checkpointing)
    if representation == "snippet":
        return encode_snippet_repr(video, w, snippet_len=snippet_len,
                                   mode=mode, adapters=adapters,
                                   adapter_kind=adapter_kind)
    raise ConfigError(f"unknown representation {representation!r}")


def build_adapters(cfg: BackboneConfig, kind: str = "tia", gamma: int = 4,
                   k: int = 3, seed: int = 0, count: int | None = None):
    """One adapter per covered layer, each with a derived seed."""
    n = cfg.num_layers if count is None else count
    return [ad.make_adapter(kind, cfg.dim, gamma=gamma, k=k,
                            seed=seed * 1000 + i, name=f"adapter{i}")
            for i in range(n)]


def side_adapter_count(cfg: BackboneConfig, adapt_last_half: bool) -> int:
    n = cfg.num_layers
    return n - n // 2 if adapt_last_half else n


# ---------------------------------------------------------------------------
# manifest serialization (shared with head weights via the param list)
# ---------------------------------------------------------------------------

def save_params(path, params: list[Parameter]) -> None:
    """Manifest text block (name shape... frozen-flag per line), then blobs."""
    lines = []
    for p in params:
        shape = ",".join(str(s) for s in p.tensor.shape)
        lines.append(f"{p.name} [{shape}] trainable={int(p.trainable)}")
    header = ("\n".join(lines) + "\n---\n").encode()
    with open(path, "wb") as fp:
        fp.write(f"{len(params)}\n".encode())
        fp.write(header)
        for p in params:
            tt.write_tensor(fp, p.tensor)


def load_params(path, params: list[Parameter]) -> None:
    """Restore values into an existing parameter list, checking the manifest."""
    with open(path, "rb") as fp:
        count = int(fp.readline().decode().strip())
        if count != len(params):
            raise ConfigError(f"checkpoint holds {count} params, model has "
                              f"{len(params)}")
        names = []
        while True:
            line = fp.readline().decode().rstrip("\n")
            if line == "---":
                break
            if not line:
                raise ConfigError("truncated checkpoint manifest")
            names.append(line.split(" ")[0])
        for p, name in zip(params, names):
            if p.name != name:
                raise ConfigError(f"checkpoint param {name!r} does not match "
                                  f"model param {p.name!r}")
            loaded = tt.read_tensor(fp)
            if loaded.data.size != p.tensor.data.size:
                raise ConfigError(f"size mismatch for {name}")
            p.tensor.data = loaded.data.reshape(p.tensor.data.shape)
