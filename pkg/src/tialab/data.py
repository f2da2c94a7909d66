"""Synthetic untrimmed videos with interval annotations, plus the
preprocessing ops the training pipeline needs.

Each action instance adds a class-specific pattern on top of Gaussian
noise: a temporal sinusoid whose frequency grows with the class index,
spatially localized by a Gaussian blob. Classes therefore share per-frame
statistics and differ mainly in temporal structure, which is exactly what
a temporal adapter should exploit.

Generation is deterministic per (seed, video index), so datasets never
need to exist on disk to be reproducible; a disk format is provided
anyway (one tensor blob per video plus annotations.csv / meta.csv).
"""

from __future__ import annotations

import os

import numpy as np

from . import tensor as tt
from .tensor import ConfigError


class GenerationError(Exception):
    """Could not satisfy generation constraints (e.g. action placement)."""


class ActionAnnotation:
    __slots__ = ("t_s", "t_e", "c")

    def __init__(self, t_s: float, t_e: float, c: int):
        if not (t_s < t_e):
            raise ValueError(f"annotation needs t_s < t_e, got ({t_s}, {t_e})")
        self.t_s = float(t_s)
        self.t_e = float(t_e)
        self.c = int(c)

    def __repr__(self):
        return f"ActionAnnotation({self.t_s:.3f}, {self.t_e:.3f}, c={self.c})"


class VideoSample:
    """frames [3, T, H, W] float32; annotations in seconds."""

    def __init__(self, frames: np.ndarray, annotations, id: str = "",
                 fps: float = 1.0):
        frames = np.asarray(frames, dtype=np.float32)
        if frames.ndim != 4 or frames.shape[0] != 3:
            raise ValueError(f"frames must be [3,T,H,W], got {frames.shape}")
        duration = frames.shape[1] / fps
        for a in annotations:
            if a.t_s < 0 or a.t_e > duration + 1e-9:
                raise ValueError(f"{a} outside [0, {duration:.3f}]")
        self.frames = frames
        self.annotations = list(annotations)
        self.id = id
        self.fps = float(fps)

    @property
    def num_frames(self) -> int:
        return self.frames.shape[1]

    @property
    def duration(self) -> float:
        return self.frames.shape[1] / self.fps


class SyntheticSpec:
    def __init__(self, k_classes: int = 3, t_range=(128, 512),
                 actions_range=(1, 4), amplitude: float = 1.5,
                 noise: float = 0.25, height: int = 16, width: int = 16,
                 duration_range=(8, 48), fps: float = 1.0, seed: int = 0):
        if t_range[0] > t_range[1] or actions_range[0] > actions_range[1] \
                or duration_range[0] > duration_range[1]:
            raise ConfigError("empty range in synthetic spec")
        if k_classes < 1:
            raise ConfigError("need at least one class")
        self.k_classes = k_classes
        self.t_range = tuple(t_range)
        self.actions_range = tuple(actions_range)
        self.amplitude = float(amplitude)
        self.noise = float(noise)
        self.height = height
        self.width = width
        self.duration_range = tuple(duration_range)
        self.fps = float(fps)
        self.seed = seed


def _class_pattern(c: int, length: int, hw, rng, amplitude: float) -> np.ndarray:
    """Additive [3, length, H, W] pattern: class-frequency sinusoid in a blob."""
    h, w = hw
    freq = (c + 1) / 16.0                              # cycles per frame
    phase = rng.uniform(0.0, 2.0 * np.pi)
    wave = np.sin(2.0 * np.pi * freq * np.arange(length) + phase)
    cy = rng.uniform(0.25 * h, 0.75 * h)
    cx = rng.uniform(0.25 * w, 0.75 * w)
    sigma = 0.22 * min(h, w)
    yy, xx = np.mgrid[0:h, 0:w]
    blob = np.exp(-(((yy - cy) ** 2) + ((xx - cx) ** 2)) / (2.0 * sigma ** 2))
    pat = amplitude * wave[None, :, None, None] * blob[None, None, :, :]
    return np.repeat(pat, 3, axis=0).astype(np.float32)


def generate_video(spec: SyntheticSpec, index: int) -> VideoSample:
    rng = np.random.default_rng([spec.seed, index])
    t = int(rng.integers(spec.t_range[0], spec.t_range[1] + 1))
    frames = rng.normal(0.0, spec.noise,
                        size=(3, t, spec.height, spec.width)).astype(np.float32)
    n_actions = int(rng.integers(spec.actions_range[0], spec.actions_range[1] + 1))
    placed: list[ActionAnnotation] = []
    for _ in range(n_actions):
        for attempt in range(100):
            c = int(rng.integers(0, spec.k_classes))
            dmax = min(spec.duration_range[1], t)
            dur = int(rng.integers(spec.duration_range[0], dmax + 1))
            start = int(rng.integers(0, t - dur + 1))
            ts, te = start, start + dur
            clash = any(a.c == c and not (te <= a.t_s * spec.fps or
                                          ts >= a.t_e * spec.fps)
                        for a in placed)
            if clash:
                continue
            frames[:, ts:te] += _class_pattern(c, dur, (spec.height, spec.width),
                                               rng, spec.amplitude)
            placed.append(ActionAnnotation(ts / spec.fps, te / spec.fps, c))
            break
        else:
            raise GenerationError(
                f"could not place a non-overlapping action after 100 attempts "
                f"(video {index}, {len(placed)} placed)")
    placed.sort(key=lambda a: a.t_s)
    return VideoSample(frames, placed, id=f"v{index:05d}", fps=spec.fps)


def generate_dataset(spec: SyntheticSpec, n_videos: int) -> list[VideoSample]:
    return [generate_video(spec, i) for i in range(n_videos)]


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def resize_video(v: VideoSample, target_t: int) -> VideoSample:
    """Uniform index resampling to target_t frames; annotations stay fixed
    in seconds via an adjusted frame rate."""
    if target_t < 2:
        raise ConfigError(f"target_t must be >= 2, got {target_t}")
    t = v.num_frames
    idx = np.round(np.arange(target_t) * (t - 1) / (target_t - 1)).astype(int)
    new_fps = v.fps * target_t / t
    return VideoSample(v.frames[:, idx], [ActionAnnotation(a.t_s, a.t_e, a.c)
                                          for a in v.annotations],
                       id=v.id, fps=new_fps)


def truncate_window(v: VideoSample, win_len: int, stride: int = 1,
                    rng: np.random.Generator | None = None,
                    keep_ratio: float = 0.25,
                    align: int = 1) -> tuple[VideoSample, int]:
    """Random training window: every stride-th frame for win_len frames.

    Annotations are clipped to the window and dropped when less than
    keep_ratio of their length survives. Windows with no annotations are
    resampled up to 20 times, then accepted empty. Start positions are
    snapped down to multiples of align. Returns (window, start_frame).
    """
    rng = rng or np.random.default_rng(0)
    span = win_len * stride
    frames = v.frames
    t = v.num_frames
    if t < span:
        pad = np.zeros((3, span - t, frames.shape[2], frames.shape[3]),
                       dtype=frames.dtype)
        frames = np.concatenate([frames, pad], axis=1)
        t = span
    new_fps = v.fps / stride
    for _ in range(20):
        start = int(rng.integers(0, t - span + 1)) // align * align
        w_s, w_e = start / v.fps, (start + span) / v.fps
        kept = []
        for a in v.annotations:
            cs, ce = max(a.t_s, w_s), min(a.t_e, w_e)
            if ce <= cs:
                continue
            if (ce - cs) / (a.t_e - a.t_s) < keep_ratio:
                continue
            kept.append(ActionAnnotation(cs - w_s, ce - w_s, a.c))
        if kept:
            break
    window = frames[:, start:start + span:stride]
    return VideoSample(window, kept, id=v.id, fps=new_fps), start


def sliding_windows(v: VideoSample, win_len: int, overlap: float = 0.25):
    """Inference windows: (start_frame, frames slice) advancing by
    win_len*(1-overlap), final window right-aligned."""
    if not (0.0 <= overlap < 1.0):
        raise ConfigError(f"overlap must be in [0,1), got {overlap}")
    t = v.num_frames
    if win_len >= t:
        return [(0, v.frames)]
    step = max(1, int(round(win_len * (1.0 - overlap))))
    starts = list(range(0, t - win_len + 1, step))
    if starts[-1] != t - win_len:
        starts.append(t - win_len)
    return [(s, v.frames[:, s:s + win_len]) for s in starts]


def _resize_axis_matrix(n_in: int, n_out: int) -> np.ndarray:
    m = np.zeros((n_out, n_in), dtype=np.float32)
    if n_out == 1:
        m[0, :] = 1.0 / n_in
        return m
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    for i in range(n_out):
        pos = i * (n_in - 1) / (n_out - 1)
        lo = int(np.floor(pos))
        hi = min(lo + 1, n_in - 1)
        frac = pos - lo
        m[i, lo] += 1.0 - frac
        if hi != lo:
            m[i, hi] += frac
    return m


def resize_spatial(frames: np.ndarray, out_hw) -> np.ndarray:
    """Bilinear [3,T,h,w] -> [3,T,*out_hw]; exact identity when sizes match."""
    h, w = frames.shape[2], frames.shape[3]
    oh, ow = out_hw
    if (h, w) == (oh, ow):
        return frames.copy()
    mh = _resize_axis_matrix(h, oh)
    mw = _resize_axis_matrix(w, ow)
    return np.einsum("ij,ctjk,lk->ctil", mh, frames, mw).astype(frames.dtype)


def flip_horizontal(v: VideoSample) -> VideoSample:
    return VideoSample(np.ascontiguousarray(v.frames[:, :, :, ::-1]),
                       v.annotations, id=v.id, fps=v.fps)


def augment(v: VideoSample, rng: np.random.Generator, min_area: float = 0.7,
            flip_p: float = 0.5) -> VideoSample:
    """Random spatial crop (>= min_area of the frame) resized back, plus
    horizontal flip with probability flip_p. Temporal geometry, and hence
    the annotations, are untouched."""
    _, _, h, w = v.frames.shape
    area = rng.uniform(min_area, 1.0)
    side = float(np.sqrt(area))
    ch = max(1, int(round(h * side)))
    cw = max(1, int(round(w * side)))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    crop = v.frames[:, :, top:top + ch, left:left + cw]
    frames = resize_spatial(crop, (h, w))
    if rng.random() < flip_p:
        frames = np.ascontiguousarray(frames[:, :, :, ::-1])
    return VideoSample(frames, v.annotations, id=v.id, fps=v.fps)


def downsample_spatial(v: VideoSample, factor: int) -> VideoSample:
    """Mean-pool H and W by an integer factor before the encoder."""
    if factor == 1:
        return v
    _, t, h, w = v.frames.shape
    if h % factor or w % factor:
        raise ConfigError(f"spatial size {(h, w)} not divisible by {factor}")
    f = v.frames.reshape(3, t, h // factor, factor, w // factor, factor)
    return VideoSample(f.mean(axis=(3, 5)), v.annotations, id=v.id, fps=v.fps)


# ---------------------------------------------------------------------------
# disk format
# ---------------------------------------------------------------------------

def save_dataset(dirpath, videos: list[VideoSample]) -> None:
    os.makedirs(dirpath, exist_ok=True)
    with open(os.path.join(dirpath, "annotations.csv"), "w") as afp, \
            open(os.path.join(dirpath, "meta.csv"), "w") as mfp:
        afp.write("video_id,t_start,t_end,class\n")
        mfp.write("video_id,fps,num_frames\n")
        for v in videos:
            tt.save_tensor(os.path.join(dirpath, f"{v.id}.tlab"), v.frames)
            mfp.write(f"{v.id},{v.fps!r},{v.num_frames}\n")
            for a in v.annotations:
                afp.write(f"{v.id},{a.t_s!r},{a.t_e!r},{a.c}\n")


def load_dataset(dirpath) -> list[VideoSample]:
    meta_path = os.path.join(dirpath, "meta.csv")
    if not os.path.exists(meta_path):
        raise ConfigError(f"no dataset at {dirpath} (missing meta.csv)")
    anns: dict[str, list[ActionAnnotation]] = {}
    with open(os.path.join(dirpath, "annotations.csv")) as fp:
        next(fp)
        for line in fp:
            if not line.strip() or line.startswith("#"):
                continue
            vid, ts, te, c = line.strip().split(",")
            anns.setdefault(vid, []).append(
                ActionAnnotation(float(ts), float(te), int(c)))
    videos = []
    with open(meta_path) as fp:
        next(fp)
        for line in fp:
            if not line.strip() or line.startswith("#"):
                continue
            vid, fps, _ = line.strip().split(",")
            frames = tt.load_tensor(os.path.join(dirpath, f"{vid}.tlab")).data
            videos.append(VideoSample(frames, anns.get(vid, []), id=vid,
                                      fps=float(fps)))
    return videos
