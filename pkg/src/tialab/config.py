"""Flat key=value run configuration.

One namespace, dotted keys, no nesting in the file format. Every key has a
typed default below; unknown keys are a startup error (all of them listed
at once), and values are coerced to the default's type. The TIALAB_SEED
environment variable overrides `seed` when set.
"""

from __future__ import annotations

import os

from .tensor import ConfigError

DEFAULTS: dict[str, object] = {
    "seed": 0,
    # synthetic dataset
    "data.dir": "",                  # load from disk when set, else generate
    "data.num_train": 200,
    "data.num_test": 50,
    "data.num_classes": 3,
    "data.t_min": 128,
    "data.t_max": 160,
    "data.min_actions": 1,
    "data.max_actions": 2,
    "data.amplitude": 3.0,
    "data.noise": 0.15,
    "data.height": 8,
    "data.width": 8,
    "data.downsample": 1,
    "data.min_dur": 12.0,
    "data.max_dur": 28.0,
    "data.fps": 1.0,
    # encoder
    "backbone.layers": 4,
    "backbone.dim": 64,
    "backbone.heads": 4,
    "backbone.patch": 4,
    "backbone.chunk_len": 16,
    "backbone.mlp_ratio": 2,
    # tuning strategy
    "mode": "adapter_inside",
    "representation": "frame",
    "snippet_len": 16,
    "adapter.kind": "tia",
    "adapter.gamma": 4,
    "adapter.kernel": 3,
    "adapter.last_half": False,
    "checkpointing": False,
    "precision": "fp32",
    # pyramid head
    "head.levels": 4,
    "head.kernel": 7,
    "head.score_thresh": 0.05,
    "head.nms_tiou": 0.6,
    "head.max_keep": 200,
    # optimization; adapters run slower than the head on purpose
    "train.epochs": 30,
    "train.lr": 5e-3,
    "train.adapter_lr_scale": 0.1,
    "train.warmup": 3,
    "train.weight_decay": 0.01,
    "train.window": 128,
    "train.keep_ratio": 0.25,
    "train.augment": True,
    "train.flip_p": 0.5,
    "train.min_area": 0.7,
    "train.eval_interval": 3,
    "train.early_stop_map": 0.0,
    # evaluation
    "eval.overlap": 0.25,
    "eval.thresholds": (0.3, 0.4, 0.5, 0.6, 0.7),
    # analytic memory runs
    "membench.t": 768,
}


def _coerce(key: str, raw: str):
    default = DEFAULTS[key]
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}")
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {raw!r}")
    if isinstance(default, tuple):
        try:
            return tuple(float(p) for p in raw.split(",") if p.strip())
        except ValueError:
            raise ConfigError(f"{key}: expected comma-separated numbers, "
                              f"got {raw!r}")
    return raw


def parse_config_text(text: str) -> dict[str, str]:
    """Raw key -> value strings; '#' lines and blanks skipped."""
    out: dict[str, str] = {}
    for ln, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {ln}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def load_config(path=None, overrides=None, env=None) -> dict:
    """Defaults <- file <- --set overrides <- TIALAB_SEED."""
    raw: dict[str, str] = {}
    if path is not None:
        with open(path) as fp:
            raw.update(parse_config_text(fp.read()))
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        raw[key.strip()] = value.strip()
    unknown = sorted(k for k in raw if k not in DEFAULTS)
    if unknown:
        raise ConfigError("unknown config keys: " + ", ".join(unknown))
    cfg = dict(DEFAULTS)
    for key, value in raw.items():
        cfg[key] = _coerce(key, value)
    env = os.environ if env is None else env
    seed_env = env.get("TIALAB_SEED")
    if seed_env is not None:
        try:
            cfg["seed"] = int(seed_env)
        except ValueError:
            raise ConfigError(f"TIALAB_SEED must be an integer, got {seed_env!r}")
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    problems = []
    if cfg["train.lr"] < 0:
        problems.append("train.lr must be >= 0")
    if cfg["train.adapter_lr_scale"] < 0:
        problems.append("train.adapter_lr_scale must be >= 0")
    if cfg["train.epochs"] < 1:
        problems.append("train.epochs must be >= 1")
    if cfg["data.num_classes"] < 1:
        problems.append("data.num_classes must be >= 1")
    if cfg["train.window"] % cfg["backbone.chunk_len"] != 0:
        problems.append("train.window must be a multiple of backbone.chunk_len")
    if cfg["data.t_min"] < cfg["train.window"]:
        problems.append("data.t_min must be >= train.window")
    if cfg["data.t_min"] > cfg["data.t_max"]:
        problems.append("data.t_min must be <= data.t_max")
    if cfg["data.downsample"] < 1:
        problems.append("data.downsample must be >= 1")
    else:
        for side in ("height", "width"):
            size = cfg[f"data.{side}"]
            if size % cfg["data.downsample"] != 0:
                problems.append(f"data.{side} must be divisible by data.downsample")
            elif (size // cfg["data.downsample"]) % cfg["backbone.patch"] != 0:
                problems.append(f"data.{side} / data.downsample must be a "
                                "multiple of backbone.patch")
    if cfg["representation"] not in ("frame", "snippet"):
        problems.append("representation must be frame or snippet")
    if (cfg["representation"] == "snippet"
            and cfg["snippet_len"] != cfg["backbone.chunk_len"]):
        problems.append("snippet_len must equal backbone.chunk_len")
    if cfg["mode"] not in ("frozen", "full_ft", "adapter_inside",
                           "adapter_outside", "full_ft_plus_tia"):
        problems.append(f"unknown mode {cfg['mode']!r}")
    if cfg["adapter.kind"] not in ("standard", "tia", "tia_no_residual"):
        problems.append(f"unknown adapter.kind {cfg['adapter.kind']!r}")
    if cfg["precision"] not in ("fp32", "mixed"):
        problems.append("precision must be fp32 or mixed")
    if cfg["train.window"] < 2 ** cfg["head.levels"]:
        problems.append("train.window too short for head.levels")
    th = cfg["eval.thresholds"]
    if not th or any(not (0.0 < t <= 1.0) for t in th) \
            or any(b <= a for a, b in zip(th, th[1:])):
        problems.append("eval.thresholds must strictly increase within (0,1]")
    if problems:
        raise ConfigError("invalid config: " + "; ".join(problems))


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(repr(float(v)) for v in value)
    return str(value)


def write_config_echo(path, cfg: dict) -> None:
    """The resolved configuration, one sorted key per line."""
    with open(path, "w") as fp:
        for key in sorted(cfg):
            fp.write(f"{key} = {format_value(cfg[key])}\n")
