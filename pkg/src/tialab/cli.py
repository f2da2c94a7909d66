"""Command line harness: train, eval, membench, ablate, gen-data."""

from __future__ import annotations

import argparse
import os
import sys

from . import config as cf
from . import memory as mem
from .backbone import BackboneConfig
from .data import (GenerationError, SyntheticSpec, downsample_spatial,
                   generate_dataset, load_dataset, save_dataset)
from .evaluation import EvalConfig, EvaluationError, mean_ap, write_results_csv
from .head import PyramidConfig
from .tensor import ConfigError, TensorError
from .training import (DetectionModel, TrainingError, TrainSettings,
                       collect_predictions, train)

TEST_SEED_OFFSET = 104729          # keeps the two splits disjoint by stream


def build_spec(cfg: dict, split: str = "train") -> SyntheticSpec:
    seed = cfg["seed"] + (TEST_SEED_OFFSET if split == "test" else 0)
    return SyntheticSpec(
        k_classes=cfg["data.num_classes"],
        t_range=(cfg["data.t_min"], cfg["data.t_max"]),
        actions_range=(cfg["data.min_actions"], cfg["data.max_actions"]),
        amplitude=cfg["data.amplitude"], noise=cfg["data.noise"],
        height=cfg["data.height"], width=cfg["data.width"],
        duration_range=(cfg["data.min_dur"], cfg["data.max_dur"]),
        fps=cfg["data.fps"], seed=seed)


def load_splits(cfg: dict):
    """(train, test) video lists, generated or read from data.dir."""
    if cfg["data.dir"]:
        train_v = load_dataset(os.path.join(cfg["data.dir"], "train"))
        test_v = load_dataset(os.path.join(cfg["data.dir"], "test"))
    else:
        train_v = generate_dataset(build_spec(cfg, "train"),
                                   cfg["data.num_train"])
        test_v = generate_dataset(build_spec(cfg, "test"),
                                  cfg["data.num_test"])
    factor = cfg["data.downsample"]
    if factor > 1:
        train_v = [downsample_spatial(v, factor) for v in train_v]
        test_v = [downsample_spatial(v, factor) for v in test_v]
    return train_v, test_v


def backbone_config(cfg: dict) -> BackboneConfig:
    side_h = cfg["data.height"] // cfg["data.downsample"]
    side_w = cfg["data.width"] // cfg["data.downsample"]
    return BackboneConfig(
        num_layers=cfg["backbone.layers"], dim=cfg["backbone.dim"],
        heads=cfg["backbone.heads"], patch=cfg["backbone.patch"],
        frame_hw=(side_h, side_w), chunk_len=cfg["backbone.chunk_len"],
        mlp_ratio=cfg["backbone.mlp_ratio"],
        frozen=cfg["mode"] not in ("full_ft", "full_ft_plus_tia"))


def head_config(cfg: dict) -> PyramidConfig:
    return PyramidConfig(cfg["data.num_classes"], levels=cfg["head.levels"],
                         score_thresh=cfg["head.score_thresh"],
                         nms_tiou=cfg["head.nms_tiou"],
                         max_proposals=cfg["head.max_keep"],
                         kernel=cfg["head.kernel"])


def build_model(cfg: dict) -> DetectionModel:
    return DetectionModel(
        backbone_config(cfg), head_config(cfg), mode=cfg["mode"],
        representation=cfg["representation"],
        adapter_kind=cfg["adapter.kind"], gamma=cfg["adapter.gamma"],
        kernel_k=cfg["adapter.kernel"], snippet_len=cfg["snippet_len"],
        adapt_last_half=cfg["adapter.last_half"],
        use_checkpointing=cfg["checkpointing"], seed=cfg["seed"])


def train_settings(cfg: dict) -> TrainSettings:
    return TrainSettings(
        epochs=cfg["train.epochs"], lr=cfg["train.lr"],
        adapter_lr_scale=cfg["train.adapter_lr_scale"],
        warmup_epochs=cfg["train.warmup"],
        weight_decay=cfg["train.weight_decay"], window=cfg["train.window"],
        keep_ratio=cfg["train.keep_ratio"], augment=cfg["train.augment"],
        flip_p=cfg["train.flip_p"], min_area=cfg["train.min_area"],
        eval_interval=cfg["train.eval_interval"],
        early_stop_map=cfg["train.early_stop_map"],
        eval_overlap=cfg["eval.overlap"], seed=cfg["seed"])


def eval_config(cfg: dict) -> EvalConfig:
    return EvalConfig(cfg["eval.thresholds"])


def _evaluate_split(model: DetectionModel, videos, cfg: dict):
    preds = collect_predictions(model, videos, cfg["train.window"],
                                cfg["eval.overlap"])
    gt = {v.id: v.annotations for v in videos}
    return mean_ap(preds, gt, eval_config(cfg))


def cmd_train(cfg: dict, out_dir: str) -> int:
    os.makedirs(out_dir, exist_ok=True)
    cf.write_config_echo(os.path.join(out_dir, "config_used.cfg"), cfg)
    train_v, test_v = load_splits(cfg)
    model = build_model(cfg)
    history = train(model, train_v, train_settings(cfg),
                    log_path=os.path.join(out_dir, "log.csv"),
                    eval_cfg=eval_config(cfg))
    model.save(os.path.join(out_dir, "checkpoint.tlab"))
    result = _evaluate_split(model, test_v, cfg)
    write_results_csv(os.path.join(out_dir, "results.csv"), result)
    last = history[-1]
    print(f"trained {len(history)} epochs, final loss {last['loss']:.4f}, "
          f"test mAP {result.average:.4f}")
    print(f"outputs in {out_dir}: checkpoint.tlab log.csv results.csv "
          f"config_used.cfg")
    return 0


def cmd_eval(cfg: dict, out_dir: str, checkpoint: str) -> int:
    os.makedirs(out_dir, exist_ok=True)
    _, test_v = load_splits(cfg)
    model = build_model(cfg)
    model.load(checkpoint)
    result = _evaluate_split(model, test_v, cfg)
    write_results_csv(os.path.join(out_dir, "results.csv"), result)
    for th in sorted(result.map_per_thresh):
        print(f"tIoU {th:.2f}: mAP {result.map_per_thresh[th]:.4f}")
    print(f"average mAP {result.average:.4f}")
    return 0


def cmd_membench(cfg: dict, out_dir: str) -> int:
    os.makedirs(out_dir, exist_ok=True)
    shape = mem.ShapeDescriptor(
        backbone_config(cfg), t=cfg["membench.t"],
        snippet_len=cfg["snippet_len"], gamma=cfg["adapter.gamma"],
        kernel=cfg["adapter.kernel"], n_classes=cfg["data.num_classes"],
        adapt_last_half=cfg["adapter.last_half"],
        head_levels=cfg["head.levels"])
    estimates = mem.compare_strategies(
        shape, representations=("frame", "snippet"),
        checkpointing=cfg["checkpointing"], precision=cfg["precision"])
    problems = mem.check_orderings(estimates)
    path = os.path.join(out_dir, "membench.csv")
    mem.write_membench_csv(path, estimates, extra_comments=[
        f"checkpointing={cfg['checkpointing']} precision={cfg['precision']}"])
    for e in estimates:
        print(f"{e.strategy:<18} {e.representation:<8} "
              f"act={e.activation_bytes:>12} total={e.total_bytes:>12}")
    if problems:
        print("ordering violations: " + "; ".join(problems))
        return 1
    print(f"wrote {path}")
    return 0


ABLATION_AXES = {
    "kernel": ("adapter.kernel", (1, 3, 7, 13, 21)),
    "adapter-kind": ("adapter.kind", ("standard", "tia", "tia_no_residual")),
    "mode": ("mode", ("frozen", "full_ft", "adapter_inside",
                      "adapter_outside", "full_ft_plus_tia")),
    "representation": ("representation", ("frame", "snippet")),
}
# frames/resolution grid: (train.window, data.downsample) pairs
SCALE_GRID = ((32, 2), (64, 2), (96, 2), (32, 1), (64, 1), (96, 1))


def _ablation_runs(cfg: dict, axis: str):
    """One full table per axis: every value, base setting included."""
    axes = (list(ABLATION_AXES) + ["scale"]) if axis == "all" else [axis]
    runs = []
    for name in axes:
        if name == "scale":
            for window, factor in SCALE_GRID:
                variant = dict(cfg)
                variant["train.window"] = window
                variant["data.downsample"] = factor
                runs.append(("scale", f"{window}f/{factor}x", variant))
            continue
        key, values = ABLATION_AXES[name]
        for value in values:
            variant = dict(cfg)
            variant[key] = value
            runs.append((key, cf.format_value(value), variant))
    return runs


def cmd_ablate(cfg: dict, out_dir: str, axis: str = "all") -> int:
    if axis != "all" and axis != "scale" and axis not in ABLATION_AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}")
    os.makedirs(out_dir, exist_ok=True)
    cf.write_config_echo(os.path.join(out_dir, "config_used.cfg"), cfg)
    path = os.path.join(out_dir, "ablation.csv")
    rows = []
    split_cache: dict = {}
    for axis_key, value, variant in _ablation_runs(cfg, axis):
        cf.validate(variant)
        data_key = variant["data.downsample"]
        if data_key not in split_cache:
            split_cache[data_key] = load_splits(variant)
        train_v, test_v = split_cache[data_key]
        model = build_model(variant)
        train(model, train_v, train_settings(variant))
        result = _evaluate_split(model, test_v, variant)
        shape = mem.ShapeDescriptor(
            backbone_config(variant), t=variant["train.window"],
            snippet_len=variant["snippet_len"], gamma=variant["adapter.gamma"],
            kernel=variant["adapter.kernel"],
            n_classes=variant["data.num_classes"],
            adapt_last_half=variant["adapter.last_half"],
            head_levels=variant["head.levels"])
        est = mem.estimate(variant["mode"], shape,
                           representation=variant["representation"],
                           checkpointing=variant["checkpointing"],
                           precision=variant["precision"])
        rows.append((axis_key, value, result.average, model.trainable_count(),
                     est.total_bytes))
        print(f"{axis_key}={value}: mAP {result.average:.4f}, "
              f"trainable {model.trainable_count()}, "
              f"est {est.total_bytes} bytes", flush=True)
    with open(path, "w") as fp:
        fp.write("axis,value,map,trainable_params,est_total_bytes\n")
        for axis_key, value, avg, n_train, total in rows:
            fp.write(f"{axis_key},{value},{avg:.6f},{n_train},{total}\n")
    print(f"wrote {path} ({len(rows)} rows)")
    return 0


def cmd_gen_data(cfg: dict, out_dir: str) -> int:
    os.makedirs(out_dir, exist_ok=True)
    train_v = generate_dataset(build_spec(cfg, "train"), cfg["data.num_train"])
    test_v = generate_dataset(build_spec(cfg, "test"), cfg["data.num_test"])
    save_dataset(os.path.join(out_dir, "train"), train_v)
    save_dataset(os.path.join(out_dir, "test"), test_v)
    n_tr = sum(len(v.annotations) for v in train_v)
    n_te = sum(len(v.annotations) for v in test_v)
    print(f"wrote {len(train_v)} train videos ({n_tr} actions) and "
          f"{len(test_v)} test videos ({n_te} actions) under {out_dir}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="tialab",
        description="temporal action detection lab: adapters on a frozen"
                    " video encoder, a pyramid detection head, and an"
                    " analytic training-memory model")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_txt in (
            ("train", "train a detector and evaluate on the test split"),
            ("eval", "evaluate a saved checkpoint"),
            ("membench", "write the analytic memory comparison"),
            ("ablate", "single-axis sweeps around the base config"),
            ("gen-data", "write synthetic train/ and test/ datasets")):
        p = sub.add_parser(name, help=help_txt)
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--set", action="append", default=[], metavar="K=V",
                       help="override one config key")
        p.add_argument("--out", default="runs/latest", help="output directory")
        if name == "eval":
            p.add_argument("--checkpoint", required=True,
                           help="checkpoint.tlab from a train run")
        if name == "ablate":
            p.add_argument("--axis", default="all",
                           choices=sorted(ABLATION_AXES) + ["scale", "all"],
                           help="which single-knob sweep to run")
    args = parser.parse_args(argv)
    try:
        cfg = cf.load_config(args.config, args.set)
        if args.command == "train":
            return cmd_train(cfg, args.out)
        if args.command == "eval":
            return cmd_eval(cfg, args.out, args.checkpoint)
        if args.command == "membench":
            return cmd_membench(cfg, args.out)
        if args.command == "ablate":
            return cmd_ablate(cfg, args.out, args.axis)
        return cmd_gen_data(cfg, args.out)
    except (TensorError, TrainingError, EvaluationError, GenerationError,
            OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
