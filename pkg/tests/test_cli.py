"""End-to-end subcommand tests on miniature runs."""

import os

import pytest

from tialab.cli import main
from tialab.data import load_dataset
from tialab.evaluation import read_csv_rows

# smallest config the validators accept; videos are exactly one window long
FAST = ["data.num_train=6", "data.num_test=4", "data.t_min=32",
        "data.t_max=32", "data.min_dur=6", "data.max_dur=12",
        "backbone.layers=1", "backbone.dim=16", "backbone.heads=2",
        "train.window=32", "train.epochs=2", "train.warmup=1",
        "train.eval_interval=0"]


def run(args, extra=()):
    argv = list(args)
    for kv in list(FAST) + list(extra):
        argv += ["--set", kv]
    return main(argv)


class TestTrain:
    def test_writes_all_outputs(self, tmp_path, capsys):
        out = tmp_path / "run"
        assert run(["train", "--out", str(out)]) == 0
        for name in ("checkpoint.tlab", "log.csv", "results.csv",
                     "config_used.cfg"):
            assert (out / name).exists(), name
        header, rows = read_csv_rows(out / "log.csv")
        assert header == ["epoch", "lr", "loss", "train_map"]
        assert len(rows) == 2
        assert "test mAP" in capsys.readouterr().out

    def test_same_seed_is_byte_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        run(["train", "--out", str(a)])
        run(["train", "--out", str(b)])
        assert (a / "log.csv").read_bytes() == (b / "log.csv").read_bytes()
        assert (a / "results.csv").read_bytes() == (b / "results.csv").read_bytes()

    def test_different_seed_changes_losses(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        run(["train", "--out", str(a)])
        run(["train", "--out", str(b)], extra=["seed=5"])
        assert (a / "log.csv").read_bytes() != (b / "log.csv").read_bytes()

    def test_zero_lr_flat_loss(self, tmp_path):
        # whole-video windows, no augmentation: every epoch sees the same
        # batch, so with lr=0 the mean loss cannot move at all
        out = tmp_path / "flat"
        run(["train", "--out", str(out)],
            extra=["train.lr=0", "train.augment=false", "train.epochs=3"])
        _, rows = read_csv_rows(out / "log.csv")
        losses = [float(r[2]) for r in rows]
        assert losses == [losses[0]] * 3

    def test_config_echo_reruns_identically(self, tmp_path):
        a = tmp_path / "a"
        run(["train", "--out", str(a)], extra=["seed=3"])
        b = tmp_path / "b"
        assert main(["train", "--config", str(a / "config_used.cfg"),
                     "--out", str(b)]) == 0
        assert (a / "log.csv").read_bytes() == (b / "log.csv").read_bytes()

    def test_unknown_key_exits_2(self, tmp_path, capsys):
        code = main(["train", "--out", str(tmp_path), "--set", "bogus.key=1"])
        assert code == 2
        assert "bogus.key" in capsys.readouterr().err

    def test_missing_config_file_exits_2(self, tmp_path, capsys):
        code = main(["train", "--config", str(tmp_path / "nope.cfg"),
                     "--out", str(tmp_path)])
        assert code == 2
        assert "error" in capsys.readouterr().err

    def test_env_seed_lands_in_echo(self, tmp_path, monkeypatch):
        monkeypatch.setenv("TIALAB_SEED", "123")
        out = tmp_path / "env"
        run(["train", "--out", str(out)])
        assert "seed = 123" in (out / "config_used.cfg").read_text()


class TestEval:
    def test_reproduces_training_results(self, tmp_path, capsys):
        trained = tmp_path / "trained"
        run(["train", "--out", str(trained)])
        out = tmp_path / "eval"
        code = run(["eval", "--out", str(out),
                    "--checkpoint", str(trained / "checkpoint.tlab")])
        assert code == 0
        assert (out / "results.csv").read_bytes() == \
            (trained / "results.csv").read_bytes()
        assert "average mAP" in capsys.readouterr().out

    def test_idempotent(self, tmp_path):
        trained = tmp_path / "trained"
        run(["train", "--out", str(trained)])
        outs = []
        for name in ("e1", "e2"):
            out = tmp_path / name
            run(["eval", "--out", str(out),
                 "--checkpoint", str(trained / "checkpoint.tlab")])
            outs.append((out / "results.csv").read_bytes())
        assert outs[0] == outs[1]

    def test_shape_mismatch_is_load_error(self, tmp_path, capsys):
        trained = tmp_path / "trained"
        run(["train", "--out", str(trained)])
        code = run(["eval", "--out", str(tmp_path / "bad"),
                    "--checkpoint", str(trained / "checkpoint.tlab")],
                   extra=["backbone.dim=32"])
        assert code == 2
        assert capsys.readouterr().err.startswith("error:")


class TestMembench:
    def test_writes_table(self, tmp_path, capsys):
        out = tmp_path / "mb"
        assert run(["membench", "--out", str(out)]) == 0
        header, rows = read_csv_rows(out / "membench.csv")
        assert header[0] == "strategy"
        assert len(rows) == 10  # 5 strategies x 2 representations
        text = (out / "membench.csv").read_text()
        assert text.startswith("#")
        assert "violations" not in capsys.readouterr().out


class TestAblate:
    def test_mode_axis_counts_and_ordering(self, tmp_path):
        out = tmp_path / "ab"
        code = run(["ablate", "--out", str(out), "--axis", "mode"],
                   extra=["train.epochs=1"])
        assert code == 0
        _, rows = read_csv_rows(out / "ablation.csv")
        assert [r[1] for r in rows] == ["frozen", "full_ft", "adapter_inside",
                                        "adapter_outside", "full_ft_plus_tia"]
        trainable = {r[1]: int(r[3]) for r in rows}
        assert (trainable["frozen"] < trainable["adapter_inside"]
                < trainable["full_ft"] < trainable["full_ft_plus_tia"])

    def test_kernel_axis_rows(self, tmp_path):
        out = tmp_path / "ab"
        code = run(["ablate", "--out", str(out), "--axis", "kernel"],
                   extra=["train.epochs=1"])
        assert code == 0
        _, rows = read_csv_rows(out / "ablation.csv")
        assert [r[1] for r in rows] == ["1", "3", "7", "13", "21"]
        assert all(r[0] == "adapter.kernel" for r in rows)


class TestGenData:
    def test_round_trip_through_disk(self, tmp_path):
        data_dir = tmp_path / "data"
        assert run(["gen-data", "--out", str(data_dir)]) == 0
        train_v = load_dataset(os.path.join(data_dir, "train"))
        test_v = load_dataset(os.path.join(data_dir, "test"))
        assert len(train_v) == 6 and len(test_v) == 4
        # the generated splits draw from different seed streams
        assert train_v[0].frames.shape == test_v[0].frames.shape
        assert (train_v[0].frames != test_v[0].frames).any()
        out = tmp_path / "run"
        code = run(["train", "--out", str(out)],
                   extra=[f"data.dir={data_dir}", "train.epochs=1"])
        assert code == 0
