"""Optimizer, schedule, and training-loop contract tests."""

import math

import numpy as np
import pytest

from tialab.backbone import BackboneConfig
from tialab.data import SyntheticSpec, generate_dataset
from tialab.head import PyramidConfig
from tialab.tensor import ConfigError, Parameter
from tialab.training import (AdamW, DetectionModel, TrainingError,
                             TrainSettings, schedule_lr, train)

CFG = BackboneConfig(num_layers=1, dim=16, heads=2, patch=4, frame_hw=(8, 8),
                     chunk_len=16, mlp_ratio=2, frozen=True)


def tiny_videos(n=4, t=32, k=2, seed=9):
    spec = SyntheticSpec(k_classes=k, t_range=(t, t), actions_range=(1, 2),
                         amplitude=3.0, noise=0.1, height=8, width=8,
                         duration_range=(6, 12), seed=seed)
    return generate_dataset(spec, n)


def reference_adamw(data, grads, lr, b1=0.9, b2=0.999, eps=1e-8, wd=0.01):
    """Textbook decoupled-weight-decay update, one tensor."""
    p = data.astype(np.float64).copy()
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t, g in enumerate(grads, 1):
        g = g.astype(np.float64)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        if wd and p.ndim >= 2:
            p -= lr * wd * p
        p -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    return p


class TestAdamW:
    def test_matches_reference(self):
        rng = np.random.default_rng(0)
        w0 = rng.normal(size=(3, 4)).astype(np.float32)
        p = Parameter(w0.copy(), "w")
        opt = AdamW([p], lr=0.01)
        grads = [rng.normal(size=(3, 4)).astype(np.float32) for _ in range(5)]
        for g in grads:
            p.tensor.grad = g.copy()
            opt.step()
        ref = reference_adamw(w0, grads, lr=0.01)
        np.testing.assert_allclose(p.tensor.data, ref, rtol=1e-5)

    def test_decay_skips_vectors(self):
        rng = np.random.default_rng(1)
        vec0 = rng.normal(size=4).astype(np.float32)
        p = Parameter(vec0.copy(), "b")
        opt = AdamW([p], lr=0.01, weight_decay=0.5)
        grads = [rng.normal(size=4).astype(np.float32) for _ in range(3)]
        for g in grads:
            p.tensor.grad = g.copy()
            opt.step()
        ref = reference_adamw(vec0, grads, lr=0.01, wd=0.0)
        np.testing.assert_allclose(p.tensor.data, ref, rtol=1e-5)

    def test_lr_scale_zero_freezes(self):
        rng = np.random.default_rng(2)
        a = Parameter(rng.normal(size=(2, 2)).astype(np.float32), "a")
        b = Parameter(rng.normal(size=(2, 2)).astype(np.float32), "b")
        a_before = a.tensor.data.copy()
        b_before = b.tensor.data.copy()
        opt = AdamW([a, b], lr=0.01, lr_scales=[1.0, 0.0])
        a.tensor.grad = np.ones((2, 2), dtype=np.float32)
        b.tensor.grad = np.ones((2, 2), dtype=np.float32)
        opt.step()
        assert (a.tensor.data != a_before).any()
        np.testing.assert_array_equal(b.tensor.data, b_before)

    def test_non_trainable_skipped(self):
        p = Parameter(np.ones((2, 2), dtype=np.float32), "w", trainable=False)
        opt = AdamW([p], lr=0.1)
        assert opt.params == []

    def test_scale_length_mismatch(self):
        p = Parameter(np.ones(2, dtype=np.float32), "w")
        with pytest.raises(ConfigError):
            AdamW([p], lr_scales=[1.0, 2.0])

    def test_missing_grad_is_noop(self):
        p = Parameter(np.ones((2, 2), dtype=np.float32), "w")
        opt = AdamW([p], lr=0.1)
        opt.step()
        np.testing.assert_array_equal(p.tensor.data, np.ones((2, 2)))

    def test_negative_lr_rejected(self):
        with pytest.raises(ConfigError):
            AdamW([], lr=-1.0)


class TestSchedule:
    def test_linear_warmup_then_cosine(self):
        base, warm, total = 1.0, 4, 20
        for e in range(warm):
            assert schedule_lr(e, base, warm, total) == \
                pytest.approx(base * (e + 1) / warm)
        assert schedule_lr(warm, base, warm, total) == pytest.approx(base)
        values = [schedule_lr(e, base, warm, total) for e in range(warm, total)]
        assert all(a >= b for a, b in zip(values, values[1:]))
        expected_last = base * 0.5 * (1 + math.cos(math.pi * 15 / 16))
        assert values[-1] == pytest.approx(expected_last)

    def test_no_warmup(self):
        assert schedule_lr(0, 2.0, 0, 10) == pytest.approx(2.0)


class TestTrainLoop:
    def test_empty_set_rejected(self):
        model = DetectionModel(CFG, PyramidConfig(2), mode="frozen", seed=0)
        with pytest.raises(TrainingError):
            train(model, [], TrainSettings(epochs=1))

    def test_no_trainable_params_rejected(self):
        model = DetectionModel(CFG, PyramidConfig(2), mode="frozen", seed=0)
        for p in model.head.params():
            p.trainable = False
        with pytest.raises(TrainingError):
            train(model, tiny_videos(), TrainSettings(epochs=1, window=32))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_aborts_with_diagnostic(self):
        model = DetectionModel(CFG, PyramidConfig(2), mode="frozen", seed=0)
        with pytest.raises(TrainingError):
            train(model, tiny_videos(),
                  TrainSettings(epochs=3, lr=1e8, warmup_epochs=0, window=32,
                                eval_interval=0))

    def test_window_longer_than_video_rejected_for_cache(self):
        model = DetectionModel(CFG, PyramidConfig(2), mode="frozen", seed=0)
        with pytest.raises(TrainingError, match="shorter"):
            train(model, tiny_videos(t=32),
                  TrainSettings(epochs=1, window=64))

    def test_frozen_modes_never_touch_backbone(self):
        for mode in ("frozen", "adapter_inside", "adapter_outside"):
            model = DetectionModel(CFG, PyramidConfig(2), mode=mode, seed=0)
            before = [p.tensor.data.copy() for p in model.backbone.params()]
            train(model, tiny_videos(),
                  TrainSettings(epochs=1, window=32, eval_interval=0))
            for b, p in zip(before, model.backbone.params()):
                np.testing.assert_array_equal(b, p.tensor.data)

    def test_full_ft_moves_backbone(self):
        model = DetectionModel(CFG, PyramidConfig(2), mode="full_ft", seed=0)
        before = [p.tensor.data.copy() for p in model.backbone.params()]
        train(model, tiny_videos(),
              TrainSettings(epochs=1, window=32, eval_interval=0))
        moved = any((b != p.tensor.data).any()
                    for b, p in zip(before, model.backbone.params()))
        assert moved

    def test_history_and_loss_finite(self):
        model = DetectionModel(CFG, PyramidConfig(2), mode="adapter_inside",
                               seed=0)
        hist = train(model, tiny_videos(),
                     TrainSettings(epochs=3, window=32, eval_interval=2))
        assert len(hist) == 3
        assert all(np.isfinite(h["loss"]) for h in hist)
        assert hist[1]["train_map"] is not None   # measured at epoch 2
        assert hist[0]["train_map"] is None

    def test_trainable_ordering_across_modes(self):
        counts = {}
        for mode in ("frozen", "adapter_inside", "full_ft", "full_ft_plus_tia"):
            m = DetectionModel(CFG, PyramidConfig(2), mode=mode, seed=0)
            counts[mode] = m.trainable_count()
        assert (counts["frozen"] < counts["adapter_inside"]
                < counts["full_ft"] < counts["full_ft_plus_tia"])

    def test_save_load_round_trip(self, tmp_path):
        vids = tiny_videos()
        model = DetectionModel(CFG, PyramidConfig(2), mode="adapter_inside",
                               seed=0)
        train(model, vids, TrainSettings(epochs=1, window=32, eval_interval=0))
        path = tmp_path / "ckpt.tlab"
        model.save(path)
        twin = DetectionModel(CFG, PyramidConfig(2), mode="adapter_inside",
                              seed=1)
        twin.load(path)
        for a, b in zip(model.params(), twin.params()):
            np.testing.assert_array_equal(a.tensor.data, b.tensor.data)
        pa = model.predict(vids[0], 32)
        pb = twin.predict(vids[0], 32)
        assert [(p.t_start, p.t_end, p.score) for p in pa] == \
               [(p.t_start, p.t_end, p.score) for p in pb]
