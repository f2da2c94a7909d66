"""Adapter tests: init identities, value oracles, reductions, counting."""

import io
import math

import numpy as np
import pytest

from tialab import adapters as ad
from tialab import tensor as tt
from tialab.tensor import ConfigError, Parameter, ShapeError, Tensor


GELU1 = 0.5 * (1.0 + math.erf(1.0 / math.sqrt(2.0)))  # gelu(1)


def rand_input(rng, d, t=5, h=2, w=2, dtype=np.float32):
    return Tensor(rng.normal(size=(d, t, h, w)).astype(dtype))


def set_param(p: Parameter, value) -> None:
    p.tensor.data = np.asarray(value, dtype=p.tensor.data.dtype).reshape(
        p.tensor.data.shape)


def oracle_tia():
    """Hand-held weights: every token goes 1 -> gelu(1) -> hand-traceable."""
    w = ad.init_tia(d=2, gamma=2, k=1, seed=0)
    set_param(w.w_down, [[0.5], [0.5]])
    set_param(w.w_mid, [[1.0]])
    set_param(w.w_up, [[1.0, 1.0]])
    return w


class TestInitIdentity:
    @pytest.mark.parametrize("kind", ["standard", "tia", "tia_no_residual"])
    def test_fresh_adapter_is_identity(self, kind):
        rng = np.random.default_rng(41)
        for i in range(5):
            w = ad.make_adapter(kind, d=8, gamma=4, k=3, seed=i)
            x = rand_input(rng, 8)
            out = ad.apply_adapter(w, x)
            assert out.shape == x.shape
            assert np.array_equal(out.data, x.data)

    def test_fresh_side_branch_is_zero(self):
        rng = np.random.default_rng(42)
        w = ad.init_tia(8, gamma=4, k=3, seed=3)
        x = rand_input(rng, 8)
        out = ad.apply_adapter(w, x, side=True)
        assert out.shape == x.shape
        assert np.all(out.data == 0.0)

    def test_init_structure(self):
        w = ad.init_tia(8, gamma=4, k=3, seed=0)
        assert w.hidden == 2
        assert np.all(w.w_up.tensor.data == 0.0)
        assert np.all(w.b_up.tensor.data == 0.0)
        assert float(w.alpha.tensor.data) == 1.0
        # temporal kernel starts as the delta at the center tap
        center = (w.k - 1) // 2
        assert np.all(w.dw_kernel.tensor.data[:, center] == 1.0)
        assert np.count_nonzero(w.dw_kernel.tensor.data) == w.hidden


class TestForwardValues:
    def test_full_branch_oracle(self):
        # tokens of ones: down=gelu(1), mid adds the inner residual,
        # so out = x + 2*gelu(1)
        w = oracle_tia()
        x = Tensor(np.ones((2, 3, 1, 1), dtype=np.float32))
        out = ad.tia_forward(w, x)
        assert np.allclose(out.data, 1.0 + 2.0 * GELU1, atol=1e-6)

    def test_no_residual_oracle(self):
        w = oracle_tia()
        x = Tensor(np.ones((2, 3, 1, 1), dtype=np.float32))
        out = ad.tia_no_residual_forward(w, x)
        assert np.allclose(out.data, 1.0 + GELU1, atol=1e-6)

    def test_side_oracle(self):
        w = oracle_tia()
        x = Tensor(np.ones((2, 3, 1, 1), dtype=np.float32))
        out = ad.tia_side_forward(w, x)
        assert np.allclose(out.data, 2.0 * GELU1, atol=1e-6)

    def test_alpha_scales_branch(self):
        w = oracle_tia()
        set_param(w.alpha, 0.5)
        x = Tensor(np.ones((2, 3, 1, 1), dtype=np.float32))
        out = ad.tia_forward(w, x)
        assert np.allclose(out.data, 1.0 + GELU1, atol=1e-6)

    def test_side_equals_branch_minus_input(self):
        rng = np.random.default_rng(7)
        w = ad.init_tia(8, gamma=2, k=3, seed=7)
        set_param(w.w_up, rng.normal(size=(4, 8)).astype(np.float32) * 0.3)
        x = rand_input(rng, 8)
        full = ad.tia_forward(w, x)
        side = ad.tia_side_forward(w, x)
        assert np.allclose(side.data, full.data - x.data, atol=1e-5)

    def test_temporal_kernel_mixes_time_only(self):
        # box kernel: branch output at t becomes a local temporal average,
        # so a time-isolated spike leaks into neighbours
        rng = np.random.default_rng(9)
        w = ad.init_tia(4, gamma=2, k=3, seed=1)
        set_param(w.dw_kernel, np.full((2, 3), 1.0 / 3.0))
        set_param(w.w_up, rng.normal(size=(2, 4)).astype(np.float32))
        x = np.zeros((4, 5, 1, 1), dtype=np.float32)
        x[:, 2] = 1.0
        out = ad.tia_side_forward(w, Tensor(x))
        assert np.any(out.data[:, 1] != 0.0)
        assert np.any(out.data[:, 3] != 0.0)
        assert np.all(out.data[:, 0] != 0.0) or np.all(out.data[:, 4] == out.data[:, 0])


class TestStructuralReductions:
    def test_zero_mid_matches_standard(self):
        # with the mixing matrix zeroed the inner residual is all that
        # remains, which is exactly the plain bottleneck
        rng = np.random.default_rng(21)
        for i in range(10):
            tia = ad.init_tia(8, gamma=4, k=3, seed=i)
            std = ad.init_standard(8, gamma=4, seed=i + 100)
            up = rng.normal(size=(2, 8)).astype(np.float32) * 0.5
            set_param(std.w_up, up)
            set_param(tia.w_mid, np.zeros((2, 2)))
            set_param(tia.w_down, std.w_down.tensor.data)
            set_param(tia.w_up, up)
            x = rand_input(rng, 8)
            a = ad.tia_forward(tia, x)
            b = ad.standard_adapter_forward(std, x)
            assert np.array_equal(a.data, b.data)

    def test_identity_mid_doubles_branch(self):
        # identity mixing plus the inner residual doubles the bottleneck
        # output, which is the same as doubling the up-projection
        rng = np.random.default_rng(22)
        for i in range(10):
            tia = ad.init_tia(8, gamma=4, k=3, seed=i)
            std = ad.init_standard(8, gamma=4, seed=i + 100)
            up = rng.normal(size=(2, 8)).astype(np.float32) * 0.5
            set_param(std.w_up, 2.0 * up)
            set_param(tia.w_mid, np.eye(2))
            set_param(tia.w_down, std.w_down.tensor.data)
            set_param(tia.w_up, up)
            x = rand_input(rng, 8)
            a = ad.tia_forward(tia, x)
            b = ad.standard_adapter_forward(std, x)
            assert np.allclose(a.data, b.data, atol=1e-6)


class TestParamCounts:
    def test_reference_width_count(self):
        w = ad.init_tia(384, gamma=4, k=3)
        assert ad.count_params(w) == 83905
        assert 12 * ad.count_params(w) == 1006860

    def test_small_counts(self):
        tia = ad.init_tia(8, gamma=4, k=3)
        assert ad.count_params(tia) == 57
        std = ad.init_standard(8, gamma=4)
        assert ad.count_params(std) == 42

    def test_count_matches_stored_elements(self):
        for kind in ("standard", "tia"):
            w = ad.make_adapter(kind, d=16, gamma=4, k=5)
            stored = sum(p.tensor.data.size for p in w.params())
            assert ad.count_params(w) == stored

    def test_without_bias_keeps_alpha(self):
        w = ad.init_tia(8, gamma=4, k=3)
        lean = ad.count_params(w, include_bias=False)
        assert lean == 43
        assert ad.count_params(w) - lean == 2 + 2 + 2 + 8
        std = ad.init_standard(8, gamma=4)
        assert ad.count_params(std, include_bias=False) == 32

    def test_count_grows_with_kernel(self):
        counts = [ad.count_params(ad.init_tia(16, gamma=4, k=k))
                  for k in (1, 3, 7, 13, 21)]
        assert counts == sorted(counts)
        assert counts[1] - counts[0] == 2 * 4  # h extra taps per step of 2


class TestValidation:
    def test_gamma_too_small(self):
        with pytest.raises(ConfigError):
            ad.init_tia(8, gamma=1)

    def test_indivisible_width(self):
        with pytest.raises(ConfigError):
            ad.init_tia(10, gamma=4)

    def test_even_kernel(self):
        with pytest.raises(ConfigError):
            ad.init_tia(8, gamma=4, k=2)

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            ad.make_adapter("bogus", d=8)
        w = ad.init_tia(8)
        x = rand_input(np.random.default_rng(0), 8)
        with pytest.raises(ConfigError):
            ad.apply_adapter(w, x, kind="bogus")

    def test_wrong_channel_count(self):
        w = ad.init_tia(8, gamma=4)
        x = rand_input(np.random.default_rng(0), 6)
        with pytest.raises(ShapeError):
            ad.tia_forward(w, x)
        std = ad.init_standard(8, gamma=4)
        with pytest.raises(ShapeError):
            ad.standard_adapter_forward(std, x)

    def test_side_requires_tia(self):
        w = ad.init_standard(8, gamma=4)
        x = rand_input(np.random.default_rng(0), 8)
        with pytest.raises(ConfigError):
            ad.apply_adapter(w, x, side=True)

    def test_placement_mode(self):
        with pytest.raises(ConfigError):
            ad.PlacementMode("sideways")
        with pytest.raises(ConfigError):
            ad.PlacementMode("inside", adapt_last_half=True)
        mode = ad.PlacementMode("outside", adapt_last_half=True)
        assert mode.adapt_last_half


class TestGradients:
    def test_tia_gradcheck(self):
        # all nine weight groups plus the input, checked in float64
        d, gamma, k = 4, 2, 3
        h = d // gamma
        rng = np.random.default_rng(77)

        def fn(x, w_down, b_down, w_mid, b_mid, kern, kb, w_up, b_up, alpha):
            w = ad.TIAWeights(
                d, gamma, k,
                *[_wrap(n, t) for n, t in [
                    ("w_down", w_down), ("b_down", b_down),
                    ("w_mid", w_mid), ("b_mid", b_mid),
                    ("dw_kernel", kern), ("dw_bias", kb),
                    ("w_up", w_up), ("b_up", b_up), ("alpha", alpha)]])
            out = ad.tia_forward(w, x)
            return tt.sum_(tt.mul(out, out))

        def _wrap(name, t):
            p = Parameter.__new__(Parameter)
            p.tensor = t
            p.name = name
            p._trainable = True
            return p

        shapes = [(d, 3, 2, 2), (d, h), (h,), (h, h), (h,), (h, k), (h,),
                  (h, d), (d,), ()]
        inputs = [Tensor(rng.normal(size=s) * 0.5, requires_grad=True,
                         dtype=np.float64) for s in shapes]
        worst = tt.gradcheck(fn, inputs, rng=rng)
        assert worst < 1e-4


class TestSerialization:
    def _randomize(self, w, rng):
        for p in w.params():
            set_param(p, rng.normal(size=p.tensor.data.shape))

    def test_tia_round_trip(self, tmp_path):
        rng = np.random.default_rng(5)
        w = ad.init_tia(8, gamma=2, k=5, seed=5)
        self._randomize(w, rng)
        path = tmp_path / "adapter.tlab"
        ad.save_adapter(path, w)
        back = ad.load_adapter(path)
        assert (back.d, back.gamma, back.k) == (8, 2, 5)
        for a, b in zip(w.params(), back.params()):
            assert np.array_equal(a.tensor.data, b.tensor.data)

    def test_standard_round_trip(self, tmp_path):
        rng = np.random.default_rng(6)
        w = ad.init_standard(8, gamma=4, seed=6)
        self._randomize(w, rng)
        path = tmp_path / "adapter.tlab"
        ad.save_adapter(path, w)
        back = ad.load_adapter(path)
        assert isinstance(back, ad.StandardAdapterWeights)
        for a, b in zip(w.params(), back.params()):
            assert np.array_equal(a.tensor.data, b.tensor.data)

    def test_truncated_file(self, tmp_path):
        w = ad.init_tia(8, gamma=4, k=3)
        path = tmp_path / "adapter.tlab"
        ad.save_adapter(path, w)
        blob = path.read_bytes()
        path.write_bytes(blob[:len(blob) // 2])
        with pytest.raises(ConfigError):
            ad.load_adapter(path)

    def test_unknown_header(self, tmp_path):
        path = tmp_path / "adapter.tlab"
        path.write_bytes(b"mystery d=8 gamma=4\n")
        with pytest.raises(ConfigError):
            ad.load_adapter(path)
