"""QRU tests: gate algebra, pooling recurrence oracles, gradients, causality."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from reference_impls import fd_grad, max_rel_err, pool_phi_sum, pool_unrolled_b2
from hsdenoise.tensors import ConfigError, ConvKernel, ConvSpec
from hsdenoise.qru import (
    BACKWARD,
    BIDIRECTIONAL,
    FORWARD,
    PoolingTrace,
    QruParams,
    gates_forward,
    make_variant,
    qru3d_forward,
    qru_pool_backward,
    qru_pool_forward,
)


def rand_params(rng, cin=2, cout=3, k=(3, 3, 3), dtype=np.float64):
    def kern():
        w = rng.standard_normal((cout, cin) + k).astype(dtype) * 0.3
        b = rng.standard_normal(cout).astype(dtype) * 0.1
        return ConvKernel(w, b)

    return QruParams(kern(), kern())


def rand_zf(rng, shape):
    z = np.tanh(rng.standard_normal(shape))
    f = 1.0 / (1.0 + np.exp(-rng.standard_normal(shape)))
    return z, f


class TestGates:
    def test_zero_input_zero_bias(self):
        """Zero input with zero biases: z is 0 everywhere, f is 0.5."""
        rng = np.random.default_rng(0)
        p = rand_params(rng)
        p.wz.bias[:] = 0
        p.wf.bias[:] = 0
        x = np.zeros((1, 2, 5, 5, 4))
        z, f = gates_forward(x, p, ConvSpec())
        assert not z.any()
        np.testing.assert_allclose(f, 0.5, atol=0)

    def test_output_ranges(self):
        rng = np.random.default_rng(1)
        p = rand_params(rng)
        x = rng.standard_normal((2, 2, 5, 5, 4))
        z, f = gates_forward(x, p, ConvSpec())
        assert np.all(np.abs(z) < 1)
        assert np.all((f > 0) & (f < 1))
        assert z.shape == f.shape


class TestPoolForward:
    def test_open_gate_passes_candidate(self):
        """f == 0 makes h equal z exactly."""
        rng = np.random.default_rng(2)
        z = rng.standard_normal((1, 2, 3, 3, 5))
        h = qru_pool_forward(z, np.zeros_like(z), FORWARD)
        np.testing.assert_array_equal(h, z)

    def test_closed_gate_holds_zero_state(self):
        """f == 1 keeps copying the all-zero initial state."""
        rng = np.random.default_rng(3)
        z = rng.standard_normal((1, 2, 3, 3, 5))
        h = qru_pool_forward(z, np.ones_like(z), BACKWARD)
        assert not h.any()

    def test_two_band_closed_form(self):
        """Matches the hand-unrolled two-band recurrence within 1e-6."""
        rng = np.random.default_rng(4)
        z, f = rand_zf(rng, (2, 3, 4, 4, 2))
        h = qru_pool_forward(z, f, FORWARD)
        np.testing.assert_allclose(h, pool_unrolled_b2(z, f), atol=1e-6)

    @pytest.mark.parametrize("n_bands", [1, 3, 7, 16])
    def test_matches_contribution_sum(self, n_bands):
        """Every h_j equals the explicit phi-sum over source bands."""
        rng = np.random.default_rng(n_bands)
        z, f = rand_zf(rng, (1, 2, 3, 3, n_bands))
        h = qru_pool_forward(z, f, FORWARD)
        for j in range(n_bands):
            np.testing.assert_allclose(h[..., j], pool_phi_sum(z, f, j), atol=1e-5)

    def test_backward_is_band_reversal(self):
        rng = np.random.default_rng(5)
        z, f = rand_zf(rng, (1, 2, 3, 3, 6))
        hb = qru_pool_forward(z, f, BACKWARD)
        hf = qru_pool_forward(z[..., ::-1], f[..., ::-1], FORWARD)
        np.testing.assert_allclose(hb, hf[..., ::-1], atol=1e-12)

    def test_shape_mismatch_raises(self):
        with pytest.raises(Exception, match="shape"):
            qru_pool_forward(np.zeros((1, 1, 2, 2, 3)), np.zeros((1, 1, 2, 2, 4)), FORWARD)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), n_bands=st.integers(1, 12))
def test_pool_convexity_property(seed, n_bands):
    """h_b sits between h_{b-1} and z_b elementwise, so |h| <= max|z| < 1."""
    rng = np.random.default_rng(seed)
    z, f = rand_zf(rng, (1, 1, 2, 2, n_bands))
    h = qru_pool_forward(z, f, FORWARD)
    prev = np.zeros(z.shape[:-1])
    for b in range(n_bands):
        lo = np.minimum(prev, z[..., b]) - 1e-12
        hi = np.maximum(prev, z[..., b]) + 1e-12
        assert np.all(h[..., b] >= lo) and np.all(h[..., b] <= hi)
        prev = h[..., b]
    assert np.max(np.abs(h)) <= np.max(np.abs(z)) + 1e-12
    assert np.max(np.abs(h)) < 1


class TestPoolBackward:
    def test_single_band_closed_form(self):
        """B=1: grad_z = (1-f) g and grad_f = -z g."""
        rng = np.random.default_rng(6)
        z, f = rand_zf(rng, (1, 2, 3, 3, 1))
        h = qru_pool_forward(z, f, FORWARD)
        g = rng.standard_normal(z.shape)
        gz, gf = qru_pool_backward(PoolingTrace(z, f, h, FORWARD), g)
        np.testing.assert_allclose(gz, (1 - f) * g, atol=1e-12)
        np.testing.assert_allclose(gf, -z * g, atol=1e-12)

    def test_zero_grad_h(self):
        rng = np.random.default_rng(7)
        z, f = rand_zf(rng, (1, 1, 2, 2, 4))
        h = qru_pool_forward(z, f, FORWARD)
        gz, gf = qru_pool_backward(PoolingTrace(z, f, h, FORWARD), np.zeros_like(z))
        assert not gz.any() and not gf.any()

    @pytest.mark.parametrize("direction", [FORWARD, BACKWARD])
    def test_matches_finite_differences(self, direction):
        """Random five-band case agrees with central FD at 1e-3."""
        rng = np.random.default_rng(8)
        z, f = rand_zf(rng, (1, 2, 3, 3, 5))
        g = rng.standard_normal(z.shape)

        def loss():
            return float(np.sum(qru_pool_forward(z, f, direction) * g))

        fz, ff = fd_grad(loss, [z, f])
        h = qru_pool_forward(z, f, direction)
        gz, gf = qru_pool_backward(PoolingTrace(z, f, h, direction), g)
        assert max_rel_err(gz, fz) <= 1e-3
        assert max_rel_err(gf, ff) <= 1e-3


def unit_loss_grads(unit, x, r):
    """Analytic input/parameter grads of sum(unit(x) * r)."""
    y, trace = unit.forward(x, keep_trace=True)
    gx, grads = unit.backward(trace, r)
    return y, gx, grads


UNIT_CASES = [
    ("qru3d", FORWARD, False),
    ("qru3d", BACKWARD, False),
    ("qru3d", BIDIRECTIONAL, False),
    ("qru3d", FORWARD, True),
    ("qru2d", FORWARD, False),
    ("qru2d", BIDIRECTIONAL, False),
    ("c3d", FORWARD, False),
    ("c3d", FORWARD, True),
]


class TestUnitGradients:
    @pytest.mark.parametrize("kind,direction,transposed", UNIT_CASES)
    def test_unit_fd_check(self, kind, direction, transposed):
        """Whole-unit parameter and input gradients pass FD at 1e-3."""
        rng = np.random.default_rng(11)
        stride = (2, 2, 1) if transposed else (1, 1, 1)
        unit = make_variant(kind).build(
            rng, cin=2, cout=3, stride=stride, direction=direction,
            transposed=transposed, dtype=np.float64,
        )
        hwb = (2, 3, 4) if transposed else (5, 4, 4)
        # Mild input scale keeps FD truncation error well under the 1e-3
        # tolerance; the analytic side does not care.
        x = 0.5 * rng.standard_normal((1, 2) + hwb)
        y0, _ = unit.forward(x)
        r = rng.standard_normal(y0.shape)

        def loss():
            y, _ = unit.forward(x)
            return float(np.sum(y * r))

        numeric = fd_grad(loss, [x] + unit.param_arrays())
        _, gx, grads = unit_loss_grads(unit, x, r)
        assert max_rel_err(gx, numeric[0]) <= 1e-3
        for got, want in zip(grads, numeric[1:]):
            assert max_rel_err(got, want) <= 1e-3


class TestUnitForward:
    def test_forward_unit_is_causal_beyond_one_band(self):
        """Band b of a forward unit ignores perturbations at bands > b+1."""
        rng = np.random.default_rng(12)
        p = rand_params(rng, cin=1, cout=2)
        x = rng.standard_normal((1, 1, 4, 4, 6))
        y = qru3d_forward(x, p, ConvSpec(), FORWARD)
        j = 4
        xp = x.copy()
        xp[..., j] += 0.5
        yp = qru3d_forward(xp, p, ConvSpec(), FORWARD)
        diff = np.abs(yp - y).max(axis=(0, 1, 2, 3))
        assert np.all(diff[: j - 1] < 1e-6)
        assert diff[j] > 1e-6

    def test_closed_backward_branch_degenerates_to_forward(self):
        """A bidirectional unit whose backward gate saturates at 1 returns
        (numerically) just the forward branch."""
        rng = np.random.default_rng(13)
        pf = rand_params(rng, cin=1, cout=2)
        pb = rand_params(rng, cin=1, cout=2)
        pb.wf.weight[:] = 0
        pb.wf.bias[:] = 40.0
        x = rng.standard_normal((1, 1, 4, 4, 5))
        both = qru3d_forward(x, pf, ConvSpec(), BIDIRECTIONAL, params_back=pb)
        fwd = qru3d_forward(x, pf, ConvSpec(), FORWARD)
        np.testing.assert_allclose(both, fwd, atol=1e-12)

    def test_output_ranges_by_direction(self):
        rng = np.random.default_rng(14)
        pf = rand_params(rng, cin=1, cout=2)
        pb = rand_params(rng, cin=1, cout=2)
        x = rng.standard_normal((1, 1, 5, 5, 6))
        uni = qru3d_forward(x, pf, ConvSpec(), FORWARD)
        bi = qru3d_forward(x, pf, ConvSpec(), BIDIRECTIONAL, params_back=pb)
        assert np.all(np.abs(uni) < 1)
        assert np.all(np.abs(bi) < 2)

    def test_forward_backward_stack_sees_all_bands(self):
        """One forward unit into one backward unit: every output band moves
        when any input band is perturbed."""
        rng = np.random.default_rng(15)
        fac = make_variant("qru3d")
        u1 = fac.build(rng, 1, 2, (1, 1, 1), FORWARD, dtype=np.float64)
        u2 = fac.build(rng, 2, 2, (1, 1, 1), BACKWARD, dtype=np.float64)
        x = rng.standard_normal((1, 1, 4, 4, 6))

        def run(inp):
            y1, _ = u1.forward(inp)
            y2, _ = u2.forward(y1)
            return y2

        base = run(x)
        for j in range(x.shape[-1]):
            xp = x.copy()
            xp[..., j] += 0.5
            diff = np.abs(run(xp) - base).max(axis=(0, 1, 2, 3))
            assert np.all(diff > 0), f"band {j} left some output band untouched"


class TestVariants:
    def test_qru2d_kernel_shape(self):
        rng = np.random.default_rng(16)
        unit = make_variant("qru2d").build(rng, 2, 4, (1, 1, 1), FORWARD)
        assert unit.params_list[0].wz.weight.shape == (4, 2, 3, 3, 1)

    def test_c3d_is_tanh_of_conv(self):
        rng = np.random.default_rng(17)
        unit = make_variant("c3d").build(rng, 2, 3, (1, 1, 1), FORWARD, dtype=np.float64)
        x = rng.standard_normal((1, 2, 5, 5, 4))
        y, _ = unit.forward(x)
        from hsdenoise.tensors import conv3d_forward

        np.testing.assert_allclose(
            y, np.tanh(conv3d_forward(x, unit.kernel, unit.spec)), atol=1e-6
        )

    def test_c3d_has_half_the_parameters(self):
        rng = np.random.default_rng(18)
        q = make_variant("qru3d").build(rng, 2, 3, (1, 1, 1), FORWARD)
        c = make_variant("c3d").build(rng, 2, 3, (1, 1, 1), FORWARD)
        assert 2 * c.param_count() == q.param_count()

    def test_width_multiplier_scales_hidden_widths(self):
        fac = make_variant("qru2d", width_multiplier=1.75)
        assert fac.scaled_width(16) == 28
        assert fac.scaled_width(64) == 112

    def test_unknown_kind_rejected(self):
        with pytest.raises(ConfigError, match="kind"):
            make_variant("lstm")
