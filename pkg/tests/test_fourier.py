import numpy as np
import pytest
from hypothesis import given, strategies as st

from cbicurves.fourier import (
    CharFunContext,
    FFTGridError,
    StripError,
    caplet_price_fourier,
    caplet_strip_fft,
    caplet_strip_fft_multi,
    default_damping,
    fft_grid_for,
    modified_cf,
    quadrature_weights,
    residue,
)
from cbicurves.mechanisms import MechanismParams
from cbicurves.model import ModelParams, MultiCurveModel

STRIKES = np.array([0.01, 0.02, 0.03, 0.035, 0.04, 0.05, 0.06])
# direct quadrature of the 3M caplet strip, T = 1, reference parameters, flat curves
REFERENCE = np.array([0.00617236, 0.00371011, 0.00181814, 0.0013648, 0.00110211, 0.00082403, 0.00067744])


@pytest.fixture(scope="module")
def ctx(t3_model):
    return CharFunContext(t3_model, 0, 0.0, 1.0)


def test_anchor_values(ctx):
    assert modified_cf(ctx, 0.0).real == pytest.approx(ctx.bond_T_plus_delta(), rel=1e-10)
    assert modified_cf(ctx, -1j).real == pytest.approx(ctx.forward_value(), rel=1e-10)
    assert abs(modified_cf(ctx, 0.0).imag) < 1e-14


@given(u=st.floats(0.0, 200.0))
def test_conjugate_symmetry_and_bound(ctx, u):
    a = modified_cf(ctx, u)
    b = modified_cf(ctx, -u)
    assert a == pytest.approx(np.conj(b), rel=1e-12, abs=1e-15)
    assert abs(a) <= ctx.bond_T_plus_delta() * (1 + 1e-10)


def test_state_and_time_consistency(t3_model):
    x = np.array([0.012, 0.003])
    c = CharFunContext(t3_model, 1, 0.5, 2.0, x)
    assert modified_cf(c, 0.0).real == pytest.approx(t3_model.bond_price(0.5, 2.5, x), rel=1e-10)


def test_strip_upper_matches_moment_bound(ctx):
    assert 1.0 < ctx.strip_upper < ctx.mechanism.theta_eff
    assert ctx.admissible(0.1)
    assert not ctx.admissible(0.2)
    assert default_damping(ctx) == pytest.approx(0.5 * (ctx.strip_upper - 1))


def test_reference_strip(ctx):
    assert np.allclose(caplet_price_fourier(ctx, STRIKES), REFERENCE, atol=6e-9)


@pytest.mark.parametrize("eps", [-1.5, -1.0, -0.5, 0.0, 0.1])
def test_damping_invariance(ctx, eps):
    prices = caplet_price_fourier(ctx, STRIKES[[0, 2, 6]], epsilon=eps)
    assert np.allclose(prices, REFERENCE[[0, 2, 6]], atol=1e-8)


def test_damping_outside_strip(ctx):
    with pytest.raises(StripError):
        caplet_price_fourier(ctx, 0.03, epsilon=0.5)


def test_residue_branches():
    K = np.array([1.01, 1.02])
    assert np.allclose(residue(-2.0, K, 0.9, 0.95), 0.95 - K * 0.9)
    assert np.allclose(residue(-1.0, K, 0.9, 0.95), 0.95 - 0.5 * K * 0.9)
    assert np.allclose(residue(-0.5, K, 0.9, 0.95), 0.95)
    assert np.allclose(residue(0.0, K, 0.9, 0.95), 0.475)
    assert np.allclose(residue(0.3, K, 0.9, 0.95), 0.0)


def test_fft_matches_direct(t3_model, ctx):
    n, mesh = fft_grid_for(t3_model, 0, [1.0], tail_tol=1e-10, mesh=1.0, eps=-4.0)
    fft = caplet_strip_fft(ctx, STRIKES, n=n, mesh=mesh, eps=-4.0, rel_tol=1e-8)
    assert np.max(np.abs(fft - REFERENCE)) < 1e-6


def test_fft_multi_shapes_and_rows(t3_model):
    mats = [1.0, 2.0]
    out = caplet_strip_fft_multi(t3_model, 1, mats, [0.03, 0.05], n=8192, mesh=1.0, eps=-4.0, rel_tol=1e-8)
    assert out.shape == (2, 2)
    for r, T in enumerate(mats):
        c = CharFunContext(t3_model, 1, 0.0, T)
        assert np.allclose(out[r], caplet_price_fourier(c, [0.03, 0.05]), atol=1e-6)


def test_fft_too_short_range_reported(t3_model):
    with pytest.raises(FFTGridError, match="too short"):
        caplet_strip_fft_multi(t3_model, 0, [1.0], [0.03], n=32768, mesh=0.05)


def test_fft_rejects_bad_n(t3_model):
    with pytest.raises(ValueError):
        caplet_strip_fft_multi(t3_model, 0, [1.0], [0.03], n=1000)


def test_near_deterministic_model_gives_intrinsic(flat):
    mech = MechanismParams(0.05, 0.0, 1e-7, 1e-5, 1.5, (0.001, 0.002))
    model = MultiCurveModel(ModelParams(mech, (1.5, 1.0), (0.005, 0.006), (0.25, 0.5)), flat)
    c = CharFunContext(model, 0, 0.0, 2.0)
    K = np.array([0.02, 0.03, 0.05])
    L = model.forward_ibor(0, 0, 2.0)
    intrinsic = 0.25 * model.bond_price(0, 2.25) * np.maximum(L - K, 0)
    assert np.allclose(caplet_price_fourier(c, K, epsilon=-2.0), intrinsic, atol=1e-8)


def test_prices_decreasing_and_convex_in_strike(ctx):
    K = np.linspace(0.01, 0.08, 15)
    p = caplet_price_fourier(ctx, K)
    assert np.all(np.diff(p) < 0)
    assert np.all(np.diff(p, 2) > -1e-10)


def test_quadrature_weights():
    assert quadrature_weights(8, 0.5).sum() == pytest.approx(0.5 * 7.5)
    w = quadrature_weights(9, 0.5, "simpson")
    assert w[0] == pytest.approx(0.5 / 3) and w[1] == pytest.approx(2 / 3)
    with pytest.raises(ValueError):
        quadrature_weights(8, 0.5, "gauss")


def test_degenerate_model_gives_intrinsic(sloped):
    mech = MechanismParams(0.05353, 0.00582, 0.0407, 0.0507, 1.31753, (0.0, 0.0))
    model = MultiCurveModel(ModelParams(mech, (1.5, 1.0), (0.0, 0.0), (0.25, 0.5)), sloped)
    c = CharFunContext(model, 1, 0.0, 2.0)
    K = np.array([0.0, 0.01, 0.05])
    z = np.exp(float(model.c(1, 2.0)) - float(model.A0(2.0, 2.5)))
    ref = model.bond_price(0, 2.5) * np.maximum(z - (1 + 0.5 * K), 0)
    assert np.allclose(caplet_price_fourier(c, K, epsilon=-2.0), ref, atol=1e-10)
