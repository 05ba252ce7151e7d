import math

import numpy as np
import pytest
from scipy import integrate, stats

from cbicurves.fourier import CharFunContext, caplet_price_fourier
from cbicurves.mechanisms import levy_density, upper_incomplete_gamma
from cbicurves.montecarlo import (
    JumpLaw,
    SimConfig,
    cluster_stats,
    mc_bond,
    mc_caplet,
    mc_futures_rate,
    mc_laplace,
    sample_jump_sizes,
    simulate,
    simulate_layers,
    write_paths_csv,
)
from cbicurves.riccati import affine_transform


@pytest.fixture(scope="module")
def thin_bundle(thin_model):
    return simulate(thin_model, SimConfig(2.0, 20000, steps=200, seed=1), obs_times=[1.0, 2.0])


def small(seed=3, **kw):
    return SimConfig(**{"horizon": 1.0, "paths": 600, "steps": 50, "seed": seed, "block": 256, **kw})


def test_config_validation():
    with pytest.raises(ValueError):
        SimConfig(0.0, 10)
    with pytest.raises(ValueError):
        SimConfig(1.0, 11, antithetic=True)
    with pytest.raises(ValueError):
        SimConfig(1.0, 10, block=3)
    with pytest.raises(ValueError):
        SimConfig(1.0, 10, eps_trunc=0.0)


def test_seed_determinism(t3_model):
    a = simulate(t3_model, small())
    b = simulate(t3_model, small())
    c = simulate(t3_model, small(seed=4))
    assert np.array_equal(a.x, b.x) and np.array_equal(a.integral, b.integral)
    assert not np.array_equal(a.x, c.x)


def test_threads_do_not_change_paths(t3_model):
    a = simulate(t3_model, small(threads=1, jump_log=True))
    b = simulate(t3_model, small(threads=3, jump_log=True))
    assert np.array_equal(a.x, b.x)
    for k in a.jumps:
        assert np.array_equal(a.jumps[k], b.jumps[k])


def test_paths_are_prefix_stable(t3_model):
    # the stream layout depends on the block, not the path count
    a = simulate(t3_model, small(paths=300))
    b = simulate(t3_model, small(paths=600))
    assert np.array_equal(a.x, b.x[:300])


def test_ordering_on_every_path(t3_model):
    b = simulate(t3_model, small(horizon=5.0))
    assert np.all(b.x >= 0)
    assert np.all(np.diff(b.y, axis=-1) >= 0)


def test_appendix_coefficients_match_up_to_sign(t3_mech):
    law = JumpLaw(t3_mech, 1e-3)
    c_eps, coef = law.appendix_coefficients()
    assert c_eps < 0 and coef < 0
    assert -c_eps == pytest.approx(law.intensity, rel=1e-12)
    assert -coef == pytest.approx(law.compensator, rel=1e-12)


@pytest.mark.parametrize("eps", [1e-2, 1e-3])
def test_jump_law_moments_by_quadrature(t3_mech, eps):
    law = JumpLaw(t3_mech, eps)
    f = lambda w: float(levy_density(t3_mech, w))
    mass = integrate.quad(f, eps, 1.0, limit=200)[0] + integrate.quad(f, 1.0, np.inf)[0]
    first = integrate.quad(lambda w: w * f(w), eps, 1.0, limit=200)[0] + integrate.quad(lambda w: w * f(w), 1.0, np.inf)[0]
    second = integrate.quad(lambda w: w * w * f(w), 0.0, eps, limit=200)[0]
    assert law.intensity == pytest.approx(mass, rel=1e-8)
    assert law.compensator == pytest.approx(first, rel=1e-8)
    assert law.small_jump_variance == pytest.approx(second, rel=1e-8)


def test_truncation_study(t3_mech):
    laws = [JumpLaw(t3_mech, e) for e in (1e-2, 1e-3, 1e-4)]
    assert laws[0].intensity < laws[1].intensity < laws[2].intensity
    assert laws[0].small_jump_variance > laws[1].small_jump_variance > laws[2].small_jump_variance
    assert all(0 < law.acceptance_rate <= 1 for law in laws)


def test_jump_sampler_matches_density(rng):
    eps, alpha, theta = 1e-3, 1.31753, 1.2457
    w = sample_jump_sizes(rng, 20000, eps, alpha, theta)
    assert np.all(w >= eps)
    norm = upper_incomplete_gamma(-alpha, eps * theta)
    cdf = lambda x: 1.0 - np.array([upper_incomplete_gamma(-alpha, v * theta) for v in np.atleast_1d(x)]) / norm
    assert stats.kstest(w[:4000], cdf).pvalue > 1e-3


def test_laplace_against_riccati(thin_model):
    mech = thin_model.mechanism
    b = simulate_layers(mech, thin_model.x0, SimConfig(1.0, 20000, steps=200, seed=2), obs_times=[1.0], weights=np.ones(2))
    p = np.array([100.0, 50.0])
    mean, se = mc_laplace(b, p, 1.0, q=2.0)
    exact = affine_transform(mech, thin_model.x0, p, 2.0, 1.0)
    assert abs(mean - exact) < 4 * se


def test_bond_martingale(thin_model, thin_bundle):
    for T in (1.0, 2.0):
        mean, se = mc_bond(thin_bundle, thin_model, T)
        assert abs(mean - thin_model.bond_price(0, T)) < 4 * se


def test_caplet_against_fourier(thin_model, thin_bundle):
    K = np.array([0.02, 0.04])
    mean, se = mc_caplet(thin_model, thin_bundle, 0, 1.0, K)
    ref = caplet_price_fourier(CharFunContext(thin_model, 0, 0.0, 1.0), K)
    assert np.all(np.abs(mean - ref) < 4 * se)


def test_futures_convexity_against_closed_form(thin_model, thin_bundle):
    mean, se = mc_futures_rate(thin_model, thin_bundle, 0, 1.0)
    conv = mean - thin_model.forward_ibor(0, 0, 1.0)
    assert abs(conv - thin_model.futures_convexity(0, 0, 1.0)) < 4 * se


def test_floored_fraction_small(thin_bundle):
    assert thin_bundle.floored_fraction < 0.01


def test_clustering_diagnostics(t3_model):
    b = simulate(t3_model, SimConfig(5.0, 400, steps=500, seed=7, block=256, jump_log=True))
    s = cluster_stats(b, window=0.25)
    assert s["total_jumps"] > 0
    assert s["dispersion_index"] > 1.0
    assert s["common_jump_fraction"] == [1.0, 1.0]
    assert sum(s["jumps_per_layer"]) == s["total_jumps"]


def test_no_jumps_without_eta(cir):
    b = simulate_layers(cir, [0.5], small(jump_log=True), weights=np.ones(1))
    assert b.jumps["path"].size == 0
    with pytest.raises(ValueError):
        cluster_stats(simulate_layers(cir, [0.5], small()))


def test_antithetic_reduces_to_pairs(thin_model):
    b = simulate(thin_model, small(antithetic=True))
    mean, se = mc_bond(b, thin_model, 1.0)
    assert math.isfinite(se) and se > 0
    assert abs(mean - thin_model.bond_price(0, 1.0)) < 5 * se


def test_unobserved_time(thin_bundle):
    with pytest.raises(ValueError):
        thin_bundle.index(0.5)


def test_paths_csv(tmp_path, t3_model):
    b = simulate(t3_model, small(paths=4, steps=10))
    p = tmp_path / "paths.csv"
    write_paths_csv(b, t3_model, p, max_paths=2)
    lines = p.read_text().splitlines()
    assert lines[0] == "path_id,time,Y1,Y2,r,spread1,spread2"
    assert len(lines) == 1 + 2 * 11
    first = [float(v) for v in lines[1].split(",")]
    assert first[2:4] == pytest.approx(list(t3_model.params.y0))
    assert first[5] == pytest.approx(math.exp(float(t3_model.c(0, 0.0)) + first[2]), rel=1e-12)
