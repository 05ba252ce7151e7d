import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cbicurves.mechanisms import DomainError, MechanismParams, lifetime, phi
from cbicurves.riccati import RiccatiRequest, affine_transform, solve, solve_batch
from cbicurves.synthetic import cir_mechanism, table3_params

# fixed-step RK4 with 10^6 steps on v' = -phi(v), v(0) = 1, Table 3 mechanism, t = 0.5
RK4_T3 = 0.9712905483846386


def cir_closed_form(b, s2, p, q, t):
    """v and int v for v' = q - b v - s2/2 v^2, written around the positive equilibrium."""
    a = 0.5 * s2
    g = math.sqrt(b * b + 4 * a * q)
    vp = (-b + g) / (2 * a)
    w0 = p - vp
    e = math.exp(-g * t)
    den = g + a * w0 * (1 - e)
    return vp + w0 * g * e / den, vp * t + math.log(den / g) / a


def test_zero_is_stationary(t3_mech):
    sol = solve(RiccatiRequest(t3_mech, 0.0, 0.0, 3.0))
    assert np.all(sol.v == 0) and np.all(sol.integral == 0)


def test_cir_example():
    sol = solve(RiccatiRequest(cir_mechanism(), 1.0, 0.0, 1.0))
    e = math.exp(-1)
    assert sol.v[-1] == pytest.approx(e / (2 - e), rel=1e-10)


def test_table3_against_rk4(t3_mech):
    sol = solve(RiccatiRequest(t3_mech, 1.0, 0.0, 0.5))
    assert sol.v[-1] == pytest.approx(RK4_T3, rel=1e-9)


def test_initial_values(t3_mech):
    sol = solve(RiccatiRequest(t3_mech, 0.7, 0.2, 1.0))
    assert sol.v[0] == 0.7 and sol.integral[0] == 0.0 and sol.grid[0] == 0.0


def test_domain_error(t3_mech):
    with pytest.raises(DomainError):
        solve(RiccatiRequest(t3_mech, t3_mech.lower_bound - 0.1, 0.0, 1.0))


@pytest.mark.parametrize("rel_tol", [1e-15, 1e-3])
def test_tolerance_range(t3_mech, rel_tol):
    with pytest.raises(ValueError):
        solve_batch(t3_mech, [0.1], 0.0, 1.0, rel_tol)


def test_bit_reproducible(t3_mech):
    a = solve_batch(t3_mech, [0.3, -0.5 + 2j], 0.4, 2.0)
    b = solve_batch(t3_mech, [0.3, -0.5 + 2j], 0.4, 2.0)
    assert np.array_equal(a.v, b.v) and np.array_equal(a.integral, b.integral)


def test_complex_with_zero_imaginary_part_equals_real(t3_mech):
    r = solve_batch(t3_mech, [0.3, 1.2], 0.5, 2.0)
    c = solve_batch(t3_mech, np.array([0.3, 1.2], dtype=complex), 0.5, 2.0)
    assert np.array_equal(r.grid, c.grid)
    assert np.array_equal(c.v.real, r.v) and np.all(c.v.imag == 0)


def test_monotone_path_towards_root(t3_mech):
    # phi(p) < q: v increases; phi(p) > q: v decreases
    up = solve(RiccatiRequest(t3_mech, 0.0, 0.3, 5.0))
    down = solve(RiccatiRequest(t3_mech, 2.0, 0.0, 5.0))
    assert np.all(np.diff(up.v) >= 0) and np.all(np.diff(down.v) <= 0)


def test_dense_output_derivative(t3_mech):
    sol = solve(RiccatiRequest(t3_mech, 1.5, 0.2, 4.0), max_step=1 / 32)
    t, h = np.array([0.3, 1.7, 3.1]), 1e-4
    vp, _ = sol(t + h)
    vm, _ = sol(t - h)
    v, _ = sol(t)
    assert np.allclose((vp - vm) / (2 * h), 0.2 - phi(t3_mech, v), rtol=1e-6, atol=1e-9)


def test_blow_up_reported_not_raised():
    m = cir_mechanism()
    sol = solve(RiccatiRequest(m, -2.0, 0.0, 2.0))
    assert sol.exploded
    assert sol.blew_up == pytest.approx(math.log(2), rel=1e-2)


def test_affine_transform_trivial(t3_mech):
    assert affine_transform(t3_mech, [0.01, 0.02], [0.0, 0.0], 0.0, 1.0) == 1.0


def test_affine_transform_cir_bond():
    b, s2, beta, x0, t = 0.4, 0.05, 0.03, 0.02, 3.0
    m = MechanismParams(b, math.sqrt(s2), 0.0, 1.0, 1.5, (beta,))
    v, iv = cir_closed_form(b, s2, 0.0, 1.0, t)
    assert affine_transform(m, [x0], [0.0], 1.0, t) == pytest.approx(math.exp(-x0 * v - beta * iv), rel=1e-8)


@given(st.floats(0.0, 3.0), st.floats(0.0, 2.0), st.floats(0.01, 5.0))
def test_cir_closed_form_property(p, q, t):
    b, s2 = 0.8, 0.3
    m = MechanismParams(b, math.sqrt(s2), 0.0, 1.0, 1.5, (0.0,))
    sol = solve(RiccatiRequest(m, p, q, t))
    v, iv = cir_closed_form(b, s2, p, q, t)
    assert sol.v[-1] == pytest.approx(v, rel=1e-8, abs=1e-12)
    assert sol.integral[-1] == pytest.approx(iv, rel=1e-8, abs=1e-12)


@given(st.floats(0.05, 2.0), st.floats(0.05, 2.0), st.floats(-1.0, 3.0), st.floats(0.0, 1.0))
def test_flow_property(s, t, p, q):
    m = table3_params().mechanism
    whole = solve(RiccatiRequest(m, p, q, s + t)).v[-1]
    first = solve(RiccatiRequest(m, p, q, s)).v[-1]
    second = solve(RiccatiRequest(m, first, q, t)).v[-1]
    assert whole == pytest.approx(second, rel=1e-8, abs=1e-11)


@given(st.floats(-1.2, 3.0), st.floats(0.01, 1.0), st.floats(0.0, 1.0), st.floats(0.1, 5.0))
def test_monotone_in_initial_value(p1, gap, q, t):
    m = table3_params().mechanism
    sol = solve_batch(m, [p1, p1 + gap], q, t)
    assert sol.v[-1, 0] < sol.v[-1, 1]


@given(st.floats(-4.0, -1.1), st.floats(0.0, 1.0))
def test_blow_up_matches_lifetime_cir(p, q):
    m = cir_mechanism()
    T = lifetime(m, p, q)
    if not math.isfinite(T):
        return
    sol = solve(RiccatiRequest(m, p, q, 2 * T + 1))
    assert sol.blew_up == pytest.approx(T, rel=1e-2)
