"""Implicit substep, friction/noise substep, tamed stepping, full runs."""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splitavf import (
    AvfConfig,
    IntegrationError,
    LangevinModel,
    NewtonDivergenceError,
    PotentialSpec,
    State,
    avf_step,
    builtin_potential,
    generate_path,
    hamiltonian,
    integrate,
    integrate_with_stats,
    make_avf_config,
    ou_substep,
    sample_key,
    tamed_euler_step,
)
from splitavf.integrators import (
    avf_averaged_gradient,
    quad_rule,
    required_quadrature_nodes,
)
from splitavf.noise import OUIncrement, coarse_increment

_POINT = st.floats(min_value=-2.0, max_value=2.0, allow_nan=False)


# ---------------------------------------------------------------------------
# Quadrature


def test_quad_rule_basics():
    x, w = quad_rule(4)
    assert np.all((0 < x) & (x < 1))
    assert w.sum() == pytest.approx(1.0, rel=1e-15)
    # n nodes integrate monomials up to degree 2n-1 exactly
    for k in range(8):
        assert np.dot(w, x**k) == pytest.approx(1.0 / (k + 1), rel=1e-13)


def test_required_nodes():
    assert required_quadrature_nodes(builtin_potential("quartic1d")) == 2
    assert required_quadrature_nodes(builtin_potential("coupled2d")) == 4
    callback = PotentialSpec(
        dimension=1, evaluate=lambda y: 0.0,
        gradient=lambda y: np.zeros(1), hessian=lambda y: np.zeros((1, 1)),
        hessian_lower_bound=0.0, exponent_vector=(1,), polynomial_degree=None,
    )
    assert required_quadrature_nodes(callback) == 8


@settings(max_examples=40, deadline=None)
@given(a=_POINT, b=_POINT)
def test_averaged_gradient_is_exact_line_average(a, b):
    # for polynomials the quadrature is exact, so the fundamental identity
    # avg_grad(a, b) . (b - a) = F(b) - F(a) holds to roundoff
    for name in ("quartic1d", "coupled2d"):
        pot = builtin_potential(name)
        m = pot.dimension
        av = np.full(m, a)
        bv = np.full(m, b)
        g = avf_averaged_gradient(pot, av, bv)
        lhs = float(g @ (bv - av))
        rhs = pot.evaluate(bv) - pot.evaluate(av)
        assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-12)


def test_averaged_gradient_quartic_closed_form():
    # for F = q^4 the line average is (b^4 - a^4) / (b - a) = sum a^i b^(3-i)
    pot = builtin_potential("quartic1d")
    a, b = 0.7, -1.3
    g = avf_averaged_gradient(pot, np.array([a]), np.array([b]))[0]
    expect = a**3 + a**2 * b + a * b**2 + b**3
    assert g == pytest.approx(expect, rel=1e-14)


# ---------------------------------------------------------------------------
# Config and guards


def test_solvability_guard(example2):
    limit = 2.0 / math.sqrt(2.0)
    make_avf_config(example2, 0.99 * limit)
    with pytest.raises(ValueError, match="solvability"):
        make_avf_config(example2, limit)


def test_config_validation(example1):
    with pytest.raises(ValueError):
        make_avf_config(example1, -0.1)
    with pytest.raises(ValueError, match="exactness"):
        make_avf_config(example1, 0.1, quadrature_nodes=1)
    with pytest.raises(ValueError):
        make_avf_config(example1, 0.1, newton_tol=0.0)
    cfg = make_avf_config(example1, 0.1)
    assert cfg.quadrature_nodes == 2


# ---------------------------------------------------------------------------
# Substeps


def test_hamiltonian_substep_preserves_energy(example1, example2):
    for model in (example1, example2):
        cfg = make_avf_config(model, 0.125)
        x = model.x0
        rec = avf_step(model, x, _zero_increment(model), cfg)
        h0 = hamiltonian(model, x)
        h1 = hamiltonian(model, rec.x_bar)
        assert abs(h1 - h0) <= 10 * cfg.newton_tol * (1 + abs(h0))


def _zero_increment(model):
    return OUIncrement(plain=np.zeros(model.d), convolved=np.zeros(model.d))


def test_ou_substep_formula(example1):
    inc = OUIncrement(plain=np.array([0.3]), convolved=np.array([0.2]))
    x_bar = State(p=[2.0], q=[5.0])
    h = 0.25
    out = ou_substep(example1, x_bar, inc, h)
    assert out.p[0] == pytest.approx(math.exp(-0.25) * 2.0 + 0.2, rel=1e-15)
    assert out.q[0] == 5.0  # position untouched by the friction/noise substep


def test_full_step_position_equals_substep_position(example1):
    cfg = make_avf_config(example1, 0.125)
    path = generate_path(sample_key(0, 0), 1.0, 0.125 / 8, 1)
    inc = coarse_increment(path, 0, 0.125, example1.v)
    rec = avf_step(example1, example1.x0, inc, cfg)
    np.testing.assert_array_equal(rec.x.q, rec.x_bar.q)
    assert rec.residual <= cfg.newton_tol


def test_tamed_step_hand_value(example1):
    x = State(p=[1.0], q=[2.0])
    h, dw = 0.1, np.array([0.2])
    out = tamed_euler_step(example1, x, dw, h)
    drift_p = -32.0 - 1.0  # -grad F(2) - v p
    nrm = math.sqrt(drift_p**2 + 1.0)
    scale = h / (1.0 + h * nrm)
    assert out.p[0] == pytest.approx(1.0 + scale * drift_p + 0.2, rel=1e-15)
    assert out.q[0] == pytest.approx(2.0 + scale * 1.0, rel=1e-15)


def test_tamed_increment_bounded():
    # the tamed drift increment has norm below 1 regardless of the state
    model = LangevinModel(
        m=1, d=1, v=1.0, sigma=np.array([[1.0]]),
        potential=builtin_potential("quartic1d"), x0=State(p=[0.0], q=[0.0]),
    )
    x = State(p=[1e8], q=[1e6])
    out = tamed_euler_step(model, x, np.zeros(1), 0.5)
    step = math.hypot(out.p[0] - x.p[0], out.q[0] - x.q[0])
    # h|A|/(1 + h|A|) saturates at one from below
    assert step <= 1.0


# ---------------------------------------------------------------------------
# Full trajectories


def test_integrate_shapes_and_initial_row(example1):
    path = generate_path(sample_key(1, 0), 1.0, 2**-7, 1)
    traj = integrate(example1, "avf_split", path, 2**-4)
    assert traj.shape == (17, 2)
    np.testing.assert_array_equal(traj[0], example1.x0.vector)


def test_integrate_with_stats_energy_audit(example1, example2):
    for model in (example1, example2):
        path = generate_path(sample_key(2, 0), 1.0, 2**-8, model.d)
        traj, stats = integrate_with_stats(model, "avf_split", path, 2**-5)
        assert np.isfinite(traj).all()
        assert stats.max_abs_denergy <= 1e-9
        assert stats.max_rel_denergy <= 1e-11
        assert stats.max_residual <= 1e-12
        assert stats.newton_max_iters >= 1


def test_integrate_validation(example1):
    path = generate_path(sample_key(0, 0), 1.0, 2**-6, 1)
    with pytest.raises(ValueError, match="unknown scheme"):
        integrate(example1, "heun", path, 2**-4)
    with pytest.raises(ValueError, match="multiple"):
        integrate(example1, "avf_split", path, 3 * 2**-7)
    cfg = make_avf_config(example1, 2**-3)
    with pytest.raises(ValueError, match="does not match"):
        integrate(example1, "avf_split", path, 2**-4, cfg)
    path2 = generate_path(sample_key(0, 0), 1.0, 2**-6, 2)
    with pytest.raises(ValueError, match="dimension"):
        integrate(example1, "avf_split", path2, 2**-4)


def test_newton_failure_surfaces_step(example1):
    path = generate_path(sample_key(3, 0), 1.0, 2**-6, 1)
    # an unreachable tolerance stalls the iteration on the first step
    cfg = AvfConfig(h=2**-4, newton_tol=1e-300, newton_max_iter=2,
                    quadrature_nodes=2)
    with pytest.raises(NewtonDivergenceError) as err:
        integrate(example1, "avf_split", path, 2**-4, cfg)
    assert err.value.step == 0
    assert err.value.residual > 0


def test_callable_potential_route_matches_table_route(example1):
    # the same quartic as an opaque callable forces the non-kernel path
    pot = PotentialSpec(
        dimension=1,
        evaluate=lambda y: float(y[0] ** 4),
        gradient=lambda y: np.array([4.0 * y[0] ** 3]),
        hessian=lambda y: np.array([[12.0 * y[0] ** 2]]),
        hessian_lower_bound=0.0,
        exponent_vector=(2,),
        polynomial_degree=4,
        lower_offset=1.0,
    )
    model = LangevinModel(m=1, d=1, v=1.0, sigma=np.array([[1.0]]),
                          potential=pot, x0=State(p=[1.0], q=[1.0]))
    path = generate_path(sample_key(4, 0), 1.0, 2**-7, 1)
    a = integrate(model, "avf_split", path, 2**-4)
    b = integrate(example1, "avf_split", path, 2**-4)
    np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12)
    at = integrate(model, "tamed_euler", path, 2**-4)
    bt = integrate(example1, "tamed_euler", path, 2**-4)
    np.testing.assert_allclose(at, bt, rtol=1e-10, atol=1e-12)


def test_rerun_bitwise_identical(example2):
    path = generate_path(sample_key(5, 0), 1.0, 2**-8, 2)
    a, _ = integrate_with_stats(example2, "avf_split", path, 2**-5)
    b, _ = integrate_with_stats(example2, "avf_split", path, 2**-5)
    np.testing.assert_array_equal(a, b)


def test_integration_error_on_overflowing_scheme():
    # undamped explicit stepping of a stiff quartic from far out diverges;
    # the split scheme must stay finite on the same path
    model = LangevinModel(
        m=1, d=1, v=1.0, sigma=np.array([[1.0]]),
        potential=builtin_potential("quartic1d"),
        x0=State(p=[0.0], q=[30.0]),
    )
    path = generate_path(sample_key(6, 0), 1.0, 2**-6, 1)
    traj, _ = integrate_with_stats(model, "avf_split", path, 2**-3)
    assert np.isfinite(traj).all()
