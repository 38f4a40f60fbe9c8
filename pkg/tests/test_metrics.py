import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dynaflow.dynamics import make_system, step
from dynaflow.metrics import (
    EvalReport, IDSolverConfig, evaluate_method, inverse_dynamics, sae, sae_pairs, summary_stats, tre,
)

from conftest import closed_form_di

DI = make_system("double_integrator")
PEND = make_system("pendulum")


def test_double_integrator_oracle_on_grid():
    rng = np.random.default_rng(0)
    g = np.linspace(-2.5, 2.5, 10)
    ux, uy = np.meshgrid(g, g)
    demand = np.stack([ux.ravel(), uy.ravel()], axis=1)
    x = rng.normal(size=(100, 4))
    # unclamped demand plus a position kink the action cannot explain
    x_next = DI.dynamics(x, demand) + np.concatenate([rng.normal(0, 0.01, (100, 2)), np.zeros((100, 2))], axis=1)
    u_ref, r_ref = closed_form_di(x, x_next)
    res = inverse_dynamics(DI, x, x_next)
    np.testing.assert_allclose(res.action, u_ref, atol=1e-6)
    np.testing.assert_allclose(res.residual, r_ref, atol=1e-6)


@pytest.mark.parametrize("spec", [DI, PEND], ids=["di", "pendulum"])
def test_feasible_transitions_have_tiny_residual(spec):
    rng = np.random.default_rng(1)
    n = 300
    x = rng.normal(size=(n, spec.state_dim)) * 2
    u = rng.uniform(spec.low, spec.high, size=(n, spec.action_dim))
    u[:20] = spec.high  # on the boundary
    res = inverse_dynamics(spec, x, step(spec, x, u))
    assert res.residual.max() < 1e-10
    assert res.iterations.max() <= 500
    assert res.converged.all()


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, 2, elements=st.floats(-6, 6)), st.floats(-2, 2))
def test_pendulum_oracle_soundness_property(x, u):
    x_next = step(PEND, x, np.array([u]))
    res = inverse_dynamics(PEND, x, x_next)
    assert res.residual < 1e-10
    assert abs(res.action[0] - u) < 1e-6


def test_infeasible_demand_clamps_to_bound():
    # unconstrained minimizer u_x = 50 lies far outside the box
    res = inverse_dynamics(DI, np.zeros(4), np.array([0.5, 0.0, 5.0, 0.0]))
    np.testing.assert_allclose(res.action, [1.0, 0.0], atol=1e-9)
    assert res.residual == pytest.approx(np.hypot(0.5 - 0.01, 5.0 - 0.1), abs=1e-9)
    # a pure position demand has an interior minimizer
    res = inverse_dynamics(DI, np.zeros(4), np.array([1.0, 0.0, 0.0, 0.0]))
    np.testing.assert_allclose(res.action, [0.01 / 0.0101, 0.0], atol=1e-9)


def test_angle_wrapping_in_residual():
    x = np.array([3.0, 0.5])
    x_next = step(PEND, x, np.array([1.0]))
    shifted = x_next + np.array([2 * np.pi, 0.0])
    assert inverse_dynamics(PEND, x, shifted).residual < 1e-10


def test_id_is_deterministic_and_config_validated():
    rng = np.random.default_rng(3)
    x, xn = rng.normal(size=(20, 2)), rng.normal(size=(20, 2)) * 3
    a, b = inverse_dynamics(PEND, x, xn), inverse_dynamics(PEND, x, xn)
    assert np.array_equal(a.action, b.action) and np.array_equal(a.residual, b.residual)
    with pytest.raises(ValueError):
        IDSolverConfig(tol=0.0)
    with pytest.raises(ValueError):
        inverse_dynamics(PEND, np.zeros((2, 2)), np.zeros((3, 2)))


def test_sae_shapes_and_nonnegativity():
    rng = np.random.default_rng(4)
    traj = rng.normal(size=(3, 6, 2))
    s = sae(PEND, traj)
    assert s.shape == (3, 5) and np.all(s >= 0)
    assert sae(PEND, traj[0, :2]).shape == (1,)
    assert sae_pairs(PEND, np.zeros((0, 2)), np.zeros((0, 2))).shape == (0,)
    with pytest.raises(ValueError):
        sae(PEND, traj[:, :1])


traj = arrays(np.float64, (5, 3), elements=st.floats(-5, 5))


@settings(max_examples=50, deadline=None)
@given(traj, traj)
def test_tre_properties(a, b):
    b[0] = a[0]
    assert tre(a, a) == 0.0
    assert tre(a, b) == pytest.approx(tre(b, a))
    assert tre(a, b) >= 0.0


@settings(max_examples=50, deadline=None)
@given(traj, arrays(np.float64, 3, elements=st.floats(-3, 3)))
def test_tre_constant_offset(a, delta):
    b = a + delta
    b[0] = a[0]
    assert tre(b, a) == pytest.approx(np.sum(delta**2), rel=1e-9, abs=1e-12)


def test_tre_wraps_angles_and_checks_shapes():
    a = np.array([[0.0, 0.0], [np.pi - 0.05, 0.0]])
    b = np.array([[0.0, 0.0], [-np.pi + 0.05, 0.0]])
    assert tre(a, b, PEND) == pytest.approx(0.01)
    with pytest.raises(ValueError):
        tre(a, b[:1])


def test_evaluating_the_dataset_itself(pend_kinematic):
    w = pend_kinematic.windows(8)
    seeds = np.arange(len(w))
    rep = evaluate_method("reference", lambda x0, c, t, s: w.X, pend_kinematic.spec, w, seeds)
    assert np.all(rep.tre == 0.0)
    full = np.concatenate([w.x0[:, None], w.X], axis=1)
    np.testing.assert_array_equal(rep.sae, sae(pend_kinematic.spec, full))
    agg = rep.aggregates()
    assert agg["sae"]["mean"] == pytest.approx(rep.sae.mean())
    assert agg["tre"]["max"] == 0.0
    with pytest.raises(ValueError):
        evaluate_method("x", lambda *a: w.X, pend_kinematic.spec, w, seeds[:-1])


def test_report_serialization(tmp_path):
    rep = EvalReport("m", "d", 3, np.array([[0.1, 0.2], [0.3, 0.4]]), np.array([1.0, 2.0]),
                     {"success": np.array([True, False]), "terminal_error": np.array([0.0, 1.0])})
    rep.write_json(tmp_path / "r.json")
    back = EvalReport.read_json(tmp_path / "r.json")
    assert np.array_equal(back.sae, rep.sae) and back.aggregates() == rep.aggregates()
    assert json.loads((tmp_path / "r.json").read_text())["aggregates"]["tracking"]["success_rate"] == 0.5
    rep.write_csv(tmp_path / "r.csv")
    assert len((tmp_path / "r.csv").read_text().splitlines()) == 1 + 4 + 2


def test_summary_stats():
    s = summary_stats([1.0, 2.0, 3.0, 4.0])
    assert s["mean"] == 2.5 and s["median"] == 2.5 and s["q1"] == 1.75 and s["n"] == 4
    assert summary_stats([]) == {"n": 0}
