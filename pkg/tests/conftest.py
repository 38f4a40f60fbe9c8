import numpy as np
import pytest

from dynaflow.datagen import generate_expert, generate_kinematic
from dynaflow.experiments import model_for_dataset
from dynaflow.netmodel import init_params

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def closed_form_di(x, x_next, dt=0.1):
    """Box-constrained least squares for the double integrator, axis by axis.

    Each axis is a one-dimensional convex quadratic in u, so clipping the
    unconstrained minimizer is exact.
    """
    p, v = x[..., :2], x[..., 2:]
    d_v = x_next[..., 2:] - v
    d_p = x_next[..., :2] - p - dt * v
    u = (dt**2 * d_p + dt * d_v) / (dt**4 + dt**2)
    u = np.clip(u, -1.0, 1.0)
    r = np.concatenate([d_p - dt**2 * u, d_v - dt * u], axis=-1)
    return u, np.linalg.norm(r, axis=-1)


@pytest.fixture(scope="session")
def di_expert():
    return generate_expert("double_integrator", "pd_regulator", 12, 40, np.random.default_rng(0))


@pytest.fixture(scope="session")
def pend_expert():
    return generate_expert("pendulum", "energy_swingup", 6, 200, np.random.default_rng(0))


@pytest.fixture(scope="session")
def pend_kinematic():
    return generate_kinematic("pendulum", "instant_swingup", 12, 40, np.random.default_rng(0), onset_range=(4, 28))


def small_model(method, dataset, horizon=8, width=32, layers=2, seed=0, scale=0.0):
    """Tiny model with random params; ``scale`` > 0 also randomizes the zero output layer."""
    model, windows = model_for_dataset(method, dataset, horizon, width, layers, 8)
    params = init_params(model.net, seed)
    if scale:
        rng = np.random.default_rng(seed + 1)
        for k in ("out.w", "out.b"):
            params[k] = rng.normal(0.0, scale, size=params[k].shape)
    return model, windows, params
