import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynaflow import autodiff as ad
from dynaflow.dynamics import rollout
from dynaflow.flowcore import (
    ConditioningSpec, FlowBatch, Normalizer, SampleResult, SamplerConfig, base_noise, cm_loss, interpolate,
    posterior_mean, sample, velocity, weight_mask,
)
from dynaflow.metrics import sae
from dynaflow.netmodel import predict
from dynaflow.trainer import sample_batch

from conftest import small_model


def test_interpolation_endpoints_and_per_item_times():
    rng = np.random.default_rng(0)
    X0, X1 = rng.normal(size=(3, 4, 2)), rng.normal(size=(3, 4, 2))
    np.testing.assert_array_equal(interpolate(X0, X1, 0.0), X0)
    np.testing.assert_array_equal(interpolate(X0, X1, 1.0), X1)
    t = np.array([0.0, 0.5, 1.0])
    mid = interpolate(X0, X1, t)
    np.testing.assert_allclose(mid[1], 0.5 * (X0[1] + X1[1]))
    np.testing.assert_array_equal(mid[2], X1[2])
    with pytest.raises(ValueError):
        interpolate(X0, X1, 1.2)


def test_velocity_formula_and_clip():
    X_t = np.ones((1, 2, 1))
    X1 = 3 * np.ones((1, 2, 1))
    np.testing.assert_allclose(velocity(X_t, X1, 0.5), 4.0)
    np.testing.assert_allclose(velocity(X_t, X1, 1 - 1e-3), 2.0 / 1e-3)
    with pytest.raises(ValueError):
        velocity(X_t, X1, 1.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_exact_predictor_reaches_target_for_any_step_count(n_steps, seed):
    # with X1_hat == X1 the Euler scheme of the OT field is exact
    rng = np.random.default_rng(seed)
    X1 = rng.normal(size=(2, 3, 2))
    Z = rng.normal(size=(2, 3, 2))
    dt = 1.0 / n_steps
    for k in range(n_steps):
        Z = Z + dt * velocity(Z, X1, k * dt)
    np.testing.assert_allclose(Z, X1, atol=1e-10)


def test_base_noise_is_seeded_and_shares_state_channels():
    a = base_noise([1, 2], 5, 2)
    b = base_noise([1, 2], 5, 2, extra_dim=3)
    np.testing.assert_array_equal(a, base_noise([1, 2], 5, 2))
    np.testing.assert_array_equal(b[..., :2], a)
    assert not np.array_equal(a[0], a[1])


def test_normalizer_round_trip_and_anchoring(di_expert):
    w = di_expert.windows(8)
    norm = Normalizer.fit(di_expert.spec, w.x0, w.X)
    Z = norm.encode(w.X, w.x0)
    np.testing.assert_allclose(norm.decode(Z, w.x0), w.X, atol=1e-12)
    # anchored coordinates: translating a window and its x0 leaves Z unchanged
    shift = np.array([50.0, -20.0, 0.0, 0.0])
    np.testing.assert_allclose(norm.encode(w.X + shift, w.x0 + shift), Z, atol=1e-9)
    np.testing.assert_allclose(Z.reshape(-1, 4).mean(axis=0), 0.0, atol=1e-9)
    np.testing.assert_allclose(Z.reshape(-1, 4).std(axis=0), 1.0, atol=1e-9)


def test_normalizer_floors_degenerate_dimensions(di_expert):
    spec = di_expert.spec
    X = np.zeros((3, 4, 4))
    norm = Normalizer.fit(spec, np.zeros((3, 4)), X)
    np.testing.assert_array_equal(norm.state_std, np.ones(4))


def test_conditioning_layout(di_expert):
    spec = di_expert.spec
    w = di_expert.windows(8)
    norm = Normalizer.fit(spec, w.x0, w.X)
    cond = ConditioningSpec.for_system(spec, 2, 3)
    assert cond.state_dims == (2, 3) and cond.width == 2 + 2 + 3
    c = cond.build(norm, np.zeros((2, 4)), np.ones((2, 2)), np.array([0, 2]))
    np.testing.assert_array_equal(c[:, 4:], [[1, 0, 0], [0, 0, 1]])
    with pytest.raises(ValueError):
        cond.build(norm, np.zeros((1, 4)), np.ones((1, 2)), 3)


@pytest.mark.parametrize("n_steps", [1, 2, 5])
@pytest.mark.parametrize("fixture", ["di_expert", "pend_expert"])
def test_dynaflow_samples_are_rollouts(fixture, n_steps, request):
    ds = request.getfixturevalue(fixture)
    model, w, params = small_model("dynaflow", ds, scale=0.5)
    x0 = w.x0[:6]
    c = model.cond.build(model.norm, x0, w.command[:6], w.tag[:6])
    res = sample(model, params, x0, c, SamplerConfig(n_steps, seed=3))
    assert isinstance(res, SampleResult)
    np.testing.assert_array_equal(res.states, rollout(ds.spec, x0, res.actions))
    assert np.all(res.actions >= ds.spec.low) and np.all(res.actions <= ds.spec.high)
    assert sae(ds.spec, np.concatenate([x0[:, None], res.states], axis=1)).max() < 1e-8


def test_single_step_sample_equals_rollout_of_initial_prediction(di_expert):
    model, w, params = small_model("dynaflow", di_expert, scale=0.5)
    x0 = w.x0[:4]
    c = model.cond.build(model.norm, x0, w.command[:4], w.tag[:4])
    noise = base_noise([5, 6, 7, 8], model.horizon, 4)
    res = sample(model, params, x0, c, SamplerConfig(1), noise=noise)
    expected = rollout(di_expert.spec, x0, predict(params, model.net, noise, c, 0.0))
    assert np.array_equal(res.states, expected)
    assert np.array_equal(res.states, posterior_mean(model, params, noise, c, 0.0, x0))


def test_sampler_seed_determinism(di_expert):
    model, w, params = small_model("dynaflow", di_expert, scale=0.5)
    c = model.cond.build(model.norm, w.x0[:3], w.command[:3], w.tag[:3])
    a = sample(model, params, w.x0[:3], c, SamplerConfig(2, seed=9))
    b = sample(model, params, w.x0[:3], c, SamplerConfig(2, seed=9))
    assert np.array_equal(a.states, b.states)


def _batch(model, w, seed=0, size=6):
    return sample_batch(model, w, size, np.random.default_rng(seed))


@pytest.mark.parametrize("horizon", [4, 16])
def test_cm_loss_gradient_matches_finite_differences(di_expert, horizon):
    model, w, params = small_model("dynaflow", di_expert, horizon=horizon, width=6, layers=1, scale=0.3)
    batch = _batch(model, w, size=3)
    W = model.default_weights(0.5)
    names = list(params)

    def f(*ps):
        return cm_loss(model, dict(zip(names, ps)), batch, W)

    assert ad.check_gradient(f, [params[k] for k in names]) < 1e-4


def test_cm_loss_is_zero_for_exact_prediction(di_expert):
    model, w, params = small_model("vanilla", di_expert)
    batch = _batch(model, w)
    batch = FlowBatch(batch.X1, batch.X0, np.zeros(len(batch)), batch.x0, batch.c)

    class Oracle(type(model)):
        def predict_x1(self, params, Z_t, c, t, x0):
            return self.norm.encode(batch.X1, x0), {}

    oracle = Oracle(model.system, model.net, model.norm, model.cond)
    assert cm_loss(oracle, params, batch, model.default_weights()) == 0.0


def test_cm_loss_weight_validation(di_expert):
    model, w, params = small_model("dynaflow", di_expert)
    batch = _batch(model, w)
    with pytest.raises(ValueError):
        cm_loss(model, params, batch, np.ones((3, 4)))
    with pytest.raises(ValueError):
        cm_loss(model, params, batch, -model.default_weights())


def test_weight_mask_scales_velocity_channels(di_expert):
    W = weight_mask(di_expert.spec, 3, 0.25, extra_channels=2)
    assert W.shape == (3, 6)
    np.testing.assert_array_equal(W[0], [1, 1, 0.25, 0.25, 1, 1])
