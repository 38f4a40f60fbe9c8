import numpy as np
import pytest

from dynaflow.fileformat import FormatError, read_container, write_container
from dynaflow.netmodel import init_params
from dynaflow.trainer import (
    CHECKPOINT_MAGIC, ConfigMismatchError, NonFiniteLossError, TrainConfig, TrainState, load_checkpoint,
    loss_and_grad, sample_batch, save_checkpoint, train, train_step,
)

from conftest import small_model


def _setup(ds, method="dynaflow", **kw):
    model, w, params = small_model(method, ds, **kw)
    batch = sample_batch(model, w, 8, np.random.default_rng(0))
    return model, w, params, batch


def test_first_adam_step_matches_hand_computation(di_expert):
    model, _, params, batch = _setup(di_expert)
    cfg = TrainConfig(learning_rate=1e-3, grad_clip=None, ema_decay=0.9)
    W = model.default_weights()
    _, grads = loss_and_grad(model, params, batch, W)
    state, _, _ = train_step(TrainState.fresh(params), batch, model, cfg, W)
    for k, g in grads.items():
        # bias-corrected first step: m_hat = g, v_hat = g^2
        expected = params[k] - 1e-3 * g / (np.abs(g) + 1e-8)
        np.testing.assert_allclose(state.params[k], expected, rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(state.ema[k], 0.9 * params[k] + 0.1 * state.params[k], rtol=1e-12, atol=1e-15)
    assert state.step == 1


def test_gradient_clipping_scales_to_global_norm(di_expert):
    model, _, params, batch = _setup(di_expert, scale=0.5)
    W = model.default_weights()
    _, grads = loss_and_grad(model, params, batch, W)
    gnorm = np.sqrt(sum(np.sum(g * g) for g in grads.values()))
    clip = 0.1 * gnorm
    cfg = TrainConfig(learning_rate=1e-3, grad_clip=clip)
    state, _, reported = train_step(TrainState.fresh(params), batch, model, cfg, W)
    assert reported == pytest.approx(gnorm)
    k = "h0.w"
    np.testing.assert_allclose(state.m[k], 0.1 * grads[k] * clip / gnorm, rtol=1e-12)


def test_zero_learning_rate_leaves_parameters(di_expert):
    model, w, params = small_model("dynaflow", di_expert)
    res = train(model, w, TrainConfig(learning_rate=0.0, n_steps=5, batch_size=8, log_every=0), params_seed=0)
    for k in params:
        assert np.array_equal(res.state.params[k], params[k])
        np.testing.assert_allclose(res.state.ema[k], params[k], rtol=1e-14, atol=1e-300)


def test_training_is_deterministic(di_expert):
    model, w, _ = small_model("dynaflow", di_expert)
    cfg = TrainConfig(n_steps=5, batch_size=8, log_every=0, seed=4)
    a, b = train(model, w, cfg), train(model, w, cfg)
    assert a.state.equals(b.state) and a.losses == b.losses


def test_training_reduces_loss(di_expert):
    model, w, _ = small_model("dynaflow", di_expert, width=64)
    res = train(model, w, TrainConfig(learning_rate=2e-3, n_steps=150, batch_size=32, log_every=0))
    assert np.mean(res.losses[-20:]) < 0.7 * np.mean(res.losses[:20])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts_with_diagnostics(di_expert):
    model, w, params = small_model("dynaflow", di_expert)
    W = model.default_weights() * 1e200
    with pytest.raises(NonFiniteLossError) as err:
        train(model, w, TrainConfig(n_steps=2, batch_size=4, log_every=0), W=W)
    assert err.value.diagnostics["step"] == 0
    assert "param_abs_max" in err.value.diagnostics


def test_batch_sampling_checks_horizon(di_expert):
    model, _, _ = small_model("dynaflow", di_expert, horizon=8)
    with pytest.raises(ValueError):
        sample_batch(model, di_expert.windows(4), 4, np.random.default_rng(0))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=-1.0)
    with pytest.raises(ValueError):
        TrainConfig(ema_decay=1.0)


@pytest.mark.parametrize("method", ["dynaflow", "vanilla", "sa_flow"])
def test_checkpoint_round_trip(tmp_path, di_expert, method):
    model, w, _ = small_model(method, di_expert)
    res = train(model, w, TrainConfig(n_steps=3, batch_size=4, log_every=0))
    path = tmp_path / "m.dfc"
    save_checkpoint(path, model, res.state, TrainConfig(), {"note": "x"})
    loaded, state, header = load_checkpoint(path, expect_system="double_integrator", expect_method=method)
    assert state.equals(res.state)
    assert loaded.kind == method and loaded.net == model.net and header["extra"] == {"note": "x"}
    np.testing.assert_array_equal(loaded.norm.state_std, model.norm.state_std)


def test_checkpoint_validation(tmp_path, di_expert):
    model, _, params = small_model("dynaflow", di_expert)
    path = tmp_path / "m.dfc"
    save_checkpoint(path, model, TrainState.fresh(params))
    with pytest.raises(ConfigMismatchError):
        load_checkpoint(path, expect_system="pendulum")
    with pytest.raises(ConfigMismatchError):
        load_checkpoint(path, expect_state_dim=2)
    with pytest.raises(ConfigMismatchError):
        load_checkpoint(path, expect_method="vanilla")
    # a tensor with the wrong shape
    header, tensors = read_container(path, CHECKPOINT_MAGIC)
    tensors["ema/h0.w"] = tensors["ema/h0.w"][:-1]
    bad = tmp_path / "bad.dfc"
    write_container(bad, CHECKPOINT_MAGIC, header, tensors)
    with pytest.raises(ConfigMismatchError):
        load_checkpoint(bad)
    # truncation and wrong magic
    data = path.read_bytes()
    (tmp_path / "trunc.dfc").write_bytes(data[:-9])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "trunc.dfc")
    (tmp_path / "magic.dfc").write_bytes(b"XXXX" + data[4:])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "magic.dfc")


def test_container_preserves_bits(tmp_path):
    arr = np.array([[np.pi, -0.0], [1e-300, 5e300]])
    write_container(tmp_path / "c.bin", b"TEST", {"a": 1}, {"x": arr, "empty": np.zeros((0, 3))})
    header, tensors = read_container(tmp_path / "c.bin", b"TEST")
    assert header == {"a": 1}
    assert tensors["x"].tobytes() == arr.tobytes() and tensors["empty"].shape == (0, 3)
    with pytest.raises(FormatError):
        (tmp_path / "c2.bin").write_bytes((tmp_path / "c.bin").read_bytes() + b"\0")
        read_container(tmp_path / "c2.bin", b"TEST")


def test_fresh_state_copies_parameters(di_expert):
    model, _, _ = small_model("dynaflow", di_expert)
    params = init_params(model.net, 0)
    state = TrainState.fresh(params)
    state.params["h0.w"][0, 0] += 1.0
    assert params["h0.w"][0, 0] != state.params["h0.w"][0, 0]
