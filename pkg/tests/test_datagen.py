import numpy as np
import pytest

from dynaflow.datagen import (
    AccidentalFeasibilityError, Dataset, Episode, energy_swingup, generate_expert, generate_kinematic, pd_regulator,
    read_dataset, write_dataset,
)
from dynaflow.dynamics import make_system, wrap_angle
from dynaflow.fileformat import FormatError
from dynaflow.metrics import sae_pairs


@pytest.mark.parametrize("fixture", ["di_expert", "pend_expert"])
def test_expert_data_is_feasible(fixture, request):
    ds = request.getfixturevalue(fixture)
    a, b = ds.transitions()
    assert sae_pairs(ds.spec, a, b).max() < 1e-8
    assert ds.has_actions and ds.provenance == "expert"


def test_expert_actions_reproduce_states(pend_expert):
    from dynaflow.dynamics import rollout

    ep = pend_expert.episodes[0]
    np.testing.assert_allclose(rollout(pend_expert.spec, ep.x0, ep.actions), ep.states[1:], atol=1e-12)


def test_pendulum_expert_swings_up(pend_expert):
    final = np.array([ep.states[-1] for ep in pend_expert.episodes])
    assert np.all(np.abs(wrap_angle(final[:, 0])) < 0.05) and np.all(np.abs(final[:, 1]) < 0.1)
    # episodes are shifted to end next to zero rather than a multiple of 2 pi
    assert np.all(np.abs(final[:, 0]) < 0.05)


def test_velocity_regulator_converges_to_command(di_expert):
    for ep in di_expert.episodes:
        np.testing.assert_allclose(ep.states[-1, 2:], ep.command, atol=1e-3)


def test_controllers_respect_bounds():
    di, pend = make_system("double_integrator"), make_system("pendulum")
    x = np.array([[0, 0, -30.0, 40.0], [1, 2, 0.1, 0.2]])
    assert np.all(np.abs(pd_regulator(di, x, np.zeros(2))) <= 1.0)
    assert np.all(np.abs(energy_swingup(pend, np.array([[np.pi, 20.0], [0.1, 0.0]]))) <= 2.0)


def test_kinematic_data_exceeds_floor_and_has_no_actions(pend_kinematic):
    a, b = pend_kinematic.transitions()
    mean = sae_pairs(pend_kinematic.spec, a, b).mean()
    assert mean > pend_kinematic.meta["sae_floor"]
    assert mean == pytest.approx(pend_kinematic.meta["intrinsic_mean_sae"])
    assert not pend_kinematic.has_actions and pend_kinematic.windows(8).U is None


def test_kinematic_velocities_are_central_differences(pend_kinematic):
    ep = pend_kinematic.episodes[0]
    dt = pend_kinematic.dt
    theta, omega = ep.states[:, 0], ep.states[:, 1]
    np.testing.assert_allclose(omega[1:-1], (theta[2:] - theta[:-2]) / (2 * dt), atol=1e-12)


def test_overshoot_dash_is_infeasible():
    ds = generate_kinematic("double_integrator", "overshoot_dash", 4, 30, np.random.default_rng(1))
    assert ds.meta["intrinsic_mean_sae"] > 0.01


def test_accidentally_feasible_kinematic_data_is_rejected():
    with pytest.raises(AccidentalFeasibilityError):
        generate_kinematic("pendulum", "instant_swingup", 3, 60, np.random.default_rng(0), duration=2.0,
                           amplitude=0.01, max_attempts=2)


def test_generator_argument_validation():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        generate_expert("pendulum", "pd_regulator", 1, 10, rng)
    with pytest.raises(ValueError):
        generate_kinematic("pendulum", "overshoot_dash", 1, 40, rng)
    with pytest.raises(ValueError):
        generate_kinematic("pendulum", "instant_swingup", 1, 10, rng, onset_range=(4, 8))


def test_windows_align_with_episodes(di_expert):
    w = di_expert.windows(8)
    ep = di_expert.episodes[w.episode[5]]
    s = w.start[5]
    np.testing.assert_array_equal(w.x0[5], ep.states[s])
    np.testing.assert_array_equal(w.X[5], ep.states[s + 1:s + 9])
    np.testing.assert_array_equal(w.U[5], ep.actions[s:s + 8])
    assert len(w) == len(di_expert.episodes) * (40 - 8 + 1)


def test_generation_is_seed_deterministic(tmp_path):
    paths = []
    for k in range(2):
        ds = generate_expert("double_integrator", "pd_regulator", 3, 20, np.random.default_rng(5))
        paths.append(tmp_path / f"d{k}.dfd")
        write_dataset(ds, paths[-1])
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_dataset_round_trip_and_provenance_check(tmp_path, di_expert, pend_kinematic):
    write_dataset(di_expert, tmp_path / "e.dfd")
    back = read_dataset(tmp_path / "e.dfd", provenance="expert", system="double_integrator")
    assert back.meta == di_expert.meta
    for a, b in zip(back.episodes, di_expert.episodes):
        assert np.array_equal(a.states, b.states) and np.array_equal(a.actions, b.actions)
    with pytest.raises(FormatError):
        read_dataset(tmp_path / "e.dfd", provenance="kinematic")
    write_dataset(pend_kinematic, tmp_path / "k.dfd")
    with pytest.raises(FormatError):
        read_dataset(tmp_path / "k.dfd", system="double_integrator")
    with pytest.raises(FileNotFoundError):
        read_dataset(tmp_path / "missing.dfd")


def test_dataset_rejects_inconsistent_episodes():
    good = Episode(np.zeros((5, 2)), np.zeros(1), 0, None)
    with pytest.raises(ValueError):
        Dataset("pendulum", 0.05, "expert", [good], 1)
    with pytest.raises(ValueError):
        Dataset("pendulum", 0.05, "kinematic", [Episode(np.zeros((5, 3)), np.zeros(1), 0, None)], 1)
    with pytest.raises(ValueError):
        Dataset("pendulum", 0.05, "kinematic", [Episode(np.zeros((5, 2)), np.zeros(1), 0, np.zeros((4, 1)))], 1)
    assert len(Dataset("pendulum", 0.05, "kinematic", [good], 1).episodes) == 1
