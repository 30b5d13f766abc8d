from __future__ import annotations

import time

import numpy as np
import pytest

from trajdyn.control import Box, LqrController, lqr_from_multipliers
from trajdyn.envs import CartpoleEnv, Trajectory, rollout
from trajdyn.models import (EnvOneStepModel, EnvTrajectoryModel, ModelSpec, OneStepModel, PredictedTrajectory,
                            TrajectoryModel, aggregate_ensemble, load_model, rollout_onestep,
                            rollout_onestep_batch, save_model, train_model)
from trajdyn.recipes import cartpole_gain, cartpole_recipe

ENV = CartpoleEnv()
K = cartpole_gain(ENV)
RECIPE = cartpole_recipe(ENV, "stable", K)
SMALL = dict(hidden=(32, 32), epochs=3)
# float32 matmuls round differently for different batch shapes
F32 = dict(rtol=1e-5, atol=1e-6)


@pytest.fixture(scope="module")
def data():
    return RECIPE.generate(ENV, 6, 40, seed=11)


@pytest.fixture(scope="module")
def models(data):
    out = {}
    for kind in ("D", "P", "DE", "T", "TP", "TPE"):
        out[kind] = train_model(data, ModelSpec(kind, ensemble_size=3, **SMALL), seed=5, box=RECIPE.box)
    return out


# --------------------------------------------------------------------------- aggregation


def test_aggregate_single_member_identity():
    m = np.array([[1.0, -2.0]])
    v = np.array([[0.25, 4.0]])
    mean, std = aggregate_ensemble(m, v)
    np.testing.assert_array_equal(mean, m[0])
    np.testing.assert_allclose(std, [0.5, 2.0])


def test_aggregate_identical_members():
    mean, std = aggregate_ensemble(np.ones((4, 3)), np.full((4, 3), 0.09))
    np.testing.assert_allclose(std, 0.3)
    np.testing.assert_array_equal(mean, 1.0)


def test_aggregate_two_deterministic_members():
    mean, std = aggregate_ensemble(np.array([[0.0], [2.0]]))
    assert mean[0] == 1.0 and std[0] == 1.0
    with pytest.raises(ValueError):
        aggregate_ensemble(np.empty((0, 2)))


# --------------------------------------------------------------------------- specs


def test_spec_defaults_per_family():
    assert ModelSpec("D").resolved() == dict(lr=5e-5, batch_size=32, epochs=20, train_fraction=0.9,
                                             early_stopping=True)
    assert ModelSpec("P").resolved()["lr"] == 2.5e-5
    t = ModelSpec("T").resolved()
    assert (t["lr"], t["batch_size"], t["epochs"], t["train_fraction"]) == (8e-4, 64, 8, 0.8)
    assert ModelSpec("PE").n_members == 5 and ModelSpec("P").n_members == 1
    with pytest.raises(ValueError):
        ModelSpec("LSTM")


# --------------------------------------------------------------------------- one-step


def test_constant_data_predicts_zero_delta():
    trajs = [Trajectory(np.tile([0.3, 0.0, -0.1, 0.0], (31, 1)), np.random.default_rng(j).normal(size=(30, 1)),
                        np.zeros(30), None) for j in range(4)]
    m = train_model(trajs, ModelSpec("D", **SMALL), seed=0)
    s = np.array([0.3, 0.0, -0.1, 0.0])
    nxt, std = m.predict_next(s, [0.5])
    assert std is None
    np.testing.assert_allclose(nxt - s, 0.0, atol=1e-6)


def test_d_equals_degenerate_de(data):
    d = train_model(data, ModelSpec("D", **SMALL), seed=3)
    de = train_model(data, ModelSpec("DE", ensemble_size=1, **SMALL), seed=3)
    s = data[0].states[:5]
    a = data[0].actions[:5]
    np.testing.assert_array_equal(d.predict_next(s, a)[0], de.predict_next(s, a)[0])


def test_p_sigma_positive(models, data):
    _, std = models["P"].predict_next(data[1].states, np.vstack([data[1].actions, [[0.0]]]))
    assert np.all(std > 0) and np.all(np.isfinite(std))


def test_ensemble_disagreement_std(models, data):
    _, std = models["DE"].predict_next(data[0].states[:3], data[0].actions[:3])
    assert std.shape == (3, 4) and np.all(std > 0)


def test_untrained_model_rejected():
    m = OneStepModel("D", [], None, None, None)
    with pytest.raises(RuntimeError):
        m.predict_next(np.zeros(4), np.zeros(1))


def test_perfect_stub_recompute_reproduces_truth():
    c = LqrController(K)
    tr = rollout(ENV, c, 100, seed=3)
    pred = rollout_onestep(EnvOneStepModel(ENV), tr.states[0], 100, controller=c)
    np.testing.assert_array_equal(pred.means, tr.states[1:])
    oracle = rollout_onestep(EnvOneStepModel(ENV), tr.states[0], 100, actions=tr.actions)
    np.testing.assert_array_equal(oracle.means, tr.states[1:])


def test_h1_equals_predict_next(models, data):
    m = models["P"]
    s, a = data[0].states[0], data[0].actions[:1]
    out = rollout_onestep(m, s, 1, actions=a)
    mean, std = m.predict_next(s, a[0])
    np.testing.assert_allclose(out.means[0], mean, **F32)
    np.testing.assert_allclose(out.stds[0], std, **F32)


class _BiasStub:
    probabilistic = False

    def __init__(self, delta):
        self.delta = delta

    def predict_next(self, s, a):
        return np.asarray(s) + self.delta, None


def test_bias_compounds_linearly():
    # identity system: the truth never moves, so the error at step t is t * delta
    delta = 0.01
    pred = rollout_onestep(_BiasStub(delta), np.zeros(2), 50, actions=np.zeros((50, 1)))
    np.testing.assert_allclose(pred.means[:, 0], delta * np.arange(1, 51), rtol=1e-12)


def test_oracle_actions_too_short():
    with pytest.raises(ValueError):
        rollout_onestep(_BiasStub(0.0), np.zeros(2), 10, actions=np.zeros((9, 1)))
    with pytest.raises(ValueError):
        rollout_onestep_batch(_BiasStub(0.0), np.zeros((1, 2)), 3)


def test_batch_rollout_matches_single(models, data):
    m = models["D"]
    s0 = np.stack([t.states[0] for t in data[:3]])
    acts = np.stack([t.actions[:20] for t in data[:3]])
    batch = rollout_onestep_batch(m, s0, 20, actions=acts)
    for i in range(3):
        single = rollout_onestep(m, s0[i], 20, actions=acts[i])
        np.testing.assert_allclose(batch.means[i], single.means, **F32)


# --------------------------------------------------------------------------- trajectory-based


def test_predict_horizon_equals_trajectory_row(models, data):
    m = models["TP"]
    s0, th = data[0].states[0], data[0].controller_params
    traj = m.predict_trajectory(s0, th, np.arange(1, 41))
    for h in (1, 7, 40):
        mean, std = m.predict_horizon(s0, th, h)
        np.testing.assert_allclose(mean, traj.means[h - 1], **F32)
        np.testing.assert_allclose(std, traj.stds[h - 1], **F32)


def test_row_independence_under_permutation(models, data):
    m = models["T"]
    s0, th = data[2].states[0], data[2].controller_params
    hs = np.arange(1, 61)
    perm = np.random.default_rng(0).permutation(60)
    base, _ = m.predict_batch(np.repeat(s0[None], 60, 0), np.repeat(th[None], 60, 0), hs)
    shuf, _ = m.predict_batch(np.repeat(s0[None], 60, 0), np.repeat(th[None], 60, 0), hs[perm])
    np.testing.assert_allclose(shuf[np.argsort(perm)], base, **F32)
    # one-row queries agree with the batch too
    np.testing.assert_allclose(m.predict_horizon(s0, th, 33)[0], base[32], **F32)


def test_empty_horizon_vector(models, data):
    out = models["TP"].predict_trajectory(data[0].states[0], data[0].controller_params, [])
    assert len(out) == 0 and out.means.shape == (0, 4)
    assert models["T"].predict_trajectory(data[0].states[0], data[0].controller_params, []).stds is None


def test_horizon_validation(models, data):
    m = models["T"]
    with pytest.raises(ValueError):
        m.predict_horizon(data[0].states[0], data[0].controller_params, 0)
    with pytest.raises(ValueError):
        m.predict_trajectory(data[0].states[0], data[0].controller_params, [3, 2])


def test_out_of_box_theta_rejected(models, data):
    with pytest.raises(ValueError):
        models["T"].predict_horizon(data[0].states[0], np.full(4, 1.7), 5)


@pytest.mark.parametrize("kind", ["TP", "TPE"])
def test_sigma_bounded_far_beyond_training_length(models, data, kind):
    m = models[kind]
    hs = np.arange(1, 3 * m.max_length + 1)
    out = m.predict_trajectory(data[0].states[0], data[0].controller_params, hs)
    assert np.all(np.isfinite(out.stds))
    lo, hi = m.lv_bounds
    member_bound = np.sqrt(np.exp(hi)) * m.state_norm.std
    if kind == "TP":
        assert np.all(out.stds <= member_bound * (1 + 1e-9))
        assert np.all(out.stds >= np.sqrt(np.exp(lo)) * m.state_norm.std * (1 - 1e-9))


def test_deterministic_trajectory_model_has_no_sigma(models, data):
    assert models["T"].predict_trajectory(data[0].states[0], data[0].controller_params, [1, 2]).stds is None


def test_overfit_single_trajectory_h1():
    tr = rollout(ENV, lqr_from_multipliers(K, np.full(4, 1.2)), 20, seed=1)
    box = Box((0.5,) * 4, (1.5,) * 4)
    m = train_model([tr], ModelSpec("T", hidden=(64, 64), epochs=400, batch_size=32, lr=1e-3,
                                    train_fraction=1.0, dtype="float64"), seed=0, box=box)
    ts = np.arange(20)
    preds = np.array([m.predict_horizon(tr.states[i], tr.controller_params, 20 - i)[0] for i in ts])
    train_rmse = np.sqrt(np.mean((preds - tr.states[20]) ** 2))
    err = np.abs(m.predict_horizon(tr.states[0], tr.controller_params, 1)[0] - tr.states[1])
    assert np.max(err) < max(5 * train_rmse, 0.05 * np.ptp(tr.states, axis=0).max())


class _TrajBiasStub:
    def __init__(self, delta):
        self.delta = delta

    def predict_trajectories(self, s0, theta, H):
        s0 = np.atleast_2d(s0)
        return np.repeat(s0[:, None], H, axis=1) + self.delta, None


def test_trajectory_stub_error_does_not_compound():
    pred, _ = _TrajBiasStub(0.01).predict_trajectories(np.zeros(2), np.zeros(1), 50)
    np.testing.assert_allclose(pred[0, :, 0], 0.01)
    onestep = rollout_onestep(_BiasStub(0.01), np.zeros(2), 50, actions=np.zeros((50, 1)))
    assert onestep.means[-1, 0] > 10 * pred[0, -1, 0]


def test_env_trajectory_stub_matches_simulation():
    box = RECIPE.box
    th = np.array([1.1, 0.9, 1.2, 0.8])
    tr = rollout(ENV, RECIPE.factory(th), 60, seed=4)
    stub = EnvTrajectoryModel(ENV, RECIPE.factory, box)
    pred, _ = stub.predict_trajectories(tr.states[0], th, 60)
    np.testing.assert_allclose(pred[0], tr.states[1:], atol=1e-10)
    with pytest.raises(ValueError):
        stub.predict_trajectories(tr.states[0], np.full(4, 3.0), 5)


def test_batched_call_cheaper_than_sequential(models, data):
    t_model, d_model = models["T"], models["D"]
    H = 200
    s0, th = data[0].states[0], data[0].controller_params
    hs = np.arange(1, H + 1)
    acts = np.zeros((H, 1))

    def best(fn, reps=5):
        times = []
        for _ in range(reps):
            t0 = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t0)
        return min(times)

    batched = best(lambda: t_model.predict_trajectory(s0, th, hs))
    sequential = best(lambda: rollout_onestep(d_model, s0, H, actions=acts))
    assert batched <= sequential


# --------------------------------------------------------------------------- checkpoints and export


@pytest.mark.parametrize("kind", ["D", "P", "DE", "T", "TPE"])
def test_checkpoint_roundtrip(models, data, tmp_path, kind):
    m = models[kind]
    p = tmp_path / f"{kind}.ckpt"
    save_model(p, m)
    back = load_model(p)
    assert type(back) is type(m) and back.kind == kind and len(back.members) == len(m.members)
    if isinstance(m, TrajectoryModel):
        a = m.predict_trajectory(data[0].states[0], data[0].controller_params, [1, 5, 9])
        b = back.predict_trajectory(data[0].states[0], data[0].controller_params, [1, 5, 9])
    else:
        a = rollout_onestep(m, data[0].states[0], 5, actions=data[0].actions)
        b = rollout_onestep(back, data[0].states[0], 5, actions=data[0].actions)
    np.testing.assert_array_equal(a.means, b.means)
    from trajdyn.storage import read_header
    meta = read_header(p)["meta"]
    assert meta["kind"] == kind and meta["ensemble_size"] == len(m.members)


def test_predicted_trajectory_csv(tmp_path):
    pt = PredictedTrajectory(np.array([1, 2]), np.array([[0.5, 1.0], [0.25, 2.0]]), np.array([[0.1, 0.2]] * 2))
    p = tmp_path / "p.csv"
    pt.to_csv(p)
    lines = p.read_text().splitlines()
    assert lines[0] == "h,mean_0,mean_1,std_0,std_1"
    assert lines[2].startswith("2,0.25,2.0")


def test_training_is_deterministic(data):
    a = train_model(data, ModelSpec("T", **SMALL), seed=9, box=RECIPE.box)
    b = train_model(data, ModelSpec("T", **SMALL), seed=9, box=RECIPE.box)
    assert a.members[0].weights[0].tobytes() == b.members[0].weights[0].tobytes()
    with pytest.raises(ValueError):
        train_model(data, ModelSpec("T", **SMALL), seed=9)
