"""One-step and trajectory-based dynamics models.

One-step kinds ``D, P, DE, PE`` map ``(s_t, a_t)`` to a state delta and are
unrolled recursively. Trajectory kinds ``T, TP, TE, TPE`` map
``(s_t, h, theta)`` straight to ``s_{t+h}``; every horizon is an independent
row of one batched forward pass.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import nn, storage
from .control import Box, encode_params
from .data import NormStats, cap_dataset, extract_transitions, relabel, split
from .seeding import derive_seed

log = logging.getLogger(__name__)

ONESTEP_KINDS = {"D": (False, False), "P": (True, False), "DE": (False, True), "PE": (True, True)}
TRAJECTORY_KINDS = {"T": (False, False), "TP": (True, False), "TE": (False, True), "TPE": (True, True)}
CHECKPOINT_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class ModelSpec:
    """Training recipe; ``None`` fields take the per-family default."""

    kind: str = "T"
    hidden: tuple = (250, 250)
    activation: str = "silu"
    lr: Optional[float] = None
    batch_size: Optional[int] = None
    epochs: Optional[int] = None
    train_fraction: Optional[float] = None
    cap: int = 100_000
    ensemble_size: int = 5
    lv_bounds: tuple = nn.DEFAULT_LOGVAR_BOUNDS
    dtype: str = "float32"
    early_stopping: Optional[bool] = None

    def __post_init__(self):
        if self.kind not in ONESTEP_KINDS and self.kind not in TRAJECTORY_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")

    @property
    def trajectory_based(self) -> bool:
        return self.kind in TRAJECTORY_KINDS

    @property
    def probabilistic(self) -> bool:
        return {**ONESTEP_KINDS, **TRAJECTORY_KINDS}[self.kind][0]

    @property
    def n_members(self) -> int:
        return self.ensemble_size if {**ONESTEP_KINDS, **TRAJECTORY_KINDS}[self.kind][1] else 1

    def resolved(self) -> dict:
        if self.trajectory_based:
            d = dict(lr=8e-4, batch_size=64, epochs=8, train_fraction=0.8, early_stopping=False)
        else:
            d = dict(lr=2.5e-5 if self.probabilistic else 5e-5, batch_size=32, epochs=20,
                     train_fraction=0.9, early_stopping=True)
        for k in d:
            if getattr(self, k) is not None:
                d[k] = getattr(self, k)
        return d


@dataclass
class PredictedTrajectory:
    horizons: np.ndarray
    means: np.ndarray
    stds: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.horizons)

    def to_csv(self, path) -> None:
        d = self.means.shape[1] if self.means.ndim == 2 else 0
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["h"] + [f"mean_{i}" for i in range(d)]
                       + ([f"std_{i}" for i in range(d)] if self.stds is not None else []))
            for k, h in enumerate(self.horizons):
                row = [int(h)] + [repr(float(v)) for v in self.means[k]]
                if self.stds is not None:
                    row += [repr(float(v)) for v in self.stds[k]]
                w.writerow(row)


def aggregate_ensemble(means, variances=None):
    """Moment-match a uniform mixture of member Gaussians.

    ``means`` has shape (members, ...). Returns ``(mean, std)``; the variance is
    the mean member variance (if given) plus the variance of member means.
    """
    means = np.asarray(means, dtype=np.float64)
    if len(means) < 1:
        raise ValueError("need at least one member")
    mean = means.mean(axis=0)
    var = means.var(axis=0)
    if variances is not None:
        var = var + np.asarray(variances, dtype=np.float64).mean(axis=0)
    return mean, np.sqrt(var)


def _member_outputs(members, x, d, probabilistic, lv_bounds):
    mus, lvs = [], []
    for net in members:
        out = nn.forward(net, x).astype(np.float64)
        mus.append(out[:, :d])
        if probabilistic:
            lvs.append(nn.bound_logvar(out[:, d:], *lv_bounds)[0])
    return np.array(mus), (np.array(lvs) if probabilistic else None)


def _fit_members(spec: ModelSpec, x_tr, y_tr, x_va, y_va, out_dim, seed, snapshot_epochs=()):
    cfg = spec.resolved()
    dtype = np.dtype(spec.dtype)
    loss_kind = "nll" if spec.probabilistic else "mse"
    sizes = [x_tr.shape[1], *spec.hidden, out_dim * (2 if spec.probabilistic else 1)]
    members, results = [], []
    for k in range(spec.n_members):
        init_rng = np.random.default_rng(derive_seed(seed, "init", k))
        net = nn.init_mlp(sizes, init_rng, spec.activation, dtype)
        res = nn.train(net, x_tr, y_tr, loss_kind, cfg["epochs"], cfg["batch_size"], cfg["lr"],
                       derive_seed(seed, "shuffle", k), x_va, y_va, cfg["early_stopping"],
                       spec.lv_bounds, snapshot_epochs)
        members.append(res.net)
        results.append(res)
    return members, results


# --------------------------------------------------------------------------- one-step


@dataclass
class OneStepModel:
    kind: str
    members: list
    state_norm: NormStats
    action_norm: NormStats
    delta_norm: NormStats
    lv_bounds: tuple = nn.DEFAULT_LOGVAR_BOUNDS
    seed: int = 0
    history: list = field(default_factory=list)

    @property
    def probabilistic(self) -> bool:
        return ONESTEP_KINDS[self.kind][0]

    @property
    def state_dim(self) -> int:
        return len(self.state_norm.mean)

    def predict_next(self, s, a):
        """Next-state mean (and std for probabilistic kinds) for one or many rows."""
        if not self.members:
            raise RuntimeError("model has not been trained")
        s = np.asarray(s, dtype=np.float64)
        a = np.asarray(a, dtype=np.float64)
        single = s.ndim == 1
        s2, a2 = np.atleast_2d(s), a.reshape(len(np.atleast_2d(s)), -1)
        x = np.concatenate([self.state_norm.apply(s2), self.action_norm.apply(a2)], axis=1)
        d = self.state_dim
        mus, lvs = _member_outputs(self.members, x, d, self.probabilistic, self.lv_bounds)
        mus = self.delta_norm.invert(mus)
        var = None if lvs is None else np.exp(lvs) * self.delta_norm.std ** 2
        mean, std = aggregate_ensemble(mus, var)
        mean = s2 + mean
        if not self.probabilistic and len(self.members) == 1:
            std = None
        if single:
            return mean[0], None if std is None else std[0]
        return mean, std


def train_onestep(trajectories, spec: ModelSpec, seed: int) -> OneStepModel:
    if spec.trajectory_based:
        raise ValueError(f"{spec.kind} is not a one-step kind")
    cfg = spec.resolved()
    data = extract_transitions(trajectories)
    train_set, val_set = split(data, cfg["train_fraction"], np.random.default_rng(derive_seed(seed, "split")))
    s_norm = NormStats.fit(train_set.states)
    a_norm = NormStats.fit(train_set.actions)
    d_norm = NormStats.fit(train_set.deltas)

    def xy(ds):
        x = np.concatenate([s_norm.apply(ds.states), a_norm.apply(ds.actions)], axis=1)
        return x, d_norm.apply(ds.deltas)

    x_tr, y_tr = xy(train_set)
    x_va, y_va = xy(val_set) if len(val_set) else (None, None)
    members, results = _fit_members(spec, x_tr, y_tr, x_va, y_va, data.states.shape[1], seed)
    return OneStepModel(spec.kind, members, s_norm, a_norm, d_norm, tuple(spec.lv_bounds), seed,
                        [dict(train=r.train_loss, val=r.val_loss, best_epoch=r.best_epoch) for r in results])


def rollout_onestep(model, s0, H: int, actions=None, controller=None) -> PredictedTrajectory:
    """Recursive ``H``-step prediction from one start state.

    Exactly one of ``actions`` (oracle sequence, shape (>=H, d_a)) or
    ``controller`` (recomputes each action from the predicted state) is given.
    Probabilistic models propagate the mean; the per-step std is recorded.
    """
    acts = None if actions is None else np.asarray(actions, dtype=np.float64)[None]
    ctrls = None if controller is None else [controller]
    out = rollout_onestep_batch(model, np.asarray(s0, dtype=np.float64)[None], H, acts, ctrls)
    return PredictedTrajectory(out.horizons, out.means[0], None if out.stds is None else out.stds[0])


def rollout_onestep_batch(model, s0, H: int, actions=None, controllers=None) -> PredictedTrajectory:
    """Batched :func:`rollout_onestep`; ``means`` has shape (N, H, d)."""
    if (actions is None) == (controllers is None):
        raise ValueError("give exactly one of actions (oracle mode) or controllers (recompute mode)")
    s = np.atleast_2d(np.asarray(s0, dtype=np.float64))
    n, d = s.shape
    if actions is not None:
        actions = np.asarray(actions, dtype=np.float64)
        if actions.ndim == 2:
            actions = actions[None]
        if actions.shape[1] < H:
            raise ValueError(f"oracle action sequence has {actions.shape[1]} steps, need {H}")
    means = np.empty((n, H, d))
    stds = None
    for t in range(H):
        if actions is not None:
            a = actions[:, t]
        else:
            a = np.stack([np.atleast_1d(c.act(row)) for c, row in zip(controllers, s)])
        s, sd = model.predict_next(s, a)
        means[:, t] = s
        if sd is not None:
            if stds is None:
                stds = np.empty((n, H, d))
            stds[:, t] = sd
    return PredictedTrajectory(np.arange(1, H + 1), means, stds)


# --------------------------------------------------------------------------- trajectory-based


@dataclass
class TrajectoryModel:
    kind: str
    members: list
    state_norm: NormStats
    horizon_norm: NormStats
    max_length: int
    box: Box
    lv_bounds: tuple = nn.DEFAULT_LOGVAR_BOUNDS
    seed: int = 0
    history: list = field(default_factory=list)

    @property
    def probabilistic(self) -> bool:
        return TRAJECTORY_KINDS[self.kind][0]

    @property
    def state_dim(self) -> int:
        return len(self.state_norm.mean)

    def features(self, s0, theta_encoded, horizons) -> np.ndarray:
        hz = np.asarray(horizons, dtype=np.float64).reshape(-1, 1) / self.max_length
        return np.concatenate([self.state_norm.apply(s0), self.horizon_norm.apply(hz),
                               np.asarray(theta_encoded, dtype=np.float64)], axis=1)

    def predict_batch(self, s0, theta, horizons, encoded: bool = False):
        """Rows are independent queries ``(s0[i], theta[i], horizons[i])``.

        Raw ``theta`` must lie inside the model's parameter box.
        """
        if not self.members:
            raise RuntimeError("model has not been trained")
        s0 = np.atleast_2d(np.asarray(s0, dtype=np.float64))
        theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
        horizons = np.asarray(horizons).reshape(-1)
        if np.any(horizons < 1):
            raise ValueError("horizons must be >= 1")
        enc = theta if encoded else encode_params(theta, self.box)
        x = self.features(s0, enc, horizons)
        mus, lvs = _member_outputs(self.members, x, self.state_dim, self.probabilistic, self.lv_bounds)
        mus = self.state_norm.invert(mus)
        var = None if lvs is None else np.exp(lvs) * self.state_norm.std ** 2
        mean, std = aggregate_ensemble(mus, var)
        if not self.probabilistic and len(self.members) == 1:
            std = None
        return mean, std

    def predict_horizon(self, s0, theta, h: int):
        if h < 1:
            raise ValueError("h must be >= 1")
        mean, std = self.predict_batch(np.asarray(s0)[None], np.atleast_1d(theta)[None], [h])
        return mean[0], None if std is None else std[0]

    def predict_trajectory(self, s0, theta, horizons) -> PredictedTrajectory:
        horizons = np.asarray(horizons, dtype=np.int64).reshape(-1)
        d = self.state_dim
        if len(horizons) == 0:
            return PredictedTrajectory(horizons, np.empty((0, d)), np.empty((0, d)) if self.probabilistic else None)
        if np.any(np.diff(horizons) <= 0) or horizons[0] < 1:
            raise ValueError("horizons must be strictly increasing and >= 1")
        H = len(horizons)
        s = np.repeat(np.asarray(s0, dtype=np.float64)[None], H, axis=0)
        th = np.repeat(np.atleast_1d(np.asarray(theta, dtype=np.float64))[None], H, axis=0)
        mean, std = self.predict_batch(s, th, horizons)
        return PredictedTrajectory(horizons, mean, std)

    def predict_trajectories(self, s0, theta, H: int):
        """``(N, H, d)`` predictions for horizons ``1..H`` of N start/param pairs in one pass."""
        s0 = np.atleast_2d(s0)
        theta = np.atleast_2d(theta)
        n = len(s0)
        hs = np.tile(np.arange(1, H + 1), n)
        mean, std = self.predict_batch(np.repeat(s0, H, axis=0), np.repeat(theta, H, axis=0), hs)
        d = mean.shape[1]
        return mean.reshape(n, H, d), None if std is None else std.reshape(n, H, d)


def relabeled_training_set(trajectories, spec: ModelSpec, box: Box, seed: int):
    cfg = spec.resolved()
    data = relabel(trajectories, box)
    data = cap_dataset(data, spec.cap, np.random.default_rng(derive_seed(seed, "cap")))
    return split(data, cfg["train_fraction"], np.random.default_rng(derive_seed(seed, "split"))), data.max_length


def train_trajectory(trajectories, spec: ModelSpec, box: Box, seed: int,
                     snapshot_epochs=()) -> TrajectoryModel:
    """Relabel, cap, split, normalize and fit a trajectory-based model.

    With ``snapshot_epochs`` the returned model carries ``snapshots``: a dict
    epoch -> TrajectoryModel of the same run stopped after that epoch.
    """
    if not spec.trajectory_based:
        raise ValueError(f"{spec.kind} is not a trajectory-based kind")
    (train_set, val_set), max_len = relabeled_training_set(trajectories, spec, box, seed)
    s_norm = NormStats.fit(train_set.start_states)
    h_norm = NormStats.fit(train_set.horizons[:, None] / max_len)

    def xy(ds):
        hz = ds.horizons[:, None] / max_len
        x = np.concatenate([s_norm.apply(ds.start_states), h_norm.apply(hz), ds.params], axis=1)
        return x, s_norm.apply(ds.targets)

    x_tr, y_tr = xy(train_set)
    x_va, y_va = xy(val_set) if len(val_set) else (None, None)
    members, results = _fit_members(spec, x_tr, y_tr, x_va, y_va, train_set.targets.shape[1], seed,
                                     snapshot_epochs)
    model = TrajectoryModel(spec.kind, members, s_norm, h_norm, max_len, box, tuple(spec.lv_bounds), seed,
                            [dict(train=r.train_loss, val=r.val_loss) for r in results])
    if snapshot_epochs:
        model.snapshots = {
            e: TrajectoryModel(spec.kind, [r.snapshots[e] for r in results], s_norm, h_norm, max_len, box,
                               tuple(spec.lv_bounds), seed)
            for e in snapshot_epochs
        }
    return model


def train_model(trajectories, spec: ModelSpec, seed: int, box: Optional[Box] = None):
    if spec.trajectory_based:
        if box is None:
            raise ValueError("trajectory-based models need the controller parameter box")
        return train_trajectory(trajectories, spec, box, seed)
    return train_onestep(trajectories, spec, seed)


# --------------------------------------------------------------------------- stubs


class EnvOneStepModel:
    """Exact one-step "model" that calls the simulator; used as an oracle."""

    probabilistic = False

    def __init__(self, env):
        self.env = env

    def predict_next(self, s, a):
        s = np.asarray(s, dtype=np.float64)
        if s.ndim == 1:
            return self.env.step(s, a), None
        return self.env.step_batch(s, np.asarray(a).reshape(len(s), -1)), None


class EnvTrajectoryModel:
    """Exact trajectory "model": simulates ``controller_factory(theta)`` from ``s0``."""

    probabilistic = False

    def __init__(self, env, controller_factory: Callable, box: Box):
        self.env, self.factory, self.box = env, controller_factory, box

    def predict_trajectories(self, s0, theta, H: int):
        s0 = np.atleast_2d(s0)
        theta = np.atleast_2d(theta)
        if not np.all(self.box.contains(theta)):
            raise ValueError("parameters outside box")
        ctrls = [self.factory(t) for t in theta]
        if hasattr(self.env, "linear_rollouts") and all(hasattr(c, "gain") for c in ctrls):
            out = np.empty((len(s0), H, s0.shape[1]))
            for i, (s, c) in enumerate(zip(s0, ctrls)):
                states, _ = self.env.linear_rollouts(s, np.atleast_2d(c.gain), H)
                out[i] = states[0, 1:]
            return out, None
        out = np.empty((len(s0), H, s0.shape[1]))
        for i, (s, c) in enumerate(zip(s0, ctrls)):
            x = s.copy()
            for t in range(H):
                x = self.env.step(x, c.act(x))
                out[i, t] = x
        return out, None

    def predict_trajectory(self, s0, theta, horizons) -> PredictedTrajectory:
        horizons = np.asarray(horizons, dtype=np.int64)
        H = int(horizons.max()) if len(horizons) else 0
        if H == 0:
            return PredictedTrajectory(horizons, np.empty((0, len(s0))))
        means, _ = self.predict_trajectories(s0, theta, H)
        return PredictedTrajectory(horizons, means[0][horizons - 1])


# --------------------------------------------------------------------------- checkpoints


def save_model(path, model) -> None:
    blocks = {}
    for k, net in enumerate(model.members):
        for i, (W, b) in enumerate(zip(net.weights, net.biases)):
            blocks[f"m{k}.W{i}"] = W
            blocks[f"m{k}.b{i}"] = b
    meta = {
        "kind": model.kind,
        "family": "trajectory" if isinstance(model, TrajectoryModel) else "onestep",
        "loss": "nll" if model.probabilistic else "mse",
        "ensemble_size": len(model.members),
        "architecture": model.members[0].sizes,
        "activation": model.members[0].activation,
        "dtype": str(model.members[0].dtype),
        "lv_bounds": list(model.lv_bounds),
        "seed": int(model.seed),
        "state_norm": model.state_norm.to_dict(),
    }
    if isinstance(model, TrajectoryModel):
        meta.update(horizon_norm=model.horizon_norm.to_dict(), max_length=int(model.max_length),
                    box={"low": list(model.box.low), "high": list(model.box.high)})
    else:
        meta.update(action_norm=model.action_norm.to_dict(), delta_norm=model.delta_norm.to_dict())
    storage.write_container(path, "model", CHECKPOINT_SCHEMA_VERSION, meta, blocks)


def load_model(path):
    header, blocks = storage.read_container(path, kind="model")
    if header["schema_version"] != CHECKPOINT_SCHEMA_VERSION:
        raise storage.FormatError(f"{path}: unsupported checkpoint version {header['schema_version']}")
    meta = header["meta"]
    n_layers = len(meta["architecture"]) - 1
    dtype = np.dtype(meta["dtype"])
    members = [
        nn.MLP([blocks[f"m{k}.W{i}"].astype(dtype) for i in range(n_layers)],
               [blocks[f"m{k}.b{i}"].astype(dtype) for i in range(n_layers)], meta["activation"])
        for k in range(meta["ensemble_size"])
    ]
    s_norm = NormStats.from_dict(meta["state_norm"])
    if meta["family"] == "trajectory":
        box = Box(tuple(meta["box"]["low"]), tuple(meta["box"]["high"]))
        return TrajectoryModel(meta["kind"], members, s_norm, NormStats.from_dict(meta["horizon_norm"]),
                               meta["max_length"], box, tuple(meta["lv_bounds"]), meta["seed"])
    return OneStepModel(meta["kind"], members, s_norm, NormStats.from_dict(meta["action_norm"]),
                        NormStats.from_dict(meta["delta_norm"]), tuple(meta["lv_bounds"]), meta["seed"])
