"""Evaluation protocols for long-horizon prediction, reward prediction and the ablations."""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import gp, nn
from .control import Box, encode_params
from .models import (ModelSpec, OneStepModel, TrajectoryModel, rollout_onestep_batch, train_onestep,
                     train_trajectory)
from .seeding import derive_seed

log = logging.getLogger(__name__)

ERROR_CAP = 1e12
PERCENTILES = (50, 65, 95)


# --------------------------------------------------------------------------- per-step error


@dataclass
class HorizonErrorCurve:
    median: np.ndarray
    p65: np.ndarray
    p95: np.ndarray
    count: np.ndarray
    train_length: Optional[int] = None
    dropped_dims: tuple = ()

    @property
    def steps(self) -> np.ndarray:
        return np.arange(1, len(self.median) + 1)

    def at(self, h: int) -> float:
        return float(self.median[h - 1])

    def rows(self, label: str = ""):
        for h, a, b, c, n in zip(self.steps, self.median, self.p65, self.p95, self.count):
            yield [label, int(h), a, b, c, int(n), "" if self.train_length is None else self.train_length]


CURVE_HEADER = ["model", "h", "median", "p65", "p95", "n", "train_length"]


def truth_scaling(truth):
    """Per-dim (min, max) of ground-truth states, ignoring padding."""
    flat = np.asarray(truth, dtype=np.float64).reshape(-1, np.shape(truth)[-1])
    return np.nanmin(flat, axis=0), np.nanmax(flat, axis=0)


def per_step_errors(predicted, truth, scaling=None):
    """Normalized squared error per (trajectory, step): shape (N, H); NaN where truth is padding.

    Each state dim is min-max scaled with ``scaling`` (computed from the truth
    when omitted); degenerate dims are dropped. Values are capped at ERROR_CAP.
    """
    predicted = np.asarray(predicted, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if predicted.shape != truth.shape:
        raise ValueError(f"shape mismatch {predicted.shape} vs {truth.shape}")
    low, high = truth_scaling(truth) if scaling is None else map(np.asarray, scaling)
    span = high - low
    keep = span > 0
    dropped = tuple(int(i) for i in np.flatnonzero(~keep))
    if dropped:
        log.warning("per_step_errors: dropping degenerate dims %s", dropped)
    if not keep.any():
        raise ValueError("every state dim is degenerate")
    with np.errstate(over="ignore", invalid="ignore"):
        z = (predicted[..., keep] - truth[..., keep]) / span[keep]
        err = np.mean(z * z, axis=-1)
    pad = np.isnan(truth[..., keep]).any(axis=-1)
    err = np.where(np.isfinite(err), np.minimum(err, ERROR_CAP), ERROR_CAP)
    err[pad] = np.nan
    return err, dropped


def per_step_mse(predicted, truth, scaling=None, train_length: Optional[int] = None) -> HorizonErrorCurve:
    err, dropped = per_step_errors(predicted, truth, scaling)
    count = np.sum(~np.isnan(err), axis=0)
    with warnings.catch_warnings():
        # all-NaN columns (every trajectory terminated) give NaN rows with n = 0
        warnings.simplefilter("ignore", RuntimeWarning)
        q = np.nanpercentile(err, PERCENTILES, axis=0)
    return HorizonErrorCurve(q[0], q[1], q[2], count, train_length, dropped)


def write_curves(path, curves: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CURVE_HEADER)
        for label, c in curves.items():
            for row in c.rows(label):
                w.writerow([_fmt(v) for v in row])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


# --------------------------------------------------------------------------- batched predictions


@dataclass
class EvalSet:
    """Validation trajectories padded to a common horizon."""

    s0: np.ndarray
    thetas: Optional[np.ndarray]
    actions: np.ndarray  # zero-padded past termination
    truth: np.ndarray  # NaN-padded past termination
    lengths: np.ndarray

    @classmethod
    def from_trajectories(cls, trajectories, horizon: Optional[int] = None) -> "EvalSet":
        H = horizon or max(t.length for t in trajectories)
        n, d = len(trajectories), trajectories[0].states.shape[1]
        da = trajectories[0].actions.shape[1]
        truth = np.full((n, H, d), np.nan)
        actions = np.zeros((n, H, da))
        for i, t in enumerate(trajectories):
            L = min(t.length, H)
            truth[i, :L] = t.states[1: L + 1]
            actions[i, :L] = t.actions[:L]
        has = all(t.controller_params is not None for t in trajectories)
        thetas = np.stack([t.controller_params for t in trajectories]) if has else None
        return cls(np.stack([t.states[0] for t in trajectories]), thetas, actions, truth,
                   np.array([min(t.length, H) for t in trajectories]))

    @property
    def horizon(self) -> int:
        return self.truth.shape[1]


def predict_eval_set(model, ev: EvalSet, controllers=None):
    """(N, H, d) predicted states: oracle actions for one-step models unless ``controllers`` given."""
    if isinstance(model, TrajectoryModel) or hasattr(model, "predict_trajectories"):
        return model.predict_trajectories(ev.s0, ev.thetas, ev.horizon)
    if controllers is not None:
        out = rollout_onestep_batch(model, ev.s0, ev.horizon, controllers=controllers)
    else:
        out = rollout_onestep_batch(model, ev.s0, ev.horizon, actions=ev.actions)
    return out.means, out.stds


def horizon_curves(models: dict, ev: EvalSet, scaling=None, train_length=None) -> dict:
    scaling = truth_scaling(ev.truth) if scaling is None else scaling
    return {name: per_step_mse(predict_eval_set(m, ev)[0], ev.truth, scaling, train_length)
            for name, m in models.items()}


# --------------------------------------------------------------------------- reward prediction


REWARD_METHODS = ("direct_gp", "direct_nn", "onestep_oracle", "onestep_pred_actions", "trajectory")


@dataclass
class RewardPredictionReport:
    rows: dict = field(default_factory=dict)  # method -> (mse_mean, mse_std, n)

    def mse(self, method: str) -> float:
        return self.rows[method][0]

    def write(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["method", "mse_mean", "mse_std", "n"])
            for m in REWARD_METHODS:
                if m in self.rows:
                    mean, std, n = self.rows[m]
                    w.writerow([m, repr(mean), repr(std), n])


def per_step_rewards(env, states, lengths) -> np.ndarray:
    """Mean reward of each predicted row (N, H, d) over its first ``lengths[i]`` steps.

    Predictions are scored over exactly the steps the real trajectory recorded,
    so early-terminated episodes are compared on equal footing.
    """
    states = np.asarray(states, dtype=np.float64)
    lengths = np.asarray(lengths)
    with np.errstate(over="ignore", invalid="ignore"):
        r = env.reward(states)
    mask = np.arange(states.shape[1])[None, :] < lengths[:, None]
    r = np.where(mask, np.where(np.isfinite(r), r, -ERROR_CAP), 0.0)
    return np.maximum(r.sum(axis=1), -ERROR_CAP) / lengths


def true_per_step_rewards(trajectories) -> np.ndarray:
    return np.array([float(np.mean(t.rewards)) for t in trajectories])


def direct_features(trajectories, box: Box) -> np.ndarray:
    return np.stack([np.concatenate([t.states[0], encode_params(t.controller_params, box)])
                     for t in trajectories])


class DirectRewardMap:
    """``(s0, theta) -> per-step reward`` regressor with targets scaled to [-1, 1]."""

    def __init__(self, kind: str, box: Box, seed: int, nn_epochs: int = 300, nn_lr: float = 1e-3,
                 nn_batch: int = 16, hidden=(250, 250)):
        if kind not in ("gp", "nn"):
            raise ValueError(kind)
        self.kind, self.box, self.seed = kind, box, seed
        self.nn_cfg = dict(epochs=nn_epochs, lr=nn_lr, batch=nn_batch, hidden=hidden)

    def fit(self, trajectories) -> "DirectRewardMap":
        X = direct_features(trajectories, self.box)
        y = true_per_step_rewards(trajectories)
        self.x_mean, self.x_std = X.mean(0), np.maximum(X.std(0), 1e-8)
        self.y_lo, self.y_hi = float(y.min()), float(y.max())
        span = max(self.y_hi - self.y_lo, 1e-12)
        z = 2.0 * (y - self.y_lo) / span - 1.0
        Xn = (X - self.x_mean) / self.x_std
        if self.kind == "gp":
            self.model = gp.gp_fit(Xn, z, seed=derive_seed(self.seed, "direct_gp"))
        else:
            c = self.nn_cfg
            net = nn.init_mlp([X.shape[1], *c["hidden"], 1], np.random.default_rng(derive_seed(self.seed, "direct_nn")))
            self.model = nn.train(net, Xn, z[:, None], "mse", c["epochs"], c["batch"], c["lr"],
                                  derive_seed(self.seed, "direct_nn_shuffle")).net
        return self

    def predict(self, trajectories) -> np.ndarray:
        Xn = (direct_features(trajectories, self.box) - self.x_mean) / self.x_std
        z = gp.gp_predict(self.model, Xn)[0] if self.kind == "gp" else nn.forward(self.model, Xn)[:, 0]
        return self.y_lo + (np.asarray(z, np.float64) + 1.0) * 0.5 * (self.y_hi - self.y_lo)


def reward_predictions(env, eval_trajs, horizon: int, trajectory_model=None, onestep_model=None,
                       direct_gp=None, direct_nn=None, factory: Optional[Callable] = None) -> dict:
    """Per-method predicted per-step rewards; absent artifacts are skipped."""
    ev = EvalSet.from_trajectories(eval_trajs, horizon)
    out = {}
    if direct_gp is not None:
        out["direct_gp"] = direct_gp.predict(eval_trajs)
    if direct_nn is not None:
        out["direct_nn"] = direct_nn.predict(eval_trajs)
    if onestep_model is not None:
        out["onestep_oracle"] = per_step_rewards(env, predict_eval_set(onestep_model, ev)[0], ev.lengths)
        if factory is not None:
            ctrls = [factory(th) for th in ev.thetas]
            out["onestep_pred_actions"] = per_step_rewards(env, predict_eval_set(onestep_model, ev, ctrls)[0],
                                                           ev.lengths)
    if trajectory_model is not None:
        out["trajectory"] = per_step_rewards(env, predict_eval_set(trajectory_model, ev)[0], ev.lengths)
    return out


def reward_prediction_eval(eval_trajs, predictions: dict) -> RewardPredictionReport:
    truth = true_per_step_rewards(eval_trajs)
    report = RewardPredictionReport()
    for method in REWARD_METHODS:
        if method not in predictions:
            log.warning("reward prediction: no artifact for %s; row omitted", method)
            continue
        with np.errstate(over="ignore", invalid="ignore"):
            se = (np.asarray(predictions[method], np.float64) - truth) ** 2
        se = np.where(np.isfinite(se), np.minimum(se, ERROR_CAP), ERROR_CAP)
        report.rows[method] = (float(se.mean()), float(se.std()), int(len(se)))
    return report


# --------------------------------------------------------------------------- sample efficiency


def cumulative_error(model, ev: EvalSet, scaling) -> float:
    """Median over validation trajectories of the summed per-step normalized error."""
    err, _ = per_step_errors(predict_eval_set(model, ev)[0], ev.truth, scaling)
    return float(np.median(np.minimum(np.nansum(err, axis=1), ERROR_CAP)))


def sample_efficiency_grid(env, recipe, kinds: Sequence[str], lengths: Sequence[int], counts: Sequence[int],
                           val_trajs, seeds: Sequence[int], specs: Optional[dict] = None) -> list:
    """Rows ``(kind, L, N, seed, cumulative_error)``; every cell trains from scratch."""
    if min(counts) < 1:
        raise ValueError("N must be >= 1")
    ev = EvalSet.from_trajectories(val_trajs)
    scaling = truth_scaling(ev.truth)
    rows = []
    for L in lengths:
        for N in counts:
            for seed in seeds:
                data = recipe.generate(env, N, L, derive_seed(seed, "grid", L, N))
                for kind in kinds:
                    spec = (specs or {}).get(kind, ModelSpec(kind))
                    if spec.trajectory_based:
                        model = train_trajectory(data, spec, recipe.box, derive_seed(seed, "model", kind))
                    else:
                        model = train_onestep(data, spec, derive_seed(seed, "model", kind))
                    rows.append((kind, L, N, seed, cumulative_error(model, ev, scaling)))
                    log.info("grid L=%d N=%d seed=%d %s: %.4g", L, N, seed, kind, rows[-1][-1])
    return rows


def grid_medians(rows) -> dict:
    cells = {}
    for kind, L, N, _, e in rows:
        cells.setdefault((kind, L, N), []).append(e)
    return {k: float(np.median(v)) for k, v in cells.items()}


# --------------------------------------------------------------------------- datatype matrix


def datatype_matrix(env, recipes: dict, n: int, length: int, seed: int, kinds=("D", "T"),
                    train_kinds=None, test_kinds=None, specs: Optional[dict] = None) -> dict:
    """``{(train, test, kind): HorizonErrorCurve}`` over stable/unstable/periodic datasets."""
    train_kinds = train_kinds or list(recipes)
    test_kinds = test_kinds or list(recipes)
    box = next(iter(recipes.values())).box
    tests = {k: EvalSet.from_trajectories(recipes[k].generate(env, n, length, derive_seed(seed, "test", k)), length)
             for k in test_kinds}
    out = {}
    for tk in train_kinds:
        data = recipes[tk].generate(env, n, length, derive_seed(seed, "train", tk))
        for kind in kinds:
            spec = (specs or {}).get(kind, ModelSpec(kind))
            if spec.trajectory_based:
                model = train_trajectory(data, spec, box, derive_seed(seed, "model", tk, kind))
            else:
                model = train_onestep(data, spec, derive_seed(seed, "model", tk, kind))
            for ek, ev in tests.items():
                out[(tk, ek, kind)] = per_step_mse(predict_eval_set(model, ev)[0], ev.truth, train_length=length)
    return out


# --------------------------------------------------------------------------- uncertainty, epochs


def uncertainty_profile(model, ev: EvalSet) -> np.ndarray:
    """Mean predicted sigma per horizon (standardized units, averaged over dims and active starts)."""
    if not getattr(model, "probabilistic", False):
        raise ValueError("uncertainty profile needs a probabilistic model")
    _, std = predict_eval_set(model, ev)
    z = std / model.state_norm.std
    active = ~np.isnan(ev.truth).any(axis=-1)
    per = z.mean(axis=-1)
    with np.errstate(invalid="ignore"):
        return np.where(active, per, 0.0).sum(axis=0) / np.maximum(active.sum(axis=0), 1)


def window_mean(curve, lo: int, hi: int) -> float:
    """Mean of ``curve`` over horizons ``lo..hi`` inclusive (1-based)."""
    return float(np.mean(np.asarray(curve)[lo - 1: hi]))


def mean_step_error(model, ev: EvalSet, scaling=None) -> float:
    err, _ = per_step_errors(predict_eval_set(model, ev)[0], ev.truth, scaling)
    return float(np.nanmean(err))


def epoch_sweep(trajectories, ev: EvalSet, box: Box, seed: int, epochs=(1, 3, 5, 8, 12, 16),
                spec: Optional[ModelSpec] = None) -> dict:
    """Test error after each epoch count of one seeded training run.

    Epoch ``e`` is the same network a fresh run with ``epochs=e`` and the
    same seed would return, so one run to ``max(epochs)`` covers the sweep.
    """
    spec = spec or ModelSpec("T")
    model = train_trajectory(trajectories, replace(spec, epochs=max(epochs)), box, seed, snapshot_epochs=tuple(epochs))
    scaling = truth_scaling(ev.truth)
    return {e: mean_step_error(model.snapshots[e], ev, scaling) for e in epochs}
