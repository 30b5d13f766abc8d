"""Dataset construction for one-step and trajectory-based training.

One-step models learn from consecutive transitions; trajectory-based models
learn from every (start index, horizon) pair of each trajectory, so a
trajectory with ``L`` transitions contributes ``L * (L + 1) / 2`` rows.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import kernels, storage
from .control import Box, encode_params
from .envs import Trajectory

log = logging.getLogger(__name__)

STD_FLOOR = 1e-8
DATASET_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class NormStats:
    """Per-dimension standardization plus the observed ``[low, high]`` range."""

    mean: np.ndarray
    std: np.ndarray
    low: np.ndarray
    high: np.ndarray

    @classmethod
    def fit(cls, x, eps: float = STD_FLOOR) -> "NormStats":
        x = np.asarray(x, dtype=np.float64)
        x = x.reshape(len(x), -1)
        return cls(x.mean(axis=0), np.maximum(x.std(axis=0), eps), x.min(axis=0), x.max(axis=0))

    def apply(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def invert(self, z) -> np.ndarray:
        return np.asarray(z, dtype=np.float64) * self.std + self.mean

    def to_dict(self) -> dict:
        return {k: np.asarray(getattr(self, k)).tolist() for k in ("mean", "std", "low", "high")}

    @classmethod
    def from_dict(cls, d) -> "NormStats":
        return cls(*(np.asarray(d[k], dtype=np.float64) for k in ("mean", "std", "low", "high")))


# fit / apply / invert as free functions for callers that prefer them
def fit_norm(x, eps: float = STD_FLOOR) -> NormStats:
    return NormStats.fit(x, eps)


def apply_norm(stats: NormStats, x) -> np.ndarray:
    return stats.apply(x)


def invert_norm(stats: NormStats, z) -> np.ndarray:
    return stats.invert(z)


@dataclass
class TransitionDataset:
    states: np.ndarray
    actions: np.ndarray
    deltas: np.ndarray
    traj_index: np.ndarray
    time_index: np.ndarray

    def __len__(self):
        return len(self.states)

    @property
    def next_states(self) -> np.ndarray:
        return self.states + self.deltas

    def subset(self, idx) -> "TransitionDataset":
        return TransitionDataset(self.states[idx], self.actions[idx], self.deltas[idx],
                                 self.traj_index[idx], self.time_index[idx])


@dataclass
class RelabeledDataset:
    start_states: np.ndarray
    horizons: np.ndarray
    params: np.ndarray  # encoded into [-1, 1]
    targets: np.ndarray  # absolute state at start + horizon
    traj_index: np.ndarray
    start_index: np.ndarray
    box: Box
    max_length: int
    capped: bool = False

    def __len__(self):
        return len(self.start_states)

    def subset(self, idx, capped: Optional[bool] = None) -> "RelabeledDataset":
        return replace(self, start_states=self.start_states[idx], horizons=self.horizons[idx],
                       params=self.params[idx], targets=self.targets[idx],
                       traj_index=self.traj_index[idx], start_index=self.start_index[idx],
                       capped=self.capped if capped is None else capped)


def extract_transitions(trajectories: Sequence[Trajectory]) -> TransitionDataset:
    if len(trajectories) == 0:
        raise ValueError("need at least one trajectory")
    s, a, d, ti, tt = [], [], [], [], []
    for j, tr in enumerate(trajectories):
        L = tr.length
        s.append(tr.states[:-1])
        a.append(tr.actions)
        d.append(tr.states[1:] - tr.states[:-1])
        ti.append(np.full(L, j, dtype=np.int64))
        tt.append(np.arange(L, dtype=np.int64))
    return TransitionDataset(np.concatenate(s), np.concatenate(a), np.concatenate(d),
                             np.concatenate(ti), np.concatenate(tt))


def relabel(trajectories: Sequence[Trajectory], box: Box) -> RelabeledDataset:
    """Every ``(s_i, h, theta) -> s_{i+h}`` for ``0 <= i < L`` and ``1 <= h <= L - i``."""
    if len(trajectories) == 0:
        raise ValueError("need at least one trajectory")
    for j, tr in enumerate(trajectories):
        if tr.controller_params is None:
            raise ValueError(f"trajectory {j} has no controller parameters; cannot relabel")
    lengths = np.array([tr.length for tr in trajectories], dtype=np.int64)
    traj, start, horizon = kernels.relabel_index(lengths)
    offsets = np.concatenate([[0], np.cumsum(lengths + 1)[:-1]])
    all_states = np.concatenate([tr.states for tr in trajectories])
    enc = np.stack([encode_params(tr.controller_params, box) for tr in trajectories])
    base = offsets[traj] + start
    return RelabeledDataset(
        start_states=all_states[base], horizons=horizon, params=enc[traj],
        targets=all_states[base + horizon], traj_index=traj, start_index=start,
        box=box, max_length=int(lengths.max()),
    )


def cap_dataset(dataset, cap: int, rng: np.random.Generator):
    """Uniform random downsample to ``cap`` rows (kept in original order)."""
    if cap < 1:
        raise ValueError("cap must be >= 1")
    n = len(dataset)
    if n <= cap:
        return dataset
    idx = np.sort(rng.choice(n, size=cap, replace=False))
    if isinstance(dataset, RelabeledDataset):
        return dataset.subset(idx, capped=True)
    return dataset.subset(idx)


def split(dataset, train_fraction: float, rng: np.random.Generator):
    """Disjoint, exhaustive random split; returns ``(train, test)``."""
    if not 0 < train_fraction <= 1:
        raise ValueError("train_fraction must be in (0, 1]")
    n = len(dataset)
    perm = rng.permutation(n)
    k = int(round(train_fraction * n))
    return dataset.subset(np.sort(perm[:k])), dataset.subset(np.sort(perm[k:]))


# --------------------------------------------------------------------------- files


def save_trajectories(path, trajectories: Sequence[Trajectory], env_id: str, dt: float,
                      box: Optional[Box] = None, extra: Optional[dict] = None) -> None:
    """Write trajectories to the binary dataset container."""
    if len(trajectories) == 0:
        raise ValueError("no trajectories to save")
    lengths = np.array([t.length for t in trajectories], dtype=np.int64)
    has_params = all(t.controller_params is not None for t in trajectories)
    meta = {
        "env_id": env_id,
        "state_dim": int(trajectories[0].states.shape[1]),
        "action_dim": int(trajectories[0].actions.shape[1]),
        "param_dim": int(len(trajectories[0].controller_params)) if has_params else 0,
        "dt": float(dt),
        "n_trajectories": len(trajectories),
        "byte_order": "little",
        "box": None if box is None else {"low": list(box.low), "high": list(box.high)},
    }
    if extra:
        meta.update(extra)
    blocks = {
        "lengths": lengths,
        "seeds": np.array([t.seed for t in trajectories], dtype=np.int64),
        "states": np.concatenate([t.states for t in trajectories]),
        "actions": np.concatenate([t.actions for t in trajectories]),
        "rewards": np.concatenate([t.rewards for t in trajectories]),
    }
    if has_params:
        blocks["params"] = np.stack([t.controller_params for t in trajectories])
    storage.write_container(path, "trajectories", DATASET_SCHEMA_VERSION, meta, blocks)


def load_trajectories(path):
    """Return ``(trajectories, meta)``."""
    header, b = storage.read_container(path, kind="trajectories")
    if header["schema_version"] != DATASET_SCHEMA_VERSION:
        raise storage.FormatError(f"{path}: unsupported schema version {header['schema_version']}")
    meta = header["meta"]
    lengths = b["lengths"]
    trajs, so, ao = [], 0, 0
    for j, L in enumerate(lengths):
        L = int(L)
        params = b["params"][j] if "params" in b else None
        trajs.append(Trajectory(b["states"][so: so + L + 1], b["actions"][ao: ao + L],
                                b["rewards"][ao: ao + L], params, int(b["seeds"][j])))
        so += L + 1
        ao += L
    if len(trajs) != meta["n_trajectories"]:
        raise storage.FormatError(f"{path}: header says {meta['n_trajectories']} trajectories, found {len(trajs)}")
    return trajs, meta


def export_csv(path, trajectories: Sequence[Trajectory]) -> None:
    """One row per step: trajectory, t, state..., action..., reward (blank on the last state)."""
    d_s = trajectories[0].states.shape[1]
    d_a = trajectories[0].actions.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trajectory", "t"] + [f"s{i}" for i in range(d_s)]
                   + [f"a{i}" for i in range(d_a)] + ["reward"])
        for j, tr in enumerate(trajectories):
            for t in range(tr.length + 1):
                act = [repr(float(v)) for v in tr.actions[t]] if t < tr.length else [""] * d_a
                rew = repr(float(tr.rewards[t])) if t < tr.length else ""
                w.writerow([j, t] + [repr(float(v)) for v in tr.states[t]] + act + [rew])
