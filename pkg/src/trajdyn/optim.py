"""Derivative-free optimizers and planners built on learned dynamics models.

All optimizers here *maximize*.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.optimize import minimize

from . import gp
from .control import Box
from .envs import penalized_return, penalized_returns, rollout
from .seeding import derive_seed

log = logging.getLogger(__name__)

BOX_PENALTY = -10000.0
EIG_FLOOR = 1e-20


@dataclass(frozen=True)
class SearchBox:
    low: tuple
    high: tuple
    penalty: float = BOX_PENALTY

    def __post_init__(self):
        lo, hi = np.asarray(self.low, float), np.asarray(self.high, float)
        if lo.shape != hi.shape or np.any(lo >= hi):
            raise ValueError("need low < high elementwise")

    @classmethod
    def from_box(cls, box: Box, penalty: float = BOX_PENALTY) -> "SearchBox":
        return cls(tuple(box.low), tuple(box.high), penalty)

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.low, dtype=np.float64)

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.high, dtype=np.float64)

    @property
    def dim(self) -> int:
        return len(self.low)

    def contains(self, x) -> np.ndarray:
        x = np.asarray(x)
        return np.all((x >= self.lo) & (x <= self.hi), axis=-1)


# --------------------------------------------------------------------------- CMA-ES


@dataclass
class CmaEsState:
    mean: np.ndarray
    sigma: float
    C: np.ndarray
    p_sigma: np.ndarray
    p_c: np.ndarray
    lam: int
    mu: int
    weights: np.ndarray
    generation: int = 0
    evaluations: int = 0
    B: np.ndarray = None
    D: np.ndarray = None
    floor_events: int = 0

    @property
    def dim(self) -> int:
        return len(self.mean)

    @property
    def mueff(self) -> float:
        return float(1.0 / np.sum(self.weights ** 2))


def cmaes_init(x0, sigma0: float, lam: Optional[int] = None) -> CmaEsState:
    x0 = np.asarray(x0, dtype=np.float64).reshape(-1)
    n = len(x0)
    lam = lam or 4 + int(np.floor(3 * np.log(n)))
    if lam < 4:
        raise ValueError("population size must be >= 4")
    mu = lam // 2
    w = np.log(mu + 0.5) - np.log(np.arange(1, mu + 1))
    return CmaEsState(x0.copy(), float(sigma0), np.eye(n), np.zeros(n), np.zeros(n), lam, mu,
                      w / w.sum(), B=np.eye(n), D=np.ones(n))


def cmaes_ask(state: CmaEsState, rng: np.random.Generator) -> np.ndarray:
    z = rng.standard_normal((state.lam, state.dim))
    return state.mean + state.sigma * (z * state.D) @ state.B.T


def cmaes_tell(state: CmaEsState, candidates, fitnesses) -> CmaEsState:
    """Standard (mu/mu_w, lambda) update with rank-one and rank-mu covariance terms."""
    X = np.asarray(candidates, dtype=np.float64)
    f = np.asarray(fitnesses, dtype=np.float64)
    if X.shape != (state.lam, state.dim) or f.shape != (state.lam,):
        raise ValueError("candidates/fitnesses do not match the population")
    if not np.all(np.isfinite(f)):
        raise ValueError("fitnesses must be finite")
    n, mueff, w = state.dim, state.mueff, state.weights
    cc = (4 + mueff / n) / (n + 4 + 2 * mueff / n)
    cs = (mueff + 2) / (n + mueff + 5)
    c1 = 2 / ((n + 1.3) ** 2 + mueff)
    cmu = min(1 - c1, 2 * (mueff - 2 + 1 / mueff) / ((n + 2) ** 2 + mueff))
    damps = 1 + 2 * max(0.0, np.sqrt((mueff - 1) / (n + 1)) - 1) + cs
    chi_n = np.sqrt(n) * (1 - 1 / (4 * n) + 1 / (21 * n * n))

    order = np.argsort(-f, kind="stable")[: state.mu]
    old = state.mean
    steps = (X[order] - old) / state.sigma
    y_w = w @ steps
    state.mean = old + state.sigma * y_w

    inv_sqrt_C = state.B @ np.diag(1.0 / state.D) @ state.B.T
    state.p_sigma = (1 - cs) * state.p_sigma + np.sqrt(cs * (2 - cs) * mueff) * inv_sqrt_C @ y_w
    state.generation += 1
    norm_ps = np.linalg.norm(state.p_sigma)
    hsig = norm_ps / np.sqrt(1 - (1 - cs) ** (2 * state.generation)) / chi_n < 1.4 + 2 / (n + 1)
    state.p_c = (1 - cc) * state.p_c + hsig * np.sqrt(cc * (2 - cc) * mueff) * y_w
    rank_mu = (steps * w[:, None]).T @ steps
    state.C = ((1 - c1 - cmu) * state.C
               + c1 * (np.outer(state.p_c, state.p_c) + (1 - hsig) * cc * (2 - cc) * state.C)
               + cmu * rank_mu)
    state.sigma *= float(np.exp((cs / damps) * (norm_ps / chi_n - 1)))
    state.evaluations += state.lam

    state.C = 0.5 * (state.C + state.C.T)
    evals, B = np.linalg.eigh(state.C)
    floor = EIG_FLOOR * float(evals.max())
    if evals.min() <= floor:
        state.floor_events += 1
        log.warning("cma-es: covariance eigenvalue %.3g floored at generation %d", evals.min(), state.generation)
        evals = np.maximum(evals, floor)
        state.C = (B * evals) @ B.T
    state.B, state.D = B, np.sqrt(evals)
    return state


@dataclass
class CmaResult:
    best_x: np.ndarray
    best_f: float
    evaluations: int
    trace: list = field(default_factory=list)  # (generation, evaluations, best_so_far, generation_mean)


def cmaes_optimize(fitness: Callable, box: SearchBox, rng: np.random.Generator, x0=None,
                   sigma0: Optional[float] = None, max_evals: int = 5000, tol_x: float = 1e-12,
                   lam: Optional[int] = None, tol_fun: float = 1e-12, patience: int = 200) -> CmaResult:
    """Maximize ``fitness`` (called on a (k, n) batch of in-box points) over ``box``.

    Out-of-box candidates never reach ``fitness``; they score ``box.penalty``.
    Stops at ``max_evals``, when the search distribution shrinks below
    ``tol_x`` (relative to the box), or after ``patience`` generations without
    a best-so-far gain above ``tol_fun``.
    """
    width = box.hi - box.lo
    x0 = 0.5 * (box.lo + box.hi) if x0 is None else np.asarray(x0, dtype=np.float64)
    sigma0 = 0.3 * float(np.mean(width)) if sigma0 is None else sigma0
    state = cmaes_init(x0, sigma0, lam)
    best_x, best_f = x0.copy(), -np.inf
    trace = []
    last_gain = (0, -np.inf)
    while state.evaluations + state.lam <= max_evals:
        X = cmaes_ask(state, rng)
        inside = box.contains(X)
        f = np.full(state.lam, box.penalty, dtype=np.float64)
        if inside.any():
            vals = np.asarray(fitness(X[inside]), dtype=np.float64).reshape(-1)
            f[inside] = np.where(np.isfinite(vals), vals, box.penalty)
        k = int(np.argmax(f))
        if f[k] > best_f and inside[k]:
            best_x, best_f = X[k].copy(), float(f[k])
        cmaes_tell(state, X, f)
        trace.append((state.generation, state.evaluations, best_f, float(f.mean())))
        if best_f > last_gain[1] + tol_fun:
            last_gain = (state.generation, best_f)
        if state.sigma * state.D.max() < tol_x * float(width.max()):
            break
        if state.generation - last_gain[0] >= patience:
            break
    return CmaResult(best_x, best_f, state.evaluations, trace)


# --------------------------------------------------------------------------- iterative learning


@dataclass
class IterationResult:
    thetas: list
    rewards: list  # per-step real reward of each executed trial
    trajectories: list = field(default_factory=list)

    @property
    def best_so_far(self) -> np.ndarray:
        return np.maximum.accumulate(np.asarray(self.rewards, dtype=np.float64))


def real_per_step_reward(env, controller, s0, horizon: int, seed: int = 0):
    tr = rollout(env, controller, horizon, seed, initial_state=s0)
    return penalized_return(env, tr.states[1:], horizon) / horizon, tr


def trajectory_optimization(env, box: Box, factory: Callable, fit_model: Callable, s0, trials: int,
                            seed: int, horizon: int = 200, max_evals: int = 5000,
                            first_theta=None) -> IterationResult:
    """Model-based iterative tuning of controller parameters.

    Trial 1 runs a random in-box ``theta``. Each later trial refits the model
    on every trajectory so far (``fit_model(trajectories, seed)``), maximizes
    the predicted per-step reward over ``box`` with CMA-ES starting from the
    incumbent, and runs the winner on ``env``.
    """
    sbox = SearchBox.from_box(box)
    rng = np.random.default_rng(derive_seed(seed, "trajopt"))
    s0 = np.asarray(s0, dtype=np.float64)
    theta = box.sample(np.random.default_rng(derive_seed(seed, "first"))) if first_theta is None else np.asarray(first_theta, float)
    out = IterationResult([], [])
    for trial in range(trials):
        if trial > 0:
            model = fit_model(out.trajectories, derive_seed(seed, "fit", trial))

            def fitness(th):
                pred, _ = model.predict_trajectories(np.repeat(s0[None], len(th), axis=0), th, horizon)
                return penalized_returns(env, pred, horizon) / horizon

            x0 = out.thetas[int(np.argmax(out.rewards))]
            res = cmaes_optimize(fitness, sbox, rng, x0=x0, max_evals=max_evals)
            theta = res.best_x
        r, tr = real_per_step_reward(env, factory(theta), s0, horizon)
        out.thetas.append(np.asarray(theta, dtype=np.float64))
        out.rewards.append(r)
        out.trajectories.append(tr)
        log.info("trajopt trial %d theta %s reward %.4g", trial + 1, np.round(theta, 4), r)
    return out


def bayes_opt(objective: Callable, box: Box, trials: int, seed: int, n_init: int = 2,
              n_random: int = 2000, n_local: int = 5) -> IterationResult:
    """GP-EI over ``theta``; ``objective(theta) -> float`` is the real-system reward.

    Inputs are mapped to the unit cube and targets min-max scaled to [0, 1]
    before every GP fit.
    """
    if trials < n_init or n_init < 2:
        raise ValueError("need at least two seed points and trials >= n_init")
    lo, hi = box.lo, box.hi
    rng = np.random.default_rng(derive_seed(seed, "bo"))
    first = np.random.default_rng(derive_seed(seed, "first"))
    out = IterationResult([], [])
    for trial in range(trials):
        if trial < n_init:
            theta = box.sample(first) if trial == 0 else box.sample(rng)
        else:
            theta = _next_ei_point(np.array(out.thetas), np.array(out.rewards), lo, hi, rng, n_random, n_local,
                                   derive_seed(seed, "gpfit", trial))
        out.thetas.append(np.asarray(theta, dtype=np.float64))
        out.rewards.append(float(objective(theta)))
        log.info("bo trial %d theta %s reward %.4g", trial + 1, np.round(theta, 4), out.rewards[-1])
    return out


def _next_ei_point(thetas, rewards, lo, hi, rng, n_random, n_local, fit_seed):
    U = (thetas - lo) / (hi - lo)
    span = rewards.max() - rewards.min()
    y = (rewards - rewards.min()) / span if span > 0 else np.zeros_like(rewards)
    try:
        model = gp.gp_fit(U, y, seed=fit_seed)
    except (gp.GpFitError, np.linalg.LinAlgError) as exc:
        log.warning("bo: GP fit failed (%s); using a random candidate", exc)
        return lo + rng.random(len(lo)) * (hi - lo)
    best = float(y.max())
    cand = rng.random((n_random, len(lo)))
    ei = gp.expected_improvement(model, cand, best)
    top = cand[np.argsort(-ei, kind="stable")[:n_local]]
    best_u, best_ei = top[0], float(ei.max())
    for u0 in top:
        res = minimize(lambda u: -float(gp.expected_improvement(model, u[None], best)[0]), u0,
                       method="L-BFGS-B", bounds=[(0.0, 1.0)] * len(lo))
        if -res.fun > best_ei:
            best_u, best_ei = np.clip(res.x, 0.0, 1.0), -res.fun
    return lo + best_u * (hi - lo)


def trials_to_threshold(curve, threshold: float) -> float:
    """1-based index of the first trial reaching ``threshold``; ``inf`` if never."""
    hit = np.flatnonzero(np.asarray(curve) >= threshold)
    return float(hit[0] + 1) if len(hit) else float("inf")


# --------------------------------------------------------------------------- MPC


def score_onestep_sequences(model, s, actions, score_fn: Callable) -> np.ndarray:
    """Roll every candidate sequence (K, tau, d_a) through ``model`` from ``s``; score with ``score_fn``."""
    K, tau = actions.shape[:2]
    x = np.repeat(np.asarray(s, dtype=np.float64)[None], K, axis=0)
    states = np.empty((K, tau, len(s)))
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(tau):
            x, _ = model.predict_next(x, actions[:, t])
            states[:, t] = x
    return score_fn(states)


def mpc_onestep(model, s, score_fn: Callable, tau: int, n_candidates: int, action_low, action_high,
                rng: np.random.Generator):
    """Random-shooting plan; returns ``(best action sequence (tau, d_a), its score)``."""
    lo = np.atleast_1d(np.asarray(action_low, dtype=np.float64))
    hi = np.atleast_1d(np.asarray(action_high, dtype=np.float64))
    actions = rng.uniform(lo, hi, size=(n_candidates, tau, len(lo)))
    scores = score_onestep_sequences(model, s, actions, score_fn)
    k = int(np.argmax(scores))
    return actions[k], float(scores[k])


def mpc_trajectory(model, s, score_fn: Callable, tau: int, candidates):
    """Score each candidate theta by the predicted trajectory from ``s``; return ``(best theta, score)``.

    All ``len(candidates) * tau`` queries go through one batched forward pass.
    """
    candidates = np.atleast_2d(np.asarray(candidates, dtype=np.float64))
    pred, _ = model.predict_trajectories(np.repeat(np.asarray(s, float)[None], len(candidates), axis=0),
                                         candidates, tau)
    scores = score_fn(pred)
    k = int(np.argmax(scores))
    return candidates[k], float(scores[k])


def state_scorer(env) -> Callable:
    return lambda states: penalized_returns(env, states)


@dataclass
class EpisodeResult:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray  # penalized, length = requested steps

    @property
    def mean_reward(self) -> float:
        return float(np.mean(self.rewards))


def _finish(env, states, actions, steps):
    states = np.array(states)
    r = env.reward(states[1:])
    if len(r) < steps:
        r = np.concatenate([r, np.full(steps - len(r), env.failure_reward)])
    return EpisodeResult(states, np.array(actions), r)


def run_mpc_onestep_episode(env, model, s0, steps: int, tau: int, n_candidates: int, rng,
                            closed_loop: bool = True, open_loop_tau: Optional[int] = None,
                            action_low=None, action_high=None) -> EpisodeResult:
    """Closed loop replans every step; open loop plans one sequence at t=0 and replays it."""
    lo = env.spec.action_low if action_low is None else action_low
    hi = env.spec.action_high if action_high is None else action_high
    score = state_scorer(env)
    s = np.asarray(s0, dtype=np.float64)
    states, actions = [s], []
    plan = None
    if not closed_loop:
        plan, _ = mpc_onestep(model, s, score, open_loop_tau or steps, n_candidates, lo, hi, rng)
    for t in range(steps):
        if closed_loop:
            seq, _ = mpc_onestep(model, s, score, tau, n_candidates, lo, hi, rng)
            a = seq[0]
        else:
            a = plan[t] if t < len(plan) else plan[-1]
        s = env.step(s, a)
        states.append(s)
        actions.append(a)
        if env.is_terminal(s):
            break
    return _finish(env, states, actions, steps)


def run_mpc_trajectory_episode(env, model, s0, steps: int, tau: int, candidates, factory: Callable,
                               replan_period: Optional[int] = None) -> EpisodeResult:
    """Pick theta by :func:`mpc_trajectory`; hold it for ``replan_period`` steps (``None``: whole episode)."""
    score = state_scorer(env)
    s = np.asarray(s0, dtype=np.float64)
    states, actions = [s], []
    ctrl = None
    for t in range(steps):
        if ctrl is None or (replan_period is not None and t % replan_period == 0):
            theta, _ = mpc_trajectory(model, s, score, tau, candidates)
            ctrl = factory(theta)
        a = np.atleast_1d(ctrl.act(s))
        s = env.step(s, a)
        states.append(s)
        actions.append(a)
        if env.is_terminal(s):
            break
    return _finish(env, states, actions, steps)
