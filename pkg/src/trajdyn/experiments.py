"""End-to-end experiment pipelines driven by an :class:`ExperimentConfig`.

Every function derives its randomness from ``cfg.seed`` through named
sub-seeds, so a pipeline is a pure function of its config.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .config import ExperimentConfig
from .control import Box, lqr_from_multipliers
from .envs import CartpoleEnv, make_env, penalized_returns
from .evaluation import (DirectRewardMap, EvalSet, datatype_matrix, epoch_sweep, horizon_curves,
                         reward_prediction_eval, reward_predictions, sample_efficiency_grid, uncertainty_profile)
from .models import train_model
from .optim import (bayes_opt, real_per_step_reward, run_mpc_onestep_episode, run_mpc_trajectory_episode,
                    trajectory_optimization, trials_to_threshold)
from .recipes import Recipe, cartpole_gain, cartpole_recipe, default_recipe, with_box
from .seeding import derive_seed

log = logging.getLogger(__name__)


@dataclass
class Setup:
    env: object
    recipe: Recipe
    K_star: np.ndarray = None


def setup(cfg: ExperimentConfig, env_id: str = None) -> Setup:
    env_id = env_id or cfg.env.id
    params = cfg.env.params if env_id == cfg.env.id else {}
    env = make_env(env_id, params, cfg.env.max_steps)
    if env_id == "cartpole":
        K = cartpole_gain(env, cfg.controller.Q, cfg.controller.R)
        return Setup(env, cartpole_recipe(env, cfg.controller.recipe, K), K)
    return Setup(env, default_recipe(env))


def datasets(cfg: ExperimentConfig, st: Setup):
    d = cfg.data
    train = st.recipe.generate(st.env, d.n_train, d.train_length, derive_seed(cfg.seed, "data", "train"))
    val = st.recipe.generate(st.env, d.n_val, d.val_length, derive_seed(cfg.seed, "data", "val"))
    return train, val


def train_kind(cfg: ExperimentConfig, st: Setup, kind: str, train):
    return train_model(train, cfg.model_spec(kind), derive_seed(cfg.seed, "model", kind), st.recipe.box)


def run_horizon(cfg: ExperimentConfig, models: dict, val) -> dict:
    ev = EvalSet.from_trajectories(val, cfg.data.val_length)
    return horizon_curves(models, ev, train_length=cfg.data.train_length)


def run_epoch_sweep(cfg: ExperimentConfig, st: Setup, train, val) -> dict:
    ev = EvalSet.from_trajectories(val, cfg.data.val_length)
    return epoch_sweep(train, ev, st.recipe.box, derive_seed(cfg.seed, "model", "T"), tuple(cfg.eval.epochs),
                       cfg.model_spec("T"))


def run_uncertainty(cfg: ExperimentConfig, models: dict, val) -> dict:
    ev = EvalSet.from_trajectories(val, cfg.data.val_length)
    return {k: uncertainty_profile(m, ev) for k, m in models.items()}


def reward_eval_set(cfg: ExperimentConfig, st: Setup):
    return st.recipe.generate(st.env, cfg.eval.n_reward_eval, cfg.eval.reward_horizon,
                              derive_seed(cfg.seed, "reward", "eval"))


def run_reward(cfg: ExperimentConfig, st: Setup, train, T=None, D=None, eval_trajs=None):
    eval_trajs = eval_trajs if eval_trajs is not None else reward_eval_set(cfg, st)
    direct_gp = DirectRewardMap("gp", st.recipe.box, derive_seed(cfg.seed, "direct")).fit(train)
    direct_nn = DirectRewardMap("nn", st.recipe.box, derive_seed(cfg.seed, "direct"),
                                nn_epochs=cfg.eval.direct_nn_epochs).fit(train)
    preds = reward_predictions(st.env, eval_trajs, cfg.eval.reward_horizon, T, D, direct_gp, direct_nn,
                               st.recipe.factory)
    return reward_prediction_eval(eval_trajs, preds), direct_gp


def run_sample(cfg: ExperimentConfig) -> list:
    sc = cfg.sample
    st = setup(cfg, sc.env)
    val = st.recipe.generate(st.env, sc.n_val, sc.val_length, derive_seed(cfg.seed, "sample", "val"))
    seeds = [derive_seed(cfg.seed, "sample", "seed", i) for i in range(sc.seeds)]
    specs = {k: cfg.model_spec(k) for k in sc.kinds}
    rows = sample_efficiency_grid(st.env, st.recipe, sc.kinds, sc.lengths, sc.counts, val, seeds, specs)
    index = {s: i for i, s in enumerate(seeds)}
    return [(k, L, N, index[s], e) for k, L, N, s, e in rows]


def datatype_recipes(cfg: ExperimentConfig, st: Setup) -> dict:
    dc = cfg.datatype
    box = Box((dc.box_low,) * 4, (dc.box_high,) * 4)
    return {k: with_box(cartpole_recipe(st.env, k, st.K_star), box) for k in ("stable", "unstable", "periodic")}


def run_datatype(cfg: ExperimentConfig, train_kinds=None, test_kinds=None) -> dict:
    st = setup(cfg, "cartpole")
    dc = cfg.datatype
    specs = {k: cfg.model_spec(k) for k in dc.kinds}
    return datatype_matrix(st.env, datatype_recipes(cfg, st), dc.n, dc.length, derive_seed(cfg.seed, "datatype"),
                           tuple(dc.kinds), train_kinds or dc.train, test_kinds or dc.test, specs)


# --------------------------------------------------------------------------- iterative learning


def oracle_best_reward(env: CartpoleEnv, K_star, s0, box: Box, horizon: int, grid: int) -> float:
    """Best per-step reward over a dense grid of gain scalars, simulated exactly."""
    cs = np.linspace(box.low[0], box.high[0], grid)
    states, _ = env.linear_rollouts(s0, cs[:, None] * np.asarray(K_star)[None, :], horizon)
    return float(np.max(penalized_returns(env, states[:, 1:], horizon) / horizon))


def run_iterate(cfg: ExperimentConfig) -> list:
    """Rows ``(method, seed_index, trial, reward, normalized, normalized_best_so_far)``."""
    ic = cfg.iterate
    st = setup(cfg, "cartpole")
    env, K = st.env, st.K_star
    box = Box((ic.box_low,), (ic.box_high,))
    factory = lambda th: lqr_from_multipliers(K, th)  # noqa: E731
    spec = cfg.model_spec("T")

    def fit(trajs, seed):
        return train_model(trajs, spec, seed, box)

    rows = []
    for j in range(ic.seeds):
        s_seed = derive_seed(cfg.seed, "iterate", j)
        s0 = env.reset(np.random.default_rng(derive_seed(s_seed, "s0")))
        best = oracle_best_reward(env, K, s0, box, ic.horizon, ic.oracle_grid)
        to = trajectory_optimization(env, box, factory, fit, s0, ic.trials, s_seed, ic.horizon, ic.max_evals)
        bo = bayes_opt(lambda th: real_per_step_reward(env, factory(th), s0, ic.horizon)[0], box, ic.trials, s_seed)
        for name, res in (("trajectory_cmaes", to), ("bayes_opt", bo)):
            norm = best / np.asarray(res.rewards)
            run = np.maximum.accumulate(norm)
            for t in range(ic.trials):
                rows.append((name, j, t + 1, float(res.rewards[t]), float(norm[t]), float(run[t])))
    return rows


def trials_needed(rows, method: str, threshold: float) -> list:
    out = {}
    for name, j, t, _, _, run in rows:
        if name == method:
            out.setdefault(j, []).append(run)
    return [trials_to_threshold(v, threshold) for _, v in sorted(out.items())]


# --------------------------------------------------------------------------- MPC


MPC_METHODS = ("onestep_closed_loop", "trajectory_open_loop", "onestep_open_loop")


def run_mpc(cfg: ExperimentConfig, st: Setup, D, T) -> list:
    """Rows ``(method, trial, mean_reward_per_step)``."""
    mc = cfg.mpc
    env = st.env
    lo, hi = (-mc.force_bound,), (mc.force_bound,)
    rows = []
    for k in range(mc.trials):
        s0 = env.reset(np.random.default_rng(derive_seed(cfg.seed, "mpc", "s0", k)))
        rng = np.random.default_rng(derive_seed(cfg.seed, "mpc", "plan", k))
        cl = run_mpc_onestep_episode(env, D, s0, mc.steps, mc.tau, mc.candidates, rng, True,
                                     action_low=lo, action_high=hi)
        rng = np.random.default_rng(derive_seed(cfg.seed, "mpc", "open", k))
        ol = run_mpc_onestep_episode(env, D, s0, mc.steps, mc.tau, mc.candidates, rng, False,
                                     action_low=lo, action_high=hi)
        cands = st.recipe.box.sample(np.random.default_rng(derive_seed(cfg.seed, "mpc", "theta", k)), mc.candidates)
        tau_t = mc.steps if mc.replan_period is None else mc.tau
        tr = run_mpc_trajectory_episode(env, T, s0, mc.steps, tau_t, cands, st.recipe.factory, mc.replan_period)
        rows += [(MPC_METHODS[0], k, cl.mean_reward), (MPC_METHODS[1], k, tr.mean_reward),
                 (MPC_METHODS[2], k, ol.mean_reward)]
        log.info("mpc trial %d: closed %.4g traj %.4g open %.4g", k, cl.mean_reward, tr.mean_reward, ol.mean_reward)
    return rows


def mpc_means(rows) -> dict:
    out = {}
    for m, _, r in rows:
        out.setdefault(m, []).append(r)
    return {m: float(np.mean(v)) for m, v in out.items()}
