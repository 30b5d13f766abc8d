"""Dataset recipes: which controllers generate which trajectories.

A recipe turns ``(n, length, seed)`` into trajectories whose
``controller_params`` live inside the recipe's box.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .control import Box, arm_pid_box, controller_factory, quad_pd_box, solve_care
from .envs import CartpoleEnv, make_env, rollout
from .seeding import derive_seed

CARTPOLE_Q = (0.5, 0.05, 1.0, 0.05)
CARTPOLE_R = (1.0,)
DATATYPE_BOX = Box((-0.1,) * 4, (1.5,) * 4)


def cartpole_gain(env: CartpoleEnv, q=CARTPOLE_Q, r=CARTPOLE_R) -> np.ndarray:
    A, B = env.linearize()
    _, K = solve_care(A, B, np.diag(q), np.diag(r))
    return K[0]


@dataclass(frozen=True)
class Recipe:
    name: str
    box: Box
    sampler: Callable  # rng, n -> (n, p) parameters
    factory: Callable  # theta -> controller

    def thetas(self, n: int, seed: int) -> np.ndarray:
        return self.sampler(np.random.default_rng(derive_seed(seed, "theta", self.name)), n)

    def generate(self, env, n: int, length: int, seed: int) -> list:
        thetas = self.thetas(n, seed)
        return [rollout(env, self.factory(th), length, derive_seed(seed, "episode", self.name, i))
                for i, th in enumerate(thetas)]


def _uniform(low, high):
    lo, hi = np.asarray(low, float), np.asarray(high, float)
    return lambda rng, n: rng.uniform(lo, hi, size=(n, len(lo)))


def cartpole_recipe(env: CartpoleEnv, kind: str = "stable", K_star=None) -> Recipe:
    """Cartpole LQR-variant families.

    ``stable``: elementwise multipliers in [0.5, 1.5]; ``unstable``: one weak
    or wrong-sign scalar c in [-0.1, 0.3] on every gain; ``periodic``: the
    derivative-gain multipliers squeezed into [0.05, 0.15] for lightly damped
    oscillation; ``scalar``: one scalar in [-0.1, 2] (1-D parameter).
    """
    K_star = cartpole_gain(env) if K_star is None else np.asarray(K_star)
    fac = controller_factory(env, "lqr_multipliers", K_star)
    if kind == "stable":
        return Recipe(kind, Box((0.5,) * 4, (1.5,) * 4), _uniform((0.5,) * 4, (1.5,) * 4), fac)
    if kind == "unstable":
        return Recipe(kind, DATATYPE_BOX, lambda rng, n: np.repeat(rng.uniform(-0.1, 0.3, (n, 1)), 4, axis=1), fac)
    if kind == "periodic":
        return Recipe(kind, DATATYPE_BOX, _uniform((0.5, 0.05, 0.5, 0.05), (1.5, 0.15, 1.5, 0.15)), fac)
    if kind == "scalar":
        return Recipe(kind, Box((-0.1,), (2.0,)), _uniform((-0.1,), (2.0,)), fac)
    raise ValueError(f"unknown cartpole recipe {kind!r}")


def with_box(recipe: Recipe, box: Box) -> Recipe:
    return Recipe(recipe.name, box, recipe.sampler, recipe.factory)


def arm_recipe(env) -> Recipe:
    box = arm_pid_box()
    return Recipe("pid", box, _uniform(box.low, box.high),
                  controller_factory(env, "pid", torque_limit=env.params.torque_limit))


def quadrotor_recipe(env) -> Recipe:
    box = quad_pd_box()
    return Recipe("pd", box, _uniform(box.low, box.high),
                  controller_factory(env, "pd_attitude", hover=env.params.hover_command))


def default_recipe(env, kind: str = "stable") -> Recipe:
    if env.env_id == "cartpole":
        return cartpole_recipe(env, kind)
    if env.env_id == "arm":
        return arm_recipe(env)
    if env.env_id == "quadrotor":
        return quadrotor_recipe(env)
    raise ValueError(f"no recipe for env {env.env_id!r}")


def build_env(env_id: str, params=None, max_steps: int = 500):
    return make_env(env_id, params, max_steps)
