"""Analytic simulators: cartpole, 2-link planar arm and quadrotor attitude.

Every simulator is a pure function of ``(state, action, params, rng draw)``.
The ``*Env`` classes bundle a simulator with its reset distribution, reward,
stop conditions and observation map so that :func:`rollout` can drive any of
them with any controller.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import kernels


@dataclass(frozen=True)
class EnvSpec:
    state_dim: int
    action_dim: int
    dt: float
    max_steps: int
    action_low: tuple
    action_high: tuple

    def __post_init__(self):
        if self.state_dim < 1 or self.action_dim < 1:
            raise ValueError("state_dim and action_dim must be >= 1")
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if len(self.action_low) != self.action_dim or len(self.action_high) != self.action_dim:
            raise ValueError("action bounds must have one entry per action dim")


@dataclass(frozen=True)
class CartpoleParams:
    cart_mass: float = 1.0
    pole_mass: float = 0.1
    pole_half_length: float = 0.5
    gravity: float = 9.8
    dt: float = 0.02
    angle_limit: float = 24.0 * math.pi / 180.0
    position_limit: float = 9.6
    init_scale: float = 20.0
    # conventional +-0.05 initialization band, scaled by init_scale for x and theta
    init_band: float = 0.05
    # theta draws outside the stop condition are redrawn
    init_reject_outside_limits: bool = True

    def __post_init__(self):
        for name in ("cart_mass", "pole_mass", "pole_half_length", "gravity", "dt"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")


@dataclass(frozen=True)
class ArmParams:
    link_masses: tuple = (1.0, 1.0)
    link_lengths: tuple = (1.0, 0.8)
    gravity: float = 9.8
    dt: float = 0.02
    torque_limit: float = 10.0
    goal: tuple = (0.9, -0.9)
    init_angle_range: float = 0.5
    init_velocity_range: float = 0.1

    def __post_init__(self):
        if min(self.link_masses) <= 0 or min(self.link_lengths) <= 0:
            raise ValueError("link masses and lengths must be strictly positive")


@dataclass(frozen=True)
class QuadrotorParams:
    mass: float = 0.027
    inertia: tuple = (1.4e-5, 1.4e-5, 2.17e-5)
    arm_length: float = 0.046
    max_motor_thrust: float = 0.15
    yaw_torque_ratio: float = 0.006
    gravity: float = 9.81
    dt: float = 0.01
    noise_std: float = 0.01
    init_attitude_range: float = 0.3
    init_rate_range: float = 0.5
    # indices of the 12-vector exposed as the observation; None = full state
    observation_indices: Optional[tuple] = (6, 7, 9, 10, 11)

    @property
    def hover_command(self) -> float:
        return self.mass * self.gravity / (4.0 * self.max_motor_thrust)


@dataclass
class Trajectory:
    """One rollout: ``states`` has one more row than ``actions``/``rewards``.

    ``rewards[t]`` is the environment reward of ``states[t + 1]``.
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    controller_params: Optional[np.ndarray]
    seed: int = 0

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.float64).reshape(len(self.states) - 1, -1)
        self.rewards = np.asarray(self.rewards, dtype=np.float64).reshape(-1)
        if self.controller_params is not None:
            self.controller_params = np.asarray(self.controller_params, dtype=np.float64).reshape(-1)
        if len(self.states) != len(self.actions) + 1 or len(self.rewards) != len(self.actions):
            raise ValueError("need len(states) == len(actions) + 1 == len(rewards) + 1")

    @property
    def length(self) -> int:
        return len(self.actions)


def _check_finite(name, *arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ValueError(f"{name}: non-finite input {np.asarray(a)!r}")


# --------------------------------------------------------------------------- cartpole


def cartpole_step(state, force, params: CartpoleParams = CartpoleParams()) -> np.ndarray:
    """One explicit-Euler step of the cart-pole equations of motion."""
    state = np.asarray(state, dtype=np.float64)
    _check_finite("cartpole_step", state, force)
    out = kernels.cartpole_step_batch(
        state.reshape(1, 4), np.array([float(force)]), params.cart_mass, params.pole_mass,
        params.pole_half_length, params.gravity, params.dt,
    )
    return out[0]


def cartpole_reward(state) -> np.ndarray:
    """``-(x**2 + theta**2)``; accepts a single state or a batch."""
    s = np.asarray(state, dtype=np.float64)
    return -(s[..., 0] ** 2 + s[..., 2] ** 2)


def cartpole_linearize(params: CartpoleParams = CartpoleParams()):
    """Linearization about the upright equilibrium, returned as ``(A, B)``.

    ``B`` is a column of shape (4, 1).
    """
    mc, mp, l, g = params.cart_mass, params.pole_mass, params.pole_half_length, params.gravity
    A = np.zeros((4, 4))
    A[0, 1] = 1.0
    A[1, 2] = g * mp / mc
    A[2, 3] = 1.0
    A[3, 2] = g * (mc + mp) / (l * mc)
    B = np.array([[0.0], [1.0 / mc], [0.0], [-1.0 / (l * mc)]])
    return A, B


# --------------------------------------------------------------------------- arm


def arm_mass_matrix(q2, params: ArmParams = ArmParams()) -> np.ndarray:
    m1, m2 = params.link_masses
    l1, l2 = params.link_lengths
    c1, c2 = 0.5 * l1, 0.5 * l2
    i1, i2 = m1 * l1**2 / 12.0, m2 * l2**2 / 12.0
    m11 = m1 * c1**2 + i1 + m2 * (l1**2 + c2**2 + 2 * l1 * c2 * math.cos(q2)) + i2
    m12 = m2 * (c2**2 + l1 * c2 * math.cos(q2)) + i2
    m22 = m2 * c2**2 + i2
    return np.array([[m11, m12], [m12, m22]])


def arm_step(state, torques, params: ArmParams = ArmParams()) -> np.ndarray:
    """Semi-implicit Euler step of a 2-link planar arm.

    State is ``[q1, dq1, q2, dq2]`` with ``q1`` measured from the downward
    vertical and ``q2`` relative to link 1. Torques are clipped to
    ``+-params.torque_limit``.
    """
    state = np.asarray(state, dtype=np.float64)
    u = np.clip(np.asarray(torques, dtype=np.float64), -params.torque_limit, params.torque_limit)
    _check_finite("arm_step", state, u)
    M = arm_mass_matrix(state[2], params)
    assert M[0, 0] > 0 and np.linalg.det(M) > 0, "arm mass matrix lost positive-definiteness"
    m1, m2 = params.link_masses
    l1, l2 = params.link_lengths
    out = kernels.arm_step_batch(state.reshape(1, 4), u.reshape(1, 2), m1, m2, l1, l2,
                                 params.gravity, params.dt)
    return out[0]


def arm_energy(state, params: ArmParams = ArmParams()) -> float:
    q1, dq1, q2, dq2 = np.asarray(state, dtype=np.float64)
    m1, m2 = params.link_masses
    l1, l2 = params.link_lengths
    dq = np.array([dq1, dq2])
    kinetic = 0.5 * dq @ arm_mass_matrix(q2, params) @ dq
    g = params.gravity
    potential = -m1 * g * 0.5 * l1 * math.cos(q1) - m2 * g * (
        l1 * math.cos(q1) + 0.5 * l2 * math.cos(q1 + q2))
    return float(kinetic + potential)


def arm_end_effector(state, params: ArmParams = ArmParams()) -> np.ndarray:
    s = np.asarray(state, dtype=np.float64)
    l1, l2 = params.link_lengths
    q1, q12 = s[..., 0], s[..., 0] + s[..., 2]
    x = l1 * np.sin(q1) + l2 * np.sin(q12)
    y = -l1 * np.cos(q1) - l2 * np.cos(q12)
    return np.stack([x, y], axis=-1)


# --------------------------------------------------------------------------- quadrotor


def _euler_rotation(phi, theta, psi):
    cf, sf = math.cos(phi), math.sin(phi)
    ct, st = math.cos(theta), math.sin(theta)
    cp, sp = math.cos(psi), math.sin(psi)
    # body-to-world, ZYX convention
    return np.array([
        [cp * ct, cp * st * sf - sp * cf, cp * st * cf + sp * sf],
        [sp * ct, sp * st * sf + cp * cf, sp * st * cf - cp * sf],
        [-st, ct * sf, ct * cf],
    ])


def quad_motor_wrench(motor_commands, params: QuadrotorParams = QuadrotorParams()):
    """Total thrust and body torques from 4 commands in ``[0, 1]``.

    Plus configuration: motor 1 on +x, 2 on +y, 3 on -x, 4 on -y.
    """
    f = params.max_motor_thrust * np.asarray(motor_commands, dtype=np.float64)
    L = params.arm_length
    thrust = f.sum()
    tau = np.array([
        L * (f[1] - f[3]),
        L * (f[2] - f[0]),
        params.yaw_torque_ratio * (f[0] - f[1] + f[2] - f[3]),
    ])
    return thrust, tau


def quad_step(state, motor_commands, params: QuadrotorParams = QuadrotorParams(),
              rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Euler step of the 12-state rigid-body model plus additive Gaussian noise.

    State layout: position (3), velocity (3), Euler angles roll/pitch/yaw (3),
    body rates p/q/r (3). Noise is only drawn when ``rng`` is given and
    ``params.noise_std > 0``.
    """
    s = np.asarray(state, dtype=np.float64)
    u = np.clip(np.asarray(motor_commands, dtype=np.float64), 0.0, 1.0)
    _check_finite("quad_step", s, u)
    vel, (phi, theta, psi), omega = s[3:6], s[6:9], s[9:12]
    thrust, tau = quad_motor_wrench(u, params)
    R = _euler_rotation(phi, theta, psi)
    acc = R[:, 2] * thrust / params.mass - np.array([0.0, 0.0, params.gravity])
    inertia = np.asarray(params.inertia)
    omega_dot = (tau - np.cross(omega, inertia * omega)) / inertia
    p, q, r = omega
    tt, cf, sf, ct = math.tan(theta), math.cos(phi), math.sin(phi), math.cos(theta)
    euler_dot = np.array([
        p + sf * tt * q + cf * tt * r,
        cf * q - sf * r,
        (sf * q + cf * r) / ct,
    ])
    dt = params.dt
    out = s + dt * np.concatenate([vel, acc, euler_dot, omega_dot])
    if rng is not None and params.noise_std > 0:
        out = out + rng.normal(0.0, params.noise_std, size=12)
    return out


# --------------------------------------------------------------------------- env wrappers


class CartpoleEnv:
    env_id = "cartpole"

    def __init__(self, params: CartpoleParams = CartpoleParams(), max_steps: int = 500,
                 force_bound: float = 20.0):
        self.params = params
        # force_bound only bounds random-shooting samplers; simulated forces are unclipped
        self.spec = EnvSpec(4, 1, params.dt, max_steps, (-force_bound,), (force_bound,))

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        p = self.params
        band = p.init_band * p.init_scale
        s = np.array([
            rng.uniform(-band, band),
            rng.uniform(-p.init_band, p.init_band),
            rng.uniform(-band, band),
            rng.uniform(-p.init_band, p.init_band),
        ])
        while p.init_reject_outside_limits and abs(s[2]) >= p.angle_limit:
            s[2] = rng.uniform(-band, band)
        return s

    def step(self, state, action, rng=None) -> np.ndarray:
        return cartpole_step(state, float(np.asarray(action).reshape(-1)[0]), self.params)

    def step_batch(self, states, actions) -> np.ndarray:
        p = self.params
        return kernels.cartpole_step_batch(states, np.asarray(actions).reshape(len(states)),
                                           p.cart_mass, p.pole_mass, p.pole_half_length,
                                           p.gravity, p.dt)

    def observe(self, state) -> np.ndarray:
        return np.asarray(state, dtype=np.float64)

    def reward(self, obs) -> np.ndarray:
        return cartpole_reward(obs)

    def violates(self, obs) -> np.ndarray:
        s = np.asarray(obs)
        return (np.abs(s[..., 2]) > self.params.angle_limit) | (np.abs(s[..., 0]) > self.params.position_limit)

    def is_terminal(self, obs) -> bool:
        return bool(self.violates(obs))

    @property
    def failure_reward(self) -> float:
        """Per-step reward charged for every step lost to early termination."""
        return float(cartpole_reward(np.array([self.params.position_limit, 0.0, self.params.angle_limit, 0.0])))

    def linearize(self):
        return cartpole_linearize(self.params)

    def linear_rollouts(self, s0, gains, n_steps):
        """Batch of closed-loop rollouts under ``a = -K s`` through the compiled kernel."""
        p = self.params
        return kernels.cartpole_linear_rollout_batch(
            s0, gains, n_steps, p.cart_mass, p.pole_mass, p.pole_half_length, p.gravity, p.dt,
            p.angle_limit, p.position_limit)


class ArmEnv:
    env_id = "arm"

    def __init__(self, params: ArmParams = ArmParams(), max_steps: int = 500):
        self.params = params
        lim = params.torque_limit
        self.spec = EnvSpec(4, 2, params.dt, max_steps, (-lim, -lim), (lim, lim))

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        a, v = self.params.init_angle_range, self.params.init_velocity_range
        return np.array([rng.uniform(-a, a), rng.uniform(-v, v), rng.uniform(-a, a), rng.uniform(-v, v)])

    def step(self, state, action, rng=None) -> np.ndarray:
        return arm_step(state, action, self.params)

    def step_batch(self, states, actions) -> np.ndarray:
        p = self.params
        u = np.clip(np.asarray(actions, dtype=np.float64), -p.torque_limit, p.torque_limit)
        return kernels.arm_step_batch(states, u, *p.link_masses, *p.link_lengths, p.gravity, p.dt)

    def observe(self, state) -> np.ndarray:
        return np.asarray(state, dtype=np.float64)

    def reward(self, obs) -> np.ndarray:
        diff = arm_end_effector(obs, self.params) - np.asarray(self.params.goal)
        return -np.sum(diff**2, axis=-1)

    def violates(self, obs) -> np.ndarray:
        return np.zeros(np.shape(obs)[:-1], dtype=bool)

    def is_terminal(self, obs) -> bool:
        return False


class QuadrotorEnv:
    env_id = "quadrotor"

    def __init__(self, params: QuadrotorParams = QuadrotorParams(), max_steps: int = 500):
        self.params = params
        obs_dim = 12 if params.observation_indices is None else len(params.observation_indices)
        self.spec = EnvSpec(obs_dim, 4, params.dt, max_steps, (0.0,) * 4, (1.0,) * 4)

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        s = np.zeros(12)
        a, w = self.params.init_attitude_range, self.params.init_rate_range
        s[6:8] = rng.uniform(-a, a, size=2)
        s[9:12] = rng.uniform(-w, w, size=3)
        return s

    def step(self, state, action, rng=None) -> np.ndarray:
        return quad_step(state, action, self.params, rng)

    def observe(self, state) -> np.ndarray:
        state = np.asarray(state, dtype=np.float64)
        idx = self.params.observation_indices
        return state.copy() if idx is None else state[..., list(idx)]

    def _attitude_columns(self):
        idx = self.params.observation_indices
        if idx is None:
            return 6, 7
        return list(idx).index(6), list(idx).index(7)

    def reward(self, obs) -> np.ndarray:
        i, j = self._attitude_columns()
        s = np.asarray(obs)
        return -(s[..., i] ** 2 + s[..., j] ** 2)

    def violates(self, obs) -> np.ndarray:
        return np.zeros(np.shape(obs)[:-1], dtype=bool)

    def is_terminal(self, obs) -> bool:
        return False


ENVIRONMENTS = {"cartpole": (CartpoleEnv, CartpoleParams), "arm": (ArmEnv, ArmParams),
                "quadrotor": (QuadrotorEnv, QuadrotorParams)}


def make_env(env_id: str, params: Optional[dict] = None, max_steps: int = 500):
    try:
        env_cls, params_cls = ENVIRONMENTS[env_id]
    except KeyError:
        raise ValueError(f"unknown env {env_id!r}; expected one of {sorted(ENVIRONMENTS)}") from None
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in (params or {}).items()}
    return env_cls(params_cls(**kwargs), max_steps=max_steps)


def penalized_return(env, states: np.ndarray, horizon: int) -> float:
    """Sum of rewards over ``states`` (rows 1..horizon) honoring stop conditions.

    Once a state violates the env's stop condition, prediction stops there and
    every remaining step earns ``env.failure_reward``. Works the same for
    simulated and model-predicted trajectories.
    """
    states = np.asarray(states)[:horizon]
    bad = np.flatnonzero(env.violates(states))
    if len(bad) == 0:
        return float(np.sum(env.reward(states)) + (horizon - len(states)) * getattr(env, "failure_reward", 0.0))
    k = int(bad[0]) + 1
    return float(np.sum(env.reward(states[:k])) + (horizon - k) * env.failure_reward)


def penalized_returns(env, states, horizon: Optional[int] = None) -> np.ndarray:
    """Batched :func:`penalized_return` over ``states`` of shape (N, H, d).

    Non-finite predicted states count as violations.
    """
    states = np.asarray(states, dtype=np.float64)
    n, H = states.shape[:2]
    horizon = H if horizon is None else horizon
    states = states[:, :horizon]
    bad = ~np.all(np.isfinite(states), axis=-1)
    with np.errstate(invalid="ignore", over="ignore"):
        bad |= env.violates(states)
        r = env.reward(states)
    r = np.where(bad, 0.0, r)
    first_bad = np.where(bad.any(axis=1), bad.argmax(axis=1), states.shape[1])
    steps = np.arange(states.shape[1])
    keep = steps[None, :] < first_bad[:, None]
    total = np.where(keep, r, 0.0).sum(axis=1)
    # the violating state itself is charged its true reward when finite, like the scalar version
    fail = getattr(env, "failure_reward", 0.0)
    idx = np.minimum(first_bad, states.shape[1] - 1)
    last = states[np.arange(n), idx]
    with np.errstate(invalid="ignore", over="ignore"):
        last_r = env.reward(last)
    hit = first_bad < states.shape[1]
    total += np.where(hit, np.where(np.isfinite(last_r), last_r, fail), 0.0)
    lost = horizon - np.minimum(first_bad + hit, horizon)
    return total + lost * fail


def rollout(env, controller, horizon: int, seed: int, initial_state=None) -> Trajectory:
    """Run ``controller`` on ``env`` for up to ``horizon`` steps.

    Deterministic given ``(env, controller, seed)``. Stops early at the first
    state violating a stop condition; that terminal state is kept.
    """
    if horizon > env.spec.max_steps:
        raise ValueError(f"horizon {horizon} exceeds env max_steps {env.spec.max_steps}")
    rng = np.random.default_rng(seed)
    state = env.reset(rng) if initial_state is None else np.array(initial_state, dtype=np.float64)
    obs = env.observe(state)
    states, actions = [obs], []
    for _ in range(horizon):
        action = np.atleast_1d(np.asarray(controller.act(obs), dtype=np.float64))
        if action.shape != (env.spec.action_dim,):
            raise ValueError(f"controller returned action of shape {action.shape}, "
                             f"env expects ({env.spec.action_dim},)")
        state = env.step(state, action, rng)
        obs = env.observe(state)
        states.append(obs)
        actions.append(action)
        if env.is_terminal(obs):
            break
    states = np.array(states)
    params = getattr(controller, "params", None)
    return Trajectory(states, np.array(actions).reshape(len(actions), env.spec.action_dim),
                      env.reward(states[1:]), params, seed)
