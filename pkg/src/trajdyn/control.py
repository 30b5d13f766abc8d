"""Controller synthesis and parameter encodings.

LQR gains come from a Newton-Kleinman solve of the continuous algebraic
Riccati equation; PID (arm) and PD attitude (quadrotor) controllers are
parameterized by flat vectors so optimizers and trajectory models can treat
every controller as a point in a box.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

log = logging.getLogger(__name__)


class CareConvergenceError(RuntimeError):
    def __init__(self, message, residual):
        super().__init__(f"{message} (final residual {residual:.3e})")
        self.residual = residual


# --------------------------------------------------------------------------- boxes


@dataclass(frozen=True)
class Box:
    """Axis-aligned parameter box with an affine map onto ``[-1, 1]``."""

    low: tuple
    high: tuple

    def __post_init__(self):
        lo, hi = np.asarray(self.low, dtype=float), np.asarray(self.high, dtype=float)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("low/high must be 1-D and of equal length")
        if not np.all(lo < hi):
            raise ValueError(f"box needs low < high, got {self.low} / {self.high}")
        object.__setattr__(self, "low", tuple(float(v) for v in lo))
        object.__setattr__(self, "high", tuple(float(v) for v in hi))

    @property
    def dim(self) -> int:
        return len(self.low)

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.low)

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.high)

    def contains(self, x, tol: float = 1e-12) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        span = self.hi - self.lo
        return np.all((x >= self.lo - tol * span) & (x <= self.hi + tol * span), axis=-1)

    def sample(self, rng: np.random.Generator, size=None) -> np.ndarray:
        shape = (self.dim,) if size is None else (size, self.dim)
        return rng.uniform(self.lo, self.hi, size=shape)


def encode_params(theta, box: Box) -> np.ndarray:
    """Map raw parameters in ``box`` onto ``[-1, 1]`` per dimension."""
    theta = np.asarray(theta, dtype=float)
    if not np.all(box.contains(theta)):
        raise ValueError(f"parameters outside box [{box.low}, {box.high}]: {theta}")
    return 2.0 * (theta - box.lo) / (box.hi - box.lo) - 1.0


def decode_params(x, box: Box) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if np.any(np.abs(x) > 1.0 + 1e-12):
        raise ValueError(f"encoded parameters must lie in [-1, 1], got {x}")
    return box.lo + 0.5 * (x + 1.0) * (box.hi - box.lo)


# --------------------------------------------------------------------------- Riccati


def care_residual(A, B, Q, R, P) -> np.ndarray:
    return A.T @ P + P @ A - P @ B @ np.linalg.solve(R, B.T @ P) + Q


def solve_lyapunov(A, Q) -> np.ndarray:
    """Solve ``A^T X + X A + Q = 0`` through the Kronecker-vectorized system."""
    n = A.shape[0]
    eye = np.eye(n)
    lhs = np.kron(eye, A.T) + np.kron(A.T, eye)
    X = np.linalg.solve(lhs, -Q.reshape(-1, order="F")).reshape(n, n, order="F")
    return 0.5 * (X + X.T)


def _is_hurwitz(M) -> bool:
    return bool(np.max(np.linalg.eigvals(M).real) < 0)


def _riccati_ode_gain(A, B, Q, R, max_time: float = 200.0):
    """Stabilizing gain from integrating the Riccati ODE backward in time from P = 0."""
    n = A.shape[0]
    Rinv_Bt = np.linalg.solve(R, B.T)
    S = B @ Rinv_Bt
    scale = np.linalg.norm(A, 2) + np.linalg.norm(S, 2) * np.linalg.norm(Q, 2) + 1.0
    h = 0.05 / scale

    def rhs(P):
        return A.T @ P + P @ A - P @ S @ P + Q

    P = np.zeros((n, n))
    t = 0.0
    while t < max_time:
        for _ in range(20):
            k1 = rhs(P)
            k2 = rhs(P + 0.5 * h * k1)
            k3 = rhs(P + 0.5 * h * k2)
            k4 = rhs(P + h * k3)
            P = P + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            P = 0.5 * (P + P.T)
            t += h
        K = Rinv_Bt @ P
        if _is_hurwitz(A - B @ K):
            return K
        if not np.all(np.isfinite(P)):
            break
    raise CareConvergenceError("Riccati ODE did not produce a stabilizing gain",
                               float(np.linalg.norm(rhs(P))))


def solve_care(A, B, Q, R, max_iter: int = 200, tol: float = 1e-10):
    """Stabilizing solution of ``A^T P + P A - P B R^-1 B^T P + Q = 0``.

    Returns ``(P, K)`` with ``K = R^-1 B^T P``.

    Raises:
        CareConvergenceError: if Newton-Kleinman has not converged after
            ``max_iter`` iterations.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    K = np.zeros((B.shape[1], A.shape[0])) if _is_hurwitz(A) else _riccati_ode_gain(A, B, Q, R)
    P_prev = None
    for _ in range(max_iter):
        Ak = A - B @ K
        P = solve_lyapunov(Ak, Q + K.T @ R @ K)
        K = np.linalg.solve(R, B.T @ P)
        if P_prev is not None and np.linalg.norm(P - P_prev) <= tol * max(1.0, np.linalg.norm(P)):
            break
        P_prev = P
    else:
        raise CareConvergenceError("Newton-Kleinman iteration cap reached",
                                   float(np.linalg.norm(care_residual(A, B, Q, R, P))))
    return P, K


# --------------------------------------------------------------------------- controllers


@dataclass(frozen=True)
class LqrController:
    """State feedback ``a = -K s``; ``params`` is the vector it was sampled from."""

    gain: np.ndarray
    params: Optional[np.ndarray] = None

    def act(self, state) -> np.ndarray:
        return -np.atleast_2d(self.gain) @ np.asarray(state, dtype=float)


def sample_lqr_variants(K_star, count: int, rng: np.random.Generator,
                        low: float = 0.5, high: float = 1.5) -> list:
    """Elementwise rescalings ``m * K*`` with ``m ~ U[low, high]^n``."""
    if count < 1:
        raise ValueError("count must be >= 1")
    K_star = np.atleast_2d(np.asarray(K_star, dtype=float))
    ms = rng.uniform(low, high, size=(count, K_star.shape[1]))
    return [LqrController(m * K_star, m) for m in ms]


def lqr_from_multipliers(K_star, m) -> LqrController:
    m = np.asarray(m, dtype=float).reshape(-1)
    K_star = np.atleast_2d(K_star)
    if m.size == 1:
        return LqrController(m[0] * K_star, m)
    return LqrController(m * K_star, m)


@dataclass(frozen=True)
class PidController:
    """Joint-space PD law (integral gain fixed at zero).

    ``params`` layout: ``[z_d (n), K_p (n), K_d (n)]``.
    """

    targets: np.ndarray
    kp: np.ndarray
    kd: np.ndarray
    torque_limit: float = 10.0

    @classmethod
    def from_params(cls, theta, torque_limit: float = 10.0) -> "PidController":
        theta = np.asarray(theta, dtype=float)
        n = len(theta) // 3
        return cls(theta[:n], theta[n:2 * n], theta[2 * n:], torque_limit)

    @property
    def ki(self) -> np.ndarray:
        return np.zeros_like(self.kp)

    @property
    def params(self) -> np.ndarray:
        return np.concatenate([self.targets, self.kp, self.kd])

    def act(self, state) -> np.ndarray:
        s = np.asarray(state, dtype=float)
        return pid_action(self, s[0::2], s[1::2])


def pid_action(controller: PidController, joint_angles, joint_velocities) -> np.ndarray:
    """``u = -(K_p * e + K_d * de)`` with ``e = z - z_d``, clipped to the torque bound."""
    z = np.asarray(joint_angles, dtype=float)
    dz = np.asarray(joint_velocities, dtype=float)
    if z.shape != controller.kp.shape or dz.shape != controller.kp.shape:
        raise ValueError("joint dimensions do not match controller")
    e = z - controller.targets
    u = -(controller.kp * e + controller.kd * dz)
    return np.clip(u, -controller.torque_limit, controller.torque_limit)


def arm_pid_box(n_joints: int = 2, target_range=(-np.pi / 2, np.pi / 2),
                kp_range=(0.0, 8.0), kd_range=(0.0, 1.0)) -> Box:
    lo = [target_range[0]] * n_joints + [kp_range[0]] * n_joints + [kd_range[0]] * n_joints
    hi = [target_range[1]] * n_joints + [kp_range[1]] * n_joints + [kd_range[1]] * n_joints
    return Box(tuple(lo), tuple(hi))


@dataclass(frozen=True)
class PdAttitudeController:
    """Roll/pitch PD about level attitude, mixed onto four motors.

    ``params`` layout: ``[kp_roll, kd_roll, kp_pitch, kd_pitch]``. Acts on the
    quadrotor observation ``(roll, pitch, p, q, r)`` by default.
    """

    params: np.ndarray
    hover: float
    attitude_index: tuple = (0, 1)
    rate_index: tuple = (2, 3)

    def act(self, obs) -> np.ndarray:
        obs = np.asarray(obs, dtype=float)
        return pd_attitude_action(self.params, obs[list(self.attitude_index)],
                                  obs[list(self.rate_index)], self.hover)


def pd_attitude_action(params, attitude, rates, hover: float, bounds=(0.0, 1.0)) -> np.ndarray:
    kp_roll, kd_roll, kp_pitch, kd_pitch = np.asarray(params, dtype=float)
    roll, pitch = attitude
    p, q = rates
    roll_cmd = -(kp_roll * roll + kd_roll * p)
    pitch_cmd = -(kp_pitch * pitch + kd_pitch * q)
    # motors 1..4 at +x, +y, -x, -y; roll torque ~ f2 - f4, pitch torque ~ f3 - f1
    u = hover + np.array([-pitch_cmd, roll_cmd, pitch_cmd, -roll_cmd])
    return np.clip(u, *bounds)


def quad_pd_box() -> Box:
    return Box((0.05, 0.005, 0.05, 0.005), (0.5, 0.05, 0.5, 0.05))


def controller_factory(env, kind: str, K_star=None, torque_limit: float = 10.0, hover: float = 0.0):
    """Return ``theta -> controller`` for the given parameterization kind."""
    if kind in ("lqr_multipliers", "lqr_scalar"):
        return lambda theta: lqr_from_multipliers(K_star, theta)
    if kind == "pid":
        return lambda theta: PidController.from_params(theta, torque_limit)
    if kind == "pd_attitude":
        return lambda theta: PdAttitudeController(np.asarray(theta, dtype=float), hover)
    raise ValueError(f"unknown controller kind {kind!r}")
