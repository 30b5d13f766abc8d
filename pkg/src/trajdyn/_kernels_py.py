"""Pure-numpy implementations of the simulation and indexing kernels.

Signatures mirror the compiled ``_kernels`` extension one-for-one. Any change
here must be reflected in ``_kernels.pyx`` (and vice versa); the test-suite
checks that both backends agree to 1e-12.
"""
import numpy as np


def cartpole_step_batch(states, forces, mc, mp, l, g, dt):
    states = np.asarray(states, dtype=np.float64)
    forces = np.asarray(forces, dtype=np.float64).reshape(-1)
    x, xd, th, thd = states[:, 0], states[:, 1], states[:, 2], states[:, 3]
    total = mc + mp
    cos, sin = np.cos(th), np.sin(th)
    temp = (forces + mp * l * thd * thd * sin) / total
    thacc = (g * sin - cos * temp) / (l * (4.0 / 3.0 - mp * cos * cos / total))
    xacc = temp - mp * l * thacc * cos / total
    out = np.empty_like(states)
    out[:, 0] = x + dt * xd
    out[:, 1] = xd + dt * xacc
    out[:, 2] = th + dt * thd
    out[:, 3] = thd + dt * thacc
    return out


def cartpole_linear_rollout_batch(s0, gains, n_steps, mc, mp, l, g, dt,
                                  angle_limit, position_limit):
    """Closed-loop rollouts under ``force = -gains[k] @ s`` for every row k.

    Returns ``(states, lengths)`` with states of shape (N, n_steps + 1, 4).
    Rows that hit a stop condition are frozen at the terminal state; their
    length is the number of executed steps.
    """
    gains = np.atleast_2d(np.asarray(gains, dtype=np.float64))
    n = gains.shape[0]
    s = np.broadcast_to(np.asarray(s0, dtype=np.float64), (n, 4)).copy()
    states = np.empty((n, n_steps + 1, 4))
    states[:, 0] = s
    lengths = np.full(n, n_steps, dtype=np.int64)
    alive = np.ones(n, dtype=bool)
    for t in range(n_steps):
        forces = -np.einsum("ij,ij->i", gains, s)
        nxt = cartpole_step_batch(s, forces, mc, mp, l, g, dt)
        s = np.where(alive[:, None], nxt, s)
        states[:, t + 1] = s
        hit = alive & ((np.abs(s[:, 2]) > angle_limit) | (np.abs(s[:, 0]) > position_limit))
        lengths[hit] = t + 1
        alive &= ~hit
    return states, lengths


def arm_step_batch(states, torques, m1, m2, l1, l2, g, dt):
    states = np.asarray(states, dtype=np.float64)
    torques = np.asarray(torques, dtype=np.float64)
    q1, dq1, q2, dq2 = states[:, 0], states[:, 1], states[:, 2], states[:, 3]
    c1, c2 = 0.5 * l1, 0.5 * l2
    i1, i2 = m1 * l1 * l1 / 12.0, m2 * l2 * l2 / 12.0
    cos2, sin2 = np.cos(q2), np.sin(q2)
    m11 = m1 * c1 * c1 + i1 + m2 * (l1 * l1 + c2 * c2 + 2.0 * l1 * c2 * cos2) + i2
    m12 = m2 * (c2 * c2 + l1 * c2 * cos2) + i2
    m22 = m2 * c2 * c2 + i2
    hc = m2 * l1 * c2 * sin2
    g1 = (m1 * c1 + m2 * l1) * g * np.sin(q1) + m2 * c2 * g * np.sin(q1 + q2)
    g2 = m2 * c2 * g * np.sin(q1 + q2)
    r1 = torques[:, 0] + hc * (2.0 * dq1 * dq2 + dq2 * dq2) - g1
    r2 = torques[:, 1] - hc * dq1 * dq1 - g2
    det = m11 * m22 - m12 * m12
    ddq1 = (m22 * r1 - m12 * r2) / det
    ddq2 = (m11 * r2 - m12 * r1) / det
    out = np.empty_like(states)
    out[:, 1] = dq1 + dt * ddq1
    out[:, 3] = dq2 + dt * ddq2
    out[:, 0] = q1 + dt * out[:, 1]
    out[:, 2] = q2 + dt * out[:, 3]
    return out


def relabel_index(lengths):
    """Enumerate every (trajectory, start, horizon) with 1 <= horizon <= L - start."""
    lengths = np.asarray(lengths, dtype=np.int64)
    total = int(np.sum(lengths * (lengths + 1) // 2))
    traj = np.empty(total, dtype=np.int64)
    start = np.empty(total, dtype=np.int64)
    horizon = np.empty(total, dtype=np.int64)
    pos = 0
    for j, L in enumerate(lengths):
        L = int(L)
        if L <= 0:
            continue
        # start i owns horizons 1..L-i
        counts = np.arange(L, 0, -1)
        m = L * (L + 1) // 2
        starts = np.repeat(np.arange(L), counts)
        offsets = np.cumsum(counts) - counts
        hs = np.arange(m) - np.repeat(offsets, counts) + 1
        traj[pos:pos + m] = j
        start[pos:pos + m] = starts
        horizon[pos:pos + m] = hs
        pos += m
    return traj, start, horizon
