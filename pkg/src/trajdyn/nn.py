"""A small dense feed-forward network engine with exact gradients.

Networks are plain lists of weight matrices (``W[i]`` has shape
``(fan_in, fan_out)``) and bias vectors. Two objectives are supported:
mean squared error, and a Gaussian negative log-likelihood whose network
output is ``[mean, raw_logvar]`` with the log-variance soft-clamped into
``[lv_min, lv_max]``.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

log = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))
DEFAULT_LOGVAR_BOUNDS = (-10.0, 4.0)


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch, batch, loss):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, batch {batch}")
        self.epoch, self.batch, self.loss = epoch, batch, loss


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softplus(x):
    return np.logaddexp(0.0, x)


def _silu(x):
    return x * _sigmoid(x)


def _silu_grad(x):
    s = _sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


ACTIVATIONS = {
    "silu": (_silu, _silu_grad),
    "softplus": (_softplus, _sigmoid),
    "tanh": (np.tanh, lambda x: 1.0 - np.tanh(x) ** 2),
    "identity": (lambda x: x, np.ones_like),
}


@dataclass
class MLP:
    weights: list
    biases: list
    activation: str = "silu"

    @property
    def sizes(self) -> list:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def dtype(self):
        return self.weights[0].dtype

    def copy(self) -> "MLP":
        return MLP([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.activation)

    def astype(self, dtype) -> "MLP":
        return MLP([w.astype(dtype) for w in self.weights], [b.astype(dtype) for b in self.biases],
                   self.activation)

    def __call__(self, x):
        return forward(self, x)


def init_mlp(sizes, rng: np.random.Generator, activation: str = "silu", dtype=np.float64) -> MLP:
    """Uniform fan-in initialization: ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``."""
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype))
        biases.append(rng.uniform(-bound, bound, size=fan_out).astype(dtype))
    return MLP(weights, biases, activation)


def _forward_cache(net: MLP, x):
    act, _ = ACTIVATIONS[net.activation]
    h = x
    pre, post = [], [x]
    last = len(net.weights) - 1
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ W + b
        if i == last:
            return z, (pre, post)
        pre.append(z)
        h = act(z)
        post.append(h)


def forward(net: MLP, x) -> np.ndarray:
    x = np.asarray(x, dtype=net.dtype)
    if x.ndim != 2 or x.shape[1] != net.sizes[0]:
        raise ValueError(f"input shape {x.shape} does not match network input dim {net.sizes[0]}")
    return _forward_cache(net, x)[0]


# --------------------------------------------------------------------------- losses


def mse_loss(pred, target):
    """Mean over batch and dims of the squared error, and its gradient."""
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def _lv_scale(lv_min, lv_max):
    # the outer softplus tops out at softplus(lv_max - lv_min); rescale so the range is exact
    return (lv_max - lv_min) / float(_softplus(lv_max - lv_min))


def bound_logvar(raw, lv_min: float = DEFAULT_LOGVAR_BOUNDS[0], lv_max: float = DEFAULT_LOGVAR_BOUNDS[1]):
    """Smooth two-sided clamp of a raw log-variance. Returns ``(logvar, d logvar / d raw)``."""
    c = _lv_scale(lv_min, lv_max)
    upper = lv_max - _softplus(lv_max - raw)
    lv = lv_min + c * _softplus(upper - lv_min)
    return np.minimum(lv, lv_max), c * _sigmoid(lv_max - raw) * _sigmoid(upper - lv_min)


def unbound_logvar(lv, lv_min: float = DEFAULT_LOGVAR_BOUNDS[0], lv_max: float = DEFAULT_LOGVAR_BOUNDS[1]):
    """Inverse of :func:`bound_logvar` for ``lv`` strictly inside the bounds."""
    inv_softplus = lambda y: y + np.log(-np.expm1(-y))  # noqa: E731
    c = _lv_scale(lv_min, lv_max)
    upper = lv_min + inv_softplus((np.asarray(lv, dtype=float) - lv_min) / c)
    return lv_max - inv_softplus(lv_max - upper)


def gaussian_nll_loss(mean, raw_logvar, target, lv_min: float = DEFAULT_LOGVAR_BOUNDS[0],
                      lv_max: float = DEFAULT_LOGVAR_BOUNDS[1]):
    """Gaussian NLL averaged over the batch and summed over dims, constant included.

    Returns ``(loss, d loss / d mean, d loss / d raw_logvar)``.
    """
    mean, raw_logvar, target = np.asarray(mean), np.asarray(raw_logvar), np.asarray(target)
    if not (mean.shape == raw_logvar.shape == target.shape):
        raise ValueError("mean, raw_logvar and target must share a shape")
    n, d = mean.shape
    lv, dlv = bound_logvar(raw_logvar, lv_min, lv_max)
    inv_var = np.exp(-lv)
    diff = mean - target
    sq = diff * diff * inv_var
    loss = float(np.sum(0.5 * sq + 0.5 * lv) / n + 0.5 * d * LOG_2PI)
    g_mean = diff * inv_var / n
    g_raw = (0.5 - 0.5 * sq) * dlv / n
    return loss, g_mean, g_raw


def evaluate_loss(net: MLP, x, target, loss_kind: str = "mse", lv_bounds=DEFAULT_LOGVAR_BOUNDS):
    out = forward(net, x)
    if loss_kind == "mse":
        return mse_loss(out, target)[0]
    d = out.shape[1] // 2
    return gaussian_nll_loss(out[:, :d], out[:, d:], target, *lv_bounds)[0]


def backprop(net: MLP, x, target, loss_kind: str = "mse", lv_bounds=DEFAULT_LOGVAR_BOUNDS):
    """Loss and exact gradients ``[(dW_0, db_0), ...]`` for one batch."""
    x = np.asarray(x, dtype=net.dtype)
    target = np.asarray(target, dtype=net.dtype)
    if len(x) == 0:
        raise ValueError("empty batch")
    out, (pre, post) = _forward_cache(net, x)
    if loss_kind == "mse":
        loss, g = mse_loss(out, target)
    elif loss_kind == "nll":
        d = out.shape[1] // 2
        loss, g_mean, g_raw = gaussian_nll_loss(out[:, :d], out[:, d:], target, *lv_bounds)
        g = np.concatenate([g_mean, g_raw], axis=1)
    else:
        raise ValueError(f"unknown loss kind {loss_kind!r}")
    _, act_grad = ACTIVATIONS[net.activation]
    grads = [None] * len(net.weights)
    for i in range(len(net.weights) - 1, -1, -1):
        grads[i] = (post[i].T @ g, g.sum(axis=0))
        if i > 0:
            g = (g @ net.weights[i].T) * act_grad(pre[i - 1])
    return loss, grads


# --------------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: list
    v: list
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0


def adam_init(net: MLP, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    zeros = [np.zeros_like(p) for pair in zip(net.weights, net.biases) for p in pair]
    return AdamState(zeros, [z.copy() for z in zeros], lr, beta1, beta2, eps)


def adam_step(net: MLP, grads, state: AdamState) -> MLP:
    """One bias-corrected Adam update, applied to ``net`` in place (and returned)."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    flat_g = [g for pair in grads for g in pair]
    flat_p = [p for pair in zip(net.weights, net.biases) for p in pair]
    if len(flat_g) != len(state.m):
        raise ValueError("optimizer state does not match parameters")
    step = state.lr / c1
    for p, g, m, v in zip(flat_p, flat_g, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= step * m / (np.sqrt(v / c2) + state.eps)
    return net


# --------------------------------------------------------------------------- training


@dataclass
class TrainResult:
    net: MLP
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: Optional[int] = None
    snapshots: dict = field(default_factory=dict)


def train(net: MLP, x, y, loss_kind: str = "mse", epochs: int = 8, batch_size: int = 64,
          lr: float = 1e-3, seed: int = 0, x_val=None, y_val=None, early_stopping: bool = False,
          lv_bounds=DEFAULT_LOGVAR_BOUNDS, snapshot_epochs=()) -> TrainResult:
    """Shuffled mini-batch Adam. Deterministic given ``seed`` and the initial ``net``.

    ``train_loss[e]`` is the mean batch loss of epoch ``e``. With
    ``early_stopping`` the returned network is the one with the lowest
    held-out loss. ``snapshot_epochs`` stores copies after those epochs.

    Raises:
        TrainingDivergedError: on a non-finite batch loss.
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    x = np.asarray(x, dtype=net.dtype)
    y = np.asarray(y, dtype=net.dtype)
    rng = np.random.default_rng(seed)
    opt = adam_init(net, lr)
    result = TrainResult(net)
    have_val = x_val is not None and len(x_val) > 0
    best = (np.inf, None)
    n = len(x)
    for epoch in range(epochs):
        perm = rng.permutation(n)
        total, count = 0.0, 0
        for b, lo in enumerate(range(0, n, batch_size)):
            idx = perm[lo: lo + batch_size]
            loss, grads = backprop(net, x[idx], y[idx], loss_kind, lv_bounds)
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch, b, loss)
            adam_step(net, grads, opt)
            total += loss * len(idx)
            count += len(idx)
        result.train_loss.append(total / count)
        if have_val:
            vl = evaluate_loss(net, x_val, y_val, loss_kind, lv_bounds)
            result.val_loss.append(vl)
            if early_stopping and vl < best[0]:
                best = (vl, net.copy())
                result.best_epoch = epoch + 1
        if epoch + 1 in snapshot_epochs:
            result.snapshots[epoch + 1] = net.copy()
        log.debug("epoch %d train %.4g val %s", epoch + 1, result.train_loss[-1],
                  result.val_loss[-1] if have_val else "-")
    if early_stopping and best[1] is not None:
        result.net = best[1]
    return result
