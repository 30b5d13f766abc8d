"""Exact GP regression with an ARD squared-exponential kernel, and expected improvement."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import cho_solve, cholesky
from scipy.optimize import minimize_scalar
from scipy.stats import norm

log = logging.getLogger(__name__)

DEFAULT_BOUNDS = {"lengthscale": (1e-2, 1e2), "signal": (1e-4, 1e2), "noise": (1e-6, 1.0)}
JITTER_START, JITTER_MAX = 1e-10, 1e-4


class GpFitError(RuntimeError):
    pass


@dataclass(frozen=True)
class GpModel:
    X: np.ndarray
    y: np.ndarray
    mean: float
    lengthscales: np.ndarray
    signal_var: float
    noise_var: float
    jitter: float
    chol: np.ndarray
    alpha: np.ndarray
    log_marginal_likelihood: float

    def hyperparameters(self) -> dict:
        return {"lengthscales": self.lengthscales.tolist(), "signal_var": self.signal_var,
                "noise_var": self.noise_var, "jitter": self.jitter, "lml": self.log_marginal_likelihood}


def rbf_kernel(A, B, lengthscales, signal_var) -> np.ndarray:
    a = np.asarray(A, dtype=np.float64) / lengthscales
    b = np.asarray(B, dtype=np.float64) / lengthscales
    sq = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return signal_var * np.exp(-0.5 * np.maximum(sq, 0.0))


def _factor(K):
    """Cholesky of ``K`` with the doubling jitter schedule; returns ``(L, jitter)``."""
    n = len(K)
    jitter = 0.0
    while True:
        try:
            return cholesky(K + jitter * np.eye(n), lower=True), jitter
        except np.linalg.LinAlgError:
            jitter = JITTER_START if jitter == 0.0 else 2.0 * jitter
            if jitter > JITTER_MAX:
                raise GpFitError("kernel matrix not positive definite even with maximum jitter") from None


def _lml(X, yc, log_params):
    p = X.shape[1]
    ell = np.exp(log_params[:p])
    sf2, sn2 = np.exp(log_params[p]), np.exp(log_params[p + 1])
    K = rbf_kernel(X, X, ell, sf2) + sn2 * np.eye(len(X))
    try:
        L, _ = _factor(K)
    except GpFitError:
        return -np.inf
    alpha = cho_solve((L, True), yc)
    return float(-0.5 * yc @ alpha - np.log(np.diag(L)).sum() - 0.5 * len(X) * np.log(2 * np.pi))


def log_marginal_likelihood(X, y, lengthscales, signal_var, noise_var) -> float:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    params = np.log(np.concatenate([np.broadcast_to(lengthscales, (X.shape[1],)), [signal_var, noise_var]]))
    return _lml(X, y - y.mean(), params)


def gp_fit(X, y, bounds: Optional[dict] = None, n_starts: int = 8, sweeps: int = 3, seed: int = 0) -> GpModel:
    """Fit hyperparameters by multi-start coordinate ascent on the log marginal likelihood.

    The first start uses mid-range values; the rest are log-uniform in bounds.
    The prior mean is the constant ``mean(y)``.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if X.ndim == 1:
        X = X[:, None]
    if len(X) != len(y) or len(y) < 2:
        raise ValueError("need matching X, y with at least 2 points")
    b = {**DEFAULT_BOUNDS, **(bounds or {})}
    p = X.shape[1]
    lo = np.log(np.array([b["lengthscale"][0]] * p + [b["signal"][0], b["noise"][0]]))
    hi = np.log(np.array([b["lengthscale"][1]] * p + [b["signal"][1], b["noise"][1]]))
    m = float(y.mean())
    yc = y - m
    rng = np.random.default_rng(seed)

    spread = np.clip(X.std(axis=0), *b["lengthscale"])
    first = np.log(np.concatenate([spread, [np.clip(yc.var(), *b["signal"]), np.clip(1e-2 * yc.var(), *b["noise"])]]))
    starts = [np.clip(first, lo, hi)] + [rng.uniform(lo, hi) for _ in range(n_starts - 1)]

    best_params, best_val = None, -np.inf
    for x in starts:
        x = x.copy()
        val = _lml(X, yc, x)
        for _ in range(sweeps):
            for i in range(len(x)):
                if hi[i] - lo[i] < 1e-12:
                    continue

                def neg(v, i=i):
                    x[i] = v
                    out = _lml(X, yc, x)
                    return 1e300 if not np.isfinite(out) else -out

                keep = x[i]
                res = minimize_scalar(neg, bounds=(lo[i], hi[i]), method="bounded",
                                      options={"xatol": 1e-4})
                if -res.fun >= val:
                    x[i], val = res.x, -res.fun
                else:
                    x[i] = keep
        if val > best_val:
            best_params, best_val = x.copy(), val
    if best_params is None:
        raise GpFitError("no finite log marginal likelihood at any start")
    ell = np.exp(best_params[:p])
    sf2, sn2 = float(np.exp(best_params[p])), float(np.exp(best_params[p + 1]))
    L, jitter = _factor(rbf_kernel(X, X, ell, sf2) + sn2 * np.eye(len(X)))
    if jitter:
        log.info("gp_fit: added jitter %.3g", jitter)
    return GpModel(X, y, m, ell, sf2, sn2, jitter, L, cho_solve((L, True), yc), best_val)


def gp_predict(model: GpModel, Xs):
    """Posterior mean and latent variance (floored at 0) at ``Xs``."""
    Xs = np.asarray(Xs, dtype=np.float64)
    if Xs.ndim == 1:
        Xs = Xs.reshape(-1, model.X.shape[1])
    Ks = rbf_kernel(Xs, model.X, model.lengthscales, model.signal_var)
    mean = model.mean + Ks @ model.alpha
    v = np.linalg.solve(model.chol, Ks.T) if len(Xs) else np.zeros((len(model.X), 0))
    var = np.maximum(model.signal_var - (v * v).sum(axis=0), 0.0)
    return mean, var


def expected_improvement(model_or_mean, x_or_std, best: float, xi: float = 0.0):
    """EI for maximization.

    Call either as ``expected_improvement(model, X, best)`` or with raw
    ``(mean, std, best)`` arrays.
    """
    if isinstance(model_or_mean, GpModel):
        mu, var = gp_predict(model_or_mean, x_or_std)
        sd = np.sqrt(var)
    else:
        mu = np.asarray(model_or_mean, dtype=np.float64)
        sd = np.asarray(x_or_std, dtype=np.float64)
    imp = mu - best - xi
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(sd > 0, imp / np.where(sd > 0, sd, 1.0), 0.0)
    ei = np.where(sd > 0, imp * norm.cdf(z) + sd * norm.pdf(z), np.maximum(imp, 0.0))
    return np.maximum(ei, 0.0)
