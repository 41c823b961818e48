"""Pointwise confidence bands for the calibration function and predictions.

Variances follow the Bayesian reading of the linearised penalised regression:
the kernel part of each ``theta_j`` is a Gaussian process with covariance
``sigma^2 / (n lam) * k``, null-space coefficients get variance
``rho * sigma^2 / (n lam)``, and the working responses are observed with
noise ``sigma^2``.  The conditional variance given the working responses is
evaluated in a form that never subtracts two ``O(rho)`` quantities, so large
``rho`` loses no precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy import stats

from .calibrate import CalibrationEstimate, predict_at
from .errors import NumericError, UsageError
from .kernel import as_points
from .model import ComputerModel
from .select import LinearizedSystem, sigma2_hat

__all__ = [
    "ConfidenceBand",
    "z_quantile",
    "default_rho",
    "theta_variance",
    "prediction_variance",
    "theta_ci",
    "prediction_ci",
]

_CLAMP = 1e-8
RHO_SCALE = 1e8


@dataclass(frozen=True)
class ConfidenceBand:
    """Pointwise band ``center -/+ z * sd`` on an evaluation grid."""

    grid: np.ndarray
    center: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    level: float
    target: str
    sigma2: float = float("nan")
    rho: float = float("nan")
    flags: dict = field(default_factory=dict)

    @property
    def half_width(self) -> np.ndarray:
        return 0.5 * (self.upper - self.lower)

    def rows(self):
        """Rows ``(x, target, center, lower, upper, level)`` for CSV output."""
        g = np.asarray(self.grid).reshape(len(self.center), -1)[:, 0]
        for x, c, lo, hi in zip(g, self.center, self.lower, self.upper):
            yield float(x), self.target, float(c), float(lo), float(hi), self.level


def z_quantile(level: float) -> float:
    """Upper ``(1 - level) / 2`` standard-normal quantile."""
    if not 0.0 < level < 1.0:
        raise UsageError(f"confidence level must lie in (0, 1), got {level}")
    return float(stats.norm.ppf(0.5 + 0.5 * level))


def default_rho(sys: LinearizedSystem, lam: float = 0.0) -> float:
    """Null-space prior variance, ``1e8`` times the larger of two scales.

    One is the mean kernel diagonal.  The other, ``n lam / mean(w^2)``,
    matters when GCV picks a heavy penalty: the working covariance then
    carries ``n lam`` on its diagonal, and a prior that is only large
    relative to the kernel would still pull weakly identified null-space
    directions toward zero.
    """
    scale = float(np.mean(np.diag(sys.Phi)))
    w2 = float(np.mean(sys.w**2))
    if lam > 0 and w2 > 0:
        scale = max(scale, sys.n * lam / w2)
    return RHO_SCALE * scale


class _Posterior:
    """Factorisations shared by all grid points for one linearised system."""

    def __init__(self, sys: LinearizedSystem, lam: float, rho: float):
        if lam <= 0 or rho <= 0:
            raise UsageError("lam and rho must be positive")
        n, q = sys.n, sys.q
        self.sys, self.lam, self.rho = sys, lam, rho
        M = sum(np.outer(sys.w[:, j], sys.w[:, j]) * sys.Phi for j in range(q)) + n * lam * np.eye(n)
        try:
            self.chol = sla.cho_factor(M, lower=True)
        except np.linalg.LinAlgError:
            raise NumericError(
                f"covariance of the working responses is not positive definite (n*lam={n * lam:.3g})"
            ) from None
        self.U = np.hstack([sys.w[:, [j]] * sys.V for j in range(q)])  # n x qk
        MiU = sla.cho_solve(self.chol, self.U)
        C = self.U.T @ MiU
        self.c_eig, self.E = np.linalg.eigh(0.5 * (C + C.T))
        self.c_eig = np.maximum(self.c_eig, 0.0)

    def schur(self, prior_var, a, b):
        """Conditional variance for prior variance ``prior_var + rho |b|^2``.

        ``a`` (n, m) holds the kernel-part covariances with the working
        responses and ``b`` (qk, m) the null-space loadings.
        """
        Mia = sla.cho_solve(self.chol, a)
        h = b - self.U.T @ Mia
        proj = self.E.T @ h
        null_part = np.sum(proj * proj / (1.0 / self.rho + self.c_eig)[:, None], axis=0)
        return prior_var - np.sum(a * Mia, axis=0) + null_part, prior_var + self.rho * np.sum(b * b, axis=0)


def _features(sys: LinearizedSystem, est: CalibrationEstimate, x):
    X = as_points(x, est.anchors.shape[1])
    kern = est.kernel
    phi = kern.matrix(sys.anchors, X)  # n x m
    v = kern.null_basis().design(X).T  # k x m
    kxx = kern.diag(X)
    return X, phi, v, kxx


def _finish(raw, scale_ref, sigma2, n, lam):
    bad = raw < -_CLAMP * np.maximum(scale_ref, 1.0)
    if np.any(bad):
        raise NumericError(f"conditional variance is negative beyond tolerance ({raw.min():.3g})")
    return sigma2 / (n * lam) * np.maximum(raw, 0.0)


def theta_variance(sys: LinearizedSystem, est: CalibrationEstimate, x, sigma2: float, rho: float, j: int,
                   post: _Posterior | None = None) -> np.ndarray:
    """Conditional variance of ``theta_j`` at points ``x`` given the working responses."""
    if sigma2 < 0:
        raise UsageError("sigma2 must be non-negative")
    post = post or _Posterior(sys, est.lam, rho)
    X, phi, v, kxx = _features(sys, est, x)
    k, q = sys.k, sys.q
    a = sys.w[:, [j]] * phi
    b = np.zeros((q * k, X.shape[0]))
    b[j * k : (j + 1) * k] = v
    raw, ref = post.schur(kxx, a, b)
    return _finish(raw, ref, sigma2, sys.n, est.lam)


def prediction_variance(sys: LinearizedSystem, est: CalibrationEstimate, model: ComputerModel, x,
                        sigma2: float, rho: float, post: _Posterior | None = None):
    """Delta-method variance of ``y^s(x, theta(x))``.

    Returns ``(variance, degenerate)`` where ``degenerate`` marks points with
    a zero model gradient, at which the variance is reported as 0.
    """
    if model.r != 1:
        raise UsageError("prediction variance is defined for scalar responses")
    post = post or _Posterior(sys, est.lam, rho)
    X, phi, v, kxx = _features(sys, est, x)
    T = est.theta(X)
    if model.bounded:
        T = model.clamp(T)
    wx = model.grad(X, T)[:, 0, :]  # m x q
    k, q = sys.k, sys.q
    a = sum(wx[:, j][None, :] * (sys.w[:, [j]] * phi) for j in range(q))
    b = np.concatenate([wx[:, j][None, :] * v for j in range(q)], axis=0)
    raw, ref = post.schur(kxx * np.sum(wx * wx, axis=1), a, b)
    degenerate = np.all(wx == 0.0, axis=1)
    var = _finish(raw, ref, sigma2, sys.n, est.lam)
    var[degenerate] = 0.0
    return var, degenerate


def theta_ci(sys: LinearizedSystem, est: CalibrationEstimate, grid, level: float = 0.9,
             rho: float | None = None, sigma2: float | None = None, identifiable: bool = True):
    """One band per calibration component, centred at ``theta_hat_j``."""
    z = z_quantile(level)
    rho = default_rho(sys, est.lam) if rho is None else rho
    s2 = sigma2_hat(sys, est.lam) if sigma2 is None else sigma2
    post = _Posterior(sys, est.lam, rho)
    G = np.asarray(grid, dtype=float)
    centers = est.theta(G)
    flags = {} if identifiable else {"note": "interpretable only under identifiability"}
    bands = []
    for j in range(est.q):
        sd = np.sqrt(theta_variance(sys, est, G, s2, rho, j, post))
        c = centers[:, j]
        bands.append(ConfidenceBand(G, c, c - z * sd, c + z * sd, level, f"theta{j + 1}", s2, rho, dict(flags)))
    return bands


def prediction_ci(sys: LinearizedSystem, est: CalibrationEstimate, model: ComputerModel, grid,
                  level: float = 0.9, rho: float | None = None, sigma2: float | None = None) -> ConfidenceBand:
    """Band for ``y^s(x, theta*(x))`` centred at the plug-in prediction."""
    z = z_quantile(level)
    rho = default_rho(sys, est.lam) if rho is None else rho
    s2 = sigma2_hat(sys, est.lam) if sigma2 is None else sigma2
    G = np.asarray(grid, dtype=float)
    var, degenerate = prediction_variance(sys, est, model, G, s2, rho)
    c = predict_at(est, model, G)[:, 0]
    sd = np.sqrt(var)
    flags = {"degenerate_delta_method": degenerate} if np.any(degenerate) else {}
    return ConfidenceBand(G, c, c - z * sd, c + z * sd, level, "prediction", s2, rho, flags)


def bands_at_levels(sys, est, model, grid, levels, target="prediction", rho=None, identifiable=True):
    """Bands at several levels sharing one factorisation; ``target`` is
    ``"prediction"`` or ``"theta"`` (returns lists per level)."""
    rho = default_rho(sys, est.lam) if rho is None else rho
    s2 = sigma2_hat(sys, est.lam)
    G = np.asarray(grid, dtype=float)
    post = _Posterior(sys, est.lam, rho)
    out = {}
    if target == "prediction":
        var, deg = prediction_variance(sys, est, model, G, s2, rho, post)
        c = predict_at(est, model, G)[:, 0]
        sd = np.sqrt(var)
        for lv in levels:
            z = z_quantile(lv)
            out[lv] = ConfidenceBand(G, c, c - z * sd, c + z * sd, lv, "prediction", s2, rho)
        return out
    centers = est.theta(G)
    sds = [np.sqrt(theta_variance(sys, est, G, s2, rho, j, post)) for j in range(est.q)]
    flags = {} if identifiable else {"note": "interpretable only under identifiability"}
    for lv in levels:
        z = z_quantile(lv)
        out[lv] = [ConfidenceBand(G, centers[:, j], centers[:, j] - z * sd, centers[:, j] + z * sd, lv,
                                  f"theta{j + 1}", s2, rho, dict(flags)) for j, sd in enumerate(sds)]
    return out
