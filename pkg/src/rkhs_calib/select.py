"""Linearisation, smoothing matrix, GCV and penalty selection.

Around a fitted calibration the model is replaced by its first-order Taylor
expansion, which turns the fit into a weighted penalised regression with
working response ``ybar``.  Stacking ``ybar`` ``q`` times gives ``Y`` and the
smoothing matrix

    A(lam) = I - n lam F2 (F2^T Phi_w F2 + n lam I)^-1 F2^T

where ``F2`` spans the orthogonal complement of ``col(V_w)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .calibrate import CalibrationEstimate, RepresenterBasis, fit
from .data import PhysicalDataset
from .errors import CalibError, NumericError, UsageError
from .kernel import Kernel, gram
from .model import ComputerModel

log = logging.getLogger(__name__)

__all__ = [
    "LinearizedSystem",
    "linearize",
    "smoother_matrix",
    "smoother_solution",
    "gcv",
    "sigma2_hat",
    "trace_smoother",
    "working_residual",
    "select_lambda",
    "default_grid",
    "SelectionResult",
]

EXPLICIT_LIMIT = 2000


def default_grid(size: int = 40, low: float = 1e-8, high: float = 1e2) -> np.ndarray:
    return np.logspace(np.log10(low), np.log10(high), size)


@dataclass(frozen=True)
class LinearizedSystem:
    """Working regression at a fitted calibration (scalar response)."""

    anchors: np.ndarray
    w: np.ndarray  # n x q model gradients
    ybar: np.ndarray
    V: np.ndarray
    Phi: np.ndarray
    Y: np.ndarray
    Vw: np.ndarray
    Phiw: np.ndarray
    F1: np.ndarray
    F2: np.ndarray
    R: np.ndarray
    perm: np.ndarray
    zero_rows: np.ndarray = field(default=None)

    @property
    def n(self) -> int:
        return self.V.shape[0]

    @property
    def q(self) -> int:
        return self.w.shape[1]

    @property
    def k(self) -> int:
        return self.V.shape[1]

    @property
    def rank(self) -> int:
        return self.F1.shape[1]

    def core(self) -> np.ndarray:
        """``F2^T Phi_w F2``."""
        return self.F2.T @ self.Phiw @ self.F2


def _build(anchors, w, ybar, V, Phi) -> LinearizedSystem:
    n, q = w.shape
    row_v = np.hstack([w[:, [j]] * V for j in range(q)])
    row_phi = np.hstack([w[:, [j]] * Phi * w[:, j][None, :] for j in range(q)])
    Vw = np.tile(row_v, (q, 1))
    Phiw = np.tile(row_phi, (q, 1))
    Y = np.tile(ybar, q)
    Q, R, perm = sla.qr(Vw, mode="full", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = max(Vw.shape) * np.finfo(float).eps * (diag[0] if diag.size else 0.0)
    rank = int(np.sum(diag > tol))
    zero_rows = np.flatnonzero(np.all(w == 0.0, axis=1))
    if zero_rows.size:
        log.warning("model gradient vanishes at %d design points", zero_rows.size)
    return LinearizedSystem(anchors, w, ybar, V, Phi, Y, Vw, Phiw, Q[:, :rank], Q[:, rank:], R[:rank], perm,
                            zero_rows)


def linearize(est: CalibrationEstimate, data: PhysicalDataset, model: ComputerModel) -> LinearizedSystem:
    """First-order expansion of the model around ``est`` at the design points."""
    if model.r != 1 or data.r != 1:
        raise UsageError("linearisation is implemented for scalar responses (r = 1)")
    if est.n != data.n or not np.allclose(est.anchors, data.x):
        raise UsageError("estimate was fitted on different design points")
    T = est.theta(data.x)
    if model.bounded:
        T = model.clamp(T)
    w = model.grad(data.x, T)[:, 0, :]
    ybar = data.y[:, 0] - model.eval(data.x, T)[:, 0] + np.sum(w * T, axis=1)
    V = est.kernel.null_basis().design(data.x)
    Phi = gram(est.kernel, data.x)
    return _build(est.anchors, w, ybar, V, Phi)


def _core_solve(sys: LinearizedSystem, lam: float, rhs: np.ndarray) -> np.ndarray:
    if lam <= 0:
        raise UsageError("lam must be positive")
    m = sys.F2.shape[1]
    if m == 0:
        return np.zeros((0,) + np.shape(rhs)[1:])
    B = sys.core() + sys.n * lam * np.eye(m)
    try:
        lu = sla.lu_factor(B, check_finite=True)
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise NumericError(f"smoother core is singular: {exc}") from None
    if np.min(np.abs(np.diag(lu[0]))) <= 1e-14 * np.max(np.abs(np.diag(lu[0]))):
        raise NumericError("smoother core is numerically singular")
    return sla.lu_solve(lu, rhs)


def smoother_matrix(sys: LinearizedSystem, lam: float) -> np.ndarray:
    """Explicit ``A(lam)`` (size ``qn x qn``)."""
    N = sys.Y.size
    if N > EXPLICIT_LIMIT:
        raise UsageError(f"explicit smoother of size {N} exceeds the {EXPLICIT_LIMIT} limit")
    X = _core_solve(sys, lam, sys.F2.T)
    return np.eye(N) - sys.n * lam * sys.F2 @ X


def residual_operator(sys: LinearizedSystem, lam: float, Y: np.ndarray | None = None):
    """``(I - A) Y`` and ``tr(I - A)`` without forming ``A``."""
    Y = sys.Y if Y is None else Y
    m = sys.F2.shape[1]
    sol = _core_solve(sys, lam, np.column_stack([sys.F2.T @ Y, np.eye(m)]))
    nl = sys.n * lam
    resid = nl * sys.F2 @ sol[:, 0]
    tr = nl * float(np.trace(sol[:, 1:]))
    return resid, tr


def trace_smoother(sys: LinearizedSystem, lam: float) -> float:
    """Effective degrees of freedom ``tr(A(lam))``."""
    return sys.Y.size - residual_operator(sys, lam)[1]


def smoother_solution(sys: LinearizedSystem, lam: float, Y: np.ndarray | None = None):
    """Coefficients ``(alpha, beta_w)`` solving the stacked stationarity system.

    ``beta_w`` is orthogonal to ``col(V_w)`` and the fitted values
    ``V_w alpha + Phi_w beta_w`` equal ``A(lam) Y``.  When ``V_w`` is rank
    deficient ``alpha`` is the minimum-norm solution.
    """
    Y = sys.Y if Y is None else Y
    beta_w = sys.F2 @ _core_solve(sys, lam, sys.F2.T @ Y)
    rhs = sys.F1.T @ (Y - sys.Phiw @ beta_w)
    z, *_ = np.linalg.lstsq(sys.R, rhs, rcond=None)
    alpha = np.empty_like(z)
    alpha[sys.perm] = z
    return alpha, beta_w


def working_residual(sys: LinearizedSystem, lam: float):
    """Residual and ``tr(I - S)`` of the ``n``-dimensional working smoother.

    Because the stacked response repeats ``ybar``, ``A(lam) Y`` repeats one
    fitted vector; ``S`` is the map from ``ybar`` to it, the block average
    ``q^-1 sum_{l,m} A_lm``.  For ``q = 1`` it coincides with ``A``.
    """
    n, q = sys.n, sys.q
    m = sys.F2.shape[1]
    E = sys.F2.reshape(q, n, m).sum(axis=0)  # n x m
    sol = _core_solve(sys, lam, np.column_stack([E.T @ sys.ybar, E.T]))
    nl = n * lam
    resid = (nl / q) * E @ sol[:, 0]
    tr = (nl / q) * float(np.sum(E * sol[:, 1:].T))
    return resid, tr


CRITERIA = ("working", "stacked")


def _scores(sys: LinearizedSystem, lam: float, criterion: str = "working") -> tuple[float, float, float]:
    if criterion == "stacked":
        resid, tr = residual_operator(sys, lam)
        N = sys.Y.size
    elif criterion == "working":
        resid, tr = working_residual(sys, lam)
        N = sys.n
    else:
        raise UsageError(f"unknown GCV criterion {criterion!r}; expected one of {CRITERIA}")
    if tr <= 1e-12:
        raise NumericError(f"degenerate smoother: tr(I - A) = {tr:.3g}")
    rss = float(resid @ resid)
    return (rss / N) / (tr / N) ** 2, N - tr, rss / tr


def gcv(sys: LinearizedSystem, lam: float, criterion: str = "working") -> float:
    """Generalised cross-validation score.

    ``criterion="stacked"`` scores the ``qn``-dimensional stacked smoother
    ``A(lam)`` directly; ``"working"`` (default) scores the ``n``-dimensional
    smoother it induces on ``ybar``.  They agree when ``q = 1``.  For
    ``q >= 2`` the stacked trace undercounts the fitted degrees of freedom
    and its minimiser drifts to the smallest ``lam``.
    """
    return _scores(sys, lam, criterion)[0]


def sigma2_hat(sys: LinearizedSystem, lam: float, criterion: str = "working") -> float:
    """Noise variance estimate ``|(I - S) ybar|^2 / tr(I - S)``."""
    return _scores(sys, lam, criterion)[2]


@dataclass
class SelectionResult:
    lam: float
    estimate: CalibrationEstimate
    system: LinearizedSystem
    curve: list  # rows (lam, gcv, edf, sigma2)
    failures: dict = field(default_factory=dict)


def select_lambda(data: PhysicalDataset, model: ComputerModel, kernel: Kernel, grid=None,
                  init=None, seed: int = 0, criterion: str = "working", **fit_opts) -> SelectionResult:
    """Fit along a descending ``lam`` grid with warm starts and keep the GCV minimiser.

    Ties go to the larger ``lam``.  Failed fits are skipped and reported in
    ``failures``; if every fit fails a :class:`CalibError` is raised.
    """
    grid = default_grid() if grid is None else np.asarray(grid, dtype=float).ravel()
    if criterion not in CRITERIA:
        raise UsageError(f"unknown GCV criterion {criterion!r}; expected one of {CRITERIA}")
    if grid.size == 0 or np.any(grid <= 0):
        raise UsageError("lambda grid must be non-empty and positive")
    basis = RepresenterBasis(kernel, data.x)
    order = np.argsort(-grid, kind="stable")
    curve, failures = [], {}
    best = None
    warm = init
    for idx in order:
        lam = float(grid[idx])
        try:
            est = fit(data, model, kernel, lam, init=warm, seed=seed, basis=basis, **fit_opts)
            sys = linearize(est, data, model)
            score, edf, s2 = _scores(sys, lam, criterion)
        except CalibError as exc:
            failures[lam] = f"{type(exc).__name__}: {exc}"
            continue
        warm = est
        curve.append((lam, score, edf, s2))
        if best is None or score < best[0]:
            best = (score, lam, est, sys)
    if best is None:
        detail = "; ".join(f"lam={k:g}: {v}" for k, v in failures.items())
        raise CalibError(f"all fits failed along the lambda grid ({detail})")
    curve.sort(key=lambda row: row[0])
    return SelectionResult(best[1], best[2], best[3], curve, failures)
