"""Penalised least-squares calibration over the representer expansion.

A calibration function has components

    theta_j(x) = sum_s alpha[j, s] v_s(x) + sum_i beta[j, i] k(x, x_i)

with ``V^T beta_j = 0``.  The fit minimises

    sum_i |y_i - y^s(x_i, theta(x_i))|^2 + n * lam * sum_j beta_j^T K beta_j.

Internally the solver works in whitened coordinates ``c_j = (a_j, eta_j)``
in which the anchor values are ``Z c_j`` and the penalty is
``n * lam * |eta_j|^2``.  ``Z`` is built once per design from an orthonormal
complement of ``V`` and the eigendecomposition of the projected gram matrix,
which keeps every solve well conditioned regardless of ``lam``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .data import PhysicalDataset
from .errors import ConvergenceError, InfeasibleError, NumericError, UsageError
from .kernel import Kernel, as_points, gram
from .model import ComputerModel

log = logging.getLogger(__name__)

__all__ = [
    "Coefficients",
    "FitReport",
    "CalibrationEstimate",
    "RepresenterBasis",
    "theta_at",
    "objective",
    "objective_grad",
    "fit",
    "predict_at",
]

_EIG_CUTOFF = 1e-13


@dataclass(frozen=True)
class Coefficients:
    """Expansion coefficients: ``alpha`` (q, k) and ``beta`` (q, n)."""

    alpha: np.ndarray
    beta: np.ndarray

    @property
    def q(self) -> int:
        return self.alpha.shape[0]

    def flat(self) -> np.ndarray:
        return np.concatenate([self.alpha.ravel(), self.beta.ravel()])

    @classmethod
    def from_flat(cls, vec, q: int, k: int, n: int) -> "Coefficients":
        vec = np.asarray(vec, dtype=float)
        return cls(vec[: q * k].reshape(q, k), vec[q * k :].reshape(q, n))


@dataclass(frozen=True)
class FitReport:
    objective: float
    iterations: int
    converged: bool
    feasible: bool
    history: tuple = ()
    starts: int = 1
    method: str = "gauss-newton"

    @property
    def monotone(self) -> bool:
        h = np.asarray(self.history)
        return bool(np.all(np.diff(h) <= 1e-12 * (1.0 + np.abs(h[:-1])))) if h.size > 1 else True

    def to_dict(self) -> dict:
        return {
            "objective": self.objective,
            "iterations": self.iterations,
            "converged": self.converged,
            "feasible": self.feasible,
            "starts": self.starts,
            "method": self.method,
            "monotone": self.monotone,
        }


@dataclass(frozen=True)
class CalibrationEstimate:
    """Fitted calibration function with its kernel, anchors and penalty."""

    kernel: Kernel
    anchors: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    lam: float
    report: FitReport = field(default=None)
    anchor_values: np.ndarray = field(default=None, repr=False)

    @property
    def q(self) -> int:
        return self.alpha.shape[0]

    @property
    def n(self) -> int:
        return self.anchors.shape[0]

    @property
    def coefficients(self) -> Coefficients:
        return Coefficients(self.alpha, self.beta)

    def theta(self, x) -> np.ndarray:
        """Evaluate the expansion at points ``x``; returns ``(m, q)``."""
        X = as_points(x, self.anchors.shape[1])
        V = self.kernel.null_basis().design(X)
        K = self.kernel.matrix(X, self.anchors)
        return V @ self.alpha.T + K @ self.beta.T

    def penalty(self) -> float:
        K = gram(self.kernel, self.anchors)
        return float(sum(b @ K @ b for b in self.beta))


def theta_at(est: CalibrationEstimate, x) -> np.ndarray:
    """``theta_hat(x)`` for a single point, shape ``(q,)``."""
    return est.theta(np.atleast_1d(np.asarray(x, dtype=float)).reshape(1, -1))[0]


class RepresenterBasis:
    """Whitened coordinates for a kernel and a set of anchors."""

    def __init__(self, kernel: Kernel, anchors):
        self.kernel = kernel
        self.anchors = as_points(anchors, kernel.dim)
        n = self.anchors.shape[0]
        self.V = kernel.null_basis().design(self.anchors)
        self.k = self.V.shape[1]
        if n < self.k:
            raise UsageError(f"need at least {self.k} design points, got {n}")
        self.K = gram(kernel, self.anchors)
        Q, R = np.linalg.qr(self.V, mode="complete")
        if np.min(np.abs(np.diag(R[: self.k]))) <= 1e-12 * max(1.0, np.max(np.abs(R))):
            raise NumericError("null-space design matrix is rank deficient (repeated design points?)")
        self.F1, self.R, self.F = Q[:, : self.k], R[: self.k], Q[:, self.k :]
        P = self.F.T @ self.K @ self.F
        d, U = np.linalg.eigh(0.5 * (P + P.T))
        keep = d > _EIG_CUTOFF * max(d.max(initial=0.0), 1e-300)
        self.d, self.U = d[keep], U[:, keep]
        self.FU = self.F @ self.U
        self.Z = np.hstack([self.V, self.FU * np.sqrt(self.d)])
        self.p = self.Z.shape[1]

    @property
    def n(self) -> int:
        return self.anchors.shape[0]

    def values(self, c: np.ndarray) -> np.ndarray:
        """Anchor values ``(n, q)`` from coordinates ``c`` of shape ``(q, p)``."""
        return self.Z @ c.T

    def coords(self, values: np.ndarray) -> np.ndarray:
        """Coordinates reproducing given anchor values (least squares)."""
        sol, *_ = np.linalg.lstsq(self.Z, np.asarray(values, float).reshape(self.n, -1), rcond=None)
        return sol.T

    def coefficients(self, c: np.ndarray) -> Coefficients:
        a, eta = c[:, : self.k], c[:, self.k :]
        beta = (eta / np.sqrt(self.d)) @ self.FU.T
        alpha = a - sla.solve_triangular(self.R, self.F1.T @ self.K @ beta.T).T
        return Coefficients(alpha, beta)


def _check_coeffs(coeffs: Coefficients, model: ComputerModel, basis: RepresenterBasis):
    if coeffs.alpha.shape != (model.q, basis.k) or coeffs.beta.shape != (model.q, basis.n):
        raise UsageError(
            f"coefficient shapes {coeffs.alpha.shape}, {coeffs.beta.shape} do not match "
            f"q={model.q}, k={basis.k}, n={basis.n}"
        )


def _anchor_theta(coeffs: Coefficients, basis: RepresenterBasis) -> np.ndarray:
    return basis.V @ coeffs.alpha.T + basis.K @ coeffs.beta.T


def objective(coeffs: Coefficients, data: PhysicalDataset, model: ComputerModel, kernel: Kernel, lam: float,
              basis: RepresenterBasis | None = None) -> float:
    """Data misfit plus ``n * lam * sum_j beta_j^T K beta_j``."""
    if lam < 0:
        raise UsageError("lam must be non-negative")
    basis = basis or RepresenterBasis(kernel, data.x)
    _check_coeffs(coeffs, model, basis)
    T = _anchor_theta(coeffs, basis)
    if model.bounded and not np.all(model.feasible(T)):
        raise InfeasibleError("calibration values leave the parameter box at some design points")
    res = data.y - model.eval(data.x, T)
    pen = sum(b @ basis.K @ b for b in coeffs.beta)
    return float(np.sum(res * res) + data.n * lam * pen)


def objective_grad(coeffs: Coefficients, data: PhysicalDataset, model: ComputerModel, kernel: Kernel,
                   lam: float, basis: RepresenterBasis | None = None) -> np.ndarray:
    """Gradient of :func:`objective` in the flat ``(alpha, beta)`` layout."""
    basis = basis or RepresenterBasis(kernel, data.x)
    _check_coeffs(coeffs, model, basis)
    T = _anchor_theta(coeffs, basis)
    if model.bounded and not np.all(model.feasible(T)):
        raise InfeasibleError("calibration values leave the parameter box at some design points")
    res = data.y - model.eval(data.x, T)
    G = model.grad(data.x, T)
    s = np.einsum("nr,nrq->nq", res, G)  # sum over responses of res * dy/dtheta_j
    g_alpha = -2.0 * s.T @ basis.V
    g_beta = -2.0 * s.T @ basis.K + 2.0 * data.n * lam * coeffs.beta @ basis.K
    return np.concatenate([g_alpha.ravel(), g_beta.ravel()])


class _Problem:
    """Objective, gradient and Gauss-Newton system in whitened coordinates."""

    def __init__(self, basis: RepresenterBasis, data: PhysicalDataset, model: ComputerModel, lam: float):
        self.b, self.data, self.model = basis, data, model
        self.nlam = data.n * lam
        self.q = model.q

    def feasible(self, c) -> bool:
        return (not self.model.bounded) or bool(np.all(self.model.feasible(self.b.values(c))))

    def residual(self, c):
        return self.data.y - self.model.eval(self.data.x, self.b.values(c))

    def value(self, c, res=None) -> float:
        res = self.residual(c) if res is None else res
        eta = c[:, self.b.k :]
        return float(np.sum(res * res) + self.nlam * np.sum(eta * eta))

    def gradient(self, c, res=None, G=None) -> np.ndarray:
        T = self.b.values(c)
        res = self.residual(c) if res is None else res
        G = self.model.grad(self.data.x, T) if G is None else G
        s = np.einsum("nr,nrq->nq", res, G)
        g = -2.0 * s.T @ self.b.Z
        g[:, self.b.k :] += 2.0 * self.nlam * c[:, self.b.k :]
        return g

    def _jacobian(self, G) -> np.ndarray:
        n, r, q = G.shape
        return np.concatenate([G[:, :, j].T.reshape(r * n, 1) * np.tile(self.b.Z, (r, 1)) for j in range(q)],
                              axis=1)

    def _penalty_rows(self) -> np.ndarray:
        q, p, k = self.q, self.b.p, self.b.k
        pen = np.zeros((q * (p - k), q * p))
        for j in range(q):
            pen[j * (p - k) : (j + 1) * (p - k), j * p + k : (j + 1) * p] = np.eye(p - k)
        return pen

    def gn_direction(self, c, res, G, damping: float = 0.0) -> np.ndarray:
        """Gauss-Newton step, Levenberg-Marquardt damped when ``damping > 0``."""
        q, p, k = self.q, self.b.p, self.b.k
        J = self._jacobian(G)
        rhs = [res.T.reshape(-1)]
        if self.nlam > 0:
            root = np.sqrt(self.nlam)
            J = np.vstack([J, root * self._penalty_rows()])
            rhs.append(-root * c[:, k:].ravel())
        if damping > 0:
            scale = np.sqrt(damping * np.mean(np.sum(J * J, axis=0)))
            J = np.vstack([J, scale * np.eye(q * p)])
            rhs.append(np.zeros(q * p))
        delta, *_ = np.linalg.lstsq(J, np.concatenate(rhs), rcond=None)
        return delta.reshape(q, p)

    def newton_direction(self, c, res, G):
        """Full Newton step using model curvature; ``None`` if the Hessian is not positive definite."""
        q, p, k = self.q, self.b.p, self.b.k
        x, Z = self.data.x, self.b.Z
        T = self.b.values(c)
        H2 = np.zeros((q * p, q * p))
        for a in range(q):
            h = 1e-5 * (1.0 + np.abs(T[:, a]))
            tp, tm = T.copy(), T.copy()
            tp[:, a] += h
            tm[:, a] -= h
            if self.model.bounded and not (np.all(self.model.feasible(tp)) and np.all(self.model.feasible(tm))):
                return None
            D = (self.model.grad(x, tp) - self.model.grad(x, tm)) / (2.0 * h)[:, None, None]  # n r q
            s = np.einsum("nr,nrb->nb", res, D)
            for b in range(q):
                H2[a * p : (a + 1) * p, b * p : (b + 1) * p] = Z.T @ (s[:, [b]] * Z)
        H2 = 0.5 * (H2 + H2.T)
        J = self._jacobian(G)
        H = J.T @ J - H2
        g = J.T @ res.T.reshape(-1)
        if self.nlam > 0:
            P = self._penalty_rows()
            H += self.nlam * P.T @ P
            g -= self.nlam * P.T @ c[:, k:].ravel()
        try:
            cf = sla.cho_factor(H + 1e-12 * np.trace(H) / H.shape[0] * np.eye(H.shape[0]))
        except np.linalg.LinAlgError:
            return None
        return sla.cho_solve(cf, g).reshape(q, p)


def _line_search(prob: _Problem, c, f0, direction, slope, max_halvings=30):
    """Step halving until the step is feasible and the objective decreases."""
    step = 1.0
    for halvings in range(max_halvings + 1):
        trial = c + step * direction
        if prob.feasible(trial):
            res = prob.residual(trial)
            ft = prob.value(trial, res)
            if np.isfinite(ft) and ft <= f0 + 1e-4 * step * min(slope, 0.0):
                return trial, ft, res, halvings
        step *= 0.5
    return None


def _solve(prob: _Problem, c0, max_iter, tol, method):
    c = np.array(c0, dtype=float)
    res = prob.residual(c)
    f = prob.value(c, res)
    history = [f]
    converged = False
    lbfgs_s, lbfgs_y = [], []
    g = None
    damping = 0.0
    it = 0
    for it in range(1, max_iter + 1):
        G = prob.model.grad(prob.data.x, prob.b.values(c))
        g = prob.gradient(c, res, G)
        if np.max(np.abs(g)) < 1e-7 * (1.0 + abs(f)):
            converged = True
            it -= 1
            break
        if method == "gauss-newton":
            direction = prob.newton_direction(c, res, G) if it > 1 else None
            if direction is None:
                direction = prob.gn_direction(c, res, G, damping)
        else:
            direction = -_lbfgs_apply(g.ravel(), lbfgs_s, lbfgs_y).reshape(c.shape)
        slope = float(np.sum(g * direction))
        if slope >= 0:
            direction, slope = -g, -float(np.sum(g * g))
        found = _line_search(prob, c, f, direction, slope)
        if found is None:
            # no decrease along the direction: stationary to working precision
            converged = True
            break
        c_new, f_new, res, halvings = found
        if halvings >= 3:
            damping = max(10.0 * damping, 1e-8)
        elif halvings == 0:
            damping = 0.1 * damping if damping > 1e-10 else 0.0
        if method != "gauss-newton":
            g_new = prob.gradient(c_new, res)
            sv, yv = (c_new - c).ravel(), (g_new - g).ravel()
            if sv @ yv > 1e-12 * np.linalg.norm(sv) * np.linalg.norm(yv):
                lbfgs_s.append(sv)
                lbfgs_y.append(yv)
                if len(lbfgs_s) > 10:
                    lbfgs_s.pop(0)
                    lbfgs_y.pop(0)
        rel = abs(f - f_new) / max(abs(f), 1e-300)
        c, f = c_new, f_new
        history.append(f)
        if rel < tol:
            converged = True
            break
    return c, f, it, converged, history


def _lbfgs_apply(g, S, Y):
    """Two-loop recursion: approximate inverse Hessian times ``g``."""
    q = g.copy()
    alphas = []
    for s, y in zip(reversed(S), reversed(Y)):
        a = (s @ q) / (y @ s)
        alphas.append(a)
        q -= a * y
    if S:
        q *= (S[-1] @ Y[-1]) / (Y[-1] @ Y[-1])
    else:
        q /= max(np.linalg.norm(g), 1.0)
    for (s, y), a in zip(zip(S, Y), reversed(alphas)):
        b = (y @ q) / (y @ s)
        q += (a - b) * s
    return q


def _initial_values(init, data, model, n) -> np.ndarray:
    if isinstance(init, CalibrationEstimate):
        return init.theta(data.x)
    if init is None:
        from .baselines import fit_const

        init = fit_const(data, model).theta_hat
    init = np.asarray(init, dtype=float)
    if init.ndim == 2 and init.shape == (n, model.q):
        return init
    return np.tile(init.reshape(1, model.q), (n, 1))


def fit(data: PhysicalDataset, model: ComputerModel, kernel: Kernel, lam: float, init=None,
        multistart: int | None = None, max_iter: int = 500, tol: float = 1e-9,
        method: str = "gauss-newton", seed: int = 0, basis: RepresenterBasis | None = None,
        raise_on_nonconvergence: bool = False) -> CalibrationEstimate:
    """Minimise the penalised calibration objective for a fixed ``lam``.

    Parameters
    ----------
    init : None, array or CalibrationEstimate
        ``None`` starts from the constant least-squares calibration; an
        array of length ``q`` is a constant start, an ``(n, q)`` array gives
        anchor values, and an estimate on the same anchors warm-starts.
    multistart : int, optional
        Number of starts.  Defaults to 5 when ``q >= 2`` and ``init`` is
        None, else 1.  Extra starts perturb the initial constant uniformly
        over 20% of the parameter box width.
    method : {"gauss-newton", "lbfgs"}
        Search direction.  Both use step halving (at most 30 times) to keep
        the anchor values inside the parameter box and to force descent.
    """
    if lam < 0:
        raise UsageError("lam must be non-negative")
    if method not in ("gauss-newton", "lbfgs"):
        raise UsageError(f"unknown solver method {method!r}")
    basis = basis or RepresenterBasis(kernel, data.x)
    prob = _Problem(basis, data, model, lam)
    T0 = _initial_values(init, data, model, basis.n)
    if multistart is None:
        multistart = 5 if (model.q >= 2 and init is None) else 1
    starts = [T0]
    if multistart > 1:
        rng = np.random.default_rng([seed, 0x5eed])
        width = np.where(np.isfinite(model.upper - model.lower), model.upper - model.lower,
                         np.abs(T0.mean(axis=0)) + 1.0)
        for _ in range(multistart - 1):
            shift = rng.uniform(-0.1, 0.1, size=model.q) * width
            starts.append(model.clamp(T0 + shift) if model.bounded else T0 + shift)

    best = None
    for T in starts:
        c0 = basis.coords(T)
        if not prob.feasible(c0):
            c0 = basis.coords(model.clamp(T))
            if not prob.feasible(c0):
                continue
        c, f, it, conv, hist = _solve(prob, c0, max_iter, tol, method)
        if best is None or f < best[1]:
            best = (c, f, it, conv, hist)
    if best is None:
        raise InfeasibleError("initial calibration values are outside the parameter box")
    c, f, it, conv, hist = best
    if not conv:
        log.warning("calibration fit did not converge in %d iterations (lam=%g)", max_iter, lam)
        if raise_on_nonconvergence:
            raise ConvergenceError(f"no convergence after {max_iter} iterations")
    coeffs = basis.coefficients(c)
    report = FitReport(f, it, conv, prob.feasible(c), tuple(hist), len(starts), method)
    return CalibrationEstimate(kernel, basis.anchors, coeffs.alpha, coeffs.beta, float(lam), report,
                               basis.values(c))


def predict_at(est: CalibrationEstimate, model: ComputerModel, x, return_flag: bool = False):
    """Plug-in prediction ``y^s(x, theta_hat(x))``.

    Calibration values outside the parameter box are clamped; with
    ``return_flag`` a boolean array marks the clamped rows.
    """
    X = as_points(x, est.anchors.shape[1])
    T = est.theta(X)
    clamped = ~model.feasible(T) if model.bounded else np.zeros(len(T), bool)
    if np.any(clamped):
        log.warning("theta_hat left the parameter box at %d points; clamped", int(clamped.sum()))
        T = model.clamp(T)
    y = model.eval(X, T)
    return (y, clamped) if return_flag else y

