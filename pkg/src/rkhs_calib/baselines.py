"""Constant and parametric calibration comparators with Wald bands."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .data import PhysicalDataset
from .errors import CalibError, InfeasibleError, NumericError, UsageError
from .model import ComputerModel
from .uq import ConfidenceBand, z_quantile

__all__ = ["ParametricFamily", "BaselineFit", "fit_const", "fit_parametric", "baseline_ci", "FAMILIES"]


@dataclass(frozen=True)
class ParametricFamily:
    """``exp``: ``g0 * exp(g1 x)``; ``quad``: ``g0 + g1 x + g2 x^2``; ``const``: ``g0``."""

    tag: str

    @property
    def size(self) -> int:
        return {"const": 1, "exp": 2, "quad": 3}[self.tag]

    def value(self, x, g):
        x = np.asarray(x, dtype=float)
        if self.tag == "const":
            return np.full(x.shape, g[0])
        if self.tag == "exp":
            return g[0] * np.exp(g[1] * x)
        return g[0] + g[1] * x + g[2] * x * x

    def jac(self, x, g):
        """Derivatives in ``g``; shape ``(len(x), size)``."""
        x = np.asarray(x, dtype=float)
        if self.tag == "const":
            return np.ones((x.size, 1))
        if self.tag == "exp":
            e = np.exp(g[1] * x)
            return np.column_stack([e, g[0] * x * e])
        return np.column_stack([np.ones_like(x), x, x * x])


FAMILIES = {
    "const": ParametricFamily("const"),
    "exp": ParametricFamily("exp"),
    "quad": ParametricFamily("quad"),
}


@dataclass(frozen=True)
class BaselineFit:
    """Fitted rigid calibration ``theta_j(x) = f(x; gamma_j)``."""

    family: ParametricFamily
    gamma: np.ndarray  # q x size
    rss: float
    dof: int
    jacobian: np.ndarray  # (n r) x (q size), of the model residuals
    converged: bool = True

    @property
    def q(self) -> int:
        return self.gamma.shape[0]

    @property
    def theta_hat(self) -> np.ndarray:
        """Constant calibration value (only for the ``const`` family)."""
        if self.family.tag != "const":
            raise UsageError("theta_hat is defined for constant fits only")
        return self.gamma[:, 0].copy()

    @property
    def sigma2(self) -> float:
        return self.rss / self.dof if self.dof > 0 else float("nan")

    def theta(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1)
        return np.column_stack([self.family.value(x, g) for g in self.gamma])

    def theta_jac(self, x) -> np.ndarray:
        """``d theta / d gamma`` as ``(m, q, q * size)``."""
        x = np.asarray(x, dtype=float).reshape(-1)
        p = self.family.size
        out = np.zeros((x.size, self.q, self.q * p))
        for j, g in enumerate(self.gamma):
            out[:, j, j * p : (j + 1) * p] = self.family.jac(x, g)
        return out

    def covariance(self, generalized: bool = False) -> np.ndarray:
        """Wald covariance ``sigma2 * (J^T J)^-1`` of the flattened ``gamma``.

        With ``generalized`` a rank-deficient information matrix is allowed
        and its pseudo-inverse used; the result is then meaningful only for
        estimable functions of ``gamma`` such as fitted responses.
        """
        JtJ = self.jacobian.T @ self.jacobian
        if not np.all(np.isfinite(JtJ)):
            raise NumericError("Gauss-Newton information matrix is not finite")
        if np.linalg.cond(JtJ) <= 1e14:
            return self.sigma2 * np.linalg.inv(JtJ)
        if not generalized:
            raise NumericError("Gauss-Newton information matrix is singular")
        rank = np.linalg.matrix_rank(self.jacobian)
        s2 = self.rss / (self.jacobian.shape[0] - rank) if self.jacobian.shape[0] > rank else float("nan")
        return s2 * np.linalg.pinv(JtJ, rcond=1e-10, hermitian=True)

    def predict(self, model: ComputerModel, x) -> np.ndarray:
        return model.eval(x, self.theta(x))


def _residuals(family, data, model, q):
    x = data.x[:, 0]
    p = family.size

    def theta(flat):
        return np.column_stack([family.value(x, flat[j * p : (j + 1) * p]) for j in range(q)])

    def res(flat):
        return (data.y - model.eval(data.x, theta(flat))).T.ravel()

    def jac(flat):
        T = theta(flat)
        G = model.grad(data.x, T)  # n r q
        J = np.zeros((data.n * model.r, q * p))
        for j in range(q):
            dth = family.jac(x, flat[j * p : (j + 1) * p])  # n p
            for rr in range(model.r):
                J[rr * data.n : (rr + 1) * data.n, j * p : (j + 1) * p] = -G[:, rr, j][:, None] * dth
        return J

    return res, jac


def _best_of(starts, res, jac, bounds=(-np.inf, np.inf)):
    best = None
    for s in starts:
        try:
            with np.errstate(all="ignore"):
                sol = optimize.least_squares(res, s, jac=jac, bounds=bounds, method="trf", x_scale="jac",
                                             xtol=1e-12, ftol=1e-12, gtol=1e-12, max_nfev=2000)
        except (ValueError, np.linalg.LinAlgError, CalibError):
            continue
        cost = 2.0 * sol.cost
        if np.isfinite(cost) and (best is None or cost < best[1]):
            best = (sol, cost)
    return best


def _lattice(model: ComputerModel) -> list[np.ndarray]:
    axes = []
    for lo, hi in zip(model.lower, model.upper):
        if np.isfinite(lo) and np.isfinite(hi):
            axes.append(lo + (hi - lo) * np.array([0.25, 0.5, 0.75]))
        else:
            axes.append(np.array([-1.0, 0.0, 1.0]))
    return [np.array(p) for p in itertools.product(*axes)]


def _finish(family, sol, cost, data, model, jac) -> BaselineFit:
    q = model.q
    gamma = sol.x.reshape(q, family.size)
    dof = data.n * model.r - q * family.size
    return BaselineFit(family, gamma, float(cost), dof, jac(sol.x), bool(sol.success))


def fit_const(data: PhysicalDataset, model: ComputerModel) -> BaselineFit:
    """Least-squares constant calibration over the parameter box.

    Multistart from a ``3^q`` lattice of interior box points.
    """
    fam = FAMILIES["const"]
    res, jac = _residuals(fam, data, model, model.q)
    bounds = (model.lower, model.upper) if model.bounded else (-np.inf, np.inf)
    best = _best_of(_lattice(model), res, jac, bounds)
    if best is None:
        raise InfeasibleError("constant calibration failed from every start")
    return _finish(fam, *best, data, model, jac)


def fit_parametric(data: PhysicalDataset, model: ComputerModel, family: ParametricFamily | str) -> BaselineFit:
    """Least-squares fit of a rigid calibration family, one per component.

    Starts from the constant fit with zero, positive and negative trend
    coefficients in each component.
    """
    family = FAMILIES[family] if isinstance(family, str) else family
    if data.d != 1:
        raise UsageError("parametric calibration families are defined for scalar x")
    q, p = model.q, family.size
    c0 = fit_const(data, model).theta_hat
    x = data.x[:, 0]
    span = float(x.max() - x.min()) or 1.0
    xm = float(np.mean(x))
    per_comp = []
    for j in range(q):
        base = c0[j]
        opts = []
        for slope in (0.0, 1.0 / span, -1.0 / span):
            if family.tag == "exp":
                g0 = base if base != 0 else 1e-3
                opts.append(np.array([g0 * np.exp(-slope * xm), slope]))
            elif family.tag == "quad":
                s = slope * (abs(base) + 1.0)
                opts.append(np.array([base - s * xm, s, 0.0]))
            else:
                opts.append(np.array([base]))
        per_comp.append(opts)
    starts = [np.concatenate(combo) for combo in itertools.product(*per_comp)]
    res, jac = _residuals(family, data, model, q)
    best = _best_of(starts, res, jac)
    if best is None:
        raise CalibError(f"{family.tag} calibration diverged from every start")
    return _finish(family, *best, data, model, jac)


def baseline_ci(fit: BaselineFit, data: PhysicalDataset, model: ComputerModel, grid, level: float = 0.9,
                target: str = "theta"):
    """Wald bands propagated through the family (and the model for predictions).

    ``target="theta"`` returns one band per component; ``"prediction"``
    returns a single band for ``y^s(x, theta_hat(x))``.  Prediction bands
    tolerate a rank-deficient Jacobian (non-identified ``gamma``) through a
    generalised inverse.
    """
    z = z_quantile(level)
    cov = fit.covariance(generalized=target == "prediction")
    G = np.asarray(grid, dtype=float).reshape(-1)
    Jt = fit.theta_jac(G)
    centers = fit.theta(G)
    if target == "theta":
        bands = []
        for j in range(fit.q):
            sd = np.sqrt(np.maximum(np.einsum("mp,pk,mk->m", Jt[:, j], cov, Jt[:, j]), 0.0))
            c = centers[:, j]
            bands.append(ConfidenceBand(G, c, c - z * sd, c + z * sd, level, f"theta{j + 1}", fit.sigma2))
        return bands
    if target != "prediction":
        raise UsageError(f"unknown band target {target!r}")
    gy = model.grad(G, centers)[:, 0, :]  # m x q
    dy = np.einsum("mq,mqp->mp", gy, Jt)
    sd = np.sqrt(np.maximum(np.einsum("mp,pk,mk->m", dy, cov, dy), 0.0))
    c = model.eval(G, centers)[:, 0]
    return ConfidenceBand(G, c, c - z * sd, c + z * sd, level, "prediction", fit.sigma2)
