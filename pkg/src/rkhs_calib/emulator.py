"""Gaussian-process surrogate for expensive computer models.

Inputs are rescaled to the unit box spanned by the training design and
outputs are centred by their training mean.  The squared-exponential
lengthscales are shared by all responses; each response gets its own
signal variance, profiled out of the marginal likelihood.

The jitter is treated as a microscale nugget: it belongs to the covariance
of a point with itself, so the posterior mean reproduces the training
outputs exactly at the training inputs, while elsewhere it is the smooth
kernel interpolant.  The jump at a training input is ``jitter * weight``.
"""

from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg as sla
from scipy import optimize

from .errors import DataError, NumericError, UsageError
from .model import ComputerModel

log = logging.getLogger(__name__)

__all__ = [
    "Emulator",
    "train_emulator",
    "emulator_predict",
    "emulator_grad",
    "as_model",
    "save_emulator",
    "load_emulator",
]

SCHEMA = "rkhs_calib.emulator/1"
JITTER = 1e-8
_MAX_JITTER = 1e-4
_GRID = np.geomspace(0.05, 5.0, 5)
_LOG_BOUNDS = (np.log(1e-3), np.log(1e2))
_EDGE_SLACK = 1e-9


def _unit_sqdist(A, B, ls):
    A, B = A / ls, B / ls
    sq = np.sum(A * A, 1)[:, None] + np.sum(B * B, 1)[None, :] - 2.0 * A @ B.T
    return np.maximum(sq, 0.0)


def _factor(U, ls, jitter):
    """Cholesky of the correlation matrix, raising the jitter until it succeeds."""
    C = np.exp(-0.5 * _unit_sqdist(U, U, ls))
    eye = np.eye(len(U))
    while True:
        try:
            return sla.cho_factor(C + jitter * eye, lower=True), jitter
        except np.linalg.LinAlgError:
            if jitter >= _MAX_JITTER:
                raise NumericError("emulator covariance is not positive definite at any jitter") from None
            jitter *= 10.0


def _neg_loglik(log_ls, U, Yc, jitter):
    try:
        (L, low), _ = _factor(U, np.exp(log_ls), jitter)
    except NumericError:
        return np.inf
    m = U.shape[0]
    alpha = sla.cho_solve((L, low), Yc)
    s2 = np.maximum(np.sum(Yc * alpha, axis=0) / m, 1e-300)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    return 0.5 * float(m * np.sum(np.log(s2)) + Yc.shape[1] * logdet)


@dataclass(frozen=True, eq=False)
class Emulator:
    """Trained interpolating GP; immutable after construction.

    ``lengthscales`` are in unit-box coordinates, ``variance`` holds one
    signal variance per response.
    """

    inputs: np.ndarray
    outputs: np.ndarray
    d: int
    lower: np.ndarray
    upper: np.ndarray
    lengthscales: np.ndarray
    variance: np.ndarray
    mean: np.ndarray
    jitter: float

    def __post_init__(self):
        U = self._unit(self.inputs)
        chol, jit = _factor(U, self.lengthscales, self.jitter)
        object.__setattr__(self, "jitter", jit)
        object.__setattr__(self, "_U", U)
        Yc = self.outputs - self.mean
        w = sla.cho_solve(chol, Yc)
        C = np.exp(-0.5 * _unit_sqdist(U, U, self.lengthscales))
        w = w + sla.cho_solve(chol, Yc - C @ w - jit * w)  # one refinement step
        object.__setattr__(self, "_weights", w)
        for name in ("inputs", "outputs", "lower", "upper", "lengthscales", "variance", "mean"):
            getattr(self, name).setflags(write=False)

    @property
    def m(self) -> int:
        return self.inputs.shape[0]

    @property
    def q(self) -> int:
        return self.inputs.shape[1] - self.d

    @property
    def r(self) -> int:
        return self.outputs.shape[1]

    @property
    def weights(self) -> np.ndarray:
        return self._weights

    def _unit(self, Z):
        return (Z - self.lower) / (self.upper - self.lower)

    def _stack(self, x, theta):
        x = np.asarray(x, dtype=float)
        t = np.asarray(theta, dtype=float)
        x = x.reshape(-1, self.d) if x.ndim <= 1 else x
        t = t.reshape(-1, self.q) if t.ndim <= 1 else t
        if len(x) == 1 and len(t) > 1:
            x = np.repeat(x, len(t), axis=0)
        if len(t) == 1 and len(x) > 1:
            t = np.repeat(t, len(x), axis=0)
        if len(x) != len(t):
            raise UsageError(f"{len(x)} control points but {len(t)} parameter rows")
        return np.hstack([x, t])

    def outside(self, Z) -> np.ndarray:
        """Rows of ``Z`` outside the training rectangle."""
        span = self.upper - self.lower
        return np.any((Z < self.lower - _EDGE_SLACK * span) | (Z > self.upper + _EDGE_SLACK * span), axis=1)

    def predict(self, x, theta) -> tuple[np.ndarray, np.ndarray]:
        """Posterior means ``(N, r)`` and an extrapolation flag per row."""
        Z = self._stack(x, theta)
        Uz = self._unit(Z)
        sq = _unit_sqdist(Uz, self._U, self.lengthscales)
        y = self.mean + np.exp(-0.5 * sq) @ self._weights
        rows, cols = np.nonzero(sq < 1e-8)
        same = np.all(np.abs(Uz[rows] - self._U[cols]) <= 1e-12, axis=1)
        y[rows[same]] += self.jitter * self._weights[cols[same]]
        return y, self.outside(Z)

    def smooth_residual(self) -> float:
        """Largest gap between the smooth interpolant and the outputs at training inputs."""
        return float(self.jitter * np.max(np.abs(self._weights)))

    def grad(self, x, theta) -> np.ndarray:
        """Derivative of the smooth posterior mean in ``theta``, shape ``(N, r, q)``."""
        Z = self._stack(x, theta)
        Uz = self._unit(Z)
        kst = np.exp(-0.5 * _unit_sqdist(Uz, self._U, self.lengthscales))
        out = np.empty((len(Z), self.r, self.q))
        for j in range(self.q):
            a = self.d + j
            scale = self.lengthscales[a] ** 2 * (self.upper[a] - self.lower[a])
            dk = -kst * (Uz[:, [a]] - self._U[:, a][None, :]) / scale
            out[:, :, j] = dk @ self._weights
        return out

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA,
            "d": self.d,
            "q": self.q,
            "r": self.r,
            "inputs": self.inputs.tolist(),
            "outputs": self.outputs.tolist(),
            "lower": self.lower.tolist(),
            "upper": self.upper.tolist(),
            "lengthscales": self.lengthscales.tolist(),
            "variance": self.variance.tolist(),
            "mean": self.mean.tolist(),
            "jitter": self.jitter,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Emulator":
        if doc.get("schema") != SCHEMA:
            raise DataError(f"unsupported emulator schema {doc.get('schema')!r}; expected {SCHEMA}")
        try:
            arr = {k: np.asarray(doc[k], dtype=float) for k in
                   ("inputs", "outputs", "lower", "upper", "lengthscales", "variance", "mean")}
            return cls(arr["inputs"], arr["outputs"].reshape(len(arr["inputs"]), -1), int(doc["d"]),
                       arr["lower"], arr["upper"], arr["lengthscales"], arr["variance"], arr["mean"],
                       float(doc["jitter"]))
        except (KeyError, ValueError, TypeError) as exc:
            raise DataError(f"malformed emulator document: {exc}") from None


def train_emulator(inputs, outputs, d: int, jitter: float = JITTER, grid=_GRID, refine: bool = True) -> Emulator:
    """Fit an interpolating squared-exponential GP by maximum likelihood.

    Parameters
    ----------
    inputs : (m, d + q) array
        Training rows ``(x, theta)``.
    outputs : (m,) or (m, r) array
    d : int
        Number of leading control-variable columns.
    jitter : float
        Relative nugget on the correlation diagonal; raised tenfold (up to
        ``1e-4``) if the factorisation fails.
    grid : sequence
        Candidate lengthscales (unit-box scale) per input; every
        combination is scored before local refinement with L-BFGS-B.
    """
    Z = np.asarray(inputs, dtype=float)
    Y = np.asarray(outputs, dtype=float)
    if Z.ndim != 2 or Z.shape[0] < 2:
        raise UsageError("need at least two training rows of shape (m, d + q)")
    Y = Y.reshape(Z.shape[0], -1)
    if not 0 < d < Z.shape[1]:
        raise UsageError(f"d={d} leaves no calibration-parameter columns")
    if not (np.all(np.isfinite(Z)) and np.all(np.isfinite(Y))):
        raise DataError("training inputs and outputs must be finite")
    if len(np.unique(Z, axis=0)) < len(Z):
        raise DataError("duplicate training inputs")
    lower, upper = Z.min(axis=0), Z.max(axis=0)
    if np.any(upper <= lower):
        raise DataError("every training input column must vary")
    U = (Z - lower) / (upper - lower)
    mean = Y.mean(axis=0)
    Yc = Y - mean
    dim = Z.shape[1]

    best = None
    for combo in itertools.product(np.log(grid), repeat=dim):
        v = _neg_loglik(np.array(combo), U, Yc, jitter)
        if best is None or v < best[0]:
            best = (v, np.array(combo))
    if best is None or not np.isfinite(best[0]):
        raise NumericError("no lengthscale on the search grid gives a usable covariance")
    log_ls = best[1]
    if refine:
        sol = optimize.minimize(_neg_loglik, log_ls, args=(U, Yc, jitter), method="L-BFGS-B",
                                bounds=[_LOG_BOUNDS] * dim)
        if np.isfinite(sol.fun) and sol.fun <= best[0]:
            log_ls = sol.x
    ls = np.exp(log_ls)
    (L, low), jit = _factor(U, ls, jitter)
    variance = np.sum(Yc * sla.cho_solve((L, low), Yc), axis=0) / len(Z)
    variance = np.maximum(variance, np.finfo(float).tiny)
    em = Emulator(Z, Y, int(d), lower, upper, ls, variance, mean, jit)
    resid = np.max(np.abs(em.predict(Z[:, :d], Z[:, d:])[0] - Y))
    if resid > 1e-6 * max(1.0, float(np.max(np.abs(Y)))):
        log.warning("emulator training residual %.3g exceeds the interpolation tolerance", resid)
    return em


def emulator_predict(em: Emulator, x, theta):
    """Posterior mean at ``(x, theta)`` and whether that point is extrapolated.

    A single point returns ``(r-vector, bool)``; batches return arrays.
    """
    y, flag = em.predict(x, theta)
    if np.any(flag):
        log.warning("emulator queried outside its training rectangle at %d points", int(flag.sum()))
    if len(y) == 1:
        return y[0], bool(flag[0])
    return y, flag


def emulator_grad(em: Emulator, x, theta) -> np.ndarray:
    """``d mean / d theta``: ``(r, q)`` for one point, ``(N, r, q)`` for a batch."""
    g = em.grad(x, theta)
    return g[0] if len(g) == 1 else g


def as_model(em: Emulator, lower=None, upper=None, name: str = "emulator") -> ComputerModel:
    """Wrap an emulator as a :class:`ComputerModel` (default box: the training rectangle)."""
    lo = em.lower[em.d :] if lower is None else lower
    hi = em.upper[em.d :] if upper is None else upper
    return ComputerModel(name, em.d, em.q, em.r, lo, hi,
                         lambda x, t: em.predict(x, t)[0], lambda x, t: em.grad(x, t))


def save_emulator(em: Emulator, path, config: dict | None = None) -> None:
    from .persist import provenance

    doc = em.to_dict()
    doc["provenance"] = provenance(config)
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_emulator(path) -> Emulator:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise DataError(f"no such file: {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: not a JSON document ({exc})") from None
    return Emulator.from_dict(doc)
