"""Kernels, gram matrices and null-space bases.

Three kernel families are provided:

* :class:`Matern` -- the Matérn family parameterised by smoothness ``nu`` and
  scale ``phi``, normalised to one at zero distance.
* :class:`SobolevCubic` -- the reproducing kernel of the second-order Sobolev
  space on the unit interval built from Bernoulli polynomials.  Penalised
  fits with this kernel are cubic smoothing splines.  User domains ``[a, b]``
  are mapped affinely onto ``[0, 1]``.
* :class:`SquaredExponential` -- anisotropic Gaussian kernel used by the
  emulator.

Points are passed either as 1-D arrays (one-dimensional inputs) or as
``(n, d)`` arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .errors import DomainError, ParameterError

__all__ = [
    "Kernel",
    "Matern",
    "SobolevCubic",
    "SquaredExponential",
    "NullBasis",
    "kernel_eval",
    "gram",
    "null_design",
    "parse_kernel",
    "bernoulli2",
    "bernoulli4",
]

_DOMAIN_SLACK = 1e-10


def as_points(pts, dim: int | None = None) -> np.ndarray:
    """Coerce ``pts`` to a 2-D float array of shape ``(n, d)``."""
    arr = np.asarray(pts, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, 1) if dim in (None, 1) else arr.reshape(1, -1)
    if dim is not None and arr.shape[1] != dim:
        raise DomainError(f"expected points of dimension {dim}, got {arr.shape[1]}")
    return arr


def bernoulli2(x):
    return x * x - x + 1.0 / 6.0


def bernoulli4(x):
    x2 = x * x
    return x2 * x2 - 2.0 * x2 * x + x2 - 1.0 / 30.0


def _pairwise_dist(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    diff = X[:, None, :] - Y[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


@dataclass(frozen=True)
class NullBasis:
    """Basis of the kernel's null space, evaluated on user-domain points.

    ``kind`` is ``"constant"`` (the single function 1) or ``"linear"``
    (``1`` and ``u(x) - 1/2`` where ``u`` rescales ``[lower, upper]`` to
    ``[0, 1]``).
    """

    kind: str
    lower: float = 0.0
    upper: float = 1.0

    @property
    def dim(self) -> int:
        return 1 if self.kind == "constant" else 2

    def design(self, pts) -> np.ndarray:
        X = as_points(pts)
        n = X.shape[0]
        if self.kind == "constant":
            return np.ones((n, 1))
        u = (X[:, 0] - self.lower) / (self.upper - self.lower)
        return np.column_stack([np.ones(n), u - 0.5])


class Kernel:
    """Common interface: ``k(s, t)`` for scalars, ``matrix(X, Y)`` for blocks."""

    dim: int | None = None

    def matrix(self, X, Y) -> np.ndarray:  # pragma: no cover - abstract
        raise NotImplementedError

    def null_basis(self) -> NullBasis:
        return NullBasis("constant")

    @property
    def spec(self) -> str:  # pragma: no cover - abstract
        raise NotImplementedError

    def __call__(self, s, t) -> float:
        s = np.atleast_1d(np.asarray(s, dtype=float)).reshape(1, -1)
        t = np.atleast_1d(np.asarray(t, dtype=float)).reshape(1, -1)
        return float(self.matrix(s, t)[0, 0])

    def diag(self, X) -> np.ndarray:
        X = as_points(X, self.dim)
        return np.array([self.matrix(X[i : i + 1], X[i : i + 1])[0, 0] for i in range(len(X))])


@dataclass(frozen=True)
class Matern(Kernel):
    """Matérn kernel ``Gamma(nu)^-1 2^(1-nu) z^nu K_nu(z)``, ``z = 2 sqrt(nu) phi r``."""

    nu: float
    phi: float

    def __post_init__(self):
        if not (self.nu > 0 and self.phi > 0):
            raise ParameterError(f"Matern parameters must be positive (nu={self.nu}, phi={self.phi})")

    @property
    def spec(self) -> str:
        return f"matern:{self.nu!r}:{self.phi!r}"

    def scaled_distance(self, r):
        return 2.0 * math.sqrt(self.nu) * self.phi * np.asarray(r, dtype=float)

    def from_distance(self, r, closed_form: bool = True) -> np.ndarray:
        z = self.scaled_distance(r)
        nu = self.nu
        if closed_form and nu == 0.5:
            return np.exp(-z)
        if closed_form and nu == 1.5:
            return (1.0 + z) * np.exp(-z)
        if closed_form and nu == 2.5:
            return (1.0 + z + z * z / 3.0) * np.exp(-z)
        return _matern_bessel(z, nu)

    def matrix(self, X, Y) -> np.ndarray:
        X = as_points(X)
        Y = as_points(Y, X.shape[1])
        return self.from_distance(_pairwise_dist(X, Y))

    def diag(self, X) -> np.ndarray:
        return np.ones(as_points(X).shape[0])


def _matern_bessel(z, nu: float) -> np.ndarray:
    z = np.atleast_1d(np.asarray(z, dtype=float))
    out = np.ones_like(z)
    pos = z > 0
    zp = z[pos]
    # log-space prefactor keeps large nu finite
    logc = (1.0 - nu) * math.log(2.0) - special.gammaln(nu)
    with np.errstate(under="ignore"):
        out[pos] = np.exp(logc + nu * np.log(zp)) * special.kv(nu, zp)
    out[pos & ~np.isfinite(out)] = 0.0
    return out.reshape(np.shape(z)) if np.ndim(z) else out


@dataclass(frozen=True)
class SobolevCubic(Kernel):
    """Cubic-spline reproducing kernel on ``[lower, upper]``.

    On the unit interval ``k(x, y) = B2(x) B2(y) / 4 - B4(|x - y|) / 24`` with
    ``Bm`` the Bernoulli polynomials.  Its null space is spanned by ``1`` and
    ``u - 1/2``.
    """

    lower: float = 0.0
    upper: float = 1.0
    dim = 1

    def __post_init__(self):
        if not (self.upper > self.lower):
            raise ParameterError(f"empty domain [{self.lower}, {self.upper}]")

    @property
    def spec(self) -> str:
        return "cubic"

    def rescale(self, x) -> np.ndarray:
        u = (np.asarray(x, dtype=float) - self.lower) / (self.upper - self.lower)
        if np.any(u < -_DOMAIN_SLACK) or np.any(u > 1.0 + _DOMAIN_SLACK):
            raise DomainError(f"point outside [{self.lower}, {self.upper}]")
        return np.clip(u, 0.0, 1.0)

    def matrix(self, X, Y) -> np.ndarray:
        u = self.rescale(as_points(X, 1)[:, 0])
        v = self.rescale(as_points(Y, 1)[:, 0])
        d = np.abs(u[:, None] - v[None, :])
        return 0.25 * np.outer(bernoulli2(u), bernoulli2(v)) - bernoulli4(d) / 24.0

    def diag(self, X) -> np.ndarray:
        u = self.rescale(as_points(X, 1)[:, 0])
        return 0.25 * bernoulli2(u) ** 2 + 1.0 / 720.0

    def null_basis(self) -> NullBasis:
        return NullBasis("linear", self.lower, self.upper)


@dataclass(frozen=True)
class SquaredExponential(Kernel):
    """``variance * exp(-0.5 * sum(((s - t) / lengthscale)**2))``."""

    lengthscales: tuple = field(default=(1.0,))
    variance: float = 1.0

    @property
    def dim(self) -> int:
        return len(self.lengthscales)

    def __post_init__(self):
        ls = tuple(float(v) for v in np.atleast_1d(self.lengthscales))
        object.__setattr__(self, "lengthscales", ls)
        if not (all(v > 0 for v in ls) and self.variance > 0):
            raise ParameterError("squared-exponential lengthscales and variance must be positive")

    @property
    def spec(self) -> str:
        return "sqexp:" + ",".join(repr(v) for v in self.lengthscales) + f":{self.variance!r}"

    def matrix(self, X, Y) -> np.ndarray:
        ls = np.asarray(self.lengthscales)
        X = as_points(X, len(ls)) / ls
        Y = as_points(Y, len(ls)) / ls
        sq = np.sum(X * X, 1)[:, None] + np.sum(Y * Y, 1)[None, :] - 2.0 * X @ Y.T
        return self.variance * np.exp(-0.5 * np.maximum(sq, 0.0))

    def diag(self, X) -> np.ndarray:
        return np.full(as_points(X, len(self.lengthscales)).shape[0], self.variance)


def kernel_eval(kernel: Kernel, s, t) -> float:
    """Evaluate ``kernel(s, t)``."""
    return kernel(s, t)


def gram(kernel: Kernel, pts, jitter: float = 0.0) -> np.ndarray:
    """Symmetric gram matrix ``(k(p_i, p_j))``.

    ``jitter`` adds ``jitter * mean(diag)`` to the diagonal.
    """
    X = as_points(pts, kernel.dim)
    K = kernel.matrix(X, X)
    K = 0.5 * (K + K.T)
    if jitter:
        K[np.diag_indices_from(K)] += jitter * np.mean(np.diag(K))
    return K


def null_design(basis: NullBasis, pts) -> np.ndarray:
    """Matrix ``V`` with ``V[i, s] = v_s(p_i)``."""
    X = np.asarray(pts, dtype=float)
    if X.size == 0:
        return np.zeros((0, basis.dim))
    return basis.design(X)


def parse_kernel(spec: str, domain: tuple[float, float] | None = None) -> Kernel:
    """Parse ``matern:<nu>:<phi>``, ``cubic`` or ``sqexp:<l1,...>:<var>``.

    ``domain`` sets the rescaling interval for ``cubic``.
    """
    parts = spec.strip().split(":")
    name = parts[0].lower()
    try:
        if name == "cubic" and len(parts) == 1:
            lo, hi = domain if domain is not None else (0.0, 1.0)
            return SobolevCubic(float(lo), float(hi))
        if name == "matern" and len(parts) == 3:
            return Matern(float(parts[1]), float(parts[2]))
        if name == "sqexp" and len(parts) == 3:
            ls = tuple(float(v) for v in parts[1].split(","))
            return SquaredExponential(ls, float(parts[2]))
    except ValueError as exc:
        raise ParameterError(f"malformed kernel spec {spec!r}: {exc}") from None
    raise ParameterError(f"malformed kernel spec {spec!r}")
