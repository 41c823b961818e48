"""Computer models and the four analytic benchmark settings."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .data import PhysicalDataset
from .errors import DomainError, UsageError

FD_STEP = 1e-6
_BOX_SLACK = 1e-12


class ComputerModel:
    """Vectorised simulator ``y^s(x, theta)``.

    ``func(x, t)`` receives ``x`` of shape ``(n, d)`` and ``t`` of shape
    ``(n, q)`` and returns ``(n, r)``.  ``grad_func`` (optional) returns the
    theta-Jacobian with shape ``(n, r, q)``; without it central differences
    with relative step ``1e-6`` are used.
    """

    def __init__(self, name, d, q, r, lower, upper, func, grad_func=None):
        self.name = name
        self.d, self.q, self.r = int(d), int(q), int(r)
        self.lower = np.broadcast_to(np.asarray(lower, float), (self.q,)).copy()
        self.upper = np.broadcast_to(np.asarray(upper, float), (self.q,)).copy()
        self._func = func
        self._grad = grad_func

    def __repr__(self):
        return f"ComputerModel({self.name!r}, d={self.d}, q={self.q}, r={self.r})"

    @property
    def bounded(self) -> bool:
        return bool(np.any(np.isfinite(self.lower)) or np.any(np.isfinite(self.upper)))

    def _prep(self, x, theta):
        x = np.asarray(x, dtype=float)
        if x.ndim <= 1:
            x = x.reshape(-1, 1) if self.d == 1 else x.reshape(1, -1)
        t = np.asarray(theta, dtype=float)
        t = t.reshape(-1, self.q) if t.ndim <= 1 else t
        if t.shape[0] == 1 and x.shape[0] > 1:
            t = np.repeat(t, x.shape[0], axis=0)
        if x.shape[0] == 1 and t.shape[0] > 1:
            x = np.repeat(x, t.shape[0], axis=0)
        return x, t

    def feasible(self, theta) -> np.ndarray:
        """Row-wise membership of ``theta`` in the parameter box."""
        t = np.asarray(theta, dtype=float).reshape(-1, self.q)
        return np.all((t >= self.lower - _BOX_SLACK) & (t <= self.upper + _BOX_SLACK), axis=1)

    def clamp(self, theta) -> np.ndarray:
        return np.clip(theta, self.lower, self.upper)

    def eval(self, x, theta, check: bool = False) -> np.ndarray:
        x, t = self._prep(x, theta)
        if check and not np.all(self.feasible(t)):
            raise DomainError(f"{self.name}: calibration parameter outside the box")
        return np.asarray(self._func(x, t), dtype=float).reshape(x.shape[0], self.r)

    def grad(self, x, theta, check: bool = False) -> np.ndarray:
        x, t = self._prep(x, theta)
        if check and not np.all(self.feasible(t)):
            raise DomainError(f"{self.name}: calibration parameter outside the box")
        if self._grad is not None:
            return np.asarray(self._grad(x, t), dtype=float).reshape(x.shape[0], self.r, self.q)
        return fd_grad(lambda tt: self.eval(x, tt), t, self.r)


def fd_grad(f: Callable, t: np.ndarray, r: int) -> np.ndarray:
    """Row-wise central differences of ``f`` in each column of ``t``."""
    n, q = t.shape
    out = np.empty((n, r, q))
    for j in range(q):
        h = FD_STEP * (1.0 + np.abs(t[:, j]))
        tp, tm = t.copy(), t.copy()
        tp[:, j] += h
        tm[:, j] -= h
        out[:, :, j] = (f(tp) - f(tm)) / (2.0 * h)[:, None]
    return out


def model_grad(model: ComputerModel, x, theta) -> np.ndarray:
    """Jacobian ``d y^s / d theta`` at a single point, shape ``(r, q)``."""
    return model.grad(x, theta, check=True)[0]


def identity_model(lower=-np.inf, upper=np.inf) -> ComputerModel:
    """``y^s(x, theta) = theta`` with scalar theta; calibration is plain smoothing."""
    return ComputerModel(
        "identity", 1, 1, 1, lower, upper,
        lambda x, t: t[:, :1],
        lambda x, t: np.ones((x.shape[0], 1, 1)),
    )


@dataclass(frozen=True)
class BenchmarkSetting:
    """Truth, noise level and emulator design box for one benchmark."""

    id: int
    lower: float
    upper: float
    sigma: float
    truth: Callable
    theta_star: Optional[Callable]
    witnesses: tuple = field(default=())
    emulator_box: tuple = field(default=())

    @property
    def identifiable(self) -> bool:
        return self.theta_star is not None

    @property
    def domain(self) -> tuple[float, float]:
        return self.lower, self.upper


def _s1_eval(x, t):
    x = x[:, 0]
    return (0.5 * np.exp(x / 10) * np.cos(x) * np.exp(x / 5) / t[:, 0])[:, None]


def _s1_grad(x, t):
    return (-_s1_eval(x, t)[:, 0] / t[:, 0]).reshape(-1, 1, 1)


def _s2_base(x):
    return np.cos(2 * x) * np.sin(x / 2)


def _s2_eval(x, t):
    x = x[:, 0]
    c = 0.5 * (x - 2) ** 2 + 0.5
    return (_s2_base(x) * np.exp(3 * t[:, 0] / c - 3))[:, None]


def _s2_grad(x, t):
    c = 0.5 * (x[:, 0] - 2) ** 2 + 0.5
    return (_s2_eval(x, t)[:, 0] * 3 / c).reshape(-1, 1, 1)


def _s3_eval(x, t):
    x = x[:, 0]
    return (t[:, 0] * x + t[:, 1] * x * x)[:, None]


def _s3_grad(x, t):
    x = x[:, 0]
    return np.stack([x, x * x], axis=1)[:, None, :]


def _s4_eval(x, t):
    x = x[:, 0]
    return (t[:, 0] * x ** t[:, 1])[:, None]


def _s4_grad(x, t):
    x = x[:, 0]
    p = x ** t[:, 1]
    return np.stack([p, t[:, 0] * p * np.log(x)], axis=1)[:, None, :]


def builtin(setting_id: int) -> tuple[ComputerModel, BenchmarkSetting]:
    """Analytic computer model and benchmark definition for settings 1-4."""
    pi = math.pi
    if setting_id == 1:
        model = ComputerModel("sim1", 1, 1, 1, pi / 5, 6 * pi / 5, _s1_eval, _s1_grad)
        setting = BenchmarkSetting(
            1, pi, 3 * pi, 0.1,
            truth=lambda x: np.exp(np.asarray(x) / 10) * np.cos(x),
            theta_star=lambda x: 0.5 * np.exp(np.asarray(x) / 5),
            emulator_box=((pi / 5,), (6 * pi / 5,)),
        )
    elif setting_id == 2:
        model = ComputerModel("sim2", 1, 1, 1, pi / 9, pi / 2, _s2_eval, _s2_grad)
        setting = BenchmarkSetting(
            2, pi / 2, pi, 0.1,
            truth=_s2_base,
            theta_star=lambda x: 0.5 * (np.asarray(x) - 2) ** 2 + 0.5,
            emulator_box=((pi / 9,), (pi / 2,)),
        )
    elif setting_id == 3:
        model = ComputerModel("sim3", 1, 2, 1, -10.0, 10.0, _s3_eval, _s3_grad)
        setting = BenchmarkSetting(
            3, 1.0, 2.0, 0.2,
            truth=lambda x: 1 + np.asarray(x) ** 3,
            theta_star=None,
            witnesses=(
                lambda x: np.column_stack([1 / np.asarray(x), np.asarray(x)]),
                lambda x: np.column_stack([np.asarray(x) ** 2, 1 / np.asarray(x) ** 2]),
            ),
            emulator_box=((-4.0, 0.0), (2.0, 4.0)),
        )
    elif setting_id == 4:
        model = ComputerModel("sim4", 1, 2, 1, -10.0, 10.0, _s4_eval, _s4_grad)
        setting = BenchmarkSetting(
            4, 1.0, 2.0, 0.2,
            truth=lambda x: np.asarray(x) ** 3,
            theta_star=None,
            witnesses=(
                lambda x: np.column_stack([np.ones_like(np.asarray(x, float)), np.full(np.shape(x), 3.0)]),
                lambda x: np.column_stack([np.asarray(x), np.full(np.shape(x), 2.0)]),
                lambda x: np.column_stack([np.asarray(x) ** 2, np.full(np.shape(x), 1.0)]),
            ),
            emulator_box=((0.0, 0.5), (4.0, 4.0)),
        )
    else:
        raise UsageError(f"unknown benchmark setting {setting_id!r}; expected 1-4")
    return model, setting


def builtin_by_name(name: str) -> tuple[ComputerModel, BenchmarkSetting]:
    if not (name.startswith("sim") and name[3:].isdigit()):
        raise UsageError(f"unknown builtin model {name!r}; expected sim1..sim4")
    try:
        return builtin(int(name[3:]))
    except UsageError:
        raise UsageError(f"unknown builtin model {name!r}; expected sim1..sim4") from None


def sample_physical(setting: BenchmarkSetting, n: int, seed: int) -> PhysicalDataset:
    """Uniform design on the domain plus Gaussian noise of level ``sigma``."""
    if n < 1:
        raise UsageError("n must be at least 1")
    rng = np.random.default_rng(seed)
    x = rng.uniform(setting.lower, setting.upper, size=n)
    y = setting.truth(x) + setting.sigma * rng.standard_normal(n)
    return PhysicalDataset(x, y, [setting.lower], [setting.upper])


def grid(setting_or_domain, size: int = 200) -> np.ndarray:
    """Midpoints of ``size`` equal cells covering the domain."""
    lo, hi = setting_or_domain.domain if hasattr(setting_or_domain, "domain") else setting_or_domain
    h = (hi - lo) / size
    return lo + h * (np.arange(size) + 0.5)
