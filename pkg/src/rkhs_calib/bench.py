"""Replication harness, accuracy metrics and cross-validation protocols."""

from __future__ import annotations

import functools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

from .baselines import baseline_ci, fit_const, fit_parametric
from .calibrate import predict_at
from .data import PhysicalDataset
from .emulator import Emulator, as_model, train_emulator
from .errors import CalibError, DataError, UsageError
from .kernel import SobolevCubic
from .model import ComputerModel, builtin, grid, sample_physical
from .select import select_lambda
from .uq import bands_at_levels

log = logging.getLogger(__name__)

__all__ = [
    "METHODS",
    "LEVELS",
    "l2_loss",
    "ci_metrics",
    "FittedMethod",
    "fit_method",
    "emulator_design",
    "benchmark_emulator",
    "MetricsTable",
    "run_setting",
    "loo_cv",
    "mean_shift_align",
]

METHODS = ("const", "param-exp", "param-quad", "rkhs-cubic")
LEVELS = (0.90, 0.95, 0.99)
GRID_SIZE = 200
FAIL_FLAG_RATE = 0.05


def _on_grid(f, G):
    return np.asarray(f(G) if callable(f) else f, dtype=float).reshape(len(G), -1)


def l2_loss(f, g, domain, size: int = GRID_SIZE) -> float:
    """Midpoint-rule ``sqrt(int |f - g|^2)`` over ``domain`` on ``size`` cells.

    ``f`` and ``g`` are callables or arrays already evaluated on the grid;
    vector-valued functions are summed over components.
    """
    G = grid(domain, size)
    dx = (domain[1] - domain[0]) / size
    diff = _on_grid(f, G) - _on_grid(g, G)
    return float(np.sqrt(np.sum(diff * diff) * dx))


def ci_metrics(band, truth, domain=None) -> tuple[float, float, float]:
    """``(width, normalised width, coverage)`` of a band on a midpoint grid.

    ``width`` integrates ``upper - lower`` over the domain; the normalised
    variant divides by the domain length.  ``coverage`` is the fraction of
    the domain where the truth lies strictly inside the band.
    """
    G = np.asarray(band.grid, dtype=float).reshape(len(band.center), -1)[:, 0]
    if domain is None:
        h = G[1] - G[0] if len(G) > 1 else 1.0
        domain = (G[0] - 0.5 * h, G[-1] + 0.5 * h)
    length = domain[1] - domain[0]
    t = _on_grid(truth, G)[:, 0]
    width_norm = float(np.mean(band.upper - band.lower))
    cover = float(np.mean((band.lower < t) & (t < band.upper)))
    return width_norm * length, width_norm, cover


@dataclass
class FittedMethod:
    """A fitted calibration method with a common evaluation interface."""

    name: str
    model: ComputerModel
    fit: object
    identifiable: bool = True

    def theta(self, x) -> np.ndarray:
        if self.name == "rkhs-cubic":
            return self.fit.estimate.theta(np.asarray(x, float).reshape(-1, 1))
        return self.fit.theta(x)

    def predict(self, x) -> np.ndarray:
        x = np.asarray(x, float).reshape(-1)
        if self.name == "rkhs-cubic":
            return predict_at(self.fit.estimate, self.model, x)[:, 0]
        return self.fit.predict(self.model, x)[:, 0]

    def bands(self, G, levels, target: str) -> dict:
        """Bands per level; ``target="theta"`` gives the first component."""
        if self.name == "rkhs-cubic":
            out = bands_at_levels(self.fit.system, self.fit.estimate, self.model, G, levels, target,
                                  identifiable=self.identifiable)
            return {lv: (b[0] if target == "theta" else b) for lv, b in out.items()}
        out = {}
        for lv in levels:
            b = baseline_ci(self.fit, None, self.model, G, lv, target)
            out[lv] = b[0] if target == "theta" else b
        return out


def fit_method(name: str, data: PhysicalDataset, model: ComputerModel, seed: int = 0,
               identifiable: bool = True) -> FittedMethod:
    """Fit one of :data:`METHODS` to ``data``."""
    if name == "const":
        fit = fit_const(data, model)
    elif name in ("param-exp", "param-quad"):
        fit = fit_parametric(data, model, name.split("-")[1])
    elif name == "rkhs-cubic":
        fit = select_lambda(data, model, SobolevCubic(*data.domain), seed=seed)
    else:
        raise UsageError(f"unknown method {name!r}; expected one of {', '.join(METHODS)}")
    return FittedMethod(name, model, fit, identifiable)


def emulator_design(setting_id: int, nx: int = 14, nt: int = 15, seed: int = 0) -> np.ndarray:
    """Training inputs ``(x, theta)`` for a benchmark emulator.

    ``nx`` equally spaced control values times ``nt`` parameter values
    spanning the setting's emulator box: equally spaced for scalar theta,
    a seeded Latin hypercube otherwise.
    """
    model, st = builtin(setting_id)
    lo, hi = (np.asarray(b, float) for b in st.emulator_box)
    xs = np.linspace(st.lower, st.upper, nx)
    if model.q == 1:
        ts = np.linspace(lo[0], hi[0], nt)[:, None]
    else:
        ts = qmc.scale(qmc.LatinHypercube(d=model.q, seed=seed).random(nt), lo, hi)
    return np.column_stack([np.repeat(xs, nt), np.tile(ts, (nx, 1))])


@functools.lru_cache(maxsize=8)
def _cached_emulator(setting_id: int, nx: int, nt: int, seed: int) -> Emulator:
    model, _ = builtin(setting_id)
    Z = emulator_design(setting_id, nx, nt, seed)
    return train_emulator(Z, model.eval(Z[:, :1], Z[:, 1:]), d=1)


def benchmark_emulator(setting_id: int, nx: int = 14, nt: int = 15, seed: int = 0):
    """Emulator of a benchmark model and the surrogate model it defines.

    The surrogate's parameter box is the emulator's training box.
    """
    em = _cached_emulator(setting_id, nx, nt, seed)
    return em, as_model(em, name=f"emulated-sim{setting_id}")


# ---------------------------------------------------------------------------
# replication harness


def _replicate(setting_id: int, methods: tuple, code_mode: str, n: int, seed: int, levels: tuple) -> dict:
    model, st = builtin(setting_id)
    fit_model = model if code_mode == "cc" else benchmark_emulator(setting_id)[1]
    data = sample_physical(st, n, seed)
    G = grid(st, GRID_SIZE)
    out = {}
    for name in methods:
        try:
            fm = fit_method(name, data, fit_model, seed=seed, identifiable=st.identifiable)
            if st.identifiable:
                loss = l2_loss(fm.theta(G)[:, :1], st.theta_star, st.domain)
                truth, target = st.theta_star, "theta"
            else:
                loss = l2_loss(fm.predict(G), st.truth, st.domain)
                truth, target = st.truth, "prediction"
            metrics = {"loss": loss}
            for lv, band in fm.bands(G, levels, target).items():
                metrics[lv] = ci_metrics(band, truth, st.domain)
            out[name] = metrics
        except CalibError as exc:
            out[name] = f"{type(exc).__name__}: {exc}"
        except (ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
            out[name] = f"{type(exc).__name__}: {exc}"
    return out


def _replicate_star(args):
    return _replicate(*args)


def _mean_se(values):
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return float("nan"), float("nan")
    se = float(np.std(v, ddof=1) / math.sqrt(v.size)) if v.size > 1 else float("nan")
    return float(np.mean(v)), se


@dataclass
class MetricsTable:
    """Aggregated benchmark results, one row per ``(setting, code, method)``."""

    rows: list = field(default_factory=list)
    failures: dict = field(default_factory=dict)

    COLUMNS = ("setting", "code", "method", "loss_kind", "reps_ok", "reps_failed", "fail_flag",
               "loss_mean", "loss_se")

    @property
    def columns(self) -> list[str]:
        cols = list(self.COLUMNS)
        levels = sorted({k for r in self.rows for k in r.get("levels", {})})
        for lv in levels:
            tag = f"{lv:.2f}"
            cols += [f"width_{tag}_mean", f"width_{tag}_se", f"width_norm_{tag}_mean", f"width_norm_{tag}_se",
                     f"coverage_{tag}_mean", f"coverage_{tag}_se"]
        return cols

    def row(self, method: str, code: str | None = None) -> dict:
        for r in self.rows:
            if r["method"] == method and (code is None or r["code"] == code):
                return r
        raise KeyError(method)

    def records(self):
        """Flat dictionaries in column order."""
        for r in self.rows:
            flat = {c: r[c] for c in self.COLUMNS}
            for lv, stats in sorted(r["levels"].items()):
                tag = f"{lv:.2f}"
                for key in ("width", "width_norm", "coverage"):
                    flat[f"{key}_{tag}_mean"], flat[f"{key}_{tag}_se"] = stats[key]
            yield flat

    def to_csv(self, path) -> None:
        import csv

        cols = self.columns
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for rec in self.records():
                w.writerow([_fmt(rec.get(c, "")) for c in cols])


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return "nan" if math.isnan(v) else repr(float(v))
    return str(v)


def run_setting(setting: int, methods=METHODS, code_mode: str = "cc", n: int = 50, reps: int = 100,
                seed: int = 0, levels=LEVELS, threads: int = 1) -> MetricsTable:
    """Monte Carlo comparison of calibration methods on a benchmark setting.

    Replication ``i`` draws its data with seed ``seed + i``.  Results are
    reduced in replication order, so the table does not depend on
    ``threads``.  Settings with a unique optimal calibration are scored on
    ``theta``; the others on the prediction of the physical response.
    """
    if reps < 1:
        raise UsageError("reps must be at least 1")
    if code_mode not in ("cc", "ec"):
        raise UsageError(f"code mode must be 'cc' or 'ec', got {code_mode!r}")
    methods = tuple(methods)
    for m in methods:
        if m not in METHODS:
            raise UsageError(f"unknown method {m!r}; expected one of {', '.join(METHODS)}")
    levels = tuple(float(lv) for lv in levels)
    _, st = builtin(setting)
    if code_mode == "ec":
        benchmark_emulator(setting)
    jobs = [(setting, methods, code_mode, n, seed + i, levels) for i in range(reps)]
    if threads > 1 and reps > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_replicate_star, jobs))
    else:
        results = [_replicate_star(j) for j in jobs]

    table = MetricsTable()
    for name in methods:
        ok = [r[name] for r in results if isinstance(r[name], dict)]
        failed = {seed + i: r[name] for i, r in enumerate(results) if not isinstance(r[name], dict)}
        if failed:
            table.failures[name] = failed
            log.warning("%s: %d of %d replications failed", name, len(failed), reps)
        row = {
            "setting": setting,
            "code": code_mode.upper(),
            "method": name,
            "loss_kind": "theta" if st.identifiable else "prediction",
            "reps_ok": len(ok),
            "reps_failed": len(failed),
            "fail_flag": len(failed) > FAIL_FLAG_RATE * reps,
        }
        row["loss_mean"], row["loss_se"] = _mean_se([m["loss"] for m in ok])
        row["levels"] = {}
        for lv in levels:
            triples = np.array([m[lv] for m in ok]).reshape(-1, 3)
            row["levels"][lv] = {key: _mean_se(triples[:, i]) for i, key in
                                 enumerate(("width", "width_norm", "coverage"))}
        table.rows.append(row)
    return table


# ---------------------------------------------------------------------------
# cross-validation


def loo_cv(data: PhysicalDataset, model: ComputerModel, method: str, C: int = 1, reps: int = 100,
           seed: int = 0) -> dict:
    """Leave-``C``-out absolute prediction errors ``|y_i - y_i^cv|``.

    ``C=1`` sweeps every point; ``C=2`` draws ``reps`` random pairs with a
    seeded generator.  Failed folds are recorded and skipped.
    """
    if C not in (1, 2):
        raise UsageError("C must be 1 or 2")
    if data.n <= C:
        raise UsageError(f"need more than {C} points for leave-{C}-out")
    if data.r != 1:
        raise UsageError("cross-validation is implemented for scalar responses")
    if C == 1:
        folds = [np.array([i]) for i in range(data.n)]
    else:
        rng = np.random.default_rng(seed)
        folds = [np.sort(rng.choice(data.n, size=2, replace=False)) for _ in range(reps)]
    apes, failures = [], {}
    for f_idx, held in enumerate(folds):
        keep = np.setdiff1d(np.arange(data.n), held)
        train = data.subset(keep)
        try:
            fm = fit_method(method, train, model, seed=seed)
            pred = fm.predict(data.x[held, 0])
        except CalibError as exc:
            failures[f_idx] = f"{type(exc).__name__}: {exc}"
            continue
        apes.extend(np.abs(data.y[held, 0] - pred).tolist())
    apes = np.asarray(apes)
    mean, se = _mean_se(apes)
    return {"method": method, "C": C, "folds": len(folds), "ape": apes, "mean": mean, "se": se,
            "failures": failures}


def mean_shift_align(physical: PhysicalDataset, sim_x, sim_y):
    """Shift physical responses so both sources share one mean on their common range.

    Returns ``(shifted dataset, shift)``; the shift is added to ``physical.y``.
    """
    sx = np.asarray(sim_x, dtype=float).reshape(-1)
    sy = np.asarray(sim_y, dtype=float).reshape(-1)
    px = physical.x[:, 0]
    lo, hi = max(px.min(), sx.min()), min(px.max(), sx.max())
    if lo > hi:
        raise DataError("physical and simulated inputs do not overlap")
    pin = (px >= lo) & (px <= hi)
    sin = (sx >= lo) & (sx <= hi)
    shift = float(np.mean(sy[sin]) - np.mean(physical.y[pin, 0]))
    return physical.with_responses(physical.y + shift), shift
