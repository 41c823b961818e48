"""Command-line front end (``rkhs-calib``)."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .bench import LEVELS, METHODS, fit_method, loo_cv, run_setting
from .calibrate import fit, predict_at
from .data import PhysicalDataset, read_physical, read_runs, read_table
from .emulator import as_model, load_emulator, save_emulator, train_emulator
from .errors import CalibError, DataError, UsageError
from .kernel import parse_kernel
from .model import ComputerModel, builtin_by_name, identity_model
from .persist import load_estimate, provenance, save_estimate, write_csv
from .select import default_grid, linearize, select_lambda
from .uq import bands_at_levels

log = logging.getLogger("rkhs_calib")

COMMANDS = ("calibrate", "gcv-scan", "predict", "uq", "simulate", "emulate", "cv")
_NOT_RECORDED = {"threads", "verbose"}


@dataclass
class RunConfig:
    """Validated invocation: a subcommand and its options."""

    command: str
    options: dict = field(default_factory=dict)

    def __getattr__(self, name):
        try:
            return self.options[name]
        except KeyError:
            raise AttributeError(name) from None

    def recorded(self) -> dict:
        """Options embedded in artifacts (everything that affects results)."""
        return {"command": self.command,
                **{k: v for k, v in self.options.items() if k not in _NOT_RECORDED}}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _lambda(text: str):
    if text == "gcv":
        return text
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'gcv' or a number, got {text!r}") from None
    if value < 0:
        raise argparse.ArgumentTypeError("lambda must be non-negative")
    return value


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError("expected a positive integer")
    return v


def _add_model(p, required=True):
    g = p.add_argument_group("computer model (one of)")
    g.add_argument("--model", help="builtin model: sim1..sim4 or identity")
    g.add_argument("--emulator", help="emulator JSON written by 'emulate'")
    g.add_argument("--runs", help="computer-run CSV (x..,t..,y..); an emulator is trained on it")
    p.add_argument("--theta-lower", type=_floats, help="parameter box lower corner (comma list)")
    p.add_argument("--theta-upper", type=_floats, help="parameter box upper corner (comma list)")
    p.add_argument("--domain", type=_floats, help="control-variable interval lo,hi (default: data range)")
    p.set_defaults(_model_required=required)


def _add_fit(p):
    p.add_argument("--kernel", default="cubic", help="cubic | matern:<nu>:<phi> | sqexp:<l1,..>:<var>")
    p.add_argument("--lambda", dest="lam", type=_lambda, default="gcv", help="penalty value or 'gcv'")
    p.add_argument("--lambda-grid", type=_floats, default=None, help="low,high,size of the log grid")
    p.add_argument("--criterion", choices=("working", "stacked"), default="working")
    p.add_argument("--solver", choices=("gauss-newton", "lbfgs"), default="gauss-newton")
    p.add_argument("--max-iter", type=_positive_int, default=500)
    p.add_argument("--tol", type=float, default=1e-9)
    p.add_argument("--multistart", type=_positive_int, default=None)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    root = _Parser(prog="rkhs-calib", description="Functional calibration of computer models.")
    root.add_argument("--version", action="version", version=f"rkhs-calib {__version__}")
    root.add_argument("-v", "--verbose", action="store_true")
    sub = root.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("calibrate", help="fit a calibration function")
    p.add_argument("--physical", required=True, help="physical-data CSV (x..,y..)")
    _add_model(p)
    _add_fit(p)
    p.add_argument("--method", choices=METHODS, default="rkhs-cubic")
    p.add_argument("--out", required=True, help="estimate JSON")
    p.add_argument("--curve-out", help="GCV curve CSV (with --lambda gcv)")

    p = sub.add_parser("gcv-scan", help="GCV score along a penalty grid")
    p.add_argument("--physical", required=True)
    _add_model(p)
    _add_fit(p)
    p.add_argument("--out", required=True, help="curve CSV: lambda,gcv,edf,sigma2")

    p = sub.add_parser("predict", help="evaluate a fitted calibration and the plug-in prediction")
    p.add_argument("--estimate", required=True)
    _add_model(p)
    p.add_argument("--x", type=_floats, help="evaluation points (comma list)")
    p.add_argument("--points", help="CSV with x1,... columns")
    p.add_argument("--grid-size", type=_positive_int, default=200, help="midpoint grid over --domain")
    p.add_argument("--out", required=True)

    p = sub.add_parser("uq", help="pointwise confidence bands")
    p.add_argument("--physical", required=True)
    p.add_argument("--estimate", required=True)
    _add_model(p)
    p.add_argument("--level", type=_floats, default=[0.9])
    p.add_argument("--target", choices=("theta", "prediction"), default="theta")
    p.add_argument("--rho", type=float, default=None)
    p.add_argument("--grid-size", type=_positive_int, default=200)
    p.add_argument("--out", required=True, help="bands CSV: x,target,center,lower,upper,level")

    p = sub.add_parser("simulate", help="benchmark replications")
    p.add_argument("--setting", type=int, choices=(1, 2, 3, 4), required=True)
    p.add_argument("--methods", default=",".join(METHODS))
    p.add_argument("--code", choices=("cc", "ec"), default="cc")
    p.add_argument("--n", type=_positive_int, default=50)
    p.add_argument("--reps", type=_positive_int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--level", type=_floats, default=list(LEVELS))
    p.add_argument("--threads", type=_positive_int, default=None)
    p.add_argument("--out", help="table CSV (default: setting<N>_<code>_seed<S>.csv)")

    p = sub.add_parser("emulate", help="train a GP emulator on computer runs")
    p.add_argument("--runs", required=True)
    p.add_argument("--jitter", type=float, default=1e-8)
    p.add_argument("--out", required=True)

    p = sub.add_parser("cv", help="leave-one/two-out prediction errors")
    p.add_argument("--physical", required=True)
    _add_model(p)
    p.add_argument("--method", choices=METHODS, default="rkhs-cubic")
    p.add_argument("--C", dest="C", type=int, choices=(1, 2), default=1)
    p.add_argument("--reps", type=_positive_int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="CSV of absolute prediction errors")
    return root


def _env_threads() -> int:
    raw = os.environ.get("RKHS_CALIB_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        v = int(raw)
    except ValueError:
        raise UsageError(f"RKHS_CALIB_THREADS must be a positive integer, got {raw!r}") from None
    if v < 1:
        raise UsageError("RKHS_CALIB_THREADS must be a positive integer")
    return v


def parse_config(argv=None) -> RunConfig:
    """Parse and validate command-line arguments.

    Every violated cross-flag constraint is reported in one usage error.
    """
    ns = build_parser().parse_args(argv)
    opts = {k: v for k, v in vars(ns).items() if not k.startswith("_") and k != "command"}
    problems = []
    if "model" in opts:
        chosen = [k for k in ("model", "emulator", "runs") if opts.get(k)]
        if getattr(ns, "_model_required", False) and len(chosen) != 1:
            problems.append("exactly one of --model, --emulator, --runs is required")
        if opts.get("model") and opts["model"] != "identity":
            try:
                builtin_by_name(opts["model"])
            except UsageError as exc:
                problems.append(str(exc))
    if opts.get("domain") is not None and (len(opts["domain"]) != 2 or opts["domain"][0] >= opts["domain"][1]):
        problems.append("--domain needs two increasing numbers lo,hi")
    grid = opts.get("lambda_grid")
    if grid is not None and (len(grid) != 3 or grid[0] <= 0 or grid[1] <= grid[0] or grid[2] < 1):
        problems.append("--lambda-grid needs low,high,size with 0 < low < high and size >= 1")
    for lv in opts.get("level") or []:
        if not 0 < lv < 1:
            problems.append(f"--level values must lie in (0, 1), got {lv}")
    if ns.command == "predict" and opts.get("x") is not None and opts.get("points"):
        problems.append("--x and --points are mutually exclusive")
    if ns.command == "simulate":
        bad = [m for m in opts["methods"].split(",") if m not in METHODS]
        if bad:
            problems.append(f"unknown methods {','.join(bad)}; choose from {','.join(METHODS)}")
        if opts.get("threads") is None:
            opts["threads"] = _env_threads()
        if opts.get("out") is None:
            opts["out"] = f"setting{opts['setting']}_{opts['code']}_seed{opts['seed']}.csv"
    if ns.command == "calibrate" and opts.get("curve_out") and opts.get("lam") != "gcv":
        problems.append("--curve-out requires --lambda gcv")
    if problems:
        raise UsageError("; ".join(problems))
    for key in ("physical", "estimate", "emulator", "runs", "points"):
        path = opts.get(key)
        if path and not Path(path).exists():
            raise DataError(f"--{key}: no such file: {path}")
    return RunConfig(ns.command, opts)


# ---------------------------------------------------------------------------
# helpers


def _box(cfg: RunConfig, q: int, default_lo, default_hi):
    lo = cfg.options.get("theta_lower")
    hi = cfg.options.get("theta_upper")
    lo = np.asarray(default_lo if lo is None else lo, float)
    hi = np.asarray(default_hi if hi is None else hi, float)
    if lo.size not in (1, q) or hi.size not in (1, q) or np.any(np.broadcast_to(lo, q) >= np.broadcast_to(hi, q)):
        raise UsageError(f"parameter box needs {q} increasing lower/upper values")
    return lo, hi


def _model(cfg: RunConfig):
    """Computer model and its default control-variable domain (or None)."""
    name = cfg.options.get("model")
    if name == "identity":
        lo, hi = _box(cfg, 1, -np.inf, np.inf)
        return identity_model(lo, hi), None
    if name:
        model, st = builtin_by_name(name)
        if cfg.options.get("theta_lower") is not None or cfg.options.get("theta_upper") is not None:
            lo, hi = _box(cfg, model.q, model.lower, model.upper)
            model = ComputerModel(model.name, model.d, model.q, model.r, lo, hi, model._func, model._grad)
        return model, st.domain
    if cfg.options.get("emulator"):
        em = load_emulator(cfg.emulator)
    else:
        x, t, y = read_runs(cfg.runs)
        em = train_emulator(np.hstack([x, t]), y, d=x.shape[1])
    lo, hi = _box(cfg, em.q, em.lower[em.d :], em.upper[em.d :])
    return as_model(em, lo, hi), (float(em.lower[0]), float(em.upper[0]))


def _physical(cfg: RunConfig, default_domain) -> PhysicalDataset:
    data = read_physical(cfg.physical)
    dom = cfg.options.get("domain") or default_domain
    if dom is None:
        dom = (float(data.x[:, 0].min()), float(data.x[:, 0].max()))
    return PhysicalDataset(data.x, data.y, [dom[0]], [dom[1]])


def _lambda_grid(cfg: RunConfig):
    g = cfg.options.get("lambda_grid")
    return default_grid() if g is None else default_grid(int(g[2]), g[0], g[1])


def _fit_opts(cfg: RunConfig) -> dict:
    return {"method": cfg.solver, "max_iter": cfg.max_iter, "tol": cfg.tol, "multistart": cfg.multistart,
            "raise_on_nonconvergence": True}


def _write_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


# ---------------------------------------------------------------------------
# subcommands


def _cmd_calibrate(cfg: RunConfig) -> dict:
    model, dom = _model(cfg)
    data = _physical(cfg, dom)
    if cfg.method != "rkhs-cubic":
        fm = fit_method(cfg.method, data, model, seed=cfg.seed)
        fam = fm.fit.family
        doc = {"schema": "rkhs_calib.baseline/1", "method": cfg.method, "family": fam.tag,
               "gamma": fm.fit.gamma.tolist(), "rss": fm.fit.rss, "dof": fm.fit.dof,
               "provenance": provenance(cfg.recorded())}
        _write_json(cfg.out, doc)
        return {"method": cfg.method, "gamma": fm.fit.gamma.tolist(), "rss": fm.fit.rss}
    kernel = parse_kernel(cfg.kernel, data.domain)
    if cfg.lam == "gcv":
        res = select_lambda(data, model, kernel, _lambda_grid(cfg), seed=cfg.seed, criterion=cfg.criterion,
                            **_fit_opts(cfg))
        est = res.estimate
        if cfg.options.get("curve_out"):
            write_csv(cfg.curve_out, ("lambda", "gcv", "edf", "sigma2"), res.curve, cfg.recorded())
    else:
        est = fit(data, model, kernel, cfg.lam, seed=cfg.seed, **_fit_opts(cfg))
    save_estimate(est, cfg.out, cfg.recorded())
    return {"lambda": est.lam, "objective": est.report.objective, "iterations": est.report.iterations,
            "converged": est.report.converged}


def _cmd_gcv_scan(cfg: RunConfig) -> dict:
    model, dom = _model(cfg)
    data = _physical(cfg, dom)
    kernel = parse_kernel(cfg.kernel, data.domain)
    res = select_lambda(data, model, kernel, _lambda_grid(cfg), seed=cfg.seed, criterion=cfg.criterion,
                        **_fit_opts(cfg))
    write_csv(cfg.out, ("lambda", "gcv", "edf", "sigma2"), res.curve, cfg.recorded())
    return {"lambda": res.lam, "failures": len(res.failures)}


def _eval_points(cfg: RunConfig, est, dom):
    if cfg.options.get("x") is not None:
        return np.asarray(cfg.x, float).reshape(-1, 1)
    if cfg.options.get("points"):
        return read_table(cfg.points, ("x",))["x"]
    dom = cfg.options.get("domain") or dom
    if dom is None:
        dom = (float(est.anchors[:, 0].min()), float(est.anchors[:, 0].max()))
    h = (dom[1] - dom[0]) / cfg.grid_size
    return (dom[0] + h * (np.arange(cfg.grid_size) + 0.5)).reshape(-1, 1)


def _cmd_predict(cfg: RunConfig) -> dict:
    est = load_estimate(cfg.estimate)
    model, dom = _model(cfg)
    X = _eval_points(cfg, est, dom)
    T = est.theta(X)
    y, clamped = predict_at(est, model, X, return_flag=True)
    header = ([f"x{i + 1}" for i in range(X.shape[1])] + [f"theta{j + 1}" for j in range(T.shape[1])]
              + [f"y{k + 1}" for k in range(y.shape[1])] + ["clamped"])
    rows = [(*xi, *ti, *yi, bool(c)) for xi, ti, yi, c in zip(X, T, y, clamped)]
    write_csv(cfg.out, header, rows, cfg.recorded())
    return {"points": len(X), "clamped": int(np.sum(clamped))}


def _cmd_uq(cfg: RunConfig) -> dict:
    est = load_estimate(cfg.estimate)
    model, dom = _model(cfg)
    data = _physical(cfg, dom)
    sys_ = linearize(est, data, model)
    G = _eval_points(cfg, est, data.domain)[:, 0]
    out = bands_at_levels(sys_, est, model, G, cfg.level, cfg.target, cfg.rho)
    rows = []
    for lv in cfg.level:
        bands = out[lv] if cfg.target == "theta" else [out[lv]]
        for b in bands:
            rows.extend(b.rows())
    write_csv(cfg.out, ("x", "target", "center", "lower", "upper", "level"), rows, cfg.recorded())
    first = out[cfg.level[0]]
    b0 = first[0] if cfg.target == "theta" else first
    return {"levels": cfg.level, "sigma2": b0.sigma2, "rho": b0.rho, "points": len(G)}


def _cmd_simulate(cfg: RunConfig) -> dict:
    table = run_setting(cfg.setting, cfg.methods.split(","), cfg.code, cfg.n, cfg.reps, cfg.seed, cfg.level,
                        threads=cfg.threads)
    write_csv(cfg.out, table.columns, ([rec[c] for c in table.columns] for rec in table.records()),
              cfg.recorded())
    return {"rows": len(table.rows), "failures": {k: len(v) for k, v in table.failures.items()}}


def _cmd_emulate(cfg: RunConfig) -> dict:
    x, t, y = read_runs(cfg.runs)
    em = train_emulator(np.hstack([x, t]), y, d=x.shape[1], jitter=cfg.jitter)
    save_emulator(em, cfg.out, cfg.recorded())
    return {"m": em.m, "lengthscales": em.lengthscales.tolist(), "jitter": em.jitter}


def _cmd_cv(cfg: RunConfig) -> dict:
    model, dom = _model(cfg)
    data = _physical(cfg, dom)
    res = loo_cv(data, model, cfg.method, cfg.C, cfg.reps, cfg.seed)
    write_csv(cfg.out, ("ape",), ((v,) for v in res["ape"]), cfg.recorded())
    return {"mean": res["mean"], "se": res["se"], "count": int(res["ape"].size), "failures": len(res["failures"])}


_HANDLERS = {
    "calibrate": _cmd_calibrate,
    "gcv-scan": _cmd_gcv_scan,
    "predict": _cmd_predict,
    "uq": _cmd_uq,
    "simulate": _cmd_simulate,
    "emulate": _cmd_emulate,
    "cv": _cmd_cv,
}


def run(cfg: RunConfig) -> dict:
    """Execute a validated configuration; returns a JSON-able summary."""
    return _HANDLERS[cfg.command](cfg)


def _fail(exc: CalibError, stage: str) -> int:
    doc = {"error": type(exc).__name__, "message": str(exc), "stage": stage, "exit_code": exc.exit_code}
    sys.stderr.write(json.dumps(doc) + "\n")
    return exc.exit_code


def main(argv=None) -> int:
    try:
        cfg = parse_config(argv)
    except CalibError as exc:
        return _fail(exc, "parse")
    logging.basicConfig(level=logging.INFO if cfg.options.get("verbose") else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        summary = run(cfg)
    except CalibError as exc:
        return _fail(exc, cfg.command)
    sys.stdout.write(json.dumps(summary, default=float) + "\n")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
