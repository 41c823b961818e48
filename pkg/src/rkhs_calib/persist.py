"""Versioned JSON estimates and CSV outputs with provenance sidecars."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from . import __version__
from .calibrate import CalibrationEstimate, FitReport
from .errors import DataError
from .kernel import SobolevCubic, parse_kernel

__all__ = ["ESTIMATE_SCHEMA", "estimate_to_dict", "estimate_from_dict", "save_estimate", "load_estimate",
           "write_csv", "provenance"]

ESTIMATE_SCHEMA = "rkhs_calib.estimate/1"


def provenance(config: dict | None = None) -> dict:
    """Library version and run configuration (no clock, no host data)."""
    return {"library": "rkhs_calib", "version": __version__, "config": dict(sorted((config or {}).items()))}


def _kernel_doc(kernel) -> dict:
    doc = {"spec": kernel.spec}
    if isinstance(kernel, SobolevCubic):
        doc["domain"] = [kernel.lower, kernel.upper]
    return doc


def estimate_to_dict(est: CalibrationEstimate, config: dict | None = None) -> dict:
    return {
        "schema": ESTIMATE_SCHEMA,
        "kernel": _kernel_doc(est.kernel),
        "anchors": est.anchors.tolist(),
        "alpha": est.alpha.tolist(),
        "beta": est.beta.tolist(),
        "lambda": est.lam,
        "report": est.report.to_dict(),
        "provenance": provenance(config),
    }


def estimate_from_dict(doc: dict) -> CalibrationEstimate:
    if doc.get("schema") != ESTIMATE_SCHEMA:
        raise DataError(f"unsupported estimate schema {doc.get('schema')!r}; expected {ESTIMATE_SCHEMA}")
    try:
        kd = doc["kernel"]
        kernel = parse_kernel(kd["spec"], tuple(kd["domain"]) if "domain" in kd else None)
        anchors = np.asarray(doc["anchors"], dtype=float)
        alpha = np.asarray(doc["alpha"], dtype=float)
        beta = np.asarray(doc["beta"], dtype=float)
        rep = doc["report"]
        report = FitReport(float(rep["objective"]), int(rep["iterations"]), bool(rep["converged"]),
                           bool(rep["feasible"]), (), int(rep.get("starts", 1)), rep.get("method", ""))
        return CalibrationEstimate(kernel, anchors, alpha, beta, float(doc["lambda"]), report)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed estimate document: {exc}") from None


def _dump(doc: dict) -> str:
    return json.dumps(doc, indent=1, sort_keys=False, allow_nan=True) + "\n"


def save_estimate(est: CalibrationEstimate, path, config: dict | None = None) -> None:
    Path(path).write_text(_dump(estimate_to_dict(est, config)))


def load_estimate(path) -> CalibrationEstimate:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise DataError(f"no such file: {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: not a JSON document ({exc})") from None
    return estimate_from_dict(doc)


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return "nan" if math.isnan(v) else repr(v)
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def write_csv(path, header, rows, config: dict | None = None) -> Path:
    """Write a CSV plus ``<path>.meta.json`` holding the provenance record.

    Floats are written with ``repr`` so reruns are byte-identical and
    values round-trip exactly.
    """
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])
    meta = path.with_name(path.name + ".meta.json")
    meta.write_text(_dump(provenance(config)))
    return meta
