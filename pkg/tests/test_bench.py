import math

import numpy as np
import pytest

from conftest import smooth_data
from rkhs_calib.bench import ci_metrics, l2_loss, loo_cv, mean_shift_align, run_setting
from rkhs_calib.data import PhysicalDataset
from rkhs_calib.errors import DataError, UsageError
from rkhs_calib.model import grid, identity_model
from rkhs_calib.uq import ConfidenceBand


def test_l2_loss_examples():
    f = lambda x: np.sin(x)
    assert l2_loss(f, f, (0.0, 3.0)) == 0.0
    assert l2_loss(lambda x: x + 0.7, lambda x: x, (1.0, 2.0)) == pytest.approx(0.7, abs=1e-12)
    assert l2_loss(lambda x: x, lambda x: 0 * x, (0.0, 1.0)) == pytest.approx(1 / math.sqrt(3), abs=1e-4)


def test_l2_loss_accepts_grid_values():
    G = grid((0.0, 2.0), 200)
    assert l2_loss(G**2, lambda x: x**2, (0.0, 2.0)) == 0.0


def _band(G, center, lo, hi):
    return ConfidenceBand(G, center, lo, hi, 0.9, "theta1")


def test_ci_metrics_examples():
    G = grid((0.0, 1.0), 200)
    t = np.cos(G)
    width, width_norm, cover = ci_metrics(_band(G, t, t - 0.25, t + 0.25), np.cos, (0.0, 1.0))
    assert cover == 1.0
    assert width == pytest.approx(0.5) and width_norm == pytest.approx(0.5)
    half = G < 0.5
    lo = np.where(half, t - 1.0, t)
    hi = np.where(half, t + 1.0, t)
    assert ci_metrics(_band(G, t, lo, hi), np.cos, (0.0, 1.0))[2] == pytest.approx(0.5, abs=0.005)


def test_ci_width_is_not_normalised():
    G = grid((2.0, 6.0), 200)
    t = np.zeros_like(G)
    width, width_norm, _ = ci_metrics(_band(G, t, t - 0.1, t + 0.1), lambda x: 0 * x, (2.0, 6.0))
    assert width == pytest.approx(0.8) and width_norm == pytest.approx(0.2)


def test_loo_constant_data_gives_zero_error():
    data = PhysicalDataset(np.linspace(0, 1, 9), np.full(9, 3.0), [0.0], [1.0])
    out = loo_cv(data, identity_model(), "const")
    assert out["ape"].size == 9 and np.max(out["ape"]) < 1e-12


def test_loo_fold_counts_and_stability():
    data = smooth_data(4, n=17)
    one = loo_cv(data, identity_model(), "rkhs-cubic")
    assert one["ape"].size == 17 and one["folds"] == 17
    two = loo_cv(data, identity_model(), "rkhs-cubic", C=2, reps=100, seed=1)
    assert two["ape"].size == 200
    assert abs(two["mean"] - one["mean"]) <= 2 * max(one["se"], two["se"])


def test_loo_rejects_bad_arguments():
    data = smooth_data(0, n=5)
    with pytest.raises(UsageError):
        loo_cv(data, identity_model(), "const", C=3)
    with pytest.raises(UsageError):
        loo_cv(smooth_data(0, n=2), identity_model(), "const", C=2)


def test_mean_shift_examples():
    phys = PhysicalDataset([0.0, 1.0, 2.0], [9.0, 10.0, 11.0], [0.0], [2.0])
    shifted, shift = mean_shift_align(phys, [0.0, 1.0, 2.0], [6.0, 7.0, 8.0])
    assert shift == pytest.approx(-3.0)
    np.testing.assert_allclose(shifted.y[:, 0].mean(), 7.0, atol=1e-12)
    again, shift2 = mean_shift_align(shifted, [0.0, 1.0, 2.0], [6.0, 7.0, 8.0])
    assert shift2 == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(again.y, shifted.y)


def test_mean_shift_common_range_only():
    phys = PhysicalDataset([0.0, 1.0, 5.0], [1.0, 3.0, 100.0], [0.0], [5.0])
    shifted, shift = mean_shift_align(phys, [0.0, 0.5, 1.0, 2.0], [0.0, 0.0, 0.0, 0.0])
    assert shift == pytest.approx(-2.0)


def test_mean_shift_requires_overlap():
    phys = PhysicalDataset([0.0, 1.0], [1.0, 2.0], [0.0], [1.0])
    with pytest.raises(DataError):
        mean_shift_align(phys, [2.0, 3.0], [0.0, 1.0])


def test_single_replication_has_nan_se():
    table = run_setting(1, methods=("const",), reps=1)
    row = table.row("const")
    assert row["reps_ok"] == 1 and math.isnan(row["loss_se"])


def test_run_setting_is_deterministic():
    a = list(run_setting(2, reps=3, seed=5).records())
    b = list(run_setting(2, reps=3, seed=5).records())
    assert len(a) == 4
    for ra, rb in zip(a, b):
        for k in ra:
            va, vb = ra[k], rb[k]
            assert (va == vb) or (isinstance(va, float) and math.isnan(va) and math.isnan(vb))


def test_table_invariants():
    table = run_setting(3, methods=("const", "rkhs-cubic"), reps=3)
    for rec in table.records():
        assert rec["loss_kind"] == "prediction"
        for lv in ("0.90", "0.95", "0.99"):
            assert 0.0 <= rec[f"coverage_{lv}_mean"] <= 1.0
            assert rec[f"width_{lv}_mean"] >= 0.0


def test_run_setting_rejects_bad_arguments():
    with pytest.raises(UsageError):
        run_setting(1, reps=0)
    with pytest.raises(UsageError):
        run_setting(1, methods=("laGP",), reps=1)
    with pytest.raises(UsageError):
        run_setting(1, code_mode="xx", reps=1)


def test_csv_output(tmp_path):
    table = run_setting(1, methods=("const", "rkhs-cubic"), reps=2)
    path = tmp_path / "t.csv"
    table.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0].split(",") == table.columns
    assert len(lines) == 3
