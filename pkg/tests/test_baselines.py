import numpy as np
import pytest
from scipy import stats

from conftest import smooth_data
from rkhs_calib.baselines import FAMILIES, baseline_ci, fit_const, fit_parametric
from rkhs_calib.data import PhysicalDataset
from rkhs_calib.errors import NumericError
from rkhs_calib.model import builtin, grid, identity_model, sample_physical


def _noiseless(sid, n=40, seed=0):
    _, st = builtin(sid)
    quiet = type(st)(st.id, st.lower, st.upper, 0.0, st.truth, st.theta_star, st.witnesses, st.emulator_box)
    return sample_physical(quiet, n, seed)


def test_family_values_and_jacobians():
    x = np.linspace(0, 2, 7)
    for tag, g in (("exp", np.array([0.5, 0.2])), ("quad", np.array([2.5, -2.0, 0.5])), ("const", np.array([1.3]))):
        fam = FAMILIES[tag]
        J = fam.jac(x, g)
        assert J.shape == (7, fam.size)
        for i in range(fam.size):
            h = np.zeros_like(g)
            h[i] = 1e-6
            fd = (fam.value(x, g + h) - fam.value(x, g - h)) / 2e-6
            np.testing.assert_allclose(J[:, i], fd, atol=1e-8)


def test_const_recovers_setting4_exactly():
    model, _ = builtin(4)
    data = _noiseless(4)
    f = fit_const(data, model)
    np.testing.assert_allclose(f.theta_hat, [1.0, 3.0], atol=1e-4)
    assert f.rss < 1e-6


def test_const_identity_is_mean():
    data = smooth_data(2)
    f = fit_const(data, identity_model())
    assert f.theta_hat[0] == pytest.approx(np.mean(data.y), abs=1e-10)


def test_exp_recovers_setting1():
    model, _ = builtin(1)
    f = fit_parametric(_noiseless(1), model, "exp")
    np.testing.assert_allclose(f.gamma[0], [0.5, 0.2], atol=1e-4)


def test_quad_recovers_setting2():
    model, _ = builtin(2)
    f = fit_parametric(_noiseless(2), model, "quad")
    np.testing.assert_allclose(f.gamma[0], [2.5, -2.0, 0.5], atol=1e-4)


def test_identity_const_band_is_textbook_mean_interval():
    data = smooth_data(3, n=25)
    model = identity_model()
    f = fit_const(data, model)
    band = baseline_ci(f, data, model, [3.0, 4.0], level=0.9)[0]
    y = data.y[:, 0]
    half = stats.norm.ppf(0.95) * np.std(y, ddof=1) / np.sqrt(len(y))
    np.testing.assert_allclose(band.lower, y.mean() - half, atol=1e-10)
    np.testing.assert_allclose(band.upper, y.mean() + half, atol=1e-10)
    pred = baseline_ci(f, data, model, [3.0, 4.0], level=0.9, target="prediction")
    np.testing.assert_allclose(pred.upper, band.upper, atol=1e-10)


def test_zero_residual_gives_zero_width():
    data = PhysicalDataset([0.0, 1.0, 2.0, 3.0], [2.0] * 4, [0.0], [3.0])
    model = identity_model()
    band = baseline_ci(fit_const(data, model), data, model, [0.5, 1.5])[0]
    np.testing.assert_allclose(band.upper - band.lower, 0.0, atol=1e-12)


@pytest.mark.parametrize("sid", [1, 2, 4])
def test_const_dominates_lattice_starts(sid):
    from rkhs_calib.baselines import _lattice

    model, st = builtin(sid)
    data = sample_physical(st, 30, sid)
    f = fit_const(data, model)
    for start in _lattice(model):
        rss = float(np.sum((data.y - model.eval(data.x, np.tile(start, (data.n, 1)))) ** 2))
        assert f.rss <= rss + 1e-12


def test_nonidentified_theta_band_raises_but_prediction_works():
    model, st = builtin(3)
    data = sample_physical(st, 30, 0)
    f = fit_parametric(data, model, "quad")
    with pytest.raises(NumericError):
        baseline_ci(f, data, model, grid(st, 10), target="theta")
    band = baseline_ci(f, data, model, grid(st, 10), target="prediction")
    assert np.all(band.upper >= band.lower) and np.all(np.isfinite(band.upper))


def test_misspecified_exp_undercovers_on_setting2():
    model, st = builtin(2)
    G = grid(st, 200)
    truth = st.theta_star(G)
    cover = []
    for seed in range(20):
        data = sample_physical(st, 50, seed)
        band = baseline_ci(fit_parametric(data, model, "exp"), data, model, G, 0.9)[0]
        cover.append(np.mean((band.lower < truth) & (truth < band.upper)))
    assert np.mean(cover) < 0.5
