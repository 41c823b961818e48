"""Functional calibration of computer models by penalised least squares in an RKHS."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    CalibError,
    ConvergenceError,
    DataError,
    DomainError,
    InfeasibleError,
    NumericError,
    ParameterError,
    UsageError,
)
from .kernel import Matern, SobolevCubic, SquaredExponential, gram, kernel_eval, null_design, parse_kernel  # noqa: E402
from .data import PhysicalDataset, read_physical, read_runs  # noqa: E402
from .model import ComputerModel, builtin, identity_model, model_grad, sample_physical  # noqa: E402
from .calibrate import CalibrationEstimate, fit, objective, objective_grad, predict_at, theta_at  # noqa: E402
from .select import gcv, linearize, select_lambda, sigma2_hat, smoother_matrix  # noqa: E402
from .uq import ConfidenceBand, prediction_ci, theta_ci  # noqa: E402
from .baselines import baseline_ci, fit_const, fit_parametric  # noqa: E402
from .emulator import Emulator, emulator_grad, emulator_predict, train_emulator  # noqa: E402
from .bench import ci_metrics, l2_loss, loo_cv, mean_shift_align, run_setting  # noqa: E402
