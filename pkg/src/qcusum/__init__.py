"""Stationarity testing and change-point detection for offline RL Q-functions."""

from .trajectory import Dataset, ScalerParams, TransitionBatch, fit_scaler, \
    read_csv, slice_interval, standardize, write_csv
from .sieve import BasisSpec, median_heuristic_gamma, phi_L, phi_features, sample_basis
from .fqi import FqiConfig, IndicatorBasis, QCoefficients, cross_validate_basis, \
    fit_linear_fqi, greedy_action, q_value, td_errors
from .teststat import ScanConfig, SegmentFit, candidate_grid, cusum_weight, \
    fit_segments, sigma_hat, ts_integral, ts_max, ts_norm, w_hat
from .inference import BootstrapConfig, TestConfig, TestResult, aggregate_pvalues, \
    bootstrap_q_draw, bootstrap_statistics, p_value, run_test, run_test_aggregated
from .detect import ChangePointResult, scan
from .sim import EnvState, ScenarioSpec, gen_ihs, gen_scenario, make_env, \
    sample_change_schedule, smooth_interp, smooth_step, step_env
from .tree import RegressionTree, TreePolicy, fit_tree_fqi, tree_q_values
from .online import OnlineConfig, ValueTrace, evaluate_value, kernel_fqi, run_online

__all__ = [name for name in dir() if not name.startswith("_")]
