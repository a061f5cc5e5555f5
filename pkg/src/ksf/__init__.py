"""Keyframe-based structureless filter for visual-inertial odometry with online calibration."""
from .config import ExperimentConfig, default_config_text, from_dict, load_config
from .estimator import (FilterConfig, FilterState, KeyframeFilter, Priors, WindowConfig,
                        initialize, make_state)
from .metrics import ate, evaluate_files, evaluate_trajectories, nees, relative_errors
from .montecarlo import run_montecarlo, simulate_run

__all__ = ["ExperimentConfig", "FilterConfig", "FilterState", "KeyframeFilter", "Priors",
           "WindowConfig", "ate", "default_config_text", "evaluate_files",
           "evaluate_trajectories", "from_dict", "initialize", "load_config", "make_state",
           "nees", "relative_errors", "run_montecarlo", "simulate_run"]
