"""Robust linear-quadratic estimation toolkit.

Corruption-robust smoothing and filtering for linear dynamical systems:
simulation with adversarial observation corruption, oracle Kalman
baselines, constraint-program based robust smoothers with confidence
bands, a causal two-stage filter, a truncated stationary filter, and an
experiment harness.
"""

from .config import ConstraintConstants, PipelineConfig, SolverConfig
from .lds import (AdversaryStrategy, EpisodeData, SystemModel,
                  apply_corruptions, simulate, unroll_state)
from .observability import (ObservabilityProfile, SubspaceSplit,
                            check_unobservable_decay, estimate_constants,
                            observability_gram, subsample_deviation,
                            subspace_split, window_size)
from .kalman import (FilterState, RiskReport, clean_nll, filter_step,
                     risk_report, run_filter, smoother, stability_constants)
from .wiener import (WienerModel, robust_wiener_predict, schedule_params,
                     stationary_gain, truncated_filter)
from .programs import (Candidate, Constraint, FeasibilityReport, ProgramSpec,
                       build_program, check_feasibility,
                       ground_truth_candidate, smoother_candidate)
from .solvers import (SmootherSolution, brute_force_oracle, solve_alternating,
                      solve_moment_relaxation)
from .pipeline import (ConfidenceBand, calibrate_constants, confidence_band,
                       sos_kalman_pipeline)
from .online import (PredictionLog, TwoStagePredictor, choose_radius,
                     correct_observations, pathwise_error_bound)
from .harness import ExperimentConfig, build_scenario, run, run_to_files

__version__ = "0.1.0"
