"""Tunable constants for the constraint programs and the estimation pipeline.

Every inequality constraint in the two programs hides an absolute constant;
here they are named, defaulted, and (optionally) calibrated empirically so
that oracle candidates are feasible at the requested confidence level.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict, replace


@dataclass(frozen=True)
class ConstraintConstants:
    """Slack multipliers for the inequality constraints of both programs.

    ``cN`` multiplies the order-of-magnitude term on the right-hand side of
    constraint N.  Numbering follows the second (14-constraint) program;
    the first program's constraints 4-8 map onto c4, c5, c6, c7_v1, c8_v1.
    """

    # shared with program 1
    c4_inlier_slack: float = 1.01   # rhs = (1 - c4*eta) * T
    c5_init_bound: float = 4.0      # ||x_0||^2 <= R^2 (d + c5 log(1/delta))
    # program 1 only
    c_obs_noise: float = 4.0        # ||v_i||^2 <= c tau^2 (m + log(T/delta))
    c_proc_noise: float = 4.0       # ||w_i||^2 <= c sigma^2 (d + log(T/delta))
    c_subsample: float = 4.0        # window psd slack, sqrt(t log(dT/t delta))
    # program 2 only
    c8_many_ab: float = 4.0         # sum (1-b)(1-a) <= c eta delta1 T
    c9_funnel: float = 4.0          # band term c rho^2 R^2 (d+log(1/delta))/2^l
    c10_totalnoise: float = 4.0     # windowed process-noise average
    c11_totalnoise_dumb: float = 4.0
    c12_avg_obs_noise: float = 4.0
    c13_corrupt_obs_noise: float = 4.0
    c14_subsample_conf: float = 4.0  # window psd slack, sqrt(t log(d/delta1))

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ConstraintConstants":
        return cls(**json.loads(text))

    def widened(self, **factors: float) -> "ConstraintConstants":
        """Return a copy with the named constants scaled up."""
        updates = {name: getattr(self, name) * f for name, f in factors.items()}
        return replace(self, **updates)


@dataclass(frozen=True)
class PipelineConfig:
    """Knobs of the two-stage offline pipeline."""

    c_win: float = 4.0          # leading constant in the window-size formula
    c_band: float = 4.0         # leading constant of the confidence band radii
    c_delta: float = 1.0        # delta1 = c_delta * log(1/delta) / log(T)^3
    backend: str = "alternating"  # "alternating" or "moment"
    holder_k: int | None = None   # even exponent; default 2*floor(log(1/eta))
    include_x0_in_objective: bool = True
    measurement_uses_prev_state: bool = False  # toggle for the stage-2 fit term
    constants: ConstraintConstants = field(default_factory=ConstraintConstants)


@dataclass(frozen=True)
class SolverConfig:
    """Options shared by the program solvers."""

    max_rounds: int = 200
    objective_tol: float = 1e-8
    moment_matrix_cap: int = 2000   # max side of the moment matrix
    moment_eps: float = 1e-6        # target primal-dual gap for the conic solve
    moment_include_bounds: bool = False  # also enforce the noise/psd bounds
    funnel_penalty_max_iters: int = 12
    local_search_max_T: int = 64    # 1-swap refinement only on short horizons
    local_search_budget: int = 500  # max extra quadratic solves it may spend


DEFAULT_CONSTANTS = ConstraintConstants()
