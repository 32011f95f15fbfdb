"""Causal two-stage prediction: clip observations toward an offline
reference, then run the standard Kalman filter on the corrected stream.

The reference trajectory comes from the stage-1 robust smoother re-run
every ``refresh_every`` steps on the history so far and forward-propagated
by the dynamics in between.  Observations farther than the correction
radius r from the reference are replaced by the reference.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .config import PipelineConfig, SolverConfig
from .kalman import filter_step, initial_state, stability_constants, gain_sequence
from .observability import estimate_constants, window_size, HorizonTooShortError
from .pipeline import confidence_band, ConfidenceBand
from .programs import build_program
from .solvers import solve_alternating


@dataclass(frozen=True)
class TwoStageConfig:
    """Correction radius, refresh cadence, and measured stability constants."""

    r: float
    refresh_every: int
    stability: tuple                 # (lambda, delta_stab, K_bound)
    backend: str = "alternating"

    def __post_init__(self):
        if not (self.r > 0):
            raise ValueError("correction radius must be positive")
        if self.refresh_every < 1:
            raise ValueError("refresh_every must be at least 1")


@dataclass
class PredictionLog:
    """Everything a replay produced, for scoring and bound checks."""

    x_pred: np.ndarray       # x_pred[i] = prediction of x_i from y_0..y_{i-1}
    y_corrected: np.ndarray  # the stream actually filtered
    fired: np.ndarray        # where the correction replaced the observation
    r: float
    flags: tuple = ()


def correct_observations(y_window, y_ref, r: float) -> np.ndarray:
    """Keep each observation within distance r of the reference, else
    substitute the reference value."""
    y_window = np.atleast_2d(np.asarray(y_window, dtype=float))
    y_ref = np.atleast_2d(np.asarray(y_ref, dtype=float))
    if y_window.shape != y_ref.shape:
        raise ValueError("window and reference lengths differ")
    dist = np.linalg.norm(y_window - y_ref, axis=1)
    out = y_window.copy()
    out[dist > r] = y_ref[dist > r]
    return out


def choose_radius(band: ConfidenceBand, B, rho: float, c_r: float = 2.0,
                  burn_in_windows: int = 2, min_clamp: float = 1e-9) -> float:
    """Correction radius from the post-burn-in confidence band radii."""
    B_norm = float(np.linalg.norm(np.atleast_2d(B), 2))
    start = burn_in_windows * band.t_pre
    radii = band.radius[start:] if start < band.radius.size else band.radius
    return max(float(c_r * B_norm * rho * np.max(radii)), min_clamp)


class TwoStagePredictor:
    """Stateful causal predictor: feed observations, get next-state predictions.

    The offline stage runs on the accumulated history every
    ``refresh_every`` steps (default: once per coarse window) and supplies
    the reference used to clip incoming observations.  Until enough history
    exists for the offline stage, no correction is applied and predictions
    fall back to the plain filter (flagged).
    """

    def __init__(self, model, eta: float, delta: float,
                 config: PipelineConfig = PipelineConfig(),
                 solver_config: SolverConfig = SolverConfig(),
                 refresh_every: int | None = None,
                 r: float | None = None,
                 c_r: float = 2.0):
        self.model = model
        self.eta = eta
        self.delta = delta
        self.config = config
        self.solver_config = solver_config
        self.c_r = c_r
        self.profile = estimate_constants(model.A, model.B, s_max=4 * model.d,
                                          horizon=min(4 * model.T, 4096))
        try:
            self.t_pre = window_size(self.profile, model.d, model.T, delta,
                                     stage="logT",
                                     B_norm=float(np.linalg.norm(model.B, 2)),
                                     c_win=config.c_win)
        except HorizonTooShortError:
            self.t_pre = max(self.profile.s,
                             (model.T // self.profile.s) * self.profile.s)
        self.refresh_every = refresh_every if refresh_every is not None else self.t_pre
        self.r_fixed = r
        self.r = r if r is not None else math.inf
        self.band = None
        self.flags: list = []
        self._y: list = []
        self._ref: list = []          # reference states x' up to current time
        self._last_refresh = -1
        self._filter_state = None
        self._corrected: list = []
        self._fired: list = []

    def _refresh(self, i: int):
        """Re-run the offline stage on y_0..y_i and rebuild the reference."""
        T_i = i + 1
        t = min(self.t_pre, (T_i // self.profile.s) * self.profile.s)
        if t < self.profile.s or t < 1:
            return
        model_i = dataclasses.replace(self.model, T=T_i)
        y_arr = np.asarray(self._y)
        spec = build_program(1, model_i, y_arr, self.eta, self.delta, t,
                             self.profile, constants=self.config.constants,
                             include_x0_in_objective=self.config.include_x0_in_objective,
                             measurement_uses_prev_state=self.config.measurement_uses_prev_state)
        try:
            sol = solve_alternating(spec, self.solver_config)
        except Exception:
            self.flags.append("offline_stage_failed")
            return
        self.band = confidence_band(sol, self.profile, model_i, self.delta,
                                    t, self.config.c_band)
        self._ref = [x for x in sol.x_hat]
        if self.r_fixed is None:
            self.r = choose_radius(self.band, self.model.B, self.profile.rho,
                                   c_r=self.c_r)
        self._last_refresh = i

    def _reference_obs(self, i: int) -> np.ndarray | None:
        """B x'_i, forward-propagating the reference if it is stale."""
        if not self._ref:
            return None
        while len(self._ref) <= i:
            self._ref.append(self.model.A @ self._ref[-1])
        return self.model.B @ self._ref[i]

    def feed(self, y_i) -> np.ndarray:
        """Consume y_i; return the prediction of the next state x_{i+1}."""
        y_i = np.asarray(y_i, dtype=float).reshape(self.model.m)
        self._y.append(y_i)
        i = len(self._y) - 1
        due = (self._last_refresh < 0 and i + 1 >= self.t_pre) or (
            self._last_refresh >= 0 and i - self._last_refresh >= self.refresh_every)
        if due:
            self._refresh(i)

        ref = self._reference_obs(i)
        if ref is None:
            y_used, fired = y_i, False
            if "warmup_uncorrected" not in self.flags:
                self.flags.append("warmup_uncorrected")
        else:
            dist = float(np.linalg.norm(y_i - ref))
            fired = dist > self.r
            y_used = ref if fired else y_i
        self._corrected.append(y_used)
        self._fired.append(fired)

        self._filter_state = filter_step(
            self._filter_state if self._filter_state is not None
            else initial_state(self.model),
            y_used, self.model, first=(i == 0))
        return self.model.A @ self._filter_state.x_post

    def replay(self, y: np.ndarray) -> PredictionLog:
        """Feed a whole episode; x_pred[i] is the prediction of x_i made
        before y_i arrived (x_pred[0] is the prior mean)."""
        y = np.atleast_2d(np.asarray(y, dtype=float))
        T = y.shape[0]
        preds = np.zeros((T, self.model.d))
        for i in range(T):
            nxt = self.feed(y[i])
            if i + 1 < T:
                preds[i + 1] = nxt
        return PredictionLog(x_pred=preds,
                             y_corrected=np.asarray(self._corrected),
                             fired=np.asarray(self._fired, dtype=bool),
                             r=self.r if np.isfinite(self.r) else 0.0,
                             flags=tuple(self.flags))


def pathwise_error_bound(model, fired_or_mask, r: float, stability=None,
                         T: int | None = None) -> np.ndarray:
    """Right-hand side of the filter perturbation bound at every step.

    bound[t] = lambda * sum_{s<=t} delta_stab^(t-s) ||K_s|| * r * ind[s],
    where ind marks the steps whose filter input may differ by up to r
    from the oracle's input.  Gains are data independent, so they are
    taken from the deterministic gain recursion.
    """
    ind = np.asarray(fired_or_mask, dtype=float)
    if T is None:
        T = ind.size
    if stability is None:
        stability = stability_constants(model)
    lam, delta_stab, _ = stability
    Ks, _ = gain_sequence(model, T)
    Knorms = np.array([np.linalg.norm(K, 2) for K in Ks])
    bound = np.zeros(T)
    acc = 0.0
    for s in range(T):
        acc = delta_stab * acc + Knorms[s] * r * ind[s]
        bound[s] = lam * acc
    return bound
