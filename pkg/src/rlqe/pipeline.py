"""The full two-stage robust smoothing pipeline and its calibration mode.

Stage 1 solves the coarse program on long windows and yields a trajectory
estimate plus a confidence band; stage 2 re-solves on short windows with
the band as a funnel constraint.  Calibration widens the big-O constants
of the constraint right-hand sides until oracle candidates are feasible
at the requested confidence level.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np

from .config import ConstraintConstants, PipelineConfig, SolverConfig
from .observability import (HorizonTooShortError, estimate_constants,
                            window_size)
from .programs import (build_program, check_feasibility, ground_truth_candidate,
                       smoother_candidate, window_success_indicators,
                       _window_slices, _window_gram_terms)
from .solvers import solve_alternating, solve_moment_relaxation, SmootherSolution


@dataclass(frozen=True)
class ConfidenceBand:
    """Per-index radii around a stage-1 trajectory estimate."""

    center: np.ndarray
    radius: np.ndarray
    E_noise: float
    eps_geo: float
    t_pre: int

    def contains(self, x: np.ndarray) -> np.ndarray:
        """Boolean per index: does the band cover this trajectory."""
        dist = np.linalg.norm(np.atleast_2d(x) - self.center, axis=1)
        return dist <= self.radius

    def to_json(self) -> str:
        return json.dumps({
            "center": self.center.tolist(), "radius": self.radius.tolist(),
            "E_noise": self.E_noise, "eps_geo": self.eps_geo, "t_pre": self.t_pre,
        })


def noise_energy(model, profile, t_pre: int, delta: float) -> float:
    """Combined per-window noise energy scale used by band and funnel radii."""
    logTd = math.log(max(model.T / delta, math.e))
    return (model.tau2 * (model.m + logTd)
            + t_pre * profile.rho ** 2 * float(np.linalg.norm(model.B, 2)) ** 2
            * model.sigma2 * (model.d + logTd))


def geometric_error(model, profile, t_pre: int, delta: float) -> float:
    """Squared radius of the stage-1 estimate's worst-case geometric error."""
    logTd = math.log(max(model.T / delta, math.e))
    inner = (model.tau2 * (model.m + logTd)
             + model.sigma2 * (model.d + logTd) * profile.rho ** 2 * t_pre
             * float(np.linalg.norm(model.B, 2)) ** 2)
    return profile.rho ** 8 * t_pre / profile.kappa * inner


def confidence_band(solution, profile, model, delta: float, t_pre: int,
                    c_band: float = 4.0) -> ConfidenceBand:
    """Band around a stage-1 solution: geometric decay plus a noise floor."""
    T, d = model.T, model.d
    E = noise_energy(model, profile, t_pre, delta)
    eps = geometric_error(model, profile, t_pre, delta)
    ell = np.arange(T) // t_pre
    rho = profile.rho
    geo = rho * 2.0 ** (-ell / 2.0) * math.sqrt(model.R2) * (
        math.sqrt(d) + math.sqrt(math.log(1.0 / delta)))
    floor = rho ** 4 * math.sqrt(E) * math.sqrt(t_pre) / math.sqrt(profile.kappa)
    radius = c_band * (geo + floor)
    return ConfidenceBand(center=solution.x_hat, radius=radius,
                          E_noise=E, eps_geo=eps, t_pre=t_pre)


def delta1_schedule(T: int, delta: float, eta: float, t_pre: int,
                    c_delta: float = 1.0) -> float:
    """Stage-2 window failure rate: log(1/delta)/log^3 T, floored so the
    per-window concentration has enough windows to work with."""
    raw = c_delta * math.log(1.0 / delta) / max(math.log(T), 1.0) ** 3
    floor = 0.0
    if eta > 0:
        floor = (t_pre / (eta * T)) * math.log(1.0 / delta)
    return float(min(0.5, max(raw, floor, 1e-6)))


def pipeline_params(model, profile, delta: float, eta: float,
                    config: PipelineConfig):
    """(t_pre, delta1, t_stage2) per the schedule; raises if t_pre > T."""
    d, T = model.d, model.T
    B_norm = float(np.linalg.norm(model.B, 2))
    t_pre = window_size(profile, d, T, delta, stage="logT", B_norm=B_norm,
                        c_win=config.c_win)
    delta1 = delta1_schedule(T, delta, eta, t_pre, config.c_delta)
    try:
        t2 = window_size(profile, d, T, delta, stage="loglogT", B_norm=B_norm,
                         c_win=config.c_win, delta1=delta1)
    except HorizonTooShortError:
        t2 = None
    return t_pre, delta1, t2


def _solve(spec, config: PipelineConfig, solver_config: SolverConfig):
    if config.backend == "moment":
        return solve_moment_relaxation(spec, solver_config)
    return solve_alternating(spec, solver_config)


def sos_kalman_pipeline(model, y, delta: float, eta: float,
                        config: PipelineConfig = PipelineConfig(),
                        solver_config: SolverConfig = SolverConfig(),
                        profile=None):
    """Two-stage robust smoother.  Returns (solution, band, flags).

    Stage 1 solves the coarse program; if the horizon is too short for
    the stage-2 window the stage-1 result is returned flagged.
    """
    y = np.atleast_2d(np.asarray(y, dtype=float))
    T = model.T
    flags = []
    if profile is None:
        profile = estimate_constants(model.A, model.B, s_max=4 * model.d,
                                     horizon=min(4 * T, 4096))
    B_norm = float(np.linalg.norm(model.B, 2))
    try:
        t_pre, delta1, t2 = pipeline_params(model, profile, delta, eta, config)
    except HorizonTooShortError:
        # not enough data for even the coarse window: largest usable multiple of s
        t_pre = max(profile.s, (T // profile.s) * profile.s)
        if t_pre > T:
            raise
        delta1, t2 = None, None
        flags.append("window_clamped_to_horizon")

    spec1 = build_program(1, model, y, eta, delta, t_pre, profile,
                          constants=config.constants,
                          include_x0_in_objective=config.include_x0_in_objective,
                          measurement_uses_prev_state=config.measurement_uses_prev_state)
    sol1 = _solve(spec1, config, solver_config)
    band = confidence_band(sol1, profile, model, delta, t_pre, config.c_band)

    if t2 is None or t2 > T:
        flags.append("stage1_only")
        return sol1, band, tuple(flags)

    spec2 = build_program(2, model, y, eta, delta, t2, profile,
                          delta1=delta1, x_prime=sol1.x_hat,
                          eps_geo=band.eps_geo, k=config.holder_k,
                          constants=config.constants,
                          include_x0_in_objective=config.include_x0_in_objective,
                          measurement_uses_prev_state=config.measurement_uses_prev_state)
    sol2 = _solve(spec2, config, solver_config)
    return sol2, band, tuple(flags)


def _needed_multipliers(spec, cand) -> dict:
    """Per-constraint multiplier that would make this candidate feasible.

    Computed against a spec built with unit constants; entries map config
    field names to the smallest constant value that closes the violation.
    """
    report = check_feasibility(cand, spec)
    s = report.slacks
    model, T = spec.model, spec.T
    eta = spec.eta
    out = {}
    by_name = {c.name: c for c in spec.constraints}

    def mult(name, field):
        # rhs scales linearly in the constant: needed = lhs / unit rhs
        con = by_name[name]
        lhs = con.rhs - s[name]
        out[field] = lhs / con.rhs if con.rhs > 0 else 0.0

    if "inlier_count" in s and eta > 0:
        # rhs = (1 - c eta) T, built with the base slack 1.01
        out["c4_inlier_slack"] = spec.constants.c4_inlier_slack - s["inlier_count"] / (eta * T)
    if "obs_noise_bound" in s:
        mult("obs_noise_bound", "c_obs_noise")
    if "proc_noise_bound" in s:
        mult("proc_noise_bound", "c_proc_noise")
    if "initial_state_bound" in s:
        con = by_name["initial_state_bound"]
        lhs = con.rhs - s["initial_state_bound"]
        log_term = math.log(1.0 / spec.delta)
        out["c5_init_bound"] = (lhs / model.R2 - model.d) / max(log_term, 1e-9)
    if "window_subsample" in s:
        con = by_name["window_subsample"]
        # shifting the identity part moves the min eigenvalue one-for-one
        out["c_subsample"] = (spec.constants.c_subsample
                              - s["window_subsample"] / con.rhs * spec.constants.c_subsample)
    if "bad_window_outlier_overlap" in s and eta > 0 and spec.delta1:
        con = by_name["bad_window_outlier_overlap"]
        lhs = con.rhs - s["bad_window_outlier_overlap"]
        out["c8_many_ab"] = lhs / (eta * spec.delta1 * T)
    if "confidence_funnel" in s:
        # rhs_i = eps_geo + c * unit_i; use the binding index
        ell = np.arange(T) // spec.t
        unit = (spec.profile.rho ** 2 * model.R2
                * (model.d + math.log(1.0 / spec.delta)) / 2.0 ** ell)
        dist2 = np.sum((np.asarray(cand.x) - spec.x_prime) ** 2, axis=1)
        out["c9_funnel"] = float(np.max((dist2 - spec.eps_geo) / unit))
    for name, field in (("windowed_proc_noise_avg", "c10_totalnoise"),
                        ("window_endpoint_noise_avg", "c11_totalnoise_dumb"),
                        ("obs_noise_avg", "c12_avg_obs_noise"),
                        ("corrupted_obs_noise_avg", "c13_corrupt_obs_noise")):
        if name in s:
            mult(name, field)
    if "window_subsample_conf" in s:
        con = by_name["window_subsample_conf"]
        out["c14_subsample_conf"] = (spec.constants.c14_subsample_conf
                                     - s["window_subsample_conf"] / con.rhs
                                     * spec.constants.c14_subsample_conf)
    return out


def _window_needed_devs(spec, a_mask) -> np.ndarray:
    """Per window, the additive identity shift making the spectral test pass."""
    from .observability import observability_gram
    model = spec.model
    terms = _window_gram_terms(model.A, model.B, spec.t)
    G = observability_gram(model.A, model.B, spec.t)
    a = np.asarray(a_mask, dtype=float)
    devs = []
    for lo, hi in _window_slices(spec.T, spec.t):
        n = hi - lo
        lhs = np.tensordot(1.0 - a[lo:hi], terms[:n], axes=1)
        base = spec.eta * G * (n / spec.t)
        devs.append(max(0.0, -float(np.linalg.eigvalsh(base - lhs)[0]) / (n / spec.t)))
    return np.array(devs)


def calibrate_constants(model, eta: float, adversary, delta: float,
                        n_seeds: int = 100, seed0: int = 0,
                        config: PipelineConfig = PipelineConfig(),
                        quantile: float = 0.99, margin: float = 1.25,
                        profile=None) -> ConstraintConstants:
    """Widen constraint constants until oracle candidates are feasible.

    Simulates fresh corrupted episodes, measures for the ground truth and
    the oracle-smoother candidate the smallest constant each constraint
    would need, and returns constants at the given cross-seed quantile
    times a safety margin (never below the configured defaults).
    """
    from .lds import simulate, apply_corruptions

    if profile is None:
        profile = estimate_constants(model.A, model.B, s_max=4 * model.d,
                                     horizon=min(4 * model.T, 4096))
    t_pre, delta1, t2 = pipeline_params(model, profile, delta, eta, config)
    base = config.constants
    needed: dict[str, list] = {}
    dev_quantiles = []

    for j in range(n_seeds):
        ep = simulate(model, seed0 + j)
        if eta > 0:
            ep = apply_corruptions(ep, eta, adversary, seed0 + 777000 + j)

        spec1 = build_program(1, model, ep.y, eta, delta, t_pre, profile,
                              constants=base,
                              include_x0_in_objective=config.include_x0_in_objective,
                              measurement_uses_prev_state=config.measurement_uses_prev_state)
        cands = [ground_truth_candidate(ep, spec1), smoother_candidate(ep, spec1)]
        for cand in cands:
            for k, val in _needed_multipliers(spec1, cand).items():
                needed.setdefault(k, []).append(val)

        if t2 is not None and t2 <= model.T:
            # stage-2 ingredients: stage-1 estimate and band
            sol1 = solve_alternating(spec1)
            band = confidence_band(sol1, profile, model, delta, t_pre,
                                   config.c_band)
            spec2 = build_program(2, model, ep.y, eta, delta, t2, profile,
                                  delta1=delta1, x_prime=sol1.x_hat,
                                  eps_geo=band.eps_geo, k=config.holder_k,
                                  constants=base,
                                  include_x0_in_objective=config.include_x0_in_objective,
                                  measurement_uses_prev_state=config.measurement_uses_prev_state)
            # per-seed needed spectral slack so (1 - delta1) of windows pass
            devs = _window_needed_devs(spec2, ep.a_star)
            n_w = devs.size
            keep = max(1, int(math.ceil((1.0 - delta1) * n_w)))
            dev_quantiles.append(np.sort(devs)[keep - 1])
            for cand in (ground_truth_candidate(ep, spec2),
                         smoother_candidate(ep, spec2)):
                for k, val in _needed_multipliers(spec2, cand).items():
                    needed.setdefault(k, []).append(val)

    updates = {}
    for k, vals in needed.items():
        q = float(np.quantile(np.asarray(vals), quantile)) * margin
        updates[k] = max(getattr(base, k), q)
    if dev_quantiles and t2 is not None:
        B_norm = float(np.linalg.norm(model.B, 2))
        unit = profile.rho ** 2 * B_norm ** 2 * math.sqrt(
            t2 * math.log(max(model.d / delta1, math.e)))
        q = float(np.quantile(np.asarray(dev_quantiles), quantile)) * margin / unit
        updates["c14_subsample_conf"] = max(
            updates.get("c14_subsample_conf", base.c14_subsample_conf), q)
    return replace(base, **updates)
