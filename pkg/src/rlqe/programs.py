"""Constraint systems for the two robust smoothing programs.

Version 1 (8 constraint families) encodes: boolean inlier indicators,
exact dynamics, fit on accepted steps, a cardinality floor on accepted
steps, per-step noise bounds, a per-window spectral bound limiting how
much of the observability mass the rejected steps may carry, and an
initial-state bound.  Version 2 (14 families) swaps the per-step noise
bounds for averaged ones, adds per-window success indicators b_l with
their own cardinality and interaction bounds, and funnels the trajectory
inside a confidence band around a prior-stage estimate.

Every big-O right-hand side carries a named constant from
ConstraintConstants so the bounds can be calibrated empirically.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .config import ConstraintConstants, DEFAULT_CONSTANTS
from .observability import ObservabilityProfile, observability_gram


def holder_exponent(eta: float) -> int:
    """Even moment exponent used by the averaged noise bounds; at least 2."""
    if eta <= 0.0:
        return 2
    return max(2, 2 * int(math.floor(math.log(1.0 / eta))))


def _eta_power(eta: float, k: int) -> float:
    """eta^(1 - 2/k) with the k = 2 case giving exactly 1."""
    if k == 2:
        return 1.0
    return eta ** (1.0 - 2.0 / k)


@dataclass(frozen=True)
class Constraint:
    """One numbered constraint family with its explicit right-hand side."""

    id: int
    name: str
    kind: str                      # boolean | linear-eq | quadratic-bound |
                                   # cardinality | psd-window | band | avg-noise
    rhs: float | None = None       # scalar rhs where applicable
    rhs_matrix: np.ndarray | None = None  # psd-window matrix part

    def to_dict(self) -> dict:
        out = {"id": self.id, "name": self.name, "kind": self.kind, "rhs": self.rhs}
        if self.rhs_matrix is not None:
            out["rhs_matrix"] = self.rhs_matrix.tolist()
        return out


@dataclass(frozen=True)
class Candidate:
    """A concrete assignment to the program variables."""

    x: np.ndarray                 # T x d
    w: np.ndarray                 # (T-1) x d
    v: np.ndarray                 # T x m
    a: np.ndarray                 # T values in [0, 1]
    b: np.ndarray | None = None   # n_windows values in [0, 1] (version 2)


@dataclass(frozen=True)
class FeasibilityReport:
    """Signed slack per constraint family (negative = violated).

    For equality families the slack is minus the largest violation
    magnitude; for psd families it is the most negative eigenvalue of
    (rhs - lhs) over all windows.
    """

    slacks: dict
    tol: float

    @property
    def feasible(self) -> bool:
        return all(s >= -self.tol for s in self.slacks.values())

    def violated(self) -> list:
        return [k for k, s in self.slacks.items() if s < -self.tol]

    def to_dict(self) -> dict:
        return {"slacks": dict(self.slacks), "tol": self.tol,
                "feasible": self.feasible}


@dataclass(frozen=True)
class ProgramSpec:
    """A fully instantiated program: data, parameters, constraint list."""

    version: int
    model: object
    y: np.ndarray
    eta: float
    delta: float
    t: int
    profile: ObservabilityProfile
    constraints: tuple
    constants: ConstraintConstants
    k: int
    delta1: float | None = None
    x_prime: np.ndarray | None = None
    eps_geo: float | None = None
    include_x0_in_objective: bool = True
    measurement_uses_prev_state: bool = False

    @property
    def T(self) -> int:
        return self.model.T

    @property
    def n_windows(self) -> int:
        return int(math.ceil(self.T / self.t))

    def ell(self, i: int) -> int:
        return i // self.t

    def gram_t(self) -> np.ndarray:
        return observability_gram(self.model.A, self.model.B, self.t)

    def objective(self, cand: Candidate) -> float:
        """The relaxed clean-fit objective at a candidate, averaged over T."""
        m = self.model
        fit = np.sum(cand.a * np.sum((cand.x @ m.B.T - self.y) ** 2, axis=1))
        total = fit / m.tau2 + np.sum(cand.w ** 2) / m.sigma2
        if self.include_x0_in_objective:
            total += np.sum(cand.x[0] ** 2) / m.R2
        return float(total / self.T)

    def to_json(self) -> str:
        out = {
            "format": "rlqe-program",
            "format_version": 1,
            "version": self.version,
            "model": self.model.to_dict(),
            "y": self.y.tolist(),
            "eta": self.eta,
            "delta": self.delta,
            "delta1": self.delta1,
            "t": self.t,
            "k": self.k,
            "eps_geo": self.eps_geo,
            "x_prime": None if self.x_prime is None else self.x_prime.tolist(),
            "include_x0_in_objective": self.include_x0_in_objective,
            "measurement_uses_prev_state": self.measurement_uses_prev_state,
            "constants": json.loads(self.constants.to_json()),
            "constraints": [c.to_dict() for c in self.constraints],
        }
        return json.dumps(out)


def _window_slices(T: int, t: int):
    """(start, stop) per window; the last one may be partial."""
    return [(l * t, min((l + 1) * t, T)) for l in range(int(math.ceil(T / t)))]


def _window_gram_terms(A, B, t):
    """The t matrices (A^j)' B'B A^j for j = 0..t-1."""
    d = A.shape[0]
    BtB = B.T @ B
    terms = np.empty((t, d, d))
    Aj = np.eye(d)
    for j in range(t):
        terms[j] = Aj.T @ BtB @ Aj
        Aj = A @ Aj
    return terms


def build_program(version: int, model, y, eta: float, delta: float, t: int,
                  profile: ObservabilityProfile,
                  delta1: float | None = None,
                  x_prime: np.ndarray | None = None,
                  eps_geo: float | None = None,
                  k: int | None = None,
                  constants: ConstraintConstants = DEFAULT_CONSTANTS,
                  include_x0_in_objective: bool = True,
                  measurement_uses_prev_state: bool = False) -> ProgramSpec:
    """Instantiate a program with every right-hand side made numeric."""
    y = np.atleast_2d(np.asarray(y, dtype=float))
    T, d, m = model.T, model.d, model.m
    if t % profile.s != 0:
        raise ValueError("window size must be a multiple of the observability horizon")
    if t > T:
        raise ValueError("window size exceeds the horizon")
    if version not in (1, 2):
        raise ValueError("version must be 1 or 2")
    if version == 2:
        if x_prime is None or eps_geo is None or delta1 is None:
            raise ValueError("version 2 needs x_prime, eps_geo, and delta1")
        x_prime = np.atleast_2d(np.asarray(x_prime, dtype=float))
    if k is None:
        k = holder_exponent(eta)
    if k % 2 != 0 or k < 2:
        raise ValueError("holder exponent must be even and at least 2")

    C = constants
    rho = profile.rho
    B_norm = float(np.linalg.norm(model.B, 2))
    O_t = observability_gram(model.A, model.B, t)
    logTd = math.log(max(T / delta, math.e))
    I_d = np.eye(d)

    cons = []
    cons.append(Constraint(1, "boolean_a", "boolean"))
    cons.append(Constraint(2, "dynamics", "linear-eq"))
    cons.append(Constraint(3, "fit_accepted", "linear-eq"))
    cons.append(Constraint(4, "inlier_count", "cardinality",
                           rhs=(1.0 - C.c4_inlier_slack * eta) * T))
    if version == 1:
        cons.append(Constraint(5, "obs_noise_bound", "quadratic-bound",
                               rhs=C.c_obs_noise * model.tau2 * (m + logTd)))
        cons.append(Constraint(6, "proc_noise_bound", "quadratic-bound",
                               rhs=C.c_proc_noise * model.sigma2 * (d + logTd)))
        dev = C.c_subsample * rho ** 2 * B_norm ** 2 * math.sqrt(
            t * math.log(max(d * T / (t * delta), math.e)))
        cons.append(Constraint(7, "window_subsample", "psd-window",
                               rhs=dev, rhs_matrix=eta * O_t + dev * I_d))
        cons.append(Constraint(8, "initial_state_bound", "quadratic-bound",
                               rhs=model.R2 * (d + C.c5_init_bound * math.log(1.0 / delta))))
    else:
        cons.append(Constraint(5, "initial_state_bound", "quadratic-bound",
                               rhs=model.R2 * (d + C.c5_init_bound * math.log(1.0 / delta))))
        cons.append(Constraint(6, "boolean_b", "boolean"))
        n_w = int(math.ceil(T / t))
        cons.append(Constraint(7, "good_window_count", "cardinality",
                               rhs=(1.0 - delta1) * n_w))
        cons.append(Constraint(8, "bad_window_outlier_overlap", "cardinality",
                               rhs=C.c8_many_ab * eta * delta1 * T))
        cons.append(Constraint(9, "confidence_funnel", "band", rhs=eps_geo))
        ep = _eta_power(eta, k)
        cons.append(Constraint(10, "windowed_proc_noise_avg", "avg-noise",
                               rhs=C.c10_totalnoise * ep * t * profile.alpha
                               * model.sigma2 * rho ** 2 * m * k))
        cons.append(Constraint(11, "window_endpoint_noise_avg", "avg-noise",
                               rhs=C.c11_totalnoise_dumb * model.sigma2 * rho ** 2 * d))
        cons.append(Constraint(12, "obs_noise_avg", "avg-noise",
                               rhs=C.c12_avg_obs_noise * model.tau2
                               * (m + math.log(2.0 / delta) / T)))
        cons.append(Constraint(13, "corrupted_obs_noise_avg", "avg-noise",
                               rhs=C.c13_corrupt_obs_noise * m * k * model.tau2 * ep))
        dev = C.c14_subsample_conf * rho ** 2 * B_norm ** 2 * math.sqrt(
            t * math.log(max(d / delta1, math.e)))
        cons.append(Constraint(14, "window_subsample_conf", "psd-window",
                               rhs=dev, rhs_matrix=eta * O_t + dev * I_d))

    return ProgramSpec(
        version=version, model=model, y=y, eta=eta, delta=delta, t=t,
        profile=profile, constraints=tuple(cons), constants=C, k=k,
        delta1=delta1, x_prime=x_prime, eps_geo=eps_geo,
        include_x0_in_objective=include_x0_in_objective,
        measurement_uses_prev_state=measurement_uses_prev_state,
    )


def _fit_residuals(spec: ProgramSpec, cand: Candidate) -> np.ndarray:
    """y_i - B x_ref - v_i where x_ref is x_i or x_{i-1} per the toggle."""
    m = spec.model
    if spec.measurement_uses_prev_state:
        x_ref = np.vstack([cand.x[:1], cand.x[:-1]])
    else:
        x_ref = cand.x
    return spec.y - x_ref @ m.B.T - cand.v


def check_feasibility(cand: Candidate, spec: ProgramSpec,
                      tol: float = 1e-7) -> FeasibilityReport:
    """Signed slack of every constraint family at the candidate."""
    model = spec.model
    T, t = spec.T, spec.t
    A, B = model.A, model.B
    a = np.asarray(cand.a, dtype=float)
    slacks = {}
    scale = max(1.0, float(np.abs(spec.y).max()))

    for con in spec.constraints:
        name = con.name
        if name == "boolean_a":
            slacks[name] = -float(np.max(np.abs(a * a - a)))
        elif name == "dynamics":
            resid = cand.x[1:] - cand.x[:-1] @ A.T - cand.w
            slacks[name] = -float(np.abs(resid).max(initial=0.0)) / scale
        elif name == "fit_accepted":
            resid = _fit_residuals(spec, cand)
            slacks[name] = -float(np.max(np.abs(a[:, None] * resid))) / scale
        elif name == "inlier_count":
            slacks[name] = float(a.sum() - con.rhs)
        elif name == "obs_noise_bound":
            slacks[name] = float(con.rhs - np.max(np.sum(cand.v ** 2, axis=1)))
        elif name == "proc_noise_bound":
            slacks[name] = float(con.rhs - np.max(np.sum(cand.w ** 2, axis=1)))
        elif name == "initial_state_bound":
            slacks[name] = float(con.rhs - np.sum(cand.x[0] ** 2))
        elif name in ("window_subsample", "window_subsample_conf"):
            slacks[name] = _psd_window_slack(spec, cand, con)
        elif name == "boolean_b":
            bb = np.asarray(cand.b, dtype=float)
            slacks[name] = -float(np.max(np.abs(bb * bb - bb)))
        elif name == "good_window_count":
            slacks[name] = float(np.sum(cand.b) - con.rhs)
        elif name == "bad_window_outlier_overlap":
            ell = np.arange(T) // t
            overlap = np.sum((1.0 - np.asarray(cand.b)[ell]) * (1.0 - a))
            slacks[name] = float(con.rhs - overlap)
        elif name == "confidence_funnel":
            slacks[name] = _funnel_slack(spec, cand)
        elif name == "windowed_proc_noise_avg":
            slacks[name] = float(con.rhs - _windowed_proc_noise(spec, cand))
        elif name == "window_endpoint_noise_avg":
            slacks[name] = float(con.rhs - _endpoint_noise(spec, cand))
        elif name == "obs_noise_avg":
            slacks[name] = float(con.rhs - np.sum(cand.v ** 2) / T)
        elif name == "corrupted_obs_noise_avg":
            lhs = np.sum((1.0 - a) * np.sum(cand.v ** 2, axis=1)) / T
            slacks[name] = float(con.rhs - lhs)
        else:  # pragma: no cover - defensive
            raise KeyError(name)
    return FeasibilityReport(slacks=slacks, tol=tol * scale)


def _psd_window_slack(spec: ProgramSpec, cand: Candidate, con: Constraint) -> float:
    """Most negative eigenvalue of (rhs - lhs) across windows."""
    model = spec.model
    T, t = spec.T, spec.t
    terms = _window_gram_terms(model.A, model.B, t)
    a = np.asarray(cand.a, dtype=float)
    gated = con.name == "window_subsample_conf"
    worst = math.inf
    for l, (lo, hi) in enumerate(_window_slices(T, t)):
        n = hi - lo
        lhs = np.tensordot(1.0 - a[lo:hi], terms[:n], axes=1)
        rhs = con.rhs_matrix * (n / t)
        if gated:
            bl = float(cand.b[l])
            lhs = bl * lhs
            rhs = bl * rhs
        worst = min(worst, float(np.linalg.eigvalsh(rhs - lhs)[0]))
    return worst


def _funnel_slack(spec: ProgramSpec, cand: Candidate) -> float:
    d = spec.model.d
    rho = spec.profile.rho
    ell = np.arange(spec.T) // spec.t
    band = spec.eps_geo + (spec.constants.c9_funnel * rho ** 2 * spec.model.R2
                           * (d + math.log(1.0 / spec.delta)) / 2.0 ** ell)
    dist2 = np.sum((cand.x - spec.x_prime) ** 2, axis=1)
    return float(np.min(band - dist2))


def _windowed_proc_noise(spec: ProgramSpec, cand: Candidate) -> float:
    """(1/T) sum over windows and offsets of rejected-step propagated noise.

    Within a window starting at l*t, z_j = sum_{i<=j} A^(j-i) w_{lt+i} is
    accumulated by the state recursion and scored through B at every
    rejected offset j.
    """
    model = spec.model
    A, B = model.A, model.B
    a = np.asarray(cand.a, dtype=float)
    total = 0.0
    for lo, hi in _window_slices(spec.T, spec.t):
        z = np.zeros(model.d)
        for j in range(1, hi - lo):
            gi = lo + j          # global step index; w index gi - 1
            z = A @ z + cand.w[gi - 1]
            total += (1.0 - a[gi]) * float(np.sum((B @ z) ** 2))
    return total / spec.T


def _endpoint_noise(spec: ProgramSpec, cand: Candidate) -> float:
    """(1/T) sum over windows of the squared propagated noise at the window end."""
    model = spec.model
    A = model.A
    total = 0.0
    for lo, hi in _window_slices(spec.T, spec.t):
        z = np.zeros(model.d)
        for j in range(1, hi - lo + 1):
            gi = lo + j
            if gi - 1 >= cand.w.shape[0]:
                break
            z = A @ z + cand.w[gi - 1]
        total += float(np.sum(z ** 2))
    return total / spec.T


def ground_truth_candidate(episode, spec: ProgramSpec) -> Candidate:
    """The true trajectory, noises, and mask packed as a candidate.

    Observation noise on rejected steps is zeroed so the fit constraint
    holds trivially there; window indicators are set from the spectral
    test of the gated psd constraint.
    """
    v = episode.v_star.copy()
    v[~episode.a_star] = 0.0
    b = None
    if spec.version == 2:
        b = window_success_indicators(spec, episode.a_star)
    return Candidate(x=episode.x_star, w=episode.w_star, v=v,
                     a=episode.a_star.astype(float), b=b)


def window_success_indicators(spec: ProgramSpec, a_mask) -> np.ndarray:
    """b_l = 1 where the window passes the gated spectral subsampling test."""
    con = next(c for c in spec.constraints if c.name == "window_subsample_conf")
    model = spec.model
    terms = _window_gram_terms(model.A, model.B, spec.t)
    a = np.asarray(a_mask, dtype=float)
    out = []
    for lo, hi in _window_slices(spec.T, spec.t):
        n = hi - lo
        lhs = np.tensordot(1.0 - a[lo:hi], terms[:n], axes=1)
        rhs = con.rhs_matrix * (n / spec.t)
        out.append(1.0 if np.linalg.eigvalsh(rhs - lhs)[0] >= -1e-10 else 0.0)
    return np.array(out)


def smoother_candidate(episode, spec: ProgramSpec) -> Candidate:
    """Oracle-smoother candidate: MAP on the clean steps, mask = truth.

    v_i is the smoother residual on accepted steps and zero elsewhere.
    """
    from .kalman import smoother
    x_hat, w_hat, _ = smoother(episode.model, episode.y, episode.a_star)
    if spec.measurement_uses_prev_state:
        x_ref = np.vstack([x_hat[:1], x_hat[:-1]])
    else:
        x_ref = x_hat
    v = episode.y - x_ref @ episode.model.B.T
    v[~episode.a_star] = 0.0
    b = None
    if spec.version == 2:
        b = window_success_indicators(spec, episode.a_star)
    return Candidate(x=x_hat, w=w_hat, v=v, a=episode.a_star.astype(float), b=b)
