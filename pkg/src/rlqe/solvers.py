"""Solvers for the robust smoothing programs.

Two backends plus an exact reference:

- ``solve_alternating``: scalable heuristic alternating between the exact
  masked quadratic solve (given indicators) and a greedy indicator update
  (given the trajectory), with post-hoc feasibility certification.
- ``solve_moment_relaxation``: degree-2 moment (pseudoexpectation)
  relaxation for tiny instances; its optimum provably lower-bounds the
  combinatorial optimum because only valid constraints are imposed.
- ``brute_force_oracle``: exact minimizer by mask enumeration, T <= 14.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .config import SolverConfig, DEFAULT_CONSTANTS
from .kalman import masked_map, quadratic_objective
from .programs import (Candidate, ProgramSpec, check_feasibility,
                       _window_slices, _window_gram_terms)


@dataclass(frozen=True)
class SmootherSolution:
    """Output of any backend: estimates, objective, certification."""

    x_hat: np.ndarray
    w_hat: np.ndarray
    v_hat: np.ndarray
    a_hat: np.ndarray
    b_hat: np.ndarray | None
    objective: float
    feasibility: object
    backend: str
    flags: tuple = ()

    def candidate(self) -> Candidate:
        return Candidate(x=self.x_hat, w=self.w_hat, v=self.v_hat,
                         a=self.a_hat, b=self.b_hat)

    def to_json(self) -> str:
        return json.dumps({
            "x_hat": self.x_hat.tolist(),
            "w_hat": self.w_hat.tolist(),
            "v_hat": self.v_hat.tolist(),
            "a_hat": np.asarray(self.a_hat, dtype=float).tolist(),
            "b_hat": None if self.b_hat is None else
                     np.asarray(self.b_hat, dtype=float).tolist(),
            "objective": self.objective,
            "backend": self.backend,
            "flags": list(self.flags),
            "feasibility": None if self.feasibility is None
                           else self.feasibility.to_dict(),
        })


def _residuals(spec: ProgramSpec, x: np.ndarray) -> np.ndarray:
    return np.sum((x @ spec.model.B.T - spec.y) ** 2, axis=1)


def _make_v(spec: ProgramSpec, x: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Observation-noise estimates satisfying the fit constraint exactly."""
    if spec.measurement_uses_prev_state:
        x_ref = np.vstack([x[:1], x[:-1]])
    else:
        x_ref = x
    v = spec.y - x_ref @ spec.model.B.T
    v[a < 0.5] = 0.0
    return v


def _solve_trajectory(spec: ProgramSpec, a: np.ndarray, config: SolverConfig):
    """Exact masked quadratic solve; the funnel band enters as escalating
    quadratic penalties toward the prior-stage trajectory until satisfied."""
    model = spec.model
    if spec.version == 1 or spec.x_prime is None:
        return masked_map(model, spec.y, a)
    T, d = spec.T, model.d
    rho = spec.profile.rho
    ell = np.arange(T) // spec.t
    band = spec.eps_geo + (spec.constants.c9_funnel * rho ** 2 * model.R2
                           * (d + math.log(1.0 / spec.delta)) / 2.0 ** ell)
    tilt = np.zeros(T)
    x, w, obj = masked_map(model, spec.y, a)
    base = 1.0 / (model.sigma2 * T)
    for _ in range(config.funnel_penalty_max_iters):
        dist2 = np.sum((x - spec.x_prime) ** 2, axis=1)
        bad = dist2 > band * (1.0 + 1e-9)
        if not bad.any():
            break
        tilt[bad] = np.maximum(tilt[bad] * 8.0, base)
        x, w, obj = masked_map(model, spec.y, a, tilt_weights=tilt,
                               tilt_centers=spec.x_prime)
        base *= 8.0
    return x, w, obj


def _update_mask(spec: ProgramSpec, x: np.ndarray, b: np.ndarray | None):
    """Reject the budgeted count of worst-fitting steps, then repair any
    window whose rejected steps would carry too much observability mass."""
    T, t = spec.T, spec.t
    r = _residuals(spec, x)
    n_rej = int(math.floor(spec.constants.c4_inlier_slack * spec.eta * T))
    n_rej = min(n_rej, T)
    a = np.ones(T)
    if n_rej > 0:
        # largest residuals first, ties broken by lower index
        order = np.lexsort((np.arange(T), -r))
        a[order[:n_rej]] = 0.0

    # greedy psd repair per window: re-admit the smallest-residual rejected
    # step until the window's rejected Gram mass fits under the bound
    con = next((c for c in spec.constraints
                if c.name in ("window_subsample", "window_subsample_conf")), None)
    if con is not None:
        terms = _window_gram_terms(spec.model.A, spec.model.B, t)
        for l, (lo, hi) in enumerate(_window_slices(T, t)):
            if b is not None and b[l] < 0.5:
                continue
            n = hi - lo
            rhs = con.rhs_matrix * (n / t)
            while True:
                lhs = np.tensordot(1.0 - a[lo:hi], terms[:n], axes=1)
                if np.linalg.eigvalsh(rhs - lhs)[0] >= -1e-10:
                    break
                rejected = [i for i in range(lo, hi) if a[i] < 0.5]
                if not rejected:
                    break
                back = min(rejected, key=lambda i: (r[i], i))
                a[back] = 1.0
    return a


def _update_b(spec: ProgramSpec, a: np.ndarray) -> np.ndarray:
    """Mark as failed the allowed number of windows with worst spectral slack."""
    con = next(c for c in spec.constraints if c.name == "window_subsample_conf")
    T, t = spec.T, spec.t
    n_w = spec.n_windows
    terms = _window_gram_terms(spec.model.A, spec.model.B, t)
    slack = np.empty(n_w)
    for l, (lo, hi) in enumerate(_window_slices(T, t)):
        n = hi - lo
        lhs = np.tensordot(1.0 - a[lo:hi], terms[:n], axes=1)
        slack[l] = np.linalg.eigvalsh(con.rhs_matrix * (n / t) - lhs)[0]
    allowed = int(math.floor(spec.delta1 * n_w))
    b = np.ones(n_w)
    worst = np.argsort(slack)
    for l in worst[:allowed]:
        if slack[l] < -1e-10:
            b[l] = 0.0
    return b


def _psd_ok(spec: ProgramSpec, a: np.ndarray, b) -> bool:
    con = next((c for c in spec.constraints
                if c.name in ("window_subsample", "window_subsample_conf")), None)
    if con is None:
        return True
    terms = _window_gram_terms(spec.model.A, spec.model.B, spec.t)
    for l, (lo, hi) in enumerate(_window_slices(spec.T, spec.t)):
        if b is not None and b[l] < 0.5:
            continue
        n = hi - lo
        lhs = np.tensordot(1.0 - a[lo:hi], terms[:n], axes=1)
        if np.linalg.eigvalsh(con.rhs_matrix * (n / spec.t) - lhs)[0] < -1e-10:
            return False
    return True


def _local_search(spec: ProgramSpec, config: SolverConfig,
                  obj: float, a: np.ndarray, b):
    """First-improvement 1-swap refinement of the rejection set.

    Only used on short horizons; each candidate swap costs one exact
    quadratic solve, capped by the configured budget.
    """
    budget = config.local_search_budget
    a = a.copy()
    x, w, _ = _solve_trajectory(spec, a, config)
    obj = spec.objective(Candidate(x=x, w=w, v=_make_v(spec, x, a), a=a, b=b))
    best = (obj, x, w, a.copy())
    improved = True
    while improved and budget > 0:
        improved = False
        rejected = np.flatnonzero(best[3] < 0.5)
        accepted = np.flatnonzero(best[3] >= 0.5)
        for i in rejected:
            for j in accepted:
                if budget <= 0:
                    break
                trial = best[3].copy()
                trial[i], trial[j] = 1.0, 0.0
                if not _psd_ok(spec, trial, b):
                    continue
                budget -= 1
                x, w, _ = _solve_trajectory(spec, trial, config)
                o = spec.objective(Candidate(x=x, w=w,
                                             v=_make_v(spec, x, trial),
                                             a=trial, b=b))
                if o < best[0] - 1e-12:
                    best = (o, x, w, trial)
                    improved = True
                    break
            if improved or budget <= 0:
                break
    return best


def solve_alternating(spec: ProgramSpec,
                      config: SolverConfig = SolverConfig()) -> SmootherSolution:
    """Alternating minimization with deterministic tie-breaking.

    Alternates the exact trajectory solve and the greedy indicator update
    until the objective stops improving; returns the best iterate seen,
    flagged if the iteration cycled without settling.
    """
    T = spec.T
    a = np.ones(T)
    b = np.ones(spec.n_windows) if spec.version == 2 else None
    best = None
    prev_obj = math.inf
    flags = []
    for _ in range(config.max_rounds):
        x, w, obj = _solve_trajectory(spec, a, config)
        obj = spec.objective(Candidate(x=x, w=w, v=_make_v(spec, x, a), a=a, b=b))
        if best is None or obj < best[0] - 1e-15:
            best = (obj, x, w, a.copy(), None if b is None else b.copy())
        if abs(prev_obj - obj) < config.objective_tol:
            break
        prev_obj = obj
        a_new = _update_mask(spec, x, b)
        if spec.version == 2:
            b = _update_b(spec, a_new)
            a_new = _update_mask(spec, x, b)
        if np.array_equal(a_new, a):
            break
        a = a_new
    else:
        flags.append("max_rounds_reached")
    obj, x, w, a, b = best
    if spec.T <= config.local_search_max_T:
        obj, x, w, a = _local_search(spec, config, obj, a, b)
        best = (obj, x, w, a, b)
    v = _make_v(spec, x, a)
    cand = Candidate(x=x, w=w, v=v, a=a, b=b)
    report = check_feasibility(cand, spec)
    return SmootherSolution(x_hat=x, w_hat=w, v_hat=v, a_hat=a, b_hat=b,
                            objective=obj, feasibility=report,
                            backend="alternating", flags=tuple(flags))


def brute_force_oracle(model, y, eta: float,
                       constants=DEFAULT_CONSTANTS,
                       include_x0_in_objective: bool = True):
    """Exact program optimum by enumerating all admissible masks (T <= 14).

    For each mask with enough accepted steps the inner problem is the
    masked quadratic, solved exactly; returns the global minimizer.
    """
    y = np.atleast_2d(np.asarray(y, dtype=float))
    T = y.shape[0]
    if T > 14:
        raise ValueError("brute force limited to T <= 14")
    max_rej = T - int(math.ceil((1.0 - constants.c4_inlier_slack * eta) * T - 1e-12))
    max_rej = max(0, min(max_rej, T))
    best = None
    for n_rej in range(max_rej + 1):
        for rej in itertools.combinations(range(T), n_rej):
            a = np.ones(T)
            a[list(rej)] = 0.0
            x, w, _ = masked_map(model, y, a)
            obj = quadratic_objective(model, x, y, a)
            if not include_x0_in_objective:
                obj -= float(np.sum(x[0] ** 2)) / (model.R2 * T)
            if best is None or obj < best[0] - 1e-15:
                best = (obj, x, w, a)
    obj, x, w, a = best
    v = y - x @ model.B.T
    v[a < 0.5] = 0.0
    return SmootherSolution(x_hat=x, w_hat=w, v_hat=v, a_hat=a, b_hat=None,
                            objective=obj, feasibility=None,
                            backend="brute_force")


def solve_moment_relaxation(spec: ProgramSpec,
                            config: SolverConfig = SolverConfig()) -> SmootherSolution:
    """Degree-2 moment relaxation solved as one semidefinite program.

    Variables are stacked as (1, x, w, v, a, u[, b]) where u_i stands for
    a_i (y_i - B x_i); the constraints imposed are exactly the degree-2
    consequences of the program constraints (boolean diagonals, dynamics
    in all cross moments, the u-linking identities, cardinality), so the
    optimum can only be lower than the true combinatorial optimum.  The
    returned trajectory is the first-moment extraction.
    """
    import cvxpy as cp

    model = spec.model
    T, d, m = spec.T, spec.model.d, spec.model.m
    eta0 = spec.eta <= 0.0

    # variable layout inside the moment matrix
    idx = {"one": 0}
    pos = 1

    def alloc(name, n):
        nonlocal pos
        idx[name] = (pos, pos + n)
        pos += n

    alloc("x", T * d)
    alloc("w", (T - 1) * d)
    alloc("v", T * m)
    if not eta0:
        alloc("a", T)
        alloc("u", T * m)
        if spec.version == 2:
            alloc("b", spec.n_windows)
    N = pos
    if N > config.moment_matrix_cap:
        raise ValueError(f"moment matrix side {N} exceeds cap")

    M = cp.Variable((N, N), symmetric=True)
    cons = [M >> 0, M[0, 0] == 1]

    def x_slice(i):
        lo = idx["x"][0] + i * d
        return slice(lo, lo + d)

    def w_slice(i):  # w_i drives step i, defined for i = 1..T-1
        lo = idx["w"][0] + (i - 1) * d
        return slice(lo, lo + d)

    def v_slice(i):
        lo = idx["v"][0] + i * m
        return slice(lo, lo + m)

    def u_slice(i):
        lo = idx["u"][0] + i * m
        return slice(lo, lo + m)

    A, B = model.A, model.B

    # dynamics hold against every variable (and the constant):
    # E[(x_i - A x_{i-1} - w_i) z'] = 0
    for i in range(1, T):
        expr = M[x_slice(i), :] - A @ M[x_slice(i - 1), :] - M[w_slice(i), :]
        cons.append(expr == 0)

    if eta0:
        # all steps accepted: v_i = y_i - B x_i against every variable,
        # E[v_i z'] = y_i E[z'] - B E[x_i z']
        for i in range(T):
            cons.append(M[v_slice(i), :]
                        == cp.outer(spec.y[i], M[0, :]) - B @ M[x_slice(i), :])
    else:
        a0 = idx["a"][0]
        for i in range(T):
            ai = a0 + i
            cons.append(M[ai, ai] == M[0, ai])          # a_i^2 = a_i
            # u_i = a_i y_i - a_i B x_i in first moments
            lin = cp.reshape(M[ai, x_slice(i)], (d,), order="C")
            cons.append(M[0, u_slice(i)] == spec.y[i] * M[0, ai] - B @ lin)
            # a_i u_i = u_i
            cons.append(M[ai, u_slice(i)] == M[0, u_slice(i)])
            # E[u_i' (y_i - B x_i)] = E[||u_i||^2]
            fit_dot = (spec.y[i] @ M[0, u_slice(i)]
                       - cp.trace(B.T @ M[u_slice(i), x_slice(i)].T))
            cons.append(fit_dot == cp.trace(M[u_slice(i), u_slice(i)]))
            # ||u_i||^2 <= ||v_i||^2 (valid since u = a v on the fit constraint)
            cons.append(cp.trace(M[u_slice(i), u_slice(i)])
                        <= cp.trace(M[v_slice(i), v_slice(i)]))
        # cardinality
        floor_rhs = next(c for c in spec.constraints if c.name == "inlier_count").rhs
        cons.append(cp.sum(M[0, a0:a0 + T]) >= floor_rhs)
        if spec.version == 2 and "b" in idx:
            b0 = idx["b"][0]
            n_w = spec.n_windows
            for l in range(n_w):
                bl = b0 + l
                cons.append(M[bl, bl] == M[0, bl])
            c7 = next(c for c in spec.constraints if c.name == "good_window_count")
            cons.append(cp.sum(M[0, b0:b0 + n_w]) >= c7.rhs)
            c8 = next(c for c in spec.constraints
                      if c.name == "bad_window_outlier_overlap")
            overlap = 0
            for i in range(T):
                bl = b0 + spec.ell(i)
                ai = a0 + i
                overlap = overlap + 1 - M[0, bl] - M[0, ai] + M[bl, ai]
            cons.append(overlap <= c8.rhs)
            if spec.x_prime is not None:
                c9 = next(c for c in spec.constraints
                          if c.name == "confidence_funnel")
                rho = spec.profile.rho
                for i in range(T):
                    band = (spec.eps_geo + spec.constants.c9_funnel * rho ** 2
                            * model.R2 * (d + math.log(1.0 / spec.delta))
                            / 2.0 ** spec.ell(i))
                    xp = spec.x_prime[i]
                    dist2 = (cp.trace(M[x_slice(i), x_slice(i)])
                             - 2 * xp @ M[0, x_slice(i)] + float(xp @ xp))
                    cons.append(dist2 <= band)

    if config.moment_include_bounds:
        for c in spec.constraints:
            if c.name == "obs_noise_bound":
                for i in range(T):
                    cons.append(cp.trace(M[v_slice(i), v_slice(i)]) <= c.rhs)
            elif c.name == "proc_noise_bound":
                for i in range(1, T):
                    cons.append(cp.trace(M[w_slice(i), w_slice(i)]) <= c.rhs)
            elif c.name == "initial_state_bound":
                cons.append(cp.trace(M[x_slice(0), x_slice(0)]) <= c.rhs)
            elif c.name == "obs_noise_avg":
                tot = sum(cp.trace(M[v_slice(i), v_slice(i)]) for i in range(T))
                cons.append(tot / T <= c.rhs)

    # objective: fit term via ||u||^2 (or directly at eta = 0), process
    # noise and optionally the initial state
    if eta0:
        fit = 0
        for i in range(T):
            # E||B x_i - y_i||^2
            fit = fit + (cp.trace(B @ M[x_slice(i), x_slice(i)] @ B.T)
                         - 2 * spec.y[i] @ (B @ M[0, x_slice(i)])
                         + float(spec.y[i] @ spec.y[i]))
    else:
        fit = sum(cp.trace(M[u_slice(i), u_slice(i)]) for i in range(T))
    proc = sum(cp.trace(M[w_slice(i), w_slice(i)]) for i in range(1, T))
    obj_expr = fit / model.tau2 + proc / model.sigma2
    if spec.include_x0_in_objective:
        obj_expr = obj_expr + cp.trace(M[x_slice(0), x_slice(0)]) / model.R2
    obj_expr = obj_expr / T

    prob = cp.Problem(cp.Minimize(obj_expr), cons)
    prob.solve(solver=cp.SCS, eps=config.moment_eps, max_iters=200000,
               verbose=False)
    flags = []
    if prob.status not in ("optimal", "optimal_inaccurate"):
        flags.append(f"solver_status_{prob.status}")
    if prob.status == "optimal_inaccurate":
        flags.append("optimal_inaccurate")

    Mval = M.value
    x_hat = Mval[0, idx["x"][0]:idx["x"][1]].reshape(T, d)
    # re-derive w from x so the dynamics hold exactly on the extraction
    w_hat = x_hat[1:] - x_hat[:-1] @ A.T
    v_hat = Mval[0, idx["v"][0]:idx["v"][1]].reshape(T, m)
    if eta0:
        a_hat = np.ones(T)
        b_hat = np.ones(spec.n_windows) if spec.version == 2 else None
    else:
        a_hat = np.clip(Mval[0, idx["a"][0]:idx["a"][1]], 0.0, 1.0)
        b_hat = None
        if spec.version == 2 and "b" in idx:
            b_hat = np.clip(Mval[0, idx["b"][0]:idx["b"][1]], 0.0, 1.0)
    cand = Candidate(x=x_hat, w=w_hat, v=v_hat, a=a_hat, b=b_hat)
    report = check_feasibility(cand, spec)
    return SmootherSolution(x_hat=x_hat, w_hat=w_hat, v_hat=v_hat, a_hat=a_hat,
                            b_hat=b_hat, objective=float(prob.value),
                            feasibility=report, backend="moment",
                            flags=tuple(flags))
