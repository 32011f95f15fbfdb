"""Causal Kalman filter, masked batch smoother, risk scoring, stability constants.

The smoother is solved in information (batch least-squares) form: the
negative log posterior restricted to masked-in observations is a strongly
convex quadratic in the stacked trajectory whose Hessian is block
tridiagonal, so one sparse symmetric solve recovers the exact minimizer
under any mask.  The same quadratic evaluator scores candidate
trajectories, which keeps the objective used by the robust programs and
the oracle numerically identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class FilterUnstableError(RuntimeError):
    pass


@dataclass(frozen=True)
class FilterState:
    """One step of the causal filter: predicted and updated moments plus gain."""

    x_pred: np.ndarray
    P_pred: np.ndarray
    x_post: np.ndarray
    P_post: np.ndarray
    K: np.ndarray
    S: np.ndarray


@dataclass(frozen=True)
class RiskReport:
    """Scores a trajectory estimate against the clean posterior objective."""

    nll: float
    opt: float
    excess: float
    per_window_state_err: np.ndarray

    def to_dict(self) -> dict:
        return {
            "nll": self.nll,
            "opt": self.opt,
            "excess": self.excess,
            "per_window_state_err": self.per_window_state_err.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def initial_state(model) -> FilterState:
    """Prior-only state before any observation: mean zero, covariance R^2 I."""
    d = model.d
    P0 = model.R2 * np.eye(d)
    z = np.zeros(d)
    return FilterState(
        x_pred=z, P_pred=P0, x_post=z, P_post=P0,
        K=np.zeros((d, model.m)), S=model.tau2 * np.eye(model.m),
    )


def filter_step(state: FilterState, y_t, model, first: bool = False) -> FilterState:
    """Advance the filter one step; ``y_t = None`` means a dropped observation.

    On the first step the prior is already the prediction, so no time
    update is applied before the measurement update.
    """
    A = model.A
    d, m = model.d, model.m
    if first:
        x_pred = state.x_pred
        P_pred = state.P_pred
    else:
        x_pred = A @ state.x_post
        P_pred = A @ state.P_post @ A.T + model.sigma2 * np.eye(d)
        P_pred = 0.5 * (P_pred + P_pred.T)
    if y_t is None:
        return FilterState(x_pred, P_pred, x_pred.copy(), P_pred.copy(),
                           np.zeros((d, m)), model.tau2 * np.eye(m))
    B = model.B
    S = B @ P_pred @ B.T + model.tau2 * np.eye(m)
    S = 0.5 * (S + S.T)
    K = np.linalg.solve(S, B @ P_pred).T
    innov = np.asarray(y_t, dtype=float) - B @ x_pred
    x_post = x_pred + K @ innov
    P_post = (np.eye(d) - K @ B) @ P_pred
    P_post = 0.5 * (P_post + P_post.T)
    return FilterState(x_pred, P_pred, x_post, P_post, K, S)


def run_filter(model, y: np.ndarray, mask=None):
    """Run the causal filter over a full episode.

    Returns (x_post T x d, x_pred T x d, states list).  Masked-out steps
    get a time update only.
    """
    y = np.atleast_2d(np.asarray(y, dtype=float))
    T = y.shape[0]
    if mask is None:
        mask = np.ones(T, dtype=bool)
    state = initial_state(model)
    x_post = np.empty((T, model.d))
    x_pred = np.empty((T, model.d))
    states = []
    for i in range(T):
        obs = y[i] if mask[i] else None
        state = filter_step(state, obs, model, first=(i == 0))
        x_post[i] = state.x_post
        x_pred[i] = state.x_pred
        states.append(state)
    return x_post, x_pred, states


def quadratic_objective(model, x_hat, y, weights) -> float:
    """The clean-posterior quadratic evaluated at a trajectory, divided by T.

    weights[i] multiplies the fit term of step i (an indicator or a
    relaxed value in [0, 1]).
    """
    x_hat = np.atleast_2d(np.asarray(x_hat, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    T = x_hat.shape[0]
    w = x_hat[1:] - x_hat[:-1] @ model.A.T
    fit = np.sum(weights * np.sum((x_hat @ model.B.T - y) ** 2, axis=1))
    total = (fit / model.tau2
             + np.sum(w ** 2) / model.sigma2
             + np.sum(x_hat[0] ** 2) / model.R2)
    return float(total / T)


def masked_map(model, y, weights, tilt_weights=None, tilt_centers=None):
    """Exact minimizer of the masked posterior quadratic.

    Minimizes over trajectories x:
        ||x_0||^2/R^2 + sum ||x_i - A x_{i-1}||^2/sigma^2
        + sum weights[i] ||B x_i - y_i||^2/tau^2
        + sum tilt_weights[i] ||x_i - tilt_centers[i]||^2
    via one sparse solve of the block-tridiagonal normal equations.
    Returns (x_hat, w_hat, objective/T) where the objective excludes the
    tilt terms.
    """
    y = np.atleast_2d(np.asarray(y, dtype=float))
    T = y.shape[0]
    d = model.d
    A, B = model.A, model.B
    weights = np.asarray(weights, dtype=float)
    AtA = A.T @ A / model.sigma2
    BtB = B.T @ B / model.tau2
    At = A.T / model.sigma2
    I = np.eye(d)

    diag_blocks = np.empty((T, d, d))
    rhs = np.zeros((T, d))
    for i in range(T):
        H = weights[i] * BtB
        if i == 0:
            H = H + I / model.R2
        else:
            H = H + I / model.sigma2
        if i < T - 1:
            H = H + AtA
        if tilt_weights is not None and tilt_weights[i] != 0.0:
            H = H + tilt_weights[i] * I
            rhs[i] += tilt_weights[i] * tilt_centers[i]
        diag_blocks[i] = H
        rhs[i] += weights[i] * (B.T @ y[i]) / model.tau2

    if T == 1:
        x = np.linalg.solve(diag_blocks[0], rhs[0])[None, :]
    else:
        H = sp.lil_matrix((T * d, T * d))
        for i in range(T):
            H[i * d:(i + 1) * d, i * d:(i + 1) * d] = diag_blocks[i]
            if i < T - 1:
                H[i * d:(i + 1) * d, (i + 1) * d:(i + 2) * d] = -At
                H[(i + 1) * d:(i + 2) * d, i * d:(i + 1) * d] = -At.T
        x = spla.spsolve(H.tocsc(), rhs.ravel()).reshape(T, d)
    w_hat = x[1:] - x[:-1] @ A.T
    obj = quadratic_objective(model, x, y, weights)
    return x, w_hat, obj


def smoother(model, y, mask):
    """MAP trajectory given observations and an inclusion mask.

    Returns (x_hat, w_hat, opt_value) where opt_value is the attained
    masked objective divided by T.
    """
    y = np.atleast_2d(np.asarray(y, dtype=float))
    mask = np.asarray(mask, dtype=bool)
    return masked_map(model, y, mask.astype(float))


def clean_nll(x_hat, episode) -> float:
    """Clean posterior negative log likelihood of a candidate trajectory.

    Fit terms are scored only on the uncorrupted steps of the episode,
    using the true mask.
    """
    return quadratic_objective(episode.model, x_hat, episode.y,
                               episode.a_star.astype(float))


def risk_report(x_hat, episode, window: int | None = None) -> RiskReport:
    """Score a trajectory: NLL, oracle OPT on the true mask, excess, window errors."""
    nll = clean_nll(x_hat, episode)
    x_opt, _, opt = smoother(episode.model, episode.y, episode.a_star)
    x_hat = np.atleast_2d(np.asarray(x_hat, dtype=float))
    T = x_hat.shape[0]
    t = window if window is not None else max(1, T // 8)
    idx = np.arange(0, T, t)
    errs = np.sum((x_hat[idx] - episode.x_star[idx]) ** 2, axis=1)
    return RiskReport(nll=nll, opt=opt, excess=nll - opt, per_window_state_err=errs)


def gain_sequence(model, n: int):
    """Time-varying gains and closed-loop matrices for the first n steps.

    Returns (K_list, M_list) where M_t = (I - K_t B) A maps the estimation
    error from step t-1 to step t.
    """
    d, m = model.d, model.m
    A, B = model.A, model.B
    P_pred = model.R2 * np.eye(d)
    Ks, Ms = [], []
    for i in range(n):
        if i > 0:
            P_pred = A @ Ps @ A.T + model.sigma2 * np.eye(d)
            P_pred = 0.5 * (P_pred + P_pred.T)
        S = B @ P_pred @ B.T + model.tau2 * np.eye(m)
        K = np.linalg.solve(0.5 * (S + S.T), B @ P_pred).T
        Ps = (np.eye(d) - K @ B) @ P_pred
        Ps = 0.5 * (Ps + Ps.T)
        Ks.append(K)
        Ms.append((np.eye(d) - K @ B) @ A)
    return Ks, Ms


def stability_constants(model, tol: float = 1e-12, max_iters: int = 100000):
    """Empirical exponential-stability constants of the filter error dynamics.

    Runs the covariance recursion to convergence, takes delta_stab as the
    steady-state closed-loop spectral radius plus a margin, and lambda as
    an envelope constant making ||M_t M_{t-1} ... M_{s+1}|| <= lambda *
    delta_stab^(t-s) over all checked ranges.  Also returns the largest
    gain norm.
    """
    d, m = model.d, model.m
    A, B = model.A, model.B
    P_pred = model.R2 * np.eye(d)
    K_bound = 0.0
    Ms = []
    Ps_prev = None
    converged_at = None
    for i in range(max_iters):
        if i > 0:
            P_pred = A @ Ps @ A.T + model.sigma2 * np.eye(d)
            P_pred = 0.5 * (P_pred + P_pred.T)
        S = B @ P_pred @ B.T + model.tau2 * np.eye(m)
        K = np.linalg.solve(0.5 * (S + S.T), B @ P_pred).T
        Ps = (np.eye(d) - K @ B) @ P_pred
        Ps = 0.5 * (Ps + Ps.T)
        K_bound = max(K_bound, float(np.linalg.norm(K, 2)))
        Ms.append((np.eye(d) - K @ B) @ A)
        if Ps_prev is not None and np.linalg.norm(Ps - Ps_prev) <= tol:
            converged_at = i
            break
        Ps_prev = Ps
    M_inf = Ms[-1]
    sr = float(np.max(np.abs(np.linalg.eigvals(M_inf))))
    if sr >= 1.0:
        raise FilterUnstableError(
            f"closed-loop spectral radius {sr:.4f} >= 1 after convergence")
    if sr < 1e-12 and max(float(np.linalg.norm(M, 2)) for M in Ms) < 1e-12:
        delta = 0.0
    elif sr < 1e-12:
        # nilpotent steady state but nonzero transients: small positive rate
        delta = 0.05
    else:
        delta = min(sr + 0.25 * (1.0 - sr), sr * 1.05 + 1e-12)
        delta = min(delta, 1.0 - 1e-9)

    # envelope constant over the transient gains, then the steady-state tail
    if delta == 0.0:
        # one-step forgetting: every error product vanishes, lambda = 1 suffices
        return 1.0, 0.0, K_bound

    Nc = len(Ms)
    # steady-state tail envelope sup_j ||M_inf^j|| / delta^j
    e_inf = 1.0
    Mj = np.eye(d)
    for j in range(1, 4 * Nc + 200):
        Mj = M_inf @ Mj
        n = float(np.linalg.norm(Mj, 2))
        e_inf = max(e_inf, n / delta ** j)
        if n < 1e-14:
            break
    lam = e_inf
    cap = min(Nc, 600)
    for s0 in range(cap):
        Phi = np.eye(d)
        final_ratio = 1.0
        for t in range(s0 + 1, Nc + 1):
            Phi = Ms[t - 1] @ Phi
            ratio = float(np.linalg.norm(Phi, 2)) / delta ** (t - s0)
            lam = max(lam, ratio)
            final_ratio = ratio
        lam = max(lam, e_inf * final_ratio)
    return float(lam), float(delta), float(K_bound)
