"""Stationary robust filtering for strictly stable systems.

For a strictly stable A the observation process is (asymptotically)
stationary, the optimal one-step predictor is a fixed-gain linear filter,
and truncating both its history depth and its output magnitude makes it
robust to a small fraction of arbitrarily corrupted observations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class NotStrictlyStableError(ValueError):
    pass


@dataclass(frozen=True)
class WienerModel:
    """Stationary predictor: gain, closed loop, state covariance, schedule."""

    K: np.ndarray           # stationary predictor gain
    F: np.ndarray           # closed-loop matrix A - KB
    Sigma: np.ndarray       # stationary state covariance
    h: int                  # history depth
    tau_trunc: float        # output truncation radius
    sigma_y: float          # root mean square of one gain-weighted observation
    model: object = None


def _check_stable(A):
    sr = float(np.max(np.abs(np.linalg.eigvals(np.atleast_2d(A)))))
    if sr >= 1.0 - 1e-9:
        raise NotStrictlyStableError(
            f"spectral radius {sr:.6f} is not strictly below 1")
    return sr


def stationary_covariance(model) -> np.ndarray:
    """Sigma = sigma^2 (I + A A' + A^2 (A^2)' + ...), summed to convergence."""
    A = model.A
    _check_stable(A)
    d = A.shape[0]
    Sigma = np.zeros((d, d))
    term = model.sigma2 * np.eye(d)
    while np.linalg.norm(term) > 1e-14:
        Sigma += term
        term = A @ (term / model.sigma2) @ A.T * model.sigma2
    return 0.5 * (Sigma + Sigma.T)


def stationary_gain(model, h: int | None = None,
                    tau_trunc: float | None = None) -> WienerModel:
    """Converged one-step predictor gain and the derived filter quantities.

    The gain is the limit of the time-invariant prediction recursion
    (K = A P B' (B P B' + tau^2 I)^{-1} with P the steady prediction
    covariance), so x_{t+1} is predicted from past observations through
    the stable closed loop F = A - KB.
    """
    A, B = model.A, model.B
    _check_stable(A)
    d, m = A.shape[0], B.shape[0]
    Sigma = stationary_covariance(model)
    P = Sigma.copy()
    for _ in range(100000):
        S = B @ P @ B.T + model.tau2 * np.eye(m)
        K = A @ P @ B.T @ np.linalg.inv(0.5 * (S + S.T))
        P_new = A @ P @ A.T - K @ B @ P @ A.T + model.sigma2 * np.eye(d)
        P_new = 0.5 * (P_new + P_new.T)
        if np.linalg.norm(P_new - P) <= 1e-13:
            P = P_new
            break
        P = P_new
    S = B @ P @ B.T + model.tau2 * np.eye(m)
    K = A @ P @ B.T @ np.linalg.inv(0.5 * (S + S.T))
    F = A - K @ B
    _check_stable(F)
    # RMS of one gain-weighted stationary observation K y
    cov_y = B @ Sigma @ B.T + model.tau2 * np.eye(m)
    sigma_y = math.sqrt(max(float(np.trace(K @ cov_y @ K.T)), 0.0))
    return WienerModel(K=K, F=F, Sigma=Sigma, h=h if h is not None else 1,
                       tau_trunc=tau_trunc if tau_trunc is not None else math.inf,
                       sigma_y=sigma_y, model=model)


def truncated_filter(wmodel: WienerModel, y_window: np.ndarray) -> np.ndarray:
    """Depth-h linear prediction from the recent past, zeroed when too large.

    ``y_window`` holds past observations oldest first; the last entry is
    y_{t-1}.  Windows shorter than h are zero-padded on the old side.
    """
    y_window = np.atleast_2d(np.asarray(y_window, dtype=float))
    h = wmodel.h
    d = wmodel.F.shape[0]
    out = np.zeros(d)
    Fp = np.eye(d)
    n = y_window.shape[0]
    for s in range(1, h + 1):
        if n - s >= 0:
            out = out + Fp @ (wmodel.K @ y_window[n - s])
        Fp = wmodel.F @ Fp
    if np.linalg.norm(out) > wmodel.tau_trunc:
        return np.zeros(d)
    return out


def schedule_params(wmodel: WienerModel, eta: float,
                    c_h: float = 2.0, c_tau: float = 1.0) -> tuple[int, float]:
    """Corruption-rate dependent history depth and truncation radius.

    Depth grows like log(1/eta) against the closed-loop decay rate; the
    radius grows like ((1/eta) log(1/eta))^(1/3) in units of sigma_y.
    """
    if not (0.0 < eta < 0.5):
        raise ValueError("eta must lie in (0, 1/2)")
    Fn = float(np.linalg.norm(wmodel.F, 2))
    Fn = min(max(Fn, 1e-12), 1.0 - 1e-12)
    h = int(math.ceil(c_h * math.log(1.0 / eta) / math.log(1.0 / Fn)))
    h = max(h, 1)
    tau_trunc = c_tau * wmodel.sigma_y * ((1.0 / eta) * math.log(1.0 / eta)) ** (1.0 / 3.0)
    return h, tau_trunc


def robust_wiener_predict(model, y: np.ndarray, eta: float,
                          c_h: float = 2.0, c_tau: float = 1.0) -> np.ndarray:
    """One-step predictions x_hat[t] of x_t from y[0..t-1] with the schedule.

    Convenience wrapper: builds the stationary gain, sets (h, tau) from
    eta, and slides the truncated filter over the episode.
    """
    wm = stationary_gain(model)
    h, tau_trunc = schedule_params(wm, eta, c_h=c_h, c_tau=c_tau)
    wm = WienerModel(K=wm.K, F=wm.F, Sigma=wm.Sigma, h=h, tau_trunc=tau_trunc,
                     sigma_y=wm.sigma_y, model=model)
    y = np.atleast_2d(np.asarray(y, dtype=float))
    T = y.shape[0]
    out = np.zeros((T, model.d))
    for t in range(T):
        out[t] = truncated_filter(wm, y[max(0, t - h):t])
    return out


def simulate_stationary(model, seed: int):
    """Clean stationary episode: x_0 drawn from the stationary covariance.

    Returns an episode-like tuple (x, y) since the prior here differs from
    the N(0, R^2 I) initialization of the transient model.
    """
    Sigma = stationary_covariance(model)
    ss = np.random.SeedSequence(seed)
    rng_state, rng_obs = [np.random.default_rng(s) for s in ss.spawn(2)]
    d, m, T = model.d, model.m, model.T
    L = np.linalg.cholesky(Sigma + 1e-15 * np.eye(d))
    x = np.empty((T, d))
    x[0] = L @ rng_state.standard_normal(d)
    for i in range(1, T):
        x[i] = model.A @ x[i - 1] + math.sqrt(model.sigma2) * rng_state.standard_normal(d)
    y = x @ model.B.T + math.sqrt(model.tau2) * rng_obs.standard_normal((T, m))
    return x, y
