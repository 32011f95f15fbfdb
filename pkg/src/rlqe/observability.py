"""Observability analysis: Gram matrices, constants, windows, subspace splits.

The estimation guarantees rest on the system being completely observable
(the s-step Gram matrix O_s is well conditioned) and uniformly stable
(powers of A stay bounded).  This module estimates those constants from
the matrices, sizes the analysis windows, and splits state space into the
directions a window can and cannot see.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np


class UnobservableSystemError(ValueError):
    pass


class HorizonTooShortError(ValueError):
    def __init__(self, t, T):
        super().__init__(f"window size {t} exceeds horizon {T}; need T >= {t}")
        self.min_T = t


@dataclass(frozen=True)
class ObservabilityProfile:
    """Constants (s, kappa, alpha, rho) plus the Gram matrix they came from."""

    s: int
    kappa: float
    alpha: float
    rho: float
    gram_s: np.ndarray
    horizon_checked: int
    warning: str | None = None

    def to_dict(self) -> dict:
        return {
            "s": self.s,
            "kappa": self.kappa,
            "alpha": self.alpha,
            "rho": self.rho,
            "gram_s": self.gram_s.tolist(),
            "horizon_checked": self.horizon_checked,
            "warning": self.warning,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "ObservabilityProfile":
        d = json.loads(text)
        d["gram_s"] = np.array(d["gram_s"], dtype=float)
        return cls(**d)


@dataclass(frozen=True)
class SubspaceSplit:
    """Projectors onto the well and poorly observed parts of state space."""

    t: int
    zeta: float
    Pi: np.ndarray
    Pi_perp: np.ndarray
    gram_t: np.ndarray


def observability_gram(A: np.ndarray, B: np.ndarray, s: int) -> np.ndarray:
    """Sum of (A^i)' B'B A^i for i = 0 .. s-1.

    Large s uses binary splitting via O_{m+n} = O_m + (A^m)' O_n A^m, so
    window sizes far beyond any simulated horizon stay cheap.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if s < 1:
        raise ValueError("s must be at least 1")
    d = A.shape[0]
    BtB = B.T @ B
    if s <= 512:
        G = np.zeros((d, d))
        Ai = np.eye(d)
        for _ in range(s):
            G += Ai.T @ BtB @ Ai
            Ai = A @ Ai
        return 0.5 * (G + G.T)
    G = np.zeros((d, d))
    P = np.eye(d)
    for bit in bin(s)[2:]:
        G = G + P.T @ G @ P
        P = P @ P
        if bit == "1":
            G = G + P.T @ BtB @ P
            P = A @ P
    return 0.5 * (G + G.T)


def estimate_constants(A, B, s_max: int, horizon: int) -> ObservabilityProfile:
    """Find the observability horizon and measure (kappa, alpha, rho).

    s is the smallest power count making O_s nonsingular; kappa and alpha
    normalize its extreme eigenvalues by s; rho is the largest operator norm
    of A^j over j up to the given horizon.  A growth check flags possibly
    unstable systems instead of trying to certify power-boundedness.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if s_max < 1 or horizon < 1:
        raise ValueError("s_max and horizon must be positive")
    d = A.shape[0]
    gram = None
    s = None
    G = np.zeros((d, d))
    Ai = np.eye(d)
    BtB = B.T @ B
    for j in range(1, s_max + 1):
        G = G + Ai.T @ BtB @ Ai
        Ai = A @ Ai
        evals = np.linalg.eigvalsh(0.5 * (G + G.T))
        if evals[0] > 1e-12 * max(evals[-1], 1.0):
            s = j
            gram = 0.5 * (G + G.T)
            break
    if s is None:
        raise UnobservableSystemError(
            f"no s <= {s_max} makes the observability Gram matrix nonsingular")
    evals = np.linalg.eigvalsh(gram)
    kappa = evals[0] / s
    alpha = evals[-1] / s

    rho = 0.0
    norm_half = None
    Aj = np.eye(d)
    for j in range(horizon + 1):
        n = np.linalg.norm(Aj, 2)
        rho = max(rho, n)
        if j == horizon // 2:
            norm_half = n
        if j < horizon:
            Aj = A @ Aj
    norm_end = np.linalg.norm(Aj, 2)
    warning = None
    if norm_half is not None and norm_end > 10.0 * max(norm_half, 1e-300):
        warning = "possibly unstable: ||A^j|| keeps growing over the checked horizon"
    return ObservabilityProfile(
        s=s, kappa=kappa, alpha=alpha, rho=rho, gram_s=gram,
        horizon_checked=horizon, warning=warning,
    )


def window_size(profile: ObservabilityProfile, d: int, T: int, delta: float,
                stage: str = "logT", B_norm: float | None = None,
                c_win: float = 4.0, delta1: float | None = None,
                enforce_horizon: bool = True) -> int:
    """Analysis window length: multiple of s, at least the log-sized formula.

    stage "logT" uses log(d T / delta); stage "loglogT" uses log(d / delta1).
    """
    s = profile.s
    if B_norm is None:
        # upper bound ||B||^2 by the top Gram eigenvalue (the i = 0 term B'B
        # is one summand of O_s), good enough when B is not passed explicitly
        B_norm = math.sqrt(np.linalg.eigvalsh(profile.gram_s)[-1])
    if stage == "logT":
        log_arg = d * T / delta
    elif stage == "loglogT":
        if delta1 is None:
            raise ValueError("stage loglogT needs delta1")
        log_arg = d / delta1
    else:
        raise ValueError(f"unknown stage {stage!r}")
    base = c_win * profile.kappa ** -2 * profile.rho ** 12 * B_norm ** 4 * math.log(max(log_arg, math.e))
    t = max(s, int(math.ceil(base)))
    t = s * int(math.ceil(t / s))
    if enforce_horizon and t > T:
        raise HorizonTooShortError(t, T)
    return t


def subspace_split(A, B, profile: ObservabilityProfile, t: int,
                   zeta: float | None = None) -> SubspaceSplit:
    """Split state space at the spectral threshold zeta of the t-step Gram.

    Directions with Gram eigenvalue at least zeta (inclusive, within 1e-9)
    form the observable side Pi; the rest decay under A^t.
    """
    if t % profile.s != 0:
        raise ValueError("t must be a multiple of s")
    if zeta is None:
        zeta = profile.kappa * t / (40000.0 * profile.rho ** 4)
    G = observability_gram(A, B, t)
    evals, vecs = np.linalg.eigh(G)
    keep = evals >= zeta - 1e-9
    V = vecs[:, keep]
    Pi = V @ V.T
    d = G.shape[0]
    Pi_perp = np.eye(d) - Pi
    return SubspaceSplit(t=t, zeta=zeta, Pi=Pi, Pi_perp=Pi_perp, gram_t=G)


def check_unobservable_decay(split: SubspaceSplit, A) -> float:
    """Largest squared gain of A^t on the poorly observed subspace.

    Returns the top eigenvalue of Pi_perp (A^t)' A^t Pi_perp restricted to
    the range of Pi_perp (zero if that range is empty).
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    rank = int(round(np.trace(split.Pi_perp)))
    if rank == 0:
        return 0.0
    At = np.linalg.matrix_power(A, split.t)
    M = split.Pi_perp @ At.T @ At @ split.Pi_perp
    evals, vecs = np.linalg.eigh(split.Pi_perp)
    basis = vecs[:, evals > 0.5]   # projector eigenvalues are 0 or 1
    restricted = basis.T @ M @ basis
    return float(np.linalg.eigvalsh(restricted)[-1])


def subsample_deviation(mask_window: np.ndarray, A, B) -> float:
    """Spectral distance of the masked Gram sum from its expected share of O_t.

    With eta_hat the fraction of masked-out steps, compares
    sum_i mask[i] (A^i)' B'B A^i against (1 - eta_hat) O_t in operator norm.
    """
    mask = np.asarray(mask_window, dtype=bool)
    t = mask.size
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    d = A.shape[0]
    BtB = B.T @ B
    M = np.zeros((d, d))
    G = np.zeros((d, d))
    Ai = np.eye(d)
    for i in range(t):
        term = Ai.T @ BtB @ Ai
        G += term
        if mask[i]:
            M += term
        Ai = A @ Ai
    eta_hat = 1.0 - mask.mean()
    return float(np.linalg.norm(M - (1.0 - eta_hat) * G, 2))
