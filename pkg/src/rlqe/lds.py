"""Linear dynamical system simulation and adversarial corruption.

The generative model: a hidden state follows x_i = A x_{i-1} + w_i with
isotropic Gaussian process noise, observed through y_i = B x_i + v_i with
isotropic Gaussian observation noise, and the initial state drawn from
N(0, R^2 I).  Each timestep's observation is independently handed to an
adversary with probability eta; the adversary may rewrite those (and only
those) observations with full knowledge of the episode.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

_MAGIC = b"RLQE-EP\x00"
_BINARY_VERSION = 1


class InvalidModelError(ValueError):
    pass


class CorruptionError(ValueError):
    pass


@dataclass(frozen=True)
class SystemModel:
    """System matrices and noise scales of a linear dynamical system."""

    A: np.ndarray          # d x d dynamics
    B: np.ndarray          # m x d observation map
    sigma2: float          # process noise variance per coordinate
    tau2: float            # observation noise variance per coordinate
    R2: float              # initial-state prior variance per coordinate
    T: int                 # horizon

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.atleast_2d(np.asarray(self.B, dtype=float))
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        if A.shape[0] != A.shape[1]:
            raise InvalidModelError("dynamics matrix must be square")
        if B.shape[1] != A.shape[0]:
            raise InvalidModelError("observation map has wrong state dimension")
        if not (np.isfinite(A).all() and np.isfinite(B).all()):
            raise InvalidModelError("non-finite entries in system matrices")
        if self.d < 1 or self.m < 1 or self.T < 1:
            raise InvalidModelError("dimensions and horizon must be positive")
        for name in ("sigma2", "tau2", "R2"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise InvalidModelError(f"{name} must be positive and finite")

    @property
    def d(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[0]

    def to_dict(self) -> dict:
        return {
            "A": self.A.tolist(),
            "B": self.B.tolist(),
            "sigma2": self.sigma2,
            "tau2": self.tau2,
            "R2": self.R2,
            "T": self.T,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SystemModel":
        return cls(
            A=np.array(data["A"], dtype=float),
            B=np.array(data["B"], dtype=float),
            sigma2=float(data["sigma2"]),
            tau2=float(data["tau2"]),
            R2=float(data["R2"]),
            T=int(data["T"]),
        )


@dataclass(frozen=True)
class EpisodeData:
    """One realized trajectory with its delivered (possibly corrupted) observations.

    ``a_star[i]`` is True where the delivered observation is the clean one.
    """

    model: SystemModel
    x_star: np.ndarray   # T x d true states
    y_star: np.ndarray   # T x m clean observations
    w_star: np.ndarray   # (T-1) x d process noise, w_star[i-1] drives step i
    v_star: np.ndarray   # T x m observation noise
    a_star: np.ndarray   # T bools, True = uncorrupted
    y: np.ndarray        # T x m delivered observations
    seed: int

    @property
    def T(self) -> int:
        return self.model.T

    def is_clean(self) -> bool:
        return bool(self.a_star.all())

    def to_json(self) -> str:
        return json.dumps(
            {
                "model": self.model.to_dict(),
                "seed": self.seed,
                "x_star": self.x_star.tolist(),
                "y_star": self.y_star.tolist(),
                "w_star": self.w_star.tolist(),
                "v_star": self.v_star.tolist(),
                "a_star": self.a_star.astype(int).tolist(),
                "y": self.y.tolist(),
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "EpisodeData":
        data = json.loads(text)
        return cls(
            model=SystemModel.from_dict(data["model"]),
            x_star=np.array(data["x_star"], dtype=float),
            y_star=np.array(data["y_star"], dtype=float),
            w_star=np.array(data["w_star"], dtype=float).reshape(-1, len(data["model"]["A"])),
            v_star=np.array(data["v_star"], dtype=float),
            a_star=np.array(data["a_star"], dtype=bool),
            y=np.array(data["y"], dtype=float),
            seed=int(data["seed"]),
        )

    def to_binary(self) -> bytes:
        """Little-endian binary mirror of the JSON format.

        Layout: 16-byte magic (padded), u32 version, u32 T, u32 d, u32 m,
        then x_star, y_star, w_star, v_star, y as f64 arrays and a_star as u8,
        followed by the model block (A, B, sigma2, tau2, R2 as f64, seed i64).
        """
        m = self.model
        head = _MAGIC.ljust(16, b"\x00")
        head += struct.pack("<IIII", _BINARY_VERSION, m.T, m.d, m.m)
        body = b"".join(
            np.ascontiguousarray(arr, dtype="<f8").tobytes()
            for arr in (self.x_star, self.y_star, self.w_star, self.v_star, self.y)
        )
        body += self.a_star.astype("u1").tobytes()
        body += np.ascontiguousarray(m.A, dtype="<f8").tobytes()
        body += np.ascontiguousarray(m.B, dtype="<f8").tobytes()
        body += struct.pack("<dddq", m.sigma2, m.tau2, m.R2, self.seed)
        return head + body

    @classmethod
    def from_binary(cls, blob: bytes) -> "EpisodeData":
        if blob[:8] != _MAGIC:
            raise ValueError("bad magic header")
        version, T, d, m = struct.unpack_from("<IIII", blob, 16)
        if version != _BINARY_VERSION:
            raise ValueError(f"unsupported episode format version {version}")
        off = 32

        def take(rows, cols):
            nonlocal off
            n = rows * cols * 8
            arr = np.frombuffer(blob, dtype="<f8", count=rows * cols, offset=off)
            off += n
            return arr.reshape(rows, cols).copy()

        x_star = take(T, d)
        y_star = take(T, m)
        w_star = take(T - 1, d)
        v_star = take(T, m)
        y = take(T, m)
        a_star = np.frombuffer(blob, dtype="u1", count=T, offset=off).astype(bool)
        off += T
        A = take(d, d)
        B = take(m, d)
        sigma2, tau2, R2, seed = struct.unpack_from("<dddq", blob, off)
        model = SystemModel(A=A, B=B, sigma2=sigma2, tau2=tau2, R2=R2, T=T)
        return cls(model, x_star, y_star, w_star, v_star, a_star, y, seed)


AdversaryFn = Callable[[EpisodeData, np.ndarray, np.random.Generator], np.ndarray]


@dataclass(frozen=True)
class AdversaryStrategy:
    """How corrupted observations get rewritten.

    The adversary sees the whole episode but may only change the delivered
    observation at indices where the corruption mask fired.
    """

    kind: str = "none"
    scale: float | None = None       # spike / random_walk_attack magnitude
    df: float = 3.0                  # heavy_tail degrees of freedom
    model_violating: bool = False    # parallel_path: adversarial locations
    custom: AdversaryFn | None = None

    KINDS = ("none", "spike", "random_walk_attack", "parallel_path_attack",
             "heavy_tail", "custom")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise CorruptionError(f"unknown adversary kind {self.kind!r}")
        if self.kind == "custom" and self.custom is None:
            raise CorruptionError("custom adversary requires a callback")


def simulate(model: SystemModel, seed: int) -> EpisodeData:
    """Sample a clean episode (all-true mask, delivered = clean observations)."""
    ss = np.random.SeedSequence(seed)
    rng_state, rng_obs = [np.random.default_rng(s) for s in ss.spawn(2)]
    d, m, T = model.d, model.m, model.T
    sigma = np.sqrt(model.sigma2)
    tau = np.sqrt(model.tau2)

    x = np.empty((T, d))
    x[0] = np.sqrt(model.R2) * rng_state.standard_normal(d)
    w = sigma * rng_state.standard_normal((T - 1, d))
    for i in range(1, T):
        x[i] = model.A @ x[i - 1] + w[i - 1]
    v = tau * rng_obs.standard_normal((T, m))
    y_star = x @ model.B.T + v
    return EpisodeData(
        model=model,
        x_star=x,
        y_star=y_star,
        w_star=w,
        v_star=v,
        a_star=np.ones(T, dtype=bool),
        y=y_star.copy(),
        seed=seed,
    )


def unroll_state(model: SystemModel, x0: np.ndarray, w: np.ndarray, t: int) -> np.ndarray:
    """State after t steps: A^t x0 plus the propagated noise sum."""
    w = np.atleast_2d(np.asarray(w, dtype=float))
    if t > w.shape[0] + 1 or t < 0:
        raise ValueError("not enough noise vectors for the requested step count")
    x = np.asarray(x0, dtype=float).copy()
    for j in range(t):
        x = model.A @ x + w[j]
    return x


def _fake_trajectory(model, rng, x0, length):
    """Independent trajectory draw with fresh noise, from a given start."""
    d, m = model.d, model.m
    xs = np.empty((length, d))
    xs[0] = x0
    for i in range(1, length):
        xs[i] = model.A @ xs[i - 1] + np.sqrt(model.sigma2) * rng.standard_normal(d)
    ys = xs @ model.B.T + np.sqrt(model.tau2) * rng.standard_normal((length, m))
    return xs, ys


def _adversary_values(episode, strategy, bad, rng):
    """Replacement observations at the corrupted indices ``bad``."""
    model = episode.model
    T, m = model.T, model.m
    y_new = episode.y.copy()
    if strategy.kind == "none" or bad.size == 0:
        return y_new
    if strategy.kind == "spike":
        scale = strategy.scale if strategy.scale is not None else np.sqrt(T)
        signs = rng.choice([-1.0, 1.0], size=(bad.size, m))
        y_new[bad] = episode.y_star[bad] + scale * signs
    elif strategy.kind == "random_walk_attack":
        # independent trajectory started at an offset of the attack scale
        scale = strategy.scale if strategy.scale is not None else 2.0 * np.sqrt(T)
        sign = rng.choice([-1.0, 1.0])
        x0 = np.full(model.d, sign * scale / np.sqrt(model.d))
        _, ys = _fake_trajectory(model, rng, x0, T)
        y_new[bad] = ys[bad]
    elif strategy.kind == "parallel_path_attack":
        # second random walk branching off the true one over the final stretch
        start = max(0, int(bad.min()))
        xs = np.empty((T, model.d))
        xs[start] = episode.x_star[start]
        for i in range(start + 1, T):
            xs[i] = model.A @ xs[i - 1] + np.sqrt(model.sigma2) * rng.standard_normal(model.d)
        ys = xs @ model.B.T + np.sqrt(model.tau2) * rng.standard_normal((T, m))
        y_new[bad] = ys[bad]
    elif strategy.kind == "heavy_tail":
        y_new[bad] = episode.y_star[bad] + np.sqrt(model.tau2) * rng.standard_t(
            strategy.df, size=(bad.size, m))
    elif strategy.kind == "custom":
        y_new = strategy.custom(episode, bad, rng)
    return y_new


def apply_corruptions(
    episode: EpisodeData,
    eta: float,
    adversary: AdversaryStrategy,
    seed: int,
) -> EpisodeData:
    """Flip an independent Ber(eta) coin per step and hand those steps to the adversary.

    The input episode must be clean; re-corrupting an already corrupted
    episode is rejected.  ``eta >= 0.5`` is past the breakdown point and
    rejected outright.
    """
    if not (0 <= eta < 0.5):
        raise CorruptionError("corruption fraction must lie in [0, 0.5)")
    if not episode.is_clean():
        raise CorruptionError("episode already carries a corruption mask")
    ss = np.random.SeedSequence(seed)
    rng_mask, rng_adv = [np.random.default_rng(s) for s in ss.spawn(2)]
    T = episode.T

    mask = rng_mask.random(T) >= eta   # True = clean
    if adversary.kind == "parallel_path_attack" and adversary.model_violating:
        # demonstration-only variant: adversary picks the locations himself
        n_bad = int(round(eta * T))
        window = np.arange(max(0, T - 2 * n_bad), T)
        chosen = rng_mask.choice(window, size=min(n_bad, window.size), replace=False)
        mask = np.ones(T, dtype=bool)
        mask[chosen] = False
    bad = np.flatnonzero(~mask)

    y_new = _adversary_values(episode, adversary, bad, rng_adv)
    # locality: clean indices always deliver the clean observation
    y_new[mask] = episode.y_star[mask]
    return EpisodeData(
        model=episode.model,
        x_star=episode.x_star,
        y_star=episode.y_star,
        w_star=episode.w_star,
        v_star=episode.v_star,
        a_star=mask,
        y=y_new,
        seed=episode.seed,
    )
