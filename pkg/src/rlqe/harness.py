"""Config-driven experiment runner: scenarios, baselines, result tables.

Each trial simulates an episode, corrupts it per the scenario's adversary,
runs one estimation method, and scores it with the clean posterior
objective against the oracle optimum.  Output is a long-format CSV (one
row per trial) plus a JSON summary of grouped means, byte-identical
across reruns with the same config (wall time excluded).
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import ConstraintConstants, PipelineConfig, SolverConfig
from .kalman import clean_nll, smoother, run_filter
from .lds import AdversaryStrategy, SystemModel, apply_corruptions, simulate
from .observability import estimate_constants
from .online import TwoStagePredictor
from .pipeline import sos_kalman_pipeline
from .programs import build_program
from .solvers import solve_alternating
from .wiener import robust_wiener_predict

METHODS = ("oracle_smoother", "naive_kalman", "oblivious_threshold",
           "truncated_wiener", "robust_smoother_v1", "sos_kalman",
           "two_stage_online", "oblivious_shrinkage")

CSV_COLUMNS = ("scenario", "method", "eta", "T", "seed", "excess_risk",
               "nll", "opt", "mean_pred_err", "band_coverage", "error",
               "wall_time")


def _gaussian_replacement(episode, bad, rng):
    """Adversary for the shrinkage scenario: swap in fresh N(0, 2I) draws,
    matching the marginal law of the clean observations."""
    y = episode.y.copy()
    y[bad] = math.sqrt(2.0) * rng.standard_normal((bad.size, episode.model.m))
    return y


def cycle_matrix(d: int) -> np.ndarray:
    """Cyclic coordinate shift: e_1 -> e_2 -> ... -> e_d -> e_1."""
    A = np.zeros((d, d))
    for i in range(d):
        A[(i + 1) % d, i] = 1.0
    return A


def build_scenario(name: str, T: int, d: int | None = None):
    """Built-in scenario -> (SystemModel, AdversaryStrategy)."""
    if name in ("b1_spike", "b1"):
        model = SystemModel(A=[[1.0]], B=[[1.0]], sigma2=1.0, tau2=1.0,
                            R2=1.0, T=T)
        return model, AdversaryStrategy(kind="spike", scale=math.sqrt(T))
    if name == "b1_random_walk":
        model = SystemModel(A=[[1.0]], B=[[1.0]], sigma2=1.0, tau2=1.0,
                            R2=1.0, T=T)
        return model, AdversaryStrategy(kind="random_walk_attack",
                                        scale=2.0 * math.sqrt(T))
    if name == "b1_adversarial_locations":
        model = SystemModel(A=[[1.0]], B=[[1.0]], sigma2=1.0, tau2=1.0,
                            R2=1.0, T=T)
        return model, AdversaryStrategy(kind="parallel_path_attack",
                                        model_violating=True)
    if name == "b2_cycle":
        dd = d if d else 3
        B = np.zeros((1, dd))
        B[0, 0] = 1.0
        model = SystemModel(A=cycle_matrix(dd), B=B, sigma2=1.0, tau2=1.0,
                            R2=1.0, T=T)
        return model, AdversaryStrategy(kind="spike", scale=math.sqrt(T))
    if name == "b3_hard_subspace":
        A = np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.5]])
        B = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        model = SystemModel(A=A, B=B, sigma2=1.0, tau2=1.0, R2=1.0, T=T)
        return model, AdversaryStrategy(kind="spike", scale=math.sqrt(T))
    if name == "b4_small_tau":
        model = SystemModel(A=[[1.0]], B=[[1.0]], sigma2=1.0, tau2=1e-6,
                            R2=1.0, T=T)
        return model, AdversaryStrategy(kind="spike", scale=math.sqrt(T))
    if name == "b5_shrinkage":
        dd = d if d else 2
        model = SystemModel(A=np.zeros((dd, dd)), B=np.eye(dd), sigma2=1.0,
                            tau2=1.0, R2=1.0, T=T)
        return model, AdversaryStrategy(kind="custom",
                                        custom=_gaussian_replacement)
    if name == "stable_half":
        model = SystemModel(A=[[0.5]], B=[[1.0]], sigma2=1.0, tau2=1.0,
                            R2=4.0 / 3.0, T=T)
        return model, AdversaryStrategy(kind="spike", scale=None)
    raise KeyError(f"unknown scenario {name!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment: scenario x methods x eta grid x T grid x seeds."""

    scenario: str
    methods: tuple
    eta_grid: tuple
    T_grid: tuple
    n_seeds: int = 10
    d: int | None = None
    master_seed: int = 0
    delta: float = 0.05
    threshold: float | None = None        # oblivious_threshold cutoff
    shrinkage: float | None = None        # oblivious_shrinkage coefficient
    constants: ConstraintConstants = field(default_factory=ConstraintConstants)
    pipeline: dict = field(default_factory=dict)   # PipelineConfig overrides

    def __post_init__(self):
        if self.n_seeds < 1:
            raise ValueError("need at least one seed")
        if not self.methods or not self.eta_grid or not self.T_grid:
            raise ValueError("methods and grids must be nonempty")
        for mth in self.methods:
            if mth not in METHODS:
                raise KeyError(f"unknown method {mth!r}")

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        data = json.loads(text)
        if "constants" in data:
            data["constants"] = ConstraintConstants(**data["constants"])
        for key in ("methods", "eta_grid", "T_grid"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)


def trial_seed(master_seed: int, index: int) -> int:
    """Counter-derived per-trial seed, stable under any parallelism."""
    ss = np.random.SeedSequence([int(master_seed), int(index)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def oblivious_threshold_baseline(episode, threshold: float):
    """Drop every observation with norm at or above the cutoff, then smooth."""
    if not threshold > 0:
        raise ValueError("threshold must be positive")
    keep = np.linalg.norm(episode.y, axis=1) < threshold
    flag = None
    if not keep.any():
        flag = "all_observations_dropped"
    x_hat, _, _ = smoother(episode.model, episode.y, keep)
    return x_hat, flag


def oblivious_shrinkage_baseline(episode, c: float | None = None):
    """Mask-oblivious linear shrinkage x_hat = c * pinv(B) y."""
    model = episode.model
    if c is None:
        c = (1.0 - _current_eta(episode)) / (2.0 - _current_eta(episode))
    Bp = np.linalg.pinv(model.B)
    return c * episode.y @ Bp.T


def _current_eta(episode) -> float:
    return float(1.0 - episode.a_star.mean())


def _pipeline_config(cfg: ExperimentConfig) -> PipelineConfig:
    return PipelineConfig(constants=cfg.constants, **cfg.pipeline)


def run_method(method: str, episode, eta: float, cfg: ExperimentConfig):
    """Run one method; returns (x_hat or None, extras dict)."""
    model = episode.model
    extras = {}
    if method == "oracle_smoother":
        x_hat, _, _ = smoother(model, episode.y, episode.a_star)
    elif method == "naive_kalman":
        x_hat, _, _ = smoother(model, episode.y, np.ones(model.T, dtype=bool))
    elif method == "oblivious_threshold":
        thr = cfg.threshold if cfg.threshold is not None else 2.5 * math.sqrt(model.T)
        x_hat, flag = oblivious_threshold_baseline(episode, thr)
        if flag:
            extras["error"] = flag
    elif method == "oblivious_shrinkage":
        x_hat = oblivious_shrinkage_baseline(episode, cfg.shrinkage)
    elif method == "truncated_wiener":
        x_hat = robust_wiener_predict(model, episode.y, max(eta, 1e-3))
    elif method == "robust_smoother_v1":
        pc = _pipeline_config(cfg)
        profile = estimate_constants(model.A, model.B, 4 * model.d,
                                     min(4 * model.T, 4096))
        from .observability import window_size, HorizonTooShortError
        try:
            t_pre = window_size(profile, model.d, model.T, cfg.delta,
                                B_norm=float(np.linalg.norm(model.B, 2)),
                                c_win=pc.c_win)
        except HorizonTooShortError:
            t_pre = max(profile.s, (model.T // profile.s) * profile.s)
        spec = build_program(1, model, episode.y, eta, cfg.delta, t_pre,
                             profile, constants=cfg.constants)
        x_hat = solve_alternating(spec).x_hat
    elif method == "sos_kalman":
        pc = _pipeline_config(cfg)
        sol, band, flags = sos_kalman_pipeline(model, episode.y, cfg.delta,
                                               eta, config=pc)
        x_hat = sol.x_hat
        extras["band_coverage"] = float(np.mean(band.contains(episode.x_star)))
    elif method == "two_stage_online":
        pc = _pipeline_config(cfg)
        pred = TwoStagePredictor(model, eta, cfg.delta, config=pc)
        log = pred.replay(episode.y)
        extras["mean_pred_err"] = float(
            np.mean(np.sum((log.x_pred - episode.x_star) ** 2, axis=1)))
        x_hat = None
    else:  # pragma: no cover
        raise KeyError(method)
    return x_hat, extras


def run_trial(args):
    """One (scenario, method, eta, T, seed) cell -> result row dict."""
    cfg, method, eta, T, seed_idx = args
    t0 = time.perf_counter()
    row = {"scenario": cfg.scenario, "method": method, "eta": eta, "T": T,
           "seed": seed_idx, "excess_risk": "", "nll": "", "opt": "",
           "mean_pred_err": "", "band_coverage": "", "error": "",
           "wall_time": 0.0}
    try:
        model, adversary = build_scenario(cfg.scenario, T, cfg.d)
        episode = simulate(model, trial_seed(cfg.master_seed, seed_idx))
        if eta > 0:
            episode = apply_corruptions(
                episode, eta, adversary,
                trial_seed(cfg.master_seed, 1000003 + seed_idx))
        x_hat, extras = run_method(method, episode, eta, cfg)
        if "error" in extras:
            row["error"] = extras["error"]
        if x_hat is not None:
            nll = clean_nll(x_hat, episode)
            _, _, opt = smoother(model, episode.y, episode.a_star)
            row["nll"] = nll
            row["opt"] = opt
            row["excess_risk"] = nll - opt
        if "mean_pred_err" in extras:
            row["mean_pred_err"] = extras["mean_pred_err"]
        if "band_coverage" in extras:
            row["band_coverage"] = extras["band_coverage"]
    except Exception as exc:
        row["error"] = f"{type(exc).__name__}: {exc}"
    row["wall_time"] = time.perf_counter() - t0
    return row


def _trials(cfg: ExperimentConfig):
    for method in cfg.methods:
        for eta in cfg.eta_grid:
            for T in cfg.T_grid:
                for seed in range(cfg.n_seeds):
                    yield (cfg, method, float(eta), int(T), seed)


def run(cfg: ExperimentConfig, workers: int = 1):
    """Execute every trial; returns rows in deterministic order."""
    trials = list(_trials(cfg))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run_trial, trials, chunksize=4))
    else:
        rows = [run_trial(t) for t in trials]
    return rows


def _fmt(value) -> str:
    if value == "" or value is None:
        return ""
    if isinstance(value, float):
        return format(value, ".12g")
    return str(value)


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in rows:
        writer.writerow([_fmt(row[c]) for c in CSV_COLUMNS])
    return buf.getvalue()


def summarize(rows) -> dict:
    """Grouped mean and standard error of the numeric columns."""
    groups: dict = {}
    for row in rows:
        key = (row["scenario"], row["method"], row["eta"], row["T"])
        groups.setdefault(key, []).append(row)
    out = {}
    for key, grp in sorted(groups.items(), key=lambda kv: str(kv[0])):
        entry = {"n": len(grp),
                 "errors": sum(1 for r in grp if r["error"])}
        for col in ("excess_risk", "nll", "opt", "mean_pred_err",
                    "band_coverage"):
            vals = [r[col] for r in grp if r[col] != ""]
            if vals:
                arr = np.asarray(vals, dtype=float)
                entry[col + "_mean"] = float(arr.mean())
                entry[col + "_stderr"] = float(
                    arr.std(ddof=1) / math.sqrt(arr.size)) if arr.size > 1 else 0.0
        out["|".join(str(k) for k in key)] = entry
    return out


def run_to_files(cfg: ExperimentConfig, out_dir: str, workers: int = 1):
    """Run the experiment and write results.csv and summary.json."""
    os.makedirs(out_dir, exist_ok=True)
    rows = run(cfg, workers=workers)
    csv_text = rows_to_csv(rows)
    with open(os.path.join(out_dir, "results.csv"), "w") as fh:
        fh.write(csv_text)
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summarize(rows), fh, indent=2, sort_keys=True)
    return rows
