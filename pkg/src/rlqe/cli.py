"""Command-line entry points: run experiments, simulate, score, oracle.

``rlqe run`` executes a JSON experiment config; ``rlqe simulate`` writes a
single (optionally corrupted) episode; ``rlqe score`` evaluates a stored
trajectory against an episode; ``rlqe oracle`` runs the mask-aware
smoother on an episode.  The RLQE_SEED environment variable overrides the
master seed everywhere.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np

from .harness import ExperimentConfig, build_scenario, run_to_files
from .kalman import risk_report, smoother
from .lds import AdversaryStrategy, EpisodeData, SystemModel, apply_corruptions, simulate


def _env_seed(default: int | None) -> int | None:
    env = os.environ.get("RLQE_SEED")
    if env is not None:
        return int(env)
    return default


def _load_episode(path: str) -> EpisodeData:
    if path.endswith(".bin"):
        with open(path, "rb") as fh:
            return EpisodeData.from_binary(fh.read())
    with open(path) as fh:
        return EpisodeData.from_json(fh.read())


def cmd_run(args) -> int:
    with open(args.config) as fh:
        cfg = ExperimentConfig.from_json(fh.read())
    seed = _env_seed(None)
    if seed is not None:
        import dataclasses
        cfg = dataclasses.replace(cfg, master_seed=seed)
    rows = run_to_files(cfg, args.out, workers=args.workers)
    errors = sum(1 for r in rows if r["error"])
    print(f"wrote {len(rows)} rows to {args.out} ({errors} with errors)")
    return 0


def cmd_simulate(args) -> int:
    if args.scenario:
        model, adversary = build_scenario(args.scenario, args.T, args.d)
    else:
        with open(args.model) as fh:
            model = SystemModel.from_dict(json.load(fh))
        adversary = AdversaryStrategy(kind="spike", scale=math.sqrt(model.T))
    seed = _env_seed(args.seed)
    episode = simulate(model, seed)
    if args.eta > 0:
        episode = apply_corruptions(episode, args.eta, adversary, seed + 1)
    if args.binary:
        with open(args.out, "wb") as fh:
            fh.write(episode.to_binary())
    else:
        with open(args.out, "w") as fh:
            fh.write(episode.to_json())
    print(f"wrote episode to {args.out}")
    return 0


def cmd_score(args) -> int:
    episode = _load_episode(args.episode)
    with open(args.trajectory) as fh:
        x_hat = np.array(json.load(fh), dtype=float)
    if x_hat.ndim == 1:
        x_hat = x_hat[:, None]
    report = risk_report(x_hat, episode)
    print(report.to_json())
    return 0


def cmd_oracle(args) -> int:
    episode = _load_episode(args.episode)
    x_hat, _, opt = smoother(episode.model, episode.y, episode.a_star)
    out = {"x_hat": x_hat.tolist(), "opt": opt}
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(out, fh)
        print(f"wrote oracle trajectory to {args.out}")
    else:
        print(json.dumps(out))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rlqe",
                                description="robust linear-quadratic estimation toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    pr = sub.add_parser("run", help="run an experiment config")
    pr.add_argument("--config", required=True)
    pr.add_argument("--out", required=True)
    pr.add_argument("--workers", type=int, default=1)
    pr.set_defaults(func=cmd_run)

    ps = sub.add_parser("simulate", help="simulate one episode")
    ps.add_argument("--scenario", default=None,
                    help="built-in scenario name (else pass --model)")
    ps.add_argument("--model", default=None, help="JSON file with model fields")
    ps.add_argument("--T", type=int, default=512)
    ps.add_argument("--d", type=int, default=None)
    ps.add_argument("--eta", type=float, default=0.0)
    ps.add_argument("--seed", type=int, default=0)
    ps.add_argument("--out", required=True)
    ps.add_argument("--binary", action="store_true")
    ps.set_defaults(func=cmd_simulate)

    pc = sub.add_parser("score", help="score a trajectory against an episode")
    pc.add_argument("--episode", required=True)
    pc.add_argument("--trajectory", required=True,
                    help="JSON array of state vectors")
    pc.set_defaults(func=cmd_score)

    po = sub.add_parser("oracle", help="oracle smoother on an episode")
    po.add_argument("--episode", required=True)
    po.add_argument("--out", default=None)
    po.set_defaults(func=cmd_oracle)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
