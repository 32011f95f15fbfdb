"""Constraint-system construction and feasibility-check tests."""

import json
import math

import numpy as np
import pytest

from rlqe.config import ConstraintConstants
from rlqe.lds import AdversaryStrategy, SystemModel, apply_corruptions, simulate
from rlqe.observability import estimate_constants
from rlqe.pipeline import geometric_error
from rlqe.programs import (Candidate, build_program, check_feasibility,
                           ground_truth_candidate, holder_exponent,
                           smoother_candidate)


def scalar_model(T=64):
    return SystemModel(A=[[1.0]], B=[[1.0]], sigma2=1.0, tau2=1.0, R2=1.0, T=T)


def scalar_profile():
    return estimate_constants([[1.0]], [[1.0]], 4, 64)


def make_episode(T=64, eta=0.2, seed=0):
    m = scalar_model(T)
    ep = simulate(m, seed)
    if eta > 0:
        ep = apply_corruptions(
            ep, eta, AdversaryStrategy(kind="spike", scale=4.0 * math.sqrt(T)),
            seed + 1000)
    return ep


def build_v1(ep, eta=0.2, t=8, delta=0.05, constants=ConstraintConstants()):
    return build_program(1, ep.model, ep.y, eta, delta, t, scalar_profile(),
                         constants=constants)


def build_v2(ep, eta=0.2, t=8, delta=0.05, delta1=0.5,
             constants=ConstraintConstants()):
    prof = scalar_profile()
    eps_geo = geometric_error(ep.model, prof, t, delta)
    return build_program(2, ep.model, ep.y, eta, delta, t, prof,
                         delta1=delta1, x_prime=ep.x_star, eps_geo=eps_geo,
                         constants=constants)


def test_holder_exponent_schedule():
    assert holder_exponent(0.0) == 2
    assert holder_exponent(0.3) == 2
    assert holder_exponent(0.1) == 4
    assert holder_exponent(0.01) == 8
    k = holder_exponent(0.05)
    assert k % 2 == 0 and k >= 2


def test_v1_emits_eight_constraint_families():
    spec = build_v1(make_episode())
    assert spec.version == 1
    assert [c.id for c in spec.constraints] == list(range(1, 9))
    kinds = {c.name: c.kind for c in spec.constraints}
    assert kinds["boolean_a"] == "boolean"
    assert kinds["dynamics"] == "linear-eq"
    assert kinds["inlier_count"] == "cardinality"
    assert kinds["window_subsample"] == "psd-window"


def test_v2_emits_fourteen_constraint_families():
    spec = build_v2(make_episode())
    assert spec.version == 2
    assert [c.id for c in spec.constraints] == list(range(1, 15))
    names = [c.name for c in spec.constraints]
    assert "boolean_b" in names and "confidence_funnel" in names
    assert "window_subsample_conf" in names


def test_eta_zero_inlier_count_is_full_horizon():
    ep = make_episode(eta=0.0)
    spec = build_v1(ep, eta=0.0)
    con = next(c for c in spec.constraints if c.name == "inlier_count")
    assert con.rhs == ep.model.T


def test_v1_obs_noise_rhs_plug_in():
    # m = 1, log(T/delta) = 1, C = 4 -> rhs = 4 tau^2 (1 + 1) = 8 tau^2
    m = SystemModel(A=[[1.0]], B=[[1.0]], sigma2=1.0, tau2=0.7, R2=1.0, T=8)
    ep = simulate(m, 0)
    spec = build_program(1, m, ep.y, 0.1, 8 / math.e, 4, scalar_profile())
    con = next(c for c in spec.constraints if c.name == "obs_noise_bound")
    assert abs(con.rhs - 8.0 * m.tau2) < 1e-12


def test_v2_corrupted_obs_rhs_plug_in():
    # k = 2 makes eta^(1-2/k) exactly 1: rhs = C * m * k * tau^2
    ep = make_episode(eta=0.3)
    spec = build_v2(ep, eta=0.3)
    assert spec.k == 2
    con = next(c for c in spec.constraints if c.name == "corrupted_obs_noise_avg")
    C = spec.constants.c13_corrupt_obs_noise
    assert abs(con.rhs - C * 1 * 2 * ep.model.tau2 * 1.0) < 1e-12


def test_bad_window_size_rejected():
    ep = make_episode()
    prof = estimate_constants([[0.0, 1.0], [1.0, 0.0]], [[1.0, 0.0]], 4, 16)
    with pytest.raises(ValueError):
        build_program(1, ep.model, ep.y, 0.2, 0.05, 3, prof)  # not multiple of s=2
    with pytest.raises(ValueError):
        build_v1(ep, t=128)  # t > T


def test_ground_truth_candidate_feasible():
    ep = make_episode(seed=4)
    consts = ConstraintConstants(c4_inlier_slack=1.5)
    spec = build_v1(ep, constants=consts)
    rep = check_feasibility(ground_truth_candidate(ep, spec), spec)
    assert rep.feasible, rep.violated()
    spec2 = build_v2(ep, constants=consts)
    rep2 = check_feasibility(ground_truth_candidate(ep, spec2), spec2)
    assert rep2.feasible, rep2.violated()


def test_smoother_candidate_feasible():
    ep = make_episode(seed=6)
    consts = ConstraintConstants(c4_inlier_slack=1.5)
    spec = build_v1(ep, constants=consts)
    rep = check_feasibility(smoother_candidate(ep, spec), spec)
    assert rep.feasible, rep.violated()


def test_all_rejected_mask_violates_cardinality():
    ep = make_episode(seed=2, eta=0.2)
    spec = build_v1(ep, eta=0.2)
    cand = ground_truth_candidate(ep, spec)
    bad = Candidate(x=cand.x, w=cand.w, v=np.zeros_like(cand.v),
                    a=np.zeros_like(cand.a), b=cand.b)
    rep = check_feasibility(bad, spec)
    expected = -(1.0 - spec.constants.c4_inlier_slack * 0.2) * ep.model.T
    assert abs(rep.slacks["inlier_count"] - expected) < 1e-9
    assert "inlier_count" in rep.violated()


def test_dynamics_violation_detected():
    ep = make_episode(seed=3)
    spec = build_v1(ep)
    cand = ground_truth_candidate(ep, spec)
    x = cand.x.copy()
    x[10] += 5.0
    broken = Candidate(x=x, w=cand.w, v=cand.v, a=cand.a, b=cand.b)
    rep = check_feasibility(broken, spec)
    assert "dynamics" in rep.violated()


def test_objective_matches_hand_formula():
    ep = make_episode(seed=1, eta=0.0)
    spec = build_v1(ep, eta=0.0)
    cand = ground_truth_candidate(ep, spec)
    m = ep.model
    fit = np.sum((cand.x @ m.B.T - ep.y) ** 2) / m.tau2
    hand = (fit + np.sum(cand.w ** 2) / m.sigma2
            + np.sum(cand.x[0] ** 2) / m.R2) / m.T
    assert abs(spec.objective(cand) - hand) < 1e-10


def test_program_json_schema():
    spec = build_v2(make_episode())
    doc = json.loads(spec.to_json())
    assert doc["format"] == "rlqe-program"
    assert doc["version"] == 2
    assert len(doc["constraints"]) == 14
    for con in doc["constraints"]:
        assert {"id", "name", "kind"} <= set(con)
    assert doc["model"]["T"] == 64


def test_partial_final_window_accepted():
    # T = 60 with t = 8 leaves a partial 4-step window; building and
    # checking must still work, scaling the last psd rhs
    ep = make_episode(T=60, seed=8)
    spec = build_v1(ep, t=8)
    assert spec.n_windows == 8
    rep = check_feasibility(
        ground_truth_candidate(ep, spec),
        build_v1(ep, t=8, constants=ConstraintConstants(c4_inlier_slack=1.5)))
    assert isinstance(rep.slacks["window_subsample"], float)
