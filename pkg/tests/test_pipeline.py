"""Two-stage pipeline, confidence band, and calibration tests."""

import math

import numpy as np

from rlqe.config import ConstraintConstants, PipelineConfig
from rlqe.kalman import smoother
from rlqe.lds import AdversaryStrategy, SystemModel, apply_corruptions, simulate
from rlqe.observability import estimate_constants
from rlqe.pipeline import (confidence_band, delta1_schedule, geometric_error,
                           noise_energy, pipeline_params, sos_kalman_pipeline)
from rlqe.solvers import SmootherSolution


def scalar_model(T):
    return SystemModel(A=[[1.0]], B=[[1.0]], sigma2=1.0, tau2=1.0, R2=1.0, T=T)


def scalar_profile():
    return estimate_constants([[1.0]], [[1.0]], 4, 256)


def fake_solution(x):
    return SmootherSolution(x_hat=x, w_hat=x[1:] - x[:-1], v_hat=np.zeros_like(x),
                            a_hat=np.ones(x.shape[0]), b_hat=None,
                            objective=0.0, feasibility=None, backend="test")


def test_band_radius_floor_in_late_windows():
    m = scalar_model(512)
    prof = scalar_profile()
    t_pre = 32
    x = np.zeros((512, 1))
    band = confidence_band(fake_solution(x), prof, m, 0.05, t_pre, c_band=4.0)
    floor = 4.0 * prof.rho ** 4 * math.sqrt(band.E_noise) * math.sqrt(t_pre) / math.sqrt(prof.kappa)
    # deep windows: geometric term has decayed to (almost) nothing
    assert floor <= band.radius[-1] <= floor * (1.0 + 1e-3)
    assert band.radius[0] > band.radius[-1]
    assert np.all(np.diff(band.radius) <= 1e-12)


def test_band_doubling_R_scales_only_geometric_term():
    m1 = scalar_model(256)
    m2 = SystemModel(A=[[1.0]], B=[[1.0]], sigma2=1.0, tau2=1.0, R2=4.0, T=256)
    prof = scalar_profile()
    x = np.zeros((256, 1))
    b1 = confidence_band(fake_solution(x), prof, m1, 0.05, 16)
    b2 = confidence_band(fake_solution(x), prof, m2, 0.05, 16)
    # radius = C(geo(R) + floor) with geo linear in R and floor R-free, so
    # 2*r1 - r2 = C*floor: one constant, the same at every index
    diff = 2.0 * b1.radius - b2.radius
    assert np.ptp(diff) < 1e-9 * diff[0]
    assert diff[0] > 0
    # and the within-band decay doubles with R
    assert abs((b2.radius[0] - b2.radius[-1])
               - 2.0 * (b1.radius[0] - b1.radius[-1])) < 1e-9


def test_band_contains_membership():
    m = scalar_model(64)
    prof = scalar_profile()
    x = np.zeros((64, 1))
    band = confidence_band(fake_solution(x), prof, m, 0.05, 8)
    inside = x.copy()
    assert band.contains(inside).all()
    outside = x.copy()
    outside[50, 0] = band.radius[50] * 2.0
    assert not band.contains(outside)[50]


def test_noise_energy_and_eps_geo_formulas():
    m = scalar_model(128)
    prof = scalar_profile()
    t_pre = 16
    logTd = math.log(128 / 0.05)
    E = noise_energy(m, prof, t_pre, 0.05)
    assert abs(E - ((1 + logTd) + t_pre * (1 + logTd))) < 1e-10
    eps = geometric_error(m, prof, t_pre, 0.05)
    assert abs(eps - t_pre * ((1 + logTd) + (1 + logTd) * t_pre)) < 1e-10


def test_delta1_schedule_floor_and_clamp():
    # desk scale: the floor (t_pre/(eta T)) log(1/delta) dominates and the
    # value clamps at 1/2
    assert delta1_schedule(512, 0.05, 0.1, 36) == 0.5
    # large T, tiny window: the log^3 term is the binding one
    v = delta1_schedule(10**9, 0.05, 0.4, 1)
    raw = math.log(1 / 0.05) / math.log(10**9) ** 3
    assert abs(v - raw) < 1e-12
    assert delta1_schedule(100, 0.5, 0.0, 10) <= 0.5


def test_pipeline_params_scalar():
    m = scalar_model(512)
    prof = scalar_profile()
    t_pre, delta1, t2 = pipeline_params(m, prof, 0.05, 0.1, PipelineConfig())
    assert t_pre % prof.s == 0
    assert t_pre <= 512
    assert 0 < delta1 <= 0.5
    if t2 is not None:
        assert t2 % prof.s == 0


def test_pipeline_clean_equals_smoother():
    m = scalar_model(256)
    ep = simulate(m, 17)
    sol, band, flags = sos_kalman_pipeline(m, ep.y, 0.05, 0.0)
    x_ref, _, _ = smoother(m, ep.y, np.ones(256, dtype=bool))
    scale = max(1.0, np.abs(x_ref).max())
    assert np.abs(sol.x_hat - x_ref).max() <= 1e-6 * scale
    assert band.radius.shape == (256,)


def test_pipeline_short_horizon_degrades_to_stage1():
    m = scalar_model(16)
    ep = simulate(m, 3)
    ep = apply_corruptions(ep, 0.1,
                           AdversaryStrategy(kind="spike", scale=20.0), 4)
    sol, band, flags = sos_kalman_pipeline(
        m, ep.y, 0.05, 0.1,
        PipelineConfig(constants=ConstraintConstants(c4_inlier_slack=1.5)))
    assert "stage1_only" in flags or "window_clamped_to_horizon" in flags
    assert sol.x_hat.shape == (16, 1)


def test_pipeline_rejects_spikes():
    m = scalar_model(256)
    ep = simulate(m, 23)
    ep = apply_corruptions(
        ep, 0.1, AdversaryStrategy(kind="spike", scale=6 * math.sqrt(256)), 24)
    cfg = PipelineConfig(constants=ConstraintConstants(c4_inlier_slack=1.5))
    sol, band, flags = sos_kalman_pipeline(m, ep.y, 0.05, 0.1, cfg)
    from rlqe.kalman import clean_nll, smoother as km_smoother
    _, _, opt = km_smoother(m, ep.y, ep.a_star)
    robust_excess = clean_nll(sol.x_hat, ep) - opt
    naive_x, _, _ = km_smoother(m, ep.y, np.ones(256, dtype=bool))
    naive_excess = clean_nll(naive_x, ep) - opt
    assert robust_excess < 0.3 * naive_excess
    corrupted = np.flatnonzero(~ep.a_star)
    rejected = set(np.flatnonzero(sol.a_hat < 0.5))
    hit = sum(1 for i in corrupted if i in rejected)
    assert hit >= 0.8 * corrupted.size
