"""Two-stage causal predictor tests."""

import math

import numpy as np
import pytest

from rlqe.config import ConstraintConstants, PipelineConfig
from rlqe.kalman import run_filter, stability_constants
from rlqe.lds import AdversaryStrategy, SystemModel, apply_corruptions, simulate
from rlqe.online import (TwoStageConfig, TwoStagePredictor, choose_radius,
                         correct_observations, pathwise_error_bound)
from rlqe.pipeline import ConfidenceBand


def scalar_model(T):
    return SystemModel(A=[[1.0]], B=[[1.0]], sigma2=1.0, tau2=1.0, R2=1.0, T=T)


ROBUST_CONSTS = PipelineConfig(constants=ConstraintConstants(c4_inlier_slack=1.5))


def test_correct_observations_identity_cases():
    y = np.arange(10.0).reshape(5, 2)
    out = correct_observations(y, y, 1.0)
    assert np.array_equal(out, y)
    ref = np.zeros((5, 2))
    out2 = correct_observations(y, ref, 1e18)
    assert np.array_equal(out2, y)


def test_correct_observations_spike_replaced():
    y = np.zeros((4, 1))
    ref = np.zeros((4, 1))
    y[2, 0] = 5.0
    out = correct_observations(y, ref, 2.5)
    assert out[2, 0] == 0.0
    assert np.array_equal(out[[0, 1, 3]], y[[0, 1, 3]])
    with pytest.raises(ValueError):
        correct_observations(y, ref[:3], 1.0)


def band_with(radii, t_pre=8, E=1.0, eps_geo=1.0):
    radii = np.asarray(radii, dtype=float)
    return ConfidenceBand(center=np.zeros((radii.size, 1)), radius=radii,
                          E_noise=E, eps_geo=eps_geo, t_pre=t_pre)


def test_choose_radius_clamp():
    band = band_with(np.zeros(64))
    r = choose_radius(band, [[1.0]], 1.0)
    assert r == 1e-9


def test_choose_radius_scales_with_floor():
    # radii built from two E_noise values differing 2x: the post burn-in
    # radius (all floor) scales by sqrt(2), and so does r
    base = np.full(64, 3.0)
    r1 = choose_radius(band_with(base), [[1.0]], 1.0)
    r2 = choose_radius(band_with(base * math.sqrt(2.0)), [[1.0]], 1.0)
    assert abs(r2 / r1 - math.sqrt(2.0)) < 1e-12
    # burn-in: huge early radii are ignored
    radii = np.full(64, 3.0)
    radii[:16] = 1000.0
    assert choose_radius(band_with(radii, t_pre=8), [[1.0]], 1.0) == r1


def test_two_stage_config_validation():
    with pytest.raises(ValueError):
        TwoStageConfig(r=0.0, refresh_every=4, stability=(1, 0.5, 1))
    with pytest.raises(ValueError):
        TwoStageConfig(r=1.0, refresh_every=0, stability=(1, 0.5, 1))


def test_predictor_clean_matches_plain_filter():
    m = scalar_model(96)
    ep = simulate(m, 5)
    pred = TwoStagePredictor(m, 0.0, 0.05, config=ROBUST_CONSTS)
    log = pred.replay(ep.y)
    _, x_pred_ref, _ = run_filter(m, ep.y)
    # no corrections should fire on clean data with the wide default radius
    assert not log.fired.any()
    assert np.abs(log.x_pred[1:] - x_pred_ref[1:]).max() < 1e-8


def test_predictor_causality():
    m = scalar_model(96)
    ep = simulate(m, 8)
    p1 = TwoStagePredictor(m, 0.1, 0.05, config=ROBUST_CONSTS, r=50.0)
    preds1 = [p1.feed(ep.y[i]) for i in range(60)]
    y_mut = ep.y.copy()
    y_mut[60:] += 1000.0
    p2 = TwoStagePredictor(m, 0.1, 0.05, config=ROBUST_CONSTS, r=50.0)
    preds2 = [p2.feed(y_mut[i]) for i in range(60)]
    assert np.array_equal(np.array(preds1), np.array(preds2))


def test_predictor_corrects_spikes():
    T = 128
    m = scalar_model(T)
    ep = simulate(m, 12)
    ep = apply_corruptions(
        ep, 0.1, AdversaryStrategy(kind="spike", scale=6 * math.sqrt(T)), 13)
    pred = TwoStagePredictor(m, 0.1, 0.05, config=ROBUST_CONSTS, r=30.0)
    log = pred.replay(ep.y)
    # the filtered stream should not contain the full-size spikes
    assert np.abs(log.y_corrected).max() < np.abs(ep.y).max()
    err_robust = np.mean((log.x_pred[1:, 0] - ep.x_star[1:, 0]) ** 2)
    _, x_pred_naive, _ = run_filter(m, ep.y)
    err_naive = np.mean((x_pred_naive[1:, 0] - ep.x_star[1:, 0]) ** 2)
    assert err_robust < 0.5 * err_naive


def test_pathwise_bound_shape_and_recursion():
    m = scalar_model(32)
    stab = stability_constants(m)
    ind = np.zeros(32)
    ind[10] = 1.0
    bound = pathwise_error_bound(m, ind, r=2.0, stability=stab, T=32)
    assert bound.shape == (32,)
    assert np.all(bound[:10] == 0.0)
    lam, delta, _ = stab
    # single fired step: bound decays geometrically after the hit
    assert bound[12] == pytest.approx(bound[10] * delta ** 2, rel=1e-12)


def test_pathwise_bound_dominates_filter_difference():
    # feed the filter two streams differing by at most r at flagged steps;
    # the output difference obeys the envelope bound at every step
    T = 64
    m = scalar_model(T)
    ep = simulate(m, 3)
    rng = np.random.default_rng(0)
    r = 1.5
    ind = (rng.random(T) < 0.2).astype(float)
    y2 = ep.y.copy()
    y2[:, 0] += ind * r * (2 * rng.random(T) - 1)
    x1, _, _ = run_filter(m, ep.y)
    x2, _, _ = run_filter(m, y2)
    stab = stability_constants(m)
    bound = pathwise_error_bound(m, ind, r=r, stability=stab, T=T)
    diff = np.abs(x1[:, 0] - x2[:, 0])
    assert np.all(diff <= bound + 1e-8)
