import warnings
from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from synthpanel.dgp import DgpSpec, simulate_factor_panel
from synthpanel.errors import InsufficientPrePeriods, RankDeficient
from synthpanel.gsc import (
    BootstrapConfig,
    bootstrap_ci,
    counterfactual,
    fit_ife,
    gsc_fit,
    gsc_in_time_placebo,
    project_loadings,
    select_factors,
)
from synthpanel.panel import panel_from_arrays
from synthpanel.rng import stream


def factor_panel(**kw):
    base = dict(n_units=21, n_periods=30, first_period=1, t0=15, n_factors=2, seed=0)
    base.update(kw)
    return simulate_factor_panel(DgpSpec(**base))


def rescale(panel, s):
    y = panel.matrix("y") * s
    return panel_from_arrays({"y": y}, panel.units, panel.periods, panel.treated_unit, panel.t0)


# -- interactive fixed effects ---------------------------------------------


def test_r0_residuals_orthogonal_to_dummies():
    Y = stream(1, "ife").normal(size=(8, 12))
    m = fit_ife(Y, 0)
    R = Y - m.fitted()
    np.testing.assert_allclose(R.sum(axis=0), 0.0, atol=1e-10)
    np.testing.assert_allclose(R.sum(axis=1), 0.0, atol=1e-10)
    assert m.factors.shape == (0, 12) and m.loadings.shape == (8, 0)


def test_noiseless_one_factor_reconstruction():
    sim = simulate_factor_panel(DgpSpec(n_units=10, n_periods=20, first_period=1, t0=10, n_factors=1, noise_sd=0.0, seed=2))
    Y = sim.panel.matrix("y")
    m = fit_ife(Y, 1)
    assert np.abs(m.fitted() - Y).max() < 1e-8


def test_constant_shift_moves_grand_mean_only():
    Y = factor_panel(seed=3).panel.matrix("y")[1:]
    a, b = fit_ife(Y, 2), fit_ife(Y + 4.5, 2)
    assert b.grand_mean == pytest.approx(a.grand_mean + 4.5, abs=1e-10)
    np.testing.assert_allclose(b.unit_effects, a.unit_effects, atol=1e-8)
    np.testing.assert_allclose(b.time_effects, a.time_effects, atol=1e-8)
    np.testing.assert_allclose(b.loadings @ b.factors, a.loadings @ a.factors, atol=1e-8)


def test_factor_normalization():
    Y = factor_panel(seed=4).panel.matrix("y")[1:]
    m = fit_ife(Y, 3)
    T = Y.shape[1]
    np.testing.assert_allclose(m.factors @ m.factors.T / T, np.eye(3), atol=1e-8)
    G = m.loadings.T @ m.loadings
    np.testing.assert_allclose(G - np.diag(np.diag(G)), 0.0, atol=1e-8)
    assert np.all(np.diff(np.diag(G)) <= 0)


def test_rank_checks():
    Y = stream(2, "rank").normal(size=(4, 10))
    with pytest.raises(RankDeficient):
        fit_ife(Y, 4)
    with pytest.raises(RankDeficient):
        select_factors(Y, 6, 3)


# -- projection ----------------------------------------------------------


def test_r0_projection_is_mean_offset():
    Y = stream(3, "proj").normal(size=(6, 10))
    y = stream(4, "proj").normal(size=10)
    m = fit_ife(Y, 0)
    lam, off = project_loadings(m, y[:6])
    assert lam.size == 0
    assert off == pytest.approx(np.mean(y[:6] - m.grand_mean - m.time_effects[:6]))
    np.testing.assert_allclose(counterfactual(m, lam, off), m.grand_mean + off + m.time_effects)


def test_projection_recovers_loadings_and_absorbs_shift():
    m = fit_ife(factor_panel(seed=5).panel.matrix("y")[1:], 2)
    lam = np.array([0.7, -1.2])
    y = m.grand_mean + 0.3 + m.time_effects + lam @ m.factors
    got, off = project_loadings(m, y[:15])
    np.testing.assert_allclose(got, lam, atol=1e-8)
    assert off == pytest.approx(0.3, abs=1e-8)
    got2, off2 = project_loadings(m, y[:15] + 2.0)
    np.testing.assert_allclose(got2, got, atol=1e-8)
    assert off2 == pytest.approx(off + 2.0, abs=1e-8)
    with pytest.raises(InsufficientPrePeriods):
        project_loadings(m, y[:2])


# -- factor selection ----------------------------------------------------


def test_select_factors_rules():
    sim = factor_panel(seed=6, noise_sd=0.05)
    Y0 = sim.panel.matrix("y")[1:]
    assert select_factors(Y0, 15, 0)[0] == 0
    r, scores = select_factors(Y0, 15, 4, "one_se")
    assert r == 2 and len(scores) == 5
    r_min, scores_min = select_factors(Y0, 15, 4, "min")
    assert scores_min == scores
    assert r_min == int(np.argmin(scores)) >= r
    with pytest.raises(ValueError):
        select_factors(Y0, 15, 4, "aic")


def test_select_factors_two_way():
    sim = factor_panel(seed=7, mode="two_way_fe", noise_sd=0.05)
    assert select_factors(sim.panel.matrix("y")[1:], 15, 4)[0] == 0


# -- estimator properties --------------------------------------------------


def test_r0_matches_difference_in_differences():
    g = stream(8, "did")
    for _ in range(10):
        Y = g.normal(size=(7, 12)).cumsum(axis=1)
        p = panel_from_arrays({"y": Y}, [f"u{i}" for i in range(7)], range(12), "u0", 7)
        fit = gsc_fit(p, "y", r=0)
        pre, post = slice(0, 8), slice(8, 12)
        donor = Y[1:].mean(axis=0)
        did = (Y[0, post] - donor[post]) - (Y[0, pre] - donor[pre]).mean()
        np.testing.assert_allclose(fit.att_path, did, atol=1e-8)


def test_att_identity_and_pre_gap_mean():
    fit = gsc_fit(factor_panel(seed=9, effect=0.1, noise_sd=0.05).panel, "y", r=2)
    np.testing.assert_allclose(fit.counterfactual_series[15:] + fit.att_path, fit.treated_series[15:], rtol=0, atol=1e-14)
    pre_gap = fit.treated_series[:15] - fit.counterfactual_series[:15]
    assert abs(pre_gap.mean()) < 1e-8
    assert fit.average_att == pytest.approx(fit.att_path.mean())


def test_rotation_invariance():
    sim = factor_panel(seed=10, noise_sd=0.05)
    Y = sim.panel.matrix("y")
    m = fit_ife(Y[1:], 2)
    Q, _ = np.linalg.qr(stream(10, "rot").normal(size=(2, 2)))
    rot = replace(m, factors=Q @ m.factors, loadings=m.loadings @ Q.T)
    a = counterfactual(m, *project_loadings(m, Y[0, :15]))
    b = counterfactual(rot, *project_loadings(rot, Y[0, :15]))
    np.testing.assert_allclose(a, b, atol=1e-10)


def test_scale_equivariance():
    p = factor_panel(seed=11, effect=0.1, noise_sd=0.05).panel
    boot = BootstrapConfig(replications=100, seed=3)
    a = gsc_fit(p, "y", r=2, boot=boot)
    b = gsc_fit(rescale(p, 3.0), "y", r=2, boot=boot)
    np.testing.assert_allclose(b.att_path, 3 * a.att_path, rtol=1e-7, atol=1e-10)
    assert b.average_low == pytest.approx(3 * a.average_low, rel=1e-7)
    assert b.average_high == pytest.approx(3 * a.average_high, rel=1e-7)
    assert b.p_value == a.p_value


# -- bootstrap -----------------------------------------------------------


def test_bootstrap_identical_donors():
    row = np.linspace(0, 1, 12)
    Y0 = np.tile(row, (6, 1))
    res = bootstrap_ci(Y0, row, 8, 0, BootstrapConfig(replications=100))
    assert res.average_low == pytest.approx(0.0, abs=1e-12)
    assert res.average_high == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(res.att_low, 0.0, atol=1e-12)
    assert res.p_value == 1.0


def test_bootstrap_noiseless_width():
    p = factor_panel(seed=12, noise_sd=0.0, effect=0.1).panel
    f = gsc_fit(p, "y", r=2, boot=BootstrapConfig(replications=100))
    assert f.average_high - f.average_low < 1e-6
    assert np.all(f.att_high - f.att_low < 1e-6)
    assert f.average_att == pytest.approx(0.1, abs=1e-8)


def test_bootstrap_config_checks():
    with pytest.raises(ValueError):
        BootstrapConfig(replications=99)
    with pytest.raises(ValueError):
        BootstrapConfig(scheme="parametric")


def test_bootstrap_jobs_invariant():
    p = factor_panel(seed=13, effect=0.1, noise_sd=0.05).panel
    Y = p.matrix("y")
    boot = BootstrapConfig(replications=120, seed=5)
    a = bootstrap_ci(Y[1:], Y[0], 15, 2, boot)
    b = bootstrap_ci(Y[1:], Y[0], 15, 2, boot, jobs=3)
    np.testing.assert_array_equal(a.draws, b.draws)
    assert a.p_value == b.p_value


def test_donor_scheme_runs():
    p = factor_panel(seed=14, effect=0.1, noise_sd=0.05).panel
    f = gsc_fit(p, "y", r=2, boot=BootstrapConfig(replications=100, scheme="donor"))
    assert f.average_low <= f.average_high


def test_no_treatment_p_values_roughly_uniform():
    ps = []
    for s in range(60):
        p = factor_panel(seed=50_000 + s, mode="two_way_fe", noise_sd=0.1).panel
        ps.append(gsc_fit(p, "y", r=0, boot=BootstrapConfig(replications=100, seed=s)).p_value)
    assert stats.kstest(ps, "uniform").pvalue > 0.01


# -- in-time -------------------------------------------------------------


def test_in_time_checks_pre_length():
    p = factor_panel(seed=15).panel
    with pytest.raises(InsufficientPrePeriods):
        gsc_in_time_placebo(p, "y", 11, 2, BootstrapConfig(replications=100))
    with pytest.raises(ValueError):
        gsc_in_time_placebo(p, "y", 0, 2, BootstrapConfig(replications=100))


def test_in_time_exact_factor_treated():
    p = factor_panel(seed=16, noise_sd=0.0).panel
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        r = gsc_in_time_placebo(p, "y", 3, 2, BootstrapConfig(replications=100))
    assert abs(r.average_att) < 1e-8
    assert r.p_value == 1.0 and not r.anticipation_flag
    assert r.pseudo_t0 == 12
