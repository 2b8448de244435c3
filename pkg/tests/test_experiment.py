import math
import warnings
from dataclasses import replace

import numpy as np
import pytest

import mlenkf.experiment as experiment
from mlenkf.experiment import (
    ExperimentConfig,
    RunRecord,
    Schedule,
    build_example,
    estimate_mse,
    fit_loglog_slope,
    initial_ensemble,
    initial_multilevel_ensemble,
    make_config,
    make_schedule,
    normalized_series,
    psi_cost,
    run_experiment,
    run_filter_realization,
    synthesize_truth_and_obs,
    theoretical_cost,
)
from mlenkf.filters import ObservationModel
from mlenkf.model import reset_unit_counter, unit_counter
from mlenkf.spectral import LevelHierarchy


def test_level_count_follows_accuracy_target():
    hier = build_example(1, "exact", n_ref=64)[1]
    for k in range(1, 7):
        sched = make_schedule(2.0 ** -k, hier, "mlenkf")
        assert sched.L == k
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        assert make_schedule(1.0, hier, "mlenkf").L == 0


def test_schedule_sizes_exact_solver():
    # beta = 2 > s = 1: M_l = ceil(h_l^{3/2} h_L^{-2})
    hier = build_example(1, "exact", n_ref=64)[1]
    sched = make_schedule(0.125, hier, "mlenkf")
    assert sched.L == 3
    assert sched.M == (64, 23, 8, 3)


def test_schedule_sizes_expeuler_solver():
    # beta = s = 2: the balanced branch carries the L^2 factor
    hier = build_example(1, "expeuler", n_ref=64)[1]
    sched = make_schedule(0.125, hier, "mlenkf")
    assert sched.L == 3
    assert sched.M == (576, 144, 36, 9)


def test_schedule_sizes_cost_dominated_branch():
    # beta = 1 < s = 2: sizes follow h_l^{3/2} h_L^{-3/2}
    hier = LevelHierarchy(kappa=2.0, beta=1.0, gamma_x=1.0, gamma_t=1.0)
    with pytest.warns(UserWarning, match="clamped"):
        sched = make_schedule(0.5, hier, "mlenkf")
    assert sched.L == 2
    assert sched.M == (8, 3, 2)


def test_enkf_schedule_size():
    hier = build_example(1, "exact", n_ref=64)[1]
    sched = make_schedule(0.125, hier, "enkf")
    assert sched.L == 3 and sched.M == 64
    assert make_schedule(0.3, hier, "enkf", base_constant=2.0).M == math.ceil(2.0 / 0.09)


def test_schedules_monotone_in_accuracy():
    for solver in ("exact", "expeuler"):
        hier = build_example(1, solver, n_ref=256)[1]
        prev = None
        for k in range(1, 7):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                sched = make_schedule(2.0 ** -k, hier, "mlenkf")
            assert np.all(np.diff(sched.M) <= 0)
            if prev is not None:
                assert sched.L >= prev.L
                for l in range(prev.L + 1):
                    assert sched.M[l] >= prev.M[l]
            prev = sched


def test_schedule_clamp_warns():
    hier = build_example(1, "exact", n_ref=64)[1]
    with pytest.warns(UserWarning, match="clamped"):
        make_schedule(0.125, hier, "mlenkf", base_constant=1e-6)
    with pytest.warns(UserWarning, match="clamped"):
        make_schedule(0.9, hier, "enkf", base_constant=1e-6)


def test_schedule_validation():
    hier = build_example(1, "exact", n_ref=64)[1]
    with pytest.raises(ValueError):
        make_schedule(0.0, hier, "mlenkf")
    with pytest.raises(ValueError):
        make_schedule(0.1, hier, "ukf")
    with pytest.raises(ValueError):
        Schedule(0.5, 1, (4, 1), 1.0, "mlenkf")
    with pytest.raises(ValueError):
        Schedule(0.5, 1, (4, 8), 1.0, "mlenkf")


def test_psi_cost_rates():
    exact_h = build_example(1, "exact", n_ref=64)[1]
    euler_h = build_example(1, "expeuler", n_ref=64)[1]
    for l in range(4):
        assert psi_cost(exact_h, l + 1) == 2.0 * psi_cost(exact_h, l)
        assert psi_cost(euler_h, l + 1) == 4.0 * psi_cost(euler_h, l)


def test_theoretical_cost_hand_examples():
    hier = build_example(1, "exact", n_ref=64)[1]
    enkf = Schedule(0.25, 2, 5, 1.0, "enkf")
    # per step M (N_L + m N_L) = 5 * (4 + 4) = 40
    assert theoretical_cost(enkf, hier, "enkf", 2, 1) == 80.0
    ml = Schedule(0.5, 1, (4, 2), 1.0, "mlenkf")
    # level 0: 4 (1 + 1) = 8, level 1: 2 (2 + 1 + 2) = 10
    assert theoretical_cost(ml, hier, "mlenkf", 3, 1) == 54.0
    assert theoretical_cost(replace(enkf, M=10), hier, "enkf", 2, 1) == 160.0


def test_build_example_coefficients():
    model1, hier1, obs1, u01 = build_example(1, "exact", n_ref=8)
    assert model1.b == pytest.approx(0.251)
    assert (model1.r1, model1.r2) == (0.0, 0.5)
    assert hier1.kappa == pytest.approx(2.0)
    assert hier1.gamma_t == 0.0
    assert obs1.H[0, 0] == pytest.approx(1.0)
    assert obs1.H[0, 1] == 0.0
    assert obs1.H[0, 2] == pytest.approx(-(3.0 ** -0.501))
    assert obs1.qoi[1] == pytest.approx(2.0 ** -0.501)
    assert u01[2] == pytest.approx(3.0 ** -1.501)

    model2, hier2, obs2, u02 = build_example(2, "exact", n_ref=8)
    assert model2.b == pytest.approx(0.501)
    assert model2.r1 == pytest.approx(0.2505)
    assert model2.r2 == pytest.approx(0.7505)
    assert np.allclose(obs2.H[0, :4], [math.sqrt(2.0), 0.0, -math.sqrt(2.0), 0.0])
    assert np.all(obs2.qoi == 1.0)
    assert u02[1] == pytest.approx(2.0 ** -1.999)
    assert build_example(1, "expeuler", n_ref=8)[1].gamma_t == pytest.approx(1.0)
    with pytest.raises(ValueError):
        build_example(3, "exact")
    with pytest.raises(ValueError):
        build_example(1, "euler")


def test_synthesize_is_deterministic_and_method_free():
    cfg = make_config(example=1, n_ref=32, n_steps=4, realizations=2)
    a = synthesize_truth_and_obs(cfg)
    b = synthesize_truth_and_obs(cfg)
    assert np.array_equal(a.truth, b.truth)
    assert np.array_equal(a.ys, b.ys)
    assert np.array_equal(a.ref_qoi, b.ref_qoi)
    c = synthesize_truth_and_obs(replace(cfg, method="enkf", solver="expeuler"))
    assert np.array_equal(a.ys, c.ys)
    assert np.array_equal(a.ref_qoi, c.ref_qoi)
    assert a.truth.shape == (5, 32) and a.ys.shape == (4, 1) and a.ref_qoi.shape == (5,)


def test_synthesize_noiseless_observations():
    cfg = make_config(example=1, n_ref=16, n_steps=3, realizations=2)
    quiet = ObservationModel(cfg.obs.H, np.array([[0.0]]), cfg.obs.qoi)
    data = synthesize_truth_and_obs(replace(cfg, obs=quiet))
    for n in range(3):
        assert np.array_equal(data.ys[n], quiet.H @ data.truth[n + 1])


def test_initial_ensembles_tile_projected_u0():
    cfg = make_config(example=1, n_ref=32, realizations=2)
    e = initial_ensemble(cfg, 2, 5)
    assert e.coeffs.shape == (4, 5)
    assert np.array_equal(e.coeffs, np.tile(cfg.u0[:4, None], (1, 5)))
    ml = initial_multilevel_ensemble(cfg, Schedule(0.25, 2, (6, 3, 2), 1.0, "mlenkf"))
    assert ml.sizes == (6, 3, 2)
    assert np.array_equal(ml.levels[2].coarse, np.tile(cfg.u0[:2, None], (1, 2)))
    assert ml.levels[0].coarse.shape == (0, 6)


def test_realizations_replay_deterministically():
    cfg = make_config(example=1, n_ref=32, n_steps=3, realizations=2)
    data = synthesize_truth_and_obs(cfg)
    sched = make_schedule(0.25, cfg.hierarchy, "mlenkf")
    t1 = run_filter_realization(cfg, sched, data.ys, 0)
    t2 = run_filter_realization(cfg, sched, data.ys, 0)
    assert np.array_equal(t1, t2)
    t3 = run_filter_realization(cfg, sched, data.ys, 1)
    assert not np.array_equal(t1, t3)


def test_single_level_schedule_degenerates_to_enkf():
    # base level wide enough to observe through (m < N_0)
    model, hier, obs, u0 = build_example(1, "exact", n_ref=32, n0=4)
    cfg = ExperimentConfig(
        model=model, hierarchy=hier, obs=obs, u0=u0, example=1,
        solver="exact", method="mlenkf", n_steps=4, realizations=2,
        eps_grid=(1.0,), master_seed=17,
    )
    data = synthesize_truth_and_obs(cfg)
    ml_track = run_filter_realization(
        cfg, Schedule(1.0, 0, (6,), 1.0, "mlenkf"), data.ys, 3)
    en_track = run_filter_realization(
        replace(cfg, method="enkf"), Schedule(1.0, 0, 6, 1.0, "enkf"), data.ys, 3)
    assert np.array_equal(ml_track, en_track)


def test_mse_zero_when_filter_reproduces_reference(monkeypatch):
    cfg = make_config(example=1, n_ref=16, n_steps=3, realizations=4)
    data = synthesize_truth_and_obs(cfg)
    sched = make_schedule(0.5, cfg.hierarchy, "mlenkf")
    monkeypatch.setattr(experiment, "run_filter_realization",
                        lambda c, s, ys, r: data.ref_qoi.copy())
    rec = estimate_mse(cfg, sched, data)
    assert rec.mse == 0.0
    assert rec.realizations == 4
    assert rec.cost_units == theoretical_cost(sched, cfg.hierarchy, "mlenkf", 3, 1)


def test_mse_is_mean_of_per_realization_errors():
    cfg = make_config(example=1, n_ref=32, n_steps=2, realizations=3)
    data = synthesize_truth_and_obs(cfg)
    sched = make_schedule(0.5, cfg.hierarchy, "mlenkf")
    errs = [np.sum((run_filter_realization(cfg, sched, data.ys, r) - data.ref_qoi) ** 2)
            for r in range(3)]
    rec = estimate_mse(cfg, sched, data)
    assert rec.mse == pytest.approx(np.mean(errs), rel=1e-12)


def test_mse_excludes_diverged_realizations(monkeypatch):
    cfg = make_config(example=1, n_ref=16, n_steps=2, realizations=3)
    data = synthesize_truth_and_obs(cfg)
    sched = make_schedule(0.5, cfg.hierarchy, "mlenkf")

    def flaky(c, s, ys, r):
        out = data.ref_qoi.copy()
        if r == 0:
            out[0] = np.nan
        return out

    monkeypatch.setattr(experiment, "run_filter_realization", flaky)
    with pytest.warns(UserWarning, match="diverged"):
        rec = estimate_mse(cfg, sched, data)
    assert rec.realizations == 2 and rec.mse == 0.0
    monkeypatch.setattr(experiment, "run_filter_realization",
                        lambda c, s, ys, r: np.full_like(data.ref_qoi, np.nan))
    with pytest.warns(UserWarning, match="diverged"):
        with pytest.raises(RuntimeError):
            estimate_mse(cfg, sched, data)


def test_enkf_error_scales_inversely_with_ensemble_size():
    # reference dimension equal to the filter dimension, so the sampling
    # error is the only error and quadrupling M divides the MSE by ~4
    model, hier, obs, u0 = build_example(1, "exact", n_ref=8, n0=8)
    cfg = ExperimentConfig(
        model=model, hierarchy=hier, obs=obs, u0=u0, example=1,
        solver="exact", method="enkf", n_steps=3, realizations=100,
        eps_grid=(0.5,), master_seed=91, jobs=1,
    )
    data = synthesize_truth_and_obs(cfg)
    small = estimate_mse(cfg, Schedule(0.5, 0, 20, 1.0, "enkf"), data)
    large = estimate_mse(cfg, Schedule(0.5, 0, 80, 1.0, "enkf"), data)
    ratio = small.mse / large.mse
    assert 2.6 <= ratio <= 6.2


def test_run_experiment_grid():
    cfg = make_config(example=1, method="mlenkf", solver="exact",
                      eps_grid=(0.5, 0.25), n_steps=2, realizations=2, n_ref=32)
    records, schedules = run_experiment(cfg)
    assert [r.L for r in records] == [1, 2]
    assert [s.L for s in schedules] == [1, 2]
    for r in records:
        assert r.method == "mlenkf" and r.example == 1 and r.solver == "exact"
        assert r.cost_units > 0 and np.isfinite(r.mse)
        assert r.realizations == 2


def test_counted_units_match_theoretical_cost():
    for method in ("enkf", "mlenkf"):
        for solver in ("exact", "expeuler"):
            cfg = make_config(example=1, method=method, solver=solver,
                              n_ref=64, n_steps=3, realizations=2)
            data = synthesize_truth_and_obs(cfg)
            sched = make_schedule(0.25, cfg.hierarchy, method)
            reset_unit_counter()
            run_filter_realization(cfg, sched, data.ys, 0)
            measured = unit_counter["forward"] + unit_counter["moments"]
            want = theoretical_cost(sched, cfg.hierarchy, method, cfg.n_steps, cfg.obs.m)
            assert abs(measured - want) <= 0.05 * want
    reset_unit_counter()


def test_fit_loglog_slope_recovers_exact_power_law():
    costs = np.array([10.0, 100.0, 1000.0, 10000.0])
    slope, intercept, stderr = fit_loglog_slope(list(zip(costs, 7.0 / costs)))
    assert slope == pytest.approx(-1.0, abs=1e-12)
    assert intercept == pytest.approx(math.log(7.0), abs=1e-12)
    assert stderr <= 1e-12
    flat, _, _ = fit_loglog_slope(list(zip(costs, np.full(4, 3.0))))
    assert flat == pytest.approx(0.0, abs=1e-12)


def test_fit_loglog_slope_tolerates_noise():
    rng = np.random.default_rng(101)
    x = np.logspace(2, 6, 9)
    y = 5.0 * x ** (-2.0 / 3.0) * np.exp(rng.normal(0.0, 0.05, 9))
    slope, _, stderr = fit_loglog_slope(list(zip(x, y)))
    assert abs(slope + 2.0 / 3.0) <= 0.1
    assert stderr < 0.1


def test_fit_loglog_slope_accepts_records():
    recs = [RunRecord("enkf", 1, "exact", 0.5 ** k, k, 2.0 ** -k, 4.0 ** k, 0.0, 2)
            for k in range(1, 5)]
    slope, _, _ = fit_loglog_slope(recs)
    assert slope == pytest.approx(-0.5, abs=1e-12)


def test_fit_loglog_slope_input_validation():
    with pytest.raises(ValueError):
        fit_loglog_slope([(10.0, 1.0), (100.0, 0.1)])
    with pytest.raises(ValueError):
        fit_loglog_slope([(10.0, 1.0), (10.0, 0.5), (10.0, 0.1)])


def test_normalized_series_formula():
    recs = [
        RunRecord("mlenkf", 1, "expeuler", 0.5, 0, 1.0, 10.0, 0.0, 2),
        RunRecord("mlenkf", 1, "expeuler", 0.25, 2, 0.5, 100.0, 0.0, 2),
        RunRecord("mlenkf", 1, "expeuler", 0.125, 3, 0.25, 1000.0, 0.0, 2),
    ]
    out = normalized_series(recs)
    assert out == [(0.25, 2, pytest.approx(0.5 * 100.0 / 8.0)),
                   (0.125, 3, pytest.approx(0.25 * 1000.0 / 27.0))]


def test_config_validation():
    with pytest.raises(ValueError):
        make_config(n_steps=0, realizations=2)
    with pytest.raises(ValueError):
        make_config(realizations=1)
    with pytest.raises(ValueError):
        make_config(eps_grid=())
