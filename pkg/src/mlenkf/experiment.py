"""Convergence-study protocol: schedules, synthetic data, MSE, rates.

A study fixes a model/observation example, synthesizes one truth and
observation record at the reference dimension, computes the exact
Kalman reference of the quantity of interest, and then measures the
squared error of EnKF or MLEnKF runs against that reference over a grid
of accuracy targets.  Costs are deterministic operation counts, so the
MSE-versus-cost slopes are machine independent.
"""

from __future__ import annotations

import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .filters import (
    Ensemble,
    GaussianState,
    MultilevelEnsemble,
    ObservationModel,
    PairEnsemble,
    empirical_qoi,
    enkf_step,
    kalman_step,
    mlenkf_step,
    _psd_factor,
)
from .model import ModelConfig, exact_noise_var, propagator
from .rng import RngKey
from .spectral import LevelHierarchy, eigenvalues

__all__ = [
    "Schedule",
    "ExperimentConfig",
    "RunRecord",
    "TruthData",
    "build_example",
    "make_config",
    "make_schedule",
    "psi_cost",
    "theoretical_cost",
    "synthesize_truth_and_obs",
    "initial_ensemble",
    "initial_multilevel_ensemble",
    "run_filter_realization",
    "estimate_mse",
    "run_experiment",
    "fit_loglog_slope",
    "normalized_series",
]

UPSILON = 1e-3

# rate-branch comparisons are exact in theory but the example exponents
# carry float rounding, so compare with a slack far below any real gap
_BRANCH_TOL = 1e-9


@dataclass(frozen=True)
class Schedule:
    """Level count and ensemble sizes for one accuracy target.

    ``M`` is a per-level tuple for MLEnKF and a single integer for the
    EnKF.
    """

    epsilon: float
    L: int
    M: object
    base_constant: float
    method: str

    def __post_init__(self):
        ms = np.atleast_1d(np.asarray(self.M))
        if np.any(ms < 2):
            raise ValueError("all ensemble sizes must be >= 2")
        if np.any(np.diff(ms) > 0):
            raise ValueError("M_l must be nonincreasing in l")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one convergence study needs."""

    model: ModelConfig
    hierarchy: LevelHierarchy
    obs: ObservationModel
    u0: np.ndarray
    example: int
    solver: str
    method: str
    n_steps: int
    realizations: int
    eps_grid: tuple
    master_seed: int
    base_constant: float = 1.0
    jobs: int = 1

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("need at least one observation time")
        if self.realizations < 2:
            raise ValueError("need at least two realizations")
        if not self.eps_grid:
            raise ValueError("eps grid must be nonempty")


@dataclass(frozen=True)
class RunRecord:
    """One MSE-versus-cost data point."""

    method: str
    example: int
    solver: str
    epsilon: float
    L: int
    mse: float
    cost_units: float
    wall_seconds: float
    realizations: int

    def __post_init__(self):
        if self.mse < 0.0 or self.cost_units <= 0.0:
            raise ValueError("mse must be >= 0 and cost_units > 0")


@dataclass(frozen=True)
class TruthData:
    """Shared synthetic record: truth path, observations, reference QoI."""

    truth: np.ndarray
    ys: np.ndarray
    ref_qoi: np.ndarray


def build_example(example, solver, n_ref=2 ** 13, n0=1, j0=1, T=0.25):
    """Model, ladder, observation model and initial data of one example.

    Example 1 observes a smoothness-limit combination of the odd modes;
    Example 2 observes the point value at x = 1/2.  Both use m = 1,
    Gamma = 1/4 and T = 1/4.  ``solver`` selects the temporal cost rate
    gamma_t (0 for exact-in-time, 2(r2 - r1) for exponential Euler).
    """
    if example not in (1, 2):
        raise ValueError("example must be 1 or 2")
    if solver not in ("exact", "expeuler"):
        raise ValueError("solver must be 'exact' or 'expeuler'")
    j = np.arange(1, n_ref + 1, dtype=float)
    if example == 1:
        b = 0.25 + UPSILON
        r1, r2 = 0.0, 0.5
        h = np.zeros(n_ref)
        odd = np.arange(1, n_ref + 1, 2, dtype=float)
        h[::2] = (-1.0) ** (np.arange(odd.size)) * odd ** -(0.5 + UPSILON)
        qoi = j ** -(0.5 + UPSILON)
        u0 = j ** -(1.5 + UPSILON)
    else:
        b = 0.5 + UPSILON
        r1 = 0.25 + UPSILON / 2.0
        r2 = 0.75 + UPSILON / 2.0
        h = np.sqrt(2.0) * np.sin(j * np.pi / 2.0)
        h[np.abs(h) < 1e-12] = 0.0
        qoi = np.ones(n_ref)
        u0 = j ** (-2.0 + UPSILON)
    model = ModelConfig(T=T, b=b, r1=r1, r2=r2)
    gamma_t = 0.0 if solver == "exact" else 2.0 * (r2 - r1)
    hierarchy = LevelHierarchy.from_equilibration(
        r1, r2, n0=n0, j0=j0, T=T, beta=4.0 * (r2 - r1), gamma_x=1.0, gamma_t=gamma_t
    )
    obs = ObservationModel(H=h[None, :], Gamma=np.array([[0.25]]), qoi=qoi)
    return model, hierarchy, obs, u0


def make_config(
    example=1,
    method="mlenkf",
    solver="exact",
    eps_grid=(0.25, 0.125, 0.0625),
    n_steps=10,
    realizations=20,
    master_seed=20260823,
    n_ref=2 ** 13,
    base_constant=1.0,
    jobs=1,
):
    model, hierarchy, obs, u0 = build_example(example, solver, n_ref=n_ref)
    return ExperimentConfig(
        model=model,
        hierarchy=hierarchy,
        obs=obs,
        u0=u0,
        example=example,
        solver=solver,
        method=method,
        n_steps=n_steps,
        realizations=realizations,
        eps_grid=tuple(float(e) for e in eps_grid),
        master_seed=master_seed,
        base_constant=base_constant,
        jobs=jobs,
    )


def make_schedule(eps, hierarchy, method, base_constant=1.0):
    """Level count and ensemble sizes for accuracy target ``eps``.

    ``L = ceil(2 d log_kappa(1/eps) / beta)``; the MLEnKF sizes follow
    the three-branch balance between the coupling rate beta and the cost
    rate d*gamma_x + gamma_t, the EnKF uses ``M = ceil(c eps^{-2})``.
    """
    if eps <= 0.0:
        raise ValueError("eps must be positive")
    if method not in ("enkf", "mlenkf"):
        raise ValueError("method must be 'enkf' or 'mlenkf'")
    d, beta = hierarchy.d, hierarchy.beta
    # guard the ceil against float fuzz in log ratios
    raw = 2.0 * d * math.log(1.0 / eps) / math.log(hierarchy.kappa) / beta
    L = max(0, math.ceil(round(raw, 9)))
    if method == "enkf":
        m = math.ceil(base_constant / eps ** 2)
        if m < 2:
            warnings.warn("ensemble size clamped to 2 for this eps")
        return Schedule(eps, L, max(2, m), base_constant, method)
    s = d * hierarchy.gamma_x + hierarchy.gamma_t
    h_top = hierarchy.level_params(L)[2]
    if beta - s > _BRANCH_TOL:
        x = h_top ** -beta
    elif abs(beta - s) <= _BRANCH_TOL:
        x = max(L, 1) ** 2 * h_top ** -beta
    else:
        x = h_top ** (-(beta + s) / 2.0)
    sizes = []
    clamped = False
    for l in range(L + 1):
        h_l = hierarchy.level_params(l)[2]
        m_l = math.ceil(base_constant * h_l ** ((beta + s) / 2.0) * x)
        clamped = clamped or m_l < 2
        sizes.append(max(2, m_l))
    if clamped:
        warnings.warn("ensemble sizes clamped to 2 for this eps")
    return Schedule(eps, L, tuple(sizes), base_constant, method)


def psi_cost(hierarchy, level):
    """Cost units of one forward solve at a level: N_l, or N_l J_l when
    the ladder carries a temporal cost rate (exponential Euler)."""
    n, j, _, _ = hierarchy.level_params(level)
    return float(n * j) if hierarchy.gamma_t > 0.0 else float(n)


def theoretical_cost(schedule, hierarchy, method, n_steps, m):
    """Operation-count cost of a filter run.

    Per step and level: propagation of both pair members plus the
    m N_l M_l moment work; the EnKF pays M (cost(Psi^L) + m N_L).
    """
    if method == "enkf":
        n_top = hierarchy.n_modes(schedule.L)
        per_step = schedule.M * (psi_cost(hierarchy, schedule.L) + m * n_top)
        return float(per_step * n_steps)
    per_step = 0.0
    for l, m_l in enumerate(schedule.M):
        fwd = psi_cost(hierarchy, l) + (psi_cost(hierarchy, l - 1) if l > 0 else 0.0)
        per_step += m_l * (fwd + m * hierarchy.n_modes(l))
    return float(per_step * n_steps)


def synthesize_truth_and_obs(cfg):
    """Truth path, observations and the Kalman reference QoI sequence.

    The truth runs at the reference dimension with the exact flow; the
    reference sequence is the exact filter on the same observations.
    One record is shared by all filter realizations and methods.
    """
    obs, mdl = cfg.obs, cfg.model
    n_ref = obs.n_ref
    lam = eigenvalues(n_ref)
    a = propagator(lam, mdl.T)
    std = np.sqrt(exact_noise_var(lam, mdl.T, mdl.b))
    fac = _psd_factor(obs.Gamma)
    u = cfg.u0.copy()
    truth = [u.copy()]
    ys = []
    for n in range(1, cfg.n_steps + 1):
        z = RngKey(cfg.master_seed, "truth", 0, 0, 0, n).generator().standard_normal(n_ref)
        u = a * u + std * z
        truth.append(u.copy())
        eta = fac @ RngKey(cfg.master_seed, "data-noise", 0, 0, 0, n).generator().standard_normal(obs.m)
        ys.append(obs.H @ u + eta)
    state = GaussianState.deterministic(cfg.u0)
    ref = [obs.qoi_value(state.mean)]
    for y in ys:
        state = kalman_step(state, y, obs, mdl)
        ref.append(obs.qoi_value(state.mean))
    return TruthData(np.array(truth), np.array(ys), np.array(ref))


def initial_ensemble(cfg, level, size):
    """All members start at the projected deterministic initial state."""
    n = cfg.hierarchy.n_modes(level)
    return Ensemble(np.tile(cfg.u0[:n, None], (1, size)), level)


def initial_multilevel_ensemble(cfg, schedule):
    pairs = []
    for l, m_l in enumerate(schedule.M):
        n_f = cfg.hierarchy.n_modes(l)
        n_c = cfg.hierarchy.n_modes(l - 1) if l > 0 else 0
        pairs.append(
            PairEnsemble(
                np.tile(cfg.u0[:n_c, None], (1, m_l)),
                np.tile(cfg.u0[:n_f, None], (1, m_l)),
                l,
            )
        )
    return MultilevelEnsemble(tuple(pairs))


def run_filter_realization(cfg, schedule, ys, realization):
    """QoI track of one filter realization over steps 0..N."""
    track = np.empty(cfg.n_steps + 1)
    if cfg.method == "enkf":
        ens = initial_ensemble(cfg, schedule.L, schedule.M)
        track[0] = empirical_qoi(ens, cfg.obs.qoi)
        for n in range(1, cfg.n_steps + 1):
            ens = enkf_step(
                ens, ys[n - 1], cfg.obs, cfg.model, cfg.hierarchy,
                cfg.master_seed, realization, n, cfg.solver,
            )
            track[n] = empirical_qoi(ens, cfg.obs.qoi)
        return track
    ml = initial_multilevel_ensemble(cfg, schedule)
    track[0] = empirical_qoi(ml, cfg.obs.qoi)
    for n in range(1, cfg.n_steps + 1):
        ml = mlenkf_step(
            ml, ys[n - 1], cfg.obs, cfg.model, cfg.hierarchy,
            cfg.master_seed, realization, n, cfg.solver,
        )
        track[n] = empirical_qoi(ml, cfg.obs.qoi)
    return track


def _squared_error(args):
    cfg, schedule, ys, ref_qoi, realization = args
    track = run_filter_realization(cfg, schedule, ys, realization)
    return float(np.sum((track - ref_qoi) ** 2))


def estimate_mse(cfg, schedule, data):
    """Average squared QoI error against the reference over realizations.

    Non-finite realizations (filter divergence) are excluded with a
    warning; the record carries the number actually averaged.
    """
    t0 = time.perf_counter()
    jobs = [(cfg, schedule, data.ys, data.ref_qoi, r) for r in range(cfg.realizations)]
    if cfg.jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            errs = np.array(list(pool.map(_squared_error, jobs)))
    else:
        errs = np.array([_squared_error(j) for j in jobs])
    ok = np.isfinite(errs)
    if not np.all(ok):
        warnings.warn(f"excluded {int(np.sum(~ok))} diverged realizations")
    if not np.any(ok):
        raise RuntimeError("all realizations diverged")
    wall = time.perf_counter() - t0
    return RunRecord(
        method=cfg.method,
        example=cfg.example,
        solver=cfg.solver,
        epsilon=schedule.epsilon,
        L=schedule.L,
        mse=float(np.mean(errs[ok])),
        cost_units=theoretical_cost(schedule, cfg.hierarchy, cfg.method, cfg.n_steps, cfg.obs.m),
        wall_seconds=wall,
        realizations=int(np.sum(ok)),
    )


def run_experiment(cfg, data=None):
    """Records and schedules for every target in the eps grid."""
    if data is None:
        data = synthesize_truth_and_obs(cfg)
    records, schedules = [], []
    for eps in cfg.eps_grid:
        schedule = make_schedule(eps, cfg.hierarchy, cfg.method, cfg.base_constant)
        records.append(estimate_mse(cfg, schedule, data))
        schedules.append(schedule)
    return records, schedules


def fit_loglog_slope(records):
    """Least-squares slope of log(mse) against log(cost).

    Accepts RunRecords or (cost, mse) pairs; returns (slope, intercept,
    stderr) with the standard error from the residual variance.
    """
    if len(records) < 3:
        raise ValueError("need at least 3 records to fit a slope")
    if isinstance(records[0], RunRecord):
        pts = [(r.cost_units, r.mse) for r in records]
    else:
        pts = [(float(c), float(m)) for c, m in records]
    x = np.log(np.array([p[0] for p in pts]))
    y = np.log(np.array([p[1] for p in pts]))
    if np.unique(x).size < 3:
        raise ValueError("need at least 3 distinct cost values")
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    dof = max(x.size - 2, 1)
    stderr = float(np.sqrt(np.sum(resid ** 2) / dof / np.sum((x - x.mean()) ** 2)))
    return float(slope), float(intercept), stderr


def normalized_series(records):
    """``mse * cost / L^3`` per record, for the beta = d gamma_x + gamma_t
    branch where boundedness (not a slope) is the prediction."""
    out = []
    for r in records:
        if r.L < 1:
            continue
        out.append((r.epsilon, r.L, r.mse * r.cost_units / r.L ** 3))
    return out
