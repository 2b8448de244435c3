"""Ensemble and exact Kalman filters over the spectral hierarchy.

Three filters share one update algebra: the single-level EnKF with
perturbed observations, the multilevel EnKF whose moments are
telescoping sums over coupled pair ensembles, and the exact Kalman
recursion that serves as the mean-field reference in the linear-Gaussian
setting.  Sample covariances are never materialized as N x N matrices;
everything goes through the action on the m observation directions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from . import model
from .model import propagate_pairs, propagator, exact_noise_var
from .rng import RngKey
from .spectral import SpectralField, eigenvalues, zero_field

__all__ = [
    "ObservationModel",
    "Ensemble",
    "PairEnsemble",
    "MultilevelEnsemble",
    "GainPack",
    "GaussianState",
    "sample_mean",
    "sample_cov_action",
    "compute_R_ml",
    "positive_part",
    "ml_gain",
    "ml_update",
    "ml_predict",
    "mlenkf_step",
    "enkf_gain",
    "enkf_update",
    "enkf_step",
    "empirical_qoi",
    "kalman_predict",
    "kalman_update",
    "kalman_step",
    "kalman_dense_step",
]


def _psd_factor(a):
    """Factor F with F F^T = a for symmetric PSD a (cholesky, eigh fallback)."""
    if not np.any(a):
        return np.zeros_like(a)
    try:
        return scipy.linalg.cholesky(a, lower=True)
    except scipy.linalg.LinAlgError:
        w, q = scipy.linalg.eigh(a)
        w = np.clip(w, 0.0, None)
        return q * np.sqrt(w)


@dataclass(frozen=True)
class ObservationModel:
    """Observation operator H, noise covariance Gamma and QoI coefficients.

    ``H`` has one row per observed functional, columns are mode
    coefficients truncated at the reference dimension.  ``qoi`` holds
    the coefficients of the scalar quantity of interest.  ``Gamma``
    must be symmetric positive semi-definite; the filtering paths need
    it positive definite, the zero matrix is accepted for noiseless
    test data.
    """

    H: np.ndarray
    Gamma: np.ndarray
    qoi: np.ndarray

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        G = np.atleast_2d(np.asarray(self.Gamma, dtype=float))
        q = np.asarray(self.qoi, dtype=float)
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "Gamma", G)
        object.__setattr__(self, "qoi", q)
        if G.shape != (H.shape[0], H.shape[0]):
            raise ValueError("Gamma must be m x m")
        if q.shape != (H.shape[1],):
            raise ValueError("qoi must have n_ref entries")
        if not np.allclose(G, G.T):
            raise ValueError("Gamma must be symmetric")
        w = scipy.linalg.eigvalsh(G)
        if w.size and w[0] < -1e-12 * max(1.0, w[-1]):
            raise ValueError("Gamma must be positive semi-definite")

    @property
    def m(self):
        return self.H.shape[0]

    @property
    def n_ref(self):
        return self.H.shape[1]

    def observe(self, v):
        """Apply H to coefficients at any truncation: ``H[:, :n] v``."""
        n = v.shape[0]
        return self.H[:, :n] @ v

    def qoi_value(self, v):
        n = v.shape[0]
        return self.qoi[:n] @ v


@dataclass(frozen=True)
class Ensemble:
    """Single-level ensemble, members as columns of ``coeffs`` (N x M)."""

    coeffs: np.ndarray
    level: int

    def __post_init__(self):
        if self.coeffs.ndim != 2:
            raise ValueError("coeffs must be (n_modes, M)")
        if self.size < 2:
            raise ValueError("ensemble needs M >= 2")

    @property
    def size(self):
        return self.coeffs.shape[1]

    def member(self, i):
        return SpectralField(self.coeffs[:, i].copy(), self.level)


@dataclass(frozen=True)
class PairEnsemble:
    """Coupled pairs of one level: coarse (N_{l-1} x M) and fine (N_l x M).

    At level 0 the coarse array has 0 rows, standing in for the zero
    field convention v^{-1} := 0.
    """

    coarse: np.ndarray
    fine: np.ndarray
    level: int

    def __post_init__(self):
        if self.coarse.ndim != 2 or self.fine.ndim != 2:
            raise ValueError("members must be (n_modes, M) arrays")
        if self.coarse.shape[1] != self.fine.shape[1]:
            raise ValueError("coarse and fine must pair up")
        if self.size < 2:
            raise ValueError("pair ensemble needs M >= 2")
        if self.level == 0 and self.coarse.shape[0] != 0:
            raise ValueError("level-0 coarse members are the zero field")

    @property
    def size(self):
        return self.fine.shape[1]


@dataclass(frozen=True)
class MultilevelEnsemble:
    """Pair ensembles for levels 0..L."""

    levels: tuple

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(self.levels))
        if not self.levels:
            raise ValueError("need at least level 0")
        for l, pe in enumerate(self.levels):
            if pe.level != l:
                raise ValueError("levels must be contiguous from 0")
            if l > 0 and pe.coarse.shape[0] != self.levels[l - 1].fine.shape[0]:
                raise ValueError("coarse dimension must match the level below")

    @property
    def L(self):
        return len(self.levels) - 1

    @property
    def sizes(self):
        return tuple(pe.size for pe in self.levels)


@dataclass(frozen=True)
class GainPack:
    """Covariance action R = C H*, innovation covariance S, gain K = R S^{-1}."""

    R: np.ndarray
    S: np.ndarray
    K: np.ndarray


def sample_mean(e):
    """Coefficient-wise ensemble average as a field."""
    return SpectralField(e.coeffs.mean(axis=1), e.level)


def _centered(v):
    # X_M = (members - mean) / sqrt(M - 1), so Cov = X X^T
    m = v.shape[1]
    return (v - v.mean(axis=1, keepdims=True)) / np.sqrt(m - 1.0)


def _cov_action(v, obs):
    x = _centered(v)
    return x @ (obs.observe(x)).T


def sample_cov_action(e, obs):
    """Unbiased ``Cov_M[v, Hv]`` via the centered factor, shape (N, m).

    Equals ``(M/(M-1)) (E_M[v (Hv)^T] - E_M[v] E_M[Hv]^T)`` without ever
    forming an N x N matrix.
    """
    if e.size < 2:
        raise ValueError("sample covariance needs M >= 2")
    r = _cov_action(e.coeffs, obs)
    model.unit_counter["moments"] += obs.m * e.coeffs.shape[0] * e.size
    return r


def compute_R_ml(ml, obs):
    """Multilevel covariance action R^ML, accumulated level by level.

    Adds ``Cov_{M_l}[v^l, Hv^l] - Cov_{M_{l+1}}[v^l, Hv^l]`` into the
    first N_l rows for l < L, then the level-L fine covariance; the
    second term of each difference comes from the coarse members of the
    level above, which live at level l.  Cost O(m sum_l M_l N_l).
    """
    L = ml.L
    n_top = ml.levels[L].fine.shape[0]
    r = np.zeros((n_top, obs.m))
    for l in range(L):
        fine = ml.levels[l].fine
        r[: fine.shape[0]] += _cov_action(fine, obs)
        down = ml.levels[l + 1].coarse
        r[: down.shape[0]] -= _cov_action(down, obs)
        model.unit_counter["moments"] += obs.m * fine.shape[0] * fine.shape[1]
    top = ml.levels[L].fine
    r += _cov_action(top, obs)
    model.unit_counter["moments"] += obs.m * n_top * top.shape[1]
    return r


def positive_part(a):
    """Spectral positive part: keep eigenpairs with eigenvalue >= 0.

    The input is symmetrized first; the threshold is exactly zero, no
    clipping tolerance.
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    sym = 0.5 * (a + a.T)
    w, q = scipy.linalg.eigh(sym)
    keep = w >= 0.0
    qk = q[:, keep]
    return (qk * w[keep]) @ qk.T


def ml_gain(r, obs):
    """Gain from a covariance action: S = (HR)^+ + Gamma, K = R S^{-1}."""
    if not np.all(np.isfinite(r)):
        raise ValueError("covariance action has non-finite entries")
    s = positive_part(obs.observe(r)) + obs.Gamma
    try:
        cf = scipy.linalg.cho_factor(s)
    except scipy.linalg.LinAlgError as exc:
        raise RuntimeError("innovation covariance not positive definite") from exc
    k = scipy.linalg.cho_solve(cf, r.T).T
    return GainPack(R=r, S=s, K=k)


def _updated(v, k, obs, ytilde):
    # (I - P K H) v + P K ytilde, P the truncation to v's height
    n = v.shape[0]
    return v + k[:n] @ (ytilde - obs.observe(v))


def ml_update(ml, gain, y, obs, seed, realization, step):
    """Perturbed-observation update of every pair.

    One perturbed datum ``y + eta`` is shared by the two members of a
    pair and is independent across particles and levels; each member is
    corrected with the gain truncated to its own resolution.
    """
    y = np.asarray(y, dtype=float).reshape(obs.m)
    fac = _psd_factor(obs.Gamma)
    out = []
    for l, pe in enumerate(ml.levels):
        rng = RngKey(seed, "obs-perturbation", realization, l, 0, step).generator()
        eta = fac @ rng.standard_normal((obs.m, pe.size))
        ytilde = y[:, None] + eta
        fine = _updated(pe.fine, gain.K, obs, ytilde)
        coarse = _updated(pe.coarse, gain.K, obs, ytilde)
        out.append(PairEnsemble(coarse, fine, l))
    return MultilevelEnsemble(tuple(out))


def ml_predict(ml, cfg, hierarchy, seed, realization, step, solver):
    """Propagate every pair one interval with level-keyed coupled noise."""
    out = []
    for l, pe in enumerate(ml.levels):
        rng = RngKey(seed, "forward", realization, l, 0, step).generator()
        coarse, fine = propagate_pairs(
            pe.coarse, pe.fine, l, cfg, hierarchy, rng, solver
        )
        out.append(PairEnsemble(coarse, fine, l))
    return MultilevelEnsemble(tuple(out))


def mlenkf_step(ml, y, obs, cfg, hierarchy, seed, realization, step, solver):
    """One MLEnKF assimilation step: predict, multilevel gain, update."""
    n_top = ml.levels[ml.L].fine.shape[0]
    if obs.m >= n_top:
        raise ValueError(
            "observation dimension must stay below N_L "
            f"(m={obs.m}, N_L={n_top}); larger m is outside the regime"
        )
    pred = ml_predict(ml, cfg, hierarchy, seed, realization, step, solver)
    gain = ml_gain(compute_R_ml(pred, obs), obs)
    return ml_update(pred, gain, y, obs, seed, realization, step)


def enkf_gain(e, obs):
    """Single-level gain from the sample covariance action.

    positive_part is a no-op on the PSD single-level covariance but is
    applied anyway so both filters share one code path.
    """
    return ml_gain(sample_cov_action(e, obs), obs)


def enkf_update(e, gain, y, obs, seed, realization, step):
    """Update each member with its own perturbed observation."""
    y = np.asarray(y, dtype=float).reshape(obs.m)
    fac = _psd_factor(obs.Gamma)
    rng = RngKey(seed, "obs-perturbation", realization, e.level, 0, step).generator()
    eta = fac @ rng.standard_normal((obs.m, e.size))
    return Ensemble(_updated(e.coeffs, gain.K, obs, y[:, None] + eta), e.level)


def enkf_step(e, y, obs, cfg, hierarchy, seed, realization, step, solver):
    """One EnKF assimilation step at the ensemble's level."""
    if obs.m >= e.coeffs.shape[0]:
        raise ValueError(
            "observation dimension must stay below N_L "
            f"(m={obs.m}, N_L={e.coeffs.shape[0]}); larger m is outside the regime"
        )
    rng = RngKey(seed, "forward", realization, e.level, 0, step).generator()
    empty = np.zeros((0, e.size))
    _, fine = propagate_pairs(empty, e.coeffs, e.level, cfg, hierarchy, rng, solver)
    pred = Ensemble(fine, e.level)
    gain = enkf_gain(pred, obs)
    return enkf_update(pred, gain, y, obs, seed, realization, step)


def empirical_qoi(ens, qoi):
    """QoI of the empirical measure.

    Single level: the ensemble average of ``phi(v_i)``.  Multilevel: the
    telescoping sum of fine-minus-coarse averages per level.  ``phi`` is
    the truncated inner product with the ``qoi`` coefficients.
    """
    qoi = np.asarray(qoi, dtype=float)
    if isinstance(ens, Ensemble):
        n = ens.coeffs.shape[0]
        return float(np.mean(qoi[:n] @ ens.coeffs))
    total = 0.0
    for pe in ens.levels:
        total += np.mean(qoi[: pe.fine.shape[0]] @ pe.fine)
        if pe.coarse.shape[0]:
            total -= np.mean(qoi[: pe.coarse.shape[0]] @ pe.coarse)
    return float(total)


@dataclass(frozen=True)
class GaussianState:
    """Kalman reference state with diagonal-plus-low-rank covariance.

    ``cov = diag(cov_diag) - factors diag(signs) factors^T``; the rank
    grows by m per assimilation step.  Exact here because the initial
    covariance is zero and prediction is mode-diagonal.
    """

    mean: np.ndarray
    cov_diag: np.ndarray
    factors: np.ndarray
    signs: np.ndarray

    @classmethod
    def deterministic(cls, u0):
        u0 = np.asarray(u0, dtype=float)
        n = u0.size
        return cls(u0.copy(), np.zeros(n), np.zeros((n, 0)), np.zeros(0))

    @property
    def rank(self):
        return self.factors.shape[1]

    def cov_action(self, w):
        """``cov @ w`` for an (n, p) probe without forming the covariance."""
        w = np.asarray(w, dtype=float)
        return self.cov_diag[:, None] * w - self.factors @ (
            self.signs[:, None] * (self.factors.T @ w)
        )

    def cov_matrix(self):
        """Dense covariance; for tests and small dimensions only."""
        return np.diag(self.cov_diag) - (self.factors * self.signs) @ self.factors.T


def kalman_predict(state, cfg):
    """Exact mean/covariance push-forward over one interval."""
    lam = eigenvalues(state.mean.size)
    a = propagator(lam, cfg.T)
    q = exact_noise_var(lam, cfg.T, cfg.b)
    return GaussianState(
        a * state.mean,
        a * a * state.cov_diag + q,
        a[:, None] * state.factors,
        state.signs.copy(),
    )


def kalman_update(state, y, obs):
    """Exact Kalman update; appends a rank-m downdate to the covariance.

    ``S = H C H* + Gamma`` must be positive definite.  The mean update
    uses the plain datum y, not a perturbed copy.
    """
    y = np.asarray(y, dtype=float).reshape(obs.m)
    n = state.mean.size
    ch = state.cov_action(obs.H[:, :n].T)
    s = obs.observe(ch) + obs.Gamma
    s = 0.5 * (s + s.T)
    try:
        low = scipy.linalg.cholesky(s, lower=True)
    except scipy.linalg.LinAlgError as exc:
        raise RuntimeError("innovation covariance not positive definite") from exc
    k = scipy.linalg.cho_solve((low, True), ch.T).T
    mean = state.mean + k @ (y - obs.observe(state.mean))
    # (I - KH)C = C - G G^T with G = C H* L^{-T}
    g = scipy.linalg.solve_triangular(low, ch.T, lower=True).T
    return GaussianState(
        mean,
        state.cov_diag.copy(),
        np.hstack([state.factors, g]),
        np.concatenate([state.signs, np.ones(obs.m)]),
    )


def kalman_step(state, y, obs, cfg):
    """Predict then update; the exact filtering recursion."""
    return kalman_update(kalman_predict(state, cfg), y, obs)


def kalman_dense_step(mean, cov, y, obs, cfg):
    """Dense-matrix Kalman recursion, the oracle for the low-rank path.

    Returns the updated ``(mean, cov)``; quadratic memory, use only for
    small reference dimensions.
    """
    y = np.asarray(y, dtype=float).reshape(obs.m)
    n = mean.size
    lam = eigenvalues(n)
    a = propagator(lam, cfg.T)
    mean = a * mean
    cov = a[:, None] * cov * a[None, :] + np.diag(exact_noise_var(lam, cfg.T, cfg.b))
    h = obs.H[:, :n]
    s = h @ cov @ h.T + obs.Gamma
    k = np.linalg.solve(s, h @ cov).T
    mean = mean + k @ (y - h @ mean)
    cov = cov - k @ h @ cov
    return mean, 0.5 * (cov + cov.T)
