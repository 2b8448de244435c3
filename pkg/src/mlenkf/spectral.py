"""Eigenbasis bookkeeping, fractional norms and the resolution ladder.

States live in the eigenbasis of the negative Dirichlet Laplacian on
(0, 1): phi_j = sqrt(2) sin(j pi x) with eigenvalue lambda_j = pi^2 j^2.
A field is stored as its coefficient vector, truncated at the N_l modes
of its resolution level; physical-space values are never needed because
all dynamics used here are mode-diagonal or mode-linear.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "ModeBasis",
    "SpectralField",
    "LevelHierarchy",
    "eigenvalues",
    "fractional_norm",
    "project",
    "zero_field",
]


def eigenvalues(n):
    """Eigenvalues ``pi^2 j^2`` for modes ``j = 1..n`` as a float array."""
    j = np.arange(1, n + 1, dtype=float)
    return (np.pi * j) ** 2


@dataclass(frozen=True)
class ModeBasis:
    """Sine eigenbasis truncated at ``n_ref`` modes."""

    n_ref: int

    def __post_init__(self):
        if self.n_ref < 1:
            raise ValueError("n_ref must be a positive integer")

    def eigenvalue(self, j):
        """``lambda_j = pi^2 j^2`` with an index range check."""
        if not 1 <= j <= self.n_ref:
            raise ValueError(f"mode index {j} outside 1..{self.n_ref}")
        return (np.pi * j) ** 2

    def eigenvalues(self):
        return eigenvalues(self.n_ref)


@dataclass(frozen=True)
class SpectralField:
    """Mode coefficients of a state together with its resolution level.

    Level -1 denotes the zero field with no modes (the ``v^{-1} := 0``
    convention used for the coarse partner at level 0).  For levels >= 0
    the coefficient length must equal N_level of the hierarchy in use;
    the field itself cannot check that without the hierarchy, callers
    that care do.
    """

    coeffs: np.ndarray
    level: int

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=float)
        object.__setattr__(self, "coeffs", c)
        if self.level < -1:
            raise ValueError("level must be >= -1")
        if self.level == -1 and c.size != 0:
            raise ValueError("level -1 is the empty zero field")


def zero_field():
    """The level -1 zero field."""
    return SpectralField(np.zeros(0), -1)


def fractional_norm(u, r):
    """Norm of ``K_r``: ``sqrt(sum_j lambda_j^{2r} |u_j|^2)``.

    ``u`` may be a :class:`SpectralField` or a plain coefficient array;
    ``r = 0`` gives the Euclidean norm, the empty field has norm 0.
    """
    c = u.coeffs if isinstance(u, SpectralField) else np.asarray(u, dtype=float)
    if c.size == 0:
        return 0.0
    w = eigenvalues(c.size) ** (2.0 * r)
    return float(np.sqrt(np.sum(w * c * c)))


@dataclass(frozen=True)
class LevelHierarchy:
    """Geometric resolution ladder plus the rate constants attached to it.

    ``N_l = round(n0 * kappa^l)`` (ties up), ``J_l = j0 * 2^l``,
    ``h_l = N_l^{-1/d}`` and ``dt_l = T / J_l``.  ``beta`` is the strong
    coupling rate, ``gamma_x``/``gamma_t`` the spatial and temporal cost
    exponents (``gamma_t = 0`` for the exact-in-time solver).
    """

    kappa: float
    n0: int = 1
    j0: int = 1
    d: int = 1
    T: float = 0.25
    beta: float = 2.0
    gamma_x: float = 1.0
    gamma_t: float = 0.0

    def __post_init__(self):
        if self.kappa <= 1.0:
            raise ValueError("kappa must exceed 1")
        if self.n0 < 1 or self.j0 < 1 or self.d < 1:
            raise ValueError("n0, j0, d must be positive integers")
        if self.T <= 0.0:
            raise ValueError("T must be positive")

    @classmethod
    def from_equilibration(cls, r1, r2, **kwargs):
        """Ladder with ``kappa = 2^{1/(2(r2-r1))}`` (error equilibration)."""
        if not r2 > r1:
            raise ValueError("need r2 > r1")
        return cls(kappa=2.0 ** (1.0 / (2.0 * (r2 - r1))), **kwargs)

    def n_modes(self, level):
        if level < 0:
            raise ValueError("level must be >= 0")
        # round half up so ties go to the larger grid
        return int(math.floor(self.n0 * self.kappa ** level + 0.5))

    def n_substeps(self, level):
        if level < 0:
            raise ValueError("level must be >= 0")
        return self.j0 * 2 ** level

    def level_params(self, level):
        """``(N_l, J_l, h_l, dt_l)`` for one level."""
        n = self.n_modes(level)
        j = self.n_substeps(level)
        return n, j, float(n) ** (-1.0 / self.d), self.T / j


def project(u, level, hierarchy):
    """Mode-truncation projector ``P_l``: keep modes ``j <= N_l``.

    Coefficients beyond the target dimension are dropped; a target wider
    than the input is zero-padded (the input has no mass there).  Level
    -1 returns the zero field.
    """
    if level < -1:
        raise ValueError("level must be >= -1")
    if level == -1:
        return zero_field()
    n = hierarchy.n_modes(level)
    c = np.zeros(n)
    k = min(n, u.coeffs.size)
    c[:k] = u.coeffs[:k]
    return SpectralField(c, level)
