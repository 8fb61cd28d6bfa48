"""Complete-data mean and covariance structure, and pattern-reduced moments."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence as Seq

import numpy as np

from .patterns import POSITIONS, Sequence, classify, observed_positions, position_mask

EFFECT_NAMES = ("mu_1A", "mu_1B", "mu_2A", "mu_2B", "rho_1", "rho_2", "nu_1", "nu_2")
N_EFFECTS = 8

_TRIL = np.tril_indices(4)
N_THETA = len(_TRIL[0])


@dataclass(frozen=True)
class GroupEffects:
    mu_1A: float = 0.0
    mu_1B: float = 0.0
    mu_2A: float = 0.0
    mu_2B: float = 0.0
    rho_1: float = 0.0
    rho_2: float = 0.0
    nu_1: float = 0.0
    nu_2: float = 0.0

    @classmethod
    def from_array(cls, values) -> "GroupEffects":
        values = np.asarray(values, dtype=float)
        if values.shape != (N_EFFECTS,):
            raise ValueError(f"expected 8 effects, got shape {values.shape}")
        return cls(*(float(v) for v in values))

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, k) for k in EFFECT_NAMES])

    @property
    def means(self) -> np.ndarray:
        return self.as_array()[:4]


def design_matrix(sequence: Sequence) -> np.ndarray:
    """4x8 map from (mu, rho, nu) to the cell means, rows in position order."""
    s = Sequence(sequence)
    X = np.zeros((4, N_EFFECTS))
    X[:, :4] = np.eye(4)
    # AB: treatment A in period 1 (+rho), BA: treatment A in period 2 (-rho)
    period_sign = np.array([1, -1, 1, -1]) * (1 if s == Sequence.AB else -1)
    seq_sign = 1 if s == Sequence.AB else -1
    for pos in range(4):
        subject = pos // 2
        X[pos, 4 + subject] = period_sign[pos]
        X[pos, 6 + subject] = seq_sign
    return X


def chol_log_from_cov(sigma) -> np.ndarray:
    """Unconstrained 10-vector: lower Cholesky factor, row-wise, log on the diagonal."""
    L = np.linalg.cholesky(np.asarray(sigma, dtype=float))
    L[np.diag_indices(4)] = np.log(np.diag(L))
    return L[_TRIL].copy()


def chol_factor(theta) -> np.ndarray:
    L = np.zeros((4, 4))
    L[_TRIL] = theta
    L[np.diag_indices(4)] = np.exp(np.diag(L))
    return L


def cov_from_chol_log(theta) -> np.ndarray:
    L = chol_factor(theta)
    return L @ L.T


@dataclass(frozen=True)
class CovarianceUnstructured:
    sigma: np.ndarray

    def __post_init__(self):
        sigma = np.array(self.sigma, dtype=float)
        if sigma.shape != (4, 4) or not np.allclose(sigma, sigma.T, rtol=1e-12, atol=0):
            raise ValueError("covariance must be a symmetric 4x4 matrix")
        sigma = (sigma + sigma.T) / 2
        try:
            np.linalg.cholesky(sigma)
        except np.linalg.LinAlgError:
            raise ValueError("covariance is not positive definite") from None
        object.__setattr__(self, "sigma", sigma)

    @classmethod
    def from_chol_log(cls, theta) -> "CovarianceUnstructured":
        return cls(cov_from_chol_log(theta))

    @property
    def chol_log(self) -> np.ndarray:
        return chol_log_from_cov(self.sigma)


@dataclass(frozen=True)
class PairRecord:
    pair_id: object
    sequence: Sequence
    y: tuple[Optional[float], Optional[float], Optional[float], Optional[float]]

    def __post_init__(self):
        object.__setattr__(self, "sequence", Sequence.parse(self.sequence))
        y = tuple(
            None if v is None or (isinstance(v, float) and math.isnan(v)) else float(v)
            for v in self.y
        )
        if len(y) != 4:
            raise ValueError("y must have 4 entries in (1A, 1B, 2A, 2B) order")
        object.__setattr__(self, "y", y)
        # rejects all-missing records
        object.__setattr__(self, "_pattern", classify(self.mask, self.sequence))

    @property
    def mask(self) -> tuple[bool, ...]:
        return tuple(v is not None for v in self.y)

    @property
    def pattern(self) -> int:
        return self._pattern

    @property
    def observed(self) -> np.ndarray:
        return np.array([v for v in self.y if v is not None])


def reduced_moments(p: int, sequence: Sequence, beta_g, cov) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of the observed subvector for pattern ``p``."""
    beta = beta_g.as_array() if isinstance(beta_g, GroupEffects) else np.asarray(beta_g, float)
    sigma = cov.sigma if isinstance(cov, CovarianceUnstructured) else np.asarray(cov, float)
    idx = observed_positions(p, sequence)
    mean = (design_matrix(sequence) @ beta)[idx]
    return mean, sigma[np.ix_(idx, idx)]


__all__ = [
    "EFFECT_NAMES",
    "POSITIONS",
    "GroupEffects",
    "CovarianceUnstructured",
    "PairRecord",
    "design_matrix",
    "reduced_moments",
    "chol_log_from_cov",
    "cov_from_chol_log",
    "position_mask",
]
