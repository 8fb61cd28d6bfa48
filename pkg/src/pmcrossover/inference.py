"""Proportion-weighted population means and delta-method inference on a contrast."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .model import N_EFFECTS

Z95 = 1.959963984540054


class DegenerateVariance(ValueError):
    pass


def interaction_contrast() -> np.ndarray:
    """Type-by-treatment interaction (mu_1A - mu_1B) - (mu_2A - mu_2B)."""
    return np.array([1.0, -1.0, -1.0, 1.0])


def wald_p(gamma_hat: float, se: float) -> tuple[float, float]:
    if not se > 0:
        raise DegenerateVariance(f"standard error must be positive, got {se}")
    z = gamma_hat / se
    return z, float(2.0 * stats.norm.sf(abs(z)))


@dataclass
class DeltaComponents:
    groups: tuple[str, ...]
    pi: np.ndarray  # all G group proportions
    n_pairs: int
    V_pi: np.ndarray  # (G-1)x(G-1), free proportions
    mu_vec: np.ndarray  # 4G, cell-major: (1A:g1..gG, 1B:..., ...)
    V_mu: np.ndarray  # 4G x 4G
    J1: np.ndarray  # 4 x (G-1)
    J2: np.ndarray  # 4 x 4G

    @property
    def J(self) -> np.ndarray:
        return np.hstack([self.J1, self.J2])

    @property
    def V(self) -> np.ndarray:
        k = self.V_pi.shape[0]
        m = self.V_mu.shape[0]
        V = np.zeros((k + m, k + m))
        V[:k, :k] = self.V_pi
        V[k:, k:] = self.V_mu
        return V

    def means_cov(self, include_pi: bool = True) -> np.ndarray:
        if include_pi:
            out = self.J @ self.V @ self.J.T
        else:
            out = self.J2 @ self.V_mu @ self.J2.T
        return (out + out.T) / 2


def build_delta(pi, group_means, group_mean_cov, n_pairs) -> DeltaComponents:
    """Jacobian blocks and block-diagonal variance for G groups.

    ``group_means`` is G x 4 (rows in group order, columns 1A, 1B, 2A, 2B);
    ``group_mean_cov`` is the 4G x 4G covariance in group-major order
    (g1: 1A..2B, g2: ...).  The last group's proportion is eliminated.
    """
    pi = np.asarray(pi, float)
    M = np.asarray(group_means, float)
    G = len(pi)
    # reorder group-major -> cell-major
    perm = np.array([g * 4 + k for k in range(4) for g in range(G)])
    mu_vec = M.T.reshape(-1)
    V_mu = np.asarray(group_mean_cov, float)[np.ix_(perm, perm)]
    free = pi[:-1]
    V_pi = (np.diag(free) - np.outer(free, free)) / n_pairs
    J1 = (M[:-1] - M[-1]).T if G > 1 else np.zeros((4, 0))
    J2 = np.zeros((4, 4 * G))
    for k in range(4):
        J2[k, k * G:(k + 1) * G] = pi
    return DeltaComponents(tuple(), pi, n_pairs, V_pi, mu_vec, V_mu, J1, J2)


def delta_components(fit) -> DeltaComponents:
    groups = fit.groups
    pi = np.array([fit.proportions.pi_g[g] for g in groups])
    if not math.isclose(pi.sum(), 1.0, abs_tol=1e-12):
        raise ValueError("group proportions of the fitted groups do not sum to 1")
    means = np.array([fit.betas[g].means for g in groups])
    mu_idx = np.array([i * N_EFFECTS + k for i in range(len(groups)) for k in range(4)])
    cov = fit.beta_cov[np.ix_(mu_idx, mu_idx)]
    comp = build_delta(pi, means, cov, fit.counts.total)
    comp.groups = tuple(groups)
    return comp


@dataclass
class PooledMeans:
    means: np.ndarray  # 1A, 1B, 2A, 2B
    cov: np.ndarray

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov), 0, None))

    def __getattr__(self, name):
        cells = {"mu_1A": 0, "mu_1B": 1, "mu_2A": 2, "mu_2B": 3}
        if name in cells:
            return float(self.means[cells[name]])
        raise AttributeError(name)


def pooled_means(fit) -> PooledMeans:
    comp = delta_components(fit)
    return PooledMeans(comp.J2 @ comp.mu_vec, comp.means_cov())


@dataclass
class InferenceResult:
    gamma_hat: float
    se: float
    z: float
    p_two_sided: float
    ci_95: tuple[float, float]
    contrast: np.ndarray
    pooled: PooledMeans
    components: DeltaComponents
    warnings: list[str] = field(default_factory=list)


def delta_variance(fit, c=None) -> InferenceResult:
    c = interaction_contrast() if c is None else np.asarray(c, float)
    if c.shape != (4,):
        raise ValueError("contrast must have 4 entries (1A, 1B, 2A, 2B)")
    comp = delta_components(fit)
    pooled = PooledMeans(comp.J2 @ comp.mu_vec, comp.means_cov())
    gamma = float(c @ pooled.means)
    var = float(c @ pooled.cov @ c)
    notes = []
    if not fit.converged:
        notes.append("fit did not converge; standard error is provisional")
    bad = [f"{g}:{n}" for g, n in fit.non_estimable if n.startswith("mu_")]
    if fit.non_estimable:
        notes.append(
            "some effects are non-estimable "
            f"({', '.join(f'{g}:{n}' for g, n in fit.non_estimable)}); cell means may be confounded"
        )
    se = math.sqrt(var) if var > 0 else 0.0
    scale = max(1.0, float(np.abs(c) @ np.abs(pooled.means)))
    if se <= 1e-12 * scale or bad:
        notes.append("degenerate variance: p-value undefined")
        return InferenceResult(gamma, se, float("nan"), float("nan"), (float("nan"), float("nan")), c, pooled, comp, notes)
    z, p = wald_p(gamma, se)
    return InferenceResult(gamma, se, z, p, (gamma - Z95 * se, gamma + Z95 * se), c, pooled, comp, notes)
