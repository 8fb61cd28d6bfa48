import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import mixed_instance
from pmcrossover.estimation import FitOptions, fit
from pmcrossover.inference import (
    DegenerateVariance,
    build_delta,
    delta_components,
    delta_variance,
    interaction_contrast,
    pooled_means,
    wald_p,
)
from pmcrossover.patterns import GroupingScheme


@pytest.fixture
def fitted(rng):
    return fit(mixed_instance(rng), GroupingScheme.default(), FitOptions(method="reml"))


def _random_delta(rng, G=3, n=40):
    pi = rng.dirichlet(np.ones(G))
    means = rng.normal(size=(G, 4)) * 20
    A = rng.normal(size=(4 * G, 4 * G))
    return pi, means, A @ A.T / (4 * G), n


def test_interaction_contrast():
    c = interaction_contrast()
    np.testing.assert_array_equal(c, [1, -1, -1, 1])
    assert c @ np.array([3.0, 3.0, -2.0, -2.0]) == 0
    # published pooled means: RA 9.2, RP 8.3, GA 3.4, GP -9.2
    assert c @ np.array([9.2, 8.3, 3.4, -9.2]) == pytest.approx(-11.7, abs=1e-12)


@pytest.mark.parametrize(
    "gamma, se, lo, hi",
    [(-11.7, 22.3, 0.595, 0.605), (-15.8, 19.4, 0.405, 0.425)],
)
def test_wald_published_p_values(gamma, se, lo, hi):
    z, p = wald_p(gamma, se)
    assert z == pytest.approx(gamma / se)
    assert lo <= p <= hi


def test_wald_zero_and_degenerate():
    assert wald_p(0.0, 3.0)[1] == 1.0
    with pytest.raises(DegenerateVariance):
        wald_p(1.0, 0.0)


def test_pooled_arithmetic():
    pi = np.array([0.725, 0.15, 0.125])
    means = np.array([[10.0, 0, 0, 0], [20.0, 0, 0, 0], [30.0, 0, 0, 0]])
    comp = build_delta(pi, means, np.eye(12), 40)
    assert (comp.J2 @ comp.mu_vec)[0] == pytest.approx(14.0, abs=1e-12)


def test_pooled_degenerate_weights(rng):
    _, means, cov, n = _random_delta(rng)
    comp = build_delta(np.array([1.0, 0.0, 0.0]), means, cov, n)
    np.testing.assert_allclose(comp.J2 @ comp.mu_vec, means[0], atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_pooled_common_means(seed):
    rng = np.random.default_rng(seed)
    m = rng.normal(size=4)
    pi = rng.dirichlet(np.ones(3))
    comp = build_delta(pi, np.tile(m, (3, 1)), np.eye(12), 50)
    np.testing.assert_allclose(comp.J2 @ comp.mu_vec, m, atol=1e-12)
    np.testing.assert_allclose(comp.J1, 0, atol=1e-15)


def test_jacobian_matches_explicit_three_group_form(rng):
    pi, M, cov, n = _random_delta(rng)
    comp = build_delta(pi, M, cov, n)
    C, D, P = M
    J1 = np.array([[C[k] - P[k], D[k] - P[k]] for k in range(4)])
    pC, pD, pP = pi
    J2 = np.array(
        [
            [pC, pD, pP, 0, 0, 0, 0, 0, 0, 0, 0, 0],
            [0, 0, 0, pC, pD, pP, 0, 0, 0, 0, 0, 0],
            [0, 0, 0, 0, 0, 0, pC, pD, pP, 0, 0, 0],
            [0, 0, 0, 0, 0, 0, 0, 0, 0, pC, pD, pP],
        ]
    )
    np.testing.assert_array_equal(comp.J1, J1)
    np.testing.assert_array_equal(comp.J2, J2)
    # mu vector ordering (1A:C,D,P, 1B:C,D,P, ...)
    np.testing.assert_array_equal(comp.mu_vec, [C[0], D[0], P[0], C[1], D[1], P[1], C[2], D[2], P[2], C[3], D[3], P[3]])
    free = pi[:2]
    np.testing.assert_allclose(comp.V_pi, (np.diag(free) - np.outer(free, free)) / n)
    assert comp.J.shape == (4, 14) and comp.V.shape == (14, 14)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 4))
def test_variance_invariant_to_eliminated_group(seed, G):
    rng = np.random.default_rng(seed)
    pi, M, cov, n = _random_delta(rng, G)
    c = interaction_contrast()
    base = c @ build_delta(pi, M, cov, n).means_cov() @ c
    perm = rng.permutation(G)
    idx = np.concatenate([np.arange(4 * g, 4 * g + 4) for g in perm])
    other = c @ build_delta(pi[perm], M[perm], cov[np.ix_(idx, idx)], n).means_cov() @ c
    assert other == pytest.approx(base, rel=1e-10)


def test_single_group_collapses_to_gls_se(rng):
    recs = mixed_instance(rng)
    f = fit(recs, GroupingScheme.naive(), FitOptions(method="reml"))
    res = delta_variance(f)
    c = interaction_contrast()
    assert res.components.J1.shape == (4, 0)
    assert res.se == pytest.approx(math.sqrt(c @ f.beta_cov[:4, :4] @ c), rel=1e-12)


def test_proportion_uncertainty_adds_variance(fitted):
    comp = delta_components(fitted)
    c = interaction_contrast()
    fixed = c @ comp.means_cov(include_pi=False) @ c
    full = c @ comp.means_cov() @ c
    assert full >= fixed
    # fixed-proportion variance is the weighted GLS contrast variance
    w = np.kron(comp.pi, c)  # group-major weights
    idx = np.array([i * 8 + k for i in range(len(comp.pi)) for k in range(4)])
    assert fixed == pytest.approx(w @ fitted.beta_cov[np.ix_(idx, idx)] @ w, rel=1e-10)


def test_equal_group_means_ignore_proportion_variance(rng):
    _, M, cov, n = _random_delta(rng)
    M[:] = M[0]
    comp = build_delta(np.array([0.5, 0.3, 0.2]), M, cov, n)
    c = interaction_contrast()
    assert c @ comp.means_cov() @ c == pytest.approx(c @ comp.means_cov(include_pi=False) @ c, rel=1e-14)


def test_gamma_is_weighted_group_contrasts(fitted):
    res = delta_variance(fitted)
    c = interaction_contrast()
    by_group = sum(fitted.proportions.pi_g[g] * (c @ fitted.betas[g].means) for g in fitted.groups)
    assert res.gamma_hat == pytest.approx(by_group, rel=1e-12)
    pm = pooled_means(fitted)
    np.testing.assert_allclose(pm.means, res.pooled.means)
    assert res.ci_95[1] - res.gamma_hat == pytest.approx(1.959964 * res.se, rel=1e-6)
    assert res.p_two_sided == pytest.approx(wald_p(res.gamma_hat, res.se)[1])
    assert np.all(np.linalg.eigvalsh(pm.cov) > -1e-9)


def test_nonestimable_means_make_variance_degenerate(rng):
    from conftest import make_records
    from pmcrossover.patterns import Sequence

    cells = [(0, s) for s in Sequence for _ in range(5)] + [(5, s) for s in Sequence] * 3
    recs = make_records(rng, cells, np.eye(4))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        f = fit(recs, GroupingScheme.default(), FitOptions(method="ml"))
    res = delta_variance(f)
    assert math.isnan(res.p_two_sided)
    assert any("non-estimable" in w for w in res.warnings)
