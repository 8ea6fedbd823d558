import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from paralab.normest import (
    PROFILES, linear_pnorm, random_field, random_fields, sublinear_pnorm,
)
from paralab.space import weighted_lp_norm


def test_random_fields_are_prefix_stable():
    short = random_fields(20, 5, seed=9)
    long = random_fields(20, 12, seed=9)
    assert_allclose(long[:, :5], short)
    assert_allclose(random_fields(20, 3, seed=9, start=5), long[:, 5:8])


def test_profiles_cycle():
    point = random_field(50, seed=1, k=PROFILES.index("point"))
    assert np.sum(np.abs(point) > 0.5) == 1
    signs = random_field(50, seed=1, k=PROFILES.index("rademacher"))
    assert set(np.unique(signs)) <= {-1.0, 1.0}
    complex_draw = random_field(50, seed=1, k=0, real=False)
    assert np.iscomplexobj(complex_draw)


@pytest.mark.parametrize("n", [1, 2, 3])
def test_bump_profile_on_tiny_supports(n):
    bump = random_field(n, seed=4, k=PROFILES.index("bump"))
    assert bump.shape == (n,)
    assert np.all(np.isfinite(bump)) and bump.max() == pytest.approx(1.0)
    mu = np.ones(n)
    estimate = sublinear_pnorm(lambda X: 2.0 * X, n, mu, mu, 2.0, samples=8, seed=0, ascent_steps=5)
    assert_allclose(estimate.value, 2.0, rtol=1e-12)


def test_weighted_lp_norm():
    mu = np.array([1.0, 2.0, 0.5])
    f = np.array([1.0, -1.0, 2.0])
    assert_allclose(weighted_lp_norm(f, 2, mu), math.sqrt(1 + 2 + 2))
    assert weighted_lp_norm(f, math.inf, mu) == 2.0
    assert_allclose(weighted_lp_norm(np.stack([f, 0 * f], axis=1), 3, mu), [weighted_lp_norm(f, 3, mu), 0.0])


@pytest.mark.parametrize("p", [1.5, 2.0, 4.0])
def test_linear_estimate_of_diagonal_matrix_is_exact(p):
    mu = np.ones(6)
    matrix = np.diag([0.5, 3.0, 1.0, 2.0, 0.1, 1.5])
    estimate = linear_pnorm(matrix, mu, mu, p, samples=50, seed=2)
    assert estimate.value <= 3.0 + 1e-12
    assert estimate.value >= 3.0 * (1 - 1e-6)


def test_linear_estimate_of_two_norm_matches_svd():
    rng = np.random.default_rng(4)
    matrix = rng.standard_normal((10, 10))
    mu = np.ones(10)
    estimate = linear_pnorm(matrix, mu, mu, 2.0, samples=20, seed=0)
    top = np.linalg.norm(matrix, 2)
    assert estimate.value <= top * (1 + 1e-12)
    assert estimate.value >= top * (1 - 1e-2)


def test_estimates_are_nondecreasing_in_sample_count():
    rng = np.random.default_rng(5)
    matrix = rng.standard_normal((12, 12))
    mu = np.ones(12)
    values = [linear_pnorm(matrix, mu, mu, 4.0, samples=s, seed=3).value for s in (5, 10, 40)]
    assert values == sorted(values)
    fn = lambda X: np.abs(matrix @ X)
    values = [sublinear_pnorm(fn, 12, mu, mu, 3.0, samples=s, seed=3, ascent_steps=20).value for s in (5, 10, 40)]
    assert values == sorted(values)


def test_sublinear_estimate_is_a_lower_bound():
    mu = np.ones(8)
    fn = lambda X: np.abs(X) * 2.0
    estimate = sublinear_pnorm(fn, 8, mu, mu, 2.0, samples=10, seed=0, ascent_steps=10)
    assert_allclose(estimate.value, 2.0, rtol=1e-12)


def test_projection_restricts_test_vectors():
    mu = np.ones(4)
    project = np.eye(4) - np.full((4, 4), 0.25)
    matrix = np.full((4, 4), 10.0) + np.eye(4)
    estimate = linear_pnorm(matrix, mu, mu, 2.0, samples=30, seed=1, project=project)
    assert_allclose(estimate.value, 1.0, rtol=1e-8)
