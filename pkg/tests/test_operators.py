import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from paralab.calculus import build_calculus
from paralab.errors import AccretivityError, EllipticityError, UnsupportedOperatorError
from paralab.operators import (
    Generator, check_accretivity, check_carre_identity, check_cauchy_schwarz, check_ellipticity,
    check_r2_and_carre2, divergence_form, forward_difference, gamma, gamma_len, graph_laplacian,
    nondivergence_delta_a, numerical_range_angle,
)
from paralab.space import build_graph_space, build_grid_space

CARRE_TOL = 1e-12
CAUCHY_SCHWARZ_TOL = 1e-12
R2_TOL = 1e-10


def _complex_pairs(n, count, seed=0):
    rng = np.random.default_rng(seed)
    shape = (n, count)
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape),
            rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def test_two_point_laplacian(k2_space):
    gen = graph_laplacian(k2_space)
    assert_allclose(gen.matrix, [[1.0, -1.0], [-1.0, 1.0]])
    assert gen.self_adjoint and gen.conservative
    v = np.array([1.0, -1.0])
    assert_allclose(gamma(gen, v, v), [2.0, 2.0])


def test_gamma_uses_the_complex_symmetric_part(hermitian_divergence, nonnormal_divergence):
    space = hermitian_divergence.generator.space
    f = space.coords[:, 0] * space.coords[:, 1]
    herm = gamma(hermitian_divergence.generator, f, f)
    skew = gamma(nonnormal_divergence.generator, f, f)
    assert np.abs(np.imag(herm)).max() <= 1e-14
    # A = [[1, i/2], [i/2, 1]] is its own symmetric part, so Γ(f, f) is complex for real f
    assert np.abs(np.imag(skew)).max() > 0.1
    assert_allclose(np.real(skew), np.real(herm), atol=1e-14)


def test_gamma_length_of_eigenvector_matches_root(k2):
    gen = k2.generator
    v = np.array([1.0, -1.0])
    lhs = np.sqrt(np.sum(gamma_len(gen, v) ** 2 * gen.space.mu))
    assert_allclose(lhs, math.sqrt(2) * np.sqrt(np.sum(v ** 2)))


@pytest.mark.parametrize("space", [
    build_graph_space([(0, 1, 1.0)], [1.0, 1.0]),
    build_graph_space([(0, 1, 1.0), (1, 2, 3.0)], [1.0, 0.5, 2.0]),
    build_grid_space([64]),
    build_grid_space([500]),
], ids=["k2", "p3", "line64", "line500"])
def test_strong_carre_identity_on_graphs(space):
    gen = graph_laplacian(space)
    F, G = _complex_pairs(space.n, 1000)
    report = check_carre_identity(gen, F, G)
    assert report.residual_strong <= CARRE_TOL


def test_weak_carre_identity(p3):
    gen = p3.generator
    f = np.array([1.0, 0.2, -0.7])
    g = np.array([0.3, -1.0, 0.5])
    report = check_carre_identity(gen, f, g, p3, np.geomspace(0.1, 10.0, 6))
    assert report.residual_weak_max_t <= CARRE_TOL
    assert report.carre_w_ratio is not None


@pytest.mark.parametrize("n", [32, 64])
def test_divergence_carre_residual_is_first_order(n):
    def residual(side):
        space = build_grid_space([side], h=1.0 / side, periodic=True)
        gen = divergence_form(space, [[1.0]])
        x = space.coords[:, 0]
        return check_carre_identity(gen, np.sin(2 * np.pi * x), np.cos(2 * np.pi * x)).residual_strong_abs

    ratio = residual(2 * n) / residual(n)
    assert 0.4 <= ratio <= 0.6


@pytest.mark.parametrize("calc_name", ["line64", "hermitian_divergence"])
def test_pointwise_cauchy_schwarz(calc_name, request):
    gen = request.getfixturevalue(calc_name).generator
    assert check_cauchy_schwarz(gen, samples=10_000, seed=3) <= CAUCHY_SCHWARZ_TOL


@pytest.mark.parametrize("calc_name", ["p3", "line64", "square8"])
def test_r2_equality_and_carre2(calc_name, request):
    calc = request.getfixturevalue(calc_name)
    report = check_r2_and_carre2(calc.generator, calc, samples=1000, seed=5)
    assert report.r2_max_defect <= R2_TOL
    assert report.carre2_max_ratio <= 1 + R2_TOL


def test_r2_needs_gamma():
    gen = nondivergence_delta_a(build_grid_space([8]), 1.0)
    with pytest.raises(UnsupportedOperatorError):
        check_r2_and_carre2(gen)
    with pytest.raises(UnsupportedOperatorError):
        gamma(gen, np.ones(8), np.ones(8))


def test_forward_difference_of_linear_function():
    space = build_grid_space([5], h=0.25)
    D = forward_difference(space, 0)
    assert_allclose(D @ (3.0 * space.coords[:, 0]), [3.0, 3.0, 3.0, 3.0, 0.0])


def test_ellipticity_report():
    good = check_ellipticity([[2.0, 0.0], [0.0, 1.0]])
    assert good.valid and good.lambda_low == pytest.approx(1.0) and good.Lambda_high == pytest.approx(2.0)
    bad = check_ellipticity(np.array([[[1.0, 0.0], [0.0, 1.0]], [[1.0, 0.0], [0.0, -1.0]]]))
    assert bad.violations == 1


def test_non_elliptic_coefficients_are_rejected():
    with pytest.raises(EllipticityError):
        divergence_form(build_grid_space([4, 4]), [[1.0, 0.0], [0.0, -0.5]])


def test_hermitian_coefficients_give_self_adjoint_generator(hermitian_divergence):
    gen = hermitian_divergence.generator
    assert gen.self_adjoint
    assert gen.accretivity_angle == 0.0
    assert hermitian_divergence.path == "hermitian"


def test_non_hermitian_coefficients_are_sectorial(nonnormal_divergence):
    gen = nonnormal_divergence.generator
    assert not gen.self_adjoint
    assert 0.0 < gen.accretivity_angle < math.pi / 2
    assert check_accretivity(gen, samples=500, seed=1) >= gen.accretivity_angle - 1e-12


def test_self_adjoint_range_angle_is_zero(line64):
    gen = line64.generator
    assert numerical_range_angle(gen.matrix, gen.space.mu) == pytest.approx(0.0, abs=1e-8)


def test_delta_a_requires_accretive_coefficient():
    space = build_grid_space([8])
    with pytest.raises(AccretivityError):
        nondivergence_delta_a(space, -1.0)
    with pytest.raises(AccretivityError):
        nondivergence_delta_a(space, 0.5, floor=0.5)


def test_delta_a_is_laplacian_times_coefficient():
    space = build_grid_space([6], periodic=True)
    a = 1.0 + 0.5 * np.sin(2 * np.pi * np.arange(6) / 6)
    gen = nondivergence_delta_a(space, a)
    assert_allclose(gen.matrix, graph_laplacian(space).matrix * a[None, :])
    assert not gen.has_gamma
    calc = build_calculus(gen)
    assert calc.path in ("eig", "schur")


def test_generator_flags_are_checked(k2_space):
    with pytest.raises(ValueError):
        Generator(space=k2_space, matrix=np.eye(2), self_adjoint=True, conservative=True)
    with pytest.raises(ValueError):
        Generator(space=k2_space, matrix=np.array([[1.0, -1.0], [0.0, 0.0]]), self_adjoint=True,
                  conservative=True)
