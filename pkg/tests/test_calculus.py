import math

import numpy as np
import pytest
from hypothesis import given, settings as hsettings
from hypothesis import strategies as st
from numpy.testing import assert_allclose
from scipy.integrate import trapezoid
from scipy.linalg import expm

from paralab.calculus import (
    apply_family, apply_function, build_calculus, default_order, frac_power, gamma_normalization, heat_kernel,
    imaginary_power, kernel_component, kernel_leak, operator_matrix, p_t, phi, psi, psi_tilde, q_t, q_tilde,
    semigroup, sum_family,
)
from paralab.errors import ConditioningError, KernelLeakError, ParameterError
from paralab.operators import Generator
from paralab.space import build_grid_space, lp_norm

RTOL = 1e-9


def _smooth(calc, seed=0):
    f = np.random.default_rng(seed).standard_normal(calc.n)
    return f - kernel_component(calc, f)


@hsettings(deadline=None, max_examples=50)
@given(N=st.integers(1, 12), x=st.floats(0.0, 50.0))
def test_psi_is_x_times_psi_tilde(N, x):
    assert_allclose(psi(N, x), x * psi_tilde(N, x), rtol=1e-12, atol=1e-300)


@pytest.mark.parametrize("N", [1, 2, 3, 5, 9])
def test_normalization_and_low_pass_at_zero(N):
    assert gamma_normalization(N) == math.factorial(N - 1)
    assert phi(N, 0.0) == pytest.approx(1.0)
    assert psi(N, 0.0) == 0.0


@pytest.mark.parametrize("N", [1, 2, 4])
def test_psi_integrates_to_one(N):
    u = np.linspace(-30, 6, 20001)
    s = np.exp(u)
    assert_allclose(trapezoid(psi(N, s), u), 1.0, rtol=1e-8)


def test_default_order():
    assert default_order(1.0) == 5
    assert default_order(2.05) == 10


def test_hermitian_path_reconstructs(square8):
    assert square8.path == "hermitian"
    assert square8.reconstruction_error <= 1e-10
    assert square8.kernel_mask.sum() == 1
    assert_allclose(square8.lambda_max, 8.0 * math.sin(7 * math.pi / 16) ** 2, rtol=1e-10)


def test_semigroup_law(line64):
    f = _smooth(line64)
    lhs = semigroup(line64, 0.7, semigroup(line64, 1.3, f))
    assert_allclose(lhs, semigroup(line64, 2.0, f), rtol=RTOL, atol=1e-13)


def test_heat_kernel_is_symmetric_and_conservative(p3):
    kernel = heat_kernel(p3, 0.5)
    assert_allclose(kernel, kernel.T, atol=1e-14)
    assert_allclose(kernel @ p3.generator.space.mu, np.ones(3), rtol=1e-12)


def test_q_t_is_minus_time_derivative_of_p_t(line64):
    f = _smooth(line64, 2)
    t, dt = 0.8, 1e-4
    derivative = (p_t(line64, 2, t + dt, f) - p_t(line64, 2, t - dt, f)) / (2 * dt)
    assert_allclose(q_t(line64, 2, t, f), -t * derivative, rtol=1e-6, atol=1e-9)


def test_q_tilde_relation(line64):
    f = _smooth(line64, 3)
    t = 0.4
    lifted = t * apply_function(line64, lambda x: x, q_tilde(line64, 3, t, f))
    assert_allclose(lifted, q_t(line64, 3, t, f), rtol=RTOL, atol=1e-13)


def test_fractional_power_composition(line64):
    f = _smooth(line64, 4)
    once = frac_power(line64, 0.7, f)
    twice = frac_power(line64, 0.3, frac_power(line64, 0.4, f))
    assert_allclose(twice, once, rtol=RTOL, atol=1e-12)
    assert_allclose(frac_power(line64, 1.0, f), line64.generator.apply(f), rtol=RTOL, atol=1e-12)


def test_fractional_power_annihilates_constants(line64):
    out = frac_power(line64, 0.5, np.ones(64))
    assert np.abs(out).max() <= 1e-10


def test_strict_mode_rejects_kernel_leak(line64):
    f = np.ones(64) + 0.01 * _smooth(line64)
    assert kernel_leak(line64, f) > 0.5
    with pytest.raises(KernelLeakError):
        frac_power(line64, 0.5, f, strict=True)


def test_imaginary_power_is_unitary_on_kernel_complement(square8):
    f = _smooth(square8, 6)
    for eta in (-3.0, 0.5, 4.0):
        g = imaginary_power(square8, eta, f)
        assert_allclose(lp_norm(square8.generator.space, g, 2), lp_norm(square8.generator.space, f, 2), rtol=1e-10)


def test_imaginary_power_on_two_points(k2):
    v = np.array([1.0, -1.0])
    g = imaginary_power(k2, 1.0, v)
    assert np.iscomplexobj(g)
    assert_allclose(g, 2 ** 1j * v, rtol=1e-12)
    M = operator_matrix(k2, lambda x: np.power(x.astype(complex), 1j), deflate=True)
    assert np.iscomplexobj(M)
    assert_allclose(M @ v, 2 ** 1j * v, rtol=1e-12)
    # real multipliers still come back real
    assert np.isrealobj(frac_power(k2, 0.5, v))


def test_family_and_sum_agree_with_pointwise(p3):
    f = _smooth(p3, 7)
    times = np.array([0.1, 1.0, 3.0])
    family = apply_family(p3, lambda x: np.exp(-x), times, f)
    for k, t in enumerate(times):
        assert_allclose(family[:, k], semigroup(p3, t, f), rtol=1e-12, atol=1e-14)
    weights = np.array([0.5, 1.0, 0.25])
    total = sum_family(p3, lambda x: np.exp(-x), times, weights, family)
    expected = sum(w * semigroup(p3, t, family[:, k]) for k, (t, w) in enumerate(zip(times, weights)))
    assert_allclose(total, expected, rtol=1e-12, atol=1e-14)


def test_batch_application_matches_columns(line64):
    F = np.stack([_smooth(line64, s) for s in range(3)], axis=1)
    out = apply_function(line64, lambda x: x ** 2, F)
    for k in range(3):
        assert_allclose(out[:, k], apply_function(line64, lambda x: x ** 2, F[:, k]))


def test_nonnormal_path_matches_exponential(nonnormal_divergence):
    calc = nonnormal_divergence
    assert calc.path in ("eig", "schur")
    E = operator_matrix(calc, lambda x: np.exp(-0.3 * x))
    assert_allclose(E, expm(-0.3 * calc.generator.matrix), rtol=1e-8, atol=1e-10)


def _skewed_generator():
    space = build_grid_space([3])
    # distinct eigenvalues, nearly parallel eigenvectors
    L = np.array([[1.0, 1e5, 0.0], [0.0, 2.0, 1e5], [0.0, 0.0, 3.0]])
    return Generator(space=space, matrix=L, self_adjoint=False, conservative=False)


def test_ill_conditioned_eigenvectors_fall_back_to_schur():
    gen = _skewed_generator()
    calc = build_calculus(gen)
    assert calc.path == "schur"
    expected = expm(-gen.matrix)
    assert_allclose(operator_matrix(calc, lambda x: np.exp(-x)), expected, rtol=0, atol=1e-6 * np.abs(expected).max())
    with pytest.raises(ConditioningError):
        build_calculus(gen, allow_schur=False)


def test_invalid_time_and_order(p3):
    with pytest.raises(ParameterError):
        semigroup(p3, 0.0, np.ones(3))
    with pytest.raises(ParameterError):
        q_t(p3, 0, 1.0, np.ones(3))
