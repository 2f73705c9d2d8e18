import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bzsl.errors import DimensionMismatch, DomainError, NotPositiveDefinite
from bzsl.numkernel import (
    as_sym,
    cholesky,
    gaussian_logpdf,
    log_gamma,
    mahalanobis_sq,
    make_student_t,
    student_t_logpdf,
)

from conftest import random_spd


def explicit_t_logpdf(x, mean, scale, dof):
    d = len(mean)
    diff = np.asarray(x) - mean
    q = diff @ np.linalg.inv(scale) @ diff
    _, logdet = np.linalg.slogdet(scale)
    return (
        math.lgamma((dof + d) / 2)
        - math.lgamma(dof / 2)
        - d / 2 * math.log(dof * math.pi)
        - 0.5 * logdet
        - (dof + d) / 2 * math.log1p(q / dof)
    )


def test_as_sym_is_exactly_symmetric(rng):
    a = rng.standard_normal((7, 7))
    s = as_sym(a)
    assert np.array_equal(s, s.T)


def test_cholesky_identity():
    f = cholesky(np.eye(3))
    assert np.array_equal(f.lower, np.eye(3))
    assert f.log_det == 0.0


def test_cholesky_reconstructs_random_spd(rng):
    b = rng.standard_normal((20, 20))
    s = b.T @ b + np.eye(20)
    f = cholesky(s)
    assert np.allclose(f.reconstruct(), s, atol=1e-10, rtol=0)
    assert np.allclose(np.triu(f.lower, 1), 0)
    assert f.log_det == pytest.approx(2 * np.sum(np.log(np.diag(f.lower))), rel=1e-12)


def test_cholesky_rejects_indefinite():
    with pytest.raises(NotPositiveDefinite):
        cholesky([[1.0, 2.0], [2.0, 1.0]])


def test_cholesky_jitter_rescues_singular():
    v = np.array([1.0, 2.0, 3.0])
    s = np.outer(v, v)
    with pytest.raises(NotPositiveDefinite):
        cholesky(s, jitter=False)
    f = cholesky(s)
    assert f.jitter > 0
    assert np.all(np.diag(f.lower) > 0)


def test_cholesky_reconstruction_hundred_trials(rng):
    for _ in range(100):
        d = int(rng.integers(1, 21))
        s = random_spd(rng, d)
        f = cholesky(s)
        err = np.linalg.norm(f.reconstruct() - s) / np.linalg.norm(s)
        assert err < 1e-10


def test_mahalanobis_basic_cases():
    f = cholesky(np.eye(2))
    assert mahalanobis_sq([1.0, 2.0], [1.0, 2.0], f) == 0.0
    assert mahalanobis_sq([3.0, 4.0], [0.0, 0.0], f) == pytest.approx(25.0)


def test_mahalanobis_matches_explicit_inverse(rng):
    s = random_spd(rng, 10)
    x, mu = rng.standard_normal(10), rng.standard_normal(10)
    diff = x - mu
    expected = diff @ np.linalg.inv(s) @ diff
    assert mahalanobis_sq(x, mu, cholesky(s)) == pytest.approx(expected, rel=1e-8)


def test_mahalanobis_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        mahalanobis_sq([1.0, 2.0, 3.0], [0.0, 0.0], cholesky(np.eye(2)))


@pytest.mark.parametrize("z, expected", [(1.0, 0.0), (0.5, math.log(math.sqrt(math.pi))), (10.0, math.log(362880.0))])
def test_log_gamma_values(z, expected):
    assert log_gamma(z) == pytest.approx(expected, rel=1e-10, abs=1e-14)


def test_log_gamma_large_argument():
    # Stirling series with three correction terms, good to ~1e-20 at this size
    z = 1e7
    stirling = (z - 0.5) * math.log(z) - z + 0.5 * math.log(2 * math.pi) + 1 / (12 * z) - 1 / (360 * z**3)
    assert log_gamma(z) == pytest.approx(stirling, rel=1e-10)


@pytest.mark.parametrize("z", [0.0, -1.0, float("nan")])
def test_log_gamma_domain(z):
    with pytest.raises(DomainError):
        log_gamma(z)


def test_cauchy_point_value():
    p = make_student_t([0.0], [[1.0]], 1.0)
    assert student_t_logpdf([0.0], p) == pytest.approx(-math.log(math.pi), abs=1e-12)


def test_log_norm_const_invariant(rng):
    s = random_spd(rng, 4)
    p = make_student_t(np.zeros(4), s, 7.5)
    _, logdet = np.linalg.slogdet(s)
    expected = math.lgamma(5.75) - math.lgamma(3.75) - 2 * math.log(7.5 * math.pi) - 0.5 * logdet
    assert p.log_norm_const == pytest.approx(expected, abs=1e-10)


def test_elliptical_symmetry(rng):
    s = random_spd(rng, 5)
    mu = rng.standard_normal(5)
    p = make_student_t(mu, s, 3.0)
    for _ in range(10):
        d = rng.standard_normal(5) * 3
        assert student_t_logpdf(mu + d, p) == pytest.approx(student_t_logpdf(mu - d, p), abs=1e-12)


def test_gaussian_limit_point():
    p = make_student_t([0.0, 0.0], np.eye(2), 1e6)
    assert student_t_logpdf([1.0, 1.0], p) == pytest.approx(-math.log(2 * math.pi) - 1, abs=1e-3)


def test_gaussian_limit_random(rng):
    for _ in range(100):
        d = int(rng.integers(1, 6))
        s = random_spd(rng, d)
        mu = rng.standard_normal(d)
        x = mu + rng.standard_normal(d)
        p = make_student_t(mu, s, 1e6)
        assert abs(student_t_logpdf(x, p) - gaussian_logpdf(x, mu, s)) < 1e-3


def test_batch_matches_single(rng):
    s = random_spd(rng, 3)
    p = make_student_t(np.ones(3), s, 4.0)
    x = rng.standard_normal((6, 3))
    batch = student_t_logpdf(x, p)
    assert np.allclose(batch, [student_t_logpdf(row, p) for row in x], atol=1e-13)


def test_monotone_in_mahalanobis():
    p = make_student_t([0.0, 0.0], np.diag([2.0, 0.5]), 4.0)
    radii = np.linspace(0, 20, 50)
    values = [student_t_logpdf([r, 0.0], p) for r in radii]
    assert np.all(np.diff(values) < 0)


@settings(max_examples=60, deadline=None)
@given(d=st.integers(1, 20), dof=st.floats(0.5, 200.0), seed=st.integers(0, 2**32 - 1))
def test_cholesky_path_equals_inverse_path(d, dof, seed):
    rng = np.random.default_rng(seed)
    s = random_spd(rng, d)
    mu = rng.standard_normal(d)
    x = mu + 2 * rng.standard_normal(d)
    p = make_student_t(mu, s, dof)
    assert student_t_logpdf(x, p) == pytest.approx(explicit_t_logpdf(x, mu, s, dof), abs=1e-8)


def test_student_t_dimension_mismatch():
    p = make_student_t([0.0, 0.0], np.eye(2), 3.0)
    with pytest.raises(DimensionMismatch):
        student_t_logpdf([0.0, 0.0, 0.0], p)


def test_nonpositive_dof_rejected():
    with pytest.raises(DomainError):
        make_student_t([0.0], [[1.0]], 0.0)
