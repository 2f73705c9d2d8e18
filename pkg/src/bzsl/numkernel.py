"""Dense symmetric linear algebra and the multivariate Student-t density.

Everything here works in log space. Scale matrices are factored once into a
:class:`CholeskyFactor` (which caches the log-determinant) and reused for
every evaluation, so scoring a sample costs one triangular solve per class.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .errors import DimensionMismatch, DomainError, NotPositiveDefinite

JITTER_BASE = 1e-8
JITTER_ATTEMPTS = 8


def as_sym(a) -> np.ndarray:
    """Return a float64 copy of ``a`` with exactly symmetric storage."""
    a = np.array(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 1:
        raise DimensionMismatch(f"expected a non-empty square matrix, got shape {a.shape}")
    sym = 0.5 * (a + a.T)
    # (a + a.T) is symmetric up to rounding; copy the lower triangle to be exact
    il = np.tril_indices(sym.shape[0], -1)
    sym.T[il] = sym[il]
    return sym


@dataclass(frozen=True)
class CholeskyFactor:
    lower: np.ndarray
    log_det: float
    jitter: float = 0.0

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    def reconstruct(self) -> np.ndarray:
        return self.lower @ self.lower.T


def cholesky(s, jitter: bool = True) -> CholeskyFactor:
    """Factor a symmetric matrix as ``L @ L.T``.

    The first attempt uses the matrix as given. If that fails and ``jitter``
    is enabled, ``eps * I`` is added with ``eps = 1e-8 * max(1, trace/D)``,
    doubling ``eps`` on each of up to 8 further attempts.

    Raises
    ------
    NotPositiveDefinite
        If no attempt succeeds.
    """
    s = as_sym(s)
    d = s.shape[0]
    if not np.all(np.isfinite(s)):
        raise NotPositiveDefinite("matrix has non-finite entries")

    eps_schedule = [0.0]
    if jitter:
        base = JITTER_BASE * max(1.0, float(np.trace(s)) / d)
        eps_schedule += [base * 2.0**k for k in range(JITTER_ATTEMPTS)]

    for eps in eps_schedule:
        try:
            lower = np.linalg.cholesky(s + eps * np.eye(d) if eps else s)
        except np.linalg.LinAlgError:
            continue
        diag = np.diag(lower)
        if np.all(diag > 0) and np.all(np.isfinite(diag)):
            return CholeskyFactor(lower=lower, log_det=2.0 * float(np.sum(np.log(diag))), jitter=eps)
    raise NotPositiveDefinite(
        f"matrix of dimension {d} is not positive definite after {len(eps_schedule)} attempts"
    )


def _check_dims(x: np.ndarray, mean: np.ndarray, d: int):
    if mean.shape != (d,) or x.shape[-1] != d:
        raise DimensionMismatch(
            f"dimension mismatch: x {x.shape}, mean {mean.shape}, factor dim {d}"
        )


def mahalanobis_sq(x, mean, chol: CholeskyFactor):
    """Squared Mahalanobis distance ``(x-mean)' S^-1 (x-mean)``.

    Computed as the squared norm of ``L^-1 (x-mean)``; the inverse is never
    formed. ``x`` may be a single vector or an ``(N, D)`` batch.
    """
    x = np.asarray(x, dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64)
    _check_dims(x, mean, chol.dim)
    diff = (x - mean).T
    z = solve_triangular(chol.lower, diff, lower=True, check_finite=False)
    return np.sum(z * z, axis=0)


def log_gamma(z: float) -> float:
    """Natural log of the gamma function for ``z > 0``."""
    z = float(z)
    if not z > 0 or not math.isfinite(z):
        raise DomainError(f"log_gamma requires a finite positive argument, got {z}")
    return math.lgamma(z)


def student_t_log_norm_const(dof: float, dim: int, log_det: float) -> float:
    return (
        log_gamma(0.5 * (dof + dim))
        - log_gamma(0.5 * dof)
        - 0.5 * dim * math.log(dof * math.pi)
        - 0.5 * log_det
    )


@dataclass(frozen=True)
class StudentTParams:
    """Location, Cholesky-factored scale and degrees of freedom of a
    multivariate Student-t, with its log normalizer precomputed."""

    mean: np.ndarray
    scale_chol: CholeskyFactor
    dof: float
    log_norm_const: float

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def scale(self) -> np.ndarray:
        return self.scale_chol.reconstruct()


def make_student_t(mean, scale, dof: float, jitter: bool = True) -> StudentTParams:
    mean = np.array(mean, dtype=np.float64).reshape(-1)
    if isinstance(scale, CholeskyFactor):
        chol = scale
    else:
        chol = cholesky(scale, jitter=jitter)
    if chol.dim != mean.shape[0]:
        raise DimensionMismatch(f"mean has {mean.shape[0]} entries, scale is {chol.dim}x{chol.dim}")
    dof = float(dof)
    if not dof > 0:
        raise DomainError(f"degrees of freedom must be positive, got {dof}")
    lnc = student_t_log_norm_const(dof, chol.dim, chol.log_det)
    return StudentTParams(mean=mean, scale_chol=chol, dof=dof, log_norm_const=lnc)


def student_t_logpdf(x, p: StudentTParams):
    """Log density of the multivariate Student-t at ``x`` (vector or batch)."""
    maha = mahalanobis_sq(x, p.mean, p.scale_chol)
    out = p.log_norm_const - 0.5 * (p.dof + p.dim) * np.log1p(maha / p.dof)
    if np.ndim(x) == 1:
        return float(out[0]) if np.ndim(out) else float(out)
    return out


def gaussian_logpdf(x, mean, cov):
    """Multivariate normal log density via an explicit inverse.

    Kept deliberately naive: tests use it as an independent reference.
    """
    x = np.asarray(x, dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64)
    cov = np.asarray(cov, dtype=np.float64)
    d = mean.shape[0]
    diff = x - mean
    prec = np.linalg.inv(cov)
    _, logdet = np.linalg.slogdet(cov)
    q = np.einsum("...i,ij,...j->...", diff, prec, diff)
    return -0.5 * (d * math.log(2 * math.pi) + logdet + q)
