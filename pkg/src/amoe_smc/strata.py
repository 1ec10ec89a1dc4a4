"""Elliptical experts: Gaussian and Student-t linear regressions.

Each stratum maps an ancestor ``x`` (dimension ``p``) to a distribution over
the child ``x'`` (dimension ``p'``) centred at ``lam @ [x, 1]`` with scale
matrix ``sigma``.  The Student-t stratum is handled through its
Gaussian-Gamma representation: conditionally on a latent precision
multiplier ``u ~ Gamma(nu/2, rate=nu/2)`` the child is Gaussian with
covariance ``sigma / u``.  Gaussian strata use ``u = 1`` throughout, which
lets both families share one set of sufficient statistics.

Functions accept a single ancestor/child (1-D arrays) or a batch of rows
(2-D arrays) and broadcast between the two.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import gammaln

from .errors import CholeskyFailure

LOG_2PI = np.log(2.0 * np.pi)
JITTER = 1e-9


@dataclass(frozen=True)
class Gaussian:
    """Gaussian stratum family."""

    def __str__(self) -> str:
        return "gaussian"


@dataclass(frozen=True)
class StudentT:
    """Student-t stratum family with fixed degrees of freedom ``nu``."""

    nu: float = 4.0

    def __post_init__(self):
        if not np.isfinite(self.nu) or self.nu <= 2.0:
            raise ValueError(f"Student-t strata need nu > 2, got {self.nu}")

    def __str__(self) -> str:
        return f"student_t(nu={self.nu:g})"


StratumFamily = Union[Gaussian, StudentT]


def family_from_name(name: str, nu: float = 4.0) -> StratumFamily:
    key = name.lower().replace("-", "_")
    if key == "gaussian":
        return Gaussian()
    if key in ("student_t", "studentt", "student", "t"):
        return StudentT(nu)
    raise ValueError(f"unknown stratum family {name!r}")


def extend(x: np.ndarray) -> np.ndarray:
    """Append a constant 1 to the last axis (the intercept coordinate)."""
    x = np.asarray(x, dtype=float)
    ones = np.ones(x.shape[:-1] + (1,))
    return np.concatenate([x, ones], axis=-1)


def safe_cholesky(sigma: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor of ``sigma``, retrying once with diagonal jitter.

    The jitter is ``1e-9 * trace(sigma) / dim`` (or ``1e-9`` for a zero
    trace).  A second failure raises :class:`CholeskyFailure`.
    """
    sigma = np.asarray(sigma, dtype=float)
    if not np.all(np.isfinite(sigma)):
        raise CholeskyFailure("covariance has non-finite entries")
    try:
        return np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        pass
    dim = sigma.shape[0]
    scale = np.trace(sigma) / dim
    if not scale > 0.0:
        scale = 1.0
    try:
        return np.linalg.cholesky(sigma + JITTER * scale * np.eye(dim))
    except np.linalg.LinAlgError as exc:
        raise CholeskyFailure("covariance is not positive definite") from exc


@dataclass
class ExpertParams:
    """Regression matrix ``lam`` (p' x (p+1)) and covariance ``sigma`` (p' x p')."""

    lam: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.lam = np.atleast_2d(np.asarray(self.lam, dtype=float))
        self.sigma = np.atleast_2d(np.asarray(self.sigma, dtype=float))
        q = self.lam.shape[0]
        if self.sigma.shape != (q, q):
            raise ValueError(
                f"sigma shape {self.sigma.shape} does not match lam rows {q}"
            )
        if self.lam.shape[1] < 1:
            raise ValueError("lam needs at least the intercept column")
        if not np.allclose(self.sigma, self.sigma.T, rtol=1e-10, atol=1e-12):
            raise ValueError("sigma must be symmetric")

    @property
    def dim_in(self) -> int:
        return self.lam.shape[1] - 1

    @property
    def dim_out(self) -> int:
        return self.lam.shape[0]

    def mean(self, ancestor: np.ndarray) -> np.ndarray:
        return extend(ancestor) @ self.lam.T

    def copy(self) -> "ExpertParams":
        return ExpertParams(self.lam.copy(), self.sigma.copy())

    def to_dict(self) -> dict:
        return {"lam": self.lam.tolist(), "sigma": self.sigma.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "ExpertParams":
        return cls(np.asarray(data["lam"]), np.asarray(data["sigma"]))


@dataclass
class ExpertSuffStat:
    """Blocks of the (u-weighted) sufficient statistic of one expert."""

    s1: np.ndarray  # p' x p'   child outer product
    s2: np.ndarray  # (p+1) x (p+1)   extended-ancestor outer product
    s3: np.ndarray  # p' x (p+1)   cross product


def _mahalanobis(chol: np.ndarray, resid: np.ndarray) -> np.ndarray:
    # resid has shape (..., p'); solve L z = resid row-wise
    flat = np.moveaxis(resid, -1, 0).reshape(chol.shape[0], -1)
    z = solve_triangular(chol, flat, lower=True, check_finite=False)
    return np.sum(z * z, axis=0).reshape(resid.shape[:-1])


def _log_det(chol: np.ndarray) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(chol))))


def log_density_from_resid(
    chol: np.ndarray, family: StratumFamily, resid: np.ndarray
) -> np.ndarray:
    """Stratum log-density given residuals ``child - mean`` and a Cholesky factor."""
    q = chol.shape[0]
    maha = _mahalanobis(chol, resid)
    half_logdet = 0.5 * _log_det(chol)
    if isinstance(family, StudentT):
        nu = family.nu
        const = (
            gammaln(0.5 * (nu + q))
            - gammaln(0.5 * nu)
            - 0.5 * q * np.log(nu * np.pi)
            - half_logdet
        )
        return const - 0.5 * (nu + q) * np.log1p(maha / nu)
    return -0.5 * q * LOG_2PI - half_logdet - 0.5 * maha


def stratum_log_density(
    params: ExpertParams,
    family: StratumFamily,
    ancestor: np.ndarray,
    child: np.ndarray,
) -> np.ndarray | float:
    """Log-density of ``child`` under the stratum attached to ``ancestor``.

    Returns a float for single inputs and an array of shape ``(n,)`` when
    either argument is a batch of rows.
    """
    chol = safe_cholesky(params.sigma)
    resid = np.asarray(child, dtype=float) - params.mean(ancestor)
    out = log_density_from_resid(chol, family, resid)
    return float(out) if np.ndim(out) == 0 else out


def sample_from_chol(
    mean: np.ndarray,
    chol: np.ndarray,
    family: StratumFamily,
    rng: np.random.Generator,
) -> np.ndarray:
    """Draw one child per row of ``mean`` (shape ``(n, p')``)."""
    n, q = mean.shape
    z = rng.standard_normal((n, q)) @ chol.T
    if isinstance(family, StudentT):
        u = rng.gamma(0.5 * family.nu, 2.0 / family.nu, size=n)
        z /= np.sqrt(u)[:, None]
    return mean + z


def stratum_sample(
    params: ExpertParams,
    family: StratumFamily,
    ancestor: np.ndarray,
    rng: np.random.Generator,
) -> np.ndarray:
    """Draw children from the stratum; one draw per ancestor row."""
    ancestor = np.asarray(ancestor, dtype=float)
    single = ancestor.ndim == 1
    mean = np.atleast_2d(params.mean(ancestor))
    out = sample_from_chol(mean, safe_cholesky(params.sigma), family, rng)
    return out[0] if single else out


def u_mean_from_resid(
    chol: np.ndarray, family: StratumFamily, resid: np.ndarray
) -> np.ndarray:
    if isinstance(family, Gaussian):
        return np.ones(np.shape(resid)[:-1])
    q = chol.shape[0]
    return (family.nu + q) / (family.nu + _mahalanobis(chol, resid))


def conditional_u_mean(
    params: ExpertParams,
    family: StratumFamily,
    ancestor: np.ndarray,
    child: np.ndarray,
) -> np.ndarray | float:
    """Posterior mean of the latent precision multiplier given (ancestor, child).

    Equals ``(nu + p') / (nu + mahalanobis**2)`` for Student-t strata and 1
    for Gaussian strata.
    """
    chol = safe_cholesky(params.sigma)
    resid = np.asarray(child, dtype=float) - params.mean(ancestor)
    out = u_mean_from_resid(chol, family, resid)
    return float(out) if np.ndim(out) == 0 else out


def stratum_suffstat(
    ancestor: np.ndarray, child: np.ndarray, u_mean: float
) -> ExpertSuffStat:
    """Conditional expectation of the sufficient statistic for one pair."""
    if not u_mean > 0:
        raise ValueError("u_mean must be positive")
    xbar = extend(np.asarray(ancestor, dtype=float).ravel())
    child = np.asarray(child, dtype=float).ravel()
    return ExpertSuffStat(
        s1=u_mean * np.outer(child, child),
        s2=u_mean * np.outer(xbar, xbar),
        s3=u_mean * np.outer(child, xbar),
    )
