"""State-space models: prior kernel ``q``, local likelihood ``g`` and benchmarks.

All density methods are vectorised over rows: ``ancestors`` is ``(n, p)``,
``children`` is ``(n, p)`` and results are length-``n`` arrays.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import log_ndtr, logsumexp, ndtri
from scipy.stats import norm

from .errors import InvalidObservation
from .experts import ConstantGating, LogisticGating, MixtureParams
from .strata import LOG_2PI, ExpertParams, Gaussian, extend, log_density_from_resid


def _rows(x) -> np.ndarray:
    return np.atleast_2d(np.asarray(x, dtype=float))


def _gauss_logpdf(resid: np.ndarray, cov: np.ndarray) -> np.ndarray:
    return log_density_from_resid(np.linalg.cholesky(cov), Gaussian(), resid)


class StateSpaceModel(ABC):
    """Interface of a time-homogeneous state-space model."""

    dim_state: int
    dim_obs: int

    @abstractmethod
    def initial_sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """``n`` draws from the initial (or reference filter) law."""

    @abstractmethod
    def prior_sample(self, ancestors: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        ...

    @abstractmethod
    def prior_log_density(self, ancestors: np.ndarray, children: np.ndarray) -> np.ndarray:
        ...

    @abstractmethod
    def loglik(self, children: np.ndarray, y) -> np.ndarray:
        ...

    @abstractmethod
    def observe(self, states: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Draw one observation per state row."""

    def prior_mixture(self) -> MixtureParams | None:
        """The prior kernel written as a mixture of experts, when it is one."""
        return None

    def log_kernel(self, y) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
        """Unnormalised transition ``log g(x', y) + log q(x, x')``."""

        def lk(ancestors, children):
            return self.loglik(children, y) + self.prior_log_density(ancestors, children)

        return lk

    def optimal_kernel(self, y):
        raise NotImplementedError(f"{type(self).__name__} has no closed-form optimal kernel")

    def log_optimal_adjustment(self, ancestors: np.ndarray, y) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no closed-form optimal adjustment")

    @property
    def has_optimal_kernel(self) -> bool:
        try:
            self.optimal_kernel(self.example_observation())
        except NotImplementedError:
            return False
        return True

    def example_observation(self):
        return np.zeros(self.dim_obs) if self.dim_obs > 1 else 0.0

    def simulate(self, steps: int, rng: np.random.Generator, x0=None):
        """Simulate ``steps`` transitions; returns (states, observations)."""
        x = _rows(self.initial_sample(1, rng) if x0 is None else x0)
        states, obs = [], []
        for _ in range(steps):
            x = self.prior_sample(x, rng)
            states.append(x[0])
            obs.append(self.observe(x, rng)[0])
        return np.array(states), np.array(obs)

    def parse_observation(self, y):
        y = np.asarray(y, dtype=float)
        return y.reshape(self.dim_obs) if self.dim_obs > 1 else float(y.ravel()[0])


class PriorKernel:
    """The model's prior transition used as a proposal kernel."""

    def __init__(self, model: StateSpaceModel):
        self.model = model

    def sample(self, ancestors, rng):
        return self.model.prior_sample(_rows(ancestors), rng)

    def log_density(self, ancestors, children):
        return self.model.prior_log_density(_rows(ancestors), _rows(children))


@dataclass
class GaussianMixtureKernel:
    """Per-ancestor Gaussian mixture: weights ``(n, d)``, means ``(n, d, p)``,
    one covariance per component."""

    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    log_normalizer: np.ndarray  # log L*(x) per ancestor


@dataclass
class LinearGaussianMixtureModel(StateSpaceModel):
    """Two-component linear-regression prior with Gaussian observation noise."""

    sigma_y: np.ndarray = field(default_factory=lambda: 0.1 * np.eye(2))
    sigma: np.ndarray = field(default_factory=lambda: 0.1 * np.eye(2))
    lambda1: np.ndarray = field(
        default_factory=lambda: np.array([[1.0, 0.0, 1.0], [0.0, 1.0, 1.0]])
    )
    lambda2: np.ndarray = field(
        default_factory=lambda: np.array([[1.0, 0.0, 1.0], [0.0, 1.0, -1.0]])
    )
    filter_sigma: np.ndarray = field(default_factory=lambda: 0.1 * np.eye(2))
    filter_modes: np.ndarray = field(
        default_factory=lambda: np.array([[0.0, 1.0], [0.0, -1.0]])
    )
    dim_state: int = 2
    dim_obs: int = 2

    @property
    def lambdas(self):
        return (self.lambda1, self.lambda2)

    def initial_sample(self, n, rng):
        comp = rng.integers(0, len(self.filter_modes), size=n)
        z = rng.standard_normal((n, 2)) @ np.linalg.cholesky(self.filter_sigma).T
        return self.filter_modes[comp] + z

    def filter_log_density(self, x):
        x = _rows(x)
        terms = [_gauss_logpdf(x - m, self.filter_sigma) for m in self.filter_modes]
        return logsumexp(terms, axis=0) - np.log(len(self.filter_modes))

    def prior_mixture(self, logistic: bool = True) -> MixtureParams:
        experts = [ExpertParams(lam, self.sigma) for lam in self.lambdas]
        gating = LogisticGating.uniform(2, 2) if logistic else ConstantGating(np.array([0.5, 0.5]))
        return MixtureParams(gating, experts, Gaussian(), pooled=True)

    def prior_sample(self, ancestors, rng):
        return self.prior_mixture(logistic=False).sample(_rows(ancestors), rng)

    def prior_log_density(self, ancestors, children):
        return self.prior_mixture(logistic=False).log_density(_rows(ancestors), _rows(children))

    def loglik(self, children, y):
        return _gauss_logpdf(_rows(children) - np.asarray(y, dtype=float), self.sigma_y)

    def observe(self, states, rng):
        states = _rows(states)
        return states + rng.standard_normal(states.shape) @ np.linalg.cholesky(self.sigma_y).T

    def optimal_kernel(self, y) -> "LGOptimalKernel":
        return LGOptimalKernel(self, np.asarray(y, dtype=float))

    def log_optimal_adjustment(self, ancestors, y):
        return self.optimal_kernel(y).log_adjustment(ancestors)


def lg_optimal_kernel(model: LinearGaussianMixtureModel, ancestor, y) -> GaussianMixtureKernel:
    """Exact normalised optimal kernel at each ancestor row (conjugate algebra)."""
    xbar = extend(_rows(ancestor))
    y = np.asarray(y, dtype=float)
    s_inv = np.linalg.inv(model.sigma)
    sy_inv = np.linalg.inv(model.sigma_y)
    cov = np.linalg.inv(s_inv + sy_inv)
    marg = model.sigma + model.sigma_y
    logw, means = [], []
    for lam in model.lambdas:
        prior_mean = xbar @ lam.T
        logw.append(np.log(0.5) + _gauss_logpdf(y - prior_mean, marg))
        means.append((prior_mean @ s_inv.T + sy_inv @ y) @ cov.T)
    logw = np.stack(logw, axis=1)
    log_l_star = logsumexp(logw, axis=1)
    return GaussianMixtureKernel(
        np.exp(logw - log_l_star[:, None]),
        np.stack(means, axis=1),
        np.stack([cov, cov]),
        log_l_star,
    )


class LGOptimalKernel:
    """Proposal-kernel wrapper of the closed-form optimal kernel."""

    def __init__(self, model: LinearGaussianMixtureModel, y):
        self.model = model
        self.y = np.asarray(y, dtype=float)

    def mixture(self, ancestors):
        return lg_optimal_kernel(self.model, ancestors, self.y)

    def log_adjustment(self, ancestors):
        return self.mixture(ancestors).log_normalizer

    def as_mixture_params(self) -> MixtureParams:
        """The optimal kernel is itself a two-expert logistic mixture; return it."""
        m = self.model
        s_inv = np.linalg.inv(m.sigma)
        sy_inv = np.linalg.inv(m.sigma_y)
        cov = np.linalg.inv(s_inv + sy_inv)
        marg_inv = np.linalg.inv(m.sigma + m.sigma_y)
        experts = []
        for lam in m.lambdas:
            lam_post = cov @ s_inv @ lam
            lam_post[:, -1] += cov @ sy_inv @ self.y
            experts.append(ExpertParams(lam_post, cov))
        # log-odds of component 1 against 2 are affine in the extended ancestor
        l1, l2 = m.lambdas
        quad = lambda lam: lam.T @ marg_inv @ lam
        lin = lambda lam: lam.T @ marg_inv @ self.y
        a = -0.5 * (quad(l1) - quad(l2))
        if np.max(np.abs(a[:-1, :-1])) > 1e-12:
            raise ValueError("optimal log-odds are not affine for this configuration")
        beta = lin(l1) - lin(l2)
        beta[:-1] += a[:-1, -1] + a[-1, :-1]
        beta[-1] += a[-1, -1]
        return MixtureParams(LogisticGating(beta[None, :]), experts, Gaussian(), pooled=True)

    def sample(self, ancestors, rng):
        mix = self.mixture(ancestors)
        n = mix.weights.shape[0]
        cum = np.cumsum(mix.weights, axis=1)[:, :-1]
        comp = np.sum(rng.random(n)[:, None] >= cum, axis=1)
        z = rng.standard_normal((n, self.model.dim_state)) @ np.linalg.cholesky(mix.covs[0]).T
        return mix.means[np.arange(n), comp] + z

    def log_density(self, ancestors, children):
        mix = self.mixture(ancestors)
        children = _rows(children)
        terms = [
            np.log(mix.weights[:, j]) + _gauss_logpdf(children - mix.means[:, j], mix.covs[j])
            for j in range(mix.weights.shape[1])
        ]
        return logsumexp(np.stack(terms, axis=1), axis=1)


@dataclass
class BesselModel(StateSpaceModel):
    """Gaussian random walk observed through its noisy Euclidean norm."""

    sigma_x: np.ndarray = field(default_factory=lambda: np.eye(2))
    sigma_y2: float = 0.01
    filter_mean: np.ndarray = field(default_factory=lambda: np.array([0.7, 0.7]))
    filter_cov: np.ndarray = field(default_factory=lambda: 0.5 * np.eye(2))
    dim_state: int = 2
    dim_obs: int = 1

    def initial_sample(self, n, rng):
        return self.filter_mean + rng.standard_normal((n, 2)) @ np.linalg.cholesky(self.filter_cov).T

    def prior_mixture(self) -> MixtureParams:
        lam = np.hstack([np.eye(2), np.zeros((2, 1))])
        return MixtureParams(ConstantGating(np.array([1.0])), [ExpertParams(lam, self.sigma_x)])

    def prior_sample(self, ancestors, rng):
        a = _rows(ancestors)
        return a + rng.standard_normal(a.shape) @ np.linalg.cholesky(self.sigma_x).T

    def prior_log_density(self, ancestors, children):
        return _gauss_logpdf(_rows(children) - _rows(ancestors), self.sigma_x)

    def loglik(self, children, y):
        r = np.linalg.norm(_rows(children), axis=1)
        return -0.5 * (LOG_2PI + np.log(self.sigma_y2)) - 0.5 * (y - r) ** 2 / self.sigma_y2

    def observe(self, states, rng):
        r = np.linalg.norm(_rows(states), axis=1)
        return r + np.sqrt(self.sigma_y2) * rng.standard_normal(r.shape)


def bessel_loglik(model: BesselModel, child, y) -> np.ndarray | float:
    out = model.loglik(child, y)
    return float(out[0]) if np.ndim(child) == 1 else out


@dataclass
class TobitModel(StateSpaceModel):
    """Linear Gaussian dynamics with a left-censored scalar observation."""

    a: np.ndarray = field(default_factory=lambda: 0.8 * np.eye(2))
    b: np.ndarray = field(default_factory=lambda: np.array([1.0, 1.0]))
    sigma_u: np.ndarray = field(default_factory=lambda: 2.0 * np.eye(2))
    sigma_v2: float = 0.1
    ancestor_mean: np.ndarray = field(default_factory=lambda: np.array([1.0, 1.0]))
    ancestor_cov: np.ndarray = field(default_factory=lambda: 10.0 * np.eye(2))
    dim_state: int = 2
    dim_obs: int = 1

    def initial_sample(self, n, rng):
        return self.ancestor_mean + rng.standard_normal((n, 2)) @ np.linalg.cholesky(self.ancestor_cov).T

    def prior_mixture(self) -> MixtureParams:
        lam = np.hstack([self.a, np.zeros((2, 1))])
        return MixtureParams(ConstantGating(np.array([1.0])), [ExpertParams(lam, self.sigma_u)])

    def prior_sample(self, ancestors, rng):
        a = _rows(ancestors)
        return a @ self.a.T + rng.standard_normal(a.shape) @ np.linalg.cholesky(self.sigma_u).T

    def prior_log_density(self, ancestors, children):
        return _gauss_logpdf(_rows(children) - _rows(ancestors) @ self.a.T, self.sigma_u)

    def _check(self, y) -> float:
        y = float(y)
        if not np.isfinite(y) or y < 0:
            raise InvalidObservation(f"tobit observations are nonnegative, got {y}")
        return y

    def loglik(self, children, y):
        y = self._check(y)
        s = _rows(children) @ self.b
        sv = np.sqrt(self.sigma_v2)
        if y > 0:
            return norm.logpdf(y, loc=s, scale=sv)
        return log_ndtr(-s / sv)

    def observe(self, states, rng):
        s = _rows(states) @ self.b
        return np.maximum(s + np.sqrt(self.sigma_v2) * rng.standard_normal(s.shape), 0.0)

    def _pred(self, ancestors):
        m = _rows(ancestors) @ self.a.T
        sb = self.sigma_u @ self.b
        s2 = float(self.b @ sb + self.sigma_v2)
        return m, sb, s2

    def log_optimal_adjustment(self, ancestors, y):
        y = self._check(y)
        m, _, s2 = self._pred(ancestors)
        mu = m @ self.b
        if y > 0:
            return norm.logpdf(y, loc=mu, scale=np.sqrt(s2))
        return log_ndtr(-mu / np.sqrt(s2))

    def optimal_kernel(self, y) -> "TobitOptimalKernel":
        return TobitOptimalKernel(self, self._check(y))


def tobit_loglik(model: TobitModel, child, y) -> np.ndarray | float:
    out = model.loglik(child, y)
    return float(out[0]) if np.ndim(child) == 1 else out


class TobitOptimalKernel:
    """Exact optimal kernel of the tobit model.

    For a censored observation the child is the prior draw conditioned on
    the latent ``B'x' + v <= 0``; it is sampled by drawing the latent from a
    truncated normal and then the child given the latent.
    """

    def __init__(self, model: TobitModel, y: float):
        self.model = model
        self.y = y

    def sample(self, ancestors, rng):
        mdl = self.model
        m, sb, s2 = mdl._pred(ancestors)
        mu = m @ mdl.b
        n = m.shape[0]
        if self.y > 0:
            w = np.full(n, self.y)
        else:
            # inverse-cdf draw of the latent truncated to (-inf, 0]
            upper = norm.cdf(-mu / np.sqrt(s2))
            u = rng.random(n) * upper
            w = mu + np.sqrt(s2) * ndtri(np.clip(u, 1e-300, None))
            tiny = upper < 1e-250
            if np.any(tiny):
                # far tail: exponential approximation of the truncated normal
                lam = mu[tiny] / np.sqrt(s2)
                w[tiny] = -np.sqrt(s2) * rng.exponential(size=tiny.sum()) / lam
        cond_cov = mdl.sigma_u - np.outer(sb, sb) / s2
        mean = m + np.outer((w - mu) / s2, sb)
        z = rng.standard_normal((n, 2)) @ np.linalg.cholesky(cond_cov).T
        return mean + z

    def log_density(self, ancestors, children):
        mdl = self.model
        return (
            mdl.loglik(children, self.y)
            + mdl.prior_log_density(ancestors, children)
            - mdl.log_optimal_adjustment(ancestors, self.y)
        )


MODELS = {
    "lg": LinearGaussianMixtureModel,
    "linear_gaussian": LinearGaussianMixtureModel,
    "bessel": BesselModel,
    "tobit": TobitModel,
}


def make_model(name: str, **params) -> StateSpaceModel:
    try:
        cls = MODELS[name.lower()]
    except KeyError:
        raise ValueError(f"unknown model {name!r}; choose from {sorted(set(MODELS))}") from None
    return cls(**{k: np.asarray(v) if isinstance(v, list) else v for k, v in params.items()})
