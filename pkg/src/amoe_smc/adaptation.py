"""Online EM / Robbins-Monro adaptation of mixture-of-experts proposals.

One adaptation iteration draws an importance-sampling batch from the
current proposal, turns it into expected sufficient statistics (weighted
by responsibilities), blends these into the running statistics with a
Robbins-Monro step and maps the result back to parameters with a closed
form M-step (experts, constant gating) or a safeguarded Newton step
(logistic gating).

Statistics are stored normalised: after an update they approximate
expectations under the auxiliary target, not raw importance sums.

Flattening of the logistic gradient/Hessian statistics is row-major over
``(expert j, coordinate k)``, i.e. entry ``j * (p + 1) + k``.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Protocol, Sequence

import numpy as np

from .errors import AmoeError, CholeskyFailure, DegenerateNormalizer
from .experts import (
    AuxiliaryProposalConfig,
    ConstantGating,
    LogKernel,
    LogisticGating,
    MixtureParams,
    ProposalKernel,
    gating_weights,
    log_importance_weight,
    propose,
    responsibilities,
)
from .particles import WeightedSample
from .strata import ExpertParams, Gaussian, extend, safe_cholesky, u_mean_from_resid

logger = logging.getLogger(__name__)

RIDGE = 1e-8
MAX_NEWTON_STEP = 10.0


@dataclass
class SuffStats:
    """Aggregated statistics; ``t``/``v`` only exist for logistic gating."""

    s1: np.ndarray  # (d, p', p')
    s2: np.ndarray  # (d, p+1, p+1)
    s3: np.ndarray  # (d, p', p+1)
    p: np.ndarray  # (d,)
    t: np.ndarray | None = None  # (d-1, p+1)
    v: np.ndarray | None = None  # ((d-1)(p+1), (d-1)(p+1))
    c: float = 1.0

    @property
    def d(self) -> int:
        return self.p.shape[0]

    def _arrays(self):
        return [self.s1, self.s2, self.s3, self.p, self.t, self.v]

    def combine(self, a: float, other: "SuffStats", b: float, c: float) -> "SuffStats":
        """``a * self + b * other`` blockwise, with normaliser ``c``."""
        out = [
            None if x is None else a * x + b * y
            for x, y in zip(self._arrays(), other._arrays())
        ]
        return SuffStats(*out, c=c)

    def scaled(self, k: float) -> "SuffStats":
        out = [None if x is None else k * x for x in self._arrays()]
        return SuffStats(*out, c=self.c)

    def copy(self) -> "SuffStats":
        out = [None if x is None else x.copy() for x in self._arrays()]
        return SuffStats(*out, c=self.c)

    def permuted(self, order: Sequence[int]) -> "SuffStats":
        """Statistics with experts relabelled (constant gating only)."""
        if self.t is not None:
            raise ValueError("permutation of logistic statistics is not supported")
        order = list(order)
        return SuffStats(
            self.s1[order], self.s2[order], self.s3[order], self.p[order], c=self.c
        )

    def flat(self) -> np.ndarray:
        return np.concatenate([x.ravel() for x in self._arrays() if x is not None])

    @classmethod
    def zeros(cls, theta: MixtureParams) -> "SuffStats":
        d, q, b = theta.d, theta.dim_out, theta.dim_in + 1
        t = v = None
        if theta.logistic:
            t = np.zeros((d - 1, b))
            v = np.zeros(((d - 1) * b, (d - 1) * b))
        return cls(
            np.zeros((d, q, q)), np.zeros((d, b, b)), np.zeros((d, q, b)), np.zeros(d), t, v
        )


@dataclass
class AdaptationConfig:
    """Iteration count, per-iteration sample sizes and Robbins-Monro steps.

    ``sample_sizes[l]`` is the batch drawn at iteration ``l`` and
    ``step_sizes[l]`` the step applied after it; the first step is always
    taken as 1 so the first batch initialises the statistics.

    ``gating_update`` selects how the logistic parameters follow the
    averaged statistics: ``"newton"`` applies ``beta - v^-1 t`` to the
    current iterate, ``"anchored"`` averages ``t - v beta`` instead so that
    ``beta`` is a function of the averaged statistics only.  Both coincide
    for a unit step.
    """

    iterations: int
    sample_sizes: list[int]
    step_sizes: list[float]
    pooled: bool = False
    min_responsibility_mass: float = 1e-6
    divide_pooled_by_d: bool = False
    gating_update: str = "newton"

    def __post_init__(self):
        self.sample_sizes = [int(n) for n in self.sample_sizes]
        self.step_sizes = [float(s) for s in self.step_sizes]
        if self.iterations < 0:
            raise ValueError("iterations must be nonnegative")
        if len(self.sample_sizes) != self.iterations or len(self.step_sizes) != self.iterations:
            raise ValueError("need one sample size and one step size per iteration")
        if any(n < 1 for n in self.sample_sizes):
            raise ValueError("sample sizes must be positive")
        if any(not (0.0 < s <= 1.0) for s in self.step_sizes):
            raise ValueError("step sizes must lie in (0, 1]")
        if self.gating_update not in ("newton", "anchored"):
            raise ValueError(f"unknown gating update {self.gating_update!r}")

    @classmethod
    def build(
        cls,
        iterations: int,
        sample_size: int,
        step: float | str = 0.1,
        first_sample_size: int | None = None,
        **kwargs,
    ) -> "AdaptationConfig":
        """Constant sample sizes (first one doubled by default) and a step rule.

        ``step`` is either a number ``c`` for the constant rule ``c / sqrt(L)``
        or the string ``"power"`` for ``l ** -0.6``.
        """
        L = int(iterations)
        sizes = [int(sample_size)] * L
        if L:
            sizes[0] = int(first_sample_size) if first_sample_size else 2 * int(sample_size)
        return cls(L, sizes, step_schedule(L, step), **kwargs)


def step_schedule(iterations: int, rule: float | str = 0.1) -> list[float]:
    if iterations == 0:
        return []
    if isinstance(rule, str):
        if rule != "power":
            raise ValueError(f"unknown step rule {rule!r}")
        return [min(1.0, l ** -0.6) for l in range(1, iterations + 1)]
    return [min(1.0, float(rule) / math.sqrt(iterations))] * iterations


class IsBatch(NamedTuple):
    parents: np.ndarray
    children: np.ndarray
    weights: np.ndarray


class BatchSource(Protocol):
    def draw(self, kernel: ProposalKernel, n: int, rng: np.random.Generator) -> IsBatch: ...


class ImportanceSampler:
    """Draws auxiliary-proposal batches and weights them against ``log_kernel``.

    Weights are returned as ``exp(log w - shift)`` where ``shift`` is fixed
    by the first batch with a positive weight, so all batches of one run
    share a scale and tiny likelihoods do not underflow.
    """

    def __init__(self, config: AuxiliaryProposalConfig, log_kernel: LogKernel):
        self.config = config
        self.log_kernel = log_kernel
        self.log_shift: float | None = None

    def draw(self, kernel: ProposalKernel, n: int, rng: np.random.Generator) -> IsBatch:
        prop = propose(kernel, self.config, n, rng)
        logw = log_importance_weight(
            kernel, self.log_kernel, self.config, prop.indices, prop.children
        )
        if self.log_shift is None:
            top = np.max(logw)
            if np.isfinite(top):
                self.log_shift = float(top)
        shift = 0.0 if self.log_shift is None else self.log_shift
        with np.errstate(over="ignore"):
            w = np.exp(np.minimum(logw - shift, 700.0))
        return IsBatch(self.config.particles[prop.indices], prop.children, w)


def suffstat_increment(
    theta: MixtureParams,
    parents: np.ndarray,
    children: np.ndarray,
    weights: np.ndarray,
) -> SuffStats:
    """Weighted, un-normalised sums of expected sufficient statistics.

    Responsibilities (and the Student-t precision means) are evaluated under
    ``theta``; in logistic mode the per-sample gradient and Hessian
    integrands of the gating objective are accumulated as well.
    """
    out = SuffStats.zeros(theta)
    w = np.asarray(weights, dtype=float).ravel()
    live = w > 0
    if not np.any(live):
        return out
    x = np.atleast_2d(parents)[live]
    y = np.atleast_2d(children)[live]
    w = w[live]
    xbar = extend(x)
    r = responsibilities(theta, x, y)
    if r.ndim == 1:
        r = r[None, :]
    wr = w[:, None] * r
    out.p = wr.sum(axis=0)
    for j, (expert, chol) in enumerate(zip(theta.experts, theta.cholesky_factors())):
        resid = y - xbar @ expert.lam.T
        a = wr[:, j] * u_mean_from_resid(chol, theta.family, resid)
        out.s1[j] = (y * a[:, None]).T @ y
        out.s2[j] = (xbar * a[:, None]).T @ xbar
        out.s3[j] = (y * a[:, None]).T @ xbar
    if theta.logistic:
        alpha = gating_weights(theta.gating, x)
        if alpha.ndim == 1:
            alpha = alpha[None, :]
        k = theta.d - 1
        b = xbar.shape[1]
        out.t = (w[:, None] * (r[:, :k] - alpha[:, :k])).T @ xbar
        coef = w[:, None, None] * alpha[:, :k, None] * (alpha[:, None, :k] - np.eye(k))
        outer = xbar[:, :, None] * xbar[:, None, :]
        out.v = np.einsum("njk,nab->jakb", coef, outer).reshape(k * b, k * b)
        out.v = 0.5 * (out.v + out.v.T)
    return out


def accumulate_is_statistics(
    theta: MixtureParams,
    config: AuxiliaryProposalConfig,
    log_kernel: LogKernel,
    n: int,
    rng: np.random.Generator,
    kernel: ProposalKernel | None = None,
) -> tuple[SuffStats, float]:
    """Draw ``n`` pairs from the proposal and return (increment, sum of weights).

    ``kernel`` overrides the sampling kernel (e.g. a pilot); responsibilities
    are always computed under ``theta``.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    batch = ImportanceSampler(config, log_kernel).draw(kernel or theta, n, rng)
    return suffstat_increment(theta, *batch), float(batch.weights.sum())


def robbins_monro_update(
    state: SuffStats | None,
    increment: SuffStats,
    sum_of_weights: float,
    n: int,
    step: float,
) -> SuffStats:
    """Blend an un-normalised increment into the running statistics.

    With no prior state the step is taken as 1, which sets the normaliser
    to the batch mean weight and the statistics to the self-normalised
    batch estimates.
    """
    if not (0.0 < step <= 1.0):
        raise ValueError("step must lie in (0, 1]")
    if state is None:
        step = 1.0
        state = increment.scaled(0.0)
        state.c = 0.0
    c = (1.0 - step) * state.c + step * sum_of_weights / n
    if not c > 0.0:
        raise DegenerateNormalizer(f"normalising-constant iterate is {c}")
    return state.combine(1.0 - step, increment, step / (c * n), c)


def _inverse_apply(s2: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """``rhs @ inv(s2)`` with a pseudo-inverse fallback for singular ``s2``."""
    try:
        if np.linalg.cond(s2) < 1e12:
            return np.linalg.solve(s2, rhs.T).T
    except np.linalg.LinAlgError:
        pass
    warnings.warn("singular ancestor statistic, using pseudo-inverse", RuntimeWarning)
    return rhs @ np.linalg.pinv(s2, hermitian=True)


def _gating_step(stats: SuffStats, beta: np.ndarray, anchored: bool) -> np.ndarray:
    k, b = beta.shape
    v = 0.5 * (stats.v + stats.v.T) - RIDGE * np.eye(k * b)
    t = stats.t.ravel()
    if anchored:
        # averaged t holds t - v beta_l; recover the gradient at the current beta
        t = t + stats.v @ beta.ravel()
    try:
        np.linalg.cholesky(-v)
        step = -np.linalg.solve(v, t)
    except np.linalg.LinAlgError:
        logger.info("gating Hessian estimate not negative definite, using gradient step")
        step = t.copy()
    norm = np.linalg.norm(step)
    if norm > MAX_NEWTON_STEP:
        step *= MAX_NEWTON_STEP / norm
    return beta + step.reshape(k, b)


def m_step(
    stats: SuffStats, previous: MixtureParams, config: AdaptationConfig | None = None
) -> MixtureParams:
    """Map normalised statistics to the maximising parameter."""
    pooled = previous.pooled if config is None else (config.pooled or previous.pooled)
    min_mass = 1e-6 if config is None else config.min_responsibility_mass
    literal = False if config is None else config.divide_pooled_by_d
    anchored = config is not None and config.gating_update == "anchored"

    d = previous.d
    total = float(stats.p.sum())
    if not total > 0:
        raise DegenerateNormalizer("responsibility masses sum to zero")
    dead = stats.p < min_mass * total
    lams, resids = [], []
    for j in range(d):
        if dead[j]:
            lams.append(previous.experts[j].lam.copy())
            resids.append(None)
            continue
        lam = _inverse_apply(stats.s2[j], stats.s3[j])
        r = stats.s1[j] - lam @ stats.s3[j].T
        lams.append(lam)
        resids.append(0.5 * (r + r.T))
    live = [j for j in range(d) if not dead[j]]
    if not live:
        raise DegenerateNormalizer("every mixture component lost its mass")
    pooled_sigma = sum(resids[j] for j in live)
    pooled_sigma = pooled_sigma / (d if literal and pooled else stats.p[live].sum())

    sigmas = []
    for j in range(d):
        if pooled or dead[j]:
            sigmas.append(pooled_sigma)
        else:
            sigmas.append(resids[j] / stats.p[j])
    experts = []
    for j in range(d):
        sig = sigmas[j]
        try:
            safe_cholesky(sig)
        except CholeskyFailure:
            logger.info("expert %d covariance not positive definite, resetting", j)
            sig = previous.experts[j].sigma.copy()
            dead[j] = True
        experts.append(ExpertParams(lams[j], sig))

    if np.any(dead):
        gating = previous.gating
    elif isinstance(previous.gating, ConstantGating):
        w = stats.p / total
        gating = ConstantGating(w / w.sum())
    else:
        gating = LogisticGating(_gating_step(stats, previous.gating.beta, anchored))
    return MixtureParams(gating, experts, previous.family, pooled)


def _anchor(increment: SuffStats, theta: MixtureParams) -> SuffStats:
    if increment.t is None:
        return increment
    out = increment.copy()
    out.t = increment.t - (increment.v @ theta.gating.beta.ravel()).reshape(increment.t.shape)
    return out


@dataclass
class AdaptationTrace:
    """Per-iteration record; row 0 describes the initial (or pilot) proposal."""

    thetas: list[dict] = field(default_factory=list)
    sum_of_weights: list[float] = field(default_factory=list)
    ess: list[float] = field(default_factory=list)
    sample_sizes: list[int] = field(default_factory=list)
    step_sizes: list[float] = field(default_factory=list)
    kld: list[float] = field(default_factory=list)
    kld_stderr: list[float] = field(default_factory=list)
    kld_up_to_constant: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "thetas": self.thetas,
            "sum_of_weights": self.sum_of_weights,
            "ess": self.ess,
            "sample_sizes": self.sample_sizes,
            "step_sizes": self.step_sizes,
            "kld": self.kld,
            "kld_stderr": self.kld_stderr,
            "kld_up_to_constant": self.kld_up_to_constant,
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)


class AdaptationError(AmoeError):
    """An iteration failed; ``partial_trace`` holds what was recorded so far."""

    def __init__(self, message: str, partial_trace: AdaptationTrace, theta: MixtureParams):
        super().__init__(message)
        self.partial_trace = partial_trace
        self.theta = theta


def _batch_ess(w: np.ndarray) -> float:
    top = np.max(w) if w.size else 0.0
    if not top > 0:
        return 0.0
    w = w / top
    return float(w.sum() ** 2 / np.dot(w, w))


def _record_kld(trace, diagnostics, kernel):
    if diagnostics is None:
        return
    est = diagnostics(kernel)
    trace.kld.append(float(getattr(est, "absolute", est.value_up_to_constant)))
    trace.kld_stderr.append(float(getattr(est, "absolute_stderr", est.standard_error)))
    trace.kld_up_to_constant.append(float(est.value_up_to_constant))


def adapt(
    initial: MixtureParams,
    ancestors: WeightedSample,
    log_kernel: LogKernel,
    config: AdaptationConfig,
    rng: np.random.Generator,
    log_adjustment: Callable[[np.ndarray], np.ndarray] | None = None,
    pilot: ProposalKernel | None = None,
    diagnostics: Callable[[ProposalKernel], object] | None = None,
    source: BatchSource | None = None,
) -> tuple[MixtureParams, AdaptationTrace]:
    """Run ``config.iterations`` stochastic-approximation EM iterations.

    ``pilot`` replaces the proposal for the first batch only (the
    responsibilities of that batch still come from ``initial``).
    ``diagnostics`` maps a proposal kernel to a KLD estimate and is called
    on the initial (or pilot) kernel and after every iteration.  ``source``
    replaces importance sampling by another batch generator, e.g. an exact
    quadrature rule.
    """
    if source is None:
        source = ImportanceSampler(AuxiliaryProposalConfig(ancestors, log_adjustment), log_kernel)
    trace = AdaptationTrace()
    theta = initial
    trace.thetas.append(theta.to_dict())
    state = None
    first = pilot if pilot is not None else theta
    _record_kld(trace, diagnostics, first)
    for ell in range(config.iterations):
        try:
            kernel = first if ell == 0 else theta
            n = config.sample_sizes[ell]
            batch = source.draw(kernel, n, rng)
            inc = suffstat_increment(theta, *batch)
            if config.gating_update == "anchored":
                inc = _anchor(inc, theta)
            total = float(batch.weights.sum())
            step = 1.0 if ell == 0 else config.step_sizes[ell]
            state = robbins_monro_update(state, inc, total, n, step)
            theta = m_step(state, theta, config)
        except (AmoeError, ValueError, np.linalg.LinAlgError) as exc:
            raise AdaptationError(f"iteration {ell} failed: {exc}", trace, theta) from exc
        w = batch.weights
        trace.sum_of_weights.append(total)
        trace.ess.append(_batch_ess(w))
        trace.sample_sizes.append(n)
        trace.step_sizes.append(step)
        trace.thetas.append(theta.to_dict())
        _record_kld(trace, diagnostics, theta)
    return theta, trace


def mean_field_residual(
    theta: MixtureParams,
    stats: SuffStats,
    expectation: Callable[[MixtureParams], SuffStats],
    config: AdaptationConfig | None = None,
) -> float:
    """Max-norm of ``expected statistics at m_step(stats) - stats``.

    ``theta`` supplies the structure (gating mode, family) for the M-step and
    ``expectation`` returns exact normalised statistics under a parameter.
    """
    theta_bar = m_step(stats, theta, config)
    h = expectation(theta_bar).flat() - stats.flat()
    return float(np.max(np.abs(h)))


def initial_fit(
    children: np.ndarray,
    weights: np.ndarray,
    d: int,
    dim_in: int,
    rng: np.random.Generator,
    family=None,
    logistic: bool = True,
    pooled: bool = False,
    lloyd_iterations: int = 10,
) -> MixtureParams:
    """Ancestor-independent starting mixture fitted to a weighted pilot cloud.

    Expert means come from weighted k-means (seeded k-means++ style) on the
    children; only the intercept column of each regression matrix is
    nonzero.  Every expert gets the within-cluster pooled covariance.
    """
    family = Gaussian() if family is None else family
    y = np.atleast_2d(children)
    w = np.asarray(weights, dtype=float).ravel()
    w = w / w.sum()
    q = y.shape[1]
    centers = [y[rng.choice(len(w), p=w)]]
    for _ in range(1, d):
        dist = np.min([np.sum((y - c) ** 2, axis=1) for c in centers], axis=0)
        prob = w * dist
        prob = w if prob.sum() <= 0 else prob / prob.sum()
        centers.append(y[rng.choice(len(w), p=prob)])
    centers = np.array(centers)
    for _ in range(lloyd_iterations):
        labels = np.argmin(((y[:, None, :] - centers[None]) ** 2).sum(-1), axis=1)
        for j in range(d):
            m = w * (labels == j)
            if m.sum() > 0:
                centers[j] = m @ y / m.sum()
    labels = np.argmin(((y[:, None, :] - centers[None]) ** 2).sum(-1), axis=1)
    resid = y - centers[labels]
    cov = (resid * w[:, None]).T @ resid
    cov = 0.5 * (cov + cov.T) + 1e-6 * np.trace(cov) / q * np.eye(q)
    experts = []
    for c in centers:
        lam = np.zeros((q, dim_in + 1))
        lam[:, -1] = c
        experts.append(ExpertParams(lam, cov.copy()))
    if logistic and d > 1:
        gating = LogisticGating.uniform(d, dim_in)
    else:
        gating = ConstantGating(np.full(d, 1.0 / d))
    return MixtureParams(gating, experts, family, pooled)
