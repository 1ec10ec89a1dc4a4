"""Mixture-of-experts proposal kernels for the auxiliary particle filter.

A proposal kernel here is anything with two methods:

* ``sample(ancestors, rng) -> children`` (one child per ancestor row), and
* ``log_density(ancestors, children) -> log r(ancestor, child)`` row-wise.

:class:`MixtureParams` is the adaptable kernel: ``d`` linear-regression
experts (Gaussian or Student-t) combined through gating weights that are
either constant or multinomial-logistic in the extended ancestor
``[x, 1]``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Protocol, Union

import numpy as np
from scipy.special import logsumexp

from .errors import AbsoluteContinuityViolation, DegenerateAncestors
from .particles import WeightedSample
from .strata import (
    ExpertParams,
    Gaussian,
    StratumFamily,
    StudentT,
    extend,
    family_from_name,
    log_density_from_resid,
    safe_cholesky,
    u_mean_from_resid,
)

logger = logging.getLogger(__name__)

LogKernel = Callable[[np.ndarray, np.ndarray], np.ndarray]


class ProposalKernel(Protocol):
    def sample(self, ancestors: np.ndarray, rng: np.random.Generator) -> np.ndarray: ...

    def log_density(self, ancestors: np.ndarray, children: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class ConstantGating:
    """Gating weights that do not depend on the ancestor."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).ravel()
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("constant gating weights must lie on the simplex")
        object.__setattr__(self, "weights", w)

    @property
    def d(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True)
class LogisticGating:
    """Multinomial-logistic gating; row ``j`` of ``beta`` scores expert ``j``.

    The last expert is the reference category with score 0, so ``beta`` has
    shape ``(d - 1, p + 1)``.
    """

    beta: np.ndarray

    def __post_init__(self):
        b = np.atleast_2d(np.asarray(self.beta, dtype=float))
        if not np.all(np.isfinite(b)):
            raise ValueError("logistic gating parameters must be finite")
        object.__setattr__(self, "beta", b)

    @property
    def d(self) -> int:
        return self.beta.shape[0] + 1

    @classmethod
    def uniform(cls, d: int, dim_in: int) -> "LogisticGating":
        return cls(np.zeros((d - 1, dim_in + 1)))


GatingParams = Union[ConstantGating, LogisticGating]


def log_gating_weights(gating: GatingParams, ancestors: np.ndarray) -> np.ndarray:
    """Log gating weights, shape ``(n, d)`` for ``n`` ancestor rows."""
    ancestors = np.atleast_2d(np.asarray(ancestors, dtype=float))
    n = ancestors.shape[0]
    if isinstance(gating, ConstantGating):
        with np.errstate(divide="ignore"):
            return np.broadcast_to(np.log(gating.weights), (n, gating.d)).copy()
    scores = np.zeros((n, gating.d))
    scores[:, :-1] = extend(ancestors) @ gating.beta.T
    return scores - logsumexp(scores, axis=1, keepdims=True)


def gating_weights(gating: GatingParams, ancestor: np.ndarray) -> np.ndarray:
    """Gating weights; a length-``d`` simplex vector per ancestor."""
    single = np.ndim(ancestor) == 1
    alpha = np.exp(log_gating_weights(gating, ancestor))
    alpha /= alpha.sum(axis=1, keepdims=True)
    return alpha[0] if single else alpha


@dataclass
class MixtureParams:
    """Full proposal parameter: gating plus ``d`` experts of one family."""

    gating: GatingParams
    experts: list[ExpertParams]
    family: StratumFamily = field(default_factory=Gaussian)
    pooled: bool = False

    def __post_init__(self):
        if len(self.experts) < 1:
            raise ValueError("need at least one expert")
        if self.gating.d != len(self.experts):
            raise ValueError(
                f"gating has {self.gating.d} components, got {len(self.experts)} experts"
            )
        shapes = {e.lam.shape for e in self.experts}
        if len(shapes) != 1:
            raise ValueError("all experts must share dimensions")
        if isinstance(self.gating, LogisticGating):
            if self.gating.beta.shape[1] != self.dim_in + 1:
                raise ValueError("logistic gating width must be dim_in + 1")
        if self.pooled:
            ref = self.experts[0].sigma
            if any(not np.allclose(e.sigma, ref, rtol=1e-12, atol=0) for e in self.experts):
                raise ValueError("pooled mixture needs identical covariances")

    @property
    def d(self) -> int:
        return len(self.experts)

    @property
    def dim_in(self) -> int:
        return self.experts[0].dim_in

    @property
    def dim_out(self) -> int:
        return self.experts[0].dim_out

    @property
    def logistic(self) -> bool:
        return isinstance(self.gating, LogisticGating)

    def cholesky_factors(self) -> list[np.ndarray]:
        return [safe_cholesky(e.sigma) for e in self.experts]

    # proposal-kernel protocol
    def sample(self, ancestors: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return sample_mixture(self, ancestors, rng)[0]

    def log_density(self, ancestors: np.ndarray, children: np.ndarray) -> np.ndarray:
        return proposal_log_density(self, ancestors, children)

    def to_dict(self) -> dict:
        if isinstance(self.gating, LogisticGating):
            gating = {"mode": "logistic", "beta": self.gating.beta.tolist()}
        else:
            gating = {"mode": "constant", "weights": self.gating.weights.tolist()}
        family = {"name": "gaussian"}
        if isinstance(self.family, StudentT):
            family = {"name": "student_t", "nu": self.family.nu}
        return {
            "gating": gating,
            "experts": [e.to_dict() for e in self.experts],
            "family": family,
            "pooled": self.pooled,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MixtureParams":
        g = data["gating"]
        if g["mode"] == "logistic":
            gating: GatingParams = LogisticGating(np.asarray(g["beta"]))
        else:
            gating = ConstantGating(np.asarray(g["weights"]))
        fam = data.get("family", {"name": "gaussian"})
        return cls(
            gating=gating,
            experts=[ExpertParams.from_dict(e) for e in data["experts"]],
            family=family_from_name(fam["name"], fam.get("nu", 4.0)),
            pooled=bool(data.get("pooled", False)),
        )


def component_log_densities(
    theta: MixtureParams,
    ancestors: np.ndarray,
    children: np.ndarray,
    chols: list[np.ndarray] | None = None,
) -> np.ndarray:
    """Per-expert log-densities ``log rho_j(x, x')``, shape ``(n, d)``."""
    ancestors = np.atleast_2d(np.asarray(ancestors, dtype=float))
    children = np.atleast_2d(np.asarray(children, dtype=float))
    xbar = extend(ancestors)
    chols = theta.cholesky_factors() if chols is None else chols
    out = np.empty((max(xbar.shape[0], children.shape[0]), theta.d))
    for j, (expert, chol) in enumerate(zip(theta.experts, chols)):
        resid = children - xbar @ expert.lam.T
        out[:, j] = log_density_from_resid(chol, theta.family, resid)
    return out


def _joint_log_terms(theta, ancestors, children):
    log_alpha = log_gating_weights(theta.gating, ancestors)
    log_rho = component_log_densities(theta, ancestors, children)
    with np.errstate(invalid="ignore"):
        return log_alpha + log_rho


def proposal_log_density(
    theta: MixtureParams, ancestor: np.ndarray, child: np.ndarray
) -> np.ndarray | float:
    """``log sum_j alpha_j(x) rho_j(x, x')`` via log-sum-exp."""
    single = np.ndim(ancestor) == 1 and np.ndim(child) == 1
    out = logsumexp(_joint_log_terms(theta, ancestor, child), axis=1)
    return float(out[0]) if single else out


_underflow_count = 0


def underflow_fallbacks() -> int:
    """Number of rows for which responsibilities fell back to gating weights."""
    return _underflow_count


def responsibilities(
    theta: MixtureParams, ancestor: np.ndarray, child: np.ndarray
) -> np.ndarray:
    """Posterior expert probabilities for each (ancestor, child) row."""
    global _underflow_count
    single = np.ndim(ancestor) == 1 and np.ndim(child) == 1
    terms = _joint_log_terms(theta, ancestor, child)
    total = logsumexp(terms, axis=1, keepdims=True)
    bad = ~np.isfinite(total[:, 0])
    with np.errstate(invalid="ignore"):
        r = np.exp(terms - total)
    if np.any(bad):
        # every expert density underflowed: the Bayes ratio tends to the gating weights
        _underflow_count += int(bad.sum())
        logger.warning("responsibilities underflowed for %d rows", int(bad.sum()))
        r[bad] = gating_weights(theta.gating, np.atleast_2d(ancestor))[
            bad if np.atleast_2d(ancestor).shape[0] > 1 else np.zeros(bad.sum(), int)
        ]
    r /= r.sum(axis=1, keepdims=True)
    return r[0] if single else r


def sample_mixture(
    theta: MixtureParams, ancestors: np.ndarray, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """One child per ancestor row, plus the expert index that produced it.

    Random numbers are consumed in a fixed order (component uniforms, then
    Gaussian noise, then Gamma mixing variables) independent of how draws
    split across experts.
    """
    ancestors = np.atleast_2d(np.asarray(ancestors, dtype=float))
    n = ancestors.shape[0]
    alpha = gating_weights(theta.gating, ancestors)
    cum = np.cumsum(alpha, axis=1)[:, :-1]
    comp = np.sum(rng.random(n)[:, None] >= cum, axis=1)
    z = rng.standard_normal((n, theta.dim_out))
    if isinstance(theta.family, StudentT):
        nu = theta.family.nu
        z /= np.sqrt(rng.gamma(0.5 * nu, 2.0 / nu, size=n))[:, None]
    xbar = extend(ancestors)
    children = np.empty((n, theta.dim_out))
    for j, (expert, chol) in enumerate(zip(theta.experts, theta.cholesky_factors())):
        rows = comp == j
        if np.any(rows):
            children[rows] = xbar[rows] @ expert.lam.T + z[rows] @ chol.T
    return children, comp


@dataclass
class AuxiliaryProposalConfig:
    """Ancestor sample plus adjustment multipliers for the index draw.

    ``log_adjustment`` maps ancestor rows to ``log psi``; ``None`` means
    ``psi = 1`` for every ancestor.
    """

    ancestors: WeightedSample
    log_adjustment: Callable[[np.ndarray], np.ndarray] | None = None

    def __post_init__(self):
        x = self.ancestors.particles
        if self.log_adjustment is None:
            log_psi = np.zeros(x.shape[0])
        else:
            log_psi = np.asarray(self.log_adjustment(x), dtype=float).ravel()
        live = self.ancestors.weights > 0
        if np.any(~np.isfinite(log_psi[live])) and not np.all(log_psi[live] == -np.inf):
            raise ValueError("adjustment multipliers must be positive and finite")
        self.log_psi = log_psi
        with np.errstate(divide="ignore"):
            log_sel = np.log(self.ancestors.weights) + log_psi
        top = np.max(log_sel)
        if not np.isfinite(top):
            raise DegenerateAncestors("all adjustment-weighted ancestor masses are zero")
        probs = np.exp(log_sel - top)
        self.selection_probs = probs / probs.sum()

    @property
    def particles(self) -> np.ndarray:
        return self.ancestors.particles

    def draw_indices(self, n: int, rng: np.random.Generator) -> np.ndarray:
        # inverse-CDF multinomial draw
        cdf = np.cumsum(self.selection_probs)
        cdf[-1] = 1.0
        return np.searchsorted(cdf, rng.random(n), side="right").clip(max=cdf.size - 1)


class Proposal(NamedTuple):
    indices: np.ndarray
    children: np.ndarray
    components: np.ndarray | None


def propose(
    kernel: ProposalKernel,
    config: AuxiliaryProposalConfig,
    n: int,
    rng: np.random.Generator,
) -> Proposal:
    """Draw ``n`` i.i.d. (ancestor index, child) pairs from the auxiliary proposal.

    ``components`` holds the sampled expert index when ``kernel`` is a
    :class:`MixtureParams`; it is for inspection only and never enters the
    importance weights.
    """
    idx = config.draw_indices(n, rng)
    parents = config.particles[idx]
    if isinstance(kernel, MixtureParams):
        children, comp = sample_mixture(kernel, parents, rng)
        return Proposal(idx, children, comp)
    return Proposal(idx, np.atleast_2d(kernel.sample(parents, rng)), None)


def log_importance_weight(
    kernel: ProposalKernel,
    log_kernel: LogKernel,
    config: AuxiliaryProposalConfig,
    indices: np.ndarray,
    children: np.ndarray,
) -> np.ndarray:
    """``log l(xi_I, x') - log psi(xi_I) - log r(xi_I, x')`` row-wise."""
    indices = np.atleast_1d(indices)
    children = np.atleast_2d(children)
    parents = config.particles[indices]
    log_l = np.asarray(log_kernel(parents, children), dtype=float)
    log_r = np.asarray(kernel.log_density(parents, children), dtype=float)
    support = log_l > -np.inf
    if np.any(support & ~(log_r > -np.inf)):
        raise AbsoluteContinuityViolation(
            "proposal density is zero where the target kernel is positive"
        )
    out = np.full(log_l.shape, -np.inf)
    out[support] = log_l[support] - config.log_psi[indices][support] - log_r[support]
    return out


def importance_weight(
    kernel: ProposalKernel,
    log_kernel: LogKernel,
    config: AuxiliaryProposalConfig,
    indices,
    children,
):
    """Importance weight ``l / (psi * r)`` of each proposed pair."""
    scalar = np.ndim(indices) == 0
    w = np.exp(log_importance_weight(kernel, log_kernel, config, indices, children))
    return float(w[0]) if scalar else w
