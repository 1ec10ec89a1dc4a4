"""Weight-quality criteria and Monte Carlo KLD estimation."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .errors import FilterCollapse, UnreliableEstimate
from .experts import (
    AuxiliaryProposalConfig,
    LogKernel,
    ProposalKernel,
    log_importance_weight,
    propose,
)


def _check(weights) -> np.ndarray:
    w = np.asarray(weights, dtype=float).ravel()
    if w.size == 0 or not np.any(w > 0):
        raise FilterCollapse("need at least one positive weight")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and nonnegative")
    return w


def ess(weights) -> float:
    """Effective sample size ``(sum w)^2 / sum w^2``."""
    w = _check(weights)
    w = w / w.max()
    return float(w.sum() ** 2 / np.dot(w, w))


def relative_ess(weights) -> float:
    return ess(weights) / np.size(weights)


def negated_entropy(weights) -> float:
    """``sum wbar log wbar`` with ``0 log 0 = 0``; lies in ``[-log N, 0]``."""
    w = _check(weights)
    wbar = w / w.sum()
    nz = wbar[wbar > 0]
    return float(np.sum(nz * np.log(nz)))


def coefficient_of_variation(weights) -> float:
    """Standard deviation over mean of the normalised weights."""
    w = _check(weights)
    wbar = w / w.sum()
    return float(np.std(wbar) / np.mean(wbar))


class ProportionCurve(NamedTuple):
    particle_fraction: np.ndarray
    mass_fraction: np.ndarray

    def fraction_for_mass(self, mass: float) -> float:
        """Smallest particle fraction whose top weights carry ``mass`` of the total."""
        k = int(np.searchsorted(self.mass_fraction, mass - 1e-12, side="left"))
        return float(self.particle_fraction[min(k, self.mass_fraction.size - 1)])

    def mass_at(self, fraction: float) -> float:
        """Mass carried by the top ``fraction`` of particles (step curve)."""
        k = int(np.searchsorted(self.particle_fraction, fraction + 1e-12, side="right")) - 1
        return float(self.mass_fraction[max(k, 0)])


def proportion_curve(weights) -> ProportionCurve:
    """Cumulative mass against particle fraction, weights sorted decreasingly.

    The curve starts at the origin and ends at ``(1, 1)``.
    """
    w = _check(weights)
    n = w.size
    cum = np.cumsum(np.sort(w)[::-1])
    mass = np.concatenate([[0.0], cum / cum[-1]])
    mass[-1] = 1.0
    frac = np.arange(n + 1) / n
    return ProportionCurve(frac, mass)


def fraction_for_mass(weights, mass: float) -> float:
    return proportion_curve(weights).fraction_for_mass(mass)


def null_weight_fraction(weights, threshold: float = 1e-6) -> float:
    """Share of particles whose normalised weight falls below ``threshold``."""
    w = _check(weights)
    return float(np.mean(w / w.sum() < threshold))


@dataclass
class KldEstimate:
    """Self-normalised Monte Carlo estimates of the auxiliary KLD.

    ``value_up_to_constant`` estimates ``-E[log r]`` under the auxiliary
    target, which differs from the divergence by a proposal-independent
    constant.  ``absolute`` estimates the divergence itself as
    ``E[log w] - log E_pi[w]`` from the same draw.
    """

    value_up_to_constant: float
    reference_sample_size: int
    standard_error: float
    absolute: float
    absolute_stderr: float
    ess: float
    reliable: bool = True


def kld_from_weights(log_w: np.ndarray, log_r: np.ndarray | None = None) -> KldEstimate:
    """KLD estimates from log-weights (and optionally log proposal densities)."""
    log_w = np.asarray(log_w, dtype=float).ravel()
    n = log_w.size
    top = np.max(log_w)
    if not np.isfinite(top):
        raise FilterCollapse("all reference weights are zero")
    w = np.exp(log_w - top)
    wbar = w / w.sum()
    pos = wbar > 0
    f = np.where(pos, log_w, 0.0)
    est1 = float(np.sum(wbar[pos] * f[pos]))
    absolute = est1 - (top + np.log(w.mean()))
    g = wbar * (f - est1) - (wbar - 1.0 / n)
    abs_se = float(np.sqrt(np.sum(g * g)))
    if log_r is None:
        value, se = absolute, abs_se
    else:
        h = np.where(pos, -np.asarray(log_r, dtype=float).ravel(), 0.0)
        value = float(np.sum(wbar[pos] * h[pos]))
        se = float(np.sqrt(np.sum((wbar * (h - value)) ** 2)))
    e = float(1.0 / np.sum(wbar * wbar))
    return KldEstimate(value, n, se, float(absolute), abs_se, e, e >= 10)


def estimate_kld(
    kernel: ProposalKernel,
    config: AuxiliaryProposalConfig,
    log_kernel: LogKernel,
    reference_n: int,
    rng: np.random.Generator,
) -> KldEstimate:
    """Estimate the divergence between the auxiliary target and a proposal."""
    if reference_n < 1000:
        raise ValueError("reference_n must be at least 1000")
    prop = propose(kernel, config, reference_n, rng)
    log_w = log_importance_weight(kernel, log_kernel, config, prop.indices, prop.children)
    log_r = kernel.log_density(config.particles[prop.indices], prop.children)
    est = kld_from_weights(log_w, log_r)
    if not est.reliable:
        warnings.warn(
            f"reference draw has ESS {est.ess:.1f} < 10; KLD estimate unreliable",
            UnreliableEstimate,
            stacklevel=2,
        )
    return est


def kld_callback(
    config: AuxiliaryProposalConfig,
    log_kernel: LogKernel,
    reference_n: int,
    rng: np.random.Generator,
) -> Callable[[ProposalKernel], KldEstimate]:
    """Closure suitable for the ``diagnostics`` hook of the adaptation loop."""

    def run(kernel: ProposalKernel) -> KldEstimate:
        return estimate_kld(kernel, config, log_kernel, reference_n, rng)

    return run
