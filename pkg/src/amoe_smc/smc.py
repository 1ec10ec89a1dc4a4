"""Auxiliary particle filter with optional per-step proposal adaptation."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .adaptation import (
    AdaptationConfig,
    ImportanceSampler,
    IsBatch,
    adapt,
    initial_fit,
)
from .diagnostics import ess, negated_entropy
from .errors import FilterCollapse
from .experts import (
    AuxiliaryProposalConfig,
    MixtureParams,
    log_importance_weight,
    propose,
)
from .models import PriorKernel, StateSpaceModel
from .particles import WeightedSample
from .strata import Gaussian, StratumFamily

PROPOSALS = ("prior", "optimal", "adapted")
ADJUSTMENTS = ("uniform", "optimal")


def normalize_weights(sample: WeightedSample) -> WeightedSample:
    """Copy of ``sample`` with weights summing to one.

    The remainder goes to the largest entry, so the correctly rounded sum
    (``math.fsum``) is exactly 1.
    """
    w = np.asarray(sample.weights, dtype=float)
    top = w.max()
    if not top > 0:
        raise FilterCollapse("all weights are zero")
    w = w / top
    wbar = w / w.sum()
    # the largest entry absorbs the rounding remainder; its spacing is fine
    # enough to make the correctly rounded sum exactly one
    k = int(np.argmax(wbar))
    for _ in range(8):
        total = math.fsum(wbar)
        if total == 1.0:
            break
        corrected = wbar[k] + (1.0 - total)
        if corrected == wbar[k]:
            corrected = np.nextafter(wbar[k], -np.inf if total > 1.0 else np.inf)
        wbar[k] = corrected
    return WeightedSample(sample.particles.copy(), wbar, sample.ancestor_indices)


@dataclass
class FilterConfig:
    """Particle budget, proposal choice and adaptation settings.

    With ``alpha`` set, each adaptive step spends ``alpha * N`` draws on
    adaptation (``alpha * N / L`` per iteration, the first one doubled) and
    propagates ``(1 - alpha) * N`` particles.

    With ``pilot`` on, the first adaptation batch of every step is drawn
    from the prior kernel; the starting parameter (warm-started, given or
    fitted to that batch) only supplies its responsibilities.
    """

    n_particles: int
    proposal: str = "prior"
    adjustment: str = "uniform"
    seed: int = 0
    adaptation: AdaptationConfig | None = None
    d: int = 2
    family: StratumFamily = field(default_factory=Gaussian)
    logistic: bool = True
    pooled: bool = False
    warm_start: bool = True
    stride: int = 1
    alpha: float | None = None
    initial_theta: MixtureParams | None = None
    pilot: bool = True

    def __post_init__(self):
        if self.n_particles < 2:
            raise ValueError("need at least two particles")
        if self.proposal not in PROPOSALS:
            raise ValueError(f"proposal must be one of {PROPOSALS}")
        if self.adjustment not in ADJUSTMENTS:
            raise ValueError(f"adjustment must be one of {ADJUSTMENTS}")
        if self.proposal == "adapted" and self.adaptation is None:
            raise ValueError("adapted proposal needs an adaptation config")
        if self.alpha is not None and not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.stride < 1:
            raise ValueError("stride must be positive")

    def budget(self) -> tuple[AdaptationConfig | None, int]:
        """Effective adaptation config and propagated particle count."""
        cfg = self.adaptation
        if self.proposal != "adapted" or self.alpha is None or cfg is None:
            return cfg, self.n_particles
        L = cfg.iterations
        if L == 0:
            return cfg, self.n_particles
        per = max(1, int(round(self.alpha * self.n_particles / L)))
        sizes = [per] * L
        sizes[0] = 2 * per
        cfg = AdaptationConfig(
            L,
            sizes,
            cfg.step_sizes,
            cfg.pooled,
            cfg.min_responsibility_mass,
            cfg.divide_pooled_by_d,
            cfg.gating_update,
        )
        return cfg, max(2, int(round((1.0 - self.alpha) * self.n_particles)))


class _PrimedSource:
    """Batch source replaying a prepared first batch."""

    def __init__(self, first: IsBatch, fallback: ImportanceSampler):
        self.first = first
        self.fallback = fallback

    def draw(self, kernel, n, rng):
        if self.first is not None:
            batch, self.first = self.first, None
            return batch
        return self.fallback.draw(kernel, n, rng)


@dataclass
class StepInfo:
    theta: MixtureParams | None = None
    adaptation_trace: object = None
    log_scale: float = 0.0


def _log_adjustment(model, y, config):
    if config.adjustment == "uniform":
        return None
    return lambda x: model.log_optimal_adjustment(x, y)


def apf_step_detailed(
    sample: WeightedSample,
    model: StateSpaceModel,
    y,
    config: FilterConfig,
    rng: np.random.Generator,
    theta: MixtureParams | None = None,
    adapt_now: bool = True,
) -> tuple[WeightedSample, StepInfo]:
    """One auxiliary particle filter update; also returns the proposal used.

    ``theta`` is a warm-start parameter for adapted mode.  When
    ``adapt_now`` is false and ``theta`` is given, the proposal is used
    as-is without adaptation.
    """
    info = StepInfo()
    log_kernel = model.log_kernel(y)
    log_adj = _log_adjustment(model, y, config)
    aux = AuxiliaryProposalConfig(sample, log_adj)
    adapt_cfg, n_prop = config.budget()

    if config.proposal == "prior":
        kernel = PriorKernel(model)
    elif config.proposal == "optimal":
        kernel = model.optimal_kernel(y)
    else:
        if theta is None or not config.warm_start:
            theta = config.initial_theta
        if adapt_now or theta is None:
            if adapt_cfg.iterations == 0:
                if theta is None:
                    raise ValueError("adapted mode without iterations needs an initial theta")
            else:
                sampler = ImportanceSampler(aux, log_kernel)
                pilot = PriorKernel(model) if config.pilot or theta is None else None
                source = sampler
                if pilot is not None:
                    first = sampler.draw(pilot, adapt_cfg.sample_sizes[0], rng)
                    if not np.any(first.weights > 0):
                        raise FilterCollapse("pilot batch has no positive weight")
                    if theta is None:
                        theta = initial_fit(
                            first.children,
                            first.weights,
                            config.d,
                            model.dim_state,
                            rng,
                            family=config.family,
                            logistic=config.logistic,
                            pooled=config.pooled,
                        )
                    source = _PrimedSource(first, sampler)
                theta, info.adaptation_trace = adapt(
                    theta, sample, log_kernel, adapt_cfg, rng, log_adj, pilot=pilot, source=source
                )
        kernel = theta
        info.theta = theta

    prop = propose(kernel, aux, n_prop, rng)
    logw = log_importance_weight(kernel, log_kernel, aux, prop.indices, prop.children)
    top = np.max(logw)
    if not np.isfinite(top):
        raise FilterCollapse("every propagated particle has zero weight")
    if top > 700 or top < -700:
        info.log_scale = float(top)
        logw = logw - top
    out = WeightedSample(prop.children, np.exp(logw), prop.indices)
    return out, info


def apf_step(
    sample: WeightedSample,
    model: StateSpaceModel,
    y,
    config: FilterConfig,
    rng: np.random.Generator,
    theta: MixtureParams | None = None,
) -> WeightedSample:
    """One auxiliary particle filter update (index draw, propagation, weighting)."""
    return apf_step_detailed(sample, model, y, config, rng, theta)[0]


FIELDS = ("step", "n", "ess", "relative_ess", "entropy", "cpu_ms")


@dataclass
class FilterTrace:
    rows: list[dict] = field(default_factory=list)
    error: str | None = None

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows])

    def estimates(self) -> np.ndarray:
        return np.array([r["estimate"] for r in self.rows])

    def to_records(self) -> list[dict]:
        out = []
        for r in self.rows:
            rec = {k: r[k] for k in FIELDS}
            for i, v in enumerate(r["estimate"]):
                rec[f"estimate_{i}"] = v
            out.append(rec)
        return out

    def write_csv(self, path) -> None:
        recs = self.to_records()
        names = list(recs[0]) if recs else list(FIELDS)
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=names)
            writer.writeheader()
            writer.writerows(recs)

    def to_json(self, **kwargs) -> str:
        return json.dumps({"rows": self.to_records(), "error": self.error}, **kwargs)


def _row(step: int, sample: WeightedSample, cpu_ms: float) -> dict:
    w = sample.weights
    e = ess(w)
    return {
        "step": step,
        "n": sample.size,
        "ess": e,
        "relative_ess": e / sample.size,
        "entropy": negated_entropy(w),
        "cpu_ms": cpu_ms,
        "estimate": sample.mean().tolist(),
    }


def run_filter(
    model: StateSpaceModel,
    observations: Sequence,
    config: FilterConfig,
    rng: np.random.Generator | None = None,
    initial: WeightedSample | None = None,
) -> FilterTrace:
    """Filter an observation record; row 0 describes the initial sample.

    A collapse stops the loop; the trace keeps the rows computed so far and
    records the error message.
    """
    rng = np.random.default_rng(config.seed) if rng is None else rng
    if initial is None:
        initial = WeightedSample.uniform(model.initial_sample(config.n_particles, rng))
    trace = FilterTrace()
    trace.rows.append(_row(0, initial, 0.0))
    sample, theta = initial, None
    for k, y in enumerate(observations, start=1):
        start = time.process_time()
        adapt_now = (k - 1) % config.stride == 0
        try:
            sample, info = apf_step_detailed(sample, model, y, config, rng, theta, adapt_now)
        except FilterCollapse as exc:
            trace.error = f"step {k}: {exc}"
            break
        theta = info.theta
        trace.rows.append(_row(k, sample, 1000.0 * (time.process_time() - start)))
    return trace


class ParticleFilter:
    """Stateful wrapper around :func:`apf_step_detailed`."""

    def __init__(self, model: StateSpaceModel, config: FilterConfig, rng=None):
        self.model = model
        self.config = config
        self.rng = np.random.default_rng(config.seed) if rng is None else rng
        self.sample = WeightedSample.uniform(model.initial_sample(config.n_particles, self.rng))
        self.theta: MixtureParams | None = None
        self.steps = 0

    def update(self, y) -> WeightedSample:
        adapt_now = self.steps % self.config.stride == 0
        self.sample, info = apf_step_detailed(
            self.sample, self.model, y, self.config, self.rng, self.theta, adapt_now
        )
        self.theta = info.theta
        self.steps += 1
        return self.sample
