"""Experiment definitions shared by the CLI and the acceptance tests.

Each runner takes an :class:`ExperimentConfig` and returns plain result
objects; writing files is left to the CLI.  Random streams are derived
from one seed through ``numpy.random.SeedSequence`` so results do not
depend on how many worker threads are used.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Any

import numpy as np

from .adaptation import (
    AdaptationConfig,
    AdaptationTrace,
    ImportanceSampler,
    adapt,
    initial_fit,
)
from .diagnostics import (
    KldEstimate,
    estimate_kld,
    kld_callback,
    proportion_curve,
)
from .experts import (
    AuxiliaryProposalConfig,
    MixtureParams,
    log_importance_weight,
    propose,
)
from .models import PriorKernel, StateSpaceModel, make_model
from .particles import WeightedSample
from .smc import FilterConfig, FilterTrace, _PrimedSource, run_filter
from .strata import family_from_name

PRESETS: dict[str, dict[str, Any]] = {
    "lg": dict(
        y=[1.0, 0.0], d=2, iterations=20, sample_size=1000, first_sample_size=2000,
        step=0.1, gating_update="newton", init="prior",
    ),
    "bessel": dict(
        y=1.0, d=6, iterations=30, sample_size=200, first_sample_size=1000,
        step=1.0, gating_update="anchored", init="fit",
    ),
    "tobit": dict(
        y=0.0, d=2, iterations=500, sample_size=200, first_sample_size=400,
        step=1.0, gating_update="anchored", init="fit",
    ),
}


@dataclass
class ExperimentConfig:
    """Resolved experiment settings (JSON round-trippable)."""

    model: str = "lg"
    model_params: dict = field(default_factory=dict)
    y: Any = None
    n_ancestors: int = 20000
    family: str = "gaussian"
    nu: float = 4.0
    families: list = field(default_factory=lambda: ["gaussian", "student_t"])
    d: int = 2
    gating: str = "logistic"
    pooled: bool = False
    divide_pooled_by_d: bool = False
    iterations: int = 20
    sample_size: int = 1000
    first_sample_size: int | None = None
    step: Any = 0.1
    gating_update: str = "newton"
    min_responsibility_mass: float = 1e-6
    init: str = "fit"
    reference_n: int = 10000
    reference_n_levels: int = 100000
    eval_n: int | None = None
    seed: int = 0
    # multi-step filter
    steps: int = 50
    n_particles: int = 2000
    alpha: float | None = 0.5
    filter_d: int = 4
    filter_iterations: int = 5
    warm_start: bool = False
    replicates: int = 5
    observations: list | None = None

    @classmethod
    def preset(cls, model: str = "lg", **overrides) -> "ExperimentConfig":
        key = model.lower()
        if key == "linear_gaussian":
            key = "lg"
        if key not in PRESETS:
            raise ValueError(f"unknown model {model!r}; choose from {sorted(PRESETS)}")
        params = dict(PRESETS[key])
        params.update({k: v for k, v in overrides.items() if v is not None})
        return cls(model=key, **params)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls.preset(data.get("model", "lg"), **{k: v for k, v in data.items() if k != "model"})

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> None:
        for name in ("n_ancestors", "d", "sample_size", "reference_n", "n_particles", "replicates"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be nonnegative")
        if self.gating not in ("logistic", "constant"):
            raise ValueError("gating must be 'logistic' or 'constant'")
        if self.init not in ("prior", "fit"):
            raise ValueError("init must be 'prior' or 'fit'")
        self.adaptation_config()

    def adaptation_config(self, iterations: int | None = None) -> AdaptationConfig:
        return AdaptationConfig.build(
            self.iterations if iterations is None else iterations,
            self.sample_size,
            self.step,
            first_sample_size=self.first_sample_size,
            pooled=self.pooled,
            min_responsibility_mass=self.min_responsibility_mass,
            divide_pooled_by_d=self.divide_pooled_by_d,
            gating_update=self.gating_update,
        )

    def build_model(self) -> StateSpaceModel:
        return make_model(self.model, **self.model_params)


def _streams(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def _parallel(fn, items, threads: int):
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


@dataclass
class SingleStepResult:
    """Outcome of one adaptation session on a single filter update."""

    label: str
    theta: MixtureParams
    trace: AdaptationTrace
    pilot_weights: np.ndarray
    eval_weights: dict  # label -> weights of a fresh draw from that proposal


@dataclass
class SingleStepSetup:
    model: StateSpaceModel
    ancestors: WeightedSample
    aux: AuxiliaryProposalConfig
    log_kernel: Any
    y: Any


def single_step_setup(cfg: ExperimentConfig, rng: np.random.Generator) -> SingleStepSetup:
    model = cfg.build_model()
    y = model.parse_observation(cfg.y)
    ancestors = WeightedSample.uniform(model.initial_sample(cfg.n_ancestors, rng))
    return SingleStepSetup(model, ancestors, AuxiliaryProposalConfig(ancestors), model.log_kernel(y), y)


def draw_weights(kernel, setup: SingleStepSetup, n: int, rng: np.random.Generator) -> np.ndarray:
    """Self-normalisable importance weights of ``n`` fresh proposal draws."""
    prop = propose(kernel, setup.aux, n, rng)
    logw = log_importance_weight(kernel, setup.log_kernel, setup.aux, prop.indices, prop.children)
    return np.exp(logw - np.max(logw))


def run_single_step(
    cfg: ExperimentConfig,
    family: str | None = None,
    setup: SingleStepSetup | None = None,
    eval_iterations: tuple[int, ...] = (1, 10),
    with_kld: bool = True,
    step: float | str | None = None,
) -> SingleStepResult:
    """Adapt the proposal for one update of the configured model.

    Streams: ancestors, adaptation, KLD reference draws, evaluation draws.
    The first adaptation batch always comes from the prior kernel; the
    starting mixture is either the prior itself (``init="prior"``) or a fit
    to that batch.
    """
    fam_name = family or cfg.family
    r_anc, r_adapt, r_kld, r_eval = _streams(cfg.seed, 4)
    setup = setup or single_step_setup(cfg, r_anc)
    model = setup.model
    run_cfg = cfg if step is None else ExperimentConfig.from_dict({**cfg.to_dict(), "step": step})
    acfg = run_cfg.adaptation_config()
    fam = family_from_name(fam_name, cfg.nu)
    logistic = cfg.gating == "logistic"

    pilot = PriorKernel(model)
    sampler = ImportanceSampler(setup.aux, setup.log_kernel)
    n0 = acfg.sample_sizes[0] if acfg.iterations else (cfg.first_sample_size or 2 * cfg.sample_size)
    first = sampler.draw(pilot, n0, r_adapt)
    if cfg.init == "prior":
        theta0 = model.prior_mixture(logistic=logistic) if hasattr(model, "lambdas") else model.prior_mixture()
        theta0 = MixtureParams(theta0.gating, theta0.experts, fam, cfg.pooled or theta0.pooled)
    else:
        theta0 = initial_fit(
            first.children, first.weights, cfg.d, model.dim_state, r_adapt,
            family=fam, logistic=logistic, pooled=cfg.pooled,
        )
    diag = kld_callback(setup.aux, setup.log_kernel, cfg.reference_n, r_kld) if with_kld else None
    theta, trace = adapt(
        theta0, setup.ancestors, setup.log_kernel, acfg, r_adapt,
        pilot=pilot, diagnostics=diag, source=_PrimedSource(first, sampler),
    )
    n_eval = cfg.eval_n or cfg.n_ancestors
    evals = {"prior": draw_weights(pilot, setup, n_eval, r_eval)}
    for k in eval_iterations:
        if 0 < k < len(trace.thetas) - 1:
            evals[f"iter{k}"] = draw_weights(MixtureParams.from_dict(trace.thetas[k]), setup, n_eval, r_eval)
    evals["final"] = draw_weights(theta, setup, n_eval, r_eval)
    return SingleStepResult(fam_name, theta, trace, first.weights, evals)


def reference_levels(cfg: ExperimentConfig, setup: SingleStepSetup, rng=None) -> dict[str, KldEstimate]:
    """Large-sample KLD of the prior kernel and, if available, the optimal kernel (uniform adjustment)."""
    rng = rng or _streams(cfg.seed + 1, 1)[0]
    out = {
        "prior": estimate_kld(PriorKernel(setup.model), setup.aux, setup.log_kernel, cfg.reference_n_levels, rng)
    }
    try:
        opt = setup.model.optimal_kernel(setup.y)
    except NotImplementedError:
        return out
    out["optimal_uniform_psi"] = estimate_kld(opt, setup.aux, setup.log_kernel, cfg.reference_n_levels, rng)
    return out


def run_step_sweep(cfg: ExperimentConfig, steps, threads: int = 1) -> dict:
    """Same seed, several constant step-size rules; returns label -> result."""
    r_anc = _streams(cfg.seed, 4)[0]
    setup = single_step_setup(cfg, r_anc)
    results = _parallel(lambda s: run_single_step(cfg, setup=setup, step=s), list(steps), threads)
    return dict(zip([str(s) for s in steps], results))


def run_family_comparison(cfg: ExperimentConfig, threads: int = 1):
    """Adapt with each stratum family on a shared seed; also compute reference levels."""
    r_anc = _streams(cfg.seed, 4)[0]
    setup = single_step_setup(cfg, r_anc)
    results = _parallel(
        lambda fam: run_single_step(cfg, family=fam, setup=setup, eval_iterations=()),
        list(cfg.families),
        threads,
    )
    return dict(zip(cfg.families, results)), reference_levels(cfg, setup)


@dataclass
class FilterComparison:
    observations: list
    bootstrap: list[FilterTrace]
    adaptive: list[FilterTrace]

    def summary(self) -> list[dict]:
        rows = []
        for r, (b, a) in enumerate(zip(self.bootstrap, self.adaptive)):
            for name, tr in (("bootstrap", b), ("adaptive", a)):
                rows.append({
                    "replicate": r,
                    "filter": name,
                    "mean_relative_ess": float(tr.column("relative_ess")[1:].mean()),
                    "mean_entropy": float(tr.column("entropy")[1:].mean()),
                    "steps_completed": len(tr.rows) - 1,
                })
        return rows


def filter_configs(cfg: ExperimentConfig) -> tuple[FilterConfig, FilterConfig]:
    boot = FilterConfig(cfg.n_particles, "prior", seed=cfg.seed)
    adaptive = FilterConfig(
        cfg.n_particles,
        "adapted",
        seed=cfg.seed,
        adaptation=cfg.adaptation_config(cfg.filter_iterations),
        d=cfg.filter_d,
        family=family_from_name(cfg.family, cfg.nu),
        logistic=cfg.gating == "logistic",
        pooled=cfg.pooled,
        warm_start=cfg.warm_start,
        alpha=cfg.alpha,
    )
    return boot, adaptive


def run_filter_comparison(cfg: ExperimentConfig, threads: int = 1) -> FilterComparison:
    """Bootstrap and adaptive filters on shared observation records, per replicate."""
    model = cfg.build_model()
    boot_cfg, ad_cfg = filter_configs(cfg)
    reps = np.random.SeedSequence(cfg.seed).spawn(cfg.replicates)

    def one(ss):
        r_obs, r_boot, r_ad, r_init = [np.random.default_rng(s) for s in ss.spawn(4)]
        if cfg.observations is not None:
            obs = [model.parse_observation(y) for y in cfg.observations]
        else:
            _, obs = model.simulate(cfg.steps, r_obs, x0=model.initial_sample(1, r_obs)[0])
        x0 = WeightedSample.uniform(model.initial_sample(cfg.n_particles, r_init))
        b = run_filter(model, obs, boot_cfg, r_boot, initial=x0)
        a = run_filter(model, obs, ad_cfg, r_ad, initial=x0)
        return np.asarray(obs).tolist(), b, a

    out = _parallel(one, reps, threads)
    return FilterComparison([o[0] for o in out], [o[1] for o in out], [o[2] for o in out])


def proportions(weights) -> tuple[np.ndarray, np.ndarray]:
    c = proportion_curve(weights)
    return c.particle_fraction, c.mass_fraction


def weight_histogram(weights, bins: int = 50):
    """Histogram of ``N * normalised weight`` (1 everywhere under full adaptation)."""
    w = np.asarray(weights, dtype=float)
    scaled = w.size * w / w.sum()
    counts, edges = np.histogram(scaled, bins=bins)
    return edges[:-1], edges[1:], counts
