"""Adaptive auxiliary particle filters with mixture-of-experts proposals."""

from .adaptation import (
    AdaptationConfig,
    AdaptationTrace,
    SuffStats,
    accumulate_is_statistics,
    adapt,
    initial_fit,
    m_step,
    mean_field_residual,
    robbins_monro_update,
    suffstat_increment,
)
from .diagnostics import (
    KldEstimate,
    coefficient_of_variation,
    ess,
    estimate_kld,
    negated_entropy,
    proportion_curve,
)
from .errors import (
    AbsoluteContinuityViolation,
    AmoeError,
    CholeskyFailure,
    DegenerateAncestors,
    DegenerateNormalizer,
    FilterCollapse,
    InvalidObservation,
    UnreliableEstimate,
)
from .experts import (
    AuxiliaryProposalConfig,
    ConstantGating,
    LogisticGating,
    MixtureParams,
    gating_weights,
    importance_weight,
    proposal_log_density,
    propose,
    responsibilities,
)
from .models import (
    BesselModel,
    LinearGaussianMixtureModel,
    StateSpaceModel,
    TobitModel,
    bessel_loglik,
    lg_optimal_kernel,
    tobit_loglik,
)
from .particles import WeightedSample
from .smc import FilterConfig, FilterTrace, apf_step, normalize_weights, run_filter
from .strata import (
    ExpertParams,
    ExpertSuffStat,
    Gaussian,
    StudentT,
    conditional_u_mean,
    stratum_log_density,
    stratum_sample,
    stratum_suffstat,
)

__version__ = "0.1.0"
