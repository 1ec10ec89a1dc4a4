import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles as orc
from amoe_smc.adaptation import (
    AdaptationConfig,
    AdaptationError,
    AdaptationTrace,
    IsBatch,
    SuffStats,
    adapt,
    initial_fit,
    m_step,
    mean_field_residual,
    robbins_monro_update,
    step_schedule,
    suffstat_increment,
)
from amoe_smc.diagnostics import kld_callback
from amoe_smc.experts import (
    AuxiliaryProposalConfig,
    ConstantGating,
    LogisticGating,
    MixtureParams,
    gating_weights,
    responsibilities,
)
from amoe_smc.models import LinearGaussianMixtureModel
from amoe_smc.particles import WeightedSample
from amoe_smc.strata import ExpertParams, StudentT, conditional_u_mean, stratum_suffstat


def two_expert(logistic=False, family=None, q=1, p=1):
    experts = [
        ExpertParams(np.full((q, p + 1), 0.5), np.eye(q)),
        ExpertParams(np.full((q, p + 1), -0.5), 2 * np.eye(q)),
    ]
    gating = LogisticGating(np.array([[0.3] * (p + 1)])) if logistic else ConstantGating(np.array([0.4, 0.6]))
    kw = {} if family is None else {"family": family}
    return MixtureParams(gating, experts, **kw)


# --- schedules and config ---------------------------------------------------


def test_step_schedules():
    assert step_schedule(25, 0.5) == [0.1] * 25
    assert step_schedule(4, 10.0) == [1.0] * 4
    pw = step_schedule(3, "power")
    np.testing.assert_allclose(pw, [1.0, 2**-0.6, 3**-0.6])
    assert step_schedule(0) == []
    with pytest.raises(ValueError):
        step_schedule(3, "harmonic")


def test_config_validation_and_build():
    cfg = AdaptationConfig.build(5, 100, 0.1)
    assert cfg.sample_sizes == [200, 100, 100, 100, 100]
    assert AdaptationConfig.build(3, 100, first_sample_size=150).sample_sizes[0] == 150
    with pytest.raises(ValueError):
        AdaptationConfig(2, [10], [0.5, 0.5])
    with pytest.raises(ValueError):
        AdaptationConfig(1, [10], [1.5])
    with pytest.raises(ValueError):
        AdaptationConfig(1, [0], [0.5])
    with pytest.raises(ValueError):
        AdaptationConfig(1, [10], [0.5], gating_update="lbfgs")
    with pytest.raises(ValueError):
        AdaptationConfig.build(3, 10, 0.0)


# --- sufficient statistics ------------------------------------------------------


def test_increment_matches_pairwise_oracle(rng):
    theta = two_expert(family=StudentT(5.0), q=2, p=2)
    x = rng.standard_normal((30, 2))
    y = rng.standard_normal((30, 2))
    w = rng.exponential(size=30)
    w[3] = 0.0
    inc = suffstat_increment(theta, x, y, w)
    r = responsibilities(theta, x, y)
    for j, e in enumerate(theta.experts):
        s1 = s2 = s3 = 0.0
        for i in range(30):
            u = conditional_u_mean(e, theta.family, x[i], y[i])
            s = stratum_suffstat(x[i], y[i], u)
            s1 = s1 + w[i] * r[i, j] * s.s1
            s2 = s2 + w[i] * r[i, j] * s.s2
            s3 = s3 + w[i] * r[i, j] * s.s3
        np.testing.assert_allclose(inc.s1[j], s1, rtol=1e-10)
        np.testing.assert_allclose(inc.s2[j], s2, rtol=1e-10)
        np.testing.assert_allclose(inc.s3[j], s3, rtol=1e-10)
    np.testing.assert_allclose(inc.p, (w[:, None] * r).sum(0))


def test_gating_statistics_are_gradient_and_hessian(rng):
    """t and v equal the derivatives of sum w sum_j r_j log alpha_j, r held fixed."""
    theta = MixtureParams(
        LogisticGating(rng.standard_normal((2, 2)) * 0.5),
        [ExpertParams(rng.standard_normal((1, 2)), np.eye(1)) for _ in range(3)],
    )
    x, y, w = rng.standard_normal((40, 1)), rng.standard_normal((40, 1)), rng.exponential(size=40)
    inc = suffstat_increment(theta, x, y, w)
    r = responsibilities(theta, x, y)

    def objective(b):
        a = gating_weights(LogisticGating(b.reshape(2, 2)), x)
        return float(np.sum(w[:, None] * r * np.log(a)))

    b0, h = theta.gating.beta.ravel(), 1e-4
    eye = np.eye(4)
    grad = np.array([(objective(b0 + h * e) - objective(b0 - h * e)) / (2 * h) for e in eye])
    hess = np.array(
        [
            [
                (objective(b0 + h * (ei + ej)) - objective(b0 + h * (ei - ej)) - objective(b0 - h * (ei - ej)) + objective(b0 - h * (ei + ej)))
                / (4 * h * h)
                for ej in eye
            ]
            for ei in eye
        ]
    )
    np.testing.assert_allclose(inc.t.ravel(), grad, rtol=1e-6, atol=1e-7)
    np.testing.assert_allclose(inc.v, hess, rtol=1e-4, atol=1e-5)


def test_robbins_monro_algebra(rng):
    theta = two_expert()
    a = suffstat_increment(theta, rng.standard_normal((10, 1)), rng.standard_normal((10, 1)), np.full(10, 2.0))
    b = suffstat_increment(theta, rng.standard_normal((10, 1)), rng.standard_normal((10, 1)), np.full(10, 4.0))
    s = robbins_monro_update(None, a, 20.0, 10, 0.3)  # first step forced to 1
    assert s.c == pytest.approx(2.0)
    np.testing.assert_allclose(s.s2, a.s2 / 20.0)
    s2 = robbins_monro_update(s, b, 40.0, 10, 0.25)
    c = 0.75 * 2.0 + 0.25 * 4.0
    assert s2.c == pytest.approx(c)
    np.testing.assert_allclose(s2.s1, 0.75 * s.s1 + 0.25 / (c * 10) * b.s1)
    with pytest.raises(ValueError):
        robbins_monro_update(s, b, 40.0, 10, 0.0)


def test_suffstats_helpers(rng):
    theta = two_expert()
    s = suffstat_increment(theta, rng.standard_normal((5, 1)), rng.standard_normal((5, 1)), np.ones(5))
    swapped = s.permuted([1, 0])
    np.testing.assert_array_equal(swapped.p, s.p[::-1])
    assert s.flat().size == 2 * (1 + 4 + 2 + 1)
    z = SuffStats.zeros(two_expert(logistic=True))
    assert z.t.shape == (1, 2) and z.v.shape == (2, 2)
    with pytest.raises(ValueError):
        z.permuted([1, 0])


# --- M-step ---------------------------------------------------------------------


def test_m_step_recovers_regression(rng):
    lam = np.array([[0.8, -0.3, 1.0], [0.2, 0.5, -2.0]])
    sigma = np.array([[0.5, 0.1], [0.1, 0.3]])
    x = rng.standard_normal((200000, 2))
    y = x @ lam[:, :2].T + lam[:, 2] + rng.standard_normal((200000, 2)) @ np.linalg.cholesky(sigma).T
    theta = MixtureParams(ConstantGating(np.array([1.0])), [ExpertParams(np.zeros((2, 3)), np.eye(2))])
    stats = robbins_monro_update(None, suffstat_increment(theta, x, y, np.ones(len(x))), len(x), len(x), 1.0)
    new = m_step(stats, theta)
    np.testing.assert_allclose(new.experts[0].lam, lam, atol=0.01)
    np.testing.assert_allclose(new.experts[0].sigma, sigma, atol=0.01)


def test_pooling_divisors(rng):
    theta = two_expert()
    x, y = rng.standard_normal((50, 1)), rng.standard_normal((50, 1)) * 2
    stats = suffstat_increment(theta, x, y, np.ones(50)).scaled(1 / 50)
    free = m_step(stats, theta)
    pooled = m_step(stats, theta, AdaptationConfig(0, [], [], pooled=True))
    literal = m_step(stats, theta, AdaptationConfig(0, [], [], pooled=True, divide_pooled_by_d=True))
    resid = sum(free.experts[j].sigma * stats.p[j] for j in range(2))
    np.testing.assert_allclose(pooled.experts[0].sigma, resid / stats.p.sum())
    np.testing.assert_allclose(pooled.experts[1].sigma, pooled.experts[0].sigma)
    np.testing.assert_allclose(literal.experts[0].sigma, resid / 2)
    np.testing.assert_allclose(free.gating.weights, stats.p / stats.p.sum())


def test_dead_component_keeps_regression_and_gating(rng):
    theta = two_expert()
    x, y = rng.standard_normal((50, 1)), rng.standard_normal((50, 1))
    stats = suffstat_increment(theta, x, y, np.ones(50)).scaled(1 / 50)
    stats.p[1] = 1e-12
    stats.s1[1] *= 1e-12
    new = m_step(stats, theta)
    np.testing.assert_array_equal(new.experts[1].lam, theta.experts[1].lam)
    np.testing.assert_allclose(new.experts[1].sigma, new.experts[0].sigma)
    np.testing.assert_array_equal(new.gating.weights, theta.gating.weights)


def test_non_pd_covariance_resets(rng):
    theta = two_expert()
    x, y = rng.standard_normal((50, 1)), rng.standard_normal((50, 1))
    stats = suffstat_increment(theta, x, y, np.ones(50)).scaled(1 / 50)
    stats.s1[0] = -stats.s1[0]
    new = m_step(stats, theta)
    np.testing.assert_array_equal(new.experts[0].sigma, theta.experts[0].sigma)


# --- quadrature toy: exact EM behaviour ------------------------------------------


class Quad:
    def __init__(self):
        x, y, q = orc.toy_grid(120)
        self.batch = IsBatch(x[:, None], y[:, None], q)

    def draw(self, kernel, n, rng):
        return self.batch


def _toy_theta():
    return MixtureParams(
        ConstantGating(np.array([0.4, 0.6])),
        [ExpertParams(np.array([[0.3, 0.2]]), np.array([[0.2]])), ExpertParams(np.array([[0.8, -0.3]]), np.array([[0.5]]))],
    )


def _toy_adapt(iterations, step=1.0):
    src = Quad()
    cfg = AdaptationConfig(iterations, [src.batch.weights.size] * iterations, [step] * iterations)
    anc = WeightedSample.uniform(np.zeros((2, 1)))
    return src, adapt(_toy_theta(), anc, lambda a, c: orc.toy_log_kernel(a[:, 0], c[:, 0]), cfg, np.random.default_rng(0), source=src)


def test_mean_field_vanishes_at_fixed_point():
    src, (theta, _) = _toy_adapt(200)
    b = src.batch
    expect = lambda th: suffstat_increment(th, *b).scaled(1.0 / b.weights.sum())
    stats = expect(theta)
    assert mean_field_residual(theta, stats, expect) < 1e-6
    far = expect(_toy_theta())
    assert mean_field_residual(_toy_theta(), far, expect) > 1e-3


def test_small_steps_still_decrease_kld():
    src, (_, trace) = _toy_adapt(30, step=0.3)
    b = src.batch
    k = []
    for th in trace.thetas:
        th = MixtureParams.from_dict(th)
        e = th.experts
        p = orc.ToyParams(th.gating.weights, [x.lam[0, 0] for x in e], [x.lam[0, 1] for x in e], [x.sigma[0, 0] for x in e])
        k.append(orc.toy_kld(p, b.parents[:, 0], b.children[:, 0], b.weights))
    assert k[-1] < 0.1 * k[0]


# --- the full loop on the linear Gaussian model -----------------------------------


@pytest.fixture(scope="module")
def lg_setup():
    rng = np.random.default_rng(2)
    model = LinearGaussianMixtureModel()
    y = np.array([1.0, 0.0])
    anc = WeightedSample.uniform(model.initial_sample(5000, rng))
    return model, y, anc


def test_adapt_reduces_kld_and_traces(lg_setup):
    model, y, anc = lg_setup
    cfg = AdaptationConfig.build(8, 500, 1.0)
    diag = kld_callback(AuxiliaryProposalConfig(anc), model.log_kernel(y), 5000, np.random.default_rng(5))
    theta, trace = adapt(model.prior_mixture(), anc, model.log_kernel(y), cfg, np.random.default_rng(4), diagnostics=diag)
    assert len(trace.thetas) == len(trace.kld) == 9
    assert len(trace.ess) == len(trace.step_sizes) == 8
    assert trace.step_sizes[0] == 1.0
    assert trace.kld[-1] < 0.3 * trace.kld[0]
    d = AdaptationTrace(**{k: v for k, v in trace.to_dict().items()})
    assert d.to_json() == trace.to_json()


def test_anchored_and_newton_agree_for_unit_first_step(lg_setup):
    model, y, anc = lg_setup
    out = []
    for mode in ("newton", "anchored"):
        cfg = AdaptationConfig(1, [400], [1.0], gating_update=mode)
        th, _ = adapt(model.prior_mixture(), anc, model.log_kernel(y), cfg, np.random.default_rng(9))
        out.append(th.gating.beta)
    np.testing.assert_allclose(out[0], out[1], rtol=1e-8, atol=1e-10)


def test_adapt_is_reproducible(lg_setup):
    model, y, anc = lg_setup
    cfg = AdaptationConfig.build(3, 300, 0.5)
    a = adapt(model.prior_mixture(), anc, model.log_kernel(y), cfg, np.random.default_rng(1))[1]
    b = adapt(model.prior_mixture(), anc, model.log_kernel(y), cfg, np.random.default_rng(1))[1]
    assert a.to_json() == b.to_json()


def test_adapt_failure_carries_partial_trace(lg_setup):
    model, y, anc = lg_setup
    cfg = AdaptationConfig.build(3, 100, 0.5)
    with pytest.raises(AdaptationError) as err:
        adapt(model.prior_mixture(), anc, lambda a, c: np.full(len(a), -np.inf), cfg, np.random.default_rng(1))
    assert len(err.value.partial_trace.thetas) == 1
    assert err.value.theta is not None


def test_initial_fit_finds_clusters(rng):
    centres = np.array([[-5.0, 0.0], [5.0, 0.0]])
    y = np.vstack([c + 0.5 * rng.standard_normal((500, 2)) for c in centres])
    theta = initial_fit(y, np.ones(1000), 2, 3, rng)
    found = sorted(e.lam[:, -1][0] for e in theta.experts)
    np.testing.assert_allclose(found, [-5.0, 5.0], atol=0.2)
    assert theta.logistic and theta.dim_in == 3
    assert np.allclose(theta.experts[0].lam[:, :-1], 0.0)
    np.testing.assert_allclose(theta.experts[0].sigma, 0.25 * np.eye(2), atol=0.05)
    assert not initial_fit(y, np.ones(1000), 1, 3, rng).logistic


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6), logistic=st.booleans())
def test_m_step_output_is_valid(seed, logistic):
    rng = np.random.default_rng(seed)
    theta = two_expert(logistic=logistic, q=2, p=2)
    x, y = rng.standard_normal((60, 2)), 3 * rng.standard_normal((60, 2))
    w = rng.exponential(size=60)
    stats = robbins_monro_update(None, suffstat_increment(theta, x, y, w), w.sum(), 60, 1.0)
    new = m_step(stats, theta)
    for e in new.experts:
        assert np.all(np.linalg.eigvalsh(e.sigma) > 0)
        assert np.all(np.isfinite(e.lam))
    if logistic:
        assert np.linalg.norm(new.gating.beta - theta.gating.beta) <= 10.0 + 1e-9


def test_gating_modes_update_experts_identically(lg_setup):
    model, y, anc = lg_setup
    w = np.array([0.3, 0.7])
    experts = model.prior_mixture().experts
    const = MixtureParams(ConstantGating(w), experts)
    beta = np.array([[0.0, 0.0, np.log(w[0] / w[1])]])
    logit = MixtureParams(LogisticGating(beta), experts)
    cfg = AdaptationConfig(1, [500], [1.0])
    a, _ = adapt(const, anc, model.log_kernel(y), cfg, np.random.default_rng(6))
    b, _ = adapt(logit, anc, model.log_kernel(y), cfg, np.random.default_rng(6))
    for ea, eb in zip(a.experts, b.experts):
        np.testing.assert_allclose(ea.lam, eb.lam, rtol=0, atol=1e-10)
        np.testing.assert_allclose(ea.sigma, eb.sigma, rtol=0, atol=1e-10)
