"""Independent reference computations used by the test suite.

Nothing here imports the package's EM or density code; the helpers are
written directly from textbook formulas so they can serve as oracles.
"""

from __future__ import annotations

import numpy as np
from scipy.special import roots_hermitenorm

# 1-D toy: ancestors N(0, 1), kernel l(x, x') = N(x'; A x, S^2)
TOY_A = 0.5
TOY_S = 0.3


def toy_grid(n: int = 400):
    """Tensor Gauss-Hermite rule for the toy auxiliary target.

    Returns ancestor nodes, child nodes and probability weights; the child
    node is ``A x + S z`` so the rule integrates exactly against the
    normalised target ``N(x; 0, 1) l(x, x')``.
    """
    nodes, w = roots_hermitenorm(n)
    w = w / w.sum()
    x, z = np.meshgrid(nodes, nodes, indexing="ij")
    q = np.outer(w, w).ravel()
    x = x.ravel()
    y = TOY_A * x + TOY_S * z.ravel()
    keep = q > 0
    return x[keep], y[keep], q[keep]


def toy_log_kernel(x, y):
    return -0.5 * ((y - TOY_A * x) / TOY_S) ** 2 - np.log(TOY_S * np.sqrt(2 * np.pi))


class ToyParams:
    """Two-component constant-gating 1-D regression mixture (plain arrays)."""

    def __init__(self, w, a, b, s2):
        self.w = np.asarray(w, float)
        self.a = np.asarray(a, float)
        self.b = np.asarray(b, float)
        self.s2 = np.asarray(s2, float)

    def comp_logpdf(self, x, y):
        resid = y[:, None] - (self.a[None, :] * x[:, None] + self.b[None, :])
        return (
            -0.5 * resid**2 / self.s2[None, :]
            - 0.5 * np.log(2 * np.pi * self.s2)[None, :]
            + np.log(self.w)[None, :]
        )

    def log_r(self, x, y):
        c = self.comp_logpdf(x, y)
        m = c.max(axis=1, keepdims=True)
        return (m + np.log(np.exp(c - m).sum(axis=1, keepdims=True))).ravel()

    def vector(self):
        return np.concatenate([self.w, self.a, self.b, self.s2])


def batch_em_step(p: ToyParams, x, y, q) -> ToyParams:
    """Exact (quadrature) EM update for the toy mixture."""
    c = p.comp_logpdf(x, y)
    c -= c.max(axis=1, keepdims=True)
    r = np.exp(c)
    r /= r.sum(axis=1, keepdims=True)
    qr = q[:, None] * r
    mass = qr.sum(axis=0)
    w, a, b, s2 = mass / mass.sum(), [], [], []
    for j in range(len(mass)):
        X = np.column_stack([x, np.ones_like(x)])
        W = qr[:, j]
        coef = np.linalg.solve(X.T @ (W[:, None] * X), X.T @ (W * y))
        res = y - X @ coef
        a.append(coef[0])
        b.append(coef[1])
        s2.append(np.sum(W * res**2) / mass[j])
    return ToyParams(w, a, b, s2)


def toy_kld(p: ToyParams, x, y, q) -> float:
    """KL divergence between the toy target and ``N(x) r(x, x')``."""
    return float(np.sum(q * (toy_log_kernel(x, y) - p.log_r(x, y))))


# Student-t scale mixture by direct one-dimensional quadrature


def t_density_by_quadrature(resid, sigma, nu):
    """Integrate N(resid; 0, sigma/u) Gamma(u; nu/2, rate nu/2) over u."""
    from scipy import integrate
    from scipy.stats import gamma, multivariate_normal

    def f(u):
        return multivariate_normal.pdf(resid, cov=sigma / u) * gamma.pdf(u, 0.5 * nu, scale=2.0 / nu)

    val, _ = integrate.quad(f, 0, np.inf, epsabs=0, epsrel=1e-12, limit=200)
    return val


def t_u_mean_by_quadrature(resid, sigma, nu):
    from scipy import integrate
    from scipy.stats import gamma, multivariate_normal

    def f(u, k):
        return u**k * multivariate_normal.pdf(resid, cov=sigma / u) * gamma.pdf(u, 0.5 * nu, scale=2.0 / nu)

    num, _ = integrate.quad(f, 0, np.inf, args=(1,), epsabs=0, epsrel=1e-12, limit=200)
    den, _ = integrate.quad(f, 0, np.inf, args=(0,), epsabs=0, epsrel=1e-12, limit=200)
    return num / den


def gaussian_objective(s1, s2, s3, p, weights, lams, sigmas) -> float:
    """Expected complete-data log-likelihood of a constant-gating Gaussian MoE.

    Written in exponential-family form: per component
    ``p log w - p/2 log|S| + <-S^-1/2, s1> + <-L' S^-1 L/2, s2> + <S^-1 L, s3>``.
    """
    total = 0.0
    for j in range(len(p)):
        prec = np.linalg.inv(sigmas[j])
        L = lams[j]
        total += p[j] * np.log(weights[j])
        total -= 0.5 * p[j] * np.linalg.slogdet(sigmas[j])[1]
        total += np.sum(-0.5 * prec * s1[j])
        total += np.sum(-0.5 * (L.T @ prec @ L) * s2[j])
        total += np.sum((prec @ L) * s3[j])
    return float(total)
