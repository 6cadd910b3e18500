"""Shape-constrained Gaussian-process surrogates for user cost functions.

Each user's scalar cost is modelled with a squared-exponential GP fitted
to noisy point evaluations.  Convexity information is injected by
conditioning on the second derivative of the process at a fixed grid of
enforcement points, with the second-derivative values themselves
estimated as the mean of the GP posterior truncated to a curvature box
[gamma_u, l_u].  The truncated-normal mean is computed by Gibbs
sampling.

All conditioning is done through closed-form Gaussian identities; the
only stochastic piece is the Gibbs chain, which is seeded explicitly so
fits are reproducible.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import ndtr, ndtri

logger = logging.getLogger(__name__)

# Jitter ladder used when factorizing kernel systems.  Escalation is
# deterministic; only if the largest jitter still fails do we give up.
_JITTERS = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)


class SingularKernel(Exception):
    """Kernel system failed to factorize even after jitter escalation."""


class DegenerateTruncation(Exception):
    """Truncation box carries no numerical probability mass."""


@dataclass(frozen=True)
class KernelParams:
    """Squared-exponential hyperparameters plus observation noise.

    sigma_f : signal standard deviation
    ell     : length scale
    sigma_n : observation noise standard deviation (0 allowed)
    mu0     : constant prior mean of the cost
    """

    sigma_f: float
    ell: float
    sigma_n: float
    mu0: float = 0.0

    def __post_init__(self):
        if not (self.sigma_f > 0 and math.isfinite(self.sigma_f)):
            raise ValueError("sigma_f must be positive and finite")
        if not (self.ell > 0 and math.isfinite(self.ell)):
            raise ValueError("ell must be positive and finite")
        if not (self.sigma_n >= 0 and math.isfinite(self.sigma_n)):
            raise ValueError("sigma_n must be nonnegative and finite")


@dataclass(frozen=True)
class ShapeBounds:
    """Box [gamma_u, l_u] for the second derivative, 0 < gamma_u <= l_u."""

    gamma_u: float
    l_u: float

    def __post_init__(self):
        if not (0 < self.gamma_u <= self.l_u):
            raise ValueError(
                f"need 0 < gamma_u <= l_u, got [{self.gamma_u}, {self.l_u}]"
            )


@dataclass
class FeedbackSet:
    """Noisy cost evaluations (x_i, z_i) accumulated for one user."""

    points: list = field(default_factory=list)
    values: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.points) != len(self.values):
            raise ValueError("points and values must have equal length")
        self.points = [float(v) for v in self.points]
        self.values = [float(v) for v in self.values]

    def add(self, x, z):
        self.points.append(float(x))
        self.values.append(float(z))

    def __len__(self):
        return len(self.points)

    def as_arrays(self):
        return np.asarray(self.points, dtype=float), np.asarray(self.values, dtype=float)


# ---------------------------------------------------------------------------
# kernels

def se_kernel(x, x2, params):
    """Squared-exponential covariance k(x, x') between cost values."""
    r = np.subtract(x, x2)
    return params.sigma_f ** 2 * np.exp(-0.5 * (r / params.ell) ** 2)


def deriv_cov_22(x, x2, params):
    """Covariance between second derivatives, Cov(U''(x), U''(x')).

    Fourth derivative of the SE kernel; even in x - x'.  At x = x' this
    reduces to 3 sigma_f^2 / ell^4.
    """
    l2 = params.ell ** 2
    r2 = np.square(np.subtract(x, x2))
    poly = (r2 ** 2 / l2 ** 2 - 6.0 * r2 / l2 + 3.0) / l2 ** 2
    return params.sigma_f ** 2 * np.exp(-0.5 * r2 / l2) * poly


def deriv_cov_02(x, x2, params):
    """Cross covariance Cov(U(x), U''(x')).

    Second derivative of the SE kernel in its second argument; the result
    is even in x - x', so it also equals Cov(U''(x), U(x')).  At x = x'
    it reduces to -sigma_f^2 / ell^2.
    """
    l2 = params.ell ** 2
    r2 = np.square(np.subtract(x, x2))
    return params.sigma_f ** 2 * np.exp(-0.5 * r2 / l2) * (r2 / l2 ** 2 - 1.0 / l2)


def _gram(fn, a, b, params):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return fn(a[:, None], b[None, :], params)


# Virtual curvature observations carry a small synthetic noise, 5% of the
# prior curvature standard deviation sqrt(3) sigma_f / ell^2.  Smooth
# kernels make the curvature process nearly rank deficient on a dense
# enforcement grid; conditioning on exact values there is numerically
# explosive, while this nugget bounds the amplification and keeps the
# constraint enforced up to a negligible slack.
_CURV_NUGGET_FRAC = 0.05


def curvature_nugget(params):
    """Variance of the synthetic noise on virtual curvature observations."""
    sd = math.sqrt(3.0) * params.sigma_f / params.ell ** 2
    return (_CURV_NUGGET_FRAC * sd) ** 2


def _chol(mat):
    """Cholesky with deterministic jitter escalation.

    Returns (factor, jitter_used).  Raises SingularKernel when even the
    largest jitter leaves the matrix non positive definite (e.g. noise
    free duplicated inputs pushed beyond what regularization absorbs, or
    non-finite entries).
    """
    mat = np.asarray(mat, dtype=float)
    if not np.all(np.isfinite(mat)):
        raise SingularKernel("kernel matrix has non-finite entries")
    n = mat.shape[0]
    eye = np.eye(n)
    for jit in _JITTERS:
        try:
            fac = cho_factor(mat + jit * eye, lower=True)
        except np.linalg.LinAlgError:
            continue
        if jit > 0:
            logger.debug("kernel factorization needed jitter %.1e", jit)
        return fac, jit
    raise SingularKernel(
        f"matrix of size {n} not positive definite even with jitter {_JITTERS[-1]:.0e}"
    )


# ---------------------------------------------------------------------------
# model container

@dataclass
class GpModel:
    """GP surrogate state for one user.

    enforcement holds the grid where curvature is pinned; u2_estimate is
    populated by fit_surrogate.  With shape_constrained False the model
    falls back to the unconstrained posterior (used for ablations).
    """

    params: KernelParams
    bounds: ShapeBounds
    domain: tuple
    data: FeedbackSet = field(default_factory=FeedbackSet)
    enforcement: np.ndarray = None
    shape_constrained: bool = True
    n_samples: int = 500
    burn_in: int = 100
    delta: float = None
    u2_estimate: np.ndarray = None
    _cache: object = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        lo, hi = float(self.domain[0]), float(self.domain[1])
        if not lo < hi:
            raise ValueError(f"domain must satisfy lo < hi, got [{lo}, {hi}]")
        self.domain = (lo, hi)
        if self.enforcement is None:
            self.enforcement = np.linspace(lo, hi, 8)
        self.enforcement = np.asarray(self.enforcement, dtype=float)
        if self.enforcement.ndim != 1 or self.enforcement.size == 0:
            raise ValueError("enforcement grid must be a nonempty 1-d array")


def make_model(params, bounds, domain, q=8, shape_constrained=True,
               n_samples=500, burn_in=100, delta=None):
    """Convenience constructor with a uniform enforcement grid of q points."""
    grid = np.linspace(float(domain[0]), float(domain[1]), q)
    return GpModel(params=params, bounds=bounds, domain=tuple(domain),
                   enforcement=grid, shape_constrained=shape_constrained,
                   n_samples=n_samples, burn_in=burn_in, delta=delta)


# ---------------------------------------------------------------------------
# plain posterior

def gp_posterior(model, x_star):
    """Unconstrained GP posterior of the cost at x_star.

    Returns (mean, variance); arrays in, arrays out.  With no data the
    prior (mu0, sigma_f^2) is returned.
    """
    p = model.params
    scalar = np.isscalar(x_star)
    xs = np.atleast_1d(np.asarray(x_star, dtype=float))
    if len(model.data) == 0:
        mean = np.full(xs.shape, p.mu0)
        var = np.full(xs.shape, p.sigma_f ** 2)
    else:
        xp, z = model.data.as_arrays()
        K = _gram(se_kernel, xp, xp, p) + p.sigma_n ** 2 * np.eye(len(xp))
        fac, _ = _chol(K)
        w = cho_solve(fac, z - p.mu0)
        kx = _gram(se_kernel, xs, xp, p)
        mean = p.mu0 + kx @ w
        var = p.sigma_f ** 2 - np.sum(kx * cho_solve(fac, kx.T).T, axis=1)
        var = np.maximum(var, 0.0)
    if scalar:
        return float(mean[0]), float(var[0])
    return mean, var


def second_deriv_posterior(model):
    """Joint Gaussian posterior of the virtual curvature observations.

    Returns (mean_vec, cov) of U''(s) + nugget noise given the feedback
    data, before any truncation.  The prior mean of U'' is zero because
    the prior mean of U is the constant mu0; the nugget (curvature_nugget)
    keeps the covariance positive definite on dense enforcement grids.
    """
    if len(model.data) == 0:
        raise ValueError("second_deriv_posterior needs at least one data point")
    p = model.params
    s = model.enforcement
    xp, z = model.data.as_arrays()
    Kn = _gram(se_kernel, xp, xp, p) + p.sigma_n ** 2 * np.eye(len(xp))
    fac, _ = _chol(Kn)
    K20 = _gram(deriv_cov_02, s, xp, p)          # Cov(U''(s_i), U(x_j))
    mean = K20 @ cho_solve(fac, z - p.mu0)
    S = (_gram(deriv_cov_22, s, s, p) + curvature_nugget(p) * np.eye(len(s))
         - K20 @ cho_solve(fac, K20.T))
    return mean, 0.5 * (S + S.T)


# ---------------------------------------------------------------------------
# truncated-normal mean via Gibbs sampling

def _truncnorm_draw(m, sd, lo, hi, u):
    """One inverse-CDF draw from N(m, sd^2) truncated to [lo, hi].

    Uses complementary tail probabilities so boxes far out in either
    tail keep precision.  Raises DegenerateTruncation when the box mass
    underflows to zero.
    """
    a = (lo - m) / sd
    b = (hi - m) / sd
    if a > 0.0:
        # box in the upper tail: work with survival probabilities
        fa, fb = ndtr(-a), ndtr(-b)
        mass = fa - fb
        if not (mass > 0.0) or not np.isfinite(mass):
            raise DegenerateTruncation(
                f"no probability mass in box (z-scores [{a:.3g}, {b:.3g}])"
            )
        z = -ndtri(fa - u * mass)
    else:
        fa, fb = ndtr(a), ndtr(b)
        mass = fb - fa
        if not (mass > 0.0) or not np.isfinite(mass):
            raise DegenerateTruncation(
                f"no probability mass in box (z-scores [{a:.3g}, {b:.3g}])"
            )
        z = ndtri(fa + u * mass)
    return min(max(m + sd * z, lo), hi)


def truncated_second_deriv_mean(mean_vec, cov, bounds, seed, n_samples=500,
                                burn_in=100):
    """Mean of N(mean_vec, cov) truncated to the box [gamma_u, l_u]^q.

    Systematic-scan Gibbs sampling: each coordinate is redrawn from its
    univariate conditional (computed from the precision matrix) truncated
    to the box edge.  The returned vector is the average of n_samples
    states after burn_in sweeps, clipped to the box.
    """
    mean_vec = np.asarray(mean_vec, dtype=float)
    q = mean_vec.size
    cov = np.asarray(cov, dtype=float).reshape(q, q)
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    lo, hi = bounds.gamma_u, bounds.l_u
    if hi == lo:
        return np.full(q, lo)

    sym = 0.5 * (cov + cov.T)
    fac, _ = _chol(sym)
    prec = cho_solve(fac, np.eye(q))
    prec = 0.5 * (prec + prec.T)
    cond_sd = 1.0 / np.sqrt(np.diag(prec))

    rng = np.random.default_rng(seed)
    x = np.clip(mean_vec, lo, hi)
    dev = x - mean_vec
    acc = np.zeros(q)
    for sweep in range(burn_in + n_samples):
        for i in range(q):
            s = prec[i] @ dev - prec[i, i] * dev[i]
            m_i = mean_vec[i] - s / prec[i, i]
            x[i] = _truncnorm_draw(m_i, cond_sd[i], lo, hi, rng.uniform())
            dev[i] = x[i] - mean_vec[i]
        if sweep >= burn_in:
            acc += x
    return np.clip(acc / n_samples, lo, hi)


# ---------------------------------------------------------------------------
# constrained posterior

class _PriorCache:
    pass


@dataclass
class _PlainCache:
    xp: np.ndarray
    fac: object
    w: np.ndarray


@dataclass
class _ConstrainedCache:
    xp: np.ndarray
    fac_b1: object
    fac_22: object
    Q: np.ndarray      # K22^-1 K20(s, xp), q x p
    v: np.ndarray      # B1^-1 (z - mu0) - B1^-1 A1 u2, length p
    r: np.ndarray      # K22^-1 u2, length q


def fit_surrogate(model, seed):
    """Refit the surrogate from the current feedback set.

    For shape-constrained models this estimates U'' on the enforcement
    grid via the truncated posterior and caches the factorizations used
    by constrained_posterior_mean.  A degenerate truncation (posterior
    mass entirely outside the box) falls back to clipping the
    unconstrained second-derivative mean into the box.  Returns model.
    """
    p = model.params
    if len(model.data) == 0:
        model.u2_estimate = None
        model._cache = _PriorCache()
        return model
    xp, z = model.data.as_arrays()

    if not model.shape_constrained:
        Kn = _gram(se_kernel, xp, xp, p) + p.sigma_n ** 2 * np.eye(len(xp))
        fac, _ = _chol(Kn)
        model.u2_estimate = None
        model._cache = _PlainCache(xp=xp, fac=fac, w=cho_solve(fac, z - p.mu0))
        return model

    mvec, S = second_deriv_posterior(model)
    try:
        u2 = truncated_second_deriv_mean(mvec, S, model.bounds, seed,
                                         model.n_samples, model.burn_in)
    except DegenerateTruncation as exc:
        logger.warning("degenerate truncation (%s); clipping posterior mean", exc)
        u2 = np.clip(mvec, model.bounds.gamma_u, model.bounds.l_u)
    model.u2_estimate = u2

    s = model.enforcement
    K22 = (_gram(deriv_cov_22, s, s, p)
           + curvature_nugget(p) * np.eye(len(s)))
    fac22, _ = _chol(K22)
    K20 = _gram(deriv_cov_02, s, xp, p)
    Q = cho_solve(fac22, K20)
    B1 = (_gram(se_kernel, xp, xp, p) + p.sigma_n ** 2 * np.eye(len(xp))
          - K20.T @ Q)
    fac_b1, _ = _chol(B1)
    w1 = cho_solve(fac_b1, z - p.mu0)
    # cross term folds in as Q^T u2 because the kernel is even in x - x'
    v = w1 - cho_solve(fac_b1, Q.T @ u2)
    r = cho_solve(fac22, u2)
    model._cache = _ConstrainedCache(xp=xp, fac_b1=fac_b1, fac_22=fac22,
                                     Q=Q, v=v, r=r)
    return model


def constrained_posterior_mean(model, x_star, return_std=False):
    """Posterior mean of the cost given data and the curvature estimate.

    Conditions the GP jointly on the noisy evaluations and on the virtual
    curvature observations u2_estimate at the enforcement grid (nugget
    noise included).  Requires a prior call to fit_surrogate on a
    shape-constrained model with data.  With return_std=True also returns
    the pointwise posterior standard deviation.
    """
    cache = model._cache
    if not isinstance(cache, _ConstrainedCache):
        raise ValueError("model is not fitted with shape constraints; "
                         "call fit_surrogate on a shape_constrained model with data")
    p = model.params
    scalar = np.isscalar(x_star)
    xs = np.atleast_1d(np.asarray(x_star, dtype=float))
    kx = _gram(se_kernel, xs, cache.xp, p)
    k2 = _gram(deriv_cov_02, xs, model.enforcement, p)
    B3 = kx - k2 @ cache.Q
    mean = p.mu0 + B3 @ cache.v + k2 @ cache.r
    if not return_std:
        if scalar:
            return float(mean[0])
        return mean
    B2 = p.sigma_f ** 2 - np.sum(k2 * cho_solve(cache.fac_22, k2.T).T, axis=1)
    var = B2 - np.sum(B3 * cho_solve(cache.fac_b1, B3.T).T, axis=1)
    std = np.sqrt(np.maximum(var, 0.0))
    if scalar:
        return float(mean[0]), float(std[0])
    return mean, std


def surrogate_value(model, x):
    """Evaluate the fitted surrogate (dispatches on model flavour)."""
    cache = model._cache
    if cache is None:
        raise ValueError("call fit_surrogate before evaluating the surrogate")
    if isinstance(cache, _PriorCache):
        xs = np.atleast_1d(np.asarray(x, dtype=float))
        out = np.full(xs.shape, model.params.mu0)
        return float(out[0]) if np.isscalar(x) else out
    if isinstance(cache, _PlainCache):
        p = model.params
        scalar = np.isscalar(x)
        xs = np.atleast_1d(np.asarray(x, dtype=float))
        kx = _gram(se_kernel, xs, cache.xp, p)
        mean = p.mu0 + kx @ cache.w
        return float(mean[0]) if scalar else mean
    return constrained_posterior_mean(model, x)


def estimate_gradient(model, x, delta=None):
    """Two-point finite-difference gradient of the surrogate at x.

    The stencil has width delta (default 1e-2 of the domain width) and is
    shifted to stay inside the domain near the boundary, preserving its
    width.  With an empty feedback set the surrogate is the constant
    prior mean, so the gradient is exactly zero.
    """
    if len(model.data) == 0:
        return 0.0
    lo, hi = model.domain
    width = hi - lo
    d = delta if delta is not None else model.delta
    if d is None:
        d = 1e-2 * width
    if not (0 < d <= width):
        raise ValueError(f"stencil width {d} outside (0, {width}]")
    x = float(x)
    a = x - 0.5 * d
    b = x + 0.5 * d
    if a < lo:
        a, b = lo, lo + d
    elif b > hi:
        a, b = hi - d, hi
    vals = surrogate_value(model, np.array([a, b]))
    return float(vals[1] - vals[0]) / d


def snapshot(model):
    """JSON-ready dict capturing the model state (data, grid, estimates)."""
    xp, z = model.data.as_arrays()
    return {
        "params": {"sigma_f": model.params.sigma_f, "ell": model.params.ell,
                   "sigma_n": model.params.sigma_n, "mu0": model.params.mu0},
        "bounds": {"gamma_u": model.bounds.gamma_u, "l_u": model.bounds.l_u},
        "domain": list(model.domain),
        "points": xp.tolist(),
        "values": z.tolist(),
        "enforcement": model.enforcement.tolist(),
        "u2_estimate": None if model.u2_estimate is None else model.u2_estimate.tolist(),
        "shape_constrained": model.shape_constrained,
    }
