"""
Jump-diffusion model specifications, parameter spaces, built-in reference models
and assumption validation.

A model is dX_t = a(X_t, θ)dt + b(X_t, σ)dW_t + ∫ z N_θ(dt, dz) with a finite
jump intensity λ(θ) and jump density F_θ, so that f_θ = λ(θ)·F_θ.
All coefficient functions are vectorized over a leading axis of states.
"""
import math
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import integrate, stats

from .errors import ModelValidationError, UnsupportedModeError

logger = logging.getLogger(__name__)

EPS = np.finfo(float).eps
SUPPORT_KINDS = ("full", "positive", "negative", "full_nonzero")


def fd_step(value, order=3):
    """
    Power-of-two central difference step for a coordinate.

    order=3 gives the ε_mach^{1/3} step used for first derivatives,
    order=4 the ε_mach^{1/4} step used for Hessians.
    """
    scale = EPS ** (1.0 / order) * max(1.0, abs(float(value)))
    return 2.0 ** math.ceil(math.log2(scale))


def central_gradient(func, point, order=3):
    """Central finite-difference gradient of a scalar or array valued function."""
    point = np.asarray(point, dtype=float)
    columns = []
    for i in range(point.size):
        step = fd_step(point[i], order)
        up = point.copy()
        down = point.copy()
        up[i] += step
        down[i] -= step
        columns.append((np.asarray(func(up)) - np.asarray(func(down))) / (2.0 * step))
    return np.stack(columns, axis=-1)


@dataclass(frozen=True, eq=False)
class ParamVector:
    """α = (σ, θ): diffusion parameters first, drift and jump parameters second."""
    sigma: np.ndarray
    theta: np.ndarray

    def __post_init__(self):
        sigma = np.atleast_1d(np.asarray(self.sigma, dtype=float))
        theta = np.atleast_1d(np.asarray(self.theta, dtype=float))
        if sigma.size < 1 or theta.size < 1:
            raise ModelValidationError("Both parameter blocks need at least one coordinate")
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "theta", theta)

    @property
    def d1(self):
        return self.sigma.size

    @property
    def d2(self):
        return self.theta.size

    @property
    def alpha(self):
        return np.concatenate([self.sigma, self.theta])

    @classmethod
    def from_alpha(cls, alpha, d1):
        alpha = np.asarray(alpha, dtype=float)
        return cls(sigma=alpha[:d1], theta=alpha[d1:])

    def to_list(self):
        return [float(v) for v in self.alpha]

    def __repr__(self):
        return f"ParamVector(sigma={self.sigma.tolist()}, theta={self.theta.tolist()})"


@dataclass(frozen=True, eq=False)
class ParamSpace:
    """Open box approximating Θ₁ × Θ₂; positive coordinates optimize on a log scale."""
    lower: np.ndarray
    upper: np.ndarray
    positive: np.ndarray

    def __post_init__(self):
        lower = np.asarray(self.lower, dtype=float)
        upper = np.asarray(self.upper, dtype=float)
        positive = np.asarray(self.positive, dtype=bool)
        if not (lower.shape == upper.shape == positive.shape):
            raise ModelValidationError("Parameter space bounds and flags must have equal length")
        if np.any(lower >= upper):
            raise ModelValidationError("Parameter space needs lower < upper in every coordinate")
        if np.any(lower[positive] < 0):
            raise ModelValidationError("Positive coordinates need a non-negative lower bound")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        object.__setattr__(self, "positive", positive)

    @property
    def dim(self):
        return self.lower.size

    @property
    def width(self):
        return self.upper - self.lower

    def contains(self, alpha):
        alpha = np.asarray(alpha, dtype=float)
        return bool(alpha.shape == self.lower.shape
                    and np.all(np.isfinite(alpha))
                    and np.all(alpha > self.lower)
                    and np.all(alpha < self.upper))

    def boundary_proximity(self, alpha, fraction=1e-6):
        """Coordinates closer than `fraction` of the box width to a bound."""
        alpha = np.asarray(alpha, dtype=float)
        tol = fraction * self.width
        return (alpha - self.lower < tol) | (self.upper - alpha < tol)

    def to_unconstrained(self, alpha):
        alpha = np.asarray(alpha, dtype=float)
        return np.where(self.positive, np.log(np.where(self.positive, alpha, 1.0)), alpha)

    def from_unconstrained(self, z):
        z = np.asarray(z, dtype=float)
        return np.where(self.positive, np.exp(np.where(self.positive, z, 0.0)), z)

    def unconstrained_bounds(self):
        lo = np.where(self.positive, np.log(np.maximum(self.lower, 1e-300)), self.lower)
        hi = np.where(self.positive, np.log(self.upper), self.upper)
        return lo, hi


@dataclass(frozen=True)
class RateSchedule:
    """Observation design: n observations with step h_n, optionally h_n = c·n^{-β}."""
    n: int
    h_n: float
    beta: Optional[float] = None
    c: Optional[float] = None

    def __post_init__(self):
        if self.n < 1:
            raise ModelValidationError(f"Observation count must be positive, got {self.n}")
        if not self.h_n > 0:
            raise ModelValidationError(f"Step size must be positive, got {self.h_n}")

    @classmethod
    def from_beta(cls, n, beta, c=1.0):
        return cls(n=int(n), h_n=float(c) * float(n) ** (-float(beta)), beta=float(beta), c=float(c))

    @property
    def horizon(self):
        return self.n * self.h_n

    def epsilon(self, d1, d2):
        """Diagonal of ε_n = diag(n^{-1/2} I_{d1}, (n h_n)^{-1/2} I_{d2})."""
        return np.concatenate([np.full(d1, self.n ** -0.5), np.full(d2, self.horizon ** -0.5)])

    def balance_value(self, eta, m, gamma):
        return self.n ** (1.0 + eta) * self.h_n ** balance_rate_exponent(m, gamma)

    @classmethod
    def balance_sequence(cls, n_values, beta, c, eta, m, gamma):
        """n^{1+η} h_n^{1+((m+γ)/2)∧1} along a schedule, in increasing n."""
        return [cls.from_beta(n, beta, c).balance_value(eta, m, gamma) for n in sorted(n_values)]


def balance_rate_exponent(m, gamma):
    """Exponent 1 + ((m+γ)/2 ∧ 1) of h_n in the balance condition."""
    return 1.0 + min((m + gamma) / 2.0, 1.0)


def check_balance_condition(n_values, beta, c, m, gamma, eta):
    """True when the balance quantity strictly decreases along the schedule."""
    values = RateSchedule.balance_sequence(n_values, beta, c, eta, m, gamma)
    return all(b < a for a, b in zip(values, values[1:]))


def admissible_rho(beta, m, gamma):
    """
    Interval of threshold exponents ρ ∈ (1/4, 1/2) for which n·h_n^{1+(m+γ)ρ} → 0
    along h_n = c·n^{-β}; None when empty.
    """
    lower = 0.25
    if m + gamma > 0:
        lower = max(lower, (1.0 / beta - 1.0) / (m + gamma))
    if lower >= 0.5:
        return None
    return lower, 0.5


@dataclass(frozen=True)
class JumpSupport:
    """Support descriptor of F_θ for m = 1 models."""
    kind: str = "full"

    def __post_init__(self):
        if self.kind not in SUPPORT_KINDS:
            raise ModelValidationError(f"Unknown jump support kind: {self.kind}")

    @property
    def breakpoints(self):
        return (0.0,) if self.kind != "full" else ()

    def pieces(self):
        """Integration pieces of E restricted to the support."""
        if self.kind == "positive":
            return [(0.0, np.inf)]
        if self.kind == "negative":
            return [(-np.inf, 0.0)]
        if self.kind == "full_nonzero":
            return [(-np.inf, 0.0), (0.0, np.inf)]
        return [(-np.inf, 0.0), (0.0, np.inf)]


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """
    Immutable jump-diffusion model.

    Coefficient callables take states of shape (N, m):
      drift(x, θ) -> (N, m), diffusion(x, σ) -> (N, m, m),
      jump_logpdf(z, θ) -> (N,) with -inf outside supp F_θ.
    Optional analytic hooks fall back to central differences when absent.
    """
    kind: str
    m: int
    d1: int
    d2: int
    param_names: tuple
    drift: Callable
    diffusion: Callable
    intensity: Callable
    jump_logpdf: Callable
    jump_sampler: Callable
    space: ParamSpace
    alpha0: ParamVector
    gamma_exponent: float = 0.0
    c2: float = 1.0
    support: JumpSupport = field(default_factory=JumpSupport)
    drift_dtheta: Optional[Callable] = None
    drift_dx: Optional[Callable] = None
    diffusion_dsigma: Optional[Callable] = None
    intensity_dtheta: Optional[Callable] = None
    jump_dlogf: Optional[Callable] = None
    jump_range: Optional[Callable] = None
    jump_fisher: Optional[Callable] = None
    jump_moments: Optional[Callable] = None
    exact_continuous: Optional[Callable] = None
    has_exact_density: bool = False
    ergodic: bool = False
    fixed: dict = field(default_factory=dict)
    builder_params: dict = field(default_factory=dict)

    @property
    def d(self):
        return self.d1 + self.d2

    @property
    def has_analytic_derivatives(self):
        return None not in (self.drift_dtheta, self.diffusion_dsigma,
                            self.intensity_dtheta, self.jump_dlogf)

    def split(self, alpha):
        alpha = np.asarray(alpha, dtype=float)
        return alpha[:self.d1], alpha[self.d1:]

    def covariance(self, x, sigma):
        """S(x, σ) = b(x, σ)² for symmetric b."""
        b = self.diffusion(x, sigma)
        return b @ b

    def drift_jacobian(self, x, theta):
        """∂_θ a(x, θ) with shape (N, m, d2)."""
        if self.drift_dtheta is not None:
            return self.drift_dtheta(x, theta)
        return central_gradient(lambda t: self.drift(x, t), theta)

    def covariance_jacobian(self, x, sigma):
        """∂_σ S(x, σ) with shape (N, m, m, d1)."""
        if self.diffusion_dsigma is not None:
            b = self.diffusion(x, sigma)
            db = self.diffusion_dsigma(x, sigma)
            return np.einsum("nikd,nkj->nijd", db, b) + np.einsum("nik,nkjd->nijd", b, db)
        return central_gradient(lambda s: self.covariance(x, s), sigma)

    def intensity_gradient(self, theta):
        if self.intensity_dtheta is not None:
            return np.asarray(self.intensity_dtheta(theta), dtype=float)
        return central_gradient(lambda t: np.asarray(self.intensity(t), dtype=float), theta)

    def log_jump_density(self, z, theta):
        """log f_θ(z) = log λ(θ) + log F_θ(z); -inf where f_θ vanishes."""
        lam = float(self.intensity(theta))
        logf = self.jump_logpdf(z, theta)
        if lam <= 0.0:
            return np.full_like(logf, -np.inf)
        return logf + math.log(lam)

    def jump_score(self, z, theta):
        """∂_θ log f_θ(z), shape (N, d2); zero where f_θ(z) = 0."""
        mask = np.isfinite(self.log_jump_density(z, theta))
        if self.jump_dlogf is not None:
            score = np.asarray(self.jump_dlogf(z, theta), dtype=float)
        else:
            def finite_logf(t):
                return np.where(mask, self.log_jump_density(z, t), 0.0)
            score = central_gradient(finite_logf, theta)
        return np.where(mask[:, None], score, 0.0)

    def stationary_moments(self, alpha):
        """Mean and variance of the stationary law of the OU-drift built-ins."""
        if not self.ergodic or self.jump_moments is None:
            raise UnsupportedModeError(f"Model '{self.kind}' exposes no stationary moments")
        sigma, theta = self.split(alpha)
        lam = float(self.intensity(theta))
        ez, ez2 = self.jump_moments(theta)
        mean = lam * ez / theta[0]
        var = (sigma[0] ** 2 + lam * ez2) / (2.0 * theta[0])
        return mean, var

    def default_x0(self, alpha=None):
        if self.ergodic and self.jump_moments is not None:
            alpha = self.alpha0.alpha if alpha is None else alpha
            return np.array([self.stationary_moments(alpha)[0]])
        return np.zeros(self.m)

    def to_document(self):
        return {"kind": self.kind, "params": dict(self.builder_params)}


# ---------------------------------------------------------------------------
# Built-in scalar models
# ---------------------------------------------------------------------------

def _require(condition, message):
    if not condition:
        raise ModelValidationError(message)


def _constant_diffusion(x, sigma):
    return np.full((x.shape[0], 1, 1), sigma[0])


def _constant_diffusion_dsigma(x, sigma):
    return np.ones((x.shape[0], 1, 1, 1))


def _ou_drift(x, theta):
    return -theta[0] * x


def _ou_drift_dx(x, theta):
    return np.full((x.shape[0], 1, 1), -theta[0])


def _ou_exact_continuous(x_prev, x, t, alpha):
    sigma, mean_rev = alpha[0], alpha[1]
    mean = x_prev * math.exp(-mean_rev * t)
    var = sigma ** 2 * -math.expm1(-2.0 * mean_rev * t) / (2.0 * mean_rev)
    return stats.norm.pdf(x, loc=mean, scale=math.sqrt(var))


def _positive_box(value):
    return (min(1e-4, value / 10.0), max(1e3, value * 10.0))


def _free_box(value):
    return (min(-1e3, value - 1e3), max(1e3, value + 1e3))


def _space(values, positive):
    bounds = [_positive_box(v) if p else _free_box(v) for v, p in zip(values, positive)]
    return ParamSpace(lower=[b[0] for b in bounds], upper=[b[1] for b in bounds], positive=positive)


def _normal_jump_hooks(jump_sd, mean_index):
    """Normal(θ[mean_index], s²) jump law with fixed s."""

    def logpdf(z, theta):
        return stats.norm.logpdf(z[:, 0], loc=theta[mean_index], scale=jump_sd)

    def dlogf(z, theta):
        score = np.zeros((z.shape[0], theta.size))
        score[:, mean_index] = (z[:, 0] - theta[mean_index]) / jump_sd ** 2
        return score

    def sampler(rng, size, theta):
        return rng.normal(theta[mean_index], jump_sd, size=(size, 1))

    def jump_range(theta, tail):
        half = stats.norm.isf(tail / 2.0) * jump_sd
        return theta[mean_index] - half, theta[mean_index] + half

    def moments(theta):
        mu = theta[mean_index]
        return mu, mu ** 2 + jump_sd ** 2

    return logpdf, dlogf, sampler, jump_range, moments


def builtin_merton(drift_level, sigma, lam, jump_mean, jump_sd):
    """
    Constant-coefficient Merton model: a = θ₁, b = σ, Normal(μ, s²) jumps.

    θ = (drift_level, jump_mean); λ and s are fixed. The exact transition
    density is a Poisson mixture of Gaussians.
    """
    _require(sigma > 0, f"sigma must be positive, got {sigma}")
    _require(jump_sd > 0, f"jump_sd must be positive, got {jump_sd}")
    _require(lam >= 0, f"lambda must be non-negative, got {lam}")
    logpdf, dlogf, sampler, jump_range, moments = _normal_jump_hooks(jump_sd, 1)

    def drift(x, theta):
        return np.full_like(x, theta[0])

    def drift_dtheta(x, theta):
        jac = np.zeros((x.shape[0], 1, 2))
        jac[:, 0, 0] = 1.0
        return jac

    def exact_continuous(x_prev, x, t, alpha):
        return stats.norm.pdf(x, loc=x_prev + alpha[1] * t, scale=alpha[0] * math.sqrt(t))

    alpha0 = ParamVector(sigma=[sigma], theta=[drift_level, jump_mean])
    return ModelSpec(
        kind="merton", m=1, d1=1, d2=2,
        param_names=("sigma", "drift_level", "jump_mean"),
        drift=drift, diffusion=_constant_diffusion,
        intensity=lambda theta: lam, jump_logpdf=logpdf, jump_sampler=sampler,
        space=_space(alpha0.alpha, [True, False, False]), alpha0=alpha0,
        gamma_exponent=0.0, c2=4.0 * max(sigma, 1.0 / sigma),
        drift_dtheta=drift_dtheta, drift_dx=lambda x, theta: np.zeros((x.shape[0], 1, 1)),
        diffusion_dsigma=_constant_diffusion_dsigma,
        intensity_dtheta=lambda theta: np.zeros(2), jump_dlogf=dlogf, jump_range=jump_range,
        jump_fisher=lambda theta: np.diag([0.0, lam / jump_sd ** 2]),
        exact_continuous=exact_continuous, has_exact_density=True, ergodic=False,
        fixed={"lambda": lam, "jump_sd": jump_sd},
        builder_params={"drift_level": drift_level, "sigma": sigma, "lambda": lam,
                        "jump_mean": jump_mean, "jump_sd": jump_sd},
    )


def builtin_ou_jump(mean_rev, sigma, lam, jump_mean, jump_sd):
    """Ergodic OU model with Normal jumps: a = -θ₁x, b = σ, θ = (θ₁, jump_mean)."""
    _require(mean_rev > 0, f"mean_rev must be positive for ergodicity, got {mean_rev}")
    _require(sigma > 0, f"sigma must be positive, got {sigma}")
    _require(jump_sd > 0, f"jump_sd must be positive, got {jump_sd}")
    _require(lam >= 0, f"lambda must be non-negative, got {lam}")
    logpdf, dlogf, sampler, jump_range, moments = _normal_jump_hooks(jump_sd, 1)

    def drift_dtheta(x, theta):
        jac = np.zeros((x.shape[0], 1, 2))
        jac[:, 0, 0] = -x[:, 0]
        return jac

    alpha0 = ParamVector(sigma=[sigma], theta=[mean_rev, jump_mean])
    return ModelSpec(
        kind="ou_jump", m=1, d1=1, d2=2,
        param_names=("sigma", "mean_rev", "jump_mean"),
        drift=_ou_drift, diffusion=_constant_diffusion,
        intensity=lambda theta: lam, jump_logpdf=logpdf, jump_sampler=sampler,
        space=_space(alpha0.alpha, [True, True, False]), alpha0=alpha0,
        gamma_exponent=0.0, c2=4.0 * max(sigma, 1.0 / sigma),
        drift_dtheta=drift_dtheta, drift_dx=_ou_drift_dx,
        diffusion_dsigma=_constant_diffusion_dsigma,
        intensity_dtheta=lambda theta: np.zeros(2), jump_dlogf=dlogf, jump_range=jump_range,
        jump_fisher=lambda theta: np.diag([0.0, lam / jump_sd ** 2]),
        jump_moments=moments, exact_continuous=_ou_exact_continuous,
        has_exact_density=False, ergodic=True,
        fixed={"lambda": lam, "jump_sd": jump_sd},
        builder_params={"mean_rev": mean_rev, "sigma": sigma, "lambda": lam,
                        "jump_mean": jump_mean, "jump_sd": jump_sd},
    )


def builtin_gamma_jump(mean_rev, sigma, lam, gamma_scale, gamma_shape_fixed):
    """
    Ergodic OU model with one-sided Gamma(shape, scale) jumps.

    The shape is fixed (a parametrized shape breaks the log-density growth
    condition at z → 0); θ = (θ₁, scale) and γ = shape - 1.
    """
    shape = float(gamma_shape_fixed)
    _require(shape >= 1, f"gamma_shape_fixed must be >= 1, got {shape}")
    _require(gamma_scale > 0, f"gamma_scale must be positive, got {gamma_scale}")
    _require(mean_rev > 0, f"mean_rev must be positive for ergodicity, got {mean_rev}")
    _require(sigma > 0, f"sigma must be positive, got {sigma}")
    _require(lam >= 0, f"lambda must be non-negative, got {lam}")

    def logpdf(z, theta):
        z1 = z[:, 0]
        out = np.full(z1.shape, -np.inf)
        pos = z1 > 0
        out[pos] = stats.gamma.logpdf(z1[pos], a=shape, scale=theta[1])
        return out

    def dlogf(z, theta):
        z1 = z[:, 0]
        score = np.zeros((z1.size, 2))
        score[:, 1] = np.where(z1 > 0, -shape / theta[1] + z1 / theta[1] ** 2, 0.0)
        return score

    def sampler(rng, size, theta):
        return rng.gamma(shape, theta[1], size=(size, 1))

    def drift_dtheta(x, theta):
        jac = np.zeros((x.shape[0], 1, 2))
        jac[:, 0, 0] = -x[:, 0]
        return jac

    alpha0 = ParamVector(sigma=[sigma], theta=[mean_rev, gamma_scale])
    return ModelSpec(
        kind="gamma_jump", m=1, d1=1, d2=2,
        param_names=("sigma", "mean_rev", "gamma_scale"),
        drift=_ou_drift, diffusion=_constant_diffusion,
        intensity=lambda theta: lam, jump_logpdf=logpdf, jump_sampler=sampler,
        space=_space(alpha0.alpha, [True, True, True]), alpha0=alpha0,
        gamma_exponent=shape - 1.0, c2=4.0 * max(sigma, 1.0 / sigma),
        support=JumpSupport("positive"),
        drift_dtheta=drift_dtheta, drift_dx=_ou_drift_dx,
        diffusion_dsigma=_constant_diffusion_dsigma,
        intensity_dtheta=lambda theta: np.zeros(2), jump_dlogf=dlogf,
        jump_range=lambda theta, tail: (0.0, stats.gamma.isf(tail, a=shape, scale=theta[1])),
        jump_fisher=lambda theta: np.diag([0.0, lam * shape / theta[1] ** 2]),
        jump_moments=lambda theta: (shape * theta[1], shape * (shape + 1.0) * theta[1] ** 2),
        exact_continuous=_ou_exact_continuous, ergodic=True,
        fixed={"lambda": lam, "gamma_shape_fixed": shape},
        builder_params={"mean_rev": mean_rev, "sigma": sigma, "lambda": lam,
                        "gamma_scale": gamma_scale, "gamma_shape_fixed": shape},
    )


def builtin_two_sided_gamma_jump(mean_rev, sigma, lam, scale_pos, scale_neg,
                                 shape_pos_fixed=1.0, shape_neg_fixed=1.0, p_pos=0.5):
    """
    Ergodic OU model with two-sided Gamma jumps.

    Jumps are +Gamma(k₊, s₊) with probability p₊ and -Gamma(k₋, s₋) otherwise;
    θ = (θ₁, s₊, s₋) and γ = min(k₊, k₋) - 1.
    """
    k_pos, k_neg = float(shape_pos_fixed), float(shape_neg_fixed)
    _require(k_pos >= 1 and k_neg >= 1, "two-sided Gamma shapes must be >= 1")
    _require(scale_pos > 0 and scale_neg > 0, "two-sided Gamma scales must be positive")
    _require(0 < p_pos < 1, f"p_pos must lie in (0, 1), got {p_pos}")
    _require(mean_rev > 0, f"mean_rev must be positive for ergodicity, got {mean_rev}")
    _require(sigma > 0, f"sigma must be positive, got {sigma}")
    _require(lam >= 0, f"lambda must be non-negative, got {lam}")
    log_p, log_q = math.log(p_pos), math.log1p(-p_pos)

    def logpdf(z, theta):
        z1 = z[:, 0]
        out = np.full(z1.shape, -np.inf)
        pos, neg = z1 > 0, z1 < 0
        out[pos] = log_p + stats.gamma.logpdf(z1[pos], a=k_pos, scale=theta[1])
        out[neg] = log_q + stats.gamma.logpdf(-z1[neg], a=k_neg, scale=theta[2])
        return out

    def dlogf(z, theta):
        z1 = z[:, 0]
        score = np.zeros((z1.size, 3))
        score[:, 1] = np.where(z1 > 0, -k_pos / theta[1] + z1 / theta[1] ** 2, 0.0)
        score[:, 2] = np.where(z1 < 0, -k_neg / theta[2] - z1 / theta[2] ** 2, 0.0)
        return score

    def sampler(rng, size, theta):
        up = rng.random(size) < p_pos
        g_pos = rng.gamma(k_pos, theta[1], size=size)
        g_neg = rng.gamma(k_neg, theta[2], size=size)
        return np.where(up, g_pos, -g_neg)[:, None]

    def drift_dtheta(x, theta):
        jac = np.zeros((x.shape[0], 1, 3))
        jac[:, 0, 0] = -x[:, 0]
        return jac

    def jump_range(theta, tail):
        return (-stats.gamma.isf(tail, a=k_neg, scale=theta[2]),
                stats.gamma.isf(tail, a=k_pos, scale=theta[1]))

    def jump_fisher(theta):
        return np.diag([0.0, lam * p_pos * k_pos / theta[1] ** 2,
                        lam * (1.0 - p_pos) * k_neg / theta[2] ** 2])

    def moments(theta):
        ez = p_pos * k_pos * theta[1] - (1.0 - p_pos) * k_neg * theta[2]
        ez2 = (p_pos * k_pos * (k_pos + 1.0) * theta[1] ** 2
               + (1.0 - p_pos) * k_neg * (k_neg + 1.0) * theta[2] ** 2)
        return ez, ez2

    alpha0 = ParamVector(sigma=[sigma], theta=[mean_rev, scale_pos, scale_neg])
    return ModelSpec(
        kind="two_sided_gamma_jump", m=1, d1=1, d2=3,
        param_names=("sigma", "mean_rev", "scale_pos", "scale_neg"),
        drift=_ou_drift, diffusion=_constant_diffusion,
        intensity=lambda theta: lam, jump_logpdf=logpdf, jump_sampler=sampler,
        space=_space(alpha0.alpha, [True, True, True, True]), alpha0=alpha0,
        gamma_exponent=min(k_pos, k_neg) - 1.0, c2=4.0 * max(sigma, 1.0 / sigma),
        support=JumpSupport("full_nonzero"),
        drift_dtheta=drift_dtheta, drift_dx=_ou_drift_dx,
        diffusion_dsigma=_constant_diffusion_dsigma,
        intensity_dtheta=lambda theta: np.zeros(3), jump_dlogf=dlogf, jump_range=jump_range,
        jump_fisher=jump_fisher, jump_moments=moments,
        exact_continuous=_ou_exact_continuous, ergodic=True,
        fixed={"lambda": lam, "shape_pos_fixed": k_pos, "shape_neg_fixed": k_neg, "p_pos": p_pos},
        builder_params={"mean_rev": mean_rev, "sigma": sigma, "lambda": lam,
                        "scale_pos": scale_pos, "scale_neg": scale_neg,
                        "shape_pos_fixed": k_pos, "shape_neg_fixed": k_neg, "p_pos": p_pos},
    )


BUILDERS = {
    "merton": (builtin_merton, ("drift_level", "sigma", "lambda", "jump_mean", "jump_sd")),
    "ou_jump": (builtin_ou_jump, ("mean_rev", "sigma", "lambda", "jump_mean", "jump_sd")),
    "gamma_jump": (builtin_gamma_jump, ("mean_rev", "sigma", "lambda", "gamma_scale", "gamma_shape_fixed")),
    "two_sided_gamma_jump": (builtin_two_sided_gamma_jump,
                             ("mean_rev", "sigma", "lambda", "scale_pos", "scale_neg",
                              "shape_pos_fixed", "shape_neg_fixed", "p_pos")),
}
OPTIONAL_FIELDS = {"two_sided_gamma_jump": {"shape_pos_fixed", "shape_neg_fixed", "p_pos"}}


def load_model_document(document):
    """
    Build a model from {"kind": ..., "params": {...}}.

    Field names equal the builder arguments; the JSON key "lambda" maps to `lam`.
    """
    if not isinstance(document, dict):
        raise ModelValidationError("Model document must be a JSON object")
    unknown = set(document) - {"kind", "params"}
    if unknown:
        raise ModelValidationError(f"Unknown model fields: {sorted(unknown)}")
    kind = document.get("kind")
    if kind not in BUILDERS:
        raise ModelValidationError(f"Unknown model kind '{kind}'; expected one of {sorted(BUILDERS)}")
    builder, names = BUILDERS[kind]
    params = document.get("params")
    if not isinstance(params, dict):
        raise ModelValidationError("Model document needs a 'params' object")
    unknown = set(params) - set(names)
    if unknown:
        raise ModelValidationError(f"Unknown params for '{kind}': {sorted(unknown)}")
    missing = set(names) - set(params) - OPTIONAL_FIELDS.get(kind, set())
    if missing:
        raise ModelValidationError(f"Missing params for '{kind}': {sorted(missing)}")
    kwargs = {}
    for name in names:
        if name not in params:
            continue
        value = params[name]
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ModelValidationError(f"Model param '{name}' must be a number")
        kwargs["lam" if name == "lambda" else name] = float(value)
    return builder(**kwargs)


# ---------------------------------------------------------------------------
# Assumption validation
# ---------------------------------------------------------------------------

@dataclass
class ProbePlan:
    """Finite grids on which the assumptions are probed."""
    x_grid: np.ndarray = field(default_factory=lambda: np.linspace(-5.0, 5.0, 21))
    sigma_factors: tuple = (0.5, 1.0, 2.0)
    n_theta: int = 10
    theta_spread: float = 0.5
    z_grid: np.ndarray = field(default_factory=lambda: np.linspace(-10.0, 10.0, 400))
    quad_tol: float = 1e-8
    derivative_tol: float = 1e-6
    growth_bound: float = 4.0

    def sigma_values(self, spec, alpha):
        sigma, _ = spec.split(alpha)
        return [sigma * f for f in self.sigma_factors]

    def theta_values(self, spec, alpha):
        _, theta = spec.split(alpha)
        positive = spec.space.positive[spec.d1:]
        offsets = np.linspace(-self.theta_spread, self.theta_spread, self.n_theta)
        values = []
        for off in offsets:
            probe = np.where(positive, theta * np.exp(off), theta + off * np.maximum(1.0, np.abs(theta)))
            values.append(probe)
        return values


@dataclass
class AssumptionCheck:
    name: str
    passed: Optional[bool]
    message: str
    observed: dict = field(default_factory=dict)


@dataclass
class ValidationReport:
    model_kind: str
    checks: list

    @property
    def all_passed(self):
        return all(c.passed is not False for c in self.checks)

    def check(self, name):
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_dict(self):
        return {"model": self.model_kind, "all_passed": self.all_passed,
                "checks": [{"name": c.name, "passed": c.passed, "message": c.message,
                            "observed": c.observed} for c in self.checks]}


def _check_ellipticity(spec, alpha, probe):
    x = np.asarray(probe.x_grid, dtype=float).reshape(-1, 1).repeat(spec.m, axis=1)
    min_eig, max_eig, asym = np.inf, -np.inf, 0.0
    for sigma in probe.sigma_values(spec, alpha):
        b = spec.diffusion(x, sigma)
        asym = max(asym, float(np.max(np.abs(b - np.swapaxes(b, 1, 2)))))
        eig = np.linalg.eigvalsh(0.5 * (b + np.swapaxes(b, 1, 2)))
        min_eig = min(min_eig, float(eig.min()))
        max_eig = max(max_eig, float(eig.max()))
    passed = asym == 0.0 and min_eig >= 1.0 / spec.c2 and max_eig <= spec.c2
    message = (f"eigenvalues of b in [{min_eig:.4g}, {max_eig:.4g}], "
               f"declared bounds [{1.0 / spec.c2:.4g}, {spec.c2:.4g}]")
    return AssumptionCheck("C2_ellipticity", passed, message,
                           {"min_eigenvalue": min_eig, "max_eigenvalue": max_eig,
                            "max_asymmetry": asym, "declared_c2": spec.c2})


def _check_normalization(spec, alpha, probe):
    if spec.m != 1:
        return AssumptionCheck("jump_normalization", None, "skipped: quadrature check needs m = 1")
    worst = 0.0
    for theta in probe.theta_values(spec, alpha):
        def density(z, theta=theta):
            return float(np.exp(spec.jump_logpdf(np.array([[z]]), theta)[0]))
        total = sum(integrate.quad(density, a, b, epsabs=1e-13, epsrel=1e-12, limit=200)[0]
                    for a, b in spec.support.pieces())
        worst = max(worst, abs(total - 1.0))
    passed = worst < probe.quad_tol
    return AssumptionCheck("jump_normalization", passed,
                           f"max |∫F_θ - 1| = {worst:.3g} over {probe.n_theta} probed θ",
                           {"max_abs_error": worst})


def _check_zero_set(spec, alpha, probe):
    z = np.asarray(probe.z_grid, dtype=float)
    z = z[z != 0.0].reshape(-1, 1).repeat(spec.m, axis=1)
    masks = [np.isfinite(spec.jump_logpdf(z, theta)) for theta in probe.theta_values(spec, alpha)]
    changed = int(sum(np.count_nonzero(mask != masks[0]) for mask in masks[1:]))
    return AssumptionCheck("C4_zero_set_invariance", changed == 0,
                           f"{changed} probe points change zero/non-zero status across θ",
                           {"changed_points": changed, "zero_points": int(np.count_nonzero(~masks[0]))})


def _check_score_growth(spec, alpha, probe):
    z = np.asarray(probe.z_grid, dtype=float)
    z = z[z != 0.0].reshape(-1, 1).repeat(spec.m, axis=1)
    norm_z = np.linalg.norm(z, axis=1)
    exponent = 0.0
    finite = True
    for theta in probe.theta_values(spec, alpha):
        if float(spec.intensity(theta)) <= 0.0:
            continue
        mask = np.isfinite(spec.jump_logpdf(z, theta))
        score = np.abs(spec.jump_score(z, theta))[mask]
        if not np.all(np.isfinite(score)):
            finite = False
            continue
        if score.size:
            bound = np.log(np.maximum(score.max(axis=1), 1.0)) / np.log(2.0 + norm_z[mask])
            exponent = max(exponent, float(bound.max()))
    passed = finite and exponent <= probe.growth_bound
    return AssumptionCheck("C4_log_density_growth", passed,
                           f"observed polynomial growth exponent {exponent:.3g} "
                           f"(bound {probe.growth_bound})",
                           {"observed_exponent": exponent, "finite": finite})


def _relative_gap(analytic, numeric):
    analytic, numeric = np.asarray(analytic, dtype=float), np.asarray(numeric, dtype=float)
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric)), initial=0.0))


def _check_derivative_hooks(spec, alpha, probe):
    sigma, theta = spec.split(alpha)
    x = np.asarray(probe.x_grid, dtype=float).reshape(-1, 1).repeat(spec.m, axis=1)
    z = np.asarray(probe.z_grid, dtype=float)
    z = z[z != 0.0].reshape(-1, 1).repeat(spec.m, axis=1)
    gaps = {}
    if spec.drift_dtheta is not None:
        gaps["drift_dtheta"] = _relative_gap(spec.drift_dtheta(x, theta),
                                             central_gradient(lambda t: spec.drift(x, t), theta))
    if spec.diffusion_dsigma is not None:
        gaps["diffusion_dsigma"] = _relative_gap(spec.diffusion_dsigma(x, sigma),
                                                 central_gradient(lambda s: spec.diffusion(x, s), sigma))
    if spec.intensity_dtheta is not None:
        gaps["intensity_dtheta"] = _relative_gap(
            spec.intensity_dtheta(theta),
            central_gradient(lambda t: np.asarray(spec.intensity(t), dtype=float), theta))
    if spec.jump_dlogf is not None and float(spec.intensity(theta)) > 0.0:
        mask = np.isfinite(spec.jump_logpdf(z, theta))
        zs = z[mask]
        numeric = central_gradient(lambda t: spec.log_jump_density(zs, t), theta)
        gaps["jump_dlogf"] = _relative_gap(spec.jump_dlogf(zs, theta), numeric)
    if not gaps:
        return AssumptionCheck("derivative_hooks", None, "skipped: no analytic derivative hooks")
    worst = max(gaps.values())
    return AssumptionCheck("derivative_hooks", worst < probe.derivative_tol,
                           f"max relative gap to central differences {worst:.3g}", gaps)


def validate_model(spec, space=None, probe=None, alpha=None):
    """
    Probe (C2) ellipticity, jump-density normalization, zero-set invariance,
    score growth and analytic derivative hooks. Failures are reported, not raised.
    """
    probe = probe or ProbePlan()
    alpha = spec.alpha0.alpha if alpha is None else np.asarray(alpha, dtype=float)
    space = space or spec.space
    checks = []
    if not space.contains(alpha):
        checks.append(AssumptionCheck("parameter_space", False, "probe α lies outside the parameter box"))
    for check in (_check_ellipticity, _check_normalization, _check_zero_set,
                  _check_score_growth, _check_derivative_hooks):
        try:
            checks.append(check(spec, alpha, probe))
        except (ArithmeticError, ValueError, FloatingPointError) as e:
            logger.warning(f"Assumption check {check.__name__} failed to evaluate: {e}")
            checks.append(AssumptionCheck(check.__name__.lstrip("_"), False, f"evaluation failed: {e}"))
    report = ValidationReport(spec.kind, checks)
    for c in checks:
        if c.passed is False:
            logger.warning(f"Model '{spec.kind}' fails {c.name}: {c.message}")
    return report
