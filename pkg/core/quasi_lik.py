"""
Thresholded quasi-log-likelihood.

Increments with |Δ_jX| ≤ u_n = C·h_n^ρ enter through the Euler Gaussian
transition; larger increments enter through log(λ(θ) h_n F_θ(Δ_jX)); the
intensity term -λ(θ)T_n is shared by both branches.
"""
import math
import logging
from dataclasses import dataclass

import numpy as np

from .errors import EvaluationError, ModelValidationError
from .model_core import central_gradient

logger = logging.getLogger(__name__)

DEFAULT_LOG_FLOOR = math.log(1e-300)


@dataclass(frozen=True)
class ThresholdRule:
    """u_n = scale · h_n^rho with rho in (1/4, 1/2)."""
    rho: float
    scale: float = 1.0
    override: bool = False

    def __post_init__(self):
        if not self.scale > 0:
            raise ModelValidationError(f"Threshold scale must be positive, got {self.scale}")
        if not 0.25 < self.rho < 0.5:
            if not self.override:
                raise ModelValidationError(f"Threshold exponent rho={self.rho} outside (1/4, 1/2)")
            logger.warning(f"Threshold exponent rho={self.rho} outside (1/4, 1/2); proceeding on override")

    def threshold(self, h_n):
        return self.scale * h_n ** self.rho


@dataclass(frozen=True, eq=False)
class IncrementClassification:
    jump_detected: np.ndarray
    threshold: float

    @property
    def n(self):
        return int(self.jump_detected.size)

    @property
    def n_jump(self):
        return int(np.count_nonzero(self.jump_detected))

    @property
    def n_continuous(self):
        return self.n - self.n_jump


@dataclass(frozen=True)
class ContrastValue:
    """ℓ_n(α) with its branch decomposition and diagnostics."""
    value: float
    continuous: float
    jump: float
    intensity: float
    n_continuous: int
    n_jump: int
    n_floored: int


@dataclass(frozen=True, eq=False)
class ScaledScoreInfo:
    V_n: np.ndarray
    T_n: np.ndarray
    epsilon_n: np.ndarray

    def expansion(self, direction):
        """hᵀV_n - ½ hᵀT_n h."""
        h = np.asarray(direction, dtype=float)
        return float(h @ self.V_n - 0.5 * h @ self.T_n @ h)


def classify_increments(path, rule):
    """Flag Δ_jX as a jump when its Euclidean norm strictly exceeds u_n."""
    threshold = rule.threshold(path.h_n)
    norms = np.linalg.norm(path.increments, axis=1)
    return IncrementClassification(jump_detected=norms > threshold, threshold=threshold)


def _as_alpha(alpha):
    return np.asarray(alpha.alpha if hasattr(alpha, "alpha") else alpha, dtype=float)


def _raise_non_finite(terms, indices, what):
    bad = ~np.isfinite(terms)
    if np.any(bad):
        j = int(indices[np.argmax(bad)]) + 1
        raise EvaluationError(f"Non-finite {what} term in interval {j}", interval_index=j)


def _continuous_terms(model, sigma, theta, x_prev, dx, h):
    """Per-increment Euler Gaussian log-density plus S⁻¹r, S⁻¹ and r for the score."""
    S = model.covariance(x_prev, sigma)
    r = dx - h * model.drift(x_prev, theta)
    with np.errstate(all="ignore"):
        _, logdet = np.linalg.slogdet(S)
        solved = np.linalg.solve(S, r[..., None])[..., 0]
        quad = np.sum(r * solved, axis=1)
        terms = -0.5 * (model.m * math.log(2.0 * math.pi * h) + logdet) - 0.5 * quad / h
    return terms, solved, S, r


def evaluate_contrast(model, alpha, path, rule, classification=None, log_floor=DEFAULT_LOG_FLOOR):
    """Full contrast evaluation; raises EvaluationError on non-finite terms."""
    sigma, theta = model.split(_as_alpha(alpha))
    classification = classification or classify_increments(path, rule)
    flags = classification.jump_detected
    h = path.h_n
    x_prev = path.observations[:-1]
    dx = path.increments
    cont_idx = np.flatnonzero(~flags)
    jump_idx = np.flatnonzero(flags)

    continuous = 0.0
    if cont_idx.size:
        terms, _, _, _ = _continuous_terms(model, sigma, theta, x_prev[cont_idx], dx[cont_idx], h)
        _raise_non_finite(terms, cont_idx, "continuous-branch")
        continuous = float(np.sum(terms))

    jump, n_floored = 0.0, 0
    if jump_idx.size:
        with np.errstate(divide="ignore"):
            terms = model.log_jump_density(dx[jump_idx], theta) + math.log(h)
        floored = np.isneginf(terms)
        n_floored = int(np.count_nonzero(floored))
        terms = np.where(floored, log_floor, terms)
        _raise_non_finite(terms, jump_idx, "jump-branch")
        jump = float(np.sum(terms))
        if n_floored:
            logger.debug(f"{n_floored} jump increments outside the jump support were floored")

    intensity = -float(model.intensity(theta)) * path.schedule.horizon
    return ContrastValue(value=continuous + jump + intensity, continuous=continuous, jump=jump,
                         intensity=intensity, n_continuous=int(cont_idx.size),
                         n_jump=int(jump_idx.size), n_floored=n_floored)


def quasi_loglik(model, alpha, path, rule, classification=None):
    """ℓ_n(α)."""
    return evaluate_contrast(model, alpha, path, rule, classification).value


def _analytic_score(model, alpha, path, classification):
    sigma, theta = model.split(alpha)
    flags = classification.jump_detected
    h = path.h_n
    x_prev = path.observations[:-1]
    dx = path.increments
    cont_idx = np.flatnonzero(~flags)
    jump_idx = np.flatnonzero(flags)

    grad_sigma = np.zeros(model.d1)
    grad_theta = -model.intensity_gradient(theta) * path.schedule.horizon
    if cont_idx.size:
        xc = x_prev[cont_idx]
        terms, solved, S, _ = _continuous_terms(model, sigma, theta, xc, dx[cont_idx], h)
        _raise_non_finite(terms, cont_idx, "continuous-branch")
        J = model.drift_jacobian(xc, theta)
        grad_theta = grad_theta + np.sum(np.einsum("nmd,nm->nd", J, solved), axis=0)
        dS = model.covariance_jacobian(xc, sigma)
        trace = np.einsum("nij,njid->nd", np.linalg.inv(S), dS)
        quad = np.einsum("ni,nijd,nj->nd", solved, dS, solved)
        grad_sigma = np.sum(-0.5 * trace + 0.5 * quad / h, axis=0)
    if jump_idx.size:
        grad_theta = grad_theta + np.sum(model.jump_score(dx[jump_idx], theta), axis=0)
    return np.concatenate([grad_sigma, grad_theta])


def quasi_score(model, alpha, path, rule, classification=None, analytic=True):
    """
    ∇_α ℓ_n with the classification held fixed.

    Uses the model's analytic hooks when all of them exist, otherwise central
    differences of quasi_loglik.
    """
    alpha = _as_alpha(alpha)
    classification = classification or classify_increments(path, rule)
    if analytic and model.has_analytic_derivatives:
        return _analytic_score(model, alpha, path, classification)
    return central_gradient(lambda a: quasi_loglik(model, a, path, rule, classification), alpha)


def observed_info(model, alpha, path, rule, classification=None, with_asymmetry=False):
    """-∇²ℓ_n from central differences of the score, symmetrized as (H + Hᵀ)/2."""
    alpha = _as_alpha(alpha)
    classification = classification or classify_increments(path, rule)
    H = central_gradient(lambda a: quasi_score(model, a, path, rule, classification), alpha, order=4)
    norm = np.linalg.norm(H)
    asymmetry = float(np.linalg.norm(H - H.T) / norm) if norm > 0 else 0.0
    info = -0.5 * (H + H.T)
    if with_asymmetry:
        return info, asymmetry
    return info


def scaled_score_info(model, alpha, path, rule, classification=None):
    """V_n = ε_n ∇ℓ_n and T_n = -ε_n ∇²ℓ_n ε_n."""
    classification = classification or classify_increments(path, rule)
    eps = path.schedule.epsilon(model.d1, model.d2)
    score = quasi_score(model, alpha, path, rule, classification)
    info = observed_info(model, alpha, path, rule, classification)
    return ScaledScoreInfo(V_n=eps * score, T_n=eps[:, None] * info * eps[None, :], epsilon_n=eps)
