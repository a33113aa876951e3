"""
Quasi-maximum-likelihood and Bayes-type estimation, Fisher information Γ and Wald tests.
"""
import math
import logging
import warnings
import itertools
import concurrent.futures
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np
from scipy import integrate, linalg, optimize, stats

from .errors import (EvaluationError, ModelValidationError, QuadratureError,
                     UnsupportedModeError, WaldTestError)
from .model_core import ParamVector, central_gradient
from .quasi_lik import (classify_increments, evaluate_contrast, observed_info,
                        quasi_loglik, quasi_score)

logger = logging.getLogger(__name__)

CLOSED_FORM_KINDS = ("ou_jump", "gamma_jump", "two_sided_gamma_jump")


@dataclass(frozen=True, eq=False)
class FisherGamma:
    """Γ = diag(Γ₁, Γ₂) with the scaling ε_n it standardizes against."""
    gamma1: np.ndarray
    gamma2: np.ndarray
    epsilon_n: Optional[np.ndarray] = None
    excluded_mass: float = 0.0
    source: str = "closed_form"

    @property
    def matrix(self):
        return linalg.block_diag(self.gamma1, self.gamma2)

    @property
    def d(self):
        return self.gamma1.shape[0] + self.gamma2.shape[0]

    def is_positive_definite(self):
        try:
            np.linalg.cholesky(self.matrix)
            return True
        except np.linalg.LinAlgError:
            return False

    def with_epsilon(self, epsilon_n):
        return FisherGamma(self.gamma1, self.gamma2, np.asarray(epsilon_n, dtype=float),
                           self.excluded_mass, self.source)

    def to_dict(self):
        return {"gamma1": self.gamma1.tolist(), "gamma2": self.gamma2.tolist(),
                "epsilon_n": None if self.epsilon_n is None else self.epsilon_n.tolist(),
                "excluded_mass": self.excluded_mass, "source": self.source}


@dataclass
class FitOptions:
    max_iter: int = 500
    gtol: float = 1e-6
    step_tol: float = 1e-8
    newton_max: int = 20
    max_line_search_failures: int = 3
    two_stage: bool = False


@dataclass
class FitResult:
    alpha_hat: ParamVector
    converged: bool
    iterations: int
    grad_norm: float
    loglik: float
    standard_errors: np.ndarray
    mode: str
    boundary: list
    used_simplex: bool = False
    message: str = ""
    trace: list = field(default_factory=list)

    def to_dict(self):
        return {"alpha_hat": self.alpha_hat.to_list(), "sigma": self.alpha_hat.sigma.tolist(),
                "theta": self.alpha_hat.theta.tolist(), "converged": self.converged,
                "iterations": self.iterations, "grad_norm": self.grad_norm, "loglik": self.loglik,
                "standard_errors": [float(s) for s in self.standard_errors], "mode": self.mode,
                "boundary": self.boundary, "used_simplex": self.used_simplex,
                "message": self.message, "trace": self.trace}


@dataclass
class GridSpec:
    nodes: int = 41
    half_width_se: float = 6.0
    edge_mass_tol: float = 1e-3

    def __post_init__(self):
        if self.nodes < 41:
            raise ModelValidationError("Bayes grid needs at least 41 nodes per axis")


@dataclass
class BayesResult:
    alpha_hat: ParamVector
    edge_mass: float
    lower: np.ndarray
    upper: np.ndarray
    qmle: FitResult

    def to_dict(self):
        return {"alpha_hat": self.alpha_hat.to_list(), "edge_mass": self.edge_mass,
                "box_lower": self.lower.tolist(), "box_upper": self.upper.tolist()}


class WaldResult(NamedTuple):
    statistic: float
    p_value: float


class _Standardized:
    """
    Coordinates w with α = exp-or-identity(z₀ + s·w); s is ε_n divided by the
    initial value on log-scaled coordinates, so ∇_w ℓ ≈ V_n near the truth.
    """

    def __init__(self, model, path, rule, classification, init):
        self.model, self.path, self.rule = model, path, rule
        self.classification = classification
        space = model.space
        self.positive = space.positive
        eps = path.schedule.epsilon(model.d1, model.d2)
        self.z0 = space.to_unconstrained(init)
        self.scale = np.divide(eps, init, out=eps.copy(), where=self.positive)
        lo, hi = space.unconstrained_bounds()
        self.lower = (lo - self.z0) / self.scale
        self.upper = (hi - self.z0) / self.scale

    def alpha(self, w):
        return self.model.space.from_unconstrained(self.z0 + self.scale * w)

    def jacobian(self, alpha):
        return np.where(self.positive, alpha, 1.0) * self.scale

    def contrast(self, w, part="full"):
        result = evaluate_contrast(self.model, self.alpha(w), self.path, self.rule, self.classification)
        return result.continuous if part == "continuous" else result.value

    def gradient(self, w):
        alpha = self.alpha(w)
        return quasi_score(self.model, alpha, self.path, self.rule, self.classification) * self.jacobian(alpha)

    def hessian(self, w):
        alpha = self.alpha(w)
        J = self.jacobian(alpha)
        info = observed_info(self.model, alpha, self.path, self.rule, self.classification)
        g = quasi_score(self.model, alpha, self.path, self.rule, self.classification)
        curvature = np.where(self.positive, g * alpha * self.scale ** 2, 0.0)
        return -J[:, None] * info * J[None, :] + np.diag(curvature)

    def clip(self, w):
        span = 1e-9 * (self.upper - self.lower)
        return np.clip(w, self.lower + span, self.upper - span)


def _objective(problem, w_full, idx, part):
    def value_and_grad(v):
        w = w_full.copy()
        w[idx] = v
        try:
            value = problem.contrast(w, part)
            if part == "continuous":
                grad = central_gradient(lambda u: problem.contrast(_embed(w, idx, u), part), v)
            else:
                grad = problem.gradient(w)[idx]
        except EvaluationError:
            return np.inf, np.zeros_like(v)
        return -value, -grad
    return value_and_grad


def _embed(w, idx, values):
    out = w.copy()
    out[idx] = values
    return out


def _ascend(problem, w, idx, part, opts, trace, stage):
    """L-BFGS-B with restarts; bounded Nelder-Mead after repeated line-search failures."""
    fun = _objective(problem, w, idx, part)
    bounds = list(zip(problem.lower[idx], problem.upper[idx]))
    iterations, failures, used_simplex = 0, 0, False
    current = w[idx].copy()
    while True:
        res = optimize.minimize(fun, current, jac=True, method="L-BFGS-B", bounds=bounds,
                                options={"maxiter": opts.max_iter, "gtol": 0.1 * opts.gtol, "ftol": 1e-15})
        current = res.x
        iterations += int(res.nit)
        trace.append({"stage": stage, "iteration": iterations, "loglik": float(-res.fun)})
        if res.success or "LNSRCH" not in str(res.message):
            break
        failures += 1
        logger.info(f"{stage}: line search failure {failures}")
        if failures >= opts.max_line_search_failures:
            simplex = optimize.minimize(lambda v: fun(v)[0], current, method="Nelder-Mead", bounds=bounds,
                                        options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 200 * len(idx)})
            current = simplex.x
            iterations += int(simplex.nit)
            used_simplex = True
            trace.append({"stage": f"{stage}-simplex", "iteration": iterations, "loglik": float(-simplex.fun)})
            break
    return _embed(w, idx, current), iterations, used_simplex


def _newton_polish(problem, w, opts, trace):
    """Newton steps on the full contrast until both gradient and step tolerances hold."""
    last_step, steps = np.inf, 0
    try:
        value = problem.contrast(w)
        grad = problem.gradient(w)
    except EvaluationError as e:
        logger.warning(f"Contrast not finite at the optimizer's end point: {e}")
        return w, 0, False, float("inf")
    for _ in range(opts.newton_max):
        if np.max(np.abs(grad)) < opts.gtol and last_step < opts.step_tol:
            break
        neg_hess = -problem.hessian(w)
        try:
            np.linalg.cholesky(neg_hess)
        except np.linalg.LinAlgError:
            logger.warning("Observed information is not positive definite; stopping Newton refinement")
            break
        direction = np.linalg.solve(neg_hess, grad)
        t, accepted = 1.0, False
        while t >= 1e-6:
            candidate = problem.clip(w + t * direction)
            try:
                cand_value = problem.contrast(candidate)
            except EvaluationError:
                cand_value = -np.inf
            if np.isfinite(cand_value) and cand_value >= value - 1e-10 * max(1.0, abs(value)):
                accepted = True
                break
            t *= 0.5
        if not accepted:
            logger.warning("Newton line search found no admissible step; keeping the current estimate")
            break
        last_step = float(np.max(np.abs(candidate - w)))
        w, value = candidate, cand_value
        grad = problem.gradient(w)
        steps += 1
        trace.append({"stage": "newton", "iteration": steps, "loglik": float(value)})
    converged = bool(np.max(np.abs(grad)) < opts.gtol and last_step < opts.step_tol)
    return w, steps, converged, float(np.max(np.abs(grad)))


def _standard_errors(model, alpha, path, rule, classification, gamma=None):
    eps = path.schedule.epsilon(model.d1, model.d2)
    if gamma is not None:
        scaled = gamma.matrix
    else:
        info = observed_info(model, alpha, path, rule, classification)
        scaled = eps[:, None] * info * eps[None, :]
    try:
        cov = np.linalg.inv(scaled)
    except np.linalg.LinAlgError:
        logger.warning("Scaled information is singular; standard errors unavailable")
        return np.full(model.d, np.nan)
    diag = np.diag(cov)
    with np.errstate(invalid="ignore"):
        return np.where(diag > 0, np.sqrt(np.abs(diag)), np.nan) * eps


def fit_qmle(model, path, rule, init=None, opts=None, gamma=None):
    """
    Maximize the thresholded quasi-likelihood.

    Joint mode runs L-BFGS-B on all coordinates; two-stage mode first fits σ
    on the no-jump branch, then θ on the full contrast with σ fixed. Both
    finish with Newton refinement on the full contrast. Non-convergence is
    reported through `converged`, never raised.
    """
    opts = opts or FitOptions()
    init = model.alpha0 if init is None else init
    init_vec = np.asarray(init.alpha if hasattr(init, "alpha") else init, dtype=float)
    if init_vec.size != model.d or not model.space.contains(init_vec):
        raise ModelValidationError(f"Initial value {init_vec.tolist()} lies outside the parameter space")

    classification = classify_increments(path, rule)
    problem = _Standardized(model, path, rule, classification, init_vec)
    w = np.zeros(model.d)
    trace, iterations, used_simplex = [], 0, False
    sigma_idx = np.arange(model.d1)
    theta_idx = np.arange(model.d1, model.d)
    if opts.two_stage:
        w, its, simplex = _ascend(problem, w, sigma_idx, "continuous", opts, trace, "sigma")
        iterations += its
        used_simplex |= simplex
        w, its, simplex = _ascend(problem, w, theta_idx, "full", opts, trace, "theta")
    else:
        w, its, simplex = _ascend(problem, w, np.arange(model.d), "full", opts, trace, "joint")
    iterations += its
    used_simplex |= simplex
    w, steps, converged, grad_norm = _newton_polish(problem, w, opts, trace)
    iterations += steps

    alpha_hat = problem.alpha(w)
    boundary = model.space.boundary_proximity(alpha_hat)
    if np.any(boundary):
        names = [model.param_names[i] for i in np.flatnonzero(boundary)]
        logger.warning(f"Estimate within 1e-6 of the box boundary in {names}")
        converged = False
    if not model.space.contains(alpha_hat):
        converged = False
    se = _standard_errors(model, alpha_hat, path, rule, classification, gamma)
    mode = "two_stage" if opts.two_stage else "joint"
    logger.info(f"QMLE ({mode}) finished after {iterations} iterations, converged={converged}")
    return FitResult(
        alpha_hat=ParamVector.from_alpha(alpha_hat, model.d1), converged=converged, iterations=iterations,
        grad_norm=grad_norm, loglik=quasi_loglik(model, alpha_hat, path, rule, classification),
        standard_errors=se, mode=mode, boundary=[bool(b) for b in boundary], used_simplex=used_simplex,
        message="converged" if converged else "tolerances not met", trace=trace)


def fit_ensemble(model, paths, rule, init=None, opts=None, threads=1):
    """fit_qmle over many paths; results follow the order of `paths`."""
    results = {}
    with concurrent.futures.ThreadPoolExecutor(max_workers=max(1, int(threads))) as executor:
        future_to_index = {executor.submit(fit_qmle, model, p, rule, init, opts): i for i, p in enumerate(paths)}
        for future in concurrent.futures.as_completed(future_to_index):
            results[future_to_index[future]] = future.result()
    return [results[i] for i in sorted(results)]


def fit_bayes(model, path, rule, prior=None, grid=None, fit=None):
    """
    Posterior mean of exp(ℓ_n - max ℓ_n)·prior by tensor-grid trapezoid
    quadrature on a box of ±half_width_se standard errors around the QMLE.
    """
    if model.d > 3:
        raise UnsupportedModeError(f"Grid Bayes estimator supports d <= 3, model has d = {model.d}")
    grid = grid or GridSpec()
    fit = fit or fit_qmle(model, path, rule)
    center = fit.alpha_hat.alpha
    se = fit.standard_errors
    if not np.all(np.isfinite(se)) or np.any(se <= 0):
        raise ModelValidationError("Bayes grid needs finite positive QMLE standard errors")
    span = 1e-9 * model.space.width
    lower = np.maximum(center - grid.half_width_se * se, model.space.lower + span)
    upper = np.minimum(center + grid.half_width_se * se, model.space.upper - span)
    axes = [np.linspace(lo, hi, grid.nodes) for lo, hi in zip(lower, upper)]
    classification = classify_increments(path, rule)

    shape = (grid.nodes,) * model.d
    log_post = np.empty(shape)
    for index in itertools.product(range(grid.nodes), repeat=model.d):
        alpha = np.array([axes[k][i] for k, i in enumerate(index)])
        try:
            value = quasi_loglik(model, alpha, path, rule, classification)
        except EvaluationError:
            value = -np.inf
        if prior is not None:
            p = float(prior(alpha))
            value = value + (math.log(p) if p > 0 else -np.inf)
        log_post[index] = value
    weights = np.exp(log_post - np.max(log_post))
    for k, axis in enumerate(axes):
        trap = np.full(grid.nodes, axis[1] - axis[0])
        trap[[0, -1]] *= 0.5
        weights = weights * trap.reshape([-1 if j == k else 1 for j in range(model.d)])
    total = weights.sum()
    mesh = np.meshgrid(*axes, indexing="ij")
    mean = np.array([np.sum(weights * m) / total for m in mesh])

    interior = weights[(slice(1, -1),) * model.d].sum()
    edge_mass = float((total - interior) / total)
    if edge_mass > grid.edge_mass_tol:
        logger.warning(f"Posterior mass {edge_mass:.3g} at the grid box edge; widen the box")
    return BayesResult(alpha_hat=ParamVector.from_alpha(mean, model.d1), edge_mass=edge_mass,
                       lower=lower, upper=upper, qmle=fit)


def _states(source, m):
    states = source.observations[:-1] if hasattr(source, "observations") else np.asarray(source, dtype=float)
    return states.reshape(-1, m)


def _jump_fisher_quadrature(model, theta, boundary_guard):
    """λ∫F_θ (∂ log f_θ)(∂ log f_θ)ᵀ over supp F_θ, excluding `boundary_guard` around 0."""
    d2 = model.d2
    lam = float(model.intensity(theta))
    if lam <= 0.0:
        return np.zeros((d2, d2)), 0.0
    result = np.zeros((d2, d2))
    excluded = 0.0
    pieces = model.support.pieces()

    def density(z):
        return float(np.exp(model.jump_logpdf(np.array([[z]]), theta)[0]))

    for i in range(d2):
        for j in range(i, d2):
            def integrand(z, i=i, j=j):
                f = density(z)
                if f == 0.0:
                    return 0.0
                s = model.jump_score(np.array([[z]]), theta)[0]
                return f * s[i] * s[j]
            total = 0.0
            for a, b in pieces:
                a = a + boundary_guard if a == 0.0 else a
                b = b - boundary_guard if b == 0.0 else b
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", integrate.IntegrationWarning)
                    value, error = integrate.quad(integrand, a, b, epsabs=1e-12, epsrel=1e-10, limit=200)
                if error > 1e-6 * max(1.0, abs(value)):
                    raise QuadratureError(f"Jump Fisher quadrature reached error {error:.3g}", achieved=error)
                total += value
            result[i, j] = result[j, i] = lam * total
    if boundary_guard > 0:
        for a, b in pieces:
            if a == 0.0:
                excluded += integrate.quad(density, 0.0, boundary_guard)[0]
            if b == 0.0:
                excluded += integrate.quad(density, -boundary_guard, 0.0)[0]
    return result, excluded


def _jump_fisher_monte_carlo(model, theta, samples, seed):
    rng = np.random.default_rng(seed)
    z = np.asarray(model.jump_sampler(rng, samples, theta), dtype=float).reshape(samples, model.m)
    s = model.jump_score(z, theta)
    return float(model.intensity(theta)) * (s.T @ s) / samples


def fisher_gamma_plugin(model, alpha, source, quad=None, boundary_guard=0.0, mc_samples=100000, seed=0):
    """
    Γ₁ and the drift part of Γ₂ as averages over the states of a path (or a
    stationary sample); the jump part of Γ₂ by quadrature for m = 1 and by
    Monte Carlo otherwise.
    """
    alpha = np.asarray(alpha.alpha if hasattr(alpha, "alpha") else alpha, dtype=float)
    sigma, theta = model.split(alpha)
    x = _states(source, model.m)
    S = model.covariance(x, sigma)
    try:
        S_inv = np.linalg.inv(S)
    except np.linalg.LinAlgError as e:
        raise EvaluationError(f"Singular diffusion matrix in the Fisher average: {e}") from e
    dS = model.covariance_jacobian(x, sigma)
    A = np.einsum("nijd,njk->nikd", dS, S_inv)
    gamma1 = 0.5 * np.mean(np.einsum("nijd,njie->nde", A, A), axis=0)
    J = model.drift_jacobian(x, theta)
    drift_part = np.mean(np.einsum("nid,nij,nje->nde", J, S_inv, J), axis=0)
    if model.m == 1:
        try:
            jump_part, excluded = _jump_fisher_quadrature(model, theta, boundary_guard)
        except QuadratureError:
            guard = max(boundary_guard, 1e-8)
            logger.warning(f"Jump Fisher quadrature failed; retrying with boundary guard {guard:g}")
            jump_part, excluded = _jump_fisher_quadrature(model, theta, guard)
    else:
        jump_part, excluded = _jump_fisher_monte_carlo(model, theta, mc_samples, seed), 0.0
    gamma2 = drift_part + jump_part
    epsilon = source.schedule.epsilon(model.d1, model.d2) if hasattr(source, "schedule") else None
    return FisherGamma(0.5 * (gamma1 + gamma1.T), 0.5 * (gamma2 + gamma2.T), epsilon, excluded, "plugin")


def fisher_gamma_closed_form(model, alpha):
    """Γ for the ergodic built-ins from their analytic stationary moments."""
    if model.kind not in CLOSED_FORM_KINDS:
        raise UnsupportedModeError(f"No closed-form Γ for model '{model.kind}'")
    alpha = np.asarray(alpha.alpha if hasattr(alpha, "alpha") else alpha, dtype=float)
    sigma, theta = model.split(alpha)
    mean, var = model.stationary_moments(alpha)
    s2 = sigma[0] ** 2
    gamma1 = np.array([[2.0 / s2]])
    gamma2 = np.array(model.jump_fisher(theta), dtype=float)
    gamma2[0, 0] += (var + mean ** 2) / s2
    return FisherGamma(gamma1, gamma2, None, 0.0, "closed_form")


def standardized_errors(alpha_hat, alpha0, gamma, epsilon_n):
    """Z = Γ^{1/2} ε_n⁻¹ (α̂ - α₀)."""
    vals, vecs = np.linalg.eigh(gamma.matrix)
    root = (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T
    diff = (np.asarray(alpha_hat, dtype=float) - np.asarray(alpha0, dtype=float)) / np.asarray(epsilon_n)
    return root @ diff


def wald_test(alpha_hat, gamma, null_value, subset, epsilon_n=None):
    """
    W = zᵀ Γ_S z with z = (ε_n⁻¹(α̂ - α⁰))_S; p-value from χ²(|S|).
    """
    epsilon_n = gamma.epsilon_n if epsilon_n is None else np.asarray(epsilon_n, dtype=float)
    if epsilon_n is None:
        raise WaldTestError("wald_test needs ε_n, either on Γ or passed explicitly")
    subset = np.atleast_1d(np.asarray(subset, dtype=int))
    alpha_hat = np.asarray(alpha_hat.alpha if hasattr(alpha_hat, "alpha") else alpha_hat, dtype=float)
    null_value = np.asarray(null_value.alpha if hasattr(null_value, "alpha") else null_value, dtype=float)
    block = gamma.matrix[np.ix_(subset, subset)]
    try:
        np.linalg.cholesky(block)
    except np.linalg.LinAlgError as e:
        raise WaldTestError(f"Γ sub-block on {subset.tolist()} is not positive definite") from e
    z = ((alpha_hat - null_value) / epsilon_n)[subset]
    statistic = float(z @ block @ z)
    return WaldResult(statistic, float(stats.chi2.sf(statistic, subset.size)))


def wald_power(ncp, df=1, level=0.05):
    """Asymptotic power of the level-`level` Wald test at noncentrality ncp."""
    critical = stats.chi2.isf(level, df)
    if ncp == 0:
        return float(level)
    return float(stats.ncx2.sf(critical, df, ncp))
