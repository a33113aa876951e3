"""
Numerical transition densities for scalar models.

p0 is the no-jump component e^{-λh}p^c, p1 the one-jump component, p_tilde the
thresholded density selecting between them, and dj its total mass. The exact
Merton mixture serves as an oracle for the B1/B2 diagnostics.
"""
import math
import functools
import logging
import warnings
import concurrent.futures
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import integrate, special, stats

from .errors import ModelValidationError, QuadratureError, UnsupportedModeError
from .model_core import RateSchedule

logger = logging.getLogger(__name__)

PC_MODES = ("euler_gaussian", "chapman_kolmogorov", "exact", "exact_if_available")
JUMP_RANGE_TAIL = 1e-14
LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class QuadSpec:
    """
    Quadrature settings.

    One-dimensional integrals use adaptive QUADPACK on the truncated domain
    center ± k_sd standard deviations. The one-jump integral uses
    Gauss-Legendre in time and Gauss-Hermite in the pre-jump state (checked by
    node halving at the kernel peak) and QUADPACK in the jump size, piecewise
    over the support of F_θ.
    """
    abs_tol: float = 1e-12
    rel_tol: float = 1e-10
    k_sd: float = 12.0
    limit: int = 200
    tau_nodes: int = 8
    hermite_nodes: int = 32
    nested_rel_tol: float = 1e-3
    ck_levels: int = 4
    ck_resolution: int = 8

    def __post_init__(self):
        if not (self.abs_tol > 0 and self.rel_tol > 0 and self.nested_rel_tol > 0):
            raise ModelValidationError("Quadrature tolerances must be positive")
        if self.k_sd < stats.norm.isf(0.5e-12):
            raise ModelValidationError("k_sd must cover 1 - 1e-12 of the reference Gaussian mass")
        if self.tau_nodes < 1 or self.hermite_nodes < 2 or self.limit < 1 or self.ck_levels < 1:
            raise ModelValidationError("Quadrature node counts must be positive")


@dataclass
class DensityDiagnostics:
    """One schedule point of a B1 or B2 series."""
    n: int
    h_n: float
    metric: str
    value: float
    l1_gap: float = float("nan")
    l1_gap_normalized: float = float("nan")
    one_minus_dj: float = float("nan")
    dj_derivative: float = float("nan")
    localization_bound: float = float("nan")
    grid: list = field(default_factory=list)
    sign_changes: int = 0


@dataclass
class DiagnosticSeries:
    rows: list
    slope: float

    def values(self):
        return [r.value for r in self.rows]

    def is_decreasing(self, slack=0.0):
        v = self.values()
        return all(b < a * (1.0 + slack) for a, b in zip(v, v[1:]))

    def to_frame(self):
        return pd.DataFrame([{"n": r.n, "h_n": r.h_n, "metric": r.metric, "value": r.value} for r in self.rows])


def _require_scalar(model):
    if model.m != 1:
        raise UnsupportedModeError("Density computations are available for m = 1 models only")


def _split(model, alpha):
    alpha = np.asarray(alpha.alpha if hasattr(alpha, "alpha") else alpha, dtype=float)
    sigma, theta = model.split(alpha)
    return alpha, sigma, theta


def _drift(model, theta, x):
    x = np.asarray(x, dtype=float)
    return model.drift(x.reshape(-1, 1), theta)[:, 0].reshape(x.shape)


def _vol(model, sigma, x):
    x = np.asarray(x, dtype=float)
    return np.abs(model.diffusion(x.reshape(-1, 1), sigma)[:, 0, 0]).reshape(x.shape)


def _euler_kernel(model, sigma, theta, start, end, t):
    """Euler Gaussian density of `end` given `start` after time t (broadcasting)."""
    start = np.asarray(start, dtype=float)
    mean = start + t * _drift(model, theta, start)
    return stats.norm.pdf(end, loc=mean, scale=_vol(model, sigma, start) * np.sqrt(t))


def _quad(func, a, b, quad, points=None):
    """QUADPACK with a convergence check; returns the integral."""
    if not b > a:
        return 0.0
    inner = None
    if points is not None:
        inner = [p for p in points if a < p < b] or None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        out = integrate.quad(func, a, b, epsabs=quad.abs_tol, epsrel=quad.rel_tol,
                             limit=quad.limit, points=inner, full_output=1)
    value, error = out[0], out[1]
    accept = max(1e3 * quad.abs_tol, 1e3 * quad.rel_tol * abs(value))
    if len(out) > 3 and error > accept:
        raise QuadratureError(f"Adaptive quadrature on [{a:.6g}, {b:.6g}] reached error {error:.3g}",
                              achieved=error)
    return value


def _chapman_kolmogorov(model, sigma, theta, x_prev, x, h, quad, levels):
    """K-fold composition of Euler kernels on a trapezoid grid."""
    if levels == 1:
        return _euler_kernel(model, sigma, theta, x_prev, x, h)
    dt = h / levels
    center = x_prev + h * float(_drift(model, theta, x_prev))
    vol = float(_vol(model, sigma, x_prev))
    half_width = 1.5 * quad.k_sd * vol * math.sqrt(h)
    spacing = vol * math.sqrt(dt) / quad.ck_resolution
    count = int(math.ceil(2.0 * half_width / spacing)) + 1
    grid = np.linspace(center - half_width, center + half_width, count)
    weights = np.full(count, grid[1] - grid[0])
    weights[[0, -1]] *= 0.5
    mass = _euler_kernel(model, sigma, theta, x_prev, grid, dt)
    if levels > 2:
        transfer = _euler_kernel(model, sigma, theta, grid[:, None], grid[None, :], dt)
        for _ in range(levels - 2):
            mass = (mass * weights) @ transfer
    x = np.asarray(x, dtype=float)
    final = _euler_kernel(model, sigma, theta, grid[:, None], x.reshape(1, -1), dt)
    return ((mass * weights) @ final).reshape(x.shape)


def continuous_density(model, alpha, x_prev, x, h, quad=None, pc_mode="euler_gaussian"):
    """p^c_h(x_prev → x) in the requested mode."""
    _require_scalar(model)
    quad = quad or QuadSpec()
    alpha, sigma, theta = _split(model, alpha)
    if pc_mode not in PC_MODES:
        raise ModelValidationError(f"Unknown pc_mode '{pc_mode}'; expected one of {PC_MODES}")
    if pc_mode in ("exact", "exact_if_available"):
        if model.exact_continuous is not None:
            return model.exact_continuous(float(x_prev), np.asarray(x, dtype=float), h, alpha)
        if pc_mode == "exact":
            raise UnsupportedModeError(f"Model '{model.kind}' has no exact continuous transition")
        pc_mode = "euler_gaussian"
    if pc_mode == "chapman_kolmogorov":
        return _chapman_kolmogorov(model, sigma, theta, float(x_prev), x, h, quad, quad.ck_levels)
    return _euler_kernel(model, sigma, theta, float(x_prev), np.asarray(x, dtype=float), h)


def p0(model, alpha, x_prev, x, h, quad=None, pc_mode="euler_gaussian"):
    """No-jump component e^{-λh}·p^c_h(x_prev → x)."""
    _, _, theta = _split(model, alpha)
    lam = float(model.intensity(theta))
    return math.exp(-lam * h) * continuous_density(model, alpha, x_prev, x, h, quad, pc_mode)


def _log_normal(x, mean, sd):
    return -0.5 * ((x - mean) / sd) ** 2 - np.log(sd) - LOG_SQRT_2PI


def _one_jump_kernel(model, sigma, theta, x_prev, x, h, tau_nodes, hermite_nodes):
    """
    G(z) = ∫_0^h ∫ p^c_τ(x_prev→y) p^c_{h-τ}(y+z→x) dy dτ for a jump of size z.

    Gauss-Legendre in τ; Gauss-Hermite in the pre-jump state y, centered on
    the product of the two Euler Gaussians so that both endpoint kernels stay
    resolved as τ approaches 0 or h.
    """
    t_nodes, t_weights = special.roots_legendre(tau_nodes)
    tau = 0.5 * h * (t_nodes + 1.0)
    tau_w = 0.5 * h * t_weights
    g_nodes, g_weights = special.roots_hermite(hermite_nodes)
    g_weights = g_weights / math.sqrt(math.pi)
    rest = h - tau

    mean_pre = x_prev + tau * float(_drift(model, theta, x_prev))
    var_pre = float(_vol(model, sigma, x_prev)) ** 2 * tau
    # backward Euler preimage of x
    target = x - rest * float(_drift(model, theta, x))
    var_post = float(_vol(model, sigma, x)) ** 2 * rest
    var_prod = var_pre * var_post / (var_pre + var_post)
    sd_pre, sd_prod = np.sqrt(var_pre)[:, None], np.sqrt(var_prod)[:, None]
    spread = math.sqrt(2.0) * sd_prod * g_nodes[None, :]

    def kernel(z):
        center = (mean_pre * var_post + (target - z) * var_pre) / (var_pre + var_post)
        y = center[:, None] + spread
        w = y + z
        log_ratio = (_log_normal(y, mean_pre[:, None], sd_pre)
                     + _log_normal(x, w + rest[:, None] * _drift(model, theta, w),
                                   _vol(model, sigma, w) * np.sqrt(rest)[:, None])
                     - _log_normal(y, center[:, None], sd_prod))
        return float(tau_w @ (np.exp(log_ratio) @ g_weights))

    return kernel


def _jump_window(model, sigma, theta, x_prev, x, h, quad):
    """Jump sizes z for which the one-jump kernel is non-negligible."""
    shifts = (h * float(_drift(model, theta, x_prev)), h * float(_drift(model, theta, x)))
    sd = max(float(_vol(model, sigma, x_prev)), float(_vol(model, sigma, x))) * math.sqrt(h)
    center = x - x_prev - 0.5 * sum(shifts)
    return x - x_prev - max(shifts) - quad.k_sd * sd, x - x_prev - min(shifts) + quad.k_sd * sd, center


def p1(model, alpha, x_prev, x, h, quad=None):
    """
    One-jump component λe^{-λh}∫∫∫ p^c_τ(x_prev→y) F_θ(z) p^c_{h-τ}(y+z→x) dy dz dτ
    with Euler kernels for p^c.

    The jump size is integrated adaptively on each piece of supp F_θ, so
    discontinuities of F_θ at the support boundary are never crossed.
    """
    _require_scalar(model)
    quad = quad or QuadSpec()
    _, sigma, theta = _split(model, alpha)
    lam = float(model.intensity(theta))
    if np.ndim(x):
        return np.array([p1(model, alpha, x_prev, xi, h, quad) for xi in np.ravel(x)]).reshape(np.shape(x))
    if lam <= 0.0:
        return 0.0
    x_prev, x = float(x_prev), float(x)
    kernel = _one_jump_kernel(model, sigma, theta, x_prev, x, h, quad.tau_nodes, quad.hermite_nodes)
    lo, hi, center = _jump_window(model, sigma, theta, x_prev, x, h, quad)

    coarse = _one_jump_kernel(model, sigma, theta, x_prev, x, h,
                              max(1, quad.tau_nodes // 2), max(2, quad.hermite_nodes // 2))
    fine_peak, coarse_peak = kernel(center), coarse(center)
    error = abs(fine_peak - coarse_peak)
    if error > quad.nested_rel_tol * abs(fine_peak) + quad.abs_tol:
        achieved = error / abs(fine_peak) if fine_peak != 0 else float("inf")
        raise QuadratureError(f"One-jump kernel at x={x:.6g} reached relative error {achieved:.3g}",
                              achieved=achieved)

    def integrand(z):
        log_f = float(model.jump_logpdf(np.array([[z]]), theta)[0])
        return math.exp(log_f) * kernel(z) if np.isfinite(log_f) else 0.0

    total = 0.0
    for a, b in model.support.pieces():
        total += _quad(integrand, max(a, lo), min(b, hi), quad, points=[center])
    return lam * math.exp(-lam * h) * total


def p_tilde(model, alpha, x_prev, x, h, rule, quad=None, pc_mode="euler_gaussian"):
    """p0 on |x - x_prev| ≤ u_n, p1 beyond."""
    quad = quad or QuadSpec()
    u = rule.threshold(h)
    if np.ndim(x):
        return np.array([p_tilde(model, alpha, x_prev, xi, h, rule, quad, pc_mode)
                         for xi in np.ravel(x)]).reshape(np.shape(x))
    if abs(float(x) - float(x_prev)) <= u:
        return float(p0(model, alpha, x_prev, x, h, quad, pc_mode))
    return float(p1(model, alpha, x_prev, x, h, quad))


def _domain(model, sigma, theta, x_prev, h, quad):
    """Truncated integration domain of the one-step transition."""
    center = x_prev + h * float(_drift(model, theta, x_prev))
    sd = float(_vol(model, sigma, x_prev)) * math.sqrt(h)
    lo, hi = center - quad.k_sd * sd, center + quad.k_sd * sd
    if float(model.intensity(theta)) > 0 and model.jump_range is not None:
        j_lo, j_hi = model.jump_range(theta, JUMP_RANGE_TAIL)
        lo = min(lo, center + 2.0 * min(j_lo, 0.0) - quad.k_sd * sd)
        hi = max(hi, center + 2.0 * max(j_hi, 0.0) + quad.k_sd * sd)
    return lo, hi, center


def _dj(model, alpha, x_prev, h, rule, quad, pc_mode, one_jump):
    _, sigma, theta = _split(model, alpha)
    u = rule.threshold(h)
    lo, hi, center = _domain(model, sigma, theta, x_prev, h, quad)
    inner_lo, inner_hi = max(lo, x_prev - u), min(hi, x_prev + u)
    mass = _quad(lambda x: float(p0(model, alpha, x_prev, x, h, quad, pc_mode)),
                 inner_lo, inner_hi, quad, points=[center])
    if float(model.intensity(theta)) > 0:
        mass += _quad(one_jump, lo, x_prev - u, quad)
        mass += _quad(one_jump, x_prev + u, hi, quad)
    return mass


def dj(model, alpha, x_prev, h, rule, quad=None, pc_mode="euler_gaussian"):
    """Total mass of p̃, split at the threshold points x_prev ± u_n."""
    _require_scalar(model)
    quad = quad or QuadSpec()
    return _dj(model, alpha, x_prev, h, rule, quad, pc_mode,
               lambda x: p1(model, alpha, x_prev, x, h, quad))


def merton_params(model, alpha):
    """Builder-style parameters of a Merton model evaluated at α."""
    if model.kind != "merton":
        raise UnsupportedModeError(f"Exact transition density needs a Merton model, got '{model.kind}'")
    _, sigma, theta = _split(model, alpha)
    return {"drift_level": float(theta[0]), "sigma": float(sigma[0]), "lambda": float(model.fixed["lambda"]),
            "jump_mean": float(theta[1]), "jump_sd": float(model.fixed["jump_sd"])}


def exact_merton_density(params, x_prev, x, h, trunc=1e-14):
    """Poisson mixture Σ_l e^{-λh}(λh)^l/l! · N(x_prev + θ₁h + lμ, σ²h + l s²), truncated at tail < trunc."""
    lam_h = params["lambda"] * h
    levels = 0
    while stats.poisson.sf(levels, lam_h) >= trunc:
        levels += 1
    counts = np.arange(levels + 1)
    weights = stats.poisson.pmf(counts, lam_h)
    x = np.asarray(x, dtype=float)
    means = x_prev + params["drift_level"] * h + counts * params["jump_mean"]
    sds = np.sqrt(params["sigma"] ** 2 * h + counts * params["jump_sd"] ** 2)
    dens = stats.norm.pdf(x[..., None], loc=means, scale=sds)
    return np.sum(dens * weights, axis=-1)


def _reference_density(model, alpha, x_prev, h, quad, reference, one_jump):
    if reference == "exact":
        params = merton_params(model, alpha)
        return lambda x: float(exact_merton_density(params, x_prev, x, h))
    if reference == "chapman_kolmogorov":
        return lambda x: float(p0(model, alpha, x_prev, x, h, quad, "chapman_kolmogorov")) + one_jump(x)
    raise ModelValidationError(f"Unknown reference density '{reference}'")


def l1_gap(model, alpha, x_prev, h, rule, quad=None, reference="exact"):
    """
    ∫|p - p̃| dx and ∫|p - p̃/d_j| dx on the truncated domain.

    Returns (gap, normalized_gap, d_j).
    """
    _require_scalar(model)
    quad = quad or QuadSpec()
    _, sigma, theta = _split(model, alpha)

    # the same nodes recur across d_j, both gap variants and the reference
    @functools.lru_cache(maxsize=None)
    def one_jump(x):
        return float(p1(model, alpha, x_prev, x, h, quad))

    p_ref = _reference_density(model, alpha, x_prev, h, quad, reference, one_jump)
    u = rule.threshold(h)
    lo, hi, center = _domain(model, sigma, theta, x_prev, h, quad)
    mass = _dj(model, alpha, x_prev, h, rule, quad, "euler_gaussian", one_jump)
    pieces = [(lo, x_prev - u, False), (max(lo, x_prev - u), min(hi, x_prev + u), True), (x_prev + u, hi, False)]

    def branch(x, inside):
        return float(p0(model, alpha, x_prev, x, h, quad)) if inside else one_jump(x)

    gap = normalized = 0.0
    for a, b, inside in pieces:
        gap += _quad(lambda x: abs(p_ref(x) - branch(x, inside)), a, b, quad, points=[center])
        normalized += _quad(lambda x: abs(p_ref(x) - branch(x, inside) / mass), a, b, quad, points=[center])
    return gap, normalized, mass


def _map_grid(func, grid, threads):
    """Evaluate func over grid points in a worker pool; results in grid order."""
    results = {}
    with concurrent.futures.ThreadPoolExecutor(max_workers=max(1, int(threads))) as executor:
        future_to_index = {executor.submit(func, x): i for i, x in enumerate(grid)}
        for future in concurrent.futures.as_completed(future_to_index):
            results[future_to_index[future]] = future.result()
    return [results[i] for i in sorted(results)]


def _localized(grid, n, delta):
    bound = float(n) ** delta
    kept = [float(x) for x in grid if abs(x) <= bound]
    if not kept:
        raise ModelValidationError(f"No x_prev grid point satisfies |x| <= n^delta = {bound:.4g}")
    return kept, bound


def _slope(rows):
    n = np.array([r.n for r in rows], dtype=float)
    v = np.array([r.value for r in rows], dtype=float)
    if n.size < 2 or np.any(v <= 0):
        return float("nan")
    return float(np.polyfit(np.log(n), np.log(v), 1)[0])


def diagnose_b1(model, alpha, x_prev_grid, n_values, rule, quad=None, beta=0.75, c=1.0,
                delta=0.1, reference="exact", threads=1):
    """n·max_grid ∫|p - p̃|dx along h_n = c·n^{-β}, with the log-log decay slope."""
    _require_scalar(model)
    quad = quad or QuadSpec()
    rows = []
    for n in n_values:
        schedule = RateSchedule.from_beta(n, beta, c)
        grid, bound = _localized(x_prev_grid, n, delta)
        gaps = _map_grid(lambda x: l1_gap(model, alpha, x, schedule.h_n, rule, quad, reference), grid, threads)
        worst = max(g[0] for g in gaps)
        rows.append(DensityDiagnostics(
            n=int(n), h_n=schedule.h_n, metric="n_l1_gap", value=n * worst, l1_gap=worst,
            l1_gap_normalized=max(g[1] for g in gaps),
            one_minus_dj=max(1.0 - g[2] for g in gaps), localization_bound=bound, grid=grid))
        logger.info(f"B1 n={n}: n*L1={n * worst:.4g}")
    return DiagnosticSeries(rows=rows, slope=_slope(rows))


def diagnose_b2(model, alpha0, direction, x_prev_grid, n_values, rule, quad=None, beta=0.75, c=1.0,
                order=1, delta=0.1, stencil=5, threads=1):
    """
    n^{1/l}·max|∂_t^l D_{j,h}(t)| where D_{j,h}(t) = d_j(α₀ + t·ε_n·h), by
    finite differences on an equispaced stencil in [0, 1].
    """
    _require_scalar(model)
    if order not in (1, 2):
        raise ModelValidationError("B2 derivative order must be 1 or 2")
    quad = quad or QuadSpec()
    alpha0 = np.asarray(alpha0.alpha if hasattr(alpha0, "alpha") else alpha0, dtype=float)
    direction = np.asarray(direction, dtype=float)
    t = np.linspace(0.0, 1.0, stencil)
    rows = []
    for n in n_values:
        schedule = RateSchedule.from_beta(n, beta, c)
        eps = schedule.epsilon(model.d1, model.d2)
        grid, bound = _localized(x_prev_grid, n, delta)

        def derivative(x_prev):
            D = np.array([dj(model, alpha0 + ti * eps * direction, x_prev, schedule.h_n, rule, quad) for ti in t])
            deriv = np.gradient(D, t)
            if order == 2:
                deriv = np.gradient(deriv, t)
            return deriv

        derivs = _map_grid(derivative, grid, threads)
        worst = max(float(np.max(np.abs(d))) for d in derivs)
        chatter = max(int(np.count_nonzero(np.diff(np.sign(d[d != 0])))) for d in derivs)
        rows.append(DensityDiagnostics(
            n=int(n), h_n=schedule.h_n, metric=f"n_dt{order}_dj", value=float(n) ** (1.0 / order) * worst,
            dj_derivative=worst, localization_bound=bound, grid=grid, sign_changes=chatter))
        logger.info(f"B2 n={n}: scaled derivative {float(n) ** (1.0 / order) * worst:.4g}")
    return DiagnosticSeries(rows=rows, slope=_slope(rows))


def p_tilde_loglik(model, alpha, path, rule, quad=None, pc_mode="euler_gaussian", log_floor=math.log(1e-300)):
    """Σ_j log p̃(X_{t_{j-1}} → X_{t_j}); zero densities contribute log_floor."""
    _require_scalar(model)
    quad = quad or QuadSpec()
    obs = path.observations[:, 0]
    total = []
    for x_prev, x in zip(obs[:-1], obs[1:]):
        value = p_tilde(model, alpha, x_prev, x, path.h_n, rule, quad, pc_mode)
        total.append(math.log(value) if value > 0 else log_floor)
    return float(np.sum(total))
