"""
Monte Carlo verification of the LAN expansion, estimator efficiency, Wald
size/power and jump-detection error rates.

Every replication is keyed by (master_seed, stream_index, n); rows are stored
so that aggregates can be recomputed and single rows replayed.
"""
import os
import json
import math
import logging
import concurrent.futures
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import stats
from tqdm import tqdm

from .errors import JumpLanError, ModelValidationError, UnsupportedModeError
from .density_lab import QuadSpec, p_tilde_loglik
from .inference import (FitOptions, fisher_gamma_closed_form, fisher_gamma_plugin, fit_qmle,
                        standardized_errors, wald_power, wald_test)
from .model_core import RateSchedule
from .path_sim import SimConfig, simulate_ensemble, simulate_path
from .quasi_lik import classify_increments, quasi_loglik, scaled_score_info

logger = logging.getLogger(__name__)

CONTRASTS = ("euler", "p_tilde")
P_TILDE_MAX_N = 500
POWER_CONTEXT = 2
GAMMA_CONTEXT = 1
GAMMA_PATH_HORIZON = 1e4


@dataclass
class LanConfig:
    model: object
    alpha0: np.ndarray
    direction: np.ndarray
    rule: object
    n_values: list = field(default_factory=lambda: [250, 1000, 4000])
    beta: float = 0.75
    c: float = 0.4
    R: int = 200
    master_seed: int = 0
    contrast: str = "euler"
    substeps: int = 16
    burn_in: bool = True
    threads: int = 1
    ks_level: float = 0.01
    alternatives: list = field(default_factory=list)
    wald_subset: list = field(default_factory=lambda: [1])
    wald_level: float = 0.05
    fit_options: FitOptions = field(default_factory=FitOptions)
    quad: QuadSpec = field(default_factory=QuadSpec)
    config_hash: str = ""

    def __post_init__(self):
        self.alpha0 = np.asarray(self.alpha0.alpha if hasattr(self.alpha0, "alpha") else self.alpha0, dtype=float)
        self.direction = np.asarray(self.direction, dtype=float)
        self.n_values = sorted(int(n) for n in self.n_values)

    def schedule(self, n):
        return RateSchedule.from_beta(n, self.beta, self.c)

    def epsilon(self, n):
        return self.schedule(n).epsilon(self.model.d1, self.model.d2)

    def local_alternative(self, n, direction=None):
        direction = self.direction if direction is None else np.asarray(direction, dtype=float)
        return self.alpha0 + self.epsilon(n) * direction

    def sim_config(self, n, context=()):
        return SimConfig(n=n, h_n=self.schedule(n).h_n, substeps=self.substeps, master_seed=self.master_seed,
                         burn_in=self.burn_in, stream_context=(n,) + tuple(context))

    def validate(self):
        d = self.model.d
        if self.R < 2:
            raise ModelValidationError("LAN experiments need R >= 2")
        if self.alpha0.size != d or self.direction.size != d:
            raise ModelValidationError(f"alpha0 and direction must have length {d}")
        if self.contrast not in CONTRASTS:
            raise ModelValidationError(f"Unknown contrast '{self.contrast}'")
        if self.contrast == "p_tilde" and (self.model.m != 1 or max(self.n_values) > P_TILDE_MAX_N):
            raise ModelValidationError(f"p_tilde contrast needs m = 1 and n <= {P_TILDE_MAX_N}")
        if not self.model.space.contains(self.alpha0):
            raise ModelValidationError("alpha0 lies outside the parameter space")
        for n in self.n_values:
            for h in [self.direction] + [np.asarray(a, dtype=float) for a in self.alternatives]:
                if not self.model.space.contains(self.local_alternative(n, h)):
                    raise ModelValidationError(f"alpha0 + eps_n h leaves the parameter space at n={n}")


@dataclass
class LanRow:
    n: int
    rep: int
    Lambda: float
    V: np.ndarray
    T: np.ndarray
    residual: float

    def to_record(self):
        record = {"n": self.n, "rep": self.rep, "Lambda": self.Lambda}
        for i, v in enumerate(self.V):
            record[f"V_{i + 1}"] = float(v)
        d = self.V.size
        for i in range(d):
            for j in range(d):
                record[f"T_{i + 1}{j + 1}"] = float(self.T[i, j])
        record["residual"] = self.residual
        return record


@dataclass
class LanReport:
    rows: list
    aggregates: list
    gamma: object
    direction: np.ndarray
    checks: dict
    config_hash: str = ""

    @property
    def passed(self):
        return all(self.checks.values())

    def rows_frame(self):
        return pd.DataFrame([r.to_record() for r in self.rows])

    def to_dict(self):
        return {"config_hash": self.config_hash, "direction": self.direction.tolist(),
                "gamma": self.gamma.to_dict(), "aggregates": self.aggregates,
                "checks": self.checks, "passed": self.passed}


def gamma_for(cfg):
    """Closed-form Γ at α₀ when available, otherwise the plug-in on a long path."""
    try:
        return fisher_gamma_closed_form(cfg.model, cfg.alpha0)
    except UnsupportedModeError:
        n_max = max(cfg.n_values)
        h = cfg.schedule(n_max).h_n
        n_long = int(math.ceil(GAMMA_PATH_HORIZON / h)) if cfg.model.ergodic else n_max
        sim = SimConfig(n=n_long, h_n=h, substeps=cfg.substeps, master_seed=cfg.master_seed,
                        burn_in=cfg.burn_in, stream_context=(GAMMA_CONTEXT, n_max))
        logger.info(f"No closed-form Γ for '{cfg.model.kind}'; using the plug-in on {n_long} observations")
        return fisher_gamma_plugin(cfg.model, cfg.alpha0, simulate_path(cfg.model, cfg.alpha0, sim))


def _log_lik(cfg, alpha, path, classification):
    if cfg.contrast == "p_tilde":
        return p_tilde_loglik(cfg.model, alpha, path, cfg.rule, cfg.quad)
    return quasi_loglik(cfg.model, alpha, path, cfg.rule, classification)


def _row_from_path(cfg, n, path):
    classification = classify_increments(path, cfg.rule)
    alpha_h = cfg.local_alternative(n)
    if np.any(cfg.direction != 0):
        Lambda = _log_lik(cfg, alpha_h, path, classification) - _log_lik(cfg, cfg.alpha0, path, classification)
    else:
        Lambda = 0.0
    ssi = scaled_score_info(cfg.model, cfg.alpha0, path, cfg.rule, classification)
    return LanRow(n=int(n), rep=int(path.stream_index), Lambda=float(Lambda), V=ssi.V_n, T=ssi.T_n,
                  residual=float(Lambda - ssi.expansion(cfg.direction)))


def replay_row(cfg, n, stream_index):
    """Recompute one report row from (master_seed, stream_index, n)."""
    path = simulate_path(cfg.model, cfg.alpha0, cfg.sim_config(n).with_stream(stream_index))
    return _row_from_path(cfg, n, path)


def _parallel(func, items, threads, desc, progress_callback=None):
    """Map func over items in a worker pool; results in item order."""
    is_cli_mode = progress_callback is None
    if is_cli_mode:
        progress_bar = tqdm(total=len(items), desc=desc, leave=False)
    results = {}
    with concurrent.futures.ThreadPoolExecutor(max_workers=max(1, int(threads))) as executor:
        future_to_index = {executor.submit(func, item): i for i, item in enumerate(items)}
        completed = 0
        for future in concurrent.futures.as_completed(future_to_index):
            idx = future_to_index[future]
            try:
                results[idx] = future.result()
            except JumpLanError as e:
                logger.error(f"{desc}: replication {idx} failed: {e}")
                if is_cli_mode:
                    progress_bar.close()
                raise
            completed += 1
            if is_cli_mode:
                progress_bar.update(1)
            elif progress_callback:
                progress_callback(int(completed / len(items) * 100))
    if is_cli_mode:
        progress_bar.close()
    return [results[i] for i in sorted(results)]


def aggregate_rows(rows, gamma, direction, ks_level=0.01):
    """Per-n aggregates of stored rows."""
    direction = np.asarray(direction, dtype=float)
    G = gamma.matrix
    q = float(direction @ G @ direction)
    aggregates = []
    for n in sorted({r.n for r in rows}):
        group = sorted((r for r in rows if r.n == n), key=lambda r: r.rep)
        lam = np.array([r.Lambda for r in group])
        res = np.array([r.residual for r in group])
        V = np.array([r.V for r in group])
        T = np.array([r.T for r in group])
        R = lam.size
        if q > 0:
            standardized = (lam + 0.5 * q) / math.sqrt(q)
            ks = stats.kstest(standardized, "norm")
            ks_stat, ks_p = float(ks.statistic), float(ks.pvalue)
        else:
            ks_stat, ks_p = 0.0, 1.0
        aggregates.append({
            "n": int(n), "R": int(R), "quad_form": q,
            "mean_Lambda": float(np.mean(lam)), "var_Lambda": float(np.var(lam, ddof=1)),
            "se_mean_Lambda": float(np.std(lam, ddof=1) / math.sqrt(R)),
            "ks_statistic": ks_stat, "ks_pvalue": ks_p, "ks_level": ks_level,
            "mean_V": np.mean(V, axis=0).tolist(),
            "se_V": (np.std(V, axis=0, ddof=1) / math.sqrt(R)).tolist(),
            "mean_T": np.mean(T, axis=0).tolist(),
            "mean_T_gap": float(np.mean(np.linalg.norm(T - G, axis=(1, 2)))),
            "residual_quantiles": np.quantile(res, [0.05, 0.5, 0.95]).tolist(),
            "median_abs_residual": float(np.median(np.abs(res))),
        })
    return aggregates


def lan_checks(aggregates, ks_level=0.01):
    """LAN checks at the largest n plus remainder decay across the schedule."""
    last, first = aggregates[-1], aggregates[0]
    q = last["quad_form"]
    checks = {
        "mean_Lambda": abs(last["mean_Lambda"] + 0.5 * q) <= 3.0 * last["se_mean_Lambda"],
        "var_Lambda": 0.75 * q <= last["var_Lambda"] <= 1.25 * q,
        "ks_normality": last["ks_pvalue"] >= ks_level,
    }
    if len(aggregates) > 1 and q > 0:
        checks["residual_decay"] = last["median_abs_residual"] < first["median_abs_residual"]
    return {k: bool(v) for k, v in checks.items()}


def lan_expansion_experiment(cfg, gamma=None, progress_callback=None):
    """
    Λ_n(h) = ℓ_n(α₀ + ε_n h) - ℓ_n(α₀), V̂_n, 𝒯̂_n and residuals over R
    replications per scheduled n.
    """
    cfg.validate()
    gamma = gamma or gamma_for(cfg)
    rows = []
    for n in cfg.n_values:
        logger.info(f"LAN expansion: n={n}, R={cfg.R}")
        paths = simulate_ensemble(cfg.model, cfg.alpha0, cfg.sim_config(n), cfg.R, cfg.threads, progress_callback)
        rows.extend(_parallel(lambda p, n=n: _row_from_path(cfg, n, p), paths, cfg.threads,
                              f"LAN rows n={n}", progress_callback))
    aggregates = aggregate_rows(rows, gamma, cfg.direction, cfg.ks_level)
    return LanReport(rows=rows, aggregates=aggregates, gamma=gamma, direction=cfg.direction,
                     checks=lan_checks(aggregates, cfg.ks_level), config_hash=cfg.config_hash)


def estimator_asymptotics_experiment(cfg, gamma=None, progress_callback=None):
    """Standardized QMLE errors Z = Γ^{1/2}ε_n⁻¹(α̂ - α₀) against N(0, I)."""
    cfg.validate()
    gamma = gamma or gamma_for(cfg)
    d1 = cfg.model.d1
    per_n = []
    for n in cfg.n_values:
        eps = cfg.epsilon(n)
        paths = simulate_ensemble(cfg.model, cfg.alpha0, cfg.sim_config(n), cfg.R, cfg.threads, progress_callback)
        fits = _parallel(lambda p: fit_qmle(cfg.model, p, cfg.rule, cfg.alpha0, cfg.fit_options),
                         paths, cfg.threads, f"QMLE fits n={n}", progress_callback)
        kept = [f for f in fits if f.converged]
        excluded = len(fits) - len(kept)
        if excluded:
            logger.warning(f"n={n}: {excluded} of {len(fits)} fits did not converge and were excluded")
        entry = {"n": int(n), "fits": len(fits), "excluded": excluded,
                 "excluded_fraction": excluded / len(fits)}
        if len(kept) >= 2:
            Z = np.array([standardized_errors(f.alpha_hat.alpha, cfg.alpha0, gamma, eps) for f in kept])
            cov = np.cov(Z, rowvar=False)
            alpha_hat = np.array([f.alpha_hat.alpha for f in kept])
            se = np.array([f.standard_errors for f in kept])
            err = np.abs(alpha_hat - cfg.alpha0)
            entry.update({
                "cov_Z": cov.tolist(),
                "diag_cov_Z": np.diag(cov).tolist(),
                "cross_block_max": float(np.max(np.abs(cov[:d1, d1:]))),
                "cross_block_se": 1.0 / math.sqrt(len(kept)),
                "ks_pvalues": [float(stats.kstest(Z[:, k], "norm").pvalue) for k in range(Z.shape[1])],
                "coverage_90": np.mean(err <= stats.norm.isf(0.05) * se, axis=0).tolist(),
                "coverage_95": np.mean(err <= stats.norm.isf(0.025) * se, axis=0).tolist(),
                "mean_Z": np.mean(Z, axis=0).tolist(),
            })
        per_n.append(entry)
    last = per_n[-1]
    checks = {"excluded_fraction": last["excluded_fraction"] <= 0.05}
    if "cov_Z" in last:
        checks.update({
            "diag_cov_Z": all(0.75 <= v <= 1.25 for v in last["diag_cov_Z"]),
            "cross_block": last["cross_block_max"] <= 3.0 * last["cross_block_se"],
            "ks_normality": all(p >= cfg.ks_level for p in last["ks_pvalues"]),
            "coverage_95": all(0.92 <= v <= 0.98 for v in last["coverage_95"]),
        })
    return {"config_hash": cfg.config_hash, "per_n": per_n, "checks": checks, "passed": all(checks.values())}


def wald_power_experiment(cfg, alternatives=None, n=None, gamma=None, slack=0.03, progress_callback=None):
    """
    Wald rejection rates at α₀ + ε_n h for each alternative h (h = 0 gives the
    size) next to the noncentral chi-square prediction at ncp = h_Sᵀ Γ_S h_S.
    """
    cfg.validate()
    gamma = gamma or gamma_for(cfg)
    n = max(cfg.n_values) if n is None else int(n)
    eps = cfg.epsilon(n)
    gamma = gamma.with_epsilon(eps)
    subset = np.asarray(cfg.wald_subset, dtype=int)
    block = gamma.matrix[np.ix_(subset, subset)]
    alternatives = cfg.alternatives if alternatives is None else alternatives
    alternatives = [np.zeros(cfg.model.d)] + [np.asarray(h, dtype=float) for h in alternatives]
    results = []
    for k, h in enumerate(alternatives):
        truth = cfg.alpha0 + eps * h
        sim = cfg.sim_config(n, context=(POWER_CONTEXT, k))
        paths = simulate_ensemble(cfg.model, truth, sim, cfg.R, cfg.threads, progress_callback)
        fits = _parallel(lambda p: fit_qmle(cfg.model, p, cfg.rule, truth, cfg.fit_options),
                         paths, cfg.threads, f"Wald fits alternative {k}", progress_callback)
        kept = [f for f in fits if f.converged]
        rejections = [wald_test(f.alpha_hat, gamma, cfg.alpha0, subset).p_value < cfg.wald_level for f in kept]
        ncp = float(h[subset] @ block @ h[subset])
        results.append({"direction": h.tolist(), "ncp": ncp, "fits": len(kept),
                        "excluded": len(fits) - len(kept),
                        "rejection_rate": float(np.mean(rejections)) if rejections else float("nan"),
                        "predicted": wald_power(ncp, subset.size, cfg.wald_level)})
    ordered = sorted(results, key=lambda r: r["ncp"])
    checks = {
        "size": 0.02 <= results[0]["rejection_rate"] <= 0.09,
        "monotone_power": all(b["rejection_rate"] >= a["rejection_rate"] - slack for a, b in zip(ordered, ordered[1:])),
        "power_matches_prediction": all(abs(r["rejection_rate"] - r["predicted"]) <= 0.10 for r in results[1:]),
    }
    return {"config_hash": cfg.config_hash, "n": n, "level": cfg.wald_level, "subset": subset.tolist(),
            "alternatives": results, "checks": checks, "passed": all(checks.values())}



def _log_slope(h_values, rates):
    pairs = [(math.log(h), math.log(r)) for h, r in zip(h_values, rates) if r > 0]
    if len(pairs) < 2:
        return float("nan")
    x, y = zip(*pairs)
    return float(np.polyfit(x, y, 1)[0])


def jump_detection_experiment(cfg, progress_callback=None):
    """
    False-jump rate (flagged intervals without jumps) and missed-jump rate
    (unflagged one-jump intervals) per n, with log-log slopes against h_n.

    The reported false-rate bound is exp(-u_n² / (2·c2²·h_n)). c2 bounds the
    eigenvalues of the diffusion coefficient b itself, so c2² bounds the
    per-unit-time variance b·bᵀ of a no-jump increment.
    """
    cfg.validate()
    model = cfg.model
    theta = cfg.alpha0[model.d1:]
    lam = float(model.intensity(theta))
    per_n = []
    for n in cfg.n_values:
        schedule = cfg.schedule(n)
        paths = simulate_ensemble(model, cfg.alpha0, cfg.sim_config(n), cfg.R, cfg.threads, progress_callback)
        false_flags = no_jump = missed = one_jump = 0
        detected = []
        for path in paths:
            flags = classify_increments(path, cfg.rule).jump_detected
            counts = path.latent.interval_counts
            false_flags += int(np.count_nonzero(flags & (counts == 0)))
            no_jump += int(np.count_nonzero(counts == 0))
            missed += int(np.count_nonzero(~flags & (counts == 1)))
            one_jump += int(np.count_nonzero(counts == 1))
            detected.append(int(np.count_nonzero(flags)))
        u = cfg.rule.threshold(schedule.h_n)
        per_n.append({
            "n": int(n), "h_n": schedule.h_n, "threshold": u,
            "false_rate": false_flags / no_jump if no_jump else 0.0,
            "missed_rate": missed / one_jump if one_jump else float("nan"),
            "one_jump_intervals": one_jump,
            "false_rate_bound": math.exp(-u ** 2 / (2.0 * model.c2 ** 2 * schedule.h_n)),
            "mean_detected": float(np.mean(detected)),
            "expected_jumps": lam * schedule.horizon,
        })
    h_values = [e["h_n"] for e in per_n]
    missed_slope = _log_slope(h_values, [e["missed_rate"] for e in per_n])
    false_slope = _log_slope(h_values, [e["false_rate"] for e in per_n])
    target = cfg.rule.rho * (model.m + model.gamma_exponent)
    last = per_n[-1]
    checks = {"false_rate": last["false_rate"] <= 1e-3}
    if lam > 0 and not math.isnan(missed_slope):
        checks["missed_slope"] = 0.5 * target <= missed_slope <= 2.0 * target
        checks["detected_count"] = abs(last["mean_detected"] - last["expected_jumps"]) <= 3.0 * math.sqrt(
            last["expected_jumps"])
    return {"config_hash": cfg.config_hash, "per_n": per_n, "missed_slope": missed_slope,
            "false_slope": false_slope, "target_slope": target, "checks": checks,
            "passed": all(checks.values())}


def write_lan_report(report, out_dir, extra=None):
    """lan_report.json (full report) and lan_rows.csv (per-replication rows)."""
    os.makedirs(out_dir, exist_ok=True)
    document = report.to_dict()
    if extra:
        document.update(extra)
    report_path = os.path.join(out_dir, "lan_report.json")
    rows_path = os.path.join(out_dir, "lan_rows.csv")
    with open(report_path, "w", encoding="utf-8") as f:
        json.dump(document, f, indent=2, sort_keys=True)
    report.rows_frame().to_csv(rows_path, index=False)
    return [report_path, rows_path]
