"""
Run configurations and orchestration of the simulate, fit, lan-verify and
density-diag subcommands.
"""
import os
import json
import hashlib
import logging
from typing import Annotated, Any, Dict, List, Literal, Optional

import numpy as np
import pandas as pd
from pydantic import (BaseModel, ConfigDict, Field, StrictBool, StrictFloat, StrictInt, StrictStr,
                      ValidationError)

from .errors import ConfigError, JumpLanError, ModelValidationError, UnsupportedModeError
from .density_lab import QuadSpec, diagnose_b1, diagnose_b2
from .inference import FitOptions, GridSpec, fit_bayes, fit_qmle
from .lan_harness import (CONTRASTS, LanConfig, estimator_asymptotics_experiment, gamma_for,
                          jump_detection_experiment, lan_expansion_experiment, wald_power_experiment,
                          write_lan_report)
from .model_core import RateSchedule, admissible_rho, check_balance_condition, load_model_document
from .path_sim import Path, SimConfig, latent_to_frame, simulate_path
from .quasi_lik import ThresholdRule

logger = logging.getLogger(__name__)

SUBCOMMANDS = ("simulate", "fit", "lan_verify", "density_diag")
EXPERIMENTS = ("estimator_asymptotics", "test_power", "jump_detection")
REFERENCES = ("exact", "chapman_kolmogorov")
STATUS_OK = "ok"
STATUS_TOLERANCE = "tolerance_failure"
STATUS_CONFIG = "config_error"
STATUS_RUNTIME = "runtime_error"
HASH_DIGITS = 12
BALANCE_ETA = 0.1

# Rough per-operation costs behind the --dry-run runtime estimate
SECONDS_PER_FINE_STEP = 1e-6
SECONDS_PER_CONTRAST_TERM = 2e-6
CONTRASTS_PER_ROW = 15
CONTRASTS_PER_FIT = 200
SECONDS_PER_DENSITY_POINT = 0.05


Count = Annotated[StrictInt, Field(ge=1)]
Index = Annotated[StrictInt, Field(ge=0)]
Positive = Annotated[StrictFloat, Field(gt=0.0)]
UnitInterval = Annotated[StrictFloat, Field(gt=0.0, lt=1.0)]
Vector = List[StrictFloat]

ERROR_PHRASES = {
    "missing": "required field missing",
    "extra_forbidden": "unknown field",
    "int_type": "expected an integer",
    "float_type": "expected a finite number",
    "finite_number": "expected a finite number",
    "bool_type": "expected true or false",
    "string_type": "expected a string",
    "list_type": "expected a list",
    "dict_type": "expected a JSON object",
    "model_type": "expected a JSON object",
    "model_attributes_type": "expected a JSON object",
}


class ConfigSection(BaseModel):
    """Closed JSON object; unknown keys are errors."""
    model_config = ConfigDict(extra="forbid", allow_inf_nan=False)


class ThresholdSection(ConfigSection):
    rho: StrictFloat
    scale: Positive = 1.0
    override: StrictBool = False


class OptionsSection(ConfigSection):
    max_iter: Count = 500
    gtol: Positive = 1e-6
    step_tol: Positive = 1e-8
    newton_max: Index = 20


class QuadSection(ConfigSection):
    abs_tol: Positive = 1e-12
    rel_tol: Positive = 1e-10
    k_sd: Positive = 12.0
    tau_nodes: Count = 8
    hermite_nodes: Annotated[StrictInt, Field(ge=2)] = 32
    nested_rel_tol: Positive = 1e-3


class RunSection(ConfigSection):
    model: Dict[str, Any]
    seed: Annotated[StrictInt, Field(ge=0, lt=2 ** 64)] = 0
    threads: Count = 1


class SimulateConfig(RunSection):
    alpha: Optional[Vector] = None
    n: Count
    h_n: Positive
    substeps: Count = 16
    x0: Optional[Vector] = None
    burn_in: StrictBool = False
    stream_index: Index = 0
    binary: StrictBool = False


class FitConfig(RunSection):
    path: StrictStr
    threshold: ThresholdSection
    init: Optional[Vector] = None
    two_stage: StrictBool = False
    bayes: StrictBool = False
    bayes_nodes: Annotated[StrictInt, Field(ge=41)] = 41
    options: OptionsSection = Field(default_factory=OptionsSection)


class ScheduleSection(RunSection):
    n_values: List[Count] = Field(default_factory=lambda: [250, 1000, 4000])
    beta: UnitInterval = 0.75
    c: Positive = 0.4
    quad: QuadSection = Field(default_factory=QuadSection)


class LanVerifyConfig(ScheduleSection):
    alpha0: Optional[Vector] = None
    direction: Vector
    threshold: ThresholdSection
    R: Annotated[StrictInt, Field(ge=2)] = 200
    contrast: Literal[CONTRASTS] = "euler"
    substeps: Count = 16
    burn_in: StrictBool = True
    ks_level: UnitInterval = 0.01
    experiments: List[Literal[EXPERIMENTS]] = Field(default_factory=lambda: ["estimator_asymptotics"])
    alternatives: List[Vector] = Field(default_factory=list)
    wald_subset: List[Index] = Field(default_factory=lambda: [1])
    wald_level: UnitInterval = 0.05
    two_stage: StrictBool = False
    options: OptionsSection = Field(default_factory=OptionsSection)


class DensityDiagConfig(ScheduleSection):
    alpha: Optional[Vector] = None
    threshold: ThresholdSection
    x_prev_grid: Vector = Field(default_factory=lambda: [0.0])
    delta: Positive = 0.1
    reference: Literal[REFERENCES] = "exact"
    b2_directions: List[Vector] = Field(default_factory=list)
    b2_order: Literal[1, 2] = 1
    decrease_slack: Annotated[StrictFloat, Field(ge=0.0)] = 0.1


SCHEMAS = {
    "simulate": SimulateConfig,
    "fit": FitConfig,
    "lan_verify": LanVerifyConfig,
    "density_diag": DensityDiagConfig,
}


def describe_validation_error(error):
    """One 'dotted.path: message' line per pydantic error."""
    lines = []
    for item in error.errors():
        where = ".".join(str(part) for part in item["loc"]) or "config"
        phrase = ERROR_PHRASES.get(item["type"], item["msg"].replace("Input should be", "must be"))
        lines.append(f"{where}: {phrase}")
    return lines


def load_run_config(file_path):
    """Read a JSON run configuration; raises ConfigError on unreadable or malformed files."""
    try:
        with open(file_path, "r", encoding="utf-8") as f:
            document = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{file_path}: malformed JSON at line {e.lineno} column {e.colno}: {e.msg}") from e
    except OSError as e:
        raise ConfigError(f"Cannot read config {file_path}: {e}") from e
    if not isinstance(document, dict):
        raise ConfigError(f"{file_path}: top level must be a JSON object")
    return document


def apply_overrides(document, seed=None, threads=None, two_stage=None):
    """Command-line flags replace the matching document keys."""
    document = dict(document)
    if seed is not None:
        document["seed"] = seed
    if threads is not None:
        document["threads"] = threads
    if two_stage:
        document["two_stage"] = True
    return document


def config_hash(subcommand, config):
    """First 12 hex digits of the SHA-256 of the canonical JSON of the effective configuration."""
    canonical = json.dumps({"subcommand": subcommand, "config": config}, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:HASH_DIGITS]


def _write_json(document, file_path):
    with open(file_path, "w", encoding="utf-8") as f:
        json.dump(document, f, indent=2, sort_keys=True)


class RunProcessor:
    """
    Validates run configurations and executes one subcommand per call.
    """

    def __init__(self, progress_callback=None):
        self.progress_callback = progress_callback

    def validate_inputs(self, subcommand, document):
        """
        Schema and semantic checks; returns a list of error strings naming the dotted field path.
        """
        if subcommand not in SCHEMAS:
            return [f"Unknown subcommand '{subcommand}'; expected one of {list(SUBCOMMANDS)}"]
        if not isinstance(document, dict):
            return ["Run configuration must be a JSON object"]
        try:
            config = self.effective_config(subcommand, document)
        except ValidationError as e:
            return describe_validation_error(e)

        errors = []
        try:
            model = load_model_document(config["model"])
        except ModelValidationError as e:
            return [f"model: {e}"]

        for key in ("alpha", "alpha0", "init"):
            if config.get(key) is None:
                continue
            if len(config[key]) != model.d:
                errors.append(f"{key}: expected {model.d} values for model '{model.kind}'")
            elif not model.space.contains(np.asarray(config[key], dtype=float)):
                errors.append(f"{key}: lies outside the parameter space")
        if "threshold" in config:
            try:
                ThresholdRule(**config["threshold"])
            except ModelValidationError as e:
                errors.append(f"threshold.rho: {e}")

        if subcommand == "simulate":
            if config["x0"] is not None and len(config["x0"]) != model.m:
                errors.append(f"x0: expected {model.m} values")
        elif subcommand == "fit":
            if not os.path.exists(config["path"]):
                errors.append(f"path: file not found: {config['path']}")
            if config["bayes"] and model.d > 3:
                errors.append(f"bayes: grid Bayes estimator supports d <= 3, model has d = {model.d}")
        elif subcommand == "lan_verify":
            errors.extend(self._validate_lan(config, model))
        elif subcommand == "density_diag":
            if model.m != 1:
                errors.append("model: density diagnostics need a scalar model")
            if config["reference"] == "exact" and not model.has_exact_density:
                errors.append(f"reference: model '{model.kind}' has no exact density; use chapman_kolmogorov")
            for k, h in enumerate(config["b2_directions"]):
                if len(h) != model.d:
                    errors.append(f"b2_directions.{k}: expected {model.d} values")
        return errors

    def _validate_lan(self, config, model):
        errors = []
        if len(config["direction"]) != model.d:
            return [f"direction: expected {model.d} values"]
        for k, h in enumerate(config["alternatives"]):
            if len(h) != model.d:
                errors.append(f"alternatives.{k}: expected {model.d} values")
        bad = [i for i in config["wald_subset"] if i >= model.d]
        if bad:
            errors.append(f"wald_subset: indices {bad} exceed parameter dimension {model.d}")
        if errors:
            return errors
        try:
            self._lan_config(config, model, "").validate()
        except ModelValidationError as e:
            errors.append(f"lan_verify: {e}")
        return errors

    def effective_config(self, subcommand, document):
        """Document validated against the subcommand schema, with defaults filled in."""
        return SCHEMAS[subcommand].model_validate(document).model_dump()

    def _alpha(self, model, values):
        return model.alpha0.alpha if values is None else np.asarray(values, dtype=float)

    def _fit_options(self, config):
        return FitOptions(two_stage=config["two_stage"], **config["options"])

    def _lan_config(self, config, model, digest):
        return LanConfig(
            model=model, alpha0=self._alpha(model, config["alpha0"]), direction=config["direction"],
            rule=ThresholdRule(**config["threshold"]), n_values=config["n_values"], beta=config["beta"],
            c=config["c"], R=config["R"], master_seed=config["seed"], contrast=config["contrast"],
            substeps=config["substeps"], burn_in=config["burn_in"], threads=config["threads"],
            ks_level=config["ks_level"], alternatives=config["alternatives"],
            wald_subset=config["wald_subset"], wald_level=config["wald_level"],
            fit_options=self._fit_options(config), quad=QuadSpec(**config["quad"]), config_hash=digest)

    def plan(self, subcommand, config):
        """Schedule and runtime estimate printed by --dry-run; nothing is simulated."""
        model = load_model_document(config["model"])
        if subcommand == "simulate":
            schedule = RateSchedule(n=config["n"], h_n=config["h_n"])
            theta = model.split(self._alpha(model, config["alpha"]))[1]
            steps = config["n"] * config["substeps"]
            return {"schedule": [{"n": schedule.n, "h_n": schedule.h_n, "horizon": schedule.horizon,
                                  "expected_jumps": float(model.intensity(theta)) * schedule.horizon}],
                    "estimated_seconds": steps * SECONDS_PER_FINE_STEP}
        if subcommand == "fit":
            return {"schedule": [], "estimated_seconds": CONTRASTS_PER_FIT * SECONDS_PER_CONTRAST_TERM}

        schedule = [RateSchedule.from_beta(n, config["beta"], config["c"]) for n in sorted(config["n_values"])]
        rows = [{"n": s.n, "h_n": s.h_n, "horizon": s.horizon,
                 "epsilon": s.epsilon(model.d1, model.d2).tolist(),
                 "balance": s.balance_value(BALANCE_ETA, model.m, model.gamma_exponent)} for s in schedule]
        plan = {"schedule": rows,
                "balance_decreasing": check_balance_condition(config["n_values"], config["beta"], config["c"],
                                                              model.m, model.gamma_exponent, BALANCE_ETA),
                "admissible_rho": admissible_rho(config["beta"], model.m, model.gamma_exponent)}
        if subcommand == "density_diag":
            points = len(config["x_prev_grid"]) * len(schedule) * (1 + len(config["b2_directions"]))
            plan["estimated_seconds"] = points * SECONDS_PER_DENSITY_POINT
            return plan

        per_increment = config["substeps"] * SECONDS_PER_FINE_STEP + CONTRASTS_PER_ROW * SECONDS_PER_CONTRAST_TERM
        fits_per_increment = CONTRASTS_PER_FIT * SECONDS_PER_CONTRAST_TERM
        total_n = sum(s.n for s in schedule)
        seconds = config["R"] * total_n * per_increment
        if "estimator_asymptotics" in config["experiments"]:
            seconds += config["R"] * total_n * fits_per_increment
        if "test_power" in config["experiments"]:
            seconds += config["R"] * schedule[-1].n * fits_per_increment * (1 + len(config["alternatives"]))
        if "jump_detection" in config["experiments"]:
            seconds += config["R"] * total_n * config["substeps"] * SECONDS_PER_FINE_STEP
        plan["estimated_seconds"] = seconds / max(1, config["threads"])
        return plan

    def run(self, subcommand, document, out_dir, dry_run=False):
        """
        Validate, then execute one subcommand.

        Returns:
            dict: success flag, status (ok / tolerance_failure / config_error /
            runtime_error), errors, messages, files written and a summary.
        """
        errors = self.validate_inputs(subcommand, document)
        if errors:
            return {'success': False, 'status': STATUS_CONFIG, 'errors': errors, 'messages': [], 'files': {}}

        config = self.effective_config(subcommand, document)
        digest = config_hash(subcommand, config)
        if dry_run:
            return {'success': True, 'status': STATUS_OK, 'errors': [], 'files': {}, 'dry_run': True,
                    'messages': [f"Dry run of {subcommand} (config {digest}); nothing was simulated"],
                    'summary': {"config_hash": digest, **self.plan(subcommand, config)}}

        try:
            os.makedirs(out_dir, exist_ok=True)
        except OSError as e:
            return {'success': False, 'status': STATUS_CONFIG, 'errors': [f"out: cannot create directory: {e}"],
                    'messages': [], 'files': {}}

        runner = {"simulate": self.run_simulate, "fit": self.run_fit,
                  "lan_verify": self.run_lan_verify, "density_diag": self.run_density_diag}[subcommand]
        messages = []
        try:
            return runner(config, out_dir, digest, messages)
        except ModelValidationError as e:
            return {'success': False, 'status': STATUS_CONFIG, 'errors': [str(e)], 'messages': messages, 'files': {}}
        except (JumpLanError, ArithmeticError, OSError) as e:
            logger.error(f"{subcommand} failed: {e}")
            return {'success': False, 'status': STATUS_RUNTIME, 'errors': [str(e)], 'messages': messages,
                    'files': {}}

    def run_simulate(self, config, out_dir, digest, messages):
        model = load_model_document(config["model"])
        alpha = self._alpha(model, config["alpha"])
        sim = SimConfig(n=config["n"], h_n=config["h_n"], substeps=config["substeps"],
                        x0=None if config["x0"] is None else tuple(config["x0"]),
                        master_seed=config["seed"], stream_index=config["stream_index"], burn_in=config["burn_in"])
        path = simulate_path(model, alpha, sim)
        messages.append(f"Simulated {path.n} increments of '{model.kind}' over T_n = {sim.horizon:.6g}")

        files = {'path_csv': os.path.join(out_dir, "path.csv"), 'jumps_csv': os.path.join(out_dir, "jumps.csv")}
        path.to_csv(files['path_csv'])
        latent_to_frame(path).to_csv(files['jumps_csv'], index=False)
        if config["binary"]:
            files['path_binary'] = os.path.join(out_dir, "path.bin")
            path.to_binary(files['path_binary'])
        messages.append(f"Path and latent jump record written to {out_dir}")
        summary = {"config_hash": digest, "n": path.n, "h_n": path.h_n, "horizon": sim.horizon,
                   "jumps": path.latent.total}
        return {'success': True, 'status': STATUS_OK, 'errors': [], 'messages': messages, 'files': files,
                'summary': summary}

    def run_fit(self, config, out_dir, digest, messages):
        model = load_model_document(config["model"])
        rule = ThresholdRule(**config["threshold"])
        if config["path"].endswith(".bin"):
            path = Path.from_binary(config["path"])
        else:
            path = Path.from_csv(config["path"])
        fit = fit_qmle(model, path, rule, config["init"], self._fit_options(config))
        messages.append(f"QMLE ({fit.mode}) finished after {fit.iterations} iterations")
        bayes = None
        if config["bayes"]:
            try:
                bayes = fit_bayes(model, path, rule, grid=GridSpec(nodes=config["bayes_nodes"]), fit=fit)
                messages.append(f"Bayes estimator computed on a {config['bayes_nodes']}-node grid")
            except UnsupportedModeError as e:
                return {'success': False, 'status': STATUS_CONFIG, 'errors': [f"bayes: {e}"],
                        'messages': messages, 'files': {}}

        document = {"config_hash": digest, "model": model.to_document(), "n": path.n, "h_n": path.h_n,
                    "threshold": config["threshold"], "param_names": list(model.param_names),
                    "qmle": fit.to_dict(), "bayes": bayes.to_dict() if bayes else None}
        files = {'fit_json': os.path.join(out_dir, "fit.json")}
        _write_json(document, files['fit_json'])
        summary = {"config_hash": digest, "converged": fit.converged, "mode": fit.mode,
                   "alpha_hat": fit.alpha_hat.to_list(), "standard_errors": [float(s) for s in fit.standard_errors],
                   "param_names": list(model.param_names)}
        if not fit.converged:
            return {'success': False, 'status': STATUS_TOLERANCE, 'errors': [f"QMLE did not converge: {fit.message}"],
                    'messages': messages, 'files': files, 'summary': summary}
        return {'success': True, 'status': STATUS_OK, 'errors': [], 'messages': messages, 'files': files,
                'summary': summary}

    def run_lan_verify(self, config, out_dir, digest, messages):
        model = load_model_document(config["model"])
        cfg = self._lan_config(config, model, digest)
        gamma = gamma_for(cfg)
        messages.append(f"Fisher information from {gamma.source}")

        report = lan_expansion_experiment(cfg, gamma, self.progress_callback)
        messages.append(f"LAN expansion over n = {cfg.n_values} with R = {cfg.R}")
        checks = {f"lan.{k}": v for k, v in report.checks.items()}
        experiments = {}
        runners = {"estimator_asymptotics": lambda: estimator_asymptotics_experiment(cfg, gamma, self.progress_callback),
                   "test_power": lambda: wald_power_experiment(cfg, gamma=gamma, progress_callback=self.progress_callback),
                   "jump_detection": lambda: jump_detection_experiment(cfg, self.progress_callback)}
        for name in EXPERIMENTS:
            if name not in config["experiments"]:
                continue
            experiments[name] = runners[name]()
            checks.update({f"{name}.{k}": bool(v) for k, v in experiments[name]["checks"].items()})
            messages.append(f"{name} finished")

        paths = write_lan_report(report, out_dir, extra={"model": model.to_document(), "experiments": experiments})
        files = {'lan_report_json': paths[0], 'lan_rows_csv': paths[1]}
        passed = all(checks.values())
        summary = {"config_hash": digest, "checks": checks, "passed": passed,
                   "aggregates": report.aggregates}
        if not passed:
            failed = [k for k, v in checks.items() if not v]
            return {'success': False, 'status': STATUS_TOLERANCE, 'errors': [f"Checks failed: {failed}"],
                    'messages': messages, 'files': files, 'summary': summary}
        return {'success': True, 'status': STATUS_OK, 'errors': [], 'messages': messages, 'files': files,
                'summary': summary}

    def run_density_diag(self, config, out_dir, digest, messages):
        model = load_model_document(config["model"])
        alpha = self._alpha(model, config["alpha"])
        rule = ThresholdRule(**config["threshold"])
        quad = QuadSpec(**config["quad"])
        common = dict(quad=quad, beta=config["beta"], c=config["c"], delta=config["delta"], threads=config["threads"])

        b1 = diagnose_b1(model, alpha, config["x_prev_grid"], config["n_values"], rule,
                         reference=config["reference"], **common)
        frames = [b1.to_frame().assign(series="b1")]
        checks = {"b1.decreasing": b1.is_decreasing(config["decrease_slack"])}
        slopes = {"b1": b1.slope}
        messages.append(f"B1 series over n = {sorted(config['n_values'])}, slope {b1.slope:.3g}")
        for k, direction in enumerate(config["b2_directions"]):
            b2 = diagnose_b2(model, alpha, direction, config["x_prev_grid"], config["n_values"], rule,
                             order=config["b2_order"], **common)
            frames.append(b2.to_frame().assign(series=f"b2_{k}"))
            checks[f"b2_{k}.decreasing"] = b2.is_decreasing(config["decrease_slack"])
            slopes[f"b2_{k}"] = b2.slope
            messages.append(f"B2 series for direction {direction}, slope {b2.slope:.3g}")

        table = pd.concat(frames, ignore_index=True)[["series", "n", "h_n", "metric", "value"]]
        files = {'density_diag_csv': os.path.join(out_dir, "density_diag.csv")}
        table.to_csv(files['density_diag_csv'], index=False)
        passed = all(checks.values())
        summary = {"config_hash": digest, "checks": checks, "slopes": slopes, "passed": passed}
        if not passed:
            failed = [k for k, v in checks.items() if not v]
            return {'success': False, 'status': STATUS_TOLERANCE, 'errors': [f"Checks failed: {failed}"],
                    'messages': messages, 'files': files, 'summary': summary}
        return {'success': True, 'status': STATUS_OK, 'errors': [], 'messages': messages, 'files': files,
                'summary': summary}
