"""End-to-end pipeline: targets -> design -> emulator -> both calibrations.

Each stage writes its artifacts (CSV for tables, JSON for metadata) into
the run directory as soon as it finishes, embeds the resolved-config hash
and seed in every file, and is deterministic given the config, so a rerun
with an identical config reproduces the CSV artifacts byte for byte.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ann, crc, doe, imis
from . import calibrate as cal
from .posterior import Posterior, diagnostics

log = logging.getLogger(__name__)

# Stage seeds derive from the global seed by fixed offsets.
SEED_OFFSETS = {
    "targets": 1, "doe": 2, "split": 3, "train": 4,
    "hmc": 5, "imis": 6, "predictive": 7,
}

DEFAULT_CONFIG = {
    "seed": 1,
    "out_dir": "emucal_run",
    "life_table": None,
    "scale": "full",
    "targets": {"runs": 100, "n_adenoma": 500, "n_incid": 100_000},
    "doe": {"n": 10_000, "split_fraction": 0.8},
    "ann": {
        "hidden_layers": [100, 100],
        "batch_size": 128,
        "learning_rate": 1e-3,
        "max_epochs": 1000,
        "patience": 50,
    },
    "hmc": {
        "chains": 4, "warmup": 1000, "samples": 1000,
        "leapfrog_steps": 50, "target_accept": 0.8, "metric": "diag",
    },
    "imis": {
        "n_initial": 1000, "batch_size": 100,
        "max_iterations": 100, "resample_size": 4000,
    },
    "predictive_draws": 500,
}

# Desk scale: same pipeline, sizes cut for a quick run on a laptop.
SCALE_PRESETS = {
    "full": {},
    "desk": {
        "targets": {"runs": 30, "n_adenoma": 500, "n_incid": 20_000},
        "doe": {"n": 2000, "split_fraction": 0.8},
        "ann": {"max_epochs": 800},
        "hmc": {"chains": 2, "warmup": 500, "samples": 500},
        "imis": {"n_initial": 500, "max_iterations": 20, "resample_size": 2000},
        "predictive_draws": 200,
    },
}

ARTIFACTS = {
    "config": "config_resolved.json",
    "truth": "truth.json",
    "targets": "targets.csv",
    "design": "design.csv",
    "model": "ann_model.json",
    "train_report": "train_report.json",
    "scatter": "validation_scatter.csv",
    "posterior_hmc": "posterior_hmc.csv",
    "posterior_hmc_summary": "posterior_hmc_summary.json",
    "posterior_imis": "posterior_imis.csv",
    "posterior_imis_summary": "posterior_imis_summary.json",
    "density": "density_grids.csv",
    "predictive": "posterior_predictive.csv",
    "comparison": "comparison.json",
}


class ConfigError(ValueError):
    """Bad configuration or missing input file."""


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def resolve_config(user: dict | None = None, scale: str | None = None,
                   seed: int | None = None, out_dir: str | None = None) -> dict:
    """Merge defaults, scale preset, user config, and CLI overrides.

    Precedence (lowest to highest): defaults, scale preset, config file,
    explicit overrides.  Unknown top-level or section keys are rejected.
    """
    user = user or {}
    chosen_scale = scale or user.get("scale") or DEFAULT_CONFIG["scale"]
    if chosen_scale not in SCALE_PRESETS:
        raise ConfigError(f"unknown scale {chosen_scale!r}; expected one of "
                          f"{sorted(SCALE_PRESETS)}")
    cfg = _deep_merge(DEFAULT_CONFIG, SCALE_PRESETS[chosen_scale])
    cfg["scale"] = chosen_scale

    for key, value in user.items():
        if key not in DEFAULT_CONFIG:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(DEFAULT_CONFIG[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config section {key!r} must be a mapping")
            unknown = set(value) - set(DEFAULT_CONFIG[key])
            if unknown:
                raise ConfigError(f"unknown keys in config section {key!r}: {sorted(unknown)}")
            cfg[key] = _deep_merge(cfg[key], value)
        elif key != "scale":
            cfg[key] = value
    if seed is not None:
        cfg["seed"] = int(seed)
    if out_dir is not None:
        cfg["out_dir"] = str(out_dir)
    return cfg


def load_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"config file {path} must contain a JSON object")
    return doc


def config_hash(cfg: dict) -> str:
    """Hash of the scientific configuration (output location excluded)."""
    hashable = {k: v for k, v in cfg.items() if k != "out_dir"}
    canonical = json.dumps(hashable, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def stage_seed(cfg: dict, stage: str) -> int:
    return int(cfg["seed"]) + SEED_OFFSETS[stage]


def _artifact_comment(cfg: dict) -> str:
    return f"emucal config_sha256={config_hash(cfg)} seed={cfg['seed']}"


def _load_life_table(cfg: dict) -> crc.LifeTable:
    path = cfg.get("life_table")
    if path is None:
        return crc.LifeTable.default()
    if not Path(path).exists():
        raise ConfigError(f"life table not found: {path}")
    return crc.LifeTable.from_csv(path)


def _write_json(path, doc: dict) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


@dataclass
class PipelineResult:
    """Everything the pipeline produced, for use in code and tests."""

    config: dict
    out_dir: Path
    stage_seconds: dict = field(default_factory=dict)
    targets: crc.TargetSet | None = None
    design: doe.Design | None = None
    model: ann.AnnModel | None = None
    train_report: ann.TrainReport | None = None
    validation: ann.ValidationResult | None = None
    posterior_hmc: Posterior | None = None
    posterior_imis: Posterior | None = None
    comparison: dict | None = None


def run_gen_targets(cfg: dict, out_dir: Path) -> crc.TargetSet:
    lt = _load_life_table(cfg)
    tcfg = cfg["targets"]
    seed = stage_seed(cfg, "targets")
    log.info("generating targets: runs=%d n_adenoma=%d n_incid=%d seed=%d",
             tcfg["runs"], tcfg["n_adenoma"], tcfg["n_incid"], seed)
    targets = crc.generate_targets(
        crc.BASE_CASE, lt, runs=tcfg["runs"], n_adenoma=tcfg["n_adenoma"],
        n_incid=tcfg["n_incid"], seed=seed)
    targets.to_csv(out_dir / ARTIFACTS["targets"], comment=_artifact_comment(cfg))
    _write_json(out_dir / ARTIFACTS["truth"], {
        "config_sha256": config_hash(cfg),
        "parameters": dict(zip(crc.CALIBRATED_NAMES,
                               crc.BASE_CASE.calibrated_vector().tolist())),
    })
    return targets


def run_doe_stage(cfg: dict, out_dir: Path) -> doe.Design:
    lt = _load_life_table(cfg)
    seed = stage_seed(cfg, "doe")
    n = cfg["doe"]["n"]
    log.info("running design of experiments: n=%d seed=%d", n, seed)
    design = doe.run_design(doe.PriorSpec.crc(), n, seed, lt)
    design.to_csv(out_dir / ARTIFACTS["design"], comment=_artifact_comment(cfg))
    return design


def run_train_stage(cfg: dict, out_dir: Path, design: doe.Design
                    ) -> tuple[ann.AnnModel, ann.TrainReport, ann.ValidationResult]:
    acfg = cfg["ann"]
    train_design, valid_design = doe.split(design, cfg["doe"]["split_fraction"],
                                           stage_seed(cfg, "split"))
    config = ann.AnnConfig(input_dim=design.inputs.shape[1],
                           hidden_layers=tuple(acfg["hidden_layers"]),
                           output_dim=design.outputs.shape[1])
    opts = ann.TrainOptions(batch_size=acfg["batch_size"],
                            learning_rate=acfg["learning_rate"],
                            max_epochs=acfg["max_epochs"],
                            patience=acfg["patience"])
    log.info("training emulator: %s on %d/%d rows", config.layer_sizes,
             train_design.n_rows, valid_design.n_rows)
    model, report = ann.train(train_design, valid_design, config, opts,
                              seed=stage_seed(cfg, "train"))
    validation = ann.validate(model, valid_design)
    log.info("validation R^2: aggregate %.5f, min per-output %.5f",
             validation.aggregate_r2, np.nanmin(validation.r2_per_output))
    model.save(out_dir / ARTIFACTS["model"], comment=_artifact_comment(cfg))
    _write_json(out_dir / ARTIFACTS["train_report"],
                dict(report.to_dict(), config_sha256=config_hash(cfg)))
    validation.to_scatter_csv(out_dir / ARTIFACTS["scatter"],
                              comment=_artifact_comment(cfg))
    return model, report, validation


def run_calibrate_stage(cfg: dict, out_dir: Path, model: ann.AnnModel,
                        targets: crc.TargetSet) -> Posterior:
    hcfg = cfg["hmc"]
    lp = cal.LogPosterior(model, targets, doe.PriorSpec.crc())
    hmc_config = cal.HmcConfig(
        chains=hcfg["chains"], warmup=hcfg["warmup"], samples=hcfg["samples"],
        leapfrog_steps=hcfg["leapfrog_steps"], target_accept=hcfg["target_accept"],
        metric=hcfg["metric"], seed=stage_seed(cfg, "hmc"))
    log.info("sampling emulator posterior: %d chains x (%d + %d)",
             hmc_config.chains, hmc_config.warmup, hmc_config.samples)
    posterior = cal.hmc_sample(lp, hmc_config)
    report = diagnostics(posterior)
    log.info("emulator posterior: acceptance %.2f, max R-hat %s, status %s",
             posterior.stats["acceptance"], report.max_rhat, report.status)
    posterior.to_csv(out_dir / ARTIFACTS["posterior_hmc"],
                     comment=_artifact_comment(cfg))
    posterior.summary_to_json(out_dir / ARTIFACTS["posterior_hmc_summary"],
                              extra={"config_sha256": config_hash(cfg),
                                     "diagnostics": report.to_dict()})
    return posterior


def simulator_log_likelihood(targets: crc.TargetSet, lt: crc.LifeTable,
                             priors: doe.PriorSpec | None = None):
    """Batch log likelihood of the cohort simulator (for IMIS).

    Points outside the prior box get -inf without a simulator run.
    """
    if priors is None:
        priors = doe.PriorSpec.crc()

    def loglik(thetas: np.ndarray) -> np.ndarray:
        thetas = np.atleast_2d(thetas)
        out = np.full(thetas.shape[0], -np.inf)
        for i in np.flatnonzero(priors.contains(thetas)):
            params = crc.BASE_CASE.with_calibrated(thetas[i])
            _, outputs = crc.run_cohort(params, lt)
            out[i] = cal.normal_log_likelihood(targets.mean, targets.se,
                                               outputs.to_vector())
        return out

    return loglik


def run_imis_stage(cfg: dict, out_dir: Path, targets: crc.TargetSet) -> Posterior:
    lt = _load_life_table(cfg)
    icfg = cfg["imis"]
    imis_config = imis.ImisConfig(
        n_initial=icfg["n_initial"], batch_size=icfg["batch_size"],
        max_iterations=icfg["max_iterations"],
        resample_size=icfg["resample_size"], seed=stage_seed(cfg, "imis"))
    log.info("running IMIS on the simulator: budget %d evaluations",
             imis_config.max_evaluations)
    posterior = imis.imis_run(simulator_log_likelihood(targets, lt),
                              doe.PriorSpec.crc(), imis_config)
    log.info("IMIS finished: %d evaluations, %d components, unique fraction %.3f",
             posterior.stats["n_evaluations"], posterior.stats["n_components"],
             posterior.stats["unique_fraction"])
    posterior.to_csv(out_dir / ARTIFACTS["posterior_imis"],
                     comment=_artifact_comment(cfg))
    posterior.summary_to_json(out_dir / ARTIFACTS["posterior_imis_summary"],
                              extra={"config_sha256": config_hash(cfg)})
    return posterior


def write_density_grids(cfg: dict, out_dir: Path, posterior_a: Posterior,
                        posterior_b: Posterior, n_grid: int = 200) -> None:
    """Per-parameter prior/posterior density curves (plot data)."""
    from scipy.stats import gaussian_kde

    priors = doe.PriorSpec.crc()
    path = out_dir / ARTIFACTS["density"]
    with open(path, "w", newline="") as fh:
        fh.write(f"# {_artifact_comment(cfg)}\n")
        writer = csv.writer(fh)
        writer.writerow(["parameter", "value", "prior_pdf", "hmc_pdf", "imis_pdf"])
        for j, name in enumerate(priors.names):
            grid = np.linspace(priors.lower[j], priors.upper[j], n_grid)
            prior_pdf = 1.0 / priors.ranges[j]
            kde_a = gaussian_kde(posterior_a.draws[:, j])
            draws_b = posterior_b.draws[:, j]
            # a degenerate resample can collapse a column; guard the KDE
            if np.std(draws_b) > 0:
                kde_b = gaussian_kde(draws_b)
                pdf_b = kde_b(grid)
            else:
                pdf_b = np.zeros_like(grid)
            pdf_a = kde_a(grid)
            for x, pa, pb in zip(grid, pdf_a, pdf_b):
                writer.writerow([name, repr(float(x)), repr(float(prior_pdf)),
                                 repr(float(pa)), repr(float(pb))])


def write_posterior_predictive(cfg: dict, out_dir: Path, posterior: Posterior,
                               targets: crc.TargetSet) -> None:
    """Push posterior draws through the simulator; write predictive bands."""
    lt = _load_life_table(cfg)
    n_draws = min(cfg["predictive_draws"], posterior.draws.shape[0])
    rng = np.random.default_rng(stage_seed(cfg, "predictive"))
    idx = rng.choice(posterior.draws.shape[0], size=n_draws, replace=False)
    outputs = np.empty((n_draws, len(targets)))
    for i, theta in enumerate(posterior.draws[idx]):
        params = crc.BASE_CASE.with_calibrated(theta)
        _, out = crc.run_cohort(params, lt)
        outputs[i] = out.to_vector()
    lo, mid, hi = np.percentile(outputs, [2.5, 50.0, 97.5], axis=0)
    mean = outputs.mean(axis=0)

    path = out_dir / ARTIFACTS["predictive"]
    with open(path, "w", newline="") as fh:
        fh.write(f"# {_artifact_comment(cfg)}\n")
        writer = csv.writer(fh)
        writer.writerow(["target_id", "series", "age_bin", "target_mean",
                         "target_lo", "target_hi", "pred_mean", "pred_lo",
                         "pred_median", "pred_hi"])
        for t in range(len(targets)):
            t_lo = targets.mean[t] - 1.96 * targets.se[t]
            t_hi = targets.mean[t] + 1.96 * targets.se[t]
            writer.writerow([
                targets.target_id[t], targets.series[t], targets.age_bin[t],
                repr(float(targets.mean[t])), repr(float(t_lo)), repr(float(t_hi)),
                repr(float(mean[t])), repr(float(lo[t])), repr(float(mid[t])),
                repr(float(hi[t])),
            ])


def compare_posteriors(draws_a: np.ndarray, draws_b: np.ndarray,
                       truth: dict[str, float], param_names) -> dict:
    """Posterior-mean accuracy of method A vs method B against the truth.

    The deviation ratio is |A - truth| / |B - truth| per parameter (None
    when B's deviation is zero).
    """
    rows = {}
    n_better = 0
    for j, name in enumerate(param_names):
        t = float(truth[name])
        mean_a = float(draws_a[:, j].mean())
        mean_b = float(draws_b[:, j].mean())
        dev_a = abs(mean_a - t)
        dev_b = abs(mean_b - t)
        ratio = dev_a / dev_b if dev_b > 0 else None
        if ratio is not None and ratio < 1.0:
            n_better += 1
        lo_a, hi_a = np.percentile(draws_a[:, j], [2.5, 97.5])
        rows[name] = {
            "truth": t,
            "mean_a": mean_a,
            "mean_b": mean_b,
            "deviation_a": dev_a,
            "deviation_b": dev_b,
            "deviation_ratio": ratio,
            "ci95_a": [float(lo_a), float(hi_a)],
            "covered_a": bool(lo_a <= t <= hi_a),
        }
    return {"parameters": rows, "n_ratio_below_1": n_better}


def format_comparison_table(report: dict) -> str:
    """Plain-text table of the comparison report."""
    header = (f"{'parameter':>10s} {'truth':>12s} {'A mean':>12s} {'B mean':>12s} "
              f"{'A dev':>11s} {'B dev':>11s} {'ratio':>9s}")
    lines = [header]
    for name, row in report["parameters"].items():
        ratio = row["deviation_ratio"]
        lines.append(
            f"{name:>10s} {row['truth']:12.6g} {row['mean_a']:12.6g} "
            f"{row['mean_b']:12.6g} {row['deviation_a']:11.5g} "
            f"{row['deviation_b']:11.5g} "
            + (f"{ratio:9.4f}" if ratio is not None else "      n/a"))
    lines.append(f"ratio < 1 for {report['n_ratio_below_1']} of "
                 f"{len(report['parameters'])} parameters")
    return "\n".join(lines)


def run_pipeline(cfg: dict) -> PipelineResult:
    """Execute every stage; artifacts land in cfg['out_dir'].

    Raises on the first failing stage; artifacts written by earlier stages
    are left in place.
    """
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(out_dir / ARTIFACTS["config"],
                dict(cfg, config_sha256=config_hash(cfg)))
    result = PipelineResult(config=cfg, out_dir=out_dir)

    def timed(stage, fn, *args):
        t0 = time.perf_counter()
        try:
            value = fn(cfg, out_dir, *args)
        except Exception as exc:
            raise RuntimeError(f"pipeline stage {stage!r} failed: {exc}") from exc
        result.stage_seconds[stage] = time.perf_counter() - t0
        log.info("stage %s: %.1f s", stage, result.stage_seconds[stage])
        return value

    result.targets = timed("targets", run_gen_targets)
    result.design = timed("doe", run_doe_stage)
    result.model, result.train_report, result.validation = \
        timed("train", run_train_stage, result.design)
    result.posterior_hmc = timed("calibrate", run_calibrate_stage,
                                 result.model, result.targets)
    result.posterior_imis = timed("imis", run_imis_stage, result.targets)

    t0 = time.perf_counter()
    try:
        write_density_grids(cfg, out_dir, result.posterior_hmc,
                            result.posterior_imis)
        write_posterior_predictive(cfg, out_dir, result.posterior_hmc,
                                   result.targets)
    except Exception as exc:
        raise RuntimeError(f"pipeline stage 'plots' failed: {exc}") from exc
    result.stage_seconds["plots"] = time.perf_counter() - t0

    truth = dict(zip(crc.CALIBRATED_NAMES, crc.BASE_CASE.calibrated_vector()))
    comparison = compare_posteriors(result.posterior_hmc.draws,
                                    result.posterior_imis.draws, truth,
                                    crc.CALIBRATED_NAMES)
    comparison.update({
        "config_sha256": config_hash(cfg),
        "seed": cfg["seed"],
        "method_a": "hmc_on_emulator",
        "method_b": "imis_on_simulator",
        "stage_seconds": result.stage_seconds,
        "validation_r2": {
            "aggregate": result.validation.aggregate_r2,
            "min_per_output": float(np.nanmin(result.validation.r2_per_output)),
        },
        "budget": {
            "doe_evaluations": cfg["doe"]["n"],
            "imis_evaluations": result.posterior_imis.stats["n_evaluations"],
            "hmc_gradient_evaluations": result.posterior_hmc.stats["n_grad_evals"],
        },
    })
    _write_json(out_dir / ARTIFACTS["comparison"], comparison)
    result.comparison = comparison
    log.info("pipeline complete; artifacts in %s", out_dir)
    return result
