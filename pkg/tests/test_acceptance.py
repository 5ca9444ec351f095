"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The full-scale replications are expensive (about three minutes each); the
whole module runs in roughly half an hour.  Set EMUCAL_ACCEPT_REPS to
lower the replication count during development (the shipped criterion
requires the default of 10).
"""

import json
import os
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import stats as sps

from emucal import ann, crc, doe, imis, pipeline
from emucal import calibrate as cal
from .helpers import exact_target_model, microsim_se, uniform_targets

N_REPS = int(os.environ.get("EMUCAL_ACCEPT_REPS", "10"))

TRUTH = crc.BASE_CASE.calibrated_vector()


def _report(criterion, passed, detail):
    line = f"[criterion {criterion}] {'PASS' if passed else 'FAIL'} - {detail}"
    print(line, flush=True)
    return passed


@pytest.fixture(scope="module")
def full_replications(tmp_path_factory):
    """N_REPS full-scale runs; the first one runs every stage via the pipeline."""
    runs = []
    for rep in range(1, N_REPS + 1):
        t0 = time.perf_counter()
        cfg = pipeline.resolve_config(
            seed=rep, out_dir=str(tmp_path_factory.mktemp(f"full{rep}")))
        if rep == 1:
            result = pipeline.run_pipeline(cfg)
            validation = result.validation
            posterior = result.posterior_hmc
            targets = result.targets
            model = result.model
            comparison = result.comparison
            stage_seconds = result.stage_seconds
        else:
            out_dir = Path(cfg["out_dir"])
            targets = pipeline.run_gen_targets(cfg, out_dir)
            design = pipeline.run_doe_stage(cfg, out_dir)
            model, _, validation = pipeline.run_train_stage(cfg, out_dir, design)
            posterior = pipeline.run_calibrate_stage(cfg, out_dir, model, targets)
            comparison = None
            stage_seconds = {}
        lo, hi = posterior.credible_interval(0.95)
        runs.append({
            "seed": rep,
            "aggregate_r2": validation.aggregate_r2,
            "min_r2": float(np.nanmin(validation.r2_per_output)),
            "covered": bool(np.all((lo <= TRUTH) & (TRUTH <= hi))),
            "n_covered": int(np.sum((lo <= TRUTH) & (TRUTH <= hi))),
            "missed": [n for j, n in enumerate(posterior.param_names)
                       if not lo[j] <= TRUTH[j] <= hi[j]],
            "max_rhat": float(posterior.rhat().max()),
            "posterior": posterior,
            "targets": targets,
            "model": model,
            "comparison": comparison,
            "stage_seconds": stage_seconds,
            "wall_clock": time.perf_counter() - t0,
        })
    return runs


def _true_posterior_coverage(run):
    """Coverage under the simulator's own posterior, by importance
    reweighting the emulator draws with the exact likelihood.

    Separates emulator error from the geometry of the problem itself: if
    the truth falls outside even these corrected intervals, no sampler of
    the exact posterior would have covered it.
    """
    draws = run["posterior"].draws
    priors = doe.PriorSpec.crc()
    lp = cal.LogPosterior(run["model"], run["targets"], priors)
    ll_emulator = cal.log_likelihood(run["model"], run["targets"], draws, priors)
    exact = pipeline.simulator_log_likelihood(run["targets"],
                                              crc.LifeTable.default(), priors)
    lw = exact(draws) - ll_emulator
    w = np.exp(lw - lw.max())
    w /= w.sum()
    covered = []
    for j in range(draws.shape[1]):
        order = np.argsort(draws[:, j])
        cw = np.cumsum(w[order])
        lo, hi = np.interp([0.025, 0.975], cw / cw[-1], draws[order, j])
        covered.append(lo <= TRUTH[j] <= hi)
    return all(covered), float(1.0 / np.sum(w ** 2))


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    t0 = time.perf_counter()
    cfg = pipeline.resolve_config(
        scale="desk", seed=101, out_dir=str(tmp_path_factory.mktemp("desk")))
    result = pipeline.run_pipeline(cfg)
    return {"result": result, "wall_clock": time.perf_counter() - t0}


def test_criterion_1_surrogate_fidelity(full_replications, desk_run):
    rep1 = full_replications[0]
    full_ok = rep1["aggregate_r2"] >= 0.99 and rep1["min_r2"] >= 0.95
    desk_r2 = desk_run["result"].validation.aggregate_r2
    desk_ok = desk_r2 >= 0.95
    time_ok = rep1["wall_clock"] < 30 * 60 and desk_run["wall_clock"] < 5 * 60
    passed = _report(
        1, full_ok and desk_ok and time_ok,
        f"full R2={rep1['aggregate_r2']:.5f} (min per-output {rep1['min_r2']:.5f}), "
        f"desk R2={desk_r2:.5f}; full {rep1['wall_clock']:.0f}s, "
        f"desk {desk_run['wall_clock']:.0f}s")
    assert passed


def test_criterion_2_truth_recovery(full_replications):
    n_pass = sum(run["covered"] for run in full_replications)
    detail = ", ".join(
        f"seed {run['seed']}: {run['n_covered']}/9"
        + (f" (missed {','.join(run['missed'])})" if run["missed"] else "")
        for run in full_replications)
    required = max(N_REPS - 1, 1)
    ok = n_pass >= required
    if not ok:
        # diagnose whether the exact posterior would have covered either:
        # reweight the emulator draws by the simulator's own likelihood
        diag = []
        for run in full_replications:
            if not run["covered"]:
                exact_covered, ess = _true_posterior_coverage(run)
                diag.append(f"seed {run['seed']}: exact-posterior coverage="
                            f"{exact_covered} (IS ESS {ess:.0f})")
        detail += " | exact-likelihood check: " + "; ".join(diag)
    passed = _report(2, ok,
                     f"{n_pass}/{len(full_replications)} replications cover all "
                     f"9 truths ({detail})")
    assert passed


def test_criterion_3_relative_accuracy(full_replications):
    comparison = full_replications[0]["comparison"]
    n_better = comparison["n_ratio_below_1"]
    ratios = {name: row["deviation_ratio"]
              for name, row in comparison["parameters"].items()}
    passed = _report(
        3, n_better >= 7,
        f"deviation ratio < 1 for {n_better}/9 parameters: "
        + ", ".join(f"{k}={v:.3f}" if v is not None else f"{k}=n/a"
                    for k, v in ratios.items()))
    assert passed


def test_criterion_4_efficiency(full_replications):
    rep1 = full_replications[0]
    seconds = rep1["stage_seconds"]
    budget = rep1["comparison"]["budget"]
    budget_matched = budget["imis_evaluations"] >= 0.9 * budget["doe_evaluations"]
    faster = seconds["calibrate"] < seconds["imis"]
    passed = _report(
        4, faster and budget_matched,
        f"surrogate calibration {seconds['calibrate']:.1f}s vs IMIS "
        f"{seconds['imis']:.1f}s (IMIS budget {budget['imis_evaluations']} "
        f"simulator evals vs DoE {budget['doe_evaluations']})")
    assert passed


class _StdNormal:
    dim = 9
    param_names = tuple(f"p{j}" for j in range(9))

    def value_and_grad(self, u):
        return -0.5 * np.sum(u * u, axis=1), -u


def test_criterion_5_sampler_oracles():
    t0 = time.perf_counter()
    post = cal.hmc_sample(_StdNormal(), cal.HmcConfig(seed=42))
    hmc_elapsed = time.perf_counter() - t0
    ess = post.ess()
    hmc_ok = (np.all(np.abs(post.mean()) <= 4.0 / np.sqrt(ess))
              and np.all(np.abs(post.sd() ** 2 - 1.0) <= 0.10)
              and post.rhat().max() <= 1.02
              and hmc_elapsed < 60)

    priors = doe.PriorSpec.crc()
    center = (priors.lower + priors.upper) / 2
    sd = 0.05 * priors.ranges

    def loglik(x):
        z = (x - center) / sd
        return -0.5 * np.sum(z * z, axis=1)

    t0 = time.perf_counter()
    imis_post = imis.imis_run(
        loglik, priors,
        imis.ImisConfig(n_initial=2000, batch_size=1000, max_iterations=150,
                        seed=6))
    imis_elapsed = time.perf_counter() - t0
    n_eff = imis_post.stats["unique_fraction"] * 4000
    mc_se = imis_post.sd() / np.sqrt(n_eff)
    imis_ok = (np.all(np.abs(imis_post.mean() - center) <= 4.0 * mc_se)
               and imis_elapsed < 60)

    passed = _report(
        5, hmc_ok and imis_ok,
        f"HMC: max|mean|={np.abs(post.mean()).max():.3f}, "
        f"max R-hat={post.rhat().max():.4f}, {hmc_elapsed:.1f}s; "
        f"IMIS: max mean err={np.abs(imis_post.mean() - center).max():.2e} "
        f"(4 MC-SE bound), {imis_elapsed:.1f}s")
    assert passed


def test_criterion_6_numerical_properties():
    t0 = time.perf_counter()
    rng = np.random.default_rng(123)
    failures = []

    # analytic Jacobian vs central finite differences, 100 random cases
    from .helpers import jacobian_fd_max_rel
    worst_jac = 0.0
    for case in range(100):
        hidden = tuple(rng.integers(3, 30, size=rng.integers(1, 4)))
        config = ann.AnnConfig(input_dim=9, hidden_layers=hidden, output_dim=12)
        model = ann.AnnModel.initialize(config, seed=1000 + case)
        x = rng.uniform(-1.5, 1.5, 9)
        worst_jac = max(worst_jac, jacobian_fd_max_rel(model, x))
    if worst_jac > 1e-5:
        failures.append(f"jacobian rel err {worst_jac:.2e}")

    # transition-matrix row sums over 1,000 prior draws
    lt = crc.LifeTable.default()
    priors = doe.PriorSpec.crc()
    worst_row = 0.0
    for _ in range(1000):
        params = crc.BASE_CASE.with_calibrated(
            rng.uniform(priors.lower, priors.upper))
        probs = crc.transition_probs(params, rng.uniform(50.0, 99.0), lt)
        worst_row = max(worst_row, float(np.abs(probs.sum(axis=1) - 1.0).max()))
    if worst_row > 1e-12:
        failures.append(f"row sums off by {worst_row:.2e}")

    # cohort trace conservation
    worst_trace = 0.0
    for _ in range(50):
        params = crc.BASE_CASE.with_calibrated(
            rng.uniform(priors.lower, priors.upper))
        trace, _ = crc.run_cohort(params, lt)
        worst_trace = max(worst_trace,
                          float(np.abs(trace.occupancy.sum(axis=1) - 1.0).max()))
    if worst_trace > 1e-12:
        failures.append(f"trace conservation off by {worst_trace:.2e}")

    # microsimulation vs cohort agreement, 10 prior draws
    worst_sigma = 0.0
    for draw in range(10):
        params = crc.BASE_CASE.with_calibrated(
            rng.uniform(priors.lower, priors.upper))
        out_m = crc.run_microsim(params, lt, 50_000, seed=[777, draw])
        _, out_c = crc.run_cohort(params, lt)
        se = microsim_se(params, lt, 50_000)
        gap = np.abs(out_m.to_vector() - out_c.to_vector()) / se
        worst_sigma = max(worst_sigma, float(gap.max()))
    if worst_sigma > 5.0:
        failures.append(f"microsim-cohort gap {worst_sigma:.2f} SEs")

    # prior recovery under a flat likelihood, both samplers
    means = np.linspace(0.1, 0.9, 36)
    flat_model = exact_target_model(means)
    flat_targets = uniform_targets(means, np.ones(36))
    lp = cal.LogPosterior(flat_model, flat_targets, priors)
    hmc_draws = cal.hmc_sample(lp, cal.HmcConfig(seed=9)).draws
    imis_draws = imis.imis_run(lambda x: np.zeros(x.shape[0]), priors,
                               imis.ImisConfig(seed=5)).draws
    worst_ks = 0.0
    for draws in (hmc_draws, imis_draws):
        for j in range(9):
            ks = sps.kstest(draws[:, j],
                            sps.uniform(priors.lower[j], priors.ranges[j]).cdf)
            worst_ks = max(worst_ks, float(ks.statistic))
    if worst_ks >= 0.05:
        failures.append(f"prior-recovery KS {worst_ks:.3f}")

    # scaler and box-transform roundtrips
    x = rng.normal(size=(200, 9)) * 5 + 2
    scaler = doe.Scaler.fit(x)
    scaler_err = float(np.abs(scaler.unscale(scaler.scale(x)) - x).max())
    tf = cal.BoxTransform(priors.lower, priors.upper)
    theta = rng.uniform(priors.lower, priors.upper, (200, 9))
    tf_err = float(np.abs(tf.untransform(tf.transform(theta)) - theta).max())
    if scaler_err > 1e-10 or tf_err > 1e-10:
        failures.append(f"roundtrips {scaler_err:.2e}/{tf_err:.2e}")

    elapsed = time.perf_counter() - t0
    if elapsed >= 300:
        failures.append(f"suite took {elapsed:.0f}s (budget 300s)")
    passed = _report(
        6, not failures,
        f"jac {worst_jac:.1e}, rows {worst_row:.1e}, trace {worst_trace:.1e}, "
        f"microsim {worst_sigma:.2f} SE, KS {worst_ks:.3f}, roundtrips "
        f"{scaler_err:.1e}/{tf_err:.1e}, {elapsed:.0f}s"
        + ("; failures: " + "; ".join(failures) if failures else ""))
    assert passed


def test_criterion_7_reproducibility(tmp_path):
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps({"scale": "desk", "seed": 202}))
    from emucal import cli

    outs = []
    for run in ("r1", "r2"):
        out = tmp_path / run
        code = cli.main(["pipeline", "--config", str(cfg_path),
                         "--out-dir", str(out)])
        assert code == cli.EXIT_OK
        outs.append(out)

    csvs = sorted(p.name for p in outs[0].glob("*.csv"))
    mismatched = [name for name in csvs
                  if (outs[0] / name).read_bytes() != (outs[1] / name).read_bytes()]
    passed = _report(
        7, bool(csvs) and not mismatched,
        f"{len(csvs)} CSV artifacts byte-identical across reruns"
        + (f"; mismatched: {mismatched}" if mismatched else ""))
    assert passed
