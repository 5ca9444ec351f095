"""Calibrate the emulator with Hamiltonian Monte Carlo.

Generates synthetic targets at the base-case parameter values, trains an
emulator, samples its posterior, and checks whether the 95% credible
intervals recover the generating values.  Desk-sized to finish in about
two minutes.
"""

import numpy as np

from emucal import ann, calibrate, crc, doe
from emucal.posterior import diagnostics

lt = crc.LifeTable.default()
priors = doe.PriorSpec.crc()
truth = crc.BASE_CASE.calibrated_vector()

print("generating targets at the base case (the 'truth' to recover)...")
targets = crc.generate_targets(crc.BASE_CASE, lt, runs=30, n_adenoma=500,
                               n_incid=20_000, seed=1)

print("building the emulator (2,000-point design)...")
design = doe.run_design(priors, n=2000, seed=2)
train_design, valid_design = doe.split(design, 0.8, seed=3)
model, report = ann.train(train_design, valid_design,
                          opts=ann.TrainOptions(max_epochs=400), seed=4)
print(f"  validation R^2 = {report.aggregate_r2:.4f}")

print("sampling the emulator posterior (2 chains x 1000 draws)...")
lp = calibrate.LogPosterior(model, targets, priors)
post = calibrate.hmc_sample(lp, calibrate.HmcConfig(
    chains=2, warmup=500, samples=500, leapfrog_steps=50, seed=5))

report = diagnostics(post)
print(f"  acceptance {post.stats['acceptance']:.2f}, "
      f"max R-hat {report.max_rhat:.4f}, min ESS {report.min_ess:.0f}, "
      f"status {report.status}")

lo, hi = post.credible_interval(0.95)
mean = post.mean()
print(f"\n{'parameter':>9s} {'truth':>11s} {'post mean':>11s} "
      f"{'2.5%':>11s} {'97.5%':>11s}  covered")
for j, name in enumerate(post.param_names):
    covered = "yes" if lo[j] <= truth[j] <= hi[j] else "NO"
    print(f"{name:>9s} {truth[j]:11.5g} {mean[j]:11.5g} "
          f"{lo[j]:11.5g} {hi[j]:11.5g}  {covered}")
n_cov = int(np.sum((lo <= truth) & (truth <= hi)))
print(f"\ncredible intervals cover {n_cov}/9 generating values")
