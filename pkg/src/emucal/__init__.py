"""Bayesian calibration of simulation models through neural-network emulators.

The package calibrates a colorectal-cancer natural-history model two ways:
by Hamiltonian Monte Carlo on a trained feedforward emulator, and directly
with incremental mixture importance sampling as the accuracy/efficiency
baseline.  See the demos/ directory for narrative walkthroughs and the
``emucal`` CLI for the scripted pipeline.
"""

from .ann import AnnConfig, AnnModel, TrainOptions, TrainReport, logistic, train, validate
from .calibrate import (BoxTransform, HmcConfig, LogPosterior,
                        grad_log_posterior, hmc_sample, leapfrog,
                        log_likelihood, normal_log_likelihood)
from .crc import (BASE_CASE, CALIBRATED_NAMES, CohortTrace, HealthState,
                  LifeTable, ModelOutputs, NatHistParams, TargetSet,
                  generate_targets, initial_distribution, run_cohort,
                  run_microsim, transition_probs, weibull_hazard)
from .doe import Design, PriorSpec, Scaler, lhs_sample, run_design, split
from .imis import ImisConfig, MixtureState, effective_unique_fraction, imis_run
from .posterior import (DiagnosticsReport, Posterior, diagnostics,
                        effective_sample_size, split_rhat)

__version__ = "0.1.0"

__all__ = [
    "AnnConfig", "AnnModel", "TrainOptions", "TrainReport", "logistic",
    "train", "validate",
    "BoxTransform", "HmcConfig", "LogPosterior", "grad_log_posterior",
    "hmc_sample", "leapfrog", "log_likelihood", "normal_log_likelihood",
    "BASE_CASE", "CALIBRATED_NAMES", "CohortTrace", "HealthState",
    "LifeTable", "ModelOutputs", "NatHistParams", "TargetSet",
    "generate_targets", "initial_distribution", "run_cohort", "run_microsim",
    "transition_probs", "weibull_hazard",
    "Design", "PriorSpec", "Scaler", "lhs_sample", "run_design", "split",
    "ImisConfig", "MixtureState", "effective_unique_fraction", "imis_run",
    "DiagnosticsReport", "Posterior", "diagnostics",
    "effective_sample_size", "split_rhat",
    "__version__",
]
