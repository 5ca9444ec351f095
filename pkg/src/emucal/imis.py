"""Incremental mixture importance sampling on the simulator.

The comparison baseline: starts from a prior sample, repeatedly centers a
new Gaussian proposal component on the current highest-weight point (its
covariance estimated from the nearest neighbors), reweights everything
against the growing mixture, and finally resamples by weight.  Runs
directly against the cohort simulator's likelihood, so its cost is counted
in simulator evaluations.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .doe import PriorSpec
from .posterior import Posterior

log = logging.getLogger(__name__)

# Stopping rule: expected fraction of unique points in a J-resample.
UNIQUE_FRACTION_STOP = 1.0 - np.exp(-1.0)

_RIDGE_REL = 1e-8  # diagonal ridge, relative to squared prior ranges


@dataclass(frozen=True)
class ImisConfig:
    """Sampler settings; counts follow the cited algorithm's conventions."""

    n_initial: int = 1000
    batch_size: int = 100
    max_iterations: int = 100
    resample_size: int = 4000
    seed: int = 0

    def __post_init__(self):
        if min(self.n_initial, self.batch_size, self.max_iterations,
               self.resample_size) < 1:
            raise ValueError("all counts must be >= 1")
        if self.batch_size > self.n_initial:
            raise ValueError("batch_size must not exceed n_initial")

    @property
    def max_evaluations(self) -> int:
        return self.n_initial + self.batch_size * self.max_iterations


@dataclass
class MixtureState:
    """All sampled points plus the Gaussian proposal components built so far."""

    points: np.ndarray  # (n, d) natural units
    log_lik: np.ndarray  # (n,)
    log_prior: np.ndarray  # (n,)
    comp_means: list[np.ndarray] = field(default_factory=list)
    comp_chols: list[np.ndarray] = field(default_factory=list)  # lower Cholesky
    comp_logpdf: np.ndarray | None = None  # (n, k) cached per-component logpdf

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    @property
    def n_components(self) -> int:
        return len(self.comp_means)


def effective_unique_fraction(weights: np.ndarray, resample_size: int) -> float:
    """Expected fraction of distinct points in a weighted resample.

    For normalized ``weights`` and a resample of size J, the expected
    number of unique source points is sum_i (1 - (1 - w_i)^J); this
    returns that number divided by J.
    """
    w = np.asarray(weights, dtype=float)
    with np.errstate(divide="ignore"):
        log_miss = resample_size * np.log1p(-np.minimum(w, 1.0))
    expected_unique = -np.expm1(log_miss).sum()
    return float(expected_unique / resample_size)


def _mvn_logpdf(x: np.ndarray, mean: np.ndarray, chol: np.ndarray) -> np.ndarray:
    """Log density of N(mean, chol @ chol.T) at rows of ``x``."""
    d = mean.size
    z = solve_triangular(chol, (np.atleast_2d(x) - mean).T, lower=True)
    log_det = np.sum(np.log(np.diag(chol)))
    return -0.5 * np.sum(z * z, axis=0) - log_det - 0.5 * d * np.log(2.0 * np.pi)


def _neighbor_covariance(state: MixtureState, center: np.ndarray,
                         weights: np.ndarray, b: int,
                         scale: np.ndarray) -> np.ndarray:
    """Weighted covariance of the ``b`` nearest points around ``center``.

    Distances are Mahalanobis with diagonal scale = prior ranges; the
    neighbor weights are (importance weight + 1/n)/2, which keeps the
    estimate usable when a single point dominates.
    """
    z = (state.points - center) / scale
    dist = np.einsum("ij,ij->i", z, z)
    idx = np.argpartition(dist, min(b, dist.size - 1))[:b]
    w = weights[idx] + 1.0 / state.n_points
    w /= w.sum()
    diff = state.points[idx] - center
    return (w[:, None] * diff).T @ diff


def _safe_cholesky(cov: np.ndarray, scale: np.ndarray) -> tuple[np.ndarray, bool]:
    """Cholesky with an escalating diagonal ridge when not positive definite."""
    ridge = _RIDGE_REL * scale ** 2
    ridged = False
    for _ in range(12):
        try:
            return np.linalg.cholesky(cov), ridged
        except np.linalg.LinAlgError:
            cov = cov + np.diag(ridge)
            ridge = ridge * 10.0
            ridged = True
    raise np.linalg.LinAlgError("neighbor covariance not repairable")


def imis_run(log_lik, priors: PriorSpec, cfg: ImisConfig,
             param_names=None) -> Posterior:
    """Run incremental mixture importance sampling.

    Parameters
    ----------
    log_lik : callable
        Maps an (m, d) batch of natural-unit points to (m,) log
        likelihoods; evaluations are counted as simulator runs.
    priors : PriorSpec
        Uniform prior box (initial proposal and prior density).
    cfg : ImisConfig
        Sample sizes, iteration cap, and seed.

    Returns
    -------
    Posterior
        ``resample_size`` draws resampled by weight (method "imis"), with
        evaluation counts, the stopping trace, and wall-clock in ``stats``.
    """
    t_start = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    d = priors.dim
    log_prior_const = priors.log_density()

    points = priors.sample(cfg.n_initial, rng)
    state = MixtureState(
        points=points,
        log_lik=np.asarray(log_lik(points), dtype=float),
        log_prior=np.full(cfg.n_initial, log_prior_const),
        comp_logpdf=np.empty((cfg.n_initial, 0)),
    )
    n_evals = cfg.n_initial
    scale = priors.ranges
    ridge_warnings = 0
    unique_trace: list[float] = []

    def current_log_weights() -> np.ndarray:
        """log w_i ∝ loglik_i + logprior_i - log q_mix_i."""
        n0 = cfg.n_initial
        k = state.n_components
        if k == 0:
            log_q = state.log_prior
        else:
            counts = np.log(np.array([n0] + [cfg.batch_size] * k, dtype=float))
            stacked = np.column_stack([state.log_prior, state.comp_logpdf])
            log_q = _logsumexp(stacked + counts) - np.log(n0 + k * cfg.batch_size)
        return state.log_lik + state.log_prior - log_q

    def normalized(logw: np.ndarray) -> np.ndarray:
        finite = np.isfinite(logw)
        if not np.any(finite):
            raise RuntimeError("all importance weights vanished")
        w = np.zeros_like(logw)
        w[finite] = np.exp(logw[finite] - logw[finite].max())
        return w / w.sum()

    stopped_early = False
    weights = normalized(current_log_weights())
    for it in range(cfg.max_iterations):
        unique_trace.append(effective_unique_fraction(weights, cfg.resample_size))
        if unique_trace[-1] >= UNIQUE_FRACTION_STOP:
            stopped_early = True
            break

        center = state.points[int(np.argmax(weights))]
        cov = _neighbor_covariance(state, center, weights, cfg.batch_size, scale)
        chol, ridged = _safe_cholesky(cov, scale)
        if ridged:
            ridge_warnings += 1
            log.warning("imis iteration %d: singular neighbor covariance, ridged", it)

        new_points = center + rng.standard_normal((cfg.batch_size, d)) @ chol.T
        # zero-prior points carry zero weight; skip their simulator runs
        inside = priors.contains(new_points)
        new_loglik = np.full(cfg.batch_size, -np.inf)
        if np.any(inside):
            new_loglik[inside] = np.asarray(log_lik(new_points[inside]), dtype=float)
        n_evals += int(inside.sum())
        new_logprior = np.where(inside, log_prior_const, -np.inf)

        # extend the cached component-density matrix in both directions
        old_cols = [_mvn_logpdf(new_points, m, c)
                    for m, c in zip(state.comp_means, state.comp_chols)]
        new_col_old = _mvn_logpdf(state.points, center, chol)
        new_col_new = _mvn_logpdf(new_points, center, chol)
        state.comp_means.append(center.copy())
        state.comp_chols.append(chol)
        top = np.column_stack([state.comp_logpdf, new_col_old])
        bottom = np.column_stack(old_cols + [new_col_new]) if old_cols \
            else new_col_new[:, None]
        state.comp_logpdf = np.vstack([top, bottom])
        state.points = np.vstack([state.points, new_points])
        state.log_lik = np.concatenate([state.log_lik, new_loglik])
        state.log_prior = np.concatenate([state.log_prior, new_logprior])
        weights = normalized(current_log_weights())

    if not stopped_early:
        unique_trace.append(effective_unique_fraction(weights, cfg.resample_size))

    idx = rng.choice(state.n_points, size=cfg.resample_size, replace=True, p=weights)
    draws = state.points[idx][None, :, :]  # single pseudo-chain

    names = tuple(param_names) if param_names is not None else priors.names
    stats = {
        "n_evaluations": int(n_evals),
        "n_components": state.n_components,
        "stopped_early": stopped_early,
        "unique_fraction": unique_trace[-1],
        "unique_fraction_trace": [float(u) for u in unique_trace],
        "ridge_warnings": ridge_warnings,
        "wall_clock_s": time.perf_counter() - t_start,
    }
    return Posterior(param_names=names, chain_draws=draws, method="imis",
                     stats=stats)


def _logsumexp(a: np.ndarray) -> np.ndarray:
    """Row-wise logsumexp of a 2-d array."""
    amax = a.max(axis=1, keepdims=True)
    amax = np.where(np.isfinite(amax), amax, 0.0)
    return np.log(np.sum(np.exp(a - amax), axis=1)) + amax[:, 0]
