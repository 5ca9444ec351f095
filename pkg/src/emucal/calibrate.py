"""Bayesian calibration of the emulator.

Normal likelihood over the 36 targets, uniform priors handled through a
per-coordinate logit reparameterization to an unbounded space, and a
Hamiltonian Monte Carlo sampler (leapfrog with dual-averaging step-size
adaptation and a mass matrix, diagonal by default, learned during warmup).

All chains advance in lockstep so the emulator evaluates one small batch
per leapfrog step; each chain still consumes its own seeded RNG stream, so
results do not depend on how many chains run together.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import _fastpath
from .ann import AnnModel, logistic
from .crc import TargetSet
from .doe import PriorSpec
from .posterior import Posterior

__all__ = [
    "BoxTransform", "LogPosterior", "HmcConfig", "normal_log_likelihood",
    "log_likelihood", "grad_log_posterior", "leapfrog", "hmc_sample",
]


def _softplus(z: np.ndarray) -> np.ndarray:
    """log(1 + exp(z)) without overflow."""
    return np.logaddexp(0.0, z)


class BoxTransform:
    """Bijection between a bounded box and R^d via coordinate-wise logit.

    theta = a + (b - a) * logistic(u).  The log absolute Jacobian
    determinant is sum(log(b - a) + log f(u) + log(1 - f(u))).
    """

    def __init__(self, lower, upper):
        self.lower = np.asarray(lower, dtype=float)
        self.upper = np.asarray(upper, dtype=float)
        if np.any(self.lower >= self.upper):
            raise ValueError("lower bounds must be below upper bounds")
        self.span = self.upper - self.lower

    @property
    def dim(self) -> int:
        return self.lower.size

    def transform(self, theta: np.ndarray) -> np.ndarray:
        """Map natural-unit point(s) strictly inside the box to R^d."""
        theta = np.asarray(theta, dtype=float)
        frac = (theta - self.lower) / self.span
        if np.any(frac <= 0.0) or np.any(frac >= 1.0):
            raise ValueError("theta must be strictly inside the bounds")
        return np.log(frac) - np.log1p(-frac)

    def untransform(self, u: np.ndarray) -> np.ndarray:
        """Map unbounded point(s) back into the box."""
        return self.lower + self.span * logistic(np.asarray(u, dtype=float))

    def log_abs_det_jacobian(self, u: np.ndarray) -> np.ndarray:
        """log |d theta / d u| summed over coordinates; (m,) for (m, d) input."""
        u = np.asarray(u, dtype=float)
        terms = np.log(self.span) - _softplus(u) - _softplus(-u)
        return terms.sum(axis=-1)


def normal_log_likelihood(y: np.ndarray, sigma: np.ndarray,
                          phi: np.ndarray) -> np.ndarray:
    """Independent-normal log likelihood of predictions ``phi``.

    ``phi`` may be (q,) or (m, q); returns a scalar or (m,).
    """
    z = (np.asarray(phi, dtype=float) - y) / sigma
    const = np.sum(np.log(sigma)) + y.size * 0.5 * np.log(2.0 * np.pi)
    ll = -0.5 * np.sum(z * z, axis=-1) - const
    return ll if np.ndim(ll) else float(ll)


def log_likelihood(model: AnnModel, targets: TargetSet, theta: np.ndarray,
                   priors: PriorSpec | None = None):
    """Target log likelihood of ``theta`` under the emulator.

    Returns -inf for points outside the prior box when ``priors`` is given.
    Accepts a single point (d,) or a batch (m, d).
    """
    theta = np.asarray(theta, dtype=float)
    single = theta.ndim == 1
    pts = np.atleast_2d(theta)
    ll = normal_log_likelihood(targets.mean, targets.se,
                               np.atleast_2d(model.predict_natural(pts)))
    ll = np.atleast_1d(ll)
    if priors is not None:
        ll = np.where(priors.contains(pts), ll, -np.inf)
    return float(ll[0]) if single else ll


class LogPosterior:
    """Unnormalized log posterior over the unbounded parameterization.

    Wraps the emulator, the target set, and the uniform priors; evaluates
    value and gradient in one pass (the gradient backpropagates the
    likelihood residual through the output scaler, the network, the input
    scaler, and the box transform).
    """

    def __init__(self, model: AnnModel, targets: TargetSet, priors: PriorSpec):
        if model.input_scaler is None or model.output_scaler is None:
            raise ValueError("emulator must carry design scalers")
        if len(targets) != model.config.output_dim:
            raise ValueError("target count must match emulator outputs")
        self.model = model
        self.targets = targets
        self.priors = priors
        self.transform = BoxTransform(priors.lower, priors.upper)
        self.param_names = priors.names
        # constant factors of d(logp)/d(theta) coming from the two scalers
        self._out_jac = model.output_scaler.unscale_jacobian()
        self._in_jac = model.input_scaler.scale_jacobian()
        self._ll_const = float(np.sum(np.log(targets.se))
                               + len(targets) * 0.5 * np.log(2.0 * np.pi))

    @property
    def dim(self) -> int:
        return self.transform.dim

    def to_natural(self, u: np.ndarray) -> np.ndarray:
        return self.transform.untransform(u)

    def log_density(self, u: np.ndarray) -> np.ndarray:
        """Log posterior density at unbounded point(s); (m,) for (m, d)."""
        u = np.asarray(u, dtype=float)
        single = u.ndim == 1
        val = self.value_and_grad(np.atleast_2d(u))[0]
        return float(val[0]) if single else val

    def value_and_grad(self, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Log density and its gradient for a batch of unbounded points."""
        u = np.asarray(u, dtype=float)
        if u.ndim != 2:
            raise ValueError("value_and_grad expects a (m, d) batch")
        m = u.shape[0]
        value = np.full(m, -np.inf)
        grad = np.zeros_like(u)
        ok = np.isfinite(u).all(axis=1)
        if not np.any(ok):
            return value, grad
        uf = u[ok]

        f = logistic(uf)
        theta = self.transform.lower + self.transform.span * f
        x = (theta - self.model.input_scaler.lo) * self._in_jac - 1.0
        acts = self.model._forward_cached(x)
        phi = (acts[-1] + 1.0) * self._out_jac + self.model.output_scaler.lo

        resid = (self.targets.mean - phi) / (self.targets.se ** 2)
        z = (phi - self.targets.mean) / self.targets.se
        loglik = -0.5 * np.sum(z * z, axis=1) - self._ll_const
        # uniform prior density is constant inside the box; the transform
        # keeps every u inside, so only the Jacobian term varies
        log_jac = self.transform.log_abs_det_jacobian(uf)
        value_f = loglik + self.priors.log_density() + log_jac

        # d loglik / d x via vector-Jacobian product through the network
        g_x = self.model.backprop_input(acts, resid * self._out_jac)
        dtheta_du = self.transform.span * f * (1.0 - f)
        grad_f = g_x * self._in_jac * dtheta_du + (1.0 - 2.0 * f)

        bad = ~np.isfinite(value_f)
        if np.any(bad):
            value_f[bad] = -np.inf
            grad_f[bad] = 0.0
        value[ok] = value_f
        grad[ok] = grad_f
        return value, grad

    def _trajectory_constants(self) -> tuple | None:
        """Constant arrays for the compiled trajectory kernel.

        Only the standard two-hidden-layer logistic / linear-output
        architecture is compiled; anything else uses the numpy path.
        """
        cfg = self.model.config
        if not _fastpath.HAVE_NUMBA or len(cfg.hidden_layers) != 2 \
                or cfg.output_activation != "linear":
            return None
        w1, w2, w3 = self.model.weights
        b1, b2, b3 = self.model.biases
        return (
            self.transform.lower, self.transform.span,
            self.model.input_scaler.lo, self._in_jac,
            w1, b1, w2, b2, w3, b3,
            np.ascontiguousarray(w1.T), np.ascontiguousarray(w2.T),
            np.ascontiguousarray(w3.T),
            self._out_jac, self.model.output_scaler.lo,
            self.targets.mean, 1.0 / self.targets.se ** 2,
            self._out_jac / self.targets.se ** 2,
            self._ll_const,
            self.priors.log_density() + float(np.sum(np.log(self.transform.span))),
        )


def grad_log_posterior(lp, u: np.ndarray) -> np.ndarray:
    """Gradient of the log posterior at a single unbounded point."""
    u = np.asarray(u, dtype=float)
    return lp.value_and_grad(u[None, :])[1][0]


@dataclass(frozen=True)
class HmcConfig:
    """Sampler settings.

    ``leapfrog_steps`` is the base trajectory length; each transition
    jitters it uniformly by ``(1 - step_jitter, 1 + step_jitter)`` to avoid
    resonances.  Warmup adapts the step size by dual averaging toward
    ``target_accept`` and learns a mass matrix from the second half of
    warmup, pooled over chains.  ``metric`` selects a diagonal (default)
    or dense (full covariance) mass matrix.
    """

    chains: int = 4
    warmup: int = 1000
    samples: int = 1000
    leapfrog_steps: int = 20
    step_jitter: float = 0.2
    target_accept: float = 0.8
    seed: int = 0
    init_radius: float = 2.0
    metric: str = "diag"

    def __post_init__(self):
        if min(self.chains, self.warmup, self.samples, self.leapfrog_steps) < 1:
            raise ValueError("chains, warmup, samples, leapfrog_steps must be >= 1")
        if not 0.0 < self.target_accept < 1.0:
            raise ValueError("target_accept must be in (0, 1)")
        if self.metric not in ("dense", "diag"):
            raise ValueError("metric must be 'dense' or 'diag'")


# Energy-error threshold beyond which a transition counts as divergent.
DIVERGENCE_ENERGY = 1000.0


def leapfrog(value_and_grad, q: np.ndarray, p: np.ndarray, step: float,
             n_steps: int, inv_mass: np.ndarray):
    """Leapfrog integration of Hamiltonian dynamics for a single point.

    Returns (q, p, logp, grad) after ``n_steps`` steps of size ``step``.
    """
    logp, grad = value_and_grad(q[None, :])
    grad = grad[0]
    q = q.copy()
    p = p.copy()
    for _ in range(n_steps):
        p += 0.5 * step * grad
        q += step * inv_mass * p
        logp, grad = value_and_grad(q[None, :])
        logp, grad = logp[0], grad[0]
        p += 0.5 * step * grad
    return q, p, logp, grad


class _DualAveraging:
    """Nesterov dual averaging of log step size, vectorized over chains."""

    GAMMA = 0.05
    T0 = 10.0
    KAPPA = 0.75

    def __init__(self, eps0: np.ndarray, target: float):
        self.mu = np.log(10.0 * eps0)
        self.target = target
        self.log_eps = np.log(eps0)
        self.log_eps_bar = np.zeros_like(eps0)
        self.h_bar = np.zeros_like(eps0)
        self.count = 0

    def update(self, accept_prob: np.ndarray) -> np.ndarray:
        self.count += 1
        m = self.count
        eta = 1.0 / (m + self.T0)
        self.h_bar = (1.0 - eta) * self.h_bar + eta * (self.target - accept_prob)
        self.log_eps = self.mu - np.sqrt(m) / self.GAMMA * self.h_bar
        w = m ** (-self.KAPPA)
        self.log_eps_bar = w * self.log_eps + (1.0 - w) * self.log_eps_bar
        return np.exp(self.log_eps)

    def adapted(self) -> np.ndarray:
        return np.exp(self.log_eps_bar)

    def restart(self, eps0: np.ndarray) -> None:
        self.__init__(eps0, self.target)


def _initial_step_size(value_and_grad, q: np.ndarray, rng: np.random.Generator,
                       inv_mass: np.ndarray) -> float:
    """Double/halve a unit step until the one-step accept ratio crosses 1/2."""
    d = q.size
    p = rng.standard_normal(d) / np.sqrt(inv_mass)

    def log_ratio(eps):
        q1, p1, logp1, _ = leapfrog(value_and_grad, q, p, eps, 1, inv_mass)
        logp0 = value_and_grad(q[None, :])[0][0]
        h0 = -logp0 + 0.5 * np.sum(p * p * inv_mass)
        h1 = -logp1 + 0.5 * np.sum(p1 * p1 * inv_mass)
        return h0 - h1

    eps = 1.0
    r = log_ratio(eps)
    if not np.isfinite(r):
        r = -np.inf
    direction = 1.0 if r > np.log(0.5) else -1.0
    for _ in range(50):
        eps_next = eps * 2.0 ** direction
        r = log_ratio(eps_next)
        if not np.isfinite(r):
            r = -np.inf
        if (direction > 0 and r <= np.log(0.5)) or \
                (direction < 0 and r >= np.log(0.5)):
            break
        eps = eps_next
    return eps


class _Welford:
    """Streaming covariance of warmup draws, pooled across chains."""

    def __init__(self, dim: int):
        self.count = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros((dim, dim))

    def update(self, rows: np.ndarray) -> None:
        for x in rows:
            self.count += 1
            delta = x - self.mean
            self.mean += delta / self.count
            self.m2 += np.outer(delta, x - self.mean)

    def regularized(self) -> np.ndarray:
        """Shrunk covariance estimate, kept safely positive definite."""
        n = self.count
        dim = self.mean.size
        if n < 2:
            return np.eye(dim)
        cov = self.m2 / (n - 1)
        return cov * (n / (n + 5.0)) + 1e-3 * (5.0 / (n + 5.0)) * np.eye(dim)


class _Metric:
    """Mass matrix M = Sigma^{-1}.  Momenta are N(0, M); velocity is Sigma p."""

    def __init__(self, dim: int):
        self.set_covariance(np.eye(dim))

    def set_covariance(self, sigma: np.ndarray) -> None:
        self.sigma = sigma
        # Sigma = L L^T; momentum draw p = L^{-T} z has covariance Sigma^{-1}
        self.chol = np.linalg.cholesky(sigma)

    def momentum_from_normal(self, z: np.ndarray) -> np.ndarray:
        """Map standard-normal rows to momenta with covariance Sigma^{-1}."""
        return np.linalg.solve(self.chol.T, z.T).T

    def kinetic(self, p: np.ndarray) -> np.ndarray:
        v = p @ self.chol
        return 0.5 * np.sum(v * v, axis=1)

    def velocity(self, p: np.ndarray) -> np.ndarray:
        return p @ self.sigma


def hmc_sample(lp, cfg: HmcConfig) -> Posterior:
    """Sample ``lp`` with multi-chain HMC; deterministic given ``cfg.seed``.

    ``lp`` must expose ``dim`` and ``value_and_grad(U) -> (logp, grad)`` on
    (m, d) batches; optional ``to_natural`` maps draws out of the sampling
    space and optional ``param_names`` labels the columns.  Chain ``c``
    uses the RNG stream seeded by (seed, c), so draws are independent of
    scheduling and chain count.
    """
    t_start = time.perf_counter()
    d = lp.dim
    C = cfg.chains
    n_grad_evals = 0

    def f(batch):
        nonlocal n_grad_evals
        n_grad_evals += batch.shape[0]
        return lp.value_and_grad(batch)

    rngs = [np.random.default_rng([cfg.seed, c]) for c in range(C)]

    q = np.stack([rng.uniform(-cfg.init_radius, cfg.init_radius, d) for rng in rngs])
    logp = f(q)[0]
    metric = _Metric(d)

    eps = np.array([_initial_step_size(f, q[c], rngs[c], np.ones(d))
                    for c in range(C)])
    averager = _DualAveraging(eps, cfg.target_accept)
    welford = _Welford(d)

    warmup_divergences = 0
    sampling_divergences = 0
    accept_sum = np.zeros(C)
    draws = np.empty((C, cfg.samples, d))

    kernel_consts = None
    if hasattr(lp, "_trajectory_constants"):
        kernel_consts = lp._trajectory_constants()

    def run_trajectory(qn, pn, eps_now, lengths):
        """All chains' leapfrog paths; returns end (q, p, logp, grad)."""
        nonlocal n_grad_evals
        if kernel_consts is not None:
            n_grad_evals += int(lengths.sum()) + len(lengths)
            return _fastpath.trajectory_2h(qn, pn, eps_now, lengths,
                                           metric.sigma, *kernel_consts)
        logpn, gradn = f(qn)
        for s in range(lengths.max()):
            act = (s < lengths)[:, None]
            pn = np.where(act, pn + 0.5 * eps_now[:, None] * gradn, pn)
            qn = np.where(act, qn + eps_now[:, None] * metric.velocity(pn), qn)
            logp2, grad2 = f(qn)
            logpn = np.where(act[:, 0], logp2, logpn)
            gradn = np.where(act, grad2, gradn)
            pn = np.where(act, pn + 0.5 * eps_now[:, None] * grad2, pn)
        return qn, pn, logpn, gradn

    def transition(eps_now):
        """One batched HMC transition from the current (q, logp)."""
        nonlocal q, logp
        z = np.empty((C, d))
        jitter = np.empty(C)
        u_accept = np.empty(C)
        for c, rng in enumerate(rngs):  # fixed per-chain draw schedule
            z[c] = rng.standard_normal(d)
            jitter[c] = rng.uniform(1.0 - cfg.step_jitter, 1.0 + cfg.step_jitter)
            u_accept[c] = rng.random()
        p0 = metric.momentum_from_normal(z)
        lengths = np.maximum(1, np.rint(cfg.leapfrog_steps * jitter).astype(int))

        h0 = -logp + metric.kinetic(p0)
        qn, pn, logpn, _ = run_trajectory(q.copy(), p0.copy(), eps_now, lengths)
        h1 = -logpn + metric.kinetic(pn)
        delta = h0 - h1
        delta = np.where(np.isfinite(delta), delta, -np.inf)
        divergent = delta < -DIVERGENCE_ENERGY
        accept_prob = np.exp(np.minimum(delta, 0.0))
        accept_prob[divergent] = 0.0
        accepted = u_accept < accept_prob

        q = np.where(accepted[:, None], qn, q)
        logp = np.where(accepted, logpn, logp)
        return accept_prob, divergent

    half = cfg.warmup // 2
    for m in range(cfg.warmup):
        accept_prob, divergent = transition(eps)
        warmup_divergences += int(divergent.sum())
        eps = averager.update(accept_prob)
        if m == half:
            # learn the metric from the second half of warmup; re-center
            # step-size adaptation on the current value
            averager.restart(np.exp(averager.log_eps))
        if m >= half:
            welford.update(q)
            if welford.count >= 10 * C:
                cov = welford.regularized()
                if cfg.metric == "diag":
                    cov = np.diag(np.diag(cov))
                metric.set_covariance(cov)

    eps = averager.adapted()
    for i in range(cfg.samples):
        accept_prob, divergent = transition(eps)
        sampling_divergences += int(divergent.sum())
        accept_sum += accept_prob
        draws[:, i, :] = q

    natural = lp.to_natural(draws.reshape(C * cfg.samples, d)) \
        if hasattr(lp, "to_natural") else draws.reshape(C * cfg.samples, d)
    natural = natural.reshape(C, cfg.samples, d)

    total = C * cfg.samples
    stats = {
        "acceptance": float(accept_sum.sum() / total),
        "acceptance_per_chain": (accept_sum / cfg.samples).tolist(),
        "divergences": sampling_divergences,
        "warmup_divergences": warmup_divergences,
        "step_size": eps.tolist(),
        "leapfrog_steps": cfg.leapfrog_steps,
        "n_grad_evals": int(n_grad_evals),
        "wall_clock_s": time.perf_counter() - t_start,
    }
    if sampling_divergences / total > 0.10:
        stats["warning"] = "more than 10% divergent transitions"

    names = getattr(lp, "param_names", None) or tuple(f"p{j}" for j in range(d))
    return Posterior(param_names=tuple(names), chain_draws=natural,
                     method="hmc", stats=stats)
