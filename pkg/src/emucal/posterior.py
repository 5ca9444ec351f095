"""Posterior containers and MCMC convergence diagnostics.

Holds draws from either sampler (gradient-based on the emulator, or
mixture importance sampling on the simulator) in a common format, with
split R-hat and effective-sample-size diagnostics for multi-chain runs.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .crc import _fmt, _noncomment_lines


def _autocovariance(x: np.ndarray) -> np.ndarray:
    """Biased autocovariance of a 1-d series via FFT, lags 0..n-1."""
    n = x.size
    xc = x - x.mean()
    nfft = int(2 ** np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(xc, nfft)
    acov = np.fft.irfft(f * np.conj(f), nfft)[:n].real
    return acov / n


def _split_halves(chains: np.ndarray) -> np.ndarray:
    """Split each chain in half: (C, S) -> (2C, S // 2)."""
    c, s = chains.shape
    half = s // 2
    if half < 2:
        raise ValueError("chains too short to split")
    return np.concatenate([chains[:, :half], chains[:, s - half:]], axis=0)


def split_rhat(chains: np.ndarray) -> float:
    """Split R-hat (potential scale reduction) for one parameter.

    ``chains`` has shape (n_chains, n_iterations); each chain is split in
    half, so 2 chains yield 4 sequences.  Values near 1 indicate mixing.
    """
    x = _split_halves(np.asarray(chains, dtype=float))
    m, n = x.shape
    means = x.mean(axis=1)
    w = x.var(axis=1, ddof=1).mean()
    b = n * means.var(ddof=1)
    var_plus = (n - 1) / n * w + b / n
    if w == 0.0:
        return 1.0 if b == 0.0 else np.inf
    return float(np.sqrt(var_plus / w))


def effective_sample_size(chains: np.ndarray) -> float:
    """Effective sample size for the mean of one parameter.

    Combines within- and between-chain variance with Geyer's initial
    positive/monotone truncation of the paired autocorrelation sums.
    """
    x = _split_halves(np.asarray(chains, dtype=float))
    m, n = x.shape
    acov = np.stack([_autocovariance(row) for row in x])
    chain_var = acov[:, 0] * n / (n - 1)
    w = chain_var.mean()
    var_plus = (n - 1) / n * w + x.mean(axis=1).var(ddof=1)
    if var_plus == 0.0:
        return float(m * n)

    rho = 1.0 - (w - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0

    # Geyer pairs: sum rho[2k] + rho[2k+1], truncate at first negative pair,
    # then force the sequence non-increasing.
    n_pairs = n // 2
    pairs = rho[: 2 * n_pairs].reshape(n_pairs, 2).sum(axis=1)
    tau = 0.0
    prev = np.inf
    for p in pairs:
        if p < 0.0:
            break
        p = min(p, prev)
        tau += p
        prev = p
    tau = max(2.0 * tau - 1.0, 1e-8)
    return float(m * n / tau)


@dataclass
class Posterior:
    """Draws over the calibrated parameters plus sampler bookkeeping.

    ``chain_draws`` has shape (chains, iterations, dim) in natural units;
    single-chain methods (importance resampling) use chains=1.  ``stats``
    carries method-specific scalars (acceptance, divergences, evaluation
    counts, wall-clock seconds).
    """

    param_names: tuple[str, ...]
    chain_draws: np.ndarray
    method: str = "hmc"
    stats: dict = field(default_factory=dict)

    def __post_init__(self):
        self.chain_draws = np.asarray(self.chain_draws, dtype=float)
        if self.chain_draws.ndim != 3:
            raise ValueError("chain_draws must have shape (chains, iters, dim)")
        if self.chain_draws.shape[2] != len(self.param_names):
            raise ValueError("param_names length must match draw dimension")

    @property
    def n_chains(self) -> int:
        return self.chain_draws.shape[0]

    @property
    def draws(self) -> np.ndarray:
        """All post-warmup draws pooled, shape (chains * iterations, dim)."""
        c, s, d = self.chain_draws.shape
        return self.chain_draws.reshape(c * s, d)

    def mean(self) -> np.ndarray:
        return self.draws.mean(axis=0)

    def sd(self) -> np.ndarray:
        return self.draws.std(axis=0, ddof=1)

    def quantiles(self, qs=(2.5, 50.0, 97.5)) -> np.ndarray:
        return np.percentile(self.draws, qs, axis=0)

    def credible_interval(self, level: float = 0.95) -> np.ndarray:
        """Central interval per parameter, shape (2, dim)."""
        tail = 100.0 * (1.0 - level) / 2.0
        return np.percentile(self.draws, [tail, 100.0 - tail], axis=0)

    def rhat(self) -> np.ndarray | None:
        """Split R-hat per parameter; None when fewer than 2 chains."""
        if self.n_chains < 2:
            return None
        return np.array([split_rhat(self.chain_draws[:, :, j])
                         for j in range(len(self.param_names))])

    def ess(self) -> np.ndarray:
        return np.array([effective_sample_size(self.chain_draws[:, :, j])
                         for j in range(len(self.param_names))])

    def summary(self) -> dict:
        q = self.quantiles()
        rhat = self.rhat()
        ess = self.ess()
        per_param = {}
        for j, name in enumerate(self.param_names):
            per_param[name] = {
                "mean": float(self.mean()[j]),
                "sd": float(self.sd()[j]),
                "q2.5": float(q[0, j]),
                "q50": float(q[1, j]),
                "q97.5": float(q[2, j]),
                "rhat": None if rhat is None else float(rhat[j]),
                "ess": float(ess[j]),
            }
        return {
            "method": self.method,
            "chains": self.n_chains,
            "iterations": self.chain_draws.shape[1],
            "parameters": per_param,
            "stats": self.stats,
        }

    def to_csv(self, path, comment: str | None = None) -> None:
        with open(path, "w", newline="") as fh:
            if comment:
                fh.write(f"# {comment}\n")
            writer = csv.writer(fh)
            writer.writerow(["chain", "iter", *self.param_names])
            for c in range(self.n_chains):
                for i in range(self.chain_draws.shape[1]):
                    writer.writerow(
                        [c, i, *(_fmt(v) for v in self.chain_draws[c, i])])

    @classmethod
    def from_csv(cls, path, method: str = "") -> "Posterior":
        with open(path, newline="") as fh:
            reader = csv.reader(_noncomment_lines(fh))
            header = next(reader)
            if header[:2] != ["chain", "iter"]:
                raise ValueError(f"posterior {path}: expected 'chain,iter,...' header")
            names = tuple(header[2:])
            chains: dict[int, list] = {}
            for row in reader:
                chains.setdefault(int(row[0]), []).append([float(v) for v in row[2:]])
        sizes = {len(v) for v in chains.values()}
        if len(sizes) != 1:
            raise ValueError(f"posterior {path}: ragged chain lengths {sizes}")
        arr = np.array([chains[c] for c in sorted(chains)])
        return cls(param_names=names, chain_draws=arr, method=method)

    def summary_to_json(self, path, extra: dict | None = None) -> None:
        doc = self.summary()
        if extra:
            doc.update(extra)
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")


@dataclass
class DiagnosticsReport:
    """Convergence summary with a pass / warn / fail verdict."""

    status: str
    rhat: dict[str, float] | None
    ess: dict[str, float]
    max_rhat: float | None
    min_ess: float
    divergences: int
    divergence_fraction: float
    acceptance: float | None
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "rhat": self.rhat,
            "ess": self.ess,
            "max_rhat": self.max_rhat,
            "min_ess": self.min_ess,
            "divergences": self.divergences,
            "divergence_fraction": self.divergence_fraction,
            "acceptance": self.acceptance,
            "notes": self.notes,
        }


RHAT_FAIL = 1.05
DIVERGENCE_WARN_FRACTION = 0.10


def diagnostics(posterior: Posterior) -> DiagnosticsReport:
    """Split R-hat, ESS, divergence and acceptance summary with a verdict.

    fail: any R-hat above 1.05.  warn: R-hat unavailable (single chain) or
    more than 10% divergent transitions.  pass otherwise.
    """
    notes = []
    ess = posterior.ess()
    ess_d = {n: float(e) for n, e in zip(posterior.param_names, ess)}
    rhat = posterior.rhat()
    divergences = int(posterior.stats.get("divergences", 0))
    total = posterior.chain_draws.shape[0] * posterior.chain_draws.shape[1]
    div_frac = divergences / total if total else 0.0
    acceptance = posterior.stats.get("acceptance")

    if rhat is None:
        status = "warn"
        notes.append("single chain: R-hat unavailable")
        rhat_d, max_rhat = None, None
    else:
        rhat_d = {n: float(r) for n, r in zip(posterior.param_names, rhat)}
        max_rhat = float(np.max(rhat))
        if not np.all(np.isfinite(rhat)) or max_rhat > RHAT_FAIL:
            status = "fail"
            notes.append(f"max R-hat {max_rhat:.4f} exceeds {RHAT_FAIL}")
        else:
            status = "pass"
    if div_frac > DIVERGENCE_WARN_FRACTION:
        notes.append(f"{div_frac:.1%} divergent transitions")
        if status == "pass":
            status = "warn"

    return DiagnosticsReport(
        status=status,
        rhat=rhat_d,
        ess=ess_d,
        max_rhat=max_rhat,
        min_ess=float(np.min(ess)),
        divergences=divergences,
        divergence_fraction=div_frac,
        acceptance=None if acceptance is None else float(acceptance),
        notes=notes,
    )
