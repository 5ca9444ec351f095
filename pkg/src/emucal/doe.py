"""Design of experiments: Latin hypercube sampling, batch simulator runs,
and min-max scaling of inputs/outputs to [-1, 1] for emulator training."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .crc import (BASE_CASE, CALIBRATED_NAMES, LifeTable, run_cohort,
                  target_ids, _noncomment_lines, _fmt)

log = logging.getLogger(__name__)

# Uniform prior ranges of the nine calibrated parameters.
CRC_PRIOR_RANGES = {
    "l": (2e-6, 2e-5),
    "g": (2.0, 4.0),
    "lambda2": (0.01, 0.10),
    "lambda3": (0.01, 0.04),
    "lambda4": (0.20, 0.50),
    "lambda5": (0.20, 0.30),
    "lambda6": (0.30, 0.70),
    "p_adeno": (0.25, 0.35),
    "p_small": (0.38, 0.95),
}


@dataclass(frozen=True)
class PriorSpec:
    """Independent uniform priors: one (lower, upper) box per parameter."""

    names: tuple[str, ...]
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lower = np.asarray(self.lower, dtype=float)
        upper = np.asarray(self.upper, dtype=float)
        if not (len(self.names) == lower.size == upper.size):
            raise ValueError("names, lower, upper must have equal length")
        if np.any(lower >= upper):
            raise ValueError("each lower bound must be below its upper bound")
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @property
    def dim(self) -> int:
        return len(self.names)

    @property
    def ranges(self) -> np.ndarray:
        return self.upper - self.lower

    def contains(self, theta: np.ndarray) -> np.ndarray:
        """Boolean mask of rows inside the box; accepts (d,) or (m, d)."""
        theta = np.atleast_2d(theta)
        inside = (theta >= self.lower) & (theta <= self.upper)
        return inside.all(axis=1)

    def log_density(self) -> float:
        """Log prior density inside the box (constant)."""
        return float(-np.sum(np.log(self.ranges)))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Plain uniform draws, shape (n, dim)."""
        return rng.uniform(self.lower, self.upper, size=(n, self.dim))

    @classmethod
    def crc(cls) -> "PriorSpec":
        """The nine calibrated-parameter priors of the CRC model."""
        lo, hi = zip(*(CRC_PRIOR_RANGES[n] for n in CALIBRATED_NAMES))
        return cls(names=CALIBRATED_NAMES, lower=np.array(lo), upper=np.array(hi))


@dataclass(frozen=True)
class Scaler:
    """Per-column affine map between natural units and [-1, 1].

    Column extremes map exactly to -1 and +1.  Columns observed as
    constant scale to -1 and unscale back to their constant.
    """

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lo", np.asarray(self.lo, dtype=float))
        object.__setattr__(self, "hi", np.asarray(self.hi, dtype=float))
        if self.lo.shape != self.hi.shape or np.any(self.lo > self.hi):
            raise ValueError("invalid scaler bounds")

    @property
    def span(self) -> np.ndarray:
        span = self.hi - self.lo
        return np.where(span > 0.0, span, 1.0)

    def scale(self, x: np.ndarray) -> np.ndarray:
        return 2.0 * (np.asarray(x, dtype=float) - self.lo) / self.span - 1.0

    def unscale(self, y: np.ndarray) -> np.ndarray:
        return self.lo + (np.asarray(y, dtype=float) + 1.0) * self.span / 2.0

    def scale_jacobian(self) -> np.ndarray:
        """Diagonal of d(scaled)/d(natural)."""
        return 2.0 / self.span

    def unscale_jacobian(self) -> np.ndarray:
        """Diagonal of d(natural)/d(scaled)."""
        return self.span / 2.0

    @classmethod
    def fit(cls, x: np.ndarray) -> "Scaler":
        x = np.asarray(x, dtype=float)
        return cls(lo=x.min(axis=0), hi=x.max(axis=0))

    def to_dict(self) -> dict:
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Scaler":
        return cls(lo=np.array(d["lo"]), hi=np.array(d["hi"]))


def lhs_sample(priors: PriorSpec, n: int, seed) -> np.ndarray:
    """Latin hypercube sample of ``n`` points over the prior box.

    Each column gets exactly one point per equal-width stratum, uniformly
    jittered within the stratum, with independent stratum permutations per
    column.  Deterministic given ``seed``.
    """
    if n < 2:
        raise ValueError("n must be >= 2")
    rng = np.random.default_rng(seed)
    sample = np.empty((n, priors.dim))
    for j in range(priors.dim):
        strata = rng.permutation(n)
        jitter = rng.random(n)
        unit = (strata + jitter) / n
        sample[:, j] = priors.lower[j] + unit * (priors.upper[j] - priors.lower[j])
    return sample


@dataclass
class Design:
    """Paired simulator inputs/outputs plus the scalers fit to them."""

    inputs: np.ndarray  # (n, d) natural units
    outputs: np.ndarray  # (n, q) natural units
    input_scaler: Scaler
    output_scaler: Scaler
    param_names: tuple[str, ...]
    output_names: tuple[str, ...]
    seed: int | None = None
    dropped_rows: tuple[int, ...] = field(default_factory=tuple)

    @property
    def n_rows(self) -> int:
        return self.inputs.shape[0]

    def scaled_inputs(self) -> np.ndarray:
        return self.input_scaler.scale(self.inputs)

    def scaled_outputs(self) -> np.ndarray:
        return self.output_scaler.scale(self.outputs)

    def to_csv(self, path, meta_path=None, comment: str | None = None) -> None:
        """Write rows to CSV and scalers/seed/drop log to a JSON sidecar."""
        with open(path, "w", newline="") as fh:
            if comment:
                fh.write(f"# {comment}\n")
            writer = csv.writer(fh)
            writer.writerow(list(self.param_names) + list(self.output_names))
            for x, y in zip(self.inputs, self.outputs):
                writer.writerow([_fmt(v) for v in x] + [_fmt(v) for v in y])
        if meta_path is None:
            meta_path = str(path) + ".meta.json"
        meta = {
            "param_names": list(self.param_names),
            "output_names": list(self.output_names),
            "input_scaler": self.input_scaler.to_dict(),
            "output_scaler": self.output_scaler.to_dict(),
            "seed": self.seed,
            "dropped_rows": list(self.dropped_rows),
        }
        if comment:
            meta["comment"] = comment
        with open(meta_path, "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_csv(cls, path, meta_path=None) -> "Design":
        if meta_path is None:
            meta_path = str(path) + ".meta.json"
        with open(meta_path) as fh:
            meta = json.load(fh)
        d = len(meta["param_names"])
        with open(path, newline="") as fh:
            reader = csv.reader(_noncomment_lines(fh))
            header = next(reader)
            if header != meta["param_names"] + meta["output_names"]:
                raise ValueError(f"design {path}: header does not match sidecar")
            rows = np.array([[float(v) for v in row] for row in reader])
        return cls(
            inputs=rows[:, :d],
            outputs=rows[:, d:],
            input_scaler=Scaler.from_dict(meta["input_scaler"]),
            output_scaler=Scaler.from_dict(meta["output_scaler"]),
            param_names=tuple(meta["param_names"]),
            output_names=tuple(meta["output_names"]),
            seed=meta.get("seed"),
            dropped_rows=tuple(meta.get("dropped_rows", ())),
        )


def run_design(priors: PriorSpec, n: int, seed,
               lt: LifeTable | None = None) -> Design:
    """Evaluate the cohort simulator on an ``n``-point Latin hypercube.

    Rows where the simulator fails are dropped and logged.  Scalers are fit
    to the observed column ranges of the retained rows.
    """
    if lt is None:
        lt = LifeTable.default()
    inputs = lhs_sample(priors, n, seed)
    outputs = np.empty((n, len(target_ids())))
    dropped = []
    for i in range(n):
        try:
            params = BASE_CASE.with_calibrated(inputs[i])
            _, out = run_cohort(params, lt)
            vec = out.to_vector()
            if not np.all(np.isfinite(vec)):
                raise FloatingPointError("non-finite simulator output")
            outputs[i] = vec
        except (ValueError, FloatingPointError) as exc:
            log.warning("design row %d dropped: %s", i, exc)
            dropped.append(i)
    if dropped:
        keep = np.setdiff1d(np.arange(n), dropped)
        inputs, outputs = inputs[keep], outputs[keep]
    if inputs.shape[0] == 0:
        raise RuntimeError("all design rows failed")
    return Design(
        inputs=inputs,
        outputs=outputs,
        input_scaler=Scaler.fit(inputs),
        output_scaler=Scaler.fit(outputs),
        param_names=priors.names,
        output_names=tuple(target_ids()),
        seed=seed if isinstance(seed, int) else None,
        dropped_rows=tuple(dropped),
    )


def split(design: Design, fraction: float, seed) -> tuple[Design, Design]:
    """Disjoint random row partition into (train, validation).

    Scalers are refit on the training rows and shared with the validation
    split, so validation data may fall slightly outside [-1, 1].
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must be in (0, 1)")
    n = design.n_rows
    n_train = int(round(n * fraction))
    if n_train == 0 or n_train == n:
        raise ValueError(f"split of {n} rows at fraction {fraction} leaves an empty part")
    perm = np.random.default_rng(seed).permutation(n)
    idx_train, idx_valid = np.sort(perm[:n_train]), np.sort(perm[n_train:])

    in_scaler = Scaler.fit(design.inputs[idx_train])
    out_scaler = Scaler.fit(design.outputs[idx_train])

    def subset(idx):
        return Design(
            inputs=design.inputs[idx],
            outputs=design.outputs[idx],
            input_scaler=in_scaler,
            output_scaler=out_scaler,
            param_names=design.param_names,
            output_names=design.output_names,
            seed=design.seed,
            dropped_rows=design.dropped_rows,
        )

    return subset(idx_train), subset(idx_valid)
