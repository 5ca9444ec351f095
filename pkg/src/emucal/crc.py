"""Colorectal cancer natural-history model.

Discrete-time state-transition model over nine health states, run either as
a deterministic cohort (state-occupancy probabilities) or as a seeded
microsimulation (individual trajectories).  Both engines report the same 36
age-binned outputs: adenoma prevalence, proportion of small adenomas, and
clinical cancer incidence for early and late stages, each over nine 5-year
age bins from 50 to 94.

The microsimulation is also used to generate synthetic calibration targets
(means and standard errors over repeated runs).
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

START_AGE = 50
END_AGE = 100
N_CYCLES = END_AGE - START_AGE  # annual cycles; trace has N_CYCLES + 1 rows

BIN_WIDTH = 5
N_BINS = 9  # 50-54, 55-59, ..., 90-94
N_OUTPUT_CYCLES = N_BINS * BIN_WIDTH  # cycles that feed the binned outputs

SERIES = ("adenoma_prev", "prop_small", "incid_early", "incid_late")
N_TARGETS = len(SERIES) * N_BINS

# At age 50, the adenoma-bearing mass is split between adenoma sizes and
# already-preclinical cancer; these are the preclinical fractions.
PRECLIN_EARLY_FRAC = 0.12
PRECLIN_LATE_FRAC = 0.08


class HealthState(IntEnum):
    """The nine health states; the two death states are absorbing."""

    NORMAL = 0
    SMALL_ADENOMA = 1
    LARGE_ADENOMA = 2
    PRECLIN_EARLY = 3
    PRECLIN_LATE = 4
    CLIN_EARLY = 5
    CLIN_LATE = 6
    CRC_DEATH = 7
    OTHER_DEATH = 8


N_STATES = len(HealthState)
ALIVE_SLICE = slice(0, 7)  # everything but the death states
UNDIAGNOSED_SLICE = slice(0, 5)  # alive and not yet clinically detected


def age_bin_labels() -> list[str]:
    """Labels of the nine 5-year age bins, \"50-54\" ... \"90-94\"."""
    return [
        f"{START_AGE + BIN_WIDTH * k}-{START_AGE + BIN_WIDTH * (k + 1) - 1}"
        for k in range(N_BINS)
    ]


def target_ids() -> list[str]:
    """Canonical ids of the 36 outputs, series-major then age bin."""
    return [f"{s}_{b.replace('-', '_')}" for s in SERIES for b in age_bin_labels()]


@dataclass(frozen=True)
class NatHistParams:
    """The eleven model parameters.

    Rates are annual; ``lambda7``/``lambda8`` (stage-specific cancer
    mortality) are fixed during calibration, the other nine are calibrated.

    Attributes
    ----------
    l, g : float
        Scale and shape of the Weibull adenoma-onset hazard.
    lambda2 : float
        Small adenoma -> large adenoma rate.
    lambda3 : float
        Large adenoma -> preclinical early cancer rate.
    lambda4 : float
        Preclinical early -> preclinical late rate.
    lambda5 : float
        Preclinical early -> clinical early rate.
    lambda6 : float
        Preclinical late -> clinical late rate.
    lambda7, lambda8 : float
        Clinical early / late cancer mortality rates (not calibrated).
    p_adeno : float
        Adenoma prevalence at age 50.
    p_small : float
        Proportion of small adenomas among adenomas at age 50.
    """

    l: float
    g: float
    lambda2: float
    lambda3: float
    lambda4: float
    lambda5: float
    lambda6: float
    lambda7: float
    lambda8: float
    p_adeno: float
    p_small: float

    def __post_init__(self):
        rates = (self.l, self.lambda2, self.lambda3, self.lambda4,
                 self.lambda5, self.lambda6, self.lambda7, self.lambda8)
        if any(r < 0 for r in rates):
            raise ValueError("rates must be non-negative")
        if self.g <= 0:
            raise ValueError("Weibull shape g must be positive")
        for name in ("p_adeno", "p_small"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")

    def calibrated_vector(self) -> np.ndarray:
        """The nine calibrated parameters in canonical order."""
        return np.array([getattr(self, n) for n in CALIBRATED_NAMES])

    def with_calibrated(self, theta: np.ndarray) -> "NatHistParams":
        """Copy with calibrated parameters replaced by ``theta`` (length 9)."""
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (len(CALIBRATED_NAMES),):
            raise ValueError(f"expected length-{len(CALIBRATED_NAMES)} vector")
        kwargs = dict(zip(CALIBRATED_NAMES, theta))
        return NatHistParams(lambda7=self.lambda7, lambda8=self.lambda8, **kwargs)


CALIBRATED_NAMES = ("l", "g", "lambda2", "lambda3", "lambda4",
                    "lambda5", "lambda6", "p_adeno", "p_small")

# Base-case parameter values used to generate synthetic calibration targets.
BASE_CASE = NatHistParams(
    l=2.86e-6, g=2.78, lambda2=0.0346, lambda3=0.0215, lambda4=0.3697,
    lambda5=0.2382, lambda6=0.4852, lambda7=0.0302, lambda8=0.2099,
    p_adeno=0.27, p_small=0.71,
)


@dataclass(frozen=True)
class LifeTable:
    """All-cause mortality rates by age.

    ``ages`` must be strictly increasing and cover at least 50-100; rates
    for non-tabulated ages are linearly interpolated.
    """

    ages: np.ndarray
    mu: np.ndarray

    def __post_init__(self):
        ages = np.asarray(self.ages, dtype=float)
        mu = np.asarray(self.mu, dtype=float)
        if ages.ndim != 1 or ages.shape != mu.shape or ages.size < 2:
            raise ValueError("ages and mu must be matching 1-d arrays")
        if not np.all(np.diff(ages) > 0):
            raise ValueError("ages must be strictly increasing")
        if np.any(mu < 0):
            raise ValueError("mortality rates must be non-negative")
        if ages[0] > START_AGE or ages[-1] < END_AGE:
            raise ValueError(f"life table must cover ages {START_AGE}-{END_AGE}")
        object.__setattr__(self, "ages", ages)
        object.__setattr__(self, "mu", mu)

    def rate(self, age):
        """Mortality rate at ``age`` (scalar or array), interpolated."""
        age = np.asarray(age, dtype=float)
        if np.any(age < self.ages[0]) or np.any(age > self.ages[-1]):
            raise ValueError("age outside life-table range")
        return np.interp(age, self.ages, self.mu)

    @classmethod
    def default(cls) -> "LifeTable":
        """Bundled Gompertz-Makeham approximation of adult mortality."""
        ages = np.arange(0, 111, dtype=float)
        mu = 0.0007 + 5e-5 * np.exp(0.085 * ages)
        return cls(ages=ages, mu=mu)

    @classmethod
    def from_csv(cls, path) -> "LifeTable":
        ages, mu = [], []
        with open(path, newline="") as fh:
            reader = csv.DictReader(_noncomment_lines(fh))
            if reader.fieldnames is None or \
                    [f.strip() for f in reader.fieldnames] != ["age", "mu"]:
                raise ValueError(f"life table {path}: expected header 'age,mu'")
            for row in reader:
                ages.append(float(row["age"]))
                mu.append(float(row["mu"]))
        return cls(ages=np.array(ages), mu=np.array(mu))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["age", "mu"])
            for a, m in zip(self.ages, self.mu):
                writer.writerow([_fmt(a), _fmt(m)])


def _noncomment_lines(fh):
    for line in fh:
        if not line.lstrip().startswith("#"):
            yield line


def _fmt(x) -> str:
    return repr(float(x))


@dataclass
class CohortTrace:
    """State-occupancy probabilities, one row per age from 50 to 100."""

    ages: np.ndarray  # (N_CYCLES + 1,)
    occupancy: np.ndarray  # (N_CYCLES + 1, N_STATES), rows sum to 1


@dataclass
class ModelOutputs:
    """The 36 age-binned outputs of one model run.

    ``degenerate`` flags bins where a denominator (alive mass, adenoma
    count, or person-years) was zero; such entries are reported as 0.
    """

    adenoma_prev: np.ndarray  # (N_BINS,)
    prop_small: np.ndarray  # (N_BINS,)
    incid_early: np.ndarray  # (N_BINS,)
    incid_late: np.ndarray  # (N_BINS,)
    degenerate: bool = False

    def to_vector(self) -> np.ndarray:
        """Concatenate the four series into the canonical 36-vector."""
        return np.concatenate(
            [self.adenoma_prev, self.prop_small, self.incid_early, self.incid_late])


@dataclass
class TargetSet:
    """Calibration targets: mean and standard error per output.

    Ordered exactly like ``ModelOutputs.to_vector()``.
    """

    target_id: list[str]
    series: list[str]
    age_bin: list[str]
    mean: np.ndarray  # (N_TARGETS,)
    se: np.ndarray  # (N_TARGETS,), > 0
    floored: np.ndarray | None = None  # bool mask of SE-floored entries

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.se = np.asarray(self.se, dtype=float)
        n = len(self.target_id)
        if not (len(self.series) == len(self.age_bin) == n
                == self.mean.size == self.se.size):
            raise ValueError("inconsistent target-set field lengths")
        if np.any(self.se <= 0):
            raise ValueError("target standard errors must be positive")

    def __len__(self) -> int:
        return len(self.target_id)

    @classmethod
    def from_csv(cls, path) -> "TargetSet":
        ids, series, bins, means, ses = [], [], [], [], []
        with open(path, newline="") as fh:
            reader = csv.DictReader(_noncomment_lines(fh))
            expected = ["target_id", "series", "age_bin", "mean", "se"]
            if reader.fieldnames is None or \
                    [f.strip() for f in reader.fieldnames] != expected:
                raise ValueError(f"targets {path}: expected header {','.join(expected)}")
            for row in reader:
                ids.append(row["target_id"])
                series.append(row["series"])
                bins.append(row["age_bin"])
                means.append(float(row["mean"]))
                ses.append(float(row["se"]))
        return cls(ids, series, bins, np.array(means), np.array(ses))

    def to_csv(self, path, comment: str | None = None) -> None:
        with open(path, "w", newline="") as fh:
            if comment:
                fh.write(f"# {comment}\n")
            writer = csv.writer(fh)
            writer.writerow(["target_id", "series", "age_bin", "mean", "se"])
            for i in range(len(self)):
                writer.writerow([self.target_id[i], self.series[i], self.age_bin[i],
                                 _fmt(self.mean[i]), _fmt(self.se[i])])


def weibull_hazard(l, g, a):
    """Weibull hazard ``l * g * a**(g-1)`` at age ``a`` (scalar or array).

    Parameters
    ----------
    l, g : float
        Scale (>= 0) and shape (> 0).
    a : float or ndarray
        Age in years, > 0.
    """
    if l < 0:
        raise ValueError("Weibull scale l must be non-negative")
    if g <= 0:
        raise ValueError("Weibull shape g must be positive")
    a = np.asarray(a, dtype=float)
    if np.any(a <= 0):
        raise ValueError("age must be positive")
    with np.errstate(over="raise"):
        try:
            h = l * g * a ** (g - 1.0)
        except FloatingPointError as exc:
            raise ValueError(f"Weibull hazard overflowed for g={g}") from exc
    if not np.all(np.isfinite(h)):
        raise ValueError("Weibull hazard is not finite")
    return h if h.ndim else float(h)


def _rate_stack(params: NatHistParams, ages: np.ndarray, mu: np.ndarray) -> np.ndarray:
    """Instantaneous transition-rate matrices, one per age. Shape (T, 9, 9)."""
    T = ages.size
    rates = np.zeros((T, N_STATES, N_STATES))
    s = HealthState
    rates[:, s.NORMAL, s.SMALL_ADENOMA] = weibull_hazard(params.l, params.g, ages)
    rates[:, s.SMALL_ADENOMA, s.LARGE_ADENOMA] = params.lambda2
    rates[:, s.LARGE_ADENOMA, s.PRECLIN_EARLY] = params.lambda3
    rates[:, s.PRECLIN_EARLY, s.PRECLIN_LATE] = params.lambda4
    rates[:, s.PRECLIN_EARLY, s.CLIN_EARLY] = params.lambda5
    rates[:, s.PRECLIN_LATE, s.CLIN_LATE] = params.lambda6
    rates[:, s.CLIN_EARLY, s.CRC_DEATH] = params.lambda7
    rates[:, s.CLIN_LATE, s.CRC_DEATH] = params.lambda8
    rates[:, ALIVE_SLICE, s.OTHER_DEATH] += mu[:, None]
    return rates


def _transition_stack(params: NatHistParams, ages: np.ndarray,
                      mu: np.ndarray) -> np.ndarray:
    """Annual transition-probability matrices for each age in ``ages``.

    Competing exponential risks with total exit rate L embed exactly into
    one cycle: p(stay) = exp(-L), p(to j) = (rate_j / L) * (1 - exp(-L)).
    """
    rates = _rate_stack(params, ages, mu)
    total = rates.sum(axis=2)  # (T, 9)
    stay = np.exp(-total)
    with np.errstate(invalid="ignore", divide="ignore"):
        frac = np.where(total > 0.0, (1.0 - stay) / total, 0.0)
    probs = rates * frac[:, :, None]
    idx = np.arange(N_STATES)
    probs[:, idx, idx] = stay  # absorbing rows have total 0, hence stay = 1
    return probs


def transition_probs(params: NatHistParams, age: float, lt: LifeTable) -> np.ndarray:
    """Row-stochastic 9x9 annual transition matrix at a single ``age``."""
    mu = np.atleast_1d(lt.rate(age))
    return _transition_stack(params, np.atleast_1d(float(age)), mu)[0]


def initial_distribution(params: NatHistParams) -> np.ndarray:
    """State distribution of the cohort at age 50.

    The adenoma-bearing mass ``p_adeno`` is split into preclinical early
    (12%) / late (8%) cancer, with the remaining 80% distributed over small
    and large adenomas by ``p_small``.
    """
    adenoma_frac = 1.0 - PRECLIN_EARLY_FRAC - PRECLIN_LATE_FRAC
    dist = np.zeros(N_STATES)
    dist[HealthState.NORMAL] = 1.0 - params.p_adeno
    dist[HealthState.SMALL_ADENOMA] = params.p_adeno * params.p_small * adenoma_frac
    dist[HealthState.LARGE_ADENOMA] = params.p_adeno * (1.0 - params.p_small) * adenoma_frac
    dist[HealthState.PRECLIN_EARLY] = params.p_adeno * PRECLIN_EARLY_FRAC
    dist[HealthState.PRECLIN_LATE] = params.p_adeno * PRECLIN_LATE_FRAC
    if np.any(dist < 0) or np.any(dist > 1):
        raise ValueError("initial distribution outside [0, 1]")
    return dist


def _binned_outputs(occupancy: np.ndarray, new_early: np.ndarray,
                    new_late: np.ndarray) -> ModelOutputs:
    """Fold per-cycle occupancy (mass or counts) into the 36 outputs.

    ``occupancy`` holds cycle-start rows for the first 45 cycles;
    ``new_early``/``new_late`` the clinical diagnoses made during each of
    those cycles.  Shared by the cohort and microsimulation engines so both
    use identical output definitions.
    """
    occ = occupancy[:N_OUTPUT_CYCLES]
    alive = occ[:, ALIVE_SLICE].sum(axis=1)
    adenoma = occ[:, HealthState.SMALL_ADENOMA] + occ[:, HealthState.LARGE_ADENOMA]
    undiag = occ[:, UNDIAGNOSED_SLICE].sum(axis=1)

    degenerate = False
    with np.errstate(invalid="ignore", divide="ignore"):
        prev = np.where(alive > 0, adenoma / alive, 0.0)
        prop = np.where(adenoma > 0, occ[:, HealthState.SMALL_ADENOMA] / adenoma, 0.0)
    if np.any(alive <= 0) or np.any(adenoma <= 0):
        degenerate = True

    def per_bin_mean(x):
        return x.reshape(N_BINS, BIN_WIDTH).mean(axis=1)

    person_years = undiag.reshape(N_BINS, BIN_WIDTH).sum(axis=1)
    cases_early = new_early[:N_OUTPUT_CYCLES].reshape(N_BINS, BIN_WIDTH).sum(axis=1)
    cases_late = new_late[:N_OUTPUT_CYCLES].reshape(N_BINS, BIN_WIDTH).sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        incid_early = np.where(person_years > 0, cases_early / person_years, 0.0)
        incid_late = np.where(person_years > 0, cases_late / person_years, 0.0)
    if np.any(person_years <= 0):
        degenerate = True

    return ModelOutputs(
        adenoma_prev=per_bin_mean(prev),
        prop_small=per_bin_mean(prop),
        incid_early=incid_early,
        incid_late=incid_late,
        degenerate=degenerate,
    )


def run_cohort(params: NatHistParams,
               lt: LifeTable | None = None) -> tuple[CohortTrace, ModelOutputs]:
    """Deterministic cohort run over ages 50-100.

    Returns the full occupancy trace and the 36 binned outputs.  Adenoma
    prevalence and small-adenoma proportion are cycle-start ratios averaged
    within each bin; incidence is new clinical diagnoses per
    alive-and-undiagnosed person-year within each bin.
    """
    if lt is None:
        lt = LifeTable.default()
    cycle_ages = np.arange(START_AGE, END_AGE, dtype=float)
    probs = _transition_stack(params, cycle_ages, lt.rate(cycle_ages))

    occupancy = np.empty((N_CYCLES + 1, N_STATES))
    occupancy[0] = initial_distribution(params)
    for t in range(N_CYCLES):
        occupancy[t + 1] = occupancy[t] @ probs[t]

    s = HealthState
    new_early = occupancy[:-1, s.PRECLIN_EARLY] * probs[:, s.PRECLIN_EARLY, s.CLIN_EARLY]
    new_late = occupancy[:-1, s.PRECLIN_LATE] * probs[:, s.PRECLIN_LATE, s.CLIN_LATE]

    trace = CohortTrace(ages=np.arange(START_AGE, END_AGE + 1, dtype=float),
                        occupancy=occupancy)
    outputs = _binned_outputs(occupancy, new_early, new_late)
    if outputs.degenerate:
        warnings.warn("cohort outputs degenerate: zero denominator in some bin")
    return trace, outputs


def run_microsim(params: NatHistParams, lt: LifeTable | None, n: int,
                 seed) -> ModelOutputs:
    """Microsimulation of ``n`` individuals; deterministic given ``seed``.

    Individuals start from the age-50 distribution and transition each
    cycle by a multinomial draw from the age-specific matrix.  Outputs use
    the same definitions as :func:`run_cohort`, with probability mass
    replaced by individual counts.  Only the 45 output-relevant cycles are
    simulated.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if lt is None:
        lt = LifeTable.default()
    rng = np.random.default_rng(seed)

    cycle_ages = np.arange(START_AGE, START_AGE + N_OUTPUT_CYCLES, dtype=float)
    probs = _transition_stack(params, cycle_ages, lt.rate(cycle_ages))
    cum = np.cumsum(probs, axis=2)

    states = rng.choice(N_STATES, size=n, p=initial_distribution(params))

    occupancy = np.zeros((N_OUTPUT_CYCLES, N_STATES))
    new_early = np.zeros(N_OUTPUT_CYCLES)
    new_late = np.zeros(N_OUTPUT_CYCLES)
    s = HealthState
    for t in range(N_OUTPUT_CYCLES):
        occupancy[t] = np.bincount(states, minlength=N_STATES)
        u = rng.random(n)
        nxt = (cum[t][states] <= u[:, None]).sum(axis=1)
        np.minimum(nxt, N_STATES - 1, out=nxt)  # guard cumulative rounding
        new_early[t] = np.count_nonzero((states == s.PRECLIN_EARLY) & (nxt == s.CLIN_EARLY))
        new_late[t] = np.count_nonzero((states == s.PRECLIN_LATE) & (nxt == s.CLIN_LATE))
        states = nxt

    outputs = _binned_outputs(occupancy, new_early, new_late)
    if outputs.degenerate:
        warnings.warn("microsimulation outputs degenerate: empty denominator in some bin")
    return outputs


# Floor applied to target standard errors to avoid degenerate likelihoods.
SE_FLOOR_REL = 1e-4
SE_FLOOR_MIN_MEAN = 0.01


def se_floor(mean: np.ndarray) -> np.ndarray:
    """Minimum admissible standard error for targets with the given means."""
    return SE_FLOOR_REL * np.maximum(np.abs(mean), SE_FLOOR_MIN_MEAN)


def generate_targets(params: NatHistParams, lt: LifeTable | None = None,
                     runs: int = 100, n_adenoma: int = 500, n_incid: int = 100_000,
                     seed=0, run_seeds=None) -> TargetSet:
    """Generate synthetic calibration targets from repeated microsimulations.

    Each run simulates the adenoma-related series with ``n_adenoma``
    individuals and the incidence series with ``n_incid`` individuals.
    Targets are the per-output mean across runs together with the per-run
    sampling SD (ddof=1), floored via :func:`se_floor`.  The SD captures
    the uncertainty a single study of the chosen size would carry, which
    is what the two deliberately different cohort sizes are meant to
    express; it also keeps the targets' precision commensurate with what
    any emulator of the simulator can resolve.

    ``run_seeds`` optionally fixes the per-run seeds (length ``runs``);
    by default they derive from ``seed`` and the run index.
    """
    if runs < 2:
        raise ValueError("need at least 2 runs to estimate standard errors")
    if run_seeds is not None and len(run_seeds) != runs:
        raise ValueError("run_seeds must have one entry per run")
    if lt is None:
        lt = LifeTable.default()

    adenoma = np.empty((runs, 2 * N_BINS))
    incid = np.empty((runs, 2 * N_BINS))
    for r in range(runs):
        seed_a = [seed, r, 0] if run_seeds is None else [run_seeds[r], 0]
        seed_i = [seed, r, 1] if run_seeds is None else [run_seeds[r], 1]
        out_a = run_microsim(params, lt, n_adenoma, seed_a)
        out_i = run_microsim(params, lt, n_incid, seed_i)
        adenoma[r] = np.concatenate([out_a.adenoma_prev, out_a.prop_small])
        incid[r] = np.concatenate([out_i.incid_early, out_i.incid_late])

    values = np.hstack([adenoma, incid])
    mean = values.mean(axis=0)
    se = values.std(axis=0, ddof=1)
    floor = se_floor(mean)
    floored = se < floor
    if np.any(floored):
        warnings.warn(f"{int(floored.sum())} target SEs floored (near-zero variance)")
    se = np.maximum(se, floor)

    bins = age_bin_labels()
    return TargetSet(
        target_id=target_ids(),
        series=[s for s in SERIES for _ in bins],
        age_bin=bins * len(SERIES),
        mean=mean,
        se=se,
        floored=floored,
    )
