"""Shared test oracles and builders, independent of the code paths they check."""

import numpy as np

from emucal import crc
from emucal.ann import AnnConfig, AnnModel
from emucal.doe import Design, PriorSpec, Scaler


def microsim_se(params, lt, n):
    """Conservative sampling SEs of the 36 microsimulation outputs.

    Built from the cohort trace (the analytic expectation) with binomial
    variance for the prevalence/proportion ratios and Poisson variance for
    incidence.  Within-bin cycles of one run are positively correlated, so
    the per-bin mean uses the mean per-cycle variance unreduced (an upper
    bound on the true SE); this keeps the 5-SE agreement check valid
    without modeling the correlation structure.
    """
    trace, _ = crc.run_cohort(params, lt)
    occ = trace.occupancy[:crc.N_OUTPUT_CYCLES]
    alive = occ[:, :7].sum(axis=1)
    adenoma = occ[:, 1] + occ[:, 2]
    undiag = occ[:, :5].sum(axis=1)

    cycle_ages = np.arange(crc.START_AGE, crc.START_AGE + crc.N_OUTPUT_CYCLES,
                           dtype=float)
    probs = crc._transition_stack(params, cycle_ages, lt.rate(cycle_ages))
    s = crc.HealthState
    new_early = occ[:, s.PRECLIN_EARLY] * probs[:, s.PRECLIN_EARLY, s.CLIN_EARLY]
    new_late = occ[:, s.PRECLIN_LATE] * probs[:, s.PRECLIN_LATE, s.CLIN_LATE]

    def ratio_se(p_num, denom_mass):
        p = np.where(denom_mass > 0, p_num / np.maximum(denom_mass, 1e-300), 0.0)
        var_cycle = p * (1 - p) / np.maximum(n * denom_mass, 1.0)
        return np.sqrt(var_cycle.reshape(crc.N_BINS, crc.BIN_WIDTH).mean(axis=1))

    se_prev = ratio_se(adenoma, alive)
    se_prop = ratio_se(occ[:, 1], adenoma)

    def incid_se(events):
        ev = events.reshape(crc.N_BINS, crc.BIN_WIDTH).sum(axis=1) * n
        py = undiag.reshape(crc.N_BINS, crc.BIN_WIDTH).sum(axis=1) * n
        return np.sqrt(np.maximum(ev, 1.0)) / np.maximum(py, 1.0)

    return np.concatenate([se_prev, se_prop, incid_se(new_early),
                           incid_se(new_late)])


def jacobian_fd_max_rel(model, x, h=1e-5):
    """Max relative gap between the analytic Jacobian and central differences.

    Entries below 1e-5 in magnitude are compared against that floor: with
    step h=1e-5 the differencing itself carries ~1e-11 absolute roundoff,
    so smaller entries cannot be resolved to a relative tolerance.
    """
    jac = model.input_gradient(x)
    fd = np.empty_like(jac)
    for k in range(x.size):
        e = np.zeros(x.size)
        e[k] = h
        fd[:, k] = (model.forward(x + e) - model.forward(x - e)) / (2 * h)
    return float((np.abs(jac - fd) / np.maximum(np.abs(fd), 1e-5)).max())


def toy_design(n, rng, fn, input_dim=9, output_dim=36, lo=-1.0, hi=1.0):
    """Design with inputs uniform on [lo, hi]^d and outputs fn(X)."""
    x = rng.uniform(lo, hi, (n, input_dim))
    y = fn(x)
    return Design(
        inputs=x,
        outputs=y,
        input_scaler=Scaler.fit(x),
        output_scaler=Scaler.fit(y),
        param_names=tuple(f"p{i}" for i in range(input_dim)),
        output_names=tuple(f"y{j}" for j in range(output_dim)),
    )


def exact_target_model(target_means, input_dim=9):
    """Emulator that predicts exactly ``target_means`` for every input.

    Zero weights give a zero scaled output; the output scaler maps scaled
    y to mean + y, so the natural prediction equals the means identically.
    """
    q = target_means.size
    config = AnnConfig(input_dim=input_dim, hidden_layers=(4,), output_dim=q)
    model = AnnModel.initialize(config, seed=0)
    for w in model.weights:
        w[...] = 0.0
    for b in model.biases:
        b[...] = 0.0
    model.input_scaler = Scaler(lo=-np.ones(input_dim), hi=np.ones(input_dim))
    model.output_scaler = Scaler(lo=target_means - 1.0, hi=target_means + 1.0)
    return model


def uniform_targets(means, sigmas):
    bins = crc.age_bin_labels()
    return crc.TargetSet(
        target_id=crc.target_ids(),
        series=[s for s in crc.SERIES for _ in bins],
        age_bin=bins * len(crc.SERIES),
        mean=np.asarray(means, dtype=float),
        se=np.asarray(sigmas, dtype=float),
    )


def crc_priors():
    return PriorSpec.crc()
