"""Feedforward neural-network emulator.

A fully-connected network with logistic hidden layers and a linear output
layer, trained by mini-batch gradient descent with adaptive moment
estimates on mean squared error in scaled ([-1, 1]) space.  Exposes exact
analytic input Jacobians and vector-Jacobian products so gradient-based
samplers can run on the emulator.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .doe import Design, Scaler

MODEL_FILE_VERSION = 1

_ACTIVATIONS = ("logistic", "linear")


def logistic(z):
    """Numerically stable logistic sigmoid 1 / (1 + exp(-z))."""
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class AnnConfig:
    """Network architecture: layer sizes and activations."""

    input_dim: int = 9
    hidden_layers: tuple[int, ...] = (100, 100)
    output_dim: int = 36
    hidden_activation: str = "logistic"
    output_activation: str = "linear"

    def __post_init__(self):
        object.__setattr__(self, "hidden_layers", tuple(self.hidden_layers))
        widths = (self.input_dim, *self.hidden_layers, self.output_dim)
        if any(w < 1 for w in widths):
            raise ValueError("all layer widths must be >= 1")
        if self.hidden_activation != "logistic":
            raise ValueError(f"unsupported hidden activation {self.hidden_activation!r}")
        if self.output_activation not in _ACTIVATIONS:
            raise ValueError(f"unsupported output activation {self.output_activation!r}")

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_layers, self.output_dim)

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_layers": list(self.hidden_layers),
            "output_dim": self.output_dim,
            "hidden_activation": self.hidden_activation,
            "output_activation": self.output_activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AnnConfig":
        return cls(
            input_dim=d["input_dim"],
            hidden_layers=tuple(d["hidden_layers"]),
            output_dim=d["output_dim"],
            hidden_activation=d["hidden_activation"],
            output_activation=d["output_activation"],
        )


@dataclass(frozen=True)
class TrainOptions:
    """Optimizer settings for :func:`train`.

    ``learning_rate`` is the initial step; it decays smoothly by a factor
    of 10 every ``lr_decay_epochs`` epochs, floored at ``min_lr``.
    """

    batch_size: int = 128
    learning_rate: float = 1e-3
    max_epochs: int = 2000
    patience: int = 50
    lr_decay_epochs: int = 700
    min_lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def epoch_lr(self, epoch: int) -> float:
        return max(self.learning_rate * 10.0 ** (-epoch / self.lr_decay_epochs),
                   self.min_lr)


class AnnModel:
    """Trained network: per-layer weights/biases plus the design scalers.

    ``weights[k]`` has shape (fan_out, fan_in); the forward pass computes
    ``z = h @ W.T + b`` layer by layer.  Scalers may be absent for nets
    used directly in scaled space.
    """

    def __init__(self, config: AnnConfig, weights, biases,
                 input_scaler: Scaler | None = None,
                 output_scaler: Scaler | None = None):
        self.config = config
        self.weights = [np.asarray(w, dtype=float) for w in weights]
        self.biases = [np.asarray(b, dtype=float) for b in biases]
        self.input_scaler = input_scaler
        self.output_scaler = output_scaler
        sizes = config.layer_sizes
        expected = [(sizes[k + 1], sizes[k]) for k in range(len(sizes) - 1)]
        got = [w.shape for w in self.weights]
        if got != expected or [b.shape for b in self.biases] != [(s,) for s in sizes[1:]]:
            raise ValueError(f"weight shapes {got} do not chain {sizes}")
        for arr in (*self.weights, *self.biases):
            if not np.all(np.isfinite(arr)):
                raise ValueError("non-finite network coefficients")

    @classmethod
    def initialize(cls, config: AnnConfig, seed,
                   input_scaler=None, output_scaler=None) -> "AnnModel":
        """Glorot-uniform weights, zero biases; deterministic given seed."""
        rng = np.random.default_rng(seed)
        sizes = config.layer_sizes
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
            biases.append(np.zeros(fan_out))
        return cls(config, weights, biases, input_scaler, output_scaler)

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def _forward_cached(self, x: np.ndarray) -> list[np.ndarray]:
        """Activations per layer for a 2-d batch; index 0 is the input."""
        acts = [x]
        h = x
        last = self.n_layers - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w.T + b
            if k < last:
                h = logistic(z)
            elif self.config.output_activation == "logistic":
                h = logistic(z)
            else:
                h = z
            acts.append(h)
        return acts

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Evaluate the network on scaled input(s); accepts (d,) or (m, d)."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        x2 = np.atleast_2d(x)
        if x2.shape[1] != self.config.input_dim:
            raise ValueError(f"expected input dim {self.config.input_dim}, got {x2.shape[1]}")
        out = self._forward_cached(x2)[-1]
        return out[0] if single else out

    def backprop_input(self, acts: list[np.ndarray], v: np.ndarray) -> np.ndarray:
        """Vector-Jacobian product v^T (dout/dx) per batch row.

        ``acts`` comes from ``_forward_cached``; ``v`` has shape (m, output_dim).
        """
        g = v
        if self.config.output_activation == "logistic":
            out = acts[-1]
            g = g * out * (1.0 - out)
        for k in range(self.n_layers - 1, -1, -1):
            g = g @ self.weights[k]
            if k > 0:
                h = acts[k]
                g = g * (h * (1.0 - h))
        return g

    def input_gradient(self, x: np.ndarray) -> np.ndarray:
        """Exact Jacobian d(output)/d(input) at ``x``, shape (output_dim, input_dim)."""
        x = np.asarray(x, dtype=float)
        if x.ndim != 1:
            raise ValueError("input_gradient expects a single input vector")
        acts = self._forward_cached(x[None, :])
        jac = self.weights[0]
        for k in range(1, self.n_layers):
            h = acts[k][0]
            jac = self.weights[k] @ (jac * (h * (1.0 - h))[:, None])
        if self.config.output_activation == "logistic":
            out = acts[-1][0]
            jac = jac * (out * (1.0 - out))[:, None]
        return jac

    def predict_natural(self, theta: np.ndarray) -> np.ndarray:
        """Natural-unit prediction: unscale(forward(scale(theta)))."""
        if self.input_scaler is None or self.output_scaler is None:
            raise ValueError("model has no scalers attached")
        return self.output_scaler.unscale(self.forward(self.input_scaler.scale(theta)))

    def save(self, path, comment: str | None = None) -> None:
        doc = {
            "version": MODEL_FILE_VERSION,
            "config": self.config.to_dict(),
            "input_scaler": None if self.input_scaler is None else self.input_scaler.to_dict(),
            "output_scaler": None if self.output_scaler is None else self.output_scaler.to_dict(),
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }
        if comment:
            doc["comment"] = comment
        with open(path, "w") as fh:
            json.dump(doc, fh, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "AnnModel":
        with open(path) as fh:
            doc = json.load(fh)
        if doc.get("version") != MODEL_FILE_VERSION:
            raise ValueError(f"unsupported model file version {doc.get('version')!r}")
        return cls(
            config=AnnConfig.from_dict(doc["config"]),
            weights=[np.array(w) for w in doc["weights"]],
            biases=[np.array(b) for b in doc["biases"]],
            input_scaler=None if doc["input_scaler"] is None else Scaler.from_dict(doc["input_scaler"]),
            output_scaler=None if doc["output_scaler"] is None else Scaler.from_dict(doc["output_scaler"]),
        )


@dataclass
class TrainReport:
    """Loss history and validation accuracy of one training run."""

    train_loss: list[float] = field(default_factory=list)
    valid_loss: list[float] = field(default_factory=list)
    r2_per_output: np.ndarray | None = None
    aggregate_r2: float = float("nan")
    epochs: int = 0
    best_epoch: int = 0
    early_stopped: bool = False

    def to_dict(self) -> dict:
        return {
            "train_loss": self.train_loss,
            "valid_loss": self.valid_loss,
            "r2_per_output": None if self.r2_per_output is None else self.r2_per_output.tolist(),
            "aggregate_r2": self.aggregate_r2,
            "epochs": self.epochs,
            "best_epoch": self.best_epoch,
            "early_stopped": self.early_stopped,
        }


def _mse(pred: np.ndarray, y: np.ndarray) -> float:
    diff = pred - y
    return float(np.mean(diff * diff))


def train(train_design: Design, valid_design: Design,
          config: AnnConfig | None = None, opts: TrainOptions | None = None,
          seed=0) -> tuple[AnnModel, TrainReport]:
    """Fit the network to a training design, early-stopping on validation loss.

    Both designs must share scalers (as produced by :func:`emucal.doe.split`).
    The best-validation weights are restored before returning.  Deterministic
    given ``seed``.

    Raises
    ------
    RuntimeError
        If the loss becomes non-finite (divergence).
    """
    if train_design.n_rows == 0 or valid_design.n_rows == 0:
        raise ValueError("training and validation designs must be nonempty")
    if config is None:
        config = AnnConfig(input_dim=train_design.inputs.shape[1],
                           output_dim=train_design.outputs.shape[1])
    opts = opts or TrainOptions()

    x_train = train_design.scaled_inputs()
    y_train = train_design.scaled_outputs()
    x_valid = valid_design.scaled_inputs()
    y_valid = valid_design.scaled_outputs()

    rng = np.random.default_rng(seed)
    model = AnnModel.initialize(config, rng, train_design.input_scaler,
                                train_design.output_scaler)
    params = model.weights + model.biases
    m_adam = [np.zeros_like(p) for p in params]
    v_adam = [np.zeros_like(p) for p in params]

    n = x_train.shape[0]
    batch = min(opts.batch_size, n)
    report = TrainReport()
    best_loss = np.inf
    best_params = [p.copy() for p in params]
    since_best = 0
    step = 0

    for epoch in range(opts.max_epochs):
        lr = opts.epoch_lr(epoch)
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            xb, yb = x_train[idx], y_train[idx]

            acts = model._forward_cached(xb)
            pred = acts[-1]
            diff = pred - yb
            epoch_loss += float(np.sum(diff * diff))

            # backprop: dL/dpred for mean-over-all-elements squared error
            g = (2.0 / diff.size) * diff
            if config.output_activation == "logistic":
                g = g * pred * (1.0 - pred)
            grads_w = [None] * model.n_layers
            grads_b = [None] * model.n_layers
            for k in range(model.n_layers - 1, -1, -1):
                grads_w[k] = g.T @ acts[k]
                grads_b[k] = g.sum(axis=0)
                if k > 0:
                    h = acts[k]
                    g = (g @ model.weights[k]) * (h * (1.0 - h))

            step += 1
            lr_t = lr * (np.sqrt(1.0 - opts.beta2 ** step) / (1.0 - opts.beta1 ** step))
            for p, mom, vel, grad in zip(params, m_adam, v_adam, grads_w + grads_b):
                mom *= opts.beta1
                mom += (1.0 - opts.beta1) * grad
                vel *= opts.beta2
                vel += (1.0 - opts.beta2) * grad * grad
                p -= lr_t * mom / (np.sqrt(vel) + opts.adam_eps)

        train_loss = epoch_loss / y_train.size
        valid_loss = _mse(model.forward(x_valid), y_valid)
        if not (np.isfinite(train_loss) and np.isfinite(valid_loss)):
            raise RuntimeError(
                f"training diverged at epoch {epoch}: train={train_loss}, valid={valid_loss}")
        report.train_loss.append(train_loss)
        report.valid_loss.append(valid_loss)

        if valid_loss < best_loss:
            best_loss = valid_loss
            best_params = [p.copy() for p in params]
            report.best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best > opts.patience:
                report.early_stopped = True
                break

    report.epochs = len(report.train_loss)
    for p, best in zip(params, best_params):
        p[...] = best

    val = validate(model, valid_design)
    report.r2_per_output = val.r2_per_output
    report.aggregate_r2 = val.aggregate_r2
    return model, report


@dataclass
class ValidationResult:
    """Per-output R-squared and the scatter data behind it (scaled space)."""

    output_names: tuple[str, ...]
    r2_per_output: np.ndarray  # NaN where the observed column has zero variance
    aggregate_r2: float
    observed: np.ndarray  # (m, q) scaled
    predicted: np.ndarray  # (m, q) scaled

    def to_scatter_csv(self, path, comment: str | None = None) -> None:
        import csv as _csv
        with open(path, "w", newline="") as fh:
            if comment:
                fh.write(f"# {comment}\n")
            writer = _csv.writer(fh)
            writer.writerow(["output_id", "observed_scaled", "predicted_scaled"])
            for j, name in enumerate(self.output_names):
                for o, p in zip(self.observed[:, j], self.predicted[:, j]):
                    writer.writerow([name, repr(float(o)), repr(float(p))])


def validate(model: AnnModel, valid_design: Design) -> ValidationResult:
    """R-squared of model predictions on a validation design, per output.

    Computed in scaled space; columns with zero observed variance get NaN.
    """
    if valid_design.n_rows == 0:
        raise ValueError("validation design is empty")
    observed = valid_design.scaled_outputs()
    predicted = model.forward(valid_design.scaled_inputs())
    ss_res = np.sum((observed - predicted) ** 2, axis=0)
    ss_tot = np.sum((observed - observed.mean(axis=0)) ** 2, axis=0)
    valid_cols = np.ptp(observed, axis=0) > 0.0  # constant columns: R2 undefined
    with np.errstate(invalid="ignore", divide="ignore"):
        r2 = np.where(valid_cols, 1.0 - ss_res / ss_tot, np.nan)
    aggregate = float(1.0 - ss_res[valid_cols].sum() / ss_tot[valid_cols].sum())
    return ValidationResult(
        output_names=valid_design.output_names,
        r2_per_output=r2,
        aggregate_r2=aggregate,
        observed=observed,
        predicted=predicted,
    )
