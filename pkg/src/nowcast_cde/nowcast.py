"""Regression head, training loop and evaluation.

The nowcast for a window is ``alpha + beta . z`` where (alpha, beta) come
from the neural CDE and z is the group factor vector at the target quarter.
Training runs on the standardized target; metrics are reported on the
original scale.
"""
import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import ncde, numerics
from . import path as spline
from .dfm import extract_factors

PRESETS = {
    "korea": {"lr": 1e-2, "hidden_alpha": 128, "hidden_beta": 128, "n_layers": 1},
    "uk": {"lr": 1e-3, "hidden_alpha": 256, "hidden_beta": 256, "n_layers": 1},
}


class TrainingError(RuntimeError):
    pass


class MetricError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-2
    batch_size: int = 128
    max_epochs: int = 1000
    patience: int = 5
    solver: str = ncde.RK4
    steps_per_month: int = 4
    seed: int = 0
    hidden_alpha: int = 128
    hidden_beta: int = 128
    n_layers: int = 1
    time_channel: bool = True
    z_next_mode: str = "forecast"
    em_per_epoch: bool = False
    em_max_iter: int = 500
    em_tol: float = 1e-6

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError(f"lr must be non-negative, got {self.lr}")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")
        if self.solver not in ncde.SOLVERS:
            raise ValueError(f"solver must be one of {ncde.SOLVERS}, got {self.solver!r}")
        if self.steps_per_month < 1:
            raise ValueError("steps_per_month must be >= 1")
        if self.z_next_mode not in ("forecast", "smoothed_last"):
            raise ValueError(f"unknown z_next_mode {self.z_next_mode!r}")

    @classmethod
    def preset(cls, name, **overrides):
        if name not in PRESETS:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        return cls(**{**PRESETS[name], **overrides})


# ---------------------------------------------------------------- head and metrics

def regress(alpha, beta, z):
    beta = np.asarray(beta, dtype=float)
    z = np.asarray(z, dtype=float)
    if beta.shape != z.shape:
        raise ValueError(f"beta has shape {beta.shape} but z has shape {z.shape}")
    return np.asarray(alpha, dtype=float) + (beta * z).sum(axis=-1)


def mse_loss(y, y_hat):
    y = np.asarray(y, dtype=float)
    y_hat = np.asarray(y_hat, dtype=float)
    if y.shape != y_hat.shape:
        raise ValueError(f"length mismatch: {y.shape} vs {y_hat.shape}")
    if y.size == 0:
        raise ValueError("mse of an empty set is undefined")
    return float(np.mean((y - y_hat) ** 2))


def mape(y, y_hat, labels=None):
    y = np.asarray(y, dtype=float)
    y_hat = np.asarray(y_hat, dtype=float)
    if y.shape != y_hat.shape or y.size == 0:
        raise ValueError("mape needs two non-empty arrays of equal length")
    small = np.flatnonzero(np.abs(y) < 1e-12)
    if small.size:
        i = int(small[0])
        name = labels[i] if labels is not None else i
        raise MetricError(f"MAPE undefined: target of window {name} is zero")
    return float(np.mean(np.abs((y - y_hat) / y)))


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, arrays):
        return cls({k: np.zeros_like(a) for k, a in arrays.items()},
                   {k: np.zeros_like(a) for k, a in arrays.items()})


def adam_step(arrays, grads, state, lr):
    """In-place Adam update of ``arrays``; returns the state."""
    if set(grads) != set(arrays):
        raise ValueError("gradient keys do not match parameters")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for k, g in grads.items():
        if g.shape != arrays[k].shape:
            raise ValueError(f"gradient for {k} has shape {g.shape}, parameter has {arrays[k].shape}")
        state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        state.v[k] = b2 * state.v[k] + (1.0 - b2) * g * g
        arrays[k] -= lr * (state.m[k] / c1) / (np.sqrt(state.v[k] / c2) + state.eps)
    return state


class EarlyStopping:
    """Signals a stop once the monitored loss has not decreased for ``patience`` epochs."""

    def __init__(self, patience):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.bad_epochs = 0
        self.epoch = 0

    def update(self, loss):
        self.epoch += 1
        if loss < self.best:
            self.best = loss
            self.best_epoch = self.epoch
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience


# ---------------------------------------------------------------- window inputs

def window_path(panel, window, time_channel=True):
    """Spline path over one window's months (t = 0 .. n-1).

    Channels are fitted on their own observed months; the nearest observation
    is held constant out to the window edges, and a channel with no
    observation in the window stays at 0 (its standardized mean).
    """
    rows = panel.values[window.rows]
    mask = panel.mask[window.rows]
    n, d = rows.shape
    vals = rows.copy()
    obs = mask.copy()
    for j in range(d):
        idx = np.flatnonzero(obs[:, j])
        if idx.size == 0:
            vals[[0, -1], j] = 0.0
            obs[[0, -1], j] = True
            continue
        if idx[0] > 0:
            vals[0, j] = vals[idx[0], j]
            obs[0, j] = True
        if idx[-1] < n - 1:
            vals[-1, j] = vals[idx[-1], j]
            obs[-1, j] = True
    return spline.fit(np.arange(n, dtype=float), vals, obs, names=panel.ids, time_channel=time_channel)


@dataclass
class WindowBatch:
    windows: list
    x1: np.ndarray  # (B, D)
    dX: np.ndarray  # (B, S, n_offsets, C)
    dt: float
    y: np.ndarray  # (B,) standardized target
    z: np.ndarray  # (B, K)

    def __len__(self):
        return len(self.windows)

    def take(self, idx):
        return replace(self, windows=[self.windows[i] for i in idx], x1=self.x1[idx],
                       dX=self.dX[idx], y=self.y[idx], z=self.z[idx])


def prepare_windows(panel, windows, factors, config):
    if not windows:
        raise ValueError("no windows to prepare")
    x1, dX = [], []
    dt = None
    d = panel.n_series
    for w in windows:
        p = window_path(panel, w, config.time_channel)
        x1.append(p.eval(p.start)[:d])
        deriv, dt = ncde.path_derivatives(p, config.solver, config.steps_per_month)
        dX.append(deriv)
    y = np.array([w.y for w in windows])
    z = factors.for_windows(windows, config.z_next_mode)
    return WindowBatch(list(windows), np.array(x1), np.array(dX), dt, y, z)


# ---------------------------------------------------------------- model

@dataclass
class Nowcast:
    target_time: int
    y_true: float
    y_hat: float
    alpha: float
    beta: np.ndarray
    z: np.ndarray


@dataclass
class NowcastModel:
    params: ncde.NcdeParams
    factors: object  # FactorSet
    config: TrainConfig
    panel: object
    groups: list = None

    @classmethod
    def build(cls, panel, factors, config, groups=None):
        rng = numerics.make_rng(config.seed)
        params = ncde.init_params(panel.n_series, factors.n_factors, config.hidden_alpha,
                                  config.hidden_beta, config.n_layers, config.time_channel,
                                  rng=rng, seed=config.seed)
        return cls(params, factors, config, panel, groups)

    @property
    def target_mean(self):
        return 0.0 if self.panel.means is None else float(self.panel.means[self.panel.target_index])

    @property
    def target_scale(self):
        return 1.0 if self.panel.scales is None else float(self.panel.scales[self.panel.target_index])

    def prepare(self, windows):
        return prepare_windows(self.panel, windows, self.factors, self.config)

    def predict(self, batch, params=None):
        params = self.params if params is None else params
        alpha, beta, _ = ncde.forward(params, batch.x1, batch.dX, batch.dt, self.config.solver, record=False)
        return alpha, beta, regress(alpha, beta, batch.z)


def batch_loss_and_grads(params, batch, solver):
    alpha, beta, tape = ncde.forward(params, batch.x1, batch.dX, batch.dt, solver)
    y_hat = regress(alpha, beta, batch.z)
    loss = mse_loss(batch.y, y_hat)
    g_yhat = -2.0 * (batch.y - y_hat) / len(batch)
    grads = ncde.backward(tape, g_yhat, g_yhat[:, None] * batch.z)
    return loss, grads


@dataclass
class History:
    epochs: list = field(default_factory=list)
    train_mse: list = field(default_factory=list)
    val_mse: list = field(default_factory=list)
    best_epoch: int = 0

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_mse", "val_mse"])
            for row in zip(self.epochs, self.train_mse, self.val_mse):
                w.writerow([row[0], repr(row[1]), repr(row[2])])


def train(model, windows, log=None):
    """Mini-batch Adam on the training windows with early stopping on the
    validation loss. ``model.params`` ends as the best-validation parameters."""
    cfg = model.config
    if not windows.train or not windows.val:
        raise TrainingError("training needs at least one train and one validation window")
    shuffle_rng = numerics.make_rng(cfg.seed + 1)
    train_b = model.prepare(windows.train)
    val_b = model.prepare(windows.val)
    params = model.params
    state = AdamState.zeros(params.arrays)
    stopper = EarlyStopping(cfg.patience)
    history = History()
    best_params = params.copy()
    n = len(train_b)
    for epoch in range(1, cfg.max_epochs + 1):
        if cfg.em_per_epoch:
            model.factors = extract_factors(model.panel, model.factors.groups, cfg.em_max_iter, cfg.em_tol)
            train_b.z = model.factors.for_windows(train_b.windows, cfg.z_next_mode)
            val_b.z = model.factors.for_windows(val_b.windows, cfg.z_next_mode)
        order = shuffle_rng.permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            batch = train_b.take(order[start : start + cfg.batch_size])
            loss, grads = batch_loss_and_grads(params, batch, cfg.solver)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            adam_step(params.arrays, grads, state, cfg.lr)
            total += loss * len(batch)
        val_loss = mse_loss(val_b.y, model.predict(val_b, params)[2])
        if not math.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        history.epochs.append(epoch)
        history.train_mse.append(total / n)
        history.val_mse.append(val_loss)
        if log is not None:
            log(f"epoch {epoch} train_mse {total / n:.6f} val_mse {val_loss:.6f}")
        stop = stopper.update(val_loss)
        if stopper.best_epoch == epoch:
            best_params = params.copy()
        if stop:
            break
    history.best_epoch = stopper.best_epoch
    model.params = best_params
    return model, history


def _records(model_scale, batch, alpha, beta):
    mean, scale = model_scale
    out = []
    for i, w in enumerate(batch.windows):
        a = float(alpha[i]) * scale + mean
        b = np.asarray(beta[i], dtype=float) * scale
        z = np.asarray(batch.z[i], dtype=float)
        out.append(Nowcast(w.target_time, float(w.y) * scale + mean, float(regress(a, b, z)), a, b, z))
    return out


def summarize(records):
    from .panel import format_month

    y = np.array([r.y_true for r in records])
    y_hat = np.array([r.y_hat for r in records])
    labels = [format_month(r.target_time) for r in records]
    return {"mse": mse_loss(y, y_hat), "mape": mape(y, y_hat, labels), "n_test": len(records),
            "per_window": records}


def evaluate(model, windows):
    """MSE / MAPE on the original target scale, plus per-window nowcasts."""
    if not windows:
        raise ValueError("evaluate needs at least one window")
    batch = model.prepare(windows)
    alpha, beta, _ = model.predict(batch)
    return summarize(_records((model.target_mean, model.target_scale), batch, alpha, beta))


@dataclass
class DFMBaseline:
    """Constant intercept and loadings from OLS of train targets on train factors."""

    factors: object
    panel: object
    z_next_mode: str = "forecast"
    alpha: float = 0.0
    beta: np.ndarray = None

    def fit(self, windows):
        z = self.factors.for_windows(windows, self.z_next_mode)
        y = np.array([w.y for w in windows])
        design = np.hstack([np.ones((len(y), 1)), z])
        coef = np.linalg.lstsq(design, y, rcond=None)[0]
        self.alpha, self.beta = float(coef[0]), coef[1:]
        return self

    def evaluate(self, windows):
        z = self.factors.for_windows(windows, self.z_next_mode)
        batch = WindowBatch(list(windows), None, None, None, np.array([w.y for w in windows]), z)
        alpha = np.full(len(windows), self.alpha)
        beta = np.tile(self.beta, (len(windows), 1))
        j = self.panel.target_index
        mean = 0.0 if self.panel.means is None else float(self.panel.means[j])
        scale = 1.0 if self.panel.scales is None else float(self.panel.scales[j])
        return summarize(_records((mean, scale), batch, alpha, beta))


# ---------------------------------------------------------------- outputs

def write_nowcasts(records, path):
    from .panel import format_month

    k = len(records[0].beta) if records else 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["target_date", "y_true", "y_hat", "alpha"]
                   + [f"beta_{i + 1}" for i in range(k)] + [f"z_{i + 1}" for i in range(k)])
        for r in records:
            w.writerow([format_month(r.target_time), repr(r.y_true), repr(r.y_hat), repr(r.alpha)]
                       + [repr(float(b)) for b in r.beta] + [repr(float(v)) for v in r.z])


def read_nowcasts(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return rows


def metrics_document(result, config, param_count):
    return {
        "mse": result["mse"],
        "mape": result["mape"],
        "n_test": result["n_test"],
        "config": asdict(config),
        "seed": config.seed,
        "param_count": param_count,
    }


def write_json(doc, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
