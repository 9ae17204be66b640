"""End-to-end runs: standardize, extract factors, train, evaluate, compare."""
from dataclasses import dataclass, replace

from . import ncde, numerics
from .dfm import extract_factors
from .nowcast import DFMBaseline, NowcastModel, TrainConfig, evaluate, train
from .panel import apply_missing, make_windows, standardize


@dataclass
class RunResult:
    model: NowcastModel
    history: object
    test: dict
    baseline: dict
    windows: object
    factors: object
    param_count: int


def prepare(panel, config, groups=None, window=15, split=(0.7, 0.15, 0.15), missing_rate=0.0,
            missing_seed=None):
    if missing_rate:
        rng = numerics.make_rng(config.seed if missing_seed is None else missing_seed)
        panel = apply_missing(panel, missing_rate, rng)
    std = standardize(panel)
    windows = make_windows(std, window, split)
    factors = extract_factors(std, groups, config.em_max_iter, config.em_tol)
    return std, windows, factors


def run(panel, config, groups=None, window=15, split=(0.7, 0.15, 0.15), missing_rate=0.0,
        missing_seed=None, prepared=None, log=None):
    """Train and evaluate the neural nowcaster and the DFM-only baseline."""
    std, windows, factors = prepared or prepare(panel, config, groups, window, split, missing_rate,
                                                missing_seed)
    model = NowcastModel.build(std, factors, config, groups)
    model, history = train(model, windows, log=log)
    test = evaluate(model, windows.test)
    base = DFMBaseline(factors, std, config.z_next_mode).fit(windows.train).evaluate(windows.test)
    return RunResult(model, history, test, base, windows, factors, ncde.param_count(model.params))


def compare_solvers(panel, config, **kwargs):
    """Same data, seed and step count; only the solver differs."""
    prepared = kwargs.pop("prepared", None) or prepare(panel, config, **{
        k: kwargs[k] for k in ("groups", "window", "split", "missing_rate", "missing_seed") if k in kwargs})
    out = {}
    for solver in ncde.SOLVERS:
        out[solver] = run(panel, replace(config, solver=solver), prepared=prepared, **kwargs)
    return out


def benchmark_config(seed=0, **overrides):
    """Training settings for the standard synthetic benchmark: a small network
    and mini-batches of 32 so that a few hundred training windows give enough
    optimizer steps per epoch."""
    base = dict(lr=3e-3, batch_size=32, max_epochs=300, patience=5, hidden_alpha=16, hidden_beta=16,
                n_layers=1, steps_per_month=4, z_next_mode="smoothed_last", seed=seed)
    return TrainConfig(**{**base, **overrides})
