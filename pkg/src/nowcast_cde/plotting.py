"""Figures rendered next to the CSV outputs (Agg backend, PNG files)."""
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .panel import format_month  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    # a fixed Software entry keeps the PNG bytes independent of the matplotlib build
    fig.savefig(path, dpi=110, metadata={"Software": None})
    plt.close(fig)
    return path


def _month_axis(ax, months):
    step = max(1, len(months) // 8)
    ax.set_xticks(np.arange(len(months))[::step])
    ax.set_xticklabels([format_month(m) for m in months[::step]], rotation=45, ha="right", fontsize=8)


def plot_nowcasts(records, path, baseline=None):
    """Actual target against NCDENow (and optionally DFM-only) nowcasts."""
    fig, ax = plt.subplots(figsize=(8, 4))
    months = np.array([r.target_time for r in records])
    x = np.arange(len(records))
    ax.plot(x, [r.y_true for r in records], "k-o", ms=3, lw=1.2, label="actual")
    ax.plot(x, [r.y_hat for r in records], "-s", ms=3, color="tab:red", label="NCDENow")
    if baseline is not None:
        ax.plot(x, [r.y_hat for r in baseline], "--^", ms=3, color="tab:blue", label="DFM only")
    _month_axis(ax, months)
    ax.set_ylabel("target")
    ax.legend(frameon=False)
    ax.set_title("Test-window nowcasts")
    return _save(fig, path)


def plot_history(history, path):
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(history.epochs, history.train_mse, label="train")
    ax.plot(history.epochs, history.val_mse, label="validation")
    if history.best_epoch:
        ax.axvline(history.best_epoch, color="grey", ls=":", lw=1)
    ax.set_xlabel("epoch")
    ax.set_ylabel("MSE (standardized)")
    ax.set_yscale("log")
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_factors(factors, path):
    k = factors.n_factors
    fig, axes = plt.subplots(k, 1, figsize=(8, 1.8 * k + 0.6), sharex=True, squeeze=False)
    x = np.arange(len(factors.times))
    for i, g in enumerate(factors.groups):
        ax = axes[i, 0]
        ax.plot(x, factors.z[:, i], lw=1)
        ax.set_ylabel(g)
    _month_axis(axes[-1, 0], factors.times)
    return _save(fig, path)


def plot_loadings(records, groups, path):
    """Time-varying loadings beta and intercept alpha over the test windows."""
    fig, ax = plt.subplots(figsize=(8, 4))
    x = np.arange(len(records))
    ax.plot(x, [r.alpha for r in records], "k-", lw=1.5, label="alpha")
    for i, g in enumerate(groups):
        ax.plot(x, [r.beta[i] for r in records], lw=1, label=f"beta ({g})")
    _month_axis(ax, np.array([r.target_time for r in records]))
    ax.legend(frameon=False, fontsize=8)
    return _save(fig, path)


def plot_ablation(rows, path):
    """rows: dicts with rate, model, mse."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    models = sorted({r["model"] for r in rows})
    rates = sorted({r["rate"] for r in rows})
    width = 0.8 / len(models)
    for j, m in enumerate(models):
        vals = [next(r["mse"] for r in rows if r["model"] == m and r["rate"] == q) for q in rates]
        ax.bar(np.arange(len(rates)) + j * width, vals, width, label=m)
    ax.set_xticks(np.arange(len(rates)) + 0.4 - width / 2)
    ax.set_xticklabels([f"{q:.0%}" for q in rates])
    ax.set_xlabel("missing rate")
    ax.set_ylabel("test MSE")
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_param_report(rows, path):
    """rows: dicts with model, param_count, mape."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.scatter([r["param_count"] for r in rows], [r["mape"] for r in rows])
    for r in rows:
        ax.annotate(r["model"], (r["param_count"], r["mape"]), fontsize=8, xytext=(3, 3),
                    textcoords="offset points")
    ax.set_xscale("log")
    ax.set_xlabel("parameters")
    ax.set_ylabel("test MAPE")
    return _save(fig, path)
