"""Figures written next to the CSV reports."""
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# fixed metadata keeps repeated runs byte-identical
_PNG_META = {"Software": None}


def _style(ax, xlabel=None, ylabel=None, title=None):
    ax.spines["right"].set_visible(False)
    ax.spines["top"].set_visible(False)
    if xlabel:
        ax.set_xlabel(xlabel)
    if ylabel:
        ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)


def _save(fig, path):
    tmp = f"{path}.tmp.png"
    fig.savefig(tmp, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    os.replace(tmp, path)


def plot_loss_curves(report, path):
    """Training and validation loss per epoch, best epoch marked."""
    epochs = range(1, len(report.train_loss) + 1)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(epochs, report.train_loss, label="train")
    ax.plot(epochs, report.val_loss, label="validation")
    if report.best_epoch:
        ax.axvline(report.best_epoch, color="grey", linestyle=":", label=f"best (epoch {report.best_epoch})")
    ax.set_yscale("log")
    ax.legend(frameon=False)
    _style(ax, "epoch", "loss")
    fig.tight_layout()
    _save(fig, path)


def plot_predictions(inputs, targets, outputs, path, count=4):
    """Rows of input / target / prediction for the first ``count`` samples."""
    count = min(count, len(inputs))
    fig, axes = plt.subplots(count, 3, figsize=(6, 2 * count), squeeze=False)
    for i in range(count):
        for j, (img, title) in enumerate(((inputs[i, 0], "input"), (targets[i, 0], "target"),
                                          (outputs[i, 0], "prediction"))):
            ax = axes[i, j]
            ax.imshow(img, cmap="gray_r" if j == 0 else "viridis", interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
            if i == 0:
                ax.set_title(title)
    fig.tight_layout()
    _save(fig, path)


def plot_fold_metrics(rows, metric, path):
    """Bar chart of one metric per cross-validation fold, mean as a line."""
    folds = [r for r in rows if r["fold"] != "mean"]
    mean = next(r for r in rows if r["fold"] == "mean")[metric]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.bar([str(r["fold"]) for r in folds], [r[metric] for r in folds], color="tab:blue")
    ax.axhline(mean, color="grey", linestyle="--", label=f"mean {mean:.3g}")
    ax.legend(frameon=False)
    _style(ax, "fold", metric)
    fig.tight_layout()
    _save(fig, path)
