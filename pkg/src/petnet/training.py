"""Losses, plain SGD, the epoch loop with early stopping, and metrics."""
import time
from dataclasses import dataclass, field

import numpy as np

from .data import batches
from .errors import ConfigError, NumericError, ShapeError
from .network import backward, forward

LOSS_KINDS = ("mse", "cross_entropy", "binary_cross_entropy")
HEAD_LOSS = {"linear": "mse", "softmax": "cross_entropy", "sigmoid": "binary_cross_entropy"}
CLAMP = 1e-12


def fused_head(head, loss_kind):
    """True when the loss gradient is taken w.r.t. the head's input."""
    return (head, loss_kind) in (("softmax", "cross_entropy"), ("sigmoid", "binary_cross_entropy"))


def compute_loss(kind, predicted, target):
    """Return ``(value, grad)``.

    For ``mse`` the gradient is w.r.t. ``predicted``. For the two entropies
    ``predicted`` is the softmax/sigmoid output and the gradient is w.r.t. the
    pre-activation values, ``(p - t) / count``.
    """
    if predicted.shape != target.shape:
        raise ShapeError(f"prediction {predicted.shape} and target {target.shape} differ")
    if kind == "mse":
        diff = predicted - target
        return float(np.mean(diff * diff)), 2.0 * diff / diff.size
    p = np.clip(predicted, CLAMP, 1.0 - CLAMP)
    if kind == "cross_entropy":
        sums = target.sum(axis=-1)
        if np.any(np.abs(sums - 1.0) > 1e-9):
            raise ShapeError("cross-entropy targets must be one-hot rows summing to 1")
        n = int(np.prod(predicted.shape[:-1]))
        value = -float(np.sum(target * np.log(p))) / n
        return value, (predicted - target) / n
    if kind == "binary_cross_entropy":
        value = -float(np.mean(target * np.log(p) + (1.0 - target) * np.log1p(-p)))
        return value, (predicted - target) / predicted.size
    raise ConfigError(f"unknown loss {kind!r}")


def sgd_step(params: dict, grads: dict, learning_rate: float):
    """``w -= learning_rate * g`` in place for every parameter."""
    for key, w in params.items():
        g = grads[key]
        if g.shape != w.shape:
            raise ShapeError(f"{key}: gradient {g.shape} does not match parameter {w.shape}")
        w -= learning_rate * g
    return params


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 8
    max_epochs: int = 30
    patience: int = 5
    seed: int = 0
    loss_kind: str = "auto"
    shuffle: bool = True

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 0:
            raise ConfigError("batch_size and max_epochs must be >= 1, patience >= 0")
        if self.loss_kind not in LOSS_KINDS + ("auto",):
            raise ConfigError(f"unknown loss {self.loss_kind!r}")


@dataclass
class TrainReport:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    stopped_epoch: int = 0
    best_epoch: int = 0
    best_validation_loss: float = float("inf")
    seconds: float = 0.0

    def to_csv(self) -> str:
        rows = ["epoch,train_loss,val_loss"]
        for i, (t, v) in enumerate(zip(self.train_loss, self.val_loss), start=1):
            rows.append(f"{i},{t:.17g},{v:.17g}")
        return "\n".join(rows) + "\n"


def resolve_loss(head, loss_kind):
    if loss_kind == "auto":
        return HEAD_LOSS[head]
    if HEAD_LOSS[head] != loss_kind:
        raise ConfigError(f"loss {loss_kind} is incompatible with a {head} head (use {HEAD_LOSS[head]})")
    return loss_kind


def dataset_loss(model, data, loss_kind, batch_size=32):
    """Mean loss over ``data`` in infer mode, weighted by batch size."""
    total = 0.0
    for start in range(0, len(data), batch_size):
        x, y = data.inputs[start:start + batch_size], data.targets[start:start + batch_size]
        out, _ = forward(model, x, mode="infer")
        total += compute_loss(loss_kind, out, y)[0] * len(x)
    return total / len(data)


def train(model, train_set, val_set, config: TrainConfig, log=None):
    """Minibatch SGD with validation-based early stopping.

    Returns a copy of the model holding the weights of the best validation
    epoch and a :class:`TrainReport`. Training stops once the validation loss
    has not improved for ``patience`` epochs (at least one).
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ConfigError("training and validation sets must be non-empty")
    if config.batch_size > len(train_set):
        raise ConfigError(f"batch_size {config.batch_size} exceeds training set size {len(train_set)}")
    loss_kind = resolve_loss(model.head, config.loss_kind)
    skip = fused_head(model.head, loss_kind)
    params = model.parameters()
    report = TrainReport()
    best = model.copy()
    since_best = 0
    start = time.perf_counter()
    for epoch in range(1, config.max_epochs + 1):
        if config.shuffle:
            order = batches(len(train_set), config.batch_size, config.seed, epoch - 1)
        else:
            idx = np.arange(len(train_set))
            order = [idx[i:i + config.batch_size] for i in range(0, len(idx), config.batch_size)]
        total = 0.0
        for b, idx in enumerate(order):
            x, y = train_set.inputs[idx], train_set.targets[idx]
            out, trace = forward(model, x, mode="train")
            value, grad = compute_loss(loss_kind, out, y)
            if not np.isfinite(value):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {b}")
            sgd_step(params, backward(model, trace, grad, skip_head=skip), config.learning_rate)
            total += value * len(idx)
        report.train_loss.append(total / len(train_set))
        val = dataset_loss(model, val_set, loss_kind)
        if not np.isfinite(val):
            raise NumericError(f"non-finite validation loss at epoch {epoch}")
        report.val_loss.append(val)
        report.stopped_epoch = epoch
        if val < report.best_validation_loss:
            report.best_validation_loss = val
            report.best_epoch = epoch
            best = model.copy()
            since_best = 0
        else:
            since_best += 1
        if log:
            log(f"epoch {epoch}: train {report.train_loss[-1]:.6g} val {val:.6g}")
        if since_best >= max(config.patience, 1):
            break
    report.seconds = time.perf_counter() - start
    return best, report


# --------------------------------------------------------------------------
# evaluation


def predict(model, inputs, batch_size=32):
    outs = [forward(model, inputs[i:i + batch_size], mode="infer")[0]
            for i in range(0, len(inputs), batch_size)]
    return np.concatenate(outs, axis=0)


def threshold(prob):
    """Binary decision at 0.5; exactly 0.5 maps to 0."""
    return (prob > 0.5).astype(np.float64)


def dice(pred_mask, true_mask):
    """2|P∩T| / (|P|+|T|); two empty masks score 1."""
    p, t = pred_mask.astype(bool), true_mask.astype(bool)
    denom = p.sum() + t.sum()
    if denom == 0:
        return 1.0
    return 2.0 * float(np.logical_and(p, t).sum()) / float(denom)


def task_for_head(model):
    spatial = len(model.shapes[-1]) == 4
    if model.head == "softmax":
        return "classification"
    if model.head == "sigmoid":
        return "segmentation" if spatial else "classification"
    return "synthesis"


def metrics_from_outputs(task, head, outputs, targets):
    if len(outputs) == 0:
        raise ConfigError("cannot evaluate an empty dataset")
    if task == "classification":
        if head == "softmax":
            correct = outputs.argmax(axis=-1) == targets.argmax(axis=-1)
        else:
            correct = threshold(outputs) == targets
        return {"accuracy": float(np.mean(correct))}
    if task == "segmentation":
        masks = threshold(outputs)
        scores = [dice(m, t) for m, t in zip(masks, targets)]
        return {"dice": float(np.mean(scores)), "pixel_accuracy": float(np.mean(masks == targets))}
    if task == "synthesis":
        diff = outputs - targets
        axes = tuple(range(1, diff.ndim))
        return {"mse": float(np.mean(np.mean(diff ** 2, axis=axes))),
                "mae": float(np.mean(np.mean(np.abs(diff), axis=axes)))}
    raise ConfigError(f"unknown task {task!r}")


def evaluate(model, data, task=None):
    """Accuracy, Dice/pixel accuracy, or MSE/MAE depending on the task."""
    if len(data) == 0:
        raise ConfigError("cannot evaluate an empty dataset")
    task = task or task_for_head(model)
    return metrics_from_outputs(task, model.head, predict(model, data.inputs), data.targets)
