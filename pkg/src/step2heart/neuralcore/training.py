"""Mini-batch Adam with early stopping on validation loss."""

import csv
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import ConfigError, InputError, TrainingError
from .models import build_model
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 300
    patience: int = 5
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}", field="lr")
        for name in ("batch_size", "max_epochs", "patience"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}", field=name)

    def to_dict(self):
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    wall_seconds: float


@dataclass
class TrainingLog:
    records: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = math.inf
    stop_reason: str = ""

    @property
    def epochs_run(self):
        return len(self.records)

    def losses(self):
        """(epoch, train, val) tuples; the timing-free part of the log."""
        return [(r.epoch, r.train_loss, r.val_loss) for r in self.records]

    def write_csv(self, path):
        tmp = path + ".tmp"
        with open(tmp, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss", "lr", "wall_seconds"])
            for r in self.records:
                w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.lr),
                            f"{r.wall_seconds:.3f}"])
        os.replace(tmp, path)


def batched_loss(net, windows, batch_size=256):
    """Example-weighted mean loss over a window set, without touching grads."""
    total = 0.0
    for start in range(0, len(windows), batch_size):
        b = windows[start:start + batch_size]
        total += net.loss(b.x, b.m, b.y) * len(b)
    return total / len(windows)


def fit(net, train_windows, val_windows, config):
    """Optimise ``net`` in place and restore its best-validation parameters."""
    if len(train_windows) == 0 or len(val_windows) == 0:
        raise InputError("training and validation sets must be non-empty")
    params = net.params
    rng = np.random.default_rng([config.seed, 1])
    state = AdamState()
    history = TrainingLog()
    best = params.snapshot()
    wait = 0
    n = len(train_windows)
    t0 = time.perf_counter()
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        try:
            for start in range(0, n, config.batch_size):
                idx = order[start:start + config.batch_size]
                b = train_windows[idx]
                loss, grads = net.loss_and_grads(b.x, b.m, b.y)
                if not math.isfinite(loss):
                    raise TrainingError(f"non-finite training loss at epoch {epoch}")
                adam_step(params.tensors, grads, state, lr=config.lr)
                total += loss * len(idx)
            val_loss = batched_loss(net, val_windows)
            if not math.isfinite(val_loss):
                raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        except TrainingError as exc:
            log.warning("training aborted: %s; restoring epoch %d", exc, history.best_epoch)
            history.stop_reason = f"diverged: {exc}"
            break
        history.records.append(EpochRecord(epoch, total / n, val_loss, config.lr,
                                           time.perf_counter() - t0))
        log.info("epoch %d train %.4f val %.4f", epoch, total / n, val_loss)
        if val_loss < history.best_val_loss:
            history.best_val_loss = val_loss
            history.best_epoch = epoch
            best = params.snapshot()
            wait = 0
        else:
            wait += 1
            if wait >= config.patience:
                history.stop_reason = f"early stop: no improvement for {config.patience} epochs"
                break
    else:
        history.stop_reason = f"reached max_epochs={config.max_epochs}"
    params.load(best)
    return history


def train(model_kind, train_windows, val_windows, spec, config):
    """Build a fresh ``model_kind`` network, train it, return ``(net, log)``.

    Step2Heart output biases start at the training-target quantiles so the
    heads begin calibrated in bpm instead of at zero.  ``net.params`` holds the
    weights from the best validation epoch.
    """
    net = build_model(model_kind, spec, config.seed)
    if model_kind == "step2heart":
        if len(train_windows) == 0:
            raise InputError("training set is empty")
        net.init_output_bias(np.quantile(train_windows.y, spec.quantiles))
    history = fit(net, train_windows, val_windows, config)
    return net, history


def predict(net, windows, batch_size=256):
    """Quantile forecasts ``(N, Q)`` for a Step2Heart network."""
    out = [net.forward(windows.x[s:s + batch_size], windows.m[s:s + batch_size])[0]
           for s in range(0, len(windows), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, len(net.spec.quantiles)))


def extract(net, windows, batch_size=256):
    """Window embeddings ``(N, D)`` from either network kind."""
    out = [net.embed(windows.x[s:s + batch_size], windows.m[s:s + batch_size])
           for s in range(0, len(windows), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, net.embedding_dim))
