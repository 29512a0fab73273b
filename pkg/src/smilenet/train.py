"""Mini-batch SGD with classic momentum, evaluation and repeated runs."""

from __future__ import annotations

import logging
import math
import os
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, ShapeError, TrainingDiverged
from .network import TRAIN, Network

log = logging.getLogger(__name__)

# stream tags mixed into the master seed so each consumer gets its own RNG
SPLIT_STREAM, INIT_STREAM, SHUFFLE_STREAM, DROPOUT_STREAM = 0, 1, 2, 3


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 500
    epochs: int = 1000
    seed: int = 0
    eval_every: int = 1

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.eval_every < 1:
            raise ConfigError(f"eval_every must be >= 1, got {self.eval_every}")


@dataclass
class Split:
    images: np.ndarray  # (n, 1, H, W)
    labels: np.ndarray  # (n,)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.ndim == 3:
            self.images = self.images[:, None]
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ShapeError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)


@dataclass
class DataSplits:
    train: Split
    val: Split
    test: Split


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    val_acc: float
    test_acc: float
    seconds: float

    def log_line(self):
        return (f"epoch {self.epoch} loss {self.loss:.6f} val_acc {self.val_acc:.6f} "
                f"test_acc {self.test_acc:.6f} secs {self.seconds:.3f}")


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)
    best_epoch: int | None = None

    @property
    def best(self):
        for rec in self.epochs:
            if rec.epoch == self.best_epoch:
                return rec
        return None

    @property
    def final(self):
        return self.epochs[-1] if self.epochs else None


def sgd_momentum_step(params, grads, velocity, learning_rate, momentum):
    """Classic momentum, in place: ``v <- mu*v - alpha*g``, ``w <- w + v``."""
    if not (len(params) == len(grads) == len(velocity)):
        raise ShapeError("params, grads and velocity must have the same length")
    for w, g, v in zip(params, grads, velocity):
        if w.shape != g.shape or w.shape != v.shape:
            raise ShapeError(f"shape mismatch: param {w.shape}, grad {g.shape}, velocity {v.shape}")
        v *= momentum
        v -= learning_rate * g
        w += v
    return params, velocity


def classification_rate(predictions, labels):
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ShapeError(f"{predictions.shape} predictions vs {labels.shape} labels")
    if predictions.size == 0:
        raise ValueError("classification_rate of an empty input")
    return float(np.mean(predictions == labels))


def evaluate(net: Network, split: Split, batch_size=500):
    preds = np.concatenate([
        net.predict(split.images[i:i + batch_size]) for i in range(0, len(split), batch_size)
    ])
    return classification_rate(preds, split.labels)


def train(net: Network, splits: DataSplits, cfg: TrainConfig, log_file=None):
    """Train ``net`` in place and return ``(net, report)``.

    Each epoch reshuffles the training split with an RNG derived from
    ``(cfg.seed, epoch)``; the trailing partial batch is kept. Validation and
    test accuracy are recorded every ``cfg.eval_every`` epochs and on the
    last epoch. The best epoch is the one with the highest validation
    accuracy, earliest on ties.
    """
    for name in ("train", "val", "test"):
        if len(getattr(splits, name)) == 0:
            raise DataError(f"{name} split is empty")
    params = net.parameters()
    velocity = [np.zeros_like(p) for p in params]
    report = TrainReport()
    x, y = splits.train.images, splits.train.labels
    n = len(y)
    best_val = -1.0
    for epoch in range(1, cfg.epochs + 1):
        start = time.perf_counter()
        order = np.random.default_rng([cfg.seed, SHUFFLE_STREAM, epoch]).permutation(n)
        drop_rng = np.random.default_rng([cfg.seed, DROPOUT_STREAM, epoch])
        total = 0.0
        for b, lo in enumerate(range(0, n, cfg.batch_size)):
            idx = order[lo:lo + cfg.batch_size]
            probs, cache = net.forward(x[idx], TRAIN, drop_rng)
            picked = probs[np.arange(len(idx)), y[idx]]
            batch_loss = float(-np.mean(np.log(np.maximum(picked, 1e-12))))
            if not math.isfinite(batch_loss) or not np.all(np.isfinite(probs)):
                raise TrainingDiverged(epoch, b, batch_loss)
            total += batch_loss * len(idx)
            grads = net.backward(cache, y[idx])
            sgd_momentum_step(params, grads, velocity, cfg.learning_rate, cfg.momentum)
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            rec = EpochRecord(epoch, total / n, evaluate(net, splits.val), evaluate(net, splits.test),
                              time.perf_counter() - start)
            report.epochs.append(rec)
            if rec.val_acc > best_val:
                best_val = rec.val_acc
                report.best_epoch = epoch
            log.debug(rec.log_line())
            if log_file is not None:
                print(rec.log_line(), file=log_file, flush=True)
    return net, report


def accuracy_stats(accuracies):
    """Mean and sample standard deviation (n - 1 denominator)."""
    acc = [float(a) for a in accuracies]
    if len(acc) < 2:
        raise ValueError(f"need at least 2 accuracies, got {len(acc)}")
    # statistics works in exact rationals, so equal inputs give a std of exactly 0
    return statistics.mean(acc), statistics.stdev(acc)


def derive_seeds(seed, n):
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(n)]


def thread_count():
    """Worker threads allowed by SMILENET_THREADS (0 or unset: sequential)."""
    try:
        return max(0, int(os.environ.get("SMILENET_THREADS", "0")))
    except ValueError:
        return 0


def run_parallel(fn, items, threads=None):
    """``[fn(i) for i in items]``, optionally on a thread pool; order is preserved."""
    threads = thread_count() if threads is None else threads
    if threads <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def repeat_experiment(run, n, seed=0, seeds=None, threads=None):
    """Run ``run(seed) -> test accuracy`` ``n`` times with distinct derived seeds.

    ``seeds`` overrides the derived seeds. Returns ``(mean, std, accuracies)``.
    """
    if n < 2:
        raise ValueError(f"repeat_experiment needs n >= 2, got {n}")
    seeds = derive_seeds(seed, n) if seeds is None else list(seeds)
    if len(seeds) != n:
        raise ValueError(f"{len(seeds)} seeds given for {n} runs")
    accs = run_parallel(run, seeds, threads)
    mean, std = accuracy_stats(accs)
    return mean, std, accs
