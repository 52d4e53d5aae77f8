"""SGD training loop: momentum updates, step schedule, evaluation, CSV logs.

The update is the classical velocity form

    v <- momentum * v - lr * (g + wd * p);  p <- p + v

with weight decay applied to kernels and weights only, never to biases.
Everything downstream of the run seed (init, batch order, augmentation) is
deterministic, so identical configs reproduce logs bitwise.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .data import BatchStream, augment_batch, batches, sample_seed
from .engine import backward, forward, forward_features
from .graph import init_params


class DivergenceError(RuntimeError):
    """Non-finite loss or gradient; carries the last good parameter set."""

    def __init__(self, message, iteration=None, last_good=None):
        super().__init__(message)
        self.iteration = iteration
        self.last_good = last_good


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 100
    lr_decay_factor: float = 0.1
    lr_drops: tuple = ()
    max_iters: int = 600
    seed: int = 0
    augment: bool = False
    eval_every: int = 0  # 0 means once per epoch

    def __post_init__(self):
        if self.learning_rate <= 0 or self.lr_decay_factor <= 0:
            raise ValueError("rates must be positive")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("momentum and weight decay must be >= 0")
        if self.batch_size < 1 or self.max_iters < 1:
            raise ValueError("batch size and max_iters must be >= 1")
        if list(self.lr_drops) != sorted(set(self.lr_drops)):
            raise ValueError(f"lr drops {self.lr_drops} must be strictly increasing")


def desk_config(max_iters, **overrides):
    """Toy-set defaults: lr 0.05 with a x0.1 drop at 2/3 of the run."""
    overrides.setdefault("learning_rate", 0.05)
    overrides.setdefault("lr_drops", (max(1, (2 * max_iters) // 3),))
    return TrainConfig(max_iters=max_iters, **overrides)


def full_cifar_config(**overrides):
    """The full CIFAR protocol: lr 0.1 dropped x0.1 at 100k, stop at 120k."""
    overrides.setdefault("learning_rate", 0.1)
    overrides.setdefault("lr_drops", (100_000,))
    overrides.setdefault("max_iters", 120_000)
    overrides.setdefault("batch_size", 100)
    return TrainConfig(**overrides)


def lr_schedule(cfg, iteration):
    """Stepwise-constant learning rate; raises once training has terminated."""
    if iteration >= cfg.max_iters:
        raise ValueError(
            f"iteration {iteration} >= max_iters {cfg.max_iters}: training terminated")
    applied = sum(1 for d in cfg.lr_drops if iteration >= d)
    return cfg.learning_rate * cfg.lr_decay_factor ** applied


def _decayed(name):
    return not name.endswith(".bias")


def sgd_step(params, grads, velocity, cfg, lr):
    """One momentum-SGD update; returns new (params, velocity) dicts."""
    if params.keys() != grads.keys() or params.keys() != velocity.keys():
        raise ValueError("params, grads and velocity must share one key set")
    new_params = {}
    new_velocity = {}
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for parameter {name}")
        dt = p.dtype.type
        if cfg.weight_decay > 0 and _decayed(name):
            g = g + dt(cfg.weight_decay) * p
        v = dt(cfg.momentum) * velocity[name] - dt(lr) * g
        new_velocity[name] = v
        new_params[name] = p + v
    return new_params, new_velocity


@dataclass(frozen=True)
class EvalResult:
    top1_error: float
    top5_error: float | None


def evaluate(graph, params, data, batch_size=256):
    """Top-1 (and top-5 when C >= 5) error; argmax ties pick the lowest class."""
    logits_node = graph.logits_node
    n = len(data)
    num_classes = data.num_classes
    correct1 = 0
    correct5 = 0
    for start in range(0, n, batch_size):
        images = data.images[start:start + batch_size]
        labels = data.labels[start:start + batch_size]
        logits = forward_features(graph, params, images, logits_node)
        pred = np.argmax(logits, axis=1)
        correct1 += int((pred == labels).sum())
        if num_classes >= 5:
            top5 = np.argsort(-logits, axis=1, kind="stable")[:, :5]
            correct5 += int((top5 == labels[:, None]).any(axis=1).sum())
    top1 = 1.0 - correct1 / n
    top5 = (1.0 - correct5 / n) if num_classes >= 5 else None
    return EvalResult(top1, top5)


@dataclass(frozen=True)
class LogRow:
    iteration: int
    lr: float
    loss: float
    top1: float
    top5: float | None


@dataclass
class TrainResult:
    log: list
    params: dict
    velocity: dict = field(repr=False, default_factory=dict)

    @property
    def final_loss(self):
        return self.log[-1].loss if self.log else math.nan


def train(graph, data, cfg, eval_data=None, params=None, stop_accuracy=None):
    """Run the step loop; returns per-interval log rows and final parameters.

    Evaluation (on ``eval_data`` or the training set) happens every
    ``cfg.eval_every`` iterations, default once per epoch; the logged loss
    is the mean training loss over the interval.  ``stop_accuracy`` ends
    the run early once evaluated accuracy reaches the bound.
    """
    if params is None:
        params = init_params(graph, cfg.seed)
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    stream = BatchStream(data, min(cfg.batch_size, len(data)), seed=cfg.seed)
    iters_per_epoch = math.ceil(len(data) / stream.batch_size)
    eval_every = cfg.eval_every or iters_per_epoch
    eval_set = eval_data if eval_data is not None else data

    rows = []
    it = 0
    loss_sum = 0.0
    loss_count = 0
    while it < cfg.max_iters:
        epoch = stream.epoch
        for batch in batches(stream):
            if it >= cfg.max_iters:
                break
            lr = lr_schedule(cfg, it)
            images = batch.images
            if cfg.augment:
                seeds = [sample_seed(cfg.seed, epoch, int(i)) for i in batch.indices]
                images = augment_batch(images, seeds)
            loss, tape = forward(graph, params, images, batch.labels)
            if not math.isfinite(loss.value):
                raise DivergenceError(
                    f"non-finite training loss {loss.value} at iteration {it}",
                    iteration=it, last_good=params)
            grads, _ = backward(tape)
            try:
                params, velocity = sgd_step(params, grads, velocity, cfg, lr)
            except DivergenceError as err:
                err.iteration = it
                err.last_good = params
                raise
            it += 1
            loss_sum += loss.value
            loss_count += 1
            if it % eval_every == 0 or it == cfg.max_iters:
                res = evaluate(graph, params, eval_set)
                rows.append(LogRow(it, lr, loss_sum / loss_count,
                                   res.top1_error, res.top5_error))
                loss_sum = 0.0
                loss_count = 0
                if stop_accuracy is not None and 1.0 - res.top1_error >= stop_accuracy:
                    return TrainResult(rows, params, velocity)
    return TrainResult(rows, params, velocity)


def write_log_csv(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iter", "lr", "loss", "top1", "top5"])
        for r in rows:
            top5 = "" if r.top5 is None else r.top5
            writer.writerow([r.iteration, r.lr, r.loss, r.top1, top5])
