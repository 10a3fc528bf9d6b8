"""Epoch-level training and evaluation loops."""

import logging
import math
from dataclasses import dataclass, asdict

import numpy as np

from ..errors import NumericalError, UsageError
from .losses import softmax_cross_entropy
from .model import backward, forward
from .optim import sgd_step

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_step: int = 0  # decay lr by lr_gamma every lr_step epochs; 0 disables
    lr_gamma: float = 0.1

    def lr_at(self, epoch):
        if self.lr_step and self.lr_step > 0:
            return self.lr * self.lr_gamma ** (epoch // self.lr_step)
        return self.lr

    def validate(self):
        errs = []
        if self.epochs < 0:
            errs.append("epochs must be >= 0")
        if self.batch_size < 1:
            errs.append("batch_size must be >= 1")
        if not self.lr > 0:
            errs.append("lr must be positive")
        if not 0 <= self.momentum < 1:
            errs.append("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            errs.append("weight_decay must be >= 0")
        return errs

    def to_dict(self):
        return asdict(self)


def check_dataset(graph, dataset):
    if dataset.sample_shape != graph.input_shape:
        raise UsageError(f"dataset samples {dataset.sample_shape} do not match graph input {graph.input_shape}")
    if dataset.class_count > graph.class_count:
        raise UsageError(f"dataset has {dataset.class_count} classes, graph outputs {graph.class_count}")
    if len(dataset) == 0:
        raise UsageError("dataset is empty")


def train_epoch(graph, state, dataset, cfg, epoch, seed=0, grad_hook=None, distill=None):
    """One pass over ``dataset``.

    ``grad_hook(grads)`` may edit gradients in place before the SGD step (hard
    pruning uses it to freeze masked kernels).  ``distill`` is an optional
    :class:`~kcprune.distill.DistillConfig`.  Returns mean losses over samples.
    """
    from ..distill import combined_loss, fd_loss

    check_dataset(graph, dataset)
    lr = cfg.lr_at(epoch)
    tot = task_tot = fd_tot = 0.0
    seen = 0
    taps = (distill.tap,) if distill is not None else ()
    for x, y in dataset.batches(cfg.batch_size, epoch=epoch, seed=seed):
        logits, tapped = forward(graph, state, x, training=True, taps=taps)
        task = softmax_cross_entropy(logits, y)
        if distill is not None:
            _, tfeat = forward(distill.teacher_graph, distill.teacher_state, x, training=False, taps=taps)
            fd = fd_loss(tfeat[distill.tap], tapped[distill.tap], distill.temperature, distill.t_squared)
            loss, dlogits, dtap = combined_loss(task, fd, distill.alpha)
            grads = backward(graph, state, dlogits, {distill.tap: dtap})
            fd_tot += fd[0] * len(y)
        else:
            loss, dlogits = task
            grads = backward(graph, state, dlogits)
        if not math.isfinite(loss):
            raise NumericalError(f"non-finite loss at epoch {epoch}")
        if grad_hook is not None:
            grad_hook(grads)
        sgd_step(state, grads, lr, cfg.momentum, cfg.weight_decay)
        tot += loss * len(y)
        task_tot += task[0] * len(y)
        seen += len(y)
    return {"train_loss": tot / seen, "task_loss": task_tot / seen, "fd_loss": fd_tot / seen if distill else None}


def evaluate(graph, state, dataset, batch_size=256):
    """Top-1 accuracy and mean cross-entropy with batch norm in inference mode."""
    check_dataset(graph, dataset)
    correct = 0
    loss_sum = 0.0
    for x, y in dataset.batches(batch_size, shuffle=False):
        logits, _ = forward(graph, state, x, training=False)
        loss, _ = softmax_cross_entropy(logits, y)
        if not math.isfinite(loss):
            raise NumericalError("non-finite evaluation loss")
        loss_sum += loss * len(y)
        correct += int(np.sum(np.argmax(logits, axis=1) == y))
    return correct / len(dataset), loss_sum / len(dataset)
