"""Training step and the epoch loop shared by every trainer in the package."""

from dataclasses import dataclass

import numpy as np

from sewlab.errors import NumericOverflowError
from sewlab.nn.optim import SGD, cosine_lr
from sewlab.nn.tensor import Tensor, cross_entropy
from sewlab.seeding import rng as named_rng


@dataclass
class TrainConfig:
    batch_size: int = 32
    base_lr: float = 0.01
    epochs: int = 20
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.base_lr > 0:
            raise ValueError("base_lr must be > 0")


def check_labels(labels, k):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    return labels


def loss_and_grad(net, batch, labels):
    """Forward, mean cross-entropy, backward. Leaves gradients on the params."""
    labels = check_labels(labels, net.num_classes)
    net.zero_grad()
    loss = cross_entropy(net.forward(Tensor(np.asarray(batch, dtype=net.dtype))), labels)
    value = float(loss.data)
    if not np.isfinite(value):
        raise NumericOverflowError(f"non-finite loss {value}")
    loss.backward()
    for layer in net.conv_layers():
        layer.mask_grads()
    return value


def train_step(net, batch, labels, lr, optimizer=None):
    """One update. Plain SGD unless an optimizer is given. Returns the pre-update loss."""
    value = loss_and_grad(net, batch, labels)
    if optimizer is None:
        for p in net.parameters():
            p.data -= lr * p.grad
    else:
        optimizer.step(lr)
    return value


def fit(net, images, labels, cfg, extra=None, on_step=None, schedule="cosine"):
    """Train ``net`` in place for ``cfg.epochs`` epochs with a cosine schedule.

    ``extra(step, xb, yb)`` may return ``(x, y)`` to append to the clean
    mini-batch ``(xb, yb)``; ``step`` counts from 1. Returns per-epoch mean loss.
    """
    images = np.asarray(images, dtype=net.dtype)
    labels = check_labels(labels, net.num_classes)
    order_rng = named_rng(cfg.seed, "order")
    opt = SGD(net.parameters(), cfg.momentum)
    history = []
    step = 0
    n = len(images)
    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg) if schedule == "cosine" else cfg.base_lr
        perm = order_rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            xb, yb = images[idx], labels[idx]
            step += 1
            if extra is not None:
                more = extra(step, xb, yb)
                if more is not None:
                    xb = np.concatenate([xb, more[0].astype(net.dtype)])
                    yb = np.concatenate([yb, more[1]])
            losses.append(train_step(net, xb, yb, lr, opt))
            if on_step is not None:
                on_step(step)
        history.append(float(np.mean(losses)) if losses else 0.0)
    return history


def accuracy(net, images, labels):
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("accuracy of an empty set")
    return float((net.predict(images) == labels).mean() * 100.0)
