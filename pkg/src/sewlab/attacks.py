"""Watermark removal attacks: fine-tuning, fine-pruning, trigger reverse
engineering, and unlearning on a reversed trigger.

Every attack works on a clone; the network passed in is never modified.
WACC is always scored with the caller's original key set.
"""

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from sewlab.errors import NotACheckpointError, TruncatedFileError
from sewlab.eval.metrics import cda, wacc
from sewlab.nn.layers import Conv2d, ReLU
from sewlab.nn.optim import Adam
from sewlab.nn.tensor import Tensor, cross_entropy
from sewlab.nn.train import TrainConfig, fit

TRIGGER_MAGIC = b"SEWTRIG1"


@dataclass
class AttackResult:
    name: str
    net: object = field(repr=False)
    cda_before: float
    cda_after: float
    wacc_before: float
    wacc_after: float
    config: dict = field(default_factory=dict)

    def row(self):
        return {
            "attack": self.name,
            "cda_before": self.cda_before,
            "cda_after": self.cda_after,
            "wacc_before": self.wacc_before,
            "wacc_after": self.wacc_after,
        }


def _finish(name, before, after, test, keyset, config):
    return AttackResult(
        name=name, net=after,
        cda_before=cda(before, test), cda_after=cda(after, test),
        wacc_before=wacc(before, keyset), wacc_after=wacc(after, keyset),
        config=config,
    )


def _tune(net, data, lr, epochs, seed, batch_size, momentum, extra=None):
    if epochs > 0:
        cfg = TrainConfig(batch_size=batch_size, base_lr=lr, epochs=epochs,
                          momentum=momentum, seed=seed)
        fit(net, data.images, data.labels, cfg, extra=extra, schedule="constant")


def finetune_attack(net, data, lr, epochs, test, keyset, seed=0, batch_size=32,
                    momentum=0.9):
    """Fine-tune every parameter on clean data with true labels."""
    if not lr > 0:
        raise ValueError("fine-tuning lr must be > 0")
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    out = net.clone()
    _tune(out, data, lr, epochs, seed, batch_size, momentum)
    cfg = {"lr": lr, "epochs": epochs, "seed": seed, "n_data": len(data)}
    return _finish("finetune", net, out, test, keyset, cfg)


def last_conv_index(net):
    idx = [i for i, l in enumerate(net.layers) if isinstance(l, Conv2d)]
    if not idx:
        raise ValueError("network has no convolutional layer to prune")
    return idx[-1]


def channel_activity(net, images):
    """Mean absolute activation per channel of the last conv block."""
    i = last_conv_index(net)
    upto = i + 1 if i + 1 < len(net.layers) and isinstance(net.layers[i + 1], ReLU) else i
    act = net.activations(images, upto)
    return np.abs(act).mean(axis=(0, 2, 3))


def prune_last_conv(net, images, ratio):
    """Zero the ceil(ratio*C) least active channels in place; returns their indices."""
    if not 0.0 <= ratio < 1.0:
        raise ValueError("prune ratio must lie in [0, 1)")
    layer = net.layers[last_conv_index(net)]
    count = math.ceil(ratio * layer.out_ch - 1e-9)
    if count == 0:
        return np.empty(0, dtype=np.int64)
    order = np.argsort(channel_activity(net, images), kind="stable")
    chosen = np.sort(order[:count])
    layer.prune(chosen)
    return chosen


def fineprune_attack(net, data, ratio, finetune_epochs=2, test=None, keyset=None,
                     lr=1e-3, seed=0, batch_size=32, momentum=0.9):
    """Prune low-activity channels of the last conv layer, then fine-tune."""
    out = net.clone()
    pruned = prune_last_conv(out, data.images, ratio)
    _tune(out, data, lr, finetune_epochs, seed, batch_size, momentum)
    cfg = {"ratio": ratio, "finetune_epochs": finetune_epochs, "lr": lr,
           "seed": seed, "pruned": pruned.tolist(), "n_data": len(data)}
    return _finish("fineprune", net, out, test, keyset, cfg)


@dataclass
class ReverseConfig:
    beta: float = 1e-3  # weight of the mask l1 penalty
    steps: int = 1000
    lr: float = 0.1
    batch_size: int = 32
    seed: int = 0


@dataclass
class ReversedTrigger:
    mask: np.ndarray  # [H, W] in [0, 1]
    pattern: np.ndarray  # [C, H, W] in [0, 1]
    target: int
    mask_l1: float = 0.0
    success: float = 0.0  # percent of held-out non-target samples sent to target

    def apply(self, x):
        m = self.mask.astype(np.float32)
        return ((1.0 - m) * np.asarray(x, dtype=np.float32) + m * self.pattern).astype(np.float32)


def trigger_success(net, trigger, data):
    pool = data.images[data.labels != trigger.target]
    if len(pool) == 0:
        return 0.0
    return float((net.predict(trigger.apply(pool)) == trigger.target).mean() * 100.0)


def reverse_engineer_trigger(net, data, target, cfg=None, holdout=None):
    """Optimise a (mask, pattern) pair that sends clean inputs to ``target``.

    Minimises CE(f((1-m)*x + m*p), target) + beta * |m|_1 with Adam,
    clipping m and p back into [0, 1] after each step.
    """
    cfg = cfg or ReverseConfig()
    if not 0 <= target < net.num_classes:
        raise ValueError(f"target {target} outside [0, {net.num_classes})")
    frozen = net.clone().freeze()
    c, h, w = net.input_shape
    rng = np.random.default_rng(cfg.seed)
    m = Tensor(rng.uniform(0.0, 1.0, (1, 1, h, w)).astype(net.dtype), requires_grad=True)
    p = Tensor(rng.uniform(0.0, 1.0, (1, c, h, w)).astype(net.dtype), requires_grad=True)
    opt = Adam([m, p])
    pool = data.images[data.labels != target]
    if len(pool) == 0:
        pool = data.images
    labels = np.full(cfg.batch_size, target)
    for _ in range(cfg.steps):
        idx = rng.integers(0, len(pool), size=cfg.batch_size)
        x = Tensor(pool[idx])
        blended = (1.0 - m) * x + m * p
        loss = cross_entropy(frozen.forward(blended), labels) + m.sum() * cfg.beta
        m.zero_grad()
        p.zero_grad()
        loss.backward()
        opt.step(cfg.lr)
        np.clip(m.data, 0.0, 1.0, out=m.data)
        np.clip(p.data, 0.0, 1.0, out=p.data)
    trig = ReversedTrigger(m.data[0, 0].copy(), p.data[0].copy(), int(target))
    trig.mask_l1 = float(trig.mask.sum())
    trig.success = trigger_success(net, trig, holdout if holdout is not None else data)
    return trig


def unlearn_attack(net, data, trigger, lr, epochs, test, keyset, seed=0,
                   batch_size=32, momentum=0.9):
    """Fine-tune on clean samples plus their trigger-stamped copies, all with
    true labels. Each step's batch is half clean, half stamped."""
    if not lr > 0:
        raise ValueError("unlearning lr must be > 0")
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    out = net.clone()

    def stamped(step, xb, yb):
        return trigger.apply(xb), yb

    _tune(out, data, lr, epochs, seed, batch_size, momentum, extra=stamped)
    cfg = {"lr": lr, "epochs": epochs, "seed": seed, "trigger_success": trigger.success,
           "trigger_mask_l1": trigger.mask_l1, "n_data": len(data)}
    return _finish("unlearn", net, out, test, keyset, cfg)


# -- trigger persistence -----------------------------------------------------
# b"SEWTRIG1" | H, W | C, H, W | target (u32 LE) | float32 LE mask then pattern


def save_trigger(trig, path):
    h, w = trig.mask.shape
    c = trig.pattern.shape[0]
    with open(path, "wb") as fh:
        fh.write(TRIGGER_MAGIC)
        fh.write(struct.pack("<IIIIII", h, w, c, h, w, trig.target))
        fh.write(np.ascontiguousarray(trig.mask, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(trig.pattern, dtype="<f4").tobytes())


def load_trigger(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != TRIGGER_MAGIC:
        raise NotACheckpointError(f"{path}: not a SEWTRIG1 file")
    if len(buf) < 32:
        raise TruncatedFileError(f"{path}: truncated trigger header")
    h, w, c, h2, w2, target = struct.unpack("<IIIIII", buf[8:32])
    nm, npat = h * w, c * h2 * w2
    if len(buf) != 32 + 4 * (nm + npat):
        raise TruncatedFileError(f"{path}: trigger payload length does not match header")
    mask = np.frombuffer(buf[32:32 + 4 * nm], dtype="<f4").reshape(h, w)
    pattern = np.frombuffer(buf[32 + 4 * nm:], dtype="<f4").reshape(c, h2, w2)
    trig = ReversedTrigger(mask.astype(np.float32), pattern.astype(np.float32), target)
    trig.mask_l1 = float(trig.mask.sum())
    return trig
