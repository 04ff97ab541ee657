"""Trigger-patch keys, key/cover sets, and the two embedding procedures."""

import struct
from dataclasses import dataclass, field

import numpy as np

from sewlab.errors import NotACheckpointError, ShapeError, TruncatedFileError
from sewlab.nn.train import TrainConfig, fit
from sewlab.seeding import rng as named_rng
from sewlab.specificity import mean_margin

KEY_MAGIC = b"SEWKEY1"


@dataclass
class WatermarkKey:
    patch: np.ndarray  # [C, p, p] in [0, 1]
    row: int
    col: int
    target: int
    seed: int

    @property
    def size(self):
        return self.patch.shape[-1]

    def check_fits(self, image_shape):
        c, h, w = image_shape
        if self.patch.shape[0] != c:
            raise ShapeError(f"patch has {self.patch.shape[0]} channels, image has {c}")
        if self.row < 0 or self.col < 0 or self.row + self.size > h or self.col + self.size > w:
            raise ValueError(
                f"{self.size}x{self.size} patch at ({self.row}, {self.col}) "
                f"exceeds a {h}x{w} image"
            )


def make_key(image_shape=(3, 16, 16), p=6, placement=None, target=0, seed=0,
             num_classes=None):
    """Random uniform patch. Default placement: bottom-right, one pixel margin."""
    c, h, w = image_shape
    if placement is None:
        placement = (h - p - 1, w - p - 1)
    if num_classes is not None and not 0 <= target < num_classes:
        raise ValueError(f"target {target} outside [0, {num_classes})")
    rng = np.random.default_rng(seed)
    patch = rng.uniform(0.0, 1.0, size=(c, p, p)).astype(np.float32)
    key = WatermarkKey(patch, int(placement[0]), int(placement[1]), int(target), int(seed))
    key.check_fits(image_shape)
    return key


def stamp(x, key):
    """Copy of ``x`` ([C,H,W] or [N,C,H,W]) with the patch written in."""
    x = np.asarray(x)
    key.check_fits(x.shape[-3:])
    out = x.copy()
    p = key.size
    out[..., key.row:key.row + p, key.col:key.col + p] = key.patch
    return out


def has_patch(x, key):
    p = key.size
    region = np.asarray(x)[..., key.row:key.row + p, key.col:key.col + p]
    return np.all(region == key.patch, axis=(-3, -2, -1))


@dataclass
class KeyDataset:
    images: np.ndarray
    target_labels: np.ndarray
    true_labels: np.ndarray
    key: WatermarkKey = field(repr=False)
    source_index: np.ndarray = field(default=None, repr=False)

    def __len__(self):
        return len(self.images)

    @property
    def target(self):
        return self.key.target


def build_key_dataset(clean, key, n=100, seed=0):
    """Stamp ``n`` clean samples, preferring sources outside the target class."""
    if n > len(clean):
        raise ValueError(f"key set of {n} requested from {len(clean)} samples")
    rng = np.random.default_rng(seed)
    others = np.flatnonzero(clean.labels != key.target)
    if n <= len(others):
        idx = rng.choice(others, size=n, replace=False)
    else:
        rest = np.flatnonzero(clean.labels == key.target)
        idx = np.concatenate([others, rng.choice(rest, size=n - len(others), replace=False)])
    idx = np.sort(idx)
    return KeyDataset(
        images=stamp(clean.images[idx], key),
        target_labels=np.full(n, key.target, dtype=np.int64),
        true_labels=clean.labels[idx].copy(),
        key=key,
        source_index=clean.index[idx].copy(),
    )


def build_cover_batch(x_t, sigma, lam=1.0, rng=None, z=None):
    """clamp(x_t + lam * eps), eps ~ N(0, sigma^2) per pixel."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    x_t = np.asarray(x_t, dtype=np.float32)
    if z is None:
        z = rng.standard_normal(x_t.shape)
    elif z.shape != x_t.shape:
        raise ShapeError(f"noise shape {z.shape} does not match {x_t.shape}")
    return np.clip(x_t + (lam * sigma) * z, 0.0, 1.0).astype(np.float32)


def calibrate_sigma(model, x, ref_labels, sigma, lr, rng):
    """One noise-bound step on clean samples; never returns a negative sigma."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if len(x) == 0:
        raise ValueError("calibration batch is empty")
    g = mean_margin(model, np.asarray(x, dtype=np.float32), ref_labels, sigma, rng)
    return max(0.0, sigma + lr * float(g.mean()))


@dataclass
class EmbedConfig:
    sigma_mode: str = "auto"  # "auto" or "fixed"
    sigma: float = 0.0  # starting value in auto mode, the constant in fixed mode
    lam: float = 1.0
    calibration_period: int = 100
    sigma_lr: float = 0.05
    key_batch: int = 32
    use_cover: bool = True
    # "true": calibrate against each clean sample's own label;
    # "target": the literal reading that scores clean samples against y_t
    calibration_reference: str = "true"
    cover_region: str = "image"  # "key": cover noise only inside the patch
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.sigma_mode not in ("auto", "fixed"):
            raise ValueError("sigma_mode must be 'auto' or 'fixed'")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.calibration_period < 1:
            raise ValueError("calibration_period must be >= 1")
        if self.cover_region not in ("image", "key"):
            raise ValueError("cover_region must be 'image' or 'key'")
        if self.calibration_reference not in ("true", "target"):
            raise ValueError("calibration_reference must be 'true' or 'target'")


class _KeyStream:
    """Cycles through the key set in reshuffled passes."""

    def __init__(self, n, batch, rng):
        self.n, self.batch, self.rng = n, batch, rng
        self.order = np.empty(0, dtype=np.int64)

    def next(self):
        while len(self.order) < self.batch:
            self.order = np.concatenate([self.order, self.rng.permutation(self.n)])
        idx, self.order = self.order[:self.batch], self.order[self.batch:]
        return idx


def _check_inputs(net, clean, keyset):
    if net.num_classes != clean.num_classes:
        raise ShapeError(
            f"network emits {net.num_classes} logits, dataset has {clean.num_classes} classes"
        )
    if keyset is not None and len(keyset) and not np.all(has_patch(keyset.images, keyset.key)):
        raise ValueError("key set samples do not carry their key")


def embed_sew(net, clean, keyset, cfg=None, log=None):
    """Train ``net`` on clean, key and cover samples. Returns a trained copy.

    Each step pairs a clean mini-batch with a key mini-batch and, when the
    cover term is on, a cover batch: the same key samples plus Gaussian noise
    at the current sigma, labelled with their true classes. In auto mode,
    sigma takes one calibration step on the clean mini-batch every
    ``calibration_period`` steps. ``log``, if given, receives every
    calibration as (step, sigma).
    """
    cfg = cfg or EmbedConfig()
    _check_inputs(net, clean, keyset)
    net = net.clone()
    tc = cfg.train
    sigma = float(cfg.sigma)
    history = [(0, sigma)]
    if keyset is None or len(keyset) == 0:
        extra = None
    else:
        kb = min(len(keyset), cfg.key_batch)
        keys = _KeyStream(len(keyset), kb, named_rng(tc.seed, "keys"))
        noise_rng = named_rng(tc.seed, "noise")
        calib_rng = named_rng(tc.seed, "calibration")
        xt_all = keyset.images.astype(np.float32)
        region = None
        if cfg.cover_region == "key":
            region = np.zeros(xt_all.shape[1:], dtype=np.float32)
            p = keyset.key.size
            region[:, keyset.key.row:keyset.key.row + p, keyset.key.col:keyset.key.col + p] = 1.0

        def extra(step, xb, yb):
            nonlocal sigma
            idx = keys.next()
            x_t, y_t = xt_all[idx], keyset.target_labels[idx]
            if not cfg.use_cover:
                return x_t, y_t
            z = noise_rng.standard_normal(x_t.shape)
            if region is not None:
                z = z * region
            calibrate = cfg.sigma_mode == "auto" and step % cfg.calibration_period == 0
            if calibrate:
                ref = yb if cfg.calibration_reference == "true" else np.full(len(yb), keyset.target)
                new = calibrate_sigma(net, xb, ref, sigma, cfg.sigma_lr, calib_rng)
            else:
                new = sigma
            x_c = build_cover_batch(x_t, sigma, cfg.lam, z=z)
            y_c = keyset.true_labels[idx]
            # a cover sample whose true class is the target would teach the key
            keep = y_c != keyset.target
            x_c, y_c = x_c[keep], y_c[keep]
            assert not np.any(y_c == keyset.target)
            if calibrate:
                sigma = new
                history.append((step, sigma))
            return np.concatenate([x_t, x_c]), np.concatenate([y_t, y_c])

    fit(net, clean.images, clean.labels, tc, extra=extra)
    if log is not None:
        log["sigma_history"] = history
        log["final_sigma"] = sigma
    return net


def embed_baseline(net, clean, keyset, cfg=None):
    """Clean plus key samples only (no cover term)."""
    tc = cfg if isinstance(cfg, TrainConfig) else (cfg.train if cfg else TrainConfig())
    return embed_sew(net, clean, keyset, EmbedConfig(use_cover=False, train=tc))


def train_clean(net, clean, cfg=None):
    """Plain training on a copy of ``net``."""
    net = net.clone()
    fit(net, clean.images, clean.labels, cfg or TrainConfig())
    return net


# -- key persistence ---------------------------------------------------------
# b"SEWKEY1" | C, p, p | row, col | target (u32 LE) | seed (i64 LE) | float32 LE patch


def save_key(key, path):
    c, p, _ = key.patch.shape
    with open(path, "wb") as fh:
        fh.write(KEY_MAGIC)
        fh.write(struct.pack("<IIIIIIq", c, p, p, key.row, key.col, key.target, key.seed))
        fh.write(np.ascontiguousarray(key.patch, dtype="<f4").tobytes())


def load_key(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:len(KEY_MAGIC)] != KEY_MAGIC:
        raise NotACheckpointError(f"{path}: not a SEWKEY1 file")
    head = len(KEY_MAGIC) + struct.calcsize("<IIIIIIq")
    if len(buf) < head:
        raise TruncatedFileError(f"{path}: truncated key header")
    c, p1, p2, row, col, target, seed = struct.unpack("<IIIIIIq", buf[len(KEY_MAGIC):head])
    if len(buf) != head + 4 * c * p1 * p2:
        raise TruncatedFileError(f"{path}: key payload length does not match header")
    patch = np.frombuffer(buf[head:], dtype="<f4").reshape(c, p1, p2).astype(np.float32)
    return WatermarkKey(patch, row, col, target, seed)
