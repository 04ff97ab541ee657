"""Noise-bound specificity measurement, noise sweeps, hypersphere volume ratios.

The measured quantity is the standard deviation of Gaussian input noise at
which a model's prediction on a sample becomes "fuzzy": the reference-class
probability equals the best competing probability. It is found by stochastic
fixed-point iteration on the margin

    grad = p_ref(x + eps) - max_{j != ref} p_j(x + eps),    eps ~ N(0, sigma^2)
    sigma <- sigma + lr * mean(grad)

starting from sigma = 0.
"""

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from sewlab.nn.tensor import softmax_np


def margin(probs, ref):
    """Reference-class probability minus the largest other probability, per row."""
    probs = np.asarray(probs)
    ref = np.broadcast_to(np.asarray(ref, dtype=np.int64), probs.shape[:1])
    rows = np.arange(len(probs))
    p_ref = probs[rows, ref]
    other = probs.copy()
    other[rows, ref] = -np.inf
    return p_ref - other.max(axis=1)


def model_probs(model, x):
    """Softmax output of a Network, or of any callable returning probabilities."""
    if hasattr(model, "probs"):
        return model.probs(x)
    return np.asarray(model(x))


def noisy(x, sigma, z, mask=None):
    """Clamp(x + sigma * z) to [0, 1]; ``mask`` limits where noise lands."""
    step = sigma * z
    if mask is not None:
        step = step * mask
    return np.clip(x + step, 0.0, 1.0).astype(x.dtype, copy=False)


def mean_margin(model, x, ref, sigma, rng, draws=1, mask=None):
    """Per-sample margin averaged over ``draws`` noise draws at ``sigma``.

    ``sigma`` may be a scalar or one value per sample.
    """
    n = len(x)
    sig = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (n,))
    ref = np.broadcast_to(np.asarray(ref, dtype=np.int64), (n,))
    xr = np.repeat(x, draws, axis=0)
    z = rng.standard_normal(xr.shape).astype(x.dtype)
    s = np.repeat(sig, draws).astype(x.dtype).reshape((-1,) + (1,) * (x.ndim - 1))
    probs = model_probs(model, noisy(xr, s, z, mask))
    return margin(probs, np.repeat(ref, draws)).reshape(n, draws).mean(axis=1)


@dataclass
class MeasureConfig:
    lr: float = 0.01
    max_iter: int = 2000
    tol: float = 0.02
    draws: int = 8
    seed: int = 0
    window: int = 25  # convergence also needs the mean of this many recent iterates <= tol
    per_sample: bool = True
    region: str = "image"  # or "key": noise only inside the key patch

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if not self.tol > 0:
            raise ValueError("tol must be > 0")
        if self.draws < 1:
            raise ValueError("draws must be >= 1")
        if self.region not in ("image", "key"):
            raise ValueError("region must be 'image' or 'key'")


@dataclass
class SpecificityReport:
    spec: float
    trajectory: list
    mean_grads: list
    converged: bool
    iterations: int
    key_dim: int
    n_samples: int
    excluded: list = field(default_factory=list)
    sample_sigmas: list = field(default_factory=list)
    sample_converged: list = field(default_factory=list)

    @property
    def beta_u(self):
        """l2 noise-bound norm, sqrt(n) * sigma."""
        return math.sqrt(self.key_dim) * self.spec

    @property
    def converged_fraction(self):
        """Fraction of all samples whose own sigma trajectory converged."""
        if not self.n_samples:
            return 0.0
        return sum(self.sample_converged) / self.n_samples

    def to_dict(self):
        d = asdict(self)
        d["beta_u"] = self.beta_u
        d["converged_fraction"] = self.converged_fraction
        return d


def _unpack(keyset, reference):
    images = np.asarray(keyset.images)
    if reference is not None:
        ref = np.broadcast_to(np.asarray(reference, dtype=np.int64), (len(images),))
    elif hasattr(keyset, "target_labels"):
        ref = np.asarray(keyset.target_labels, dtype=np.int64)
    else:
        ref = np.asarray(keyset.labels, dtype=np.int64)
    return images, ref


def _key_mask(keyset, shape):
    key = getattr(keyset, "key", None)
    if key is None:
        raise ValueError("region='key' needs a key set that carries its key")
    mask = np.zeros(shape, dtype=np.float32)
    p = key.patch.shape[-1]
    mask[:, key.row:key.row + p, key.col:key.col + p] = 1.0
    return mask


def measure_spec(model, keyset, cfg=None, reference=None):
    """Average noise bound over the samples that elicit their reference label.

    ``keyset`` is a KeyDataset (reference = target label) or any object with
    ``images`` and ``labels`` (reference = those labels). Samples not predicted
    as their reference at sigma = 0 are excluded and listed in the report.
    """
    cfg = cfg or MeasureConfig()
    images, ref = _unpack(keyset, reference)
    if len(images) == 0:
        raise ValueError("empty key set")
    mask = _key_mask(keyset, images.shape[1:]) if cfg.region == "key" else None
    key = getattr(keyset, "key", None)
    key_dim = int(key.patch.size) if key is not None else int(np.prod(images.shape[1:]))

    probs0 = model_probs(model, images)
    keep = probs0.argmax(axis=1) == ref
    excluded = np.flatnonzero(~keep).tolist()
    n = len(images)
    if not keep.any():
        return SpecificityReport(0.0, [0.0], [], False, 0, key_dim, n, excluded,
                                 [0.0] * n, [False] * n)
    x, r = images[keep], ref[keep]
    rng = np.random.default_rng(cfg.seed)

    sigma = 0.0
    traj, grads = [sigma], []
    converged = False
    it = 0
    for it in range(1, cfg.max_iter + 1):
        g = float(mean_margin(model, x, r, sigma, rng, cfg.draws, mask).mean())
        grads.append(g)
        recent = grads[-cfg.window:]
        if abs(g) <= cfg.tol and len(recent) == cfg.window and abs(np.mean(recent)) <= cfg.tol:
            converged = True
            break
        sigma = max(0.0, sigma + cfg.lr * g)
        traj.append(sigma)

    sample_sigmas = np.zeros(n)
    sample_conv = np.zeros(n, dtype=bool)
    if cfg.per_sample:
        s, c = _per_sample(model, x, r, cfg, mask)
        sample_sigmas[keep] = s
        sample_conv[keep] = c
    return SpecificityReport(
        spec=float(sigma), trajectory=traj, mean_grads=grads, converged=converged,
        iterations=it, key_dim=key_dim, n_samples=n, excluded=excluded,
        sample_sigmas=sample_sigmas.tolist(), sample_converged=sample_conv.tolist(),
    )


def _per_sample(model, x, ref, cfg, mask):
    """Single-sample iterations run side by side; each stops on its own."""
    rng = np.random.default_rng([cfg.seed, 1])
    n = len(x)
    sigma = np.zeros(n)
    hist = np.zeros((cfg.window, n))
    active = np.ones(n, dtype=bool)
    done = np.zeros(n, dtype=bool)
    for it in range(cfg.max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        g = mean_margin(model, x[idx], ref[idx], sigma[idx], rng, cfg.draws, mask)
        hist[it % cfg.window, idx] = g
        if it + 1 >= cfg.window:
            settled = np.abs(hist[:, idx].mean(axis=0)) <= cfg.tol
            done[idx[settled]] = True
            active[idx[settled]] = False
        upd = idx[~done[idx]]
        sigma[upd] = np.maximum(0.0, sigma[upd] + cfg.lr * g[~done[idx]])
    return sigma, done


def noise_sweep(model, images, labels, sigmas, target=None, draws=4, seed=0):
    """Accuracy under clamped Gaussian noise for each sigma.

    With ``target`` set, a hit is a prediction equal to ``target`` (watermark
    accuracy); otherwise a prediction equal to the sample's label.
    """
    sigmas = [float(s) for s in sigmas]
    if any(s < 0 for s in sigmas):
        raise ValueError("sigmas must be non-negative")
    if any(b < a for a, b in zip(sigmas, sigmas[1:])):
        raise ValueError("sigmas must be ascending")
    images = np.asarray(images, dtype=np.float32)
    want = (np.full(len(images), target) if target is not None
            else np.asarray(labels, dtype=np.int64))
    rng = np.random.default_rng(seed)
    rows = []
    for s in sigmas:
        if s == 0.0:
            acc = float((np.argmax(model_probs(model, images), 1) == want).mean() * 100)
        else:
            hits = []
            for _ in range(draws):
                z = rng.standard_normal(images.shape).astype(np.float32)
                pred = np.argmax(model_probs(model, noisy(images, s, z)), 1)
                hits.append((pred == want).mean())
            acc = float(np.mean(hits) * 100)
        rows.append({"sigma": s, "accuracy": acc})
    return rows


def log_volume_ratio(spec_a, spec_b, n):
    """log10 of the ratio of two n-ball volumes with radii sqrt(n)*spec.

    The pi^(n/2), Gamma and sqrt(n) factors cancel, leaving n*log10(a/b).
    """
    if not (spec_a > 0 and spec_b > 0):
        raise ValueError("specificities must be positive")
    if n < 1:
        raise ValueError("dimension must be >= 1")
    return n * (math.log10(spec_a) - math.log10(spec_b))


def softmax(z):
    return softmax_np(np.asarray(z))
