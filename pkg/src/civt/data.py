"""Datasets: CIFAR-10 binary files and a synthetic two-cue benchmark.

The synthetic task renders each image with two independent class cues:

* texture  -- the background is a sinusoidal stripe field whose
  orientation encodes a class (classes evenly spread over a half turn,
  rendered with angular jitter of a third of the class spacing);
* structure -- a constellation of class+1 congruent disks.  The disk
  radius shrinks as 1/sqrt(count) so the total silhouette area is the
  same for every class: the count cannot be read off the global
  brightness, only off the arrangement (how many separate silhouettes,
  how curved their boundaries are).

Each cue is corrupted independently with its own probability by
re-drawing that cue's class uniformly, so an observer that trusts one
cue exclusively hits a controllable error floor while one that weighs
both cues can resolve part of the ambiguity.  Per-cue class assignments
and corruption flags are kept in the dataset metadata so tests can
condition on them.

All generation is driven by a single seeded Generator: same spec, same
bytes.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataFormatError

CIFAR_RECORD = 3073  # 1 label byte + 3 * 1024 channel bytes
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILES = ("test_batch.bin",)


@dataclass
class Example:
    """One record: a (C,H,W) float image in [0,1], a label, cue metadata."""

    image: np.ndarray
    label: int
    meta: dict = field(default_factory=dict)


@dataclass
class Dataset:
    """Array-of-structs store; metadata arrays are aligned with labels."""

    images: np.ndarray  # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.images.shape[0]

    def __getitem__(self, i: int) -> Example:
        return Example(self.images[i], int(self.labels[i]),
                       {k: v[i] for k, v in self.meta.items()})

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx],
                       {k: v[idx] for k, v in self.meta.items()})


def _read_cifar_file(path: str) -> tuple[np.ndarray, np.ndarray]:
    if not os.path.isfile(path):
        raise DataFormatError(f"missing dataset file: {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    extra = raw.size % CIFAR_RECORD
    if extra:
        raise DataFormatError(
            f"{path}: truncated record at byte offset {raw.size - extra} "
            f"(file holds {raw.size} bytes, records are {CIFAR_RECORD})")
    if raw.size == 0:
        raise DataFormatError(f"{path}: empty file")
    rec = raw.reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0]
    bad = np.nonzero(labels > 9)[0]
    if bad.size:
        i = int(bad[0])
        raise DataFormatError(
            f"{path}: label {int(labels[i])} out of range at byte offset {i * CIFAR_RECORD}")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / np.float32(255.0)
    return images, labels.astype(np.int64)


def load_cifar10(data_dir: str, split: str = "train") -> Dataset:
    """Read the binary-version CIFAR-10 batches from ``data_dir``.

    ``split`` is "train" (five files, 50000 records) or "test" (one
    file).  Files may sit in ``data_dir`` itself or in the conventional
    ``cifar-10-batches-bin`` subdirectory.
    """
    if split not in ("train", "test"):
        raise ConfigError(f"split must be 'train' or 'test', got '{split}'")
    names = CIFAR_TRAIN_FILES if split == "train" else CIFAR_TEST_FILES
    base = data_dir
    if not os.path.isfile(os.path.join(base, names[0])):
        nested = os.path.join(data_dir, "cifar-10-batches-bin")
        if os.path.isfile(os.path.join(nested, names[0])):
            base = nested
    parts = [_read_cifar_file(os.path.join(base, n)) for n in names]
    return Dataset(np.concatenate([p[0] for p in parts]),
                   np.concatenate([p[1] for p in parts]))


# ---------------------------------------------------------------------------
# synthetic texture / structure benchmark


@dataclass
class SynthSpec:
    """Parameters of the two-cue generator."""

    n: int = 10000
    classes: int = 10
    image_size: int = 32
    p_tex: float = 0.3      # chance the texture cue is re-drawn uniformly
    p_struct: float = 0.3   # same for the structure cue
    jitter: float = 1.0 / 3.0  # stripe angle noise, fraction of class spacing
    tex_amp: float = 0.5    # stripe contrast
    noise: float = 0.02     # iid pixel noise sigma
    seed: int = 0

    def validate(self) -> "SynthSpec":
        if self.n < 1:
            raise ConfigError(f"synth n must be >= 1, got {self.n}")
        if self.classes < 2:
            raise ConfigError(f"synth classes must be >= 2, got {self.classes}")
        if self.image_size < 16:
            raise ConfigError(f"synth image_size must be >= 16, got {self.image_size}")
        for name in ("p_tex", "p_struct"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {v}")
        if self.jitter < 0 or self.tex_amp < 0 or self.noise < 0:
            raise ConfigError("jitter, tex_amp and noise must be >= 0")
        return self


_DISK_COLOR = np.array([0.95, 0.35, 0.25], dtype=np.float32)
_DISK_R1 = 7.0 / 32.0  # lone-disk radius per pixel of image size; m disks
                       # shrink by 1/sqrt(m) so total silhouette area is fixed
_GAP = 1.2 / 32.0      # rim clearance (between disks and to the border)
_EDGE = 0.7            # soft disk edge width in pixels


def _place_disks(rng: np.random.Generator, m: int, r: float, s: float,
                 gap: float) -> np.ndarray:
    """Rejection-sample m centres with rims >= gap apart, away from edges."""
    lo, hi = r + gap, s - 1 - r - gap
    min_d2 = (2.0 * r + gap) ** 2
    centers = np.empty((m, 2))
    placed = tries = 0
    while placed < m:
        c = lo + rng.random(2) * (hi - lo)
        if placed == 0 or np.min(np.sum((centers[:placed] - c) ** 2, axis=1)) >= min_d2:
            centers[placed] = c
            placed += 1
        tries += 1
        if tries > 1000 * m:  # jammed layout: start over (same rng stream)
            placed = tries = 0
    return centers


def synth_generate(spec: SynthSpec) -> Dataset:
    """Render the two-cue dataset; deterministic in ``spec`` (incl. seed)."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n, k, s = spec.n, spec.classes, spec.image_size

    labels = rng.integers(0, k, size=n)
    tex_corrupt = rng.random(n) < spec.p_tex
    struct_corrupt = rng.random(n) < spec.p_struct
    tex_class = np.where(tex_corrupt, rng.integers(0, k, size=n), labels)
    struct_class = np.where(struct_corrupt, rng.integers(0, k, size=n), labels)

    tex_spacing = np.pi / k          # orientations live on a half circle
    theta = tex_class * tex_spacing + rng.normal(0.0, spec.jitter * tex_spacing, n)
    freq = rng.uniform(0.25, 0.31, size=n)  # cycles per pixel
    phase = rng.uniform(0.0, 2.0 * np.pi, size=n)

    noise = rng.normal(0.0, spec.noise, size=(n, 3, s, s)) if spec.noise else None

    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    images = np.empty((n, 3, s, s), dtype=np.float32)
    for i in range(n):
        ridge = xx * np.cos(theta[i]) + yy * np.sin(theta[i])
        stripes = 0.5 + 0.5 * spec.tex_amp * np.cos(2.0 * np.pi * freq[i] * ridge + phase[i])
        img = np.repeat(stripes[None], 3, axis=0)

        m = int(struct_class[i]) + 1
        r = _DISK_R1 * s / np.sqrt(m)
        cover = np.zeros((s, s))
        for cx, cy in _place_disks(rng, m, r, s, _GAP * s):
            d = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2)
            cover = np.maximum(cover, np.clip((r - d) / _EDGE + 0.5, 0.0, 1.0))
        img = img * (1.0 - cover) + _DISK_COLOR[:, None, None] * cover

        images[i] = img
    if noise is not None:
        images = np.clip(images + noise, 0.0, 1.0).astype(np.float32)

    return Dataset(
        images=images,
        labels=labels.astype(np.int64),
        meta={
            "tex_class": tex_class.astype(np.int64),
            "struct_class": struct_class.astype(np.int64),
            "tex_corrupt": tex_corrupt,
            "struct_corrupt": struct_corrupt,
        },
    )


# ---------------------------------------------------------------------------
# batching, normalization, augmentation


def channel_stats(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and std over a (N,C,H,W) stack (float64 accumulate)."""
    mean = images.mean(axis=(0, 2, 3), dtype=np.float64)
    std = images.std(axis=(0, 2, 3), dtype=np.float64)
    return mean.astype(np.float32), np.maximum(std, 1e-6).astype(np.float32)


def normalize(images: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    mean = np.asarray(mean, dtype=images.dtype).reshape(1, -1, 1, 1)
    std = np.asarray(std, dtype=images.dtype).reshape(1, -1, 1, 1)
    return (images - mean) / std


def batches(n: int, batch_size: int, seed: int, epoch: int,
            shuffle: bool = True):
    """Yield index arrays covering range(n); order depends on (seed, epoch)."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    order = np.arange(n)
    if shuffle:
        np.random.default_rng([seed, epoch]).shuffle(order)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def augment(images: np.ndarray, rng: np.random.Generator, pad: int = 3,
            flip: bool = False) -> np.ndarray:
    """Random shift (zero-padded crop) and optional horizontal flip.

    Flips mirror orientation cues, so they stay off for the synthetic
    task and on for natural images.
    """
    n, c, h, w = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oy = rng.integers(0, 2 * pad + 1, size=n)
    ox = rng.integers(0, 2 * pad + 1, size=n)
    out = np.empty_like(images)
    for i in range(n):
        out[i] = padded[i, :, oy[i]:oy[i] + h, ox[i]:ox[i] + w]
    if flip:
        do = rng.random(n) < 0.5
        out[do] = out[do][:, :, :, ::-1]
    return out


def mixup(images: np.ndarray, targets: np.ndarray, alpha: float,
          rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Convex-combine the batch with a shuffled copy of itself.

    ``targets`` must be one-hot / soft rows (B,K).  One Beta(alpha,
    alpha) weight is drawn for the whole batch.  alpha <= 0 is identity.
    """
    if alpha <= 0:
        return images, targets
    if targets.ndim != 2 or targets.shape[0] != images.shape[0]:
        raise ConfigError(f"mixup targets must be (B,K) rows, got {targets.shape}")
    lam = float(rng.beta(alpha, alpha))
    perm = rng.permutation(images.shape[0])
    mixed = lam * images + (1.0 - lam) * images[perm]
    mixed_t = lam * targets + (1.0 - lam) * targets[perm]
    return mixed.astype(images.dtype), mixed_t.astype(targets.dtype)


def one_hot(labels: np.ndarray, classes: int, dtype=np.float32) -> np.ndarray:
    labels = np.asarray(labels)
    out = np.zeros((labels.shape[0], classes), dtype=dtype)
    out[np.arange(labels.shape[0]), labels] = 1
    return out
