"""Datasets and non-IID client partitioning.

Images are kept as uint8 HWC arrays until handed to training code, which
consumes float32 CHW tensors scaled to [0, 1].
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np
import torch

CIFAR10_CLASSES = (
    "airplane", "automobile", "bird", "cat", "deer",
    "dog", "frog", "horse", "ship", "truck",
)


class DatasetUnavailableError(RuntimeError):
    """Raised when a named dataset cannot be located or downloaded."""


@dataclass
class ImageSet:
    """In-memory labeled image collection (uint8, NHWC)."""

    images: np.ndarray
    labels: np.ndarray
    class_names: tuple[str, ...]

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.dtype != np.uint8:
            raise ValueError("images must be uint8 with shape (N, H, W, C)")
        if len(self.images) != len(self.labels):
            raise ValueError("images/labels length mismatch")
        self.labels = np.asarray(self.labels, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.images)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def subset(self, indices: np.ndarray) -> "ImageSet":
        indices = np.asarray(indices, dtype=np.int64)
        return ImageSet(self.images[indices], self.labels[indices], self.class_names)

    def to_tensors(self) -> tuple[torch.Tensor, torch.Tensor]:
        """Return (float32 NCHW in [0,1], int64 labels)."""
        imgs = torch.from_numpy(self.images).permute(0, 3, 1, 2).float().div_(255.0)
        return imgs, torch.from_numpy(self.labels)

    def channel_stats(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-channel mean/std of pixel values scaled to [0,1]."""
        flat = self.images.reshape(-1, self.images.shape[-1]).astype(np.float64) / 255.0
        return flat.mean(axis=0), flat.std(axis=0)


def load_cifar10(root: str | None = None, split: str = "train") -> ImageSet:
    """Load CIFAR-10 via torchvision.

    Resolution order for the data directory: explicit ``root``, the
    FEDPURIFY_DATA_DIR environment variable, then ``./data``. A download is
    attempted when the archive is absent; in offline environments this raises
    `DatasetUnavailableError` with provisioning instructions.
    """
    root = root or os.environ.get("FEDPURIFY_DATA_DIR") or "data"
    from torchvision.datasets import CIFAR10

    try:
        ds = CIFAR10(root=root, train=(split == "train"), download=True)
    except Exception as exc:
        raise DatasetUnavailableError(
            f"CIFAR-10 not found under {root!r} and download failed ({exc}). "
            "Place the extracted 'cifar-10-batches-py' directory there or set "
            "FEDPURIFY_DATA_DIR to a directory containing it."
        ) from exc
    images = np.asarray(ds.data, dtype=np.uint8)
    labels = np.asarray(ds.targets, dtype=np.int64)
    return ImageSet(images, labels, CIFAR10_CLASSES)


def _smooth_field(rng: np.random.Generator, size: int, active: int = 6) -> np.ndarray:
    """Low-frequency random field in [0,1] built from a few cosine modes."""
    from scipy.fft import idctn

    coeffs = np.zeros((size, size))
    coeffs[:active, :active] = rng.normal(0.0, 1.0, size=(active, active))
    field = idctn(coeffs, norm="ortho")
    lo, hi = field.min(), field.max()
    if hi - lo < 1e-9:
        return np.full_like(field, 0.5)
    return (field - lo) / (hi - lo)


def make_synthetic10(
    n_samples: int,
    seed: int = 0,
    image_size: int = 32,
    num_classes: int = 10,
    noise: float = 0.10,
) -> ImageSet:
    """Procedural labeled image set with CIFAR-like shape and difficulty.

    Each class is a fixed smooth color texture; samples get a random cyclic
    shift, brightness/contrast jitter, and Gaussian pixel noise. Learnable by
    a small CNN without being trivial, so backdoor dynamics (trigger saliency,
    non-IID drift) behave like they do on natural 32x32 images.
    """
    rng = np.random.default_rng(seed)
    bases = []
    for c in range(num_classes):
        class_rng = np.random.default_rng(1000 + c)
        channels = [_smooth_field(class_rng, image_size) for _ in range(3)]
        base = np.stack(channels, axis=-1)
        bases.append(0.15 + 0.7 * base)

    images = np.empty((n_samples, image_size, image_size, 3), dtype=np.uint8)
    labels = rng.integers(0, num_classes, size=n_samples)
    for i in range(n_samples):
        base = bases[labels[i]]
        dx, dy = rng.integers(-4, 5, size=2)
        img = np.roll(base, (dx, dy), axis=(0, 1))
        contrast = rng.uniform(0.8, 1.2)
        brightness = rng.uniform(-0.08, 0.08)
        img = (img - 0.5) * contrast + 0.5 + brightness
        img = img + rng.normal(0.0, noise, size=img.shape)
        images[i] = (np.clip(img, 0.0, 1.0) * 255.0).round().astype(np.uint8)

    names = tuple(f"texture{c}" for c in range(num_classes))
    return ImageSet(images, labels.astype(np.int64), names)


def load_dataset(name: str, root: str | None = None, split: str = "train",
                 seed: int = 0, synthetic_size: int = 10000) -> ImageSet:
    """Dataset registry entry point."""
    if name == "cifar10":
        return load_cifar10(root, split)
    if name == "synthetic10":
        base_seed = seed if split == "train" else seed + 77003
        return make_synthetic10(synthetic_size, seed=base_seed)
    raise ValueError(f"unknown dataset {name!r}")


@dataclass
class ClientState:
    """Bookkeeping for one simulated client."""

    client_id: int
    dataset_indices: np.ndarray
    is_malicious: bool = False
    sample_count: int = field(default=0)

    def __post_init__(self):
        self.dataset_indices = np.asarray(self.dataset_indices, dtype=np.int64)
        if self.dataset_indices.size == 0:
            raise ValueError(f"client {self.client_id} has no data")
        if self.sample_count == 0:
            self.sample_count = int(self.dataset_indices.size)
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")


def partition_pathological(
    labels: np.ndarray,
    n_clients: int,
    shards_per_client: int,
    seed: int,
    drop_remainder: bool = False,
) -> list[np.ndarray]:
    """Pathological non-IID split: label-sorted shards dealt to clients.

    Samples are sorted by label and cut into ``n_clients * shards_per_client``
    equal shards; each client receives whole shards, so it sees at most
    ``shards_per_client`` distinct classes.

    Args:
        labels: per-sample class labels.
        n_clients: number of clients.
        shards_per_client: shards (hence max distinct classes) per client.
        seed: controls shard shuffling and the label-tie ordering.
        drop_remainder: when the sample count is not divisible into equal
            shards, drop the excess instead of rejecting.

    Returns:
        One index array per client; arrays are disjoint and (unless samples
        were dropped) cover every sample.
    """
    labels = np.asarray(labels)
    n = labels.size
    n_shards = n_clients * shards_per_client
    if n_shards < 1:
        raise ValueError("need at least one shard")
    remainder = n % n_shards
    if remainder and not drop_remainder:
        raise ValueError(
            f"{n} samples do not divide into {n_shards} equal shards "
            f"(remainder {remainder}); pass drop_remainder=True to discard the excess"
        )
    shard_size = n // n_shards
    if shard_size == 0:
        raise ValueError("more shards than samples")

    rng = np.random.default_rng(seed)
    # Secondary random key makes the within-class order (and any dropped
    # samples) seed-dependent rather than dataset-order dependent.
    tiebreak = rng.permutation(n)
    order = np.lexsort((tiebreak, labels))
    usable = order[: shard_size * n_shards]
    shards = usable.reshape(n_shards, shard_size)

    shard_ids = rng.permutation(n_shards)
    parts = []
    for c in range(n_clients):
        chosen = shard_ids[c * shards_per_client:(c + 1) * shards_per_client]
        parts.append(np.sort(np.concatenate([shards[s] for s in chosen])))
    return parts


def make_longtail(labels: np.ndarray, imbalance_factor: float, seed: int = 0) -> np.ndarray:
    """Exponentially imbalanced index subset.

    Class ``c`` keeps ``floor(n_max * rho ** (-c / (C - 1)))`` samples, where
    ``rho`` is the imbalance factor and ``n_max`` the largest class count.
    Factor 1 keeps everything.
    """
    if imbalance_factor < 1:
        raise ValueError("imbalance_factor must be >= 1")
    labels = np.asarray(labels)
    classes = np.unique(labels)
    n_classes = classes.size
    counts = {int(c): int((labels == c).sum()) for c in classes}
    n_max = max(counts.values())

    rng = np.random.default_rng(seed)
    kept: list[np.ndarray] = []
    for rank, c in enumerate(sorted(counts)):
        if n_classes == 1 or imbalance_factor == 1:
            target = counts[c]
        else:
            target = int(math.floor(n_max * imbalance_factor ** (-rank / (n_classes - 1))))
        target = min(target, counts[c])
        if target <= 0:
            raise ValueError(
                f"imbalance factor {imbalance_factor} empties class {c}; lower it"
            )
        idx = np.flatnonzero(labels == c)
        kept.append(np.sort(rng.choice(idx, size=target, replace=False)))
    return np.sort(np.concatenate(kept))


def stratified_subset(labels: np.ndarray, size: int, seed: int) -> np.ndarray:
    """Seeded class-balanced index subset (as balanced as counts allow)."""
    labels = np.asarray(labels)
    if size >= labels.size or size <= 0:
        return np.arange(labels.size)
    rng = np.random.default_rng(seed)
    classes = np.unique(labels)
    per = size // classes.size
    chosen: list[np.ndarray] = []
    for c in classes:
        idx = np.flatnonzero(labels == c)
        take = min(per, idx.size)
        chosen.append(rng.choice(idx, size=take, replace=False))
    pool = np.concatenate(chosen)
    short = size - pool.size
    if short > 0:
        rest = np.setdiff1d(np.arange(labels.size), pool, assume_unique=False)
        pool = np.concatenate([pool, rng.choice(rest, size=short, replace=False)])
    return np.sort(pool)
