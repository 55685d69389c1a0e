"""Deterministic seeding helpers shared across the simulation stages."""

from __future__ import annotations

import hashlib
import random

import numpy as np
import torch


def derive_seed(base_seed: int, *tags) -> int:
    """Stable sub-seed for a named stage.

    Hashing (base_seed, tags) keeps independent stages (partitioning, poison
    sampling, client training, augmentation, ...) on decorrelated streams
    while staying reproducible across processes and platforms.
    """
    payload = repr((int(base_seed),) + tuple(str(t) for t in tags)).encode()
    digest = hashlib.sha256(payload).digest()
    return int.from_bytes(digest[:4], "little")


def set_seed(seed: int) -> None:
    """Seed python, numpy and torch RNGs in one place."""
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)


def enable_determinism() -> None:
    """Force deterministic torch kernels (CPU and CUDA where supported)."""
    torch.use_deterministic_algorithms(True)
    torch.backends.cudnn.benchmark = False
    if torch.cuda.is_available():
        torch.backends.cudnn.deterministic = True
