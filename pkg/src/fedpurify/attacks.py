"""Backdoor attack suite: trigger stamping, data poisoning, and update manipulation.

Four attack modes are supported. ``badnets`` stamps a pixel-patch trigger and
relabels to the target class (all-to-one). ``dba`` splits the same patch into
disjoint sub-patches, one per malicious client; evaluation always uses the
assembled full patch. ``layer`` submits an update that is poisoned only inside
a chosen set of layers, and ``afa`` amplifies the poisoned update's deviation
from the global model by a scale factor. The latter two are interpretations
(amplified-deviation and per-layer splicing) kept behind `AttackPlan` so they
can be swapped without touching the simulation loop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from fedpurify.models import ModelParams

ATTACK_MODES = ("badnets", "dba", "layer", "afa")


@dataclass
class TriggerSpec:
    """Declarative pixel-patch trigger plus the poisoning policy.

    ``pattern`` may be a (h, w) or (C, h, w) float tensor in [0, 1]; by
    default a solid white patch of ``size`` anchored at ``position``
    (bottom-right corner by convention when built via `default_trigger`).
    """

    pattern: torch.Tensor
    position: tuple[int, int]
    target_label: int
    poison_ratio: float = 1.0
    mode: str = "badnets"

    def __post_init__(self):
        self.pattern = torch.as_tensor(self.pattern, dtype=torch.float32)
        if self.pattern.ndim not in (2, 3):
            raise ValueError("pattern must be (h, w) or (C, h, w)")
        if not (0.0 < self.poison_ratio <= 1.0):
            raise ValueError("poison_ratio must lie in (0, 1]")
        if self.mode not in ATTACK_MODES:
            raise ValueError(f"mode must be one of {ATTACK_MODES}")
        if self.target_label < 0:
            raise ValueError("target_label must be a valid class index")

    @property
    def size(self) -> tuple[int, int]:
        return tuple(self.pattern.shape[-2:])


def default_trigger(
    image_shape: tuple[int, int, int],
    size: tuple[int, int] = (3, 3),
    target_label: int = 0,
    poison_ratio: float = 1.0,
    mode: str = "badnets",
    value: float = 1.0,
    position: tuple[int, int] | None = None,
) -> TriggerSpec:
    """Solid patch trigger; anchored at the bottom-right corner unless placed."""
    _, height, width = image_shape
    h, w = size
    if position is None:
        position = (height - h, width - w)
    spec = TriggerSpec(
        pattern=torch.full((h, w), float(value)),
        position=position,
        target_label=target_label,
        poison_ratio=poison_ratio,
        mode=mode,
    )
    _check_bounds(spec, (height, width))
    return spec


def load_trigger_pattern(path) -> torch.Tensor:
    """Read a trigger pattern from an image file (values scaled to [0, 1])."""
    from PIL import Image

    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1)


def _check_bounds(spec: TriggerSpec, image_hw: tuple[int, int]) -> None:
    r, c = spec.position
    h, w = spec.size
    if r < 0 or c < 0 or r + h > image_hw[0] or c + w > image_hw[1]:
        raise ValueError(
            f"trigger {h}x{w} at {spec.position} exceeds image bounds {image_hw}"
        )


def apply_trigger(images: torch.Tensor, spec: TriggerSpec) -> torch.Tensor:
    """Stamp the trigger onto an image or batch, returning a copy.

    Pixels inside the trigger region are replaced by the pattern; everything
    else is bit-identical to the input. Idempotent.
    """
    if images.ndim < 3:
        raise ValueError("expected (..., C, H, W) images")
    _check_bounds(spec, tuple(images.shape[-2:]))
    r, c = spec.position
    h, w = spec.size
    out = images.clone()
    out[..., :, r:r + h, c:c + w] = spec.pattern.to(images.dtype)
    return out


def poison_client_data(
    images: torch.Tensor,
    labels: torch.Tensor,
    spec: TriggerSpec,
    seed: int,
) -> tuple[torch.Tensor, torch.Tensor, np.ndarray]:
    """All-to-one poisoning of a client dataset.

    ``ceil(poison_ratio * N)`` samples drawn without replacement (seeded) get
    the trigger and the target label; the rest pass through bit-identical.

    Returns:
        (images, labels, poisoned_indices)
    """
    n = images.shape[0]
    if n == 0:
        raise ValueError("cannot poison an empty dataset")
    n_poison = min(n, math.ceil(spec.poison_ratio * n))
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(n, size=n_poison, replace=False))

    out_images = images.clone()
    out_labels = labels.clone()
    idx = torch.from_numpy(chosen)
    out_images[idx] = apply_trigger(images[idx], spec)
    out_labels[idx] = spec.target_label
    return out_images, out_labels, chosen


def dba_decompose(spec: TriggerSpec, n_parts: int) -> list[TriggerSpec]:
    """Split a trigger into pixel-disjoint sub-triggers for distributed stamping.

    The pattern is cut on a near-square grid; sub-patterns are jointly
    exhaustive, so stamping all parts reproduces the full trigger exactly.
    With one part this degenerates to the original trigger.
    """
    if n_parts < 1:
        raise ValueError("n_parts must be >= 1")
    if n_parts == 1:
        return [spec]
    h, w = spec.size
    rows, cols = _grid_factors(n_parts, h, w)
    if rows is None:
        raise ValueError(
            f"{h}x{w} pattern is not divisible into {n_parts} equal sub-patterns"
        )
    ph, pw = h // rows, w // cols
    pattern = spec.pattern
    parts = []
    for i in range(rows):
        for j in range(cols):
            sub = pattern[..., i * ph:(i + 1) * ph, j * pw:(j + 1) * pw]
            parts.append(
                TriggerSpec(
                    pattern=sub.clone(),
                    position=(spec.position[0] + i * ph, spec.position[1] + j * pw),
                    target_label=spec.target_label,
                    poison_ratio=spec.poison_ratio,
                    mode="dba",
                )
            )
    return parts


def _grid_factors(n_parts: int, h: int, w: int) -> tuple[int | None, int | None]:
    """Most-square (rows, cols) factorization of n_parts that tiles h x w."""
    best = None
    for rows in range(1, n_parts + 1):
        if n_parts % rows:
            continue
        cols = n_parts // rows
        if h % rows == 0 and w % cols == 0:
            if best is None or abs(rows - cols) < abs(best[0] - best[1]):
                best = (rows, cols)
    return best if best else (None, None)


def layer_attack_update(
    benign_update: ModelParams,
    poisoned_update: ModelParams,
    layer_names: list[str],
) -> ModelParams:
    """Splice the poisoned update into selected layers of a benign update.

    ``layer_names`` use canonical flat names (``encoder.*`` / ``head.*``).
    """
    known = set(benign_update.layer_names())
    unknown = [n for n in layer_names if n not in known]
    if unknown:
        raise KeyError(f"unknown layer names: {unknown}")
    wanted = set(layer_names)
    out = benign_update.clone()
    for name, tensor in poisoned_update.items():
        if name in wanted:
            part, key = name.split(".", 1)
            target = out.feature_extractor if part == "encoder" else out.classifier
            target[key] = tensor.clone()
    return out


def afa_update(
    poisoned_update: ModelParams,
    global_params: ModelParams,
    scale: float,
) -> ModelParams:
    """Amplify the poisoned update's deviation from the global model.

    Returns ``global + scale * (poisoned - global)``; scale 1 is the identity
    on the poisoned update, scale 0 returns the global parameters.
    """
    if scale < 0:
        raise ValueError("scale must be >= 0")
    return global_params.combine(
        poisoned_update, lambda g, p: g + scale * (p - g)
    )


@dataclass
class AttackPlan:
    """Mode-specific knobs resolved once per experiment.

    For ``dba``, malicious client ``i`` stamps ``sub_triggers[i % n_parts]``.
    """

    spec: TriggerSpec
    dba_parts: int = 4
    layer_names: list[str] = field(default_factory=list)
    afa_scale: float = 2.0
    sub_triggers: list[TriggerSpec] = field(default_factory=list)

    def __post_init__(self):
        if self.afa_scale <= 0:
            raise ValueError("afa_scale must be > 0")
        if self.spec.mode == "dba" and not self.sub_triggers:
            self.sub_triggers = dba_decompose(self.spec, self.dba_parts)

    def trigger_for_client(self, malicious_rank: int) -> TriggerSpec:
        """Trigger stamped by the malicious client with the given rank."""
        if self.spec.mode == "dba":
            return self.sub_triggers[malicious_rank % len(self.sub_triggers)]
        return self.spec

    def needs_benign_update(self) -> bool:
        return self.spec.mode == "layer"
