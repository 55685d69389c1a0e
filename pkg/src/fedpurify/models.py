"""Model backbones and the named-tensor parameter container used across the simulation.

Every model is split into an ``encoder`` (feature extractor) and a ``head``
(classifier). Parameters travel between clients and server as `ModelParams`,
an ordered name -> tensor mapping per part, so aggregation and the defense
stages never depend on a live ``nn.Module``.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np
import torch
from torch import nn

ENCODER_PREFIX = "encoder."
HEAD_PREFIX = "head."


class SplitClassifier(nn.Module):
    """Base class for backbones exposing separate encoder and head submodules."""

    encoder: nn.Module
    head: nn.Module

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.encoder(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))


class PixelStandardize(nn.Module):
    """Map unit-interval pixels to roughly zero mean, unit variance.

    Parameter-free on purpose: checkpoints, aggregation and update flattening
    must not see extra tensors. Raw [0,1] inputs leave plain conv stacks stuck
    near chance for many epochs; centering removes that plateau.
    """

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return (x - 0.5) * 4.0


class SmallCNN(SplitClassifier):
    """Compact CNN for 32x32 RGB images; desk-scale default backbone."""

    def __init__(self, num_classes: int = 10, feature_dim: int = 128, in_channels: int = 3):
        super().__init__()
        self.feature_dim = feature_dim
        self.encoder = nn.Sequential(
            PixelStandardize(),
            nn.Conv2d(in_channels, 32, 3, padding=1),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(32, 64, 3, padding=1),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(64, 128, 3, padding=1),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Flatten(),
            nn.Linear(128 * 4 * 4, feature_dim),
            nn.ReLU(),
        )
        self.head = nn.Linear(feature_dim, num_classes)


class TinyCNN(SplitClassifier):
    """Minimal CNN for toy fixtures (fast on CPU, any square input >= 8px)."""

    def __init__(self, num_classes: int = 2, feature_dim: int = 32, in_channels: int = 3):
        super().__init__()
        self.feature_dim = feature_dim
        self.encoder = nn.Sequential(
            PixelStandardize(),
            nn.Conv2d(in_channels, 16, 3, padding=1),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(16, 32, 3, padding=1),
            nn.ReLU(),
            nn.AdaptiveAvgPool2d(4),
            nn.Flatten(),
            nn.Linear(32 * 4 * 4, feature_dim),
            nn.ReLU(),
        )
        self.head = nn.Linear(feature_dim, num_classes)


class ResNet18Classifier(SplitClassifier):
    """ResNet-18 backbone (full-scale option); weights initialized fresh."""

    def __init__(self, num_classes: int = 10):
        super().__init__()
        from torchvision.models import resnet18

        net = resnet18(weights=None, num_classes=num_classes)
        self.feature_dim = net.fc.in_features
        self.head = net.fc
        net.fc = nn.Identity()
        self.encoder = nn.Sequential(PixelStandardize(), net)


_BACKBONES: dict[str, Callable[..., SplitClassifier]] = {
    "small_cnn": SmallCNN,
    "tiny_cnn": TinyCNN,
    "resnet18": ResNet18Classifier,
}


def build_model(backbone: str, num_classes: int, seed: int | None = None, **kwargs) -> SplitClassifier:
    """Instantiate a backbone by name with optionally seeded initialization."""
    if backbone not in _BACKBONES:
        raise ValueError(f"unknown backbone {backbone!r}; choose from {sorted(_BACKBONES)}")
    if seed is not None:
        torch.manual_seed(seed)
    return _BACKBONES[backbone](num_classes=num_classes, **kwargs)


@dataclass
class ModelParams:
    """Named tensors of one model, split into feature-extractor and classifier parts.

    Layer names and shapes must be identical across all clients and the global
    model within one experiment; canonical flat names carry an ``encoder.`` or
    ``head.`` prefix and fix the layer order used by `flatten_params`.
    """

    feature_extractor: "OrderedDict[str, torch.Tensor]"
    classifier: "OrderedDict[str, torch.Tensor]"

    @classmethod
    def from_model(cls, model: SplitClassifier) -> "ModelParams":
        enc: "OrderedDict[str, torch.Tensor]" = OrderedDict()
        head: "OrderedDict[str, torch.Tensor]" = OrderedDict()
        for name, tensor in model.state_dict().items():
            t = tensor.detach().cpu().clone()
            if name.startswith(ENCODER_PREFIX):
                enc[name[len(ENCODER_PREFIX):]] = t
            elif name.startswith(HEAD_PREFIX):
                head[name[len(HEAD_PREFIX):]] = t
            else:
                raise ValueError(f"state dict entry {name!r} lies outside encoder/head")
        return cls(feature_extractor=enc, classifier=head)

    def load_into(self, model: SplitClassifier) -> SplitClassifier:
        state = OrderedDict()
        for k, v in self.feature_extractor.items():
            state[ENCODER_PREFIX + k] = v
        for k, v in self.classifier.items():
            state[HEAD_PREFIX + k] = v
        model.load_state_dict(state)
        return model

    def items(self) -> Iterator[tuple[str, torch.Tensor]]:
        """Yield (canonical name, tensor) pairs in the fixed layer order."""
        for k, v in self.feature_extractor.items():
            yield ENCODER_PREFIX + k, v
        for k, v in self.classifier.items():
            yield HEAD_PREFIX + k, v

    def layer_names(self) -> list[str]:
        return [name for name, _ in self.items()]

    def clone(self) -> "ModelParams":
        return ModelParams(
            feature_extractor=OrderedDict((k, v.clone()) for k, v in self.feature_extractor.items()),
            classifier=OrderedDict((k, v.clone()) for k, v in self.classifier.items()),
        )

    def validate_finite(self) -> None:
        for name, tensor in self.items():
            if not torch.isfinite(tensor).all():
                raise ValueError(f"non-finite values in parameter {name!r}")

    def same_structure(self, other: "ModelParams") -> bool:
        mine = [(n, tuple(t.shape)) for n, t in self.items()]
        theirs = [(n, tuple(t.shape)) for n, t in other.items()]
        return mine == theirs

    def combine(self, other: "ModelParams", fn: Callable[[torch.Tensor, torch.Tensor], torch.Tensor]) -> "ModelParams":
        """Elementwise combination with a shape-compatible counterpart."""
        if not self.same_structure(other):
            raise ValueError("parameter structures differ")
        enc = OrderedDict(
            (k, fn(v, other.feature_extractor[k])) for k, v in self.feature_extractor.items()
        )
        head = OrderedDict((k, fn(v, other.classifier[k])) for k, v in self.classifier.items())
        return ModelParams(feature_extractor=enc, classifier=head)


def flatten_params(params: ModelParams) -> np.ndarray:
    """Concatenate all tensors into one float64 vector in canonical layer order.

    Round-trips with `unflatten_params`.
    """
    chunks = [t.detach().cpu().numpy().astype(np.float64).ravel() for _, t in params.items()]
    if not chunks:
        return np.zeros(0, dtype=np.float64)
    return np.concatenate(chunks)


def unflatten_params(vector: np.ndarray, template: ModelParams) -> ModelParams:
    """Rebuild a ModelParams with the template's names/shapes from a flat vector."""
    vector = np.asarray(vector, dtype=np.float64).ravel()
    total = sum(t.numel() for _, t in template.items())
    if vector.size != total:
        raise ValueError(f"vector length {vector.size} != parameter count {total}")
    out_enc: "OrderedDict[str, torch.Tensor]" = OrderedDict()
    out_head: "OrderedDict[str, torch.Tensor]" = OrderedDict()
    offset = 0
    for name, t in template.items():
        n = t.numel()
        block = torch.from_numpy(vector[offset:offset + n].copy()).reshape(t.shape).to(t.dtype)
        if name.startswith(ENCODER_PREFIX):
            out_enc[name[len(ENCODER_PREFIX):]] = block
        else:
            out_head[name[len(HEAD_PREFIX):]] = block
        offset += n
    return ModelParams(feature_extractor=out_enc, classifier=out_head)


def save_checkpoint(params: ModelParams, path) -> None:
    """Persist parameters as a named-tensor .npz archive."""
    arrays = {name: t.detach().cpu().numpy() for name, t in params.items()}
    np.savez(path, **arrays)


def load_checkpoint(path, template: ModelParams) -> ModelParams:
    with np.load(path) as archive:
        enc: "OrderedDict[str, torch.Tensor]" = OrderedDict()
        head: "OrderedDict[str, torch.Tensor]" = OrderedDict()
        for name, t in template.items():
            arr = archive[name]
            block = torch.from_numpy(arr).to(t.dtype)
            if name.startswith(ENCODER_PREFIX):
                enc[name[len(ENCODER_PREFIX):]] = block
            else:
                head[name[len(HEAD_PREFIX):]] = block
    return ModelParams(feature_extractor=enc, classifier=head)
