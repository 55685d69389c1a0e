"""Evaluation metrics and per-round reporting.

MA is plain clean-test accuracy. ASR follows the standard backdoor
definition: among test samples whose true label differs from the attack
target, the fraction classified as the target once the trigger is stamped
on. Reports are JSON-lines per round plus a flat CSV summary; the summary
carries no timing fields so identical runs serialize byte-identically.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .attacks import TriggerSpec, apply_trigger

SUMMARY_COLUMNS = ("dataset", "attack", "defense", "ma", "asr", "seed", "config_hash")


@torch.no_grad()
def predict(model, images: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    model.eval()
    outputs = []
    for i in range(0, len(images), batch_size):
        outputs.append(model(images[i:i + batch_size]).argmax(dim=1))
    return torch.cat(outputs)


def main_accuracy(model, images: torch.Tensor, labels: torch.Tensor,
                  batch_size: int = 256) -> float:
    """Fraction of clean test samples predicted correctly."""
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    preds = predict(model, images, batch_size)
    return float((preds == labels).sum()) / len(labels)


def attack_success_rate(model, images: torch.Tensor, labels: torch.Tensor,
                        trigger: TriggerSpec, target_label: int | None = None,
                        batch_size: int = 256) -> float:
    """Triggered misclassification rate toward the target class.

    Samples whose true label already equals the target are excluded from
    both numerator and denominator. For a distributed trigger, pass the
    fully assembled pattern (evaluation convention).
    """
    target = trigger.target_label if target_label is None else target_label
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    keep = labels != target
    if not bool(keep.any()):
        raise ValueError("no evaluation samples with true label != target")
    triggered = apply_trigger(images[keep], trigger)
    preds = predict(model, triggered, batch_size)
    return float((preds == target).sum()) / int(keep.sum())


@dataclass
class RoundReport:
    """One row of the per-round log."""

    round: int
    selected_clients: list[int]
    ma: float
    asr: float
    losses: dict = field(default_factory=dict)
    wall_time: float = 0.0
    flags: list[str] = field(default_factory=list)

    def __post_init__(self):
        for name, value in (("ma", self.ma), ("asr", self.asr)):
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")

    def to_dict(self) -> dict:
        return {
            "round": self.round,
            "selected_clients": list(self.selected_clients),
            "ma": self.ma,
            "asr": self.asr,
            "losses": dict(self.losses),
            "wall_time": self.wall_time,
            "flags": list(self.flags),
        }


def write_reports(reports, path) -> Path:
    """Persist round reports as JSON lines."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for report in reports:
            fh.write(json.dumps(report.to_dict(), sort_keys=True) + "\n")
    return path


def write_summary(rows: list[dict], path) -> Path:
    """Flat CSV with one row per experiment cell (schema fixed, no timing)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in SUMMARY_COLUMNS})
    return path


def read_summary(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


@torch.no_grad()
def export_embeddings(model, images: torch.Tensor, labels: torch.Tensor,
                      trigger: TriggerSpec, path, trigger_fraction: float = 0.05,
                      seed: int = 0, batch_size: int = 256) -> Path:
    """Dump per-sample feature vectors for offline projection (e.g. t-SNE).

    A seeded fraction of the samples get the trigger stamped on before
    feature extraction; each record carries (feature, true label, triggered).
    """
    if not 0.0 <= trigger_fraction <= 1.0:
        raise ValueError("trigger_fraction must lie in [0, 1]")
    model.eval()
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    rng = np.random.default_rng(seed)
    n = len(images)
    flagged = np.zeros(n, dtype=bool)
    n_triggered = int(round(trigger_fraction * n))
    if n_triggered:
        flagged[rng.choice(n, size=n_triggered, replace=False)] = True
    prepared = images.clone()
    if flagged.any():
        idx = torch.from_numpy(np.flatnonzero(flagged))
        prepared[idx] = apply_trigger(prepared[idx], trigger)
    feats = []
    for i in range(0, n, batch_size):
        feats.append(model.features(prepared[i:i + batch_size]))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(path, features=torch.cat(feats).numpy(),
                        labels=labels.numpy(), is_triggered=flagged)
    return path
