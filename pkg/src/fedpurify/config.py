"""Experiment configuration: schema, YAML loading, hashing, run manifests.

One config file describes one experiment cell. Sweeps and ablations derive
new configs instead of mutating state, so every produced artifact can name
the exact cell that made it via the config hash (stable under key
reordering).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from . import __version__

SCHEMA_VERSION = 1


@dataclass
class DataConfig:
    name: str = "synthetic10"
    root: str | None = None
    image_size: int = 32
    num_classes: int = 10
    max_train_images: int | None = None
    max_test_images: int | None = None
    longtail_factor: float | None = None
    # partitioning remainder policy; sharding requires equal shards otherwise
    drop_remainder: bool = True


@dataclass
class FederationConfig:
    n_clients: int = 10
    shards_per_client: int = 2
    rounds: int = 30
    local_epochs: int = 2
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 64
    participation: float = 1.0
    checkpoint_every: int = 0  # 0 = final checkpoint only

    def __post_init__(self):
        if not 0.0 < self.participation <= 1.0:
            raise ValueError("participation must lie in (0, 1]")


@dataclass
class AttackConfig:
    enabled: bool = True
    mode: str = "badnets"
    malicious_fraction: float = 0.2
    target_label: int = 0
    trigger_size: int = 3
    trigger_value: float = 1.0
    position: list[int] | None = None  # None = bottom-right corner
    poison_ratio: float = 1.0
    dba_parts: int = 4
    afa_scale: float = 2.0
    layer_names: list[str] | None = None  # None = classifier layers

    def __post_init__(self):
        if self.enabled and not 0.0 <= self.malicious_fraction < 0.5:
            raise ValueError("malicious_fraction must lie in [0, 0.5): benign majority assumption")


@dataclass
class DefenseConfig:
    filter_enabled: bool = True
    rectify_enabled: bool = True
    distill_enabled: bool = True
    projection_dim: int = 32
    min_cluster_size: int | None = None  # None = floor(n/2)+1
    tau: float = 0.07
    beta: float = 1.0
    pcl_epochs: int = 3
    kt_epochs: int = 3
    purify_lr: float = 1e-3
    purify_batch_size: int = 64
    purify_every: int = 1
    include_positive_in_denominator: bool = False

    @property
    def any_enabled(self) -> bool:
        return self.filter_enabled or self.rectify_enabled or self.distill_enabled

    def label(self) -> str:
        """Human-readable defense cell name for the summary table."""
        if not self.any_enabled:
            return "none"
        missing = []
        if not self.filter_enabled:
            missing.append("filter")
        if not self.rectify_enabled:
            missing.append("fr")
        if not self.distill_enabled:
            missing.append("kd")
        return "full" if not missing else "no_" + "_".join(missing)


@dataclass
class ServerDataConfig:
    per_class_count: int = 16
    augment_fraction: float = 0.5
    n_bands: int = 4
    sigma_scale: float = 0.5
    # procedural | env (remote endpoint w/ fallback) | surrogate (held-out
    # pool from a synthetic dataset's own generative process)
    generator: str = "procedural"
    cache_dir: str | None = None


@dataclass
class TeacherConfig:
    name: str = "stub"  # stub | clip
    embed_dim: int = 64
    logit_scale: float = 10.0
    model_name: str = "openai/clip-vit-large-patch14"
    prompt_template: str = "a photo of a {}"


@dataclass
class EvalConfig:
    eval_every: int = 1
    export_embeddings: bool = False
    trigger_fraction: float = 0.05


@dataclass
class ExperimentConfig:
    seed: int = 0
    deterministic: bool = True
    device: str = "cpu"
    backbone: str = "small_cnn"
    out_dir: str | None = None
    data: DataConfig = field(default_factory=DataConfig)
    federation: FederationConfig = field(default_factory=FederationConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    server_data: ServerDataConfig = field(default_factory=ServerDataConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)

    # -- construction -------------------------------------------------------

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        return _build(cls, raw, path="")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **section_updates) -> "ExperimentConfig":
        """New config with per-section field updates.

        ``replace(seed=1, defense={"distill_enabled": False})`` touches only
        the named fields; everything else is deep-copied.
        """
        raw = self.to_dict()
        for key, value in section_updates.items():
            if key not in raw:
                raise KeyError(f"unknown config section/field: {key}")
            if isinstance(value, dict):
                raw[key].update(value)
            else:
                raw[key] = value
        return ExperimentConfig.from_dict(raw)

    def config_hash(self) -> str:
        # out_dir is an artifact sink, not part of the experiment's identity:
        # the same run written to two directories must hash identically
        raw = self.to_dict()
        raw.pop("out_dir", None)
        blob = json.dumps(raw, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def attack_label(self) -> str:
        return self.attack.mode if self.attack.enabled else "none"


def _build(dc_type, raw: dict, path: str):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ValueError(f"config section '{path or '<root>'}' must be a mapping")
    spec_fields = {f.name: f for f in fields(dc_type)}
    unknown = set(raw) - set(spec_fields)
    if unknown:
        loc = path or "<root>"
        raise ValueError(f"unknown config key(s) {sorted(unknown)} in '{loc}'")
    kwargs = {}
    for name, value in raw.items():
        f = spec_fields[name]
        if dataclasses.is_dataclass(f.type) or (
            isinstance(f.default_factory, type) and dataclasses.is_dataclass(f.default_factory)
        ):
            kwargs[name] = _build(f.default_factory, value, f"{path}{name}.")
        else:
            kwargs[name] = value
    return dc_type(**kwargs)


def load_config(path) -> ExperimentConfig:
    """Parse a YAML experiment config, rejecting unknown keys."""
    raw = yaml.safe_load(Path(path).read_text())
    if raw is None:
        raw = {}
    version = raw.pop("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ValueError(f"unsupported config schema_version {version}")
    return ExperimentConfig.from_dict(raw)


def save_config(config: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"schema_version": SCHEMA_VERSION, **config.to_dict()}
    path.write_text(yaml.safe_dump(payload, sort_keys=True))
    return path


def write_manifest(config: ExperimentConfig, out_dir, artifacts: dict,
                   started: float, finished: float) -> Path:
    """Self-describing run record: config, hash, code version, timing, outputs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "code_version": __version__,
        "config_hash": config.config_hash(),
        "config": config.to_dict(),
        "seed": config.seed,
        "started_unix": started,
        "finished_unix": finished,
        "artifacts": {k: str(v) for k, v in artifacts.items()},
    }
    path = out_dir / "run_manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def utcnow() -> float:
    return time.time()
