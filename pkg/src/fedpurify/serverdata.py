"""Server-side image-text dataset: prompt expansion, synthesis, DCT augmentation.

The server never sees client samples. It builds its own labeled set by
expanding each class name into captions, rendering those captions with a
pluggable image generator (a remote text-to-image endpoint when configured,
class-conditioned procedural textures otherwise), and then injecting Gaussian
noise into the trigger-sensitive DCT band of a fraction of the images so the
set covers trigger-like frequency content.
"""

from __future__ import annotations

import io
import json
import logging
from dataclasses import dataclass, field
from hashlib import sha256
from itertools import cycle, islice
from pathlib import Path

import numpy as np
import torch

from .data import CIFAR10_CLASSES, _smooth_field
from .frequency import BandProfile, estimate_band_profile, perturb_band
from .seeding import derive_seed

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
ARCHIVE_NAME = "samples.npz"
FORMAT_VERSION = 1

_SCALES = ("small", "large", "tiny", "distant")
_CONTEXTS = (
    "beneath a cloudy sky",
    "partially obscured by leaves",
    "against a plain background",
    "on a sunny day",
    "in dim light",
    "near the edge of the frame",
)


def _article(word: str) -> str:
    return "an" if word[:1].lower() in "aeiou" else "a"


def expand_prompts(class_name: str, count: int | None = None) -> list[str]:
    """Deterministic caption bank for one class.

    Combines the bare class name with scale, occlusion and background
    modifiers ("a small airplane beneath a cloudy sky", "a frog partially
    obscured by leaves", ...). Every caption contains the class name token.
    With ``count`` set, the bank is cycled to that length.
    """
    name = class_name.strip().lower()
    if not name:
        raise ValueError("empty class name")
    bank = [f"a photo of {_article(name)} {name}"]
    bank += [f"{_article(name)} {name} {ctx}" for ctx in _CONTEXTS]
    bank += [f"{_article(s)} {s} {name} {ctx}" for s in _SCALES for ctx in _CONTEXTS]
    if count is None:
        return bank
    if count < 1:
        raise ValueError("count must be positive")
    return list(islice(cycle(bank), count))


@dataclass(frozen=True)
class GenRequest:
    """One synthesis request; the hash key makes responses cacheable."""

    caption: str
    class_name: str
    label: int
    width: int = 32
    height: int = 32
    seed: int = 0

    def payload(self) -> dict:
        return {
            "caption": self.caption,
            "width": self.width,
            "height": self.height,
            "seed": self.seed,
        }

    def key(self) -> str:
        blob = json.dumps(self.payload(), sort_keys=True).encode()
        return sha256(blob).hexdigest()


@dataclass
class CaptionedImage:
    image: np.ndarray  # float32 (C, H, W) in [0, 1]
    label: int
    caption: str
    provenance: str = "unknown"

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        if self.image.ndim != 3:
            raise ValueError("image must be (C, H, W)")
        if self.label < 0:
            raise ValueError("label must be a valid class index")


class GeneratorError(RuntimeError):
    """Raised when an image generator cannot service a request."""


class ProceduralGenerator:
    """Offline fallback: class-conditioned smooth textures, no network.

    Renders each class as a reproducible low-frequency color field with
    caption- and seed-dependent jitter. Clearly not photographic; its one job
    is giving the desk-scale pipeline a labeled server set whose classes are
    separable, without touching any client sample.
    """

    name = "procedural-textures"

    def __init__(self, base_seed: int = 0, texture_seed: int = 1234):
        self.base_seed = base_seed
        self.texture_seed = texture_seed
        self._textures: dict[tuple[int, int], np.ndarray] = {}

    def _class_texture(self, label: int, size: int) -> np.ndarray:
        key = (label, size)
        if key not in self._textures:
            rng = np.random.default_rng(derive_seed(self.texture_seed, "class", label, size))
            tex = np.stack([_smooth_field(rng, size) for _ in range(3)])
            self._textures[key] = 0.5 + 0.35 * tex
        return self._textures[key]

    def generate(self, request: GenRequest) -> np.ndarray:
        if request.width != request.height:
            raise GeneratorError("procedural generator renders square images only")
        size = request.height
        base = self._class_texture(request.label, size)
        rng = np.random.default_rng(
            derive_seed(self.base_seed, "img", request.label, request.seed, request.caption)
        )
        img = np.roll(base, shift=(rng.integers(-4, 5), rng.integers(-4, 5)), axis=(1, 2))
        img = (img - 0.5) * rng.uniform(0.8, 1.2) + 0.5 + rng.uniform(-0.08, 0.08)
        img = img + rng.normal(0.0, 0.10, size=img.shape)
        img = np.clip(img, 0.0, 1.0)
        return (img.transpose(1, 2, 0) * 255).round().astype(np.uint8)


class SurrogatePoolGenerator:
    """Fallback that samples a held-out public labeled pool (never client data)."""

    name = "surrogate-pool"

    def __init__(self, images: np.ndarray, labels: np.ndarray):
        self.images = np.asarray(images)  # uint8 (N, H, W, C)
        self.labels = np.asarray(labels)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise ValueError("pool must be (N, H, W, C) images with matching labels")
        self._by_class = {
            int(c): np.flatnonzero(self.labels == c) for c in np.unique(self.labels)
        }

    def generate(self, request: GenRequest) -> np.ndarray:
        pool = self._by_class.get(request.label)
        if pool is None or len(pool) == 0:
            raise GeneratorError(f"surrogate pool has no images for class {request.label}")
        rng = np.random.default_rng(int(request.key()[:8], 16))
        return self.images[int(rng.choice(pool))]


class HttpGenerator:
    """Text-to-image endpoint client. Request JSON {caption, width, height, seed},
    response either raw image bytes or JSON with a base64 ``image`` field."""

    def __init__(self, endpoint: str, api_key: str | None = None,
                 timeout: float = 30.0, name: str | None = None):
        self.endpoint = endpoint
        self.api_key = api_key
        self.timeout = timeout
        self.name = name or f"http:{endpoint}"

    def generate(self, request: GenRequest) -> np.ndarray:
        import requests
        from PIL import Image

        headers = {}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            resp = requests.post(self.endpoint, json=request.payload(),
                                 headers=headers, timeout=self.timeout)
            resp.raise_for_status()
        except requests.RequestException as exc:
            raise GeneratorError(f"generator request failed: {exc}") from exc
        content_type = resp.headers.get("content-type", "")
        try:
            if content_type.startswith("image/"):
                img = Image.open(io.BytesIO(resp.content))
            else:
                import base64

                img = Image.open(io.BytesIO(base64.b64decode(resp.json()["image"])))
            img = img.convert("RGB")
        except Exception as exc:
            raise GeneratorError(f"malformed generator response: {exc}") from exc
        return np.asarray(img, dtype=np.uint8)


class CachedGenerator:
    """Disk cache wrapper keyed by request hash; replays are byte-identical."""

    def __init__(self, inner, cache_dir):
        self.inner = inner
        self.name = inner.name
        self.cache_dir = Path(cache_dir)
        self.cache_dir.mkdir(parents=True, exist_ok=True)

    def generate(self, request: GenRequest) -> np.ndarray:
        path = self.cache_dir / f"{request.key()}.npy"
        if path.exists():
            return np.load(path)
        arr = self.inner.generate(request)
        np.save(path, arr)
        return arr


def generator_from_env(env: dict | None = None):
    """HttpGenerator from FEDPURIFY_GENERATOR_ENDPOINT / _KEY, else None."""
    import os

    env = os.environ if env is None else env
    endpoint = env.get("FEDPURIFY_GENERATOR_ENDPOINT")
    if not endpoint:
        return None
    return HttpGenerator(endpoint, api_key=env.get("FEDPURIFY_GENERATOR_KEY"))


def _resize_to(arr: np.ndarray, height: int, width: int) -> np.ndarray:
    if arr.shape[:2] == (height, width):
        return arr
    from PIL import Image

    return np.asarray(
        Image.fromarray(arr).resize((width, height), Image.BILINEAR), dtype=np.uint8
    )


def _match_statistics(img: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    """Affinely shift per-channel mean/std toward the target, then clip."""
    out = img.copy()
    for ch in range(out.shape[0]):
        mu, sd = out[ch].mean(), out[ch].std()
        if sd > 1e-6:
            out[ch] = (out[ch] - mu) / sd * std[ch] + mean[ch]
        else:
            out[ch] = out[ch] - mu + mean[ch]
    return np.clip(out, 0.0, 1.0)


def synthesize_images(
    requests: list[GenRequest],
    generator,
    fallback=None,
    target_stats: tuple[np.ndarray, np.ndarray] | None = None,
) -> list[CaptionedImage]:
    """Render requests, retrying once and falling back before skipping.

    Each produced image is resized to the requested shape, optionally
    normalized to target per-channel statistics, and tagged with the name of
    the generator that actually produced it.
    """
    out = []
    for req in requests:
        arr, provenance = None, None
        for attempt, gen in enumerate((generator, generator, fallback)):
            if gen is None:
                continue
            try:
                arr = gen.generate(req)
                provenance = gen.name if gen is generator else f"{gen.name}:fallback"
                break
            except GeneratorError as exc:
                logger.warning("generate failed (attempt %d) for %r: %s",
                               attempt + 1, req.caption, exc)
        if arr is None:
            logger.warning("skipping unservable request %r", req.caption)
            continue
        arr = np.asarray(arr)
        if arr.ndim != 3 or arr.shape[-1] != 3:
            logger.warning("skipping malformed image for %r (shape %s)", req.caption, arr.shape)
            continue
        arr = _resize_to(arr.astype(np.uint8), req.height, req.width)
        img = arr.astype(np.float32).transpose(2, 0, 1) / 255.0
        if target_stats is not None:
            img = _match_statistics(img, np.asarray(target_stats[0]), np.asarray(target_stats[1]))
        out.append(CaptionedImage(image=img, label=req.label, caption=req.caption,
                                  provenance=provenance))
    return out


@dataclass
class ServerDataset:
    """Persisted, versioned image-text set living entirely on the server."""

    images: np.ndarray  # float32 (N, C, H, W) in [0, 1]
    labels: np.ndarray  # int64 (N,)
    captions: list[str]
    provenance: list[str]
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if not (len(self.images) == len(self.labels) == len(self.captions) == len(self.provenance)):
            raise ValueError("field lengths disagree")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return int(self.manifest.get("num_classes", int(self.labels.max()) + 1))

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def to_tensors(self, device=None) -> tuple[torch.Tensor, torch.Tensor]:
        x = torch.from_numpy(self.images)
        y = torch.from_numpy(self.labels)
        if device is not None:
            x, y = x.to(device), y.to(device)
        return x, y

    def save(self, out_dir) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        np.savez_compressed(
            out_dir / ARCHIVE_NAME,
            images=self.images,
            labels=self.labels,
            captions=np.asarray(self.captions, dtype=object),
            provenance=np.asarray(self.provenance, dtype=object),
        )
        (out_dir / MANIFEST_NAME).write_text(json.dumps(self.manifest, indent=2, sort_keys=True))
        return out_dir

    @classmethod
    def load(cls, in_dir) -> "ServerDataset":
        in_dir = Path(in_dir)
        with np.load(in_dir / ARCHIVE_NAME, allow_pickle=True) as arc:
            images = arc["images"]
            labels = arc["labels"]
            captions = [str(c) for c in arc["captions"]]
            provenance = [str(p) for p in arc["provenance"]]
        manifest = json.loads((in_dir / MANIFEST_NAME).read_text())
        if manifest.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported dataset format: {manifest.get('format_version')}")
        return cls(images, labels, captions, provenance, manifest)


def build_server_dataset(
    class_names: list[str] | None = None,
    per_class_count: int = 16,
    augment_fraction: float = 0.5,
    generator=None,
    fallback=None,
    image_size: int = 32,
    seed: int = 0,
    n_bands: int = 4,
    sigma_scale: float = 0.5,
    probe_trigger=None,
    min_probe_images: int = 32,
    target_stats: tuple[np.ndarray, np.ndarray] | None = None,
    out_dir=None,
) -> ServerDataset:
    """Full server-side pipeline: prompts -> synthesis -> band-targeted noise.

    The band profile is estimated from the synthesized images themselves with
    a generic visible probe trigger (a 3x3 white corner patch by default; the
    defender does not assume knowledge of the attacker's pattern), then
    ``augment_fraction`` of the images get Gaussian noise in that band.

    Args:
        class_names: class label names; CIFAR-10's ten classes by default.
        per_class_count: synthesized images per class.
        augment_fraction: fraction of images passed through `perturb_band`.
        generator: primary image generator; falls back to `ProceduralGenerator`.
        fallback: generator tried when the primary fails after a retry.
        probe_trigger: callable image -> triggered image for band estimation.
        out_dir: when set, the dataset is persisted there.

    Returns:
        ServerDataset with a manifest recording generator identity, seeds,
        band count and noise scale.
    """
    if not 0.0 <= augment_fraction <= 1.0:
        raise ValueError("augment_fraction must lie in [0, 1]")
    if class_names is None:
        class_names = list(CIFAR10_CLASSES)
    if generator is None and fallback is None:
        generator = ProceduralGenerator(base_seed=derive_seed(seed, "procgen"))

    requests = []
    for label, name in enumerate(class_names):
        for i, caption in enumerate(expand_prompts(name, per_class_count)):
            requests.append(GenRequest(
                caption=caption, class_name=name, label=label,
                width=image_size, height=image_size,
                seed=derive_seed(seed, "synth", label, i),
            ))
    samples = synthesize_images(requests, generator, fallback=fallback,
                                target_stats=target_stats)
    if not samples:
        raise GeneratorError("no server images could be synthesized")
    produced = np.bincount([s.label for s in samples], minlength=len(class_names))
    if (produced == 0).any():
        missing = [class_names[i] for i in np.flatnonzero(produced == 0)]
        raise GeneratorError(f"no images synthesized for classes: {missing}")

    images = np.stack([s.image for s in samples])
    labels = np.array([s.label for s in samples], dtype=np.int64)
    captions = [s.caption for s in samples]
    provenance = [s.provenance for s in samples]

    if probe_trigger is None:
        from .attacks import apply_trigger, default_trigger

        spec = default_trigger((3, image_size, image_size), size=(3, 3), target_label=0)

        def probe_trigger(img):
            return apply_trigger(torch.from_numpy(np.ascontiguousarray(img)).float(), spec).numpy()

    probe_rng = np.random.default_rng(derive_seed(seed, "probe"))
    n_probe = min(len(images), max(min_probe_images, len(class_names)))
    probe_idx = probe_rng.choice(len(images), size=n_probe, replace=False)
    profile = estimate_band_profile(images[probe_idx], probe_trigger, n_bands)

    aug_rng = np.random.default_rng(derive_seed(seed, "augment"))
    n_aug = int(round(augment_fraction * len(images)))
    aug_idx = aug_rng.choice(len(images), size=n_aug, replace=False)
    for i in sorted(int(j) for j in aug_idx):
        images[i] = perturb_band(images[i], profile, sigma_scale, aug_rng).astype(np.float32)
        provenance[i] += "+dct-noise"

    manifest = {
        "format_version": FORMAT_VERSION,
        "generator": generator.name if generator is not None else fallback.name,
        "classes": list(class_names),
        "num_classes": len(class_names),
        "per_class_count": per_class_count,
        "augment_fraction": augment_fraction,
        "seed": seed,
        "n_bands": n_bands,
        "sigma_scale": sigma_scale,
        "high_band": int(profile.high_band),
        "image_size": image_size,
    }
    dataset = ServerDataset(images, labels, captions, provenance, manifest)
    if out_dir is not None:
        dataset.save(out_dir)
    return dataset
