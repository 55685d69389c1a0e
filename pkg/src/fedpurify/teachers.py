"""Vision-language teacher adapters.

The purifier only needs three capabilities from a teacher: unit-norm image
embeddings, unit-norm text embeddings, and zero-shot class logits. The real
adapter wraps a pretrained ViT-L/14 vision-language checkpoint; the stub
teacher is a deterministic offline stand-in built on fixed orthogonal class
anchors so the test suite runs without downloading weights.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from .seeding import derive_seed

DEFAULT_PROMPT_TEMPLATE = "a photo of a {}"


def class_prompts(class_names, template: str = DEFAULT_PROMPT_TEMPLATE) -> list[str]:
    return [template.format(name) for name in class_names]


def _as_image_batch(images) -> torch.Tensor:
    x = torch.as_tensor(images, dtype=torch.float32)
    if x.ndim == 3:
        x = x.unsqueeze(0)
    if x.ndim != 4:
        raise ValueError("expected (N, C, H, W) images")
    return x


class StubTeacher:
    """Deterministic offline teacher with orthogonal class anchors.

    Each class owns one row of a seeded orthonormal basis. Text embedding of
    a caption returns the anchor of the class name it mentions. Image
    embeddings are only class-informative after `calibrate`, which fits
    per-class mean thumbnails on the (labeled, server-side) calibration set;
    an image is then embedded as the similarity-weighted mixture of anchors.
    That makes the stub an honest weak zero-shot teacher: everything it knows
    comes from data the server legitimately owns.
    """

    def __init__(self, class_names, embed_dim: int = 64, seed: int = 0,
                 thumb_size: int = 8, temperature: float = 0.05,
                 logit_scale: float = 10.0):
        self.class_names = [str(n).lower() for n in class_names]
        if embed_dim < len(self.class_names):
            raise ValueError("embed_dim must be at least the class count")
        self.embed_dim = embed_dim
        self.thumb_size = thumb_size
        self.temperature = temperature
        self.logit_scale = logit_scale
        self.identity = f"stub-orthogonal-d{embed_dim}-s{seed}"
        rng = np.random.default_rng(derive_seed(seed, "stub-anchors"))
        basis, _ = np.linalg.qr(rng.normal(size=(embed_dim, embed_dim)))
        self.anchors = torch.tensor(
            basis[: len(self.class_names)], dtype=torch.float32
        )
        self._proj = torch.tensor(
            rng.normal(size=(3 * thumb_size * thumb_size, embed_dim)) / np.sqrt(embed_dim),
            dtype=torch.float32,
        )
        self._class_thumbs: torch.Tensor | None = None

    # -- calibration ------------------------------------------------------

    def _thumbnails(self, images) -> torch.Tensor:
        x = _as_image_batch(images)
        t = F.adaptive_avg_pool2d(x, self.thumb_size).flatten(1)
        return F.normalize(t - t.mean(dim=1, keepdim=True), dim=1, eps=1e-8)

    def calibrate(self, images, labels) -> "StubTeacher":
        """Fit per-class mean thumbnails on a labeled server-side set."""
        labels = torch.as_tensor(np.asarray(labels), dtype=torch.long)
        thumbs = self._thumbnails(images)
        means = []
        for c in range(len(self.class_names)):
            sel = thumbs[labels == c]
            if len(sel) == 0:
                raise ValueError(f"calibration set missing class {c}")
            means.append(sel.mean(dim=0))
        self._class_thumbs = F.normalize(torch.stack(means), dim=1)
        return self

    @property
    def calibrated(self) -> bool:
        return self._class_thumbs is not None

    # -- teacher interface -------------------------------------------------

    @torch.no_grad()
    def image_embed(self, images) -> torch.Tensor:
        thumbs = self._thumbnails(images)
        if self._class_thumbs is not None:
            sims = thumbs @ self._class_thumbs.T
            weights = F.softmax(sims / self.temperature, dim=1)
            emb = weights @ self.anchors
        else:
            # uncalibrated: deterministic but class-agnostic projection
            emb = thumbs @ self._proj
        return F.normalize(emb, dim=1)

    @torch.no_grad()
    def text_embed(self, captions) -> torch.Tensor:
        if isinstance(captions, str):
            captions = [captions]
        rows = []
        for caption in captions:
            text = caption.lower()
            hit = [c for c, name in enumerate(self.class_names) if name in text]
            if len(hit) == 1:
                rows.append(self.anchors[hit[0]])
            else:
                # ambiguous or unknown text: stable hashed direction
                rng = np.random.default_rng(derive_seed(0, "stub-text", text))
                vec = torch.tensor(rng.normal(size=self.embed_dim), dtype=torch.float32)
                rows.append(F.normalize(vec, dim=0))
        return torch.stack(rows)

    @torch.no_grad()
    def class_logits(self, images, prompts) -> torch.Tensor:
        img = self.image_embed(images)
        txt = self.text_embed(prompts)
        return self.logit_scale * img @ txt.T


class ClipTeacher:
    """Adapter over a pretrained CLIP checkpoint (lazy transformers import)."""

    def __init__(self, model_name: str = "openai/clip-vit-large-patch14",
                 device: str = "cpu", batch_size: int = 32):
        from transformers import CLIPModel, CLIPProcessor

        self.identity = model_name
        self.device = device
        self.batch_size = batch_size
        self.model = CLIPModel.from_pretrained(model_name).to(device).eval()
        self.processor = CLIPProcessor.from_pretrained(model_name)

    def _to_pil(self, images):
        from PIL import Image

        x = _as_image_batch(images).clamp(0, 1)
        arr = (x * 255).round().to(torch.uint8).permute(0, 2, 3, 1).numpy()
        return [Image.fromarray(a) for a in arr]

    @torch.no_grad()
    def image_embed(self, images) -> torch.Tensor:
        pil = self._to_pil(images)
        chunks = []
        for i in range(0, len(pil), self.batch_size):
            inputs = self.processor(images=pil[i:i + self.batch_size],
                                    return_tensors="pt").to(self.device)
            feats = self.model.get_image_features(**inputs)
            chunks.append(F.normalize(feats, dim=1).cpu())
        return torch.cat(chunks)

    @torch.no_grad()
    def text_embed(self, captions) -> torch.Tensor:
        if isinstance(captions, str):
            captions = [captions]
        inputs = self.processor(text=list(captions), return_tensors="pt",
                                padding=True, truncation=True).to(self.device)
        feats = self.model.get_text_features(**inputs)
        return F.normalize(feats, dim=1).cpu()

    @torch.no_grad()
    def class_logits(self, images, prompts) -> torch.Tensor:
        img = self.image_embed(images)
        txt = self.text_embed(prompts)
        scale = self.model.logit_scale.exp().cpu()
        return scale * img @ txt.T


def make_teacher(name: str, class_names, seed: int = 0, device: str = "cpu",
                 calibration=None, **kwargs):
    """Teacher factory: ``stub`` (offline) or ``clip`` (downloads weights).

    ``calibration`` is an optional (images, labels) pair; the stub teacher is
    useless for purification without it.
    """
    if name == "stub":
        teacher = StubTeacher(class_names, seed=seed, **kwargs)
        if calibration is not None:
            teacher.calibrate(*calibration)
        return teacher
    if name == "clip":
        return ClipTeacher(device=device, **kwargs)
    raise ValueError(f"unknown teacher '{name}' (expected 'stub' or 'clip')")
