"""Post-aggregation purification of the global model on the server dataset.

Two stages, both driven by a vision-language teacher and server-side data
only. Feature rectification retrains the feature extractor with a prototype
contrastive loss: student features are pulled toward the teacher's class
prototypes and pushed away from other-class prototypes. Knowledge transfer
then fine-tunes the whole model with cross-entropy plus a KL term aligning
student logits to the teacher's zero-shot logits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .models import ModelParams, SplitClassifier
from .seeding import derive_seed
from .teachers import DEFAULT_PROMPT_TEMPLATE, class_prompts

PROTO_SOURCES = ("teacher-image", "teacher-text", "extractor")


def l2_normalize(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Project onto the unit sphere; zero vectors are an error, not a nan."""
    norms = x.norm(dim=dim, keepdim=True)
    if (norms <= 1e-12).any():
        raise ValueError("cannot normalize a zero vector")
    return x / norms


@dataclass
class PrototypeSet:
    """One unit-norm vector per class, tagged with where it came from."""

    source: str
    vectors: torch.Tensor  # (C, D)

    def __post_init__(self):
        if self.source not in PROTO_SOURCES:
            raise ValueError(f"source must be one of {PROTO_SOURCES}")
        self.vectors = torch.as_tensor(self.vectors, dtype=torch.float32)
        if self.vectors.ndim != 2:
            raise ValueError("vectors must be (num_classes, dim)")
        norms = self.vectors.detach().norm(dim=1)
        if not torch.allclose(norms, torch.ones_like(norms), atol=1e-6):
            raise ValueError("prototype vectors must be unit norm within 1e-6")

    @property
    def num_classes(self) -> int:
        return self.vectors.shape[0]


def class_mean_prototypes(features: torch.Tensor, labels: torch.Tensor,
                          num_classes: int, source: str) -> PrototypeSet:
    """Normalized per-class mean of (normalized) feature vectors."""
    feats = l2_normalize(torch.as_tensor(features, dtype=torch.float32))
    labels = torch.as_tensor(labels, dtype=torch.long)
    rows = []
    for c in range(num_classes):
        sel = feats[labels == c]
        if len(sel) == 0:
            raise ValueError(f"no samples for class {c}; server set must cover all classes")
        rows.append(sel.mean(dim=0))
    return PrototypeSet(source=source, vectors=l2_normalize(torch.stack(rows)))


@torch.no_grad()
def extractor_prototypes(embed_fn, images: torch.Tensor, labels: torch.Tensor,
                         num_classes: int, batch_size: int = 128) -> PrototypeSet:
    """Prototypes of the student extractor over the server set (detached)."""
    feats = []
    for i in range(0, len(images), batch_size):
        feats.append(embed_fn(images[i:i + batch_size]))
    return class_mean_prototypes(torch.cat(feats), labels, num_classes, source="extractor")


def teacher_prototypes(teacher, images, labels, class_names,
                       template: str = DEFAULT_PROMPT_TEMPLATE) -> tuple[PrototypeSet, PrototypeSet]:
    """Teacher-side prototypes: per-class image-embedding means and text embeddings."""
    num_classes = len(class_names)
    img_protos = class_mean_prototypes(teacher.image_embed(images), labels,
                                       num_classes, source="teacher-image")
    txt = teacher.text_embed(class_prompts(class_names, template))
    txt_protos = PrototypeSet(source="teacher-text", vectors=l2_normalize(txt))
    return img_protos, txt_protos


def _contrastive(features: torch.Tensor, labels: torch.Tensor,
                 positives: torch.Tensor, negatives: torch.Tensor,
                 tau: float, include_positive_in_denominator: bool) -> torch.Tensor:
    """Shared core of both prototype losses; returns the per-batch sum.

    Per sample with class c:
        -log[ exp(sim(v, pos_c)/tau) / sum_{k != c} exp(sim(v, neg_k)/tau) ]
    The denominator excludes k = c and (by default) also the positive term,
    so the loss can be negative; the optional switch adds the positive back
    for the conventional normalized form.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    if features.ndim != 2:
        raise ValueError("features must be (batch, dim)")
    if (features.detach().norm(dim=1) <= 1e-12).any():
        raise ValueError("zero feature vector")
    if negatives.shape[0] < 2:
        raise ValueError("need at least two classes")
    labels = torch.as_tensor(labels, dtype=torch.long)

    pos_sim = (features * positives[labels]).sum(dim=1) / tau
    neg_sim = features @ negatives.T / tau  # (N, C)
    mask = F.one_hot(labels, num_classes=negatives.shape[0]).bool()
    neg_sim = neg_sim.masked_fill(mask, float("-inf"))
    if include_positive_in_denominator:
        neg_sim = torch.cat([neg_sim, pos_sim.unsqueeze(1)], dim=1)
    per_sample = -pos_sim + torch.logsumexp(neg_sim, dim=1)
    return per_sample.sum()


def proto_loss_1(features, labels, extractor_protos: PrototypeSet,
                 teacher_image_protos: PrototypeSet, tau: float,
                 include_positive_in_denominator: bool = False) -> torch.Tensor:
    """Alignment to teacher image prototypes against extractor-prototype negatives."""
    return _contrastive(features, labels, teacher_image_protos.vectors,
                        extractor_protos.vectors, tau, include_positive_in_denominator)


def proto_loss_2(features, labels, teacher_text_protos: PrototypeSet, tau: float,
                 include_positive_in_denominator: bool = False) -> torch.Tensor:
    """Alignment to teacher text prototypes; negatives are the other text prototypes."""
    return _contrastive(features, labels, teacher_text_protos.vectors,
                        teacher_text_protos.vectors, tau, include_positive_in_denominator)


def pcl_total(features, labels, extractor_protos, teacher_image_protos,
              teacher_text_protos, tau: float,
              include_positive_in_denominator: bool = False) -> torch.Tensor:
    """Total prototype contrastive loss, summed over the batch."""
    return (
        proto_loss_1(features, labels, extractor_protos, teacher_image_protos,
                     tau, include_positive_in_denominator)
        + proto_loss_2(features, labels, teacher_text_protos, tau,
                       include_positive_in_denominator)
    )


def kt_loss(labels, student_logits: torch.Tensor, teacher_logits: torch.Tensor,
            beta: float) -> torch.Tensor:
    """Cross-entropy plus beta-weighted KL(teacher || student) over logits."""
    if beta < 0:
        raise ValueError("beta must be >= 0")
    labels = torch.as_tensor(labels, dtype=torch.long)
    ce = F.cross_entropy(student_logits, labels)
    if beta == 0:
        return ce
    kl = F.kl_div(F.log_softmax(student_logits, dim=-1),
                  F.softmax(teacher_logits, dim=-1), reduction="batchmean")
    return ce + beta * kl


@dataclass
class PurifyConfig:
    tau: float = 0.07
    beta: float = 1.0
    pcl_epochs: int = 3
    kt_epochs: int = 3
    lr: float = 1e-3
    batch_size: int = 64
    include_positive_in_denominator: bool = False
    prompt_template: str = DEFAULT_PROMPT_TEMPLATE
    seed: int = 0

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.pcl_epochs < 0 or self.kt_epochs < 0:
            raise ValueError("epoch counts must be >= 0")


def _minibatches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield torch.from_numpy(order[i:i + batch_size].copy()).long()


def rectify(params: ModelParams, model: SplitClassifier, images: torch.Tensor,
            labels: torch.Tensor, class_names, teacher,
            config: PurifyConfig) -> tuple[ModelParams, dict]:
    """Retrain the feature extractor with the prototype contrastive loss.

    The classifier is untouched. A trainable linear projection bridges the
    student feature dimension to the teacher embedding dimension and is
    discarded afterwards. Extractor prototypes are recomputed (and detached)
    at the start of every epoch. A non-finite loss aborts the stage: the
    pre-rectification parameters are returned with a flag.
    """
    info = {"pcl_losses": [], "flags": []}
    if config.pcl_epochs == 0:
        return params, info
    model = params.load_into(model)
    images = torch.as_tensor(images, dtype=torch.float32)
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    num_classes = len(class_names)

    img_protos, txt_protos = teacher_prototypes(teacher, images, labels,
                                                class_names, config.prompt_template)
    with torch.no_grad():
        student_dim = model.features(images[:1]).shape[1]
    teacher_dim = img_protos.vectors.shape[1]
    torch.manual_seed(derive_seed(config.seed, "rectify-proj"))
    # bias keeps embeddings off the origin: a sample whose ReLU features all
    # die would otherwise project to an exact zero and break normalization
    proj = nn.Linear(student_dim, teacher_dim)

    def embed(batch):
        return l2_normalize(proj(model.features(batch)))

    opt = torch.optim.Adam(
        list(model.encoder.parameters()) + list(proj.parameters()), lr=config.lr
    )
    rng = np.random.default_rng(derive_seed(config.seed, "rectify-order"))
    model.train()
    for epoch in range(config.pcl_epochs):
        model.eval()
        ext_protos = extractor_prototypes(embed, images, labels, num_classes)
        model.train()
        epoch_loss, n_seen = 0.0, 0
        for idx in _minibatches(len(images), config.batch_size, rng):
            opt.zero_grad()
            feats = embed(images[idx])
            loss = pcl_total(feats, labels[idx], ext_protos, img_protos, txt_protos,
                             config.tau, config.include_positive_in_denominator)
            loss = loss / len(idx)
            if not torch.isfinite(loss):
                info["flags"].append("purify_aborted_nonfinite")
                return params, info
            loss.backward()
            opt.step()
            epoch_loss += float(loss.detach()) * len(idx)
            n_seen += len(idx)
        info["pcl_losses"].append(epoch_loss / n_seen)
    model.eval()
    out = ModelParams.from_model(model)
    # classifier must pass through bit-identical
    out.classifier = params.clone().classifier
    return out, info


def distill(params: ModelParams, model: SplitClassifier, images: torch.Tensor,
            labels: torch.Tensor, class_names, teacher,
            config: PurifyConfig) -> tuple[ModelParams, dict]:
    """Fine-tune the full model on the server set with the knowledge-transfer loss.

    Teacher logits are computed zero-shot from class prompts once, up front.
    """
    info = {"kt_losses": [], "flags": []}
    if config.kt_epochs == 0:
        return params, info
    model = params.load_into(model)
    images = torch.as_tensor(images, dtype=torch.float32)
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    prompts = class_prompts(class_names, config.prompt_template)
    with torch.no_grad():
        teacher_logits = torch.as_tensor(teacher.class_logits(images, prompts),
                                         dtype=torch.float32)

    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    rng = np.random.default_rng(derive_seed(config.seed, "distill-order"))
    model.train()
    for epoch in range(config.kt_epochs):
        epoch_loss, n_seen = 0.0, 0
        for idx in _minibatches(len(images), config.batch_size, rng):
            opt.zero_grad()
            loss = kt_loss(labels[idx], model(images[idx]), teacher_logits[idx],
                           config.beta)
            if not torch.isfinite(loss):
                info["flags"].append("purify_aborted_nonfinite")
                return params, info
            loss.backward()
            opt.step()
            epoch_loss += float(loss.detach()) * len(idx)
            n_seen += len(idx)
        info["kt_losses"].append(epoch_loss / n_seen)
    model.eval()
    return ModelParams.from_model(model), info


def purify(params: ModelParams, model: SplitClassifier, server_dataset, teacher,
           config: PurifyConfig, enable_fr: bool = True,
           enable_kd: bool = True) -> tuple[ModelParams, dict]:
    """Rectification followed by distillation; either stage can be ablated."""
    images, labels = server_dataset.to_tensors()
    class_names = server_dataset.manifest.get("classes")
    if class_names is None:
        raise ValueError("server dataset manifest lacks class names")
    info = {"pcl_losses": [], "kt_losses": [], "flags": []}
    if enable_fr:
        params, fr_info = rectify(params, model, images, labels, class_names,
                                  teacher, config)
        info["pcl_losses"] = fr_info["pcl_losses"]
        info["flags"] += fr_info["flags"]
    if enable_kd and not info["flags"]:
        params, kd_info = distill(params, model, images, labels, class_names,
                                  teacher, config)
        info["kt_losses"] = kd_info["kt_losses"]
        info["flags"] += kd_info["flags"]
    return params, info
