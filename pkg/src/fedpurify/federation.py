"""Federated simulation core: local training, weighted aggregation, round loop.

Hook order within a round is fixed: poison -> local_train -> (filter) ->
aggregate -> (rectify) -> (distill) -> evaluate. Updates are full parameter
sets, not deltas; aggregation weights are client sample counts. All
stochastic stages draw from seeds derived off the experiment seed, and
client updates are always summed in ascending client-id order so results do
not depend on submission order.
"""

from __future__ import annotations

import logging
import math
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .attacks import AttackPlan, afa_update, default_trigger, layer_attack_update, poison_client_data
from .config import ExperimentConfig, save_config, utcnow, write_manifest
from .data import ClientState, load_dataset, make_longtail, partition_pathological, stratified_subset
from .filtering import UpdateVector, filter_updates
from .metrics import (RoundReport, attack_success_rate, export_embeddings,
                      main_accuracy, write_reports, write_summary)
from .models import ModelParams, build_model, flatten_params, save_checkpoint
from .purification import PurifyConfig, purify
from .seeding import derive_seed, enable_determinism, set_seed
from .serverdata import CachedGenerator, ProceduralGenerator, ServerDataset, build_server_dataset, generator_from_env
from .teachers import make_teacher

logger = logging.getLogger(__name__)

CIFAR10_PIXEL_STATS = (
    np.array([0.4914, 0.4822, 0.4465]),
    np.array([0.2470, 0.2435, 0.2616]),
)


class TrainingDiverged(RuntimeError):
    """Raised when a local optimization produces a non-finite loss."""


@dataclass
class ClientUpdate:
    """Full parameters returned by one client for one round."""

    client_id: int
    params: ModelParams
    sample_count: int

    def __post_init__(self):
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")


def aggregate(updates: list[ClientUpdate], selected=None) -> ModelParams:
    """Sample-count-weighted mean of the selected clients' parameters.

    Every tensor becomes sum_i (D_i / D_S) * theta_i over the selected set S.
    Accumulation runs in float64 over clients sorted by id, then casts back
    to each tensor's original dtype (integer buffers are rounded).
    """
    if not updates:
        raise ValueError("no updates to aggregate")
    by_id = {u.client_id: u for u in updates}
    if len(by_id) != len(updates):
        raise ValueError("duplicate client ids in updates")
    if selected is None:
        chosen = sorted(by_id)
    else:
        chosen = sorted(set(selected))
        missing = [c for c in chosen if c not in by_id]
        if missing:
            raise KeyError(f"selected clients missing updates: {missing}")
    if not chosen:
        raise ValueError("selected client set is empty")

    template = by_id[chosen[0]].params
    total = float(sum(by_id[c].sample_count for c in chosen))
    acc = OrderedDict((name, torch.zeros(t.shape, dtype=torch.float64))
                      for name, t in template.items())
    for cid in chosen:
        update = by_id[cid]
        if not update.params.same_structure(template):
            raise ValueError(f"client {cid} update has incompatible structure")
        weight = update.sample_count / total
        for name, tensor in update.params.items():
            acc[name] += weight * tensor.to(torch.float64)

    enc: "OrderedDict[str, torch.Tensor]" = OrderedDict()
    head: "OrderedDict[str, torch.Tensor]" = OrderedDict()
    for name, tensor in template.items():
        merged = acc[name]
        if not torch.is_floating_point(tensor):
            merged = merged.round()
        out = merged.to(tensor.dtype)
        part, key = name.split(".", 1)
        (enc if part == "encoder" else head)[key] = out
    return ModelParams(feature_extractor=enc, classifier=head)


def _minibatches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield torch.from_numpy(order[i:i + batch_size].copy()).long()


def local_train(params: ModelParams, model, images: torch.Tensor,
                labels: torch.Tensor, epochs: int, lr: float, batch_size: int,
                seed: int, momentum: float = 0.9) -> tuple[ModelParams, float]:
    """One client's local SGD pass starting from the given parameters.

    Returns the updated full parameters and the mean loss of the last epoch.
    Deterministic under a fixed seed; a non-finite loss raises
    `TrainingDiverged` so the orchestrator can abort the round.
    """
    if len(images) == 0:
        raise ValueError("client dataset is empty")
    params.validate_finite()
    model = params.load_into(model)
    model.train()
    opt = torch.optim.SGD(model.parameters(), lr=lr, momentum=momentum)
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    rng = np.random.default_rng(seed)
    mean_loss = 0.0
    for _ in range(max(1, epochs)):
        total, seen = 0.0, 0
        for idx in _minibatches(len(images), batch_size, rng):
            opt.zero_grad()
            loss = F.cross_entropy(model(images[idx]), labels[idx])
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite local loss (seed={seed})")
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
            seen += len(idx)
        mean_loss = total / seen
    model.eval()
    return ModelParams.from_model(model), mean_loss


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    reports: list[RoundReport]
    summary_row: dict
    final_params: ModelParams
    out_dir: Path | None = None
    malicious_ids: list[int] = field(default_factory=list)

    @property
    def ma(self) -> float:
        return float(self.summary_row["ma"])

    @property
    def asr(self) -> float:
        return float(self.summary_row["asr"])


def _resolve_generator(config: ExperimentConfig):
    sd = config.server_data
    if sd.generator == "procedural":
        gen = ProceduralGenerator(base_seed=derive_seed(config.seed, "procgen"))
    elif sd.generator == "env":
        gen = generator_from_env()
        if gen is None:
            logger.warning("no generator endpoint configured; using procedural fallback")
            gen = ProceduralGenerator(base_seed=derive_seed(config.seed, "procgen"))
    elif sd.generator == "surrogate":
        # Held-out labeled pool drawn from the dataset's own generative
        # process, disjoint from both client train and test draws. Stands in
        # for text-to-image synthesis when the classes are themselves
        # synthetic; real datasets have no such process to sample.
        if config.data.name != "synthetic10":
            raise ValueError(
                "surrogate generator requires a synthetic dataset; "
                "use 'procedural' or 'env' instead"
            )
        from .data import make_synthetic10
        from .serverdata import SurrogatePoolGenerator

        pool = make_synthetic10(
            n_samples=10 * max(64, config.server_data.per_class_count * 4),
            seed=derive_seed(config.seed, "server-pool"),
            image_size=config.data.image_size,
        )
        gen = SurrogatePoolGenerator(pool.images, pool.labels)
    else:
        raise ValueError(f"unknown server_data.generator {sd.generator!r}")
    if sd.cache_dir:
        gen = CachedGenerator(gen, sd.cache_dir)
    return gen


def _default_layer_names(params: ModelParams) -> list[str]:
    return [name for name in params.layer_names() if name.startswith("head.")]


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    """Run one full experiment cell and (optionally) persist its artifacts."""
    started = utcnow()
    if config.deterministic:
        enable_determinism()
    set_seed(derive_seed(config.seed, "init"))

    data_cfg, fed, attack, defense = config.data, config.federation, config.attack, config.defense
    train = load_dataset(data_cfg.name, data_cfg.root, "train", seed=config.seed)
    test = load_dataset(data_cfg.name, data_cfg.root, "test", seed=config.seed)
    if data_cfg.longtail_factor and data_cfg.longtail_factor > 1:
        keep = make_longtail(train.labels, data_cfg.longtail_factor,
                             seed=derive_seed(config.seed, "longtail"))
        train = train.subset(keep)
    if data_cfg.max_train_images and data_cfg.max_train_images < len(train):
        train = train.subset(stratified_subset(train.labels, data_cfg.max_train_images,
                                               derive_seed(config.seed, "train-subset")))
    if data_cfg.max_test_images and data_cfg.max_test_images < len(test):
        test = test.subset(stratified_subset(test.labels, data_cfg.max_test_images,
                                             derive_seed(config.seed, "test-subset")))
    num_classes = train.num_classes
    train_x, train_y = train.to_tensors()
    test_x, test_y = test.to_tensors()
    image_shape = tuple(train_x.shape[1:])

    partitions = partition_pathological(
        train.labels, fed.n_clients, fed.shards_per_client,
        seed=derive_seed(config.seed, "partition"),
        drop_remainder=data_cfg.drop_remainder,
    )

    n_mal = 0
    if attack.enabled and attack.malicious_fraction > 0:
        n_mal = min(int(round(attack.malicious_fraction * fed.n_clients)),
                    (fed.n_clients - 1) // 2)
    mal_rng = np.random.default_rng(derive_seed(config.seed, "malicious"))
    malicious_ids = set(
        int(i) for i in mal_rng.choice(fed.n_clients, size=n_mal, replace=False)
    )
    clients = [
        ClientState(cid, partitions[cid], cid in malicious_ids, len(partitions[cid]))
        for cid in range(fed.n_clients)
    ]

    model = build_model(config.backbone, num_classes,
                        seed=derive_seed(config.seed, "model-init"))
    global_params = ModelParams.from_model(model)

    plan = None
    if attack.enabled:
        spec = default_trigger(
            image_shape,
            size=(attack.trigger_size, attack.trigger_size),
            target_label=attack.target_label,
            poison_ratio=attack.poison_ratio,
            mode=attack.mode,
            value=attack.trigger_value,
            position=tuple(attack.position) if attack.position else None,
        )
        plan = AttackPlan(
            spec=spec,
            dba_parts=attack.dba_parts,
            layer_names=attack.layer_names or _default_layer_names(global_params),
            afa_scale=attack.afa_scale,
        )

    # Prepare per-client tensors once; poisoning is a static property of a
    # malicious client's local data. Layer-mode attackers also keep a clean
    # copy to produce the benign carrier update.
    client_data: dict[int, tuple[torch.Tensor, torch.Tensor]] = {}
    clean_data: dict[int, tuple[torch.Tensor, torch.Tensor]] = {}
    malicious_rank = {cid: r for r, cid in enumerate(sorted(malicious_ids))}
    for client in clients:
        idx = torch.from_numpy(client.dataset_indices)
        x, y = train_x[idx], train_y[idx]
        if client.is_malicious and plan is not None:
            trig = plan.trigger_for_client(malicious_rank[client.client_id])
            if plan.needs_benign_update():
                clean_data[client.client_id] = (x, y)
            x, y, _ = poison_client_data(
                x, y, trig, seed=derive_seed(config.seed, "poison", client.client_id)
            )
        client_data[client.client_id] = (x, y)

    server_ds = None
    teacher = None
    if defense.rectify_enabled or defense.distill_enabled:
        stats = CIFAR10_PIXEL_STATS if data_cfg.name == "cifar10" else None
        server_ds = build_server_dataset(
            class_names=list(train.class_names),
            per_class_count=config.server_data.per_class_count,
            augment_fraction=config.server_data.augment_fraction,
            generator=_resolve_generator(config),
            image_size=data_cfg.image_size,
            seed=derive_seed(config.seed, "serverdata"),
            n_bands=config.server_data.n_bands,
            sigma_scale=config.server_data.sigma_scale,
            target_stats=stats,
        )
        calibration = server_ds.to_tensors() if config.teacher.name == "stub" else None
        teacher = make_teacher(
            config.teacher.name, list(train.class_names), seed=config.seed,
            device=config.device, calibration=calibration,
            **({"embed_dim": config.teacher.embed_dim,
                "logit_scale": config.teacher.logit_scale}
               if config.teacher.name == "stub"
               else {"model_name": config.teacher.model_name}),
        )

    out_dir = Path(config.out_dir) if config.out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)

    reports: list[RoundReport] = []
    last_ma, last_asr = 0.0, 0.0
    part_rng = np.random.default_rng(derive_seed(config.seed, "participation"))
    for rnd in range(fed.rounds):
        t0 = time.monotonic()
        flags: list[str] = []
        losses: dict[str, float] = {}
        if fed.participation < 1.0:
            k = max(1, math.ceil(fed.participation * fed.n_clients))
            participating = sorted(int(i) for i in
                                   part_rng.choice(fed.n_clients, size=k, replace=False))
        else:
            participating = list(range(fed.n_clients))

        updates: list[ClientUpdate] = []
        try:
            client_losses = []
            for cid in participating:
                x, y = client_data[cid]
                params_i, loss_i = local_train(
                    global_params, model, x, y, fed.local_epochs, fed.lr,
                    fed.batch_size, seed=derive_seed(config.seed, "train", rnd, cid),
                    momentum=fed.momentum,
                )
                client = clients[cid]
                if client.is_malicious and plan is not None:
                    if plan.spec.mode == "layer":
                        bx, by = clean_data[cid]
                        benign_i, _ = local_train(
                            global_params, model, bx, by, fed.local_epochs, fed.lr,
                            fed.batch_size,
                            seed=derive_seed(config.seed, "train-benign", rnd, cid),
                            momentum=fed.momentum,
                        )
                        params_i = layer_attack_update(benign_i, params_i, plan.layer_names)
                    elif plan.spec.mode == "afa":
                        params_i = afa_update(params_i, global_params, plan.afa_scale)
                updates.append(ClientUpdate(cid, params_i, len(y)))
                client_losses.append(loss_i)
            losses["local"] = float(np.mean(client_losses))
        except TrainingDiverged as exc:
            logger.error("round %d aborted: %s", rnd, exc)
            reports.append(RoundReport(
                round=rnd, selected_clients=[], ma=last_ma, asr=last_asr,
                losses=losses, wall_time=time.monotonic() - t0,
                flags=["round_aborted:local_train", str(exc)],
            ))
            continue

        if defense.filter_enabled:
            vectors = [
                UpdateVector(u.client_id,
                             flatten_params(u.params.combine(global_params,
                                                             lambda p, g: p - g)))
                for u in updates
            ]
            result = filter_updates(vectors, projection_dim=defense.projection_dim,
                                    min_cluster_size=defense.min_cluster_size)
            selected = result.selected
            flags += result.flags
        else:
            selected = [u.client_id for u in updates]

        new_global = aggregate(updates, selected=selected)

        purify_round = (defense.rectify_enabled or defense.distill_enabled) and \
            ((rnd + 1) % max(1, defense.purify_every) == 0 or rnd == fed.rounds - 1)
        if purify_round:
            pcfg = PurifyConfig(
                tau=defense.tau, beta=defense.beta,
                pcl_epochs=defense.pcl_epochs, kt_epochs=defense.kt_epochs,
                lr=defense.purify_lr, batch_size=defense.purify_batch_size,
                include_positive_in_denominator=defense.include_positive_in_denominator,
                prompt_template=config.teacher.prompt_template,
                seed=derive_seed(config.seed, "purify", rnd),
            )
            new_global, pinfo = purify(new_global, model, server_ds, teacher, pcfg,
                                       enable_fr=defense.rectify_enabled,
                                       enable_kd=defense.distill_enabled)
            flags += pinfo["flags"]
            if pinfo["pcl_losses"]:
                losses["pcl"] = pinfo["pcl_losses"][-1]
            if pinfo["kt_losses"]:
                losses["kt"] = pinfo["kt_losses"][-1]

        global_params = new_global

        evaluate_now = ((rnd + 1) % max(1, config.evaluation.eval_every) == 0
                        or rnd == fed.rounds - 1)
        if evaluate_now:
            eval_model = global_params.load_into(model)
            last_ma = main_accuracy(eval_model, test_x, test_y)
            if plan is not None:
                last_asr = attack_success_rate(eval_model, test_x, test_y, plan.spec)
            else:
                last_asr = 0.0
        else:
            flags.append("metrics_carried")

        reports.append(RoundReport(
            round=rnd, selected_clients=sorted(selected), ma=last_ma, asr=last_asr,
            losses=losses, wall_time=time.monotonic() - t0, flags=flags,
        ))
        logger.info("round %d  ma=%.4f asr=%.4f selected=%d flags=%s",
                    rnd, last_ma, last_asr, len(selected), flags)

        if out_dir and fed.checkpoint_every and (rnd + 1) % fed.checkpoint_every == 0:
            save_checkpoint(global_params, out_dir / f"checkpoint_round{rnd:04d}.npz")

    summary_row = {
        "dataset": data_cfg.name,
        "attack": config.attack_label(),
        "defense": defense.label(),
        "ma": f"{last_ma:.6f}",
        "asr": f"{last_asr:.6f}",
        "seed": config.seed,
        "config_hash": config.config_hash(),
    }

    if out_dir:
        artifacts = {}
        artifacts["reports"] = write_reports(reports, out_dir / "rounds.jsonl")
        artifacts["summary"] = write_summary([summary_row], out_dir / "summary.csv")
        save_checkpoint(global_params, out_dir / "global_final.npz")
        artifacts["checkpoint"] = out_dir / "global_final.npz"
        artifacts["config"] = save_config(config, out_dir / "config.yaml")
        if server_ds is not None:
            artifacts["server_dataset"] = server_ds.save(out_dir / "server_dataset")
        if config.evaluation.export_embeddings and plan is not None:
            artifacts["embeddings"] = export_embeddings(
                global_params.load_into(model), test_x, test_y, plan.spec,
                out_dir / "embeddings.npz",
                trigger_fraction=config.evaluation.trigger_fraction,
                seed=derive_seed(config.seed, "embeddings"),
            )
        write_manifest(config, out_dir, artifacts, started, utcnow())

    return ExperimentResult(config=config, reports=reports, summary_row=summary_row,
                            final_params=global_params, out_dir=out_dir,
                            malicious_ids=sorted(malicious_ids))
