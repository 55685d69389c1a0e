"""Command-line entry points: run, build-dataset, ablate, sweep.

Each subcommand consumes one experiment config file; ablations and sweeps
derive per-cell configs (never mutating the base) and run them as
independent experiments, then merge the per-cell summaries.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ExperimentConfig, load_config, save_config
from .data import CIFAR10_CLASSES, DatasetUnavailableError, load_dataset
from .metrics import write_summary

logger = logging.getLogger(__name__)

SWEEP_AXES = {
    "malicious_fraction": ("attack", "malicious_fraction", float),
    "trigger_size": ("attack", "trigger_size", int),
    "poison_ratio": ("attack", "poison_ratio", float),
    "shards_per_client": ("federation", "shards_per_client", int),
}

ABLATION_CELLS = (
    ("none", {"filter_enabled": False, "rectify_enabled": False, "distill_enabled": False}),
    ("no_fr", {"filter_enabled": True, "rectify_enabled": False, "distill_enabled": True}),
    ("no_kd", {"filter_enabled": True, "rectify_enabled": True, "distill_enabled": False}),
    ("full", {"filter_enabled": True, "rectify_enabled": True, "distill_enabled": True}),
)


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, help="experiment config YAML")
    parser.add_argument("--seed", type=int, default=None, help="override config seed")
    parser.add_argument("--out-dir", default=None, help="override output directory")
    parser.add_argument("--device", default=None, help="override torch device")
    det = parser.add_mutually_exclusive_group()
    det.add_argument("--deterministic", dest="deterministic", action="store_true",
                     default=None, help="force deterministic mode")
    det.add_argument("--no-deterministic", dest="deterministic", action="store_false",
                     help="allow nondeterministic kernels")


def _load_with_overrides(args) -> ExperimentConfig:
    config = load_config(args.config)
    updates: dict = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.out_dir is not None:
        updates["out_dir"] = str(args.out_dir)
    if args.device is not None:
        updates["device"] = args.device
    if args.deterministic is not None:
        updates["deterministic"] = args.deterministic
    return config.replace(**updates) if updates else config


def cmd_run(args) -> int:
    from .federation import run_experiment

    config = _load_with_overrides(args)
    result = run_experiment(config)
    row = result.summary_row
    print(f"dataset={row['dataset']} attack={row['attack']} defense={row['defense']} "
          f"ma={row['ma']} asr={row['asr']} hash={row['config_hash']}")
    return 0


def cmd_build_dataset(args) -> int:
    from .seeding import derive_seed
    from .serverdata import build_server_dataset
    from .federation import _resolve_generator, CIFAR10_PIXEL_STATS

    config = _load_with_overrides(args)
    if config.data.name == "cifar10":
        class_names = list(CIFAR10_CLASSES)
        stats = CIFAR10_PIXEL_STATS
    else:
        class_names = list(load_dataset(config.data.name, config.data.root,
                                        "train", seed=config.seed).class_names)
        stats = None
    out = Path(config.out_dir or "runs/server_dataset")
    dataset = build_server_dataset(
        class_names=class_names,
        per_class_count=config.server_data.per_class_count,
        augment_fraction=config.server_data.augment_fraction,
        generator=_resolve_generator(config),
        image_size=config.data.image_size,
        seed=derive_seed(config.seed, "serverdata"),
        n_bands=config.server_data.n_bands,
        sigma_scale=config.server_data.sigma_scale,
        target_stats=stats,
        out_dir=out,
    )
    print(f"wrote {len(dataset)} samples to {out} "
          f"(high_band={dataset.manifest['high_band']})")
    return 0


def _run_cells(base: ExperimentConfig, cells: list[tuple[str, ExperimentConfig]],
               out_root: Path) -> int:
    from .federation import run_experiment

    rows = []
    for name, config in cells:
        logger.info("running cell %s", name)
        result = run_experiment(config)
        rows.append(result.summary_row)
        print(f"[{name}] ma={result.summary_row['ma']} asr={result.summary_row['asr']}")
    write_summary(rows, out_root / "summary.csv")
    print(f"combined summary: {out_root / 'summary.csv'}")
    return 0


def cmd_ablate(args) -> int:
    base = _load_with_overrides(args)
    wanted = set(args.cells.split(",")) if args.cells else {n for n, _ in ABLATION_CELLS}
    unknown = wanted - {n for n, _ in ABLATION_CELLS}
    if unknown:
        raise ValueError(f"unknown ablation cell(s): {sorted(unknown)}")
    out_root = Path(base.out_dir or "runs/ablation")
    cells = []
    for name, flags in ABLATION_CELLS:
        if name not in wanted:
            continue
        cells.append((name, base.replace(defense=dict(flags),
                                         out_dir=str(out_root / name))))
    return _run_cells(base, cells, out_root)


def cmd_sweep(args) -> int:
    base = _load_with_overrides(args)
    if args.axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {args.axis!r}; choose from {sorted(SWEEP_AXES)}")
    section, field_name, cast = SWEEP_AXES[args.axis]
    values = [cast(v) for v in args.values.split(",")]
    out_root = Path(base.out_dir or f"runs/sweep_{args.axis}")
    cells = []
    for value in values:
        name = f"{args.axis}={value}"
        cells.append((name, base.replace(**{
            section: {field_name: value},
            "out_dir": str(out_root / f"{args.axis}_{value}"),
        })))
    return _run_cells(base, cells, out_root)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedpurify",
        description="Federated-learning backdoor attack/defense simulation",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="full experiment: attack + defense + evaluation")
    _add_common(p_run)
    p_run.set_defaults(func=cmd_run)

    p_build = sub.add_parser("build-dataset", help="server-dataset pipeline only")
    _add_common(p_build)
    p_build.set_defaults(func=cmd_build_dataset)

    p_ablate = sub.add_parser("ablate", help="run {none, no_fr, no_kd, full} defense cells")
    _add_common(p_ablate)
    p_ablate.add_argument("--cells", default=None,
                          help="comma list from {none,no_fr,no_kd,full}; default all")
    p_ablate.set_defaults(func=cmd_ablate)

    p_sweep = sub.add_parser("sweep", help="sweep one attack/partition axis")
    _add_common(p_sweep)
    p_sweep.add_argument("--axis", required=True, help=f"one of {sorted(SWEEP_AXES)}")
    p_sweep.add_argument("--values", required=True, help="comma-separated values")
    p_sweep.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        return args.func(args)
    except (ValueError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DatasetUnavailableError as exc:
        print(f"dataset error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
