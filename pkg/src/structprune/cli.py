"""Command-line entry point: ``structprune <command> [options]``.

Every command writes its artifacts plus a ``manifest.json`` into ``--out``.
``structprune rerun <manifest>`` replays a command from its manifest.

Exit codes: 0 success, 2 usage/configuration error, 3 malformed input file,
4 training diverged, 5 benchmark failure, 6 some requested artifact could
not be produced (e.g. an unreachable parameter budget).
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .accounting import budget_snapshot, count_params
from .arch import (
    BUILTIN_NAMES,
    ArchDescriptor,
    ConfigurationError,
    DescriptorFormatError,
    ProfileVector,
    extract_profile,
    load_builtin,
    make_copycat,
    make_densenet_bc,
    make_resnet,
    make_wrn,
)
from .bench import BenchmarkError, bench_inference, compare, comparison_csv
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import DATA_ROOT_ENV, DataFormatError, balanced_subset, load_cifar10, make_synthetic
from .layers import build_network
from .prune import PruneConfig, prune_and_tune
from .train import TrainConfig, TrainingDivergedError, train, write_epoch_log

log = logging.getLogger("structprune")

MANIFEST_SCHEMA = "structprune.manifest/1"
EXIT_OK, EXIT_USAGE, EXIT_FORMAT, EXIT_DIVERGED, EXIT_BENCH, EXIT_PARTIAL = 0, 2, 3, 4, 5, 6


class UsageError(Exception):
    pass


# -- argument groups -----------------------------------------------------------


def _add_arch_args(p):
    g = p.add_argument_group("architecture")
    g.add_argument("--arch", choices=("wrn", "densenet-bc", "resnet"), help="network family")
    g.add_argument("--descriptor", type=Path, help="descriptor JSON file (instead of --arch)")
    g.add_argument("--depth", type=int, help="depth d (wrn, densenet-bc) or variant 9/18/34 (resnet)")
    g.add_argument("--width", type=float, default=1.0, help="WRN width multiplier w (default 1)")
    g.add_argument("--bottleneck", type=float, default=1.0, help="intermediate multiplier z in (0, 1] (default 1)")
    g.add_argument("--growth-rate", type=int, default=12, help="DenseNet growth rate k (default 12)")
    g.add_argument("--transition-rate", type=float, default=0.5, help="DenseNet compression (default 0.5)")
    g.add_argument("--classes", type=int, help="class count (default: dataset's, or 1000 for resnet)")
    g.add_argument("--resolution", type=int, help="input resolution (default 32, or 224 for resnet)")


def _add_data_args(p):
    g = p.add_argument_group("data")
    g.add_argument("--data", choices=("synthetic", "cifar10"), default="synthetic", help="dataset (default synthetic)")
    g.add_argument("--data-root", type=Path, help=f"CIFAR-10 binary directory (default ${DATA_ROOT_ENV})")
    g.add_argument("--subset", type=int, help="class-balanced CIFAR-10 training subset size")
    g.add_argument("--per-class", type=int, default=100, help="synthetic training images per class (default 100)")
    g.add_argument("--test-per-class", type=int, help="synthetic test images per class (default per-class/5)")
    g.add_argument("--data-seed", type=int, default=0, help="seed for synthetic data / subsets (default 0)")


def _add_train_args(p):
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int, default=30, help="default 30")
    g.add_argument("--batch-size", type=int, default=64, help="default 64")
    g.add_argument("--lr", type=float, default=0.1, help="base learning rate (default 0.1)")
    g.add_argument("--milestones", type=int, nargs="*", help="LR milestone epochs (default 50%% and 75%% of --epochs)")
    g.add_argument("--lr-decay", type=float, default=0.2, help="LR factor at each milestone (default 0.2)")
    g.add_argument("--momentum", type=float, default=0.9, help="default 0.9")
    g.add_argument("--weight-decay", type=float, default=5e-4, help="default 5e-4 (never applied to batch-norm)")
    g.add_argument("--no-augment", action="store_true", help="disable crop/flip augmentation")


def _add_common(p):
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0, help="run seed (default 0)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="structprune", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a network from scratch")
    _add_common(p)
    _add_arch_args(p)
    _add_data_args(p)
    _add_train_args(p)

    p = sub.add_parser("prune", help="prune-and-tune a trained checkpoint")
    _add_common(p)
    _add_data_args(p)
    p.add_argument("--checkpoint", type=Path, required=True, help="trained checkpoint directory")
    p.add_argument("--method", choices=("l1", "fisher"), default="fisher", help="saliency (default fisher)")
    p.add_argument("--events", type=int, help="number of channels to remove")
    p.add_argument("--target-params", type=int, help="stop once params <= this")
    p.add_argument("--target-fraction", type=float, help="stop after removing this fraction of intermediate channels")
    p.add_argument("--budget", type=int, action="append", default=[],
                   help="parameter budget to snapshot (repeatable); emits profile + compacted checkpoint")
    p.add_argument("--steps-between-prunes", type=int, default=100, help="fine-tune steps per removal (default 100)")
    p.add_argument("--fine-tune-lr", type=float,
                   help="default: lowest LR of the checkpoint's training schedule, else 0.004")
    p.add_argument("--batch-size", type=int, default=64, help="default 64")
    p.add_argument("--no-augment", action="store_true")

    p = sub.add_parser("scratch", help="train the architecture of a profile from scratch")
    _add_common(p)
    p.add_argument("--profile", type=Path, required=True, help="profile JSON written by `prune`")
    _add_data_args(p)
    _add_train_args(p)

    p = sub.add_parser("copycat", help="scale a profile into a family of descriptors")
    _add_common(p)
    p.add_argument("--profile", type=Path, required=True)
    p.add_argument("--alpha", type=float, nargs="+", required=True, help="scale factors, e.g. 0.25 0.5 1 2")

    p = sub.add_parser("count", help="parameter and MAC counts of a descriptor")
    _add_common(p)
    p.add_argument("--builtin", help=f"one of: {', '.join(BUILTIN_NAMES)}")
    p.add_argument("--descriptor", type=Path)
    p.add_argument("--resolution", type=int, help="override the descriptor resolution")
    p.add_argument("--classes", type=int, help="override the class count")

    p = sub.add_parser("bench", help="single-image inference latency")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, action="append", default=[], help="checkpoint to benchmark (repeatable)")
    p.add_argument("--builtin", action="append", default=[], help="builtin name to benchmark at random init")
    p.add_argument("--descriptor", type=Path, action="append", default=[], help="descriptor file to benchmark")
    p.add_argument("--compact", action="store_true", help="also benchmark the compacted form of each checkpoint")
    p.add_argument("--resolution", type=int, help="input resolution override")
    p.add_argument("--warmup", type=int, default=5, help="default 5")
    p.add_argument("--samples", type=int, default=20, help="default 20")
    p.add_argument("--parallel-kernels", action="store_true", help="allow multi-threaded BLAS in the timed region")

    p = sub.add_parser("rerun", help="replay a command from its manifest")
    p.add_argument("manifest", type=Path)
    p.add_argument("--out", type=Path, help="output directory override")
    return parser


# -- shared helpers ------------------------------------------------------------------


def _descriptor_from_args(args, classes_default: int) -> ArchDescriptor:
    if args.descriptor is not None:
        desc = ArchDescriptor.from_json(args.descriptor.read_text(encoding="utf-8"))
        if args.resolution:
            desc = replace(desc, resolution=args.resolution)
        return desc
    if args.arch is None:
        raise UsageError("one of --arch or --descriptor is required")
    if args.depth is None:
        raise UsageError("--depth is required with --arch")
    if args.arch == "wrn":
        return make_wrn(args.depth, args.width, args.bottleneck, classes=args.classes or classes_default,
                        resolution=args.resolution or 32)
    if args.arch == "densenet-bc":
        return make_densenet_bc(args.depth, args.growth_rate, args.transition_rate, args.bottleneck,
                                classes=args.classes or classes_default, resolution=args.resolution or 32)
    return make_resnet(args.depth, classes=args.classes or classes_default, resolution=args.resolution or 224)


def _load_data(args):
    if args.data == "cifar10":
        root = args.data_root or os.environ.get(DATA_ROOT_ENV)
        data = load_cifar10(root)
        if args.subset:
            data = balanced_subset(data, args.subset, args.data_seed)
        return data
    return make_synthetic(10, args.per_class, 32, seed=args.data_seed, test_per_class=args.test_per_class)


def _train_config(args) -> TrainConfig:
    milestones = args.milestones
    if milestones is None:
        milestones = sorted({m for m in (args.epochs // 2, (3 * args.epochs) // 4) if 0 < m < args.epochs})
    augment = not args.no_augment
    return TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, milestones=tuple(milestones),
                       lr_decay=args.lr_decay, momentum=args.momentum, weight_decay=args.weight_decay,
                       seed=args.seed, crop=augment, flip=augment)


def _jsonable(value):
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def _artifact_list(out: Path, artifacts) -> list[str]:
    """Relative paths of every written file; directories are expanded."""
    listed = []
    for a in map(Path, artifacts):
        files = sorted(p for p in a.rglob("*") if p.is_file()) if a.is_dir() else [a]
        listed.extend(str(f.relative_to(out)) for f in files)
    return listed


def _write_manifest(out: Path, args, argv, config: dict, artifacts: list, status: str = "ok") -> Path:
    manifest = {
        "schema": MANIFEST_SCHEMA,
        "command": args.command,
        "argv": list(argv),
        "config": _jsonable(config),
        "seed": getattr(args, "seed", None),
        "artifacts": _artifact_list(out, artifacts),
        "status": status,
        "tool_version": __version__,
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(),
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return path


def _train_and_save(args, argv, network, cfg, data, extra_config: dict) -> int:
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    result = train(network, cfg, data)
    ckpt = save_checkpoint(out / "checkpoint", network, optimizer={"type": "sgd", **cfg.to_dict()},
                           meta={"final_error_percent": result.final_error, "train_config": cfg.to_dict()})
    log_path = write_epoch_log(out / "epoch_log.csv", result.log)
    cost = count_params(network.arch)
    config = {**extra_config, "train": cfg.to_dict(), "data": _data_config(args, data),
              "params": cost.params, "macs": cost.macs}
    _write_manifest(out, args, argv, config, [ckpt, log_path])
    print(f"final test error {result.final_error:.2f}%  params {network.num_params()}")
    return EXIT_OK


def _data_config(args, data) -> dict:
    return {"source": data.source, "data_seed": args.data_seed, "splits": data.split_sizes,
            "per_class": args.per_class if data.source == "synthetic" else None, "subset": args.subset}


# -- commands ---------------------------------------------------------------------------


def cmd_train(args, argv) -> int:
    data = _load_data(args)
    desc = _descriptor_from_args(args, classes_default=data.classes)
    if desc.classes != data.classes:
        raise UsageError(f"descriptor has {desc.classes} classes but the dataset has {data.classes}")
    network = build_network(desc, seed=args.seed)
    return _train_and_save(args, argv, network, _train_config(args), data, {"arch": desc.to_dict()})


def cmd_scratch(args, argv) -> int:
    profile = ProfileVector.from_json(args.profile.read_text(encoding="utf-8"))
    data = _load_data(args)
    desc = profile.descriptor()
    network = build_network(desc, seed=args.seed)
    return _train_and_save(args, argv, network, _train_config(args), data,
                           {"arch": desc.to_dict(), "profile": str(args.profile)})


def cmd_prune(args, argv) -> int:
    network, manifest = load_checkpoint(args.checkpoint)
    data = _load_data(args)
    train_cfg = manifest.get("meta", {}).get("train_config")
    lr = args.fine_tune_lr
    if lr is None:
        lr = TrainConfig(**train_cfg).lowest_lr if train_cfg else 0.004
    budgets = sorted(set(args.budget), reverse=True)
    target_params = args.target_params
    if budgets and args.events is None and target_params is None and args.target_fraction is None:
        target_params = budgets[-1]
    cfg = PruneConfig(method=args.method, steps_between_prunes=args.steps_between_prunes, fine_tune_lr=lr,
                      batch_size=args.batch_size, seed=args.seed, crop=not args.no_augment,
                      flip=not args.no_augment, max_events=args.events, target_params=target_params,
                      target_fraction=args.target_fraction)
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    artifacts, written = [], {}

    def on_event(net, entry):
        for b in budgets:
            if b not in written and entry.params <= b:
                profile = extract_profile(net)
                profile = ProfileVector(profile.base, profile.n_m, profile.n_o,
                                        {"budget": b, "event": entry.event, "params": entry.params,
                                         "test_error_percent": entry.test_error_percent, "method": args.method})
                ppath = out / "profiles" / f"profile_{b}.json"
                ppath.parent.mkdir(exist_ok=True)
                ppath.write_text(profile.to_json(), encoding="utf-8")
                cpath = save_checkpoint(out / "checkpoints" / f"budget_{b}", net.compact(),
                                        meta={"budget": b, "event": entry.event})
                written[b] = entry.event
                artifacts.extend([ppath, cpath])

    result = prune_and_tune(network, cfg, data, on_event=on_event)
    traj_path = result.trajectory.write_csv(out / "trajectory.csv")
    final = extract_profile(result.network)
    final_path = out / "profiles" / "final.json"
    final_path.parent.mkdir(exist_ok=True)
    final_path.write_text(final.to_json(), encoding="utf-8")
    artifacts = [traj_path, final_path, *artifacts]

    snapshots = budget_snapshot(result.trajectory, budgets) if budgets else []
    unreachable = [s.budget for s in snapshots if not s.reachable or s.budget not in written]
    for b in unreachable:
        log.warning("budget %d was not reached (final params %d)", b, result.trajectory.entries[-1].params)
        print(f"warning: budget {b} unreachable", file=sys.stderr)
    config = {
        "checkpoint": str(args.checkpoint),
        "prune": {k: v for k, v in vars(cfg).items()},
        "data": _data_config(args, data),
        "budgets": {str(s.budget): {"reachable": s.reachable and s.budget in written, "params": s.params,
                                    "event": None if s.entry is None else s.entry.event} for s in snapshots},
        "loop_status": result.status,
    }
    status = "partial" if unreachable else "ok"
    _write_manifest(out, args, argv, config, artifacts, status)
    print(f"{len(result.trajectory.entries) - 1} events, final params {result.trajectory.entries[-1].params}, "
          f"status {result.status}")
    return EXIT_PARTIAL if unreachable else EXIT_OK


def cmd_copycat(args, argv) -> int:
    profile = ProfileVector.from_json(args.profile.read_text(encoding="utf-8"))
    out: Path = args.out
    (out / "descriptors").mkdir(parents=True, exist_ok=True)
    artifacts = []
    for alpha in args.alpha:
        if alpha <= 0:
            raise UsageError("alphas must be positive")
        desc = make_copycat(profile, alpha)
        cost = count_params(desc)
        d = desc.to_dict()
        d["cost"] = {"alpha": alpha, "params": cost.params, "macs": cost.macs}
        path = out / "descriptors" / f"copycat_a{alpha:g}.json"
        path.write_text(json.dumps(d, indent=2), encoding="utf-8")
        artifacts.append(path)
        print(f"alpha {alpha:g}: params {cost.params}  MACs {cost.macs}")
    _write_manifest(out, args, argv, {"profile": str(args.profile), "alphas": args.alpha}, artifacts)
    return EXIT_OK


def _count_descriptor(args) -> ArchDescriptor:
    if (args.builtin is None) == (args.descriptor is None):
        raise UsageError("give exactly one of --builtin or --descriptor")
    if args.builtin is not None:
        desc = load_builtin(args.builtin)
    else:
        desc = ArchDescriptor.from_json(args.descriptor.read_text(encoding="utf-8"))
    changes = {}
    if args.resolution:
        changes["resolution"] = args.resolution
    if args.classes:
        changes["classes"] = args.classes
    return replace(desc, **changes) if changes else desc


def cmd_count(args, argv) -> int:
    desc = _count_descriptor(args)
    report = count_params(desc)
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"cost_{desc.name or desc.family}.json"
    path.write_text(report.to_json(), encoding="utf-8")
    _write_manifest(out, args, argv, {"descriptor": desc.to_dict()}, [path])
    print(f"{desc.name}: params {report.params} ({report.params / 1e6:.2f}M)  "
          f"MACs {report.macs} ({report.macs / 1e9:.3f}G) @ {desc.resolution}px")
    return EXIT_OK


def _checkpoint_id(path: Path) -> str:
    path = path.resolve()
    return path.parent.name if path.name == "checkpoint" else path.name


def cmd_bench(args, argv) -> int:
    targets = []
    for ck in args.checkpoint:
        net, _ = load_checkpoint(ck)
        name = _checkpoint_id(ck)
        targets.append((f"{name}-masked" if args.compact else name, net))
        if args.compact:
            targets.append((f"{name}-compact", net.compact()))
    for name in args.builtin:
        targets.append((name, build_network(load_builtin(name), seed=args.seed)))
    for path in args.descriptor:
        desc = ArchDescriptor.from_json(path.read_text(encoding="utf-8"))
        targets.append((desc.name or path.stem, build_network(desc, seed=args.seed)))
    if not targets:
        raise UsageError("nothing to benchmark: pass --checkpoint, --builtin or --descriptor")
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    reports, artifacts = [], []
    for name, net in targets:
        shape = None
        if args.resolution:
            shape = (1, 3, args.resolution, args.resolution)
        rep = bench_inference(net, shape, args.warmup, args.samples, network_id=name,
                              parallel_kernels=args.parallel_kernels, seed=args.seed)
        path = out / f"bench_{name}.json"
        path.write_text(rep.to_json(), encoding="utf-8")
        reports.append(rep)
        artifacts.append(path)
        print(f"{name}: median {rep.median_latency_s * 1e3:.2f} ms  IQR {rep.iqr_s * 1e3:.2f} ms  "
              f"{rep.throughput / 1e9:.2f} GMAC/s")
    if len(reports) >= 2:
        errors = {}
        for ck in args.checkpoint:
            meta = json.loads((ck / "manifest.json").read_text()).get("meta", {})
            if "final_error_percent" in meta:
                for suffix in ("", "-masked", "-compact"):
                    errors[_checkpoint_id(ck) + suffix] = meta["final_error_percent"]
        path = out / "comparison.csv"
        path.write_text(comparison_csv(compare(reports, errors)), encoding="utf-8")
        artifacts.append(path)
    _write_manifest(out, args, argv, {"warmup": args.warmup, "samples": args.samples,
                                      "parallel_kernels": args.parallel_kernels}, artifacts)
    return EXIT_OK


def cmd_rerun(args, argv) -> int:
    manifest = json.loads(args.manifest.read_text(encoding="utf-8"))
    if manifest.get("schema") != MANIFEST_SCHEMA:
        raise DataFormatError(f"{args.manifest} is not a run manifest")
    replay = list(manifest["argv"])
    if args.out is not None:
        i = replay.index("--out")
        replay[i + 1] = str(args.out)
    return main(replay)


COMMANDS = {
    "train": cmd_train,
    "prune": cmd_prune,
    "scratch": cmd_scratch,
    "copycat": cmd_copycat,
    "count": cmd_count,
    "bench": cmd_bench,
    "rerun": cmd_rerun,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return COMMANDS[args.command](args, argv)
    except (DescriptorFormatError, DataFormatError, CheckpointError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"structprune {args.command}: format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (UsageError, ConfigurationError) as exc:
        print(f"structprune {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDivergedError as exc:
        print(f"structprune {args.command}: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except BenchmarkError as exc:
        print(f"structprune {args.command}: benchmark failed: {exc}", file=sys.stderr)
        return EXIT_BENCH


if __name__ == "__main__":
    sys.exit(main())
