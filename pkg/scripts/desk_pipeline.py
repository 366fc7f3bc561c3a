"""Train WRN-16-1 at desk scale, Fisher-prune it, and compare with scratch and reduced networks.

Writes trajectory.csv (error vs params while pruning) and comparison.csv
(pruned curve plus scratch-trained and param-matched reduced networks) to --out.

    python3 scripts/desk_pipeline.py --out runs/desk
    python3 scripts/desk_pipeline.py --out runs/desk-cifar --cifar-root ~/data/cifar-10-batches-bin
"""

import argparse
import json
import logging
from dataclasses import asdict
from pathlib import Path

from structprune.checkpoint import save_checkpoint
from structprune.desk import DeskConfig, desk_data, prune_desk, run_comparison, train_desk, write_comparison


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--epochs", type=int, default=6)
    p.add_argument("--milestones", type=int, nargs="*", default=[3, 5])
    p.add_argument("--steps-between-prunes", type=int, default=16)
    p.add_argument("--prune-fraction", type=float, default=0.3)
    p.add_argument("--cifar-root", help="CIFAR-10 binary directory; synthetic data if omitted")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--skip-comparison", action="store_true", help="stop after pruning")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = DeskConfig(epochs=args.epochs, milestones=tuple(args.milestones), prune_fraction=args.prune_fraction,
                     steps_between_prunes=args.steps_between_prunes, seed=args.seed, cifar_root=args.cifar_root)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "config.json").write_text(json.dumps(asdict(cfg), indent=2))
    data = desk_data(cfg)
    trained = train_desk(cfg, data)
    save_checkpoint(args.out / "trained", trained.network, meta={"final_error_percent": trained.final_error})
    logging.info("trained: %.2f%% test error", trained.final_error)

    res = prune_desk(trained.network, cfg, data)
    res.trajectory.write_csv(args.out / "trajectory.csv")
    save_checkpoint(args.out / "pruned", res.network.compact())
    last = res.trajectory.entries[-1]
    logging.info("pruned %d channels: %d params, %.2f%% error", last.channels_pruned, last.params,
                 last.test_error_percent)
    if not args.skip_comparison:
        write_comparison(args.out / "comparison.csv", run_comparison(cfg, data, res))


if __name__ == "__main__":
    main()
