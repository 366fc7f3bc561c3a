"""Rank agreement between Fisher saliency and the loss change from silencing each channel.

Loads a checkpoint (e.g. the ``trained`` one from desk_pipeline.py), computes
eval-mode Fisher saliency on held-out images, then zeroes each intermediate
channel in turn and measures the held-out loss increase. Writes one CSV row
per channel and prints the Spearman correlation.
"""

import argparse
import csv
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from structprune.checkpoint import load_checkpoint
from structprune.data import make_synthetic
from structprune.desk import held_out_fisher
from structprune.train import mean_loss


def loss_increase(net, x, y, block, channel, base):
    blk = net.blocks[block]
    bn = blk.bn_mid if hasattr(blk, "bn_mid") else blk.bn2
    saved = bn.gamma.data[channel], bn.beta.data[channel]
    bn.gamma.data[channel] = bn.beta.data[channel] = 0
    delta = mean_loss(net, x, y) - base
    bn.gamma.data[channel], bn.beta.data[channel] = saved
    return delta


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="CSV path")
    p.add_argument("--images", type=int, default=500, help="held-out images (synthetic test split)")
    p.add_argument("--per-block", type=int, default=0, help="channels sampled per block (0 = all)")
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    net, _ = load_checkpoint(args.checkpoint)
    data = make_synthetic(10, 500, net.arch.resolution, seed=args.seed, test_per_class=100)
    x, y = data.test_x[: args.images], data.test_y[: args.images]
    fisher = {(r.block, r.channel): r.delta_c for r in held_out_fisher(net, x, y)}
    rng = np.random.default_rng(args.seed)
    base = mean_loss(net, x, y)
    rows = []
    for b, blk in enumerate(net.blocks):
        chans = blk.mask.active_indices()
        if args.per_block:
            chans = sorted(rng.choice(chans, min(args.per_block, len(chans)), replace=False))
        for c in chans:
            rows.append((b, int(c), fisher[(b, int(c))], loss_increase(net, x, y, b, int(c), base)))
    args.out.parent.mkdir(parents=True, exist_ok=True)
    with args.out.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("block", "channel", "fisher_delta", "measured_loss_increase"))
        w.writerows(rows)
    rho = spearmanr([r[2] for r in rows], [r[3] for r in rows]).statistic
    print(f"Spearman {rho:.3f} over {len(rows)} channels")


if __name__ == "__main__":
    main()
