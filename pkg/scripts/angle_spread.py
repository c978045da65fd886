"""Learn RotateConv angles on synthetic line images and dump angle histograms.

Writes ``<out>/hist_input_channels.csv`` and ``<out>/hist_output_channels.csv``
for the first prunable layer, before and after training.
"""
import argparse
import os

import numpy as np
from threadpoolctl import threadpool_limits

from rotconv.data import synth_angles
from rotconv.model import build_network
from rotconv.train import TrainConfig, angle_histogram, evaluate, train, write_histogram_csv


def dump(layer, out, tag, bins):
    for axis in ("input_channels", "output_channels"):
        edges, counts = angle_histogram(layer, axis, 0, bins)
        write_histogram_csv(os.path.join(out, f"hist_{axis}_{tag}.csv"), edges, counts)
        print(f"{tag:>7} {axis:<16} occupied {np.count_nonzero(counts):2d}/{bins}  {counts.tolist()}")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n-train", type=int, default=5000)
    ap.add_argument("--n-test", type=int, default=1000)
    ap.add_argument("--buckets", type=int, default=4)
    ap.add_argument("--epochs", type=int, default=5)
    ap.add_argument("--lr-theta", type=float, default=None)
    ap.add_argument("--bins", type=int, default=18)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="results/angles")
    args = ap.parse_args()
    os.makedirs(args.out, exist_ok=True)

    train_set = synth_angles(args.seed, args.n_train, args.buckets)
    test_set = synth_angles(args.seed + 1, args.n_test, args.buckets, split="test")
    model = build_network("tiny2", in_hw=16, num_classes=args.buckets, method="rotate4", seed=args.seed)
    dump(model.conv(1), args.out, "initial", args.bins)
    cfg = TrainConfig(epochs=args.epochs, prune_method="rotate4", seed=args.seed, lr_theta=args.lr_theta)
    model, log = train(model, train_set, cfg, test=test_set)
    log.write_csv(os.path.join(args.out, "metrics.csv"))
    dump(model.conv(1), args.out, "trained", args.bins)
    print(f"accuracy={evaluate(model, test_set):.4f}")


if __name__ == "__main__":
    with threadpool_limits(1):
        main()
