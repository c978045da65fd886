"""Prune tiny3 layer by layer, bottom-up and top-down, fine-tuning after each step.

Uses synthetic line images by default or an MNIST directory via ``--data``.
"""
import argparse
import os

from threadpoolctl import threadpool_limits

from rotconv.data import load_mnist_dir, synth_angles
from rotconv.model import build_network
from rotconv.train import TrainConfig, layer_sweep, train, write_sweep_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--data", default=None, help="MNIST directory (default: synthetic lines)")
    ap.add_argument("--n-train", type=int, default=2000)
    ap.add_argument("--n-test", type=int, default=500)
    ap.add_argument("--method", choices=("rotate4", "rotate3", "ai"), default="rotate4")
    ap.add_argument("--base-epochs", type=int, default=3)
    ap.add_argument("--finetune-epochs", type=int, default=2)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="results/sweep")
    args = ap.parse_args()
    os.makedirs(args.out, exist_ok=True)

    if args.data:
        train_set, test_set = load_mnist_dir(args.data, args.n_train, args.n_test)
    else:
        train_set = synth_angles(args.seed, args.n_train)
        test_set = synth_angles(args.seed + 1, args.n_test, split="test")
    c, h, _ = train_set.shape
    base = build_network("tiny3", in_channels=c, in_hw=h, num_classes=train_set.num_classes, seed=args.seed)
    base, _ = train(base, train_set, TrainConfig(epochs=args.base_epochs, seed=args.seed))
    cfg = TrainConfig(epochs=args.finetune_epochs, prune_method=args.method, seed=args.seed,
                      lam=1e-5 if args.method == "ai" else 0.0)
    for order in ("bottom_up", "top_down"):
        rows = layer_sweep(base, train_set, test_set, cfg, order=order)
        write_sweep_csv(os.path.join(args.out, f"{args.method}_{order}.csv"), rows)
        for r in rows:
            print(order, r["pruned"], r["layers"], f"{r['accuracy']:.4f}", r["stored_reals"])


if __name__ == "__main__":
    with threadpool_limits(1):
        main()
