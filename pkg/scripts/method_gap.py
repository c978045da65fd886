"""Train tiny2 dense, rotate-4, rotate-3 and ai on an MNIST subset and tabulate.

    python3 scripts/method_gap.py --data data/mnist --out results/method_gap.csv
"""
import argparse
import csv
import time

from threadpoolctl import threadpool_limits

from rotconv.accounting import account
from rotconv.data import load_mnist_dir
from rotconv.model import build_network
from rotconv.train import TrainConfig, evaluate, train

RUNS = (("none", 0.0), ("rotate4", 0.0), ("rotate3", 0.0), ("ai", 1e-5))


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--data", required=True, help="directory with the four MNIST IDX files")
    ap.add_argument("--n-train", type=int, default=10_000)
    ap.add_argument("--n-test", type=int, default=2_000)
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    train_set, test_set = load_mnist_dir(args.data, args.n_train, args.n_test)
    rows = [["method", "test_acc", "stored_reals", "stored_ints", "macs", "dense_macs", "seconds"]]
    for method, lam in RUNS:
        t0 = time.perf_counter()
        build = method if method.startswith("rotate") else "none"
        model = build_network("tiny2", method=build, seed=args.seed)
        cfg = TrainConfig(epochs=args.epochs, prune_method=method, lam=lam, seed=args.seed)
        model, _ = train(model, train_set, cfg, test=test_set)
        acc = evaluate(model, test_set)
        rep = account(model, train_set.shape)
        rows.append([method, f"{acc:.4f}", rep.stored_reals, rep.stored_ints, rep.macs, rep.dense_macs,
                     f"{time.perf_counter() - t0:.1f}"])
        print(",".join(map(str, rows[-1])), flush=True)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerows(rows)


if __name__ == "__main__":
    with threadpool_limits(1):
        main()
