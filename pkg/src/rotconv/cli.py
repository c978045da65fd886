"""Command-line front end: train, prune, eval, inspect.

Exit codes: 0 ok, 2 usage or configuration error, 3 data error,
4 numeric failure.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import logging
import os
import sys

from threadpoolctl import threadpool_limits

from . import checkpoint
from .accounting import account
from .data import DataFormatError, load_cifar10_dir, load_mnist_dir, synth_angles
from .model import NETWORKS, build_network, resolve_layers
from .nn import ShapeError
from .prune import PruneError, prune_layers
from .rotate import RotateConfig, RotateConv2d
from .train import (TrainConfig, TrainingDiverged, angle_histogram, evaluate, train,
                    write_histogram_csv)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("rotconv")


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


def _int(lo=None, hi=None):
    def conv(s):
        v = int(s)
        if (lo is not None and v < lo) or (hi is not None and v > hi):
            raise ValueError(f"{v} outside [{lo}, {hi}]")
        return v
    return conv


def _float(lo=None, hi=None, open_lo=False):
    def conv(s):
        v = float(s)
        if lo is not None and (v <= lo if open_lo else v < lo):
            raise ValueError(f"{v} below {'(' if open_lo else '['}{lo}")
        if hi is not None and v > hi:
            raise ValueError(f"{v} above {hi}")
        return v
    return conv


def _choice(*options):
    def conv(s):
        if s not in options:
            raise ValueError(f"{s!r} not one of {options}")
        return s
    return conv


def _floats(s):
    return tuple(float(t) for t in s.split(",") if t.strip())


def _opt_float(s):
    return None if s.strip().lower() in ("", "none") else _float(0.0)(s)


# section -> key -> (parser, default)
SCHEMA = {
    "model": {
        "name": (_choice(*NETWORKS), "tiny2"),
        "dataset": (_choice("mnist", "cifar10", "synth_angles"), "mnist"),
        "n_train": (_int(1), 10000),
        "n_test": (_int(1), 2000),
        "num_buckets": (_int(1), 4),
    },
    "train": {
        "epochs": (_int(0), 10),
        "batch_size": (_int(1), 64),
        "lr": (_float(0.0, open_lo=True), 0.01),
        "milestones": (_floats, (0.5, 0.75)),
        "momentum": (_float(0.0, 0.999), 0.9),
        "weight_decay": (_float(0.0), 1e-4),
        "lam": (_float(0.0), 0.0),
        "seed": (_int(0), 0),
        "lr_theta": (_opt_float, None),
    },
    "prune": {
        "method": (_choice("none", "rotate4", "rotate3", "ai"), "none"),
        "layers": (str, "all-but-first"),
        "k": (_int(1, 9), 3),
        "threshold": (_float(0.0), 0.001),
        "eps": (_float(0.0, open_lo=True), 5.0),
        "angle_init": (_choice("uniform_random", "fixed_list"), "uniform_random"),
        "fixed_angles": (_floats, ()),
    },
}


def load_config(path: str) -> dict:
    """Parse and range-check an INI run configuration; unknown keys are errors."""
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    cp = configparser.ConfigParser()
    try:
        cp.read(path)
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e}") from e
    out = {sec: {k: d for k, (_, d) in keys.items()} for sec, keys in SCHEMA.items()}
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"{path}: unknown section [{sec}]")
        for key, raw in cp.items(sec):
            if key not in SCHEMA[sec]:
                raise ConfigError(f"{path}: unknown key {key!r} in [{sec}]")
            parse = SCHEMA[sec][key][0]
            try:
                out[sec][key] = parse(raw)
            except ValueError as e:
                raise ConfigError(f"{path}: [{sec}] {key} = {raw!r}: {e}") from e
    try:
        train_config(out)
        rotate_config(out)
    except ValueError as e:
        raise ConfigError(f"{path}: {e}") from e
    return out


def train_config(cfg: dict) -> TrainConfig:
    t, p = cfg["train"], cfg["prune"]
    return TrainConfig(epochs=t["epochs"], batch_size=t["batch_size"], lr=t["lr"],
                       milestones=tuple(t["milestones"]), momentum=t["momentum"],
                       weight_decay=t["weight_decay"], lam=t["lam"], seed=t["seed"],
                       prune_method=p["method"], layers=p["layers"], k=p["k"],
                       threshold=p["threshold"], eps=p["eps"], lr_theta=t["lr_theta"])


def rotate_config(cfg: dict) -> RotateConfig:
    p = cfg["prune"]
    return RotateConfig(eps=p["eps"], lr_theta=cfg["train"]["lr_theta"], angle_init=p["angle_init"],
                        fixed_angles=tuple(p["fixed_angles"]) or None)


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ",".join(repr(x) for x in v)
    if v is None:
        return "none"
    return str(v)


def write_config(cfg: dict, path: str) -> None:
    cp = configparser.ConfigParser()
    for sec, keys in cfg.items():
        cp[sec] = {k: _fmt(v) for k, v in keys.items()}
    with open(path, "w") as fh:
        cp.write(fh)


def load_data(source: str | None, dataset: str | None = None, n_train=None, n_test=None, num_buckets=4,
              seed: int = 0):
    """Resolve ``--data`` into ``(train, test)``.

    ``source`` is a directory of MNIST IDX files or CIFAR-10 binary batches,
    or ``synth:N_TRAIN:N_TEST:BUCKETS:SEED`` for generated line images.
    """
    try:
        if (source or "").startswith("synth") or dataset == "synth_angles":
            parts = (source or "synth").split(":")[1:]
            vals = [int(p) for p in parts]
            ntr = vals[0] if len(vals) > 0 else (n_train or 5000)
            nte = vals[1] if len(vals) > 1 else (n_test or 1000)
            nb = vals[2] if len(vals) > 2 else num_buckets
            sd = vals[3] if len(vals) > 3 else seed
            return (synth_angles(sd, ntr, nb, split="train"),
                    synth_angles(sd + 1_000_003, nte, nb, split="test"))
        if source is None or not os.path.isdir(source):
            raise DataError(f"data directory not found: {source}")
        names = os.listdir(source)
        if dataset == "cifar10" or (dataset is None and "test_batch.bin" in names):
            return load_cifar10_dir(source, n_train, n_test)
        return load_mnist_dir(source, n_train, n_test)
    except (OSError, DataFormatError, ValueError) as e:
        if isinstance(e, DataError):
            raise
        raise DataError(str(e)) from e


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    tc = train_config(cfg)
    m = cfg["model"]
    train_set, test_set = load_data(args.data, m["dataset"], m["n_train"], m["n_test"], m["num_buckets"],
                                    seed=tc.seed)
    c, h, _ = train_set.shape
    build_method = tc.prune_method if tc.prune_method in ("rotate4", "rotate3") else "none"
    model = build_network(m["name"], in_channels=c, in_hw=h, num_classes=train_set.num_classes,
                          method=build_method, layers=tc.layers, seed=tc.seed,
                          rotate_cfg=rotate_config(cfg))
    try:
        model, mlog = train(model, train_set, tc, test=test_set)
    except ShapeError as e:
        raise DataError(str(e)) from e
    except ValueError as e:
        raise NumericError(str(e)) from e
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    checkpoint.save(model, args.out)
    stem = os.path.splitext(args.out)[0]
    mlog.write_csv(stem + ".metrics.csv")
    write_config(cfg, stem + ".config.ini")
    if len(mlog):
        print(f"accuracy={mlog.test_acc[-1]:.4f}")
    return EXIT_OK


def cmd_prune(args) -> int:
    model = _load_ckpt(args.ckpt)
    n_conv = len(model.conv_layers())
    try:
        idx = resolve_layers(args.layers, n_conv)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    fixed = args.angle_init == "zero"
    rcfg = RotateConfig(eps=args.eps, angle_init="fixed_list" if fixed else "uniform_random",
                        fixed_angles=(0.0,) if fixed else None)
    try:
        prune_layers(model, idx, args.method, k=args.k, threshold=args.threshold, rotate_cfg=rcfg,
                     seed=args.seed)
    except PruneError as e:
        raise ConfigError(str(e)) from e
    except ValueError as e:
        raise NumericError(str(e)) from e
    checkpoint.save(model, args.out)
    return EXIT_OK


def _load_ckpt(path):
    try:
        return checkpoint.load(path)
    except FileNotFoundError as e:
        raise DataError(f"checkpoint not found: {path}") from e
    except checkpoint.CheckpointError as e:
        raise DataError(f"{path}: {e}") from e


def cmd_eval(args) -> int:
    model = _load_ckpt(args.ckpt)
    _, test = load_data(args.data, None, 1, args.limit)
    try:
        acc = evaluate(model, test)
    except ValueError as e:  # class count or input shape mismatch
        raise DataError(str(e)) from e
    print(f"accuracy={acc:.4f}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    model = _load_ckpt(args.ckpt)
    shape = tuple(int(t) for t in args.input_shape.split(",")) if args.input_shape else None
    try:
        shape = shape or checkpoint.infer_input_shape(model)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    if args.angles:
        axis, index = args.angles[0], int(args.angles[1])
        convs = model.conv_layers()
        if args.layer is None or not 0 <= args.layer < len(convs):
            raise ConfigError("--angles needs --layer with a valid convolution index")
        layer = convs[args.layer][1]
        if not isinstance(layer, RotateConv2d):
            raise ConfigError(f"convolution {args.layer} is not a RotateConv layer")
        try:
            edges, counts = angle_histogram(layer, axis, index, args.bins)
        except (ValueError, IndexError) as e:
            raise ConfigError(str(e)) from e
        if args.out:
            write_histogram_csv(args.out, edges, counts)
        else:
            print("bin_lo,bin_hi,count")
            for lo, hi, c in zip(edges[:-1], edges[1:], counts):
                print(f"{lo!r},{hi!r},{int(c)}")
        return EXIT_OK
    if args.report:
        rows = account(model, shape).rows()
        fh = open(args.out, "w", newline="") if args.out else sys.stdout
        try:
            csv.writer(fh, lineterminator="\n").writerows(rows)
        finally:
            if args.out:
                fh.close()
        return EXIT_OK
    print(checkpoint.describe(model, shape))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rotconv", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--threads", type=int, default=1, help="BLAS threads (default 1, deterministic)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a network from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--data", default=None, help="data directory or synth:N_TRAIN:N_TEST:BUCKETS:SEED")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.set_defaults(func=cmd_train)

    q = sub.add_parser("prune", help="prune convolutions of a checkpoint")
    q.add_argument("--ckpt", required=True)
    q.add_argument("--method", required=True, choices=("rotate4", "rotate3", "ai"))
    q.add_argument("--k", type=int, default=3, choices=range(1, 10), metavar="{1..9}")
    q.add_argument("--threshold", type=float, default=0.001)
    q.add_argument("--layers", default="all-but-first")
    q.add_argument("--eps", type=float, default=5.0)
    q.add_argument("--angle-init", choices=("random", "zero"), default="random")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_prune)

    e = sub.add_parser("eval", help="test accuracy of a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--limit", type=int, default=None, help="evaluate on the first N test samples")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("inspect", help="layer dump, angle histogram or parameter report")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--layer", type=int, default=None, help="convolution index for --angles")
    i.add_argument("--angles", nargs=2, metavar=("AXIS", "INDEX"),
                   help="AXIS is input_channels or output_channels")
    i.add_argument("--bins", type=int, default=18)
    i.add_argument("--report", action="store_true")
    i.add_argument("--input-shape", default=None, help="C,H,W (default: inferred)")
    i.add_argument("--out", default=None, help="CSV path (default: stdout)")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, NumericError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
