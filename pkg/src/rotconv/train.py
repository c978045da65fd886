"""Training loop, evaluation, angle statistics and layer sweeps."""
from __future__ import annotations

import copy
import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import accounting
from .airotate import AiPruneConfig, ai_prune_step
from .data import Dataset
from .model import Model, resolve_layers
from .nn import Conv2d, OptimState, l1_subgradient, sgd_step, softmax_xent, softmax_xent_backward
from .prune import prune_layers
from .rotate import RotateConfig, RotateConv2d

log = logging.getLogger(__name__)

PRUNE_METHODS = ("none", "rotate4", "rotate3", "ai")


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 0.01
    milestones: tuple = (0.5, 0.75)
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lam: float = 0.0
    seed: int = 0
    prune_method: str = "none"
    layers: str = "all-but-first"
    k: int = 3
    threshold: float = 0.001
    eps: float = 5.0
    lr_theta: float | None = None

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if any(not 0 < m < 1 for m in self.milestones):
            raise ValueError(f"milestones must lie in (0, 1), got {self.milestones}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0 or self.lam < 0:
            raise ValueError("weight_decay and lam must be non-negative")
        if self.prune_method not in PRUNE_METHODS:
            raise ValueError(f"prune_method must be one of {PRUNE_METHODS}")
        AiPruneConfig(self.k, self.threshold, self.lam)
        RotateConfig(eps=self.eps)
        if self.lr_theta is not None and self.lr_theta < 0:
            raise ValueError("lr_theta must be non-negative")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 0-based ``epoch``: divided by 10 per milestone passed."""
        passed = sum(epoch >= m * self.epochs for m in self.milestones)
        return self.lr / 10 ** passed


@dataclass
class MetricsLog:
    epoch: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    test_acc: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    stored_params: list = field(default_factory=list)

    def append(self, epoch, loss, acc, lr, stored):
        self.epoch.append(epoch)
        self.loss.append(loss)
        self.test_acc.append(acc)
        self.lr.append(lr)
        self.stored_params.append(stored)

    def __len__(self):
        return len(self.epoch)

    def write_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "loss", "test_acc", "lr"])
            for row in zip(self.epoch, self.loss, self.test_acc, self.lr):
                w.writerow([row[0], repr(float(row[1])), repr(float(row[2])), repr(float(row[3]))])


def prunable_indices(model: Model, layers) -> list[int]:
    return resolve_layers(layers, len(model.conv_layers()))


def predict(model: Model, images: np.ndarray, batch_size: int = 500) -> np.ndarray:
    out = [model.forward(images[i : i + batch_size]).argmax(axis=1)
           for i in range(0, len(images), batch_size)]
    return np.concatenate(out) if out else np.zeros(0, np.int64)


def evaluate(model: Model, data: Dataset, batch_size: int = 500) -> float:
    """Top-1 accuracy in inference mode."""
    n_out = model.layers[-1].out_features
    if n_out != data.num_classes:
        raise ValueError(f"model predicts {n_out} classes but the dataset has {data.num_classes}")
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    pred = predict(model, data.images, batch_size)
    return float(np.mean(pred == data.labels))


def train(model: Model, data: Dataset, cfg: TrainConfig, test: Dataset | None = None,
          angle_monitor=None, debug: bool = False):
    """Minibatch SGD with the sparsity penalty and per-iteration projection.

    Each iteration runs forward, backward, adds ``lam * sign(w)`` on the
    selected layers, steps the optimizer and the rotate-layer angles, and,
    for the ``ai`` method, re-projects every selected dense layer.
    ``angle_monitor(layer_index, old, new, eps)`` sees every angle update.
    Returns ``(model, MetricsLog)``.
    """
    logm = MetricsLog()
    if cfg.epochs == 0:
        return model, logm
    rng = np.random.default_rng(cfg.seed)
    gamma = set(prunable_indices(model, cfg.layers))
    convs = model.conv_layers()
    penalized = [l for ci, (_, l) in enumerate(convs) if ci in gamma]
    ai_layers = []
    if cfg.prune_method == "ai":
        ai_layers = [(ci, l) for ci, (_, l) in enumerate(convs) if ci in gamma and isinstance(l, Conv2d)]
    ai_cfg = AiPruneConfig(cfg.k, cfg.threshold, cfg.lam)
    rotate_layers = [(ci, l) for ci, (_, l) in enumerate(convs) if isinstance(l, RotateConv2d)]

    state = OptimState(lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    n = len(data)
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        state.lr = lr
        lr_theta = (cfg.lr if cfg.lr_theta is None else cfg.lr_theta) * lr / cfg.lr
        order = rng.permutation(n)
        total, count = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            x, y = data.images[idx], data.labels[idx]
            logits = model.forward(x, train=True)
            loss, probs = softmax_xent(logits, y)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch starting {start}")
            model.backward(softmax_xent_backward(probs, y))
            if cfg.lam:
                for layer in penalized:
                    name = "W" if isinstance(layer, RotateConv2d) else "weight"
                    layer.grads[name] = layer.grads[name] + l1_subgradient(layer.params[name], cfg.lam)
            params, grads = {}, {}
            for key, layer, name in model.param_items():
                params[key] = layer.params[name]
                grads[key] = layer.grads[name]
            sgd_step(params, grads, state, debug=debug)
            for ci, layer in rotate_layers:
                old, new = layer.step_angles(lr_theta, cfg.eps)
                if angle_monitor is not None:
                    angle_monitor(ci, old, new, cfg.eps)
            for ci, layer in ai_layers:
                layer.ai_state, projected = ai_prune_step(layer.weight, ai_cfg)
                layer.weight[...] = projected
            total += loss * len(idx)
            count += len(idx)
        acc = evaluate(model, test) if test is not None else float("nan")
        stored = [r.stored_reals for r in accounting.account(model, data.shape).layers]
        logm.append(epoch, total / count, acc, lr, stored)
        log.info("epoch %d loss %.4f test_acc %.4f lr %g", epoch, total / count, acc, lr)
    return model, logm


def angle_histogram(layer: RotateConv2d, axis: str, index: int, bins: int = 18):
    """Histogram of one slice of a layer's angles over uniform bins on [0, 180).

    ``axis="output_channels"`` fixes input channel ``index`` and varies the
    output channel; ``axis="input_channels"`` fixes output channel ``index``.
    Returns ``(edges, counts)``.
    """
    if not isinstance(layer, RotateConv2d):
        raise TypeError("angle histograms need a RotateConv layer")
    if axis == "input_channels":
        if layer.per_filter:
            raise ValueError("a per-filter layer has one angle per output filter; no input-channel axis")
        vals = layer.theta[index, :]
    elif axis == "output_channels":
        vals = layer.theta if layer.per_filter else layer.theta[:, index]
    else:
        raise ValueError(f"axis must be input_channels or output_channels, got {axis!r}")
    edges = np.linspace(0.0, 180.0, bins + 1)
    counts, _ = np.histogram(vals, bins=edges)
    return edges, counts


def write_histogram_csv(path: str, edges, counts) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi", "count"])
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            w.writerow([repr(float(lo)), repr(float(hi)), int(c)])


def layer_sweep(base: Model, data: Dataset, test: Dataset, cfg: TrainConfig,
                order: str = "bottom_up", steps: int | None = None, finetune_lr: float = 0.001):
    """Prune growing prefixes of the prunable layers and fine-tune each result.

    Row ``s`` prunes the first ``s`` layers of the chosen order, fine-tunes a
    copy of ``base`` for ``cfg.epochs`` epochs at ``finetune_lr`` and records
    its accuracy. Returns a list of dicts with keys ``pruned``, ``layers``,
    ``accuracy``, ``stored_reals``.
    """
    if order not in ("bottom_up", "top_down"):
        raise ValueError(f"order must be bottom_up or top_down, got {order!r}")
    candidates = prunable_indices(base, cfg.layers)
    if order == "top_down":
        candidates = candidates[::-1]
    steps = len(candidates) if steps is None else min(steps, len(candidates))
    rows = [{"pruned": 0, "layers": (), "accuracy": evaluate(base, test),
             "stored_reals": accounting.account(base, data.shape).stored_reals}]
    for s in range(1, steps + 1):
        chosen = sorted(candidates[:s])
        model = copy.deepcopy(base)
        prune_layers(model, chosen, cfg.prune_method, k=cfg.k, threshold=cfg.threshold,
                     rotate_cfg=RotateConfig(eps=cfg.eps), seed=cfg.seed)
        ft = dataclasses.replace(cfg, lr=finetune_lr, layers=",".join(map(str, chosen)) or "none")
        model, _ = train(model, data, ft)
        rows.append({"pruned": s, "layers": tuple(chosen), "accuracy": evaluate(model, test),
                     "stored_reals": accounting.account(model, data.shape).stored_reals})
    return rows


def write_sweep_csv(path: str, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["pruned", "layers", "accuracy", "stored_reals"])
        for r in rows:
            w.writerow([r["pruned"], " ".join(map(str, r["layers"])), f"{r['accuracy']:.4f}", r["stored_reals"]])
