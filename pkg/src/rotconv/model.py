"""Sequential model container and the toy network zoo."""
from __future__ import annotations

import numpy as np

from .nn import (BatchNorm2d, Conv2d, Layer, Linear, MaxPool2, ReLU, ResidualAdd,
                 ResidualBegin)
from .rotate import RotateConfig, RotateConv2d, init_angles

NETWORKS = ("tiny2", "tiny3", "tiny-res")
METHODS = ("none", "rotate4", "rotate3", "ai")


class Model:
    """A flat list of layers; ``ResidualBegin``/``ResidualAdd`` pairs add shortcuts."""

    def __init__(self, layers: list[Layer], name: str = "custom"):
        self.layers = list(layers)
        self.name = name

    def __iter__(self):
        return iter(self.layers)

    def __len__(self):
        return len(self.layers)

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        saved = []
        for layer in self.layers:
            if isinstance(layer, ResidualBegin):
                saved.append(x)
            elif isinstance(layer, ResidualAdd):
                x = x + saved.pop()
            x = layer.forward(x, train)
        return x

    __call__ = forward

    def backward(self, grad: np.ndarray) -> np.ndarray:
        pending = []
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
            if isinstance(layer, ResidualAdd):
                pending.append(grad)
            elif isinstance(layer, ResidualBegin):
                grad = grad + pending.pop()
        return grad

    def conv_layers(self) -> list[tuple[int, Layer]]:
        """(position in ``layers``, layer) of every convolution, in order."""
        return [(i, l) for i, l in enumerate(self.layers) if isinstance(l, (Conv2d, RotateConv2d))]

    def conv(self, index: int) -> Layer:
        return self.conv_layers()[index][1]

    def replace_conv(self, index: int, new: Layer) -> None:
        pos = self.conv_layers()[index][0]
        self.layers[pos] = new

    def param_items(self):
        """Yield ``(key, layer, name)`` for every trainable array."""
        for i, layer in enumerate(self.layers):
            for name in layer.params:
                yield (i, name), layer, name

    def astype(self, dtype) -> "Model":
        for layer in self.layers:
            layer.astype(dtype)
        return self

    def __repr__(self):
        body = "\n".join(f"  [{i}] {l!r}" for i, l in enumerate(self.layers))
        return f"Model({self.name})\n{body}"


def glorot_uniform(rng, shape, fan_in, fan_out, dtype=np.float32):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def make_conv(rng, m, n, prunable, method="none", rotate_cfg=None, angle_seed=0, dtype=np.float32):
    """A 3x3 same-padding convolution, pruned per ``method`` if prunable."""
    if prunable and method in ("rotate4", "rotate3"):
        W = glorot_uniform(rng, (n, m, 3), 3 * m, 3 * n, dtype)
        per_filter = method == "rotate3"
        theta = init_angles((n,) if per_filter else (n, m), rotate_cfg, seed=angle_seed, dtype=dtype)
        return RotateConv2d(W, theta, stride=1, pad=1, per_filter=per_filter)
    weight = glorot_uniform(rng, (n, m, 3, 3), 9 * m, 9 * n, dtype)
    return Conv2d(weight, None, stride=1, pad=1, prunable=prunable)


def resolve_layers(selection, n_conv: int) -> list[int]:
    """Expand a layer selection into sorted convolution indices.

    Accepts ``"all-but-first"``, ``"all"``, ``"none"``, ``"first:n"``,
    ``"last:n"``, a comma list like ``"1,2"``, or an iterable of ints.
    """
    if selection is None:
        selection = "all-but-first"
    if not isinstance(selection, str):
        idx = sorted({int(i) for i in selection})
    else:
        s = selection.strip()
        if s == "all-but-first":
            idx = list(range(1, n_conv))
        elif s == "all":
            idx = list(range(n_conv))
        elif s in ("none", ""):
            idx = []
        elif s.startswith("first:"):
            idx = list(range(min(int(s[6:]), n_conv)))
        elif s.startswith("last:"):
            cnt = int(s[5:])
            idx = list(range(max(n_conv - cnt, 0), n_conv)) if cnt else []
        else:
            idx = sorted({int(t) for t in s.split(",")})
    bad = [i for i in idx if not 0 <= i < n_conv]
    if bad:
        raise ValueError(f"layer indices {bad} out of range for {n_conv} convolutions")
    return idx


def build_network(name: str, in_channels: int = 1, in_hw: int = 28, num_classes: int = 10,
                  method: str = "none", layers=None, seed: int = 0,
                  rotate_cfg: RotateConfig | None = None, dtype=np.float32) -> Model:
    """Construct one of the toy networks.

    Every 3x3 convolution is followed by batch norm. ``layers`` selects the
    prunable convolutions (default: all but the first); with ``rotate4`` or
    ``rotate3`` those are built directly as RotateConv layers.
    """
    if name not in NETWORKS:
        raise ValueError(f"unknown network {name!r}; choose from {NETWORKS}")
    if method not in METHODS:
        raise ValueError(f"unknown prune method {method!r}; choose from {METHODS}")
    n_conv = {"tiny2": 2, "tiny3": 3, "tiny-res": 4}[name]
    gamma = set(resolve_layers(layers, n_conv))
    rng = np.random.default_rng(seed)
    cfg = rotate_cfg or RotateConfig()

    conv_i = 0

    def conv(m, n):
        nonlocal conv_i
        layer = make_conv(rng, m, n, conv_i in gamma, method, cfg, angle_seed=seed * 1000 + conv_i,
                          dtype=dtype)
        conv_i += 1
        return layer

    L: list[Layer] = [conv(in_channels, 16), BatchNorm2d(16, dtype=dtype), ReLU(), MaxPool2(),
                      conv(16, 32), BatchNorm2d(32, dtype=dtype), ReLU(), MaxPool2()]
    if name == "tiny3":
        L += [conv(32, 32), BatchNorm2d(32, dtype=dtype), ReLU()]
    elif name == "tiny-res":
        L += [ResidualBegin(),
              conv(32, 32), BatchNorm2d(32, dtype=dtype), ReLU(),
              conv(32, 32), BatchNorm2d(32, dtype=dtype),
              ResidualAdd(), ReLU()]
    L[0].input_grad = False  # nothing upstream of the first convolution
    hw = in_hw // 4
    feats = 32 * hw * hw
    W = glorot_uniform(rng, (num_classes, feats), feats, num_classes, dtype)
    L.append(Linear(W, np.zeros(num_classes, dtype)))
    return Model(L, name=name)
