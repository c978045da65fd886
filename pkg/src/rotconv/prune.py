"""Conversion of trained dense convolutions into pruned layers."""
from __future__ import annotations

import numpy as np

from .airotate import AiPruneConfig, ai_prune_step
from .model import Model
from .nn import Conv2d
from .rotate import RotateConfig, RotateConv2d, init_angles


class PruneError(ValueError):
    pass


def dense_to_rotate(conv: Conv2d, per_filter: bool = False, rotate_cfg: RotateConfig | None = None,
                    seed: int = 0) -> RotateConv2d:
    """RotateConv layer seeded from the centre row ``(w2, w0, w1)`` of a dense 3x3 kernel."""
    K = conv.weight
    n, m = K.shape[:2]
    W = np.stack([K[:, :, 1, 1], K[:, :, 1, 2], K[:, :, 1, 0]], axis=-1).astype(K.dtype)
    theta = init_angles((n,) if per_filter else (n, m), rotate_cfg, seed=seed, dtype=K.dtype)
    return RotateConv2d(W, theta, stride=conv.stride, pad=conv.pad, per_filter=per_filter)


def prune_layers(model: Model, indices, method: str, k: int = 3, threshold: float = 0.001,
                 rotate_cfg: RotateConfig | None = None, seed: int = 0) -> Model:
    """Prune the selected convolutions of ``model`` in place.

    ``rotate4``/``rotate3`` replace each dense layer with a per-kernel or
    per-filter RotateConv layer; ``ai`` applies one projection and attaches
    its compact state. Angle seeds depend on the layer index only.
    """
    convs = model.conv_layers()
    for ci in indices:
        layer = convs[ci][1]
        if not isinstance(layer, Conv2d) or layer.ai_state is not None:
            raise PruneError(f"convolution {ci} is already pruned ({layer!r})")
        if layer.weight.shape[2:] != (3, 3):
            raise PruneError(f"convolution {ci} has a {layer.weight.shape[2]}x{layer.weight.shape[3]} "
                             "kernel; only 3x3 layers can be pruned")
        if layer.bias is not None:
            raise PruneError(f"convolution {ci} has a bias; pruned layers are bias-free")
    for ci in indices:
        layer = convs[ci][1]
        if method in ("rotate4", "rotate3"):
            new = dense_to_rotate(layer, method == "rotate3", rotate_cfg, seed=seed * 1000 + ci)
            new.input_grad = layer.input_grad
            model.replace_conv(ci, new)
        elif method == "ai":
            state, projected = ai_prune_step(layer.weight, AiPruneConfig(k=k, threshold=threshold))
            layer.params["weight"] = projected
            layer.ai_state = state
            layer.prunable = True
        elif method != "none":
            raise PruneError(f"unknown prune method {method!r}")
    return model
