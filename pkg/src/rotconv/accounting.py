"""Stored-parameter and multiply-accumulate accounting."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import BatchNorm2d, Conv2d, Linear, MaxPool2, conv_output_hw
from .rotate import RotateConv2d


@dataclass
class LayerAccount:
    index: int
    kind: str
    stored_reals: int
    stored_ints: int
    dense_params: int
    macs: int
    dense_macs: int

    @property
    def real_ratio(self) -> float:
        return self.stored_reals / self.dense_params if self.dense_params else 1.0

    @property
    def reduction(self) -> float:
        """Fraction of real-valued parameters removed versus the dense layer."""
        return 1.0 - self.real_ratio


@dataclass
class AccountReport:
    layers: list = field(default_factory=list)

    def _sum(self, attr):
        return sum(getattr(l, attr) for l in self.layers)

    @property
    def stored_reals(self) -> int:
        return self._sum("stored_reals")

    @property
    def stored_ints(self) -> int:
        return self._sum("stored_ints")

    @property
    def dense_params(self) -> int:
        return self._sum("dense_params")

    @property
    def macs(self) -> int:
        return self._sum("macs")

    @property
    def dense_macs(self) -> int:
        return self._sum("dense_macs")

    def conv_layers(self) -> list:
        return [l for l in self.layers if l.kind in ("conv", "rotate4", "rotate3", "ai")]

    def rows(self):
        """Table rows, one per parameterized layer plus a total."""
        header = ["layer", "kind", "stored_reals", "stored_ints", "dense_params",
                  "real_reduction_pct", "macs", "dense_macs", "mac_reduction_pct"]
        out = [header]
        for l in self.layers:
            out.append([l.index, l.kind, l.stored_reals, l.stored_ints, l.dense_params,
                        f"{100 * l.reduction:.2f}", l.macs, l.dense_macs,
                        f"{100 * (1 - l.macs / l.dense_macs) if l.dense_macs else 0:.2f}"])
        tot_red = 1 - self.stored_reals / self.dense_params if self.dense_params else 0.0
        mac_red = 1 - self.macs / self.dense_macs if self.dense_macs else 0.0
        out.append(["total", "", self.stored_reals, self.stored_ints, self.dense_params,
                    f"{100 * tot_red:.2f}", self.macs, self.dense_macs, f"{100 * mac_red:.2f}"])
        return out


def conv_kind(layer) -> str:
    if isinstance(layer, RotateConv2d):
        return "rotate3" if layer.per_filter else "rotate4"
    if isinstance(layer, Conv2d) and layer.ai_state is not None:
        return "ai"
    return "conv"


def account(model, input_shape) -> AccountReport:
    """Walk ``model`` on an input of shape (c, h, w) and count per layer."""
    c, h, w = input_shape
    report = AccountReport()
    for idx, layer in enumerate(model.layers):
        if isinstance(layer, (Conv2d, RotateConv2d)):
            if isinstance(layer, RotateConv2d):
                n, m = layer.W.shape[:2]
                kh = kw = 3
            else:
                n, m, kh, kw = layer.weight.shape
            if m != c:
                raise ValueError(f"layer {idx} expects {m} channels, input has {c}")
            h, w = conv_output_hw(h, w, kh, kw, layer.stride, layer.pad)
            pix = h * w
            dense = n * m * kh * kw
            kind = conv_kind(layer)
            bias = 0 if isinstance(layer, RotateConv2d) or layer.bias is None else n
            if kind == "conv":
                reals, ints, taps = dense + bias, 0, dense
            elif kind == "ai":
                st = layer.ai_state
                reals, ints, taps = 2, st.n_alive * 2 * st.k, st.n_points
            else:
                reals = 3 * n * m + layer.theta.size
                ints = 0
                taps = int(np.count_nonzero(layer.dense_weight()))
            report.layers.append(LayerAccount(idx, kind, reals, ints, dense + bias,
                                              taps * pix, dense * pix))
            c = n
        elif isinstance(layer, BatchNorm2d):
            report.layers.append(LayerAccount(idx, "batchnorm", 4 * c, 0, 4 * c, 0, 0))
        elif isinstance(layer, MaxPool2):
            h, w = h // 2, w // 2
        elif isinstance(layer, Linear):
            p = layer.in_features * layer.out_features
            report.layers.append(LayerAccount(idx, "linear", p + layer.out_features, 0,
                                              p + layer.out_features, p, p))
            c, h, w = layer.out_features, 1, 1
    return report
