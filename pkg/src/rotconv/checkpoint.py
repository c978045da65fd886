"""Binary checkpoint codec.

Layout (all integers little-endian, all reals float32)::

    magic    8 bytes  b"RCNVCKPT"
    version  u16
    count    u16      number of layer records
    record*  u8 tag, u32 payload length, payload

Payloads by tag:

    0 conv        N u16, M u16, kh u8, kw u8, stride u8, pad u8, flags u8,
                  weight f32[N*M*kh*kw], bias f32[N] if flags & 1
    1 rotate4     N u16, M u16, stride u8, pad u8, W f32[N*M*3], T f32[N*M]
    2 rotate3     as tag 1 with T f32[N]
    3 ai          N u16, M u16, stride u8, pad u8, n_alive u32, w_min f32,
                  tau f32, k u8, then per alive kernel in row-major order:
                  i u16, j u16, k x cell u8, k x rank (u8/u16/u32, the
                  narrowest that holds n - 1, n = k * n_alive)
    4 batchnorm   C u16, eps f32, momentum f32, gamma, beta, mean, var f32[C]
    5 linear      in u32, out u32, weight f32[out*in], bias f32[out]
    6 relu, 7 maxpool2, 8 residual begin, 9 residual add: empty

An ai layer with no alive kernels is written with n_alive = 0 and
w_min = tau = 0.
"""
from __future__ import annotations

import struct

import numpy as np

from .accounting import account
from .airotate import AiLayerState
from .model import Model
from .nn import (BatchNorm2d, Conv2d, Linear, MaxPool2, ReLU, ResidualAdd, ResidualBegin)
from .rotate import RotateConv2d

MAGIC = b"RCNVCKPT"
VERSION = 1

TAG_CONV, TAG_ROTATE4, TAG_ROTATE3, TAG_AI, TAG_BN, TAG_LINEAR = range(6)
TAG_RELU, TAG_POOL, TAG_RES_BEGIN, TAG_RES_ADD = range(6, 10)
TAG_NAMES = {TAG_CONV: "conv", TAG_ROTATE4: "rotate4", TAG_ROTATE3: "rotate3", TAG_AI: "ai",
             TAG_BN: "batchnorm", TAG_LINEAR: "linear", TAG_RELU: "relu", TAG_POOL: "maxpool2",
             TAG_RES_BEGIN: "residual_begin", TAG_RES_ADD: "residual_add"}

_FLAG_BIAS = 1
_FLAG_PRUNABLE = 2


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class RankOutOfRangeError(CheckpointError):
    pass


class DuplicateCellError(CheckpointError):
    pass


class UnsupportedLayerError(CheckpointError):
    pass


def rank_width(n: int) -> int:
    """Bytes per rank: the narrowest of u8/u16/u32 that holds ``n - 1``."""
    top = max(n - 1, 0)
    if top <= 0xFF:
        return 1
    if top <= 0xFFFF:
        return 2
    return 4


_RANK_DTYPE = {1: "<u1", 2: "<u2", 4: "<u4"}


def ai_payload_size(n_alive: int, k: int) -> int:
    return 6 + 4 + 4 + 4 + 1 + n_alive * (4 + k + k * rank_width(n_alive * k))


def _f32(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def _encode_layer(layer) -> tuple[int, bytes]:
    if isinstance(layer, RotateConv2d):
        n, m, _ = layer.W.shape
        tag = TAG_ROTATE3 if layer.per_filter else TAG_ROTATE4
        return tag, struct.pack("<HHBB", n, m, layer.stride, layer.pad) + _f32(layer.W) + _f32(layer.theta)
    if isinstance(layer, Conv2d):
        n, m, kh, kw = layer.weight.shape
        if layer.ai_state is not None:
            if kh != 3 or kw != 3 or layer.bias is not None:
                raise UnsupportedLayerError("ai records need a bias-free 3x3 convolution")
            st = layer.ai_state
            head = struct.pack("<HHBBI", n, m, layer.stride, layer.pad, st.n_alive)
            head += _f32([st.w_min, st.tau]) + struct.pack("<B", st.k)
            if st.is_empty:
                return TAG_AI, head
            width = rank_width(st.n_points)
            ii, jj = np.nonzero(st.alive)
            rec = np.zeros(st.n_alive, dtype=[("i", "<u2"), ("j", "<u2"), ("cell", "u1", (st.k,)),
                                              ("rank", _RANK_DTYPE[width], (st.k,))])
            rec["i"], rec["j"], rec["cell"], rec["rank"] = ii, jj, st.cells, st.ranks
            return TAG_AI, head + rec.tobytes()
        flags = (_FLAG_BIAS if layer.bias is not None else 0) | (_FLAG_PRUNABLE if layer.prunable else 0)
        body = struct.pack("<HHBBBBB", n, m, kh, kw, layer.stride, layer.pad, flags) + _f32(layer.weight)
        if layer.bias is not None:
            body += _f32(layer.bias)
        return TAG_CONV, body
    if isinstance(layer, BatchNorm2d):
        p = layer.params
        return TAG_BN, (struct.pack("<H", layer.channels) + _f32([layer.eps, layer.momentum])
                        + _f32(p["gamma"]) + _f32(p["beta"]) + _f32(layer.running_mean)
                        + _f32(layer.running_var))
    if isinstance(layer, Linear):
        return TAG_LINEAR, (struct.pack("<II", layer.in_features, layer.out_features)
                            + _f32(layer.params["weight"]) + _f32(layer.params["bias"]))
    for cls, tag in ((ReLU, TAG_RELU), (MaxPool2, TAG_POOL), (ResidualBegin, TAG_RES_BEGIN),
                     (ResidualAdd, TAG_RES_ADD)):
        if type(layer) is cls:
            return tag, b""
    raise UnsupportedLayerError(f"cannot serialize layer {layer!r}")


def export_checkpoint(model: Model) -> bytes:
    if len(model.layers) > 0xFFFF:
        raise UnsupportedLayerError("too many layers for a u16 count")
    parts = [MAGIC, struct.pack("<HH", VERSION, len(model.layers))]
    for layer in model.layers:
        tag, payload = _encode_layer(layer)
        parts.append(struct.pack("<BI", tag, len(payload)))
        parts.append(payload)
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes, what: str = "checkpoint"):
        self.buf = buf
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"{self.what} truncated: need {n} bytes at offset {self.pos}, "
                                 f"have {len(self.buf) - self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def f32(self, count: int, shape=None) -> np.ndarray:
        a = np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float32)
        return a.reshape(shape) if shape is not None else a

    def done(self) -> bool:
        return self.pos == len(self.buf)


def _decode_ai(r: _Reader) -> Conv2d:
    n, m, stride, pad, n_alive = r.unpack("<HHBBI")
    w_min, tau = r.f32(2)
    (k,) = r.unpack("<B")
    if not 1 <= k <= 9:
        raise CheckpointError(f"ai record has k={k}; must lie in 1..9")
    alive = np.zeros((n, m), dtype=bool)
    if n_alive == 0:
        state = AiLayerState(k=k, alive=alive, cells=np.zeros((0, k), np.int64),
                             ranks=np.zeros((0, k), np.int64), w_min=w_min, tau=tau)
    else:
        npts = n_alive * k
        width = rank_width(npts)
        dt = np.dtype([("i", "<u2"), ("j", "<u2"), ("cell", "u1", (k,)), ("rank", _RANK_DTYPE[width], (k,))])
        rec = np.frombuffer(r.take(dt.itemsize * n_alive), dtype=dt)
        ii = rec["i"].astype(np.int64)
        jj = rec["j"].astype(np.int64)
        if np.any(ii >= n) or np.any(jj >= m):
            raise CheckpointError("ai kernel index outside the layer")
        flat = ii * m + jj
        if np.any(np.diff(flat) <= 0):
            raise CheckpointError("ai kernels must be listed once each in row-major order")
        cells = rec["cell"].astype(np.int64)
        ranks = rec["rank"].astype(np.int64)
        if np.any(cells > 8):
            raise CheckpointError("ai cell index outside the 3x3 grid")
        srt = np.sort(cells, axis=1)
        if np.any(srt[:, 1:] == srt[:, :-1]):
            raise DuplicateCellError("duplicate cell index inside an ai kernel")
        if np.any(ranks >= npts):
            raise RankOutOfRangeError(f"rank {int(ranks.max())} >= number of reserved points {npts}")
        if np.unique(ranks).size != npts:
            raise CheckpointError("ai ranks are not a permutation")
        alive[ii, jj] = True
        state = AiLayerState(k=k, alive=alive, cells=cells, ranks=ranks, w_min=w_min, tau=tau)
    layer = Conv2d(state.dense(np.float32), None, stride=stride, pad=pad, prunable=True)
    layer.ai_state = state
    return layer


def _decode_record(tag: int, r: _Reader):
    if tag == TAG_CONV:
        n, m, kh, kw, stride, pad, flags = r.unpack("<HHBBBBB")
        weight = r.f32(n * m * kh * kw, (n, m, kh, kw))
        bias = r.f32(n) if flags & _FLAG_BIAS else None
        return Conv2d(weight, bias, stride=stride, pad=pad, prunable=bool(flags & _FLAG_PRUNABLE))
    if tag in (TAG_ROTATE4, TAG_ROTATE3):
        n, m, stride, pad = r.unpack("<HHBB")
        W = r.f32(n * m * 3, (n, m, 3))
        per_filter = tag == TAG_ROTATE3
        theta = r.f32(n if per_filter else n * m, (n,) if per_filter else (n, m))
        if np.any(~((theta >= 0) & (theta < 180))):
            raise CheckpointError("rotate angles outside [0, 180)")
        return RotateConv2d(W, theta, stride=stride, pad=pad, per_filter=per_filter)
    if tag == TAG_AI:
        return _decode_ai(r)
    if tag == TAG_BN:
        (c,) = r.unpack("<H")
        eps, momentum = r.f32(2)
        bn = BatchNorm2d(c, eps=float(eps), momentum=float(momentum))
        bn.params["gamma"] = r.f32(c)
        bn.params["beta"] = r.f32(c)
        bn.running_mean = r.f32(c)
        bn.running_var = r.f32(c)
        return bn
    if tag == TAG_LINEAR:
        fin, fout = r.unpack("<II")
        return Linear(r.f32(fin * fout, (fout, fin)), r.f32(fout))
    simple = {TAG_RELU: ReLU, TAG_POOL: MaxPool2, TAG_RES_BEGIN: ResidualBegin, TAG_RES_ADD: ResidualAdd}
    if tag in simple:
        return simple[tag]()
    raise CheckpointError(f"unknown layer tag {tag}")


def import_checkpoint(buf: bytes) -> Model:
    r = _Reader(bytes(buf))
    if len(buf) < len(MAGIC) or r.take(len(MAGIC)) != MAGIC:
        raise BadMagicError(f"bad magic: expected {MAGIC!r}, got {bytes(buf[:8])!r}")
    version, count = r.unpack("<HH")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    layers = []
    for li in range(count):
        tag, length = r.unpack("<BI")
        sub = _Reader(r.take(length), f"record {li} ({TAG_NAMES.get(tag, tag)})")
        layer = _decode_record(tag, sub)
        if not sub.done():
            raise CheckpointError(f"record {li} has {len(sub.buf) - sub.pos} trailing bytes")
        layers.append(layer)
    if not r.done():
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after the last record")
    convs = [l for l in layers if isinstance(l, (Conv2d, RotateConv2d))]
    if convs and layers[0] is convs[0]:
        convs[0].input_grad = False
    return Model(layers, name="checkpoint")


def save(model: Model, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(export_checkpoint(model))


def load(path: str) -> Model:
    with open(path, "rb") as fh:
        return import_checkpoint(fh.read())


def infer_input_shape(model: Model) -> tuple:
    """Square input (c, h, w) consistent with the model's first conv and its linear head."""
    from .nn import conv_output_hw

    convs = model.conv_layers()
    lin = [l for l in model.layers if isinstance(l, Linear)]
    if not convs or not lin:
        raise ValueError("cannot infer an input shape without a convolution and a linear layer")
    c = convs[0][1].in_channels
    for hw in range(1, 1025):
        h = w = hw
        ch = c
        ok = True
        for layer in model.layers:
            if isinstance(layer, (Conv2d, RotateConv2d)):
                kh = 3 if isinstance(layer, RotateConv2d) else layer.weight.shape[2]
                kw = 3 if isinstance(layer, RotateConv2d) else layer.weight.shape[3]
                try:
                    h, w = conv_output_hw(h, w, kh, kw, layer.stride, layer.pad)
                except ValueError:
                    ok = False
                    break
                ch = layer.out_channels
            elif isinstance(layer, MaxPool2):
                h, w = h // 2, w // 2
                if h == 0:
                    ok = False
                    break
            elif isinstance(layer, Linear):
                if ch * h * w != layer.in_features:
                    ok = False
                break
        if ok and h > 0:
            return (c, hw, hw)
    raise ValueError("no square input size matches the model")


def describe(model: Model, input_shape=None) -> str:
    """One line per layer: index, tag, dimensions, stored parameters."""
    shape = input_shape or infer_input_shape(model)
    acct = {a.index: a for a in account(model, shape).layers}
    lines = []
    for i, layer in enumerate(model.layers):
        tag, _ = _encode_layer(layer)
        if isinstance(layer, RotateConv2d):
            n, m, _ = layer.W.shape
            dims = f"N={n} M={m} stride={layer.stride} pad={layer.pad}"
        elif isinstance(layer, Conv2d):
            n, m, kh, kw = layer.weight.shape
            dims = f"N={n} M={m} k={kh}x{kw} stride={layer.stride} pad={layer.pad}"
            if layer.ai_state is not None:
                dims += f" alive={layer.ai_state.n_alive} kkeep={layer.ai_state.k}"
        elif isinstance(layer, BatchNorm2d):
            dims = f"C={layer.channels}"
        elif isinstance(layer, Linear):
            dims = f"in={layer.in_features} out={layer.out_features}"
        else:
            dims = "-"
        a = acct.get(i)
        stored = f"reals={a.stored_reals} ints={a.stored_ints}" if a else "reals=0 ints=0"
        lines.append(f"{i:3d} {TAG_NAMES[tag]:<15s} {dims:<40s} {stored}")
    return "\n".join(lines)
