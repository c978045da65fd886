"""Rotated line-segment convolution (RotateConv).

A kernel is three weights ``(w0, w1, w2)`` on a segment through the centre
of a 3x3 grid plus an orientation angle in degrees. ``w1`` sits on the
``theta`` side, ``w2`` on the opposite side. Off-grid angles split each
endpoint weight between the two ring cells bracketing it, giving at most
five nonzero taps; the forward pass runs those as a dense 3x3 convolution.

Ring cells are indexed counterclockwise from east, with row offsets
growing downwards::

    3 2 1
    4 c 0
    5 6 7
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Layer, ShapeError, _conv_forward, conv2d_backward, conv2d_forward

RING_OFFSETS = ((0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1))
# flat row-major index into a 3x3 kernel for each ring cell
RING_FLAT = np.array([(1 + dr) * 3 + (1 + dc) for dr, dc in RING_OFFSETS])
CENTER_FLAT = 4
SECTOR = 45.0


@dataclass
class RotateConfig:
    eps: float = 5.0
    lr_theta: float | None = None  # None: follow the weight learning rate
    angle_init: str = "uniform_random"
    fixed_angles: tuple | None = None

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if self.angle_init not in ("uniform_random", "fixed_list"):
            raise ValueError(f"unknown angle_init {self.angle_init!r}")
        if self.fixed_angles is not None:
            a = np.asarray(self.fixed_angles, dtype=float)
            if np.any((a < 0) | (a >= 180)):
                raise ValueError("fixed angles must lie in [0, 180)")


def _check_range(theta) -> np.ndarray:
    t = np.asarray(theta)
    if np.any(~((t >= 0) & (t < 180))):
        raise ValueError(f"angles must lie in [0, 180), got {theta}")
    return t


def frac(theta):
    """Position of the angle inside its 45-degree sector, in [0, 1)."""
    return np.mod(theta, SECTOR) / SECTOR


def endpoint_cells(theta):
    """Ring cells ``(floor, ceil, opp_floor, opp_ceil)`` bracketing ``theta``.

    Works elementwise on arrays.
    """
    t = _check_range(theta)
    lo = np.floor_divide(t, SECTOR).astype(np.int64)
    hi = (lo + 1) % 8
    result = (lo, hi, (lo + 4) % 8, (hi + 4) % 8)
    if t.ndim == 0:
        return tuple(int(c) for c in result)
    return result


@dataclass
class SplitCache:
    f: np.ndarray
    floor_cell: np.ndarray
    ceil_cell: np.ndarray
    w1b: np.ndarray
    w1s: np.ndarray
    w2b: np.ndarray
    w2s: np.ndarray


def split_weights(w1, w2, theta) -> SplitCache:
    """Split both endpoint weights onto the ring cells around ``theta``.

    The ``s`` part goes to the floor cell and the ``b`` part to the ceil cell.
    """
    t = _check_range(theta)
    lo, hi, _, _ = endpoint_cells(t)
    f = frac(t)
    w1 = np.asarray(w1)
    w2 = np.asarray(w2)
    w1b = w1 * f
    w2b = w2 * f
    # w - w*f rather than w*(1-f) keeps w_b + w_s == w to rounding
    return SplitCache(f=f, floor_cell=np.asarray(lo), ceil_cell=np.asarray(hi),
                      w1b=w1b, w1s=w1 - w1b, w2b=w2b, w2s=w2 - w2b)


def expand_angles(theta: np.ndarray, n: int, m: int) -> np.ndarray:
    """Per-kernel (N, M) angle grid from either storage variant."""
    theta = np.asarray(theta)
    if theta.shape == (n, m):
        return theta
    if theta.shape == (n,):
        return np.broadcast_to(theta[:, None], (n, m))
    if theta.size == n * m:
        return theta.reshape(n, m)
    raise ShapeError(f"angle array of shape {theta.shape} fits neither ({n}, {m}) nor ({n},)")


def materialize(W: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Dense (N, M, 3, 3) kernel bank for segment weights ``W`` (N, M, 3)."""
    n, m, three = W.shape
    if three != 3:
        raise ShapeError(f"segment weights must be (N, M, 3), got {W.shape}")
    t = expand_angles(theta, n, m)
    sp = split_weights(W[..., 1], W[..., 2], t)
    lo, hi = sp.floor_cell, sp.ceil_cell
    K = np.zeros((n, m, 9), dtype=W.dtype)
    K[..., CENTER_FLAT] = W[..., 0]
    put = lambda cells, vals: np.put_along_axis(K, RING_FLAT[cells][..., None], vals[..., None].astype(W.dtype), axis=-1)
    put(lo, sp.w1s)
    put(hi, sp.w1b)
    put((lo + 4) % 8, sp.w2s)
    put((hi + 4) % 8, sp.w2b)
    return K.reshape(n, m, 3, 3)


def rotate_forward(x, W, theta, stride=1, pad=1):
    if x.ndim != 4 or x.shape[1] != W.shape[1]:
        raise ShapeError(f"input with shape {x.shape} does not match {W.shape[1]} input channels")
    return conv2d_forward(x, materialize(W, theta), None, stride, pad)


def rotate_backward(x, W, theta, grad_out, stride=1, pad=1, cols=None, need_input=True):
    """Gradients ``(grad_input, grad_W, grad_theta)`` of ``sum(grad_out * forward)``.

    ``grad_theta`` is per degree and has the shape of ``theta``; a per-filter
    angle collects the contributions of all its kernels.
    """
    n, m, _ = W.shape
    theta = np.asarray(theta)
    t = expand_angles(theta, n, m)
    K = materialize(W, t)
    gx, gK, _ = conv2d_backward(x, K, grad_out, stride, pad, with_bias=False, cols=cols,
                                need_input=need_input)
    gK = gK.reshape(n, m, 9)
    lo, hi, olo, ohi = endpoint_cells(t)
    take = lambda cells: np.take_along_axis(gK, RING_FLAT[cells][..., None], axis=-1)[..., 0]
    g1s, g1b, g2s, g2b = take(lo), take(hi), take(olo), take(ohi)
    f = frac(t)
    gW = np.empty_like(W)
    gW[..., 0] = gK[..., CENTER_FLAT]
    gW[..., 1] = g1b * f + g1s * (1 - f)
    gW[..., 2] = g2b * f + g2s * (1 - f)
    # df/dtheta = 1/45 per degree, right-hand branch at the sector boundaries
    gT = (W[..., 1] * (g1b - g1s) + W[..., 2] * (g2b - g2s)) / SECTOR
    if theta.shape == (n,):
        gT = gT.sum(axis=1)
    return gx, gW, gT.reshape(theta.shape).astype(theta.dtype, copy=False)


def angle_step(theta_last, delta, eps: float = 5.0):
    """Move angles by ``delta`` while staying near their current sector.

    The unwrapped candidate is clamped to
    ``[sector_lo - eps, sector_lo + 45 + eps]`` and then wrapped into [0, 180).
    """
    t = _check_range(theta_last)
    small = t - np.mod(t, SECTOR)
    cand = np.clip(t + delta, small - eps, small + SECTOR + eps)
    out = np.mod(cand, 180.0).astype(np.result_type(t, np.float32), copy=False)
    # tiny negatives wrap (or round, in float32) to exactly 180
    out = np.where(out >= 180.0, 0.0, out).astype(out.dtype)
    return out if out.ndim else out.item()


def init_angles(shape, cfg: RotateConfig | None = None, seed=0, dtype=np.float32) -> np.ndarray:
    cfg = cfg or RotateConfig()
    size = int(np.prod(shape))
    if cfg.angle_init == "fixed_list":
        vals = np.asarray(cfg.fixed_angles, dtype=dtype)
        if vals.size == 1:
            vals = np.full(size, vals.item(), dtype)
        if vals.size != size:
            raise ValueError(f"fixed angle list has {vals.size} entries, layer needs {size}")
        return vals.reshape(shape).copy()
    rng = np.random.default_rng(seed)
    out = rng.uniform(0.0, 180.0, size=shape).astype(dtype)
    return np.where(out >= 180.0, 0.0, out).astype(dtype)


class RotateConv2d(Layer):
    """RotateConv layer with per-kernel (N*M) or per-filter (N) angles.

    ``W`` is trained by the optimizer like any parameter; the angles are moved
    separately through :meth:`step_angles`.
    """

    def __init__(self, W: np.ndarray, theta: np.ndarray, stride=1, pad=1, per_filter=False,
                 prunable=True):
        super().__init__()
        n, m, three = W.shape
        if three != 3:
            raise ShapeError(f"segment weights must be (N, M, 3), got {W.shape}")
        theta = np.asarray(theta, dtype=W.dtype)
        want = (n,) if per_filter else (n, m)
        if theta.size != int(np.prod(want)):
            raise ShapeError(f"expected {want} angles, got {theta.shape}")
        _check_range(theta)
        self.params["W"] = W
        self.theta = theta.reshape(want).copy()
        self.grad_theta = None
        self.stride = stride
        self.pad = pad
        self.per_filter = per_filter
        self.prunable = prunable
        self.input_grad = True
        self._x = None
        self._cols = None

    @property
    def W(self) -> np.ndarray:
        return self.params["W"]

    @property
    def out_channels(self) -> int:
        return self.W.shape[0]

    @property
    def in_channels(self) -> int:
        return self.W.shape[1]

    def dense_weight(self) -> np.ndarray:
        return materialize(self.W, self.theta)

    def forward(self, x, train=False):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"input with shape {x.shape} does not match {self.in_channels} input channels")
        out, cols = _conv_forward(x, self.dense_weight(), None, self.stride, self.pad)
        if train:
            self._x, self._cols = x, cols
        return out

    def backward(self, grad):
        gx, gW, gT = rotate_backward(self._x, self.W, self.theta, grad, self.stride, self.pad,
                                     cols=self._cols, need_input=self.input_grad)
        self.grads["W"] = gW
        self.grad_theta = gT
        return gx

    def step_angles(self, lr_theta: float, eps: float):
        """Gradient step on the angles, bounded per sector. Returns (old, new)."""
        old = self.theta.copy()
        self.theta = np.asarray(angle_step(old, -lr_theta * self.grad_theta, eps), dtype=old.dtype).reshape(old.shape)
        return old, self.theta

    def astype(self, dtype):
        super().astype(dtype)
        self.theta = self.theta.astype(dtype)
        return self

    def __repr__(self):
        n, m, _ = self.W.shape
        kind = "per-filter" if self.per_filter else "per-kernel"
        return f"RotateConv2d({m}->{n}, {kind}, stride={self.stride}, pad={self.pad})"
