"""Arithmetic-interpolation pruning (AIRotateConv).

Each surviving 3x3 kernel keeps its ``k`` largest-magnitude cells. All
reserved weights of a layer are then replaced by an arithmetic progression
``w_min + tau * rank`` where ``rank`` is the 0-based position of the weight
in the layer-wide signed ordering. Storage per layer is two reals plus
integer cell indices and ranks.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AiPruneConfig:
    k: int = 3
    threshold: float = 0.001
    lam: float = 0.0
    layers: tuple = ()

    def __post_init__(self):
        if not 1 <= self.k <= 9:
            raise ValueError(f"k must lie in 1..9, got {self.k}")
        if self.threshold < 0:
            raise ValueError(f"threshold must be non-negative, got {self.threshold}")
        if self.lam < 0:
            raise ValueError(f"lambda must be non-negative, got {self.lam}")


@dataclass
class AiLayerState:
    """Compact description of a projected layer.

    ``alive`` is an (N, M) mask; ``cells`` and ``ranks`` are (n_alive, k)
    arrays listing, for each alive kernel in row-major (i, j) order, the kept
    cell indices (ascending, 0..8 row-major, 4 = centre) and their ranks.
    """

    k: int
    alive: np.ndarray
    cells: np.ndarray
    ranks: np.ndarray
    w_min: np.floating
    tau: np.floating
    kernel_shape: tuple = field(default=(3, 3))

    @property
    def n_alive(self) -> int:
        return int(self.alive.sum())

    @property
    def n_points(self) -> int:
        return self.n_alive * self.k

    @property
    def is_empty(self) -> bool:
        return self.n_alive == 0

    def dense(self, dtype=None) -> np.ndarray:
        """Rebuild the (N, M, 3, 3) weights from the compact form."""
        dtype = dtype or np.asarray(self.w_min).dtype
        n, m = self.alive.shape
        K = np.zeros((n, m, 9), dtype=dtype)
        if not self.is_empty:
            vals = interpolate(self.ranks, self.w_min, self.tau).astype(dtype)
            ii, jj = np.nonzero(self.alive)
            K[ii[:, None], jj[:, None], self.cells] = vals
        return K.reshape(n, m, *self.kernel_shape)


def kernel_alive(kernel: np.ndarray, threshold: float) -> bool:
    return bool(np.max(np.abs(kernel)) >= threshold)


def alive_mask(K: np.ndarray, threshold: float) -> np.ndarray:
    """Vectorized :func:`kernel_alive` over an (N, M, kh, kw) bank."""
    return np.abs(K).reshape(K.shape[0], K.shape[1], -1).max(axis=-1) >= threshold


def select_topk(kernel: np.ndarray, k: int) -> np.ndarray:
    """Cells with the k largest |w|, lower index first on ties; sorted ascending."""
    flat = np.abs(np.asarray(kernel).reshape(-1))
    order = np.argsort(-flat, kind="stable")
    return np.sort(order[:k])


def select_topk_bank(K: np.ndarray, k: int) -> np.ndarray:
    """:func:`select_topk` for every kernel of an (..., 9) array."""
    order = np.argsort(-np.abs(K), axis=-1, kind="stable")
    return np.sort(order[..., :k], axis=-1)


def build_order(weights, out_ch=None, in_ch=None, cells=None) -> np.ndarray:
    """Rank of each reserved point in the ascending signed-weight order.

    Ties fall back to (output channel, input channel, cell). Returns an int
    array aligned with ``weights``.
    """
    w = np.asarray(weights).reshape(-1)
    n = w.size
    if n < 2:
        raise ValueError(f"need at least 2 reserved points to order a layer, got {n}")
    zeros = np.zeros(n, dtype=np.int64)
    keys = [zeros if c is None else np.asarray(c).reshape(-1) for c in (cells, in_ch, out_ch)]
    if cells is None and in_ch is None and out_ch is None:
        keys = [np.arange(n)]
    order = np.lexsort((*keys, w))
    ranks = np.empty(n, dtype=np.int64)
    ranks[order] = np.arange(n)
    return ranks


def estimate_tolerance(sorted_weights) -> float:
    """Mean successive gap of an ascending weight sequence."""
    v = np.asarray(sorted_weights, dtype=np.float64).reshape(-1)
    n = v.size
    if n < 2:
        raise ValueError(f"tolerance needs at least 2 points, got {n}")
    return float(np.sum(v[1:] - v[:-1]) / (n - 1))


def interpolate(ranks, w_min, tau) -> np.ndarray:
    """``w_min + tau * rank``, evaluated in the dtype of ``w_min``."""
    w_min = np.asarray(w_min)
    dt = w_min.dtype if w_min.dtype.kind == "f" else np.float64
    return (w_min.astype(dt) + np.asarray(tau, dtype=dt) * np.asarray(ranks).astype(dt)).astype(dt)


def ai_prune_step(K: np.ndarray, cfg: AiPruneConfig, keep: AiLayerState | None = None):
    """Project a (N, M, 3, 3) bank onto the arithmetic-progression form.

    Dead kernels (max |w| below the threshold) are zeroed. Alive kernels keep
    their top-k cells. Passing a previous state as ``keep`` holds its alive
    mask and cell sets fixed and only redoes the ordering and interpolation.
    Returns ``(state, projected)`` with ``projected`` in the dtype of ``K``.
    """
    if K.ndim != 4 or K.shape[2:] != (3, 3):
        raise ValueError(f"ai pruning needs a 3x3 convolution bank, got shape {K.shape}")
    n, m = K.shape[:2]
    dtype = K.dtype
    flat = K.reshape(n, m, 9)
    alive = alive_mask(K, cfg.threshold) if keep is None else keep.alive.copy()
    ii, jj = np.nonzero(alive)
    k = cfg.k if keep is None else keep.k
    if ii.size == 0:
        state = AiLayerState(k=k, alive=alive, cells=np.zeros((0, k), np.int64),
                             ranks=np.zeros((0, k), np.int64), w_min=dtype.type(0), tau=dtype.type(0))
        return state, np.zeros_like(K)
    if ii.size * k < 2:
        raise ValueError("fewer than 2 reserved points in the layer; tolerance is undefined")
    nu = select_topk_bank(flat[ii, jj], k) if keep is None else keep.cells.copy()
    vals = np.take_along_axis(flat[ii, jj], nu, axis=-1)

    ranks = build_order(vals, np.repeat(ii, k), np.repeat(jj, k), nu).reshape(nu.shape)
    ordered = np.empty(vals.size, dtype=dtype)
    ordered[ranks.reshape(-1)] = vals.reshape(-1)
    w_min = ordered[0]
    tau = dtype.type(estimate_tolerance(ordered))
    assert tau >= 0, "sorted order violated"

    state = AiLayerState(k=k, alive=alive, cells=nu, ranks=ranks, w_min=w_min, tau=tau)
    return state, state.dense(dtype)
