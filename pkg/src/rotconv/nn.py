"""Dense numpy network substrate.

Activations are rank-4 arrays laid out (batch, channel, height, width).
Every op keeps the dtype of its inputs, so float64 arrays give a
gradient-check mode and float32 arrays the training mode.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


def check_finite(name: str, *arrays: np.ndarray) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise FloatingPointError(f"{name}: non-finite values")


def _check_tensor4(x: np.ndarray, name: str = "input") -> None:
    if x.ndim != 4:
        raise ShapeError(f"{name} must be rank-4 (n, c, h, w), got shape {x.shape}")


def conv_output_hw(h: int, w: int, kh: int, kw: int, stride: int, pad: int) -> tuple[int, int]:
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(
            f"spatial size {h}x{w} too small for {kh}x{kw} kernel with pad {pad}"
        )
    return ho, wo


def _windows(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]  # (n, c, ho, wo, kh, kw)


def im2col(x: np.ndarray, kh: int, kw: int, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Patch matrix of shape (n*ho*wo, c*kh*kw)."""
    win = _windows(x, kh, kw, stride, pad)
    n, c, ho, wo = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)


def _conv_forward(x, weight, bias, stride, pad):
    _check_tensor4(x)
    _check_tensor4(weight, "weight")
    n, m, h, w = x.shape
    nout, m_w, kh, kw = weight.shape
    if m != m_w:
        raise ShapeError(f"input has {m} channels but weight expects {m_w}")
    ho, wo = conv_output_hw(h, w, kh, kw, stride, pad)
    cols = im2col(x, kh, kw, stride, pad)
    out = cols @ weight.reshape(nout, -1).T
    if bias is not None:
        out += bias
    return out.reshape(n, ho, wo, nout).transpose(0, 3, 1, 2), cols


def conv2d_forward(
    x: np.ndarray,
    weight: np.ndarray,
    bias: np.ndarray | None = None,
    stride: int = 1,
    pad: int = 0,
) -> np.ndarray:
    """Cross-correlation of ``x`` (n, M, h, w) with ``weight`` (N, M, kh, kw)."""
    return _conv_forward(x, weight, bias, stride, pad)[0]


def conv2d_backward(
    x: np.ndarray,
    weight: np.ndarray,
    grad_out: np.ndarray,
    stride: int = 1,
    pad: int = 0,
    with_bias: bool = True,
    cols: np.ndarray | None = None,
    need_input: bool = True,
):
    """Gradients of ``sum(grad_out * conv2d_forward(x, weight))``.

    Returns ``(grad_input, grad_weight, grad_bias)``. ``grad_bias`` is None
    when ``with_bias`` is false and ``grad_input`` is None when
    ``need_input`` is false. ``cols`` may pass in the forward patch matrix.
    """
    n, m, h, w = x.shape
    nout, _, kh, kw = weight.shape
    ho, wo = conv_output_hw(h, w, kh, kw, stride, pad)
    if grad_out.shape != (n, nout, ho, wo):
        raise ShapeError(
            f"grad_out shape {grad_out.shape} does not match forward output {(n, nout, ho, wo)}"
        )
    if cols is None:
        cols = im2col(x, kh, kw, stride, pad)
    g = grad_out.transpose(0, 2, 3, 1).reshape(n * ho * wo, nout)
    grad_w = (g.T @ cols).reshape(weight.shape).astype(weight.dtype, copy=False)
    grad_b = g.sum(axis=0) if with_bias else None
    if not need_input:
        return None, grad_w, grad_b

    dcols = (g @ weight.reshape(nout, -1)).reshape(n, ho, wo, m, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    gpad = np.zeros((n, m, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            gpad[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, :, i, j]
    grad_x = gpad[:, :, pad : pad + h, pad : pad + w] if pad else gpad
    return grad_x, grad_w, grad_b


def l1_subgradient(w: np.ndarray, lam: float) -> np.ndarray:
    """lam * sign(w), with sign(0) = 0."""
    return lam * np.sign(w)


# ---------------------------------------------------------------------------
# Layers. Each keeps the cache of its last training-mode forward call.
# ---------------------------------------------------------------------------


class Layer:
    """Base layer: ``params`` and ``grads`` are dicts of same-shape arrays."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def astype(self, dtype) -> "Layer":
        for k, v in self.params.items():
            self.params[k] = v.astype(dtype)
        return self

    def __repr__(self):
        return f"{type(self).__name__}()"


class Conv2d(Layer):
    """Dense convolution layer. ``ai_state`` is set once the layer is projected."""

    def __init__(self, weight: np.ndarray, bias: np.ndarray | None = None, stride=1, pad=1,
                 prunable=False):
        super().__init__()
        if weight.ndim != 4 or weight.shape[0] < 1 or weight.shape[1] < 1:
            raise ShapeError(f"conv weight must be (N, M, kh, kw) with N, M >= 1, got {weight.shape}")
        self.params["weight"] = weight
        if bias is not None:
            self.params["bias"] = bias
        self.stride = stride
        self.pad = pad
        self.prunable = prunable
        self.ai_state = None
        self.input_grad = True
        self._x = None
        self._cols = None

    @property
    def weight(self) -> np.ndarray:
        return self.params["weight"]

    @property
    def bias(self):
        return self.params.get("bias")

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    def forward(self, x, train=False):
        out, cols = _conv_forward(x, self.weight, self.bias, self.stride, self.pad)
        if train:
            self._x, self._cols = x, cols
        return out

    def backward(self, grad):
        gx, gw, gb = conv2d_backward(self._x, self.weight, grad, self.stride, self.pad,
                                     with_bias=self.bias is not None, cols=self._cols,
                                     need_input=self.input_grad)
        self.grads["weight"] = gw
        if gb is not None:
            self.grads["bias"] = gb
        return gx

    def __repr__(self):
        n, m, kh, kw = self.weight.shape
        return f"Conv2d({m}->{n}, {kh}x{kw}, stride={self.stride}, pad={self.pad})"


class BatchNorm2d(Layer):
    def __init__(self, channels: int, eps=1e-5, momentum=0.1, dtype=np.float32):
        super().__init__()
        if channels < 1:
            raise ShapeError("batchnorm needs at least one channel")
        self.params["gamma"] = np.ones(channels, dtype)
        self.params["beta"] = np.zeros(channels, dtype)
        self.running_mean = np.zeros(channels, dtype)
        self.running_var = np.ones(channels, dtype)
        # float32-representable so checkpoints restore the exact same value
        self.eps = float(np.float32(eps))
        self.momentum = float(np.float32(momentum))
        self._cache = None

    @property
    def channels(self) -> int:
        return self.params["gamma"].shape[0]

    def forward(self, x, train=False):
        _check_tensor4(x)
        if x.shape[1] != self.channels:
            raise ShapeError(f"batchnorm expects {self.channels} channels, got {x.shape[1]}")
        g = self.params["gamma"][None, :, None, None]
        b = self.params["beta"][None, :, None, None]
        if not train:
            mean = self.running_mean[None, :, None, None]
            var = self.running_var[None, :, None, None]
            return (x - mean) / np.sqrt(var + self.eps) * g + b
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        count = x.size // x.shape[1]
        unbiased = var * count / max(count - 1, 1)
        m = self.momentum
        self.running_mean = ((1 - m) * self.running_mean + m * mean).astype(self.running_mean.dtype)
        self.running_var = ((1 - m) * self.running_var + m * unbiased).astype(self.running_var.dtype)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
        self._cache = (xhat, inv_std)
        return xhat * g + b

    def backward(self, grad):
        xhat, inv_std = self._cache
        self.grads["gamma"] = (grad * xhat).sum(axis=(0, 2, 3))
        self.grads["beta"] = grad.sum(axis=(0, 2, 3))
        gxhat = grad * self.params["gamma"][None, :, None, None]
        mean_g = gxhat.mean(axis=(0, 2, 3), keepdims=True)
        mean_gx = (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
        return (gxhat - mean_g - xhat * mean_gx) * inv_std[None, :, None, None]

    def astype(self, dtype):
        super().astype(dtype)
        self.running_mean = self.running_mean.astype(dtype)
        self.running_var = self.running_var.astype(dtype)
        return self

    def __repr__(self):
        return f"BatchNorm2d({self.channels})"


class ReLU(Layer):
    def __init__(self):
        super().__init__()
        self._mask = None

    def forward(self, x, train=False):
        if train:
            self._mask = x > 0
        return np.maximum(x, 0)

    def backward(self, grad):
        return grad * self._mask


class MaxPool2(Layer):
    """2x2 max pooling with stride 2; odd trailing rows/columns are dropped."""

    def __init__(self):
        super().__init__()
        self._cache = None

    def forward(self, x, train=False):
        _check_tensor4(x)
        n, c, h, w = x.shape
        ho, wo = h // 2, w // 2
        if ho == 0 or wo == 0:
            raise ShapeError(f"cannot 2x2-pool a {h}x{w} map")
        blocks = x[:, :, : 2 * ho, : 2 * wo].reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5)
        blocks = blocks.reshape(n, c, ho, wo, 4)
        idx = blocks.argmax(axis=-1)
        if train:
            self._cache = (x.shape, idx)
        return np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        shape, idx = self._cache
        n, c, h, w = shape
        ho, wo = idx.shape[2:]
        blocks = np.zeros((n, c, ho, wo, 4), dtype=grad.dtype)
        np.put_along_axis(blocks, idx[..., None], grad[..., None], axis=-1)
        blocks = blocks.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ho, 2 * wo)
        out = np.zeros(shape, dtype=grad.dtype)
        out[:, :, : 2 * ho, : 2 * wo] = blocks
        return out


class Linear(Layer):
    """Fully connected layer; flattens its input."""

    def __init__(self, weight: np.ndarray, bias: np.ndarray):
        super().__init__()
        self.params["weight"] = weight  # (out, in)
        self.params["bias"] = bias
        self._x = None
        self._shape = None

    @property
    def in_features(self) -> int:
        return self.params["weight"].shape[1]

    @property
    def out_features(self) -> int:
        return self.params["weight"].shape[0]

    def forward(self, x, train=False):
        flat = x.reshape(x.shape[0], -1)
        if flat.shape[1] != self.in_features:
            raise ShapeError(f"linear expects {self.in_features} features, got {flat.shape[1]}")
        if train:
            self._x, self._shape = flat, x.shape
        return flat @ self.params["weight"].T + self.params["bias"]

    def backward(self, grad):
        self.grads["weight"] = grad.T @ self._x
        self.grads["bias"] = grad.sum(axis=0)
        return (grad @ self.params["weight"]).reshape(self._shape)

    def __repr__(self):
        return f"Linear({self.in_features}->{self.out_features})"


class ResidualBegin(Layer):
    """Marks the start of an identity shortcut; the model routes the saved input."""

    def forward(self, x, train=False):
        return x

    def backward(self, grad):
        return grad


class ResidualAdd(Layer):
    def forward(self, x, train=False):
        return x

    def backward(self, grad):
        return grad


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_xent(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy. Returns ``(loss, probabilities)``."""
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} and labels {labels.shape} disagree")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(logsum - z[np.arange(len(labels)), labels]))
    return loss, softmax(logits)


def softmax_xent_backward(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    g = probs.copy()
    g[np.arange(len(labels)), labels] -= 1
    return g / len(labels)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptimState:
    lr: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    nesterov: bool = True
    velocity: dict = field(default_factory=dict)


def sgd_step(params: dict, grads: dict, state: OptimState, debug: bool = False) -> dict:
    """In-place SGD update, Nesterov form without dampening.

    ``params`` and ``grads`` map the same keys to arrays. Weight decay is added
    to the gradient before the momentum buffer. Returns ``params``.
    """
    if state.lr <= 0:
        raise ValueError(f"lr must be positive, got {state.lr}")
    if not 0 <= state.momentum < 1:
        raise ValueError(f"momentum must lie in [0, 1), got {state.momentum}")
    mu = state.momentum
    for key, p in params.items():
        g = grads.get(key)
        if g is None:
            continue
        if debug:
            check_finite(f"gradient {key}", g)
        if state.weight_decay:
            g = g + state.weight_decay * p
        if mu:
            v = state.velocity.get(key)
            if v is None:
                v = np.zeros_like(p)
            if v.shape != p.shape:
                raise ShapeError(f"velocity for {key} has shape {v.shape}, param {p.shape}")
            v = mu * v + g
            state.velocity[key] = v
            g = g + mu * v if state.nesterov else v
        p -= (state.lr * g).astype(p.dtype, copy=False)
    return params
