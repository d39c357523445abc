"""Dense layer arithmetic with explicit reverse-mode gradients.

Activations are plain numpy arrays laid out as (N, C, H, W) for spatial
layers and (N, F) after the first dense layer. Convolutions are stride 1
with symmetric zero padding (odd kernels only) and pooling is a fixed
2x2 window with stride 2.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LAYER_KINDS = ("conv2d", "dense", "relu", "maxpool2x2")
PARAMETRIC_KINDS = ("conv2d", "dense")


class ShapeError(ValueError):
    pass


class NonFiniteError(ArithmeticError):
    pass


@dataclass
class LayerParams:
    """Weights, gradients and optimizer state of a single layer.

    conv2d weights are (n_filters, in_channels, kh, kw); dense weights are
    (out_features, in_features). relu and maxpool2x2 carry no weights.
    """

    kind: str
    weight: np.ndarray | None = None
    bias: np.ndarray | None = None
    weight_grad: np.ndarray | None = field(default=None, repr=False)
    bias_grad: np.ndarray | None = field(default=None, repr=False)
    weight_velocity: np.ndarray | None = field(default=None, repr=False)
    bias_velocity: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in PARAMETRIC_KINDS:
            if self.weight is None or self.bias is None:
                raise ValueError(f"{self.kind} layer needs weight and bias")
            rank = 4 if self.kind == "conv2d" else 2
            if self.weight.ndim != rank:
                raise ShapeError(f"{self.kind} weight must have rank {rank}, got shape {self.weight.shape}")
            if self.bias.shape != (self.weight.shape[0],):
                raise ShapeError(f"bias shape {self.bias.shape} does not match weight rows {self.weight.shape[0]}")
            if self.kind == "conv2d" and (self.weight.shape[2] % 2 == 0 or self.weight.shape[3] % 2 == 0):
                raise ShapeError(f"same padding needs odd kernels, got {self.weight.shape[2:]}")
        elif self.weight is not None or self.bias is not None:
            raise ValueError(f"{self.kind} layer carries no weights")

    @property
    def has_weights(self) -> bool:
        return self.kind in PARAMETRIC_KINDS

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    def copy(self) -> LayerParams:
        """Copy weights; gradients and velocities are dropped."""
        if not self.has_weights:
            return LayerParams(self.kind)
        return LayerParams(self.kind, self.weight.copy(), self.bias.copy())

    def zero_grad(self):
        self.weight_grad = None
        self.bias_grad = None


def conv2d(out_channels: int, in_channels: int, kernel: int = 3, dtype=np.float32) -> LayerParams:
    return LayerParams(
        "conv2d",
        np.zeros((out_channels, in_channels, kernel, kernel), dtype=dtype),
        np.zeros(out_channels, dtype=dtype),
    )


def dense(out_features: int, in_features: int, dtype=np.float32) -> LayerParams:
    return LayerParams(
        "dense",
        np.zeros((out_features, in_features), dtype=dtype),
        np.zeros(out_features, dtype=dtype),
    )


def _name(name):
    return f"layer {name!r}" if name is not None else "layer"


def output_shape(params: LayerParams, input_shape: tuple, name=None) -> tuple:
    """Per-example output shape for a per-example input shape."""
    kind = params.kind
    if kind == "conv2d":
        if len(input_shape) != 3 or input_shape[0] != params.in_channels:
            raise ShapeError(
                f"{_name(name)} (conv2d) expects input (C={params.in_channels}, H, W), got {tuple(input_shape)}"
            )
        return (params.out_channels, input_shape[1], input_shape[2])
    if kind == "dense":
        flat = int(np.prod(input_shape))
        if flat != params.in_channels:
            raise ShapeError(
                f"{_name(name)} (dense) expects {params.in_channels} input features, got {flat} from {tuple(input_shape)}"
            )
        return (params.out_channels,)
    if kind == "maxpool2x2":
        if len(input_shape) != 3 or input_shape[1] < 2 or input_shape[2] < 2:
            raise ShapeError(f"{_name(name)} (maxpool2x2) expects (C, H>=2, W>=2), got {tuple(input_shape)}")
        return (input_shape[0], input_shape[1] // 2, input_shape[2] // 2)
    return tuple(input_shape)


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """(N, C, H, W) -> (N, H*W, C*kh*kw) patch matrix under same padding."""
    n, c, h, w = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # N, C, H, W, kh, kw
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n, h * w, c * kh * kw)


def _col2im(cols: np.ndarray, shape: tuple, kh: int, kw: int) -> np.ndarray:
    n, c, h, w = shape
    ph, pw = kh // 2, kw // 2
    cols = cols.reshape(n, h, w, c, kh, kw)
    out = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + h, j : j + w] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return out[:, :, ph : ph + h, pw : pw + w]


def _check_batch(params, x, name):
    expected = None
    if params.kind == "conv2d":
        if x.ndim != 4:
            raise ShapeError(f"{_name(name)} (conv2d) expects a 4-d batch, got shape {x.shape}")
    elif params.kind == "maxpool2x2":
        if x.ndim != 4:
            raise ShapeError(f"{_name(name)} (maxpool2x2) expects a 4-d batch, got shape {x.shape}")
    if params.has_weights or params.kind == "maxpool2x2":
        expected = output_shape(params, x.shape[1:], name)
    return expected


def _sum_channels(partials: np.ndarray) -> np.ndarray:
    """Add per-input-channel partial products in channel order.

    Accumulating one channel at a time means a channel whose contribution
    is exactly zero leaves every bit of the result unchanged, so removing
    such a channel cannot perturb the output through reassociation.
    """
    acc = partials[0].copy()
    for part in partials[1:]:
        acc += part
    return acc


def layer_apply(params: LayerParams, x: np.ndarray, name=None) -> np.ndarray:
    """Forward pass of one layer on a batch."""
    _check_batch(params, x, name)
    kind = params.kind
    if kind == "conv2d":
        o, c, kh, kw = params.weight.shape
        n, _, h, w = x.shape
        xp = np.pad(x, ((0, 0), (0, 0), (kh // 2, kh // 2), (kw // 2, kw // 2)))
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # N, C, H, W, kh, kw
        cols = win.transpose(1, 0, 2, 3, 4, 5).reshape(c, n * h * w, kh * kw)
        # one matrix-vector product per (input, output) channel pair: a gemm over all
        # outputs picks kernels by output width, so a kept filter's result would
        # change in the last bit when its siblings are removed
        taps = params.weight.reshape(o, c, kh * kw, 1).transpose(1, 0, 2, 3)
        out = _sum_channels(np.matmul(cols[:, None], taps)[..., 0])  # O, N*H*W
        out += params.bias[:, None]
        return out.reshape(o, n, h, w).transpose(1, 0, 2, 3).copy()
    if kind == "dense":
        if x.ndim == 4:
            n, c = x.shape[:2]
            o = params.weight.shape[0]
            per_channel = x.reshape(n, c, -1).transpose(1, 0, 2)
            weights = params.weight.reshape(o, c, -1).transpose(1, 2, 0)
            return _sum_channels(np.matmul(per_channel, weights)) + params.bias
        return x.reshape(x.shape[0], -1) @ params.weight.T + params.bias
    if kind == "relu":
        return np.maximum(x, 0)
    # maxpool2x2; odd trailing rows/cols are dropped
    n, c, h, w = x.shape
    xc = x[:, :, : h // 2 * 2, : w // 2 * 2]
    return xc.reshape(n, c, h // 2, 2, w // 2, 2).max(axis=(3, 5))


def layer_backprop(params: LayerParams, x: np.ndarray, upstream: np.ndarray, name=None):
    """Gradients of one layer given its input and the gradient of its output.

    Returns ``(input_grad, weight_grad, bias_grad)``; the last two are None
    for layers without weights.
    """
    expected = _check_batch(params, x, name)
    if expected is None:
        expected = x.shape[1:]
    if upstream.shape != (x.shape[0], *expected):
        raise ShapeError(
            f"{_name(name)} ({params.kind}) upstream gradient has shape {upstream.shape}, "
            f"expected {(x.shape[0], *expected)}"
        )
    kind = params.kind
    if kind == "conv2d":
        o, _, kh, kw = params.weight.shape
        n, _, h, w = x.shape
        cols = _im2col(x, kh, kw).reshape(n * h * w, -1)
        dy = upstream.transpose(0, 2, 3, 1).reshape(n * h * w, o)
        weight_grad = (dy.T @ cols).reshape(params.weight.shape)
        bias_grad = dy.sum(axis=0)
        dcols = dy @ params.weight.reshape(o, -1)
        input_grad = _col2im(dcols, x.shape, kh, kw)
        return input_grad, weight_grad, bias_grad
    if kind == "dense":
        x2 = x.reshape(x.shape[0], -1)
        weight_grad = upstream.T @ x2
        bias_grad = upstream.sum(axis=0)
        input_grad = (upstream @ params.weight).reshape(x.shape)
        return input_grad, weight_grad, bias_grad
    if kind == "relu":
        return upstream * (x > 0), None, None
    # maxpool2x2: route to the first maximal element of each window
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    win = x[:, :, : h2 * 2, : w2 * 2].reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    first = win.argmax(axis=-1)
    mask = np.zeros_like(win)
    np.put_along_axis(mask, first[..., None], 1, axis=-1)
    routed = mask * upstream[..., None]
    routed = routed.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2 * 2, w2 * 2)
    input_grad = np.zeros_like(x)
    input_grad[:, :, : h2 * 2, : w2 * 2] = routed
    return input_grad, None, None


def conv_example_grad_l1(params: LayerParams, x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Per-example, per-filter l1 norm of the conv weight gradient, shape (N, n_filters)."""
    o, _, kh, kw = params.weight.shape
    n, _, h, w = x.shape
    cols = _im2col(x, kh, kw)  # N, HW, K
    dy = upstream.reshape(n, o, h * w)
    return np.abs(np.matmul(dy, cols)).sum(axis=2)


def softmax_xent(logits: np.ndarray, labels: np.ndarray, reduction: str = "mean"):
    """Softmax cross-entropy. Returns ``(loss, logits_grad)``.

    ``reduction`` is "mean" (scalar), "sum" (scalar) or "none" (per example);
    with "none" the gradient is that of the summed loss, i.e. row n holds the
    gradient of example n's own loss.
    """
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"softmax-xent expects logits (N, K) and labels (N,), got {logits.shape} and {labels.shape}")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    rows = np.arange(logits.shape[0])
    losses = -logp[rows, labels]
    grad = np.exp(logp)
    grad[rows, labels] -= 1
    if reduction == "none":
        return losses, grad
    if reduction == "sum":
        return losses.sum(), grad
    return losses.mean(), grad / logits.shape[0]


def sgd_step(params: LayerParams, lr: float, momentum: float = 0.0) -> LayerParams:
    """One in-place momentum SGD update: v <- momentum*v + g; w <- w - lr*v."""
    if not params.has_weights:
        return params
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    if not 0 <= momentum < 1:
        raise ValueError("momentum must lie in [0, 1)")
    if params.weight_grad is None or params.bias_grad is None:
        raise ValueError("sgd_step called before gradients were computed")
    if not (np.all(np.isfinite(params.weight_grad)) and np.all(np.isfinite(params.bias_grad))):
        raise NonFiniteError("non-finite gradient; update aborted")
    if params.weight_velocity is None:
        params.weight_velocity = np.zeros_like(params.weight)
        params.bias_velocity = np.zeros_like(params.bias)
    params.weight_velocity *= momentum
    params.weight_velocity += params.weight_grad
    params.bias_velocity *= momentum
    params.bias_velocity += params.bias_grad
    params.weight -= lr * params.weight_velocity
    params.bias -= lr * params.bias_velocity
    return params
