"""Small feed-forward network engine with exact backpropagation.

Supported layers are fully connected, 2-D convolution (stride 1, valid
padding), 2x2 max-pooling, ReLU and a softmax/cross-entropy output marker.
Tensors are plain float64 numpy arrays. Parameters for a network are kept as
a list of ``LayerParams`` in the order the parameterized layers appear in the
architecture.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when parameters or inputs do not fit the architecture."""


@dataclass(frozen=True)
class Dense:
    in_units: int
    out_units: int
    prunable: bool = False


@dataclass(frozen=True)
class Conv2d:
    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    prunable: bool = False


@dataclass(frozen=True)
class MaxPool2x2:
    pass


@dataclass(frozen=True)
class Relu:
    pass


@dataclass(frozen=True)
class SoftmaxOutput:
    pass


LayerSpec = Union[Dense, Conv2d, MaxPool2x2, Relu, SoftmaxOutput]
PARAM_KINDS = (Dense, Conv2d)


class LayerParams(NamedTuple):
    weights: np.ndarray
    biases: np.ndarray


ModelParams = list  # list[LayerParams]


@dataclass
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=DTYPE)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ShapeError(
                f"{self.inputs.shape[0]} inputs but {self.labels.shape[0]} labels"
            )

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def take(self, idx) -> "Batch":
        return Batch(self.inputs[idx], self.labels[idx])


def param_layer_indices(arch: Sequence[LayerSpec]) -> list[int]:
    """Positions in ``arch`` of layers that carry weights and biases."""
    return [i for i, layer in enumerate(arch) if isinstance(layer, PARAM_KINDS)]


def num_classes(arch: Sequence[LayerSpec]) -> int:
    last = arch[param_layer_indices(arch)[-1]]
    return last.out_units if isinstance(last, Dense) else last.out_channels


def validate_arch(arch: Sequence[LayerSpec]) -> None:
    idx = param_layer_indices(arch)
    if not idx:
        raise ShapeError("architecture has no parameterized layer")
    for i in idx:
        layer = arch[i]
        dims = (
            (layer.in_units, layer.out_units)
            if isinstance(layer, Dense)
            else (layer.in_channels, layer.out_channels, layer.kernel_h, layer.kernel_w)
        )
        if min(dims) <= 0:
            raise ShapeError(f"layer {i}: dimensions must be positive, got {dims}")
    if arch[idx[-1]].prunable:
        raise ShapeError(f"layer {idx[-1]}: the output layer cannot be prunable")
    if not isinstance(arch[idx[-1]], Dense):
        raise ShapeError(f"layer {idx[-1]}: the output layer must be Dense")
    prev_channels = None
    prev_units = None
    for i in idx:
        layer = arch[i]
        if isinstance(layer, Conv2d):
            if prev_units is not None:
                raise ShapeError(f"layer {i}: Conv2d cannot follow a Dense layer")
            if prev_channels is not None and layer.in_channels != prev_channels:
                raise ShapeError(
                    f"layer {i}: expects {layer.in_channels} input channels, "
                    f"previous layer produces {prev_channels}"
                )
            prev_channels = layer.out_channels
        else:
            if prev_units is not None and layer.in_units != prev_units:
                raise ShapeError(
                    f"layer {i}: expects {layer.in_units} inputs, "
                    f"previous layer produces {prev_units}"
                )
            if prev_units is None and prev_channels is not None:
                if layer.in_units % prev_channels:
                    raise ShapeError(
                        f"layer {i}: {layer.in_units} inputs is not a multiple of "
                        f"{prev_channels} channels"
                    )
            prev_units = layer.out_units


def param_shapes(layer: LayerSpec) -> tuple[tuple[int, ...], tuple[int, ...]]:
    if isinstance(layer, Dense):
        return (layer.out_units, layer.in_units), (layer.out_units,)
    return (
        (layer.out_channels, layer.in_channels, layer.kernel_h, layer.kernel_w),
        (layer.out_channels,),
    )


def init_params(arch: Sequence[LayerSpec], rng: np.random.Generator) -> ModelParams:
    """Glorot-uniform weights, zero biases."""
    validate_arch(arch)
    params = []
    for i in param_layer_indices(arch):
        layer = arch[i]
        w_shape, b_shape = param_shapes(layer)
        if isinstance(layer, Dense):
            fan_in, fan_out = layer.in_units, layer.out_units
        else:
            area = layer.kernel_h * layer.kernel_w
            fan_in, fan_out = layer.in_channels * area, layer.out_channels * area
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        params.append(
            LayerParams(
                rng.uniform(-limit, limit, size=w_shape).astype(DTYPE),
                np.zeros(b_shape, dtype=DTYPE),
            )
        )
    return params


def check_params(arch: Sequence[LayerSpec], params: ModelParams) -> None:
    idx = param_layer_indices(arch)
    if len(params) != len(idx):
        raise ShapeError(f"{len(idx)} parameterized layers but {len(params)} param sets")
    for i, p in zip(idx, params):
        w_shape, b_shape = param_shapes(arch[i])
        if p.weights.shape != w_shape or p.biases.shape != b_shape:
            raise ShapeError(
                f"layer {i}: expected weights {w_shape} and biases {b_shape}, "
                f"got {p.weights.shape} and {p.biases.shape}"
            )


def count_params(params: ModelParams) -> int:
    return sum(p.weights.size + p.biases.size for p in params)


def copy_params(params: ModelParams) -> ModelParams:
    return [LayerParams(p.weights.copy(), p.biases.copy()) for p in params]


# -- layer kernels -----------------------------------------------------------


def _conv_forward(x, w, b):
    kh, kw = w.shape[2:]
    patches = sliding_window_view(x, (kh, kw), axis=(2, 3))  # B,C,Ho,Wo,kh,kw
    out = np.tensordot(patches, w, axes=([1, 4, 5], [1, 2, 3]))  # B,Ho,Wo,O
    return out.transpose(0, 3, 1, 2) + b[None, :, None, None], patches


def _conv_backward(dout, x_shape, w, patches):
    kh, kw = w.shape[2:]
    ho, wo = dout.shape[2:]
    dw = np.tensordot(dout, patches, axes=([0, 2, 3], [0, 2, 3]))
    db = dout.sum(axis=(0, 2, 3))
    dx = np.zeros(x_shape, dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i : i + ho, j : j + wo] += np.einsum(
                "bohw,oc->bchw", dout, w[:, :, i, j]
            )
    return dx, dw, db


def _pool_forward(x):
    b, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    if h2 == 0 or w2 == 0:
        raise ShapeError(f"cannot 2x2-pool a {h}x{w} map")
    win = (
        x[:, :, : 2 * h2, : 2 * w2]
        .reshape(b, c, h2, 2, w2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(b, c, h2, w2, 4)
    )
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, arg


def _pool_backward(dout, x_shape, arg):
    b, c, h, w = x_shape
    h2, w2 = dout.shape[2:]
    win = np.zeros((b, c, h2, w2, 4), dtype=DTYPE)
    np.put_along_axis(win, arg[..., None], dout[..., None], axis=-1)
    dx = np.zeros(x_shape, dtype=DTYPE)
    dx[:, :, : 2 * h2, : 2 * w2] = (
        win.reshape(b, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, 2 * h2, 2 * w2)
    )
    return dx


# -- network passes ----------------------------------------------------------


def forward(arch: Sequence[LayerSpec], params: ModelParams, batch: Batch):
    """Run the network and return ``(logits, cache)``."""
    check_params(arch, params)
    x = batch.inputs
    cache = []
    p_iter = iter(params)
    for i, layer in enumerate(arch):
        if isinstance(layer, Dense):
            p = next(p_iter)
            in_shape = x.shape
            flat = x.reshape(x.shape[0], -1)
            if flat.shape[1] != layer.in_units:
                raise ShapeError(
                    f"layer {i}: Dense expects {layer.in_units} inputs, got {flat.shape[1]}"
                )
            cache.append((in_shape, flat))
            x = flat @ p.weights.T + p.biases
        elif isinstance(layer, Conv2d):
            p = next(p_iter)
            if x.ndim != 4 or x.shape[1] != layer.in_channels:
                raise ShapeError(
                    f"layer {i}: Conv2d expects input [batch, {layer.in_channels}, h, w], "
                    f"got {list(x.shape)}"
                )
            if x.shape[2] < layer.kernel_h or x.shape[3] < layer.kernel_w:
                raise ShapeError(f"layer {i}: input map smaller than kernel")
            in_shape = x.shape
            x, patches = _conv_forward(x, p.weights, p.biases)
            cache.append((in_shape, patches))
        elif isinstance(layer, MaxPool2x2):
            if x.ndim != 4:
                raise ShapeError(f"layer {i}: MaxPool2x2 expects a 4-d input")
            in_shape = x.shape
            x, arg = _pool_forward(x)
            cache.append((in_shape, arg))
        elif isinstance(layer, Relu):
            cache.append(x > 0)
            x = np.maximum(x, 0.0)
        elif isinstance(layer, SoftmaxOutput):
            cache.append(None)
        else:
            raise ShapeError(f"layer {i}: unknown layer kind {layer!r}")
    if x.ndim != 2:
        raise ShapeError("network output must be 2-d logits")
    return x, cache


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its gradient with respect to the logits."""
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ShapeError(f"labels must lie in [0, {logits.shape[1]})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    n = logits.shape[0]
    rows = np.arange(n)
    loss = -log_p[rows, labels].mean()
    dlogits = np.exp(log_p)
    dlogits[rows, labels] -= 1.0
    return max(float(loss), 0.0), dlogits / n


def backward(arch: Sequence[LayerSpec], params: ModelParams, cache, dlogits) -> ModelParams:
    grads = [None] * len(params)
    k = len(params)
    d = dlogits
    for i in range(len(arch) - 1, -1, -1):
        layer, c = arch[i], cache[i]
        if isinstance(layer, Dense):
            k -= 1
            in_shape, flat = c
            w = params[k].weights
            grads[k] = LayerParams(d.T @ flat, d.sum(axis=0))
            d = (d @ w).reshape(in_shape)
        elif isinstance(layer, Conv2d):
            k -= 1
            in_shape, patches = c
            d, dw, db = _conv_backward(d, in_shape, params[k].weights, patches)
            grads[k] = LayerParams(dw, db)
        elif isinstance(layer, MaxPool2x2):
            in_shape, arg = c
            d = _pool_backward(d, in_shape, arg)
        elif isinstance(layer, Relu):
            d = d * c
    return grads


def loss_and_grad(arch: Sequence[LayerSpec], params: ModelParams, batch: Batch):
    logits, cache = forward(arch, params, batch)
    loss, dlogits = softmax_cross_entropy(logits, batch.labels)
    return loss, backward(arch, params, cache, dlogits)


def sgd_step(params: ModelParams, grads: ModelParams, lr: float) -> ModelParams:
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} param sets but {len(grads)} gradient sets")
    out = []
    for k, (p, g) in enumerate(zip(params, grads)):
        if p.weights.shape != g.weights.shape or p.biases.shape != g.biases.shape:
            raise ShapeError(f"param set {k}: gradient shape does not match")
        out.append(LayerParams(p.weights - lr * g.weights, p.biases - lr * g.biases))
    return out


def local_train(
    arch: Sequence[LayerSpec],
    params: ModelParams,
    shard: Batch,
    epochs: int,
    batch_size: int,
    lr: float,
    rng: np.random.Generator,
):
    """Shuffled mini-batch SGD over ``shard``.

    Returns the updated parameters and the example-weighted mean training
    loss over the final epoch (losses are taken before each step). The last
    short mini-batch is kept.
    """
    n = len(shard)
    if n == 0:
        raise ValueError("cannot train on an empty shard")
    if epochs < 1 or batch_size < 1:
        raise ValueError("epochs and batch_size must be positive")
    epoch_loss = 0.0
    for _ in range(epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, batch_size):
            mb = shard.take(order[start : start + batch_size])
            loss, grads = loss_and_grad(arch, params, mb)
            epoch_loss += loss * len(mb)
            params = sgd_step(params, grads, lr)
    return params, epoch_loss / n


def predict(arch: Sequence[LayerSpec], params: ModelParams, inputs: np.ndarray) -> np.ndarray:
    logits, _ = forward(arch, params, Batch(inputs, np.zeros(len(inputs), dtype=np.int64)))
    return logits.argmax(axis=1)


def evaluate(arch: Sequence[LayerSpec], params: ModelParams, data: Batch) -> tuple[float, float]:
    """Top-1 accuracy and mean cross-entropy on ``data``."""
    logits, _ = forward(arch, params, data)
    loss, _ = softmax_cross_entropy(logits, data.labels)
    acc = float((logits.argmax(axis=1) == data.labels).mean())
    return acc, loss


def mlp(dim: int, hidden: Sequence[int], classes: int) -> list[LayerSpec]:
    """Dense network with ReLU between layers; hidden layers are prunable."""
    arch: list[LayerSpec] = []
    sizes = [dim, *hidden]
    for a, b in zip(sizes[:-1], sizes[1:]):
        arch += [Dense(a, b, prunable=True), Relu()]
    arch += [Dense(sizes[-1], classes), SoftmaxOutput()]
    return arch


def cnn(side: int, channels: int, hidden: int, classes: int, kernel: int = 3) -> list[LayerSpec]:
    """conv -> relu -> pool -> dense -> relu -> dense, for 1-channel square images."""
    pooled = (side - kernel + 1) // 2
    if pooled < 1:
        raise ShapeError(f"image side {side} too small for kernel {kernel} and pooling")
    return [
        Conv2d(1, channels, kernel, kernel, prunable=True),
        Relu(),
        MaxPool2x2(),
        Dense(channels * pooled * pooled, hidden, prunable=True),
        Relu(),
        Dense(hidden, classes),
        SoftmaxOutput(),
    ]
