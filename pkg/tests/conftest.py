import numpy as np
import pytest

from fedafd.model import (
    Batch,
    Conv2d,
    Dense,
    LayerParams,
    MaxPool2x2,
    Relu,
    SoftmaxOutput,
    init_params,
    loss_and_grad,
)


def numeric_grad(arch, params, batch, h=1e-5):
    """Central finite differences of the mean loss for every parameter."""
    out = []
    for p in params:
        layer = []
        for arr in (p.weights, p.biases):
            g = np.zeros_like(arr)
            for idx in np.ndindex(arr.shape):
                old = arr[idx]
                arr[idx] = old + h
                lp, _ = loss_and_grad(arch, params, batch)
                arr[idx] = old - h
                lm, _ = loss_and_grad(arch, params, batch)
                arr[idx] = old
                g[idx] = (lp - lm) / (2 * h)
            layer.append(g)
        out.append(LayerParams(*layer))
    return out


def max_rel_error(analytic, numeric, floor=1e-8):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        for x, y in ((a.weights, n.weights), (a.biases, n.biases)):
            denom = np.maximum(np.maximum(np.abs(x), np.abs(y)), floor)
            worst = max(worst, float(np.max(np.abs(x - y) / denom)))
    return worst


def cnn_arch():
    return [
        Conv2d(2, 3, 3, 3, prunable=True),
        Relu(),
        MaxPool2x2(),
        Dense(3 * 2 * 2, 5, prunable=True),
        Relu(),
        Dense(5, 3),
        SoftmaxOutput(),
    ]


def mlp_arch():
    return [Dense(4, 5, prunable=True), Relu(), Dense(5, 3), SoftmaxOutput()]


def random_problem(arch, seed, batch=5):
    """Random params (nonzero biases) and a random batch fitting ``arch``."""
    rng = np.random.default_rng(seed)
    params = init_params(arch, rng)
    params = [LayerParams(p.weights, rng.normal(0, 0.1, p.biases.shape)) for p in params]
    first = arch[0]
    if isinstance(first, Conv2d):
        x = rng.normal(size=(batch, first.in_channels, 7, 7))
    else:
        x = rng.normal(size=(batch, first.in_units))
    classes = arch[[i for i, l in enumerate(arch) if isinstance(l, Dense)][-1]].out_units
    return params, Batch(x, rng.integers(0, classes, batch))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
