"""Small feedforward networks with per-sample capture of activations and
pre-activation derivatives.

Every layer owns one weight matrix whose last column is the bias; inputs are
extended with a trailing 1 (``abar``) instead of carrying a separate bias
vector. Convolutions are unrolled: each sample's input image becomes a patch
matrix whose rows are extended patches, so a conv layer is a dense map applied
at every output location.

Array layouts used throughout (B = batch size, T = output locations):

* dense layer  ``abar``: (B, d_in + 1)        ``s``, ``g``: (B, d_out)
* conv layer   ``abar``: (B, T, c_in*kh*kw + 1)  ``s``, ``g``: (B, T, c_out)

The parameter vector concatenates ``vec(W_i)`` (column-major) layer by layer.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

SQUARED_ERROR = "squared_error"
CROSS_ENTROPY = "cross_entropy"
LOSSES = (SQUARED_ERROR, CROSS_ENTROPY)


def _sigmoid(s):
    return 0.5 * (1.0 + np.tanh(0.5 * s))


# (activation, derivative as a function of pre-activation s and output a)
ACTIVATIONS = {
    "identity": (lambda s: s, lambda s, a: np.ones_like(s)),
    "tanh": (np.tanh, lambda s, a: 1.0 - a * a),
    "relu": (lambda s: np.maximum(s, 0.0), lambda s, a: (s > 0).astype(s.dtype)),  # relu'(0) = 0
    "sigmoid": (_sigmoid, lambda s, a: a * (1.0 - a)),
}


@dataclass(frozen=True)
class DenseSpec:
    d_in: int
    d_out: int
    activation: str = "identity"

    kind = "dense"

    def __post_init__(self):
        if self.d_in < 1 or self.d_out < 1:
            raise ValueError("dense layer dimensions must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def weight_shape(self) -> tuple[int, int]:
        return (self.d_out, self.d_in + 1)

    @property
    def in_size(self) -> int:
        return self.d_in

    @property
    def out_size(self) -> int:
        return self.d_out


@dataclass(frozen=True)
class ConvSpec:
    c_in: int
    c_out: int
    kernel: tuple[int, int]
    in_hw: tuple[int, int]
    stride: int = 1
    padding: int = 0
    activation: str = "identity"

    kind = "conv"

    def __post_init__(self):
        object.__setattr__(self, "kernel", tuple(int(k) for k in self.kernel))
        object.__setattr__(self, "in_hw", tuple(int(k) for k in self.in_hw))
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.stride < 1 or self.padding < 0:
            raise ValueError("stride must be >= 1 and padding >= 0")
        oh, ow = self.out_hw
        if oh < 1 or ow < 1:
            raise ValueError(f"kernel {self.kernel} does not fit input {self.in_hw} with padding {self.padding}")

    @property
    def out_hw(self) -> tuple[int, int]:
        (h, w), (kh, kw) = self.in_hw, self.kernel
        return ((h + 2 * self.padding - kh) // self.stride + 1,
                (w + 2 * self.padding - kw) // self.stride + 1)

    @property
    def locations(self) -> int:
        oh, ow = self.out_hw
        return oh * ow

    @property
    def patch_size(self) -> int:
        return self.c_in * self.kernel[0] * self.kernel[1]

    @property
    def weight_shape(self) -> tuple[int, int]:
        return (self.c_out, self.patch_size + 1)

    @property
    def in_size(self) -> int:
        return self.c_in * self.in_hw[0] * self.in_hw[1]

    @property
    def out_size(self) -> int:
        return self.c_out * self.locations


LayerSpec = Union[DenseSpec, ConvSpec]


class Network:
    """Ordered layers plus a flat parameter vector ``theta``."""

    def __init__(self, layers: Sequence[LayerSpec], loss: str = SQUARED_ERROR,
                 theta: Optional[np.ndarray] = None):
        if not layers:
            raise ValueError("a network needs at least one layer")
        if loss not in LOSSES:
            raise ValueError(f"unknown loss {loss!r}")
        for prev, nxt in zip(layers[:-1], layers[1:]):
            if prev.out_size != nxt.in_size:
                raise ValueError(f"layer output size {prev.out_size} does not match next input size {nxt.in_size}")
        self.layers = tuple(layers)
        self.loss = loss
        self.shapes = [layer.weight_shape for layer in self.layers]
        self.sizes = [r * c for r, c in self.shapes]
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)]).astype(int)
        self.p = int(self.offsets[-1])
        if theta is None:
            theta = np.zeros(self.p)
        theta = np.array(theta, dtype=float)
        if theta.shape != (self.p,):
            raise ValueError(f"theta has shape {theta.shape}, expected ({self.p},)")
        self.theta = theta

    def __len__(self):
        return len(self.layers)

    @property
    def in_size(self) -> int:
        return self.layers[0].in_size

    @property
    def out_size(self) -> int:
        return self.layers[-1].out_size

    def segment(self, u: np.ndarray, i: int) -> np.ndarray:
        return u[self.offsets[i]:self.offsets[i + 1]]

    def split(self, u: np.ndarray) -> list[np.ndarray]:
        return [self.segment(u, i) for i in range(len(self.layers))]

    def weights(self, i: int) -> np.ndarray:
        """Weight matrix of layer ``i`` as a column-major view into ``theta``."""
        rows, cols = self.shapes[i]
        return self.segment(self.theta, i).reshape(rows, cols, order="F")

    def init_params(self, rng: np.random.Generator) -> "Network":
        """Gaussian weights with variance 1/fan_in, zero biases. Returns self."""
        parts = []
        for (rows, cols) in self.shapes:
            W = np.zeros((rows, cols))
            W[:, :-1] = rng.standard_normal((rows, cols - 1)) / np.sqrt(cols - 1)
            parts.append(W.reshape(-1, order="F"))
        self.theta = np.concatenate(parts)
        return self

    def copy(self, theta: Optional[np.ndarray] = None) -> "Network":
        return Network(self.layers, self.loss, self.theta.copy() if theta is None else theta)


@dataclass
class BatchCache:
    """Quantities captured by :func:`forward` (``abar``, ``s``, ``a``) and
    :func:`backward` (``g``)."""

    loss: str
    abar: list[np.ndarray]
    s: list[np.ndarray]
    a: list[np.ndarray]
    g: Optional[list[np.ndarray]] = None
    targets: Optional[np.ndarray] = None
    kinds: list[str] = field(default_factory=list)

    @property
    def batch_size(self) -> int:
        return self.abar[0].shape[0]


def _append_one(x: np.ndarray) -> np.ndarray:
    return np.concatenate([x, np.ones(x.shape[:-1] + (1,))], axis=-1)


def im2col(x: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """(B, C, H, W) images -> (B, T, C*kh*kw) patches, locations row-major."""
    kh, kw = spec.kernel
    p, st = spec.padding, spec.stride
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::st, ::st]
    oh, ow = spec.out_hw
    win = win[:, :, :oh, :ow]
    B = x.shape[0]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(B, oh * ow, spec.patch_size)


def col2im(cols: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patch gradients back onto images."""
    kh, kw = spec.kernel
    p, st = spec.padding, spec.stride
    oh, ow = spec.out_hw
    h, w = spec.in_hw
    B = cols.shape[0]
    cols = cols.reshape(B, oh, ow, spec.c_in, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    img = np.zeros((B, spec.c_in, h + 2 * p, w + 2 * p))
    for y in range(kh):
        for x in range(kw):
            img[:, :, y:y + st * oh:st, x:x + st * ow:st] += cols[:, :, y, x]
    return img[:, :, p:p + h, p:p + w]


def forward(net: Network, inputs: np.ndarray) -> tuple[np.ndarray, BatchCache]:
    x = np.asarray(inputs, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    B = x.shape[0]
    x = x.reshape(B, -1)
    if x.shape[1] != net.in_size:
        raise ValueError(f"input size {x.shape[1]} does not match network input size {net.in_size}")
    abar, s_list, a_list, kinds = [], [], [], []
    a = x
    for i, layer in enumerate(net.layers):
        W = net.weights(i)
        act = ACTIVATIONS[layer.activation][0]
        if layer.kind == "dense":
            ab = _append_one(a)
            s = ab @ W.T
            out = act(s)
            a_next = out
        else:
            img = a.reshape(B, layer.c_in, *layer.in_hw)
            ab = _append_one(im2col(img, layer))
            s = ab @ W.T                       # (B, T, c_out)
            out = act(s)
            a_next = out.transpose(0, 2, 1).reshape(B, -1)  # channel-major flatten
        abar.append(ab)
        s_list.append(s)
        a_list.append(out)
        kinds.append(layer.kind)
        a = a_next
    return a, BatchCache(loss=net.loss, abar=abar, s=s_list, a=a_list, kinds=kinds)


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def per_sample_loss(loss: str, z: np.ndarray, y: np.ndarray) -> np.ndarray:
    if loss == SQUARED_ERROR:
        y = np.asarray(y, dtype=float).reshape(z.shape)
        return 0.5 * np.sum((z - y) ** 2, axis=1)
    labels = np.asarray(y).astype(int).reshape(-1)
    zmax = z.max(axis=1)
    lse = zmax + np.log(np.exp(z - zmax[:, None]).sum(axis=1))
    return lse - z[np.arange(z.shape[0]), labels]


def loss_grad(loss: str, z: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Derivative of the per-sample loss with respect to the output ``z``."""
    if loss == SQUARED_ERROR:
        y = np.asarray(y, dtype=float)
        if y.shape != z.shape:
            raise ValueError(f"targets of shape {y.shape} do not match outputs {z.shape}")
        return z - y
    labels = np.asarray(y).astype(int).reshape(-1)
    if labels.shape[0] != z.shape[0]:
        raise ValueError(f"{labels.shape[0]} labels for a batch of {z.shape[0]}")
    d = softmax(z)
    d[np.arange(z.shape[0]), labels] -= 1.0
    return d


def loss_value(net: Network, inputs: np.ndarray, targets: np.ndarray) -> float:
    """Empirical risk: mean per-sample loss over the given data."""
    z, _ = forward(net, inputs)
    return float(np.mean(per_sample_loss(net.loss, z, targets)))


class PerSampleGrad:
    """``per_layer[i][b]`` is ``vec(DW_i)`` for sample ``b``.

    Built lazily from the captured ``abar`` and ``g``: the batch mean needs no
    per-sample outer products.
    """

    def __init__(self, kinds: Sequence[str], abar: Sequence[np.ndarray], g: Sequence[np.ndarray]):
        self.kinds, self.abar, self.g = list(kinds), list(abar), list(g)
        self._per_layer: Optional[list[np.ndarray]] = None

    @property
    def per_layer(self) -> list[np.ndarray]:
        if self._per_layer is None:
            self._per_layer = [layer_per_sample_grad(k, a, g) for k, a, g in zip(self.kinds, self.abar, self.g)]
        return self._per_layer

    @property
    def batch_size(self) -> int:
        return self.abar[0].shape[0]

    def stacked(self) -> np.ndarray:
        """The factored Jacobian transposed: row ``b`` is the full ``D theta`` of sample ``b``."""
        return np.concatenate(self.per_layer, axis=1)

    def mean(self) -> np.ndarray:
        B = self.batch_size
        parts = []
        for a, g in zip(self.abar, self.g):
            a2, g2 = a.reshape(-1, a.shape[-1]), g.reshape(-1, g.shape[-1])
            parts.append((g2.T @ a2 / B).reshape(-1, order="F"))
        return np.concatenate(parts)


def layer_per_sample_grad(kind: str, abar: np.ndarray, g: np.ndarray) -> np.ndarray:
    B = abar.shape[0]
    if kind == "dense":
        outer = np.einsum("ba,bg->bag", abar, g)
    else:
        outer = np.einsum("bta,btg->bag", abar, g)
    # (B, cols, rows) in C order is the column-major vec of each (rows, cols) matrix
    return outer.reshape(B, -1)


def backward(net: Network, cache: BatchCache, targets: np.ndarray,
             outputs: Optional[np.ndarray] = None) -> tuple[PerSampleGrad, np.ndarray]:
    """Back-propagate ``targets`` through a cached forward pass.

    Stores the pre-activation derivatives in ``cache.g`` (replacing any
    previous ones) and returns the per-sample weight gradients together with
    their batch mean.
    """
    if len(cache.abar) != len(net.layers):
        raise ValueError("cache does not come from this network")
    B = cache.batch_size
    z = outputs
    if z is None:
        last = cache.a[-1]
        z = last.transpose(0, 2, 1).reshape(B, -1) if cache.kinds[-1] == "conv" else last
    Da = loss_grad(net.loss, z, targets)
    gs: list[np.ndarray] = [None] * len(net.layers)
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        deriv = ACTIVATIONS[layer.activation][1]
        s, a = cache.s[i], cache.a[i]
        W = net.weights(i)
        if layer.kind == "dense":
            g = Da.reshape(B, layer.d_out) * deriv(s, a)
        else:
            Da_img = Da.reshape(B, layer.c_out, layer.locations).transpose(0, 2, 1)
            g = Da_img * deriv(s, a)
        gs[i] = g
        if i > 0:
            back = g @ W[:, :-1]  # bias column dropped
            if layer.kind == "conv":
                back = col2im(back, layer).reshape(B, -1)
            Da = back
    cache.g = gs
    cache.targets = np.asarray(targets)
    psg = PerSampleGrad(cache.kinds, cache.abar, gs)
    return psg, psg.mean()


def sample_targets(cache: BatchCache, outputs: np.ndarray, rng_seed) -> np.ndarray:
    """Draw targets from the model's predictive distribution at ``outputs``.

    Squared error: ``y ~ Normal(z, I)``. Cross entropy: ``y ~ Categorical(softmax(z))``,
    returned as integer labels. ``rng_seed`` is an integer seed or a
    ``numpy.random.Generator``.
    """
    rng = np.random.default_rng(rng_seed)
    z = np.asarray(outputs, dtype=float)
    if cache.loss == SQUARED_ERROR:
        return z + rng.standard_normal(z.shape)
    probs = softmax(z)
    cdf = np.cumsum(probs, axis=1)
    u = rng.random((z.shape[0], 1))
    labels = (u > cdf).sum(axis=1)
    return np.minimum(labels, z.shape[1] - 1)
