"""Minimal CNN inference engine with activation taps and input gradients.

Tensors are plain numpy arrays in C (row-major) order: images and feature
maps are ``[channels, height, width]`` float32, vectors are 1-D float32.
Weights are stored in float32; every conv/dense reduction accumulates in
float64 before rounding the result back to float32, so forward passes are
bit-deterministic for a given (model, input).

A model is an ordered list of :class:`LayerSpec` plus the input shape, the
class-label table and the index of the last convolutional layer (the layer
whose activations downstream analysis taps).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

LAYER_KINDS = ("conv2d", "relu", "maxpool2d", "global-avg-pool", "dense", "softmax")


class ShapeMismatchError(ValueError):
    """Input or weight shapes do not compose."""


class ObjectiveError(ValueError):
    """Gradient objective references a nonexistent neuron or class."""


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a model graph.

    Only the fields relevant to ``kind`` are meaningful:

    - conv2d: ``weights [out, in, kh, kw]``, ``bias [out]``, ``stride``, ``padding``
    - dense: ``weights [out, in]``, ``bias [out]`` (input is flattened C-order)
    - maxpool2d: ``pool``, ``stride`` (incomplete edge windows are allowed and
      take the max of the elements that exist)
    - relu / global-avg-pool / softmax: no parameters
    """

    kind: str
    weights: np.ndarray | None = None
    bias: np.ndarray | None = None
    stride: int = 1
    padding: int = 0
    pool: int = 2

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.padding < 0:
            raise ValueError("padding must be >= 0")
        if self.kind == "conv2d":
            w = self.weights
            if w is None or w.ndim != 4:
                raise ValueError("conv2d needs 4-D weights [out, in, kh, kw]")
            if self.bias is None or self.bias.shape != (w.shape[0],):
                raise ValueError("conv2d bias must have one entry per filter")
        if self.kind == "dense":
            w = self.weights
            if w is None or w.ndim != 2:
                raise ValueError("dense needs 2-D weights [out, in]")
            if self.bias is None or self.bias.shape != (w.shape[0],):
                raise ValueError("dense bias must have one entry per output")
        if self.kind == "maxpool2d" and self.pool < 1:
            raise ValueError("pool size must be >= 1")


def conv2d(weights, bias, stride=1, padding=0) -> LayerSpec:
    return LayerSpec("conv2d", weights=np.asarray(weights, np.float32),
                     bias=np.asarray(bias, np.float32), stride=stride, padding=padding)


def dense(weights, bias) -> LayerSpec:
    return LayerSpec("dense", weights=np.asarray(weights, np.float32),
                     bias=np.asarray(bias, np.float32))


def relu() -> LayerSpec:
    return LayerSpec("relu")


def maxpool2d(pool=2, stride=None) -> LayerSpec:
    return LayerSpec("maxpool2d", pool=pool, stride=pool if stride is None else stride)


def global_avg_pool() -> LayerSpec:
    return LayerSpec("global-avg-pool")


def softmax() -> LayerSpec:
    return LayerSpec("softmax")


def layer_output_shape(layer: LayerSpec, in_shape: tuple) -> tuple:
    """Shape produced by ``layer`` on an input of ``in_shape``.

    Raises ShapeMismatchError when the shapes do not compose.
    """
    kind = layer.kind
    if kind == "conv2d":
        if len(in_shape) != 3:
            raise ShapeMismatchError(f"conv2d needs [C,H,W] input, got {in_shape}")
        c, h, w = in_shape
        out_c, in_c, kh, kw = layer.weights.shape
        if in_c != c:
            raise ShapeMismatchError(f"conv2d declares {in_c} input channels, got {c}")
        oh = (h + 2 * layer.padding - kh) // layer.stride + 1
        ow = (w + 2 * layer.padding - kw) // layer.stride + 1
        if oh < 1 or ow < 1:
            raise ShapeMismatchError(f"conv2d output dims non-positive for input {in_shape}")
        return (out_c, oh, ow)
    if kind in ("relu", "softmax"):
        return tuple(in_shape)
    if kind == "maxpool2d":
        if len(in_shape) != 3:
            raise ShapeMismatchError(f"maxpool2d needs [C,H,W] input, got {in_shape}")
        c, h, w = in_shape
        s = layer.stride
        # ceil-mode: every window whose first element exists counts
        return (c, (h - 1) // s + 1, (w - 1) // s + 1)
    if kind == "global-avg-pool":
        if len(in_shape) != 3:
            raise ShapeMismatchError(f"global-avg-pool needs [C,H,W] input, got {in_shape}")
        return (in_shape[0],)
    if kind == "dense":
        n = int(np.prod(in_shape))
        out_n, in_n = layer.weights.shape
        if in_n != n:
            raise ShapeMismatchError(f"dense expects {in_n} inputs, got {n} (shape {in_shape})")
        return (out_n,)
    raise ValueError(kind)


@dataclass(frozen=True)
class ModelGraph:
    """Immutable, validated layer pipeline."""

    layers: tuple
    input_shape: tuple
    labels: tuple
    last_conv: int = -1
    output_shapes: tuple = field(default=(), compare=False)

    def __post_init__(self):
        shapes = []
        shape = tuple(self.input_shape)
        for i, layer in enumerate(self.layers):
            try:
                shape = layer_output_shape(layer, shape)
            except ShapeMismatchError as e:
                prev = f"layer {i - 1} ({self.layers[i - 1].kind})" if i else "the input"
                raise ShapeMismatchError(f"layer {i} ({layer.kind}) does not compose with {prev}: {e}") from e
            shapes.append(shape)
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "labels", tuple(self.labels))
        object.__setattr__(self, "output_shapes", tuple(shapes))
        for i, layer in enumerate(self.layers[:-1]):
            if layer.kind == "softmax":
                raise ValueError(f"softmax at layer {i} is not the final layer")
        has_conv = any(l.kind == "conv2d" for l in self.layers)
        if has_conv:
            if not (0 <= self.last_conv < len(self.layers)) or self.layers[self.last_conv].kind != "conv2d":
                raise ValueError("last_conv must designate a conv2d layer")
        elif self.last_conv != -1:
            raise ValueError("last_conv set on a model without conv layers")

    @property
    def num_classes(self) -> int:
        return len(self.labels)

    def layer_input_shape(self, i: int) -> tuple:
        return self.input_shape if i == 0 else self.output_shapes[i - 1]


class InferenceCounter:
    """Per-call instrumentation of how many network passes a defense ran."""

    def __init__(self):
        self.full_passes = 0
        self.head_passes = 0

    def __repr__(self):
        return f"InferenceCounter(full={self.full_passes}, head={self.head_passes})"


# ---------------------------------------------------------------------------
# layer forward kernels


def conv2d_forward(x: np.ndarray, layer: LayerSpec) -> np.ndarray:
    """Zero-padded strided cross-correlation.

    out[f, y, x] = bias[f] + sum_{c,dy,dx} w[f,c,dy,dx] * in[c, y*s+dy-p, x*s+dx-p]
    """
    out_c, oh, ow = layer_output_shape(layer, x.shape)
    p, s = layer.padding, layer.stride
    _, _, kh, kw = layer.weights.shape
    xp = np.pad(x.astype(np.float64), ((0, 0), (p, p), (p, p)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::s, ::s][:, :oh, :ow]
    out = np.einsum("fckl,cyxkl->fyx", layer.weights.astype(np.float64), win)
    out += layer.bias.astype(np.float64)[:, None, None]
    return out.astype(np.float32)


def _maxpool_windows(x: np.ndarray, layer: LayerSpec):
    """Stride-sampled [C, OH, OW, q*q] window view, edge windows padded with -inf."""
    c, h, w = x.shape
    q, s = layer.pool, layer.stride
    oh, ow = (h - 1) // s + 1, (w - 1) // s + 1
    need_h, need_w = (oh - 1) * s + q, (ow - 1) * s + q
    xp = np.pad(x, ((0, 0), (0, need_h - h), (0, need_w - w)), constant_values=-np.inf)
    win = np.lib.stride_tricks.sliding_window_view(xp, (q, q), axis=(1, 2))
    return win[:, ::s, ::s][:, :oh, :ow].reshape(c, oh, ow, q * q)


def _layer_forward(layer: LayerSpec, x: np.ndarray) -> np.ndarray:
    kind = layer.kind
    if kind == "conv2d":
        return conv2d_forward(x, layer)
    if kind == "relu":
        return np.maximum(x, 0)
    if kind == "maxpool2d":
        return _maxpool_windows(x, layer).max(axis=3)
    if kind == "global-avg-pool":
        return x.astype(np.float64).mean(axis=(1, 2)).astype(np.float32)
    if kind == "dense":
        acc = layer.weights.astype(np.float64) @ x.reshape(-1).astype(np.float64)
        return (acc + layer.bias.astype(np.float64)).astype(np.float32)
    if kind == "softmax":
        z = x.astype(np.float64)
        z = z - z.max()
        e = np.exp(z)
        return (e / e.sum()).astype(np.float32)
    raise ValueError(kind)


def forward(model: ModelGraph, x: np.ndarray, tap_layers: Iterable[int] = (),
            counter: InferenceCounter | None = None):
    """Run the full pipeline.

    Returns ``(output, predicted_class_index, taps)`` where ``taps`` maps each
    requested layer index to that layer's output tensor.  Prediction ties are
    broken toward the lowest class index.
    """
    x = np.asarray(x, np.float32)
    if tuple(x.shape) != model.input_shape:
        raise ShapeMismatchError(f"input shape {x.shape} != model input {model.input_shape}")
    taps_wanted = set(tap_layers)
    bad = taps_wanted - set(range(len(model.layers)))
    if bad:
        raise ObjectiveError(f"tap layer indices out of range: {sorted(bad)}")
    if counter is not None:
        counter.full_passes += 1
    taps = {}
    for i, layer in enumerate(model.layers):
        x = _layer_forward(layer, x)
        if i in taps_wanted:
            taps[i] = x
    return x, int(np.argmax(x)), taps


def forward_from(model: ModelGraph, start_layer: int, x: np.ndarray,
                 counter: InferenceCounter | None = None):
    """Re-run only layers ``start_layer..end`` on a (possibly edited) tensor."""
    if not 0 <= start_layer <= len(model.layers):
        raise ObjectiveError(f"start layer {start_layer} out of range")
    expect = model.layer_input_shape(start_layer) if start_layer < len(model.layers) \
        else model.output_shapes[-1]
    if tuple(x.shape) != tuple(expect):
        raise ShapeMismatchError(f"tensor shape {x.shape} != layer {start_layer} input {expect}")
    if counter is not None:
        counter.head_passes += 1
    x = np.asarray(x, np.float32)
    for layer in model.layers[start_layer:]:
        x = _layer_forward(layer, x)
    return x, int(np.argmax(x))


# ---------------------------------------------------------------------------
# input gradients


@dataclass(frozen=True)
class Neuron:
    """Flat index into the output tensor of one layer."""
    layer: int
    index: int


@dataclass(frozen=True)
class ClassLogit:
    """Pre-softmax score of one class (the final output if there is no softmax)."""
    class_index: int


def _conv2d_backward(layer: LayerSpec, x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    c, h, w = x.shape
    _, oh, ow = dy.shape
    p, s = layer.padding, layer.stride
    _, _, kh, kw = layer.weights.shape
    g_win = np.einsum("fckl,fyx->cyxkl", layer.weights.astype(np.float64), dy)
    dxp = np.zeros((c, h + 2 * p, w + 2 * p))
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + s * oh:s, j:j + s * ow:s] += g_win[:, :, :, i, j]
    return dxp[:, p:p + h, p:p + w]


def _maxpool_backward(layer: LayerSpec, x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    c, h, w = x.shape
    q, s = layer.pool, layer.stride
    win = _maxpool_windows(x, layer)
    arg = win.argmax(axis=3)  # ties -> first element (lowest dy, dx)
    _, oh, ow = arg.shape
    ci, yi, xi = np.meshgrid(np.arange(c), np.arange(oh), np.arange(ow), indexing="ij")
    rows = yi * s + arg // q
    cols = xi * s + arg % q
    dx = np.zeros((c, h, w))
    np.add.at(dx, (ci.ravel(), rows.ravel(), cols.ravel()), dy.ravel())
    return dx


def _layer_backward(layer: LayerSpec, x: np.ndarray, y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    kind = layer.kind
    if kind == "conv2d":
        return _conv2d_backward(layer, x, dy)
    if kind == "relu":
        return dy * (x > 0)  # subgradient at exactly 0 is 0
    if kind == "maxpool2d":
        return _maxpool_backward(layer, x, dy)
    if kind == "global-avg-pool":
        _, h, w = x.shape
        return np.broadcast_to(dy[:, None, None] / (h * w), x.shape).copy()
    if kind == "dense":
        return (layer.weights.astype(np.float64).T @ dy).reshape(x.shape)
    if kind == "softmax":
        prob = y.astype(np.float64)
        return prob * (dy - float(prob @ dy))
    raise ValueError(kind)


def _objective_target(model: ModelGraph, objective) -> tuple[int, int]:
    """Resolve an objective to (layer index, flat output index)."""
    if isinstance(objective, Neuron):
        if not 0 <= objective.layer < len(model.layers):
            raise ObjectiveError(f"layer {objective.layer} out of range")
        n = int(np.prod(model.output_shapes[objective.layer]))
        if not 0 <= objective.index < n:
            raise ObjectiveError(f"neuron index {objective.index} out of range for layer "
                                 f"{objective.layer} ({n} outputs)")
        return objective.layer, objective.index
    if isinstance(objective, ClassLogit):
        t = len(model.layers) - 1
        if model.layers[t].kind == "softmax":
            t -= 1
        if t < 0:
            raise ObjectiveError("model has no pre-softmax layer")
        n = int(np.prod(model.output_shapes[t]))
        if not 0 <= objective.class_index < n:
            raise ObjectiveError(f"class index {objective.class_index} out of range ({n} classes)")
        return t, objective.class_index
    raise ObjectiveError(f"unsupported objective {objective!r}")


def seeded_input_gradient(model: ModelGraph, x: np.ndarray, layer_index: int,
                          seed: np.ndarray) -> np.ndarray:
    """Gradient of sum(seed * layer_index's output) with respect to the input.

    The workhorse behind `input_gradient` and loss-style gradients (a loss
    gradient is a linear combination of output-element gradients).
    """
    if not 0 <= layer_index < len(model.layers):
        raise ObjectiveError(f"layer {layer_index} out of range")
    x = np.asarray(x, np.float32)
    if tuple(x.shape) != model.input_shape:
        raise ShapeMismatchError(f"input shape {x.shape} != model input {model.input_shape}")
    inputs, outputs = [], []
    cur = x
    for layer in model.layers[:layer_index + 1]:
        inputs.append(cur)
        cur = _layer_forward(layer, cur)
        outputs.append(cur)
    dy = np.asarray(seed, np.float64).reshape(model.output_shapes[layer_index])
    for i in range(layer_index, -1, -1):
        dy = _layer_backward(model.layers[i], inputs[i], outputs[i], dy)
    return dy


def input_gradient(model: ModelGraph, x: np.ndarray, objective) -> np.ndarray:
    """Gradient of a scalar objective with respect to every input element.

    The objective is either one :class:`Neuron` activation or one
    :class:`ClassLogit`.  Returned in float64 with the input's shape.
    """
    t, flat = _objective_target(model, objective)
    dy = np.zeros(int(np.prod(model.output_shapes[t])))
    dy[flat] = 1.0
    return seeded_input_gradient(model, x, t, dy)
