"""Analytic operation counts for the defense pipeline.

Counts are exact integer functions of layer shapes.  Conventions, fixed so
the numbers are reproducible: one multiply-accumulate in a conv/dense layer
counts as ``mac_factor`` floating point operations (default 2); an FFT costs
5 operations per element per butterfly stage; pooling, ReLU and softmax are
free.  Published totals quote multiply-accumulates directly, i.e. they
correspond to ``mac_factor=1``.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .engine import ModelGraph

MAC_FLOP_FACTOR = 2
FFT_BUTTERFLY_FACTOR = 5

# Published end-to-end totals quoted for context in reports (not estimated here).
PUBLISHED_REFERENCE_FLOPS = {
    "image pipeline (VGG-16 class, 224x224)": 15_300_000_000,
    "image pipeline, alternative defense": 18_300_000_000,
    "audio pipeline (1 s command input)": 500_000_000,
    "audio pipeline, alternative defenses": (1_100_000_000, 1_600_000_000),
}


@dataclass(frozen=True)
class ConvShape:
    out_channels: int
    in_channels: int
    kernel: int
    out_h: int
    out_w: int

    @property
    def macs(self) -> int:
        return self.kernel * self.kernel * self.in_channels * self.out_channels * self.out_h * self.out_w


@dataclass(frozen=True)
class DenseShape:
    n_in: int
    n_out: int

    @property
    def macs(self) -> int:
        return self.n_in * self.n_out


def layer_table(model: ModelGraph) -> list:
    """Cost-relevant layer shapes (conv and dense only)."""
    table = []
    for layer, out_shape in zip(model.layers, model.output_shapes):
        if layer.kind == "conv2d":
            o, c, kh, _ = layer.weights.shape
            table.append(ConvShape(o, c, kh, out_shape[1], out_shape[2]))
        elif layer.kind == "dense":
            o, n = layer.weights.shape
            table.append(DenseShape(n, o))
    return table


def flops_inference(model_or_table, mac_factor: int = MAC_FLOP_FACTOR) -> int:
    """Multiply-accumulate count of all conv/dense layers, times mac_factor."""
    table = layer_table(model_or_table) if isinstance(model_or_table, ModelGraph) else model_or_table
    return mac_factor * sum(entry.macs for entry in table)


def flops_cam(model_or_dims) -> int:
    """Channel-summing cost over the last conv grid: K * h * w additions."""
    if isinstance(model_or_dims, ModelGraph):
        k, h, w = model_or_dims.output_shapes[model_or_dims.last_conv]
    else:
        k, h, w = model_or_dims
    return k * h * w


def _pad_pow2(n: int) -> int:
    p = 1
    while p < n:
        p *= 2
    return p


def _padded_pixels(dims) -> int:
    h, w = dims
    return _pad_pow2(int(h)) * _pad_pow2(int(w))


def flops_fft2d(dims) -> int:
    """5 * n * log2(n) for the power-of-two padded grid."""
    n = _padded_pixels(dims)
    return FFT_BUTTERFLY_FACTOR * n * int(np.log2(n))


def flops_jsc(dims) -> int:
    """n * log2(n) for the bit-mask comparison over the padded grid."""
    n = _padded_pixels(dims)
    return n * int(np.log2(n))


def flops_fft_jsc(image_dims, crop_dims) -> int:
    """Semantic-metric derivation cost: spectrum of the localized crop plus
    the mask comparison.  The crop cannot exceed the image frame."""
    if crop_dims[0] > image_dims[0] or crop_dims[1] > image_dims[1]:
        raise ValueError(f"crop {crop_dims} larger than image {image_dims}")
    return flops_fft2d(crop_dims) + flops_jsc(crop_dims)


def flops_interpolation(patch_pixels: int) -> int:
    """Eight adds and one divide per repaired pixel."""
    if patch_pixels < 0:
        raise ValueError("pixel count must be >= 0")
    return 9 * patch_pixels


def flops_pcc(vector_len: int) -> int:
    """Quadratic model of the correlation over the last-layer distribution."""
    if vector_len < 0:
        raise ValueError("vector length must be >= 0")
    return vector_len * vector_len


@dataclass(frozen=True)
class CostBreakdown:
    """Per-step operation counts; total is always the sum of the parts."""

    inference: int = 0
    cam: int = 0
    fft: int = 0
    jsc: int = 0
    interpolation: int = 0
    pcc: int = 0
    recovery_inference: int = 0
    recovery_head: int = 0

    @property
    def total(self) -> int:
        return sum(getattr(self, f.name) for f in fields(self))

    def rows(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if v:
                yield f.name, v


def _head_macs(model: ModelGraph) -> int:
    macs = 0
    for layer, out_shape in zip(model.layers[model.last_conv + 1:],
                                model.output_shapes[model.last_conv + 1:]):
        if layer.kind == "conv2d":
            o, c, kh, _ = layer.weights.shape
            macs += kh * kh * c * o * out_shape[1] * out_shape[2]
        elif layer.kind == "dense":
            macs += layer.weights.size
    return macs


def pipeline_cost(model: ModelGraph, scenario: str, crop: tuple = (32, 32),
                  include_recovery: bool = True, mac_factor: int = MAC_FLOP_FACTOR) -> CostBreakdown:
    """Operation count of the whole defense for one input.

    Image: inference + localization (CAM) + spectrum/metric + interpolation
    (+ the re-prediction inference).  Audio: inference + correlation
    (+ the head-only recompute after activation denoising).
    """
    c_c = flops_inference(model, mac_factor)
    if scenario == "image":
        img_h, img_w = model.input_shape[-2:]
        crop = (min(crop[0], img_h), min(crop[1], img_w))
        return CostBreakdown(
            inference=c_c,
            cam=flops_cam(model),
            fft=flops_fft2d(crop),
            jsc=flops_jsc(crop),
            interpolation=flops_interpolation(int(np.prod(crop))),
            recovery_inference=c_c if include_recovery else 0,
        )
    if scenario == "audio":
        n_last = int(np.prod(model.output_shapes[model.last_conv]))
        return CostBreakdown(
            inference=c_c,
            pcc=flops_pcc(n_last),
            recovery_head=mac_factor * _head_macs(model) if include_recovery else 0,
        )
    raise ValueError(f"unknown scenario {scenario!r}")


def vgg16_table() -> list:
    """The classic 13-conv/3-dense layer table at 224x224 input."""
    cfg = [(64, 3), (64, 64), "P", (128, 64), (128, 128), "P",
           (256, 128), (256, 256), (256, 256), "P",
           (512, 256), (512, 512), (512, 512), "P",
           (512, 512), (512, 512), (512, 512), "P"]
    table = []
    size = 224
    for entry in cfg:
        if entry == "P":
            size //= 2
            continue
        out_c, in_c = entry
        table.append(ConvShape(out_c, in_c, 3, size, size))
    table.append(DenseShape(512 * 7 * 7, 4096))
    table.append(DenseShape(4096, 4096))
    table.append(DenseShape(4096, 1000))
    return table
