"""Activation-level interpretation.

Two views of what a network responded to:

- activation maximization: gradient-ascend an input until one neuron fires
  as hard as possible (optionally under an L2 + total-variation penalty that
  keeps the pattern smooth and small);
- class activation mapping: per-location channel sums over the last conv
  layer, plus extraction of the input region behind the strongest response.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine
from .engine import ModelGraph, Neuron


class NonFiniteActivationError(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"non-finite activation at ascent step {step}")
        self.step = step


@dataclass(frozen=True)
class AmConfig:
    steps: int = 50
    eta: float = 0.1
    regularized: bool = False
    lam: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.eta < 0:
            raise ValueError("eta must be >= 0")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")


def objective_value(model: ModelGraph, x: np.ndarray, objective) -> float:
    """Scalar value of a gradient objective at input x."""
    t, flat = engine._objective_target(model, objective)
    cur = np.asarray(x, np.float32)
    for layer in model.layers[:t + 1]:
        cur = engine._layer_forward(layer, cur)
    return float(cur.reshape(-1)[flat])


def _tv_gradient(x: np.ndarray) -> np.ndarray:
    """Gradient of the squared-difference total variation."""
    g = np.zeros_like(x)
    d = np.diff(x, axis=-1)
    g[..., 1:] += 2 * d
    g[..., :-1] -= 2 * d
    if x.ndim >= 2:
        d = np.diff(x, axis=-2)
        g[..., 1:, :] += 2 * d
        g[..., :-1, :] -= 2 * d
    return g


def activation_maximization(model: ModelGraph, neuron: Neuron, cfg: AmConfig = AmConfig()):
    """Synthesize the input pattern that most activates one neuron.

    Starts from mid-gray plus uniform noise in [-0.01, 0.01], ascends the
    (optionally penalized) activation with step size eta, and clamps the
    iterate into [0, 1] each step.  Returns (pattern, achieved activation);
    the achieved value is the raw activation, without the penalty.
    """
    engine._objective_target(model, neuron)  # validate early
    rng = np.random.default_rng(cfg.seed)
    x = (0.5 + rng.uniform(-0.01, 0.01, size=model.input_shape)).astype(np.float32)
    for step in range(cfg.steps):
        act = objective_value(model, x, neuron)
        if not np.isfinite(act):
            raise NonFiniteActivationError(step)
        g = engine.input_gradient(model, x, neuron)
        if cfg.regularized:
            x64 = x.astype(np.float64)
            g = g - cfg.lam * (2.0 * x64 + _tv_gradient(x64))
        x = np.clip(x.astype(np.float64) + cfg.eta * g, 0.0, 1.0).astype(np.float32)
    final = objective_value(model, x, neuron)
    if not np.isfinite(final):
        raise NonFiniteActivationError(cfg.steps)
    return x, final


# ---------------------------------------------------------------------------
# class activation mapping and localization


def cam(last_conv_taps: np.ndarray) -> np.ndarray:
    """Per-location sum over all channels of a [K, H, W] tap tensor."""
    t = np.asarray(last_conv_taps)
    if t.ndim != 3:
        raise ValueError(f"expected a 3-D [K,H,W] tap tensor, got rank {t.ndim}")
    return t.astype(np.float64).sum(axis=0)


def total_stride(model: ModelGraph, layer_index: int | None = None) -> int:
    """Input pixels per heatmap cell at the given layer (default: last conv)."""
    if layer_index is None:
        layer_index = model.last_conv
    s = 1
    for layer in model.layers[:layer_index + 1]:
        if layer.kind in ("conv2d", "maxpool2d"):
            s *= layer.stride
    return s


@dataclass(frozen=True)
class Box:
    """Inclusive pixel bounds [y0..y1] x [x0..x1]."""
    y0: int
    x0: int
    y1: int
    x1: int

    def __post_init__(self):
        if self.y0 > self.y1 or self.x0 > self.x1:
            raise ValueError(f"empty box {self}")

    @property
    def height(self):
        return self.y1 - self.y0 + 1

    @property
    def width(self):
        return self.x1 - self.x0 + 1

    @property
    def area(self):
        return self.height * self.width


def _component_bbox(mask: np.ndarray, seed_cell: tuple[int, int]):
    """Bounding box of the 8-connected True component containing seed_cell."""
    h, w = mask.shape
    seen = np.zeros_like(mask, dtype=bool)
    stack = [seed_cell]
    seen[seed_cell] = True
    y0 = y1 = seed_cell[0]
    x0 = x1 = seed_cell[1]
    while stack:
        y, x = stack.pop()
        y0, y1 = min(y0, y), max(y1, y)
        x0, x1 = min(x0, x), max(x1, x)
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                ny, nx = y + dy, x + dx
                if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not seen[ny, nx]:
                    seen[ny, nx] = True
                    stack.append((ny, nx))
    return y0, x0, y1, x1


def localize_primary_region(heatmap: np.ndarray, input_shape, alpha: float,
                            stride: int = 1) -> Box | None:
    """Input-space box behind the strongest heatmap response.

    Thresholds the heatmap at alpha * max, takes the 8-connected region of
    passing cells that contains the argmax cell (ties resolved toward the
    lowest row, then column), scales cell coordinates up by ``stride`` and
    clips to the image bounds.  Returns None when the heatmap has no positive
    cell ("no primary source").
    """
    if not 0 < alpha < 1:
        raise ValueError("alpha must be in (0, 1)")
    hm = np.asarray(heatmap, np.float64)
    if hm.ndim != 2:
        raise ValueError("heatmap must be 2-D")
    peak = hm.max()
    if peak <= 0:
        return None
    mask = hm >= alpha * peak
    seed = np.unravel_index(int(np.argmax(hm)), hm.shape)
    cy0, cx0, cy1, cx1 = _component_bbox(mask, seed)
    img_h, img_w = int(input_shape[-2]), int(input_shape[-1])
    return Box(y0=min(cy0 * stride, img_h - 1),
               x0=min(cx0 * stride, img_w - 1),
               y1=min((cy1 + 1) * stride - 1, img_h - 1),
               x1=min((cx1 + 1) * stride - 1, img_w - 1))


# ---------------------------------------------------------------------------
# image helpers shared by the localization consumers


def crop_image(image: np.ndarray, box: Box) -> np.ndarray:
    """Crop [C,H,W] (or [H,W]) pixels at an inclusive box."""
    img = np.asarray(image)
    if not (0 <= box.y0 and box.y1 < img.shape[-2] and 0 <= box.x0 and box.x1 < img.shape[-1]):
        raise ValueError(f"box {box} outside image of shape {img.shape}")
    return img[..., box.y0:box.y1 + 1, box.x0:box.x1 + 1]


def resize_nearest(image2d: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    img = np.asarray(image2d)
    h, w = img.shape
    rows = (np.arange(out_h) * h) // out_h
    cols = (np.arange(out_w) * w) // out_w
    return img[np.ix_(rows, cols)]


def to_grayscale(image: np.ndarray) -> np.ndarray:
    """Channel mean of [C,H,W]; 2-D inputs pass through."""
    img = np.asarray(image, np.float64)
    return img.mean(axis=0) if img.ndim == 3 else img


def save_pgm(array: np.ndarray, path) -> None:
    """Write a 2-D array as a max-normalized 8-bit ASCII PGM."""
    a = np.asarray(array, np.float64)
    if a.ndim != 2:
        raise ValueError("PGM export needs a 2-D array")
    a = a - a.min()
    peak = a.max()
    pix = np.zeros_like(a, dtype=np.uint8) if peak == 0 else np.round(a / peak * 255).astype(np.uint8)
    with open(path, "w") as f:
        f.write(f"P2\n{a.shape[1]} {a.shape[0]}\n255\n")
        for row in pix:
            f.write(" ".join(str(v) for v in row) + "\n")
