"""Desk-scale attack generators used to exercise the defense.

Image attacks paste a patch (uniform high-frequency noise, or one optimized
by gradient ascent on the target class logit).  Audio attacks are FGSM/BIM.

NOTE: the audio attacks perturb the MFCC *feature map*, not the waveform --
the front end is not differentiated here, and the defended classifier
consumes features, so the threat model stays coherent.  `fgsm_audio` /
`bim_audio` therefore return a feature tensor even when handed a waveform.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import dsp, profiles
from .engine import ClassLogit, ModelGraph, ObjectiveError, _layer_forward, forward, \
    input_gradient, seeded_input_gradient


@dataclass(frozen=True)
class PatchSpec:
    """size: square side in pixels; location: (y, x) or "random";
    content: high-frequency-random | optimized | file."""

    size: int
    location: object = "random"
    content: str = "high-frequency-random"
    path: str | None = None

    def __post_init__(self):
        if self.size < 0:
            raise ValueError("patch size must be >= 0")
        if self.content not in ("high-frequency-random", "optimized", "file"):
            raise ValueError(f"unknown patch content {self.content!r}")


def apply_patch(image: np.ndarray, patch: np.ndarray, location) -> np.ndarray:
    """Pixel-replacement composite of a [C,h,w] patch at (y, x)."""
    image = np.asarray(image)
    patch = np.asarray(patch)
    if patch.size == 0:
        return image.copy()
    y, x = location
    _, h, w = patch.shape
    if y < 0 or x < 0 or y + h > image.shape[-2] or x + w > image.shape[-1]:
        raise ValueError(f"patch {h}x{w} at ({y},{x}) outside image {image.shape}")
    out = image.copy()
    out[..., y:y + h, x:x + w] = patch
    return out


def random_patch(channels: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform per-pixel noise: cheap stand-in with a broadband spectrum."""
    return rng.uniform(0.0, 1.0, size=(channels, size, size)).astype(np.float32)


def pick_location(image_shape, size: int, rng: np.random.Generator) -> tuple[int, int]:
    h, w = int(image_shape[-2]), int(image_shape[-1])
    if size > h or size > w:
        raise ValueError(f"patch of {size} does not fit into {h}x{w}")
    return int(rng.integers(0, h - size + 1)), int(rng.integers(0, w - size + 1))


def _logits(model: ModelGraph, x: np.ndarray) -> np.ndarray:
    """Pre-softmax output (softmax is argmax-monotone, so this also predicts)."""
    t = len(model.layers) - 1
    if model.layers[t].kind == "softmax":
        t -= 1
    cur = np.asarray(x, np.float32)
    for layer in model.layers[:t + 1]:
        cur = _layer_forward(layer, cur)
    return cur


@dataclass
class PatchOptimizationResult:
    patch: np.ndarray
    objectives: list      # mean target logit at each accepted iterate
    fooling_rates: list   # targeted misclassification rate at each accepted iterate
    best_step: int


def optimize_patch(model: ModelGraph, target_class: int, spec: PatchSpec, steps: int,
                   eta: float, train_images, seed: int = 0) -> PatchOptimizationResult:
    """Gradient-ascend a patch on the mean target-class logit over a pool.

    Steps that would lower the objective are reverted (and the step size
    halved), so the objective is non-decreasing over accepted iterates; the
    returned patch is the accepted iterate with the highest targeted fooling
    rate (earliest wins on ties).
    """
    if not 0 <= target_class < model.num_classes:
        raise ObjectiveError(f"target class {target_class} out of range")
    rng = np.random.default_rng(seed)
    channels = model.input_shape[0]
    patch = random_patch(channels, spec.size, rng)
    locations = [spec.location if spec.location != "random"
                 else pick_location(model.input_shape, spec.size, rng)
                 for _ in train_images]

    def assess(p):
        logit_sum, fooled = 0.0, 0
        grad = np.zeros_like(p, dtype=np.float64)
        for img, (y, x) in zip(train_images, locations):
            composite = apply_patch(img, p, (y, x))
            g = input_gradient(model, composite, ClassLogit(target_class))
            grad += g[:, y:y + spec.size, x:x + spec.size]
            z = _logits(model, composite)
            logit_sum += float(z[target_class])
            fooled += int(np.argmax(z)) == target_class
        n = len(train_images)
        return logit_sum / n, fooled / n, grad / n

    obj, rate, grad = assess(patch)
    if not np.isfinite(obj):
        raise ValueError("non-finite patch objective at initialization")
    result = PatchOptimizationResult(patch.copy(), [obj], [rate], 0)
    best_rate = rate
    step_size = eta
    for _ in range(steps):
        cand = np.clip(patch + step_size * grad, 0.0, 1.0).astype(np.float32)
        cand_obj, cand_rate, cand_grad = assess(cand)
        if not np.isfinite(cand_obj):
            raise ValueError("non-finite patch objective during ascent")
        if cand_obj < obj:
            step_size *= 0.5
            continue
        patch, obj, rate, grad = cand, cand_obj, cand_rate, cand_grad
        result.objectives.append(obj)
        result.fooling_rates.append(rate)
        if rate > best_rate:
            best_rate = rate
            result.patch = patch.copy()
            result.best_step = len(result.objectives) - 1
    return result


# ---------------------------------------------------------------------------
# audio (feature-space) attacks


def _loss_gradient(model: ModelGraph, feats: np.ndarray, label: int) -> np.ndarray:
    """d(cross-entropy)/d(input): one backward seeded with (p - onehot)."""
    t = len(model.layers) - 1
    if model.layers[t].kind != "softmax":
        raise ObjectiveError("loss gradient needs a softmax model")
    probs, _, _ = forward(model, feats)
    seed = probs.astype(np.float64)
    seed[label] -= 1.0
    return seeded_input_gradient(model, feats, t - 1, seed)


def fgsm_audio(model: ModelGraph, waveform: np.ndarray, epsilon: float,
               label: int | None = None, target: int | None = None,
               mfcc_cfg: dsp.MfccConfig = dsp.MfccConfig()) -> np.ndarray:
    """One signed-gradient step of size epsilon on the MFCC feature map.

    Untargeted by default (ascends the loss at ``label``, or at the current
    prediction when no label is given); with ``target`` it descends the loss
    toward that class instead.  The perturbed FEATURE tensor is returned.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    feats = profiles.ensure_features(model, waveform, mfcc_cfg)
    if epsilon == 0:
        return feats
    if target is not None:
        g = _loss_gradient(model, feats, target)
        return (feats - epsilon * np.sign(g)).astype(np.float32)
    if label is None:
        _, label, _ = forward(model, feats)
    g = _loss_gradient(model, feats, label)
    return (feats + epsilon * np.sign(g)).astype(np.float32)


def bim_audio(model: ModelGraph, waveform: np.ndarray, epsilon: float, step: float,
              iters: int, label: int | None = None, target: int | None = None,
              mfcc_cfg: dsp.MfccConfig = dsp.MfccConfig()) -> np.ndarray:
    """Iterated FGSM with per-step projection into the epsilon ball."""
    if epsilon < 0 or step < 0:
        raise ValueError("epsilon and step must be >= 0")
    orig = profiles.ensure_features(model, waveform, mfcc_cfg)
    if epsilon == 0 or iters == 0:
        return orig
    if label is None and target is None:
        _, label, _ = forward(model, orig)
    x = orig
    for _ in range(iters):
        x = fgsm_audio(model, x, step, label=label, target=target, mfcc_cfg=mfcc_cfg)
        x = np.clip(x, orig - epsilon, orig + epsilon).astype(np.float32)
    return x
