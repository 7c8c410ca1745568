"""Self-verification and data recovery around a single model prediction.

Detection compares the evidence behind a prediction against the predicted
class's reference profile and flags the input when the inconsistency
exceeds a threshold.  Recovery then either repairs the image region behind
the suspicious activations (neighbor interpolation) or suppresses the
suspicious activations directly and re-runs the classifier head.

Each detector costs exactly one full network inference; recovery adds at
most one more (image) or a head-only recompute (audio).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import dsp, interpret, metrics, profiles
from .engine import InferenceCounter, ModelGraph, forward, forward_from
from .interpret import Box

IMAGE_THRESHOLD = 0.46
AUDIO_THRESHOLD = 0.11
DEFAULT_TOP_K = 6

NATURAL = "natural"
ADVERSARIAL = "adversarial"
INDETERMINATE = "indeterminate"


class RecoveryImpossibleError(ValueError):
    """The suspicious region leaves no clean pixels to interpolate from."""


@dataclass
class DetectionReport:
    """Outcome of one self-verification pass.

    Record line field order: modality, predicted, inconsistency, threshold,
    verdict, region (y0,x0,y1,x1 or -), flagged (comma-joined indices or -),
    time_ms.
    """

    modality: str
    predicted: str
    predicted_index: int
    inconsistency: float | None
    threshold: float
    verdict: str
    region: Box | None = None
    flagged_indices: tuple | None = None
    elapsed_ms: float = 0.0
    note: str = ""

    def to_record(self, with_timing: bool = True) -> str:
        d = "-" if self.inconsistency is None else f"{self.inconsistency:.6f}"
        region = "-" if self.region is None else \
            f"{self.region.y0},{self.region.x0},{self.region.y1},{self.region.x1}"
        flagged = "-" if not self.flagged_indices else ",".join(map(str, self.flagged_indices))
        parts = [f"modality={self.modality}", f"predicted={self.predicted}", f"d={d}",
                 f"threshold={self.threshold:.6f}", f"verdict={self.verdict}",
                 f"region={region}", f"flagged={flagged}"]
        if with_timing:
            parts.append(f"time_ms={self.elapsed_ms:.3f}")
        return " ".join(parts)


@dataclass
class RecoveryOutcome:
    """Recovered input (image) or denoised activation tensor (audio) plus re-prediction.

    Record line field order: label, old_top1, new_top1.
    """

    recovered: np.ndarray
    label: str
    label_index: int
    old_top1: float
    new_top1: float

    def to_record(self) -> str:
        return f"label={self.label} old_top1={self.old_top1:.6f} new_top1={self.new_top1:.6f}"


@dataclass(frozen=True)
class DefendConfig:
    modality: str = "image"
    image_threshold: float = IMAGE_THRESHOLD
    activation_threshold: float = AUDIO_THRESHOLD
    alpha: float = 0.7
    k: int = DEFAULT_TOP_K
    mfcc: dsp.MfccConfig = field(default_factory=dsp.MfccConfig)
    combined: bool = False


def _verdict(d: float, threshold: float) -> str:
    return ADVERSARIAL if d > threshold else NATURAL


# ---------------------------------------------------------------------------
# image scenario


def _detect_image_impl(model, image, store, threshold, alpha, counter):
    store.require_coverage(model, "image")
    t0 = time.perf_counter()
    bits, box, pred, probs = profiles.image_pattern(
        model, image, alpha, store.crop_size, counter=counter)
    label = model.labels[pred]
    if bits is None:
        report = DetectionReport("image", label, pred, None, threshold, INDETERMINATE,
                                 note="no primary source")
    else:
        d = metrics.jaccard_inconsistency(bits, store.image[label].pattern)
        report = DetectionReport("image", label, pred, d, threshold, _verdict(d, threshold),
                                 region=box)
    report.elapsed_ms = (time.perf_counter() - t0) * 1e3
    return report, probs


def detect_image(model: ModelGraph, image: np.ndarray, store: profiles.ProfileStore,
                 threshold: float = IMAGE_THRESHOLD, alpha: float = 0.7,
                 counter: InferenceCounter | None = None) -> DetectionReport:
    """Self-verify an image prediction at the cost of one inference."""
    report, _ = _detect_image_impl(model, image, store, threshold, alpha, counter)
    return report


def neighbor_interpolate(image: np.ndarray, region: Box) -> np.ndarray:
    """Replace region pixels by the mean of their up-to-8 in-bounds neighbors.

    All means are taken from a snapshot of the incoming image in a single
    pass, so the result does not depend on any scan order.
    """
    img = np.asarray(image, np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[None]
    _, h, w = img.shape
    if not (0 <= region.y0 and region.y1 < h and 0 <= region.x0 and region.x1 < w):
        raise ValueError(f"region {region} outside image {h}x{w}")
    if region.height == h and region.width == w:
        raise RecoveryImpossibleError("region covers the whole image")
    padded = np.pad(img, ((0, 0), (1, 1), (1, 1)))
    box_sum = sum(padded[:, 1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
                  for dy in (-1, 0, 1) for dx in (-1, 0, 1))
    ones = np.pad(np.ones((h, w)), 1)
    count = sum(ones[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
                for dy in (-1, 0, 1) for dx in (-1, 0, 1)) - 1.0
    neigh_mean = (box_sum - img) / count
    out = img.copy()
    sl = (slice(None), slice(region.y0, region.y1 + 1), slice(region.x0, region.x1 + 1))
    out[sl] = neigh_mean[sl]
    out = out.astype(np.float32)
    return out[0] if squeeze else out


def recover_image(model: ModelGraph, image: np.ndarray, region: Box,
                  counter: InferenceCounter | None = None,
                  original_output: np.ndarray | None = None) -> RecoveryOutcome:
    """Inpaint the flagged region and re-predict (one inference).

    ``original_output`` lets callers that already ran detection supply the
    pre-recovery output vector; otherwise one extra pass measures it.
    """
    if original_output is None:
        original_output, _, _ = forward(model, image, counter=counter)
    recovered = neighbor_interpolate(image, region)
    probs, pred, _ = forward(model, recovered, counter=counter)
    return RecoveryOutcome(recovered=recovered, label=model.labels[pred], label_index=pred,
                           old_top1=float(np.max(original_output)), new_top1=float(probs[pred]))


# ---------------------------------------------------------------------------
# audio scenario


def _detect_audio_impl(model, waveform, store, threshold, mfcc_cfg, counter):
    store.require_coverage(model, "audio")
    t0 = time.perf_counter()
    feats = profiles.ensure_features(model, waveform, mfcc_cfg)
    probs, pred, taps = forward(model, feats, tap_layers=(model.last_conv,), counter=counter)
    label = model.labels[pred]
    prof = store.audio[label]
    f_pra = profiles.activation_distribution(taps[model.last_conv])
    try:
        d = metrics.pearson_inconsistency(f_pra, prof.f_exp)
    except metrics.DegenerateDistributionError as e:
        report = DetectionReport("audio", label, pred, None, threshold, INDETERMINATE, note=str(e))
    else:
        verdict = _verdict(d, threshold)
        flagged = prof.top_k if verdict == ADVERSARIAL else None
        report = DetectionReport("audio", label, pred, d, threshold, verdict,
                                 flagged_indices=flagged)
    report.elapsed_ms = (time.perf_counter() - t0) * 1e3
    return report, probs, taps


def detect_audio(model: ModelGraph, waveform: np.ndarray, store: profiles.ProfileStore,
                 threshold: float = AUDIO_THRESHOLD,
                 mfcc_cfg: dsp.MfccConfig = dsp.MfccConfig(),
                 counter: InferenceCounter | None = None) -> DetectionReport:
    """Self-verify an audio prediction; accepts a waveform or a feature map."""
    report, _, _ = _detect_audio_impl(model, waveform, store, threshold, mfcc_cfg, counter)
    return report


def recover_audio(model: ModelGraph, taps: dict, store: profiles.ProfileStore,
                  wrong_class: str, k: int = DEFAULT_TOP_K,
                  counter: InferenceCounter | None = None,
                  original_output: np.ndarray | None = None) -> RecoveryOutcome:
    """Suppress the wrong class's top-k signature activations and re-run the head."""
    if wrong_class not in store.audio:
        raise profiles.MissingProfileError(f"no audio profile for {wrong_class!r}")
    prof = store.audio[wrong_class]
    suppress = profiles.top_k_indices(prof.f_exp, k)
    tensor = np.array(taps[model.last_conv], np.float32)
    flat = tensor.reshape(-1)
    if suppress:
        flat[list(suppress)] = 0.0
    old_top1 = float(np.max(original_output)) if original_output is not None else float("nan")
    probs, pred = forward_from(model, model.last_conv + 1, tensor, counter=counter)
    return RecoveryOutcome(recovered=tensor, label=model.labels[pred], label_index=pred,
                           old_top1=old_top1, new_top1=float(probs[pred]))


# ---------------------------------------------------------------------------
# full flow


def _detect_combined_impl(model, image, store, cfg, counter):
    """Optional dual check for images: semantic and activation inconsistency
    off the same single forward pass; either one can raise the flag."""
    store.require_coverage(model, "image")
    store.require_coverage(model, "audio")
    t0 = time.perf_counter()
    probs, pred, taps = forward(model, image, tap_layers=(model.last_conv,), counter=counter)
    label = model.labels[pred]
    tap = taps[model.last_conv]
    heat = interpret.cam(tap)
    box = interpret.localize_primary_region(heat, model.input_shape, cfg.alpha,
                                            stride=interpret.total_stride(model))
    d_sem = None
    if box is not None:
        crop = interpret.to_grayscale(interpret.crop_image(image, box))
        crop = interpret.resize_nearest(crop, store.crop_size, store.crop_size)
        bits = dsp.binarize_spectrum(dsp.fft2d(crop))
        d_sem = metrics.jaccard_inconsistency(bits, store.image[label].pattern)
    try:
        d_act = metrics.pearson_inconsistency(
            profiles.activation_distribution(tap), store.audio[label].f_exp)
    except metrics.DegenerateDistributionError:
        d_act = None
    if d_sem is None and d_act is None:
        report = DetectionReport("image", label, pred, None, cfg.image_threshold,
                                 INDETERMINATE, note="both metrics degenerate")
    else:
        flag = (d_sem is not None and d_sem > cfg.image_threshold) or \
               (d_act is not None and d_act > cfg.activation_threshold)
        d_main = d_sem if d_sem is not None else d_act
        report = DetectionReport("image", label, pred, d_main, cfg.image_threshold,
                                 ADVERSARIAL if flag else NATURAL, region=box,
                                 note=f"d_act={'-' if d_act is None else f'{d_act:.6f}'}")
    report.elapsed_ms = (time.perf_counter() - t0) * 1e3
    return report, probs


def defend(model: ModelGraph, x: np.ndarray, store: profiles.ProfileStore,
           config: DefendConfig = DefendConfig(),
           counter: InferenceCounter | None = None):
    """Detect, and on an adversarial verdict recover and re-predict.

    Returns (final label, DetectionReport, RecoveryOutcome or None).  Natural
    and indeterminate verdicts keep the original prediction.
    """
    if config.modality == "image":
        if config.combined:
            report, probs = _detect_combined_impl(model, x, store, config, counter)
        else:
            report, probs = _detect_image_impl(model, x, store, config.image_threshold,
                                               config.alpha, counter)
        if report.verdict == ADVERSARIAL and report.region is not None:
            try:
                outcome = recover_image(model, x, report.region, counter=counter,
                                        original_output=probs)
            except RecoveryImpossibleError as e:
                report.note = str(e)
                return report.predicted, report, None
            return outcome.label, report, outcome
        return report.predicted, report, None
    if config.modality == "audio":
        report, probs, taps = _detect_audio_impl(model, x, store, config.activation_threshold,
                                                 config.mfcc, counter)
        if report.verdict == ADVERSARIAL:
            outcome = recover_audio(model, taps, store, report.predicted, config.k,
                                    counter=counter, original_output=probs)
            return outcome.label, report, outcome
        return report.predicted, report, None
    raise ValueError(f"unknown modality {config.modality!r}")
