"""Synthetic desk-scale datasets and toy classifiers.

The full-scale models behind the published results are not reproducible
here, so everything in this module is deliberately small: 32x32 grayscale
shape images over 10 classes, and 1-second two-tone "command" clips over 8
classes.  Models use fixed, deterministic convolutional feature banks whose
scales are calibrated on training data, with a trained softmax-regression
head; that keeps the engine free of training machinery while still giving
classifiers accurate enough to attack and defend.
"""

from __future__ import annotations

import numpy as np

from . import dsp, engine
from .engine import LayerSpec, ModelGraph, forward

SHAPE_CLASSES = ("grate", "ring", "square", "frame", "plus", "cross",
                 "hbar", "vbar", "diamond", "wedge")
COMMAND_CLASSES = ("go", "stop", "left", "right", "up", "down", "yes", "no")


# ---------------------------------------------------------------------------
# image data


def _smooth(mask: np.ndarray) -> np.ndarray:
    """Two passes of a [1,2,1] binomial blur; keeps spectra low-frequency."""
    out = mask.astype(np.float64)
    for _ in range(2):
        p = np.pad(out, 1, mode="edge")
        out = (p[:-2] + 2 * p[1:-1] + p[2:])[:, 1:-1] * 0.25
        p = np.pad(out, 1, mode="edge")
        out = (p[:, :-2] + 2 * p[:, 1:-1] + p[:, 2:])[1:-1] * 0.25
    return out


def _draw_shape(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    cy = size / 2 + rng.integers(-3, 4)
    cx = size / 2 + rng.integers(-3, 4)
    radius = rng.integers(9, 13)
    y, x = np.mgrid[0:size, 0:size]
    dy, dx = y - cy, x - cx
    r = np.hypot(dy, dx)
    if kind == "grate":
        mask = ((y + rng.integers(0, 16)) // 8) % 2 == 0
    elif kind == "ring":
        mask = (r <= radius) & (r >= radius - 3.5)
    elif kind == "square":
        mask = (np.abs(dy) <= radius * 0.8) & (np.abs(dx) <= radius * 0.8)
    elif kind == "frame":
        m = np.maximum(np.abs(dy), np.abs(dx))
        mask = (m <= radius * 0.8) & (m >= radius * 0.8 - 3)
    elif kind == "plus":
        mask = ((np.abs(dx) <= 2.5) & (np.abs(dy) <= radius)) | \
               ((np.abs(dy) <= 2.5) & (np.abs(dx) <= radius))
    elif kind == "cross":
        mask = ((np.abs(dy - dx) <= 3) | (np.abs(dy + dx) <= 3)) & (r <= radius * 1.2)
    elif kind == "hbar":
        mask = (np.abs(dy) <= 3) & (np.abs(dx) <= radius * 1.2)
    elif kind == "vbar":
        mask = (np.abs(dx) <= 3) & (np.abs(dy) <= radius * 1.2)
    elif kind == "diamond":
        mask = np.abs(dy) + np.abs(dx) <= radius
    elif kind == "wedge":
        mask = (dy >= -radius * 0.5) & (dy <= radius * 0.5) & \
               (np.abs(dx) <= (dy + radius * 0.5) * 0.7)
    else:
        raise ValueError(kind)
    img = 0.15 + 0.7 * _smooth(mask)
    img += rng.normal(0.0, 0.005, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)[None]


def make_shape_dataset(n_per_class: int, seed: int = 0, size: int = 32):
    """[(name, image [1,size,size], label), ...] with a fixed class order."""
    rng = np.random.default_rng(seed)
    samples = []
    for label in SHAPE_CLASSES:
        for i in range(n_per_class):
            samples.append((f"{label}_{i:04d}", _draw_shape(label, size, rng), label))
    return samples


# ---------------------------------------------------------------------------
# audio data


def _command_tones(class_index: int) -> tuple[float, float]:
    return 400.0 + 320.0 * class_index, 4200.0 - 340.0 * class_index


def _draw_clip(class_index: int, rng: np.random.Generator, sr: int, seconds: float) -> np.ndarray:
    n = int(sr * seconds)
    t = np.arange(n) / sr
    f1, f2 = _command_tones(class_index)
    detune = 1.0 + rng.uniform(-0.02, 0.02)
    wave = 0.45 * np.sin(2 * np.pi * f1 * detune * t + rng.uniform(0, 2 * np.pi))
    wave += 0.35 * np.sin(2 * np.pi * f2 * detune * t + rng.uniform(0, 2 * np.pi))
    envelope = np.minimum(1.0, t / 0.05) * np.exp(-t / rng.uniform(0.8, 1.6))
    wave = wave * envelope + rng.normal(0.0, 0.01, n)
    return np.clip(wave, -1.0, 1.0).astype(np.float32)


def make_command_dataset(n_per_class: int, seed: int = 0, sample_rate: int = 16000,
                         seconds: float = 1.0):
    rng = np.random.default_rng(seed)
    samples = []
    for ci, label in enumerate(COMMAND_CLASSES):
        for i in range(n_per_class):
            samples.append((f"{label}_{i:04d}", _draw_clip(ci, rng, sample_rate, seconds), label))
    return samples


# ---------------------------------------------------------------------------
# fixed convolutional banks


def _oriented_bank() -> np.ndarray:
    """Twelve 9x9 filters: 4 Gabor edges, 4 Gabor bars, center-surround,
    blob, 2 checkers.

    The Gabor carrier plus an envelope elongated along the feature buys real
    orientation selectivity (a step 45 degrees off responds at ~0.6 of peak,
    a perpendicular one at ~0).  All but the blob are zero-mean, so flat
    regions stay quiet while structure (or broadband noise) lights up.
    """
    y, x = np.mgrid[-4:5, -4:5].astype(np.float64)
    filters = []
    for ang in (0.0, np.pi / 4, np.pi / 2, 3 * np.pi / 4):
        u = x * np.cos(ang) + y * np.sin(ang)   # across the feature
        v = -x * np.sin(ang) + y * np.cos(ang)  # along the feature
        env = np.exp(-u ** 2 / (2 * 2.0 ** 2) - v ** 2 / (2 * 3.5 ** 2))
        filters.append(np.sin(2 * np.pi * u / 6.0) * env)   # edge (odd phase)
        filters.append(np.cos(2 * np.pi * u / 6.0) * env)   # bar (even phase)
    gauss = np.exp(-(x ** 2 + y ** 2) / 8.0)
    filters.append((x ** 2 + y ** 2 - 4.0) * gauss)         # center-surround
    blob_index = len(filters)
    filters.append(gauss)                                   # blob (kept low-pass)
    filters.append(np.cos(np.pi * x) * gauss)               # vertical checker
    filters.append(np.cos(np.pi * y) * gauss)               # horizontal checker
    bank = []
    for i, f in enumerate(filters):
        if i != blob_index:
            f = f - f.mean()
        bank.append(f / np.linalg.norm(f))
    return np.stack(bank)[:, None].astype(np.float32)


def _calibrated(layers, input_shape, samples, rng_scale=1.0):
    """Rescale each conv layer so its output std over the samples is ~1.

    Deterministic data-dependent initialization; keeps activations in a
    sane range whatever the input scaling (raw MFCC values are large).
    """
    layers = list(layers)
    for i, layer in enumerate(layers):
        if layer.kind != "conv2d":
            continue
        probe = ModelGraph(tuple(layers[:i + 1]), input_shape, ("x",), i)
        outs = []
        for x in samples:
            _, _, taps = forward(probe, x, tap_layers=(i,))
            outs.append(taps[i])
        std = float(np.std(np.stack(outs)))
        if std > 1e-8:
            layers[i] = LayerSpec("conv2d", weights=(layer.weights / std * rng_scale).astype(np.float32),
                                  bias=layer.bias, stride=layer.stride, padding=layer.padding)
    return layers


def _train_softmax_head(features: np.ndarray, labels: np.ndarray, n_classes: int,
                        iters: int = 1200, lr: float = 1.0, l2: float = 1e-4):
    """Full-batch softmax regression; feature standardization folded into W, b."""
    mu = features.mean(axis=0)
    sd = features.std(axis=0) + 1e-6
    f = (features - mu) / sd
    n, d = f.shape
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), labels] = 1.0
    w = np.zeros((n_classes, d))
    b = np.zeros(n_classes)
    for _ in range(iters):
        z = f @ w.T + b
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        err = (p - onehot) / n
        w -= lr * (err.T @ f + l2 * w)
        b -= lr * err.sum(axis=0)
    w_folded = w / sd
    b_folded = b - w_folded @ mu
    return w_folded.astype(np.float32), b_folded.astype(np.float32)


def _finish_model(body_layers, input_shape, labels, last_conv, train_xs, train_labels,
                  head_iters=1200, ignore_features=()):
    """Attach a trained dense head + softmax behind a feature body.

    ``ignore_features`` pins the head weight of the named feature indices to
    zero: units that stay silent on natural data carry no class information,
    and a weight there would only hand the attacker a lever.
    """
    probe = ModelGraph(tuple(body_layers), input_shape, ("x",), last_conv)
    gap_layer = len(body_layers) - 1
    feats = []
    for x in train_xs:
        _, _, taps = forward(probe, x, tap_layers=(gap_layer,))
        feats.append(taps[gap_layer])
    features = np.stack(feats)
    if ignore_features:
        features[:, list(ignore_features)] = 0.0
    w, b = _train_softmax_head(features, np.asarray(train_labels), len(labels),
                               iters=head_iters)
    if ignore_features:
        w[:, list(ignore_features)] = 0.0
    full = tuple(body_layers) + (engine.dense(w, b), engine.softmax())
    return ModelGraph(full, input_shape, tuple(labels), last_conv)


def train_image_model(train_set, seed: int = 0) -> ModelGraph:
    """Shape classifier: fixed oriented bank, random mix, non-negative 1x1
    energy layer (the tapped last conv), GAP, trained softmax head."""
    rng = np.random.default_rng(seed)
    size = train_set[0][1].shape[-1]
    bank = _oriented_bank()
    n1 = bank.shape[0]
    # conv2 = bank passthroughs + rectified orientation contrasts + random mixes.
    # The contrast channels matter: a disk's orientation-energy vector is the
    # midpoint of square's and diamond's, which no linear head can separate.
    # Pointwise relu(e_a - e_b) pairs fire only where orientation a genuinely
    # dominates, which makes the orientation profile linearly readable.
    e0, b0, e45, b45, e90, b90, e135, b135 = range(8)
    contrasts = [
        {e0: 1, e45: -1}, {e45: 1, e0: -1},
        {e90: 1, e135: -1}, {e135: 1, e90: -1},
        {e0: 1, e135: -1}, {e45: 1, e90: -1},
        {e90: 1, e45: -1}, {e135: 1, e0: -1},
    ]
    n_rand = 12
    blob, chk_v, chk_h = 9, 10, 11
    n2 = n1 + len(contrasts) + n_rand
    w2 = rng.normal(0.0, 1.0, size=(n2, n1, 3, 3)).astype(np.float32)
    w2[:n1 + len(contrasts)] = 0.0
    for i in range(n1):
        w2[i, i, 1, 1] = 1.0
    for j, combo in enumerate(contrasts):
        for ch, coeff in combo.items():
            w2[n1 + j, ch, 1, 1] = coeff
    # Tapped energy layer: 32 mixed channels for the head, plus two channels of
    # amplified pixel-scale checker energy.  Smooth natural shapes never drive
    # the checkers while broadband clutter saturates them, so localization heat
    # spikes exactly where non-semantic content sits; the head, trained on
    # naturals, ends up ignoring these two all-but-silent features.
    w3 = np.abs(rng.normal(0.0, 1.0, size=(n2 + 2, n2, 1, 1))).astype(np.float32)
    w3[:, chk_v] = 0.0
    w3[:, chk_h] = 0.0
    w3[n2:] = 0.0
    w3[n2, chk_v] = 2500.0
    w3[n2 + 1, chk_h] = 2500.0
    body = [
        engine.conv2d(bank, np.zeros(n1), padding=4),
        engine.relu(),
        engine.maxpool2d(2),
        engine.conv2d(w2, np.zeros(n2), padding=1),
        engine.relu(),
        engine.conv2d(w3, np.zeros(n2 + 2)),
        engine.relu(),
        engine.maxpool2d(2),
        engine.global_avg_pool(),
    ]
    calib = [x for _, x, _ in train_set[::max(1, len(train_set) // 40)]]
    body = _calibrated(body, (1, size, size), calib)
    xs = [x for _, x, _ in train_set]
    ys = [SHAPE_CLASSES.index(label) for _, _, label in train_set]
    return _finish_model(body, (1, size, size), SHAPE_CLASSES, last_conv=5,
                         train_xs=xs, train_labels=ys, ignore_features=(n2, n2 + 1))


def train_audio_model(train_set, mfcc_cfg: dsp.MfccConfig = dsp.MfccConfig(),
                      seed: int = 0) -> ModelGraph:
    """Command classifier over MFCC maps; the tapped last conv is a small
    16x4x1 grid so a handful of activations carries each class."""
    rng = np.random.default_rng(seed)
    feats = [dsp.mfcc(wave, mfcc_cfg).astype(np.float32)[None] for _, wave, _ in train_set]
    input_shape = feats[0].shape
    w1 = rng.normal(0.0, 1.0, size=(16, 1, 5, 5)).astype(np.float32)
    w2 = rng.normal(0.0, 1.0, size=(24, 16, 3, 3)).astype(np.float32)
    w3 = np.abs(rng.normal(0.0, 1.0, size=(16, 24, 3, 3))).astype(np.float32)
    body = [
        engine.conv2d(w1, np.zeros(16), stride=2, padding=2),
        engine.relu(),
        engine.maxpool2d(2),
        engine.conv2d(w2, np.zeros(24), stride=2, padding=1),
        engine.relu(),
        engine.maxpool2d(2),
        engine.conv2d(w3, np.zeros(16), stride=2, padding=1),
        engine.relu(),
        engine.global_avg_pool(),
    ]
    calib = feats[::max(1, len(feats) // 40)]
    body = _calibrated(body, input_shape, calib)
    ys = [COMMAND_CLASSES.index(label) for _, _, label in train_set]
    return _finish_model(body, input_shape, COMMAND_CLASSES, last_conv=6,
                         train_xs=feats, train_labels=ys)


def audio_features(dataset, mfcc_cfg: dsp.MfccConfig = dsp.MfccConfig()):
    """Waveform dataset -> feature dataset (names and labels preserved)."""
    return [(name, dsp.mfcc(wave, mfcc_cfg).astype(np.float32)[None], label)
            for name, wave, label in dataset]
