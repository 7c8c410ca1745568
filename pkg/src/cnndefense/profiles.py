"""Per-class reference data the detectors compare against.

For images each class stores the expected binary spectrum of its primary
input pattern (majority vote over correctly classified samples).  For audio
each class stores the mean last-conv activation-magnitude distribution plus
the top-k index set.  A store is bound to one model through a fingerprint of
the model's canonical bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import dsp, interpret
from .engine import InferenceCounter, ModelGraph, forward
from .modelio import model_fingerprint

PROFILE_MAGIC = b"LNCP"
PROFILE_VERSION = 1

DEFAULT_CROP_SIZE = 32
DEFAULT_SAMPLES_PER_CLASS = 100


class ProfileFormatError(ValueError):
    """Profile file bytes do not parse."""


class FingerprintMismatchError(ValueError):
    """Store was built for a different model."""


class MissingProfileError(KeyError):
    """Detection requested for a class the store does not cover."""


class InsufficientSamplesError(ValueError):
    def __init__(self, label: str, wanted: int, achieved: int):
        super().__init__(f"class {label!r}: need {wanted} correctly-classified samples, got {achieved}")
        self.achieved = achieved


@dataclass(frozen=True)
class ImageClassProfile:
    label: str
    pattern: np.ndarray  # uint8 {0,1} [H, W]
    sample_count: int


@dataclass(frozen=True)
class AudioClassProfile:
    label: str
    f_exp: np.ndarray  # float32, mean |last-conv activation| in C order
    k: int
    top_k: tuple
    sample_count: int


def top_k_indices(f_exp: np.ndarray, k: int) -> tuple:
    """Indices of the k largest entries; ties go to the lowest index."""
    f = np.asarray(f_exp)
    if not 0 <= k <= f.size:
        raise ValueError(f"k={k} out of range for a vector of {f.size}")
    order = np.argsort(-f, kind="stable")[:k]
    return tuple(sorted(int(i) for i in order))


@dataclass
class ProfileStore:
    fingerprint: int
    config: dict = field(default_factory=dict)
    image: dict = field(default_factory=dict)  # label -> ImageClassProfile
    audio: dict = field(default_factory=dict)  # label -> AudioClassProfile

    @property
    def crop_size(self) -> int:
        return int(self.config.get("crop_size", DEFAULT_CROP_SIZE))

    def verify_model(self, model: ModelGraph) -> None:
        fp = model_fingerprint(model)
        if fp != self.fingerprint:
            raise FingerprintMismatchError(
                f"store fingerprint {self.fingerprint:#018x} != model {fp:#018x}")

    def require_coverage(self, model: ModelGraph, kind: str) -> None:
        """Detection precondition: fingerprint matches and every class has a profile."""
        self.verify_model(model)
        table = self.image if kind == "image" else self.audio
        missing = [l for l in model.labels if l not in table]
        if missing:
            raise MissingProfileError(f"no {kind} profile for classes: {missing}")


# ---------------------------------------------------------------------------
# evidence extraction (shared with the detectors)


def image_pattern(model: ModelGraph, image: np.ndarray, alpha: float, crop_size: int,
                  counter: InferenceCounter | None = None):
    """One forward pass worth of image evidence.

    Returns (bits, box, predicted_index, output) where bits is the binarized
    spectrum of the localized primary pattern, or (None, None, pred, output)
    when no primary source is found.
    """
    probs, pred, taps = forward(model, image, tap_layers=(model.last_conv,), counter=counter)
    heat = interpret.cam(taps[model.last_conv])
    box = interpret.localize_primary_region(
        heat, model.input_shape, alpha, stride=interpret.total_stride(model))
    if box is None:
        return None, None, pred, probs
    crop = interpret.to_grayscale(interpret.crop_image(image, box))
    crop = interpret.resize_nearest(crop, crop_size, crop_size)
    bits = dsp.binarize_spectrum(dsp.fft2d(crop))
    return bits, box, pred, probs


def activation_distribution(tap: np.ndarray) -> np.ndarray:
    """Canonical (channel-major) vector of activation magnitudes."""
    return np.abs(np.asarray(tap, np.float64)).reshape(-1)


def ensure_features(model: ModelGraph, x: np.ndarray, mfcc_cfg: dsp.MfccConfig) -> np.ndarray:
    """Accept either a raw 1-D waveform or an already-extracted feature map."""
    x = np.asarray(x)
    if x.ndim == 1:
        feats = dsp.mfcc(x, mfcc_cfg)
        return feats.reshape(model.input_shape).astype(np.float32)
    if tuple(x.shape) == model.input_shape:
        return x.astype(np.float32)
    raise ValueError(f"input shape {x.shape} is neither a waveform nor {model.input_shape}")


# ---------------------------------------------------------------------------
# profile builders


def _class_samples(dataset, class_label):
    return [x for x, label in dataset if label == class_label]


def build_image_profile(model: ModelGraph, dataset, class_label: str, alpha: float = 0.7,
                        n_samples: int = DEFAULT_SAMPLES_PER_CLASS,
                        crop_size: int = DEFAULT_CROP_SIZE) -> ImageClassProfile:
    """Majority-vote binary spectrum over correctly classified class samples.

    ``dataset`` iterates (image, label) pairs; the first ``n_samples``
    correctly classified, localizable samples contribute (a bit is set when
    at least half the samples set it).
    """
    class_index = model.labels.index(class_label)
    votes = None
    used = 0
    for image in _class_samples(dataset, class_label):
        bits, box, pred, _ = image_pattern(model, image, alpha, crop_size)
        if pred != class_index or bits is None:
            continue
        votes = bits.astype(np.int64) if votes is None else votes + bits
        used += 1
        if used == n_samples:
            break
    if used < n_samples:
        raise InsufficientSamplesError(class_label, n_samples, used)
    pattern = (2 * votes >= used).astype(np.uint8)
    return ImageClassProfile(label=class_label, pattern=pattern, sample_count=used)


def build_audio_profile(model: ModelGraph, dataset, class_label: str, k: int = 6,
                        n_samples: int = DEFAULT_SAMPLES_PER_CLASS,
                        mfcc_cfg: dsp.MfccConfig = dsp.MfccConfig()) -> AudioClassProfile:
    """Mean activation-magnitude distribution over correctly classified clips."""
    class_index = model.labels.index(class_label)
    total = None
    used = 0
    for clip in _class_samples(dataset, class_label):
        feats = ensure_features(model, clip, mfcc_cfg)
        _, pred, taps = forward(model, feats, tap_layers=(model.last_conv,))
        if pred != class_index:
            continue
        f = activation_distribution(taps[model.last_conv])
        total = f if total is None else total + f
        used += 1
        if used == n_samples:
            break
    if used < n_samples:
        raise InsufficientSamplesError(class_label, n_samples, used)
    f_exp = (total / used).astype(np.float32)
    return AudioClassProfile(label=class_label, f_exp=f_exp, k=k,
                             top_k=top_k_indices(f_exp, k), sample_count=used)


def build_store(model: ModelGraph, dataset, kind: str, *, alpha: float = 0.7,
                crop_size: int = DEFAULT_CROP_SIZE, k: int = 6,
                n_samples: int = DEFAULT_SAMPLES_PER_CLASS,
                mfcc_cfg: dsp.MfccConfig = dsp.MfccConfig()) -> ProfileStore:
    """Profiles for every model class, in one store."""
    store = ProfileStore(fingerprint=model_fingerprint(model),
                         config={"kind": kind, "alpha": repr(alpha), "crop_size": str(crop_size),
                                 "k": str(k), "n_samples": str(n_samples)})
    for label in model.labels:
        if kind == "image":
            store.image[label] = build_image_profile(model, dataset, label, alpha, n_samples, crop_size)
        elif kind == "audio":
            store.audio[label] = build_audio_profile(model, dataset, label, k, n_samples, mfcc_cfg)
        else:
            raise ValueError(f"unknown profile kind {kind!r}")
    return store


# ---------------------------------------------------------------------------
# persistence


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def save_profiles(store: ProfileStore, path) -> None:
    out = [PROFILE_MAGIC, struct.pack("<H", PROFILE_VERSION), struct.pack("<Q", store.fingerprint)]
    out.append(struct.pack("<H", len(store.config)))
    for key in sorted(store.config):
        out.append(_pack_str(key))
        out.append(_pack_str(str(store.config[key])))
    records = [(0, label, p) for label, p in sorted(store.image.items())]
    records += [(1, label, p) for label, p in sorted(store.audio.items())]
    out.append(struct.pack("<H", len(records)))
    for kind, label, prof in records:
        out.append(_pack_str(label))
        out.append(struct.pack("<B", kind))
        if kind == 0:
            h, w = prof.pattern.shape
            out.append(struct.pack("<3I", h, w, prof.sample_count))
            out.append(prof.pattern.astype(np.uint8).tobytes())
        else:
            out.append(struct.pack("<3I", prof.f_exp.size, prof.k, prof.sample_count))
            out.append(prof.f_exp.astype("<f4").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(out))


def load_profiles(path, model: ModelGraph | None = None) -> ProfileStore:
    with open(path, "rb") as f:
        data = f.read()
    pos = 0

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise ProfileFormatError(f"truncated profile file at byte {pos}")
        vals = struct.unpack_from(fmt, data, pos)
        pos += size
        return vals if len(vals) > 1 else vals[0]

    def take_str():
        nonlocal pos
        n = take("<H")
        raw = data[pos:pos + n]
        if len(raw) != n:
            raise ProfileFormatError("truncated string")
        pos += n
        return raw.decode("utf-8")

    if take("<4s") != PROFILE_MAGIC:
        raise ProfileFormatError("bad magic; not a profile store")
    version = take("<H")
    if version != PROFILE_VERSION:
        raise ProfileFormatError(f"unsupported profile version {version}")
    store = ProfileStore(fingerprint=take("<Q"))
    for _ in range(take("<H")):
        key = take_str()
        store.config[key] = take_str()
    for _ in range(take("<H")):
        label = take_str()
        kind = take("<B")
        if kind == 0:
            h, w, count = take("<3I")
            bits = np.frombuffer(data, dtype=np.uint8, count=h * w, offset=pos).reshape(h, w).copy()
            pos += h * w
            store.image[label] = ImageClassProfile(label, bits, count)
        elif kind == 1:
            n, k, count = take("<3I")
            vec = np.frombuffer(data, dtype="<f4", count=n, offset=pos).copy()
            pos += 4 * n
            store.audio[label] = AudioClassProfile(label, vec, k, top_k_indices(vec, k), count)
        else:
            raise ProfileFormatError(f"unknown record kind {kind}")
    if pos != len(data):
        raise ProfileFormatError(f"{len(data) - pos} trailing bytes")
    if model is not None:
        store.verify_model(model)
    return store
