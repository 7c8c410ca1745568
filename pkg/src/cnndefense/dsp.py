"""Signal kernels: power-of-two FFTs, spectrum binarization, MFCC front end.

The FFT is an iterative radix-2 Cooley-Tukey (bit-reversal permutation plus
log2(n) butterfly stages), applied row-column for the 2-D case.  Inputs that
are not powers of two are zero-padded up; the unnormalized forward convention
is used throughout (DC bin of a constant c over n samples equals n*c).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _next_pow2(n: int) -> int:
    p = 1
    while p < n:
        p *= 2
    return p


def _bit_reverse_indices(n: int) -> np.ndarray:
    idx = np.arange(n)
    rev = np.zeros(n, dtype=int)
    bits = n.bit_length() - 1
    for _ in range(bits):
        rev = (rev << 1) | (idx & 1)
        idx >>= 1
    return rev


def fft1d(a: np.ndarray, axis: int = -1) -> np.ndarray:
    """Radix-2 FFT along one power-of-two axis (batched over the others)."""
    a = np.asarray(a, dtype=np.complex128)
    n = a.shape[axis]
    if n & (n - 1):
        raise ValueError(f"axis length {n} is not a power of two")
    x = np.moveaxis(a, axis, -1).copy()
    x = x[..., _bit_reverse_indices(n)]
    half = 1
    while half < n:
        step = half * 2
        tw = np.exp(-2j * np.pi * np.arange(half) / step)
        blocks = x.reshape(*x.shape[:-1], n // step, step)
        lo = blocks[..., :half].copy()
        hi = blocks[..., half:] * tw
        blocks[..., :half] = lo + hi
        blocks[..., half:] = lo - hi
        half = step
    return np.moveaxis(x, -1, axis)


def ifft1d(a: np.ndarray, axis: int = -1) -> np.ndarray:
    n = np.asarray(a).shape[axis]
    return np.conj(fft1d(np.conj(a), axis=axis)) / n


def fft2d(image: np.ndarray) -> np.ndarray:
    """2-D spectrum of a real image, zero-padded to the next powers of two."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or image.size == 0:
        raise ValueError(f"fft2d needs a non-empty 2-D input, got shape {image.shape}")
    h, w = image.shape
    hp, wp = _next_pow2(h), _next_pow2(w)
    buf = np.zeros((hp, wp), dtype=np.complex128)
    buf[:h, :w] = image
    return fft1d(fft1d(buf, axis=1), axis=0)


def ifft2d(spectrum: np.ndarray) -> np.ndarray:
    return ifft1d(ifft1d(np.asarray(spectrum, np.complex128), axis=1), axis=0)


def fftshift2d(a: np.ndarray) -> np.ndarray:
    h, w = a.shape
    return np.roll(np.roll(a, h // 2, axis=0), w // 2, axis=1)


def binarize_spectrum(spectrum: np.ndarray) -> np.ndarray:
    """Reduce a complex spectrum to the bit grid the semantic metric compares.

    Log magnitudes m = log(1 + |X|) are DC-centered, the DC bin is zeroed
    (so a global brightness offset cannot move any bit), and a bit is set
    wherever m exceeds the grid mean.  Returns a uint8 {0,1} array of the
    spectrum's dims.
    """
    spectrum = np.asarray(spectrum)
    if spectrum.ndim != 2:
        raise ValueError("binarize_spectrum needs a 2-D spectrum")
    m = np.log1p(np.abs(spectrum))
    m = fftshift2d(m)
    h, w = m.shape
    m[h // 2, w // 2] = 0.0
    return (m > m.mean()).astype(np.uint8)


# ---------------------------------------------------------------------------
# MFCC front end


@dataclass(frozen=True)
class MfccConfig:
    """Standard keyword-spotting front end: 16 kHz, 25 ms frames, 10 ms hop."""

    sample_rate: int = 16000
    frame_len: int = 400
    hop: int = 160
    mel_bands: int = 40
    coefficients: int = 13
    fft_size: int = 512

    def __post_init__(self):
        if self.fft_size & (self.fft_size - 1):
            raise ValueError("fft_size must be a power of two")
        if self.frame_len > self.fft_size:
            raise ValueError("frame_len must fit in fft_size")
        if not 0 < self.coefficients <= self.mel_bands:
            raise ValueError("need 0 < coefficients <= mel_bands")

    def frame_count(self, n_samples: int) -> int:
        if n_samples < self.frame_len:
            raise ValueError(f"waveform of {n_samples} samples is shorter than one frame")
        return 1 + (n_samples - self.frame_len) // self.hop


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: MfccConfig) -> tuple[np.ndarray, np.ndarray]:
    """Triangular filters over the one-sided spectrum.

    Returns (weights [mel_bands, fft_size//2 + 1], center frequencies in Hz).
    """
    n_bins = cfg.fft_size // 2 + 1
    mel_pts = np.linspace(hz_to_mel(0.0), hz_to_mel(cfg.sample_rate / 2.0), cfg.mel_bands + 2)
    hz_pts = mel_to_hz(mel_pts)
    bin_freqs = np.arange(n_bins) * cfg.sample_rate / cfg.fft_size
    weights = np.zeros((cfg.mel_bands, n_bins))
    for b in range(cfg.mel_bands):
        lo, mid, hi = hz_pts[b], hz_pts[b + 1], hz_pts[b + 2]
        up = (bin_freqs - lo) / (mid - lo)
        down = (hi - bin_freqs) / (hi - mid)
        weights[b] = np.clip(np.minimum(up, down), 0.0, None)
    return weights, hz_pts[1:-1]


def _frames(waveform: np.ndarray, cfg: MfccConfig) -> np.ndarray:
    n = cfg.frame_count(len(waveform))
    idx = np.arange(cfg.frame_len)[None, :] + cfg.hop * np.arange(n)[:, None]
    return waveform[idx]


def mel_energies(waveform: np.ndarray, cfg: MfccConfig) -> np.ndarray:
    """Per-frame mel filterbank energies [frames, mel_bands]."""
    waveform = np.asarray(waveform, np.float64).reshape(-1)
    frames = _frames(waveform, cfg)
    window = np.hanning(cfg.frame_len)
    buf = np.zeros((frames.shape[0], cfg.fft_size))
    buf[:, :cfg.frame_len] = frames * window
    spec = fft1d(buf, axis=1)[:, :cfg.fft_size // 2 + 1]
    power = np.abs(spec) ** 2
    weights, _ = mel_filterbank(cfg)
    return power @ weights.T


def dct2(x: np.ndarray, n_keep: int) -> np.ndarray:
    """Unnormalized DCT-II along the last axis, first ``n_keep`` coefficients."""
    m = x.shape[-1]
    k = np.arange(n_keep)[:, None]
    basis = np.cos(np.pi * k * (np.arange(m) + 0.5) / m)
    return x @ basis.T


def mfcc(waveform: np.ndarray, cfg: MfccConfig = MfccConfig()) -> np.ndarray:
    """Mel-frequency cepstral coefficients, [frames, cfg.coefficients].

    Per frame: Hann window, zero-padded FFT, power spectrum, triangular mel
    filterbank, log(x + 1e-10), DCT-II truncated to cfg.coefficients.
    """
    log_mel = np.log(mel_energies(waveform, cfg) + 1e-10)
    return dct2(log_mel, cfg.coefficients)
