"""Log mel-spectrogram frontend: radix-2 FFT, Hann-windowed STFT, HTK mel filterbank."""

from __future__ import annotations

import io
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .audio_io import RAW_LEN, AudioClip
from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class SpectrogramConfig:
    n_dft: int = 1024
    hop: int = 128
    n_mels: int = 80
    sample_rate_hz: int = 16000
    f_min_hz: float = 0.0
    f_max_hz: float = 8000.0
    log_floor: float = 1e-10
    raw_len: int = RAW_LEN

    def __post_init__(self):
        if self.n_dft <= 0 or self.n_dft & (self.n_dft - 1):
            raise ConfigError(f"n_dft must be a power of two, got {self.n_dft}")
        if self.hop <= 0 or self.raw_len % self.hop:
            raise ConfigError(f"hop {self.hop} must divide raw_len {self.raw_len}")
        if self.n_mels <= 0 or self.sample_rate_hz <= 0 or self.log_floor <= 0:
            raise ConfigError("n_mels, sample_rate_hz and log_floor must be positive")
        if not 0 <= self.f_min_hz < self.f_max_hz <= self.sample_rate_hz / 2:
            raise ConfigError(
                f"need 0 <= f_min < f_max <= sr/2, got {self.f_min_hz}, {self.f_max_hz}")
        if self.raw_len < self.n_dft // 2 + 1:
            raise ConfigError("raw_len too short for reflect padding")

    @property
    def n_bins(self) -> int:
        return self.n_dft // 2 + 1

    @property
    def spec_len(self) -> int:
        return 1 + self.raw_len // self.hop

    @property
    def frame_hop_seconds(self) -> float:
        return self.hop / self.sample_rate_hz


@dataclass(frozen=True, eq=False)
class MelSpectrogram:
    values: np.ndarray  # [spec_len, n_mels], log10 power
    frame_hop_seconds: float

    @property
    def shape(self):
        return self.values.shape

    def to_csv(self) -> str:
        buf = io.StringIO()
        np.savetxt(buf, self.values, delimiter=",", fmt="%.9g")
        return buf.getvalue()


# -- FFT -----------------------------------------------------------------------

@lru_cache(maxsize=None)
def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


@lru_cache(maxsize=None)
def _twiddles(n: int) -> np.ndarray:
    return np.exp(-2j * np.pi * np.arange(n // 2) / n)


def fft(x: np.ndarray) -> np.ndarray:
    """Iterative radix-2 decimation-in-time FFT along the last axis."""
    x = np.asarray(x)
    n = x.shape[-1]
    if n == 0 or n & (n - 1):
        raise ShapeError(f"FFT length must be a power of two, got {n}")
    a = x[..., _bit_reverse(n)].astype(np.complex128)
    lead = a.shape[:-1]
    tw = _twiddles(n)
    size = 2
    while size <= n:
        half = size // 2
        blocks = a.reshape(*lead, n // size, size)
        w = tw[:: n // size][:half]
        even = blocks[..., :half]
        odd = blocks[..., half:] * w
        blocks = np.concatenate([even + odd, even - odd], axis=-1)
        a = blocks.reshape(*lead, n)
        size *= 2
    return a


def dft_direct(x: np.ndarray) -> np.ndarray:
    """Quadratic-time DFT along the last axis; reference for :func:`fft`."""
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[-1]
    k = np.arange(n)
    basis = np.exp(-2j * np.pi * np.outer(k, k) / n)
    return x @ basis.T


def hann(n: int) -> np.ndarray:
    # periodic form, the usual choice for STFT analysis
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def stft_power(clip: AudioClip | np.ndarray, cfg: SpectrogramConfig = SpectrogramConfig()) -> np.ndarray:
    """Centered, Hann-windowed power spectrogram, shape [spec_len, n_dft/2 + 1]."""
    samples = clip.samples if isinstance(clip, AudioClip) else np.asarray(clip)
    if samples.shape[-1] != cfg.raw_len:
        raise ShapeError(f"expected {cfg.raw_len} samples, got {samples.shape[-1]}")
    pad = cfg.n_dft // 2
    padded = np.pad(samples.astype(np.float64), (pad, pad), mode="reflect")
    starts = np.arange(cfg.spec_len) * cfg.hop
    frames = padded[starts[:, None] + np.arange(cfg.n_dft)] * hann(cfg.n_dft)
    spec = fft(frames)[:, :cfg.n_bins]
    return spec.real ** 2 + spec.imag ** 2


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=16)
def _filterbank(cfg: SpectrogramConfig) -> np.ndarray:
    mel_pts = np.linspace(hz_to_mel(cfg.f_min_hz), hz_to_mel(cfg.f_max_hz), cfg.n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)
    freqs = np.arange(cfg.n_bins) * cfg.sample_rate_hz / cfg.n_dft

    lower = hz_pts[:-2, None]
    center = hz_pts[1:-1, None]
    upper = hz_pts[2:, None]
    rising = (freqs - lower) / (center - lower)
    falling = (upper - freqs) / (upper - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))

    empty = np.flatnonzero(fb.max(axis=1) <= 0)
    if empty.size:
        raise ConfigError(
            f"{empty.size} mel filters contain no FFT bin (first: {empty[0]}); "
            f"reduce n_mels or raise n_dft")
    fb.setflags(write=False)
    return fb


def mel_filterbank(cfg: SpectrogramConfig = SpectrogramConfig()) -> np.ndarray:
    """Triangular filters [n_mels, n_dft/2 + 1] with unit peak, no area normalization."""
    return _filterbank(cfg)


def log_mel(clip: AudioClip | np.ndarray, cfg: SpectrogramConfig = SpectrogramConfig()) -> MelSpectrogram:
    power = stft_power(clip, cfg)
    mel = power @ mel_filterbank(cfg).T
    values = np.log10(np.maximum(mel, cfg.log_floor))
    return MelSpectrogram(values, cfg.frame_hop_seconds)


def log_mel_batch(clips, cfg: SpectrogramConfig = SpectrogramConfig()) -> np.ndarray:
    """Stack log-mel features of several clips into [B, spec_len, n_mels]."""
    return np.stack([log_mel(c, cfg).values for c in clips])
