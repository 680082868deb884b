"""Audio ingestion, log-mel features, SpecAugment masking and the feature file format."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import get_window, resample_poly

from .errors import DataError, IngestionError, InvalidInputError

LOG_FLOOR = 1e-10

FEATURE_MAGIC = b"DNDF"
FEATURE_VERSION = 1
_FEATURE_HEADER = struct.Struct("<4sIIII")


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int
    source: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise InvalidInputError("audio clip must be a nonempty mono signal")
        if self.sample_rate <= 0:
            raise InvalidInputError(f"sample rate must be positive, got {self.sample_rate}")


@dataclass(frozen=True)
class FrontendConfig:
    sample_rate: int = 48000
    frame: int = 1024
    hop: int = 320
    mel_bands: int = 64


@dataclass
class MelFeature:
    values: np.ndarray  # (frames, bands)
    sample_rate: int
    frame: int = 1024
    hop: int = 320

    @property
    def frames(self):
        return self.values.shape[0]

    @property
    def bands(self):
        return self.values.shape[1]


def _to_float(data):
    if data.dtype.kind == "f":
        return data.astype(np.float64)
    if data.dtype == np.uint8:
        return (data.astype(np.float64) - 128.0) / 128.0
    if data.dtype.kind == "i":
        # scipy left-aligns 24-bit samples in int32, so int32 scaling covers both.
        return data.astype(np.float64) / float(-np.iinfo(data.dtype).min)
    raise IngestionError(f"unsupported sample type {data.dtype}")


def resample(samples, source_rate, target_rate):
    """Polyphase windowed-sinc resampling between integer rates."""
    if source_rate == target_rate:
        return np.asarray(samples, dtype=np.float64)
    ratio = Fraction(int(target_rate), int(source_rate))
    return resample_poly(np.asarray(samples, dtype=np.float64), ratio.numerator, ratio.denominator)


def load_and_resample(path, target_rate) -> AudioClip:
    try:
        rate, data = wavfile.read(str(path))
    except (ValueError, OSError, EOFError) as exc:
        raise IngestionError(f"cannot read {path}: {exc}") from exc
    samples = _to_float(np.asarray(data))
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    if samples.size == 0:
        raise IngestionError(f"{path} contains no samples")
    return AudioClip(resample(samples, rate, target_rate), int(target_rate), str(path))


def write_wav(path, samples, sample_rate):
    """Write float samples in [-1, 1] as 16-bit PCM."""
    pcm = np.clip(np.round(np.asarray(samples) * 32767.0), -32768, 32767).astype("<i2")
    wavfile.write(str(path), int(sample_rate), pcm)


def frame_count(length, frame=1024, hop=320):
    if length < frame:
        raise InvalidInputError(f"clip of {length} samples is shorter than one {frame}-sample frame")
    return 1 + (length - frame) // hop


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_edges(sample_rate, bands):
    """``bands + 2`` edge frequencies in Hz, evenly spaced on the HTK mel scale."""
    return mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), bands + 2))


def mel_response(freqs, sample_rate, bands):
    """Triangular filter weights at arbitrary frequencies, shape ``(bands, len(freqs))``.

    Triangles peak at 1 and are not area-normalized.
    """
    freqs = np.asarray(freqs, dtype=np.float64)
    edges = mel_band_edges(sample_rate, bands)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lo) / (mid - lo)
    down = (hi - freqs[None, :]) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def mel_filterbank(sample_rate, n_fft, bands):
    """Filterbank matrix of shape ``(bands, n_fft // 2 + 1)``."""
    freqs = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)
    return mel_response(freqs, sample_rate, bands)


def stft_magnitude(samples, frame=1024, hop=320):
    """Magnitude STFT with a periodic Hann window and no padding, ``(frames, bins)``."""
    x = np.asarray(samples, dtype=np.float64)
    n = frame_count(len(x), frame, hop)
    frames = np.lib.stride_tricks.sliding_window_view(x, frame)[::hop][:n]
    return np.abs(np.fft.rfft(frames * get_window("hann", frame, fftbins=True), axis=1))


def stft_logmel(clip: AudioClip, config: FrontendConfig = FrontendConfig()) -> MelFeature:
    mag = stft_magnitude(clip.samples, config.frame, config.hop)
    fb = mel_filterbank(clip.sample_rate, config.frame, config.mel_bands)
    logmel = np.log(np.maximum(mag @ fb.T, LOG_FLOOR))
    return MelFeature(logmel, clip.sample_rate, config.frame, config.hop)


@dataclass(frozen=True)
class AugmentPolicy:
    """SpecAugment masking counts and width ranges (inclusive)."""

    freq_masks: int = 2
    freq_max: int = 8
    time_masks: int = 2
    time_max: int = 20
    freq_min: int = 0
    time_min: int = 0

    @classmethod
    def none(cls):
        return cls(0, 0, 0, 0)

    @property
    def active(self):
        return self.freq_masks > 0 or self.time_masks > 0

    def to_text(self):
        if not self.active:
            return "none"
        return f"{self.freq_masks},{self.freq_max},{self.time_masks},{self.time_max}"

    @classmethod
    def parse(cls, text):
        text = text.strip().lower()
        if text in ("none", "off", ""):
            return cls.none()
        if text == "default":
            return cls()
        parts = [int(p) for p in text.split(",")]
        if len(parts) != 4 or min(parts) < 0:
            raise ValueError(f"augment policy must be 'none', 'default' or F,f_max,T,t_max; got {text!r}")
        return cls(*parts)


def _masks(rng, count, lo, hi, size):
    hi = min(hi, size)
    lo = min(lo, hi)
    out = []
    for _ in range(count):
        width = int(rng.integers(lo, hi + 1))
        start = int(rng.integers(0, size - width + 1))
        out.append((start, width))
    return out


def spec_augment(values, policy: AugmentPolicy = AugmentPolicy(), seed=None):
    """Mask random frequency bands and time spans of a ``(frames, bands)`` matrix.

    Masked cells take the mean of the original input.  Widths larger than the
    feature are clamped to it.
    """
    x = np.asarray(values.values if isinstance(values, MelFeature) else values, dtype=np.float64)
    if x.size == 0:
        raise InvalidInputError("cannot augment an empty feature")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    out = x.copy()
    fill = x.mean()
    frames, bands = x.shape
    for start, width in _masks(rng, policy.freq_masks, policy.freq_min, policy.freq_max, bands):
        out[:, start : start + width] = fill
    for start, width in _masks(rng, policy.time_masks, policy.time_min, policy.time_max, frames):
        out[start : start + width, :] = fill
    if isinstance(values, MelFeature):
        return MelFeature(out, values.sample_rate, values.frame, values.hop)
    return out


def save_feature(path, feature: MelFeature):
    data = np.ascontiguousarray(feature.values, dtype="<f4")
    header = _FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, data.shape[0], data.shape[1], feature.sample_rate)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(header + data.tobytes())
    tmp.replace(path)


def load_feature(path) -> MelFeature:
    raw = Path(path).read_bytes()
    if len(raw) < _FEATURE_HEADER.size:
        raise DataError(f"{path}: truncated feature header")
    magic, version, frames, bands, rate = _FEATURE_HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise DataError(f"{path}: not a feature file")
    if version != FEATURE_VERSION:
        raise DataError(f"{path}: unsupported feature version {version}")
    body = raw[_FEATURE_HEADER.size :]
    if len(body) != 4 * frames * bands:
        raise DataError(f"{path}: expected {frames}x{bands} floats, found {len(body)} bytes")
    values = np.frombuffer(body, dtype="<f4").reshape(frames, bands).astype(np.float64)
    return MelFeature(values, rate)


def quantize(values):
    """Round-trip through the on-disk float32 precision."""
    return np.asarray(values, dtype="<f4").astype(np.float64)
