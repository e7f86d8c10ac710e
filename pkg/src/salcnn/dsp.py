"""Hamming-windowed STFT front end.

One 2560-sample recording at 25.6 kHz with a 512-sample Hamming window and
a 256-sample hop gives 11 centred frames; the lowest 129 one-sided bins span
0-6400 Hz. The model consumes the lowest 128 bins (11 x 128 = 1408 values).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .numerics import Array


class ConfigurationError(ValueError):
    """Raised for inconsistent or degenerate configuration values."""


@dataclass(frozen=True)
class WindowFn:
    name: str
    coefficients: Array

    @property
    def length(self) -> int:
        return int(self.coefficients.shape[0])


def hamming_window(n: int) -> WindowFn:
    """Symmetric Hamming window ``0.54 - 0.46 cos(2 pi k / (n - 1))``."""
    if n < 2:
        raise ValueError(f"window length must be >= 2, got {n}")
    k = np.arange(n)
    w = 0.54 - 0.46 * np.cos(2.0 * np.pi * k / (n - 1))
    # enforce exact symmetry against cos rounding
    half = n // 2
    w[n - half :] = w[:half][::-1]
    return WindowFn("hamming", w)


def _is_pow2(n: int) -> bool:
    return n >= 1 and n & (n - 1) == 0


def _bit_reverse(n: int) -> Array:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def fft(x: Array) -> Array:
    """Iterative radix-2 decimation-in-time FFT along the last axis.

    Unnormalised: ``X[k] = sum_n x[n] exp(-2j pi k n / N)``. Leading axes
    are transformed independently.
    """
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[-1]
    if not _is_pow2(n):
        raise ValueError(f"fft length must be a power of two, got {n}")
    lead = x.shape[:-1]
    a = x[..., _bit_reverse(n)].reshape(-1, n)
    m = 2
    while m <= n:
        half = m // 2
        tw = np.exp(-2j * np.pi * np.arange(half) / m)
        blocks = a.reshape(a.shape[0], n // m, m)
        even = blocks[..., :half]
        odd = blocks[..., half:] * tw
        a = np.concatenate([even + odd, even - odd], axis=-1).reshape(-1, n)
        m *= 2
    return a.reshape(*lead, n)


@dataclass(frozen=True)
class StftConfig:
    sample_rate_hz: float = 25600.0
    segment_len: int = 512
    hop: int = 256
    boundary_pad: str = "zeros"
    crop_bins: int = 129

    def __post_init__(self):
        if not _is_pow2(self.segment_len):
            raise ConfigurationError(f"segment_len must be a power of two, got {self.segment_len}")
        if not 0 < self.hop <= self.segment_len:
            raise ConfigurationError(f"hop must lie in (0, segment_len], got {self.hop}")
        if not 1 <= self.crop_bins <= self.segment_len // 2 + 1:
            raise ConfigurationError(
                f"crop_bins must lie in [1, {self.segment_len // 2 + 1}], got {self.crop_bins}"
            )
        if self.boundary_pad != "zeros":
            raise ConfigurationError(f"only zero boundary padding is supported, got {self.boundary_pad!r}")

    @property
    def bin_hz(self) -> float:
        return self.sample_rate_hz / self.segment_len


@dataclass(frozen=True)
class Spectrogram:
    magnitudes: Array  # (frames, bins)
    frame_times_s: Array
    bin_freqs_hz: Array

    @property
    def shape(self) -> tuple[int, int]:
        return self.magnitudes.shape


def frame_signal(signal: Array, cfg: StftConfig) -> Array:
    """Zero-pad by half a segment at both ends and cut into windowed frames."""
    n = signal.shape[-1]
    half = cfg.segment_len // 2
    padded = np.pad(signal, [(0, 0)] * (signal.ndim - 1) + [(half, half)])
    frames = n // cfg.hop + 1
    starts = np.arange(frames) * cfg.hop
    idx = starts[:, None] + np.arange(cfg.segment_len)[None, :]
    window = hamming_window(cfg.segment_len).coefficients
    return padded[..., idx] * window


def stft(signal: Array, cfg: StftConfig = StftConfig()) -> Spectrogram:
    """Magnitude STFT of one recording, cropped to ``cfg.crop_bins`` bins."""
    signal = np.asarray(signal, dtype=np.float64)
    if signal.ndim != 1:
        raise ValueError(f"stft expects a 1-D signal, got shape {signal.shape}")
    n = signal.shape[0]
    if n == 0 or n % cfg.hop:
        raise ValueError(
            f"signal length {n} is not a positive multiple of hop {cfg.hop}; "
            f"expected e.g. 2560 samples -> {2560 // cfg.hop + 1} frames"
        )
    mags = stft_magnitudes(signal[None], cfg)[0]
    frames = mags.shape[0]
    return Spectrogram(
        magnitudes=mags,
        frame_times_s=np.arange(frames) * cfg.hop / cfg.sample_rate_hz,
        bin_freqs_hz=np.arange(cfg.crop_bins) * cfg.bin_hz,
    )


def stft_magnitudes(signals: Array, cfg: StftConfig = StftConfig()) -> Array:
    """Batched magnitudes: ``(R, n) -> (R, n/hop + 1, crop_bins)``."""
    signals = np.asarray(signals, dtype=np.float64)
    spectrum = fft(frame_signal(signals, cfg))
    return np.abs(spectrum[..., : cfg.crop_bins])


def crop_to_model_bins(s: Spectrogram, bins: int = 128) -> Spectrogram:
    available = s.magnitudes.shape[1]
    if not 1 <= bins <= available:
        raise ValueError(f"cannot crop to {bins} bins, spectrogram has {available}")
    return replace(s, magnitudes=s.magnitudes[:, :bins].copy(), bin_freqs_hz=s.bin_freqs_hz[:bins].copy())


@dataclass(frozen=True)
class NormStats:
    min: float
    max: float

    def __post_init__(self):
        if not self.max > self.min:
            raise ConfigurationError(f"degenerate normalisation stats: min={self.min}, max={self.max}")


def normalize(values, stats: NormStats):
    """Min-max scale an array (or :class:`Spectrogram`) with dataset stats."""
    if isinstance(values, Spectrogram):
        return replace(values, magnitudes=normalize(values.magnitudes, stats))
    return (np.asarray(values) - stats.min) / (stats.max - stats.min)


def denormalize(values, stats: NormStats):
    if isinstance(values, Spectrogram):
        return replace(values, magnitudes=denormalize(values.magnitudes, stats))
    return np.asarray(values) * (stats.max - stats.min) + stats.min


# --------------------------------------------------------------------------
# export


def write_spectrogram_csv(path, s: Spectrogram) -> None:
    """Frames as rows, header row of bin frequencies."""
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(repr(float(f)) for f in s.bin_freqs_hz) + "\n")
        for row in s.magnitudes:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def read_spectrogram_csv(path, hop_s: float | None = None) -> Spectrogram:
    lines = Path(path).read_text().strip().splitlines()
    freqs = np.array([float(v) for v in lines[0].split(",")])
    mags = np.array([[float(v) for v in line.split(",")] for line in lines[1:]])
    times = np.arange(mags.shape[0]) * (hop_s if hop_s is not None else 0.0)
    return Spectrogram(mags, times, freqs)


def to_gray8(values: Array, scale: float | None = None) -> Array:
    """Linear map to 0-255 with round-half-up; ``scale`` defaults to the array max."""
    values = np.asarray(values, dtype=np.float64)
    if scale is None:
        scale = float(values.max()) if values.size and values.max() > 0 else 1.0
    scaled = np.clip(values / scale, 0.0, 1.0) * 255.0
    return np.floor(scaled + 0.5).astype(np.uint8)


def write_pgm(path, pixels: Array) -> None:
    """Binary 8-bit PGM (P5). Row 0 of ``pixels`` is the top image row."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 2 or pixels.dtype != np.uint8:
        raise ValueError("write_pgm expects a 2-D uint8 array")
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5 {w} {h} 255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_pgm(path) -> Array:
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM file")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM is supported")
    body = data[pos + 1 :]  # exactly one whitespace byte follows maxval
    if len(body) != w * h:
        raise ValueError(f"{path}: expected {w * h} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w)


def write_spectrogram_pgm(path, s: Spectrogram) -> None:
    """Frames as image rows, frequency bins as columns (width = bins)."""
    write_pgm(path, to_gray8(s.magnitudes))
