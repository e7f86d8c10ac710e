"""PHM2012-style vibration data: parsing, windowed datasets, synthetic fleets."""

from __future__ import annotations

import csv
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .dsp import NormStats, StftConfig, normalize, stft_magnitudes
from .numerics import Array

log = logging.getLogger(__name__)

RECORDING_LEN = 2560
SAMPLE_RATE_HZ = 25600.0
SNAPSHOT_PERIOD_S = 10.0
MODEL_BINS = 128

# operating condition -> (speed rpm, radial force N)
CONDITIONS = {1: (1800, 4000), 2: (1650, 4200), 3: (1500, 5000)}
PHM2012_BEARINGS = (
    [f"Bearing1_{k}" for k in range(1, 8)]
    + [f"Bearing2_{k}" for k in range(1, 8)]
    + [f"Bearing3_{k}" for k in range(1, 4)]
)


class DataFormatError(ValueError):
    """Raised for malformed acceleration files or bearing directories."""


@dataclass(frozen=True)
class Condition:
    speed_rpm: float
    radial_force_n: float


@dataclass
class Recording:
    samples: Array  # (2560,) horizontal acceleration, g
    timestamp: tuple[int, int, int, int] = (0, 0, 0, 0)  # hour, minute, second, microsecond

    def __post_init__(self):
        if self.samples.shape != (RECORDING_LEN,):
            raise DataFormatError(f"recording must hold {RECORDING_LEN} samples, got {self.samples.shape}")

    @property
    def seconds(self) -> float:
        h, m, s, us = self.timestamp
        return h * 3600.0 + m * 60.0 + s + us * 1e-6


@dataclass
class BearingRun:
    id: str
    condition: Condition
    recordings: list[Recording]

    @property
    def total_life_index(self) -> int:
        return len(self.recordings)

    def __len__(self) -> int:
        return len(self.recordings)


@dataclass
class Sample:
    window: Array  # (W, 11, 128)
    label_rul_pct: float
    bearing_id: str
    end_index: int


def rul_percent(end_index, n: int):
    """Percent of life remaining at recording ``end_index`` of an ``n``-recording run."""
    if n < 2:
        raise ValueError(f"a run needs at least 2 recordings to define RUL, got {n}")
    return 100.0 * (n - 1 - np.asarray(end_index, dtype=np.float64)) / (n - 1)


def condition_for(bearing_id: str) -> Condition | None:
    m = re.search(r"(\d)[_-]\d+$", bearing_id)
    if m and int(m.group(1)) in CONDITIONS:
        return Condition(*CONDITIONS[int(m.group(1))])
    return None


# --------------------------------------------------------------------------
# acc_XXXXX.csv files


def parse_acc_csv(path) -> Recording:
    """Read one PHM2012 acceleration file (horizontal channel only)."""
    path = Path(path)
    text = path.read_text()
    delim = ";" if ";" in text.split("\n", 1)[0] else ","
    rows = [r for r in csv.reader(text.splitlines(), delimiter=delim) if r]
    if len(rows) != RECORDING_LEN:
        raise DataFormatError(f"{path}: expected {RECORDING_LEN} rows, found {len(rows)}")
    samples = np.empty(RECORDING_LEN)
    stamp = None
    for r, row in enumerate(rows):
        if len(row) < 5:
            raise DataFormatError(f"{path}: row {r + 1} has {len(row)} columns, need at least 5")
        try:
            samples[r] = float(row[4])
        except ValueError:
            raise DataFormatError(f"{path}: non-numeric value {row[4]!r} at row {r + 1}, column 5") from None
        if stamp is None:
            try:
                stamp = tuple(int(float(v)) for v in row[:4])
            except ValueError:
                raise DataFormatError(f"{path}: non-numeric timestamp at row 1") from None
    return Recording(samples, stamp)


def write_acc_csv(path, rec: Recording) -> None:
    h, m, s, us = rec.timestamp
    step_us = 1e6 / SAMPLE_RATE_HZ
    with open(path, "w", newline="\n") as fh:
        for k, v in enumerate(rec.samples):
            total_us = us + k * step_us
            fh.write(f"{h},{m},{s},{total_us:.1f},{float(v)!r},0.0\n")


_ACC_RE = re.compile(r"^acc_(\d+)\.csv$")


def load_bearing(directory, bearing_id: str | None = None) -> BearingRun:
    """Load every ``acc_XXXXX.csv`` in ``directory`` ordered by file index."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataFormatError(f"{directory}: not a directory")
    indexed = []
    for p in directory.iterdir():
        m = _ACC_RE.match(p.name)
        if m:
            indexed.append((int(m.group(1)), p))
    if not indexed:
        raise DataFormatError(f"{directory}: no acc_XXXXX.csv files")
    indexed.sort()
    idx = [i for i, _ in indexed]
    expected = range(idx[0], idx[0] + len(idx))
    if idx != list(expected):
        missing = sorted(set(range(idx[0], idx[-1] + 1)) - set(idx))
        raise DataFormatError(f"{directory}: gap in acc file sequence, missing indices {missing}")
    bid = bearing_id or directory.name
    cond = condition_for(bid) or Condition(float("nan"), float("nan"))
    return BearingRun(bid, cond, [parse_acc_csv(p) for _, p in indexed])


def write_bearing(directory, run: BearingRun) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for k, rec in enumerate(run.recordings, start=1):
        write_acc_csv(directory / f"acc_{k:05d}.csv", rec)


# --------------------------------------------------------------------------
# datasets


def spectrogram_stack(run: BearingRun, stft_cfg: StftConfig = StftConfig(), bins: int = MODEL_BINS) -> Array:
    """Raw magnitudes for every recording: ``(N, frames, bins)``."""
    signals = np.stack([r.samples for r in run.recordings])
    mags = stft_magnitudes(signals, stft_cfg)
    if bins > mags.shape[-1]:
        raise ValueError(f"cannot crop to {bins} bins, STFT keeps {mags.shape[-1]}")
    return mags[..., :bins]


def windows_from_stack(
    stack: Array, window: int, stride: int = 1, stats: NormStats | None = None, bearing_id: str = ""
) -> list[Sample]:
    n = stack.shape[0]
    if n < window:
        raise ValueError(f"run {bearing_id!r} has {n} recordings, shorter than window {window}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    data = normalize(stack, stats) if stats is not None else stack
    out = []
    for end in range(window - 1, n, stride):
        out.append(Sample(data[end - window + 1 : end + 1], float(rul_percent(end, n)), bearing_id, end))
    return out


def build_dataset(
    run: BearingRun,
    stft_cfg: StftConfig = StftConfig(),
    window: int = 5,
    stride: int = 1,
    stats: NormStats | None = None,
) -> list[Sample]:
    """Sliding windows of ``window`` consecutive spectrograms labelled with RUL percent."""
    if len(run) < window:
        raise ValueError(f"run {run.id!r} has {len(run)} recordings, shorter than window {window}")
    return windows_from_stack(spectrogram_stack(run, stft_cfg), window, stride, stats, run.id)


def stack_samples(samples: Sequence[Sample]) -> tuple[Array, Array]:
    return np.stack([s.window for s in samples]), np.array([s.label_rul_pct for s in samples])


def compute_norm_stats(samples: Iterable) -> NormStats:
    """Global min/max over the training split (samples or raw arrays)."""
    lo, hi, seen = np.inf, -np.inf, False
    for s in samples:
        values = s.window if isinstance(s, Sample) else np.asarray(s)
        if values.size:
            lo = min(lo, float(values.min()))
            hi = max(hi, float(values.max()))
            seen = True
    if not seen:
        raise ValueError("cannot compute normalisation stats of an empty training split")
    return NormStats(lo, hi)


# --------------------------------------------------------------------------
# synthetic run-to-failure bearings


@dataclass(frozen=True)
class SynthProfile:
    """Tones below ``split_hz`` grow with wear, tones above it fade.

    At life fraction ``p`` low tones have amplitude ``low_gain * p**e`` and
    high tones ``1 - p**e`` with ``e = degradation_exponent``.
    """

    life_n: int = 120
    base_freqs_hz: tuple[float, ...] = (900.0, 1600.0, 3400.0, 3900.0)
    noise_sigma: float = 0.05
    degradation_exponent: float = 1.5
    split_hz: float = 3200.0
    low_gain: float = 2.0
    random_phase: bool = True

    def validate(self, min_life: int = 2):
        if self.life_n < min_life:
            raise ValueError(f"life_n must be >= {min_life}, got {self.life_n}")
        if self.noise_sigma < 0 or self.degradation_exponent <= 0:
            raise ValueError("noise_sigma must be >= 0 and degradation_exponent > 0")
        if not self.base_freqs_hz or any(not 0 < f < SAMPLE_RATE_HZ / 2 for f in self.base_freqs_hz):
            raise ValueError(f"base frequencies must lie in (0, {SAMPLE_RATE_HZ / 2}) Hz")


def synth_bearing(
    profile: SynthProfile = SynthProfile(),
    seed: int = 0,
    bearing_id: str = "Synth1_1",
    condition: Condition = Condition(*CONDITIONS[1]),
    min_life: int = 2,
) -> BearingRun:
    profile.validate(min_life)
    rng = np.random.default_rng(seed)
    t = np.arange(RECORDING_LEN) / SAMPLE_RATE_HZ
    freqs = np.asarray(profile.base_freqs_hz, dtype=np.float64)
    low = freqs < profile.split_hz
    recordings = []
    for k in range(profile.life_n):
        p = k / (profile.life_n - 1) if profile.life_n > 1 else 1.0
        wear = p ** profile.degradation_exponent
        amps = np.where(low, profile.low_gain * wear, 1.0 - wear)
        if profile.random_phase:
            phases = rng.uniform(0.0, 2.0 * np.pi, size=freqs.size)
        else:
            phases = np.zeros(freqs.size)
        x = (amps[:, None] * np.sin(2.0 * np.pi * freqs[:, None] * t[None, :] + phases[:, None])).sum(axis=0)
        if profile.noise_sigma > 0:
            x = x + rng.normal(0.0, profile.noise_sigma, size=RECORDING_LEN)
        secs = int(k * SNAPSHOT_PERIOD_S)
        recordings.append(Recording(x, (secs // 3600, secs // 60 % 60, secs % 60, 0)))
    return BearingRun(bearing_id, condition, recordings)


def synth_fleet(
    per_condition: Sequence[int] = (3, 3, 2),
    life_n: int = 120,
    seed: int = 0,
    noise_sigma: float = 0.05,
) -> list[BearingRun]:
    """Desk-scale fleet mirroring the three operating conditions.

    Tone frequencies scale with shaft speed; each bearing draws its own
    degradation exponent and tone jitter from ``seed``.
    """
    rng = np.random.default_rng(seed)
    base = np.array(SynthProfile().base_freqs_hz)
    runs = []
    for cond_idx, count in enumerate(per_condition, start=1):
        speed, force = CONDITIONS[cond_idx]
        for b in range(1, count + 1):
            jitter = rng.uniform(0.97, 1.03, size=base.size)
            profile = SynthProfile(
                life_n=life_n,
                base_freqs_hz=tuple(base * speed / 1800.0 * jitter),
                noise_sigma=noise_sigma,
                degradation_exponent=float(rng.uniform(1.2, 1.8)),
            )
            runs.append(
                synth_bearing(profile, int(rng.integers(2**31)), f"Bearing{cond_idx}_{b}", Condition(speed, force))
            )
    return runs
