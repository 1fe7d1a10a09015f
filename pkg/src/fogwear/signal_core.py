"""Flex-sensor signal chain.

Raw divider voltages become bend angles, angles are conditioned (clip then
centered moving average), and the conditioned series is scanned for taps,
which are in turn binned into a windowed tap-rate profile.

Divider convention: the flex sensor is the upper leg and the measured voltage
sits across the fixed resistor, so ``v_out = vin * r_fixed / (r_fixed + r_flex)``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidSessionError, OpenCircuitError, OutOfRangeError

DEFAULT_THRESHOLD_DEG = 15.0
DEFAULT_MIN_GAP_S = 0.1
DEFAULT_WINDOW_S = 2.0
DEFAULT_HOP_S = 1.0
DEFAULT_SMOOTH_WINDOW_N = 5
DEFAULT_CLIP_MAX_DEG = 90.0


class Channel(str, enum.Enum):
    INDEX = "index"
    THUMB = "thumb"


@dataclass(frozen=True)
class FlexSensorSpec:
    vin: float = 5.0
    r_fixed: float = 10_000.0
    r_flat: float = 25_000.0
    r_bent: float = 100_000.0
    angle_max: float = 90.0
    thickness_mm: float = 6.35
    active_fraction: float = 0.8486

    def __post_init__(self):
        if not self.vin > 0:
            raise ValueError("vin must be positive")
        if not (self.r_fixed > 0 and self.r_flat > 0 and self.r_bent > 0):
            raise ValueError("resistances must be positive")
        if self.r_flat == self.r_bent:
            raise ValueError("r_flat and r_bent must differ")
        if not self.angle_max > 0:
            raise ValueError("angle_max must be positive")
        if not 0 < self.active_fraction <= 1:
            raise ValueError("active_fraction must be in (0, 1]")


@dataclass(frozen=True)
class FlexSample:
    t: float
    channel: Channel
    voltage: float

    def __post_init__(self):
        if self.t < 0:
            raise ValueError(f"negative timestamp {self.t}")
        object.__setattr__(self, "channel", Channel(self.channel))


def _frozen(values) -> np.ndarray:
    arr = np.array(values, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class AngleSeries:
    """Bend angle of one finger over time. Arrays are read-only."""

    channel: Channel
    t: np.ndarray
    angle: np.ndarray

    def __post_init__(self):
        t = _frozen(self.t)
        angle = _frozen(self.angle)
        if t.shape != angle.shape or t.ndim != 1:
            raise ValueError("t and angle must be 1-d and equally long")
        if t.size > 1 and not np.all(np.diff(t) > 0):
            raise ValueError("timestamps must be strictly increasing")
        object.__setattr__(self, "channel", Channel(self.channel))
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "angle", angle)

    @classmethod
    def from_pairs(cls, channel: Channel, samples: Iterable[tuple[float, float]]) -> "AngleSeries":
        pairs = list(samples)
        return cls(channel, [p[0] for p in pairs], [p[1] for p in pairs])

    @property
    def samples(self) -> list[tuple[float, float]]:
        return list(zip(self.t.tolist(), self.angle.tolist()))

    def __len__(self) -> int:
        return int(self.t.size)

    def __eq__(self, other) -> bool:
        if not isinstance(other, AngleSeries):
            return NotImplemented
        return (
            self.channel == other.channel
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.angle, other.angle)
        )


@dataclass(frozen=True)
class TapEvent:
    t_peak: float
    amplitude: float
    channel: Channel


@dataclass(frozen=True)
class FrequencyProfile:
    window_s: float
    points: tuple[tuple[float, float], ...] = field(default_factory=tuple)

    @property
    def freqs(self) -> list[float]:
        return [f for _, f in self.points]

    @property
    def centers(self) -> list[float]:
        return [c for c, _ in self.points]


def voltage_to_resistance(sample: FlexSample | float, spec: FlexSensorSpec) -> float:
    """Flex resistance in ohms from a divider reading."""
    v = sample.voltage if isinstance(sample, FlexSample) else float(sample)
    if v <= 0:
        raise OpenCircuitError(f"divider output {v} V: open circuit")
    if v > spec.vin:
        raise OutOfRangeError(f"divider output {v} V exceeds supply {spec.vin} V")
    return spec.r_fixed * (spec.vin - v) / v


def resistance_to_angle(r: float, spec: FlexSensorSpec) -> float:
    frac = (r - spec.r_flat) / (spec.r_bent - spec.r_flat)
    return min(max(frac * spec.angle_max, 0.0), spec.angle_max)


def angle_to_voltage(angle: float, spec: FlexSensorSpec) -> float:
    """Inverse of the chain above, for angles within [0, angle_max]."""
    r = spec.r_flat + (angle / spec.angle_max) * (spec.r_bent - spec.r_flat)
    return spec.vin * spec.r_fixed / (spec.r_fixed + r)


def voltages_to_angles(voltages: np.ndarray, spec: FlexSensorSpec) -> np.ndarray:
    """Vectorized voltage -> angle; same error rules as the scalar path."""
    v = np.asarray(voltages, dtype=float)
    if v.size and v.min() <= 0:
        raise OpenCircuitError(f"divider output {v.min()} V: open circuit")
    if v.size and v.max() > spec.vin:
        raise OutOfRangeError(f"divider output {v.max()} V exceeds supply {spec.vin} V")
    r = spec.r_fixed * (spec.vin - v) / v
    frac = (r - spec.r_flat) / (spec.r_bent - spec.r_flat)
    return np.clip(frac * spec.angle_max, 0.0, spec.angle_max)


def condition_series(
    series: AngleSeries,
    clip_max_deg: float = DEFAULT_CLIP_MAX_DEG,
    smooth_window_n: int = DEFAULT_SMOOTH_WINDOW_N,
) -> AngleSeries:
    """Clip to ``[0, clip_max_deg]`` then apply a centered moving average.

    Windows shrink at the edges to the samples that exist. The average is
    taken as ``x[i] + mean(x[j] - x[i])`` so constant runs come back exactly.
    """
    if smooth_window_n < 1 or smooth_window_n % 2 == 0:
        raise ValueError(f"smooth_window_n must be odd and >= 1, got {smooth_window_n}")
    if len(series) == 0:
        return series
    x = np.clip(series.angle, 0.0, clip_max_deg)
    half = smooth_window_n // 2
    if half:
        padded = np.pad(x, half, constant_values=np.nan)
        dev = sliding_window_view(padded, smooth_window_n) - x[:, None]
        y = x + np.nanmean(dev, axis=1)
        y = np.clip(y, x.min(), x.max())
    else:
        y = x
    return AngleSeries(series.channel, series.t, y)


def detect_taps(
    series: AngleSeries,
    threshold_deg: float = DEFAULT_THRESHOLD_DEG,
    min_gap_s: float = DEFAULT_MIN_GAP_S,
) -> list[TapEvent]:
    """Thresholded peak picking with hysteresis.

    An excursion opens when the armed signal reaches ``threshold_deg`` and
    closes once it falls below ``threshold_deg / 2``; its maximum is the tap.
    An excursion still open at the end of the series counts only if its
    maximum is not the last sample. Peaks closer than ``min_gap_s`` to the
    previous accepted tap are dropped.
    """
    if threshold_deg <= 0:
        raise ValueError("threshold_deg must be positive")
    if min_gap_s < 0:
        raise ValueError("min_gap_s must be non-negative")
    t = series.t.tolist()
    a = series.angle.tolist()
    release = threshold_deg / 2.0
    events: list[TapEvent] = []
    peak_i = -1

    def emit(i: int) -> None:
        if events and t[i] - events[-1].t_peak < min_gap_s:
            return
        events.append(TapEvent(t[i], a[i], series.channel))

    for i, v in enumerate(a):
        if peak_i < 0:
            if v >= threshold_deg:
                peak_i = i
        elif v < release:
            emit(peak_i)
            peak_i = -1
        elif v > a[peak_i]:
            peak_i = i
    if peak_i >= 0 and peak_i < len(a) - 1:
        emit(peak_i)
    return events


def tap_frequency_profile(
    events: Sequence[TapEvent],
    session_len_s: float,
    window_s: float = DEFAULT_WINDOW_S,
    hop_s: float = DEFAULT_HOP_S,
) -> FrequencyProfile:
    """Tap rate (count / window_s) over half-open windows ``[s, s + window_s)``.

    Window starts are ``0, hop_s, 2*hop_s, ...`` for every window that fits
    inside the session. A session shorter than one window gets a single
    window starting at 0.
    """
    if session_len_s <= 0:
        raise InvalidSessionError(f"session length must be positive, got {session_len_s}")
    if window_s <= 0 or hop_s <= 0:
        raise ValueError("window_s and hop_s must be positive")
    n_windows = max(1, math.floor((session_len_s - window_s) / hop_s + 1e-9) + 1)
    times = np.sort(np.array([e.t_peak for e in events], dtype=float))
    points = []
    for k in range(n_windows):
        start = k * hop_s
        lo = np.searchsorted(times, start, side="left")
        hi = np.searchsorted(times, start + window_s, side="left")
        points.append((start + window_s / 2.0, float(hi - lo) / window_s))
    return FrequencyProfile(window_s, tuple(points))
