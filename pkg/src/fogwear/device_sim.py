"""Simulated smart-glove devices.

Synthesizes tapping sessions from a round-based protocol, replays recorded
CSV traces, and batches samples into sequence-numbered packets with a
compact binary encoding used for link accounting.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import ConfigError, ParseError, SchemaError
from .signal_core import Channel, FlexSample, FlexSensorSpec

CSV_HEADER = ("t_s", "channel", "voltage_v")

# Tap k of a round sits where the accumulated tap phase equals k + TAP_PHASE.
# 0.3 keeps tap instants off the integer-second window edges used downstream.
TAP_PHASE = 0.3
MAX_PULSE_WIDTH_S = 0.3


@dataclass(frozen=True)
class Round:
    duration_s: float
    freq_start_hz: float
    freq_end_hz: float
    label: str = ""

    def __post_init__(self):
        if not self.duration_s > 0:
            raise ConfigError("duration_s", f"round duration must be positive, got {self.duration_s}")
        if self.freq_start_hz < 0 or self.freq_end_hz < 0:
            raise ConfigError("freq_start_hz", "round frequencies must be non-negative")

    def rate_at(self, tau: float) -> float:
        return self.freq_start_hz + (self.freq_end_hz - self.freq_start_hz) * tau / self.duration_s

    def tap_times(self) -> list[float]:
        """Tap instants relative to the round start under a linear rate ramp."""
        f0, f1, d = self.freq_start_hz, self.freq_end_hz, self.duration_s
        a = (f1 - f0) / (2.0 * d)
        total_phase = d * (f0 + f1) / 2.0
        out = []
        k = 0
        while k + TAP_PHASE < total_phase:
            c = k + TAP_PHASE
            # stable root of a*tau^2 + f0*tau - c = 0
            out.append(2.0 * c / (f0 + math.sqrt(f0 * f0 + 4.0 * a * c)))
            k += 1
        return out


@dataclass(frozen=True)
class TapProtocol:
    rounds: tuple[Round, ...]

    def __post_init__(self):
        object.__setattr__(self, "rounds", tuple(self.rounds))
        if not self.rounds:
            raise ConfigError("rounds", "protocol needs at least one round")

    @property
    def duration_s(self) -> float:
        return sum(r.duration_s for r in self.rounds)

    @property
    def max_freq_hz(self) -> float:
        return max(max(r.freq_start_hz, r.freq_end_hz) for r in self.rounds)

    def boundaries(self) -> list[tuple[float, float]]:
        """``(start, end)`` of each round in session time."""
        out, t0 = [], 0.0
        for r in self.rounds:
            out.append((t0, t0 + r.duration_s))
            t0 += r.duration_s
        return out

    def tap_schedule(self) -> list[tuple[float, float]]:
        """``(session time, instantaneous rate)`` of every tap.

        Taps whose pulse would run past the end of the session are dropped,
        so every scheduled tap is fully observable.
        """
        out = []
        end = self.duration_s
        for (start, _), rnd in zip(self.boundaries(), self.rounds):
            for tau in rnd.tap_times():
                f = rnd.rate_at(tau)
                if start + tau + pulse_width(f) / 2.0 <= end:
                    out.append((start + tau, f))
        return out

    def tap_times(self) -> list[float]:
        return [t for t, _ in self.tap_schedule()]


def default_protocol(round_s: float = 10.0) -> TapProtocol:
    """Five rounds: slow, slow, faster, as fast as possible, slow-to-fast ramp."""
    return TapProtocol(
        (
            Round(round_s, 1.0, 1.0, "round1"),
            Round(round_s, 1.0, 1.0, "round2"),
            Round(round_s, 2.0, 2.0, "round3"),
            Round(round_s, 3.5, 3.5, "round4"),
            Round(round_s, 1.0, 3.5, "round5"),
        )
    )


@dataclass(frozen=True)
class GloveConfig:
    sample_rate_hz: float = 50.0
    amplitude_deg: float = 45.0
    noise_std_deg: float = 1.0
    spec: FlexSensorSpec = field(default_factory=FlexSensorSpec)
    seed: int = 0
    channels: tuple[Channel, ...] = (Channel.INDEX, Channel.THUMB)
    thumb_ratio: float = 0.8

    def __post_init__(self):
        if not self.sample_rate_hz > 0:
            raise ConfigError("sample_rate_hz", "must be positive")
        if not self.amplitude_deg > 0:
            raise ConfigError("amplitude_deg", "must be positive")
        if self.noise_std_deg < 0:
            raise ConfigError("noise_std_deg", "must be non-negative")
        object.__setattr__(self, "channels", tuple(Channel(c) for c in self.channels))
        if not self.channels:
            raise ConfigError("channels", "at least one channel required")


def pulse_width(rate_hz: float) -> float:
    return min(0.4 / rate_hz, MAX_PULSE_WIDTH_S)


def tap_waveform(t: np.ndarray, tap_times: Sequence[float], rates: Sequence[float], amplitude: float) -> np.ndarray:
    """Raised-cosine pulses of width ``min(0.4/f, 0.3 s)`` centred on each tap."""
    y = np.zeros_like(t)
    for tc, f in zip(tap_times, rates):
        width = pulse_width(f)
        lo = np.searchsorted(t, tc - width / 2.0, side="right")
        hi = np.searchsorted(t, tc + width / 2.0, side="left")
        seg = t[lo:hi] - tc
        y[lo:hi] += amplitude * 0.5 * (1.0 + np.cos(2.0 * np.pi * seg / width))
    return y


def synth_angles(protocol: TapProtocol, config: GloveConfig) -> tuple[np.ndarray, dict[Channel, np.ndarray]]:
    """Sample times and noisy per-channel angles (degrees, physically clamped)."""
    if config.sample_rate_hz <= 2.0 * protocol.max_freq_hz:
        raise ConfigError(
            "sample_rate_hz",
            f"{config.sample_rate_hz} Hz does not exceed twice the top tap rate {protocol.max_freq_hz} Hz",
        )
    fs = config.sample_rate_hz
    n = math.ceil(protocol.duration_s * fs - 1e-9)
    t = np.arange(n) / fs
    schedule = protocol.tap_schedule()
    clean = tap_waveform(t, [tc for tc, _ in schedule], [f for _, f in schedule], config.amplitude_deg)
    rng = np.random.default_rng(config.seed)
    angle_max = config.spec.angle_max
    out = {}
    for ch in config.channels:
        scale = config.thumb_ratio if ch is Channel.THUMB else 1.0
        noise = rng.normal(0.0, config.noise_std_deg, size=n) if config.noise_std_deg > 0 else 0.0
        out[ch] = np.clip(clean * scale + noise, 0.0, angle_max)
    return t, out


def synth_session(protocol: TapProtocol, config: GloveConfig) -> list[FlexSample]:
    """Time-ordered sample stream (channels interleaved at each instant)."""
    t, angles = synth_angles(protocol, config)
    spec = config.spec
    volts = {}
    for ch, a in angles.items():
        r = spec.r_flat + (a / spec.angle_max) * (spec.r_bent - spec.r_flat)
        volts[ch] = (spec.vin * spec.r_fixed / (spec.r_fixed + r)).tolist()
    times = t.tolist()
    return [FlexSample(ti, ch, volts[ch][i]) for i, ti in enumerate(times) for ch in config.channels]


def replay_csv(path: str | Path) -> Iterator[FlexSample]:
    """Yield samples from a trace file in file order."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise SchemaError(f"{path}: missing header")
        header = [h.strip() for h in header]
        missing = [c for c in CSV_HEADER if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing column(s) {', '.join(missing)}")
        idx = [header.index(c) for c in CSV_HEADER]
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            try:
                t = float(row[idx[0]])
                ch = Channel(row[idx[1]].strip())
                v = float(row[idx[2]])
                yield FlexSample(t, ch, v)
            except (ValueError, IndexError) as exc:
                raise ParseError(line, str(exc)) from None


def write_csv(path: str | Path, samples: Iterable[FlexSample]) -> int:
    n = 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for s in samples:
            w.writerow([repr(s.t), s.channel.value, repr(s.voltage)])
            n += 1
    return n


@dataclass(frozen=True)
class SamplePacket:
    device_id: str
    seq: int
    samples: tuple[FlexSample, ...]
    sent_at_s: float

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        if not self.samples:
            raise ValueError("packet batch must be nonempty")
        if self.seq < 0:
            raise ValueError("seq must be non-negative")


def packetize(stream: Iterable[FlexSample], device_id: str, batch_n: int) -> list[SamplePacket]:
    """Batch a stream into packets; ``sent_at_s`` is the last sample's time."""
    if batch_n < 1:
        raise ValueError("batch_n must be >= 1")
    packets: list[SamplePacket] = []
    batch: list[FlexSample] = []
    for s in stream:
        batch.append(s)
        if len(batch) == batch_n:
            packets.append(SamplePacket(device_id, len(packets), tuple(batch), batch[-1].t))
            batch = []
    if batch:
        packets.append(SamplePacket(device_id, len(packets), tuple(batch), batch[-1].t))
    return packets


# Packet wire layout, big-endian:
#   u8 version | u16 id length | id (UTF-8) | u64 seq | f64 sent_at | u32 count
#   then count x (f64 t | u8 channel | f64 voltage)
PACKET_VERSION = 1
_HEAD = struct.Struct(">BH")
_MID = struct.Struct(">QdI")
_SAMPLE = struct.Struct(">dBd")
_CH_CODE = {Channel.INDEX: 0, Channel.THUMB: 1}
_CODE_CH = {v: k for k, v in _CH_CODE.items()}


def encode_packet(packet: SamplePacket) -> bytes:
    dev = packet.device_id.encode("utf-8")
    parts = [_HEAD.pack(PACKET_VERSION, len(dev)), dev, _MID.pack(packet.seq, packet.sent_at_s, len(packet.samples))]
    parts.extend(_SAMPLE.pack(s.t, _CH_CODE[s.channel], s.voltage) for s in packet.samples)
    return b"".join(parts)


def encoded_packet_size(packet: SamplePacket) -> int:
    return _HEAD.size + len(packet.device_id.encode("utf-8")) + _MID.size + _SAMPLE.size * len(packet.samples)


def decode_packet(data: bytes) -> SamplePacket:
    try:
        version, n_id = _HEAD.unpack_from(data, 0)
        if version != PACKET_VERSION:
            raise SchemaError(f"unsupported packet version {version}")
        off = _HEAD.size
        device_id = data[off : off + n_id].decode("utf-8")
        off += n_id
        seq, sent_at, count = _MID.unpack_from(data, off)
        off += _MID.size
        if len(data) != off + count * _SAMPLE.size:
            raise SchemaError("packet length does not match sample count")
        samples = []
        for t, code, v in _SAMPLE.iter_unpack(data[off:]):
            samples.append(FlexSample(t, _CODE_CH[code], v))
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise SchemaError(f"bad packet: {exc}") from None
    return SamplePacket(device_id, seq, tuple(samples), sent_at)
