"""Fog node: packet ingestion, session analytics, bounded storage, selective forwarding."""

from __future__ import annotations

import enum
import statistics
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import signal_core as sc
from .cloud_sink import CloudFrame, encode_frame
from .device_sim import SamplePacket, TapProtocol, encoded_packet_size
from .errors import DuplicateError, EmptySessionError, GapError, NotFoundError, SessionStateError
from .signal_core import AngleSeries, Channel, FlexSensorSpec, FrequencyProfile, TapEvent


@dataclass(frozen=True)
class SignalParams:
    threshold_deg: float = sc.DEFAULT_THRESHOLD_DEG
    min_gap_s: float = sc.DEFAULT_MIN_GAP_S
    window_s: float = sc.DEFAULT_WINDOW_S
    hop_s: float = sc.DEFAULT_HOP_S
    smooth_window_n: int = sc.DEFAULT_SMOOTH_WINDOW_N
    clip_max_deg: float = sc.DEFAULT_CLIP_MAX_DEG


class ForwardMode(str, enum.Enum):
    SUMMARY_ONLY = "summary_only"
    SUMMARY_PLUS_ALERTS = "summary_plus_alerts"
    RAW_PASSTHROUGH = "raw_passthrough"


@dataclass(frozen=True)
class ForwardPolicy:
    mode: ForwardMode = ForwardMode.SUMMARY_ONLY
    alert_freq_floor_hz: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "mode", ForwardMode(self.mode))
        if self.alert_freq_floor_hz < 0:
            raise ValueError("alert_freq_floor_hz must be non-negative")


@dataclass(frozen=True)
class RoundSummary:
    label: str
    mean_freq_hz: float
    max_freq_hz: float
    tap_count: int


@dataclass(frozen=True)
class SessionSummary:
    session_id: str
    device_id: str
    rounds: tuple[RoundSummary, ...]
    total_taps: int
    duration_s: float
    summary_bytes: int = 0

    def to_payload(self) -> dict:
        return {
            "session_id": self.session_id,
            "device_id": self.device_id,
            "rounds": [
                {"label": r.label, "mean_freq_hz": r.mean_freq_hz, "max_freq_hz": r.max_freq_hz, "tap_count": r.tap_count}
                for r in self.rounds
            ],
            "total_taps": self.total_taps,
            "duration_s": self.duration_s,
            "summary_bytes": self.summary_bytes,
        }

    @classmethod
    def from_payload(cls, doc: dict) -> "SessionSummary":
        return cls(
            doc["session_id"],
            doc["device_id"],
            tuple(RoundSummary(**r) for r in doc["rounds"]),
            doc["total_taps"],
            doc["duration_s"],
            doc["summary_bytes"],
        )


class SessionStatus(str, enum.Enum):
    OPEN = "open"
    CLOSED = "closed"


@dataclass
class SessionRecord:
    session_id: str
    device_id: str
    started_at_s: float
    raw_bytes_received: int = 0
    samples: list[sc.FlexSample] = field(default_factory=list)  # tuple once closed
    series: dict[Channel, AngleSeries] = field(default_factory=dict)
    status: SessionStatus = SessionStatus.OPEN
    flagged: bool = False
    events: list[TapEvent] = field(default_factory=list)
    profiles: list[FrequencyProfile] = field(default_factory=list)
    # in-order reassembly
    next_seq: int = 0
    pending: dict[int, SamplePacket] = field(default_factory=dict)
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def __setattr__(self, name, value):
        if getattr(self, "status", None) is SessionStatus.CLOSED and name != "status":
            raise SessionStateError(f"session {self.session_id} is closed")
        super().__setattr__(name, value)


@dataclass(frozen=True)
class Ack:
    accepted: bool
    next_seq: int


# --- analytics stages ----------------------------------------------------------


def condition_samples(samples: Sequence[sc.FlexSample], spec: FlexSensorSpec, params: SignalParams) -> dict[Channel, AngleSeries]:
    """Voltage -> angle -> clip + smooth, per channel."""
    by_ch: dict[Channel, tuple[list[float], list[float]]] = {}
    for s in samples:
        ts, vs = by_ch.setdefault(s.channel, ([], []))
        ts.append(s.t)
        vs.append(s.voltage)
    out = {}
    for ch in sorted(by_ch, key=lambda c: c.value):
        ts, vs = by_ch[ch]
        series = AngleSeries(ch, ts, sc.voltages_to_angles(np.array(vs), spec))
        out[ch] = sc.condition_series(series, params.clip_max_deg, params.smooth_window_n)
    return out


def analyze_series(
    series: AngleSeries, protocol: TapProtocol, params: SignalParams
) -> tuple[list[TapEvent], list[RoundSummary], list[FrequencyProfile]]:
    """Detect taps and summarize each protocol round.

    Rounds are sliced by time boundary. A round's mean/max rate is the mean/max
    of its windowed profile. Profiles are returned in session time.
    """
    events = sc.detect_taps(series, params.threshold_deg, params.min_gap_s)
    rounds, profiles = [], []
    for (start, end), rnd in zip(protocol.boundaries(), protocol.rounds):
        inside = [e for e in events if start <= e.t_peak < end]
        local = [TapEvent(e.t_peak - start, e.amplitude, e.channel) for e in inside]
        prof = sc.tap_frequency_profile(local, end - start, params.window_s, params.hop_s)
        freqs = prof.freqs
        rounds.append(RoundSummary(rnd.label, statistics.fmean(freqs), max(freqs), len(inside)))
        profiles.append(FrequencyProfile(prof.window_s, tuple((c + start, f) for c, f in prof.points)))
    return events, rounds, profiles


def summary_frame(summary: SessionSummary, seq: int = 0) -> CloudFrame:
    return CloudFrame("summary", summary.session_id, seq, summary.to_payload())


def with_encoded_size(summary: SessionSummary) -> SessionSummary:
    """Fill ``summary_bytes`` with the size of the summary's own seq-0 frame."""
    size = -1
    while summary.summary_bytes != size:
        size = summary.summary_bytes
        n = len(encode_frame(summary_frame(summary)))
        summary = SessionSummary(
            summary.session_id, summary.device_id, summary.rounds, summary.total_taps, summary.duration_s, n
        )
    return summary


def apply_forward_policy(
    summary: SessionSummary,
    policy: ForwardPolicy,
    series: dict[Channel, AngleSeries] | None = None,
    start_seq: int = 0,
) -> list[CloudFrame]:
    """Frames bound for the cloud, numbered from ``start_seq``."""
    frames = [summary_frame(summary, start_seq)]
    if policy.mode is ForwardMode.SUMMARY_PLUS_ALERTS:
        for r in summary.rounds:
            if r.mean_freq_hz < policy.alert_freq_floor_hz:
                payload = {
                    "session": summary.session_id,
                    "round_label": r.label,
                    "mean_freq_hz": r.mean_freq_hz,
                    "floor_hz": policy.alert_freq_floor_hz,
                }
                frames.append(CloudFrame("alert", summary.session_id, start_seq + len(frames), payload))
    elif policy.mode is ForwardMode.RAW_PASSTHROUGH:
        for ch in sorted(series or {}, key=lambda c: c.value):
            s = series[ch]
            payload = {"channel": ch.value, "samples": [[t, a] for t, a in s.samples]}
            frames.append(CloudFrame("raw", summary.session_id, start_seq + len(frames), payload))
    return frames


# --- storage -------------------------------------------------------------------


class BoundedStore:
    """Closed sessions, at most ``capacity`` of them; oldest start evicted first."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.entries: OrderedDict[str, SessionRecord] = OrderedDict()
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, session_id: str) -> bool:
        return session_id in self.entries

    def get(self, session_id: str) -> SessionRecord | None:
        return self.entries.get(session_id)

    def insert(self, record: SessionRecord) -> str | None:
        if record.status is not SessionStatus.CLOSED:
            raise SessionStateError(f"session {record.session_id} must be closed before storing")
        with self._lock:
            if record.session_id in self.entries:
                raise DuplicateError(record.session_id)
            self.entries[record.session_id] = record
            if len(self.entries) <= self.capacity:
                return None
            # min() keeps the first of equal keys, i.e. insertion order breaks ties
            oldest = min(self.entries.values(), key=lambda r: r.started_at_s).session_id
            del self.entries[oldest]
            return oldest


def store_and_evict(store: BoundedStore, record: SessionRecord) -> str | None:
    return store.insert(record)


# --- gateway -------------------------------------------------------------------


@dataclass(frozen=True)
class GatewayConfig:
    capacity: int = 16
    policy: ForwardPolicy = field(default_factory=ForwardPolicy)
    reorder_window: int = 8
    signal: SignalParams = field(default_factory=SignalParams)
    spec: FlexSensorSpec = field(default_factory=FlexSensorSpec)
    analysis_channel: Channel = Channel.INDEX


class FogGateway:
    """Thread-safe for concurrent ingestion across devices.

    Packets of one device must arrive from one thread at a time; closing a
    session excludes ingestion into that session while it runs.
    """

    def __init__(self, config: GatewayConfig | None = None, clock: Callable[[], float] = time.monotonic):
        self.config = config or GatewayConfig()
        self.store = BoundedStore(self.config.capacity)
        self._clock = clock
        self._lock = threading.Lock()
        self._open: dict[str, SessionRecord] = {}  # device_id -> open session
        self._by_id: dict[str, SessionRecord] = {}
        self._session_counter: dict[str, int] = {}
        self.uplink_seq = 0

    def _open_for(self, device_id: str) -> SessionRecord:
        with self._lock:
            rec = self._open.get(device_id)
            if rec is None:
                n = self._session_counter.get(device_id, 0)
                self._session_counter[device_id] = n + 1
                rec = SessionRecord(f"{device_id}:{n}", device_id, self._clock())
                self._open[device_id] = rec
                self._by_id[rec.session_id] = rec
            return rec

    def open_session_id(self, device_id: str) -> str:
        return self._open_for(device_id).session_id

    def ingest_packet(self, packet: SamplePacket) -> Ack:
        rec = self._open_for(packet.device_id)
        with rec.lock:
            if packet.seq < rec.next_seq or packet.seq in rec.pending:
                return Ack(True, rec.next_seq)
            if packet.seq > rec.next_seq + self.config.reorder_window:
                rec.flagged = True
                raise GapError(packet.device_id, rec.next_seq, packet.seq)
            rec.raw_bytes_received += encoded_packet_size(packet)
            rec.pending[packet.seq] = packet
            while rec.next_seq in rec.pending:
                rec.samples.extend(rec.pending.pop(rec.next_seq).samples)
                rec.next_seq += 1
            return Ack(True, rec.next_seq)

    def session(self, session_id: str) -> SessionRecord:
        rec = self._by_id.get(session_id) or self.store.get(session_id)
        if rec is None:
            raise NotFoundError(session_id)
        return rec

    def close_session(self, session_id: str, protocol: TapProtocol) -> SessionSummary:
        with self._lock:
            rec = self._by_id.get(session_id)
        if rec is None:
            if session_id in self.store:
                raise SessionStateError(f"session {session_id} is already closed")
            raise NotFoundError(session_id)
        cfg = self.config
        with rec.lock:
            if rec.status is SessionStatus.CLOSED:
                raise SessionStateError(f"session {session_id} is already closed")
            if rec.pending:
                # unrecoverable holes: keep what arrived, in seq order
                rec.flagged = True
                for seq in sorted(rec.pending):
                    rec.samples.extend(rec.pending[seq].samples)
                rec.pending = {}
            if not rec.samples:
                raise EmptySessionError(session_id)
            series = condition_samples(rec.samples, cfg.spec, cfg.signal)
            channel = cfg.analysis_channel if cfg.analysis_channel in series else next(iter(series))
            events, rounds, profiles = analyze_series(series[channel], protocol, cfg.signal)
            summary = with_encoded_size(
                SessionSummary(
                    rec.session_id,
                    rec.device_id,
                    tuple(rounds),
                    sum(r.tap_count for r in rounds),
                    protocol.duration_s,
                )
            )
            rec.samples = tuple(rec.samples)
            rec.series = series
            rec.events = tuple(events)
            rec.profiles = tuple(profiles)
            rec.status = SessionStatus.CLOSED
        with self._lock:
            del self._by_id[session_id]
            if self._open.get(rec.device_id) is rec:
                del self._open[rec.device_id]
        self.store.insert(rec)
        return summary

    def forward(self, summary: SessionSummary) -> list[CloudFrame]:
        """Frames for a closed session under the configured policy."""
        rec = self.store.get(summary.session_id)
        series = rec.series if rec is not None else None
        with self._lock:
            frames = apply_forward_policy(summary, self.config.policy, series, self.uplink_seq)
            self.uplink_seq += len(frames)
        return frames
