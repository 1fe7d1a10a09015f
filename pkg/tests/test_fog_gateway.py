import itertools
import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fogwear.cloud_sink import encode_frame
from fogwear.device_sim import GloveConfig, Round, SamplePacket, TapProtocol, default_protocol, packetize, synth_session
from fogwear.errors import DuplicateError, EmptySessionError, GapError, NotFoundError, SessionStateError
from fogwear.fog_gateway import (
    BoundedStore,
    ForwardMode,
    ForwardPolicy,
    FogGateway,
    GatewayConfig,
    RoundSummary,
    SessionRecord,
    SessionStatus,
    SessionSummary,
    apply_forward_policy,
    store_and_evict,
    with_encoded_size,
)
from fogwear.signal_core import Channel, FlexSample


def ticking_clock():
    counter = itertools.count()
    return lambda: float(next(counter))


def feed(gw, protocol, glove, device_id="g", batch_n=25):
    for p in packetize(synth_session(protocol, glove), device_id, batch_n):
        gw.ingest_packet(p)
    return gw.open_session_id(device_id)


def packet(seq, device="g", n=2):
    samples = tuple(FlexSample(seq * n * 0.02 + i * 0.02, Channel.INDEX, 2.0) for i in range(n))
    return SamplePacket(device, seq, samples, samples[-1].t)


class TestIngest:
    def test_first_packet(self):
        ack = FogGateway().ingest_packet(packet(0))
        assert ack.accepted and ack.next_seq == 1

    def test_duplicate_idempotent(self):
        gw = FogGateway()
        gw.ingest_packet(packet(0))
        rec = gw.session(gw.open_session_id("g"))
        before = (len(rec.samples), rec.raw_bytes_received)
        ack = gw.ingest_packet(packet(0))
        assert ack.next_seq == 1
        assert (len(rec.samples), rec.raw_bytes_received) == before

    def test_gap_beyond_window(self):
        gw = FogGateway()
        gw.ingest_packet(packet(0))
        with pytest.raises(GapError) as exc:
            gw.ingest_packet(packet(100))
        assert exc.value.expected == 1 and exc.value.got == 100
        assert gw.session(gw.open_session_id("g")).flagged

    def test_reorder_within_window(self):
        gw = FogGateway()
        assert gw.ingest_packet(packet(0)).next_seq == 1
        assert gw.ingest_packet(packet(2)).next_seq == 1
        assert gw.ingest_packet(packet(1)).next_seq == 3
        rec = gw.session(gw.open_session_id("g"))
        assert [s.t for s in rec.samples] == sorted(s.t for s in rec.samples)
        assert len(rec.samples) == 6

    def test_devices_independent(self):
        gw = FogGateway()
        gw.ingest_packet(packet(0, "a"))
        assert gw.ingest_packet(packet(0, "b")).next_seq == 1
        assert gw.open_session_id("a") != gw.open_session_id("b")


class TestClose:
    def test_default_protocol_ordinal(self):
        gw = FogGateway()
        sid = feed(gw, default_protocol(), GloveConfig(seed=3))
        s = gw.close_session(sid, default_protocol())
        f = [r.mean_freq_hz for r in s.rounds]
        assert len(f) == 5
        assert abs(f[0] - f[1]) <= 0.2
        assert f[1] < f[2] < f[3]
        assert s.total_taps == sum(r.tap_count for r in s.rounds)
        assert s.duration_s == 50.0

    def test_no_taps(self):
        # 5 degree bends never cross a 15 degree threshold
        gw = FogGateway()
        sid = feed(gw, default_protocol(), GloveConfig(amplitude_deg=5.0, noise_std_deg=0.5, seed=1))
        s = gw.close_session(sid, default_protocol())
        assert s.total_taps == 0
        assert all(r.tap_count == 0 and r.mean_freq_hz == 0 and r.max_freq_hz == 0 for r in s.rounds)

    def test_deterministic(self):
        outs = []
        for _ in range(2):
            gw = FogGateway(clock=ticking_clock())
            outs.append(gw.close_session(feed(gw, default_protocol(), GloveConfig(seed=9)), default_protocol()))
        assert outs[0] == outs[1]

    def test_empty_session(self):
        gw = FogGateway()
        with pytest.raises(EmptySessionError):
            gw.close_session(gw.open_session_id("g"), default_protocol())

    def test_unknown_session(self):
        with pytest.raises(NotFoundError):
            FogGateway().close_session("nope", default_protocol())

    def test_closed_is_frozen(self):
        gw = FogGateway()
        sid = feed(gw, TapProtocol((Round(5.0, 1.0, 1.0),)), GloveConfig(seed=2))
        gw.close_session(sid, TapProtocol((Round(5.0, 1.0, 1.0),)))
        rec = gw.session(sid)
        assert rec.status is SessionStatus.CLOSED
        with pytest.raises(SessionStateError):
            rec.flagged = True
        with pytest.raises(SessionStateError):
            gw.close_session(sid, default_protocol())

    def test_new_session_after_close(self):
        gw = FogGateway()
        proto = TapProtocol((Round(3.0, 1.0, 1.0),))
        first = feed(gw, proto, GloveConfig(seed=2))
        gw.close_session(first, proto)
        assert feed(gw, proto, GloveConfig(seed=2)) != first

    def test_pending_hole_flags(self):
        gw = FogGateway()
        gw.ingest_packet(packet(0))
        gw.ingest_packet(packet(2))
        sid = gw.open_session_id("g")
        gw.close_session(sid, TapProtocol((Round(1.0, 1.0, 1.0),)))
        rec = gw.session(sid)
        assert rec.flagged and len(rec.samples) == 4

    def test_concurrent_devices(self):
        gw = FogGateway()
        proto = TapProtocol((Round(10.0, 2.0, 2.0),))
        streams = {f"d{i}": packetize(synth_session(proto, GloveConfig(seed=i)), f"d{i}", 20) for i in range(4)}

        def run(dev):
            for p in streams[dev]:
                gw.ingest_packet(p)

        threads = [threading.Thread(target=run, args=(d,)) for d in streams]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        for dev, pk in streams.items():
            rec = gw.session(gw.open_session_id(dev))
            assert len(rec.samples) == sum(len(p.samples) for p in pk)
            s = gw.close_session(rec.session_id, proto)
            assert abs(s.total_taps - 20) <= 1


def make_summary(means):
    rounds = tuple(RoundSummary(f"r{i}", m, m, int(m * 10)) for i, m in enumerate(means))
    return with_encoded_size(SessionSummary("g:0", "g", rounds, sum(r.tap_count for r in rounds), 10.0 * len(means)))


class TestForward:
    def test_summary_only(self):
        frames = apply_forward_policy(make_summary([1.0, 0.2]), ForwardPolicy())
        assert [f.event for f in frames] == ["summary"]

    def test_alert_below_floor(self):
        frames = apply_forward_policy(make_summary([1.0, 0.2]), ForwardPolicy(ForwardMode.SUMMARY_PLUS_ALERTS, 0.5))
        assert [f.event for f in frames] == ["summary", "alert"]
        assert frames[1].payload["round_label"] == "r1"
        assert [f.seq for f in frames] == [0, 1]

    def test_raw_passthrough(self):
        gw = FogGateway(GatewayConfig(policy=ForwardPolicy("raw_passthrough")))
        proto = TapProtocol((Round(2.0, 1.0, 1.0),))
        s = gw.close_session(feed(gw, proto, GloveConfig(seed=1)), proto)
        frames = gw.forward(s)
        assert [f.event for f in frames] == ["summary", "raw", "raw"]
        assert len(frames[1].payload["samples"]) == 100

    def test_uplink_seq_continues(self):
        gw = FogGateway()
        proto = TapProtocol((Round(2.0, 1.0, 1.0),))
        a = gw.forward(gw.close_session(feed(gw, proto, GloveConfig(seed=1), "a"), proto))
        b = gw.forward(gw.close_session(feed(gw, proto, GloveConfig(seed=1), "b"), proto))
        assert [f.seq for f in a + b] == [0, 1]

    def test_summary_bytes_is_own_frame(self):
        s = make_summary([1.0, 2.0, 3.0])
        assert s.summary_bytes == len(encode_frame(apply_forward_policy(s, ForwardPolicy())[0]))

    def test_payload_round_trip(self):
        s = make_summary([1.0, 2.5])
        assert SessionSummary.from_payload(s.to_payload()) == s


def test_bandwidth_ten_minutes():
    proto = TapProtocol(tuple(Round(120.0, f, f, f"r{i}") for i, f in enumerate([1, 1, 2, 3.5, 2])))
    gw = FogGateway()
    sid = feed(gw, proto, GloveConfig(seed=4))
    raw = gw.session(sid).raw_bytes_received
    s = gw.close_session(sid, proto)
    sent = sum(len(encode_frame(f)) for f in gw.forward(s))
    assert sent / raw <= 0.05


def closed(sid, started):
    rec = SessionRecord(sid, "g", started)
    rec.status = SessionStatus.CLOSED
    return rec


class TestStore:
    def test_capacity(self):
        store = BoundedStore(3)
        for i in range(3):
            assert store_and_evict(store, closed(f"s{i}", float(i))) is None
        assert store_and_evict(store, closed("s3", 3.0)) == "s0"
        assert "s0" not in store and len(store) == 3

    def test_duplicate(self):
        store = BoundedStore(3)
        store.insert(closed("s", 0.0))
        with pytest.raises(DuplicateError):
            store.insert(closed("s", 1.0))

    def test_open_rejected(self):
        with pytest.raises(SessionStateError):
            BoundedStore(2).insert(SessionRecord("s", "g", 0.0))

    @settings(max_examples=50)
    @given(st.integers(1, 6), st.lists(st.floats(0, 100, allow_nan=False), max_size=30))
    def test_never_exceeds_capacity(self, cap, starts):
        store = BoundedStore(cap)
        for i, t in enumerate(starts):
            evicted = store.insert(closed(f"s{i}", t))
            assert len(store) <= cap
            if evicted is not None:
                t_ev = starts[int(evicted[1:])]
                assert all(r.started_at_s >= t_ev for r in store.entries.values())
