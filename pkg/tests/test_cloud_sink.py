import socket
import threading

import pytest
from hypothesis import given
from hypothesis import strategies as st

from fogwear.cloud_sink import (
    EVENTS,
    MAX_FRAME_BYTES,
    CloudClient,
    CloudFrame,
    LongTermLog,
    decode_frame,
    encode_frame,
    persist,
    read_frame,
    serve,
    temporal_trend,
)
from fogwear.errors import FrameTooLarge, InsufficientDataError, SchemaError, StartupError, TruncatedError

json_leaf = st.one_of(
    st.none(), st.booleans(), st.integers(-(2**53), 2**53), st.floats(allow_nan=False, allow_infinity=False), st.text()
)
json_doc = st.recursive(
    json_leaf,
    lambda inner: st.lists(inner, max_size=4) | st.dictionaries(st.text(max_size=8), inner, max_size=4),
    max_leaves=12,
)
frames = st.builds(
    CloudFrame,
    event=st.sampled_from(sorted(EVENTS)),
    session=st.text(max_size=20),
    seq=st.integers(0, 2**40),
    payload=st.dictionaries(st.text(max_size=8), json_doc, max_size=5),
)


class TestCodec:
    def test_canonical_ack_bytes(self):
        # hand count: {"event":"ack" = 14, ,"session":"s1" = 15, ,"seq":0 = 8,
        # ,"payload":{} = 13, closing brace = 1  ->  51 bytes
        body = b'{"event":"ack","session":"s1","seq":0,"payload":{}}'
        assert len(body) == 14 + 15 + 8 + 13 + 1 == 51
        assert encode_frame(CloudFrame("ack", "s1", 0, {})) == b"\x00\x00\x00\x33" + body

    @given(frames)
    def test_round_trip(self, frame):
        assert decode_frame(encode_frame(frame)) == frame

    def test_truncated(self):
        with pytest.raises(TruncatedError):
            decode_frame(b"\x00\x00\x00")
        with pytest.raises(TruncatedError):
            decode_frame(encode_frame(CloudFrame("hello", "s", 0))[:-2])

    def test_too_large(self):
        with pytest.raises(FrameTooLarge):
            decode_frame((MAX_FRAME_BYTES + 1).to_bytes(4, "big") + b"{}")

    def test_unknown_event(self):
        body = b'{"event":"shout","session":"s","seq":0,"payload":{}}'
        with pytest.raises(SchemaError):
            decode_frame(len(body).to_bytes(4, "big") + body)
        with pytest.raises(SchemaError):
            CloudFrame("shout", "s", 0)

    def test_wrong_keys(self):
        body = b'{"event":"ack","session":"s","seq":0}'
        with pytest.raises(SchemaError):
            decode_frame(len(body).to_bytes(4, "big") + body)

    def test_negative_seq(self):
        with pytest.raises(SchemaError):
            CloudFrame("ack", "s", -1)


class TestLog:
    def test_first_record(self, tmp_path):
        log = LongTermLog(tmp_path / "lt.jsonl")
        assert persist(log, CloudFrame("hello", "s", 0)) == 0
        assert (tmp_path / "lt.jsonl").read_bytes().count(b"\n") == 1

    def test_order_and_reopen(self, tmp_path):
        path = tmp_path / "lt.jsonl"
        log = LongTermLog(path)
        sent = [CloudFrame("summary", f"s{i}", i, {"i": i}) for i in range(5)]
        assert [log.persist(f) for f in sent] == list(range(5))
        reopened = LongTermLog(path)
        assert reopened.count == 5
        assert reopened.persist(CloudFrame("ack", "x", 9)) == 5
        assert list(reopened.records())[:5] == sent

    def test_torn_tail_truncated(self, tmp_path):
        path = tmp_path / "lt.jsonl"
        log = LongTermLog(path)
        log.persist(CloudFrame("hello", "s", 0))
        with open(path, "ab") as fh:
            fh.write(b'{"event":"sum')
        again = LongTermLog(path)
        assert again.count == 1
        assert path.read_bytes().endswith(b"\n")

    def test_lines_are_canonical(self, tmp_path):
        log = LongTermLog(tmp_path / "lt.jsonl")
        f = CloudFrame("alert", "s", 3, {"b": 1, "a": [1.5, "ü"]})
        log.persist(f)
        line = (tmp_path / "lt.jsonl").read_bytes()
        assert line == encode_frame(f)[4:] + b"\n"


def summary(device, session, means):
    rounds = [{"label": f"r{i}", "mean_freq_hz": m, "max_freq_hz": m, "tap_count": 1} for i, m in enumerate(means)]
    return CloudFrame("summary", session, 0, {"device_id": device, "session_id": session, "rounds": rounds})


class TestTrend:
    def test_constant(self):
        tr = temporal_trend([summary("g", f"s{i}", [2.0, 2.0]) for i in range(3)], "g")
        assert tr.slope_hz_per_session == 0.0
        assert tr.mean_freq_hz == 2.0

    def test_linear(self):
        # least squares on (0,1), (1,2), (2,3): slope 1
        tr = temporal_trend([summary("g", f"s{i}", [m]) for i, m in enumerate([1.0, 2.0, 3.0])], "g")
        assert tr.slope_hz_per_session == pytest.approx(1.0)
        assert tr.n_sessions == 3

    def test_mean_over_rounds(self):
        tr = temporal_trend([summary("g", "a", [1.0, 3.0]), summary("g", "b", [4.0, 4.0]), summary("h", "c", [9.0])], "g")
        assert tr.slope_hz_per_session == pytest.approx(2.0)

    def test_insufficient(self):
        with pytest.raises(InsufficientDataError):
            temporal_trend([summary("g", "a", [1.0])], "g")

    def test_from_log(self, tmp_path):
        log = LongTermLog(tmp_path / "lt.jsonl")
        for i, m in enumerate([1.0, 1.5, 2.0, 2.5]):
            log.persist(summary("g", f"s{i}", [m]))
        assert temporal_trend(log, "g").slope_hz_per_session == pytest.approx(0.5)

    @given(st.lists(st.floats(0, 10), min_size=2, max_size=12), st.floats(-5, 5), st.floats(0.1, 10))
    def test_shift_and_scale(self, means, shift, scale):
        def slope(ms):
            return temporal_trend([summary("g", str(i), [m]) for i, m in enumerate(ms)], "g").slope_hz_per_session

        base = slope(means)
        assert slope([m + shift for m in means]) == pytest.approx(base, abs=1e-9)
        assert slope([m * scale for m in means]) == pytest.approx(base * scale, abs=1e-9)


@pytest.fixture
def sink(tmp_path):
    log = LongTermLog(tmp_path / "lt.jsonl")
    server = serve("127.0.0.1:0", log)
    yield server
    server.close()


class TestServe:
    def test_persist_then_ack(self, sink):
        with CloudClient(sink.address) as c:
            ack = c.send(CloudFrame("summary", "s1", 5, {"x": 1}))
        assert ack == CloudFrame("ack", "s1", 5, {})
        assert sink.log.count == 1

    def test_concurrent_connections(self, sink):
        def worker(name):
            with CloudClient(sink.address) as c:
                for i in range(40):
                    assert c.send(CloudFrame("summary", name, i, {"i": i})).seq == i

        threads = [threading.Thread(target=worker, args=(n,)) for n in ("a", "b")]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        recs = list(sink.log.records())
        assert len(recs) == 80
        for name in ("a", "b"):
            assert [r.seq for r in recs if r.session == name] == list(range(40))

    def test_malformed_frame(self, sink):
        sock = socket.create_connection(sink.address)
        body = b"not json at all"
        sock.sendall(len(body).to_bytes(4, "big") + body)
        reply = read_frame(sock)
        assert reply.event == "ack" and "error" in reply.payload
        assert read_frame(sock) is None  # server closed the connection
        sock.close()
        assert sink.log.count == 0

    def test_non_monotone_seq_rejected(self, sink):
        with CloudClient(sink.address) as c:
            c.send(CloudFrame("summary", "s", 3))
            reply = c.send(CloudFrame("summary", "s", 3))
        assert "error" in reply.payload
        assert sink.log.count == 1

    def test_bind_failure(self, sink, tmp_path):
        host, port = sink.address
        with pytest.raises(StartupError):
            serve(f"{host}:{port}", LongTermLog(tmp_path / "other.jsonl"))
