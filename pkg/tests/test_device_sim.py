import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fogwear.device_sim import (
    CSV_HEADER,
    GloveConfig,
    Round,
    SamplePacket,
    TapProtocol,
    decode_packet,
    default_protocol,
    encode_packet,
    encoded_packet_size,
    packetize,
    replay_csv,
    synth_session,
    write_csv,
)
from fogwear.errors import ConfigError, ParseError, SchemaError
from fogwear.signal_core import Channel, FlexSample


def decode_angles(samples, spec):
    # divider inverted by hand, independent of signal_core
    out = []
    for s in samples:
        r = spec.r_fixed * (spec.vin - s.voltage) / s.voltage
        out.append((r - spec.r_flat) / (spec.r_bent - spec.r_flat) * spec.angle_max)
    return np.array(out)


def brute_force_peaks(a, threshold):
    return sum(1 for i in range(1, len(a) - 1) if a[i] > a[i - 1] and a[i] >= a[i + 1] and a[i] >= threshold)


def two_hz():
    return TapProtocol((Round(10.0, 2.0, 2.0, "r"),))


class TestSynth:
    def test_sample_count_and_peaks(self):
        cfg = GloveConfig(noise_std_deg=0.0, channels=(Channel.INDEX,), seed=1)
        stream = synth_session(two_hz(), cfg)
        assert len(stream) == 500
        angles = decode_angles(stream, cfg.spec)
        assert abs(brute_force_peaks(angles, 15.0) - 20) <= 1

    def test_two_channels_interleaved(self):
        stream = synth_session(two_hz(), GloveConfig(seed=1))
        assert len(stream) == 1000
        assert [s.channel for s in stream[:4]] == [Channel.INDEX, Channel.THUMB] * 2
        assert all(a.t <= b.t for a, b in zip(stream, stream[1:]))

    def test_zero_duration_round(self):
        with pytest.raises(ConfigError):
            synth_session(TapProtocol((Round(0.0, 1.0, 1.0),)), GloveConfig())

    def test_empty_protocol(self):
        with pytest.raises(ConfigError):
            TapProtocol(())

    def test_nyquist(self):
        with pytest.raises(ConfigError):
            synth_session(TapProtocol((Round(5.0, 3.0, 3.0),)), GloveConfig(sample_rate_hz=6.0))

    def test_deterministic(self):
        a = synth_session(default_protocol(), GloveConfig(seed=42))
        b = synth_session(default_protocol(), GloveConfig(seed=42))
        c = synth_session(default_protocol(), GloveConfig(seed=43))
        assert a == b
        assert a != c

    def test_noise_free_angle_range(self):
        cfg = GloveConfig(noise_std_deg=0.0, seed=0)
        angles = decode_angles(synth_session(default_protocol(), cfg), cfg.spec)
        assert angles.min() >= -1e-9
        assert angles.max() <= cfg.amplitude_deg + 1e-9

    @pytest.mark.parametrize("f,d", [(1.0, 10.0), (2.0, 7.0), (3.5, 10.0), (2.5, 3.3)])
    def test_peak_count_floor_fd(self, f, d):
        cfg = GloveConfig(noise_std_deg=0.0, channels=(Channel.INDEX,))
        stream = synth_session(TapProtocol((Round(d, f, f),)), cfg)
        n = brute_force_peaks(decode_angles(stream, cfg.spec), 15.0)
        assert abs(n - int(f * d)) <= 1

    def test_ramp_tap_intervals_shrink(self):
        times = Round(10.0, 1.0, 3.5).tap_times()
        gaps = np.diff(times)
        assert np.all(np.diff(gaps) < 0)
        assert len(times) == 23


class TestReplay:
    def write(self, tmp_path, text):
        p = tmp_path / "trace.csv"
        p.write_text(text, encoding="utf-8")
        return p

    def test_three_rows(self, tmp_path):
        p = self.write(tmp_path, "t_s,channel,voltage_v\n0.0,index,1.5\n0.0,thumb,1.6\n0.02,index,1.4\n")
        got = list(replay_csv(p))
        assert got == [
            FlexSample(0.0, Channel.INDEX, 1.5),
            FlexSample(0.0, Channel.THUMB, 1.6),
            FlexSample(0.02, Channel.INDEX, 1.4),
        ]

    def test_header_only(self, tmp_path):
        assert list(replay_csv(self.write(tmp_path, "t_s,channel,voltage_v\n"))) == []

    def test_bad_voltage_line_number(self, tmp_path):
        p = self.write(tmp_path, "t_s,channel,voltage_v\n0,index,1\n0.02,index,1\n0.04,index,abc\n")
        with pytest.raises(ParseError) as exc:
            list(replay_csv(p))
        assert exc.value.line == 4

    def test_bad_channel(self, tmp_path):
        p = self.write(tmp_path, "t_s,channel,voltage_v\n0,pinky,1\n")
        with pytest.raises(ParseError) as exc:
            list(replay_csv(p))
        assert exc.value.line == 2

    def test_missing_column(self, tmp_path):
        with pytest.raises(SchemaError):
            list(replay_csv(self.write(tmp_path, "t_s,voltage_v\n0,1\n")))

    def test_write_then_replay(self, tmp_path):
        stream = synth_session(two_hz(), GloveConfig(seed=5))
        p = tmp_path / "out.csv"
        write_csv(p, stream)
        raw = p.read_bytes()
        assert raw.startswith(",".join(CSV_HEADER).encode() + b"\n")
        assert b"\r" not in raw
        assert list(replay_csv(p)) == stream


class TestPacketize:
    def stream(self, n):
        return [FlexSample(i * 0.02, Channel.INDEX, 1.0) for i in range(n)]

    def test_even_batches(self):
        pk = packetize(self.stream(500), "g", 25)
        assert len(pk) == 20
        assert [p.seq for p in pk] == list(range(20))

    def test_short_tail(self):
        assert [len(p.samples) for p in packetize(self.stream(7), "g", 3)] == [3, 3, 1]

    def test_empty(self):
        assert packetize([], "g", 4) == []

    def test_batch_n_validated(self):
        with pytest.raises(ValueError):
            packetize(self.stream(3), "g", 0)

    @given(st.integers(0, 200), st.integers(1, 40))
    def test_lossless(self, n, batch):
        s = self.stream(n)
        pk = packetize(s, "g", batch)
        assert [x for p in pk for x in p.samples] == s
        assert [p.seq for p in pk] == list(range(len(pk)))


def test_packet_codec_round_trip():
    stream = synth_session(two_hz(), GloveConfig(seed=2))
    for p in packetize(stream, "glöve-7", 33):
        data = encode_packet(p)
        assert len(data) == encoded_packet_size(p)
        assert decode_packet(data) == p


def test_packet_codec_rejects_garbage():
    p = SamplePacket("g", 0, (FlexSample(0.0, Channel.INDEX, 1.0),), 0.0)
    with pytest.raises(SchemaError):
        decode_packet(encode_packet(p)[:-1])
