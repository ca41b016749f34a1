import io
import socket
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seamcap import neuralnet as nnm
from seamcap import stream
from seamcap.exceptions import (
    BadMagic, CrcMismatch, ProtocolError, RangeViolation, StreamGap, TransportClosed,
)
from seamcap.signals import MAX_CODE, CapFrame, FrameBlock

frames_st = st.builds(
    CapFrame,
    st.integers(0, 2**32 - 1),
    st.integers(0, 2**64 - 1),
    st.tuples(*[st.integers(0, MAX_CODE)] * 8),
)


def test_crc_check_value():
    assert stream.crc16(b"123456789") == 0x29B1


def test_frame_layout():
    f = CapFrame(0x01020304, 0x1122334455667788, tuple(range(1, 9)))
    b = stream.encode_frame(f)
    assert len(b) == stream.FRAME_SIZE == 49
    assert b[:3] == b"\x5e\xa9\x01"
    assert b[3:7] == bytes([4, 3, 2, 1])
    assert b[7:15] == bytes.fromhex("8877665544332211")
    assert b[15:19] == bytes([1, 0, 0, 0])
    assert int.from_bytes(b[47:49], "little") == stream.crc16(b[:47])


@settings(max_examples=300)
@given(frames_st)
def test_roundtrip(f):
    assert stream.decode_frame(stream.encode_frame(f)) == f


def test_encode_rejects_out_of_range():
    with pytest.raises(RangeViolation):
        stream.encode_frame(CapFrame(0, 0, (MAX_CODE + 1,) + (0,) * 7))
    with pytest.raises(RangeViolation):
        stream.encode_frame(CapFrame(2**32, 0, (0,) * 8))


def test_decode_errors():
    good = stream.encode_frame(CapFrame(5, 6, (7,) * 8))
    with pytest.raises(BadMagic):
        stream.decode_frame(b"\x00" + good[1:])
    bad = bytearray(good)
    bad[20] ^= 0x40
    with pytest.raises(CrcMismatch):
        stream.decode_frame(bad)
    with pytest.raises(ProtocolError):
        stream.decode_frame(good[:48])
    # valid crc but a 29-bit code
    body = bytearray(good[:47])
    body[15:19] = (2**28).to_bytes(4, "little")
    with pytest.raises(RangeViolation):
        stream.decode_frame(bytes(body) + stream.crc16(bytes(body)).to_bytes(2, "little"))


def test_resync_after_corruption():
    fs = [CapFrame(i, i * 31250, (i,) * 8) for i in range(5)]
    data = bytearray(b"".join(stream.encode_frame(f) for f in fs))
    data[49 + 30] ^= 0xFF  # damage frame 1
    dec = stream.FrameDecoder()
    got = dec.feed(b"\x00\x5e junk" + bytes(data))
    assert [f.seq for f in got] == [0, 2, 3, 4]
    assert dec.errors >= 1


@settings(max_examples=50)
@given(st.lists(frames_st, min_size=1, max_size=20), st.integers(1, 60))
def test_decoder_handles_arbitrary_chunking(fs, chunk):
    data = b"".join(stream.encode_frame(f) for f in fs)
    dec = stream.FrameDecoder()
    got = []
    for i in range(0, len(data), chunk):
        got += dec.feed(data[i:i + chunk])
    assert got == fs


@settings(max_examples=200)
@given(st.binary(max_size=400))
def test_decoder_never_fails_on_random_bytes(data):
    dec = stream.FrameDecoder()
    out = dec.feed(data) + dec.feed(data[::-1])
    assert all(isinstance(f, CapFrame) for f in out)


def test_fuzz_roundtrip_bulk():
    rng = np.random.default_rng(0)
    n = 10_000
    codes = rng.integers(0, MAX_CODE + 1, (n, 8))
    seqs = rng.integers(0, 2**32, n)
    ts = rng.integers(0, 2**63, n)
    fs = [CapFrame(int(s), int(t), tuple(int(c) for c in cc)) for s, t, cc in zip(seqs, ts, codes)]
    assert stream.decode_stream(b"".join(map(stream.encode_frame, fs))) == fs


class FakeClock:
    def __init__(self):
        self.t = 0.0

    def __call__(self):
        return self.t

    def sleep(self, dt):
        self.t += dt


def test_replay_absolute_schedule():
    block = FrameBlock(np.arange(65), np.arange(65) * 31250, np.ones((65, 8), dtype=np.int64))
    clock = FakeClock()
    sink = io.BytesIO()
    stats = stream.replay(block, sink, rate=32.0, clock=clock, sleep=clock.sleep)
    assert stats.frames == 65 and stats.elapsed_s == pytest.approx(2.0)
    assert stats.rate_hz == pytest.approx(32.0)
    assert len(sink.getvalue()) == 65 * 49


def test_replay_to_closed_sink():
    class Closed:
        def write(self, b):
            raise BrokenPipeError("gone")

        def flush(self):
            pass
    block = FrameBlock(np.arange(3), np.arange(3), np.ones((3, 8), dtype=np.int64))
    with pytest.raises(TransportClosed):
        stream.replay(block, Closed(), realtime=False)


@pytest.fixture(scope="module")
def live_setup(small_dataset):
    s = small_dataset.sessions[(0, 3)]
    net = nnm.build_model(nnm.Architecture(hidden=16), seed=1)
    buf = io.BytesIO()
    stream.replay(s, buf, realtime=False)
    return s, net, buf.getvalue()


def test_live_equals_offline_bitwise(live_setup):
    s, net, data = live_setup
    preds = list(stream.infer_live(io.BytesIO(data), net, s.skeleton, drop=False))
    ends, J = stream.offline_predictions(s.frames, net, s.skeleton)
    assert len(preds) == len(s.frames) - 179 == len(J)
    assert np.array_equal(np.stack([p.joints for p in preds]), J)
    assert preds[0].seq == s.frames.seq[179]
    assert all(p.dropped == 0 and p.latency.is_monotone() for p in preds)


def test_live_jsonl_output(live_setup):
    s, net, data = live_setup
    out = io.StringIO()
    preds = list(stream.infer_live(io.BytesIO(data[: 200 * 49]), net, s.skeleton, out=out))
    lines = out.getvalue().splitlines()
    assert len(lines) == len(preds) >= 1
    import json
    rec = json.loads(lines[0])
    assert set(rec) == {"t_us", "joints", "latency_us", "dropped"}
    assert np.array(rec["joints"]).shape == (8, 3) and rec["latency_us"] >= 0


def test_live_drops_under_overload(live_setup):
    s, net, data = live_setup

    class Slow:
        # releases all bytes at once so frames pile up in the queue
        def __init__(self):
            self.buf = io.BytesIO(data)

        def read(self, n):
            return self.buf.read(1 << 20)
    preds = list(stream.infer_live(Slow(), net, s.skeleton, drop=True, queue_size=10_000))
    total = len(s.frames) - 179
    assert preds[-1].dropped + len(preds) == total
    assert preds[-1].seq == s.frames.seq[-1]


def test_live_gap_raises(live_setup):
    s, net, data = live_setup
    cut = data[: 190 * 49] + data[195 * 49: 200 * 49]
    with pytest.raises(StreamGap):
        list(stream.infer_live(io.BytesIO(cut), net, s.skeleton, drop=False))


def test_tcp_transport(live_setup):
    s, net, _ = live_setup
    with socket.socket() as probe:
        probe.bind(("127.0.0.1", 0))
        port = probe.getsockname()[1]
    addr = f"tcp://127.0.0.1:{port}"
    result = {}

    def serve():
        sink = stream.open_sink(addr, timeout=10)
        result["stats"] = stream.replay(s, sink, realtime=False, limit=250)
        sink.close()
    th = threading.Thread(target=serve)
    th.start()
    src = stream.open_source(addr, timeout=10)
    preds = list(stream.infer_live(src, net, s.skeleton, drop=False))
    src.close()
    th.join()
    assert result["stats"].frames == 250 and len(preds) == 250 - 179
