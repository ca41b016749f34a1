"""Binary frame protocol, byte transports, paced replay and live inference."""
from __future__ import annotations

import binascii
import json
import queue
import socket
import struct
import sys
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from urllib.parse import urlparse

import numpy as np
import torch

from .exceptions import (
    BadMagic, ConfigError, CrcMismatch, DataError, GapDetected, ProtocolError,
    RangeViolation, StreamGap, TransportClosed,
)
from .kinematics import Skeleton, forward_kinematics
from .neuralnet import RunningMedian, smooth_predictions
from .signals import (
    FRAME_PERIOD_US, MAX_CODE, N_CHANNELS, SAMPLE_RATE, CapFrame, FrameBlock,
    WindowStream, normalize_session, read_frames_csv,
)

MAGIC = b"\x5e\xa9"
VERSION = 1
_BODY = struct.Struct("<2sBIQ8I")
_CRC = struct.Struct("<H")
FRAME_SIZE = _BODY.size + _CRC.size  # 49


def crc16(data: bytes) -> int:
    """CRC-16/CCITT-FALSE (poly 0x1021, init 0xFFFF)."""
    return binascii.crc_hqx(data, 0xFFFF)


def encode_frame(f: CapFrame) -> bytes:
    if not 0 <= f.seq < 2**32:
        raise RangeViolation(f"seq {f.seq} outside u32")
    if not 0 <= f.t_us < 2**64:
        raise RangeViolation(f"t_us {f.t_us} outside u64")
    if any(not 0 <= c <= MAX_CODE for c in f.ch):
        raise RangeViolation(f"channel code outside 0..{MAX_CODE}: {f.ch}")
    body = _BODY.pack(MAGIC, VERSION, f.seq, f.t_us, *f.ch)
    return body + _CRC.pack(crc16(body))


def decode_frame(buf) -> CapFrame:
    """Decode the first FRAME_SIZE bytes of ``buf``."""
    buf = bytes(buf[:FRAME_SIZE])
    if len(buf) < FRAME_SIZE:
        raise ProtocolError(f"need {FRAME_SIZE} bytes, got {len(buf)}")
    if buf[:2] != MAGIC:
        raise BadMagic(f"bad magic {buf[:2].hex()}")
    (crc,) = _CRC.unpack_from(buf, _BODY.size)
    if crc != crc16(buf[:_BODY.size]):
        raise CrcMismatch(f"crc {crc:#06x} != {crc16(buf[:_BODY.size]):#06x}")
    _, version, seq, t_us, *ch = _BODY.unpack_from(buf)
    if version != VERSION:
        raise ProtocolError(f"unsupported version {version}")
    if any(c > MAX_CODE for c in ch):
        raise RangeViolation(f"channel code above {MAX_CODE}")
    return CapFrame(seq, t_us, tuple(ch))


class FrameDecoder:
    """Incremental decoder over an arbitrary byte stream.

    Bytes that do not form a valid frame are skipped one at a time until
    the next magic, so corruption costs at most the damaged frames.
    """

    def __init__(self):
        self._buf = bytearray()
        self.frames = 0
        self.errors = 0
        self.skipped_bytes = 0

    def feed(self, data) -> list:
        self._buf += data
        out = []
        buf = self._buf
        i = 0
        while True:
            j = buf.find(MAGIC, i)
            if j < 0:
                # keep a trailing first magic byte, it may complete next feed
                keep = 1 if buf[-1:] == MAGIC[:1] else 0
                self.skipped_bytes += len(buf) - i - keep
                i = len(buf) - keep
                break
            self.skipped_bytes += j - i
            if len(buf) - j < FRAME_SIZE:
                i = j
                break
            try:
                out.append(decode_frame(buf[j:j + FRAME_SIZE]))
                self.frames += 1
                i = j + FRAME_SIZE
            except ProtocolError:
                self.errors += 1
                self.skipped_bytes += 1
                i = j + 1
        del buf[:i]
        return out


def decode_stream(data) -> list:
    return FrameDecoder().feed(data)


# --------------------------------------------------------------------------
# Transports: file path, "-" (stdio) or tcp://host:port


def _split_tcp(address: str):
    u = urlparse(address)
    if u.scheme != "tcp" or not u.hostname or u.port is None:
        raise ConfigError(f"bad tcp address {address!r}")
    return u.hostname, u.port


class _SocketFile:
    def __init__(self, sock, server=None):
        self.sock, self.server = sock, server

    def write(self, data):
        try:
            self.sock.sendall(data)
        except OSError as exc:
            raise TransportClosed(str(exc)) from exc
        return len(data)

    def read(self, n=4096):
        try:
            return self.sock.recv(n)
        except OSError as exc:
            raise TransportClosed(str(exc)) from exc

    def flush(self):
        pass

    def close(self):
        self.sock.close()
        if self.server is not None:
            self.server.close()


def open_sink(address: str, timeout: float = 30.0):
    """Byte sink for replay. ``tcp://`` listens and serves the first client."""
    if address == "-":
        return sys.stdout.buffer
    if address.startswith("tcp://"):
        host, port = _split_tcp(address)
        server = socket.create_server((host, port))
        server.settimeout(timeout)
        try:
            conn, _ = server.accept()
        except OSError as exc:
            server.close()
            raise TransportClosed(f"no client on {address}: {exc}") from exc
        return _SocketFile(conn, server)
    return open(address, "wb")


def open_source(address: str, timeout: float = 30.0):
    """Byte source for live inference. ``tcp://`` connects to a replaying sink."""
    if address == "-":
        return sys.stdin.buffer
    if address.startswith("tcp://"):
        host, port = _split_tcp(address)
        deadline = time.monotonic() + timeout
        while True:
            try:
                return _SocketFile(socket.create_connection((host, port), timeout=timeout))
            except OSError as exc:
                if time.monotonic() > deadline:
                    raise TransportClosed(f"cannot reach {address}: {exc}") from exc
                time.sleep(0.05)
    try:
        return open(address, "rb")
    except OSError as exc:
        raise DataError(f"cannot open {address}: {exc}") from exc


# --------------------------------------------------------------------------
# Replay


@dataclass
class ReplayStats:
    frames: int
    elapsed_s: float

    @property
    def rate_hz(self) -> float:
        return (self.frames - 1) / self.elapsed_s if self.elapsed_s > 0 else float("inf")


def _as_block(session) -> FrameBlock:
    if isinstance(session, FrameBlock):
        return session
    if isinstance(session, (str, Path)):
        return read_frames_csv(session)
    if hasattr(session, "frames") and isinstance(session.frames, FrameBlock):
        return session.frames
    raise DataError(f"cannot replay {type(session).__name__}")


def replay(session, sink, rate: float = SAMPLE_RATE, realtime: bool = True,
           limit: int | None = None, clock=time.perf_counter, sleep=time.sleep) -> ReplayStats:
    """Write encoded frames to ``sink`` at ``rate`` Hz.

    Pacing follows an absolute schedule (frame ``i`` at ``t0 + i / rate``)
    so per-frame jitter never accumulates. ``realtime=False`` writes as
    fast as the sink accepts.
    """
    if rate <= 0:
        raise ConfigError("rate must be positive")
    block = _as_block(session)
    n = len(block) if limit is None else min(limit, len(block))
    t0 = clock()
    for i in range(n):
        if realtime:
            wait = t0 + i / rate - clock()
            if wait > 0:
                sleep(wait)
        frame = CapFrame(int(block.seq[i]), int(block.t_us[i]), tuple(int(c) for c in block.codes[i]))
        try:
            sink.write(encode_frame(frame))
            if realtime:
                sink.flush()
        except (BrokenPipeError, ConnectionError, ValueError) as exc:
            raise TransportClosed(f"sink closed after {i} frames: {exc}") from exc
    try:
        sink.flush()
    except (BrokenPipeError, ConnectionError, ValueError) as exc:
        raise TransportClosed(str(exc)) from exc
    return ReplayStats(n, clock() - t0)


# --------------------------------------------------------------------------
# Live inference


def _now_us() -> int:
    return time.perf_counter_ns() // 1000


@dataclass
class LatencyRecord:
    t_frame_in: int
    t_window_ready: int
    t_inference_done: int
    t_output_written: int

    @property
    def inference_us(self) -> int:
        return self.t_inference_done - self.t_window_ready

    @property
    def latency_us(self) -> int:
        return self.t_inference_done - self.t_frame_in

    def is_monotone(self) -> bool:
        return (self.t_frame_in <= self.t_window_ready <= self.t_inference_done
                <= self.t_output_written)


@dataclass
class LivePrediction:
    seq: int
    t_us: int
    joints: np.ndarray
    latency: LatencyRecord
    dropped: int

    def to_json(self) -> str:
        return json.dumps({"t_us": self.t_us, "joints": self.joints.tolist(),
                           "latency_us": self.latency.latency_us, "dropped": self.dropped})


_EOF = object()


def _reader(source, q: queue.Queue, stop: threading.Event, chunk: int):
    dec = FrameDecoder()
    try:
        while not stop.is_set():
            data = source.read(chunk)
            if not data:
                break
            for f in dec.feed(data):
                item = (f, _now_us())
                while not stop.is_set():
                    try:
                        q.put(item, timeout=0.1)
                        break
                    except queue.Full:
                        continue
    except Exception as exc:  # handed to the consumer
        q.put(exc)
        return
    q.put(_EOF)


def _pose_model(model):
    net = getattr(model, "model_", model)
    net.eval()
    dtype = next(net.parameters()).dtype
    n_ch = net.arch.n_channels
    if n_ch != N_CHANNELS:
        raise ConfigError(f"live inference needs an {N_CHANNELS}-channel model, got {n_ch}")

    @torch.no_grad()
    def run(window):
        return net(torch.as_tensor(window[None], dtype=dtype)).double().numpy()
    return run


def infer_live(source, model, skeleton: Skeleton, drop: bool = True, smooth: bool = True,
               queue_size: int = 256, chunk: int = 4096, out=None,
               max_gap_us: float = 2 * FRAME_PERIOD_US):
    """Yield one LivePrediction per inferred frame from a byte source.

    A reader thread decodes frames into a bounded queue. The consumer keeps
    every frame in the 180-frame history but, with ``drop`` enabled, runs
    the network only on the freshest queued frame and counts the skipped
    ones. The first prediction comes with frame 180. When ``out`` is given
    each prediction is also written to it as a JSON line.
    """
    run = _pose_model(model)
    q: queue.Queue = queue.Queue(maxsize=queue_size)
    stop = threading.Event()
    th = threading.Thread(target=_reader, args=(source, q, stop, chunk), daemon=True)
    th.start()
    ws = WindowStream(hop=1, max_gap_us=max_gap_us)
    median = RunningMedian() if smooth else None
    dropped = 0
    try:
        done = False
        while not done:
            items = [q.get()]
            if drop:
                while True:
                    try:
                        items.append(q.get_nowait())
                    except queue.Empty:
                        break
            frames = []
            for it in items:
                if it is _EOF:
                    done = True
                elif isinstance(it, BaseException):
                    raise it
                else:
                    frames.append(it)
            windows = []
            for f, t_in in frames:
                try:
                    w = ws.push(f)
                except GapDetected as exc:
                    raise StreamGap(str(exc)) from exc
                if w is not None:
                    windows.append((f, t_in, w))
            if not windows:
                continue
            dropped += len(windows) - 1
            f, t_in, w = windows[-1]
            t_ready = _now_us()
            pose = run(w)
            joints = forward_kinematics(pose, skeleton)[0]
            if median is not None:
                joints = median.push(joints.reshape(-1)).reshape(joints.shape)
            t_done = _now_us()
            pred = LivePrediction(f.seq, f.t_us, joints,
                                  LatencyRecord(t_in, t_ready, t_done, t_done), dropped)
            if out is not None:
                out.write(pred.to_json() + "\n")
                out.flush()
                pred.latency.t_output_written = _now_us()
            yield pred
    finally:
        stop.set()


def offline_predictions(block: FrameBlock, model, skeleton: Skeleton, smooth: bool = True,
                        batch_size: int = 512):
    """Batch counterpart of ``infer_live`` over a whole frame block.

    Returns ``(end_index, joints)`` with one row per window end frame.
    """
    net = getattr(model, "model_", model)
    _pose_model(model)
    X, ends = normalize_session(block.codes)
    dtype = next(net.parameters()).dtype
    with torch.no_grad():
        parts = [net(torch.as_tensor(X[i:i + batch_size], dtype=dtype)).double().numpy()
                 for i in range(0, len(X), batch_size)]
    if not parts:
        return ends, np.zeros((0, 8, 3))
    joints = forward_kinematics(np.concatenate(parts), skeleton)
    if smooth:
        joints = smooth_predictions(joints.reshape(len(joints), -1)).reshape(joints.shape)
    return ends, joints


__all__ = [
    "FRAME_SIZE", "MAGIC", "VERSION", "crc16", "encode_frame", "decode_frame", "FrameDecoder",
    "decode_stream", "open_sink", "open_source", "replay", "ReplayStats", "LatencyRecord",
    "LivePrediction", "infer_live", "offline_predictions",
]
