"""Raw capacitance frames, median normalisation, windowing and augmentation."""
from __future__ import annotations

import csv
import json
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import DataError, GapDetected, InsufficientHistory, ZeroMedian

CHANNELS = (
    "shoulderTopL", "shoulderFrontL", "shoulderBackL", "sleeveL",
    "shoulderTopR", "shoulderFrontR", "shoulderBackR", "sleeveR",
)
N_CHANNELS = len(CHANNELS)
SAMPLE_RATE = 32.0
FRAME_PERIOD_US = 1_000_000 / SAMPLE_RATE
HISTORY = 180  # 5.6 s
WINDOW = 96  # 3 s
WINDOW_MEDIAN_SCALE = 0.98
MAX_CODE = 2**28 - 1
TRAIN_HOP = 4

SEAM_GROUPS = {
    "shoulderTop": ("shoulderTopL", "shoulderTopR"),
    "shoulderFront": ("shoulderFrontL", "shoulderFrontR"),
    "shoulderBack": ("shoulderBackL", "shoulderBackR"),
    "sleeve": ("sleeveL", "sleeveR"),
}


@dataclass(frozen=True)
class CapFrame:
    """One 8-channel raw reading; ``t_us`` in microseconds."""

    seq: int
    t_us: int
    ch: tuple

    def __post_init__(self):
        object.__setattr__(self, "ch", tuple(int(c) for c in self.ch))
        if len(self.ch) != N_CHANNELS:
            raise DataError(f"frame needs {N_CHANNELS} channels, got {len(self.ch)}")


@dataclass
class FrameBlock:
    """Column-oriented block of frames: ``codes`` is (N, n_channels)."""

    seq: np.ndarray
    t_us: np.ndarray
    codes: np.ndarray

    def __len__(self):
        return len(self.seq)

    @classmethod
    def from_frames(cls, frames) -> "FrameBlock":
        frames = list(frames)
        return cls(
            np.array([f.seq for f in frames], dtype=np.int64),
            np.array([f.t_us for f in frames], dtype=np.int64),
            np.array([f.ch for f in frames], dtype=np.int64).reshape(-1, N_CHANNELS),
        )

    def frames(self):
        for s, t, c in zip(self.seq, self.t_us, self.codes):
            yield CapFrame(int(s), int(t), tuple(int(x) for x in c))


def channel_indices(removed=()) -> list[int]:
    """Channel indices left after removing the named seam groups."""
    drop = {c for g in removed for c in SEAM_GROUPS[g]}
    return [i for i, c in enumerate(CHANNELS) if c not in drop]


def lower_median(x, axis=0):
    """Median taking element ``(n - 1) // 2`` of the sorted values (no averaging)."""
    x = np.asarray(x)
    k = (x.shape[axis] - 1) // 2
    return np.take(np.partition(x, k, axis=axis), k, axis=axis)


def normalize_window(raw, history: int = HISTORY, window: int = WINDOW,
                     scale: float = WINDOW_MEDIAN_SCALE) -> np.ndarray:
    """Normalise the last ``window`` rows of ``raw`` (n >= history, channels).

    Each channel is divided by its median over the last ``history`` frames,
    then ``scale`` times the median of those ratios over the window is
    subtracted.
    """
    raw = np.asarray(raw, dtype=float)
    if raw.ndim != 2:
        raise DataError(f"expected (frames, channels), got shape {raw.shape}")
    if raw.shape[0] < history:
        raise InsufficientHistory(f"need {history} frames, have {raw.shape[0]}")
    med = lower_median(raw[-history:], axis=0)
    if np.any(med == 0):
        raise ZeroMedian(f"zero history median on channels {np.flatnonzero(med == 0).tolist()}")
    r = raw[-window:] / med
    return r - scale * lower_median(r, axis=0)


def normalize_session(codes, hop: int = 1, start: int | None = None,
                      history: int = HISTORY, window: int = WINDOW,
                      scale: float = WINDOW_MEDIAN_SCALE, chunk: int = 2048):
    """Windows for every ``hop``-th end frame of a session.

    Returns ``(windows (M, window, C) float64, end_index (M,))``. The first
    window ends at frame ``history - 1`` (or ``start`` if later). Row ``m``
    equals ``normalize_window(codes[:end_index[m] + 1])`` exactly.
    """
    codes = np.asarray(codes, dtype=float)
    n = codes.shape[0]
    first = history - 1 if start is None else max(start, history - 1)
    ends = np.arange(first, n, hop)
    out = np.empty((len(ends), window, codes.shape[1]))
    if len(ends) == 0:
        return out, ends
    view = np.lib.stride_tricks.sliding_window_view(codes, history, axis=0)  # (n-h+1, C, h)
    kh, kw = (history - 1) // 2, (window - 1) // 2
    for lo in range(0, len(ends), chunk):
        idx = ends[lo:lo + chunk] - (history - 1)
        blk = view[idx]
        med = np.partition(blk, kh, axis=-1)[..., kh]
        if np.any(med == 0):
            raise ZeroMedian("zero history median in session")
        r = blk[..., -window:] / med[..., None]
        wmed = np.partition(r, kw, axis=-1)[..., kw]
        out[lo:lo + chunk] = np.swapaxes(r - scale * wmed[..., None], 1, 2)
    return out, ends


@dataclass(frozen=True)
class AugmentConfig:
    """Probabilities and ranges of the three training-time perturbations."""

    p_shift: float = 0.8
    shift: float = 0.02
    p_scale: float = 0.8
    scale: tuple = (0.94, 1.06)
    p_jitter: float = 0.8
    jitter: tuple = (0.997, 1.003)


def augment(x, rng: np.random.Generator, config: AugmentConfig = AugmentConfig()):
    """Randomly shift, scale and jitter one window (T, C) or a batch (B, T, C).

    Transforms run in the fixed order shift -> scale -> jitter; each is
    gated independently per window.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 2
    xb = x[None] if single else x
    B, T, C = xb.shape
    gates = rng.random((B, 3)) < np.array([config.p_shift, config.p_scale, config.p_jitter])
    ch_off = rng.uniform(-config.shift, config.shift, (B, 1, C))
    win_off = rng.uniform(-config.shift, config.shift, (B, 1, 1))
    u = rng.uniform(config.scale[0], config.scale[1], (B, 1, 1))
    v = rng.uniform(config.jitter[0], config.jitter[1], (B, T, C))
    y = xb + np.where(gates[:, 0, None, None], ch_off + win_off, 0.0)
    y = y * np.where(gates[:, 1, None, None], u, 1.0)
    y = y * np.where(gates[:, 2, None, None], v, 1.0)
    return y[0] if single else y


class WindowStream:
    """Incremental windowing of a live frame sequence.

    ``push`` returns a normalised window once ``history`` frames are held
    and the frame count since the first window is a multiple of ``hop``.
    """

    def __init__(self, hop: int = 1, history: int = HISTORY, window: int = WINDOW,
                 max_gap_us: float = 2 * FRAME_PERIOD_US):
        self.hop = hop
        self.history = history
        self.window = window
        self.max_gap_us = max_gap_us
        self._buf = deque(maxlen=history)
        self._last = None
        self._count = 0

    def push(self, frame: CapFrame):
        if self._last is not None:
            if frame.seq <= self._last.seq:
                raise DataError(f"sequence went from {self._last.seq} to {frame.seq}")
            if frame.t_us - self._last.t_us > self.max_gap_us:
                raise GapDetected(
                    f"{frame.t_us - self._last.t_us} us gap before seq {frame.seq}")
        self._last = frame
        self._buf.append(frame.ch)
        self._count += 1
        k = self._count - self.history
        if k >= 0 and k % self.hop == 0:
            return normalize_window(np.array(self._buf, dtype=float),
                                    self.history, self.window)
        return None

    def __call__(self, frames):
        for f in frames:
            w = self.push(f)
            if w is not None:
                yield w


def window_stream(frames, hop: int = 1):
    """Generator of windows over an iterable of CapFrames."""
    return WindowStream(hop=hop)(frames)


# --------------------------------------------------------------------------
# Files


FRAME_HEADER = ["seq", "t_us"] + [f"ch{i}" for i in range(N_CHANNELS)]


def write_frames_csv(path, block: FrameBlock):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(FRAME_HEADER)
        for s, t, c in zip(block.seq, block.t_us, block.codes):
            w.writerow([int(s), int(t), *(int(x) for x in c)])


def read_frames_csv(path) -> FrameBlock:
    with open(path, newline="") as fh:
        header = fh.readline().strip().split(",")
        if header != FRAME_HEADER:
            raise DataError(f"{path}: unexpected header {header}")
        try:
            data = np.loadtxt(fh, delimiter=",", dtype=np.int64, ndmin=2)
        except ValueError as exc:
            raise DataError(f"{path}: {exc}") from exc
    if data.size == 0:
        data = np.zeros((0, len(FRAME_HEADER)), dtype=np.int64)
    if data.shape[1] != len(FRAME_HEADER):
        raise DataError(f"{path}: expected {len(FRAME_HEADER)} columns")
    if len(data) > 1 and np.any(np.diff(data[:, 0]) <= 0):
        raise DataError(f"{path}: seq is not strictly increasing")
    return FrameBlock(data[:, 0], data[:, 1], data[:, 2:])


def save_tensor(path, array, **meta):
    """Little-endian float32 blob at ``path`` plus ``path.json`` sidecar."""
    path = Path(path)
    arr = np.ascontiguousarray(array, dtype="<f4")
    arr.tofile(path)
    sidecar = {"shape": list(arr.shape), "dtype": "<f4", **meta}
    path.with_name(path.name + ".json").write_text(json.dumps(sidecar, indent=2))


def load_tensor(path):
    """Inverse of ``save_tensor``; returns ``(array, sidecar)``."""
    path = Path(path)
    meta = json.loads(path.with_name(path.name + ".json").read_text())
    arr = np.fromfile(path, dtype=meta.get("dtype", "<f4"))
    expected = int(np.prod(meta["shape"]))
    if arr.size != expected:
        raise DataError(f"{path}: {arr.size} values, sidecar says {expected}")
    return arr.reshape(meta["shape"]), meta
