"""Synthetic subjects, seam-capacitance forward model, sessions and datasets.

The forward model is affine in pose features: per channel,
``C = baseline + span * gain * response(pose) + drift + noise``, where the
response mixes cosines/sines of the joint rotations along the electrode's
path with a whole-body coupling scalar. Right-side responses are the
left-side responses of the mirrored pose, so the model is exactly
left/right symmetric.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import ConfigError, DataError
from .kinematics import (
    N_POSE, OUTPUT_JOINTS, POSE_JOINTS, Skeleton, fk_all_nodes, forward_kinematics,
    matrix_from_rot6d, mirror_pose_matrices,
)
from .motions import LABEL_RATE, freestyle_track, pose_vectors, script_library
from .signals import (
    CHANNELS, FRAME_PERIOD_US, MAX_CODE, N_CHANNELS, SAMPLE_RATE, FrameBlock,
    normalize_session, read_frames_csv, write_frames_csv,
)

# Nominal baseline (counts) and response span as a fraction of baseline,
# per seam type; spans set the sleeve > front/back > top magnitude order.
SEAM_BASELINE = {"shoulderTop": 4.0e6, "shoulderFront": 5.0e6, "shoulderBack": 5.0e6, "sleeve": 7.0e6}
SEAM_SPAN = {"shoulderTop": 0.12, "shoulderFront": 0.30, "shoulderBack": 0.30, "sleeve": 0.60}
NOISE_FRACTION = 0.005  # of the channel span, white
DRIFT_FRACTION = 0.0005  # of the channel span per sqrt(second), random walk
FIT_SPREAD = 0.7  # garment fit multipliers drawn from 1 +/- FIT_SPREAD
WEAR_FIT_JITTER = 0.15  # per-session relative change of the fit multipliers

SECTION_SECONDS = {"defined": 195.0, "dance": 21.0, "freestyle": 10.0}

_SEAM_OF = [c[:-1] for c in CHANNELS]
_NODES = Skeleton().nodes
_IDX = {n: i for i, n in enumerate(POSE_JOINTS)}


@dataclass(frozen=True)
class SubjectProfile:
    arm_length: float  # m
    bust: float  # m
    height: float  # m
    baselines: tuple  # counts, one per channel
    coupling_gain: float
    fit: tuple = ()  # per-term response multipliers; empty means nominal

    def __post_init__(self):
        if self.fit and len(self.fit) != N_FIT_TERMS:
            raise ConfigError(f"fit needs {N_FIT_TERMS} multipliers, got {len(self.fit)}")
        if not 0.50 <= self.arm_length <= 0.67:
            raise ConfigError(f"arm_length {self.arm_length} outside [0.50, 0.67] m")
        if len(self.baselines) != N_CHANNELS or min(self.baselines) <= 0:
            raise ConfigError("need 8 positive channel baselines")

    @classmethod
    def sample(cls, rng: np.random.Generator) -> "SubjectProfile":
        """Draw a body from the participant anthropometrics (mean, std, clipped to range)."""
        arm = float(np.clip(rng.normal(0.566, 0.033), 0.53, 0.65))
        bust = float(np.clip(rng.normal(0.898, 0.063), 0.78, 0.99))
        height = float(np.clip(rng.normal(1.697, 0.106), 1.53, 1.905))
        base = [SEAM_BASELINE[s] * rng.uniform(0.85, 1.15) for s in _SEAM_OF]
        gain = float(rng.uniform(0.8, 1.2))
        fit = tuple(float(v) for v in rng.uniform(1 - FIT_SPREAD, 1 + FIT_SPREAD, N_FIT_TERMS))
        return cls(arm, bust, height, tuple(base), gain, fit)

    @classmethod
    def symmetric(cls, arm_length=0.566, bust=0.898, height=1.697, coupling_gain=1.0):
        """Average subject with identical left/right channel baselines."""
        return cls(arm_length, bust, height, tuple(SEAM_BASELINE[s] for s in _SEAM_OF),
                   coupling_gain)

    @property
    def skeleton(self) -> Skeleton:
        return Skeleton.from_arm_length(self.arm_length)

    def channel_gains(self) -> np.ndarray:
        g = {"shoulderTop": 1.0,
             "shoulderFront": self.bust / 0.898,
             "shoulderBack": self.bust / 0.898,
             "sleeve": self.arm_length / 0.566}
        return np.array([g[s] for s in _SEAM_OF])

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(d["arm_length"], d["bust"], d["height"], tuple(d["baselines"]),
                   d["coupling_gain"], tuple(d.get("fit", ())))


# --------------------------------------------------------------------------
# Forward model


def _torso_frame_features(R):
    """Left-side geometric features from local rotations R (T, 13, 3, 3)."""
    x = np.array([1.0, 0, 0])
    collar = R[:, _IDX["collarL"]]
    upper = collar @ R[:, _IDX["shoulderL"]]
    fore = upper @ R[:, _IDX["elbowL"]]
    d = upper @ x  # upper-arm direction relative to the chest
    g = fore @ x  # forearm direction
    c = collar @ x
    cos_el = np.clip((np.trace(R[:, _IDX["elbowL"]], axis1=1, axis2=2) - 1) / 2, -1, 1)
    cos_wr = np.clip((np.trace(R[:, _IDX["wristL"]], axis1=1, axis2=2) - 1) / 2, -1, 1)
    head = R[:, _IDX["neck"]] @ R[:, _IDX["head"]]
    spine = R[:, _IDX["spine1"]] @ R[:, _IDX["spine2"]] @ R[:, _IDX["spine3"]]
    return {
        "E": 1.0 + d[:, 1],  # elevation, 0 arm down .. 2 arm up
        "Fz": d[:, 2],  # forward component
        "B": 1.0 - cos_el,  # elbow bend
        "gz": g[:, 2],
        "gy": g[:, 1],
        "W": 1.0 - cos_wr,
        "cy": c[:, 1],  # collar elevation
        "cz": c[:, 2],  # collar protraction
        # signed lateral coupling: head tilt/turn and trunk lean toward this side
        "lam": 0.5 * (head @ np.array([0, 1.0, 0]))[:, 0]
        + 0.3 * (head @ np.array([0, 0, 1.0]))[:, 0]
        + 0.3 * (spine @ np.array([0, 1.0, 0]))[:, 0],
    }


def _coupling(R, nodes_pos):
    """Whole-body coupling scalar (T,), invariant under mirroring."""
    head = R[:, _IDX["neck"]] @ R[:, _IDX["head"]]
    spine = R[:, _IDX["spine1"]] @ R[:, _IDX["spine2"]] @ R[:, _IDX["spine3"]]
    nose_dir = head @ np.array([0, 0, 1.0])
    up = head @ np.array([0, 1.0, 0])
    lean = 1.0 - (spine @ np.array([0, 1.0, 0]))[:, 1]
    chest = nodes_pos[:, _NODES.index("spine3")]
    prox = sum(np.exp(-np.linalg.norm(nodes_pos[:, _NODES.index(w)] - chest, axis=-1) / 0.25)
               for w in ("wristL", "wristR")) / 2
    return (0.8 * (1.0 - nose_dir[:, 2]) + 0.8 * (1.0 - up[:, 1])
            + 1.5 * lean + 0.4 * prox)


def _side_terms(f, kappa):
    """Per-seam lists of weighted response terms for one side."""
    top = [0.50 * f["cy"] / 0.45, 0.20 * f["cz"] / 0.35, 0.15 * f["E"] / 2,
           0.15 * f["lam"], 0.15 * kappa]
    front = [0.30 * f["E"] / 2, 0.40 * (1 + f["Fz"]) / 2, 0.15 * f["cz"] / 0.35,
             0.10 * f["B"] / 1.86 * (1 + f["gz"]) / 2, 0.10 * f["lam"], 0.10 * kappa]
    back = [0.30 * f["E"] / 2, 0.40 * (1 - f["Fz"]) / 2, -0.15 * f["cz"] / 0.35,
            0.05 * f["cy"] / 0.45, 0.10 * f["lam"], 0.10 * kappa]
    sleeve = [0.45 * f["B"] / 1.86, 0.25 * f["E"] / 2, 0.15 * (1 + f["gz"]) / 2,
              0.10 * (1 + f["gy"]) / 2, 0.06 * f["W"], 0.05 * f["cy"] / 0.45, 0.08 * kappa]
    return [top, front, back, sleeve]


N_FIT_TERMS = 24


def _side_responses(f, kappa, fit=()):
    """Dimensionless responses (T, 4) for top, front, back, sleeve of one side.

    ``fit`` scales each term; it models how the garment sits on a given body.
    """
    seams = _side_terms(f, kappa)
    w = np.asarray(fit, dtype=float) if len(fit) else np.ones(N_FIT_TERMS)
    out, k = [], 0
    for seam in seams:
        out.append(sum(w[k + i] * t for i, t in enumerate(seam)))
        k += len(seam)
    return np.stack(out, axis=-1)


@dataclass(frozen=True)
class ChannelModel:
    """Per-channel affine parameters for one wearing of the shirt."""

    baselines: np.ndarray
    spans: np.ndarray
    coupling_gain: float
    fit: tuple = ()

    @classmethod
    def for_wearing(cls, subject: SubjectProfile, wear_seed=None) -> "ChannelModel":
        base = np.array(subject.baselines, dtype=float)
        spans = base * np.array([SEAM_SPAN[s] for s in _SEAM_OF]) * subject.channel_gains()
        fit = subject.fit
        if wear_seed is not None:
            rng = np.random.default_rng(wear_seed)
            base = base * rng.uniform(0.95, 1.05, N_CHANNELS)
            spans = spans * rng.uniform(0.92, 1.08, N_CHANNELS)
            if fit:
                jitter = rng.uniform(1 - WEAR_FIT_JITTER, 1 + WEAR_FIT_JITTER, N_FIT_TERMS)
                fit = tuple(float(v) for v in np.asarray(fit) * jitter)
        return cls(base, spans, subject.coupling_gain, fit)


def channel_responses(poses, skel: Skeleton, coupling_gain: float = 1.0, fit=()) -> np.ndarray:
    """Noiseless dimensionless responses (T, 8) for pose vectors (T, 78)."""
    poses = np.asarray(poses, dtype=float)
    R = matrix_from_rot6d(poses.reshape(-1, N_POSE, 6))
    kappa = coupling_gain * _coupling(R, fk_all_nodes(R, skel))
    fl = _torso_frame_features(R)
    fr = _torso_frame_features(mirror_pose_matrices(R))
    for f in (fl, fr):
        f["lam"] = coupling_gain * f["lam"]
    return np.concatenate([_side_responses(fl, kappa, fit), _side_responses(fr, kappa, fit)], axis=-1)


def synth_capacitance(poses, subject: SubjectProfile, wear_seed=None, seed=0,
                      noise: bool = True, label_rate: float = LABEL_RATE,
                      label_t0_us: int = 0, sensor_phase_us: float | None = None):
    """Raw 32 Hz sensor frames for a pose track sampled at ``label_rate``.

    Returns ``(FrameBlock, label_t_us)``. The noiseless channel values are
    computed on the label clock and linearly interpolated to the sensor
    clock; drift and white noise are added at the sensor rate.
    """
    poses = np.asarray(poses, dtype=float)
    rng = np.random.default_rng(seed)
    model = ChannelModel.for_wearing(subject, wear_seed)
    resp = channel_responses(poses, subject.skeleton, model.coupling_gain, model.fit)
    clean = model.baselines + resp * model.spans  # (K, 8)
    label_t = label_t0_us + np.arange(len(poses)) * (1e6 / label_rate)
    if sensor_phase_us is None:
        sensor_phase_us = rng.uniform(0, FRAME_PERIOD_US)
    sensor_t = np.arange(label_t[0] + sensor_phase_us, label_t[-1] + 1e-6, FRAME_PERIOD_US)
    vals = np.stack([np.interp(sensor_t, label_t, clean[:, c]) for c in range(N_CHANNELS)], -1)
    if noise:
        dt = 1.0 / SAMPLE_RATE
        steps = rng.normal(0, DRIFT_FRACTION * math.sqrt(dt), vals.shape) * model.spans
        vals = vals + np.cumsum(steps, axis=0)
        vals = vals + rng.normal(0, NOISE_FRACTION, vals.shape) * model.spans
    codes = np.clip(np.rint(vals), 1, MAX_CODE).astype(np.int64)
    n = len(codes)
    block = FrameBlock(np.arange(n, dtype=np.int64), np.rint(sensor_t).astype(np.int64), codes)
    return block, np.rint(label_t).astype(np.int64)


# --------------------------------------------------------------------------
# Sessions


@dataclass
class Session:
    """One wearing: raw sensor frames plus the label stream on its own clock."""

    subject_id: int
    index: int
    subject: SubjectProfile
    wear_seed: int
    frames: FrameBlock
    label_t_us: np.ndarray
    poses: np.ndarray  # (K, 78)
    segments: list = field(default_factory=list)  # (start_k, stop_k, script, category)

    @property
    def name(self) -> str:
        return f"s{self.subject_id:02d}_{self.index:02d}"

    @property
    def skeleton(self) -> Skeleton:
        return self.subject.skeleton

    @property
    def duration_s(self) -> float:
        return (self.label_t_us[-1] - self.label_t_us[0]) / 1e6

    def label_index(self, t_us) -> np.ndarray:
        """Nearest label frame for each sensor timestamp."""
        t_us = np.asarray(t_us)
        j = np.clip(np.searchsorted(self.label_t_us, t_us), 1, len(self.label_t_us) - 1)
        left = self.label_t_us[j - 1]
        right = self.label_t_us[j]
        return np.where(t_us - left <= right - t_us, j - 1, j)

    def label_categories(self) -> np.ndarray:
        cat = np.empty(len(self.label_t_us), dtype=object)
        for a, b, _, c in self.segments:
            cat[a:b] = c
        return cat

    def label_scripts(self) -> np.ndarray:
        s = np.empty(len(self.label_t_us), dtype=object)
        for a, b, name, _ in self.segments:
            s[a:b] = name
        return s

    def joints(self) -> np.ndarray:
        return forward_kinematics(self.poses, self.skeleton)

    def windows(self, hop: int = 1, channels=None, start: int | None = None):
        """Normalised windows with aligned targets.

        Returns dict with ``X`` (M, 96, C) float32, ``pose`` (M, 78),
        ``joints`` (M, 8, 3), ``end`` sensor-frame indices, ``label`` label
        indices, ``category`` per window and ``arm_length``.
        """
        X, ends = normalize_session(self.frames.codes, hop=hop, start=start)
        if channels is not None:
            X = X[..., list(channels)]
        li = self.label_index(self.frames.t_us[ends])
        joints = self.joints()
        return {
            "X": X.astype(np.float32),
            "pose": self.poses[li],
            "joints": joints[li],
            "end": ends,
            "label": li,
            "category": self.label_categories()[li],
            "arm_length": np.full(len(ends), self.subject.arm_length),
        }

    # ---- files

    def save(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        write_frames_csv(d / f"{self.name}.frames.csv", self.frames)
        with open(d / f"{self.name}.labels.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t_us", "script", "category"] + [f"p{i}" for i in range(6 * N_POSE)])
            names, cats = self.label_scripts(), self.label_categories()
            for t, n, c, p in zip(self.label_t_us, names, cats, self.poses):
                w.writerow([int(t), n, c] + [repr(float(v)) for v in p])
        meta = {"subject_id": self.subject_id, "index": self.index,
                "wear_seed": self.wear_seed, "subject": self.subject.to_dict(),
                "segments": [list(s) for s in self.segments]}
        (d / f"{self.name}.json").write_text(json.dumps(meta, indent=2))

    @classmethod
    def load(cls, directory, name: str) -> "Session":
        d = Path(directory)
        try:
            meta = json.loads((d / f"{name}.json").read_text())
            frames = read_frames_csv(d / f"{name}.frames.csv")
            with open(d / f"{name}.labels.csv", newline="") as fh:
                rows = list(csv.reader(fh))[1:]
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot load session {name}: {exc}") from exc
        t = np.array([int(r[0]) for r in rows], dtype=np.int64)
        poses = np.array([[float(v) for v in r[3:]] for r in rows])
        return cls(meta["subject_id"], meta["index"], SubjectProfile.from_dict(meta["subject"]),
                   meta["wear_seed"], frames, t, poses,
                   [tuple(s) for s in meta["segments"]])


def compose_session_track(duration_s: float, rng: np.random.Generator,
                          sections=SECTION_SECONDS, rate: float = LABEL_RATE):
    """Angle track for one session: defined scripts, dances, then freestyle.

    Section lengths keep the given proportions. Each script performance
    gets a random tempo and amplitude. Returns ``(track, segments)``.
    """
    total = sum(sections.values())
    lib = script_library()
    defined = [s for s in lib if s.category == "defined"]
    dances = [s for s in lib if s.category == "dance"]
    parts, segments, k = [], [], 0

    def push(track, name, cat):
        nonlocal k
        parts.append(track)
        segments.append((k, k + len(track), name, cat))
        k += len(track)

    target = int(round(duration_s * sections["defined"] / total * rate))
    order = rng.permutation(len(defined))
    i = 0
    while k < target:
        sc = defined[order[i % len(order)]]
        i += 1
        tr = sc.track(rate, tempo=rng.uniform(0.85, 1.15), amplitude=rng.uniform(0.85, 1.08))
        push(tr[: target - k], sc.name, "defined")
    target += int(round(duration_s * sections["dance"] / total * rate))
    start = k
    for sc in dances:
        budget = (target - start) // len(dances)
        tr = sc.track(rate, tempo=sc.duration * rate / max(budget, 2),
                      amplitude=rng.uniform(0.9, 1.05))
        push(tr[:budget], sc.name, "dance")
    free_n = int(round(duration_s * rate)) - k
    if free_n >= 2:
        push(freestyle_track(free_n / rate, rng, rate)[:free_n], "freestyle", "freestyle")
    return np.concatenate(parts), segments


def make_session(subject_id: int, index: int, subject: SubjectProfile, duration_s: float,
                 seed, noise: bool = True) -> Session:
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    motion_seed, wear_seed, signal_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(3))
    track, segments = compose_session_track(duration_s, np.random.default_rng(motion_seed))
    poses = pose_vectors(track)
    frames, label_t = synth_capacitance(poses, subject, wear_seed, signal_seed, noise=noise)
    return Session(subject_id, index, subject, wear_seed, frames, label_t, poses, segments)


# --------------------------------------------------------------------------
# Datasets


@dataclass(frozen=True)
class SplitSpec:
    """How sessions are divided for the two training stages.

    For a target subject, the user-independent stage trains on every other
    subject (holding out their last ``val_sessions`` for validation); the
    user-adaptive stage fine-tunes on the target's first
    ``finetune_sessions`` and tests on the rest.
    """

    sessions_per_subject: int = 8
    finetune_sessions: int = 6
    val_sessions: int = 1

    def check(self, n_subjects: int):
        if n_subjects < 2:
            raise ConfigError("need at least 2 subjects")
        if not 0 < self.finetune_sessions < self.sessions_per_subject:
            raise ConfigError("finetune_sessions must leave at least one test session")
        if not 0 <= self.val_sessions < self.sessions_per_subject:
            raise ConfigError("val_sessions must leave training sessions")


@dataclass
class Dataset:
    subjects: list
    sessions: dict  # (subject_id, index) -> Session
    split: SplitSpec
    seed: int
    minutes_per_subject: float

    def of_subject(self, sid: int) -> list:
        return [self.sessions[(sid, i)] for i in range(self.split.sessions_per_subject)]

    def splits(self, target: int) -> dict:
        """Session lists for one target subject (user-adaptive protocol)."""
        if target not in range(len(self.subjects)):
            raise ConfigError(f"no subject {target}")
        sp = self.split
        others = [s for s in range(len(self.subjects)) if s != target]
        cut = sp.sessions_per_subject - sp.val_sessions
        mine = self.of_subject(target)
        return {
            "independent_train": [x for o in others for x in self.of_subject(o)[:cut]],
            "independent_val": [x for o in others for x in self.of_subject(o)[cut:]],
            "adaptive_train": mine[: sp.finetune_sessions],
            "test": mine[sp.finetune_sessions:],
        }

    def manifest(self) -> dict:
        return {
            "seed": self.seed,
            "minutes_per_subject": self.minutes_per_subject,
            "split": asdict(self.split),
            "subjects": [s.to_dict() for s in self.subjects],
            "sessions": [
                {"name": s.name, "subject_id": s.subject_id, "index": s.index,
                 "wear_seed": s.wear_seed, "duration_s": s.duration_s,
                 "role": "finetune" if s.index < self.split.finetune_sessions else "test"}
                for s in self.sessions.values()
            ],
        }

    def save(self, directory):
        d = Path(directory)
        (d / "sessions").mkdir(parents=True, exist_ok=True)
        for s in self.sessions.values():
            s.save(d / "sessions")
        for i, subj in enumerate(self.subjects):
            subj.skeleton.save(d / f"subject{i:02d}.skeleton.json")
        (d / "manifest.json").write_text(json.dumps(self.manifest(), indent=2))

    @classmethod
    def load(cls, directory) -> "Dataset":
        d = Path(directory)
        try:
            m = json.loads((d / "manifest.json").read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read dataset manifest in {d}: {exc}") from exc
        sessions = {}
        for e in m["sessions"]:
            s = Session.load(d / "sessions", e["name"])
            sessions[(s.subject_id, s.index)] = s
        return cls([SubjectProfile.from_dict(x) for x in m["subjects"]], sessions,
                   SplitSpec(**m["split"]), m["seed"], m["minutes_per_subject"])


def build_dataset(n_subjects: int = 3, minutes_per_subject: float = 20.0,
                  split: SplitSpec = SplitSpec(), seed: int = 0,
                  noise: bool = True) -> Dataset:
    """Generate ``n_subjects`` synthetic subjects with equal-length sessions."""
    split.check(n_subjects)
    if minutes_per_subject <= 0:
        raise ConfigError("minutes_per_subject must be positive")
    duration = minutes_per_subject * 60.0 / split.sessions_per_subject
    if duration * SAMPLE_RATE < 180 + 96:
        raise ConfigError(f"sessions of {duration:.1f} s are too short to window")
    root = np.random.SeedSequence(seed)
    subjects, sessions = [], {}
    for sid, sub_seq in enumerate(root.spawn(n_subjects)):
        profile_seq, *session_seqs = sub_seq.spawn(1 + split.sessions_per_subject)
        subject = SubjectProfile.sample(np.random.default_rng(profile_seq))
        subjects.append(subject)
        for i, sseq in enumerate(session_seqs):
            sessions[(sid, i)] = make_session(sid, i, subject, duration, sseq, noise=noise)
    return Dataset(subjects, sessions, split, seed, minutes_per_subject)


def stack_windows(sessions, hop: int = 1, channels=None) -> dict:
    """Concatenate ``Session.windows`` over sessions."""
    parts = [s.windows(hop=hop, channels=channels) for s in sessions]
    if not parts:
        raise DataError("no sessions to window")
    return {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}


__all__ = [
    "SubjectProfile", "ChannelModel", "Session", "SplitSpec", "Dataset",
    "build_dataset", "synth_capacitance", "channel_responses", "make_session",
    "compose_session_track", "stack_windows", "script_library", "OUTPUT_JOINTS",
]
