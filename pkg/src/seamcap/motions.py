"""Anatomical angle tracks and the motion-script library.

A motion is a track of 22 anatomical angles sampled at the label rate.
``pose_matrices`` turns angles into the 13 local joint rotations; all
angles zero is the neutral standing pose with the arms hanging down.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import PchipInterpolator

from .kinematics import N_POSE, POSE_JOINTS, rot6d_from_matrix

LABEL_RATE = 30.0

ANGLES = (
    "spine_flex", "spine_side", "spine_twist",
    "neck_flex", "neck_twist", "neck_side",
    "collarL_elev", "collarL_prot", "collarR_elev", "collarR_prot",
    "shL_abd", "shL_flex", "shL_twist", "shR_abd", "shR_flex", "shR_twist",
    "elL", "elR", "wrL_flex", "wrL_dev", "wrR_flex", "wrR_dev",
)
A = {name: i for i, name in enumerate(ANGLES)}

# (low, high) in radians.
LIMITS = {
    "spine_flex": (-0.35, 0.6), "spine_side": (-0.4, 0.4), "spine_twist": (-0.75, 0.75),
    "neck_flex": (-0.6, 0.7), "neck_twist": (-1.2, 1.2), "neck_side": (-0.6, 0.6),
    "collar_elev": (-0.15, 0.45), "collar_prot": (-0.3, 0.35),
    "sh_abd": (-0.5, 3.0), "sh_flex": (-0.9, 3.05), "sh_twist": (-1.2, 1.2),
    "el": (0.0, 2.6), "wr_flex": (-1.1, 1.1), "wr_dev": (-0.45, 0.45),
}


def _limit_key(name: str) -> str:
    return re.sub(r"^(collar|sh|el|wr)[LR]", r"\1", name)


LOW = np.array([LIMITS[_limit_key(n)][0] for n in ANGLES])
HIGH = np.array([LIMITS[_limit_key(n)][1] for n in ANGLES])

_NEGATED_ON_MIRROR = ("spine_side", "spine_twist", "neck_twist", "neck_side")


def _swap_side(name: str) -> str:
    m = re.match(r"^(collar|sh|el|wr)([LR])(.*)$", name)
    if not m:
        return name
    return m.group(1) + ("R" if m.group(2) == "L" else "L") + m.group(3)


def mirror_angles(track) -> np.ndarray:
    """Swap left/right angles and negate lateral ones; matches ``mirror_pose_matrices``."""
    track = np.asarray(track, dtype=float)
    out = np.empty_like(track)
    for name, i in A.items():
        out[..., i] = track[..., A[_swap_side(name)]]
        if name in _NEGATED_ON_MIRROR:
            out[..., i] = -out[..., i]
    return out


def _rx(a):
    c, s = np.cos(a), np.sin(a)
    o, z = np.ones_like(a), np.zeros_like(a)
    return np.stack([np.stack([o, z, z], -1), np.stack([z, c, -s], -1),
                     np.stack([z, s, c], -1)], -2)


def _ry(a):
    c, s = np.cos(a), np.sin(a)
    o, z = np.ones_like(a), np.zeros_like(a)
    return np.stack([np.stack([c, z, s], -1), np.stack([z, o, z], -1),
                     np.stack([-s, z, c], -1)], -2)


def _rz(a):
    c, s = np.cos(a), np.sin(a)
    o, z = np.ones_like(a), np.zeros_like(a)
    return np.stack([np.stack([c, -s, z], -1), np.stack([s, c, z], -1),
                     np.stack([z, z, o], -1)], -2)


_M = np.diag([-1.0, 1.0, 1.0])


def _left_arm(elev, prot, abd, flex, twist, el, wflex, wdev):
    collar = _rz(elev) @ _ry(-prot)
    shoulder = _rx(-flex) @ _rz(abd) @ _rz(np.full_like(abd, -math.pi / 2)) @ _rx(twist)
    elbow = _ry(-el)
    wrist = _rz(wdev) @ _ry(-wflex)
    return collar, shoulder, elbow, wrist


def pose_matrices(track) -> np.ndarray:
    """Local joint rotations (T, 13, 3, 3) for an angle track (T, 22)."""
    t = np.asarray(track, dtype=float)
    g = lambda name: t[..., A[name]]  # noqa: E731
    out = np.empty(t.shape[:-1] + (N_POSE, 3, 3))
    spine = _ry(g("spine_twist") / 3) @ _rz(-g("spine_side") / 3) @ _rx(g("spine_flex") / 3)
    neck = _ry(g("neck_twist") / 2) @ _rz(-g("neck_side") / 2) @ _rx(g("neck_flex") / 2)
    rot = {"spine1": spine, "spine2": spine, "spine3": spine, "neck": neck, "head": neck}
    for side in "LR":
        parts = _left_arm(g(f"collar{side}_elev"), g(f"collar{side}_prot"),
                          g(f"sh{side}_abd"), g(f"sh{side}_flex"), g(f"sh{side}_twist"),
                          g(f"el{side}"), g(f"wr{side}_flex"), g(f"wr{side}_dev"))
        if side == "R":
            parts = [_M @ p @ _M for p in parts]
        for joint, p in zip(("collar", "shoulder", "elbow", "wrist"), parts):
            rot[joint + side] = p
    for i, name in enumerate(POSE_JOINTS):
        out[..., i, :, :] = rot[name]
    return out


def pose_vectors(track) -> np.ndarray:
    """Flattened 6D pose vectors (T, 78) for an angle track."""
    R = pose_matrices(track)
    return rot6d_from_matrix(R).reshape(R.shape[:-3] + (6 * N_POSE,))


# --------------------------------------------------------------------------
# Scripts


@dataclass(frozen=True)
class MotionScript:
    """A named motion: keyframes ``(time_s, {angle: value})`` eased between.

    Angles absent from a keyframe are neutral (zero) at that keyframe.
    """

    name: str
    category: str  # "defined" | "dance" | "freestyle"
    group: str  # gestures | sports | head_shoulder | arm_sequence | dance | freestyle
    index_range: tuple | None
    keyframes: tuple = field(repr=False)

    @property
    def duration(self) -> float:
        return self.keyframes[-1][0]

    def track(self, rate: float = LABEL_RATE, tempo: float = 1.0,
              amplitude: float = 1.0) -> np.ndarray:
        """Angle track (T, 22) sampled at ``rate``; ``tempo`` > 1 is faster."""
        times = np.array([k[0] for k in self.keyframes]) / tempo
        values = np.zeros((len(times), len(ANGLES)))
        for j, (_, ang) in enumerate(self.keyframes):
            for name, v in ang.items():
                values[j, A[name]] = v
        n = max(int(round(times[-1] * rate)), 2)
        ts = np.arange(n) / rate
        seg = np.clip(np.searchsorted(times, ts, side="right") - 1, 0, len(times) - 2)
        span = times[seg + 1] - times[seg]
        u = np.clip((ts - times[seg]) / np.where(span > 0, span, 1), 0, 1)
        ease = (0.5 - 0.5 * np.cos(np.pi * u))[:, None]
        out = values[seg] * (1 - ease) + values[seg + 1] * ease
        return np.clip(out * amplitude, LOW, HIGH)

    def mirrored(self, name: str, index_range=None) -> "MotionScript":
        kfs = tuple((t, _mirror_dict(a)) for t, a in self.keyframes)
        return MotionScript(name, self.category, self.group,
                            index_range or self.index_range, kfs)


def _mirror_dict(ang: dict) -> dict:
    vec = np.zeros(len(ANGLES))
    for k, v in ang.items():
        vec[A[k]] = v
    m = mirror_angles(vec)
    return {n: float(m[i]) for n, i in A.items() if m[i] != 0.0}


def arm(side: str, abd=0.0, flex=0.0, twist=0.0, el=0.0, elev=0.0, prot=0.0,
        wflex=0.0, wdev=0.0) -> dict:
    return {f"sh{side}_abd": abd, f"sh{side}_flex": flex, f"sh{side}_twist": twist,
            f"el{side}": el, f"collar{side}_elev": elev, f"collar{side}_prot": prot,
            f"wr{side}_flex": wflex, f"wr{side}_dev": wdev}


def both(**kw) -> dict:
    return {**arm("L", **kw), **arm("R", **kw)}


def _script(name, group, idx, frames, category="defined"):
    rng = (idx, idx) if isinstance(idx, int) else idx
    return MotionScript(name, category, group, rng, tuple(frames))


def _cycle(t0, period, reps, a: dict, b: dict, hold: dict | None = None):
    """Keyframes alternating ``a`` and ``b`` (each merged over ``hold``)."""
    hold = hold or {}
    out = []
    for r in range(reps):
        out.append((t0 + r * period, {**hold, **a}))
        out.append((t0 + r * period + period / 2, {**hold, **b}))
    out.append((t0 + reps * period, {**hold, **a}))
    return out


def _wrap(body, lead=0.6, tail=0.6):
    """Neutral lead-in and lead-out around a keyframe body."""
    start = body[0][0]
    shifted = [(t - start + lead, a) for t, a in body]
    return [(0.0, {})] + shifted + [(shifted[-1][0] + tail, {})]


def _gestures():
    s = []
    add = lambda name, idx, body: s.append(_script(name, "gestures", idx, _wrap(body)))  # noqa: E731
    add("lean forward", 1, [(0, {}), (1.2, {"spine_flex": 0.5, **both(flex=0.2)}), (2.2, {"spine_flex": 0.5, **both(flex=0.2)}), (3.2, {})])
    add("lean backward", 2, [(0, {}), (1.2, {"spine_flex": -0.3, "neck_flex": -0.2}), (2.2, {"spine_flex": -0.3, "neck_flex": -0.2}), (3.2, {})])
    add("lean to left", 3, [(0, {}), (1.2, {"spine_side": 0.35, **arm("R", abd=0.2)}), (2.2, {"spine_side": 0.35, **arm("R", abd=0.2)}), (3.2, {})])
    add("lean to right", 4, [(0, {}), (1.2, {"spine_side": -0.35, **arm("L", abd=0.2)}), (2.2, {"spine_side": -0.35, **arm("L", abd=0.2)}), (3.2, {})])
    add("turn left", 5, [(0, {}), (1.2, {"spine_twist": 0.6, "neck_twist": 0.3}), (2.2, {"spine_twist": 0.6, "neck_twist": 0.3}), (3.2, {})])
    add("turn right", 6, [(0, {}), (1.2, {"spine_twist": -0.6, "neck_twist": -0.3}), (2.2, {"spine_twist": -0.6, "neck_twist": -0.3}), (3.2, {})])
    up = {**both(elev=0.4, abd=0.25, el=1.3, twist=0.6, wflex=-0.4), "neck_flex": -0.1}
    add("shrug", 7, [(0, {}), (0.8, up), (1.5, up), (2.3, {}), (3.1, up), (3.8, {})])
    waist = both(abd=0.6, flex=-0.25, el=1.8, twist=-0.5)
    add("pinch waist", 8, [(0, {}), (1.2, waist), (2.6, waist), (3.6, {})])
    block = {**arm("R", flex=1.3, abd=0.3, el=1.7, twist=-0.8), **arm("L", flex=0.3, el=0.8)}
    add("forearm block", 9, [(0, {}), (0.8, block), (1.8, block), (2.6, {})])
    opened = {**both(abd=1.35, flex=0.35, el=0.2, prot=-0.2), "spine_flex": -0.1}
    add("open arms", 10, [(0, {}), (1.2, opened), (2.4, opened), (3.4, {})])
    head = both(abd=2.2, flex=0.7, el=2.4, elev=0.15)
    add("hands on the head", 11, [(0, {}), (1.4, head), (2.8, head), (4.0, {})])
    raised = both(flex=2.9, el=0.1, elev=0.3)
    add("arms up", 12, [(0, {}), (1.4, raised), (2.6, raised), (3.8, {})])
    add("flappy bird", 13, _cycle(0, 0.9, 4, both(abd=0.3, el=0.1), both(abd=1.5, el=0.2, elev=0.2)))
    add("claps", 14, _cycle(0, 0.6, 5, both(flex=1.35, abd=0.1, el=0.5, twist=0.5), both(flex=1.35, abd=0.9, el=0.6, twist=0.3)))
    swing_a = {**arm("L", flex=0.5, el=0.4), **arm("R", flex=-0.45, el=0.2), "spine_twist": -0.1}
    swing_b = {**arm("L", flex=-0.45, el=0.2), **arm("R", flex=0.5, el=0.4), "spine_twist": 0.1}
    add("walk", 15, _cycle(0, 1.1, 4, swing_a, swing_b))
    add("butterfly swing", 16, _cycle(0, 1.4, 3, both(flex=1.3, abd=1.3, el=0.3), both(flex=1.3, abd=0.05, el=0.3, twist=0.4)))
    respect = {**arm("R", flex=0.9, abd=-0.2, el=2.1, twist=-0.6), "neck_flex": 0.3, "spine_flex": 0.15}
    add("respect gesture", 17, [(0, {}), (1.2, respect), (2.4, respect), (3.4, {})])
    confused = {**arm("R", abd=1.6, flex=1.0, el=2.5), "neck_side": -0.3, **arm("L", el=0.3)}
    add("confuse gesture", 18, [(0, {}), (1.2, confused), (1.8, {**confused, "neck_side": -0.1}), (2.4, confused), (3.4, {})])
    frame = both(flex=1.5, abd=0.5, el=1.2, twist=0.3, wflex=-0.5)
    add("frame picture", 19, [(0, {}), (1.3, frame), (2.5, frame), (3.5, {})])
    stop = {**arm("R", flex=1.5, el=0.3, wflex=-0.9), "spine_flex": -0.05}
    add("stop gesture", 20, [(0, {}), (1.0, stop), (2.2, stop), (3.0, {})])
    return s


def _sports():
    s = []
    add = lambda name, idx, body: s.append(_script(name, "sports", idx, _wrap(body)))  # noqa: E731
    back = {"spine_twist": -0.6, **arm("L", flex=0.9, abd=-0.3, el=0.1), **arm("R", flex=0.9, abd=0.4, el=1.2), "neck_twist": 0.4}
    through = {"spine_twist": 0.7, **arm("L", flex=1.2, abd=0.6, el=1.4), **arm("R", flex=1.1, abd=-0.3, el=0.2), "neck_twist": -0.3}
    address = {"spine_flex": 0.35, **both(flex=0.45, el=0.1)}
    add("golf swing", 21, [(0, {}), (0.8, address), (2.0, back), (2.6, through), (3.6, through), (4.4, {})])
    cock = {"spine_twist": -0.5, **arm("R", abd=1.2, flex=-0.4, el=0.8), **arm("L", flex=0.8, el=0.5)}
    hit = {"spine_twist": 0.5, **arm("R", abd=0.5, flex=1.8, el=0.3), **arm("L", flex=0.2, el=0.6)}
    tennis = _script("right tennis swing", "sports", 22, _wrap([(0, {}), (1.0, cock), (1.6, hit), (2.4, hit), (3.2, {})]))
    s += [tennis, tennis.mirrored("left tennis swing", (23, 23))]
    dribble = _script("right basketball dribble", "sports", 24, _wrap(
        _cycle(0, 0.5, 6, arm("R", flex=0.6, abd=0.3, el=0.7, wflex=-0.4), arm("R", flex=0.5, abd=0.3, el=1.3, wflex=0.5),
               hold={"spine_flex": 0.2})))
    s += [dribble, dribble.mirrored("left basketball dribble", (25, 25))]
    aim = {**both(flex=2.3, el=2.0, abd=0.3), "neck_flex": -0.2}
    shot = {**both(flex=2.7, el=0.2, wflex=0.8), "neck_flex": -0.3}
    add("basketball shooting", 26, [(0, {}), (1.0, aim), (1.6, aim), (2.0, shot), (2.8, shot), (3.6, {})])
    guard = both(flex=1.0, el=2.2, abd=0.1)
    punch_l = {**arm("L", flex=1.5, el=0.05, twist=-0.8), **arm("R", flex=1.0, el=2.2, abd=0.1), "spine_twist": -0.3}
    punch_r = {**arm("R", flex=1.5, el=0.05, twist=-0.8), **arm("L", flex=1.0, el=2.2, abd=0.1), "spine_twist": 0.3}
    add("punches with alternate hands", 27, [(0, {}), (0.6, guard)] + [
        (1.0 + 0.8 * k + d, p) for k in range(4) for d, p in ((0.0, punch_l if k % 2 == 0 else punch_r), (0.4, guard))])
    side = _script("left arm swing on the side", "sports", 28, _wrap(_cycle(0, 1.0, 4, arm("L", flex=0.6, el=0.3), arm("L", flex=-0.6, el=0.1))))
    s += [side, side.mirrored("right arm swing on the side", (29, 29))]
    front = _script("left arm swing in front", "sports", 30, _wrap(_cycle(0, 1.2, 3, arm("L", flex=1.2, abd=1.0, el=0.2), arm("L", flex=1.2, abd=-0.45, el=0.4))))
    s += [front, front.mirrored("right arm swing in front", (31, 31))]
    return s


def _head_shoulder():
    s = []
    add = lambda name, idx, body: s.append(_script(name, "head_shoulder", idx, _wrap(body)))  # noqa: E731
    add("head sequence: down and up", 32, _cycle(0, 1.6, 2, {"neck_flex": 0.6}, {"neck_flex": -0.5}))
    roll = [(0.3 * k, {"neck_flex": 0.45 * math.cos(k * math.pi / 4), "neck_side": 0.45 * math.sin(k * math.pi / 4)}) for k in range(17)]
    roll += [(roll[-1][0] + 0.3 * (k + 1), {"neck_flex": 0.45 * math.cos(k * math.pi / 4), "neck_side": -0.45 * math.sin(k * math.pi / 4)}) for k in range(17)]
    add("head sequence: roll", 33, roll)
    add("head sequence: turn", 34, _cycle(0, 2.0, 2, {"neck_twist": 1.0}, {"neck_twist": -1.0}))
    add("head sequence: tilt", 35, _cycle(0, 2.0, 2, {"neck_side": 0.5}, {"neck_side": -0.5}))
    add("shoulder sequence: up and down", 36, _cycle(0, 1.2, 3, both(elev=0.42), both(elev=-0.1)))
    add("shoulder sequence: forward and backward", 37, _cycle(0, 1.2, 3, both(prot=0.33), both(prot=-0.28)))
    circle = [(0.25 * k, both(elev=0.2 + 0.2 * math.sin(k * math.pi / 3), prot=0.3 * math.cos(k * math.pi / 3))) for k in range(13)]
    circle += [(circle[-1][0] + 0.25 * (k + 1), both(elev=0.2 + 0.2 * math.sin(k * math.pi / 3), prot=-0.3 * math.cos(k * math.pi / 3))) for k in range(13)]
    add("shoulder sequence: rotate", 38, circle)
    return s


_TRACKS = {"inside": -0.8, "neutral": 0.0, "outside": 0.8}


def _curls(sides, base: dict, tracks, hold: dict | None = None):
    """Curl each of ``tracks`` in turn for every arm in ``sides`` from ``base``."""
    hold = hold or {}
    out, t = [], 0.0
    pose = lambda el, tw: {**hold, **{k: v for sd in sides for k, v in arm(sd, el=el, twist=tw, **base).items()}}  # noqa: E731
    for tr in tracks:
        tw = _TRACKS[tr]
        out += [(t, pose(0.05, tw)), (t + 0.7, pose(2.2, tw)), (t + 1.4, pose(0.05, tw))]
        t += 1.6
    return out


def _arm_sequences():
    s = []
    sets = [
        ("arms down", {}, (39, 41), ("inside", "neutral", "outside")),
        ("arms open", {"abd": 1.55}, (42, 44), ("inside", "neutral", "outside")),
        ("arms front", {"flex": 1.55}, (45, 47), ("inside", "neutral", "outside")),
        ("arms overhead", {"flex": 2.85}, (48, 50), ("inside", "neutral")),
    ]
    for label, base, (i0, _), tracks in sets:
        for k, (who, sides) in enumerate((("left", "L"), ("right", "R"), ("both", "LR"))):
            hold = {}
            if base and len(sides) == 1:
                other = "R" if sides == "L" else "L"
                hold = arm(other, **base)
            s.append(_script(f"{label}: {who} curl", "arm_sequence", i0 + k,
                             _wrap(_curls(sides, base, tracks, hold))))
    for i, (held, base) in enumerate(((("abd", 1.55), 51), (("flex", 1.55), 53))):
        key, val = held
        for k, (sd, other) in enumerate((("R", "L"), ("L", "R"))):
            name = f"{'open' if key == 'abd' else 'front'} {'left' if other == 'L' else 'right'}, {'right' if sd == 'R' else 'left'} overhead curl"
            s.append(_script(name, "arm_sequence", base + k, _wrap(
                _curls(sd, {"flex": 2.85}, ("inside", "neutral"), hold=arm(other, **{key: val})))))
    return s


def _dances():
    d1, t = [], 0.0
    moves = [
        {**both(abd=1.5, el=0.3), "spine_side": 0.15},
        {**arm("L", flex=2.6, el=0.4), **arm("R", abd=0.8, el=1.9), "spine_side": -0.2, "neck_side": 0.2},
        {**both(flex=1.4, el=1.6, twist=0.6), "spine_flex": 0.2},
        {**arm("R", flex=2.6, el=0.4), **arm("L", abd=0.8, el=1.9), "spine_side": 0.2, "neck_side": -0.2},
        {**both(abd=0.4, flex=0.3, el=2.0, elev=0.3), "spine_twist": 0.3},
        {**both(abd=2.4, flex=0.5, el=0.6), "neck_flex": -0.2},
        {**arm("L", flex=1.5, el=0.1), **arm("R", flex=-0.5), "spine_twist": -0.4},
        {**both(flex=0.8, abd=0.9, el=1.2, prot=0.3), "spine_flex": 0.15},
    ]
    for rep in range(3):
        for m in moves:
            d1.append((t, m))
            t += 0.45
    d2, t = [], 0.0
    for rep in range(4):
        for m in (moves[5], moves[2], moves[0], moves[4], moves[6], moves[1], moves[3]):
            d2.append((t, {**m, "spine_flex": m.get("spine_flex", 0.0) + 0.1 * (rep % 2)}))
            t += 0.38
    return [
        _script("dance 1", "dance", None, _wrap(d1, 0.3, 0.3), category="dance"),
        _script("dance 2", "dance", None, _wrap(d2, 0.3, 0.3), category="dance"),
    ]


_LIBRARY = None


def script_library() -> list[MotionScript]:
    """Deterministic library: defined movements (indices 1-54) and two dances."""
    global _LIBRARY
    if _LIBRARY is None:
        _LIBRARY = _gestures() + _sports() + _head_shoulder() + _arm_sequences() + _dances()
    return list(_LIBRARY)


def get_script(name: str) -> MotionScript:
    for sc in script_library():
        if sc.name == name:
            return sc
    raise KeyError(name)


# Freestyle sampling stays inside a shrunken box so splines cannot overshoot.
_FREE_LOW = LOW * 0.8
_FREE_HIGH = HIGH * 0.8


def freestyle_track(duration: float, rng: np.random.Generator,
                    rate: float = LABEL_RATE) -> np.ndarray:
    """Monotone spline through random anatomical poses, starting and ending neutral."""
    knots = [0.0]
    while knots[-1] < duration - 1.0:
        knots.append(knots[-1] + rng.uniform(0.7, 1.4))
    if len(knots) == 1:
        knots.append(duration)
    knots[-1] = duration
    poses = rng.uniform(_FREE_LOW, _FREE_HIGH, (len(knots), len(ANGLES)))
    # Keep arms mostly in a plausible range and occasionally at rest.
    rest = rng.random((len(knots), 1)) < 0.2
    poses = np.where(rest, poses * 0.2, poses)
    poses[0] = poses[-1] = 0.0
    n = max(int(round(duration * rate)), 2)
    ts = np.linspace(0.0, duration, n, endpoint=False)
    return np.clip(PchipInterpolator(knots, poses, axis=0)(ts), LOW, HIGH)
