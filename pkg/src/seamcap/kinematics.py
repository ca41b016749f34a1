"""Rotation representations, the upper-body kinematic chain and MPJPE.

Coordinates follow the SMPL convention: +x is the subject's left, +y up,
+z forward. Every function has a NumPy form (pure, float64) and the
differentiable pieces also have a batched torch form used by training.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .exceptions import DataError, DegenerateRotation

# Order of the 13 rotated joints; fixes the layout of the 78-dim pose vector.
POSE_JOINTS = (
    "spine1", "spine2", "spine3", "neck", "head",
    "collarL", "collarR", "shoulderL", "shoulderR",
    "elbowL", "elbowR", "wristL", "wristR",
)
# Order of the 8 evaluated joint positions.
OUTPUT_JOINTS = (
    "nose", "neck", "shoulderR", "elbowR", "wristR",
    "shoulderL", "elbowL", "wristL",
)
N_POSE = len(POSE_JOINTS)
POSE_DIM = 6 * N_POSE

# Kinematic tree as (parent, child) edges in topological order.
TREE_EDGES = (
    ("pelvis", "spine1"), ("spine1", "spine2"), ("spine2", "spine3"),
    ("spine3", "neck"), ("neck", "head"), ("head", "nose"),
    ("spine3", "collarL"), ("collarL", "shoulderL"),
    ("shoulderL", "elbowL"), ("elbowL", "wristL"),
    ("spine3", "collarR"), ("collarR", "shoulderR"),
    ("shoulderR", "elbowR"), ("elbowR", "wristR"),
)

# Template offsets (metres) from parent to child in the rest pose.
TEMPLATE_OFFSETS = {
    "spine1": (0.0, 0.10, 0.0),
    "spine2": (0.0, 0.10, 0.0),
    "spine3": (0.0, 0.10, 0.0),
    "neck": (0.0, 0.20, 0.0),
    "head": (0.0, 0.07, 0.0),
    "nose": (0.0, 0.0, 0.10),
    "collarL": (0.04, 0.16, 0.0),
    "shoulderL": (0.17, 0.0, 0.0),
    "elbowL": (0.26, 0.0, 0.0),
    "wristL": (0.25, 0.0, 0.0),
    "collarR": (-0.04, 0.16, 0.0),
    "shoulderR": (-0.17, 0.0, 0.0),
    "elbowR": (-0.26, 0.0, 0.0),
    "wristR": (-0.25, 0.0, 0.0),
}
ARM_SEGMENTS = ("elbowL", "wristL", "elbowR", "wristR")
TEMPLATE_ARM_LENGTH = 0.51

# Minimum angle between the two 6D columns before Gram-Schmidt is refused.
DEGENERACY_ANGLE = 1e-6
_MIN_NORM = 1e-12


@dataclass(frozen=True)
class Skeleton:
    """Kinematic tree with bone offsets scaled to a subject's arm length."""

    edges: tuple = TREE_EDGES
    offsets: dict = field(default_factory=lambda: dict(TEMPLATE_OFFSETS))
    arm_length: float = TEMPLATE_ARM_LENGTH

    def __post_init__(self):
        offsets = {k: tuple(float(c) for c in v) for k, v in self.offsets.items()}
        object.__setattr__(self, "edges", tuple(tuple(e) for e in self.edges))
        object.__setattr__(self, "offsets", offsets)
        self.validate()

    @classmethod
    def from_arm_length(cls, arm_length: float) -> "Skeleton":
        """Template skeleton with both arm chains scaled to ``arm_length``."""
        if not arm_length > 0:
            raise DataError(f"arm_length must be positive, got {arm_length}")
        s = arm_length / TEMPLATE_ARM_LENGTH
        offsets = {
            k: tuple(c * s for c in v) if k in ARM_SEGMENTS else v
            for k, v in TEMPLATE_OFFSETS.items()
        }
        return cls(TREE_EDGES, offsets, float(arm_length))

    def validate(self):
        children = [c for _, c in self.edges]
        if len(set(children)) != len(children):
            raise DataError("a joint has more than one parent")
        if "pelvis" in children:
            raise DataError("the root may not have a parent")
        seen = {"pelvis"}
        for parent, child in self.edges:
            if parent not in seen:
                raise DataError(f"edge {parent}->{child} is not in topological order")
            seen.add(child)
        missing = set(POSE_JOINTS + OUTPUT_JOINTS) - seen
        if missing:
            raise DataError(f"skeleton lacks joints {sorted(missing)}")
        if set(self.offsets) != set(children):
            raise DataError("offsets must be given for exactly the child joints")
        if not self.arm_length > 0:
            raise DataError("arm_length must be positive")
        for side in "LR":
            reach = (np.linalg.norm(self.offsets["elbow" + side])
                     + np.linalg.norm(self.offsets["wrist" + side]))
            if not math.isclose(reach, self.arm_length, rel_tol=1e-9):
                raise DataError(
                    f"{side} arm segments sum to {reach:.6f} m, not arm_length "
                    f"{self.arm_length:.6f} m")

    @property
    def nodes(self) -> tuple:
        return ("pelvis",) + tuple(c for _, c in self.edges)

    def offset_array(self) -> np.ndarray:
        """Offsets as an (n_nodes, 3) array in ``nodes`` order; root row is zero."""
        out = np.zeros((len(self.nodes), 3))
        for i, name in enumerate(self.nodes[1:], start=1):
            out[i] = self.offsets[name]
        return out

    def to_dict(self) -> dict:
        return {
            "edges": [list(e) for e in self.edges],
            "offsets": {k: list(v) for k, v in self.offsets.items()},
            "arm_length": self.arm_length,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Skeleton":
        try:
            return cls(d["edges"], d["offsets"], float(d["arm_length"]))
        except (KeyError, TypeError) as exc:
            raise DataError(f"malformed skeleton document: {exc}") from exc

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "Skeleton":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _tree_plan(skel: Skeleton):
    """Index arrays (parent index, pose index or -1) for every non-root node."""
    nodes = skel.nodes
    index = {n: i for i, n in enumerate(nodes)}
    parents = [index[p] for p, _ in skel.edges]
    pose_idx = {n: i for i, n in enumerate(POSE_JOINTS)}
    rotated = [pose_idx.get(n, -1) for n in nodes]
    out_idx = [index[n] for n in OUTPUT_JOINTS]
    return parents, rotated, out_idx


# --------------------------------------------------------------------------
# NumPy forms


def rot6d_from_matrix(R) -> np.ndarray:
    """First two columns of ``R`` (..., 3, 3) concatenated to (..., 6)."""
    R = np.asarray(R, dtype=float)
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


def matrix_from_rot6d(v) -> np.ndarray:
    """Gram-Schmidt reconstruction of rotation matrices from (..., 6) vectors.

    Raises DegenerateRotation when the first column vanishes or the two
    columns are within ``DEGENERACY_ANGLE`` of parallel.
    """
    v = np.asarray(v, dtype=float)
    if v.shape[-1] != 6:
        raise ValueError(f"expected trailing dimension 6, got {v.shape}")
    a1, a2 = v[..., :3], v[..., 3:]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    n2 = np.linalg.norm(a2, axis=-1, keepdims=True)
    if np.any(n1 < _MIN_NORM) or np.any(n2 < _MIN_NORM):
        raise DegenerateRotation("6D rotation has a vanishing column")
    c0 = a1 / n1
    if np.any(np.linalg.norm(np.cross(c0, a2 / n2), axis=-1) < math.sin(DEGENERACY_ANGLE)):
        raise DegenerateRotation("6D rotation columns are nearly parallel")
    b2 = a2 - np.sum(a2 * c0, axis=-1, keepdims=True) * c0
    c1 = b2 / np.linalg.norm(b2, axis=-1, keepdims=True)
    c2 = np.cross(c0, c1)
    return np.stack([c0, c1, c2], axis=-1)


def forward_kinematics(pose, skel: Skeleton) -> np.ndarray:
    """Pelvis-relative positions (..., 8, 3) from pose vectors (..., 78) or (..., 13, 6)."""
    pose = np.asarray(pose, dtype=float)
    rots = matrix_from_rot6d(pose.reshape(pose.shape[:-1] + (N_POSE, 6))
                             if pose.shape[-1] == POSE_DIM else pose)
    return fk_from_matrices(rots, skel)


def fk_all_nodes(rots, skel: Skeleton) -> np.ndarray:
    """Positions of every tree node (..., n_nodes, 3) in ``skel.nodes`` order."""
    rots = np.asarray(rots, dtype=float)
    batch = rots.shape[:-3]
    parents, rotated, _ = _tree_plan(skel)
    offsets = skel.offset_array()
    G = [np.broadcast_to(np.eye(3), batch + (3, 3))]
    P = [np.zeros(batch + (3,))]
    for i, par in enumerate(parents, start=1):
        P.append(P[par] + np.einsum("...ij,j->...i", G[par], offsets[i]))
        r = rotated[i]
        G.append(G[par] @ rots[..., r, :, :] if r >= 0 else G[par])
    return np.stack(P, axis=-2)


def fk_from_matrices(rots, skel: Skeleton) -> np.ndarray:
    """Forward kinematics from local rotation matrices (..., 13, 3, 3)."""
    _, _, out_idx = _tree_plan(skel)
    return fk_all_nodes(rots, skel)[..., out_idx, :]


def mpjpe(pred, truth) -> float:
    """Mean per-joint position error in centimetres over all leading axes."""
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    return float(np.mean(np.linalg.norm(pred - truth, axis=-1)) * 100.0)


def per_joint_error_cm(pred, truth) -> np.ndarray:
    """Euclidean error per joint (..., 8) in centimetres."""
    return np.linalg.norm(np.asarray(pred) - np.asarray(truth), axis=-1) * 100.0


def axis_angle_matrix(axis, angle) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]],
                  [axis[2], 0, -axis[0]],
                  [-axis[1], axis[0], 0]])
    return np.eye(3) + math.sin(angle) * K + (1 - math.cos(angle)) * K @ K


def random_rotations(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniformly distributed rotation matrices via normalised quaternions."""
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q.T
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)], -1),
        np.stack([2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)], -1),
        np.stack([2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)], -1),
    ], axis=-2)


IDENTITY_6D = np.tile(np.array([1.0, 0, 0, 0, 1.0, 0]), N_POSE)

# Reflection across the sagittal plane; mirrors a pose left <-> right.
_MIRROR = np.diag([-1.0, 1.0, 1.0])
_SWAP = {"L": "R", "R": "L"}


def mirror_pose_matrices(rots) -> np.ndarray:
    """Mirror local rotations (..., 13, 3, 3) left <-> right."""
    rots = np.asarray(rots, dtype=float)
    out = np.empty_like(rots)
    for i, name in enumerate(POSE_JOINTS):
        src = name[:-1] + _SWAP[name[-1]] if name[-1] in "LR" else name
        out[..., i, :, :] = _MIRROR @ rots[..., POSE_JOINTS.index(src), :, :] @ _MIRROR
    return out


def mirror_positions(p) -> np.ndarray:
    """Mirror output joint positions (..., 8, 3) left <-> right."""
    p = np.asarray(p, dtype=float)
    out = np.empty_like(p)
    for i, name in enumerate(OUTPUT_JOINTS):
        src = name[:-1] + _SWAP[name[-1]] if name[-1] in "LR" else name
        out[..., i, :] = p[..., OUTPUT_JOINTS.index(src), :] * np.array([-1.0, 1.0, 1.0])
    return out


# --------------------------------------------------------------------------
# Torch forms (batched, differentiable)


def matrix_from_rot6d_torch(v: torch.Tensor) -> torch.Tensor:
    """Differentiable Gram-Schmidt; (..., 6) -> (..., 3, 3)."""
    a1, a2 = v[..., :3], v[..., 3:]
    n1 = torch.linalg.vector_norm(a1, dim=-1, keepdim=True)
    n2 = torch.linalg.vector_norm(a2, dim=-1, keepdim=True)
    if bool((n1 < _MIN_NORM).any()) or bool((n2 < _MIN_NORM).any()):
        raise DegenerateRotation("6D rotation has a vanishing column")
    c0 = a1 / n1
    sin = torch.linalg.vector_norm(torch.linalg.cross(c0, a2 / n2, dim=-1), dim=-1)
    if bool((sin < math.sin(DEGENERACY_ANGLE)).any()):
        raise DegenerateRotation("6D rotation columns are nearly parallel")
    b2 = a2 - (a2 * c0).sum(-1, keepdim=True) * c0
    c1 = b2 / torch.linalg.vector_norm(b2, dim=-1, keepdim=True)
    c2 = torch.linalg.cross(c0, c1, dim=-1)
    return torch.stack([c0, c1, c2], dim=-1)


def forward_kinematics_torch(pose: torch.Tensor, offsets: torch.Tensor,
                             skel: Skeleton | None = None) -> torch.Tensor:
    """Batched FK: pose (B, 78), offsets (n_nodes, 3) or (B, n_nodes, 3) -> (B, 8, 3).

    ``skel`` only supplies the tree topology; offsets come from ``offsets``.
    """
    skel = skel or Skeleton()
    parents, rotated, out_idx = _tree_plan(skel)
    rots = matrix_from_rot6d_torch(pose.reshape(pose.shape[:-1] + (N_POSE, 6)))
    if offsets.dim() == 2:
        offsets = offsets.expand(pose.shape[0], -1, -1)
    batch = pose.shape[:-1]
    G = [torch.eye(3, dtype=pose.dtype).expand(batch + (3, 3))]
    P = [torch.zeros(batch + (3,), dtype=pose.dtype)]
    for i, par in enumerate(parents, start=1):
        P.append(P[par] + (G[par] @ offsets[:, i, :, None])[..., 0])
        r = rotated[i]
        G.append(G[par] @ rots[..., r, :, :] if r >= 0 else G[par])
    return torch.stack([P[i] for i in out_idx], dim=-2)


def arm_offsets(arm_length) -> np.ndarray:
    """Stacked template offsets (B, n_nodes, 3) for a batch of arm lengths."""
    arm_length = np.atleast_1d(np.asarray(arm_length, dtype=float))
    template = Skeleton()
    base = template.offset_array()
    nodes = template.nodes
    scale = np.ones((arm_length.size, len(nodes), 1))
    for seg in ARM_SEGMENTS:
        scale[:, nodes.index(seg)] = (arm_length / TEMPLATE_ARM_LENGTH)[:, None]
    return base[None] * scale
