import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from seamcap import kinematics as K
from seamcap.exceptions import DataError, DegenerateRotation


def quat_matrix(q):
    # independent route: Hamilton product applied to basis vectors
    q = np.asarray(q, float) / np.linalg.norm(q)
    w, v = q[0], q[1:]

    def rotate(x):
        t = 2 * np.cross(v, x)
        return x + w * t + np.cross(v, t)
    return np.stack([rotate(e) for e in np.eye(3)], axis=1)


finite = st.floats(-10, 10, allow_nan=False)


@given(st.lists(finite, min_size=4, max_size=4).filter(lambda q: np.linalg.norm(q) > 1e-3))
def test_random_rotations_match_rodrigues_route(q):
    rng = np.random.default_rng(0)
    R = quat_matrix(q)
    assert np.allclose(R.T @ R, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(K.matrix_from_rot6d(K.rot6d_from_matrix(R)), R, atol=1e-12)
    assert K.random_rotations(1, rng).shape == (1, 3, 3)


def test_axis_angle_matches_quaternion():
    axis, ang = np.array([0.3, -0.5, 0.8]), 1.1
    q = np.r_[math.cos(ang / 2), math.sin(ang / 2) * axis / np.linalg.norm(axis)]
    np.testing.assert_allclose(K.axis_angle_matrix(axis, ang), quat_matrix(q), atol=1e-14)


@settings(max_examples=200)
@given(st.lists(finite, min_size=6, max_size=6))
def test_gram_schmidt_output_is_rotation_or_refused(v):
    v = np.array(v)
    try:
        R = K.matrix_from_rot6d(v)
    except DegenerateRotation:
        a, b = v[:3], v[3:]
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        assert na < 1e-12 or nb < 1e-12 or np.linalg.norm(np.cross(a / na, b / nb)) < 1e-5
        return
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-9)
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-9)
    # first column is the normalised first 3-vector
    np.testing.assert_allclose(R[:, 0], v[:3] / np.linalg.norm(v[:3]), atol=1e-12)


def test_degenerate_inputs_raise():
    with pytest.raises(DegenerateRotation):
        K.matrix_from_rot6d(np.zeros(6))
    with pytest.raises(DegenerateRotation):
        K.matrix_from_rot6d(np.array([1.0, 0, 0, 2.0, 0, 0]))
    with pytest.raises(DegenerateRotation):
        K.matrix_from_rot6d_torch(torch.tensor([1.0, 0, 0, -3.0, 0, 0], dtype=torch.float64))


def test_torch_and_numpy_gram_schmidt_agree():
    rng = np.random.default_rng(1)
    v = rng.normal(size=(50, 6))
    np.testing.assert_allclose(K.matrix_from_rot6d_torch(torch.as_tensor(v)).numpy(),
                               K.matrix_from_rot6d(v), atol=1e-13)


def test_identity_pose_gives_template_positions():
    skel = K.Skeleton()
    J = K.forward_kinematics(K.IDENTITY_6D, skel)
    idx = {n: i for i, n in enumerate(K.OUTPUT_JOINTS)}
    np.testing.assert_allclose(J[idx["neck"]], [0, 0.50, 0], atol=1e-12)
    np.testing.assert_allclose(J[idx["nose"]], [0, 0.57, 0.10], atol=1e-12)
    np.testing.assert_allclose(J[idx["wristL"]], [0.04 + 0.17 + 0.51, 0.46, 0], atol=1e-12)
    np.testing.assert_allclose(J[idx["wristR"]], [-0.72, 0.46, 0], atol=1e-12)


def test_fk_hand_computed_elbow_bend():
    # 90 degree bend at the left elbow about +y folds the forearm to -z
    rots = np.tile(np.eye(3), (K.N_POSE, 1, 1))
    rots[K.POSE_JOINTS.index("elbowL")] = K.axis_angle_matrix([0, 1, 0], math.pi / 2)
    J = K.fk_from_matrices(rots, K.Skeleton())
    w = J[K.OUTPUT_JOINTS.index("wristL")]
    np.testing.assert_allclose(w, [0.04 + 0.17 + 0.26, 0.46, -0.25], atol=1e-12)


def test_torch_fk_matches_numpy_with_per_sample_offsets():
    rng = np.random.default_rng(2)
    R = K.random_rotations(4 * K.N_POSE, rng).reshape(4, K.N_POSE, 3, 3)
    pose = K.rot6d_from_matrix(R).reshape(4, -1)
    arms = np.array([0.53, 0.566, 0.60, 0.65])
    got = K.forward_kinematics_torch(torch.as_tensor(pose), torch.as_tensor(K.arm_offsets(arms)))
    for b, a in enumerate(arms):
        np.testing.assert_allclose(got[b].numpy(), K.forward_kinematics(pose[b], K.Skeleton.from_arm_length(a)),
                                   atol=1e-13)


def test_mirror_is_involution_and_commutes_with_fk():
    rng = np.random.default_rng(3)
    R = K.random_rotations(K.N_POSE, rng)
    skel = K.Skeleton()
    np.testing.assert_allclose(K.mirror_pose_matrices(K.mirror_pose_matrices(R)), R, atol=1e-15)
    np.testing.assert_allclose(K.fk_from_matrices(K.mirror_pose_matrices(R), skel),
                               K.mirror_positions(K.fk_from_matrices(R, skel)), atol=1e-13)


def test_skeleton_validation_and_roundtrip(tmp_path):
    s = K.Skeleton.from_arm_length(0.6)
    s.validate()
    off = dict(s.offsets)
    assert np.linalg.norm(off["elbowL"]) + np.linalg.norm(off["wristL"]) == pytest.approx(0.6)
    s.save(tmp_path / "s.json")
    assert K.Skeleton.load(tmp_path / "s.json") == s
    with pytest.raises(DataError):
        K.Skeleton(edges=K.TREE_EDGES + (("pelvis", "spine1"),)).validate()


@given(st.integers(1, 20), st.integers(0, 2**31 - 1))
def test_mpjpe_definition(n, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(n, 8, 3)), rng.normal(size=(n, 8, 3))
    ref = sum(math.dist(a[i, j], b[i, j]) for i in range(n) for j in range(8)) / (8 * n) * 100
    assert K.mpjpe(a, b) == pytest.approx(ref, rel=1e-12)
    assert K.per_joint_error_cm(a, b).mean() == pytest.approx(ref, rel=1e-12)
