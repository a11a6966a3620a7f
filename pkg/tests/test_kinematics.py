"""Skeleton layout, Rodrigues map, FK chain and camera model."""

import math

import numpy as np
import pytest

import armhand.tensor as T
from armhand.kinematics import (
    ARM_JOINT_COUNT,
    HAND_JOINT_COUNT,
    JOINT_COUNT,
    Camera,
    DegenerateBoneError,
    Pose,
    ProjectionError,
    Skeleton,
    SkeletonError,
    arm_direction_vectors,
    axis_angle_to_matrix,
    canonicalize_axis_angle,
    forward_kinematics,
    project,
    rotation_geodesic_angle,
)
from armhand.tensor import Tensor

from fdcheck import check_gradients


@pytest.fixture(scope="module")
def skel():
    return Skeleton.default()


@pytest.fixture
def rng():
    return np.random.default_rng(7321)


class TestSkeleton:
    def test_layout_counts(self, skel):
        assert skel.joint_count == JOINT_COUNT
        assert len(skel.arm_joint_indices) == ARM_JOINT_COUNT
        assert len(skel.hand_joint_indices) == HAND_JOINT_COUNT
        overlap = set(skel.arm_joint_indices) & set(skel.hand_joint_indices)
        assert not overlap
        assert len(skel.left_hand_indices) == len(skel.right_hand_indices) == 21

    def test_topological_order(self, skel):
        assert np.all(skel.parents < np.arange(JOINT_COUNT))

    def test_finger_offsets_nonzero(self, skel):
        norms = np.linalg.norm(skel.offsets[skel.hand_joint_indices], axis=-1)
        assert np.all(norms > 0.0)

    def test_yaml_round_trip(self, skel, tmp_path):
        import yaml
        spec = {
            "name": skel.name,
            "joints": [
                {"name": n,
                 "parent": None if skel.parents[i] < 0 else skel.names[skel.parents[i]],
                 "offset_m": skel.offsets[i].tolist()}
                for i, n in enumerate(skel.names)
            ],
            "arm_joints": [skel.names[i] for i in skel.arm_joint_indices],
        }
        path = tmp_path / "skel.yaml"
        path.write_text(yaml.safe_dump(spec))
        loaded = Skeleton.from_yaml(path)
        assert loaded.fingerprint() == skel.fingerprint()

    def test_rejects_bad_parent_order(self, skel):
        parents = skel.parents.copy()
        parents[1] = 5  # child before parent
        with pytest.raises(SkeletonError):
            Skeleton(skel.names, parents, skel.offsets, skel.arm_joint_indices)

    def test_pose_shape_check(self):
        with pytest.raises(SkeletonError):
            Pose(np.zeros((10, 3)))


class TestAxisAngle:
    def test_zero_vector_is_identity(self):
        np.testing.assert_array_equal(axis_angle_to_matrix(np.zeros(3)), np.eye(3))

    def test_quarter_turn(self):
        r = np.array([0.0, 0.0, np.pi / 2.0])
        out = axis_angle_to_matrix(r) @ np.array([1.0, 0.0, 0.0])
        np.testing.assert_allclose(out, [0.0, 1.0, 0.0], atol=1e-12)

    def test_orthonormality(self, rng):
        r = rng.normal(size=(200, 3)) * 2.0
        mats = axis_angle_to_matrix(r)
        eye = mats @ mats.swapaxes(-1, -2)
        np.testing.assert_allclose(eye, np.broadcast_to(np.eye(3), eye.shape), atol=1e-12)
        np.testing.assert_allclose(np.linalg.det(mats), 1.0, atol=1e-12)

    def test_gradients(self, rng):
        w = rng.normal(size=(4, 3, 3))
        r = rng.normal(size=(4, 3))
        check_gradients(lambda x: (axis_angle_to_matrix(x) * Tensor(w)).sum(), [r])

    def test_gradients_near_zero(self, rng):
        # inside the series branch and just outside it
        for scale in (1e-7, 5e-5, 1e-4):
            r = rng.normal(size=(3, 3))
            r = r / np.linalg.norm(r, axis=-1, keepdims=True) * scale
            w = rng.normal(size=(3, 3, 3))
            check_gradients(lambda x: (axis_angle_to_matrix(x) * Tensor(w)).sum(), [r])

    def test_canonicalize_bounds_magnitude(self, rng):
        r = rng.normal(size=(100, 3)) * 5.0
        canon = canonicalize_axis_angle(r)
        assert np.all(np.linalg.norm(canon, axis=-1) <= np.pi + 1e-12)
        # same rotation matrix before and after
        np.testing.assert_allclose(
            axis_angle_to_matrix(r), axis_angle_to_matrix(canon), atol=1e-10)

    def test_geodesic_angle(self):
        r = np.array([0.4, -0.2, 0.9])
        assert rotation_geodesic_angle(r, r) < 1e-7
        a = np.array([0.0, 0.0, 0.5])
        b = np.array([0.0, 0.0, 1.25])
        np.testing.assert_allclose(rotation_geodesic_angle(a, b), 0.75, atol=1e-10)


class TestForwardKinematics:
    def test_identity_pose_accumulates_offsets(self, skel):
        pos = forward_kinematics(skel, np.zeros((JOINT_COUNT, 3)))
        expected = np.zeros((JOINT_COUNT, 3))
        for j in range(JOINT_COUNT):
            p = skel.parents[j]
            expected[j] = skel.offsets[j] + (expected[p] if p >= 0 else 0.0)
        np.testing.assert_allclose(pos, expected, atol=1e-12)

    def test_two_link_elbow_oracle(self, skel):
        """Wrist position from plane trigonometry across 1000 bend angles."""
        names = list(skel.names)
        i_sh, i_el, i_wr = names.index("right_shoulder"), names.index("right_elbow"), names.index("right_wrist")
        upper = skel.offsets[i_el][0]
        fore = skel.offsets[i_wr][0]
        shoulder = skel.offsets[i_sh]
        rng = np.random.default_rng(99)
        angles = rng.uniform(-np.pi, np.pi, size=1000)
        for phi in angles:
            rot = np.zeros((JOINT_COUNT, 3))
            rot[i_el] = [0.0, 0.0, phi]  # bend about +z
            pos = forward_kinematics(skel, rot)
            elbow = shoulder + np.array([upper, 0.0, 0.0])
            wrist = elbow + np.array([fore * math.cos(phi), fore * math.sin(phi), 0.0])
            assert np.max(np.abs(pos[i_el] - elbow)) < 1e-10
            assert np.max(np.abs(pos[i_wr] - wrist)) < 1e-10

    def test_rigid_rotation_preserves_distances(self, skel, rng):
        rot = np.zeros((JOINT_COUNT, 3))
        base = forward_kinematics(skel, rot)
        # same whole-body rotation applied at both chain roots
        roots = [j for j in range(JOINT_COUNT) if skel.parents[j] < 0]
        spin = rng.normal(size=3)
        rot2 = rot.copy()
        for j in roots:
            rot2[j] = spin
        moved = forward_kinematics(skel, rot2)

        def pdist(p):
            d = p[:, None, :] - p[None, :, :]
            return np.sqrt((d * d).sum(-1))

        # distances within each chain are preserved exactly (roots share the
        # same global offset so the whole figure moves rigidly about them)
        half = JOINT_COUNT // 2
        for block in (slice(0, half), slice(half, JOINT_COUNT)):
            np.testing.assert_allclose(pdist(base[block]), pdist(moved[block]), atol=1e-10)

    def test_translation_equivariance(self, skel, rng):
        rot = rng.normal(size=(JOINT_COUNT, 3)) * 0.3
        shift = np.array([0.3, -1.2, 2.0])
        a = forward_kinematics(skel, rot)
        b = forward_kinematics(skel, rot, root_position=shift)
        np.testing.assert_allclose(b, a + shift, atol=1e-12)

    def test_bone_lengths_pose_invariant(self, skel, rng):
        rot = rng.normal(size=(JOINT_COUNT, 3))
        pos = forward_kinematics(skel, rot)
        for j in range(JOINT_COUNT):
            p = skel.parents[j]
            if p < 0:
                continue
            length = np.linalg.norm(pos[j] - pos[p])
            assert abs(length - np.linalg.norm(skel.offsets[j])) < 1e-10

    def test_batched_matches_single(self, skel, rng):
        rots = rng.normal(size=(2, 5, JOINT_COUNT, 3)) * 0.5
        batched = forward_kinematics(skel, rots)
        for i in range(2):
            for t in range(5):
                single = forward_kinematics(skel, rots[i, t])
                np.testing.assert_allclose(batched[i, t], single, atol=1e-12)

    def test_gradients_through_chain(self, skel, rng):
        """FD-check FK gradients w.r.t. two joints' rotations (one probe)."""
        base = rng.normal(size=(JOINT_COUNT, 3)) * 0.4
        w = rng.normal(size=(JOINT_COUNT, 3))
        j_a, j_b = 25, 27  # right elbow and right palm

        def build(ra, rb):
            parts = [Tensor(base[:j_a]), ra, Tensor(base[j_a + 1:j_b]), rb,
                     Tensor(base[j_b + 1:])]
            rot = T.concat(parts, axis=0)
            pos = forward_kinematics(skel, rot)
            return (pos * Tensor(w)).sum()

        check_gradients(build, [base[j_a:j_a + 1], base[j_b:j_b + 1]])


class TestCamera:
    def test_optical_axis_hits_principal_point(self):
        cam = Camera()
        np.testing.assert_allclose(project(cam, np.array([0.0, 0.0, 3.0])),
                                   [cam.cx, cam.cy], atol=1e-12)

    def test_closed_form_pinhole(self):
        cam = Camera(fx=1000.0, fy=1000.0, cx=0.0, cy=0.0)
        np.testing.assert_allclose(project(cam, np.array([1.0, 0.0, 2.0])),
                                   [500.0, 0.0], atol=1e-12)

    def test_depth_doubling_halves_offset(self, rng):
        cam = Camera(cx=0.0, cy=0.0)
        p = np.array([0.3, -0.2, 1.7])
        near = project(cam, p)
        far = project(cam, p * np.array([1.0, 1.0, 2.0]))
        np.testing.assert_allclose(far, near / 2.0, atol=1e-12)

    def test_nonpositive_depth_raises_with_index(self):
        cam = Camera()
        pts = np.array([[0.0, 0.0, 2.0], [0.0, 0.0, -0.5]])
        with pytest.raises(ProjectionError) as exc:
            project(cam, pts)
        assert exc.value.point_index == 1

    def test_extrinsics_applied(self):
        # camera shifted back 1m along z: depth increases by 1
        cam = Camera(cx=0.0, cy=0.0, translation=np.array([0.0, 0.0, 1.0]))
        np.testing.assert_allclose(project(cam, np.array([1.0, 0.0, 1.0])),
                                   [500.0, 0.0], atol=1e-12)


class TestDirectionVectors:
    def test_straight_arm(self, skel):
        pos = forward_kinematics(skel, np.zeros((JOINT_COUNT, 3)))
        dirs = arm_direction_vectors(pos, skel)
        np.testing.assert_allclose(dirs[0], [-1.0, 0.0, 0.0], atol=1e-12)
        np.testing.assert_allclose(dirs[1], [-1.0, 0.0, 0.0], atol=1e-12)
        np.testing.assert_allclose(dirs[2], [1.0, 0.0, 0.0], atol=1e-12)
        np.testing.assert_allclose(dirs[3], [1.0, 0.0, 0.0], atol=1e-12)

    def test_scale_invariance(self, skel, rng):
        rot = rng.normal(size=(JOINT_COUNT, 3)) * 0.5
        pos = forward_kinematics(skel, rot)
        np.testing.assert_allclose(arm_direction_vectors(pos, skel),
                                   arm_direction_vectors(pos * 2.0, skel), atol=1e-12)
        np.testing.assert_allclose(arm_direction_vectors(pos, skel),
                                   arm_direction_vectors(pos + 3.3, skel), atol=1e-12)

    def test_right_angle_elbow(self, skel):
        names = list(skel.names)
        rot = np.zeros((JOINT_COUNT, 3))
        rot[names.index("right_elbow")] = [0.0, 0.0, np.pi / 2.0]
        dirs = arm_direction_vectors(forward_kinematics(skel, rot), skel)
        assert abs(float(dirs[2] @ dirs[3])) < 1e-12

    def test_degenerate_bone_raises(self, skel):
        pos = np.zeros((JOINT_COUNT, 3))
        with pytest.raises(DegenerateBoneError):
            arm_direction_vectors(pos, skel)
