import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drivedistill.geometry import (
    BevGeometry,
    CameraModel,
    KeypointSet,
    Pose2D,
    chamfer_distance,
    default_rig,
    extract_keypoints,
    format_rig,
    ipm_project,
    normalize_angle,
    parse_rig,
    spatial_soft_argmax,
)


def random_camera(rng):
    return CameraModel.from_mount(
        yaw_deg=rng.uniform(-90, 90),
        pitch_deg=rng.uniform(3, 20),
        position=(rng.uniform(0.5, 2.0), rng.uniform(-0.5, 0.5), rng.uniform(1.2, 2.2)),
        image_size=(480, 270),
        fov_deg=rng.uniform(50, 80),
    )


class TestPose:
    def test_yaw_normalized(self):
        assert Pose2D(0, 0, 3 * math.pi).yaw == pytest.approx(math.pi)
        assert Pose2D(0, 0, -math.pi).yaw == pytest.approx(math.pi)

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            Pose2D(float("nan"), 0, 0)

    @given(st.floats(-50, 50), st.floats(-50, 50), st.floats(-10, 10))
    def test_local_world_roundtrip(self, x, y, yaw):
        pose = Pose2D(1.5, -2.0, yaw)
        lx, ly = pose.transform_to_local(x, y)
        wx, wy = pose.transform_to_world(lx, ly)
        assert wx == pytest.approx(x, abs=1e-9)
        assert wy == pytest.approx(y, abs=1e-9)

    def test_normalize_angle_range(self):
        for a in np.linspace(-20, 20, 401):
            n = normalize_angle(float(a))
            assert -math.pi < n <= math.pi


class TestCameraModel:
    def test_rotation_is_special_orthogonal(self):
        cam = CameraModel.from_mount(-60.0)
        r = cam.rotation
        assert np.allclose(r @ r.T, np.eye(3), atol=1e-12)
        assert np.linalg.det(r) == pytest.approx(1.0)

    def test_rejects_bad_rotation(self):
        cam = CameraModel.from_mount(0.0)
        bad = cam.rotation.copy()
        bad[0, 0] += 0.1
        with pytest.raises(ValueError):
            CameraModel(cam.intrinsics, bad, cam.translation, 0.0, cam.image_size, cam.fov)

    def test_rejects_negative_focal(self):
        cam = CameraModel.from_mount(0.0)
        k = cam.intrinsics.copy()
        k[0, 0] = -1.0
        with pytest.raises(ValueError):
            CameraModel(k, cam.rotation, cam.translation, 0.0, cam.image_size, cam.fov)


class TestIpmProject:
    def test_optical_axis_hits_image_center(self):
        # The 0-yaw camera is pitched down; the ground point on its optical
        # axis must land exactly on the principal point.
        cam = CameraModel.from_mount(0.0, pitch_deg=8.0, position=(1.2, 0.0, 1.6))
        x_axis = 1.2 + 1.6 / math.tan(math.radians(8.0))
        grid = BevGeometry()
        cell = grid.ego_to_cell(x_axis, 0.0)
        u, v, valid = ipm_project(cell, cam, grid=grid)
        assert valid
        assert u == pytest.approx(240.0, abs=1e-9)
        assert v == pytest.approx(135.0, abs=1e-9)

    def test_point_behind_camera_invalid(self):
        cam = CameraModel.from_mount(0.0)
        grid = BevGeometry()
        cell = grid.ego_to_cell(-10.0, 0.0)  # behind the ego
        _, _, valid = ipm_project(cell, cam, grid=grid)
        assert not valid

    def test_matches_full_projection_matrix_oracle(self):
        # Oracle builds the explicit 3x4 homogeneous projection and divides.
        rng = np.random.default_rng(7)
        grid = BevGeometry()
        for trial in range(25):
            cam = random_camera(rng)
            scale = rng.uniform(0.5, 2.0)
            m = scale * cam.intrinsics @ np.hstack(
                [cam.rotation, (-cam.rotation @ cam.translation).reshape(3, 1)]
            )
            cells = rng.uniform(0, 90, size=(5, 2))
            for row, col in cells:
                u, v, valid = ipm_project((row, col), cam, scale=scale, grid=grid)
                ex, ey = grid.cell_to_ego(row, col)
                p = m @ np.array([ex, ey, 0.0, 1.0])
                if abs(p[2]) < 1e-12:
                    assert not valid
                    continue
                ou, ov = p[0] / p[2], p[1] / p[2]
                if valid:
                    assert u == pytest.approx(ou, abs=1e-9)
                    assert v == pytest.approx(ov, abs=1e-9)
                else:
                    depth = (cam.rotation @ (np.array([ex, ey, 0.0]) - cam.translation))[2]
                    inside = 0 <= ou < 480 and 0 <= ov < 270
                    assert depth <= 0.1 or not inside

    def test_yaw_equivariance(self):
        # Rotating the queried point and the camera mount by the same yaw
        # leaves the pixel unchanged.
        rng = np.random.default_rng(3)
        grid = BevGeometry()
        for _ in range(10):
            base_yaw = rng.uniform(-45, 45)
            delta = rng.uniform(-120, 120)
            pos = np.array([rng.uniform(0.5, 2.0), rng.uniform(-0.5, 0.5), 1.6])
            cam_a = CameraModel.from_mount(base_yaw, position=tuple(pos))
            rad = math.radians(delta)
            c, s = math.cos(rad), math.sin(rad)
            rot = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])
            cam_b = CameraModel.from_mount(base_yaw + delta, position=tuple(rot @ pos))
            pt = np.array([rng.uniform(4, 20), rng.uniform(-5, 5)])
            ua, va, valid_a = ipm_project(grid.ego_to_cell(*pt), cam_a, grid=grid)
            pt_rot = rot[:2, :2] @ pt
            ub, vb, valid_b = ipm_project(grid.ego_to_cell(*pt_rot), cam_b, grid=grid)
            assert valid_a == valid_b
            if valid_a:
                assert ua == pytest.approx(ub, abs=1e-8)
                assert va == pytest.approx(vb, abs=1e-8)

    def test_rejects_nonpositive_scale(self):
        with pytest.raises(ValueError):
            ipm_project((10, 10), CameraModel.from_mount(0.0), scale=0.0)


class TestSpatialSoftArgmax:
    def test_one_hot_recovers_cell(self):
        grid = np.zeros((9, 7))
        grid[3, 5] = 1.0
        r, c, w = spatial_soft_argmax(grid, threshold=0.5)
        assert (r, c, w) == (3.0, 5.0, 1.0)

    def test_uniform_grid_gives_centroid(self):
        grid = np.full((8, 8), 2.0)
        r, c, w = spatial_soft_argmax(grid)
        assert r == pytest.approx(3.5)
        assert c == pytest.approx(3.5)
        assert w == 1.0

    def test_no_activation_falls_back_to_center(self):
        grid = np.full((5, 5), -3.0)
        r, c, w = spatial_soft_argmax(grid)
        assert (r, c, w) == (2.0, 2.0, 0.0)

    def test_matches_explicit_summation_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(25):
            grid = rng.normal(0.4, 1.0, size=(8, 8))
            temp = rng.uniform(0.5, 3.0)
            r, c, w = spatial_soft_argmax(grid, threshold=0.5, temperature=temp)
            # Oracle: explicit softmax-weighted sum over above-threshold cells.
            mask = 1.0 / (1.0 + np.exp(-grid)) > 0.5
            if not mask.any():
                assert w == 0.0
                continue
            e = np.where(mask, np.exp(grid / temp), 0.0)
            p = e / e.sum()
            orr = sum(p[i, j] * i for i in range(8) for j in range(8))
            occ = sum(p[i, j] * j for i in range(8) for j in range(8))
            assert r == pytest.approx(orr, abs=1e-9)
            assert c == pytest.approx(occ, abs=1e-9)

    @given(st.floats(-2.0, 2.0))
    @settings(max_examples=30, deadline=None)
    def test_shift_invariance_with_shifted_threshold(self, shift):
        rng = np.random.default_rng(5)
        grid = rng.normal(0.0, 1.5, size=(6, 6))
        base_cut = 0.5
        r0, c0, w0 = spatial_soft_argmax(grid, threshold=base_cut)
        shifted_cut = 1.0 / (1.0 + math.exp(-(math.log(base_cut / (1 - base_cut)) + shift)))
        if not 0.0 < shifted_cut < 1.0:
            return
        r1, c1, w1 = spatial_soft_argmax(grid + shift, threshold=shifted_cut)
        assert w0 == w1
        assert r0 == pytest.approx(r1, abs=1e-9)
        assert c0 == pytest.approx(c1, abs=1e-9)

    def test_non_finite_names_channel(self):
        grid = np.zeros((4, 4))
        grid[1, 1] = np.inf
        with pytest.raises(ValueError, match="lane_occ"):
            spatial_soft_argmax(grid, channel_name="lane_occ")

    def test_extract_keypoints_orders_by_response(self):
        fm = np.zeros((12, 8, 8))
        for ch in range(12):
            fm[ch, ch % 8, (ch * 3) % 8] = 12.0 - ch
        kps = extract_keypoints(fm, n_keypoints=10)
        assert len(kps) == 10
        assert kps.points[0] == pytest.approx([0.0, 0.0])
        assert np.all(kps.weights == 1.0)


class TestChamfer:
    def test_identical_sets_zero(self):
        pts = np.array([[0.0, 0.0], [2.0, 3.0], [5.0, 1.0]])
        assert chamfer_distance(pts, pts.copy()) == 0.0

    def test_single_pair(self):
        assert chamfer_distance(np.array([[0.0, 0.0]]), np.array([[3.0, 4.0]])) == 50.0

    def test_matches_double_loop_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(25):
            a = rng.normal(size=(10, 2)) * 5
            b = rng.normal(size=(10, 2)) * 5
            got = chamfer_distance(a, b)
            want = 0.0
            for p in a:
                want += min(((p - q) ** 2).sum() for q in b)
            for q in b:
                want += min(((p - q) ** 2).sum() for p in a)
            assert got == pytest.approx(want, abs=1e-9)

    @given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 10_000))
    @settings(max_examples=40, deadline=None)
    def test_symmetry(self, na, nb, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=(na, 2)), rng.normal(size=(nb, 2))
        assert chamfer_distance(a, b) == pytest.approx(chamfer_distance(b, a), abs=1e-12)

    def test_zero_iff_equal_multisets(self):
        a = np.array([[0.0, 0.0], [1.0, 1.0]])
        b = np.array([[1.0, 1.0], [0.0, 0.0]])
        assert chamfer_distance(a, b) == 0.0
        c = np.array([[0.0, 0.0], [1.0, 1.0 + 1e-3]])
        assert chamfer_distance(a, c) > 1e-9

    def test_empty_set_raises(self):
        with pytest.raises(ValueError):
            chamfer_distance(np.zeros((0, 2)), np.array([[1.0, 1.0]]))

    def test_keypointset_inputs(self):
        a = KeypointSet(np.array([[1.0, 2.0]]), np.array([1.0]))
        b = KeypointSet(np.array([[1.0, 2.0]]), np.array([1.0]))
        assert chamfer_distance(a, b) == 0.0


class TestRigConfig:
    def test_default_rig_yaws(self):
        rig = default_rig()
        assert len(rig) == 3
        assert [round(math.degrees(c.yaw_offset)) for c in rig] == [0, -60, 60]
        assert all(c.image_size == (480, 270) for c in rig)
        assert all(c.fov == 64.0 for c in rig)

    def test_roundtrip(self):
        rig = default_rig()
        again = parse_rig(format_rig(rig))
        for a, b in zip(rig, again):
            assert np.allclose(a.intrinsics, b.intrinsics)
            assert np.allclose(a.rotation, b.rotation, atol=1e-12)
            assert np.allclose(a.translation, b.translation)

    def test_parse_custom_block(self):
        text = """
        # two-camera rig
        camera front
          yaw_deg 0
          width 64
          height 48
          fov_deg 90
          pos 1.0 0.0 1.5
        camera left
          yaw_deg -45
        """
        rig = parse_rig(text)
        assert len(rig) == 2
        assert rig[0].image_size == (64, 48)
        assert rig[0].intrinsics[0, 0] == pytest.approx(32.0)

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError, match="unknown key"):
            parse_rig("camera a\n  zoom 3\n")

    def test_keys_outside_block_rejected(self):
        with pytest.raises(ValueError):
            parse_rig("yaw_deg 10\n")
