import numpy as np
import pytest

from handfit.errors import ConfigError, FileFormatError
from handfit.geometry import RigidPose, quat_from_axis_angle, unit_cube
from handfit.sensor import (
    BACKGROUND,
    BoundaryPlaneSet,
    CameraIntrinsics,
    DepthImage,
    PointCloud,
    apply_noise,
    boundary_planes,
    deproject,
    five_finger_detector,
    project_points,
    read_depth_sequence,
    read_ground_truth,
    render_depth,
    voxel_subsample,
    write_depth_sequence,
    write_ground_truth,
)

from oracle import exact_surface_distance

CAM = CameraIntrinsics.default()


def blank_image(cam=CAM):
    return DepthImage(cam, np.full((cam.height, cam.width), BACKGROUND))


# ---------------------------------------------------------------------------
# deprojection
# ---------------------------------------------------------------------------

def test_principal_point_deprojects_to_axis():
    img = blank_image()
    img.depth[60, 80] = 1.0  # (cx, cy)
    cloud = deproject(img)
    np.testing.assert_allclose(cloud.points, [[0.0, 0.0, 1.0]], atol=1e-12)


def test_all_background_gives_empty_cloud():
    assert len(deproject(blank_image())) == 0


def test_project_deproject_roundtrip():
    rng = np.random.default_rng(2)
    img = blank_image()
    sel = rng.uniform(size=img.depth.shape) < 0.1
    img.depth[sel] = rng.uniform(CAM.near, CAM.far, sel.sum())
    cloud = deproject(img)
    uv = project_points(CAM, cloud.points)
    v, u = np.nonzero(sel)
    np.testing.assert_allclose(uv[:, 0], u, atol=1e-9)
    np.testing.assert_allclose(uv[:, 1], v, atol=1e-9)


def test_render_deproject_points_lie_on_surface():
    cube = unit_cube(0.2)
    pose = RigidPose(np.array([0.05, -0.02, 0.8]),
                     quat_from_axis_angle(np.array([0.3, 1.0, 0.0]), 0.5))
    img = render_depth([(cube, pose)], CAM)
    cloud = deproject(img)
    assert len(cloud) > 100
    worst = max(exact_surface_distance(cube, pose, p) for p in cloud.points)
    assert worst < 1e-4


# ---------------------------------------------------------------------------
# voxel subsampling
# ---------------------------------------------------------------------------

def test_points_in_one_voxel_average():
    pts = np.array([[0.011, 0.012, 0.013],
                    [0.012, 0.011, 0.014],
                    [0.013, 0.013, 0.011],
                    [0.014, 0.012, 0.012]])
    out = voxel_subsample(PointCloud(pts), 0.01)
    assert len(out) == 1
    np.testing.assert_allclose(out.points[0], pts.mean(axis=0), atol=1e-15)


def test_distinct_voxels_keep_points():
    pts = np.array([[0.005, 0.005, 0.005],
                    [0.105, 0.005, 0.005],
                    [0.005, 0.105, 0.005]])
    out = voxel_subsample(PointCloud(pts), 0.01)
    assert sorted(map(tuple, out.points)) == sorted(map(tuple, pts))


def test_voxel_histogram_oracle():
    rng = np.random.default_rng(5)
    pts = rng.uniform(0.0, 0.1, size=(10_000, 3))
    size = 0.01
    out = voxel_subsample(PointCloud(pts), size)
    keys = np.floor(pts / size).astype(np.int64)
    occupied = len(np.unique(keys, axis=0))
    assert len(out) == occupied <= 1000
    # every output point inside its voxel's bounds
    okeys = np.floor(out.points / size).astype(np.int64)
    lo = okeys * size
    assert np.all(out.points >= lo - 1e-12) and np.all(out.points <= lo + size + 1e-12)


def test_voxel_output_not_larger_than_input():
    rng = np.random.default_rng(6)
    pts = rng.normal(0.0, 0.05, size=(500, 3))
    out = voxel_subsample(PointCloud(pts), 0.02)
    assert len(out) <= 500


def test_voxel_subsample_is_permutation_invariant():
    rng = np.random.default_rng(7)
    pts = rng.uniform(-0.2, 0.2, size=(2000, 3))
    a = voxel_subsample(PointCloud(pts), 0.015)
    b = voxel_subsample(PointCloud(pts[rng.permutation(2000)]), 0.015)
    np.testing.assert_array_equal(a.points, b.points)  # bit-identical


def test_voxel_rejects_bad_size():
    with pytest.raises(ConfigError):
        voxel_subsample(PointCloud(np.zeros((1, 3))), 0.0)


# ---------------------------------------------------------------------------
# boundary planes
# ---------------------------------------------------------------------------

def square_cloud(z=0.5, half=0.1, n=5):
    xs = np.linspace(-half, half, n)
    g = np.stack(np.meshgrid(xs, xs), axis=-1).reshape(-1, 2)
    return PointCloud(np.column_stack([g, np.full(len(g), z)]))


def test_square_gives_four_sides_and_near_plane():
    planes = boundary_planes(square_cloud())
    assert len(planes) == 5
    # near plane is the last one, offset just below the cloud depth
    np.testing.assert_allclose(planes.normals[-1], [0.0, 0.0, 1.0], atol=1e-12)
    assert planes.offsets[-1] == pytest.approx(0.49, abs=1e-9)


def test_all_cloud_points_satisfy_all_planes():
    rng = np.random.default_rng(11)
    for _ in range(10):
        pts = rng.uniform([-0.2, -0.2, 0.3], [0.2, 0.2, 0.9], size=(50, 3))
        cloud = PointCloud(pts)
        planes = boundary_planes(cloud)
        assert len(planes) >= 4
        slack = cloud.points @ planes.normals.T - planes.offsets[None, :]
        assert slack.min() > -1e-6


def test_probe_outside_silhouette_violates_a_plane():
    planes = boundary_planes(square_cloud())
    probe = np.array([1.0, 0.0, 0.5])  # far to the side at the same depth
    slack = planes.normals @ probe - planes.offsets
    assert slack.min() < -1e-3


def test_degenerate_clouds_give_empty_set():
    assert len(boundary_planes(PointCloud(np.zeros((0, 3))))) == 0
    two = PointCloud(np.array([[0.0, 0.0, 0.5], [0.1, 0.0, 0.5]]))
    assert len(boundary_planes(two)) == 0
    collinear = PointCloud(np.array([[x, 0.0, 0.5] for x in np.linspace(-0.1, 0.1, 7)]))
    assert len(boundary_planes(collinear)) == 0


def test_boundary_planes_pass_through_camera():
    planes = boundary_planes(square_cloud())
    assert np.all(planes.offsets[:-1] == 0.0)  # side planes contain the origin


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def test_center_pixel_sees_front_face():
    cube = unit_cube(0.2)
    img = render_depth([(cube, RigidPose(np.array([0.0, 0.0, 1.0]), np.array([1.0, 0, 0, 0.0])))], CAM)
    assert img.depth[60, 80] == pytest.approx(0.9, abs=1e-12)


def test_empty_scene_renders_background():
    img = render_depth([], CAM)
    assert np.all(img.depth == BACKGROUND)


def test_render_matches_ray_march_oracle():
    small = CameraIntrinsics(32, 32, 40.0, 40.0, 16.0, 16.0, 0.05, 2.0)
    cube = unit_cube(0.25)
    pose_a = RigidPose(np.array([0.05, 0.0, 0.7]),
                       quat_from_axis_angle(np.array([1.0, 0.4, 0.2]), 0.6))
    pose_b = RigidPose(np.array([-0.06, 0.04, 0.85]),
                       quat_from_axis_angle(np.array([0.0, 1.0, 0.0]), 0.3))
    shapes = [(cube, pose_a), (cube, pose_b)]
    img = render_depth(shapes, small)

    posed = [poly.posed(pose) for poly, pose in shapes]
    ts = np.arange(0.3, 1.5, 5e-4)
    for v in range(32):
        for u in range(32):
            d = np.array([(u - 16.0) / 40.0, (v - 16.0) / 40.0, 1.0])
            pts = ts[:, None] * d[None, :]
            entry = np.inf
            for _, normals, offsets in posed:
                inside = np.all(pts @ normals.T <= offsets[None, :], axis=1)
                hits = np.nonzero(inside)[0]
                if len(hits):
                    entry = min(entry, ts[hits[0]])
            if np.isfinite(entry):
                assert img.depth[v, u] == pytest.approx(entry, abs=1e-3)
            elif img.depth[v, u] != BACKGROUND:
                # ray-march grid may straddle a silhouette edge; the renderer
                # may legitimately clip a sliver the march misses
                assert img.depth[v, u] > 0.3


def test_nearer_body_wins_overlap():
    cube = unit_cube(0.2)
    near_pose = RigidPose(np.array([0.0, 0.0, 0.6]), np.array([1.0, 0, 0, 0.0]))
    far_pose = RigidPose(np.array([0.0, 0.0, 1.0]), np.array([1.0, 0, 0, 0.0]))
    img = render_depth([(cube, far_pose), (cube, near_pose)], CAM)
    assert img.depth[60, 80] == pytest.approx(0.5, abs=1e-12)


# ---------------------------------------------------------------------------
# noise
# ---------------------------------------------------------------------------

def noisy_base():
    img = blank_image()
    img.depth[30:90, 40:120] = 0.6
    return img


def test_noise_is_seed_deterministic():
    a = apply_noise(noisy_base(), np.random.default_rng(42), sigma=0.005,
                    dropout=0.1, outlier_prob=0.05, outlier_range=0.2)
    b = apply_noise(noisy_base(), np.random.default_rng(42), sigma=0.005,
                    dropout=0.1, outlier_prob=0.05, outlier_range=0.2)
    np.testing.assert_array_equal(a.depth, b.depth)


def test_zero_noise_is_identity():
    img = noisy_base()
    out = apply_noise(img, np.random.default_rng(1))
    np.testing.assert_array_equal(out.depth, img.depth)


def test_dropout_only_removes_pixels():
    img = noisy_base()
    out = apply_noise(img, np.random.default_rng(3), dropout=0.3)
    fg_in = img.depth != BACKGROUND
    fg_out = out.depth != BACKGROUND
    assert fg_out.sum() < fg_in.sum()
    assert not np.any(fg_out & ~fg_in)
    np.testing.assert_array_equal(out.depth[fg_out], img.depth[fg_out])


def test_noisy_depths_stay_in_range():
    out = apply_noise(noisy_base(), np.random.default_rng(4), sigma=0.05,
                      outlier_prob=0.3, outlier_range=3.0)
    fg = out.depth != BACKGROUND
    assert np.all(out.depth[fg] >= CAM.near) and np.all(out.depth[fg] <= CAM.far)


# ---------------------------------------------------------------------------
# five-finger detector
# ---------------------------------------------------------------------------

def bars_image(n_bars=5, bar_top=5, bar_bottom=30, base_bottom=50, depth=0.5):
    cam = CameraIntrinsics(64, 64, 80.0, 80.0, 32.0, 32.0, 0.05, 2.0)
    img = DepthImage(cam, np.full((64, 64), BACKGROUND))
    cols = [5 + 10 * i for i in range(n_bars)]
    for c in cols:
        img.depth[bar_top:bar_bottom, c : c + 4] = depth
    img.depth[bar_bottom:base_bottom, 3 : cols[-1] + 5] = depth
    return img, cols


def test_five_bars_fire_detector():
    img, cols = bars_image()
    tips = five_finger_detector(img)
    assert tips is not None and len(tips) == 5
    cam = img.intrinsics
    for tip, c in zip(tips, cols):
        u = c + 1  # middle of a 4-wide bar rounds down
        expect = np.array([(u - cam.cx) * 0.5 / cam.fx, (5 - cam.cy) * 0.5 / cam.fy, 0.5])
        np.testing.assert_allclose(tip, expect, atol=1e-12)


def test_four_bars_do_not_fire():
    img, _ = bars_image(n_bars=4)
    assert five_finger_detector(img) is None


def test_short_bars_do_not_fire():
    img, _ = bars_image(bar_top=25, bar_bottom=30)  # only 5 rows tall
    assert five_finger_detector(img) is None


def test_single_blob_does_not_fire():
    cam = CameraIntrinsics(64, 64, 80.0, 80.0, 32.0, 32.0, 0.05, 2.0)
    img = DepthImage(cam, np.full((64, 64), BACKGROUND))
    img.depth[10:50, 10:50] = 0.4
    assert five_finger_detector(img) is None


def test_blank_image_does_not_fire():
    cam = CameraIntrinsics(64, 64, 80.0, 80.0, 32.0, 32.0, 0.05, 2.0)
    assert five_finger_detector(DepthImage(cam, np.full((64, 64), BACKGROUND))) is None


def test_detector_tolerates_small_gaps():
    img, _ = bars_image()
    img.depth[12:14, :] = BACKGROUND  # cut 2 rows through every bar
    tips = five_finger_detector(img)
    assert tips is not None and len(tips) == 5


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def test_depth_sequence_roundtrip(tmp_path):
    rng = np.random.default_rng(9)
    images = []
    for _ in range(3):
        img = blank_image()
        sel = rng.uniform(size=img.depth.shape) < 0.2
        img.depth[sel] = rng.uniform(0.1, 1.9, sel.sum()).astype(np.float32)
        images.append(img)
    path = tmp_path / "seq.depth"
    write_depth_sequence(path, images, 60.0)
    loaded, rate = read_depth_sequence(path)
    assert rate == 60.0 and len(loaded) == 3
    for a, b in zip(images, loaded):
        np.testing.assert_array_equal(a.depth.astype(np.float32), b.depth.astype(np.float32))
    # near/far recovered from the data
    all_fg = np.concatenate([i.depth[i.depth > 0] for i in images])
    assert loaded[0].intrinsics.near == pytest.approx(all_fg.min().astype(np.float64), rel=1e-6)
    assert loaded[0].intrinsics.far == pytest.approx(all_fg.max().astype(np.float64), rel=1e-6)


def test_depth_sequence_rejects_garbage(tmp_path):
    path = tmp_path / "bad.depth"
    path.write_bytes(b"NOPE" + b"\x00" * 60)
    with pytest.raises(FileFormatError):
        read_depth_sequence(path)
    path.write_bytes(b"\x00\x01")
    with pytest.raises(FileFormatError):
        read_depth_sequence(path)


def test_depth_sequence_rejects_size_mismatch(tmp_path):
    img = blank_image()
    img.depth[0, 0] = 0.5
    path = tmp_path / "trunc.depth"
    write_depth_sequence(path, [img], 30.0)
    data = path.read_bytes()
    path.write_bytes(data[:-8])
    with pytest.raises(FileFormatError):
        read_depth_sequence(path)


def test_ground_truth_roundtrip(tmp_path):
    rng = np.random.default_rng(13)
    frames = []
    for _ in range(2):
        poses = {}
        for name in ("wrist", "palm"):
            q = rng.normal(size=4)
            poses[name] = RigidPose(rng.normal(size=3), q / np.linalg.norm(q))
        frames.append(poses)
    path = tmp_path / "truth.txt"
    write_ground_truth(path, frames)
    loaded = read_ground_truth(path)
    assert len(loaded) == 2
    for orig, back in zip(frames, loaded):
        assert orig.keys() == back.keys()
        for name in orig:
            np.testing.assert_array_equal(orig[name].translation, back[name].translation)
            np.testing.assert_array_equal(orig[name].rotation, back[name].rotation)


def test_ground_truth_rejects_garbage(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("something else\n")
    with pytest.raises(FileFormatError):
        read_ground_truth(path)
