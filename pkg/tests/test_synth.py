import numpy as np
import pytest

from crossloc.detect2d import DogParams, image_keypoints
from crossloc.detect3d import Keypoint3D, MapKeypointParams, PointCloud, map_keypoints
from crossloc.errors import ConfigError, DatasetTooSmall
from crossloc.geometry import PoseSE3, look_at, project, project_points
from crossloc.synth.dataset import (LabeledPair, LabelRules, Submap, build_dataset, label_correspondences,
                                    make_triplets, read_dataset, split_submaps, submap_assignment, write_dataset)
from crossloc.synth.scene import SceneConfig, default_intrinsics, generate_scene, projection_audit

K = default_intrinsics()
SMALL = SceneConfig(n_structures=6, extent=60.0, n_frames=12, seed=2)


@pytest.fixture(scope="module")
def small_scene():
    return generate_scene(SMALL)


def test_scene_is_deterministic(small_scene):
    again = generate_scene(SMALL)
    assert np.array_equal(again.map.points, small_scene.map.points)
    assert np.array_equal(again.map.intensity, small_scene.map.intensity)
    assert all(a == b for (_, a), (_, b) in zip(again.trajectory, small_scene.trajectory))
    assert all(np.array_equal(a, b) for a, b in zip(again.images, small_scene.images))
    assert len(small_scene.images) == len(small_scene.trajectory) == 12


def test_seed_changes_scene(small_scene):
    other = generate_scene(SceneConfig(n_structures=6, extent=60.0, n_frames=2, seed=3))
    assert not np.array_equal(other.map.points[:100], small_scene.map.points[:100])


def test_images_on_8bit_grid(small_scene):
    img = small_scene.images[0]
    assert img.shape == (K.height, K.width)
    np.testing.assert_array_equal(np.round(img * 255) / 255, img)


def test_projection_audit(small_scene):
    assert projection_audit(small_scene, 5) >= 0.95


def test_empty_scene_has_no_keypoints():
    scene = generate_scene(SceneConfig(n_structures=0, extent=60.0, n_frames=2))
    rest, kps, counts = map_keypoints(scene.map, MapKeypointParams())
    assert kps == [] and counts["iss"] == 0


def test_config_validation():
    with pytest.raises(ConfigError):
        SceneConfig(extent=0)
    with pytest.raises(ConfigError):
        SceneConfig(points_per_m2=-1)
    with pytest.raises(ConfigError):
        SceneConfig(submap_length=0)
    with pytest.raises(ConfigError):
        SceneConfig(texture_noise=2.0)


def _straight(n, spacing):
    return [(i, PoseSE3(np.eye(3), np.array([-i * spacing, 0.0, 0.0]))) for i in range(n)]


@pytest.mark.parametrize("n,spacing,expected", [(121, 1.5, 3), (60, 1.0, 1), (2, 1.0, 1), (200, 1.5, 5)])
def test_submap_count(n, spacing, expected):
    # arc length (n - 1) * spacing: 180 m, 59 m, 1 m and 298.5 m
    a = submap_assignment(_straight(n, spacing), 60.0)
    assert a.max() + 1 == expected
    assert np.all(np.diff(a) >= 0)


def test_submaps_partition_frames(small_scene):
    sms = split_submaps(small_scene, length=5.0)
    frames = [f for sm in sms for f in sm.frames]
    assert sorted(frames) == [fid for fid, _ in small_scene.trajectory]
    assert len(set(frames)) == len(frames)
    assert [sm.split for sm in sms][-1] == "test"
    assert sum(sm.split == "test" for sm in sms) == int(np.ceil(0.1 * len(sms)))


# labeling fixture: a 3D corner whose projection carries a Gaussian blob

CORNER = np.array([20.0, 0.0, 2.0])


def _corner_cloud(rng, n=3000):
    # three orthogonal 1.5 m faces meeting at CORNER
    u = rng.uniform(0, 1.5, size=(n, 2))
    faces = [np.column_stack([np.zeros(n), u]), np.column_stack([u[:, 0], np.zeros(n), u[:, 1]]),
             np.column_stack([u, np.zeros(n)])]
    return PointCloud(CORNER + np.vstack(faces) * [-1, 1, 1])


def _blob_image(center, sigma=4.0):
    yy, xx = np.mgrid[:K.height, :K.width]
    g = np.exp(-((xx - center[0]) ** 2 + (yy - center[1]) ** 2) / (2 * sigma**2))
    return 0.3 + 0.6 * g


def _views(n_views, offset_px=None):
    poses, images = {}, {}
    for f in range(n_views):
        eye = np.array([0.0, -3.0 + 2.0 * f, 1.6])
        pose = look_at(eye, CORNER + [0.0, 0.3 * f, 0.2])
        uv = project(CORNER, pose, K)
        if offset_px is not None and f == 0:
            uv = uv + [offset_px, 0.0]
        poses[f], images[f] = pose, _blob_image(uv)
    return poses, images


def _label(n_views, offset_px=None, rng=None):
    rng = rng or np.random.default_rng(0)
    poses, images = _views(n_views, offset_px)
    cloud = _corner_cloud(rng)
    sm = Submap(0, list(poses), np.zeros(3), cloud.points.min(0), cloud.points.max(0), cloud)
    kps2d = {f: image_keypoints(images[f], DogParams()) for f in poses}
    kp3 = Keypoint3D(CORNER, 1.0)
    return label_correspondences(sm, kps2d, [kp3], K, poses, images, LabelRules(), DogParams(),
                                 MapKeypointParams())


def test_corner_blob_accepted_in_four_views():
    pairs, stats = _label(4)
    assert stats["accepted_keypoints"] == 1
    assert len(pairs) == 4
    assert all(p.support_views == 4 for p in pairs)
    assert sorted(p.frame for p in pairs) == [0, 1, 2, 3]
    for p in pairs:
        assert p.patch.pixels.shape == (128, 128)
        assert abs(p.patch.pixels.mean()) < 1e-9
        assert p.volume.points.shape == (1024, 3)
        assert p.residual_px <= 3.0


def test_two_views_rejected():
    pairs, stats = _label(2)
    assert pairs == [] and stats["selected"] == 0


def test_offset_view_does_not_count():
    # the blob in view 0 sits 3.5 px off the projection
    pairs, _ = _label(3, offset_px=3.5)
    assert pairs == []
    pairs, _ = _label(4, offset_px=3.5)
    assert sorted(p.frame for p in pairs) == [1, 2, 3]
    assert all(p.support_views == 3 for p in pairs)


def test_label_soundness_and_hygiene(small_scene):
    ds = build_dataset(small_scene, test_fraction=0.5)
    poses = small_scene.poses
    assert ds.pairs
    for p in ds.pairs:
        world = p.keypoint3d.position + ds.submaps[p.submap].origin
        uv = project(world, poses[p.frame], K)
        assert np.hypot(*(uv - [p.keypoint2d.u, p.keypoint2d.v])) <= 3.0
        assert p.support_views >= 3
        assert p.split == ds.submaps[p.submap].split
    train_ids = {p.keypoint_id for p in ds.split("train")}
    assert not train_ids & {p.keypoint_id for p in ds.split("test")}


def _pairs(n_keys, views=1):
    rng = np.random.default_rng(0)
    out = []
    for k in range(n_keys):
        kp = Keypoint3D(rng.normal(size=3), 1.0)
        vol = object()
        for _ in range(views):
            out.append(LabeledPair(None, vol, None, kp, 3, keypoint_id=k))
    return out


def test_triplets_forced_choice():
    a, b = _pairs(2)
    t = make_triplets([a, b], seed=0)
    assert t[0].negative is b.volume and t[1].negative is a.volume


def test_triplets_never_share_keypoint():
    pairs = _pairs(5, views=4)
    ids = {id(p.volume): p.keypoint_id for p in pairs}
    draws = 0
    for epoch in range(500):
        for p, t in zip(pairs, make_triplets(pairs, seed=1, epoch=epoch)):
            assert ids[id(t.negative)] != p.keypoint_id
            draws += 1
    assert draws == 10000
    x = make_triplets(pairs, seed=4)
    y = make_triplets(pairs, seed=4)
    assert all(s.negative is t.negative for s, t in zip(x, y))


def test_triplets_too_small():
    with pytest.raises(DatasetTooSmall):
        make_triplets(_pairs(1))
    with pytest.raises(DatasetTooSmall):
        make_triplets(_pairs(1, views=3))


def test_dataset_roundtrip(tmp_path, small_scene):
    ds = build_dataset(small_scene, test_fraction=0.5)
    write_dataset(tmp_path, ds)
    for name in ("map.ply", "trajectory.csv", "camera.csv", "submaps.csv", "pairs/index.csv"):
        assert (tmp_path / name).exists()
    back = read_dataset(tmp_path)
    assert len(back.pairs) == len(ds.pairs)
    np.testing.assert_allclose(back.map.points, small_scene.map.points, atol=1e-6)
    assert back.intrinsics == K
    for a, b in zip(ds.pairs, back.pairs):
        np.testing.assert_allclose(b.patch.pixels, a.patch.pixels, atol=1e-12)
        np.testing.assert_allclose(b.volume.points, a.volume.points, atol=1e-6)
        np.testing.assert_allclose(b.keypoint3d.position, a.keypoint3d.position, atol=1e-6)
        assert (b.frame, b.split, b.support_views, b.keypoint_id) == (a.frame, a.split, a.support_views,
                                                                      a.keypoint_id)
    fid, pose = small_scene.trajectory[3]
    assert back.poses[fid] == pose
    np.testing.assert_array_equal(back.image(fid), small_scene.images[3])
