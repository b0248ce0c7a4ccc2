import json

import numpy as np
import pytest

from crossloc.config import EvalConfig, MatchConfig
from crossloc.detect2d import Patch
from crossloc.detect3d import Keypoint3D, LocalVolume, MapKeypointParams, PointCloud
from crossloc.embed.nets import ImageNetShape, PointNetShape, init_image_params, init_point_params
from crossloc.embed.train import TrainConfig, train
from crossloc.errors import EmptyDatabase, EmptyTestSet, MissingGroundTruth
from crossloc.geometry import PoseSE3, rot_z
from crossloc.matching import write_db
from crossloc.pipeline import (LocalizationResult, build_map_db, evaluate, localize, pairs_db, recall_at_k,
                               report_document, report_text)
from crossloc.pose import Failure, RansacConfig
from crossloc.synth.dataset import LabeledPair
from crossloc.synth.scene import SceneConfig, generate_scene

IMG_SHAPE = ImageNetShape((4, 4, 4), 8, 64)
PT_SHAPE = PointNetShape((8, 8, 8), 8, 64)


@pytest.fixture(scope="module")
def scene():
    return generate_scene(SceneConfig(n_structures=8, extent=50.0, n_frames=4, seed=5))


@pytest.fixture(scope="module")
def nets():
    return init_image_params(IMG_SHAPE, 1), init_point_params(PT_SHAPE, 1)


@pytest.fixture(scope="module")
def map_db(scene, nets):
    return build_map_db(scene.map, nets[1])


def test_plane_only_map_is_empty(rng, nets):
    plane = np.column_stack([rng.uniform(-20, 20, (3000, 2)), np.zeros(3000)])
    with pytest.raises(EmptyDatabase):
        build_map_db(PointCloud(plane), nets[1])


def test_box_scene_db(map_db):
    db, counts = map_db
    assert len(db) == counts["db"] > 0
    assert counts["points"] >= counts["non_ground"] and counts["iss"] >= counts["db"]
    np.testing.assert_allclose(np.linalg.norm(db.descriptors, axis=1), 1.0, atol=1e-6)


def test_db_thinning_flag(scene, nets, map_db):
    db, counts = map_db
    X = np.array([k.position for k in db.keypoints])
    d = np.linalg.norm(X[:, None] - X[None], axis=-1)
    assert d[np.triu_indices(len(X), 1)].min() > 4.0
    full, c_full = build_map_db(scene.map, nets[1], MapKeypointParams(db_nms=False))
    assert c_full["after_nms"] == c_full["iss"] and len(full) == c_full["iss"] - c_full["volume_rejected"]
    assert len(full) > len(db)


def test_db_build_deterministic(scene, nets, map_db, tmp_path):
    write_db(tmp_path / "a.x2db", map_db[0])
    write_db(tmp_path / "b.x2db", build_map_db(scene.map, nets[1])[0])
    assert (tmp_path / "a.x2db").read_bytes() == (tmp_path / "b.x2db").read_bytes()


def test_blank_image_no_keypoints(scene, nets, map_db):
    r = localize(np.full((480, 640), 0.5), map_db[0], nets[0], scene.config.intrinsics)
    assert not r.succeeded and r.estimate.reason == "NoKeypoints"
    assert r.translation_error is None and r.candidates == 0


def test_diagnostic_conservation(scene, nets, map_db):
    db = map_db[0]
    fid, gt = scene.trajectory[1]
    match = MatchConfig(K=5)
    r = localize(scene.images[1], db, nets[0], scene.config.intrinsics, match=match,
                 ransac=RansacConfig(max_iterations=300), frame=fid, gt=gt)
    assert r.keypoints > 0
    assert r.candidates == r.keypoints * min(match.K, len(db))
    assert r.inliers <= r.keypoints
    assert (r.translation_error is not None) == r.succeeded


def _result(frame, t_err=None, r_deg=None):
    if t_err is None:
        return LocalizationResult(frame, Failure("NotEnoughInliers"))
    est = PoseSE3(rot_z(r_deg), np.array([t_err, 0.0, 0.0]))
    return LocalizationResult(frame, est, inliers=20, candidates=100, keypoints=20)


GT = {0: PoseSE3.identity(), 1: PoseSE3.identity(), 2: PoseSE3.identity()}


def test_evaluate_exact_and_threshold():
    rep = evaluate([_result(0, 0.0, 0.0)], GT)
    assert rep.success_ratio == 1.0
    assert rep.mean_translation_error == 0.0 and rep.mean_rotation_error == 0.0
    rep = evaluate([_result(0, 11.0, 0.0)], GT)
    assert rep.success_ratio == 0.0 and rep.mean_translation_error is None
    rep = evaluate([_result(0, 1.0, 46.0)], GT)
    assert rep.success_ratio == 0.0


def test_evaluate_mixed_averages_over_successes():
    rep = evaluate([_result(1), _result(0, 1.0, 5.0)], GT)
    assert rep.success_ratio == 0.5
    assert rep.mean_translation_error == pytest.approx(1.0)
    assert rep.mean_rotation_error == pytest.approx(5.0)
    assert [r.frame for r in rep.results] == [0, 1]
    assert rep.tight_success_ratio == 0.0


def test_evaluate_curve():
    rep = evaluate([_result(0, 0.2, 0.5), _result(1, 3.0, 10.0), _result(2)], GT, EvalConfig())
    assert len(rep.curve) == 20
    ms = [c[0] for c in rep.curve]
    assert ms[0] == pytest.approx(0.05) and ms[-1] == pytest.approx(50.0)
    ratios = [c[2] for c in rep.curve]
    assert all(0 <= r <= 1 for r in ratios) and np.all(np.diff(ratios) >= 0)
    assert ratios[-1] == pytest.approx(2 / 3)
    assert rep.tight_success_ratio == pytest.approx(1 / 3)


def test_evaluate_missing_ground_truth():
    with pytest.raises(MissingGroundTruth):
        evaluate([_result(7, 1.0, 1.0)], GT)


def test_schema_on_total_failure():
    doc = report_document("eval", evaluate([_result(0), _result(1)], GT))
    ev = doc["evaluation"]
    assert doc["schema_version"] == 1
    assert ev["successes"] == 0 and ev["success_ratio"] == 0.0
    assert ev["mean_translation_error_m"] is None and ev["mean_rotation_error_deg"] is None
    assert ev["failures"]["NotEnoughInliers"] == 2
    assert set(ev) >= {"frames", "precision", "tight_precision", "tight_success_ratio", "curve", "recall",
                       "results", "averages_over"}
    json.dumps(doc, allow_nan=False)
    ok = report_document("eval", evaluate([_result(0, 0.5, 1.0)], GT))["evaluation"]
    assert set(ok) == set(ev)
    assert "frames" in report_text(evaluate([_result(0)], GT))


# recall fixtures

def _labeled(rng, n_keys, views, n_points=256):
    pairs = []
    for k in range(n_keys):
        kp = Keypoint3D(rng.normal(size=3) * 10, 1.0)
        pts = rng.uniform(-1, 1, size=(n_points, 3))
        vol = LocalVolume(pts / np.linalg.norm(pts, axis=1).max(), kp, n_points)
        for _ in range(views):
            px = rng.normal(size=(32, 32))
            pairs.append(LabeledPair(Patch(px - px.mean()), vol, None, kp, 3, keypoint_id=k))
    return pairs


def _gratings(rng, n_keys):
    # one distinct oriented grating per keypoint, so patches are separable after pooling
    yy, xx = np.mgrid[:32, :32]
    pairs = []
    for k in range(n_keys):
        kp = Keypoint3D(rng.normal(size=3) * 10, 1.0)
        pts = rng.uniform(-1, 1, size=(256, 3))
        vol = LocalVolume(pts / np.linalg.norm(pts, axis=1).max(), kp, 256)
        th, f = np.pi * k / n_keys, 0.15 + 0.1 * k
        px = np.sin(f * (np.cos(th) * xx + np.sin(th) * yy)) * (0.5 + 0.3 * k)
        pairs.append(LabeledPair(Patch(px - px.mean()), vol, None, kp, 3, keypoint_id=k))
    return pairs


def test_recall_memorized_model(rng):
    pairs = _gratings(rng, 5)
    cfg = TrainConfig(epochs=300, batch_size=5, learning_rate=1e-3, D=64, point_widths=(8, 8, 8))
    res = train([(p.patch, p.volume) for p in pairs], cfg, groups=[p.keypoint_id for p in pairs])
    assert res.history[-1] < 0.05
    rec = recall_at_k(pairs_db(pairs, res.point_params), pairs, res.image_params, 5)
    assert rec[0] == 1.0 and rec == sorted(rec)


def test_recall_chance_level(rng, nets):
    pairs = _labeled(rng, 200, 3, n_points=64)
    db = pairs_db(pairs, nets[1])
    assert len(db) == 200
    rec = recall_at_k(db, pairs, nets[0], 10)
    # 600 patches, p = 1/200: mean 3 hits, 12 is about 5 sigma
    assert rec[0] <= 12 / 600
    assert rec == sorted(rec) and rec[-1] <= 0.2


def test_recall_empty():
    with pytest.raises(EmptyTestSet):
        recall_at_k(None, [], {}, 5)
