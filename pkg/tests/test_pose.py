import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crossloc.detect2d import Keypoint2D
from crossloc.detect3d import Keypoint3D
from crossloc.errors import ConfigError, DegenerateConfiguration
from crossloc.geometry import CameraIntrinsics, PoseSE3, project_points, rotation_error_deg, translation_error
from crossloc.matching import MatchHypothesis
from crossloc.pose import (Correspondence, PoseEstimate, RansacConfig, epnp, epnp_arrays, ransac_pnp,
                           reprojection_error, required_iterations)
from oracles import decoy_hypotheses, pnp_problem

K = CameraIntrinsics(500.0, 500.0, 320.0, 240.0, 640, 480)


def _errors(est, gt):
    return rotation_error_deg(est.rotation, gt.rotation), translation_error(est, gt)


@settings(max_examples=100)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(4, 50))
def test_epnp_noise_free(seed, n):
    gt, X, px = pnp_problem(np.random.default_rng(seed), n, K)
    r, t = _errors(epnp_arrays(X, px, K), gt)
    assert r <= 0.01 and t <= 1e-4


def test_epnp_eight_points_and_identity(rng):
    gt, X, px = pnp_problem(rng, 8, K)
    corrs = [Correspondence(p, x) for p, x in zip(px, X)]
    r, t = _errors(epnp(corrs, K), gt)
    assert r <= 0.01 and t <= 1e-4
    X = np.column_stack([rng.uniform(-3, 3, 10), rng.uniform(-2, 2, 10), rng.uniform(5, 20, 10)])
    uv, _ = project_points(X, PoseSE3.identity(), K)
    r, t = _errors(epnp_arrays(X, uv, K), PoseSE3.identity())
    assert r <= 0.01 and t <= 1e-4


def test_epnp_planar_points(rng):
    gt = PoseSE3(np.eye(3), np.array([0.0, 0.0, 10.0]))
    X = np.column_stack([rng.uniform(-4, 4, 12), rng.uniform(-4, 4, 12), np.zeros(12)])
    uv, _ = project_points(X, gt, K)
    r, t = _errors(epnp_arrays(X, uv, K), gt)
    assert r <= 0.01 and t <= 1e-4


def test_epnp_noise_median(rng):
    rot, trans = [], []
    for _ in range(50):
        gt, X, px = pnp_problem(rng, 20, K, noise_px=0.5)
        r, t = _errors(epnp_arrays(X, px, K), gt)
        rot.append(r)
        trans.append(t)
    assert np.median(rot) <= 0.5 and np.median(trans) <= 0.05


def test_epnp_degenerate():
    X = np.outer(np.arange(4.0), [1.0, 0.5, 0.2]) + [0, 0, 5]
    uv, _ = project_points(X, PoseSE3.identity(), K)
    with pytest.raises(DegenerateConfiguration):
        epnp_arrays(X, uv, K)
    with pytest.raises(DegenerateConfiguration):
        epnp_arrays(X[:3], uv[:3], K)


def test_reprojection_error():
    pose = PoseSE3.identity()
    X = np.array([1.0, -0.5, 4.0])
    uv, _ = project_points(X[None], pose, K)
    assert reprojection_error(pose, Correspondence(uv[0], X), K) == pytest.approx(0.0, abs=1e-9)
    assert reprojection_error(pose, Correspondence(uv[0] + [3, 4], X), K) == pytest.approx(5.0, abs=1e-9)
    assert reprojection_error(pose, Correspondence(uv[0], -X), K) == np.inf


def test_correspondence_must_be_finite():
    with pytest.raises(ValueError):
        Correspondence([np.nan, 0.0], [0.0, 0.0, 1.0])


def test_ransac_config_validation():
    with pytest.raises(ConfigError):
        RansacConfig(reprojection_threshold=0)
    with pytest.raises(ConfigError):
        RansacConfig(confidence=1.0)


def test_required_iterations():
    assert required_iterations(1.0, 1.0, 0.99, 5000) == 1
    assert required_iterations(0.0, 1.0, 0.99, 5000) == 5000
    # w = 0.5, K_eff = 5: log(0.01) / log(1 - 1e-4)
    assert required_iterations(0.5, 5.0, 0.99, 10**6) == int(np.ceil(np.log(0.01) / np.log1p(-1e-4)))


def _hyps_from(X, px, k=1):
    return [MatchHypothesis(Keypoint2D(u, v, 1.0), ((Keypoint3D(x, 1.0), 0.0),)) for x, (u, v) in zip(X, px)]


def test_ransac_minimal_consistent_set(rng):
    gt, X, px = pnp_problem(rng, 4, K, depth=(5, 20))
    est = ransac_pnp(_hyps_from(X, px), K, RansacConfig(min_inliers=4))
    assert isinstance(est, PoseEstimate)
    assert est.inliers == (0, 1, 2, 3)
    r, t = _errors(est.pose, gt)
    assert r <= 0.01 and t <= 1e-4


def test_ransac_too_few_hypotheses(rng):
    _, X, px = pnp_problem(rng, 3, K)
    assert ransac_pnp(_hyps_from(X, px), K).reason == "NotEnoughInliers"


def test_ransac_all_decoys(rng):
    _, X, _ = pnp_problem(rng, 60, K)
    px = rng.uniform([0, 0], [640, 480], size=(60, 2))
    est = ransac_pnp(_hyps_from(X, px), K, RansacConfig(max_iterations=2000))
    assert est.reason == "NotEnoughInliers"


def _check_inlier_consistency(est, hyps, cfg):
    for i, h in enumerate(hyps):
        best = min(reprojection_error(est.pose, Correspondence([h.query.u, h.query.v], kp.position), K)
                   for kp, _ in h.candidates)
        assert (best < cfg.reprojection_threshold) == (i in est.inliers)


def test_ransac_with_decoys_and_determinism():
    cfg = RansacConfig(confidence=0.999, max_iterations=100000, seed=3)
    hits = 0
    for trial in range(3):
        gt, hyps, true_idx = decoy_hypotheses(np.random.default_rng([11, trial]), K)
        est = ransac_pnp(hyps, K, cfg)
        if isinstance(est, PoseEstimate):
            r, t = _errors(est.pose, gt)
            hits += r <= 0.1 and t <= 0.01 and true_idx <= set(est.inliers)
            _check_inlier_consistency(est, hyps, cfg)
    assert hits == 3
    gt, hyps, _ = decoy_hypotheses(np.random.default_rng([11, 0]), K)
    a, b = ransac_pnp(hyps, K, cfg), ransac_pnp(hyps, K, cfg)
    assert a.pose == b.pose and a.inliers == b.inliers and a.iterations == b.iterations


def test_ransac_noisy_inliers_consistent(rng):
    gt, X, px = pnp_problem(rng, 40, K, noise_px=1.0)
    px[:10] = rng.uniform([0, 0], [640, 480], size=(10, 2))
    hyps = _hyps_from(X, px)
    cfg = RansacConfig()
    est = ransac_pnp(hyps, K, cfg)
    assert isinstance(est, PoseEstimate) and len(est.inliers) >= 28
    _check_inlier_consistency(est, hyps, cfg)
