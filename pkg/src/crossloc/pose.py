"""EPnP absolute pose and multi-hypothesis RANSAC.

The per-problem solver is compiled (see :mod:`crossloc._pnp_kernels`);
:func:`epnp` and every RANSAC minimal sample go through the same routine.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _pnp_kernels as kern
from .errors import BehindCamera, ConfigError, DegenerateConfiguration
from .geometry import CameraIntrinsics, PoseSE3, Z_MIN, orthonormalize

RANSAC_BLOCK = 1024


@dataclass(frozen=True, eq=False)
class Correspondence:
    pixel: np.ndarray
    point: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixel, dtype=np.float64).reshape(2)
        pt = np.asarray(self.point, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(px)) and np.all(np.isfinite(pt))):
            raise ValueError("correspondence must be finite")
        object.__setattr__(self, "pixel", px)
        object.__setattr__(self, "point", pt)


@dataclass(frozen=True)
class RansacConfig:
    reprojection_threshold: float = 5.0
    confidence: float = 0.99
    max_iterations: int = 5000
    min_inliers: int = 12
    seed: int = 0

    def __post_init__(self):
        if self.reprojection_threshold <= 0:
            raise ConfigError("reprojection threshold must be positive")
        if not 0 < self.confidence < 1:
            raise ConfigError("confidence must lie in (0, 1)")
        if self.max_iterations < 1 or self.min_inliers < 4:
            raise ConfigError("max_iterations >= 1 and min_inliers >= 4 required")


@dataclass(frozen=True, eq=False)
class PoseEstimate:
    pose: PoseSE3
    inliers: tuple[int, ...]
    mean_reprojection_error: float
    iterations: int = 0


@dataclass(frozen=True)
class Failure:
    reason: str


def _normalize(pixels, K: CameraIntrinsics):
    px = np.asarray(pixels, dtype=np.float64)
    return np.stack([(px[..., 0] - K.cx) / K.fx, (px[..., 1] - K.cy) / K.fy], axis=-1)


def epnp_arrays(points: np.ndarray, pixels: np.ndarray, K: CameraIntrinsics) -> PoseSE3:
    """EPnP on (n, 3) world points and their (n, 2) pixel observations."""
    Pw = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(Pw) < 4:
        raise DegenerateConfiguration(f"EPnP needs >= 4 correspondences, got {len(Pw)}")
    xn = _normalize(np.asarray(pixels).reshape(-1, 2), K)
    R, t, _, status = kern.solve(Pw, xn, K.fx, K.fy)
    if status == kern.STATUS_DEGENERATE:
        raise DegenerateConfiguration("3D points are collinear")
    if status == kern.STATUS_BEHIND:
        raise BehindCamera("no solution places the points in front of the camera")
    return PoseSE3(orthonormalize(R), t)


def epnp(corrs: list[Correspondence], K: CameraIntrinsics) -> PoseSE3:
    """Camera pose from >= 4 non-collinear 2D-3D correspondences.

    Control points are the centroid plus the principal axes of the 3D points
    (three in-plane control points for planar sets). The beta coefficients
    of the null-space combination are initialized from the linearized
    distance constraints (one to three kernel vectors, plus an approximate
    four-vector case), refined by Gauss-Newton, and each candidate is turned
    into ``[R|t]`` by Horn's alignment of world and camera control points. The
    candidate with the lowest reprojection error wins.

    Raises:
        DegenerateConfiguration: fewer than 4 correspondences or collinear points.
        BehindCamera: every candidate puts the points behind the camera.
    """
    return epnp_arrays(np.array([c.point for c in corrs]).reshape(-1, 3),
                       np.array([c.pixel for c in corrs]).reshape(-1, 2), K)


def reprojection_error(pose: PoseSE3, corr: Correspondence, K: CameraIntrinsics) -> float:
    """Pixel distance between the projected point and the observation (inf if behind)."""
    Xc = pose.apply(corr.point)
    if Xc[2] <= Z_MIN:
        return float("inf")
    u = K.fx * Xc[0] / Xc[2] + K.cx
    v = K.fy * Xc[1] / Xc[2] + K.cy
    return float(np.hypot(u - corr.pixel[0], v - corr.pixel[1]))


# ---------------------------------------------------------------------------
# RANSAC over top-K candidate lists


def _hypothesis_arrays(hypotheses):
    """Pixels (H, 2), padded candidate points (H, Kmax, 3) and list lengths (H,)."""
    H = len(hypotheses)
    counts = np.array([len(h.candidates) for h in hypotheses], dtype=np.int64)
    kmax = int(counts.max()) if H else 0
    pts = np.zeros((H, kmax, 3))
    for i, h in enumerate(hypotheses):
        for k, (kp, _dist) in enumerate(h.candidates):
            pts[i, k] = kp.position
    uv = np.array([[h.query.u, h.query.v] for h in hypotheses], dtype=np.float64).reshape(H, 2)
    return uv, pts, counts


def _block_samples(seed, block, n_iter, counts):
    """Minimal samples for one block of iterations, reproducible from (seed, block).

    Each block owns its own generator, so blocks can be evaluated in any order
    (or in parallel) with the same outcome.
    """
    rng = np.random.default_rng([seed, block])
    keys = rng.random((n_iter, len(counts)))
    sel = np.argpartition(keys, 3, axis=1)[:, :4]
    cand = np.floor(rng.random((n_iter, 4)) * counts[sel]).astype(np.int64)
    return np.ascontiguousarray(sel), cand


def required_iterations(w: float, k_eff: float, confidence: float, max_iterations: int) -> int:
    """Adaptive bound log(1 - conf) / log(1 - (w / K_eff)^4), capped at ``max_iterations``."""
    p = (w / k_eff) ** 4
    if p <= 0:
        return max_iterations
    if p >= 1:
        return 1
    return int(min(max_iterations, np.ceil(np.log(1 - confidence) / np.log1p(-p))))


def ransac_pnp(hypotheses, K: CameraIntrinsics, config: RansacConfig = RansacConfig()):
    """Robust pose from keypoints that each carry a ranked list of 3D candidates.

    Each iteration picks 4 distinct keypoints and one candidate per keypoint
    uniformly from its list, solves EPnP on that minimal set, and counts as
    inliers the keypoints whose best candidate reprojects under the threshold.
    The iteration budget adapts to the best inlier ratio, discounted by the
    mean candidate-list length. The winner is re-estimated from its inliers
    (one best candidate each) until the inlier set is stable.

    Iterations run in fixed blocks; the best model is the one with the most
    inliers, then the lowest mean error, then the lowest iteration index.

    Returns:
        :class:`PoseEstimate` or :class:`Failure` ("NotEnoughInliers",
        "AllSamplesDegenerate").
    """
    H = len(hypotheses)
    if H < 4:
        return Failure("NotEnoughInliers")
    uv, pts, counts = _hypothesis_arrays(hypotheses)
    if np.any(counts < 1):
        raise ValueError("every hypothesis needs at least one candidate")
    xn = _normalize(uv, K)
    k_eff = float(counts.mean())
    thr = config.reprojection_threshold

    best_key, best_R, best_t = None, None, None
    needed = config.max_iterations
    done, block = 0, 0
    any_valid = False
    while done < needed:
        n_iter = min(RANSAC_BLOCK, config.max_iterations - done)
        sel, cand = _block_samples(config.seed, block, n_iter, counts)
        Rs, ts, n_in, mean_err, status = kern.run_block(
            sel, cand, pts, counts, uv, xn, K.fx, K.fy, K.cx, K.cy, thr)
        valid = np.nonzero(status == kern.STATUS_OK)[0]
        if len(valid):
            any_valid = True
            j = valid[np.lexsort((valid, mean_err[valid], -n_in[valid]))[0]]
            key = (int(n_in[j]), -float(mean_err[j]), -(done + int(j)))
            if best_key is None or key > best_key:
                best_key, best_R, best_t = key, Rs[j].copy(), ts[j].copy()
                needed = required_iterations(best_key[0] / H, k_eff, config.confidence, config.max_iterations)
        done += n_iter
        block += 1

    if not any_valid:
        return Failure("AllSamplesDegenerate")
    if best_key[0] < config.min_inliers:
        return Failure("NotEnoughInliers")

    R, t = best_R, best_t
    inliers, chosen, errs = _inliers(R, t, uv, pts, counts, K, thr)
    for _ in range(5):
        try:
            pose = epnp_arrays(pts[inliers, chosen[inliers]], uv[inliers], K)
        except (DegenerateConfiguration, BehindCamera):
            break
        new_inl, new_chosen, new_errs = _inliers(pose.rotation, pose.translation, uv, pts, counts, K, thr)
        if len(new_inl) < len(inliers):
            break
        same = np.array_equal(new_inl, inliers)
        R, t, inliers, chosen, errs = pose.rotation, pose.translation, new_inl, new_chosen, new_errs
        if same:
            break
    pose = PoseSE3(R, t)
    inliers, _, errs = _inliers(pose.rotation, pose.translation, uv, pts, counts, K, thr)
    if len(inliers) < config.min_inliers:
        return Failure("NotEnoughInliers")
    return PoseEstimate(pose, tuple(int(i) for i in inliers), float(errs[inliers].mean()), done)


def _inliers(R, t, uv, pts, counts, K, thr):
    errs, arg = kern.score(R, t, uv, pts, counts, K.fx, K.fy, K.cx, K.cy)
    return np.nonzero(errs < thr)[0], arg, errs
