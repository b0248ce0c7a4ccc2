"""Ground removal, ISS keypoints and local volume extraction for point clouds."""
from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigError, TooFewPoints, TooFewPointsRemaining

BRUTE_FORCE_MAX = 256


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    frame: str = "map"
    intensity: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite coordinates")
        object.__setattr__(self, "points", pts)
        if self.intensity is not None:
            inten = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
            if len(inten) != len(pts):
                raise ValueError("intensity length does not match point count")
            object.__setattr__(self, "intensity", inten)

    def __len__(self):
        return len(self.points)

    def subset(self, mask_or_idx) -> "PointCloud":
        inten = None if self.intensity is None else self.intensity[mask_or_idx]
        return PointCloud(self.points[mask_or_idx], self.frame, inten)


@dataclass(frozen=True, eq=False)
class Keypoint3D:
    position: np.ndarray
    saliency: float
    neighbor_count: int = 0

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=np.float64).reshape(3))


@dataclass(frozen=True, eq=False)
class LocalVolume:
    """Neighborhood of a keypoint, keypoint at the origin, scaled into the unit ball."""

    points: np.ndarray
    source_keypoint: Keypoint3D | None
    original_count: int


@dataclass(frozen=True)
class Rejected:
    """Why a keypoint produced no volume or patch."""

    reason: str
    count: int | None = None


@dataclass(frozen=True)
class IssParams:
    salient_radius: float = 1.0
    nms_radius: float = 0.5
    gamma21: float = 0.9
    gamma32: float = 0.9
    min_neighbors: int = 10

    def __post_init__(self):
        if self.salient_radius <= 0 or self.nms_radius <= 0:
            raise ConfigError("ISS radii must be positive")
        if not (0 < self.gamma21 < 1 and 0 < self.gamma32 < 1):
            raise ConfigError("ISS eigenvalue ratios must lie in (0, 1)")


def remove_ground_plane(
    cloud: PointCloud,
    up_axis=(0.0, 0.0, 1.0),
    inlier_distance: float = 0.2,
    iterations: int = 200,
    max_tilt_deg: float = 15.0,
    min_inlier_fraction: float = 0.3,
    seed: int = 0,
) -> PointCloud:
    """Drop the dominant plane if it is near-horizontal and covers enough of the cloud.

    The dominant plane is found by RANSAC over point triples. Inliers are
    removed only when the plane normal is within ``max_tilt_deg`` of
    ``up_axis`` and at least ``min_inlier_fraction`` of the points lie on it;
    otherwise the cloud is returned unchanged.

    Raises:
        TooFewPoints: fewer than 50 input points.
        TooFewPointsRemaining: the plane swallowed every point.
    """
    P = cloud.points
    n = len(P)
    if n < 50:
        raise TooFewPoints(f"ground removal needs >= 50 points, got {n}")
    up = np.asarray(up_axis, dtype=np.float64)
    up = up / np.linalg.norm(up)
    rng = np.random.default_rng(seed)

    best_count, best_plane = -1, None
    for _ in range(iterations):
        a, b, c = P[rng.choice(n, 3, replace=False)]
        normal = np.cross(b - a, c - a)
        norm = np.linalg.norm(normal)
        if norm < 1e-12:
            continue
        normal /= norm
        count = int(np.count_nonzero(np.abs((P - a) @ normal) <= inlier_distance))
        if count > best_count:
            best_count, best_plane = count, (normal, a)

    if best_plane is None:
        return cloud
    normal, a = best_plane
    tilt = np.degrees(np.arccos(min(1.0, abs(float(normal @ up)))))
    if tilt > max_tilt_deg or best_count < min_inlier_fraction * n:
        return cloud
    keep = np.abs((P - a) @ normal) > inlier_distance
    if not np.any(keep):
        raise TooFewPointsRemaining("no points left after ground-plane removal")
    return cloud.subset(keep)


def _neighbor_lists(P: np.ndarray, queries: np.ndarray, radius: float, tree=None):
    """Flattened neighbor indices within ``radius`` of each query point.

    Returns (owner, idx) arrays sorted by owner, each owner's indices ascending.
    """
    if len(P) < BRUTE_FORCE_MAX:
        d2 = ((queries[:, None, :] - P[None, :, :]) ** 2).sum(-1)
        owner, idx = np.nonzero(d2 <= radius * radius)
        return owner, idx
    tree = tree if tree is not None else cKDTree(P)
    qtree = cKDTree(queries)
    pairs = qtree.sparse_distance_matrix(tree, radius, output_type="ndarray")
    order = np.lexsort((pairs["j"], pairs["i"]))
    owner, idx = pairs["i"][order], pairs["j"][order]
    return owner, idx


def local_covariances(P: np.ndarray, radius: float, chunk: int = 4096):
    """Unweighted neighborhood covariance for every point.

    Returns:
        cov: (N, 3, 3) covariance of the neighbors within ``radius``
            (the point itself included, normalized by the count).
        counts: (N,) neighbor counts.
    """
    P = np.asarray(P, dtype=np.float64)
    n = len(P)
    Pc = P - P.mean(axis=0)
    tree = cKDTree(Pc) if n >= BRUTE_FORCE_MAX else None
    cov = np.zeros((n, 3, 3))
    counts = np.zeros(n, dtype=np.int64)
    for start in range(0, n, chunk):
        stop = min(n, start + chunk)
        owner, idx = _neighbor_lists(Pc, Pc[start:stop], radius, tree)
        cnt = np.bincount(owner, minlength=stop - start)
        counts[start:stop] = cnt
        nz = cnt > 0
        mean = np.zeros((stop - start, 3))
        for k in range(3):
            mean[:, k] = np.bincount(owner, weights=Pc[idx, k], minlength=stop - start)
        mean[nz] /= cnt[nz, None]
        d = Pc[idx] - mean[owner]
        block = np.zeros((stop - start, 3, 3))
        for r in range(3):
            for c in range(r, 3):
                block[:, r, c] = np.bincount(owner, weights=d[:, r] * d[:, c], minlength=stop - start)
                block[:, c, r] = block[:, r, c]
        block[nz] /= cnt[nz, None, None]
        cov[start:stop] = block
    return cov, counts


def _greedy_nms(positions: np.ndarray, scores: np.ndarray, radius: float) -> np.ndarray:
    """Indices kept by greedy suppression, in descending score order (ties by index)."""
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    if len(order) == 0:
        return order
    suppressed = np.zeros(len(order), dtype=bool)
    kept = []
    if len(positions) < BRUTE_FORCE_MAX:
        for i in order:
            if suppressed[i]:
                continue
            kept.append(i)
            suppressed |= ((positions - positions[i]) ** 2).sum(-1) <= radius * radius
    else:
        tree = cKDTree(positions)
        for i in order:
            if suppressed[i]:
                continue
            kept.append(i)
            suppressed[tree.query_ball_point(positions[i], radius)] = True
    return np.asarray(kept, dtype=np.int64)


def nms_keypoints_3d(kps: list[Keypoint3D], radius: float) -> list[Keypoint3D]:
    """Greedy suppression: keep a keypoint iff no stronger kept keypoint is within ``radius``."""
    if not kps:
        return []
    pos = np.array([k.position for k in kps])
    sal = np.array([k.saliency for k in kps])
    return [kps[i] for i in _greedy_nms(pos, sal, radius)]


def iss_candidates(cloud: PointCloud, params: IssParams):
    """Per-point eigen analysis; returns (candidate mask, lambda3, counts, eigenvalues)."""
    cov, counts = local_covariances(cloud.points, params.salient_radius)
    ev = np.linalg.eigvalsh(cov)[:, ::-1]  # descending
    l1, l2, l3 = ev[:, 0], ev[:, 1], ev[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        ok = (l1 > 0) & (l2 > 0)
        ok &= np.where(ok, l2 / np.where(l1 > 0, l1, 1.0), np.inf) < params.gamma21
        ok &= np.where(ok, l3 / np.where(l2 > 0, l2, 1.0), np.inf) < params.gamma32
    ok &= counts >= params.min_neighbors
    return ok, np.clip(l3, 0.0, None), counts, ev


def detect_iss(cloud: PointCloud, params: IssParams = IssParams()) -> list[Keypoint3D]:
    """Intrinsic-shape-signature keypoints, sorted by descending saliency.

    A point qualifies when its neighborhood covariance eigenvalues satisfy
    ``l2/l1 < gamma21`` and ``l3/l2 < gamma32`` and it has at least
    ``min_neighbors`` neighbors; qualifying points are then thinned by greedy
    non-maximum suppression on ``l3`` within ``nms_radius``.
    """
    if len(cloud) == 0:
        return []
    ok, l3, counts, _ = iss_candidates(cloud, params)
    cand = np.nonzero(ok)[0]
    kept = cand[_greedy_nms(cloud.points[cand], l3[cand], params.nms_radius)]
    return [Keypoint3D(cloud.points[i].copy(), float(l3[i]), int(counts[i])) for i in kept]


def extract_volume(
    cloud: PointCloud,
    kp: Keypoint3D,
    radius: float = 1.0,
    min_points: int = 100,
    pad_count: int = 1024,
    seed: int = 0,
    tree: cKDTree | None = None,
) -> LocalVolume | Rejected:
    """Gather, normalize and pad the neighborhood of ``kp``.

    Points within ``radius`` are shifted so the keypoint sits at the origin and
    scaled by ``1/radius``. Larger sets are subsampled without replacement to
    ``pad_count``; smaller ones keep every point and are padded by seeded
    resampling with replacement.
    """
    if radius <= 0:
        raise ConfigError("volume radius must be positive")
    P = cloud.points
    if tree is None and len(P) >= BRUTE_FORCE_MAX:
        tree = cKDTree(P)
    if tree is not None:
        idx = np.sort(np.asarray(tree.query_ball_point(kp.position, radius), dtype=np.int64))
    else:
        idx = np.nonzero(((P - kp.position) ** 2).sum(-1) <= radius * radius)[0]
    count = len(idx)
    if count < min_points or count == 0:
        return Rejected("TooFewPoints", count)
    local = (P[idx] - kp.position) / radius
    norms = np.linalg.norm(local, axis=1)
    over = norms > 1.0
    local[over] /= norms[over, None]
    rng = np.random.default_rng(seed)
    if count >= pad_count:
        sel = rng.choice(count, pad_count, replace=False)
        pts = local[np.sort(sel)]
    else:
        extra = rng.choice(count, pad_count - count, replace=True)
        pts = np.concatenate([local, local[extra]])
    return LocalVolume(pts, kp, count)


@dataclass(frozen=True)
class MapKeypointParams:
    """Every map-side stage: ground removal, ISS, 4 m thinning and volumes."""

    salient_radius: float = 1.0
    iss_nms_radius: float = 0.5
    gamma21: float = 0.9
    gamma32: float = 0.9
    min_neighbors: int = 10
    ground_inlier_distance: float = 0.2
    keypoint_nms_radius: float = 4.0
    # thin the map database with keypoint_nms_radius as well (labels are always thinned)
    db_nms: bool = True
    volume_radius: float = 1.0
    min_points: int = 100
    pad_count: int = 1024
    seed: int = 0

    def __post_init__(self):
        if self.keypoint_nms_radius < 0 or self.volume_radius <= 0 or self.ground_inlier_distance <= 0:
            raise ConfigError("radii must be positive")
        if self.min_points < 1 or self.pad_count < 1:
            raise ConfigError("min_points and pad_count must be >= 1")
        self.iss  # validates the ISS fields

    @property
    def iss(self) -> IssParams:
        return IssParams(self.salient_radius, self.iss_nms_radius, self.gamma21, self.gamma32, self.min_neighbors)


def volume_seed(kp: Keypoint3D, seed: int = 0) -> int:
    """Padding seed derived from the keypoint position, so any caller pads identically."""
    return zlib.crc32(np.ascontiguousarray(kp.position, dtype="<f8").tobytes(), seed % 2 ** 32)


def map_keypoints(cloud: PointCloud, params: MapKeypointParams = MapKeypointParams()):
    """Ground removal and ISS detection.

    The 4 m suppression is not applied here; labeling thins selected keypoints
    and the map database thins all of them (see ``db_nms``).

    Returns:
        (ground-free cloud, keypoints, stage counts dict)
    """
    counts = {"points": len(cloud)}
    if len(cloud) < 50:
        return cloud, [], {**counts, "non_ground": len(cloud), "iss": 0}
    try:
        rest = remove_ground_plane(cloud, inlier_distance=params.ground_inlier_distance, seed=params.seed)
    except TooFewPointsRemaining:
        return cloud.subset(np.zeros(len(cloud), dtype=bool)), [], {**counts, "non_ground": 0, "iss": 0}
    counts["non_ground"] = len(rest)
    kps = detect_iss(rest, params.iss)
    counts["iss"] = len(kps)
    return rest, kps, counts


def volumes_for_keypoints(cloud: PointCloud, kps, params: MapKeypointParams = MapKeypointParams()):
    """Extract volumes; returns (volumes, kept keypoints, number rejected)."""
    tree = cKDTree(cloud.points) if len(cloud) >= BRUTE_FORCE_MAX else None
    vols, kept = [], []
    for kp in kps:
        v = extract_volume(cloud, kp, params.volume_radius, params.min_points, params.pad_count,
                           seed=volume_seed(kp, params.seed), tree=tree)
        if isinstance(v, LocalVolume):
            vols.append(v)
            kept.append(kp)
    return vols, kept, len(kps) - len(kept)
