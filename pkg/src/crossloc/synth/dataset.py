"""Submaps, 2D-3D correspondence labels, triplets and the on-disk dataset layout."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from ..detect2d import DogParams, Keypoint2D, Patch, extract_patch, image_keypoints, resize_bilinear
from ..detect3d import (Keypoint3D, LocalVolume, MapKeypointParams, PointCloud, Rejected, _greedy_nms,
                        extract_volume, map_keypoints, volume_seed)
from ..embed.train import Triplet
from ..embed.train import make_triplets as _make_triplets
from ..errors import DataError, DatasetTooSmall
from ..geometry import CameraIntrinsics, PoseSE3, project_points
from ..io import read_pgm, read_ply, write_pgm, write_ply
from .scene import Scene, quantize, visible_depth

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LabelRules:
    residual_px: float = 3.0
    min_views: int = 3
    max_depth: float = 50.0
    # a keypoint is occluded when the first surface along its ray is this much closer
    occlusion_tol: float = 0.05


@dataclass(eq=False)
class Submap:
    index: int
    frames: list
    origin: np.ndarray  # world position of the local frame's origin (axes stay world-aligned)
    lo: np.ndarray  # world bounding box of the clipped map
    hi: np.ndarray
    cloud: PointCloud  # local coordinates
    split: str = "train"

    def to_local(self, pose: PoseSE3) -> PoseSE3:
        """World-to-camera pose re-expressed for local map coordinates."""
        return PoseSE3(pose.rotation, pose.translation + pose.rotation @ self.origin)


@dataclass(frozen=True, eq=False)
class LabeledPair:
    patch: Patch
    volume: LocalVolume
    keypoint2d: Keypoint2D
    keypoint3d: Keypoint3D  # submap-local coordinates
    support_views: int
    frame: int = -1
    submap: int = -1
    residual_px: float = 0.0
    keypoint_id: int = -1  # identity of the physical keypoint across submaps
    split: str = "train"
    patch_grid: np.ndarray | None = None  # 8-bit-grid patch before centering, as stored on disk


def arc_lengths(trajectory) -> np.ndarray:
    c = np.array([p.center() for _, p in trajectory])
    if len(c) < 2:
        return np.zeros(len(c))
    return np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(c, axis=0), axis=1))])


def submap_assignment(trajectory, length: float) -> np.ndarray:
    """Submap index per frame from cumulative arc length; the end point joins the last segment."""
    s = arc_lengths(trajectory)
    n = max(1, math.ceil(s[-1] / length - 1e-12)) if len(s) else 1
    return np.minimum(np.floor(s / length).astype(np.int64), n - 1)


def split_submaps(scene: Scene, length: float | None = None, margin: float | None = None,
                  test_fraction: float = 0.1) -> list[Submap]:
    """Disjoint arc-length segments of the trajectory, each with its clipped local map.

    A segment's region is the bounding box of the map points inside the view
    frusta of its frames (up to ``max_depth``), grown by ``margin``. The last
    ``ceil(test_fraction * n)`` segments are marked ``test``.
    """
    cfg = scene.config
    length = cfg.submap_length if length is None else length
    margin = cfg.submap_margin if margin is None else margin
    if not scene.trajectory:
        raise DataError("trajectory is empty")
    assign = submap_assignment(scene.trajectory, length)
    n = int(assign.max()) + 1
    n_test = min(n, math.ceil(test_fraction * n - 1e-12)) if test_fraction > 0 else 0
    P = scene.map.points
    K = cfg.intrinsics
    out = []
    for j in range(n):
        frames = [fid for (fid, _), a in zip(scene.trajectory, assign) if a == j]
        seen = np.zeros(len(P), dtype=bool)
        for fid in frames:
            uv, z = project_points(P, scene.poses[fid], K)
            seen |= ((z > 0) & (z <= cfg.max_depth) & (uv[:, 0] >= 0) & (uv[:, 0] <= K.width - 1)
                     & (uv[:, 1] >= 0) & (uv[:, 1] <= K.height - 1))
        centers = np.array([scene.poses[f].center() for f in frames])
        pts = np.vstack([P[seen], centers])
        lo, hi = pts.min(0) - margin, pts.max(0) + margin
        inside = np.all((P >= lo) & (P <= hi), axis=1)
        origin = centers[0].copy()
        cloud = PointCloud(P[inside] - origin, f"submap{j}", scene.map.intensity[inside])
        out.append(Submap(j, frames, origin, lo, hi, cloud, "test" if j >= n - n_test else "train"))
    return out


def _quantized_patch(raw: np.ndarray, kp: Keypoint2D) -> tuple[Patch, np.ndarray]:
    """128x128 patch on the 8-bit grid (what a PGM stores), then zero-centered."""
    q = quantize(resize_bilinear(raw))
    return Patch(q - q.mean(), kp), q


def label_correspondences(submap: Submap, kps2d: dict, kps3d, K: CameraIntrinsics, poses: dict, images: dict,
                          rules: LabelRules = LabelRules(), dog: DogParams = DogParams(),
                          mk: MapKeypointParams = MapKeypointParams(), volume_cloud: PointCloud | None = None,
                          occlusion=None):
    """Paper-rule 2D-3D labels for one submap.

    Every 3D keypoint is projected into every frame that sees it and paired
    with its nearest 2D keypoint; a keypoint with at least ``min_views``
    frames within ``residual_px`` is selected. Selected 3D keypoints are then
    thinned by ``keypoint_nms_radius`` (by saliency), their 2D partners by
    ``nms_radius`` per frame (by response), and the volume and patch filters
    applied. A 2D keypoint claimed by two surviving 3D keypoints is dropped.

    Args:
        kps2d: frame id -> all DoG keypoints of that frame.
        kps3d: ISS keypoints in submap-local coordinates.
        poses: frame id -> world-to-camera pose (world frame).
        images: frame id -> image.
        volume_cloud: local cloud the volumes are cut from (ground-free).
        occlusion: optional ``f(pose, world_points) -> first-surface distances``.

    Returns:
        (pairs, stats) with pairs sorted by (keypoint order, frame).
    """
    cloud = volume_cloud if volume_cloud is not None else submap.cloud
    kps3d = list(kps3d)
    stats = {"keypoints3d": len(kps3d), "selected": 0, "after_nms": 0, "volume_rejected": 0,
             "too_few_views": 0, "ambiguous": 0, "suppressed_2d": 0, "patch_rejected": 0,
             "accepted_keypoints": 0}
    if not kps3d:
        return [], stats
    X = np.array([k.position for k in kps3d]) + submap.origin
    support = [[] for _ in kps3d]  # (frame, kp2d index, residual)
    for fid in submap.frames:
        kps = kps2d.get(fid, [])
        if not kps:
            continue
        pose = poses[fid]
        uv, z = project_points(X, pose, K)
        vis = (z > 0) & (z <= rules.max_depth) & np.all(np.isfinite(uv), axis=1)
        vis &= (uv[:, 0] >= 0) & (uv[:, 0] <= K.width - 1) & (uv[:, 1] >= 0) & (uv[:, 1] <= K.height - 1)
        idx = np.nonzero(vis)[0]
        if occlusion is not None and len(idx):
            dist = np.linalg.norm(X[idx] - pose.center(), axis=1)
            idx = idx[occlusion(pose, X[idx]) >= dist - rules.occlusion_tol]
        if not len(idx):
            continue
        d, j = cKDTree(np.array([[k.u, k.v] for k in kps])).query(uv[idx])
        for i, dd, jj in zip(idx, d, j):
            if dd <= rules.residual_px:
                support[i].append((fid, int(jj), float(dd)))
    selected = np.array([i for i in range(len(kps3d)) if len(support[i]) >= rules.min_views], dtype=np.int64)
    stats["selected"] = len(selected)
    if mk.keypoint_nms_radius > 0 and len(selected):
        sal = np.array([kps3d[i].saliency for i in selected])
        selected = selected[_greedy_nms(X[selected], sal, mk.keypoint_nms_radius)]
    stats["after_nms"] = len(selected)
    vols = {}
    for i in selected:
        vol = extract_volume(cloud, kps3d[i], mk.volume_radius, mk.min_points, mk.pad_count,
                             seed=volume_seed(kps3d[i], mk.seed))
        if isinstance(vol, Rejected):
            stats["volume_rejected"] += 1
        else:
            vols[int(i)] = vol
    # per-frame ambiguity and 32 px thinning of the surviving 2D partners
    by_frame: dict = {}
    for i in vols:
        for fid, j, res in support[i]:
            by_frame.setdefault(fid, []).append((i, j, res))
    views = {i: [] for i in vols}
    for fid, items in by_frame.items():
        count: dict = {}
        for _, j, _ in items:
            count[j] = count.get(j, 0) + 1
        unique = [it for it in items if count[it[1]] == 1]
        stats["ambiguous"] += len(items) - len(unique)
        if dog.nms_radius > 0 and unique:
            kp = kps2d[fid]
            pos = np.array([[kp[j].u, kp[j].v] for _, j, _ in unique])
            resp = np.array([kp[j].response for _, j, _ in unique])
            keep = np.sort(_greedy_nms(pos, resp, dog.nms_radius))
            stats["suppressed_2d"] += len(unique) - len(keep)
            unique = [unique[k] for k in keep]
        for i, j, res in unique:
            views[i].append((fid, j, res))
    pairs = []
    for i in (int(i) for i in selected if int(i) in vols):
        # a view whose patch is rejected no longer counts as support
        accepted = []
        for fid, j, res in sorted(views[i]):
            kp2 = kps2d[fid][j]
            raw = extract_patch(images[fid], kp2, dog.base_size, dog.scale_threshold)
            if isinstance(raw, Rejected):
                stats["patch_rejected"] += 1
            else:
                accepted.append((fid, kp2, res, raw))
        if len(accepted) < rules.min_views:
            stats["too_few_views"] += 1
            continue
        stats["accepted_keypoints"] += 1
        for fid, kp2, res, raw in accepted:
            patch, grid = _quantized_patch(raw, kp2)
            pairs.append(LabeledPair(patch, vols[i], kp2, kps3d[i], len(accepted), fid, submap.index, res, -1,
                                     submap.split, grid))
    return pairs, stats


def scene_occlusion(scene: Scene):
    return lambda pose, pts: visible_depth(scene, pose, pts)


@dataclass(eq=False)
class Dataset:
    scene: Scene
    submaps: list
    pairs: list
    keypoints2d: dict  # frame id -> DoG keypoints
    stats: dict

    def split(self, tag: str) -> list:
        return [p for p in self.pairs if p.split == tag]


def build_dataset(scene: Scene, rules: LabelRules = LabelRules(), dog: DogParams = DogParams(),
                  mk: MapKeypointParams = MapKeypointParams(), test_fraction: float = 0.1) -> Dataset:
    """Split, detect and label the whole scene.

    Keypoint ids are shared across submaps by world position. Training pairs
    whose physical keypoint also occurs in a test submap are dropped so that
    no held-out 3D keypoint is seen during training.
    """
    submaps = split_submaps(scene, test_fraction=test_fraction)
    poses = scene.poses
    images = {fid: img for (fid, _), img in zip(scene.trajectory, scene.images)}
    kps2d = {fid: image_keypoints(images[fid], dog) for fid, _ in scene.trajectory}
    occ = scene_occlusion(scene)
    pairs, stats = [], {}
    for sm in submaps:
        rest, kps3d, counts = map_keypoints(sm.cloud, mk)
        p, st = label_correspondences(sm, kps2d, kps3d, scene.config.intrinsics, poses, images, rules, dog, mk,
                                      volume_cloud=rest, occlusion=occ)
        stats[f"submap{sm.index}"] = {**counts, **st, "pairs": len(p), "split": sm.split}
        pairs.extend(p)
    ids: dict = {}
    keyed = []
    for p in pairs:
        world = tuple(np.round(p.keypoint3d.position + submaps[p.submap].origin, 6).tolist())
        keyed.append(LabeledPair(p.patch, p.volume, p.keypoint2d, p.keypoint3d, p.support_views, p.frame,
                                 p.submap, p.residual_px, ids.setdefault(world, len(ids)), p.split, p.patch_grid))
    test_ids = {p.keypoint_id for p in keyed if p.split == "test"}
    kept = [p for p in keyed if p.split == "test" or p.keypoint_id not in test_ids]
    stats["dropped_shared_with_test"] = len(keyed) - len(kept)
    return Dataset(scene, submaps, kept, kps2d, stats)


def make_triplets(pairs, seed: int = 0, epoch: int = 0) -> list[Triplet]:
    """One triplet per pair, negative volume from a different physical keypoint.

    Raises:
        DatasetTooSmall: fewer than 2 pairs or only one distinct keypoint.
    """
    pairs = list(pairs)
    if len(pairs) < 2:
        raise DatasetTooSmall(f"need >= 2 pairs, got {len(pairs)}")
    groups = pair_groups(pairs)
    return _make_triplets([(p.patch, p.volume) for p in pairs], seed, epoch, groups)


def pair_groups(pairs) -> np.ndarray:
    """Keypoint identity per pair (``keypoint_id`` when set, else position within its submap)."""
    keys: dict = {}
    out = []
    for p in pairs:
        key = p.keypoint_id if p.keypoint_id >= 0 else (p.submap, *p.keypoint3d.position.tolist())
        out.append(keys.setdefault(key, len(keys)))
    return np.asarray(out, dtype=np.int64)


# on-disk layout

CAMERA_FIELDS = ["fx", "fy", "cx", "cy", "width", "height"]
INDEX_FIELDS = ["pair", "submap", "split", "frame", "keypoint_id", "x", "y", "z", "saliency", "u", "v", "scale",
                "response", "support_views", "residual_px", "volume_count"]


def _pose_row(pose: PoseSE3) -> list:
    return [repr(float(v)) for v in pose.matrix34().ravel()]


def write_dataset(out_dir, ds: Dataset) -> None:
    """Write map, trajectory, images, submaps and labeled pairs."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "pairs").mkdir(exist_ok=True)
    sc = ds.scene
    write_ply(out / "map.ply", sc.map.points, {"intensity": sc.map.intensity})
    with open(out / "trajectory.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame"] + [f"r{i}{j}" if j < 3 else f"t{i}" for i in range(3) for j in range(4)])
        for fid, pose in sc.trajectory:
            w.writerow([fid] + _pose_row(pose))
    K = sc.config.intrinsics
    with open(out / "camera.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CAMERA_FIELDS)
        w.writerow([repr(float(K.fx)), repr(float(K.fy)), repr(float(K.cx)), repr(float(K.cy)), K.width, K.height])
    for (fid, _), img in zip(sc.trajectory, sc.images):
        write_pgm(out / "images" / f"frame_{fid:06d}.pgm", img)
    with open(out / "submaps.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["submap", "split", "first_frame", "last_frame", "ox", "oy", "oz",
                    "lo_x", "lo_y", "lo_z", "hi_x", "hi_y", "hi_z"])
        for sm in ds.submaps:
            w.writerow([sm.index, sm.split, sm.frames[0], sm.frames[-1]]
                       + [repr(float(v)) for v in (*sm.origin, *sm.lo, *sm.hi)])
    with open(out / "pairs" / "index.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(INDEX_FIELDS)
        for i, p in enumerate(ds.pairs):
            k3, k2 = p.keypoint3d, p.keypoint2d
            w.writerow([i, p.submap, p.split, p.frame, p.keypoint_id, *map(repr, map(float, k3.position)),
                        repr(float(k3.saliency)), repr(k2.u), repr(k2.v), repr(k2.scale), repr(k2.response),
                        p.support_views, repr(p.residual_px), p.volume.original_count])
            write_pgm(out / "pairs" / f"patch_{i:06d}.pgm", p.patch_grid)
            write_ply(out / "pairs" / f"volume_{i:06d}.ply", p.volume.points)


@dataclass(frozen=True, eq=False)
class SubmapRecord:
    index: int
    split: str
    first_frame: int
    last_frame: int
    origin: np.ndarray
    lo: np.ndarray
    hi: np.ndarray

    def contains(self, fid: int) -> bool:
        return self.first_frame <= fid <= self.last_frame


@dataclass(eq=False)
class DiskDataset:
    """A dataset directory as read back from disk; images load lazily."""

    root: Path
    map: PointCloud
    trajectory: list
    intrinsics: CameraIntrinsics
    submaps: list
    pairs: list

    @property
    def poses(self) -> dict:
        return dict(self.trajectory)

    def image(self, fid: int) -> np.ndarray:
        return read_pgm(self.root / "images" / f"frame_{fid:06d}.pgm")

    def split(self, tag: str) -> list:
        return [p for p in self.pairs if p.split == tag]

    def submap_cloud(self, sm: SubmapRecord) -> PointCloud:
        """Map points inside the submap region, in its local coordinates."""
        P = self.map.points
        inside = np.all((P >= sm.lo) & (P <= sm.hi), axis=1)
        inten = self.map.intensity[inside] if self.map.intensity is not None else None
        return PointCloud(P[inside] - sm.origin, f"submap{sm.index}", inten)


def _read_csv(path: Path, required: list) -> list[dict]:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if rows and set(required) - set(rows[0]):
        raise DataError(f"{path}: missing columns {sorted(set(required) - set(rows[0]))}")
    return rows


def read_dataset(root, load_pairs: bool = True) -> DiskDataset:
    """Load a directory written by :func:`write_dataset`.

    Raises:
        DataError: missing files, bad columns or unreadable content.
    """
    root = Path(root)
    try:
        pts, extra = read_ply(root / "map.ply")
        cloud = PointCloud(pts, "map", extra.get("intensity"))
        traj = []
        for row in _read_csv(root / "trajectory.csv", ["frame"]):
            M = np.array([float(row[f"r{i}{j}" if j < 3 else f"t{i}"]) for i in range(3) for j in range(4)])
            M = M.reshape(3, 4)
            traj.append((int(row["frame"]), PoseSE3(M[:, :3], M[:, 3])))
        cam = _read_csv(root / "camera.csv", CAMERA_FIELDS)
        if len(cam) != 1:
            raise DataError(f"{root / 'camera.csv'}: expected one row")
        c = cam[0]
        K = CameraIntrinsics(float(c["fx"]), float(c["fy"]), float(c["cx"]), float(c["cy"]),
                             int(c["width"]), int(c["height"]))
        submaps = []
        for row in _read_csv(root / "submaps.csv", ["submap", "split"]):
            vec = lambda *keys: np.array([float(row[k]) for k in keys])
            submaps.append(SubmapRecord(int(row["submap"]), row["split"], int(row["first_frame"]),
                                        int(row["last_frame"]), vec("ox", "oy", "oz"),
                                        vec("lo_x", "lo_y", "lo_z"), vec("hi_x", "hi_y", "hi_z")))
        pairs = []
        if load_pairs:
            for row in _read_csv(root / "pairs" / "index.csv", INDEX_FIELDS):
                i = int(row["pair"])
                kp3 = Keypoint3D(np.array([float(row[k]) for k in ("x", "y", "z")]), float(row["saliency"]))
                kp2 = Keypoint2D(float(row["u"]), float(row["v"]), float(row["scale"]), float(row["response"]))
                q = read_pgm(root / "pairs" / f"patch_{i:06d}.pgm")
                vol_pts, _ = read_ply(root / "pairs" / f"volume_{i:06d}.ply")
                vol = LocalVolume(vol_pts, kp3, int(row["volume_count"]))
                pairs.append(LabeledPair(Patch(q - q.mean(), kp2), vol, kp2, kp3, int(row["support_views"]),
                                         int(row["frame"]), int(row["submap"]), float(row["residual_px"]),
                                         int(row["keypoint_id"]), row["split"], q))
    except OSError as exc:
        raise DataError(f"{root}: {exc}") from exc
    except (KeyError, ValueError) as exc:
        raise DataError(f"{root}: malformed dataset ({exc})") from exc
    return DiskDataset(root, cloud, traj, K, submaps, pairs)
