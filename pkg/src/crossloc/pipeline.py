"""Map embedding, query localization, evaluation and report writing."""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import EvalConfig, MatchConfig
from .detect2d import DogParams, Rejected, extract_patch, image_keypoints
from .detect3d import MapKeypointParams, PointCloud, map_keypoints, nms_keypoints_3d, volumes_for_keypoints
from .embed.nets import embed_images, embed_volumes
from .errors import EmptyDatabase, EmptyTestSet, MissingGroundTruth
from .geometry import CameraIntrinsics, PoseSE3, rotation_error_deg, translation_error
from .matching import DescriptorDB, build_index, knn_batch, match_keypoints
from .pose import Failure, PoseEstimate, RansacConfig, ransac_pnp
from .synth.dataset import _quantized_patch

SCHEMA_VERSION = 1


def build_map_db(cloud: PointCloud, point_params: dict, params: MapKeypointParams = MapKeypointParams()):
    """Ground removal, ISS, 4 m thinning, volumes and point-branch descriptors for a map.

    Returns:
        (DescriptorDB, stage counts)

    Raises:
        EmptyDatabase: no keypoint survives the filters.
    """
    rest, kps, counts = map_keypoints(cloud, params)
    if params.db_nms and params.keypoint_nms_radius > 0:
        kps = nms_keypoints_3d(kps, params.keypoint_nms_radius)
    counts["after_nms"] = len(kps)
    vols, kept, rejected = volumes_for_keypoints(rest, kps, params)
    counts = {**counts, "volume_rejected": rejected, "db": len(kept)}
    if not kept:
        raise EmptyDatabase(f"no map keypoint survived ({counts})")
    desc = embed_volumes(point_params, vols)
    return build_index(list(zip(kept, desc))), counts


@dataclass(frozen=True, eq=False)
class LocalizationResult:
    frame: int
    estimate: PoseSE3 | Failure
    translation_error: float | None = None
    rotation_error: float | None = None
    inliers: int = 0
    candidates: int = 0
    keypoints: int = 0  # accepted patches
    wall_ms: float = 0.0

    @property
    def succeeded(self) -> bool:
        return isinstance(self.estimate, PoseSE3)

    def with_ground_truth(self, gt: PoseSE3) -> "LocalizationResult":
        if not self.succeeded:
            return self
        return LocalizationResult(self.frame, self.estimate, translation_error(self.estimate, gt),
                                  rotation_error_deg(self.estimate.rotation, gt.rotation), self.inliers,
                                  self.candidates, self.keypoints, self.wall_ms)


def query_patches(img, dog: DogParams = DogParams()):
    """Every DoG keypoint of a query image with an in-bounds patch of acceptable scale."""
    kps, patches = [], []
    for kp in image_keypoints(img, dog):
        raw = extract_patch(img, kp, dog.base_size, dog.scale_threshold)
        if isinstance(raw, Rejected):
            continue
        kps.append(kp)
        patches.append(_quantized_patch(raw, kp)[0])
    return kps, patches


def localize(img, db: DescriptorDB, image_params: dict, K: CameraIntrinsics, dog: DogParams = DogParams(),
             match: MatchConfig = MatchConfig(), ransac: RansacConfig = RansacConfig(), frame: int = -1,
             gt: PoseSE3 | None = None) -> LocalizationResult:
    """Detect, describe, match top-K and solve the pose; failures are returned, not raised."""
    t0 = time.perf_counter()
    kps, patches = query_patches(img, dog)
    if not kps:
        return LocalizationResult(frame, Failure("NoKeypoints"), wall_ms=(time.perf_counter() - t0) * 1e3)
    desc = embed_images(image_params, patches)
    hyps = match_keypoints(db, kps, desc, match.K, match.max_distance)
    n_cand = sum(len(h.candidates) for h in hyps)
    est = ransac_pnp(hyps, K, ransac)
    ms = (time.perf_counter() - t0) * 1e3
    if isinstance(est, PoseEstimate):
        res = LocalizationResult(frame, est.pose, None, None, len(est.inliers), n_cand, len(kps), ms)
    else:
        res = LocalizationResult(frame, est, None, None, 0, n_cand, len(kps), ms)
    return res.with_ground_truth(gt) if gt is not None else res


@dataclass(frozen=True, eq=False)
class EvalReport:
    results: list
    precision: tuple
    success_ratio: float
    mean_translation_error: float | None
    mean_rotation_error: float | None
    tight_precision: tuple
    tight_success_ratio: float
    curve: list  # (threshold m, threshold deg, ratio)
    recall: list | None = None  # recall@1..k


def _within(r: LocalizationResult, m: float, deg: float) -> bool:
    return r.succeeded and r.translation_error <= m and r.rotation_error <= deg


def evaluate(results, gt: dict, config: EvalConfig = EvalConfig(), recall=None) -> EvalReport:
    """Success ratios, averages over successes and the success-vs-threshold curve.

    Raises:
        MissingGroundTruth: a result's frame has no ground-truth pose.
    """
    results = sorted(results, key=lambda r: r.frame)
    filled = []
    for r in results:
        if r.frame not in gt:
            raise MissingGroundTruth(f"frame {r.frame} has no ground-truth pose")
        filled.append(r.with_ground_truth(gt[r.frame]))
    n = len(filled)
    ok = [r for r in filled if _within(r, config.precision_m, config.precision_deg)]
    ratio = len(ok) / n if n else 0.0
    t_mean = float(np.mean([r.translation_error for r in ok])) if ok else None
    r_mean = float(np.mean([r.rotation_error for r in ok])) if ok else None
    tight = sum(_within(r, config.tight_m, config.tight_deg) for r in filled) / n if n else 0.0
    ms = np.geomspace(config.curve_min_m, config.curve_max_m, config.curve_points)
    per_m = config.precision_deg / config.precision_m
    curve = []
    for m in ms:
        deg = min(180.0, m * per_m)
        c = sum(_within(r, m, deg) for r in filled) / n if n else 0.0
        curve.append((float(m), float(deg), float(c)))
    return EvalReport(filled, (config.precision_m, config.precision_deg), ratio, t_mean, r_mean,
                      (config.tight_m, config.tight_deg), tight, curve, recall)


def pairs_db(pairs, point_params: dict) -> DescriptorDB:
    """Database of the distinct 3D keypoints behind ``pairs`` (first volume of each)."""
    seen, kps, vols = set(), [], []
    for p in pairs:
        key = tuple(p.keypoint3d.position.tolist())
        if key not in seen:
            seen.add(key)
            kps.append(p.keypoint3d)
            vols.append(p.volume)
    if not kps:
        raise EmptyDatabase("no keypoints in the pair set")
    return build_index(list(zip(kps, embed_volumes(point_params, vols))))


def recall_at_k(db: DescriptorDB, pairs, image_params: dict, k_max: int = 10) -> list[float]:
    """Fraction of patches whose true 3D keypoint is among their top-k candidates, k = 1..k_max.

    The true keypoint is identified by exact position equality with a DB entry.

    Raises:
        EmptyTestSet: no pairs given.
    """
    pairs = list(pairs)
    if not pairs:
        raise EmptyTestSet("no labeled test pairs")
    k = min(k_max, len(db))
    idx, _ = knn_batch(db, embed_images(image_params, [p.patch for p in pairs]), k)
    pos = np.array([kp.position for kp in db.keypoints])
    rank = np.full(len(pairs), np.inf)
    for i, p in enumerate(pairs):
        hit = np.nonzero(np.all(pos[idx[i]] == p.keypoint3d.position, axis=1))[0]
        if len(hit):
            rank[i] = hit[0]
    return [float(np.mean(rank < j)) for j in range(1, k_max + 1)]


# reports

def _num(x):
    return None if x is None or (isinstance(x, float) and not math.isfinite(x)) else x


def result_row(r: LocalizationResult) -> dict:
    row = {"frame": r.frame, "status": "success" if r.succeeded else r.estimate.reason,
           "translation_error_m": _num(r.translation_error), "rotation_error_deg": _num(r.rotation_error),
           "inliers": r.inliers, "candidates": r.candidates, "keypoints": r.keypoints}
    row["pose"] = r.estimate.matrix34().tolist() if r.succeeded else None
    return row


def report_document(command: str, report: EvalReport | None = None, extra: dict | None = None) -> dict:
    """Versioned JSON document; every field is present even when nothing succeeded."""
    doc = {"schema_version": SCHEMA_VERSION, "command": command}
    if report is not None:
        ok = sum(_within(r, *report.precision) for r in report.results)
        doc["evaluation"] = {
            "frames": len(report.results),
            "successes": ok,
            "precision": {"m": report.precision[0], "deg": report.precision[1]},
            "success_ratio": report.success_ratio,
            "mean_translation_error_m": _num(report.mean_translation_error),
            "mean_rotation_error_deg": _num(report.mean_rotation_error),
            "averages_over": "successes",
            "tight_precision": {"m": report.tight_precision[0], "deg": report.tight_precision[1]},
            "tight_success_ratio": report.tight_success_ratio,
            "failures": _failure_counts(report.results),
            "curve": [{"m": m, "deg": d, "ratio": c} for m, d, c in report.curve],
            "recall": report.recall,
            "results": [result_row(r) for r in report.results],
        }
    if extra:
        doc.update(extra)
    return doc


def _failure_counts(results) -> dict:
    out = {"NoKeypoints": 0, "NotEnoughInliers": 0, "AllSamplesDegenerate": 0}
    for r in results:
        if not r.succeeded:
            out[r.estimate.reason] = out.get(r.estimate.reason, 0) + 1
    return out


def write_json(path, doc: dict) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def write_curve_csv(path, curve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold_m", "threshold_deg", "success_ratio"])
        for m, d, c in curve:
            w.writerow([repr(m), repr(d), repr(c)])


def write_recall_csv(path, recall) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "recall"])
        for k, r in enumerate(recall, start=1):
            w.writerow([k, repr(r)])


def _fmt(x, spec=".3f"):
    return "-" if x is None else format(x, spec)


def report_text(report: EvalReport) -> str:
    """Human-readable summary table plus one line per frame."""
    m, deg = report.precision
    tm, tdeg = report.tight_precision
    n = len(report.results)
    ok = sum(_within(r, m, deg) for r in report.results)
    lines = [
        f"frames               {n}",
        f"success ({m:g} m, {deg:g} deg)  {ok}/{n} = {report.success_ratio:.3f}",
        f"success ({tm:g} m, {tdeg:g} deg)  {report.tight_success_ratio:.3f}",
        f"mean T error (m)     {_fmt(report.mean_translation_error)}  (over successes)",
        f"mean R error (deg)   {_fmt(report.mean_rotation_error)}  (over successes)",
    ]
    if report.recall:
        lines.append("recall@k             " + " ".join(f"{r:.3f}" for r in report.recall))
    lines += ["", f"{'frame':>6} {'status':>20} {'T err m':>9} {'R err deg':>9} {'inliers':>7} "
                  f"{'cands':>6} {'ms':>8}"]
    for r in report.results:
        status = "success" if r.succeeded else r.estimate.reason
        lines.append(f"{r.frame:>6} {status:>20} {_fmt(r.translation_error):>9} {_fmt(r.rotation_error):>9} "
                     f"{r.inliers:>7} {r.candidates:>6} {r.wall_ms:>8.1f}")
    return "\n".join(lines) + "\n"
