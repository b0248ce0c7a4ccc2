"""End-to-end synthetic run: scene, labels, training, retrieval and localization.

Mirrors the CLI stages in memory and adds a cross-scene negative control,
where the held-out frames are localized against the map of a scene built
from a different seed.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .config import PipelineConfig
from .detect3d import PointCloud
from .embed.checkpoint import save_checkpoint
from .embed.train import train
from .matching import write_db
from .pipeline import (build_map_db, evaluate, localize, pairs_db, recall_at_k, report_document, report_text,
                       write_curve_csv, write_json, write_recall_csv)
from .synth.dataset import build_dataset, pair_groups
from .synth.scene import _texture_table, generate_scene, place_structures, sample_map

log = logging.getLogger(__name__)

NEGATIVE_SEED_OFFSET = 1000


def region_cloud(points, intensity, submaps) -> PointCloud:
    """Map points inside the union of the submaps' world boxes."""
    inside = np.zeros(len(points), dtype=bool)
    for s in submaps:
        inside |= np.all((points >= s.lo) & (points <= s.hi), axis=1)
    return PointCloud(points[inside], "region", intensity[inside])


def other_scene_map(config, seed_offset: int = NEGATIVE_SEED_OFFSET):
    """Map of an unrelated scene with the same layout parameters (no rendering)."""
    cfg = replace(config, seed=config.seed + seed_offset)
    structures = place_structures(cfg)
    P, _, _, inten = sample_map(cfg, structures, _texture_table(cfg))
    return P, inten


def _localize_all(frames, images, poses, db, img_params, cfg: PipelineConfig):
    out = []
    for fid in frames:
        out.append(localize(images[fid], db, img_params, cfg.scene.intrinsics, cfg.detect2d, cfg.match, cfg.ransac,
                            frame=fid, gt=poses[fid]))
    return out


def _loss_csv(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        for e, v in enumerate(history):
            w.writerow([e, repr(v)])


@dataclass(eq=False)
class EndToEndRun:
    report: dict  # the report.json document
    dataset: object  # in-memory Dataset, for audits
    timings: dict  # wall seconds per stage (kept out of the report)


def run_end_to_end(cfg: PipelineConfig, out_dir=None, negative_control: bool = True) -> EndToEndRun:
    """Run every stage and return the report, the dataset and the timings.

    The report holds the loss trace, recall@k on held-out pairs, the held-out
    localization results and the negative-control ratios. When ``out_dir`` is given, the checkpoint, map database, loss,
    recall and curve tables and ``report.json`` / ``report.txt`` are written.
    """
    timings = {}
    t = time.perf_counter()
    scene = generate_scene(cfg.scene)
    ds = build_dataset(scene, cfg.labels.rules, cfg.detect2d, cfg.detect3d, cfg.labels.test_fraction)
    timings["dataset_s"] = time.perf_counter() - t
    tr, te = ds.split("train"), ds.split("test")
    log.info("dataset: %d train / %d test pairs", len(tr), len(te))

    t = time.perf_counter()
    res = train([(p.patch, p.volume) for p in tr], cfg.train, groups=pair_groups(tr))
    timings["train_s"] = time.perf_counter() - t

    recall = recall_at_k(pairs_db(te, res.point_params), te, res.image_params, cfg.eval.k_max) if te else None

    t = time.perf_counter()
    held_out = [s for s in ds.submaps if s.split == "test"]
    frames = [f for s in held_out for f in s.frames]
    images = {fid: img for (fid, _), img in zip(scene.trajectory, scene.images)}
    poses = scene.poses
    db, counts = build_map_db(region_cloud(scene.map.points, scene.map.intensity, held_out), res.point_params,
                              cfg.detect3d)
    results = _localize_all(frames, images, poses, db, res.image_params, cfg)
    report = evaluate(results, poses, cfg.eval, recall)
    timings["localize_s"] = time.perf_counter() - t

    negative = None
    if negative_control:
        t = time.perf_counter()
        P, inten = other_scene_map(cfg.scene)
        neg_db, neg_counts = build_map_db(region_cloud(P, inten, held_out), res.point_params, cfg.detect3d)
        neg = evaluate(_localize_all(frames, images, poses, neg_db, res.image_params, cfg), poses, cfg.eval)
        negative = {
            "seed": cfg.scene.seed + NEGATIVE_SEED_OFFSET,
            "db": neg_counts["db"],
            "frames": len(neg.results),
            "pose_returned_ratio": sum(r.succeeded for r in neg.results) / max(1, len(neg.results)),
            "success_ratio": neg.success_ratio,
        }
        timings["negative_s"] = time.perf_counter() - t

    doc = report_document("end-to-end", report, extra={
        "dataset": {"train_pairs": len(tr), "test_pairs": len(te),
                    "train_keypoints": len({p.keypoint_id for p in tr}),
                    "test_keypoints": len({p.keypoint_id for p in te}), "stages": ds.stats},
        "training": {"initial_loss": res.initial_loss, "history": res.history},
        "map_db": counts,
        "negative_control": negative,
        "config": cfg.to_dict(),
    })
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "model.x2d3d", res.image_params, res.point_params)
        write_db(out / "map.x2db", db)
        _loss_csv(out / "loss.csv", res.history)
        write_curve_csv(out / "curve.csv", report.curve)
        if recall is not None:
            write_recall_csv(out / "recall.csv", recall)
        write_json(out / "report.json", doc)
        (out / "report.txt").write_text(report_text(report))
    return EndToEndRun(doc, ds, timings)
