"""Command-line entry point: synth, train, embed-map, localize, eval, recall, gradcheck.

Exit codes: 0 success, 1 gradient check failed, 2 configuration error,
3 data error, 4 evaluation produced zero successes.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .config import PipelineConfig, load_config
from .detect3d import PointCloud
from .embed.checkpoint import load_checkpoint, save_checkpoint
from .embed.gradcheck import GradCheckConfig, gradient_check
from .embed.train import train
from .errors import ConfigError, DataError
from .geometry import PoseSE3
from .matching import read_db, write_db
from .pipeline import (LocalizationResult, build_map_db, evaluate, localize, pairs_db, recall_at_k,
                       report_document, report_text, write_curve_csv, write_json, write_recall_csv)
from .pose import Failure
from .synth.dataset import build_dataset, pair_groups, read_dataset, write_dataset
from .synth.scene import generate_scene

log = logging.getLogger("crossloc")

EXIT_OK, EXIT_GRADCHECK, EXIT_CONFIG, EXIT_DATA, EXIT_NO_SUCCESS = 0, 1, 2, 3, 4
RESULT_FIELDS = ["frame", "status", "inliers", "candidates", "keypoints", "wall_ms"] + [
    f"r{i}{j}" if j < 3 else f"t{i}" for i in range(3) for j in range(4)]


def _out(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_synth(args, cfg: PipelineConfig) -> int:
    t0 = time.perf_counter()
    scene = generate_scene(cfg.scene)
    ds = build_dataset(scene, cfg.labels.rules, cfg.detect2d, cfg.detect3d, cfg.labels.test_fraction)
    out = _out(args)
    write_dataset(out, ds)
    doc = report_document("synth", extra={
        "frames": len(scene.trajectory), "map_points": len(scene.map), "submaps": len(ds.submaps),
        "pairs": {"train": len(ds.split("train")), "test": len(ds.split("test"))},
        "keypoints": len({p.keypoint_id for p in ds.pairs}), "stages": ds.stats})
    write_json(out / "report.json", doc)
    (out / "report.txt").write_text(
        f"frames {len(scene.trajectory)}\nmap points {len(scene.map)}\nsubmaps {len(ds.submaps)}\n"
        f"pairs train {len(ds.split('train'))} test {len(ds.split('test'))}\n")
    log.info("synth done in %.1f s: %d pairs", time.perf_counter() - t0, len(ds.pairs))
    return EXIT_OK


def cmd_train(args, cfg: PipelineConfig) -> int:
    ds = read_dataset(args.data)
    pairs = ds.split("train")
    out = _out(args)
    history_path = out / "loss.csv"
    with open(history_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss"])

        def on_epoch(epoch, loss):
            w.writerow([epoch, repr(loss)])
            fh.flush()

        res = train([(p.patch, p.volume) for p in pairs], cfg.train, on_epoch=on_epoch, groups=pair_groups(pairs))
    save_checkpoint(out / "model.x2d3d", res.image_params, res.point_params)
    doc = report_document("train", extra={
        "pairs": len(pairs), "keypoints": int(pair_groups(pairs).max()) + 1 if pairs else 0,
        "initial_loss": res.initial_loss, "final_loss": res.history[-1] if res.history else None,
        "history": res.history})
    write_json(out / "report.json", doc)
    (out / "report.txt").write_text(
        f"pairs {len(pairs)}\ninitial loss {res.initial_loss:.6f}\n"
        + (f"final loss {res.history[-1]:.6f}\n" if res.history else ""))
    return EXIT_OK


def _region_cloud(ds, split: str):
    subs = [s for s in ds.submaps if split == "all" or s.split == split]
    if not subs:
        raise DataError(f"no submap with split {split!r}")
    P = ds.map.points
    inside = np.zeros(len(P), dtype=bool)
    for s in subs:
        inside |= np.all((P >= s.lo) & (P <= s.hi), axis=1)
    return PointCloud(P[inside], "map", ds.map.intensity[inside] if ds.map.intensity is not None else None)


def cmd_embed_map(args, cfg: PipelineConfig) -> int:
    ds = read_dataset(args.data, load_pairs=False)
    _, pts, _ = load_checkpoint(args.checkpoint)
    db, counts = build_map_db(_region_cloud(ds, args.split), pts, cfg.detect3d)
    out = _out(args)
    write_db(out / "map.x2db", db)
    write_json(out / "report.json", report_document("embed-map", extra={"split": args.split, "stages": counts}))
    (out / "report.txt").write_text("".join(f"{k} {v}\n" for k, v in counts.items()))
    return EXIT_OK


def _frames(ds, args) -> list[int]:
    if args.frames:
        try:
            return [int(f) for f in args.frames.split(",")]
        except ValueError as exc:
            raise ConfigError(f"--frames: {exc}") from exc
    subs = [s for s in ds.submaps if args.split == "all" or s.split == args.split]
    return [fid for fid, _ in ds.trajectory if any(s.contains(fid) for s in subs)]


def write_results_csv(path, results) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_FIELDS)
        for r in results:
            status = "success" if r.succeeded else r.estimate.reason
            M = r.estimate.matrix34().ravel() if r.succeeded else [""] * 12
            w.writerow([r.frame, status, r.inliers, r.candidates, r.keypoints, f"{r.wall_ms:.3f}"]
                       + [repr(float(v)) if r.succeeded else "" for v in M])


def read_results_csv(path) -> list[LocalizationResult]:
    out = []
    try:
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                if row["status"] == "success":
                    M = np.array([float(row[k]) for k in RESULT_FIELDS[6:]]).reshape(3, 4)
                    est = PoseSE3(M[:, :3], M[:, 3])
                else:
                    est = Failure(row["status"])
                out.append(LocalizationResult(int(row["frame"]), est, None, None, int(row["inliers"]),
                                              int(row["candidates"]), int(row["keypoints"]), float(row["wall_ms"])))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: malformed results ({exc})") from exc
    return out


def cmd_localize(args, cfg: PipelineConfig) -> int:
    ds = read_dataset(args.data, load_pairs=False)
    img_params, _, _ = load_checkpoint(args.checkpoint)
    db = read_db(args.db)
    poses = ds.poses
    results = []
    for fid in _frames(ds, args):
        if fid not in poses:
            raise DataError(f"frame {fid} is not in the trajectory")
        r = localize(ds.image(fid), db, img_params, ds.intrinsics, cfg.detect2d, cfg.match, cfg.ransac,
                     frame=fid, gt=poses[fid])
        log.info("frame %d: %s", fid, "success" if r.succeeded else r.estimate.reason)
        results.append(r)
    out = _out(args)
    write_results_csv(out / "results.csv", results)
    report = evaluate(results, poses, cfg.eval)
    write_json(out / "report.json", report_document("localize", report))
    (out / "report.txt").write_text(report_text(report))
    return EXIT_OK


def _read_recall(path):
    try:
        with open(path, newline="") as fh:
            return [float(row["recall"]) for row in csv.DictReader(fh)]
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: malformed recall table ({exc})") from exc


def cmd_eval(args, cfg: PipelineConfig) -> int:
    ds = read_dataset(args.data, load_pairs=False)
    results = read_results_csv(args.results)
    recall = _read_recall(args.recall) if args.recall else None
    report = evaluate(results, ds.poses, cfg.eval, recall)
    out = _out(args)
    write_json(out / "report.json", report_document("eval", report))
    (out / "report.txt").write_text(report_text(report))
    write_curve_csv(out / "curve.csv", report.curve)
    if recall is not None:
        write_recall_csv(out / "recall.csv", recall)
    ok = sum(r.succeeded and r.translation_error <= report.precision[0]
             and r.rotation_error <= report.precision[1] for r in report.results)
    return EXIT_OK if ok else EXIT_NO_SUCCESS


def cmd_recall(args, cfg: PipelineConfig) -> int:
    ds = read_dataset(args.data)
    img_params, pts, _ = load_checkpoint(args.checkpoint)
    pairs = ds.split(args.split)
    db = read_db(args.db) if args.db else pairs_db(pairs, pts)
    rec = recall_at_k(db, pairs, img_params, cfg.eval.k_max)
    out = _out(args)
    write_recall_csv(out / "recall.csv", rec)
    write_json(out / "report.json", report_document("recall", extra={
        "pairs": len(pairs), "db": len(db), "recall": rec}))
    (out / "report.txt").write_text("".join(f"recall@{k} {r:.4f}\n" for k, r in enumerate(rec, 1)))
    return EXIT_OK


def cmd_gradcheck(args, cfg: PipelineConfig) -> int:
    res = gradient_check(GradCheckConfig(seed=cfg.train.seed), trials=args.trials)
    out = _out(args)
    doc = report_document("gradcheck", extra={
        "max_relative_error": res.max_error, "tolerance": args.tolerance, "trials": res.trials,
        "entries_checked": res.checked, "entries_straddling_kink": res.straddled,
        "passed": res.max_error <= args.tolerance})
    write_json(out / "report.json", doc)
    line = (f"max relative error {res.max_error:.3e} over {res.trials} trials "
            f"({res.checked} entries, {res.straddled} skipped at kinks)\n")
    (out / "report.txt").write_text(line)
    print(line, end="")
    return EXIT_OK if res.max_error <= args.tolerance else EXIT_GRADCHECK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "embed-map": cmd_embed_map, "localize": cmd_localize,
            "eval": cmd_eval, "recall": cmd_recall, "gradcheck": cmd_gradcheck}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML configuration file")
    common.add_argument("--seed", type=int, help="override every stage seed")
    common.add_argument("--out-dir", default="out", help="output directory (default: out)")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="crossloc", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate a scene and its labeled dataset")
    s = sub.add_parser("train", parents=[common], help="train both descriptor branches")
    s.add_argument("--data", required=True)
    s = sub.add_parser("embed-map", parents=[common], help="build the map descriptor database")
    s.add_argument("--data", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--split", default="test", choices=["train", "test", "all"])
    s = sub.add_parser("localize", parents=[common], help="localize query frames against a database")
    s.add_argument("--data", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--db", required=True)
    s.add_argument("--split", default="test", choices=["train", "test", "all"])
    s.add_argument("--frames", help="comma-separated frame ids (overrides --split)")
    s = sub.add_parser("eval", parents=[common], help="score localization results against ground truth")
    s.add_argument("--data", required=True)
    s.add_argument("--results", required=True, help="results.csv written by localize")
    s.add_argument("--recall", help="recall.csv written by recall")
    s = sub.add_parser("recall", parents=[common], help="recall@k of labeled pairs")
    s.add_argument("--data", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--db", help="database file (default: the keypoints of the evaluated pairs)")
    s.add_argument("--split", default="test", choices=["train", "test"])
    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    s.add_argument("--trials", type=int, default=10)
    s.add_argument("--tolerance", type=float, default=1e-4)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.seed)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
