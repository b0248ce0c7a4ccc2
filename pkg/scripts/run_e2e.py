"""Full synthetic experiment: dataset, training, recall, localization and negative control.

Usage:
    python scripts/run_e2e.py [--config configs/e2e.toml] [--out-dir runs/e2e]

Writes the checkpoint, map database, loss/recall/curve tables and report.json
to the output directory and prints a short summary with stage timings.
"""
import argparse
import json
import logging
from pathlib import Path

from crossloc.config import load_config
from crossloc.experiment import run_end_to_end

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", type=Path, default=ROOT / "configs" / "e2e.toml")
    ap.add_argument("--out-dir", type=Path, default=ROOT / "runs" / "e2e")
    ap.add_argument("--no-negative", action="store_true", help="skip the cross-scene negative control")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    run = run_end_to_end(load_config(args.config), args.out_dir, negative_control=not args.no_negative)
    rep = run.report
    ev, tr = rep["evaluation"], rep["training"]
    print(f"pairs: {rep['dataset']['train_pairs']} train / {rep['dataset']['test_pairs']} test")
    print(f"loss: {tr['initial_loss']:.4f} -> {tr['history'][-1]:.4f} over {len(tr['history'])} epochs")
    if ev["recall"]:
        print("recall@1..10:", " ".join(f"{r:.3f}" for r in ev["recall"]))
    print(f"localized: {ev['successes']}/{ev['frames']} held-out frames, failures {ev['failures']}")
    if rep["negative_control"]:
        print("negative control:", json.dumps(rep["negative_control"]))
    print("timings (s):", {k: round(v, 1) for k, v in run.timings.items()})
    (args.out_dir / "timings.json").write_text(json.dumps(run.timings, indent=2) + "\n")


if __name__ == "__main__":
    main()
