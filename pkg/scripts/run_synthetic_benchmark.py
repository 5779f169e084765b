"""Synthetic benchmark: synth, train each network, evaluate against two baselines.

Prints a per-scene table of IoU / ACC for the residual and dense networks,
optionally with the L1 term, next to a constant-0.5 map and a single
calibrated threshold on coherence.  All artifacts stay under ``--out``.

    python scripts/run_synthetic_benchmark.py --out runs/bench
    python scripts/run_synthetic_benchmark.py --out runs/quick --size 512x512 --epochs 5 --variants residual
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from forestseg import cli, evaluation as ev


def run(args: list) -> None:
    code = cli.main([str(a) for a in args])
    if code != 0:
        sys.exit(f"forestseg {args[0]} failed with exit code {code}")


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--scenes", type=int, default=5)
    p.add_argument("--holdout", type=int, default=2)
    p.add_argument("--size", default="1024x1024")
    p.add_argument("--seed", type=int, default=2024)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--variants", nargs="+", default=["residual", "dense"], choices=["residual", "dense"])
    p.add_argument("--l1-ablation", action="store_true", help="also train every variant with the L1 term")
    a = p.parse_args()

    synth = a.out / "synth"
    t0 = time.perf_counter()
    run(["synth", "--out", synth, "--scenes", a.scenes, "--holdout", a.holdout, "--size", a.size, "--seed", a.seed])
    holdout = synth / "holdout"

    runs = [(v, False) for v in a.variants] + ([(v, True) for v in a.variants] if a.l1_ablation else [])
    timings = {}
    for variant, l1 in runs:
        name = variant + ("+l1" if l1 else "")
        t = time.perf_counter()
        extra = ["--with-l1"] if l1 else []
        run(["train", "--tiles", synth / "tiles.fnt", "--out", a.out / name, "--variant", variant,
             "--epochs", a.epochs, "--init-seed", a.seed, "--shuffle-seed", a.seed, "--split-seed", a.seed] + extra)
        run(["evaluate", "--checkpoint", a.out / name / "model.fsm", "--scenes", holdout,
             "--out", a.out / f"eval_{name}"])
        timings[name] = time.perf_counter() - t

    cal = a.out / f"{runs[0][0]}{'+l1' if runs[0][1] else ''}" / "calibration.fnt"
    for kind in ("constant", "coherence"):
        run(["evaluate", "--predictor", kind, "--calibration", cal, "--scenes", holdout, "--out", a.out / f"eval_{kind}"])

    names = [v + ("+l1" if l1 else "") for v, l1 in runs] + ["constant", "coherence"]
    table = {n: ev.read_report(a.out / f"eval_{n}" / "report.tsv") for n in names}
    print(f"\n{'predictor':<14}{'scene':<12}{'IoU':>8}{'ACC':>8}{'phi':>8}")
    for n in names:
        for row in table[n]:
            print(f"{n:<14}{row['scene_id']:<12}{row['iou']:>8.8}{row['acc']:>8.8}{row['phi']:>8.8}")
    summary = {"runs": {n: table[n] for n in names}, "train_seconds": timings,
               "total_seconds": time.perf_counter() - t0}
    (a.out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    print(f"\nsummary written to {a.out / 'summary.json'} ({summary['total_seconds'] / 60:.1f} min)")


if __name__ == "__main__":
    main()
