"""Seconds per 128x128 tile for one training pass and for inference, per variant.

Useful for sizing a run: an epoch costs roughly (training tiles) x (train s/tile).

    python scripts/measure_throughput.py --batch 32 --micro-batch 8
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from forestseg import losses, models, train


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--micro-batch", type=int, default=8)
    p.add_argument("--repeats", type=int, default=2)
    a = p.parse_args()

    rng = np.random.default_rng(0)
    x = rng.standard_normal((a.batch, 3, 128, 128)).astype(np.float32)
    y = (rng.uniform(size=(a.batch, 1, 128, 128)) > 0.5).astype(np.float32)
    for variant in models.VARIANTS:
        m = models.build_model(variant, 0)
        t = time.perf_counter()
        for _ in range(a.repeats):
            train.gradient_step(m, x, y, losses.LossConfig(), a.micro_batch)
        step = (time.perf_counter() - t) / (a.repeats * a.batch)
        t = time.perf_counter()
        for _ in range(a.repeats):
            models.forward(m, x[: a.micro_batch])
        infer = (time.perf_counter() - t) / (a.repeats * a.micro_batch)
        print(f"{variant:<9} train {step:.3f} s/tile   inference {infer:.3f} s/tile")


if __name__ == "__main__":
    main()
