"""Threshold-pair calibration by maximum phi, and ACC / IoU scoring.

A pixel is positive iff its value is strictly greater than the threshold,
for prediction and reference alike.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import DimensionError

GRID_STEP = 0.01


class UndefinedMetricError(ArithmeticError):
    """The metric has a zero denominator for these counts."""


class DegenerateMarginError(UndefinedMetricError):
    """One of P, N, RP, RN is zero, so phi is undefined."""


class CalibrationError(RuntimeError):
    """No threshold pair on the grid yields a defined phi."""


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    @property
    def p(self) -> int:
        return self.tp + self.fp

    @property
    def n(self) -> int:
        return self.tn + self.fn

    @property
    def rp(self) -> int:
        return self.tp + self.fn

    @property
    def rn(self) -> int:
        return self.fp + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn)


@dataclass(frozen=True)
class ThresholdPair:
    t_pred: float
    t_ref: float
    phi: float = float("nan")


def threshold_grid(step: float = GRID_STEP) -> np.ndarray:
    n = int(round(1.0 / step))
    return np.arange(n) / n


def confusion(pred_map, ref_map, pair: ThresholdPair) -> ConfusionCounts:
    pred_map, ref_map = np.asarray(pred_map), np.asarray(ref_map)
    if pred_map.shape != ref_map.shape:
        raise DimensionError(f"prediction {pred_map.shape} and reference {ref_map.shape} differ in shape")
    p = pred_map > pair.t_pred
    r = ref_map > pair.t_ref
    tp = int(np.count_nonzero(p & r))
    fp = int(np.count_nonzero(p & ~r))
    fn = int(np.count_nonzero(~p & r))
    return ConfusionCounts(tp, p.size - tp - fp - fn, fp, fn)


def accuracy(c: ConfusionCounts) -> float:
    if c.total == 0:
        raise UndefinedMetricError("accuracy of an empty confusion table")
    return (c.tp + c.tn) / c.total


def iou(c: ConfusionCounts) -> float:
    denom = c.tp + c.fp + c.fn
    if denom == 0:
        raise UndefinedMetricError("IoU is undefined when both masks are empty")
    return c.tp / denom


def pearson_phi(c: ConfusionCounts) -> float:
    if min(c.p, c.n, c.rp, c.rn) == 0:
        raise DegenerateMarginError(f"degenerate margins in {c}")
    # products of pixel counts overflow int64 for large scenes; use Python ints
    num = c.tp * c.tn - c.fp * c.fn
    den = math.sqrt(c.p * c.rp * c.rn * c.n)
    return num / den


def _threshold_bins(values: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Number of grid thresholds strictly below each value; positive at grid[i] iff i < bin."""
    return np.searchsorted(grid, values, side="left")


def confusion_table(pred, ref, grid: np.ndarray | None = None) -> np.ndarray:
    """All confusion counts over the threshold grid at once.

    Returns an int64 array ``[n_grid(pred), n_grid(ref), 4]`` holding
    ``(TP, TN, FP, FN)`` for every ``(t_pred, t_ref)`` pair, computed from
    a joint histogram of per-pixel threshold bins.
    """
    grid = threshold_grid() if grid is None else grid
    pred = np.asarray(pred).ravel()
    ref = np.asarray(ref).ravel()
    if pred.shape != ref.shape:
        raise DimensionError("prediction and reference pixel counts differ")
    g = len(grid)
    bp = _threshold_bins(pred, grid)
    br = _threshold_bins(ref, grid)
    hist = np.bincount(bp * (g + 1) + br, minlength=(g + 1) ** 2).reshape(g + 1, g + 1)
    # S[a, b] = #pixels with bin_pred >= a and bin_ref >= b
    S = hist[::-1, ::-1].cumsum(0).cumsum(1)[::-1, ::-1]
    total = pred.size
    i = np.arange(g)
    tp = S[np.ix_(i + 1, i + 1)]
    pos_pred = S[i + 1, 0][:, None]
    pos_ref = S[0, i + 1][None, :]
    fp = pos_pred - tp
    fn = pos_ref - tp
    tn = total - tp - fp - fn
    return np.stack(np.broadcast_arrays(tp, tn, fp, fn), axis=-1).astype(np.int64)


def find_optimal_thresholds(pred_maps: Sequence[np.ndarray] | np.ndarray,
                            ref_maps: Sequence[np.ndarray] | np.ndarray,
                            grid_step: float = GRID_STEP) -> ThresholdPair:
    """Grid search for the (t_pred, t_ref) pair maximizing phi on pooled pixels.

    Pairs with a degenerate margin are skipped.  Ties go to the lowest
    t_ref, then the lowest t_pred.
    """
    pred = _pool(pred_maps)
    ref = _pool(ref_maps)
    if pred.size == 0:
        raise CalibrationError("calibration set is empty")
    grid = threshold_grid(grid_step)
    table = confusion_table(pred, ref, grid)
    best = None
    for j in range(len(grid)):
        for i in range(len(grid)):
            c = ConfusionCounts(*(int(v) for v in table[i, j]))
            try:
                phi = pearson_phi(c)
            except DegenerateMarginError:
                continue
            if best is None or phi > best[0]:
                best = (phi, i, j)
    if best is None:
        raise CalibrationError("every threshold pair has a degenerate margin")
    phi, i, j = best
    return ThresholdPair(float(grid[i]), float(grid[j]), phi)


def _pool(maps) -> np.ndarray:
    if isinstance(maps, np.ndarray):
        return maps.ravel()
    maps = list(maps)
    if not maps:
        return np.empty(0, np.float32)
    return np.concatenate([np.asarray(m).ravel() for m in maps])


@dataclass
class SceneMetrics:
    scene_id: str
    pair: ThresholdPair
    counts: ConfusionCounts
    phi: float
    acc: float
    iou: float

    REPORT_FIELDS = ("scene_id", "t_pred", "t_ref", "phi", "acc", "iou", "TP", "TN", "FP", "FN")

    def report_line(self) -> str:
        c = self.counts
        vals = [self.scene_id, f"{self.pair.t_pred:.2f}", f"{self.pair.t_ref:.2f}",
                _fmt(self.phi), _fmt(self.acc), _fmt(self.iou), c.tp, c.tn, c.fp, c.fn]
        return "\t".join(str(v) for v in vals)


def _fmt(x: float) -> str:
    return "NA" if math.isnan(x) else f"{x:.6f}"


def score_maps(scene_id: str, pred_map, ref_map, pair: ThresholdPair) -> SceneMetrics:
    c = confusion(pred_map, ref_map, pair)
    vals = []
    for fn in (pearson_phi, accuracy, iou):
        try:
            vals.append(fn(c))
        except UndefinedMetricError:
            vals.append(float("nan"))
    return SceneMetrics(scene_id, pair, c, *vals)


def write_report(path, rows: Sequence[SceneMetrics]) -> None:
    lines = ["\t".join(SceneMetrics.REPORT_FIELDS)] + [r.report_line() for r in rows]
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def read_report(path) -> list[dict]:
    with open(path, encoding="utf-8") as f:
        header = f.readline().rstrip("\n").split("\t")
        return [dict(zip(header, line.rstrip("\n").split("\t"))) for line in f if line.strip()]


PREDICTORS = ("model", "constant", "coherence")


def baseline_map(kind: str, bands: np.ndarray) -> np.ndarray:
    """Reference predictors on raw ``[3,H,W]`` bands.

    ``constant`` is 0.5 everywhere; ``coherence`` is one minus coherence, so
    that after calibration it amounts to a single threshold on coherence.
    """
    bands = np.asarray(bands)
    if kind == "constant":
        return np.full(bands.shape[1:], 0.5, dtype=np.float32)
    if kind == "coherence":
        return (1.0 - bands[1]).astype(np.float32)
    raise ValueError(f"unknown baseline {kind!r}")


def write_pgm(path, image: np.ndarray) -> None:
    """Binary graymap (P5, maxval 255) of values in [0, 1]."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise DimensionError(f"graymap needs a 2-D image, got {img.shape}")
    px = np.clip(np.rint(np.clip(img, 0.0, 1.0) * 255), 0, 255).astype(np.uint8)
    h, w = px.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(px.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if m is None:
        raise ValueError(f"{path}: not a binary graymap")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    return np.frombuffer(raw, np.uint8, w * h, m.end()).reshape(h, w)
