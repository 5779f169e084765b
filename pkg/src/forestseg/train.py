"""Training loop and tiled full-scene inference."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint
from .core import DimensionError
from .data import (TILE, BandStats, DatasetSplit, TileSample, compute_band_stats, make_batches,
                   normalize_array, normalize_bands, write_stats)
from .losses import LossConfig, composite_loss
from .models import ModelGraph, build_model, forward
from .optim import AdamState, TrainingDivergence, adam_step

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    variant: str = "residual"
    use_l1: bool = False
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 1e-4
    init_seed: int = 0
    shuffle_seed: int = 0
    checkpoint_every: int = 1  # epochs between checkpoint writes; 0 writes only at the end
    # samples per recorded forward pass; a batch larger than this is processed
    # in chunks and yields the same gradient as one full-batch pass
    micro_batch: int = 8

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.micro_batch < 1:
            raise ValueError("micro_batch must be >= 1")

    @property
    def loss(self) -> LossConfig:
        return LossConfig(use_l1=self.use_l1)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    train_terms: dict[str, float]
    val_terms: dict[str, float]
    steps: int
    wall_time: float = 0.0


@dataclass
class TrainLog:
    terms: tuple[str, ...]
    records: list[EpochRecord] = field(default_factory=list)
    initial_val_loss: float = float("nan")

    def header(self) -> str:
        cols = ["epoch", "steps", "train_loss", "val_loss"]
        cols += [f"train_{t}" for t in self.terms] + [f"val_{t}" for t in self.terms]
        return "\t".join(cols)

    @staticmethod
    def format_record(rec: EpochRecord, terms: Sequence[str]) -> str:
        # wall time is kept out of the file so that logs are reproducible
        vals = [rec.epoch, rec.steps, repr(rec.train_loss), repr(rec.val_loss)]
        vals += [repr(rec.train_terms[t]) for t in terms] + [repr(rec.val_terms[t]) for t in terms]
        return "\t".join(str(v) for v in vals)


@dataclass
class TrainResult:
    model: ModelGraph
    adam: AdamState
    log: TrainLog
    stats: BandStats
    best_model: ModelGraph | None = None
    best_epoch: int = 0


def steps_per_epoch(n_train: int, batch_size: int) -> int:
    return math.ceil(n_train / batch_size)


def gradient_step(model: ModelGraph, x: np.ndarray, y: np.ndarray, loss_cfg: LossConfig,
                  micro_batch: int = 8) -> tuple[float, dict[str, float], list[np.ndarray]]:
    """Loss and parameter gradients for one batch.

    The batch-global Jaccard term couples all samples, so for batches larger
    than ``micro_batch`` the predictions are computed first without recording,
    the loss gradient is formed on the whole batch, and each chunk is then
    replayed under a tape and back-propagated with its slice of that gradient.
    """
    params = model.parameters()
    if len(x) <= micro_batch:
        out = forward(model, x, record_gradients=True)
        total, g, terms = composite_loss(out.data, y, loss_cfg)
        _check_finite(total)
        out.tape.backward(out, g)
        grads = [p.grad for p in params]
        out.tape = None
        return total, terms, grads

    chunks = [slice(i, i + micro_batch) for i in range(0, len(x), micro_batch)]
    pred = np.concatenate([forward(model, x[s]).data for s in chunks])
    total, g, terms = composite_loss(pred, y, loss_cfg)
    _check_finite(total)
    grads = [np.zeros_like(p.data) for p in params]
    for s in chunks:
        out = forward(model, x[s], record_gradients=True)
        out.tape.backward(out, g[s])
        for acc, p in zip(grads, params):
            acc += p.grad
        out.tape = None
    return total, terms, grads


def _check_finite(loss: float) -> None:
    if not math.isfinite(loss):
        raise TrainingDivergence(f"loss became non-finite ({loss})")


def evaluate_loss(model: ModelGraph, samples: Sequence[TileSample], indices: Sequence[int],
                  loss_cfg: LossConfig, batch_size: int = 32) -> tuple[float, dict[str, float]]:
    """Tile-weighted mean of per-batch losses; no gradients are recorded."""
    if not indices:
        return float("nan"), {t: float("nan") for t in loss_cfg.terms}
    total = 0.0
    terms = dict.fromkeys(loss_cfg.terms, 0.0)
    n = 0
    for x, y in make_batches(samples, indices, batch_size, shuffle_seed=None):
        pred = forward(model, x).data
        value, _, br = composite_loss(pred, y, loss_cfg)
        total += value * len(x)
        for k in terms:
            terms[k] += br[k] * len(x)
        n += len(x)
    return total / n, {k: v / n for k, v in terms.items()}


def train(config: TrainConfig, samples: Sequence[TileSample], split: DatasetSplit,
          out_dir: str | Path | None = None, resume: tuple[ModelGraph, AdamState] | None = None) -> TrainResult:
    """Train from scratch (or continue ``resume``) with ADAM at a constant learning rate.

    Band statistics come from the training subset only.  If ``out_dir`` is
    given, ``model.fsm`` (weights plus optimizer state), ``best.fsm``,
    ``stats.fns`` and ``train_log.tsv`` are written there.
    """
    if not split.train:
        raise ValueError("training subset is empty")
    stats = compute_band_stats(samples, split.train)
    norm = normalize_bands(samples, stats)
    loss_cfg = config.loss

    if resume is None:
        model = build_model(config.variant, config.init_seed)
        adam = AdamState.for_params(model.parameters(), lr=config.learning_rate)
    else:
        model, adam = resume
        if model.variant != config.variant:
            raise ValueError(f"checkpoint variant {model.variant!r} != configured {config.variant!r}")
    n_steps = steps_per_epoch(len(split.train), config.batch_size)
    start_epoch = adam.t // n_steps
    if adam.t % n_steps:
        raise ValueError("optimizer state is not at an epoch boundary")

    tlog = TrainLog(loss_cfg.terms)
    out = Path(out_dir) if out_dir is not None else None
    log_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_stats(out / "stats.fns", stats)
        log_path = out / "train_log.tsv"
        if resume is None or not log_path.exists():
            log_path.write_text(tlog.header() + "\n", encoding="utf-8")

    if resume is None and split.validation:
        tlog.initial_val_loss, _ = evaluate_loss(model, norm, split.validation, loss_cfg, config.batch_size)

    best_loss = math.inf
    best_bytes = None
    best_epoch = 0
    for epoch in range(start_epoch + 1, config.epochs + 1):
        t0 = time.perf_counter()
        tot = 0.0
        terms = dict.fromkeys(loss_cfg.terms, 0.0)
        seen = 0
        for x, y in make_batches(norm, split.train, config.batch_size, config.shuffle_seed, epoch):
            loss, br, grads = gradient_step(model, x, y, loss_cfg, config.micro_batch)
            adam_step(adam, model.parameters(), grads)
            tot += loss * len(x)
            for k in terms:
                terms[k] += br[k] * len(x)
            seen += len(x)
        val_loss, val_terms = evaluate_loss(model, norm, split.validation, loss_cfg, config.batch_size)
        rec = EpochRecord(epoch, tot / seen, val_loss, {k: v / seen for k, v in terms.items()},
                          val_terms, adam.t, time.perf_counter() - t0)
        tlog.records.append(rec)
        log.info("epoch %d: train %.5f  val %.5f  (%.1fs)", epoch, rec.train_loss, val_loss, rec.wall_time)

        if not math.isfinite(val_loss) and split.validation:
            raise TrainingDivergence(f"validation loss became non-finite at epoch {epoch}")
        if split.validation and val_loss < best_loss:
            best_loss, best_epoch = val_loss, epoch
            best_bytes = checkpoint.checkpoint_bytes(model)

        if out is not None:
            with open(log_path, "a", encoding="utf-8") as f:
                f.write(TrainLog.format_record(rec, tlog.terms) + "\n")
            cadence = config.checkpoint_every
            if epoch == config.epochs or (cadence and epoch % cadence == 0):
                checkpoint.save_checkpoint(out / "model.fsm", model, adam)
                if best_bytes is not None:
                    (out / "best.fsm").write_bytes(best_bytes)

    best_model = checkpoint.parse_checkpoint(best_bytes)[0] if best_bytes is not None else None
    return TrainResult(model, adam, tlog, stats, best_model, best_epoch)


def predict_scene(model: ModelGraph, scene_bands: np.ndarray, stats: BandStats | None = None,
                  batch_tiles: int = 8) -> np.ndarray:
    """Probability raster for a ``[3,H,W]`` scene.

    The scene is edge-padded to a multiple of 128, cut into non-overlapping
    tiles, run through the network and stitched; padding is cropped off.
    """
    bands = np.asarray(scene_bands, dtype=np.float32)
    if bands.ndim != 3 or bands.shape[0] != 3:
        raise DimensionError(f"expected scene bands [3,H,W], got {bands.shape}")
    if stats is not None:
        bands = normalize_array(bands, stats)
    _, h, w = bands.shape
    ph, pw = (-h) % TILE, (-w) % TILE
    if ph or pw:
        bands = np.pad(bands, ((0, 0), (0, ph), (0, pw)), mode="edge")
    H, W = bands.shape[1:]
    origins = [(i, j) for i in range(0, H, TILE) for j in range(0, W, TILE)]
    out = np.empty((H, W), dtype=np.float32)
    for lo in range(0, len(origins), batch_tiles):
        group = origins[lo : lo + batch_tiles]
        x = np.stack([bands[:, i : i + TILE, j : j + TILE] for i, j in group])
        y = forward(model, x).data
        for (i, j), tile in zip(group, y):
            out[i : i + TILE, j : j + TILE] = tile[0]
    return out[:h, :w]


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
