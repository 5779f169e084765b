"""Command-line front end: ``forestseg synth | train | predict | evaluate | replay``.

Option values resolve as flags > config file (``--config``) > built-in
defaults.  Seeds that are set nowhere fall back to ``FORESTSEG_SEED``, then 0.
Every command writes ``manifest.json`` into its output directory, holding the
fully resolved configuration; ``forestseg replay manifest.json`` re-runs it.

Exit codes: 0 success, 1 other failure, 2 usage error, 3 training divergence,
4 missing input artifact.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__, checkpoint, data, evaluation as ev, train as tr
from .optim import TrainingDivergence

log = logging.getLogger("forestseg")

EXIT_OK, EXIT_OTHER, EXIT_USAGE, EXIT_DIVERGED, EXIT_MISSING = 0, 1, 2, 3, 4
SEED_ENV = "FORESTSEG_SEED"
FORMATS = {"tileset": "FNT1", "scene": "FNC1", "stats": "FNS1", "checkpoint": "FSM1", "optimizer": "ADM1",
           "report": "tsv-v1", "graymap": "P5"}


class UsageError(Exception):
    """Bad option value; reported with exit code 2."""


class MissingArtifact(Exception):
    """A required input file does not exist; exit code 4."""


# ---------------------------------------------------------------------------
# option tables


def _size(text) -> list[int]:
    if isinstance(text, (list, tuple)):
        text = "x".join(str(v) for v in text)
    try:
        w, h = (int(v) for v in str(text).lower().split("x"))
    except ValueError:
        raise UsageError(f"size must look like 512x512, got {text!r}") from None
    if w <= 0 or h <= 0 or w % data.TILE or h % data.TILE:
        raise UsageError(f"scene size {w}x{h} must be a positive multiple of {data.TILE}")
    return [w, h]


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"expected a boolean, got {text!r}")


def _paths(value) -> list[str]:
    if isinstance(value, (list, tuple)):
        return [str(v) for v in value]
    return str(value).split()


@dataclass(frozen=True)
class Opt:
    name: str  # dest and config-file key
    convert: Callable[[Any], Any]
    default: Any = None  # None means required unless seed-like
    help: str = ""
    seed: bool = False
    flag: bool = False
    nargs: str | None = None


OPTIONS: dict[str, list[Opt]] = {
    "synth": [
        Opt("out", str, help="output directory"),
        Opt("scenes", int, 5, "number of scenes"),
        Opt("size", _size, "512x512", "scene size WxH, multiples of 128"),
        Opt("holdout", int, 2, "trailing scenes kept out of the tileset for evaluation"),
        Opt("archetypes", str, "default", "archetype mix, e.g. 'forest=0.6,field=0.4' or 'water'"),
        Opt("seed", int, help="generator seed", seed=True),
    ],
    "train": [
        Opt("tiles", str, help="training tileset (.fnt)"),
        Opt("out", str, help="output directory"),
        Opt("variant", str, "residual", "residual or dense"),
        Opt("with_l1", _bool, False, "add the L1 term to the loss", flag=True),
        Opt("epochs", int, 20, "training epochs"),
        Opt("lr", float, 1e-4, "ADAM learning rate"),
        Opt("batch", int, 32, "mini-batch size"),
        Opt("init_seed", int, help="weight initialisation seed", seed=True),
        Opt("shuffle_seed", int, help="epoch shuffling seed", seed=True),
        Opt("split_seed", int, help="train/validation/calibration split seed", seed=True),
        Opt("micro_batch", int, 8, "samples per recorded forward pass (memory bound only)"),
        Opt("checkpoint_every", int, 1, "epochs between checkpoints, 0 for final only"),
        Opt("resume", str, "", "continue from this checkpoint (needs optimizer state)"),
    ],
    "predict": [
        Opt("checkpoint", str, help="model checkpoint (.fsm)"),
        Opt("stats", str, "", "band statistics (.fns); default: next to the checkpoint"),
        Opt("scenes", _paths, help="scene files (.fnc) or directories", nargs="+"),
        Opt("out", str, help="output directory"),
    ],
    "evaluate": [
        Opt("checkpoint", str, "", "model checkpoint (.fsm); required for the model predictor"),
        Opt("stats", str, "", "band statistics (.fns); default: next to the checkpoint"),
        Opt("calibration", str, "", "calibration tileset; default: next to the checkpoint"),
        Opt("scenes", _paths, help="held-out scene files (.fnc) or directories", nargs="+"),
        Opt("out", str, help="output directory"),
        Opt("predictor", str, "model", "model, constant or coherence"),
        Opt("grid_step", float, ev.GRID_STEP, "threshold grid spacing"),
    ],
}


def read_config_file(path) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; dashes in keys become underscores."""
    out = {}
    p = Path(path)
    if not p.exists():
        raise MissingArtifact(f"config file {p} not found")
    for n, line in enumerate(p.read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{p}:{n}: expected 'key = value'")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def resolve(command: str, flags: dict[str, Any], file_cfg: dict[str, str] | None = None,
            env: dict[str, str] | None = None) -> dict[str, Any]:
    """Merge flags, config file and defaults for one command."""
    file_cfg = file_cfg or {}
    env = os.environ if env is None else env
    known = {o.name for o in OPTIONS[command]}
    unknown = set(file_cfg) - known
    if unknown:
        raise UsageError(f"unknown config keys for {command}: {', '.join(sorted(unknown))}")
    cfg = {}
    for o in OPTIONS[command]:
        if flags.get(o.name) is not None:
            value = flags[o.name]
        elif o.name in file_cfg:
            value = file_cfg[o.name]
        elif o.seed:
            value = env.get(SEED_ENV, 0)
        elif o.default is not None:
            value = o.default
        else:
            raise UsageError(f"{command}: --{o.name.replace('_', '-')} is required")
        try:
            cfg[o.name] = o.convert(value)
        except (TypeError, ValueError):
            raise UsageError(f"{command}: bad value {value!r} for {o.name}") from None
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="forestseg", description="Forest / non-forest segmentation of SAR rasters.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, opts in OPTIONS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("-v", "--verbose", action="store_true")
        for o in opts:
            flag = "--" + o.name.replace("_", "-")
            default = "" if o.default is None else f" (default: {o.default})"
            if o.flag:
                p.add_argument(flag, dest=o.name, action="store_const", const=True, default=None, help=o.help)
            else:
                p.add_argument(flag, dest=o.name, default=None, nargs=o.nargs, help=o.help + default)
    r = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    r.add_argument("manifest")
    r.add_argument("--out", help="write outputs here instead of the recorded directory")
    r.add_argument("-v", "--verbose", action="store_true")
    return parser


# ---------------------------------------------------------------------------
# helpers


def _require(path: str | Path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise MissingArtifact(f"{what} {p} not found")
    return p


def _scene_files(entries: list[str]) -> list[Path]:
    files = []
    for e in entries:
        p = _require(e, "scene path")
        files.extend(sorted(p.glob("*.fnc")) if p.is_dir() else [p])
    if not files:
        raise MissingArtifact(f"no scene files in {' '.join(entries)}")
    return files


def _beside(value: str, ckpt: Path, name: str) -> Path:
    return Path(value) if value else ckpt.parent / name


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _write_manifest(out: Path, command: str, cfg: dict, inputs: dict, outputs: list[Path], started: str,
                    extra: dict | None = None) -> None:
    manifest = {
        "command": command,
        "config": cfg,
        "seeds": {o.name: cfg[o.name] for o in OPTIONS[command] if o.seed},
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": sorted(str(p.relative_to(out)) for p in outputs),
        "formats": FORMATS,
        "version": __version__,
        "started": started,
        "finished": _now(),
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg: dict) -> None:
    started = _now()
    out = Path(cfg["out"])
    n, holdout = cfg["scenes"], cfg["holdout"]
    if n < 1:
        raise UsageError("--scenes must be >= 1")
    if not 0 <= holdout < n:
        holdout = min(max(holdout, 0), n - 1)
        log.warning("holdout clipped to %d so that at least one scene feeds the tileset", holdout)
    mix = None if cfg["archetypes"] == "default" else data.parse_mix(cfg["archetypes"])
    w, h = cfg["size"]
    out.mkdir(parents=True, exist_ok=True)
    (out / "train").mkdir(exist_ok=True)
    (out / "holdout").mkdir(exist_ok=True)

    written, tiles = [], []
    for k in range(n):
        scene = data.synthesize_scene(w, h, mix, noise_seed=data.child_seed(cfg["seed"], "scene", k))
        kind = "holdout" if k >= n - holdout else "train"
        path = out / kind / f"scene_{k:03d}.fnc"
        data.write_scene(path, scene)
        written.append(path)
        if kind == "train":
            tiles.extend(data.tile_scene(scene))
        log.info("scene %d (%s): forest fraction %.3f", k, kind, float((scene.reference > 0.5).mean()))
    data.write_tileset(out / "tiles.fnt", tiles)
    written.append(out / "tiles.fnt")
    _write_manifest(out, "synth", cfg, {}, written, started, {"n_tiles": len(tiles)})
    print(f"wrote {len(tiles)} tiles and {n} scenes to {out}")


def cmd_train(cfg: dict) -> None:
    started = _now()
    if cfg["epochs"] < 1:
        raise UsageError("--epochs must be >= 1")
    if cfg["variant"] not in ("residual", "dense"):
        raise UsageError(f"--variant must be residual or dense, got {cfg['variant']!r}")
    try:
        tconf = tr.TrainConfig(variant=cfg["variant"], use_l1=cfg["with_l1"], epochs=cfg["epochs"],
                               batch_size=cfg["batch"], learning_rate=cfg["lr"], init_seed=cfg["init_seed"],
                               shuffle_seed=cfg["shuffle_seed"], checkpoint_every=cfg["checkpoint_every"],
                               micro_batch=cfg["micro_batch"])
    except ValueError as e:
        raise UsageError(str(e)) from None
    tiles_path = _require(cfg["tiles"], "tileset")
    samples = data.load_tileset(tiles_path)
    if len(samples) < 2:
        raise UsageError("the tileset needs at least two tiles")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)

    split = data.split_dataset(len(samples), cfg["split_seed"])
    resume = None
    if cfg["resume"]:
        model, adam = checkpoint.load_checkpoint(_require(cfg["resume"], "checkpoint"))
        if adam is None:
            raise UsageError(f"{cfg['resume']} carries no optimizer state; cannot resume")
        resume = (model, adam)
        old = out / "split.json"
        if old.exists():
            split = data.DatasetSplit.from_dict(json.loads(old.read_text(encoding="utf-8")))
    (out / "split.json").write_text(json.dumps(split.to_dict()) + "\n", encoding="utf-8")
    data.write_tileset(out / "calibration.fnt", [samples[i] for i in split.calibration])

    log.info("%d tiles: %d train, %d validation, %d calibration", len(samples), len(split.train),
             len(split.validation), len(split.calibration))
    t0 = time.perf_counter()
    result = tr.train(tconf, samples, split, out_dir=out, resume=resume)
    outputs = [out / n for n in ("model.fsm", "best.fsm", "stats.fns", "train_log.tsv", "split.json",
                                 "calibration.fnt") if (out / n).exists()]
    extra = {"train_config": tr.config_dict(tconf), "best_epoch": result.best_epoch,
             "optimizer_steps": result.adam.t, "initial_val_loss": result.log.initial_val_loss,
             "train_seconds": round(time.perf_counter() - t0, 1)}
    _write_manifest(out, "train", cfg, {"tiles": tiles_path}, outputs, started, extra)
    last = result.log.records[-1] if result.log.records else None
    if last is not None:
        print(f"epoch {last.epoch}: train loss {last.train_loss:.5f}, validation loss {last.val_loss:.5f}")


def _load_model(cfg: dict):
    ckpt = _require(cfg["checkpoint"], "checkpoint")
    stats_path = _require(_beside(cfg["stats"], ckpt, "stats.fns"), "band statistics")
    model, _ = checkpoint.load_checkpoint(ckpt)
    return ckpt, stats_path, model, data.load_stats(stats_path)


def cmd_predict(cfg: dict) -> None:
    started = _now()
    ckpt, stats_path, model, stats = _load_model(cfg)
    files = _scene_files(cfg["scenes"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for f in files:
        prob = tr.predict_scene(model, data.load_scene(f).bands, stats)
        np.save(out / f"{f.stem}_prob.npy", prob)
        ev.write_pgm(out / f"{f.stem}_prob.pgm", prob)
        written += [out / f"{f.stem}_prob.npy", out / f"{f.stem}_prob.pgm"]
    _write_manifest(out, "predict", cfg, {"checkpoint": ckpt, "stats": stats_path}, written, started)
    print(f"wrote {len(files)} probability maps to {out}")


def cmd_evaluate(cfg: dict) -> None:
    started = _now()
    predictor = cfg["predictor"]
    if predictor not in ev.PREDICTORS:
        raise UsageError(f"--predictor must be one of {', '.join(ev.PREDICTORS)}")
    ckpt = Path(cfg["checkpoint"]) if cfg["checkpoint"] else None
    if predictor == "model":
        if ckpt is None:
            raise MissingArtifact("the model predictor needs --checkpoint")
        _require(ckpt, "checkpoint")
    if ckpt is None and not cfg["calibration"]:
        raise UsageError("--calibration is required when no checkpoint is given")
    cal_path = _require(_beside(cfg["calibration"], ckpt, "calibration.fnt"), "calibration tileset")
    files = _scene_files(cfg["scenes"])
    inputs = {"calibration": cal_path}
    if predictor == "model":
        _, stats_path, model, stats = _load_model(cfg)
        inputs.update(checkpoint=ckpt, stats=stats_path)

        def predict(bands):
            return tr.predict_scene(model, bands, stats)
    else:
        def predict(bands):
            return ev.baseline_map(predictor, bands)

    cal = data.load_tileset(cal_path)
    if not cal:
        raise UsageError(f"calibration tileset {cal_path} is empty")
    if predictor == "constant":
        # phi is undefined for a constant map; score it as all-forest, the best IoU it can reach
        pair = ev.ThresholdPair(0.0, 0.5)
    else:
        pair = ev.find_optimal_thresholds([predict(t.bands) for t in cal], [t.reference[0] for t in cal],
                                          cfg["grid_step"])
    log.info("calibrated thresholds: prediction > %.2f, reference > %.2f (phi %.4f)", pair.t_pred, pair.t_ref, pair.phi)

    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    rows, written = [], []
    for f in files:
        scene = data.load_scene(f)
        prob = predict(scene.bands)
        rows.append(ev.score_maps(f.stem, prob, scene.reference, pair))
        ev.write_pgm(out / f"{f.stem}_prob.pgm", prob)
        ev.write_pgm(out / f"{f.stem}_mask.pgm", (prob > pair.t_pred).astype(np.float32))
        written += [out / f"{f.stem}_prob.pgm", out / f"{f.stem}_mask.pgm"]
    ev.write_report(out / "report.tsv", rows)
    written.append(out / "report.tsv")
    extra = {"thresholds": {"t_pred": pair.t_pred, "t_ref": pair.t_ref, "phi": pair.phi}}
    _write_manifest(out, "evaluate", cfg, inputs, written, started, extra)
    for r in rows:
        print(f"{r.scene_id}: ACC {r.acc:.4f}  IoU {r.iou:.4f}  phi {r.phi:.4f}")


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "predict": cmd_predict, "evaluate": cmd_evaluate}


def replay(manifest_path: str, out: str | None = None) -> None:
    m = json.loads(_require(manifest_path, "manifest").read_text(encoding="utf-8"))
    cfg = dict(m["config"])
    if out is not None:
        cfg["out"] = out
    # values in the manifest are already resolved; convert restores types such as size lists
    cfg = resolve(m["command"], cfg, env={})
    COMMANDS[m["command"]](cfg)


def run(argv: list[str] | None = None) -> None:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "replay":
        replay(args.manifest, args.out)
        return
    file_cfg = read_config_file(args.config) if args.config else {}
    flags = {o.name: getattr(args, o.name) for o in OPTIONS[args.command]}
    COMMANDS[args.command](resolve(args.command, flags, file_cfg))


def main(argv: list[str] | None = None) -> int:
    try:
        run(argv)
    except SystemExit as e:  # argparse usage errors and --help
        return int(e.code or 0)
    except UsageError as e:
        print(f"forestseg: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDivergence as e:
        print(f"forestseg: training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (MissingArtifact, FileNotFoundError) as e:
        print(f"forestseg: missing artifact: {e}", file=sys.stderr)
        return EXIT_MISSING
    except Exception as e:  # noqa: BLE001 - last-resort reporting
        log.debug("failure", exc_info=True)
        print(f"forestseg: error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_OTHER
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
