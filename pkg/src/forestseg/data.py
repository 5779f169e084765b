"""Tiles, splits, batching, band normalization and the synthetic scene generator.

Binary containers (all little-endian):

* tileset ``FNT1``: u32 tile count, then per tile 3*128*128 float32 band
  values (band-major) followed by 128*128 float32 reference values.
* band stats ``FNS1``: 6 float32 values, (mean, std) for each band.
* scene ``FNC1``: u32 height, u32 width, 3*H*W float32 bands, H*W float32
  reference.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

TILE = 128
N_BANDS = 3
BAND_NAMES = ("backscatter_db", "coherence", "incidence_deg")
STD_FLOOR = 1e-6

TILESET_MAGIC = b"FNT1"
STATS_MAGIC = b"FNS1"
SCENE_MAGIC = b"FNC1"

_F32 = np.dtype("<f4")


class TilesetFormatError(ValueError):
    """A binary container is malformed or violates a value invariant."""


@dataclass
class TileSample:
    bands: np.ndarray  # [3,128,128] float32
    reference: np.ndarray  # [1,128,128] float32, forest density in [0,1]

    def __post_init__(self):
        self.bands = np.asarray(self.bands, dtype=np.float32)
        self.reference = np.asarray(self.reference, dtype=np.float32)
        if self.reference.ndim == 2:
            self.reference = self.reference[None]


@dataclass
class Scene:
    """A full-size raster: 3 input bands plus the density reference."""

    bands: np.ndarray  # [3,H,W]
    reference: np.ndarray  # [H,W]
    landcover: np.ndarray | None = None  # [H,W] archetype codes, generator-only

    @property
    def shape(self) -> tuple[int, int]:
        return self.reference.shape


# ---------------------------------------------------------------------------
# tileset container


def _check_tile(i: int, bands: np.ndarray, ref: np.ndarray) -> None:
    if not np.all(np.isfinite(bands)):
        raise TilesetFormatError(f"tile {i}: non-finite band value")
    if not np.all(np.isfinite(ref)) or ref.min(initial=0.0) < 0.0 or ref.max(initial=0.0) > 1.0:
        raise TilesetFormatError(f"tile {i}: reference density outside [0, 1]")


def write_tileset(path, samples: Sequence[TileSample]) -> None:
    buf = io.BytesIO()
    buf.write(TILESET_MAGIC)
    buf.write(struct.pack("<I", len(samples)))
    for i, s in enumerate(samples):
        if s.bands.shape != (N_BANDS, TILE, TILE) or s.reference.shape != (1, TILE, TILE):
            raise TilesetFormatError(f"tile {i}: expected bands [3,128,128] and reference [1,128,128]")
        _check_tile(i, s.bands, s.reference)
        buf.write(s.bands.astype(_F32).tobytes())
        buf.write(s.reference.astype(_F32).tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_tileset(path) -> list[TileSample]:
    raw = Path(path).read_bytes()
    if raw[:4] != TILESET_MAGIC:
        raise TilesetFormatError(f"{path}: bad magic {raw[:4]!r}, expected {TILESET_MAGIC!r}")
    if len(raw) < 8:
        raise TilesetFormatError(f"{path}: truncated header")
    (count,) = struct.unpack_from("<I", raw, 4)
    band_n = N_BANDS * TILE * TILE
    ref_n = TILE * TILE
    tile_bytes = (band_n + ref_n) * 4
    samples = []
    for i in range(count):
        off = 8 + i * tile_bytes
        if off + tile_bytes > len(raw):
            raise TilesetFormatError(f"{path}: tile {i}: truncated payload")
        vals = np.frombuffer(raw, dtype=_F32, count=band_n + ref_n, offset=off).astype(np.float32)
        bands = vals[:band_n].reshape(N_BANDS, TILE, TILE)
        ref = vals[band_n:].reshape(1, TILE, TILE)
        _check_tile(i, bands, ref)
        samples.append(TileSample(bands, ref))
    if 8 + count * tile_bytes != len(raw):
        raise TilesetFormatError(f"{path}: {len(raw) - 8 - count * tile_bytes} trailing bytes after tile {count - 1}")
    return samples


# ---------------------------------------------------------------------------
# scenes


def write_scene(path, scene: Scene) -> None:
    h, w = scene.shape
    with open(path, "wb") as f:
        f.write(SCENE_MAGIC)
        f.write(struct.pack("<II", h, w))
        f.write(scene.bands.astype(_F32).tobytes())
        f.write(scene.reference.astype(_F32).tobytes())


def load_scene(path) -> Scene:
    raw = Path(path).read_bytes()
    if raw[:4] != SCENE_MAGIC:
        raise TilesetFormatError(f"{path}: bad magic {raw[:4]!r}, expected {SCENE_MAGIC!r}")
    h, w = struct.unpack_from("<II", raw, 4)
    n = h * w
    if len(raw) != 12 + 4 * n * (N_BANDS + 1):
        raise TilesetFormatError(f"{path}: payload size does not match {h}x{w}")
    bands = np.frombuffer(raw, _F32, N_BANDS * n, 12).astype(np.float32).reshape(N_BANDS, h, w)
    ref = np.frombuffer(raw, _F32, n, 12 + 4 * N_BANDS * n).astype(np.float32).reshape(h, w)
    return Scene(bands, ref)


def tile_scene(scene: Scene) -> list[TileSample]:
    """Non-overlapping 128x128 tiles in row-major order."""
    h, w = scene.shape
    if h % TILE or w % TILE:
        raise ValueError(f"scene {h}x{w} is not a multiple of {TILE}")
    out = []
    for i in range(0, h, TILE):
        for j in range(0, w, TILE):
            out.append(TileSample(scene.bands[:, i : i + TILE, j : j + TILE].copy(),
                                  scene.reference[None, i : i + TILE, j : j + TILE].copy()))
    return out


def stitch_tiles(tiles: Sequence[np.ndarray], height: int, width: int) -> np.ndarray:
    """Inverse of row-major tiling for [..., 128, 128] arrays."""
    lead = tiles[0].shape[:-2]
    out = np.empty(lead + (height, width), dtype=tiles[0].dtype)
    k = 0
    for i in range(0, height, TILE):
        for j in range(0, width, TILE):
            out[..., i : i + TILE, j : j + TILE] = tiles[k]
            k += 1
    return out


# ---------------------------------------------------------------------------
# splits and batches


@dataclass
class DatasetSplit:
    train: list[int]
    validation: list[int]
    calibration: list[int]
    seed: int

    def to_dict(self) -> dict:
        return {"seed": self.seed, "train": self.train, "validation": self.validation,
                "calibration": self.calibration}

    @classmethod
    def from_dict(cls, d: Mapping) -> "DatasetSplit":
        return cls(list(d["train"]), list(d["validation"]), list(d["calibration"]), int(d["seed"]))


def split_dataset(n_tiles: int, seed: int, val_fraction: float = 0.1,
                  calibration_fraction: float = 0.5) -> DatasetSplit:
    """Random 90/10 train/validation split; half of validation is set aside for threshold calibration."""
    perm = np.random.default_rng(seed).permutation(n_tiles)
    n_val = int(round(n_tiles * val_fraction))
    if n_tiles >= 2:
        n_val = min(max(n_val, 1), n_tiles - 1)
    held = perm[:n_val]
    n_cal = int(round(len(held) * calibration_fraction))
    return DatasetSplit(
        train=sorted(int(i) for i in perm[n_val:]),
        validation=sorted(int(i) for i in held[n_cal:]),
        calibration=sorted(int(i) for i in held[:n_cal]),
        seed=seed,
    )


def epoch_order(indices: Sequence[int], shuffle_seed: int, epoch: int) -> np.ndarray:
    rng = np.random.default_rng([shuffle_seed, epoch])
    return np.asarray(indices, dtype=np.int64)[rng.permutation(len(indices))]


def make_batches(samples: Sequence[TileSample], indices: Sequence[int], batch_size: int = 32,
                 shuffle_seed: int | None = 0, epoch: int = 0) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(bands [B,3,H,W], reference [B,1,H,W])`` covering ``indices`` once.

    ``shuffle_seed=None`` keeps the given order.  The final batch may be short.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.asarray(indices) if shuffle_seed is None else epoch_order(indices, shuffle_seed, epoch)
    for lo in range(0, len(order), batch_size):
        chunk = order[lo : lo + batch_size]
        yield (np.stack([samples[i].bands for i in chunk]),
               np.stack([samples[i].reference for i in chunk]))


# ---------------------------------------------------------------------------
# band normalization


@dataclass
class BandStats:
    mean: np.ndarray  # [3] float32
    std: np.ndarray  # [3] float32

    def to_bytes(self) -> bytes:
        vals = np.stack([self.mean, self.std], axis=1).astype(_F32)  # (mean, std) per band
        return STATS_MAGIC + vals.tobytes()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "BandStats":
        if raw[:4] != STATS_MAGIC or len(raw) != 4 + 6 * 4:
            raise TilesetFormatError("malformed band-stats blob")
        vals = np.frombuffer(raw, _F32, 6, 4).astype(np.float32).reshape(3, 2)
        return cls(vals[:, 0].copy(), vals[:, 1].copy())


def write_stats(path, stats: BandStats) -> None:
    Path(path).write_bytes(stats.to_bytes())


def load_stats(path) -> BandStats:
    return BandStats.from_bytes(Path(path).read_bytes())


def compute_band_stats(samples: Sequence[TileSample], indices: Sequence[int] | None = None) -> BandStats:
    idx = range(len(samples)) if indices is None else indices
    total = np.zeros(N_BANDS)
    sq = np.zeros(N_BANDS)
    count = 0
    for i in idx:
        b = samples[i].bands.astype(np.float64).reshape(N_BANDS, -1)
        total += b.sum(axis=1)
        count += b.shape[1]
    if count == 0:
        raise ValueError("cannot compute band statistics of an empty subset")
    mean = total / count
    for i in idx:
        b = samples[i].bands.astype(np.float64).reshape(N_BANDS, -1)
        sq += ((b - mean[:, None]) ** 2).sum(axis=1)
    std = np.sqrt(sq / count)
    return BandStats(mean.astype(np.float32), std.astype(np.float32))


def normalize_array(bands: np.ndarray, stats: BandStats) -> np.ndarray:
    """Standardize a ``[..., 3, H, W]`` array band by band."""
    std = np.maximum(stats.std, np.float32(STD_FLOOR))
    shape = (N_BANDS, 1, 1)
    return ((bands - stats.mean.reshape(shape)) / std.reshape(shape)).astype(np.float32)


def normalize_bands(samples: Sequence[TileSample], stats: BandStats) -> list[TileSample]:
    return [TileSample(normalize_array(s.bands, stats), s.reference) for s in samples]


# ---------------------------------------------------------------------------
# synthetic scenes

ARCHETYPES = ("field", "forest", "water", "urban", "bridge")
FIELD, FOREST, WATER, URBAN, BRIDGE = range(5)

DEFAULT_MIX = {"forest": 0.42, "field": 0.33, "water": 0.15, "urban": 0.10, "bridge": 0.004}

# mean backscatter (dB) and coherence per archetype; forest values are at full density
_BACKSCATTER_DB = {FIELD: -13.0, FOREST: -7.0, WATER: -22.0, URBAN: -1.0, BRIDGE: 1.0}
_COHERENCE = {FIELD: 0.82, FOREST: 0.40, WATER: 0.18, URBAN: 0.38, BRIDGE: 0.55}


@dataclass
class SceneConfig:
    mix: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_MIX))
    blob_sigma: float = 10.0  # spatial scale of landcover patches, pixels
    edge_softness: float = 0.18  # soft-threshold width of the density field
    looks: int = 4  # multilook count of the backscatter speckle
    coherence_noise: float = 0.10


def parse_mix(text: str) -> dict[str, float]:
    """``"forest=0.5,water=0.5"`` or a single archetype name such as ``"water"``."""
    text = text.strip()
    if text in ARCHETYPES:
        return {text: 1.0}
    mix = {}
    for part in text.split(","):
        name, _, val = part.partition("=")
        name = name.strip()
        if name not in ARCHETYPES:
            raise ValueError(f"unknown archetype {name!r}")
        mix[name] = float(val) if val else 1.0
    return mix


def _smooth_noise(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    f = gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return (f - f.mean()) / (f.std() + 1e-12)


def _quantile_mask(field_: np.ndarray, allowed: np.ndarray, fraction: float) -> np.ndarray:
    """Top ``fraction`` of all pixels, restricted to ``allowed``."""
    n = int(round(fraction * field_.size))
    if n <= 0 or not allowed.any():
        return np.zeros_like(allowed)
    vals = np.where(allowed, field_, -np.inf).ravel()
    n = min(n, int(allowed.sum()))
    cut = np.partition(vals, vals.size - n)[vals.size - n]
    return allowed & (field_ >= cut)


def synthesize_scene(width: int, height: int, archetype_mix: Mapping[str, float] | None = None,
                     noise_seed: int = 0, config: SceneConfig | None = None) -> Scene:
    """Generate a full-size synthetic scene.

    Landcover patches come from low-pass filtered noise.  Forest density is a
    soft threshold of its own smooth field, zeroed on water/urban/bridge.
    Coherence drops with density (volume decorrelation) and is also low on
    water and urban areas; backscatter separates those confusers.  Bridges are
    thin bright lines across water.  Incidence angle is a range ramp plus a
    gentle terrain term and modulates backscatter.
    """
    if width % TILE or height % TILE or width <= 0 or height <= 0:
        raise ValueError(f"scene size {width}x{height} must be a positive multiple of {TILE}")
    cfg = config or SceneConfig()
    mix = dict(cfg.mix if archetype_mix is None else archetype_mix)
    unknown = set(mix) - set(ARCHETYPES)
    if unknown:
        raise ValueError(f"unknown archetypes {sorted(unknown)}")
    total = sum(mix.values())
    if total <= 0:
        raise ValueError("archetype mix must have positive weight")
    frac = {k: mix.get(k, 0.0) / total for k in ARCHETYPES}

    rng = np.random.default_rng(noise_seed)
    shape = (height, width)
    s = cfg.blob_sigma
    water_f = _smooth_noise(rng, shape, 1.6 * s)
    urban_f = _smooth_noise(rng, shape, 0.6 * s)
    forest_f = _smooth_noise(rng, shape, s)
    texture = _smooth_noise(rng, shape, 0.25 * s)

    free = np.ones(shape, dtype=bool)
    water = _quantile_mask(water_f, free, frac["water"])
    free &= ~water
    urban = _quantile_mask(urban_f, free, frac["urban"])
    free &= ~urban

    lc = np.full(shape, FIELD, dtype=np.uint8)
    lc[water] = WATER
    lc[urban] = URBAN

    # soft threshold placed so that ~forest fraction of the free area is dense
    f_for = frac["forest"] / max(frac["forest"] + frac["field"], 1e-12) if free.any() else 0.0
    density = np.zeros(shape)
    if f_for > 0:
        field_ = forest_f + 0.35 * texture
        if f_for >= 1.0:
            cut = -np.inf
        else:
            cut = np.quantile(field_[free], 1.0 - f_for)
        density = 1.0 / (1.0 + np.exp(-(field_ - cut) / cfg.edge_softness)) if np.isfinite(cut) else np.ones(shape)
        density[~free] = 0.0
        lc[free & (density >= 0.5)] = FOREST

    if frac["bridge"] > 0 and water.any():
        bridge = _draw_bridges(rng, water, frac["bridge"])
        lc[bridge] = BRIDGE
        density[bridge] = 0.0

    # incidence angle: near-to-far range ramp with terrain undulation
    cols = np.linspace(30.0, 45.0, width)[None, :]
    incidence = cols + 2.5 * _smooth_noise(rng, shape, 3 * s)

    # backscatter in dB with multilook speckle
    base = np.zeros(shape)
    for code, db in _BACKSCATTER_DB.items():
        base[lc == code] = db
    field_db = _BACKSCATTER_DB[FIELD]
    veg = (lc == FIELD) | (lc == FOREST)
    base[veg] = field_db + (_BACKSCATTER_DB[FOREST] - field_db) * density[veg]
    base += -0.12 * (incidence - 37.5)
    speckle = rng.gamma(cfg.looks, 1.0 / cfg.looks, size=shape)
    backscatter = base + 10.0 * np.log10(speckle)

    coh_base = np.zeros(shape)
    for code, c in _COHERENCE.items():
        coh_base[lc == code] = c
    coh_field = _COHERENCE[FIELD]
    coh_base[veg] = coh_field + (_COHERENCE[FOREST] - coh_field) * density[veg]
    coherence = np.clip(coh_base + cfg.coherence_noise * rng.standard_normal(shape), 0.0, 1.0)

    bands = np.stack([backscatter, coherence, incidence]).astype(np.float32)
    return Scene(bands, np.clip(density, 0.0, 1.0).astype(np.float32), lc)


def _draw_bridges(rng: np.random.Generator, water: np.ndarray, fraction: float) -> np.ndarray:
    h, w = water.shape
    target = fraction * water.size
    mask = np.zeros_like(water)
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(64):
        if mask.sum() >= target:
            break
        ys, xs = np.nonzero(water & ~mask)
        k = rng.integers(len(ys))
        y0, x0 = ys[k], xs[k]
        theta = rng.uniform(0, np.pi)
        # distance to the line through (y0, x0) at angle theta
        d = np.abs((yy - y0) * np.cos(theta) - (xx - x0) * np.sin(theta))
        along = np.abs((yy - y0) * np.sin(theta) + (xx - x0) * np.cos(theta))
        mask |= (d <= 1.2) & (along <= 0.35 * max(h, w)) & water
    return mask


def synthesize_tiles(n_scenes: int, size: tuple[int, int], seed: int,
                     mix: Mapping[str, float] | None = None) -> list[TileSample]:
    """Training tiles cut from ``n_scenes`` independently seeded scenes."""
    out = []
    for k in range(n_scenes):
        scene = synthesize_scene(size[0], size[1], mix, noise_seed=child_seed(seed, "train", k))
        out.extend(tile_scene(scene))
    return out


def child_seed(seed: int, purpose: str, k: int) -> int:
    tag = sum(purpose.encode())
    return int(np.random.SeedSequence([seed, tag, k]).generate_state(1)[0])
