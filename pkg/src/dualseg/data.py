"""Raster I/O, modality derivation, synthetic scenes, patch/stitch pipeline.

Tiles travel in a small binary format ("RAST"); the second-stream composite
(DSM, NDSM, NDVI) is derived on load rather than stored. Synthetic scenes are
built so each modality carries complementary class evidence: buildings look
like pavement optically but stand tall, trees share the low-vegetation
spectrum but not its height, and cars are an optical-only signature with
unreliable height.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

RASTER_MAGIC = b"RAST"
RASTER_VERSION = 1
DTYPE_REAL32 = 1
DTYPE_LABEL8 = 2

VOID_LABEL = 255
CLASS_NAMES = ("impervious", "building", "low_veg", "tree", "car")


class RasterError(Exception):
    pass


class RasterMagicError(RasterError):
    pass


class RasterDtypeError(RasterError):
    pass


class RasterTruncatedError(RasterError):
    pass


@dataclass
class RasterTile:
    """Multi-channel raster: float32 image data or uint8 class labels (C=1)."""

    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"raster data must be (C, H, W), got shape {self.data.shape}")
        if self.data.dtype == np.float32:
            self.kind = "real32"
        elif self.data.dtype == np.uint8:
            self.kind = "label8"
        else:
            raise ValueError(f"raster dtype must be float32 or uint8, got {self.data.dtype}")

    @property
    def shape(self):
        return self.data.shape


def write_raster(tile: RasterTile, path) -> None:
    c, h, w = tile.data.shape
    dtype_tag = DTYPE_REAL32 if tile.kind == "real32" else DTYPE_LABEL8
    with open(path, "wb") as f:
        f.write(RASTER_MAGIC)
        f.write(struct.pack("<BBxx", RASTER_VERSION, dtype_tag))
        f.write(struct.pack("<III", c, h, w))
        if tile.kind == "real32":
            f.write(np.ascontiguousarray(tile.data, dtype="<f4").tobytes())
        else:
            f.write(np.ascontiguousarray(tile.data).tobytes())


def read_raster(path) -> RasterTile:
    with open(path, "rb") as f:
        head = f.read(4)
        if len(head) != 4:
            raise RasterTruncatedError("file shorter than the magic")
        if head != RASTER_MAGIC:
            raise RasterMagicError(f"bad raster magic {head!r}")
        meta = f.read(4 + 12)
        if len(meta) != 16:
            raise RasterTruncatedError("raster header truncated")
        version, dtype_tag = struct.unpack("<BBxx", meta[:4])
        if version != RASTER_VERSION:
            raise RasterError(f"unsupported raster version {version}")
        if dtype_tag not in (DTYPE_REAL32, DTYPE_LABEL8):
            raise RasterDtypeError(f"unknown raster dtype tag {dtype_tag}")
        c, h, w = struct.unpack("<III", meta[4:])
        item = 4 if dtype_tag == DTYPE_REAL32 else 1
        payload = f.read(c * h * w * item)
        if len(payload) != c * h * w * item:
            raise RasterTruncatedError(
                f"payload truncated: header claims {c}x{h}x{w}, file ends early")
        dt = "<f4" if dtype_tag == DTYPE_REAL32 else np.uint8
        data = np.frombuffer(payload, dtype=dt).reshape(c, h, w).copy()
        if dtype_tag == DTYPE_REAL32:
            data = data.astype(np.float32)
    return RasterTile(data)


# ---------------------------------------------------------------------------
# band math


def ndvi(ir: np.ndarray, r: np.ndarray) -> np.ndarray:
    """(IR - R) / (IR + R) with a guarded zero where both bands vanish."""
    ir = np.asarray(ir, dtype=np.float32)
    r = np.asarray(r, dtype=np.float32)
    if (ir < 0).any() or (r < 0).any():
        raise ValueError("ndvi expects nonnegative reflectances")
    denom = ir + r
    out = np.zeros_like(ir)
    np.divide(ir - r, denom, out=out, where=denom > 0)
    return out


def _minmax01(x: np.ndarray) -> np.ndarray:
    lo, hi = float(x.min()), float(x.max())
    if hi <= lo:
        return np.zeros_like(x, dtype=np.float32)
    return ((x - lo) / (hi - lo)).astype(np.float32)


def build_composite(dsm: np.ndarray, ndsm: np.ndarray, ndvi_ch: np.ndarray) -> RasterTile:
    """Stack (DSM, NDSM, NDVI), each min-max scaled to [0, 1] per tile."""
    if not (dsm.shape == ndsm.shape == ndvi_ch.shape):
        raise ValueError("composite channels must share one shape")
    return RasterTile(np.stack([_minmax01(dsm), _minmax01(ndsm), _minmax01(ndvi_ch)]))


def terrain_profile(h: int, w: int) -> np.ndarray:
    """The generator's smooth terrain ramp; a pure function of tile size, so
    loaders can recover NDSM = DSM - terrain without extra files."""
    yy = np.arange(h, dtype=np.float32)[:, None] / max(h - 1, 1)
    xx = np.arange(w, dtype=np.float32)[None, :] / max(w - 1, 1)
    return 6.0 * xx + 3.0 * yy


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass
class SceneSpec:
    seed: int = 0
    size: int = 256
    buildings: int = 6
    trees: int = 12
    low_veg: int = 10
    cars: int = 24
    noise: float = 0.1

    def __post_init__(self):
        if self.size < 16:
            raise ValueError(f"size {self.size} too small to place requested objects")
        if min(self.buildings, self.trees, self.low_veg, self.cars) < 0:
            raise ValueError("object counts must be nonnegative")
        if self.noise < 0:
            raise ValueError("noise amplitude must be nonnegative")


def _disc_mask(size, cy, cx, ry, rx):
    yy = np.arange(size)[:, None]
    xx = np.arange(size)[None, :]
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def synth_scene(spec: SceneSpec):
    """Deterministic scene triplet: (irrg 3ch, dsm 1ch, labels 1ch).

    Height ranges by class: low vegetation in [0, 0.3], trees in [2.5, 6],
    buildings in [4, 12], cars anywhere in [0, 5] (deliberately unreliable).
    With the default noise amplitude the tree and low-vegetation NDSM ranges
    stay disjoint while their optical spectra are drawn from one distribution.
    """
    rng = np.random.default_rng(spec.seed)
    s = spec.size
    labels = np.zeros((s, s), dtype=np.uint8)
    height = np.zeros((s, s), dtype=np.float32)

    def paint(mask, cls, h_obj):
        labels[mask] = cls
        height[mask] = h_obj

    for _ in range(spec.low_veg):
        cy, cx = rng.integers(0, s, 2)
        ry, rx = rng.integers(max(s // 24, 2), max(s // 12, 3), 2)
        paint(_disc_mask(s, cy, cx, ry, rx), 2, rng.uniform(0.0, 0.3))
    for _ in range(spec.trees):
        cy, cx = rng.integers(0, s, 2)
        ry, rx = rng.integers(max(s // 32, 2), max(s // 16, 3), 2)
        paint(_disc_mask(s, cy, cx, ry, rx), 3, rng.uniform(2.5, 6.0))
    for _ in range(spec.buildings):
        bh, bw = rng.integers(max(s // 8, 3), max(s // 4, 4), 2)
        y0 = int(rng.integers(0, max(s - bh, 1)))
        x0 = int(rng.integers(0, max(s - bw, 1)))
        m = np.zeros((s, s), dtype=bool)
        m[y0:y0 + bh, x0:x0 + bw] = True
        paint(m, 1, rng.uniform(4.0, 12.0))
    for _ in range(spec.cars):
        ch_, cw_ = int(rng.integers(3, 5)), int(rng.integers(6, 10))
        if rng.random() < 0.5:
            ch_, cw_ = cw_, ch_
        ch_, cw_ = min(ch_, s - 1), min(cw_, s - 1)
        y0 = int(rng.integers(0, s - ch_))
        x0 = int(rng.integers(0, s - cw_))
        m = np.zeros((s, s), dtype=bool)
        m[y0:y0 + ch_, x0:x0 + cw_] = True
        paint(m, 4, rng.uniform(0.0, 5.0))

    # one optical field per material; pavement and roofs share a sampler,
    # as do both vegetation classes (what makes the optical stream ambiguous)
    def gray():
        return np.stack([rng.uniform(0.35, 0.55, (s, s)) for _ in range(3)])

    veg_ir = rng.uniform(0.6, 0.9, (s, s))
    veg = np.stack([veg_ir, rng.uniform(0.1, 0.3, (s, s)), rng.uniform(0.3, 0.6, (s, s))])
    veg2_ir = rng.uniform(0.6, 0.9, (s, s))
    veg2 = np.stack([veg2_ir, rng.uniform(0.1, 0.3, (s, s)), rng.uniform(0.3, 0.6, (s, s))])
    car_ir = rng.uniform(0.55, 0.75, (s, s))
    car = np.stack([car_ir, car_ir * rng.uniform(0.92, 1.08, (s, s)),
                    rng.uniform(0.05, 0.2, (s, s))])
    fields = [gray(), gray(), veg, veg2, car]
    irrg = np.zeros((3, s, s), dtype=np.float32)
    for cls, field in enumerate(fields):
        irrg[:, labels == cls] = field[:, labels == cls]
    irrg += rng.uniform(-spec.noise, spec.noise, irrg.shape)
    np.clip(irrg, 0.0, None, out=irrg)

    dsm = terrain_profile(s, s) + height + rng.uniform(-spec.noise, spec.noise, (s, s)).astype(np.float32)
    return (RasterTile(irrg.astype(np.float32)),
            RasterTile(dsm.astype(np.float32)[None]),
            RasterTile(labels[None]))


# ---------------------------------------------------------------------------
# patch grid and stitching


@dataclass
class PatchGrid:
    window: int
    stride: int
    height: int
    width: int
    positions: list  # (y, x) top-left corners, row-major

    def __len__(self):
        return len(self.positions)


def _axis_positions(extent: int, window: int, stride: int):
    pos = list(range(0, extent - window + 1, stride))
    if pos[-1] != extent - window:
        pos.append(extent - window)  # flush to the edge for full coverage
    return pos


def make_grid(height: int, width: int, window: int, stride: int) -> PatchGrid:
    if window > height or window > width:
        raise ValueError(f"window {window} exceeds tile size {height}x{width}")
    if window < 1 or stride < 1:
        raise ValueError("window and stride must be positive")
    ys = _axis_positions(height, window, stride)
    xs = _axis_positions(width, window, stride)
    return PatchGrid(window, stride, height, width, [(y, x) for y in ys for x in xs])


def extract_patches(tile, window: int, stride: int):
    """Sliding-window extraction; returns (grid, array of (P, C, window, window))."""
    arr = tile.data if isinstance(tile, RasterTile) else np.asarray(tile)
    if arr.ndim == 2:
        arr = arr[None]
    grid = make_grid(arr.shape[1], arr.shape[2], window, stride)
    patches = np.stack([arr[:, y:y + window, x:x + window] for y, x in grid.positions])
    return grid, patches


def stitch(patch_probs, grid: PatchGrid, height: int, width: int) -> np.ndarray:
    """Per-pixel mean of all covering patches' probability maps -> (K, H, W)."""
    if len(patch_probs) != len(grid.positions):
        raise ValueError(f"got {len(patch_probs)} patches for {len(grid.positions)} positions")
    k = patch_probs[0].shape[0]
    acc = np.zeros((k, height, width), dtype=np.float64)
    cover = np.zeros((height, width), dtype=np.float64)
    w = grid.window
    for p, (y, x) in zip(patch_probs, grid.positions):
        acc[:, y:y + w, x:x + w] += p
        cover[y:y + w, x:x + w] += 1.0
    return (acc / cover).astype(np.float32)


# ---------------------------------------------------------------------------
# dataset directory layout: tiles/<id>_irrg.rast, _dsm.rast, _labels.rast
# plus manifest.json recording the train/validation split.


def tile_paths(root, tile_id: str) -> dict:
    tiles = Path(root) / "tiles"
    return {m: tiles / f"{tile_id}_{m}.rast" for m in ("irrg", "dsm", "labels")}


def composite_from(irrg: RasterTile, dsm: RasterTile) -> RasterTile:
    veg_index = ndvi(irrg.data[0], irrg.data[1])
    dsm_ch = dsm.data[0]
    ndsm = dsm_ch - terrain_profile(*dsm_ch.shape)
    return build_composite(dsm_ch, ndsm, veg_index)


@dataclass
class TileData:
    tile_id: str
    irrg: RasterTile
    composite: RasterTile
    labels: RasterTile


def load_tile(root, tile_id: str) -> TileData:
    paths = tile_paths(root, tile_id)
    for p in paths.values():
        if not p.exists():
            raise FileNotFoundError(f"missing modality file {p}")
    irrg = read_raster(paths["irrg"])
    dsm = read_raster(paths["dsm"])
    labels = read_raster(paths["labels"])
    return TileData(tile_id, irrg, composite_from(irrg, dsm), labels)


def generate_dataset(root, tiles: int, size: int, seed: int,
                     densities: dict | None = None) -> dict:
    """Write ``tiles`` scene triplets plus a manifest with a 3:1 tile split."""
    root = Path(root)
    (root / "tiles").mkdir(parents=True, exist_ok=True)
    ids = [f"tile{i:03d}" for i in range(tiles)]
    for i, tile_id in enumerate(ids):
        spec = SceneSpec(seed=seed + i, size=size, **(densities or {}))
        irrg, dsm, labels = synth_scene(spec)
        paths = tile_paths(root, tile_id)
        write_raster(irrg, paths["irrg"])
        write_raster(dsm, paths["dsm"])
        write_raster(labels, paths["labels"])
    manifest = {
        "tiles": tiles,
        "size": size,
        "seed": seed,
        "num_classes": len(CLASS_NAMES),
        "train": [t for i, t in enumerate(ids) if i % 4 != 3],
        "val": [t for i, t in enumerate(ids) if i % 4 == 3],
    }
    with open(root / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")
    return manifest


def read_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no manifest at {path}")
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def training_patches(root, tile_ids, window: int, stride: int):
    """Aligned patch triples (irrg, composite, labels(H,W)) from the given tiles."""
    out = []
    for tile_id in tile_ids:
        td = load_tile(root, tile_id)
        grid, irrg_p = extract_patches(td.irrg, window, stride)
        _, comp_p = extract_patches(td.composite, window, stride)
        _, lab_p = extract_patches(td.labels, window, stride)
        for i in range(len(grid)):
            out.append((irrg_p[i], comp_p[i], lab_p[i, 0]))
    return out
