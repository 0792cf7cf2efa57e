"""Hyperspectral cube and label rasters: data model, on-disk format, synthesis.

A cube is stored as a JSON sidecar plus a band-sequential raw raster of
little-endian float32 values.  Label rasters use the same sidecar layout with
row-major little-endian int32 values (0 = unlabeled).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CUBE_DTYPE = np.dtype("<f4")
LABEL_DTYPE = np.dtype("<i4")


def _first_nonfinite(values: np.ndarray) -> tuple[int, ...] | None:
    bad = np.argwhere(~np.isfinite(values))
    if len(bad) == 0:
        return None
    return tuple(int(i) for i in bad[0])


@dataclass(frozen=True, eq=False)
class Cube:
    """A (band, row, col) float32 raster."""

    values: np.ndarray
    name: str = "cube"

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 3:
            raise ValueError(f"cube values must be 3-D (bands, rows, cols), got shape {values.shape}")
        if min(values.shape) <= 0:
            raise ValueError(f"cube dimensions must be positive, got {values.shape}")
        values = np.ascontiguousarray(values, dtype=np.float32)
        bad = _first_nonfinite(values)
        if bad is not None:
            raise ValueError(f"non-finite value at (band,row,col)={bad}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def bands(self) -> int:
        return self.values.shape[0]

    @property
    def rows(self) -> int:
        return self.values.shape[1]

    @property
    def cols(self) -> int:
        return self.values.shape[2]

    def pixels(self) -> np.ndarray:
        """Return the cube as an (rows*cols, bands) matrix in row-major pixel order."""
        return self.values.reshape(self.bands, -1).T

    def __eq__(self, other):
        if not isinstance(other, Cube):
            return NotImplemented
        return (
            self.name == other.name
            and self.values.shape == other.values.shape
            and self.values.tobytes() == other.values.tobytes()
        )


@dataclass(frozen=True, eq=False)
class GroundTruth:
    labels: np.ndarray
    num_classes: int
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2 or min(labels.shape) <= 0:
            raise ValueError(f"labels must be a non-empty 2-D array, got shape {labels.shape}")
        if not np.issubdtype(labels.dtype, np.integer):
            raise TypeError(f"labels must be integers, got {labels.dtype}")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        lo, hi = int(labels.min()), int(labels.max())
        if lo < 0 or hi > self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes}], found range [{lo}, {hi}]")
        if self.class_names and len(self.class_names) != self.num_classes:
            raise ValueError(
                f"{len(self.class_names)} class names given for {self.num_classes} classes"
            )
        labels = np.ascontiguousarray(labels, dtype=np.int32)
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "class_names", list(self.class_names))

    @property
    def rows(self) -> int:
        return self.labels.shape[0]

    @property
    def cols(self) -> int:
        return self.labels.shape[1]

    def check_matches(self, cube: Cube) -> None:
        if (self.rows, self.cols) != (cube.rows, cube.cols):
            raise ValueError(
                f"ground truth is {self.rows}x{self.cols} but cube is {cube.rows}x{cube.cols}"
            )

    def __eq__(self, other):
        if not isinstance(other, GroundTruth):
            return NotImplemented
        return (
            self.num_classes == other.num_classes
            and self.class_names == other.class_names
            and np.array_equal(self.labels, other.labels)
        )


@dataclass(frozen=True)
class SynthSpec:
    rows: int
    cols: int
    bands: int
    num_classes: int
    class_signature_separation: float = 0.5
    noise_sigma: float = 0.05
    region_scale: int = 16
    seed: int = 0

    def __post_init__(self):
        for key in ("rows", "cols", "bands"):
            if getattr(self, key) < 1:
                raise ValueError(f"{key} must be positive")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.region_scale < 1:
            raise ValueError("region_scale must be at least 1")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")


# ---------------------------------------------------------------------------
# file format


def _stem(path) -> Path:
    path = Path(path)
    if path.suffix in (".json", ".raw"):
        path = path.with_suffix("")
    return path


def _dump_sidecar(path: Path, meta: dict) -> None:
    path.write_text(json.dumps(meta, indent=2) + "\n")


def _read_sidecar(path: Path) -> dict:
    if not path.exists():
        raise FileNotFoundError(f"missing sidecar {path}")
    return json.loads(path.read_text())


def _read_raw(path: Path, dtype: np.dtype, count: int) -> np.ndarray:
    if not path.exists():
        raise FileNotFoundError(f"missing raster {path}")
    data = path.read_bytes()
    expected = count * dtype.itemsize
    if len(data) != expected:
        raise ValueError(f"size mismatch: {path} holds {len(data)} bytes, sidecar implies {expected}")
    return np.frombuffer(data, dtype=dtype).copy()


def save_cube(cube: Cube, path) -> None:
    """Write ``<path>.json`` and ``<path>.raw``."""
    if not isinstance(cube, Cube):
        raise TypeError("save_cube expects a Cube")
    base = _stem(path)
    meta = {"bands": cube.bands, "rows": cube.rows, "cols": cube.cols, "dtype": "f32le", "order": "bsq"}
    base.with_suffix(".raw").write_bytes(cube.values.astype(CUBE_DTYPE, copy=False).tobytes())
    _dump_sidecar(base.with_suffix(".json"), meta)


def load_cube(path) -> Cube:
    base = _stem(path)
    meta = _read_sidecar(base.with_suffix(".json"))
    if meta.get("dtype") != "f32le" or meta.get("order") != "bsq":
        raise ValueError(f"unsupported cube encoding dtype={meta.get('dtype')} order={meta.get('order')}")
    shape = (int(meta["bands"]), int(meta["rows"]), int(meta["cols"]))
    values = _read_raw(base.with_suffix(".raw"), CUBE_DTYPE, math.prod(shape)).reshape(shape)
    return Cube(values, name=base.name)


def save_ground_truth(gt: GroundTruth, path) -> None:
    base = _stem(path)
    meta = {
        "rows": gt.rows,
        "cols": gt.cols,
        "dtype": "i32le",
        "order": "rm",
        "num_classes": gt.num_classes,
        "class_names": list(gt.class_names),
    }
    base.with_suffix(".raw").write_bytes(gt.labels.astype(LABEL_DTYPE, copy=False).tobytes())
    _dump_sidecar(base.with_suffix(".json"), meta)


def load_ground_truth(path) -> GroundTruth:
    base = _stem(path)
    meta = _read_sidecar(base.with_suffix(".json"))
    if meta.get("dtype") != "i32le" or meta.get("order") != "rm":
        raise ValueError(f"unsupported label encoding dtype={meta.get('dtype')} order={meta.get('order')}")
    shape = (int(meta["rows"]), int(meta["cols"]))
    labels = _read_raw(base.with_suffix(".raw"), LABEL_DTYPE, math.prod(shape)).reshape(shape)
    return GroundTruth(labels, int(meta["num_classes"]), meta.get("class_names") or [])


# ---------------------------------------------------------------------------
# preprocessing


def normalize(cube: Cube) -> Cube:
    """Min-max scale each band to [0, 1]; constant bands become all zeros."""
    v = cube.values.astype(np.float64)
    lo = v.min(axis=(1, 2), keepdims=True)
    span = v.max(axis=(1, 2), keepdims=True) - lo
    safe = np.where(span > 0, span, 1.0)
    out = np.where(span > 0, (v - lo) / safe, 0.0)
    return Cube(out.astype(np.float32), name=cube.name)


def _class_signatures(rng: np.random.Generator, k: int, bands: int, separation: float,
                      max_tries: int = 10_000) -> np.ndarray:
    # pairwise obtuse sets hold at most bands + 1 vectors
    if (
        separation > math.pi
        or (separation > math.pi / 2 and k > bands + 1)
        or (bands == 1 and k > 2 and separation > 0)
    ):
        raise ValueError(
            f"infeasible separation {separation} rad for {k} classes in {bands} bands"
        )
    min_cos = math.cos(separation)
    sigs: list[np.ndarray] = []
    tries = 0
    while len(sigs) < k:
        tries += 1
        if tries > max_tries:
            raise ValueError(
                f"infeasible separation {separation} rad for {k} classes in {bands} bands"
            )
        v = rng.standard_normal(bands)
        norm = np.linalg.norm(v)
        if norm == 0:
            continue
        v /= norm
        if all(float(v @ s) <= min_cos for s in sigs):
            sigs.append(v)
    return np.stack(sigs)


def synth_cube(spec: SynthSpec) -> tuple[Cube, GroundTruth]:
    """Tile the scene with square single-class blobs and draw noisy class spectra.

    Blob labels are balanced: the tiles receive the classes cyclically and the
    assignment is then shuffled, so class areas differ by at most one tile.
    """
    rng = np.random.default_rng(spec.seed)
    sigs = _class_signatures(rng, spec.num_classes, spec.bands, spec.class_signature_separation)

    rs = spec.region_scale
    tiles_r, tiles_c = -(-spec.rows // rs), -(-spec.cols // rs)
    n_tiles = tiles_r * tiles_c
    tile_labels = (np.arange(n_tiles) % spec.num_classes) + 1
    tile_labels = rng.permutation(tile_labels).reshape(tiles_r, tiles_c)
    labels = np.repeat(np.repeat(tile_labels, rs, axis=0), rs, axis=1)[: spec.rows, : spec.cols]

    spectra = sigs[labels - 1]  # rows, cols, bands
    if spec.noise_sigma > 0:
        spectra = spectra + rng.normal(0.0, spec.noise_sigma, size=spectra.shape)
    values = np.transpose(spectra, (2, 0, 1)).astype(np.float32)
    names = [f"class_{i}" for i in range(1, spec.num_classes + 1)]
    return Cube(values, name="synth"), GroundTruth(labels.astype(np.int32), spec.num_classes, names)
