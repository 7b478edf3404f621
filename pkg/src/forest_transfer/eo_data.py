"""Raster and plot-table data model, file formats, rasterization and plot split."""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

STANDARD_RADII = (5.64, 9.0, 12.62)
PLOT_CSV_HEADER = ["plot_id", "x", "y", "radius_m", "height_m", "volume_m3ha"]


class RasterFormatError(ValueError):
    """Raised when a raster file pair is missing, corrupt or inconsistent."""


class PlotError(ValueError):
    """Raised for malformed plot tables and plots that cannot be placed."""


@dataclass(frozen=True)
class RasterGrid:
    width: int
    height: int
    bands: int = 1
    pixel_size: float = 10.0
    origin_x: float = 0.0
    origin_y: float = 0.0

    def __post_init__(self):
        if self.width < 1 or self.height < 1 or self.bands < 1:
            raise ValueError(f"degenerate grid {self.width}x{self.height}x{self.bands}")
        if not self.pixel_size > 0:
            raise ValueError("pixel_size must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def with_bands(self, bands: int) -> "RasterGrid":
        return RasterGrid(self.width, self.height, bands, self.pixel_size,
                          self.origin_x, self.origin_y)

    def same_footprint(self, other: "RasterGrid") -> bool:
        return self.with_bands(1) == other.with_bands(1)

    def pixel_of(self, x: float, y: float) -> tuple[int, int]:
        """(row, col) of the pixel containing map coordinate (x, y); north-up grid."""
        col = math.floor((x - self.origin_x) / self.pixel_size)
        row = math.floor((self.origin_y - y) / self.pixel_size)
        return row, col

    def contains_pixel(self, row: int, col: int) -> bool:
        return 0 <= row < self.height and 0 <= col < self.width

    def pixel_center(self, row: int, col: int) -> tuple[float, float]:
        return (self.origin_x + (col + 0.5) * self.pixel_size,
                self.origin_y - (row + 0.5) * self.pixel_size)


@dataclass(frozen=True, eq=False)
class EOStack:
    grid: RasterGrid
    data: np.ndarray
    band_names: tuple[str, ...] = ()

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.shape != (self.grid.bands, self.grid.height, self.grid.width):
            raise ValueError(f"data shape {data.shape} does not match grid {self.grid}")
        names = tuple(self.band_names) or tuple(f"band_{i}" for i in range(self.grid.bands))
        if len(names) != self.grid.bands:
            raise ValueError("band_names length must equal band count")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "band_names", names)

    def select(self, names) -> "EOStack":
        idx = [self.band_names.index(n) for n in names]
        return EOStack(self.grid.with_bands(len(idx)), self.data[idx], tuple(names))


@dataclass(frozen=True, eq=False)
class ForestMask:
    grid: RasterGrid
    mask: np.ndarray

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=bool)
        if mask.shape != self.grid.shape:
            raise ValueError("mask shape does not match grid")
        object.__setattr__(self, "mask", mask)


@dataclass(frozen=True, eq=False)
class SparseLabelRaster:
    """Per-pixel heights with a validity flag. Invalid pixels hold NaN."""

    grid: RasterGrid
    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float32)
        valid = np.asarray(self.valid, dtype=bool)
        if values.shape != self.grid.shape or valid.shape != self.grid.shape:
            raise ValueError("label arrays do not match grid")
        if valid.any():
            v = values[valid]
            if not np.all(np.isfinite(v)) or np.any(v < 0):
                raise ValueError("valid label values must be finite and non-negative")
        values[~valid] = np.nan
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "valid", valid)

    def masked(self, forest: ForestMask) -> "SparseLabelRaster":
        return SparseLabelRaster(self.grid, self.values, self.valid & forest.mask)


Raster = Union[EOStack, SparseLabelRaster, ForestMask]


@dataclass
class PlotRecord:
    plot_id: str
    x: float
    y: float
    radius: float
    height: float
    volume: Optional[float] = None

    def __post_init__(self):
        if not self.radius > 0:
            raise PlotError(f"plot {self.plot_id}: radius must be positive")
        if not self.height >= 0:
            raise PlotError(f"plot {self.plot_id}: height must be non-negative")


@dataclass
class PlotTable:
    plots: list[PlotRecord] = field(default_factory=list)

    def __post_init__(self):
        ids = [p.plot_id for p in self.plots]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise PlotError(f"duplicate plot_id: {', '.join(dup)}")

    def __len__(self):
        return len(self.plots)

    def __iter__(self):
        return iter(self.plots)

    def __getitem__(self, i):
        return self.plots[i]

    @property
    def ids(self) -> list[str]:
        return [p.plot_id for p in self.plots]

    @property
    def heights(self) -> np.ndarray:
        return np.array([p.height for p in self.plots], dtype=np.float64)


# ---------------------------------------------------------------------------
# raster files


def _paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".bin", ".json"):
        p = p.with_suffix("")
    return p.with_suffix(".bin"), p.with_suffix(".json")


def save_raster(raster: Raster, path) -> None:
    """Write ``<path>.bin`` (little-endian float32, band-major) and ``<path>.json``."""
    grid = raster.grid
    if isinstance(raster, EOStack):
        kind, payload, names = "eo", raster.data, list(raster.band_names)
    elif isinstance(raster, SparseLabelRaster):
        kind, payload, names = "labels", raster.values[None], ["height_m"]
    elif isinstance(raster, ForestMask):
        kind, payload, names = "mask", raster.mask[None].astype(np.float32), ["forest"]
    else:
        raise TypeError(f"cannot save {type(raster).__name__}")
    header = {
        "width": grid.width,
        "height": grid.height,
        "bands": int(payload.shape[0]),
        "pixel_size": grid.pixel_size,
        "origin_x": grid.origin_x,
        "origin_y": grid.origin_y,
        "band_names": names,
        "nodata": "nan",
        "kind": kind,
    }
    bin_path, json_path = _paths(path)
    if not bin_path.parent.is_dir():
        raise FileNotFoundError(f"directory does not exist: {bin_path.parent}")
    bin_path.write_bytes(np.ascontiguousarray(payload, dtype="<f4").tobytes())
    json_path.write_text(json.dumps(header, indent=1, sort_keys=True) + "\n")


def load_raster(path) -> Raster:
    bin_path, json_path = _paths(path)
    if not json_path.exists():
        raise RasterFormatError(f"missing header {json_path}")
    if not bin_path.exists():
        raise RasterFormatError(f"missing payload {bin_path}")
    try:
        header = json.loads(json_path.read_text())
        grid = RasterGrid(int(header["width"]), int(header["height"]), int(header["bands"]),
                          float(header["pixel_size"]), float(header["origin_x"]),
                          float(header["origin_y"]))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise RasterFormatError(f"corrupt header {json_path}: {exc}") from exc
    if header.get("nodata", "nan") != "nan":
        raise RasterFormatError("unsupported nodata sentinel; only 'nan' is supported")
    if header.get("dtype", "float32") != "float32":
        raise RasterFormatError(f"unsupported dtype {header['dtype']}")
    raw = bin_path.read_bytes()
    expected = 4 * grid.bands * grid.height * grid.width
    if len(raw) != expected:
        raise RasterFormatError(
            f"payload length mismatch: {len(raw)} bytes, header implies {expected}")
    data = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(
        grid.bands, grid.height, grid.width)
    kind = header.get("kind", "eo")
    if kind == "eo":
        return EOStack(grid, data, tuple(header.get("band_names") or ()))
    if grid.bands != 1:
        raise RasterFormatError(f"{kind} raster must have exactly one band")
    if kind == "labels":
        valid = np.isfinite(data[0])
        return SparseLabelRaster(grid.with_bands(1), np.where(valid, data[0], np.nan), valid)
    if kind == "mask":
        return ForestMask(grid.with_bands(1), np.nan_to_num(data[0], nan=0.0) > 0.5)
    raise RasterFormatError(f"unknown raster kind {kind!r}")


def check_same_grid(*rasters: Raster) -> RasterGrid:
    """Return the shared footprint of ``rasters`` or raise on mismatch."""
    first = rasters[0].grid
    for r in rasters[1:]:
        if not first.same_footprint(r.grid):
            raise RasterFormatError(f"grid mismatch: {first} vs {r.grid}")
    return first.with_bands(1)


# ---------------------------------------------------------------------------
# plot tables


def _float(value: str, column: str, row: int) -> float:
    try:
        return float(value)
    except ValueError:
        raise PlotError(f"row {row}: non-numeric {column} {value!r}") from None


def load_plots(path) -> PlotTable:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(PLOT_CSV_HEADER[:5]) - set(reader.fieldnames or ())
        if missing:
            raise PlotError(f"plot CSV missing columns: {sorted(missing)}")
        plots = []
        for i, row in enumerate(reader, start=2):
            radius = _float(row["radius_m"], "radius_m", i)
            if radius > 0 and not any(abs(radius - r) < 1e-6 for r in STANDARD_RADII):
                warnings.warn(f"plot {row['plot_id']}: non-standard radius {radius} m")
            vol = (row.get("volume_m3ha") or "").strip()
            plots.append(PlotRecord(
                plot_id=row["plot_id"],
                x=_float(row["x"], "x", i),
                y=_float(row["y"], "y", i),
                radius=radius,
                height=_float(row["height_m"], "height_m", i),
                volume=_float(vol, "volume_m3ha", i) if vol else None,
            ))
    return PlotTable(plots)


def save_plots(plots: PlotTable, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PLOT_CSV_HEADER)
        for p in plots:
            w.writerow([p.plot_id, repr(p.x), repr(p.y), repr(p.radius), repr(p.height),
                        "" if p.volume is None else repr(p.volume)])


def rasterize_plots(plots: PlotTable, grid: RasterGrid) -> SparseLabelRaster:
    """Label the pixel containing each plot center with the plot height."""
    grid = grid.with_bands(1)
    values = np.full(grid.shape, np.nan, dtype=np.float32)
    valid = np.zeros(grid.shape, dtype=bool)
    owner: dict[tuple[int, int], str] = {}
    for p in plots:
        rc = grid.pixel_of(p.x, p.y)
        if not grid.contains_pixel(*rc):
            raise PlotError(f"plot {p.plot_id} at ({p.x}, {p.y}) lies outside the grid")
        if rc in owner:
            raise PlotError(f"plots {owner[rc]} and {p.plot_id} fall in the same pixel {rc}")
        owner[rc] = p.plot_id
        values[rc] = p.height
        valid[rc] = True
    return SparseLabelRaster(grid, values, valid)


def split_plots_by_attribute(plots: PlotTable, attribute: Optional[str] = None):
    """Sort by attribute and send every third plot (from the first) to test.

    ``attribute`` defaults to volume when every plot has one, else height.
    Returns ``(train, test)``.
    """
    if len(plots) == 0:
        raise PlotError("cannot split an empty plot table")
    if attribute is None:
        attribute = "volume" if all(p.volume is not None for p in plots) else "height"
    if attribute not in ("height", "volume"):
        raise ValueError(f"unknown split attribute {attribute!r}")
    if any(getattr(p, attribute) is None for p in plots):
        raise PlotError(f"attribute {attribute!r} missing for some plots")
    ordered = sorted(plots, key=lambda p: (getattr(p, attribute), p.plot_id))
    test = ordered[0::3]
    test_ids = {p.plot_id for p in test}
    train = [p for p in ordered if p.plot_id not in test_ids]
    return PlotTable(train), PlotTable(test)


# ---------------------------------------------------------------------------
# scene directories


@dataclass
class Scene:
    """One site on disk: EO stack, forest mask, optional heights and plots."""

    eo: EOStack
    forest: ForestMask
    heights: Optional[SparseLabelRaster] = None
    plots: Optional[PlotTable] = None

    def __post_init__(self):
        rasters = [self.eo, self.forest] + ([self.heights] if self.heights is not None else [])
        check_same_grid(*rasters)

    @property
    def grid(self) -> RasterGrid:
        return self.eo.grid


def save_scene(scene: Scene, directory) -> None:
    d = Path(directory)
    d.mkdir(exist_ok=True)
    save_raster(scene.eo, d / "eo")
    save_raster(scene.forest, d / "forest")
    if scene.heights is not None:
        save_raster(scene.heights, d / "heights")
    if scene.plots is not None:
        save_plots(scene.plots, d / "plots.csv")


def load_scene(directory) -> Scene:
    d = Path(directory)
    if not d.is_dir():
        raise RasterFormatError(f"scene directory not found: {d}")
    eo = load_raster(d / "eo")
    forest = load_raster(d / "forest")
    if not isinstance(eo, EOStack) or not isinstance(forest, ForestMask):
        raise RasterFormatError(f"{d}: eo/forest rasters have the wrong kind")
    heights = load_raster(d / "heights") if (d / "heights.json").exists() else None
    plots = load_plots(d / "plots.csv") if (d / "plots.csv").exists() else None
    return Scene(eo, forest, heights, plots)
