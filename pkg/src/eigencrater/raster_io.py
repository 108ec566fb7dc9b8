"""File formats used across the crater pipeline.

Rasters use a minimal self-describing binary format: one ASCII header line
``EGR1 <width> <height> <cell_size_m>`` followed by ``width * height``
little-endian float64 values, row-major with the north row first. The same
grid type carries elevation (meters), albedo ([0, 1]) and image intensity
([0, 1]); 8-bit image import divides by 255 so there is a single numeric
path through the pipeline. Catalogs are plain CSV. Every reader/writer pair
round-trips bit-exactly, which caching and the determinism guarantees rely
on.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

RASTER_MAGIC = "EGR1"
CATALOG_COLUMNS = ("id", "lat_deg", "lon_deg", "radius_km", "eccentricity", "elevation_m")


class RasterFormatError(ValueError):
    """Malformed raster file; the message names the offending location."""


class CatalogFormatError(ValueError):
    """Malformed catalog file; the message names the offending row."""


@dataclass
class RasterGrid:
    """Row-major float64 grid with a physical cell size in meters/pixel.

    ``values`` has shape (height, width); row 0 is the northernmost row.
    The array is made read-only on construction.
    """

    width: int
    height: int
    cell_size: float
    values: np.ndarray

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"raster dimensions must be >= 1, got {self.width}x{self.height}")
        if not (self.cell_size > 0):
            raise ValueError(f"cell_size must be > 0, got {self.cell_size}")
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        if values.size != self.width * self.height:
            raise ValueError(
                f"payload has {values.size} values, expected {self.width * self.height}"
            )
        values = values.reshape(self.height, self.width)
        if not np.all(np.isfinite(values)):
            raise ValueError("raster values must all be finite")
        values.flags.writeable = False
        self.values = values

    @classmethod
    def from_array(cls, values: np.ndarray, cell_size: float) -> "RasterGrid":
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 2:
            raise ValueError(f"expected a 2-D array, got shape {values.shape}")
        return cls(width=values.shape[1], height=values.shape[0], cell_size=float(cell_size), values=values)


@dataclass
class CatalogRecord:
    """One crater catalog row: circular rim radius plus location."""

    id: str
    lat: float
    lon: float
    radius: float
    eccentricity: float
    elevation: float = 0.0

    def __post_init__(self):
        if not (-90.0 <= self.lat <= 90.0):
            raise ValueError(f"lat {self.lat} outside [-90, 90]")
        if not (-180.0 <= self.lon < 360.0):
            raise ValueError(f"lon {self.lon} outside [-180, 360)")
        if not (self.radius > 0):
            raise ValueError(f"radius must be > 0, got {self.radius}")
        if not (0.0 <= self.eccentricity < 1.0):
            raise ValueError(f"eccentricity {self.eccentricity} outside [0, 1)")
        if not np.isfinite(self.elevation):
            raise ValueError("elevation must be finite")


def write_raster(grid: RasterGrid, path: str | Path) -> None:
    """Write a grid to the binary raster format (lossless)."""
    header = f"{RASTER_MAGIC} {grid.width} {grid.height} {grid.cell_size!r}\n"
    payload = grid.values.astype("<f8", copy=False).tobytes()
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(payload)


def read_raster(path: str | Path) -> RasterGrid:
    """Read a raster written by :func:`write_raster`."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"raster file not found: {path}")
    with open(path, "rb") as fh:
        header = fh.readline()
        try:
            parts = header.decode("ascii").split()
        except UnicodeDecodeError as exc:
            raise RasterFormatError(f"{path}: header is not ASCII at byte 0") from exc
        if len(parts) != 4 or parts[0] != RASTER_MAGIC:
            raise RasterFormatError(f"{path}: bad header {header!r} at byte 0")
        try:
            width, height = int(parts[1]), int(parts[2])
            cell_size = float(parts[3])
        except ValueError as exc:
            raise RasterFormatError(f"{path}: unparseable header fields at byte 0") from exc
        payload = fh.read()
    expected = width * height * 8
    if len(payload) != expected:
        raise RasterFormatError(
            f"{path}: payload holds {len(payload)} bytes at byte {len(header)}, "
            f"expected {expected} for {width}x{height}"
        )
    values = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    if not np.all(np.isfinite(values)):
        bad = int(np.flatnonzero(~np.isfinite(values))[0])
        raise RasterFormatError(f"{path}: non-finite value at element {bad}")
    try:
        return RasterGrid(width=width, height=height, cell_size=cell_size, values=values)
    except ValueError as exc:
        raise RasterFormatError(f"{path}: {exc}") from exc


def read_image(path: str | Path) -> RasterGrid:
    """Read a grayscale image as a RasterGrid with intensities in [0, 1].

    EGR1 rasters are read as-is; anything else goes through Pillow and is
    converted to 8-bit grayscale then divided by 255. Image grids carry a
    nominal cell size of 1.
    """
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == RASTER_MAGIC.encode("ascii"):
        return read_raster(path)
    from PIL import Image

    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"), dtype=np.float64) / 255.0
    return RasterGrid.from_array(arr, cell_size=1.0)


def write_catalog(records: list[CatalogRecord], path: str | Path) -> None:
    lines = [",".join(CATALOG_COLUMNS)]
    for rec in records:
        lines.append(
            f"{rec.id},{rec.lat!r},{rec.lon!r},{rec.radius!r},{rec.eccentricity!r},{rec.elevation!r}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_catalog(path: str | Path) -> list[CatalogRecord]:
    """Read a crater catalog CSV, preserving row order.

    Rows that fail to parse or violate the field ranges raise
    :class:`CatalogFormatError` naming the 1-based data row index.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"catalog file not found: {path}")
    text = path.read_text(encoding="utf-8")
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise CatalogFormatError(f"{path}: empty catalog")
    header = tuple(col.strip() for col in lines[0].split(","))
    if header != CATALOG_COLUMNS:
        raise CatalogFormatError(f"{path}: bad header {header}, expected {CATALOG_COLUMNS}")
    records = []
    for row_idx, line in enumerate(lines[1:], start=1):
        fields = [f.strip() for f in line.split(",")]
        if len(fields) != len(CATALOG_COLUMNS):
            raise CatalogFormatError(
                f"{path}: row {row_idx} has {len(fields)} fields, expected {len(CATALOG_COLUMNS)}"
            )
        try:
            rec = CatalogRecord(
                id=fields[0],
                lat=float(fields[1]),
                lon=float(fields[2]),
                radius=float(fields[3]),
                eccentricity=float(fields[4]),
                elevation=float(fields[5]),
            )
        except ValueError as exc:
            raise CatalogFormatError(f"{path}: row {row_idx}: {exc}") from exc
        records.append(rec)
    return records


def write_json_file(obj, path: str | Path) -> None:
    """Serialize to JSON deterministically (sorted keys, repr floats)."""
    text = json.dumps(obj, sort_keys=True, indent=2, allow_nan=False)
    Path(path).write_text(text + "\n", encoding="utf-8")


def read_json_file(path: str | Path):
    return json.loads(Path(path).read_text(encoding="utf-8"))
