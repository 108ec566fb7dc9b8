"""Crater-centered patch extraction and morphological filtering.

Patches are physically square windows of the source DEM, half-width equal
to ``scale`` times the catalog radius, resampled bilinearly to a fixed
pixel grid and reduced to zero mean. Accepted craters are augmented with
the three 90-degree rotations before PCA.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry
from .raster_io import CatalogRecord, RasterGrid

DEFAULT_SCALE = 1.2
DEFAULT_PATCH_SIDE = 25


@dataclass
class ElevationPatch:
    """Square zero-mean elevation patch, optionally with a co-registered albedo patch."""

    elevation: np.ndarray
    albedo: np.ndarray | None = None
    source_id: str = ""
    rotation: int = 0

    def __post_init__(self):
        elev = np.asarray(self.elevation, dtype=np.float64)
        if elev.ndim != 2 or elev.shape[0] != elev.shape[1]:
            raise ValueError(f"elevation must be square, got shape {elev.shape}")
        if not np.all(np.isfinite(elev)):
            raise ValueError("elevation values must be finite")
        self.elevation = elev
        if self.albedo is not None:
            alb = np.asarray(self.albedo, dtype=np.float64)
            if alb.shape != elev.shape:
                raise ValueError("albedo shape must match elevation shape")
            self.albedo = alb
        if self.rotation not in (0, 90, 180, 270):
            raise ValueError(f"rotation must be one of 0/90/180/270, got {self.rotation}")

    @property
    def side(self) -> int:
        return self.elevation.shape[0]


@dataclass
class PatchFilterReport:
    candidate_count: int
    rejected_symmetry: int
    rejected_depth_ratio: int
    rejected_bounds: int
    accepted: int

    def __post_init__(self):
        total = (
            self.accepted
            + self.rejected_symmetry
            + self.rejected_depth_ratio
            + self.rejected_bounds
        )
        if total != self.candidate_count:
            raise ValueError("filter report counts are inconsistent")


@dataclass
class PatchParams:
    """Thresholds for the training-set filters (defaults match the pipeline's operating point)."""

    scale: float = DEFAULT_SCALE
    patch_side: int = DEFAULT_PATCH_SIDE
    symmetry_max_frac: float = 0.4
    min_depth_ratio: float = 0.1
    moon_radius: float = geometry.MOON_RADIUS_KM


def filter_catalog(
    records: list[CatalogRecord],
    min_radius: float,
    max_radius: float,
    max_eccentricity: float,
) -> list[CatalogRecord]:
    """Keep records with radius in [min, max] and eccentricity <= max, order preserved."""
    if not (min_radius < max_radius):
        raise ValueError("min_radius must be < max_radius")
    return [
        r
        for r in records
        if min_radius <= r.radius <= max_radius and r.eccentricity <= max_eccentricity
    ]


def extract_patch(
    dem: RasterGrid,
    record: CatalogRecord,
    scale: float = DEFAULT_SCALE,
    patch_side: int = DEFAULT_PATCH_SIDE,
    albedo: RasterGrid | None = None,
    moon_radius: float = geometry.MOON_RADIUS_KM,
) -> ElevationPatch:
    """Extract a zero-mean crater-centered patch from a tangent-plane raster.

    The window is physically square with half-width ``scale * radius`` and
    is sampled bilinearly at the patch pixel centers. The crater center is
    located through the tangent-plane convention (see :mod:`.geometry`).
    Raises ValueError when the footprint leaves the raster.
    """
    if patch_side < 3:
        raise ValueError("patch_side must be >= 3")
    if record.radius <= 0:
        raise ValueError("degenerate radius")
    east_m, north_m, _ = geometry.latlon_to_plane_m(
        record.lat, record.lon, record.elevation, moon_radius
    )
    col_c = (dem.width - 1) / 2.0 + east_m / dem.cell_size
    row_c = (dem.height - 1) / 2.0 - north_m / dem.cell_size
    half_width_m = scale * record.radius * 1000.0
    step_m = 2.0 * half_width_m / patch_side
    offsets = (np.arange(patch_side) - (patch_side - 1) / 2.0) * step_m
    # patch row 0 is the north edge; source rows grow southward
    cols = np.broadcast_to(col_c + offsets[None, :] / dem.cell_size, (patch_side, patch_side))
    rows = np.broadcast_to(row_c + offsets[:, None] / dem.cell_size, (patch_side, patch_side))
    if (
        cols.min() < 0
        or cols.max() > dem.width - 1
        or rows.min() < 0
        or rows.max() > dem.height - 1
    ):
        raise ValueError(
            f"crater {record.id}: footprint exceeds raster bounds"
        )
    elev, _ = geometry.bilinear_sample(dem.values, cols, rows)
    elev = elev - elev.mean()
    alb_patch = None
    if albedo is not None:
        if (albedo.width, albedo.height, albedo.cell_size) != (
            dem.width,
            dem.height,
            dem.cell_size,
        ):
            raise ValueError("albedo raster must be co-registered with the DEM")
        alb_patch, _ = geometry.bilinear_sample(albedo.values, cols, rows)
    return ElevationPatch(elevation=elev, albedo=alb_patch, source_id=record.id)


def measure_depth(elevation: np.ndarray, scale: float = DEFAULT_SCALE) -> float:
    """Crater depth: highest rim-annulus pixel minus the center pixel.

    The rim is the annulus of pixels whose radius from the patch center is
    within +/-15% of the catalog radius expressed in patch pixels,
    (patch_side / 2) / scale.
    """
    elevation = np.asarray(elevation, dtype=np.float64)
    side = elevation.shape[0]
    center = (side - 1) / 2.0
    rr, cc = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    dist = np.hypot(rr - center, cc - center)
    r_rim = (side / 2.0) / scale
    mask = (dist >= 0.85 * r_rim) & (dist <= 1.15 * r_rim)
    if not mask.any():
        raise ValueError("patch too small: empty rim annulus")
    rim = float(elevation[mask].max())
    return rim - float(elevation[int(center), int(center)])


def symmetry_check(
    patch: ElevationPatch,
    max_frac: float = 0.4,
    scale: float = DEFAULT_SCALE,
) -> bool:
    """True iff all three 90-degree rotations stay within max_frac of the depth.

    A patch with non-positive measured depth is degenerate and fails.
    """
    depth = measure_depth(patch.elevation, scale)
    if depth <= 0:
        return False
    for k in (1, 2, 3):
        diff = np.abs(patch.elevation - np.rot90(patch.elevation, k)).max()
        if diff >= max_frac * depth:
            return False
    return True


def depth_ratio_check(
    patch: ElevationPatch,
    physical_diameter: float,
    min_ratio: float = 0.1,
    scale: float = DEFAULT_SCALE,
) -> bool:
    """True iff depth / physical_diameter >= min_ratio (diameter in meters)."""
    if physical_diameter <= 0:
        raise ValueError("physical_diameter must be > 0")
    return measure_depth(patch.elevation, scale) / physical_diameter >= min_ratio


def rotate_patch(patch: ElevationPatch, rotation: int) -> ElevationPatch:
    """Rotate a patch by a multiple of 90 degrees (counter-clockwise array rotation)."""
    k = {0: 0, 90: 1, 180: 2, 270: 3}[rotation]
    return ElevationPatch(
        elevation=np.rot90(patch.elevation, k).copy(),
        albedo=None if patch.albedo is None else np.rot90(patch.albedo, k).copy(),
        source_id=patch.source_id,
        rotation=rotation,
    )


def build_training_set(
    dem: RasterGrid,
    records: list[CatalogRecord],
    params: PatchParams | None = None,
    albedo: RasterGrid | None = None,
) -> tuple[list[ElevationPatch], PatchFilterReport]:
    """Extract, filter, and rotation-augment patches for every catalog record.

    Records should already be radius/eccentricity filtered via
    :func:`filter_catalog`. Extraction failures count as bounds rejections.
    Each accepted crater contributes the 0/90/180/270-degree rotations, with
    any albedo grid rotated identically.
    """
    params = params or PatchParams()
    patches: list[ElevationPatch] = []
    rejected_bounds = rejected_symmetry = rejected_depth = accepted = 0
    for rec in records:
        try:
            patch = extract_patch(
                dem,
                rec,
                scale=params.scale,
                patch_side=params.patch_side,
                albedo=albedo,
                moon_radius=params.moon_radius,
            )
        except ValueError:
            rejected_bounds += 1
            continue
        if not symmetry_check(patch, params.symmetry_max_frac, params.scale):
            rejected_symmetry += 1
            continue
        diameter_m = 2.0 * rec.radius * 1000.0
        if not depth_ratio_check(patch, diameter_m, params.min_depth_ratio, params.scale):
            rejected_depth += 1
            continue
        accepted += 1
        for rotation in (0, 90, 180, 270):
            patches.append(rotate_patch(patch, rotation))
    report = PatchFilterReport(
        candidate_count=len(records),
        rejected_symmetry=rejected_symmetry,
        rejected_depth_ratio=rejected_depth,
        rejected_bounds=rejected_bounds,
        accepted=accepted,
    )
    return patches, report
