"""Shared helpers for the test suite."""

import numpy as np
import pytest

from eigencrater import geometry
from eigencrater.raster_io import CatalogRecord, RasterGrid


def bowl_dem(
    width: int = 120,
    height: int = 120,
    cell_size: float = 100.0,
    radius_m: float = 2000.0,
    depth_m: float = 400.0,
    rim_m: float = 80.0,
    rim_width: float = 0.35,
    center_east_m: float = 0.0,
    center_north_m: float = 0.0,
    base_m: float = 0.0,
):
    """Analytic parabolic bowl with a Gaussian rim stamped on a flat raster.

    Returns (RasterGrid, CatalogRecord, profile_fn). The record uses the
    tangent-plane convention so extract_patch centers on the bowl exactly.
    """

    def profile(r_norm):
        r = np.asarray(r_norm, dtype=np.float64)
        inside = -depth_m + (depth_m + rim_m) * r * r
        outside = rim_m * np.exp(-((r - 1.0) ** 2) / rim_width**2)
        return np.where(r <= 1.0, inside, outside)

    cols, rows = np.meshgrid(np.arange(width), np.arange(height))
    east = (cols - (width - 1) / 2.0) * cell_size
    north = ((height - 1) / 2.0 - rows) * cell_size
    r_norm = np.hypot(east - center_east_m, north - center_north_m) / radius_m
    values = base_m + profile(r_norm)
    grid = RasterGrid.from_array(values, cell_size)
    lat, lon, elev = geometry.plane_to_latlon(center_east_m, center_north_m, base_m)
    record = CatalogRecord(
        id="bowl", lat=lat, lon=lon, radius=radius_m / 1000.0, eccentricity=0.0, elevation=elev
    )
    return grid, record, profile


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
