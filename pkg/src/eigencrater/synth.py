"""Synthetic crater fields and scene rendering for desk-scale ground truth.

Terrain is a heightfield over the tangent plane anchored at lat 0, lon 0
(see :mod:`.geometry`): grid position (east, north) with height h sits at
(R + h/1000, east/1000, north/1000) km in MCMF. Catalog records are emitted
from those exact 3-D points, so lifting a record back to 3-D reproduces the
rendered geometry with no approximation error. The scene renderer shares
the reflectance model with the template renderer, which keeps rendered
craters and rendered templates comparable by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import geometry
from .geometry import CameraModel, Pose
from .raster_io import (
    CatalogRecord,
    RasterGrid,
    read_catalog,
    read_json_file,
    read_raster,
    write_catalog,
    write_json_file,
    write_raster,
)
from .render import lunar_lambert


@dataclass
class SyntheticCrater:
    """Parametric bowl crater stamped into the terrain."""

    center_lat: float
    center_lon: float
    radius: float
    depth: float
    rim_height: float
    rim_width: float = 0.35
    east_m: float = 0.0
    north_m: float = 0.0


@dataclass
class FieldParams:
    """Knobs for :func:`generate_field`. Lengths in meters unless noted."""

    width: int = 1200
    height: int = 1200
    cell_size: float = 40.0
    radius_range_km: tuple[float, float] = (0.8, 1.9)
    depth_to_diameter: tuple[float, float] = (0.10, 0.15)
    rim_height_frac: tuple[float, float] = (0.15, 0.30)
    rim_width: float = 0.35
    base_noise_sigma: float = 8.0
    base_noise_corr: float = 4000.0
    margin_factor: float = 1.5
    max_attempts_per_crater: int = 200
    with_albedo: bool = False
    albedo_mean: float = 0.25
    albedo_contrast: float = 0.05
    moon_radius: float = geometry.MOON_RADIUS_KM


@dataclass
class SyntheticScene:
    terrain: RasterGrid
    craters: list[SyntheticCrater]
    catalog: list[CatalogRecord]
    sun_dir_M: np.ndarray
    poses: list[Pose] = field(default_factory=list)
    albedo: RasterGrid | None = None


def crater_profile(r_norm, depth: float, rim_height: float, rim_width: float = 0.35):
    """Radial crater elevation profile (same units as depth/rim_height).

    Inside the rim (r_norm <= 1) the profile is the parabola running from
    -depth at the center up to +rim_height at the rim crest; outside, the
    rim decays as a Gaussian in (r_norm - 1) with width ``rim_width``. The
    profile is continuous at the crest and its total relief (center to rim
    maximum) is depth + rim_height.
    """
    r = np.asarray(r_norm, dtype=np.float64)
    inside = -depth + (depth + rim_height) * r * r
    outside = rim_height * np.exp(-((r - 1.0) ** 2) / rim_width**2)
    return np.where(r <= 1.0, inside, outside)


def _pixel_plane_m(params: FieldParams, col, row):
    east = (np.asarray(col) - (params.width - 1) / 2.0) * params.cell_size
    north = ((params.height - 1) / 2.0 - np.asarray(row)) * params.cell_size
    return east, north


def _smooth_noise(rng: np.random.Generator, shape, sigma_cells: float, amplitude: float) -> np.ndarray:
    noise = rng.standard_normal(shape)
    smooth = ndimage.gaussian_filter(noise, sigma=sigma_cells, mode="reflect")
    std = smooth.std()
    if std <= 0:
        return np.zeros(shape)
    return smooth * (amplitude / std)


def generate_field(
    n_craters: int,
    params: FieldParams | None = None,
    seed: int = 0,
) -> SyntheticScene:
    """Stamp non-overlapping bowl craters onto band-limited noise terrain.

    Radii are log-uniform over the configured range. The emitted catalog
    holds the exact crater centers: the record's 3-D point is the terrain
    surface point of the pre-crater base elevation at the center (the
    mid-reference the detector effectively observes). Deterministic per
    seed; raises if placement fails after bounded retries.
    """
    if n_craters < 1:
        raise ValueError("n_craters must be >= 1")
    params = params or FieldParams()
    rng = np.random.default_rng(seed)
    base = _smooth_noise(
        rng,
        (params.height, params.width),
        params.base_noise_corr / params.cell_size,
        params.base_noise_sigma,
    )

    placed: list[tuple[float, float, float]] = []  # east, north, radius_m
    craters: list[SyntheticCrater] = []
    half_w = (params.width - 1) / 2.0 * params.cell_size
    half_h = (params.height - 1) / 2.0 * params.cell_size
    for _ in range(n_craters):
        log_lo, log_hi = np.log(params.radius_range_km[0]), np.log(params.radius_range_km[1])
        ok = False
        for _attempt in range(params.max_attempts_per_crater):
            radius_km = float(np.exp(rng.uniform(log_lo, log_hi)))
            radius_m = radius_km * 1000.0
            margin = params.margin_factor * radius_m
            if 2 * margin >= min(2 * half_w, 2 * half_h):
                continue
            east = rng.uniform(-half_w + margin, half_w - margin)
            north = rng.uniform(-half_h + margin, half_h - margin)
            if all(
                np.hypot(east - e0, north - n0) > params.margin_factor * (radius_m + r0)
                for e0, n0, r0 in placed
            ):
                ok = True
                break
        if not ok:
            raise ValueError(
                f"could not place {n_craters} non-overlapping craters after retries"
            )
        placed.append((east, north, radius_m))
        ratio = rng.uniform(*params.depth_to_diameter)
        depth_m = ratio * 2.0 * radius_m
        rim_m = rng.uniform(*params.rim_height_frac) * depth_m
        craters.append(
            SyntheticCrater(
                center_lat=0.0,
                center_lon=0.0,
                radius=radius_km,
                depth=depth_m / 1000.0,
                rim_height=rim_m / 1000.0,
                rim_width=params.rim_width,
                east_m=east,
                north_m=north,
            )
        )

    cols, rows = np.meshgrid(np.arange(params.width), np.arange(params.height))
    east_g, north_g = _pixel_plane_m(params, cols, rows)
    terrain = base.copy()
    catalog: list[CatalogRecord] = []
    for i, crater in enumerate(craters):
        radius_m = crater.radius * 1000.0
        r_norm = np.hypot(east_g - crater.east_m, north_g - crater.north_m) / radius_m
        stamp_zone = r_norm <= 1.0 + 4.0 * crater.rim_width
        terrain[stamp_zone] += crater_profile(
            r_norm[stamp_zone], crater.depth * 1000.0, crater.rim_height * 1000.0, crater.rim_width
        )
        base_h, _ = geometry.bilinear_sample(
            base,
            np.array([(crater.east_m / params.cell_size) + (params.width - 1) / 2.0]),
            np.array([(params.height - 1) / 2.0 - crater.north_m / params.cell_size]),
        )
        lat, lon, elev_m = geometry.plane_to_latlon(
            crater.east_m, crater.north_m, float(base_h[0]), params.moon_radius
        )
        crater.center_lat = lat
        crater.center_lon = lon
        catalog.append(
            CatalogRecord(
                id=f"c{i:04d}",
                lat=lat,
                lon=lon,
                radius=crater.radius,
                eccentricity=0.0,
                elevation=elev_m,
            )
        )

    albedo_grid = None
    if params.with_albedo:
        alb = params.albedo_mean + _smooth_noise(
            rng,
            (params.height, params.width),
            0.5 * params.base_noise_corr / params.cell_size,
            params.albedo_contrast,
        )
        albedo_grid = RasterGrid.from_array(np.clip(alb, 0.02, 0.98), params.cell_size)

    return SyntheticScene(
        terrain=RasterGrid.from_array(terrain, params.cell_size),
        craters=craters,
        catalog=catalog,
        sun_dir_M=np.array([1.0, 0.0, 0.0]),
        poses=[],
        albedo=albedo_grid,
    )


def make_sun(incidence_deg: float, azimuth_deg: float) -> np.ndarray:
    """Unit MCMF vector toward the Sun over the plane anchor point.

    Incidence is measured from the local vertical (+x); azimuth 0 points
    east (+y), 90 points north (+z).
    """
    inc = np.deg2rad(incidence_deg)
    az = np.deg2rad(azimuth_deg)
    return np.array(
        [np.cos(inc), np.sin(inc) * np.cos(az), np.sin(inc) * np.sin(az)]
    )


def make_pose(
    emission_deg: float,
    azimuth_deg: float,
    altitude_km: float,
    roll_deg: float = 0.0,
    moon_radius: float = geometry.MOON_RADIUS_KM,
) -> Pose:
    """Camera pose whose boresight hits the plane anchor at a given tilt.

    The camera sits along the direction that makes ``emission_deg`` with
    the local vertical at the anchor (azimuth as in :func:`make_sun`) at an
    altitude above the sphere, looking at the anchor; ``roll_deg`` spins it
    about the boresight.
    """
    target = np.array([moon_radius, 0.0, 0.0])
    up = np.array([1.0, 0.0, 0.0])
    east = np.array([0.0, 1.0, 0.0])
    north = np.array([0.0, 0.0, 1.0])
    em = np.deg2rad(emission_deg)
    az = np.deg2rad(azimuth_deg)
    to_cam = np.cos(em) * up + np.sin(em) * (np.cos(az) * east + np.sin(az) * north)
    b = float(target @ to_cam)
    r_target = moon_radius + altitude_km
    d = -b + np.sqrt(b * b + r_target**2 - moon_radius**2)
    position = target + d * to_cam
    c3 = (target - position) / np.linalg.norm(target - position)
    # image u roughly east, v roughly south (north-up image at zero roll)
    ref = north if abs(c3 @ north) < 0.9 else east
    c1 = np.cross(c3, ref)
    c1 /= np.linalg.norm(c1)
    c2 = np.cross(c3, c1)
    roll = np.deg2rad(roll_deg)
    c1r = np.cos(roll) * c1 + np.sin(roll) * c2
    c2r = -np.sin(roll) * c1 + np.cos(roll) * c2
    return Pose(R_CM=np.vstack([c1r, c2r, c3]), r_CM=position)


def _terrain_interpolators(scene: SyntheticScene):
    terrain = scene.terrain
    grad_r, grad_c = np.gradient(terrain.values, terrain.cell_size)
    # d h / d east = column gradient; d h / d north = -row gradient
    return terrain.values, grad_c, -grad_r


def _plane_to_pixel(terrain: RasterGrid, east_m, north_m):
    col = east_m / terrain.cell_size + (terrain.width - 1) / 2.0
    row = (terrain.height - 1) / 2.0 - north_m / terrain.cell_size
    return col, row


def render_scene(
    scene: SyntheticScene,
    pose: Pose,
    cam: CameraModel,
    moon_radius: float = geometry.MOON_RADIUS_KM,
    max_iters: int = 40,
    shadow_step_frac: float = 1.0,
) -> RasterGrid:
    """Ray-cast the terrain heightfield and shade it like the templates.

    Per-pixel rays are intersected with the heightfield by fixed-point
    iteration on the plane height (valid for the shallow slopes and
    moderate emission angles used here; residuals are checked). Shading
    uses per-point normals, per-pixel emission vectors, and a marched
    shadow test against the same heightfield. Output is scaled to [0, 1].
    """
    heights, dh_de, dh_dn = _terrain_interpolators(scene)
    terrain = scene.terrain
    h_km = heights / 1000.0

    uu, vv = np.meshgrid(
        np.arange(cam.width, dtype=np.float64), np.arange(cam.height, dtype=np.float64)
    )
    rays_c = np.stack(
        [(uu - cam.up) / cam.dx, (vv - cam.vp) / cam.dy, np.ones_like(uu)], axis=-1
    )
    rays_m = rays_c @ pose.R_CM  # row-vector convention: R_CM^T @ ray per pixel
    rays_m /= np.linalg.norm(rays_m, axis=-1, keepdims=True)
    dir_x = rays_m[..., 0]
    if np.any(dir_x >= -1e-9):
        raise ValueError("camera footprint leaves the terrain (rays missing the plane)")

    cam_pos = pose.r_CM
    h_cur = np.zeros_like(uu)
    t = (moon_radius - cam_pos[0]) / dir_x
    for _ in range(max_iters):
        t = (moon_radius + h_cur / 1000.0 - cam_pos[0]) / dir_x
        east_m = (cam_pos[1] + t * rays_m[..., 1]) * 1000.0
        north_m = (cam_pos[2] + t * rays_m[..., 2]) * 1000.0
        col, row = _plane_to_pixel(terrain, east_m, north_m)
        h_new, valid = geometry.bilinear_sample(heights, col, row)
        if not np.all(valid):
            raise ValueError("camera footprint leaves the terrain")
        if np.max(np.abs(h_new - h_cur)) < 1e-6:
            h_cur = h_new
            break
        h_cur = h_new
    east_m = (cam_pos[1] + t * rays_m[..., 1]) * 1000.0
    north_m = (cam_pos[2] + t * rays_m[..., 2]) * 1000.0
    col, row = _plane_to_pixel(terrain, east_m, north_m)

    ge, _ = geometry.bilinear_sample(dh_de, col, row)
    gn, _ = geometry.bilinear_sample(dh_dn, col, row)
    normals = np.stack([np.ones_like(ge), -ge, -gn], axis=-1)
    normals /= np.linalg.norm(normals, axis=-1, keepdims=True)

    surf = np.stack(
        [moon_radius + h_cur / 1000.0, east_m / 1000.0, north_m / 1000.0], axis=-1
    )
    to_cam = cam_pos - surf
    ranges = np.linalg.norm(to_cam, axis=-1, keepdims=True)
    emission_dirs = to_cam / ranges

    s = np.asarray(scene.sun_dir_M, dtype=np.float64)
    cos_i = np.clip(normals @ s, -1.0, 1.0)
    cos_e = np.clip(np.sum(normals * emission_dirs, axis=-1), -1.0, 1.0)
    cos_phi = np.clip(emission_dirs @ s, -1.0, 1.0)
    incidence = np.arccos(cos_i)
    emission = np.arccos(cos_e)
    phase = np.arccos(cos_phi)

    if scene.albedo is not None:
        albedo, _ = geometry.bilinear_sample(scene.albedo.values, col, row)
        albedo = np.clip(albedo, 1e-6, 1.0)
    else:
        albedo = 0.25
    value = lunar_lambert(albedo, incidence, emission, phase)

    shadowed = _heightfield_shadows(
        terrain, heights, east_m, north_m, h_cur, s, shadow_step_frac
    )
    value = np.where(shadowed, 0.0, value)
    peak = value.max()
    if peak > 0:
        value = value / peak
    return RasterGrid.from_array(value, cell_size=1.0)


def _heightfield_shadows(
    terrain: RasterGrid,
    heights: np.ndarray,
    east_m: np.ndarray,
    north_m: np.ndarray,
    h_surf: np.ndarray,
    sun_dir_M: np.ndarray,
    step_frac: float,
) -> np.ndarray:
    """March rays toward the Sun over the heightfield; True where blocked.

    The Sun direction is mapped to plane axes (up = +x, east = +y,
    north = +z); rays march at ``step_frac`` cell steps until they climb
    above the terrain maximum.
    """
    s_up, s_e, s_n = float(sun_dir_M[0]), float(sun_dir_M[1]), float(sun_dir_M[2])
    if s_up <= 1e-6:
        return np.ones_like(h_surf, dtype=bool)
    h_max = float(heights.max())
    horiz = float(np.hypot(s_e, s_n))
    if horiz < 1e-12:
        return np.zeros_like(h_surf, dtype=bool)
    step = step_frac * terrain.cell_size
    lift = 0.05 * terrain.cell_size * s_up  # bias against self-shadowing
    max_clearance = h_max - (h_surf.min())
    n_steps = int(np.ceil(max_clearance / (step * s_up / horiz))) + 1 if max_clearance > 0 else 0
    shadowed = np.zeros_like(h_surf, dtype=bool)
    if n_steps <= 0:
        return shadowed
    e = east_m.copy()
    n = north_m.copy()
    h = h_surf + lift
    de = step * s_e / horiz
    dn = step * s_n / horiz
    dh = step * s_up / horiz
    active = np.ones_like(h_surf, dtype=bool)
    for _ in range(n_steps):
        e = e + de
        n = n + dn
        h = h + dh
        active &= h < h_max
        if not active.any():
            break
        col, row = _plane_to_pixel(terrain, e, n)
        ground, valid = geometry.bilinear_sample(heights, col, row)
        blocked = active & valid & (ground > h)
        shadowed |= blocked
        active &= ~shadowed
    return shadowed


# ---------------------------------------------------------------------------
# Scene bundle persistence
# ---------------------------------------------------------------------------


def save_scene(scene: SyntheticScene, cam: CameraModel, out_dir: str | Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_raster(scene.terrain, out_dir / "terrain.egr")
    if scene.albedo is not None:
        write_raster(scene.albedo, out_dir / "albedo.egr")
    write_catalog(scene.catalog, out_dir / "catalog.csv")
    meta = {
        "version": 1,
        "camera": {
            "dx": cam.dx,
            "dy": cam.dy,
            "up": cam.up,
            "vp": cam.vp,
            "width": cam.width,
            "height": cam.height,
        },
        "sun_dir_M": [float(x) for x in scene.sun_dir_M],
        "poses": [
            {
                "R_CM": [float(x) for x in pose.R_CM.reshape(-1)],
                "r_CM": [float(x) for x in pose.r_CM],
            }
            for pose in scene.poses
        ],
    }
    write_json_file(meta, out_dir / "scene.json")


def load_scene(in_dir: str | Path) -> tuple[SyntheticScene, CameraModel]:
    in_dir = Path(in_dir)
    meta = read_json_file(in_dir / "scene.json")
    if meta.get("version") != 1:
        raise ValueError(f"unsupported scene version: {meta.get('version')}")
    cam = CameraModel(**meta["camera"])
    terrain = read_raster(in_dir / "terrain.egr")
    albedo_path = in_dir / "albedo.egr"
    albedo = read_raster(albedo_path) if albedo_path.exists() else None
    catalog = read_catalog(in_dir / "catalog.csv")
    poses = [
        Pose(R_CM=np.asarray(p["R_CM"]).reshape(3, 3), r_CM=np.asarray(p["r_CM"]))
        for p in meta["poses"]
    ]
    scene = SyntheticScene(
        terrain=terrain,
        craters=[],
        catalog=catalog,
        sun_dir_M=np.asarray(meta["sun_dir_M"], dtype=np.float64),
        poses=poses,
        albedo=albedo,
    )
    return scene, cam
