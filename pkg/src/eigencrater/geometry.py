"""Camera model, nadir-frame homographies, warping, and conic crater projection.

Frames and conventions
----------------------
* MCMF: Moon-centered, Moon-fixed right-handed frame; positions in km.
* Camera frame C: +z along the boresight, +x along image columns (u),
  +y along image rows (v). ``Pose.R_CM`` rotates MCMF vectors into C, so
  its rows are the camera basis vectors expressed in MCMF.
* Nadir frame N: a virtual camera at the same altitude whose boresight
  passes through the boresight/surface intersection point and the Moon
  center. Its +x axis is built from the camera's +y axis so the two frames
  share their in-plane orientation as closely as possible.
* Image pixels: u = column, v = row, both measured at pixel centers.

Local rasters are treated as tangent-plane grids anchored at lat 0, lon 0:
the plane touches the sphere at (R, 0, 0), +y (east) maps to columns and
+z (north) maps to rows counted from the grid center. ``catalog_to_3d`` of
a record produced under this convention returns the exact 3-D point used
to build it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .raster_io import CatalogRecord, RasterGrid

MOON_RADIUS_KM = 1737.4


@dataclass
class CameraModel:
    """Pinhole camera: focal lengths over pixel pitch and principal point."""

    dx: float
    dy: float
    up: float
    vp: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.dx > 0 and self.dy > 0):
            raise ValueError("dx and dy must be > 0")
        if not (0 <= self.up < self.width and 0 <= self.vp < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array(
            [[self.dx, 0.0, self.up], [0.0, self.dy, self.vp], [0.0, 0.0, 1.0]]
        )

    @property
    def K_inv(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.dx, 0.0, -self.up / self.dx],
                [0.0, 1.0 / self.dy, -self.vp / self.dy],
                [0.0, 0.0, 1.0],
            ]
        )


@dataclass
class Pose:
    """Camera attitude and position relative to MCMF (position in km)."""

    R_CM: np.ndarray
    r_CM: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R_CM, dtype=np.float64).reshape(3, 3).copy()
        r = np.asarray(self.r_CM, dtype=np.float64).reshape(3).copy()
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-9:
            raise ValueError("R_CM is not orthonormal within 1e-9")
        if abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("R_CM must have determinant +1")
        R.flags.writeable = False
        r.flags.writeable = False
        self.R_CM = R
        self.r_CM = r

    @property
    def boresight(self) -> np.ndarray:
        """Boresight direction c3 expressed in MCMF."""
        return self.R_CM[2]


@dataclass
class NadirAdaptation:
    """Nadir frame attached to the boresight/surface intersection.

    ``H_NC`` (camera pixels -> nadir pixels) is filled in by
    :func:`homography_chain`; ``sun_N`` is present when a Sun direction was
    supplied to :func:`nadir_frame`.
    """

    R_NM: np.ndarray
    d_surface: float
    emission_N: np.ndarray
    sun_N: np.ndarray | None = None
    H_NC: np.ndarray | None = None


@dataclass
class CatalogCrater3D:
    """Catalog crater as a 3-D rim circle: center (km, MCMF), unit normal, radius (km)."""

    center: np.ndarray
    normal: np.ndarray
    radius: float
    id: str


@dataclass
class ProjectedCrater:
    """Image-plane ellipse of a projected catalog crater (pixels, radians)."""

    center_uv: np.ndarray
    semi_major: float
    semi_minor: float
    orientation: float
    id: str


def surface_distance(pose: Pose, moon_radius: float = MOON_RADIUS_KM) -> float:
    """Distance from the camera to the mean sphere along the boresight.

    Solves ||r + d c3||^2 = R^2 and returns the smaller root (the near-side
    intersection). Raises if the camera is inside the sphere or the
    boresight misses it.
    """
    r = pose.r_CM
    c3 = pose.boresight
    if np.linalg.norm(r) <= moon_radius:
        raise ValueError("camera is not outside the sphere")
    b = float(r @ c3)
    disc = b * b - (float(r @ r) - moon_radius**2)
    if disc < 0:
        raise ValueError("boresight does not intersect the sphere")
    d = -b - np.sqrt(disc)
    if d <= 0:
        raise ValueError("boresight points away from the sphere")
    return float(d)


def nadir_frame(
    pose: Pose,
    moon_radius: float = MOON_RADIUS_KM,
    sun_dir_M: np.ndarray | None = None,
) -> NadirAdaptation:
    """Construct the nadir frame over the boresight/surface point.

    The frame's -z axis points radially outward at the intersection point
    scaled back to the camera's altitude; +x is built from the camera's +y
    axis (normalized cross product, which the construction requires for an
    orthonormal result). Emission (and optionally Sun) directions are
    returned expressed in the nadir frame, taking the camera-frame emission
    vector as (0, 0, -1).
    """
    d = surface_distance(pose, moon_radius)
    c2 = pose.R_CM[1]
    r_SM = pose.boresight * d + pose.r_CM
    r_NM = r_SM * (np.linalg.norm(pose.r_CM) / moon_radius)
    n3 = -r_NM / np.linalg.norm(r_NM)
    n1 = np.cross(c2, n3)
    n1_norm = np.linalg.norm(n1)
    if n1_norm < 1e-12:
        raise ValueError("camera +y axis is parallel to the nadir direction")
    n1 = n1 / n1_norm
    n2 = np.cross(n3, n1)
    R_NM = np.vstack([n1, n2, n3])
    R_NC = R_NM @ pose.R_CM.T
    emission_N = R_NC @ np.array([0.0, 0.0, -1.0])
    sun_N = None if sun_dir_M is None else R_NM @ np.asarray(sun_dir_M, dtype=np.float64)
    return NadirAdaptation(R_NM=R_NM, d_surface=d, emission_N=emission_N, sun_N=sun_N)


def homography_chain(
    pose: Pose,
    cam: CameraModel,
    adaptation: NadirAdaptation,
    moon_radius: float = MOON_RADIUS_KM,
) -> NadirAdaptation:
    """Fill in H_NC = H_NS @ inv(H_CS), normalized so H_NC[2, 2] = 1.

    H_CS maps surface-plane coordinates (km, axes aligned with the nadir
    frame) to camera pixels and H_NS maps the same plane to nadir pixels.
    """
    R_CN = pose.R_CM @ adaptation.R_NM.T
    r_SC_C = np.array([0.0, 0.0, adaptation.d_surface])
    H_CS = cam.K @ np.column_stack([R_CN[:, 0], R_CN[:, 1], r_SC_C])
    r_NM_norm = np.linalg.norm(pose.r_CM)
    r_SN_N = np.array([0.0, 0.0, r_NM_norm - moon_radius])
    H_NS = cam.K @ np.column_stack([np.eye(3)[:, 0], np.eye(3)[:, 1], r_SN_N])
    if abs(np.linalg.det(H_CS)) < 1e-18:
        raise ValueError("H_CS is singular")
    H_NC = H_NS @ np.linalg.inv(H_CS)
    if abs(H_NC[2, 2]) < 1e-15:
        raise ValueError("H_NC cannot be normalized: vanishing (3,3) entry")
    H_NC = H_NC / H_NC[2, 2]
    return NadirAdaptation(
        R_NM=adaptation.R_NM,
        d_surface=adaptation.d_surface,
        emission_N=adaptation.emission_N,
        sun_N=adaptation.sun_N,
        H_NC=H_NC,
    )


def apply_homography(H: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Apply a 3x3 homography to (..., 2) pixel coordinates."""
    uv = np.asarray(uv, dtype=np.float64)
    ones = np.ones(uv.shape[:-1] + (1,))
    hom = np.concatenate([uv, ones], axis=-1) @ H.T
    return hom[..., :2] / hom[..., 2:3]


def bilinear_sample(values: np.ndarray, x: np.ndarray, y: np.ndarray):
    """Bilinear interpolation of a 2-D array at (x=col, y=row) coordinates.

    Returns (samples, valid) where valid marks coordinates inside
    [0, W-1] x [0, H-1]; samples outside are 0. Integer coordinates
    reproduce the stored values exactly.
    """
    h, w = values.shape
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    valid = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    xc = np.clip(x, 0, w - 1)
    yc = np.clip(y, 0, h - 1)
    x0 = np.floor(xc).astype(np.intp)
    y0 = np.floor(yc).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xc - x0
    fy = yc - y0
    v00 = values[y0, x0]
    v01 = values[y0, x1]
    v10 = values[y1, x0]
    v11 = values[y1, x1]
    top = v00 * (1.0 - fx) + v01 * fx
    bot = v10 * (1.0 - fx) + v11 * fx
    out = top * (1.0 - fy) + bot * fy
    out = np.where(valid, out, 0.0)
    return out, valid


def warp_image(
    image: RasterGrid, H: np.ndarray, out_size: tuple[int, int] | None = None
) -> tuple[RasterGrid, np.ndarray]:
    """Warp an image by a homography H (source pixels -> output pixels).

    Uses inverse mapping with bilinear sampling. Returns the warped grid
    plus a boolean validity mask; output pixels that sample outside the
    source are 0 and marked invalid.
    """
    H = np.asarray(H, dtype=np.float64)
    if abs(np.linalg.det(H)) < 1e-18:
        raise ValueError("homography is singular")
    if out_size is None:
        out_w, out_h = image.width, image.height
    else:
        out_w, out_h = out_size
    Hinv = np.linalg.inv(H)
    u, v = np.meshgrid(np.arange(out_w, dtype=np.float64), np.arange(out_h, dtype=np.float64))
    denom = Hinv[2, 0] * u + Hinv[2, 1] * v + Hinv[2, 2]
    src_x = (Hinv[0, 0] * u + Hinv[0, 1] * v + Hinv[0, 2]) / denom
    src_y = (Hinv[1, 0] * u + Hinv[1, 1] * v + Hinv[1, 2]) / denom
    out, valid = bilinear_sample(image.values, src_x, src_y)
    valid &= denom > 0
    out = np.where(valid, out, 0.0)
    return RasterGrid.from_array(out, image.cell_size), valid


def radial_unit(lat_deg: float, lon_deg: float) -> np.ndarray:
    lat = np.deg2rad(lat_deg)
    lon = np.deg2rad(lon_deg)
    return np.array(
        [np.cos(lat) * np.cos(lon), np.cos(lat) * np.sin(lon), np.sin(lat)]
    )


def catalog_to_3d(
    records: list[CatalogRecord], moon_radius: float = MOON_RADIUS_KM
) -> list[CatalogCrater3D]:
    """Lift catalog records to 3-D rim circles on the (elevated) sphere."""
    craters = []
    for rec in records:
        unit = radial_unit(rec.lat, rec.lon)
        center = (moon_radius + rec.elevation / 1000.0) * unit
        craters.append(
            CatalogCrater3D(center=center, normal=unit, radius=rec.radius, id=rec.id)
        )
    return craters


def latlon_to_plane_m(
    lat_deg: float, lon_deg: float, elevation_m: float = 0.0,
    moon_radius: float = MOON_RADIUS_KM,
) -> tuple[float, float, float]:
    """Map catalog coordinates to tangent-plane (east, north, height) meters.

    Exact inverse of the convention used by the synthetic scene generator:
    the 3-D point p of the record satisfies p = (R + h_plane/1000, e/1000,
    n/1000) in km, so east/north are just the y/z components.
    """
    p = (moon_radius + elevation_m / 1000.0) * radial_unit(lat_deg, lon_deg)
    east_m = p[1] * 1000.0
    north_m = p[2] * 1000.0
    height_m = (p[0] - moon_radius) * 1000.0
    return float(east_m), float(north_m), float(height_m)


def plane_to_latlon(
    east_m: float, north_m: float, height_m: float = 0.0,
    moon_radius: float = MOON_RADIUS_KM,
) -> tuple[float, float, float]:
    """Inverse of :func:`latlon_to_plane_m`: plane meters -> (lat, lon, elev_m)."""
    p = np.array(
        [moon_radius + height_m / 1000.0, east_m / 1000.0, north_m / 1000.0]
    )
    norm = np.linalg.norm(p)
    lat = np.rad2deg(np.arcsin(p[2] / norm))
    lon = np.rad2deg(np.arctan2(p[1], p[0]))
    elev_m = (norm - moon_radius) * 1000.0
    return float(lat), float(lon), float(elev_m)


def project_point(point_M: np.ndarray, pose: Pose, cam: CameraModel):
    """Project an MCMF point to pixels. Returns (u, v, z_cam)."""
    p_C = pose.R_CM @ (np.asarray(point_M, dtype=np.float64) - pose.r_CM)
    z = p_C[2]
    if z <= 0:
        return None, None, float(z)
    u = cam.dx * p_C[0] / z + cam.up
    v = cam.dy * p_C[1] / z + cam.vp
    return float(u), float(v), float(z)


def _ellipse_from_conic(C: np.ndarray):
    """Extract (center, semi-axes, orientation) from a 3x3 conic matrix."""
    M = C[:2, :2]
    b = C[:2, 2]
    det = np.linalg.det(M)
    if abs(det) < 1e-18:
        raise ValueError("degenerate conic")
    center = -np.linalg.solve(M, b)
    k = C[2, 2] - b @ np.linalg.solve(M, b)
    # fix the scale so the interior evaluates negative: delta' M delta + k = 0
    # with M positive definite and k < 0
    evals, evecs = np.linalg.eigh(M)
    if evals[0] < 0 and evals[1] < 0:
        evals, k = -evals, -k
    if evals[0] <= 0 or k >= 0:
        raise ValueError("conic is not an ellipse")
    axes = np.sqrt(-k / evals)
    order = np.argsort(axes)[::-1]
    semi_major, semi_minor = float(axes[order[0]]), float(axes[order[1]])
    major_vec = evecs[:, order[0]]
    orientation = float(np.arctan2(major_vec[1], major_vec[0])) % np.pi
    return center, semi_major, semi_minor, orientation


def project_crater(
    crater: CatalogCrater3D, pose: Pose, cam: CameraModel
) -> ProjectedCrater | None:
    """Project a 3-D rim circle into the image as an ellipse.

    Returns None when the crater center is behind the camera, faces away
    from it (far side), or projects outside the image. Raises when the
    camera lies in the crater plane (degenerate conic).
    """
    n = crater.normal / np.linalg.norm(crater.normal)
    seed = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(n, seed)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(n, e1)
    offset = crater.center - pose.r_CM
    if abs(n @ offset) < 1e-12:
        raise ValueError("camera lies in the crater plane")
    if n @ offset > 0:
        return None
    u, v, z = project_point(crater.center, pose, cam)
    if u is None:
        return None
    if not (0 <= u < cam.width and 0 <= v < cam.height):
        return None
    H_p = cam.K @ pose.R_CM @ np.column_stack([e1, e2, offset])
    if abs(np.linalg.det(H_p)) < 1e-18:
        raise ValueError("degenerate projection homography")
    Hinv = np.linalg.inv(H_p)
    Q = np.diag([1.0 / crater.radius**2, 1.0 / crater.radius**2, -1.0])
    C_img = Hinv.T @ Q @ Hinv
    C_img = 0.5 * (C_img + C_img.T)
    center, semi_major, semi_minor, orientation = _ellipse_from_conic(C_img)
    return ProjectedCrater(
        center_uv=center,
        semi_major=semi_major,
        semi_minor=semi_minor,
        orientation=orientation,
        id=crater.id,
    )


def filter_projected(
    projected: list[ProjectedCrater],
    min_semi_minor: float = 5.0,
    max_semi_major: float = 105.0,
) -> list[ProjectedCrater]:
    """Keep craters with semi-minor > min and semi-major < max (pixels)."""
    return [
        p
        for p in projected
        if p.semi_minor > min_semi_minor and p.semi_major < max_semi_major
    ]
