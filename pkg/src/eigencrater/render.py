"""Physically based rendering of crater templates.

A template's elevation grid becomes a triangular mesh (pixel centers as
vertices, both triangles of each cell sharing the (i, j)-(i+1, j+1)
diagonal). Grid-to-space convention: column index -> +x (east), row index
-> -y (row 0 is the north edge), elevation -> +z. Shading uses the
Lunar-Lambert bidirectional radiance factor with an exponential phase
weighting between the Lambertian and Lommel-Seeliger terms, a single
collimated Sun vector for all vertices, and ray-traced hard shadows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class SurfaceMesh:
    """Triangle mesh with per-vertex normals.

    Faces are counter-clockwise when seen from +z. A mesh built from a
    P x P grid has P^2 vertices and 2 (P-1)^2 faces.
    """

    vertices: np.ndarray
    faces: np.ndarray
    vertex_normals: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.intp).reshape(-1, 3)
        if self.faces.min(initial=0) < 0 or self.faces.max(initial=-1) >= len(self.vertices):
            raise ValueError("face indices out of range")
        if self.vertex_normals is not None:
            normals = np.asarray(self.vertex_normals, dtype=np.float64).reshape(-1, 3)
            norms = np.linalg.norm(normals, axis=1)
            if np.max(np.abs(norms - 1.0)) > 1e-9:
                raise ValueError("vertex normals must be unit length within 1e-9")
            self.vertex_normals = normals


@dataclass
class LightingGeometry:
    """Unit directions toward the Sun and the camera, plus surface albedo.

    Directions are expressed in the template grid frame (x east, y north,
    z up). Albedo is either a uniform constant in (0, 1] or a per-vertex
    grid.
    """

    sun_dir: np.ndarray
    emission_dir: np.ndarray
    albedo: float | np.ndarray = 0.25

    def __post_init__(self):
        self.sun_dir = np.asarray(self.sun_dir, dtype=np.float64).reshape(3)
        self.emission_dir = np.asarray(self.emission_dir, dtype=np.float64).reshape(3)
        for name, vec in (("sun_dir", self.sun_dir), ("emission_dir", self.emission_dir)):
            if abs(np.linalg.norm(vec) - 1.0) > 1e-9:
                raise ValueError(f"{name} must be unit length within 1e-9")
        if np.isscalar(self.albedo) and not (0.0 < self.albedo <= 1.0):
            raise ValueError("uniform albedo must lie in (0, 1]")


@dataclass
class RenderedTemplate:
    """Rendered intensity patch plus its shadow mask.

    Intensities are raw radiance factors (nonnegative, zero where
    shadowed); normalized() yields the zero-mean unit-variance version used
    for export. Correlation matching normalizes internally, so both forms
    match identically.
    """

    intensity: np.ndarray
    shadow_mask: np.ndarray

    def __post_init__(self):
        self.intensity = np.asarray(self.intensity, dtype=np.float64)
        self.shadow_mask = np.asarray(self.shadow_mask, dtype=bool)
        if self.intensity.shape != self.shadow_mask.shape:
            raise ValueError("intensity and shadow mask shapes differ")
        if not np.all(np.isfinite(self.intensity)) or self.intensity.min() < 0:
            raise ValueError("intensities must be finite and >= 0")
        if np.any(self.intensity[self.shadow_mask] != 0):
            raise ValueError("shadowed pixels must have zero intensity")

    def normalized(self) -> np.ndarray:
        std = self.intensity.std()
        if std == 0:
            return np.zeros_like(self.intensity)
        return (self.intensity - self.intensity.mean()) / std


def mesh_from_dem(elevation: np.ndarray, cell_size: float) -> SurfaceMesh:
    """Triangulate a heightfield; vertex (i, j) sits at (j*cell, -i*cell, z)."""
    elevation = np.asarray(elevation, dtype=np.float64)
    if elevation.ndim != 2 or min(elevation.shape) < 2:
        raise ValueError("elevation must be a 2-D grid with both sides >= 2")
    if not (cell_size > 0):
        raise ValueError("cell_size must be > 0")
    rows, cols = elevation.shape
    jj, ii = np.meshgrid(np.arange(cols), np.arange(rows))
    vertices = np.column_stack(
        [
            (jj * cell_size).ravel(),
            (-ii * cell_size).ravel(),
            elevation.ravel(),
        ]
    )
    idx = np.arange(rows * cols).reshape(rows, cols)
    v00 = idx[:-1, :-1].ravel()
    v10 = idx[1:, :-1].ravel()
    v11 = idx[1:, 1:].ravel()
    v01 = idx[:-1, 1:].ravel()
    # both triangles share the (i, j)-(i+1, j+1) diagonal; CCW from +z
    faces = np.concatenate(
        [
            np.column_stack([v00, v10, v11]),
            np.column_stack([v00, v11, v01]),
        ]
    )
    mesh = SurfaceMesh(vertices=vertices, faces=faces)
    return compute_normals(mesh)


def facet_normals(mesh: SurfaceMesh, normalize: bool = True) -> np.ndarray:
    v0 = mesh.vertices[mesh.faces[:, 0]]
    v1 = mesh.vertices[mesh.faces[:, 1]]
    v2 = mesh.vertices[mesh.faces[:, 2]]
    normals = np.cross(v1 - v0, v2 - v0)
    if not normalize:
        return normals
    norms = np.linalg.norm(normals, axis=1)
    if np.any(norms < 1e-30):
        raise ValueError("mesh contains a zero-area face")
    return normals / norms[:, None]


def compute_normals(mesh: SurfaceMesh) -> SurfaceMesh:
    """Per-vertex normals as the corner-angle-weighted mean of facet normals."""
    fn = facet_normals(mesh)
    verts = mesh.vertices
    faces = mesh.faces
    accum = np.zeros_like(verts)
    for corner in range(3):
        vi = faces[:, corner]
        a = verts[faces[:, (corner + 1) % 3]] - verts[vi]
        b = verts[faces[:, (corner + 2) % 3]] - verts[vi]
        cosang = np.sum(a * b, axis=1) / (
            np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
        )
        angles = np.arccos(np.clip(cosang, -1.0, 1.0))
        np.add.at(accum, vi, angles[:, None] * fn)
    norms = np.linalg.norm(accum, axis=1)
    if np.any(norms < 1e-30):
        raise ValueError("vertex with degenerate normal accumulation")
    return SurfaceMesh(
        vertices=mesh.vertices, faces=mesh.faces, vertex_normals=accum / norms[:, None]
    )


def phase_weight(phase_rad) -> np.ndarray | float:
    """Exponential phase weighting g(phi) = exp(-phi_deg / 60)."""
    return np.exp(-np.rad2deg(phase_rad) / 60.0)


def lunar_lambert(albedo, incidence, emission, phase):
    """Lunar-Lambert bidirectional radiance factor.

    r = a [(1 - g) cos(i) + g * 2 cos(i) / (cos(i) + cos(e))] with
    g = exp(-phase_deg / 60). Angles in radians. Returns 0 where the
    incidence reaches 90 degrees or the denominator degenerates; the result
    is clamped to be nonnegative.
    """
    cos_i = np.cos(incidence)
    cos_e = np.cos(emission)
    g = phase_weight(phase)
    denom = cos_i + cos_e
    with np.errstate(divide="ignore", invalid="ignore"):
        ls = np.where(np.abs(denom) > 1e-15, 2.0 * cos_i / denom, 0.0)
    value = albedo * ((1.0 - g) * cos_i + g * ls)
    value = np.where(np.asarray(incidence) < np.pi / 2, value, 0.0)
    return np.maximum(value, 0.0)


# ---------------------------------------------------------------------------
# Shadow rays: uniform-grid spatial index over faces + Moller-Trumbore tests
# ---------------------------------------------------------------------------


class _FaceGrid:
    """Uniform 2-D bucket grid over face bounding boxes in the xy-plane."""

    def __init__(self, mesh: SurfaceMesh, cell: float):
        self.cell = cell
        verts = mesh.vertices
        self.x0 = float(verts[:, 0].min())
        self.y0 = float(verts[:, 1].min())
        self.nx = max(1, int(np.ceil((verts[:, 0].max() - self.x0) / cell)))
        self.ny = max(1, int(np.ceil((verts[:, 1].max() - self.y0) / cell)))
        self.buckets: dict[tuple[int, int], list[int]] = {}
        tri = verts[mesh.faces]
        lo = tri.min(axis=1)
        hi = tri.max(axis=1)
        for f in range(len(mesh.faces)):
            gx0 = int((lo[f, 0] - self.x0) / cell)
            gx1 = int((hi[f, 0] - self.x0) / cell)
            gy0 = int((lo[f, 1] - self.y0) / cell)
            gy1 = int((hi[f, 1] - self.y0) / cell)
            for gx in range(max(gx0, 0), min(gx1, self.nx - 1) + 1):
                for gy in range(max(gy0, 0), min(gy1, self.ny - 1) + 1):
                    self.buckets.setdefault((gx, gy), []).append(f)

    def cells_along(self, origin: np.ndarray, direction: np.ndarray, t_max: float) -> list[int]:
        """Faces in every bucket the xy-projection of the ray touches up to t_max.

        Walks the segment at half-cell steps and includes the 8-neighborhood
        of every visited bucket, which over-covers the exact supercover and
        therefore never misses an intersectable face.
        """
        dx, dy = direction[0], direction[1]
        horiz = float(np.hypot(dx, dy))
        length = horiz * t_max
        n_steps = int(np.ceil(length / (0.5 * self.cell))) + 1
        ts = np.linspace(0.0, t_max, n_steps + 1)
        gx = ((origin[0] + ts * dx - self.x0) / self.cell).astype(int)
        gy = ((origin[1] + ts * dy - self.y0) / self.cell).astype(int)
        seen: set[tuple[int, int]] = set()
        faces: list[int] = []
        for cx, cy in zip(gx, gy):
            for ox in (-1, 0, 1):
                for oy in (-1, 0, 1):
                    key = (cx + ox, cy + oy)
                    if key in seen:
                        continue
                    seen.add(key)
                    bucket = self.buckets.get(key)
                    if bucket:
                        faces.extend(bucket)
        return faces


def _ray_hits_any(
    origin: np.ndarray,
    direction: np.ndarray,
    tri0: np.ndarray,
    tri1: np.ndarray,
    tri2: np.ndarray,
) -> bool:
    """Vectorized Moller-Trumbore: does the ray hit any of the triangles (t > 0)?"""
    e1 = tri1 - tri0
    e2 = tri2 - tri0
    pvec = np.cross(direction, e2)
    det = np.sum(e1 * pvec, axis=1)
    ok = np.abs(det) > 1e-14
    inv_det = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    tvec = origin - tri0
    u = np.sum(tvec * pvec, axis=1) * inv_det
    qvec = np.cross(tvec, e1)
    v = np.sum(direction * qvec, axis=1) * inv_det
    t = np.sum(e2 * qvec, axis=1) * inv_det
    hits = ok & (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0) & (t > 0.0)
    return bool(hits.any())


def shadow_mask(mesh: SurfaceMesh, sun_dir: np.ndarray) -> np.ndarray:
    """Per-vertex shadow flags from rays cast toward the Sun.

    Each ray starts slightly off the surface (1e-4 of the characteristic
    edge length along the Sun direction) so a vertex never shadows itself
    through its own incident faces. Candidate faces come from a uniform
    bucket grid walked along the ray's horizontal footprint.
    """
    sun_dir = np.asarray(sun_dir, dtype=np.float64).reshape(3)
    if abs(np.linalg.norm(sun_dir) - 1.0) > 1e-9:
        raise ValueError("sun_dir must be unit length")
    if sun_dir[2] <= 0:
        raise ValueError("sun must be above the horizon (positive z component)")
    verts = mesh.vertices
    edges = np.linalg.norm(
        verts[mesh.faces[:, 1]] - verts[mesh.faces[:, 0]], axis=1
    )
    cell = float(np.median(edges))
    if cell <= 0:
        raise ValueError("degenerate mesh edge lengths")
    eps = 1e-4 * cell
    grid = _FaceGrid(mesh, cell)
    z_max = verts[:, 2].max()
    shadowed = np.zeros(len(verts), dtype=bool)
    tri0 = verts[mesh.faces[:, 0]]
    tri1 = verts[mesh.faces[:, 1]]
    tri2 = verts[mesh.faces[:, 2]]
    for i in range(len(verts)):
        origin = verts[i] + eps * sun_dir
        t_max = (z_max - origin[2]) / sun_dir[2]
        if t_max <= 0:
            continue
        cand = grid.cells_along(origin, sun_dir, t_max)
        if not cand:
            continue
        cand_arr = np.asarray(cand, dtype=np.intp)
        shadowed[i] = _ray_hits_any(
            origin, sun_dir, tri0[cand_arr], tri1[cand_arr], tri2[cand_arr]
        )
    return shadowed


def render_template(template, lighting: LightingGeometry, cell_size: float | None = None) -> RenderedTemplate:
    """Render a crater template to an intensity patch.

    Per-vertex incidence/emission angles come from the angle-weighted
    vertex normals; the phase angle is a single scalar (collimated Sun,
    one emission direction per patch). Shadowed vertices are zero.
    ``template`` may be a CraterTemplate or a bare elevation grid; when
    cell_size is omitted the template's own cell size is used.
    """
    elevation = getattr(template, "elevation", template)
    albedo_grid = getattr(template, "albedo", None)
    if cell_size is None:
        cell_size = float(getattr(template, "cell_size", 1.0))
    mesh = mesh_from_dem(np.asarray(elevation, dtype=np.float64), cell_size)
    n = mesh.vertex_normals
    s = lighting.sun_dir
    e = lighting.emission_dir
    incidence = np.arccos(np.clip(n @ s, -1.0, 1.0))
    emission = np.arccos(np.clip(n @ e, -1.0, 1.0))
    phase = float(np.arccos(np.clip(s @ e, -1.0, 1.0)))
    if albedo_grid is not None:
        albedo = np.clip(np.asarray(albedo_grid, dtype=np.float64).ravel(), 1e-6, 1.0)
    else:
        albedo = lighting.albedo
    value = lunar_lambert(albedo, incidence, emission, phase)
    shadows = shadow_mask(mesh, s)
    value = np.where(shadows, 0.0, value)
    shape = np.asarray(elevation).shape
    return RenderedTemplate(
        intensity=value.reshape(shape), shadow_mask=shadows.reshape(shape)
    )
