"""End-to-end orchestration: templates -> detection -> localization -> metrics.

The four off-nadir compensation modes are plain config values:

* ``none``        — render templates with camera-frame Sun/emission, match
                    the raw image;
* ``no_warp``     — render with nadir-frame Sun/emission, match the raw
                    image;
* ``warp_template`` — render in the nadir frame, warp each template back to
                    the camera frame (local affine of the homography),
                    match the raw image;
* ``warp_image``  — render in the nadir frame, warp the image into the
                    nadir frame, match there, and map detections back.

Directions handed to the template renderer live in the template grid frame
(x east/+u, y north/-v, z up); both the camera and nadir frames look down
at the surface, so the conversion from either is (x, y, z) -> (x, -y, -z).
"""

from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geometry
from .eigenbasis import CraterTemplate
from .evaluate import (
    DetectionMetrics,
    detection_metrics,
)
from .geometry import CameraModel, NadirAdaptation, Pose
from .identify import IdentifyConfig, PositionEstimate, perturb_pose, ransac_localize
from .matcher import Detection, MatchConfig, pyramid_detect
from .raster_io import CatalogRecord, RasterGrid, read_raster, write_raster
from .render import LightingGeometry, RenderedTemplate, render_template

ADAPTATION_MODES = ("none", "no_warp", "warp_template", "warp_image")


@dataclass
class RunConfig:
    adaptation_mode: str = "warp_image"
    match: MatchConfig = field(default_factory=MatchConfig)
    identify: IdentifyConfig = field(default_factory=IdentifyConfig)
    moon_radius: float = geometry.MOON_RADIUS_KM
    min_semi_minor_px: float = 5.0
    max_semi_major_px: float = 105.0
    template_albedo: float = 0.25
    cache_dir: str | None = None

    def __post_init__(self):
        if self.adaptation_mode not in ADAPTATION_MODES:
            raise ValueError(
                f"adaptation_mode must be one of {ADAPTATION_MODES}, got {self.adaptation_mode!r}"
            )


def frame_dir_to_template(direction: np.ndarray) -> np.ndarray:
    """Map a camera/nadir-frame direction into the template grid frame."""
    d = np.asarray(direction, dtype=np.float64)
    return np.array([d[0], -d[1], -d[2]])


def _lighting_for_mode(
    mode: str,
    pose: Pose,
    sun_dir_M: np.ndarray,
    adaptation: NadirAdaptation | None,
    albedo: float,
) -> LightingGeometry:
    if mode == "none":
        sun_c = pose.R_CM @ np.asarray(sun_dir_M, dtype=np.float64)
        emission_c = np.array([0.0, 0.0, -1.0])
        sun_t, emission_t = frame_dir_to_template(sun_c), frame_dir_to_template(emission_c)
    else:
        sun_t = frame_dir_to_template(adaptation.sun_N)
        emission_t = frame_dir_to_template(adaptation.emission_N)
    return LightingGeometry(
        sun_dir=sun_t / np.linalg.norm(sun_t),
        emission_dir=emission_t / np.linalg.norm(emission_t),
        albedo=albedo,
    )


def _template_cache_key(tmpl: CraterTemplate, lighting: LightingGeometry, cell: float) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(tmpl.elevation).tobytes())
    if tmpl.albedo is not None:
        h.update(np.ascontiguousarray(tmpl.albedo).tobytes())
    h.update(np.asarray(lighting.sun_dir).tobytes())
    h.update(np.asarray(lighting.emission_dir).tobytes())
    albedo = lighting.albedo
    h.update(np.asarray(albedo, dtype=np.float64).tobytes())
    h.update(np.float64(cell).tobytes())
    return h.hexdigest()


def render_template_set(
    templates: list[CraterTemplate],
    lighting: LightingGeometry,
    cache_dir: str | None = None,
) -> list[RenderedTemplate]:
    """Render every template, optionally through a content-addressed cache."""
    rendered = []
    for tmpl in templates:
        cell = float(tmpl.cell_size)
        if cache_dir is not None:
            key = _template_cache_key(tmpl, lighting, cell)
            cdir = Path(cache_dir)
            cdir.mkdir(parents=True, exist_ok=True)
            ipath = cdir / f"render_{key}_i.egr"
            spath = cdir / f"render_{key}_s.egr"
            if ipath.exists() and spath.exists():
                intensity = read_raster(ipath).values
                shadow = read_raster(spath).values > 0.5
                rendered.append(RenderedTemplate(intensity=intensity, shadow_mask=shadow))
                continue
            rend = render_template(tmpl, lighting, cell)
            write_raster(RasterGrid.from_array(rend.intensity, 1.0), ipath)
            write_raster(RasterGrid.from_array(rend.shadow_mask.astype(np.float64), 1.0), spath)
            rendered.append(rend)
        else:
            rendered.append(render_template(tmpl, lighting, cell))
    return rendered


def _warp_template_to_camera(
    rend: RenderedTemplate, H_NC: np.ndarray, cam: CameraModel
) -> RenderedTemplate:
    """Apply the local affine of inv(H_NC) about the image center to a template.

    A template matches anywhere in the image, so the full projective warp is
    approximated by its Jacobian at the principal point, re-centered so the
    template center stays fixed.
    """
    H_CN = np.linalg.inv(H_NC)
    center = np.array([cam.up, cam.vp])

    def _map(uv):
        return geometry.apply_homography(H_CN, uv)

    eps = 1.0
    origin = _map(center)
    du = (_map(center + [eps, 0.0]) - origin) / eps
    dv = (_map(center + [0.0, eps]) - origin) / eps
    A = np.column_stack([du, dv])
    p = rend.intensity.shape[0]
    tc = (p - 1) / 2.0
    affine = np.eye(3)
    affine[:2, :2] = A
    affine[:2, 2] = np.array([tc, tc]) - A @ np.array([tc, tc])
    grid = RasterGrid.from_array(rend.intensity, 1.0)
    warped, valid = geometry.warp_image(grid, affine)
    shadow_grid = RasterGrid.from_array(rend.shadow_mask.astype(np.float64), 1.0)
    warped_shadow, _ = geometry.warp_image(shadow_grid, affine)
    shadow = (warped_shadow.values > 0.5) | ~valid
    intensity = np.where(shadow, 0.0, warped.values)
    return RenderedTemplate(intensity=np.maximum(intensity, 0.0), shadow_mask=shadow)


def run_detection(
    image: RasterGrid,
    pose: Pose,
    cam: CameraModel,
    sun_dir_M: np.ndarray,
    templates: list[CraterTemplate],
    cfg: RunConfig,
) -> list[Detection]:
    """Detect craters in one image under the configured adaptation mode."""
    mode = cfg.adaptation_mode
    adaptation = None
    if mode != "none":
        adaptation = geometry.nadir_frame(pose, cfg.moon_radius, sun_dir_M)
        adaptation = geometry.homography_chain(pose, cam, adaptation, cfg.moon_radius)
    lighting = _lighting_for_mode(mode, pose, sun_dir_M, adaptation, cfg.template_albedo)
    rendered = render_template_set(templates, lighting, cfg.cache_dir)

    if mode == "warp_template":
        rendered = [_warp_template_to_camera(r, adaptation.H_NC, cam) for r in rendered]

    if mode == "warp_image":
        warped, valid = geometry.warp_image(image, adaptation.H_NC)
        detections = pyramid_detect(warped, rendered, cfg.match, mask=valid.astype(np.float64))
        H_CN = np.linalg.inv(adaptation.H_NC)
        mapped = []
        for det in detections:
            uv = geometry.apply_homography(H_CN, np.array([det.u, det.v]))
            if 0 <= uv[0] <= cam.width - 1 and 0 <= uv[1] <= cam.height - 1:
                mapped.append(
                    Detection(
                        u=float(uv[0]),
                        v=float(uv[1]),
                        score=det.score,
                        scale=det.scale,
                        template_id=det.template_id,
                        radius_px=det.radius_px,
                    )
                )
        return mapped
    return pyramid_detect(image, rendered, cfg.match)


@dataclass
class LocalizationResult:
    estimate: PositionEstimate
    pose_noisy: Pose
    n_projected: int
    n_near: int
    seed: int


def project_catalog(
    records: list[CatalogRecord],
    pose: Pose,
    cam: CameraModel,
    cfg: RunConfig,
) -> list[geometry.ProjectedCrater]:
    """Project catalog records and apply the size/in-bounds filters."""
    craters3d = geometry.catalog_to_3d(records, cfg.moon_radius)
    projected = []
    for crater in craters3d:
        try:
            proj = geometry.project_crater(crater, pose, cam)
        except ValueError:
            continue
        if proj is not None:
            projected.append(proj)
    return geometry.filter_projected(
        projected, cfg.min_semi_minor_px, cfg.max_semi_major_px
    )


def run_localization(
    detections: list[Detection],
    records: list[CatalogRecord],
    pose_true: Pose,
    cam: CameraModel,
    cfg: RunConfig,
    seed: int = 0,
) -> LocalizationResult:
    """Perturb the pose, project the catalog, and run the RANSAC identifier."""
    rng = np.random.default_rng(seed)
    pose_noisy = perturb_pose(pose_true, cfg.identify, rng)
    projected = project_catalog(records, pose_noisy, cam, cfg)
    craters3d = geometry.catalog_to_3d(records, cfg.moon_radius)
    if len(detections) < 3 or len(projected) < 3:
        estimate = PositionEstimate(
            r_CM_est=None, inlier_ids=[], iterations_used=0, success=False
        )
    else:
        estimate = ransac_localize(
            detections, projected, craters3d, pose_noisy, cam, cfg.identify, rng
        )
    from .identify import proximity_filter

    return LocalizationResult(
        estimate=estimate,
        pose_noisy=pose_noisy,
        n_projected=len(projected),
        n_near=len(proximity_filter(projected, detections, cfg.identify.proximity_px)),
        seed=seed,
    )


@dataclass
class ImageResult:
    index: int
    detections: list[Detection]
    localization: LocalizationResult
    metrics: DetectionMetrics
    position_error_km: float


def process_image(
    image: RasterGrid,
    pose_true: Pose,
    cam: CameraModel,
    sun_dir_M: np.ndarray,
    records: list[CatalogRecord],
    templates: list[CraterTemplate],
    cfg: RunConfig,
    seed: int,
    index: int = 0,
) -> ImageResult:
    """Full single-image pipeline: detect, localize, score against truth."""
    detections = run_detection(image, pose_true, cam, sun_dir_M, templates, cfg)
    loc = run_localization(detections, records, pose_true, cam, cfg, seed)
    projected_true = project_catalog(records, pose_true, cam, cfg)
    metrics = detection_metrics(detections, projected_true)
    if loc.estimate.success:
        err = float(np.linalg.norm(loc.estimate.r_CM_est - pose_true.r_CM))
    else:
        err = float("inf")
    return ImageResult(
        index=index,
        detections=detections,
        localization=loc,
        metrics=metrics,
        position_error_km=err,
    )


def process_images(
    items: list[tuple[RasterGrid, Pose]],
    cam: CameraModel,
    sun_dir_M: np.ndarray,
    records: list[CatalogRecord],
    templates: list[CraterTemplate],
    cfg: RunConfig,
    base_seed: int = 0,
    jobs: int = 1,
) -> list[ImageResult]:
    """Process images in parallel with deterministic per-image seeds and ordering."""

    def _work(idx: int) -> ImageResult:
        image, pose = items[idx]
        return process_image(
            image, pose, cam, sun_dir_M, records, templates, cfg, base_seed + idx, idx
        )

    if jobs <= 1:
        return [_work(i) for i in range(len(items))]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        results = list(pool.map(_work, range(len(items))))
    return results
