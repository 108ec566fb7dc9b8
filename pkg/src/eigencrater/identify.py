"""Detection-to-catalog matching and camera position estimation.

Triads of crater centers are described by their interior angles, stored
counter-clockwise starting from the largest angle, which makes the
descriptor invariant to similarity transforms of the image. Putative triad
matches (2-NN with a ratio test) are verified by triangulating the camera
position with known attitude and counting reprojection inliers; the best
hypothesis is re-triangulated from the triad plus its external inliers.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import CameraModel, CatalogCrater3D, Pose, ProjectedCrater, project_point
from .matcher import Detection


@dataclass
class TriadDescriptor:
    """Interior angles (degrees) of a crater-center triangle in canonical order.

    Ordering starts at the largest interior angle and follows the triangle
    counter-clockwise in image axes (u right, v down, positive signed area).
    ``member_ids`` are caller-side indices ordered consistently with the
    angles.
    """

    angles: np.ndarray
    member_ids: tuple[int, int, int]

    def __post_init__(self):
        self.angles = np.asarray(self.angles, dtype=np.float64)
        if abs(self.angles.sum() - 180.0) > 1e-6:
            raise ValueError("interior angles must sum to 180 degrees")
        if self.angles[0] < self.angles[1] - 1e-12 or self.angles[0] < self.angles[2] - 1e-12:
            raise ValueError("descriptor must start at the largest angle")


@dataclass
class PositionEstimate:
    r_CM_est: np.ndarray | None
    inlier_ids: list[tuple[int, str]]
    iterations_used: int
    success: bool


@dataclass
class IdentifyConfig:
    pose_noise_pos_sigma: float = 1.0
    pose_noise_att_sigma: float = 0.01
    proximity_px: float = 60.0
    max_catalog_triads: int = 8000
    knn_ratio: float = 0.4
    reproj_inlier_px: float = 3.0
    ransac_iters: int = 1000
    min_inliers: int = 4
    rng_seed: int = 0

    def __post_init__(self):
        for name in (
            "proximity_px",
            "max_catalog_triads",
            "knn_ratio",
            "reproj_inlier_px",
            "ransac_iters",
            "min_inliers",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


def perturb_pose(pose: Pose, cfg: IdentifyConfig, rng: np.random.Generator) -> Pose:
    """Corrupt a pose with zero-mean Gaussian noise.

    Position gets independent per-axis noise (km). Attitude is composed
    with a small rotation about a uniformly random axis whose angle is
    N(0, sigma_att^2) degrees.
    """
    r_new = pose.r_CM + rng.normal(0.0, cfg.pose_noise_pos_sigma, size=3)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = np.deg2rad(rng.normal(0.0, cfg.pose_noise_att_sigma))
    K = np.array(
        [
            [0.0, -axis[2], axis[1]],
            [axis[2], 0.0, -axis[0]],
            [-axis[1], axis[0], 0.0],
        ]
    )
    dR = np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)
    return Pose(R_CM=dR @ pose.R_CM, r_CM=r_new)


def triad_descriptor(p1, p2, p3, member_ids: tuple[int, int, int] = (0, 1, 2)) -> TriadDescriptor:
    """Canonical interior-angle descriptor of three image points."""
    pts = np.asarray([p1, p2, p3], dtype=np.float64)
    ids = list(member_ids)
    ab = pts[1] - pts[0]
    ac = pts[2] - pts[0]
    area2 = float(ab[0] * ac[1] - ab[1] * ac[0])
    if abs(area2) < 1e-9:
        raise ValueError("collinear points: degenerate triad")
    angles = np.empty(3)
    for i in range(3):
        a = pts[(i + 1) % 3] - pts[i]
        b = pts[(i + 2) % 3] - pts[i]
        cosang = float(a @ b) / (np.linalg.norm(a) * np.linalg.norm(b))
        angles[i] = np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0)))
    start = int(np.argmax(angles))
    order = [start, (start + 1) % 3, (start + 2) % 3]
    if area2 < 0:
        # flip traversal so the ordered vertices run counter-clockwise
        order = [start, (start + 2) % 3, (start + 1) % 3]
    return TriadDescriptor(
        angles=angles[order], member_ids=(ids[order[0]], ids[order[1]], ids[order[2]])
    )


def proximity_filter(
    projected: list[ProjectedCrater],
    detections: list[Detection],
    proximity_px: float,
) -> list[ProjectedCrater]:
    """Keep catalog craters whose centers lie within the radius of any detection."""
    if not detections:
        return []
    det = np.array([[d.u, d.v] for d in detections])
    kept = []
    for proj in projected:
        dists = np.hypot(det[:, 0] - proj.center_uv[0], det[:, 1] - proj.center_uv[1])
        if dists.min() <= proximity_px:
            kept.append(proj)
    return kept


def _descriptors_from_points(points: np.ndarray, ids: list[int]) -> list[TriadDescriptor]:
    descriptors = []
    for i, j, k in itertools.combinations(range(len(points)), 3):
        try:
            descriptors.append(
                triad_descriptor(points[i], points[j], points[k], (ids[i], ids[j], ids[k]))
            )
        except ValueError:
            continue
    return descriptors


def build_catalog_triads(
    projected: list[ProjectedCrater],
    detections: list[Detection],
    cfg: IdentifyConfig,
    rng: np.random.Generator,
) -> list[TriadDescriptor]:
    """Descriptors of catalog-crater triads near the detections.

    Craters farther than the proximity radius from every detection are
    dropped; when more than ``max_catalog_triads`` 3-combinations remain
    they are uniformly subsampled to exactly that many.
    """
    kept = proximity_filter(projected, detections, cfg.proximity_px)
    if len(kept) < 3:
        return []
    points = np.array([p.center_uv for p in kept])
    combos = np.array(list(itertools.combinations(range(len(kept)), 3)))
    # drop collinear triads up front so the subsample lands exactly on the cap
    a = points[combos[:, 0]]
    b = points[combos[:, 1]]
    c = points[combos[:, 2]]
    area2 = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (
        c[:, 0] - a[:, 0]
    )
    combos = combos[np.abs(area2) >= 1e-9]
    if len(combos) > cfg.max_catalog_triads:
        chosen = rng.choice(len(combos), size=cfg.max_catalog_triads, replace=False)
        combos = combos[np.sort(chosen)]
    return [
        triad_descriptor(points[i], points[j], points[k], (int(i), int(j), int(k)))
        for i, j, k in combos
    ]


def match_descriptors(
    query: list[TriadDescriptor],
    reference: list[TriadDescriptor],
    ratio: float = 0.4,
) -> list[tuple[int, int, float]]:
    """2-NN matching over angle triples with Lowe's ratio test.

    Returns (query index, reference index, distance) sorted by ascending
    distance. Ambiguous queries (d1/d2 >= ratio, including exact ties at
    zero) are dropped.
    """
    if len(reference) < 2:
        raise ValueError("need at least 2 reference descriptors")
    if not query:
        return []
    ref = np.stack([d.angles for d in reference])
    qry = np.stack([d.angles for d in query])
    tree = cKDTree(ref)
    dists, idxs = tree.query(qry, k=2)
    matches = []
    for qi in range(len(query)):
        d1, d2 = float(dists[qi, 0]), float(dists[qi, 1])
        if d2 <= 0.0:
            continue
        if d1 / d2 < ratio:
            matches.append((qi, int(idxs[qi, 0]), d1))
    matches.sort(key=lambda m: (m[2], m[0], m[1]))
    return matches


def triangulate_lost(
    correspondences: list[tuple[np.ndarray, np.ndarray]],
    pose_attitude: np.ndarray,
    cam: CameraModel,
) -> np.ndarray:
    """Camera position from pixel/landmark pairs with known attitude.

    Solves sum_i w_i (I - u_i u_i^T)(p_i - r) = 0 over the line-of-sight
    unit vectors u_i in MCMF. Two passes: unweighted, then weights
    1/d_i^2 with ranges taken from the first solution (inverse
    range-squared weighting).
    """
    if len(correspondences) < 2:
        raise ValueError("need at least 2 correspondences")
    R = np.asarray(pose_attitude, dtype=np.float64).reshape(3, 3)
    dirs = []
    points = []
    for (uv, p) in correspondences:
        u, v = float(uv[0]), float(uv[1])
        ray_c = np.array([(u - cam.up) / cam.dx, (v - cam.vp) / cam.dy, 1.0])
        ray_m = R.T @ ray_c
        dirs.append(ray_m / np.linalg.norm(ray_m))
        points.append(np.asarray(p, dtype=np.float64))
    dirs_arr = np.stack(dirs)
    pts = np.stack(points)

    def _solve(weights: np.ndarray) -> np.ndarray:
        A = np.zeros((3, 3))
        b = np.zeros(3)
        for w, u, p in zip(weights, dirs_arr, pts):
            proj = np.eye(3) - np.outer(u, u)
            A += w * proj
            b += w * (proj @ p)
        cond = np.linalg.cond(A)
        if not np.isfinite(cond) or cond > 1e12:
            raise np.linalg.LinAlgError("sight lines are (nearly) parallel")
        return np.linalg.solve(A, b)

    r1 = _solve(np.ones(len(pts)))
    ranges = np.linalg.norm(pts - r1, axis=1)
    if np.any(ranges < 1e-12):
        return r1
    r2 = _solve(1.0 / ranges**2)
    behind = ((pts - r2) @ R[2]) <= 0
    if np.any(behind):
        raise ValueError("correspondence behind the camera")
    return r2


def _greedy_inliers(
    det_pts: np.ndarray,
    proj_pts: np.ndarray,
    threshold: float,
) -> list[tuple[int, int, float]]:
    """One-to-one greedy matching by ascending distance, gated by threshold."""
    if len(det_pts) == 0 or len(proj_pts) == 0:
        return []
    diff = det_pts[:, None, :] - proj_pts[None, :, :]
    dists = np.hypot(diff[..., 0], diff[..., 1])
    pairs = [
        (float(dists[i, j]), i, j)
        for i in range(dists.shape[0])
        for j in range(dists.shape[1])
        if dists[i, j] <= threshold
    ]
    pairs.sort(key=lambda t: (t[0], t[1], t[2]))
    used_det: set[int] = set()
    used_proj: set[int] = set()
    matched = []
    for d, i, j in pairs:
        if i in used_det or j in used_proj:
            continue
        used_det.add(i)
        used_proj.add(j)
        matched.append((i, j, d))
    return matched


def ransac_localize(
    detections: list[Detection],
    projected: list[ProjectedCrater],
    catalog3d: list[CatalogCrater3D],
    pose_noisy: Pose,
    cam: CameraModel,
    cfg: IdentifyConfig,
    rng: np.random.Generator | None = None,
) -> PositionEstimate:
    """Best-supported triad hypothesis over descriptor matches.

    Hypotheses are visited in ascending descriptor distance, up to
    ``ransac_iters``. Each one triangulates a position from the triad,
    reprojects the proximity-filtered catalog with the noisy attitude, and
    counts detections within the reprojection threshold (one-to-one greedy,
    triad members excluded). Success requires ``min_inliers`` external
    inliers; the final position is re-triangulated from triad + inliers.
    """
    rng = rng if rng is not None else np.random.default_rng(cfg.rng_seed)
    failure = PositionEstimate(r_CM_est=None, inlier_ids=[], iterations_used=0, success=False)
    if len(detections) < 3 or len(projected) < 3:
        return failure
    near = proximity_filter(projected, detections, cfg.proximity_px)
    if len(near) < 3:
        return failure
    by_id = {c.id: c for c in catalog3d}
    near_pts3d = np.stack([by_id[p.id].center for p in near])
    det_pts = np.array([[d.u, d.v] for d in detections])

    det_triads = _descriptors_from_points(det_pts, list(range(len(detections))))
    cat_triads = build_catalog_triads(projected, detections, cfg, rng)
    if not det_triads or len(cat_triads) < 2:
        return failure
    matches = match_descriptors(det_triads, cat_triads, cfg.knn_ratio)

    best_count = -1
    best = None
    iterations = 0
    for qi, ri, _dist in matches[: cfg.ransac_iters]:
        iterations += 1
        det_ids = det_triads[qi].member_ids
        cat_ids = cat_triads[ri].member_ids
        corrs = [
            (det_pts[det_ids[k]], near_pts3d[cat_ids[k]]) for k in range(3)
        ]
        try:
            r_est = triangulate_lost(corrs, pose_noisy.R_CM, cam)
        except (np.linalg.LinAlgError, ValueError):
            continue
        est_pose = Pose(R_CM=pose_noisy.R_CM, r_CM=r_est)
        proj_pts = np.full((len(near), 2), np.inf)
        for j, crater in enumerate(near):
            u, v, _ = project_point(near_pts3d[j], est_pose, cam)
            if u is not None:
                proj_pts[j] = (u, v)
        matched = _greedy_inliers(det_pts, proj_pts, cfg.reproj_inlier_px)
        external = [(i, j) for i, j, _ in matched if i not in det_ids]
        if len(external) > best_count:
            best_count = len(external)
            best = (det_ids, cat_ids, external)
    if best is None or best_count < cfg.min_inliers:
        return PositionEstimate(
            r_CM_est=None, inlier_ids=[], iterations_used=iterations, success=False
        )
    det_ids, cat_ids, external = best
    corrs = [(det_pts[det_ids[k]], near_pts3d[cat_ids[k]]) for k in range(3)]
    inlier_ids = [(int(det_ids[k]), near[cat_ids[k]].id) for k in range(3)]
    for i, j in external:
        corrs.append((det_pts[i], near_pts3d[j]))
        inlier_ids.append((int(i), near[j].id))
    try:
        r_final = triangulate_lost(corrs, pose_noisy.R_CM, cam)
    except (np.linalg.LinAlgError, ValueError):
        return PositionEstimate(
            r_CM_est=None, inlier_ids=[], iterations_used=iterations, success=False
        )
    return PositionEstimate(
        r_CM_est=r_final,
        inlier_ids=inlier_ids,
        iterations_used=iterations,
        success=True,
    )


def estimate_to_dict(est: PositionEstimate, true_r_CM: np.ndarray | None = None) -> dict:
    out = {
        "success": est.success,
        "iterations_used": est.iterations_used,
        "inlier_ids": [[int(i), str(cid)] for i, cid in est.inlier_ids],
        "r_CM_est": None if est.r_CM_est is None else [float(x) for x in est.r_CM_est],
    }
    if true_r_CM is not None:
        out["true_r_CM"] = [float(x) for x in true_r_CM]
        if est.r_CM_est is not None:
            out["position_error_km"] = float(np.linalg.norm(est.r_CM_est - true_r_CM))
    return out
