"""Detection and position-estimation metrics.

Detections are matched to projected catalog craters one-to-one by greedy
ascending center distance; precision/recall/center error are then read off
at each pixel threshold. Position-error AUC integrates the empirical CDF
of per-image errors exactly over the sorted step function, with failed
images counted as infinite error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DEFAULT_PIXEL_THRESHOLDS = (1.0, 3.0, 5.0, 10.0)
DEFAULT_AUC_THRESHOLDS = (0.1, 0.3, 0.5, 1.0)


@dataclass
class DetectionMetrics:
    precision_at: dict[float, float | None]
    recall_at: dict[float, float | None]
    center_error_at: dict[float, float | None]
    n_detections: int
    n_catalog: int


@dataclass
class PositionMetrics:
    success_rate: float
    mean: float | None
    std: float | None
    min: float | None
    max: float | None
    auc_at: dict[float, float]
    n_images: int
    n_successes: int


def detection_metrics(
    detections,
    projected_all,
    thresholds: tuple[float, ...] = DEFAULT_PIXEL_THRESHOLDS,
) -> DetectionMetrics:
    """Per-image precision/recall/center-error at pixel thresholds.

    ``projected_all`` must be the full projection set before proximity
    filtering (after the size/in-bounds filters): recall is relative to
    every crater that could have been detected. With zero detections the
    precision is undefined and reported as None rather than 0.
    """
    det_pts = np.array(
        [[d.u, d.v] for d in detections], dtype=np.float64
    ).reshape(-1, 2)
    cat_pts = np.array(
        [np.asarray(p.center_uv, dtype=np.float64) for p in projected_all]
    ).reshape(-1, 2)
    n_det, n_cat = len(det_pts), len(cat_pts)

    matched: list[float] = []
    if n_det and n_cat:
        diff = det_pts[:, None, :] - cat_pts[None, :, :]
        dists = np.hypot(diff[..., 0], diff[..., 1])
        order = sorted(
            ((float(dists[i, j]), i, j) for i in range(n_det) for j in range(n_cat))
        )
        used_d: set[int] = set()
        used_c: set[int] = set()
        for d, i, j in order:
            if i in used_d or j in used_c:
                continue
            used_d.add(i)
            used_c.add(j)
            matched.append(d)
    matched_arr = np.asarray(matched)

    precision_at: dict[float, float | None] = {}
    recall_at: dict[float, float | None] = {}
    center_error_at: dict[float, float | None] = {}
    for t in thresholds:
        correct = matched_arr[matched_arr <= t] if matched_arr.size else matched_arr
        n_correct = int(correct.size)
        precision_at[t] = None if n_det == 0 else n_correct / n_det
        recall_at[t] = None if n_cat == 0 else n_correct / n_cat
        center_error_at[t] = None if n_correct == 0 else float(correct.mean())
    return DetectionMetrics(
        precision_at=precision_at,
        recall_at=recall_at,
        center_error_at=center_error_at,
        n_detections=n_det,
        n_catalog=n_cat,
    )


def position_auc(
    errors: list[float],
    thresholds: tuple[float, ...] = DEFAULT_AUC_THRESHOLDS,
) -> dict[float, float]:
    """Exact step-CDF AUC (percent) at each threshold.

    ``errors`` holds one entry per image: a km error or math.inf for a
    failure. AUC@tau = (100 / tau) * integral_0^tau F(e) de with F the
    empirical CDF over all images.
    """
    if not errors:
        raise ValueError("no errors to integrate")
    n = len(errors)
    finite = sorted(e for e in errors if not math.isinf(e))
    out: dict[float, float] = {}
    for tau in thresholds:
        if tau <= 0:
            raise ValueError("thresholds must be positive")
        area = 0.0
        prev = 0.0
        count = 0
        for e in finite:
            if e >= tau:
                break
            area += (e - prev) * (count / n)
            prev = e
            count += 1
        area += (tau - prev) * (count / n)
        out[tau] = 100.0 * area / tau
    return out


def position_metrics(
    errors: list[float],
    thresholds: tuple[float, ...] = DEFAULT_AUC_THRESHOLDS,
) -> PositionMetrics:
    """Success rate, error statistics over successes, and AUC values."""
    if not errors:
        raise ValueError("no position results")
    finite = [e for e in errors if not math.isinf(e)]
    n_success = len(finite)
    stats = (None, None, None, None)
    if n_success:
        arr = np.asarray(finite)
        stats = (float(arr.mean()), float(arr.std()), float(arr.min()), float(arr.max()))
    return PositionMetrics(
        success_rate=n_success / len(errors),
        mean=stats[0],
        std=stats[1],
        min=stats[2],
        max=stats[3],
        auc_at=position_auc(errors, thresholds),
        n_images=len(errors),
        n_successes=n_success,
    )


def aggregate_detection_metrics(per_image: list[DetectionMetrics]) -> DetectionMetrics:
    """Unweighted (macro) average of per-image metrics.

    Images where a metric is undefined (e.g. no detections) are skipped in
    that metric's mean.
    """
    if not per_image:
        raise ValueError("no per-image metrics")
    thresholds = list(per_image[0].precision_at.keys())

    def _mean(values: list[float | None]) -> float | None:
        defined = [v for v in values if v is not None]
        return None if not defined else float(np.mean(defined))

    return DetectionMetrics(
        precision_at={t: _mean([m.precision_at[t] for m in per_image]) for t in thresholds},
        recall_at={t: _mean([m.recall_at[t] for m in per_image]) for t in thresholds},
        center_error_at={t: _mean([m.center_error_at[t] for m in per_image]) for t in thresholds},
        n_detections=int(sum(m.n_detections for m in per_image)),
        n_catalog=int(sum(m.n_catalog for m in per_image)),
    )


def detection_metrics_to_dict(m: DetectionMetrics) -> dict:
    def _clean(d: dict) -> dict:
        return {f"{t:g}": v for t, v in d.items()}

    return {
        "precision_at_px": _clean(m.precision_at),
        "recall_at_px": _clean(m.recall_at),
        "center_error_at_px": _clean(m.center_error_at),
        "n_detections": m.n_detections,
        "n_catalog": m.n_catalog,
    }


def position_metrics_to_dict(m: PositionMetrics) -> dict:
    return {
        "success_rate": m.success_rate,
        "mean_km": m.mean,
        "std_km": m.std,
        "min_km": m.min,
        "max_km": m.max,
        "auc_at_km": {f"{t:g}": v for t, v in m.auc_at.items()},
        "n_images": m.n_images,
        "n_successes": m.n_successes,
    }


def format_report(det: DetectionMetrics, pos: PositionMetrics | None = None) -> str:
    """Human-readable summary table of aggregate metrics."""
    lines = []
    ts = sorted(det.precision_at.keys())
    head = "            " + "".join(f"  @{t:g} px" for t in ts)
    lines.append(head)

    def _row(label: str, values: dict, pct: bool) -> str:
        cells = []
        for t in ts:
            v = values[t]
            if v is None:
                cells.append("      --")
            elif pct:
                cells.append(f"  {100 * v:6.2f}")
            else:
                cells.append(f"  {v:6.2f}")
        return f"{label:<12}" + "".join(cells)

    lines.append(_row("P [%]", det.precision_at, True))
    lines.append(_row("R [%]", det.recall_at, True))
    lines.append(_row("CE [px]", det.center_error_at, False))
    if pos is not None:
        lines.append("")
        lines.append(f"SR [%]      {100 * pos.success_rate:6.2f}   ({pos.n_successes}/{pos.n_images})")
        if pos.mean is not None:
            lines.append(
                f"err [km]    {pos.mean:.3f} +/- {pos.std:.3f}  min {pos.min:.3f}  max {pos.max:.3f}"
            )
        auc_cells = "  ".join(f"@{t:g} km {v:6.2f}" for t, v in sorted(pos.auc_at.items()))
        lines.append(f"AUC [%]     {auc_cells}")
    return "\n".join(lines)
