"""PCA over vectorized patches, k-means in the reduced space, and templates.

The decomposition is computed through an SVD of the centered data matrix;
eigenvalues of the sample covariance are recovered as singular_value^2 /
(N - 1), which is numerically stabler than forming the D x D covariance.
Component signs are fixed so each column's largest-magnitude entry is
positive.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .patch_extract import ElevationPatch
from .raster_io import RasterGrid, read_json_file, read_raster, write_json_file, write_raster

DEFAULT_ALBEDO_SCALE = 20.0


@dataclass
class EigenBasis:
    """Mean vector, orthonormal component columns, and their eigenvalues."""

    mean: np.ndarray
    components: np.ndarray
    eigenvalues: np.ndarray
    patch_side: int
    has_albedo: bool
    albedo_scale: float = DEFAULT_ALBEDO_SCALE

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.components = np.asarray(self.components, dtype=np.float64)
        self.eigenvalues = np.asarray(self.eigenvalues, dtype=np.float64)
        d = self.patch_side**2 * (2 if self.has_albedo else 1)
        if self.mean.shape != (d,):
            raise ValueError(f"mean must have length {d}")
        if self.components.shape[0] != d:
            raise ValueError(f"components must have {d} rows")
        gram = self.components.T @ self.components
        if np.max(np.abs(gram - np.eye(gram.shape[0]))) > 1e-9:
            raise ValueError("components are not orthonormal within 1e-9")
        if np.any(np.diff(self.eigenvalues) > 1e-12) or np.any(self.eigenvalues < -1e-12):
            raise ValueError("eigenvalues must be nonincreasing and nonnegative")

    @property
    def k(self) -> int:
        return self.components.shape[1]


@dataclass
class Embedding:
    coords: np.ndarray
    source_id: str = ""

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if not np.all(np.isfinite(self.coords)):
            raise ValueError("embedding coordinates must be finite")


@dataclass
class CraterTemplate:
    """Representative crater patch reconstructed from a cluster centroid.

    ``cell_size`` records the mean physical cell size (meters) of the
    cluster members so the renderer can mesh the template at a realistic
    horizontal scale; it defaults to 1 when unknown.
    """

    elevation: np.ndarray
    albedo: np.ndarray | None
    cluster_id: int
    member_count: int
    cell_size: float = 1.0

    def __post_init__(self):
        self.elevation = np.asarray(self.elevation, dtype=np.float64)
        if not np.all(np.isfinite(self.elevation)):
            raise ValueError("template elevation must be finite")
        if self.albedo is not None:
            self.albedo = np.asarray(self.albedo, dtype=np.float64)
        if self.member_count < 1:
            raise ValueError("member_count must be >= 1")


def vectorize(
    patch: ElevationPatch,
    albedo_scale: float = DEFAULT_ALBEDO_SCALE,
    with_albedo: bool | None = None,
) -> np.ndarray:
    """Row-major flatten of the patch, concatenating scaled albedo when present.

    ``with_albedo`` forces the layout; requesting albedo from a patch that
    has none raises.
    """
    if with_albedo is None:
        with_albedo = patch.albedo is not None
    vec = patch.elevation.reshape(-1)
    if not with_albedo:
        return vec.copy()
    if patch.albedo is None:
        raise ValueError(f"patch {patch.source_id!r}: albedo expected but absent")
    return np.concatenate([vec, albedo_scale * patch.albedo.reshape(-1)])


def fit_pca(
    vectors: list[np.ndarray] | np.ndarray,
    k: int,
    patch_side: int | None = None,
    has_albedo: bool = False,
    albedo_scale: float = DEFAULT_ALBEDO_SCALE,
) -> EigenBasis:
    """Top-k principal components of the sample covariance of the inputs."""
    X = np.asarray(vectors, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("vectors must form an N x D matrix")
    n, d = X.shape
    if n < 2:
        raise ValueError("need at least 2 samples")
    if not (1 <= k <= min(n - 1, d)):
        raise ValueError(f"k={k} outside [1, min(N-1, D)] = [1, {min(n - 1, d)}]")
    if patch_side is None:
        side_sq = d // 2 if has_albedo else d
        patch_side = int(round(np.sqrt(side_sq)))
        if patch_side**2 != side_sq:
            raise ValueError("cannot infer patch_side from vector length")
    mean = X.mean(axis=0)
    Xc = X - mean
    _, s, vt = np.linalg.svd(Xc, full_matrices=False)
    eigenvalues = (s[:k] ** 2) / (n - 1)
    components = vt[:k].T.copy()
    # sign convention: largest-magnitude entry of each component positive
    for j in range(k):
        idx = np.argmax(np.abs(components[:, j]))
        if components[idx, j] < 0:
            components[:, j] = -components[:, j]
    return EigenBasis(
        mean=mean,
        components=components,
        eigenvalues=eigenvalues,
        patch_side=patch_side,
        has_albedo=has_albedo,
        albedo_scale=albedo_scale,
    )


def project(basis: EigenBasis, vector: np.ndarray, source_id: str = "") -> Embedding:
    vector = np.asarray(vector, dtype=np.float64)
    if vector.shape != basis.mean.shape:
        raise ValueError(f"vector length {vector.shape} != {basis.mean.shape}")
    return Embedding(coords=basis.components.T @ (vector - basis.mean), source_id=source_id)


def reconstruct(basis: EigenBasis, embedding: Embedding | np.ndarray) -> np.ndarray:
    coords = embedding.coords if isinstance(embedding, Embedding) else np.asarray(embedding)
    if coords.shape != (basis.k,):
        raise ValueError(f"coords length {coords.shape} != ({basis.k},)")
    return basis.mean + basis.components @ coords


def kmeans(
    embeddings: list[Embedding] | np.ndarray,
    k: int,
    seed: int,
    max_iter: int = 100,
    return_history: bool = False,
):
    """Seeded k-means++ plus Lloyd iterations.

    Runs until assignments are stable or max_iter. Empty clusters are
    re-seeded from the point farthest from its current centroid. Returns
    (assignments, centroids), with a per-iteration inertia history appended
    when requested; output is bit-identical for a fixed seed.
    """
    if isinstance(embeddings, (list, tuple)) and embeddings and isinstance(embeddings[0], Embedding):
        X = np.stack([e.coords for e in embeddings])
    else:
        X = np.asarray(embeddings, dtype=np.float64)
    n = X.shape[0]
    if k > n:
        raise ValueError(f"k={k} exceeds number of points {n}")
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    rng = np.random.default_rng(seed)

    centroids = np.empty((k, X.shape[1]))
    centroids[0] = X[rng.integers(n)]
    d2 = np.sum((X - centroids[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centroids[j] = X[idx]
        d2 = np.minimum(d2, np.sum((X - centroids[j]) ** 2, axis=1))

    assignments = np.full(n, -1, dtype=np.int64)
    history: list[float] = []
    for _ in range(max_iter):
        dists = np.sum((X[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
        new_assign = np.argmin(dists, axis=1)
        for j in range(k):
            members = new_assign == j
            if members.any():
                centroids[j] = X[members].mean(axis=0)
            else:
                own = dists[np.arange(n), new_assign]
                far = int(np.argmax(own))
                centroids[j] = X[far]
                new_assign[far] = j
        history.append(kmeans_inertia(X, new_assign, centroids))
        if np.array_equal(new_assign, assignments):
            break
        assignments = new_assign
    if return_history:
        return assignments, centroids, history
    return assignments, centroids


def kmeans_inertia(X: np.ndarray, assignments: np.ndarray, centroids: np.ndarray) -> float:
    return float(np.sum((X - centroids[assignments]) ** 2))


def make_templates(
    basis: EigenBasis,
    assignments: np.ndarray,
    centroids: np.ndarray,
    cell_sizes: np.ndarray | None = None,
) -> list[CraterTemplate]:
    """Back-project cluster centroids into crater templates.

    ``cell_sizes`` optionally gives the physical cell size (meters) of each
    training patch so per-cluster means can be attached to the templates.
    """
    assignments = np.asarray(assignments)
    p = basis.patch_side
    templates = []
    for cluster_id in range(len(centroids)):
        members = assignments == cluster_id
        count = int(members.sum())
        if count == 0:
            continue
        rec = reconstruct(basis, np.asarray(centroids[cluster_id], dtype=np.float64))
        elevation = rec[: p * p].reshape(p, p)
        albedo = None
        if basis.has_albedo:
            albedo = rec[p * p :].reshape(p, p) / basis.albedo_scale
        cell = 1.0
        if cell_sizes is not None:
            cell = float(np.mean(np.asarray(cell_sizes)[members]))
        templates.append(
            CraterTemplate(
                elevation=elevation,
                albedo=albedo,
                cluster_id=cluster_id,
                member_count=count,
                cell_size=cell,
            )
        )
    return templates


# ---------------------------------------------------------------------------
# Persistence: JSON manifest + raster payloads
# ---------------------------------------------------------------------------


def save_templates(templates: list[CraterTemplate], out_dir: str | Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, tmpl in enumerate(templates):
        elev_name = f"template_{i:03d}_elev.egr"
        write_raster(RasterGrid.from_array(tmpl.elevation, max(tmpl.cell_size, 1e-12)), out_dir / elev_name)
        entry = {
            "cluster_id": tmpl.cluster_id,
            "member_count": tmpl.member_count,
            "cell_size_m": tmpl.cell_size,
            "elevation": elev_name,
        }
        if tmpl.albedo is not None:
            alb_name = f"template_{i:03d}_albedo.egr"
            write_raster(RasterGrid.from_array(tmpl.albedo, max(tmpl.cell_size, 1e-12)), out_dir / alb_name)
            entry["albedo"] = alb_name
        entries.append(entry)
    write_json_file({"version": 1, "templates": entries}, out_dir / "templates.json")


def load_templates(in_dir: str | Path) -> list[CraterTemplate]:
    in_dir = Path(in_dir)
    manifest = read_json_file(in_dir / "templates.json")
    if manifest.get("version") != 1:
        raise ValueError(f"unsupported template manifest version: {manifest.get('version')}")
    templates = []
    for entry in manifest["templates"]:
        elevation = read_raster(in_dir / entry["elevation"]).values
        albedo = None
        if "albedo" in entry:
            albedo = read_raster(in_dir / entry["albedo"]).values
        templates.append(
            CraterTemplate(
                elevation=elevation,
                albedo=albedo,
                cluster_id=entry["cluster_id"],
                member_count=entry["member_count"],
                cell_size=entry["cell_size_m"],
            )
        )
    return templates


def save_basis(basis: EigenBasis, out_dir: str | Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    p = basis.patch_side
    d = p * p

    def _write_parts(vec: np.ndarray, stem: str) -> dict:
        parts = {"elevation": f"{stem}_elev.egr"}
        write_raster(RasterGrid.from_array(vec[:d].reshape(p, p), 1.0), out_dir / parts["elevation"])
        if basis.has_albedo:
            parts["albedo"] = f"{stem}_albedo.egr"
            write_raster(RasterGrid.from_array(vec[d:].reshape(p, p), 1.0), out_dir / parts["albedo"])
        return parts

    manifest = {
        "version": 1,
        "patch_side": basis.patch_side,
        "has_albedo": basis.has_albedo,
        "albedo_scale": basis.albedo_scale,
        "eigenvalues": [float(v) for v in basis.eigenvalues],
        "mean": _write_parts(basis.mean, "mean"),
        "components": [
            _write_parts(basis.components[:, j], f"component_{j:03d}")
            for j in range(basis.k)
        ],
    }
    write_json_file(manifest, out_dir / "basis.json")


def load_basis(in_dir: str | Path) -> EigenBasis:
    in_dir = Path(in_dir)
    manifest = read_json_file(in_dir / "basis.json")
    if manifest.get("version") != 1:
        raise ValueError(f"unsupported basis manifest version: {manifest.get('version')}")
    has_albedo = manifest["has_albedo"]

    def _read_parts(parts: dict) -> np.ndarray:
        vec = read_raster(in_dir / parts["elevation"]).values.reshape(-1)
        if has_albedo:
            vec = np.concatenate([vec, read_raster(in_dir / parts["albedo"]).values.reshape(-1)])
        return vec

    mean = _read_parts(manifest["mean"])
    components = np.column_stack([_read_parts(p) for p in manifest["components"]])
    return EigenBasis(
        mean=mean,
        components=components,
        eigenvalues=np.asarray(manifest["eigenvalues"], dtype=np.float64),
        patch_side=manifest["patch_side"],
        has_albedo=has_albedo,
        albedo_scale=manifest["albedo_scale"],
    )
