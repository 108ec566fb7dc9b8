"""Crater templates from elevation statistics, template matching, and
crater-based camera localization."""

from .eigenbasis import (
    CraterTemplate,
    EigenBasis,
    Embedding,
    fit_pca,
    kmeans,
    make_templates,
    project,
    reconstruct,
    vectorize,
)
from .geometry import (
    MOON_RADIUS_KM,
    CameraModel,
    CatalogCrater3D,
    NadirAdaptation,
    Pose,
    ProjectedCrater,
    catalog_to_3d,
    homography_chain,
    nadir_frame,
    project_crater,
    surface_distance,
    warp_image,
)
from .identify import (
    IdentifyConfig,
    PositionEstimate,
    TriadDescriptor,
    match_descriptors,
    perturb_pose,
    ransac_localize,
    triad_descriptor,
    triangulate_lost,
)
from .matcher import Detection, MatchConfig, ncc_map, pyramid_detect, subpixel_peak
from .patch_extract import (
    ElevationPatch,
    PatchFilterReport,
    PatchParams,
    build_training_set,
    depth_ratio_check,
    extract_patch,
    filter_catalog,
    symmetry_check,
)
from .pipeline import RunConfig, run_detection, run_localization
from .raster_io import (
    CatalogRecord,
    RasterGrid,
    read_catalog,
    read_raster,
    write_catalog,
    write_raster,
)
from .render import (
    LightingGeometry,
    RenderedTemplate,
    SurfaceMesh,
    compute_normals,
    lunar_lambert,
    mesh_from_dem,
    render_template,
    shadow_mask,
)

__version__ = "0.1.0"
