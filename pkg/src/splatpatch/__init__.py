"""splatpatch: point cloud rendering via predicted 2D Gaussian surfels."""

from . import errors
from .geometry import (
    NeighborIndex,
    NormalizationTransform,
    PointCloud,
    build_index,
    estimate_normals,
    k_nearest,
    min_neighbor_distance,
    normalize_cloud,
)
from .gaussians import (
    Gaussian2DSet,
    Quaternion,
    SplatFrame,
    denormalize_gaussians,
    eval_sh,
    initialize_gaussians,
    merge_sets,
    normal_angle_to_quaternion,
    quaternion_to_frame,
)
from .rasterizer import (
    Camera,
    GaussianGradients,
    RenderOptions,
    project_center,
    render,
    render_backward,
)

__version__ = "0.1.0"
