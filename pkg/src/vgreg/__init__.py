"""Visual-geometric point cloud registration.

Patch-level fusion of visual feature maps with geometric descriptors, mixed
2D/3D positional attention, coarse-to-fine matching, and robust local-to-
global rigid estimation. Deep backbones stay out of process behind the DRFM
feature-map file format.
"""

from .camera import CameraModel, PixelMapping, inject_pixel_noise, project_to_pixels, scale_to_grid
from .cloud_io import load_point_cloud, save_point_cloud
from .config import PipelineConfig, standard_profile, super_profile
from .errors import ConfigError, DataError, FormatError, StageError, VgregError
from .estimation import EstimationConfig, LgrResult, lgr, weighted_procrustes
from .features import (
    FeatureProvider,
    FileVisualProvider,
    HandcraftedGeometricProvider,
    PatchFeatureMap,
    SyntheticVisualProvider,
    handcrafted_geometric_descriptor,
    load_feature_map,
    save_feature_map,
    synthetic_visual_features,
)
from .geometry import (
    PatchSet,
    PointCloud,
    RigidTransform,
    apply_transform,
    assign_points_to_patches,
    grid_subsample,
    knn,
    overlap_ratio,
)
from .matching import (
    PatchCorrespondences,
    PointCorrespondences,
    match_patches,
    match_points,
    sinkhorn,
)
from .metrics import (
    MetricReport,
    circle_loss_overlap_aware,
    feature_matching_recall,
    inlier_ratio,
    patch_inlier_ratio,
    point_nll_loss,
    pose_errors,
    registration_recall_rmse,
)
from .pipeline import (
    FrameInput,
    PairInput,
    RegistrationResult,
    register,
    run_benchmark,
)
from .weights import WeightStore, init_weights, load_weights, tensor_specs

__version__ = "0.1.0"
