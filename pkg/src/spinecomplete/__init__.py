"""Point-cloud shape completion toolkit for posed RGB-D vertebra scenes.

Modules:

* :mod:`.geometry`, :mod:`.raster` - camera, transforms, unprojection, mask rendering
* :mod:`.spatial` - kd-tree kNN, FPS, voxel and random downsampling
* :mod:`.metrics` - Chamfer family, F-score, EMD, SNR, IoU, Pearson
* :mod:`.autodiff`, :mod:`.nn`, :mod:`.model`, :mod:`.train` - the completion network
* :mod:`.pipeline` - labelling, sample extraction, cross-validation, reports
* :mod:`.io`, :mod:`.cli` - file formats and the command line
"""
from ._accel import numba_enabled, use_numba
from .errors import SpineCompleteError
from .geometry import (
    BinaryMask,
    BoundingBox2D,
    CameraIntrinsics,
    ColorImage,
    DepthImage,
    PointCloud,
    RigidTransform,
    TriangleMesh,
    apply_transform,
    mask_bbox,
    project,
    sample_mesh_surface,
    unproject,
)
from .metrics import (
    chamfer,
    chamfer_split,
    emd_approx,
    emd_exact,
    fscore,
    normalized_emd,
    pearson,
    seg_metrics,
    snr,
    voxel_iou,
)
from .raster import render_mask
from .spatial import SpatialIndex, fps, knn, occupancy, random_downsample, voxel_downsample

__version__ = "0.1.0"

__all__ = [
    "numba_enabled",
    "use_numba",
    "SpineCompleteError",
    "BinaryMask",
    "BoundingBox2D",
    "CameraIntrinsics",
    "ColorImage",
    "DepthImage",
    "PointCloud",
    "RigidTransform",
    "TriangleMesh",
    "apply_transform",
    "mask_bbox",
    "project",
    "sample_mesh_surface",
    "unproject",
    "chamfer",
    "chamfer_split",
    "emd_approx",
    "emd_exact",
    "fscore",
    "normalized_emd",
    "pearson",
    "seg_metrics",
    "snr",
    "voxel_iou",
    "render_mask",
    "SpatialIndex",
    "fps",
    "knn",
    "occupancy",
    "random_downsample",
    "voxel_downsample",
]
