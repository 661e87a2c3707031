"""File formats: PLY clouds/meshes, PNG frames, JSON intrinsics/poses."""
from .atomic import atomic_write_bytes, atomic_write_text
from .jsonio import (
    load_json,
    read_intrinsics,
    read_pose,
    write_intrinsics,
    write_json,
    write_pose,
)
from .ply import read_mesh, read_ply, read_point_cloud, write_ply
from .png import read_color_png, read_depth_png, read_label_png, write_color_png, write_depth_png, write_label_png

__all__ = [
    "atomic_write_bytes",
    "atomic_write_text",
    "load_json",
    "read_intrinsics",
    "read_pose",
    "write_intrinsics",
    "write_json",
    "write_pose",
    "read_mesh",
    "read_ply",
    "read_point_cloud",
    "write_ply",
    "read_color_png",
    "read_depth_png",
    "read_label_png",
    "write_color_png",
    "write_depth_png",
    "write_label_png",
]
