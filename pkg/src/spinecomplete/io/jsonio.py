"""JSON documents: camera intrinsics, per-frame poses and generic helpers.

Intrinsics::

    {"fx": 600.0, "fy": 600.0, "cx": 319.5, "cy": 239.5, "width": 640, "height": 480}

Pose (CT to camera, 4x4 row-major, millimetres)::

    {"matrix": [[r00, r01, r02, tx], [r10, r11, r12, ty], [r20, r21, r22, tz], [0, 0, 0, 1]]}
"""
from __future__ import annotations

import json
import math
import os

import numpy as np

from ..errors import JsonFormatError, SpineCompleteError
from ..geometry import CameraIntrinsics, RigidTransform
from .atomic import atomic_write_text

INTRINSIC_KEYS = ("fx", "fy", "cx", "cy", "width", "height")


def load_json(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise JsonFormatError(f"{os.fspath(path)}: {exc.msg}", exc.pos) from None
    except UnicodeDecodeError as exc:
        raise JsonFormatError(f"{os.fspath(path)}: not UTF-8", exc.start) from None


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else ("inf" if v > 0 else "-inf" if v < 0 else "nan")
    return obj


def dumps_json(obj) -> str:
    """Deterministic JSON: sorted keys, non-finite floats as strings, trailing newline."""
    return json.dumps(_plain(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_json(path, obj) -> None:
    atomic_write_text(path, dumps_json(obj))


def intrinsics_from_dict(d) -> CameraIntrinsics:
    if not isinstance(d, dict):
        raise JsonFormatError("intrinsics must be a JSON object")
    missing = [k for k in INTRINSIC_KEYS if k not in d]
    if missing:
        raise JsonFormatError(f"intrinsics lack keys {missing}")
    extra = sorted(set(d) - set(INTRINSIC_KEYS))
    if extra:
        raise JsonFormatError(f"unknown intrinsics keys {extra}")
    try:
        return CameraIntrinsics(
            float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]), int(d["width"]), int(d["height"])
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, SpineCompleteError):
            raise
        raise JsonFormatError(f"bad intrinsics value: {exc}") from None


def intrinsics_to_dict(intr: CameraIntrinsics) -> dict:
    return {k: getattr(intr, k) for k in INTRINSIC_KEYS}


def pose_from_dict(d) -> RigidTransform:
    m = d.get("matrix") if isinstance(d, dict) else d
    try:
        arr = np.asarray(m, dtype=np.float64)
    except (TypeError, ValueError):
        raise JsonFormatError("pose matrix must be numeric") from None
    if arr.shape != (4, 4):
        raise JsonFormatError(f"pose matrix must be 4x4, got shape {arr.shape}")
    return RigidTransform.from_matrix(arr)


def pose_to_dict(t: RigidTransform) -> dict:
    return {"matrix": t.matrix.tolist()}


def read_intrinsics(path) -> CameraIntrinsics:
    return intrinsics_from_dict(load_json(path))


def write_intrinsics(path, intr: CameraIntrinsics) -> None:
    write_json(path, intrinsics_to_dict(intr))


def read_pose(path) -> RigidTransform:
    return pose_from_dict(load_json(path))


def write_pose(path, t: RigidTransform) -> None:
    write_json(path, pose_to_dict(t))
