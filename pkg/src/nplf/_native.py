"""ctypes binding to the native k-closest-points kernel.

The kernel is a cdylib built from the kernel/ crate. Arrays cross the
boundary as contiguous row-major 32-bit floats; indices come back as int64
with -1 marking empty slots and a uint8 validity mask. Status codes:
0 ok, 1 bad shape, 2 non-finite input.
"""

from __future__ import annotations

import ctypes
import os
from pathlib import Path

import numpy as np

_lib = None

LIB_NAMES = ("libnplf_kernel.so", "libnplf_kernel.dylib", "nplf_kernel.dll")


def _candidate_paths():
    env = os.environ.get("NPLF_KERNEL_LIB")
    if env:
        yield Path(env)
    root = Path(__file__).resolve().parents[2]
    for name in LIB_NAMES:
        yield root / "kernel" / "target" / "release" / name
        yield Path(__file__).resolve().parent / name


def load_library():
    global _lib
    if _lib is not None:
        return _lib
    for path in _candidate_paths():
        if path.exists():
            lib = ctypes.CDLL(str(path))
            lib.nplf_knn_rays.restype = ctypes.c_int32
            lib.nplf_knn_rays.argtypes = [
                ctypes.POINTER(ctypes.c_float),   # origins R x 3
                ctypes.POINTER(ctypes.c_float),   # directions R x 3
                ctypes.POINTER(ctypes.c_float),   # points N x 3
                ctypes.POINTER(ctypes.c_float),   # local-to-camera 3 x 4
                ctypes.POINTER(ctypes.c_float),   # fx, fy, cx, cy
                ctypes.c_int64,                   # n_rays
                ctypes.c_int64,                   # n_points
                ctypes.c_int64,                   # width
                ctypes.c_int64,                   # height
                ctypes.c_float,                   # frustum margin
                ctypes.c_int64,                   # k
                ctypes.POINTER(ctypes.c_int64),   # out indices R x K
                ctypes.POINTER(ctypes.c_float),   # out distances R x K
                ctypes.POINTER(ctypes.c_uint8),   # out mask R x K
            ]
            _lib = lib
            return _lib
    raise RuntimeError(
        "native kernel not built; run `cargo build --release` in kernel/ "
        "or point NPLF_KERNEL_LIB at the library"
    )


def available() -> bool:
    try:
        load_library()
        return True
    except (RuntimeError, OSError):
        return False


def _f32(x):
    return np.ascontiguousarray(x, dtype=np.float32)


def knn_rays(origins_local, dirs_local, points_local, camera, local_to_world, k):
    """Batched frustum-filtered k-closest selection via the native kernel."""
    from .ray_aggregation import FRUSTUM_MARGIN

    lib = load_library()
    origins = _f32(origins_local)
    dirs = _f32(dirs_local)
    points = _f32(points_local)
    n_rays, n_points = len(origins), len(points)
    local_to_cam = (camera.world_to_cam @ np.asarray(local_to_world))[:3, :]
    intr = np.array(
        [camera.intrinsics[0, 0], camera.intrinsics[1, 1],
         camera.intrinsics[0, 2], camera.intrinsics[1, 2]],
        dtype=np.float32,
    )
    out_idx = np.empty((n_rays, k), dtype=np.int64)
    out_dist = np.empty((n_rays, k), dtype=np.float32)
    out_mask = np.empty((n_rays, k), dtype=np.uint8)

    def ptr(arr, ctype):
        return arr.ctypes.data_as(ctypes.POINTER(ctype))

    status = lib.nplf_knn_rays(
        ptr(origins, ctypes.c_float), ptr(dirs, ctypes.c_float),
        ptr(points, ctypes.c_float), ptr(_f32(local_to_cam), ctypes.c_float),
        ptr(intr, ctypes.c_float),
        n_rays, n_points, camera.width, camera.height,
        ctypes.c_float(FRUSTUM_MARGIN), k,
        ptr(out_idx, ctypes.c_int64), ptr(out_dist, ctypes.c_float),
        ptr(out_mask, ctypes.c_uint8),
    )
    if status == 1:
        raise ValueError("native kernel rejected the batch shape")
    if status == 2:
        raise ValueError("native kernel rejected non-finite input")
    if status != 0:
        raise RuntimeError(f"native kernel failed with status {status}")
    return out_idx, out_dist.astype(np.float64), out_mask.astype(bool)
