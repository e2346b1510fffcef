"""Camera models, epipolar geometry and integer 3D ray traversal.

Conventions: world frame is right-handed with z up; camera frame has
x right, y down, z along the optical axis (computer-vision standard).
``pose_world_from_cam`` maps camera-frame points to world:
p_world = R @ p_cam + t, so ``t`` is the camera center in world
coordinates.  Pinhole model, no lens distortion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

_EPS_Z = 1e-6


@dataclass(frozen=True)
class CameraCalib:
    sensor_id: int
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray  # 3x3, world from cam
    translation: np.ndarray  # camera center in world, meters
    depth_noise_sigma: float = 0.0

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point outside image")
        if np.abs(R.T @ R - np.eye(3)).max() >= 1e-9:
            raise ValueError("rotation is not orthonormal")
        if np.linalg.det(R) < 0:
            raise ValueError("rotation determinant must be +1")

    @property
    def center(self) -> np.ndarray:
        return self.translation

    def world_to_cam(self, p_world: np.ndarray) -> np.ndarray:
        p = np.asarray(p_world, dtype=np.float64)
        return (p - self.translation) @ self.rotation

    def cam_to_world(self, p_cam: np.ndarray) -> np.ndarray:
        p = np.asarray(p_cam, dtype=np.float64)
        return p @ self.rotation.T + self.translation


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64).reshape(3)
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        n = np.linalg.norm(d)
        if abs(n - 1.0) > 1e-9:
            raise ValueError("direction must be a unit vector")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)


@dataclass(frozen=True, order=True)
class VoxelIndex:
    ix: int
    iy: int
    iz: int

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.ix, self.iy, self.iz)


# Snap applied before floor so points computed to lie exactly on a cell
# boundary (up to float rounding) bin into the upper cell.
_BIN_SNAP = 1e-9


def voxel_index_of(p, resolution: float) -> VoxelIndex:
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    p = np.asarray(p, dtype=np.float64)
    i = np.floor(p / resolution + _BIN_SNAP).astype(np.int64)
    return VoxelIndex(int(i[0]), int(i[1]), int(i[2]))


def voxel_indices_of(points: np.ndarray, resolution: float) -> np.ndarray:
    """Vectorized binning of an (N,3) point array to (N,3) int64 indices."""
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return np.floor(pts / resolution + _BIN_SNAP).astype(np.int64)


def project(calib: CameraCalib, p_world):
    """Project a world point; None when behind the camera or off-image."""
    pc = calib.world_to_cam(np.asarray(p_world, dtype=np.float64).reshape(3))
    z = pc[2]
    if z <= _EPS_Z:
        return None
    u = calib.cx + calib.fx * pc[0] / z
    v = calib.cy + calib.fy * pc[1] / z
    if not (0 <= u < calib.width and 0 <= v < calib.height):
        return None
    return (u, v, z)


def project_many(calib: CameraCalib, pts_world: np.ndarray):
    """Project (N,3) world points.

    Returns (uv (N,2), z (N,), in_image (N,) bool).  uv/z are valid only
    where z > 0; in_image additionally requires the pixel inside bounds.
    """
    pts = np.asarray(pts_world, dtype=np.float64).reshape(-1, 3)
    pc = (pts - calib.translation) @ calib.rotation
    z = pc[:, 2]
    front = z > _EPS_Z
    zsafe = np.where(front, z, 1.0)
    uv = np.empty((len(pts), 2))
    uv[:, 0] = calib.cx + calib.fx * pc[:, 0] / zsafe
    uv[:, 1] = calib.cy + calib.fy * pc[:, 1] / zsafe
    in_image = (
        front
        & (uv[:, 0] >= 0)
        & (uv[:, 0] < calib.width)
        & (uv[:, 1] >= 0)
        & (uv[:, 1] < calib.height)
    )
    return uv, z, in_image


def backproject(calib: CameraCalib, u: float, v: float, depth: float) -> np.ndarray:
    if depth <= 0:
        raise ValueError("depth must be positive")
    pc = np.array(
        [(u - calib.cx) / calib.fx * depth, (v - calib.cy) / calib.fy * depth, depth]
    )
    return calib.cam_to_world(pc)


def backproject_many(calib: CameraCalib, uv: np.ndarray, depth: np.ndarray) -> np.ndarray:
    """Back-project (N,2) pixels with (N,) depths to (N,3) world points."""
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    d = np.asarray(depth, dtype=np.float64).reshape(-1)
    pc = np.empty((len(d), 3))
    pc[:, 0] = (uv[:, 0] - calib.cx) / calib.fx * d
    pc[:, 1] = (uv[:, 1] - calib.cy) / calib.fy * d
    pc[:, 2] = d
    return pc @ calib.rotation.T + calib.translation


def _hproject(calib: CameraCalib, p_world: np.ndarray) -> np.ndarray:
    """Homogeneous pixel coordinates of a world point (no frustum test)."""
    pc = calib.world_to_cam(p_world)
    return np.array(
        [
            calib.fx * pc[0] + calib.cx * pc[2],
            calib.fy * pc[1] + calib.cy * pc[2],
            pc[2],
        ]
    )


def epipolar_line(calib_a: CameraCalib, calib_b: CameraCalib, kp_a) -> np.ndarray:
    """Epipolar line (a,b,c) in image b of pixel kp_a from image a.

    Normalized so a^2 + b^2 = 1; signed distance of pixel (u,v) is
    a*u + b*v + c.  The line is obtained by projecting two points of the
    back-projected ray of kp_a (the camera center and the point at unit
    depth) homogeneously into image b.
    """
    if np.linalg.norm(calib_a.center - calib_b.center) < 1e-9:
        raise ValueError("coincident camera centers: epipolar geometry degenerate")
    u, v = float(kp_a[0]), float(kp_a[1])
    x1 = _hproject(calib_b, calib_a.center)
    x2 = _hproject(calib_b, backproject(calib_a, u, v, 1.0))
    line = np.cross(x1, x2)
    n = math.hypot(line[0], line[1])
    if n < 1e-12:
        raise ValueError("degenerate epipolar line")
    return line / n


def epipolar_segment(calib_a: CameraCalib, calib_b: CameraCalib, kp_a, depth_interval):
    """Projection into image b of kp_a's ray restricted to a depth interval.

    Returns (e0, e1) pixel endpoints (possibly outside image bounds), or
    None when the whole segment lies behind camera b.
    """
    d_min, d_max = float(depth_interval[0]), float(depth_interval[1])
    if not (0 < d_min <= d_max):
        raise ValueError("need 0 < d_min <= d_max")
    u, v = float(kp_a[0]), float(kp_a[1])
    p0 = calib_b.world_to_cam(backproject(calib_a, u, v, d_min))
    p1 = calib_b.world_to_cam(backproject(calib_a, u, v, d_max))
    z0, z1 = p0[2], p1[2]
    if z0 <= _EPS_Z and z1 <= _EPS_Z:
        return None
    # clip the 3D segment to the z > eps half-space of camera b
    if z0 <= _EPS_Z:
        s = (2 * _EPS_Z - z0) / (z1 - z0)
        p0 = p0 + s * (p1 - p0)
    elif z1 <= _EPS_Z:
        s = (2 * _EPS_Z - z1) / (z0 - z1)
        p1 = p1 + s * (p0 - p1)
    e0 = np.array([calib_b.cx + calib_b.fx * p0[0] / p0[2], calib_b.cy + calib_b.fy * p0[1] / p0[2]])
    e1 = np.array([calib_b.cx + calib_b.fx * p1[0] / p1[2], calib_b.cy + calib_b.fy * p1[1] / p1[2]])
    return e0, e1


def point_line_distance(line, pt) -> float:
    return abs(line[0] * pt[0] + line[1] * pt[1] + line[2])


def point_segment_distance(pt, e0, e1) -> float:
    p = np.asarray(pt, dtype=np.float64)
    a = np.asarray(e0, dtype=np.float64)
    b = np.asarray(e1, dtype=np.float64)
    ab = b - a
    denom = float(ab @ ab)
    if denom < 1e-18:
        return float(np.linalg.norm(p - a))
    s = float(np.clip((p - a) @ ab / denom, 0.0, 1.0))
    return float(np.linalg.norm(p - (a + s * ab)))


def _bres_core(start, delta_perm, sign_perm):
    """Bresenham walk in permuted axis order (dominant axis first).

    Tie rule: an error term of exactly zero does not trigger a side step,
    so exact midpoints advance the dominant axis only.
    """
    d0, d1, d2 = delta_perm
    s0, s1, s2 = sign_perm
    c0, c1, c2 = start
    p1 = 2 * d1 - d0
    p2 = 2 * d2 - d0
    cells = [(c0, c1, c2)]
    for _ in range(d0):
        if p1 > 0:
            c1 += s1
            p1 -= 2 * d0
        if p2 > 0:
            c2 += s2
            p2 -= 2 * d0
        p1 += 2 * d1
        p2 += 2 * d2
        c0 += s0
        cells.append((c0, c1, c2))
    return cells


def bresenham3d(frm: VoxelIndex, to: VoxelIndex) -> list[VoxelIndex]:
    """26-connected integer line from frm to to, inclusive.

    Cell count is max(|dx|,|dy|,|dz|) + 1 and the walk is monotone along
    every axis.
    """
    a = frm.as_tuple()
    b = to.as_tuple()
    delta = [b[i] - a[i] for i in range(3)]
    d = [abs(x) for x in delta]
    s = [(0 if x == 0 else (1 if x > 0 else -1)) for x in delta]
    # dominant axis: lowest index among maxima; remaining axes keep order
    dom = max(range(3), key=lambda i: (d[i], -i))
    rest = [i for i in range(3) if i != dom]
    perm = [dom, rest[0], rest[1]]
    cells = _bres_core(
        [a[perm[0]], a[perm[1]], a[perm[2]]],
        [d[perm[0]], d[perm[1]], d[perm[2]]],
        [s[perm[0]], s[perm[1]], s[perm[2]]],
    )
    out = []
    for c in cells:
        w = [0, 0, 0]
        w[perm[0]], w[perm[1]], w[perm[2]] = c
        out.append(VoxelIndex(*w))
    return out


def _bres_walk(origin: np.ndarray, tg: np.ndarray):
    """Shared core of the vectorized multi-ray walk: per-cell dominant
    step count and side-axis advances, plus the per-ray axis layout."""
    n = len(tg)
    delta = tg - origin
    d = np.abs(delta)
    s = np.sign(delta)
    # dominant axis = lowest index among maxima (matches scalar rule)
    dom = np.where(
        (d[:, 0] >= d[:, 1]) & (d[:, 0] >= d[:, 2]),
        0,
        np.where(d[:, 1] >= d[:, 2], 1, 2),
    )
    rest = np.array([[1, 2], [0, 2], [0, 1]])[dom]  # (N,2)
    idx = np.arange(n)
    d0 = d[idx, dom]
    d1 = d[idx, rest[:, 0]]
    d2 = d[idx, rest[:, 1]]
    s0 = s[idx, dom]
    s1 = s[idx, rest[:, 0]]
    s2 = s[idx, rest[:, 1]]
    lengths = d0 + 1
    total = int(lengths.sum())
    ray_id = np.repeat(idx, lengths)
    offsets = np.concatenate(([0], np.cumsum(lengths)[:-1]))
    k = np.arange(total, dtype=np.int64) - offsets[ray_id]
    # closed form of the error-accumulation walk: after k dominant steps
    # the side axis has advanced floor((2*d*k + d0 - 1) / (2*d0)) cells,
    # which reproduces the strict "error > 0" tie rule exactly
    d0_r = d0[ray_id]
    d0_safe = np.maximum(d0_r, 1)
    adv1 = (2 * d1[ray_id] * k + d0_r - 1) // (2 * d0_safe)
    adv2 = (2 * d2[ray_id] * k + d0_r - 1) // (2 * d0_safe)
    adv1[d0_r == 0] = 0
    adv2[d0_r == 0] = 0
    return ray_id, k, adv1, adv2, dom, s0, s1, s2


def bresenham3d_many(origin: np.ndarray, targets: np.ndarray):
    """Bresenham rays from one origin voxel to many target voxels.

    origin: (3,) int; targets: (N,3) int.  Returns (cells (M,3) int64,
    ray_id (M,) intp) with every ray's cells contiguous, origin first,
    target last.  Matches bresenham3d cell-for-cell.
    """
    origin = np.asarray(origin, dtype=np.int64).reshape(3)
    tg = np.asarray(targets, dtype=np.int64).reshape(-1, 3)
    if len(tg) == 0:
        return np.empty((0, 3), dtype=np.int64), np.empty(0, dtype=np.intp)
    ray_id, k, adv1, adv2, dom, s0, s1, s2 = _bres_walk(origin, tg)
    cells = np.empty((len(ray_id), 3), dtype=np.int64)
    # scatter per dominant axis so the column index is a scalar (a full
    # per-row fancy index over both dimensions is several times slower)
    dom_r = dom[ray_id]
    for axis, (r0, r1) in enumerate(((1, 2), (0, 2), (0, 1))):
        m = dom_r == axis
        if not m.any():
            continue
        rid = ray_id[m]
        cells[m, axis] = origin[axis] + s0[rid] * k[m]
        cells[m, r0] = origin[r0] + s1[rid] * adv1[m]
        cells[m, r1] = origin[r1] + s2[rid] * adv2[m]
    return cells, ray_id


def bresenham3d_keys(origin: np.ndarray, targets: np.ndarray):
    """bresenham3d_many, but emitting packed voxel keys directly.

    The packed key is linear in the three components, so each cell's key
    is origin's key plus the axis advances times fixed per-axis weights —
    the (M,3) cell array and the separate packing pass never materialize.
    """
    origin = np.asarray(origin, dtype=np.int64).reshape(3)
    tg = np.asarray(targets, dtype=np.int64).reshape(-1, 3)
    if len(tg) == 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.intp)
    if max(np.abs(origin).max(), np.abs(tg).max()) >= _KEY_BIAS:
        raise ValueError("voxel index out of packable range")
    ray_id, k, adv1, adv2, dom, s0, s1, s2 = _bres_walk(origin, tg)
    weights = np.array([1 << (2 * _KEY_BITS), 1 << _KEY_BITS, 1],
                       dtype=np.int64)
    base = int(pack_voxel_keys(origin[None, :])[0])
    keys = np.empty(len(ray_id), dtype=np.int64)
    dom_r = dom[ray_id]
    for axis, (r0, r1) in enumerate(((1, 2), (0, 2), (0, 1))):
        m = dom_r == axis
        if not m.any():
            continue
        rid = ray_id[m]
        keys[m] = (base + s0[rid] * weights[axis] * k[m]
                   + s1[rid] * weights[r0] * adv1[m]
                   + s2[rid] * weights[r1] * adv2[m])
    return keys, ray_id


# Voxel indices are packed into a single int64 key (21 bits per signed
# component) for hashing and uniqueness operations.
_KEY_BIAS = 1 << 20
_KEY_BITS = 21
_KEY_MASK = (1 << _KEY_BITS) - 1


def pack_voxel_keys(indices: np.ndarray) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64).reshape(-1, 3)
    if np.abs(idx).max(initial=0) >= _KEY_BIAS:
        raise ValueError("voxel index out of packable range")
    return (
        ((idx[:, 0] + _KEY_BIAS) << (2 * _KEY_BITS))
        | ((idx[:, 1] + _KEY_BIAS) << _KEY_BITS)
        | (idx[:, 2] + _KEY_BIAS)
    )


def unpack_voxel_keys(keys: np.ndarray) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.int64).reshape(-1)
    out = np.empty((len(keys), 3), dtype=np.int64)
    out[:, 0] = (keys >> (2 * _KEY_BITS)) - _KEY_BIAS
    out[:, 1] = ((keys >> _KEY_BITS) & _KEY_MASK) - _KEY_BIAS
    out[:, 2] = (keys & _KEY_MASK) - _KEY_BIAS
    return out


def load_calibs(path) -> dict[int, CameraCalib]:
    """Read the one-camera-per-line calibration text format, keyed by
    sensor id."""
    calibs: dict[int, CameraCalib] = {}
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 20:
                raise ValueError(f"{path}:{lineno}: expected 20 fields, got {len(parts)}")
            vals = [float(x) for x in parts]
            if int(vals[0]) in calibs:
                raise ValueError(f"{path}:{lineno}: duplicate sensor id {int(vals[0])}")
            calibs[int(vals[0])] = CameraCalib(
                sensor_id=int(vals[0]),
                width=int(vals[1]),
                height=int(vals[2]),
                fx=vals[3],
                fy=vals[4],
                cx=vals[5],
                cy=vals[6],
                rotation=np.array(vals[7:16]).reshape(3, 3),
                translation=np.array(vals[16:19]),
                depth_noise_sigma=vals[19],
            )
    return calibs


def save_calibs(path, calibs) -> None:
    with open(path, "w") as f:
        for c in calibs:
            r = " ".join(f"{x:.17g}" for x in c.rotation.reshape(-1))
            t = " ".join(f"{x:.17g}" for x in c.translation)
            f.write(
                f"{c.sensor_id} {c.width} {c.height} {c.fx:.17g} {c.fy:.17g} "
                f"{c.cx:.17g} {c.cy:.17g} {r} {t} {c.depth_noise_sigma:.17g}\n"
            )
