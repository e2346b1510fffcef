"""Ground-truth scene oracle: geometry, animated persons, virtual cameras.

Stands in for the real CNNs: renders depth/class images by ray casting
against axis-aligned boxes and per-bone person capsules, produces noisy
2D keypoints with occlusion failure modes, segmentation masks and
detection boxes.  Everything is a pure function of (scene, time, seed).
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field

import numpy as np

from .cloud import DepthImage, Detection, DetectionSet, SegmentationMask
from .geometry import CameraCalib, pack_voxel_keys
from .semantics import FLOOR_CLASS, NUM_CLASSES, PERSON_CLASS
from .pose import NUM_JOINTS

NO_CLASS = 255
MAX_RANGE = 12.0

# default observation-noise knobs; chosen so the feedback ablations are
# resolvable above noise at room scale
KEYPOINT_NOISE_PX = 2.0
MISS_RATE = 0.05
P_OCC_FAIL = 0.7
OCC_ERROR_PX = 25.0
LOGIT_MARGIN = 4.0

# rng stream tags so different observation kinds never share a substream
_STREAM_DEPTH = 1
_STREAM_KEYPOINTS = 2
_STREAM_SEGMENTATION = 3
_STREAM_DETECTIONS = 4


@dataclass
class SceneBox:
    class_idx: int
    min_corner: np.ndarray
    max_corner: np.ndarray
    move_time_s: float | None = None
    move_offset: np.ndarray | None = None

    def __post_init__(self):
        self.min_corner = np.asarray(self.min_corner, dtype=np.float64)
        self.max_corner = np.asarray(self.max_corner, dtype=np.float64)
        if np.any(self.min_corner >= self.max_corner):
            raise ValueError("box min corner must be strictly below max corner")
        if self.move_offset is not None:
            self.move_offset = np.asarray(self.move_offset, dtype=np.float64)

    def corners_at(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        if self.move_time_s is not None and t >= self.move_time_s and self.move_offset is not None:
            return self.min_corner + self.move_offset, self.max_corner + self.move_offset
        return self.min_corner, self.max_corner


# canonical skeleton proportions (meters)
_HIP_HALF = 0.14
_SHOULDER_HALF = 0.18
_TORSO = 0.50
_THIGH = 0.42
_SHANK = 0.43
_UPPER_ARM = 0.30
_FOREARM = 0.27
_NECK_TO_NOSE = 0.22


class PersonAnimator:
    """Parametric walk cycle along a closed waypoint loop.

    Limbs swing as rigid pendulums so every bone length is constant over
    time; the path and phase are the only per-person parameters.
    """

    def __init__(self, waypoints: np.ndarray, speed: float = 0.9, phase: float = 0.0,
                 stride_hz: float = 1.6):
        wp = np.asarray(waypoints, dtype=np.float64).reshape(-1, 2)
        if len(wp) < 2:
            raise ValueError("a path needs at least two waypoints")
        self.waypoints = wp
        self.speed = float(speed)
        self.phase = float(phase)
        self.stride_hz = float(stride_hz)
        closed = np.vstack([wp, wp[:1]])
        seg = np.diff(closed, axis=0)
        self._seg_len = np.linalg.norm(seg, axis=1)
        self._cum = np.concatenate(([0.0], np.cumsum(self._seg_len)))
        self._total = float(self._cum[-1])
        self._closed = closed
        self._cache: tuple[float, np.ndarray] | None = None

    def _pose_frame(self, t: float):
        s = (self.speed * t + self.phase * self._total) % self._total
        i = int(np.searchsorted(self._cum, s, side="right") - 1)
        i = min(i, len(self._seg_len) - 1)
        frac = (s - self._cum[i]) / max(self._seg_len[i], 1e-9)
        pos = self._closed[i] + frac * (self._closed[i + 1] - self._closed[i])
        fwd2 = self._closed[i + 1] - self._closed[i]
        fwd2 = fwd2 / max(np.linalg.norm(fwd2), 1e-9)
        f = np.array([fwd2[0], fwd2[1], 0.0])
        l = np.array([-fwd2[1], fwd2[0], 0.0])
        return np.array([pos[0], pos[1], 0.0]), f, l

    def joints_at(self, t: float) -> np.ndarray:
        """World positions of the 17 COCO joints, shape (17,3)."""
        if self._cache is not None and self._cache[0] == t:
            return self._cache[1]
        ground, f, l = self._pose_frame(t)
        up = np.array([0.0, 0.0, 1.0])
        w = 2 * math.pi * self.stride_hz
        swing = 0.5 * math.sin(w * t + self.phase * 2 * math.pi)
        hip_h = _THIGH + _SHANK - 0.03
        pelvis = ground + hip_h * up
        joints = np.zeros((NUM_JOINTS, 3))
        joints[11] = pelvis + _HIP_HALF * l  # left hip
        joints[12] = pelvis - _HIP_HALF * l
        for hip_j, knee_j, ankle_j, sgn in ((11, 13, 15, 1.0), (12, 14, 16, -1.0)):
            a = sgn * swing
            thigh_dir = -up * math.cos(a) + f * math.sin(a)
            knee = joints[hip_j] + _THIGH * thigh_dir
            flex = 0.35 * max(0.0, -math.sin(w * t + self.phase * 2 * math.pi) * sgn)
            b = a - flex
            shank_dir = -up * math.cos(b) + f * math.sin(b)
            joints[knee_j] = knee
            joints[ankle_j] = knee + _SHANK * shank_dir
        neck = pelvis + _TORSO * up
        joints[5] = neck + _SHOULDER_HALF * l
        joints[6] = neck - _SHOULDER_HALF * l
        for sh_j, el_j, wr_j, sgn in ((5, 7, 9, -1.0), (6, 8, 10, 1.0)):
            a = 0.6 * sgn * swing
            ua_dir = -up * math.cos(a) + f * math.sin(a)
            elbow = joints[sh_j] + _UPPER_ARM * ua_dir
            b = a + 0.3
            fa_dir = -up * math.cos(b) + f * math.sin(b)
            joints[el_j] = elbow
            joints[wr_j] = elbow + _FOREARM * fa_dir
        nose = neck + _NECK_TO_NOSE * up + 0.10 * f
        joints[0] = nose
        joints[1] = nose + 0.05 * up + 0.035 * l - 0.02 * f
        joints[2] = nose + 0.05 * up - 0.035 * l - 0.02 * f
        joints[3] = nose + 0.03 * up + 0.08 * l - 0.09 * f
        joints[4] = nose + 0.03 * up - 0.08 * l - 0.09 * f
        self._cache = (t, joints)
        return joints

    def capsules_at(self, t: float) -> list[tuple[np.ndarray, np.ndarray, float]]:
        """Per-bone capsules (p0, p1, radius) approximating the body."""
        j = self.joints_at(t)
        pelvis = 0.5 * (j[11] + j[12])
        neck = 0.5 * (j[5] + j[6])
        head = j[0] + 0.04 * np.array([0, 0, 1.0])
        caps = [
            (pelvis, neck, 0.15),
            (head, head, 0.12),
            (j[11], j[13], 0.07), (j[13], j[15], 0.06),
            (j[12], j[14], 0.07), (j[14], j[16], 0.06),
            (j[5], j[7], 0.05), (j[7], j[9], 0.045),
            (j[6], j[8], 0.05), (j[8], j[10], 0.045),
        ]
        return caps


# capsule index -> joints it belongs to (for self-occlusion exclusions)
_CAPSULE_JOINTS = (
    (5, 6, 11, 12),
    (0, 1, 2, 3, 4),
    (11, 13), (13, 15),
    (12, 14), (14, 16),
    (5, 7), (7, 9),
    (6, 8), (8, 10),
)


@dataclass
class GroundTruthScene:
    room_min: np.ndarray
    room_max: np.ndarray
    boxes: list[SceneBox] = field(default_factory=list)
    persons: list[PersonAnimator] = field(default_factory=list)
    rng_seed: int = 0
    wall_class: int = 2
    wall_thickness: float = 0.10

    def __post_init__(self):
        self.room_min = np.asarray(self.room_min, dtype=np.float64)
        self.room_max = np.asarray(self.room_max, dtype=np.float64)
        for b in self.boxes:
            if np.any(b.min_corner < self.room_min - 1e-9) or np.any(
                b.max_corner > self.room_max + 1e-9
            ):
                raise ValueError("scene box outside room bounds")

    def wall_boxes(self) -> list[SceneBox]:
        x0, y0, _ = self.room_min
        x1, y1, _ = self.room_max
        h = self.room_max[2]
        th = self.wall_thickness
        wc = self.wall_class
        return [
            SceneBox(wc, (x0 - th, y0 - th, 0), (x1 + th, y0, h)),
            SceneBox(wc, (x0 - th, y1, 0), (x1 + th, y1 + th, h)),
            SceneBox(wc, (x0 - th, y0, 0), (x0, y1, h)),
            SceneBox(wc, (x1, y0, 0), (x1 + th, y1, h)),
        ]

    def all_boxes(self) -> list[SceneBox]:
        return self.boxes + self.wall_boxes()


def scene_rng(scene: GroundTruthScene, sensor_id: int, frame_idx: int, stream: int):
    return np.random.default_rng([scene.rng_seed, sensor_id, frame_idx, stream])


# -- ray casting ---------------------------------------------------------------


def _ray_boxes(origins, dirs, boxes_at):
    """Nearest-hit parameter and class per ray against AABBs.

    origins/dirs are (N,3); dirs unnormalized, returned t in dir units.
    """
    n = len(dirs)
    best_t = np.full(n, np.inf)
    best_c = np.full(n, NO_CLASS, dtype=np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
    for bmin, bmax, cls in boxes_at:
        t1 = (bmin - origins) * inv
        t2 = (bmax - origins) * inv
        tmin = np.nanmax(np.minimum(t1, t2), axis=1)
        tmax = np.nanmin(np.maximum(t1, t2), axis=1)
        t = np.where(tmin > 1e-9, tmin, tmax)
        hit = (tmax >= np.maximum(tmin, 1e-9)) & (t > 1e-9) & (t < best_t)
        best_t = np.where(hit, t, best_t)
        best_c = np.where(hit, cls, best_c)
    return best_t, best_c


def _ray_floor(origins, dirs, room_min, room_max):
    n = len(dirs)
    t = np.full(n, np.inf)
    dz = dirs[:, 2]
    moving = np.abs(dz) > 1e-12
    tc = np.where(moving, -origins[:, 2] / np.where(moving, dz, 1.0), np.inf)
    px = origins[:, 0] + tc * dirs[:, 0]
    py = origins[:, 1] + tc * dirs[:, 1]
    ok = (
        moving
        & (tc > 1e-9)
        & (px >= room_min[0])
        & (px <= room_max[0])
        & (py >= room_min[1])
        & (py <= room_max[1])
    )
    t[ok] = tc[ok]
    return t


def _ray_capsules_batch(origins, dirs, p0s, p1s, rs):
    """Hit parameters for N rays against M capsules at once, (N,M).

    Broadcasts one quadratic solve for the cylinder bodies and one per
    end-cap sphere; np.inf marks misses."""
    axis = p1s - p0s  # (M,3)
    aa = np.einsum("mj,mj->m", axis, axis)
    has_body = aa > 1e-12
    aa_safe = np.where(has_body, aa, 1.0)
    m = origins[:, None, :] - p0s[None, :, :]  # (N,M,3)
    da = (dirs @ axis.T) / aa_safe  # (N,M)
    ma = np.einsum("nmj,mj->nm", m, axis) / aa_safe
    dn = dirs[:, None, :] - da[..., None] * axis[None]
    mn = m - ma[..., None] * axis[None]
    A = np.einsum("nmj,nmj->nm", dn, dn)
    B = 2 * np.einsum("nmj,nmj->nm", dn, mn)
    Cc = np.einsum("nmj,nmj->nm", mn, mn) - rs * rs
    disc = B * B - 4 * A * Cc
    ok = (disc >= 0) & (A > 1e-14) & has_body
    t = (-B - np.sqrt(np.where(ok, disc, 0.0))) / np.where(ok, 2 * A, 1.0)
    s = ma + t * da
    body_t = np.where(ok & (t > 1e-9) & (s >= 0.0) & (s <= 1.0), t, np.inf)
    A_s = np.einsum("nj,nj->n", dirs, dirs)[:, None]
    best = body_t
    for centers in (p0s, p1s):
        mm = origins[:, None, :] - centers[None, :, :]
        B = 2 * np.einsum("nmj,nj->nm", mm, dirs)
        Cc = np.einsum("nmj,nmj->nm", mm, mm) - rs * rs
        disc = B * B - 4 * A_s * Cc
        ok = (disc >= 0) & (A_s > 1e-14)
        t = (-B - np.sqrt(np.where(ok, disc, 0.0))) / np.where(ok, 2 * A_s, 1.0)
        cap_t = np.where(ok & (t > 1e-9), t, np.inf)
        best = np.minimum(best, cap_t)
    return best


def _cast_persons(scene, t_s, origins, dirs, best_t, best_c, skip_capsules):
    """Fold person-capsule hits into (best_t, best_c) in place.

    skip_capsules maps (person, capsule) to True (skip for every ray) or
    a per-ray boolean mask of rays the capsule must not block.  Large ray
    batches (full images) are prefiltered with a per-person bounding
    sphere so the capsule quadratics only run on candidate rays.
    """
    prefilter = skip_capsules is None and len(dirs) > 128
    for pi, person in enumerate(scene.persons):
        p0s, p1s, rs, labels = [], [], [], []
        for ci, (p0, p1, r) in enumerate(person.capsules_at(t_s)):
            if skip_capsules and skip_capsules.get((pi, ci)) is True:
                continue
            p0s.append(p0)
            p1s.append(p1)
            rs.append(r)
            labels.append((pi, ci))
        if not p0s:
            continue
        p0s = np.asarray(p0s)
        p1s = np.asarray(p1s)
        rs = np.asarray(rs)
        if prefilter:
            ends = np.vstack([p0s, p1s])
            center = 0.5 * (ends.min(axis=0) + ends.max(axis=0))
            radius = np.linalg.norm(ends - center, axis=1).max() + rs.max()
            m = origins - center
            A = np.einsum("ij,ij->i", dirs, dirs)
            B = 2 * np.einsum("ij,ij->i", dirs, m)
            Cc = np.einsum("ij,ij->i", m, m) - radius * radius
            disc = B * B - 4 * A * Cc
            cand = (disc >= 0) & (-B + np.sqrt(np.maximum(disc, 0.0)) > 0)
            if not cand.any():
                continue
            sub = np.nonzero(cand)[0]
            t_nm = _ray_capsules_batch(origins[sub], dirs[sub], p0s, p1s, rs)
            tc = t_nm.min(axis=1)
            hit = tc < best_t[sub]
            rows = sub[hit]
            best_t[rows] = tc[hit]
            best_c[rows] = PERSON_CLASS
        else:
            t_nm = _ray_capsules_batch(origins, dirs, p0s, p1s, rs)
            if skip_capsules:
                for mi, label in enumerate(labels):
                    sk = skip_capsules.get(label)
                    if sk is not None and sk is not True:
                        t_nm[sk, mi] = np.inf
            tc = t_nm.min(axis=1)
            cap_hit = tc < best_t
            best_t[cap_hit] = tc[cap_hit]
            best_c[cap_hit] = PERSON_CLASS
    return best_t, best_c


def _cast(scene: GroundTruthScene, t_s: float, origin, dirs, include_persons=True,
          skip_capsules=None):
    """Nearest hit over the whole scene: (t, class) arrays."""
    dirs = np.asarray(dirs, dtype=np.float64)
    origins = np.broadcast_to(
        np.asarray(origin, dtype=np.float64).reshape(-1, 3), dirs.shape
    )
    if isinstance(skip_capsules, set):
        skip_capsules = {k: True for k in skip_capsules}
    boxes_at = [(*b.corners_at(t_s), b.class_idx) for b in scene.all_boxes()]
    best_t, best_c = _ray_boxes(origins, dirs, boxes_at)
    tf = _ray_floor(origins, dirs, scene.room_min, scene.room_max)
    floor_hit = tf < best_t
    best_t = np.where(floor_hit, tf, best_t)
    best_c = np.where(floor_hit, FLOOR_CLASS, best_c)
    if include_persons:
        best_t, best_c = _cast_persons(
            scene, t_s, origins, dirs, best_t, best_c, skip_capsules
        )
    return best_t, best_c


_pixel_dirs_cache: dict[int, np.ndarray] = {}


def _pixel_dirs_cam(calib: CameraCalib) -> np.ndarray:
    key = id(calib)
    cached = _pixel_dirs_cache.get(key)
    if cached is None:
        uu, vv = np.meshgrid(np.arange(calib.width), np.arange(calib.height))
        dirs = np.empty((calib.height * calib.width, 3))
        dirs[:, 0] = ((uu.ravel() + 0.0) - calib.cx) / calib.fx
        dirs[:, 1] = ((vv.ravel() + 0.0) - calib.cy) / calib.fy
        dirs[:, 2] = 1.0
        _pixel_dirs_cache[key] = dirs
        cached = dirs
    return cached


_static_cast_cache: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}


def _box_state(scene: GroundTruthScene, t_s: float) -> tuple:
    return tuple(
        b.move_time_s is not None and t_s >= b.move_time_s for b in scene.boxes
    )


def _static_cast(scene: GroundTruthScene, calib: CameraCalib, t_s: float):
    """Per-pixel nearest hit against the static structure, cached per
    camera and per box configuration (boxes only change at move events)."""
    key = (id(scene), id(calib), _box_state(scene, t_s))
    cached = _static_cast_cache.get(key)
    if cached is None:
        dirs_world = _pixel_dirs_cam(calib) @ calib.rotation.T
        t, cls = _cast(scene, t_s, calib.center, dirs_world, include_persons=False)
        cached = (t, cls)
        _static_cast_cache[key] = cached
    return cached


def render_frame(scene: GroundTruthScene, calib: CameraCalib, t_s: float,
                 include_persons: bool = True):
    """Per-pixel camera-frame depth and ground-truth class, noise-free."""
    t, cls = _static_cast(scene, calib, t_s)
    t = t.copy()
    cls = cls.copy()
    if include_persons and scene.persons:
        dirs_world = _pixel_dirs_cam(calib) @ calib.rotation.T
        origins = np.broadcast_to(calib.center, dirs_world.shape)
        t, cls = _cast_persons(scene, t_s, origins, dirs_world, t, cls, None)
    # dir z-component is 1 in the camera frame, so t equals z depth
    depth = np.where(np.isfinite(t) & (t <= MAX_RANGE), t, 0.0)
    cls = np.where(depth > 0, cls, NO_CLASS)
    return (
        depth.reshape(calib.height, calib.width),
        cls.reshape(calib.height, calib.width),
    )


_noise_field_cache: dict[tuple, np.ndarray] = {}


def _depth_noise_field(scene: GroundTruthScene, calib: CameraCalib,
                       frame_idx: int) -> np.ndarray:
    """Per-pixel unit-normal draws for one (sensor, frame).

    A whole-image field makes the noise at a pixel a pure function of
    (seed, sensor, frame, pixel), so sparse and full renders of the same
    frame agree regardless of which pixels are requested."""
    key = (id(scene), calib.sensor_id, frame_idx)
    cached = _noise_field_cache.get(key)
    if cached is None:
        if len(_noise_field_cache) > 64:
            _noise_field_cache.clear()
        rng = scene_rng(scene, calib.sensor_id, frame_idx, _STREAM_DEPTH)
        cached = rng.standard_normal((calib.height, calib.width))
        _noise_field_cache[key] = cached
    return cached


def render_depth(scene: GroundTruthScene, calib: CameraCalib, t_s: float,
                 frame_idx: int = 0, noise: bool = True,
                 depth_image: np.ndarray | None = None) -> DepthImage:
    """Ray-cast depth image with range-dependent Gaussian noise.

    depth_image: optional precomputed noise-free render_frame output, to
    avoid casting the same frame twice."""
    depth = depth_image if depth_image is not None else render_frame(scene, calib, t_s)[0]
    if noise and calib.depth_noise_sigma > 0:
        field = _depth_noise_field(scene, calib, frame_idx)
        sigma = calib.depth_noise_sigma * (depth / 4.0) ** 2
        noisy = depth + field * sigma
        depth = np.where(depth > 0, np.maximum(noisy, 1e-3), 0.0)
    return DepthImage(calib.width, calib.height, depth, int(round(t_s * 1e6)))


def render_depth_sparse(scene: GroundTruthScene, calib: CameraCalib, t_s: float,
                        pixels: np.ndarray, frame_idx: int = 0,
                        noise: bool = True) -> DepthImage:
    """Depth image populated only at the given (col, row) pixels.

    Cheap stand-in for a full frame when only keypoint-patch depths are
    needed; unrendered pixels stay 0 (invalid)."""
    img = np.zeros((calib.height, calib.width))
    pixels = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
    if len(pixels):
        keep = (
            (pixels[:, 0] >= 0)
            & (pixels[:, 0] < calib.width)
            & (pixels[:, 1] >= 0)
            & (pixels[:, 1] < calib.height)
        )
        flat = np.unique(pixels[keep, 1] * calib.width + pixels[keep, 0])
        pixels = np.stack([flat % calib.width, flat // calib.width], axis=1)
    if len(pixels):
        depth = sparse_pixel_depths(scene, calib, t_s, pixels, frame_idx, noise)
        img[pixels[:, 1], pixels[:, 0]] = depth
    return DepthImage(calib.width, calib.height, img, int(round(t_s * 1e6)))


def sparse_pixel_depths(scene: GroundTruthScene, calib: CameraCalib, t_s: float,
                         pixels: np.ndarray, frame_idx: int, noise: bool) -> np.ndarray:
    """Depth values at in-image (col, row) pixels.

    The static structure comes from the cached full-frame cast; only the
    person capsules are re-cast per call."""
    static_t, _ = _static_cast(scene, calib, t_s)
    flat = pixels[:, 1] * calib.width + pixels[:, 0]
    best_t = static_t[flat].copy()
    if scene.persons:
        dirs = _pixel_dirs_cam(calib)[flat] @ calib.rotation.T
        origins = np.broadcast_to(calib.center, dirs.shape)
        best_c = np.full(len(pixels), NO_CLASS, dtype=np.int64)
        _cast_persons(scene, t_s, origins, dirs, best_t, best_c, None)
    depth = np.where(np.isfinite(best_t) & (best_t <= MAX_RANGE), best_t, 0.0)
    if noise and calib.depth_noise_sigma > 0:
        field = _depth_noise_field(scene, calib, frame_idx)
        sigma = calib.depth_noise_sigma * (depth / 4.0) ** 2
        noisy = depth + field[pixels[:, 1], pixels[:, 0]] * sigma
        depth = np.where(depth > 0, np.maximum(noisy, 1e-3), 0.0)
    return depth


def render_depth_sparse_many(scene: GroundTruthScene, requests, t_s: float,
                             frame_idx: int = 0, noise: bool = True) -> list[DepthImage]:
    """render_depth_sparse for several cameras with one batched cast.

    requests: list of (calib, pixels); produces the same images as the
    per-camera calls (noise streams stay per-sensor)."""
    cleaned = []
    for calib, pixels in requests:
        pixels = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
        if len(pixels):
            keep = (
                (pixels[:, 0] >= 0)
                & (pixels[:, 0] < calib.width)
                & (pixels[:, 1] >= 0)
                & (pixels[:, 1] < calib.height)
            )
            pixels = np.unique(pixels[keep], axis=0)
        cleaned.append((calib, pixels))
    counts = [len(p) for _, p in cleaned]
    total = sum(counts)
    all_depth = np.empty(0)
    if total:
        dirs = np.empty((total, 3))
        origins = np.empty((total, 3))
        best_t = np.empty(total)
        pos = 0
        for calib, pixels in cleaned:
            n = len(pixels)
            if n == 0:
                continue
            flat = pixels[:, 1] * calib.width + pixels[:, 0]
            static_t, _ = _static_cast(scene, calib, t_s)
            best_t[pos : pos + n] = static_t[flat]
            dirs[pos : pos + n] = _pixel_dirs_cam(calib)[flat] @ calib.rotation.T
            origins[pos : pos + n] = calib.center
            pos += n
        if scene.persons:
            best_c = np.full(total, NO_CLASS, dtype=np.int64)
            _cast_persons(scene, t_s, origins, dirs, best_t, best_c, None)
        all_depth = np.where(np.isfinite(best_t) & (best_t <= MAX_RANGE), best_t, 0.0)
    pos = 0
    images = []
    for (calib, pixels), n in zip(cleaned, counts):
        img = np.zeros((calib.height, calib.width))
        if n:
            depth = all_depth[pos : pos + n]
            pos += n
            if noise and calib.depth_noise_sigma > 0:
                field = _depth_noise_field(scene, calib, frame_idx)
                sigma = calib.depth_noise_sigma * (depth / 4.0) ** 2
                noisy = depth + field[pixels[:, 1], pixels[:, 0]] * sigma
                depth = np.where(depth > 0, np.maximum(noisy, 1e-3), 0.0)
            img[pixels[:, 1], pixels[:, 0]] = depth
        images.append(DepthImage(calib.width, calib.height, img, int(round(t_s * 1e6))))
    return images


def patch_pixels(uvs, half: int = 2) -> np.ndarray:
    """(col, row) integer pixels of the (2*half+1)^2 patches around the
    given (u, v) keypoint coordinates."""
    uvs = np.asarray(uvs, dtype=np.float64).reshape(-1, 2)
    if len(uvs) == 0:
        return np.empty((0, 2), dtype=np.int64)
    base = uvs.astype(np.int64)
    span = np.arange(-half, half + 1)
    du, dv = np.meshgrid(span, span)
    offsets = np.stack([du.ravel(), dv.ravel()], axis=1)
    return (base[:, None, :] + offsets[None, :, :]).reshape(-1, 2)


def render_segmentation(scene: GroundTruthScene, calib: CameraCalib, t_s: float,
                        label_noise: float = 0.0, frame_idx: int = 0,
                        class_image: np.ndarray | None = None) -> SegmentationMask:
    """Per-pixel class scores peaked at the ground-truth class.

    label_noise is the probability of a pixel's peak moving to a random
    wrong class.
    """
    if class_image is None:
        _, class_image = render_frame(scene, calib, t_s)
    cls = class_image.copy()
    valid = cls != NO_CLASS
    cls = np.where(valid, cls, 0)
    if label_noise > 0:
        rng = scene_rng(scene, calib.sensor_id, frame_idx, _STREAM_SEGMENTATION)
        flip = rng.random(cls.shape) < label_noise
        wrong = (cls + 1 + rng.integers(0, NUM_CLASSES - 1, size=cls.shape)) % NUM_CLASSES
        cls = np.where(flip & valid, wrong, cls)
    scores = np.zeros((calib.height, calib.width, NUM_CLASSES))
    rows, cols = np.nonzero(valid)
    scores[rows, cols, cls[rows, cols]] = LOGIT_MARGIN
    return SegmentationMask(scores)


def _project_box_to_image(calib: CameraCalib, bmin, bmax):
    corners = np.array(
        [[x, y, z] for x in (bmin[0], bmax[0]) for y in (bmin[1], bmax[1]) for z in (bmin[2], bmax[2])]
    )
    pc = (corners - calib.translation) @ calib.rotation
    front = pc[:, 2] > 1e-6
    if front.sum() < 2:
        return None
    pc = pc[front]
    us = calib.cx + calib.fx * pc[:, 0] / pc[:, 2]
    vs = calib.cy + calib.fy * pc[:, 1] / pc[:, 2]
    u0, u1 = np.clip([us.min(), us.max()], 0, calib.width - 1)
    v0, v1 = np.clip([vs.min(), vs.max()], 0, calib.height - 1)
    if u1 - u0 < 2 or v1 - v0 < 2:
        return None
    return (float(u0), float(v0), float(u1), float(v1))


def _visible_fraction(scene, calib, t_s, samples: np.ndarray, skip_self=None) -> float:
    dirs = samples - calib.center
    t, _ = _cast(scene, t_s, calib.center, dirs, True, skip_self)
    return float(np.mean(t > 0.98))


def render_detections(scene: GroundTruthScene, calib: CameraCalib, t_s: float,
                      frame_idx: int = 0) -> DetectionSet:
    """Ground-truth 2D boxes of sufficiently visible objects and persons."""
    rng = scene_rng(scene, calib.sensor_id, frame_idx, _STREAM_DETECTIONS)
    dets = []
    for b in scene.boxes:
        bmin, bmax = b.corners_at(t_s)
        box2d = _project_box_to_image(calib, bmin, bmax)
        if box2d is None:
            continue
        center = 0.5 * (bmin + bmax)
        top = center.copy()
        top[2] = bmax[2]
        samples = np.vstack([center[None, :], top[None, :]])
        if _visible_fraction(scene, calib, t_s, samples) < 0.3:
            continue
        dets.append(Detection(b.class_idx, float(rng.uniform(0.6, 0.95)), box2d))
    for pi, person in enumerate(scene.persons):
        joints = person.joints_at(t_s)
        pc = (joints - calib.translation) @ calib.rotation
        front = pc[:, 2] > 1e-6
        if front.sum() < 4:
            continue
        us = calib.cx + calib.fx * pc[front, 0] / pc[front, 2]
        vs = calib.cy + calib.fy * pc[front, 1] / pc[front, 2]
        u0, u1 = np.clip([us.min() - 3, us.max() + 3], 0, calib.width - 1)
        v0, v1 = np.clip([vs.min() - 3, vs.max() + 8], 0, calib.height - 1)
        if u1 - u0 < 2 or v1 - v0 < 2:
            continue
        skip = {(pi, ci) for ci in range(len(_CAPSULE_JOINTS))}
        if _visible_fraction(scene, calib, t_s, joints, skip) < 0.3:
            continue
        dets.append(
            Detection(PERSON_CLASS, float(rng.uniform(0.6, 0.95)), (u0, v0, u1, v1))
        )
    return DetectionSet(dets)


_skip_mask_cache: dict[tuple[int, int], dict] = {}


def _self_skip_masks(n_c: int, n_p: int) -> dict[tuple[int, int], np.ndarray]:
    """Skip masks so the ray to joint j of person p ignores p's capsules
    that contain j (a joint sits on the surface of its own bones)."""
    cached = _skip_mask_cache.get((n_c, n_p))
    if cached is None:
        cached = {}
        for pi in range(n_p):
            for ci, members in enumerate(_CAPSULE_JOINTS):
                mask_pj = np.zeros((n_p, NUM_JOINTS), dtype=bool)
                mask_pj[pi, list(members)] = True
                cached[(pi, ci)] = np.tile(mask_pj.ravel(), n_c)
        _skip_mask_cache[(n_c, n_p)] = cached
    return cached


def visible_joints_many(scene: GroundTruthScene, calibs: list[CameraCalib],
                        t_s: float) -> np.ndarray:
    """Ground-truth joint visibility for every camera at once, (C,P,17).

    A joint is visible when it projects inside the image and the sight
    ray reaches it without hitting scene geometry or a body capsule
    (bones incident to the joint itself are excluded).  One batched cast
    over all cameras x persons x joints keeps per-tick cost flat."""
    n_c = len(calibs)
    n_p = len(scene.persons)
    if n_p == 0 or n_c == 0:
        return np.zeros((n_c, n_p, NUM_JOINTS), dtype=bool)
    joints = np.stack([p.joints_at(t_s) for p in scene.persons])  # (P,17,3)
    flat = joints.reshape(-1, 3)
    origins = np.concatenate(
        [np.broadcast_to(c.center, (n_p * NUM_JOINTS, 3)) for c in calibs]
    )
    dirs = np.concatenate([flat - c.center for c in calibs])
    in_img = np.zeros(n_c * n_p * NUM_JOINTS, dtype=bool)
    for ci_cam, c in enumerate(calibs):
        pc = (flat - c.translation) @ c.rotation
        z = pc[:, 2]
        front = z > 1e-6
        zs = np.where(front, z, 1.0)
        us = c.cx + c.fx * pc[:, 0] / zs
        vs = c.cy + c.fy * pc[:, 1] / zs
        ok = front & (us >= 0) & (us < c.width) & (vs >= 0) & (vs < c.height)
        in_img[ci_cam * n_p * NUM_JOINTS : (ci_cam + 1) * n_p * NUM_JOINTS] = ok
    t, _ = _cast(scene, t_s, origins, dirs, True, _self_skip_masks(n_c, n_p))
    return (in_img & (t > 0.98)).reshape(n_c, n_p, NUM_JOINTS)


def visible_joints(scene: GroundTruthScene, calib: CameraCalib, t_s: float) -> np.ndarray:
    """Ground-truth per-person, per-joint visibility from one camera."""
    return visible_joints_many(scene, [calib], t_s)[0]


@dataclass
class PersonObservation:
    local_id: int
    keypoints: list[tuple[float, float, float] | None]  # (u, v, conf) per joint
    gt_visible: np.ndarray  # (17,) bool


def render_keypoints(scene: GroundTruthScene, calib: CameraCalib, t_s: float,
                     noise_px: float = KEYPOINT_NOISE_PX,
                     miss_rate: float = MISS_RATE,
                     p_occ_fail: float = P_OCC_FAIL,
                     frame_idx: int = 0,
                     vis: np.ndarray | None = None) -> list[PersonObservation]:
    """Noisy 2D keypoints standing in for the pose-estimation CNN.

    Visible joints get isotropic Gaussian noise; occluded joints fail
    with probability p_occ_fail (dropped or displaced by a large error,
    emulating pose collapse towards the visible side) and always carry
    lower confidence."""
    if noise_px < 0:
        raise ValueError("noise_px must be non-negative")
    rng = scene_rng(scene, calib.sensor_id, frame_idx, _STREAM_KEYPOINTS)
    if vis is None:
        vis = visible_joints(scene, calib, t_s)
    observations = []
    for pi, person in enumerate(scene.persons):
        joints = person.joints_at(t_s)
        pc = (joints - calib.translation) @ calib.rotation
        z = pc[:, 2]
        front = z > 1e-6
        zs = np.where(front, z, 1.0)
        us = calib.cx + calib.fx * pc[:, 0] / zs
        vs = calib.cy + calib.fy * pc[:, 1] / zs
        in_img = front & (us >= 0) & (us < calib.width) & (vs >= 0) & (vs < calib.height)
        # fixed-shape draws keep the rng stream aligned across configs
        draws = rng.random((NUM_JOINTS, 2))
        nudge = rng.standard_normal((NUM_JOINTS, 2))
        kps: list[tuple[float, float, float] | None] = [None] * NUM_JOINTS
        for j in range(NUM_JOINTS):
            if not in_img[j]:
                continue
            if vis[pi, j]:
                if draws[j, 0] < miss_rate:
                    continue
                u = us[j] + noise_px * nudge[j, 0]
                v = vs[j] + noise_px * nudge[j, 1]
                conf = 0.55 + 0.4 * draws[j, 1]
            else:
                if draws[j, 0] < p_occ_fail:
                    if draws[j, 1] < 0.5:
                        continue  # dropped
                    u = us[j] + OCC_ERROR_PX * nudge[j, 0]
                    v = vs[j] + OCC_ERROR_PX * nudge[j, 1]
                else:
                    u = us[j] + noise_px * nudge[j, 0]
                    v = vs[j] + noise_px * nudge[j, 1]
                # occluded estimates score low, as a pose CNN's would; the
                # top of the range still leaks past downstream gates
                conf = 0.15 + 0.3 * draws[j, 1] * draws[j, 0]
            u = float(np.clip(u, 0, calib.width - 1e-3))
            v = float(np.clip(v, 0, calib.height - 1e-3))
            kps[j] = (u, v, float(conf))
        if any(kp is not None for kp in kps):
            observations.append(PersonObservation(pi, kps, vis[pi]))
    return observations


@dataclass
class GroundTruth:
    joints: np.ndarray  # (P, 17, 3)
    occupied_keys: np.ndarray  # packed voxel keys of static structure


def ground_truth(scene: GroundTruthScene, t_s: float,
                 resolution: float = 0.10) -> GroundTruth:
    """Exact joint positions and the voxelized static structure."""
    joints = (
        np.stack([p.joints_at(t_s) for p in scene.persons])
        if scene.persons
        else np.empty((0, NUM_JOINTS, 3))
    )
    keys = structure_voxel_keys(scene, t_s, resolution)
    return GroundTruth(joints, keys)


def box_shell_keys(bmin, bmax, resolution: float) -> np.ndarray:
    """Packed keys of the voxels on the surface shell of an AABB."""
    lo = np.floor(np.asarray(bmin) / resolution + 1e-9).astype(np.int64)
    hi = np.floor((np.asarray(bmax) - 1e-9) / resolution + 1e-9).astype(np.int64)
    xs = np.arange(lo[0], hi[0] + 1)
    ys = np.arange(lo[1], hi[1] + 1)
    zs = np.arange(lo[2], hi[2] + 1)
    gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
    idx = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    interior = np.all((idx > lo) & (idx < hi), axis=1)
    return pack_voxel_keys(idx[~interior])


def structure_voxel_keys(scene: GroundTruthScene, t_s: float,
                         resolution: float = 0.10) -> np.ndarray:
    """Voxelization of walls, floor and boxes (surface shells)."""
    keys = []
    for b in scene.all_boxes():
        bmin, bmax = b.corners_at(t_s)
        keys.append(box_shell_keys(bmin, bmax, resolution))
    # floor layer, one voxel thick at z index 0
    x = np.arange(
        int(np.floor(scene.room_min[0] / resolution)),
        int(np.floor(scene.room_max[0] / resolution)) + 1,
    )
    y = np.arange(
        int(np.floor(scene.room_min[1] / resolution)),
        int(np.floor(scene.room_max[1] / resolution)) + 1,
    )
    gx, gy = np.meshgrid(x, y, indexing="ij")
    floor_idx = np.stack([gx.ravel(), gy.ravel(), np.zeros(gx.size, dtype=np.int64)], axis=1)
    keys.append(pack_voxel_keys(floor_idx))
    return np.unique(np.concatenate(keys))


def structure_class_of_keys(scene: GroundTruthScene, t_s: float, keys: np.ndarray,
                            resolution: float = 0.10) -> np.ndarray:
    """Ground-truth class per packed voxel key (boxes override floor)."""
    classes = np.full(len(keys), FLOOR_CLASS, dtype=np.int64)
    for b in scene.all_boxes():
        bmin, bmax = b.corners_at(t_s)
        shell = box_shell_keys(bmin, bmax, resolution)
        classes[np.isin(keys, shell)] = b.class_idx
    return classes


def prior_map_points(scene: GroundTruthScene, resolution: float = 0.10) -> np.ndarray:
    """Voxel-center points of walls and floor (the 'empty building')."""
    keys = []
    for b in scene.wall_boxes():
        keys.append(box_shell_keys(b.min_corner, b.max_corner, resolution))
    x = np.arange(
        int(np.floor(scene.room_min[0] / resolution)),
        int(np.floor(scene.room_max[0] / resolution)) + 1,
    )
    y = np.arange(
        int(np.floor(scene.room_min[1] / resolution)),
        int(np.floor(scene.room_max[1] / resolution)) + 1,
    )
    gx, gy = np.meshgrid(x, y, indexing="ij")
    keys.append(
        pack_voxel_keys(
            np.stack([gx.ravel(), gy.ravel(), np.zeros(gx.size, dtype=np.int64)], axis=1)
        )
    )
    from .geometry import unpack_voxel_keys

    idx = unpack_voxel_keys(np.unique(np.concatenate(keys)))
    return (idx + 0.5) * resolution


# -- scene configuration -------------------------------------------------------


def make_camera_rig(scene: GroundTruthScene, n: int = 4, width: int = 160,
                    height: int = 120, f_px: float = 130.0, cam_height: float = 2.5,
                    depth_noise_sigma: float = 0.02, inset: float = 0.4) -> list[CameraCalib]:
    """Cameras near the room corners, facing down towards the center."""
    x0, y0, _ = scene.room_min
    x1, y1, _ = scene.room_max
    corners = [(x0 + inset, y0 + inset), (x1 - inset, y0 + inset),
               (x1 - inset, y1 - inset), (x0 + inset, y1 - inset)]
    target = np.array([(x0 + x1) / 2, (y0 + y1) / 2, 0.8])
    calibs = []
    for sid in range(n):
        cx, cy = corners[sid % 4]
        pos = np.array([cx, cy, cam_height])
        fwd = target - pos
        fwd = fwd / np.linalg.norm(fwd)
        up_world = np.array([0.0, 0.0, 1.0])
        right = np.cross(fwd, up_world)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd], axis=1)
        calibs.append(
            CameraCalib(sid, width, height, f_px, f_px, width / 2, height / 2,
                        R, pos, depth_noise_sigma)
        )
    return calibs


def make_default_scene(seed: int = 1, n_persons: int = 2) -> GroundTruthScene:
    """Office-like room with a central pillar that causes occlusions."""
    boxes = [
        SceneBox(4, (3.2, 2.2, 0.0), (4.8, 3.0, 0.75)),  # table
        SceneBox(5, (5.2, 3.6, 0.0), (5.7, 4.1, 0.9)),  # chair
        SceneBox(7, (0.4, 4.8, 0.0), (1.2, 5.4, 1.8)),  # cabinet
        SceneBox(15, (3.6, 3.6, 0.0), (4.4, 4.4, 2.2)),  # pillar
    ]
    paths = [
        np.array([[1.5, 1.5], [6.5, 1.5], [6.5, 4.8], [1.5, 4.8]]),
        np.array([[2.2, 4.2], [2.2, 2.2], [6.0, 2.6], [5.6, 4.6]]),
        np.array([[1.2, 3.0], [6.8, 3.2], [4.0, 1.2]]),
    ]
    persons = [
        PersonAnimator(paths[i % len(paths)], speed=0.8 + 0.15 * i, phase=0.37 * i)
        for i in range(n_persons)
    ]
    return GroundTruthScene(
        room_min=(0, 0, 0), room_max=(8, 6, 3), boxes=boxes, persons=persons,
        rng_seed=seed,
    )


def _parse_vec(text: str) -> np.ndarray:
    return np.array([float(x) for x in text.split()])


def load_scene(path) -> GroundTruthScene:
    """INI-style scene file: [room], [scene], [box:*], [person:*] sections."""
    cp = configparser.ConfigParser()
    read = cp.read(path)
    if not read:
        raise ValueError(f"cannot read scene config {path}")
    if "room" not in cp:
        raise ValueError(f"{path}: missing [room] section")
    room_min = _parse_vec(cp["room"].get("min", "0 0 0"))
    room_max = _parse_vec(cp["room"]["max"])
    boxes = []
    persons = []
    for section in cp.sections():
        if section.startswith("box:"):
            s = cp[section]
            move_t = s.getfloat("move_time", fallback=None)
            offset = _parse_vec(s["move_offset"]) if "move_offset" in s else None
            boxes.append(
                SceneBox(
                    class_idx=s.getint("class"),
                    min_corner=_parse_vec(s["min"]),
                    max_corner=_parse_vec(s["max"]),
                    move_time_s=move_t,
                    move_offset=offset,
                )
            )
        elif section.startswith("person:"):
            s = cp[section]
            wp = _parse_vec(s["waypoints"]).reshape(-1, 2)
            persons.append(
                PersonAnimator(
                    wp,
                    speed=s.getfloat("speed", fallback=0.9),
                    phase=s.getfloat("phase", fallback=0.0),
                )
            )
    seed = cp.getint("scene", "seed", fallback=0) if "scene" in cp else 0
    return GroundTruthScene(
        room_min=room_min, room_max=room_max, boxes=boxes, persons=persons, rng_seed=seed
    )


def save_scene(path, scene: GroundTruthScene) -> None:
    cp = configparser.ConfigParser()
    cp["room"] = {
        "min": " ".join(str(x) for x in scene.room_min),
        "max": " ".join(str(x) for x in scene.room_max),
    }
    cp["scene"] = {"seed": str(scene.rng_seed)}
    for i, b in enumerate(scene.boxes):
        sec = f"box:{i}"
        cp[sec] = {
            "class": str(b.class_idx),
            "min": " ".join(str(x) for x in b.min_corner),
            "max": " ".join(str(x) for x in b.max_corner),
        }
        if b.move_time_s is not None:
            cp[sec]["move_time"] = str(b.move_time_s)
            cp[sec]["move_offset"] = " ".join(str(x) for x in b.move_offset)
    for i, p in enumerate(scene.persons):
        cp[f"person:{i}"] = {
            "waypoints": " ".join(str(x) for x in p.waypoints.ravel()),
            "speed": str(p.speed),
            "phase": str(p.phase),
        }
    with open(path, "w") as f:
        cp.write(f)
