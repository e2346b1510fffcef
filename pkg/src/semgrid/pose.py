"""Multi-person 3D pose fusion on the backend.

Cross-view greedy association on epipolar distances (optionally gated by
local depth segments), confidence-weighted linear triangulation, temporal
smoothing with bone-length gating as a lightweight skeleton refinement,
constant-velocity prediction and occlusion-annotated feedback.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    CameraCalib,
    _hproject,
    backproject,
    epipolar_segment,
    point_segment_distance,
)

NUM_JOINTS = 17

JOINT_NAMES = (
    "nose", "left_eye", "right_eye", "left_ear", "right_ear",
    "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
    "left_wrist", "right_wrist", "left_hip", "right_hip",
    "left_knee", "right_knee", "left_ankle", "right_ankle",
)

BONES = (
    (5, 7), (7, 9), (6, 8), (8, 10),
    (11, 13), (13, 15), (12, 14), (14, 16),
    (5, 6), (11, 12), (5, 11), (6, 12),
    (0, 1), (0, 2), (1, 3), (2, 4), (0, 5), (0, 6),
)

TAU_EPI = 20.0  # px, association gate
TAU_TRI = 15.0  # px, triangulation residual gate
MIN_RAY_ANGLE_DEG = 2.0
CONF_MIN = 0.4  # keypoints below this stay out of association/triangulation
ALPHA_POS = 0.35
ALPHA_DELAY = 0.1
TAU_CONF = 1.0  # s, confidence decay constant for prediction
BONE_DEV_MAX = 0.5
VEL_MAX = 4.0  # m/s, cap on per-joint velocity estimates
ALPHA_VEL = 0.3  # EMA factor for per-joint velocity smoothing
TRACK_GATE = 0.8  # m, cross-frame nearest-centroid identity gate


@dataclass
class Keypoint2p5D:
    joint_idx: int
    u: float
    v: float
    confidence: float
    depth: float | None = None
    depth_sigma: float | None = None
    occluded_by_feedback: bool = False

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence must be in [0,1]")
        if self.depth is not None and (self.depth <= 0 or not self.depth_sigma or self.depth_sigma <= 0):
            raise ValueError("depth requires depth > 0 and depth_sigma > 0")


@dataclass
class PersonPose:
    local_person_id: int
    joints: list[Keypoint2p5D | None]  # length NUM_JOINTS

    def __post_init__(self):
        if len(self.joints) != NUM_JOINTS:
            raise ValueError(f"expected {NUM_JOINTS} joint slots")


@dataclass
class PoseSet2p5D:
    sensor_id: int
    timestamp_us: int
    persons: list[PersonPose] = field(default_factory=list)


@dataclass
class Joint3D:
    position: np.ndarray
    confidence: float
    n_views: int


@dataclass
class Skeleton3D:
    person_id: int
    timestamp_us: int
    joints: list[Joint3D | None]
    velocities: list[np.ndarray | None] = None

    def __post_init__(self):
        if len(self.joints) != NUM_JOINTS:
            raise ValueError(f"expected {NUM_JOINTS} joint slots")
        if self.velocities is None:
            self.velocities = [None] * NUM_JOINTS

    def centroid(self) -> np.ndarray | None:
        pts = [j.position for j in self.joints if j is not None]
        if not pts:
            return None
        return np.mean(pts, axis=0)


@dataclass
class FeedbackJoint:
    u: float
    v: float
    confidence: float
    occluded: bool


@dataclass
class FeedbackPose:
    sensor_id: int
    person_id: int
    timestamp_us: int
    joints: list[FeedbackJoint | None]

    def __post_init__(self):
        if len(self.joints) != NUM_JOINTS:
            raise ValueError(f"expected {NUM_JOINTS} joint slots")


# -- association ---------------------------------------------------------------


class _ViewArrays:
    """Columnar keypoint arrays for one PoseSet, for vectorized costs."""

    def __init__(self, pose_set: PoseSet2p5D, conf_min: float):
        n = len(pose_set.persons)
        self.pose_set = pose_set
        self.uv = np.zeros((n, NUM_JOINTS, 2))
        self.depth = np.full((n, NUM_JOINTS), np.nan)
        self.sigma = np.full((n, NUM_JOINTS), np.nan)
        self.usable = np.zeros((n, NUM_JOINTS), dtype=bool)
        for i, person in enumerate(pose_set.persons):
            for j, kp in enumerate(person.joints):
                if kp is None:
                    continue
                self.uv[i, j] = (kp.u, kp.v)
                if kp.depth is not None:
                    self.depth[i, j] = kp.depth
                    self.sigma[i, j] = kp.depth_sigma
                self.usable[i, j] = kp.confidence >= conf_min and not kp.occluded_by_feedback


def _epipolar_lines_many(calib_a: CameraCalib, calib_b: CameraCalib, uv: np.ndarray) -> np.ndarray:
    """Epipolar lines in image b of (N,2) pixels of image a, normalized."""
    x1 = _hproject(calib_b, calib_a.center)
    pc = np.empty((len(uv), 3))
    pc[:, 0] = (uv[:, 0] - calib_a.cx) / calib_a.fx
    pc[:, 1] = (uv[:, 1] - calib_a.cy) / calib_a.fy
    pc[:, 2] = 1.0
    pw = pc @ calib_a.rotation.T + calib_a.translation
    pb = (pw - calib_b.translation) @ calib_b.rotation
    x2 = np.empty_like(pb)
    x2[:, 0] = calib_b.fx * pb[:, 0] + calib_b.cx * pb[:, 2]
    x2[:, 1] = calib_b.fy * pb[:, 1] + calib_b.cy * pb[:, 2]
    x2[:, 2] = pb[:, 2]
    lines = np.cross(x1[None, :], x2)
    norms = np.hypot(lines[:, 0], lines[:, 1])
    norms = np.where(norms < 1e-12, 1.0, norms)
    return lines / norms[:, None]


def _clip_project_segment(calib: CameraCalib, p0_cam, p1_cam, eps: float = 1e-6):
    """Project a camera-frame 3D segment to pixels, clipping to z > eps;
    None when entirely behind the camera."""
    z0, z1 = float(p0_cam[2]), float(p1_cam[2])
    if z0 <= eps and z1 <= eps:
        return None
    p0, p1 = p0_cam, p1_cam
    if z0 <= eps:
        s = (eps - z0) / (z1 - z0)
        p0 = p0 + s * (p1 - p0)
        z0 = eps
    elif z1 <= eps:
        s = (eps - z1) / (z0 - z1)
        p1 = p1 + s * (p0 - p1)
        z1 = eps
    a = (calib.cx + calib.fx * float(p0[0]) / z0, calib.cy + calib.fy * float(p0[1]) / z0)
    b = (calib.cx + calib.fx * float(p1[0]) / z1, calib.cy + calib.fy * float(p1[1]) / z1)
    return a, b


def _pt_seg_dist(px, py, ax, ay, bx, by) -> float:
    """Scalar point-to-segment distance in pure floats (hot path)."""
    abx, aby = bx - ax, by - ay
    denom = abx * abx + aby * aby
    if denom < 1e-18:
        return math.hypot(px - ax, py - ay)
    s = ((px - ax) * abx + (py - ay) * aby) / denom
    s = 0.0 if s < 0.0 else (1.0 if s > 1.0 else s)
    return math.hypot(px - (ax + s * abx), py - (ay + s * aby))


def _pair_cost(
    va: _ViewArrays,
    calib_a: CameraCalib,
    vb: _ViewArrays,
    calib_b: CameraCalib,
    use_depth: bool,
    gate: float,
) -> np.ndarray:
    """Cost matrix (persons_a x persons_b): mean joint-to-epipolar
    distance over shared usable joints; inf when nothing is shared."""
    na = len(va.uv)
    nb = len(vb.uv)
    if na == 0 or nb == 0:
        return np.full((na, nb), np.inf)
    lines = _epipolar_lines_many(calib_a, calib_b, va.uv.reshape(-1, 2)).reshape(
        na, NUM_JOINTS, 3
    )
    # distance of every b keypoint to every a epipolar line, same joint
    d = np.abs(
        lines[:, None, :, 0] * vb.uv[None, :, :, 0]
        + lines[:, None, :, 1] * vb.uv[None, :, :, 1]
        + lines[:, None, :, 2]
    )  # (na, nb, J)
    shared = va.usable[:, None, :] & vb.usable[None, :, :]
    if use_depth:
        have_d = va.usable & np.isfinite(va.depth)
        rows_i, rows_j = np.nonzero(have_d)
        if len(rows_i):
            uvk = va.uv[rows_i, rows_j]  # (K,2)
            dep = va.depth[rows_i, rows_j]
            sig = va.sigma[rows_i, rows_j]
            lo = np.maximum(dep - 2 * sig, 1e-3)
            hi = np.maximum(dep + 2 * sig, lo)
            dirs = np.empty((len(rows_i), 3))
            dirs[:, 0] = (uvk[:, 0] - calib_a.cx) / calib_a.fx
            dirs[:, 1] = (uvk[:, 1] - calib_a.cy) / calib_a.fy
            dirs[:, 2] = 1.0
            # both segment endpoints in camera b, (K,3) each
            pb_lo = (lo[:, None] * dirs @ calib_a.rotation.T
                     + calib_a.translation - calib_b.translation) @ calib_b.rotation
            pb_hi = (hi[:, None] * dirs @ calib_a.rotation.T
                     + calib_a.translation - calib_b.translation) @ calib_b.rotation
            for k in range(len(rows_i)):
                seg = _clip_project_segment(calib_b, pb_lo[k], pb_hi[k])
                if seg is None:
                    continue
                (ax, ay), (bx, by) = seg
                i, j = rows_i[k], rows_j[k]
                for q in range(nb):
                    if not shared[i, q, j]:
                        continue
                    ds = _pt_seg_dist(vb.uv[q, j, 0], vb.uv[q, j, 1], ax, ay, bx, by)
                    if ds > gate:
                        shared[i, q, j] = False  # correspondence outside interval
                    else:
                        d[i, q, j] = ds
    counts = shared.sum(axis=2)
    sums = np.where(shared, d, 0.0).sum(axis=2)
    with np.errstate(invalid="ignore"):
        cost = np.where(counts > 0, sums / np.maximum(counts, 1), np.inf)
    return cost


def associate(
    views: list[PoseSet2p5D],
    calibs: dict[int, CameraCalib],
    use_depth: bool = False,
    tau_epi: float = TAU_EPI,
    conf_min: float = CONF_MIN,
) -> list[list[tuple[int, int]]]:
    """Greedy iterative cross-view grouping of person detections.

    Views are visited in sensor-id order; each person of the incoming
    view joins the cheapest existing group with cost <= tau_epi (one
    person per group per view), otherwise starts a new group.  Returns
    groups of (sensor_id, local_person_id).
    """
    if not views:
        return []
    ordered = sorted(views, key=lambda v: v.sensor_id)
    arrays = {v.sensor_id: _ViewArrays(v, conf_min) for v in ordered}
    # groups: list of dict sensor_id -> person row
    groups: list[dict[int, int]] = []
    cost_cache: dict[tuple[int, int], np.ndarray] = {}
    for v in ordered:
        vb = arrays[v.sensor_id]
        nb = len(v.persons)
        if nb == 0:
            continue
        candidates = []  # (cost, group_idx, person_row)
        for gi, group in enumerate(groups):
            best = np.full(nb, np.inf)
            for sid, row in group.items():
                key = (sid, v.sensor_id)
                if key not in cost_cache:
                    cost_cache[key] = _pair_cost(
                        arrays[sid], calibs[sid], vb, calibs[v.sensor_id], use_depth, tau_epi
                    )
                best = np.minimum(best, cost_cache[key][row])
            for q in range(nb):
                if best[q] <= tau_epi:
                    candidates.append((float(best[q]), gi, q))
        candidates.sort()
        taken_groups: set[int] = set()
        taken_persons: set[int] = set()
        for cost, gi, q in candidates:
            if gi in taken_groups or q in taken_persons:
                continue
            groups[gi][v.sensor_id] = q
            taken_groups.add(gi)
            taken_persons.add(q)
        for q in range(nb):
            if q not in taken_persons:
                groups.append({v.sensor_id: q})
    out = []
    for group in groups:
        out.append(
            sorted(
                (sid, arrays[sid].pose_set.persons[row].local_person_id)
                for sid, row in group.items()
            )
        )
    return out


# -- triangulation -------------------------------------------------------------


def _solve3(a: np.ndarray, b: np.ndarray) -> np.ndarray | None:
    """Cramer's rule for a symmetric 3x3 system (hot path); None when
    singular."""
    a00, a01, a02 = a[0]
    a10, a11, a12 = a[1]
    a20, a21, a22 = a[2]
    c0 = a11 * a22 - a12 * a21
    c1 = a12 * a20 - a10 * a22
    c2 = a10 * a21 - a11 * a20
    det = a00 * c0 + a01 * c1 + a02 * c2
    if abs(det) < 1e-12:
        return None
    b0, b1, b2 = b
    x0 = (b0 * c0 + b1 * (a02 * a21 - a01 * a22) + b2 * (a01 * a12 - a02 * a11)) / det
    x1 = (b0 * c1 + b1 * (a00 * a22 - a02 * a20) + b2 * (a02 * a10 - a00 * a12)) / det
    x2 = (b0 * c2 + b1 * (a01 * a20 - a00 * a21) + b2 * (a00 * a11 - a01 * a10)) / det
    return np.array([x0, x1, x2])


def triangulate_joint(
    observations: list[tuple[CameraCalib, float, float, float]],
    tau_tri: float = TAU_TRI,
    min_angle_deg: float = MIN_RAY_ANGLE_DEG,
):
    """Confidence-weighted linear triangulation from >= 2 views.

    Returns (position, mean reprojection residual px) or None when fewer
    than two views, near-parallel rays, or residual above tau_tri.
    """
    if len(observations) < 2:
        return None
    dirs = []
    for calib, u, v, _ in observations:
        dx = (u - calib.cx) / calib.fx
        dy = (v - calib.cy) / calib.fy
        n = math.sqrt(dx * dx + dy * dy + 1.0)
        R = calib.rotation
        dirs.append((
            (R[0, 0] * dx + R[0, 1] * dy + R[0, 2]) / n,
            (R[1, 0] * dx + R[1, 1] * dy + R[1, 2]) / n,
            (R[2, 0] * dx + R[2, 1] * dy + R[2, 2]) / n,
        ))
    cos_gate = math.cos(math.radians(min_angle_deg))
    min_cos = 1.0
    for i in range(len(dirs)):
        a = dirs[i]
        for j in range(i + 1, len(dirs)):
            b = dirs[j]
            c = a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
            if c < min_cos:
                min_cos = c
    if min_cos > cos_gate:
        return None
    ata = [[0.0] * 3 for _ in range(3)]
    atb = [0.0, 0.0, 0.0]
    for calib, u, v, conf in observations:
        R = calib.rotation
        t = calib.translation
        w2 = max(conf, 1e-3) ** 2
        du = u - calib.cx
        dv = v - calib.cy
        for scale, off in ((du, calib.fx), (dv, calib.fy)):
            if scale is du:
                row = (
                    scale * R[0, 2] - off * R[0, 0],
                    scale * R[1, 2] - off * R[1, 0],
                    scale * R[2, 2] - off * R[2, 0],
                )
            else:
                row = (
                    scale * R[0, 2] - off * R[0, 1],
                    scale * R[1, 2] - off * R[1, 1],
                    scale * R[2, 2] - off * R[2, 1],
                )
            b = row[0] * t[0] + row[1] * t[1] + row[2] * t[2]
            for p in range(3):
                rp = row[p] * w2
                ata[p][0] += rp * row[0]
                ata[p][1] += rp * row[1]
                ata[p][2] += rp * row[2]
                atb[p] += rp * b
    x = _solve3(ata, atb)
    if x is None:
        return None
    x0, x1, x2 = x
    total = 0.0
    for calib, u, v, _ in observations:
        R = calib.rotation
        t = calib.translation
        px, py, pz = x0 - t[0], x1 - t[1], x2 - t[2]
        cz = R[0, 2] * px + R[1, 2] * py + R[2, 2] * pz
        if cz <= 1e-6:
            return None
        cx_ = R[0, 0] * px + R[1, 0] * py + R[2, 0] * pz
        cy_ = R[0, 1] * px + R[1, 1] * py + R[2, 1] * pz
        total += math.hypot(
            calib.cx + calib.fx * cx_ / cz - u, calib.cy + calib.fy * cy_ / cz - v
        )
    res = total / len(observations)
    if res > tau_tri:
        return None
    return np.array(x), res


def triangulate_group(
    pose_sets: dict[int, PoseSet2p5D],
    group: list[tuple[int, int]],
    calibs: dict[int, CameraCalib],
    timestamp_us: int,
    conf_min: float = CONF_MIN,
) -> Skeleton3D | None:
    """Skeleton from one association group.

    Joints seen confidently in >= 2 views are triangulated; a person seen
    by exactly one depth-capable view falls back to back-projecting the
    local depth (n_views = 1).
    """
    persons = {}
    for sid, local_id in group:
        for person in pose_sets[sid].persons:
            if person.local_person_id == local_id:
                persons[sid] = person
                break
    joints: list[Joint3D | None] = [None] * NUM_JOINTS
    for j in range(NUM_JOINTS):
        obs = []
        confs = []
        single = None  # (sid, kp) when only one view sees the joint
        for sid, person in persons.items():
            kp = person.joints[j]
            if kp is None or kp.confidence < conf_min or kp.occluded_by_feedback:
                continue
            obs.append((calibs[sid], kp.u, kp.v, kp.confidence))
            confs.append(kp.confidence)
            single = (sid, kp)
        if len(obs) >= 2:
            result = triangulate_joint(obs)
            if result is not None:
                joints[j] = Joint3D(result[0], float(np.mean(confs)), len(obs))
                continue
        if len(obs) == 1 and single is not None:
            sid, kp = single
            if kp.depth is not None:
                pos = backproject(calibs[sid], kp.u, kp.v, kp.depth)
                joints[j] = Joint3D(pos, kp.confidence * 0.5, 1)
    if all(jt is None for jt in joints):
        return None
    return Skeleton3D(person_id=-1, timestamp_us=timestamp_us, joints=joints)


# -- temporal refinement, prediction, feedback ---------------------------------


def refine_skeleton(
    raw: Skeleton3D,
    prev: Skeleton3D | None,
    dt_s: float = 1.0 / 30.0,
    bone_ref: np.ndarray | None = None,
    alpha_pos: float = ALPHA_POS,
) -> Skeleton3D:
    """Exponential smoothing against prev plus bone-length outlier gating.

    Joints whose adjacent bone deviates more than 50% from the reference
    (running median) length are demoted to low confidence; velocities are
    finite differences against prev.
    """
    if not any(j is not None for j in raw.joints):
        raise ValueError("skeleton must have at least one joint")
    joints: list[Joint3D | None] = [None] * NUM_JOINTS
    velocities: list[np.ndarray | None] = [None] * NUM_JOINTS
    for j in range(NUM_JOINTS):
        rj = raw.joints[j]
        if rj is None:
            continue
        pj = prev.joints[j] if prev is not None else None
        if pj is None:
            joints[j] = Joint3D(rj.position.copy(), rj.confidence, rj.n_views)
            velocities[j] = np.zeros(3)
        else:
            pos = alpha_pos * rj.position + (1 - alpha_pos) * pj.position
            joints[j] = Joint3D(pos, rj.confidence, rj.n_views)
            vel = (pos - pj.position) / max(dt_s, 1e-9)
            speed = float(np.linalg.norm(vel))
            if speed > VEL_MAX:
                # a finite-difference spike beyond plausible human motion
                # is triangulation noise, not movement
                vel *= VEL_MAX / speed
            pv = prev.velocities[j] if prev is not None else None
            if pv is not None:
                vel = ALPHA_VEL * vel + (1 - ALPHA_VEL) * pv
            velocities[j] = vel
    if bone_ref is not None:
        demote = set()
        for b, (j0, j1) in enumerate(BONES):
            ref = bone_ref[b]
            if not np.isfinite(ref) or ref <= 0:
                continue
            if joints[j0] is None or joints[j1] is None:
                continue
            length = float(np.linalg.norm(joints[j0].position - joints[j1].position))
            if abs(length - ref) > BONE_DEV_MAX * ref:
                # demote the outer joint of the bone (larger joint index is
                # further from the torso in the COCO ordering)
                demote.add(max(j0, j1))
        for j in demote:
            joints[j].confidence *= 0.1
    return Skeleton3D(raw.person_id, raw.timestamp_us, joints, velocities)


def predict(skel: Skeleton3D, dt_s: float, tau_conf: float = TAU_CONF) -> Skeleton3D:
    """Constant-velocity extrapolation with confidence decay."""
    if dt_s < 0:
        raise ValueError("dt must be non-negative")
    decay = math.exp(-dt_s / tau_conf)
    joints: list[Joint3D | None] = [None] * NUM_JOINTS
    velocities: list[np.ndarray | None] = [None] * NUM_JOINTS
    for j in range(NUM_JOINTS):
        jt = skel.joints[j]
        if jt is None:
            continue
        vel = skel.velocities[j]
        pos = jt.position + (vel * dt_s if vel is not None else 0.0)
        joints[j] = Joint3D(pos, jt.confidence * decay, jt.n_views)
        velocities[j] = None if vel is None else vel.copy()
    return Skeleton3D(
        skel.person_id, skel.timestamp_us + int(round(dt_s * 1e6)), joints, velocities
    )


def make_feedback(
    skels: list[Skeleton3D],
    calib: CameraCalib,
    vmap,
    delay_s: float,
    k: int = 2,
    compute_occlusion: bool = True,
) -> list[FeedbackPose]:
    """Per-sensor reprojection of predicted skeletons with occlusion flags.

    Joints behind the camera or off-image are omitted; persons with no
    visible joint are dropped entirely.
    """
    out = []
    flagged: list[FeedbackJoint] = []
    positions: list[np.ndarray] = []
    for skel in skels:
        pred = predict(skel, delay_s) if delay_s > 0 else skel
        fj: list[FeedbackJoint | None] = [None] * NUM_JOINTS
        present = [j for j in range(NUM_JOINTS) if pred.joints[j] is not None]
        if not present:
            continue
        pos_all = np.array([pred.joints[j].position for j in present])
        pc = (pos_all - calib.translation) @ calib.rotation
        z = np.where(pc[:, 2] > 1e-6, pc[:, 2], 1.0)
        us = calib.cx + calib.fx * pc[:, 0] / z
        vs = calib.cy + calib.fy * pc[:, 1] / z
        ok = (
            (pc[:, 2] > 1e-6)
            & (us >= 0) & (us < calib.width)
            & (vs >= 0) & (vs < calib.height)
        )
        any_joint = False
        for idx, j in enumerate(present):
            if not ok[idx]:
                continue
            fj[j] = FeedbackJoint(float(us[idx]), float(vs[idx]),
                                  pred.joints[j].confidence, False)
            flagged.append(fj[j])
            positions.append(pos_all[idx])
            any_joint = True
        if not any_joint:
            continue
        out.append(FeedbackPose(calib.sensor_id, skel.person_id, skel.timestamp_us, fj))
    if compute_occlusion and vmap is not None and positions:
        # one occlusion query for the joints of all persons at once
        occluded = vmap.is_occluded_many(calib.center, np.array(positions), k=k)
        for fjoint, occ in zip(flagged, occluded):
            fjoint.occluded = bool(occ)
    return out


def update_delay(current: float | None, measured: float, alpha: float = ALPHA_DELAY) -> float:
    """Exponential moving average of the feedback loop delay."""
    if measured < 0:
        raise ValueError("measured delay must be non-negative")
    if current is None:
        return measured
    return (1 - alpha) * current + alpha * measured


# -- cross-frame identity ------------------------------------------------------


class SkeletonTracker:
    """Stable person ids by nearest-centroid matching, plus per-person
    smoothing state and running median bone lengths."""

    def __init__(self, gate_m: float = TRACK_GATE, bone_window: int = 15):
        self._gate = gate_m
        self._bone_window = bone_window
        self._next_id = 0
        self._prev: dict[int, Skeleton3D] = {}
        self._bones: dict[int, list[deque]] = {}

    def update(self, raw_skeletons: list[Skeleton3D], dt_s: float) -> list[Skeleton3D]:
        candidates = []
        for skel in raw_skeletons:
            c = skel.centroid()
            if c is None:
                continue
            best_id, best_d = None, self._gate
            for pid, prev in self._prev.items():
                pc = prev.centroid()
                if pc is None:
                    continue
                d = float(np.linalg.norm(c - pc))
                if d < best_d:
                    best_id, best_d = pid, d
            candidates.append((skel, best_id, best_d))
        candidates.sort(key=lambda x: x[2])
        assigned: set[int] = set()
        refined = []
        for skel, pid, _ in candidates:
            if pid is None or pid in assigned:
                pid = self._next_id
                self._next_id += 1
            assigned.add(pid)
            skel.person_id = pid
            prev = self._prev.get(pid)
            bone_ref = self._bone_reference(pid)
            out = refine_skeleton(skel, prev, dt_s, bone_ref)
            self._record_bones(pid, out)
            self._prev[pid] = out
            refined.append(out)
        return refined

    def _bone_reference(self, pid: int) -> np.ndarray | None:
        hist = self._bones.get(pid)
        if hist is None:
            return None
        ref = np.full(len(BONES), np.nan)
        for b, dq in enumerate(hist):
            if len(dq) >= 3:
                ref[b] = float(np.median(dq))
        return ref

    def _record_bones(self, pid: int, skel: Skeleton3D) -> None:
        hist = self._bones.setdefault(
            pid, [deque(maxlen=self._bone_window) for _ in BONES]
        )
        for b, (j0, j1) in enumerate(BONES):
            if skel.joints[j0] is not None and skel.joints[j1] is not None:
                hist[b].append(
                    float(np.linalg.norm(skel.joints[j0].position - skel.joints[j1].position))
                )


def format_skeleton_log(skels: list[Skeleton3D]) -> str:
    """Newline-delimited `timestamp person_id joint x y z conf n_views`."""
    lines = []
    for skel in skels:
        for j, jt in enumerate(skel.joints):
            if jt is None:
                continue
            p = jt.position
            lines.append(
                f"{skel.timestamp_us} {skel.person_id} {j} "
                f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {jt.confidence:.4f} {jt.n_views}"
            )
    return "\n".join(lines) + ("\n" if lines else "")
