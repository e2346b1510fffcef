"""Per-sensor point-cloud pipeline.

Back-projects a depth image, downsamples on a 5 cm grid, removes sparse
outliers, clusters the above-ground points and attaches a class
distribution to every point by sampling the segmentation mask and fusing
overlapping detections.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from . import ply, semantics
from .geometry import CameraCalib, pack_voxel_keys, project_many, voxel_indices_of
from .semantics import NUM_CLASSES, ClassDistribution

CLOUD_VOXEL_RES = 0.05
OUTLIER_K = 50
OUTLIER_STDDEV_MULT = 1.0
CLUSTER_DIST = 0.25
MIN_CLUSTER = 10
FLOOR_Z = 0.10
NMS_IOU = 0.5


@dataclass
class DepthImage:
    width: int
    height: int
    depth: np.ndarray  # (height, width) meters, 0 = invalid
    timestamp_us: int = 0

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64).reshape(self.height, self.width)
        if not np.all(np.isfinite(self.depth)) or np.any(self.depth < 0):
            raise ValueError("depth entries must be finite and non-negative")


@dataclass
class SemanticPoint:
    position: np.ndarray
    dist: ClassDistribution


@dataclass
class SemanticCloud:
    """Downsampled sensor-frame points with per-point class distributions.

    Stored columnar: positions (N,3) and log-probability rows (N,C).
    """

    sensor_id: int
    timestamp_us: int
    positions: np.ndarray
    log_probs: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.log_probs = np.asarray(self.log_probs, dtype=np.float64).reshape(
            -1, NUM_CLASSES
        )
        if len(self.positions) != len(self.log_probs):
            raise ValueError("positions and log_probs must align")

    def __len__(self):
        return len(self.positions)

    def point(self, i: int) -> SemanticPoint:
        return SemanticPoint(
            self.positions[i], ClassDistribution(self.log_probs[i].copy(), _trusted=True)
        )

    def argmax_classes(self) -> np.ndarray:
        if len(self) == 0:
            return np.empty(0, dtype=np.int64)
        return np.argmax(self.log_probs, axis=1)


@dataclass
class SegmentationMask:
    """Per-pixel raw class scores, shape (height, width, C)."""

    scores: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 3 or self.scores.shape[2] != NUM_CLASSES:
            raise ValueError("mask must be (H, W, C)")

    @property
    def height(self):
        return self.scores.shape[0]

    @property
    def width(self):
        return self.scores.shape[1]


@dataclass
class Detection:
    class_idx: int
    score: float
    box: tuple[float, float, float, float]  # u0, v0, u1, v1
    modality: str = "rgb"

    def __post_init__(self):
        if not 0.0 < self.score < 1.0:
            raise ValueError("detection score must lie in (0, 1)")
        if self.modality not in ("rgb", "thermal"):
            raise ValueError("modality must be rgb or thermal")
        u0, v0, u1, v1 = self.box
        if not (u0 <= u1 and v0 <= v1):
            raise ValueError("malformed detection box")


@dataclass
class DetectionSet:
    detections: list[Detection] = field(default_factory=list)
    thermal_calib: CameraCalib | None = None


def depth_to_points(depth: DepthImage, calib: CameraCalib) -> np.ndarray:
    """One sensor-frame 3D point per valid depth pixel, (N,3)."""
    if depth.width != calib.width or depth.height != calib.height:
        raise ValueError("depth image size does not match calibration")
    d = depth.depth
    vv, uu = np.nonzero(d > 0)
    z = d[vv, uu]
    pts = np.empty((len(z), 3))
    pts[:, 0] = (uu + 0.0 - calib.cx) / calib.fx * z
    pts[:, 1] = (vv + 0.0 - calib.cy) / calib.fy * z
    pts[:, 2] = z
    return pts


def voxel_downsample(points: np.ndarray, resolution: float = CLOUD_VOXEL_RES) -> np.ndarray:
    """Centroid of the points in every occupied grid cell."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        return pts
    keys = pack_voxel_keys(voxel_indices_of(pts, resolution))
    uniq, inv = np.unique(keys, return_inverse=True)
    counts = np.bincount(inv, minlength=len(uniq)).astype(np.float64)
    out = np.empty((len(uniq), 3))
    for k in range(3):
        out[:, k] = np.bincount(inv, weights=pts[:, k], minlength=len(uniq)) / counts
    return out


def statistical_outlier_filter(
    points: np.ndarray, k: int = OUTLIER_K, stddev_mult: float = OUTLIER_STDDEV_MULT
) -> np.ndarray:
    """Drop points whose mean k-NN distance exceeds mean + mult * stddev."""
    if k < 1:
        raise ValueError("k must be >= 1")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) <= k:
        return pts
    tree = cKDTree(pts)
    dists, _ = tree.query(pts, k=k + 1)
    mean_d = dists[:, 1:].mean(axis=1)
    thresh = mean_d.mean() + stddev_mult * mean_d.std()
    return pts[mean_d <= thresh]


def remove_ground_and_cluster(
    points_world: np.ndarray,
    floor_z: float = FLOOR_Z,
    cluster_dist: float = CLUSTER_DIST,
    min_cluster: int = MIN_CLUSTER,
) -> list[np.ndarray]:
    """Euclidean clusters of above-ground points, as original-index arrays."""
    if cluster_dist <= 0:
        raise ValueError("cluster_dist must be positive")
    pts = np.asarray(points_world, dtype=np.float64).reshape(-1, 3)
    above = np.nonzero(pts[:, 2] > floor_z)[0]
    if len(above) == 0:
        return []
    tree = cKDTree(pts[above])
    pairs = tree.query_pairs(cluster_dist, output_type="ndarray")
    n = len(above)
    if len(pairs):
        adj = coo_matrix(
            (np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n)
        )
        _, labels = connected_components(adj, directed=False)
    else:
        labels = np.arange(n)
    clusters = []
    for lbl in np.unique(labels):
        members = above[labels == lbl]
        if len(members) >= min_cluster:
            clusters.append(members)
    return clusters


def _bilinear_rows(scores: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Bilinear sample of an (H,W,C) score image at (N,2) pixel locations."""
    h, w = scores.shape[:2]
    u = np.clip(uv[:, 0], 0.0, w - 1.0)
    v = np.clip(uv[:, 1], 0.0, h - 1.0)
    u0 = np.floor(u).astype(np.intp)
    v0 = np.floor(v).astype(np.intp)
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    fu = (u - u0)[:, None]
    fv = (v - v0)[:, None]
    return (
        scores[v0, u0] * (1 - fu) * (1 - fv)
        + scores[v0, u1] * fu * (1 - fv)
        + scores[v1, u0] * (1 - fu) * fv
        + scores[v1, u1] * fu * fv
    )


def _project_cam_frame(points_cam: np.ndarray, calib: CameraCalib):
    z = points_cam[:, 2]
    front = z > 1e-6
    zs = np.where(front, z, 1.0)
    uv = np.empty((len(points_cam), 2))
    uv[:, 0] = calib.cx + calib.fx * points_cam[:, 0] / zs
    uv[:, 1] = calib.cy + calib.fy * points_cam[:, 1] / zs
    inside = (
        front
        & (uv[:, 0] >= 0)
        & (uv[:, 0] < calib.width)
        & (uv[:, 1] >= 0)
        & (uv[:, 1] < calib.height)
    )
    return uv, inside


def _box_iou(a, b) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def _point_in_detection(points_cam, uv_color, det: Detection, dets: DetectionSet, calib):
    """Per-point membership mask for a detection box.

    Thermal boxes live in the thermal image; a point belongs to one when
    its own 3D position (known from its depth) projects inside the thermal
    box.  RGB boxes are tested against the color-image projection.
    """
    if det.modality == "rgb":
        u0, v0, u1, v1 = det.box
        return (
            (uv_color[:, 0] >= u0)
            & (uv_color[:, 0] <= u1)
            & (uv_color[:, 1] >= v0)
            & (uv_color[:, 1] <= v1)
        )
    if dets.thermal_calib is None:
        raise ValueError("thermal detection without thermal calibration")
    pts_world = points_cam @ calib.rotation.T + calib.translation
    uv_t, _, front = project_many(dets.thermal_calib, pts_world)
    u0, v0, u1, v1 = det.box
    return (
        front
        & (uv_t[:, 0] >= u0)
        & (uv_t[:, 0] <= u1)
        & (uv_t[:, 1] >= v0)
        & (uv_t[:, 1] <= v1)
    )


def map_thermal_box(det: Detection, dets: DetectionSet, calib: CameraCalib, depth: float):
    """Map a thermal box into the color image at a representative depth."""
    tc = dets.thermal_calib
    if tc is None:
        raise ValueError("thermal detection without thermal calibration")
    u0, v0, u1, v1 = det.box
    corners = [(u0, v0), (u1, v0), (u0, v1), (u1, v1)]
    us, vs = [], []
    for u, v in corners:
        pw = tc.cam_to_world(
            np.array([(u - tc.cx) / tc.fx * depth, (v - tc.cy) / tc.fy * depth, depth])
        )
        pc = calib.world_to_cam(pw)
        if pc[2] <= 1e-6:
            return None
        us.append(calib.cx + calib.fx * pc[0] / pc[2])
        vs.append(calib.cy + calib.fy * pc[1] / pc[2])
    return (min(us), min(vs), max(us), max(vs))


def nms_detections(
    points_cam: np.ndarray,
    uv_color: np.ndarray,
    calib: CameraCalib,
    dets: DetectionSet,
    iou_thresh: float = NMS_IOU,
) -> list[Detection]:
    """Suppress cross-modality duplicates after mapping thermal boxes.

    Thermal boxes are mapped into the color image at the median depth of
    the points they cover, then standard same-class NMS runs on the
    shared frame.
    """
    mapped: list[tuple[Detection, tuple | None]] = []
    for det in dets.detections:
        if det.modality == "rgb":
            mapped.append((det, det.box))
        else:
            inside = _point_in_detection(points_cam, uv_color, det, dets, calib)
            if inside.any():
                z_med = float(np.median(points_cam[inside, 2]))
            else:
                z_med = 2.0
            mapped.append((det, map_thermal_box(det, dets, calib, z_med)))
    order = sorted(range(len(mapped)), key=lambda i: -mapped[i][0].score)
    keep: list[int] = []
    for i in order:
        det_i, box_i = mapped[i]
        dup = False
        for j in keep:
            det_j, box_j = mapped[j]
            if (
                det_i.class_idx == det_j.class_idx
                and box_i is not None
                and box_j is not None
                and _box_iou(box_i, box_j) > iou_thresh
            ):
                dup = True
                break
        if not dup:
            keep.append(i)
    keep.sort()
    return [mapped[i][0] for i in keep]


def fuse_semantics(
    points_cam: np.ndarray,
    calib: CameraCalib,
    mask: SegmentationMask,
    dets: DetectionSet,
    clusters: list[np.ndarray],
    sensor_id: int = 0,
    timestamp_us: int = 0,
) -> SemanticCloud:
    """Attach a class distribution to every point.

    Segmentation scores are sampled bilinearly at the projected point and
    soft-maxed; detection distributions are fused in only for points that
    project inside a (deduplicated) detection box and belong to a cluster.
    Points projecting outside the image keep a uniform distribution.
    """
    pts = np.asarray(points_cam, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    log_p = semantics.uniform_rows(n)
    if n == 0:
        return SemanticCloud(sensor_id, timestamp_us, pts, log_p)
    uv, inside = _project_cam_frame(pts, calib)
    if inside.any():
        raw = _bilinear_rows(mask.scores, uv[inside])
        log_p[inside] = semantics.log_softmax_rows(raw)
    clustered = np.zeros(n, dtype=bool)
    for members in clusters:
        clustered[members] = True
    active = nms_detections(pts, uv, calib, dets, NMS_IOU) if dets.detections else []
    for det in active:
        in_box = _point_in_detection(pts, uv, det, dets, calib)
        sel = in_box & clustered & inside
        if not sel.any():
            continue
        det_dist = semantics.max_entropy_detection(
            det.class_idx, semantics.clamp_score(det.score)
        )
        log_p[sel] = semantics.fuse_rows(log_p[sel], det_dist.log_p[None, :])
    return SemanticCloud(sensor_id, timestamp_us, pts, log_p)


def export_cloud_ply(path, cloud: SemanticCloud) -> None:
    """Binary PLY dump: x,y,z float32, argmax class uint8, max prob float32."""
    classes = cloud.argmax_classes()
    if len(cloud):
        probs = np.exp(cloud.log_probs[np.arange(len(cloud)), classes])
    else:
        probs = np.empty(0)
    ply.write_ply(
        path,
        {
            "x": cloud.positions[:, 0].astype(np.float32),
            "y": cloud.positions[:, 1].astype(np.float32),
            "z": cloud.positions[:, 2].astype(np.float32),
            "class": classes.astype(np.uint8),
            "prob": probs.astype(np.float32),
        },
    )
