"""Simulated smart edge sensor.

Consumes synthetic observations (the CNN stand-ins), runs the local
pipeline — 2.5D keypoint estimation at the pose rate, semantic cloud
construction at the cloud rate — merges backend feedback into the local
pose model, and emits wire-protocol frames.
"""

from __future__ import annotations

import configparser
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import cloud as cloudmod
from . import protocol
from .cloud import DepthImage, DetectionSet, SegmentationMask, SemanticCloud
from .geometry import CameraCalib, load_calibs
from .pose import (
    NUM_JOINTS,
    FeedbackPose,
    Keypoint2p5D,
    PersonPose,
    PoseSet2p5D,
    update_delay,
)

KAPPA_FB = 0.35  # confidence of feedback-sourced joints, below the
# backend's triangulation gate so they never feed back into fusion
FEEDBACK_MATCH_PX = 30.0
FEEDBACK_PERSON_ID_BASE = 1000
SEND_QUEUE_LIMIT = 64


@dataclass
class SensorConfig:
    sensor_id: int
    calib: CameraCalib
    pose_rate_hz: float = 30.0
    cloud_rate_hz: float = 1.0
    detector_period_s: float = 1.0
    has_depth: bool = True
    use_feedback: bool = True
    use_occlusion: bool = True
    kappa_fb: float = KAPPA_FB

    def __post_init__(self):
        if self.pose_rate_hz <= 0 or self.cloud_rate_hz <= 0 or self.detector_period_s <= 0:
            raise ValueError("rates must be positive")
        if self.cloud_rate_hz > self.pose_rate_hz:
            raise ValueError("cloud rate must not exceed pose rate")


def load_sensor_config(path) -> SensorConfig:
    """INI-style sensor config with a [sensor] section; the calibration
    file is referenced via calib_file (see geometry.load_calibs format)."""
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise ValueError(f"cannot read sensor config {path}")
    if "sensor" not in cp:
        raise ValueError(f"{path}: missing [sensor] section")
    s = cp["sensor"]
    sensor_id = s.getint("sensor_id")
    calibs = load_calibs(s["calib_file"])
    if sensor_id not in calibs:
        raise ValueError(f"{path}: sensor {sensor_id} not in calibration file")
    return SensorConfig(
        sensor_id=sensor_id,
        calib=calibs[sensor_id],
        pose_rate_hz=s.getfloat("pose_rate_hz", fallback=30.0),
        cloud_rate_hz=s.getfloat("cloud_rate_hz", fallback=1.0),
        detector_period_s=s.getfloat("detector_period_s", fallback=1.0),
        has_depth=s.getboolean("has_depth", fallback=True),
        use_feedback=s.getboolean("use_feedback", fallback=True),
        use_occlusion=s.getboolean("use_occlusion", fallback=True),
        kappa_fb=s.getfloat("kappa_fb", fallback=KAPPA_FB),
    )


_PATCH_DU, _PATCH_DV = np.meshgrid(np.arange(-2, 3), np.arange(-2, 3))
_PATCH_DU = _PATCH_DU.ravel()
_PATCH_DV = _PATCH_DV.ravel()


def estimate_keypoint_depths(depth: DepthImage, uvs: np.ndarray,
                             sigma_floor: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Median of the valid depths in the 5x5 patch around each (u, v),
    with a robust spread estimate (scaled MAD) floored at the camera
    noise.  Returns (depths, sigmas), NaN where a patch has no valid
    pixel; raises for keypoints outside the image."""
    uvs = np.asarray(uvs, dtype=np.float64).reshape(-1, 2)
    n = len(uvs)
    if n == 0:
        return np.empty(0), np.empty(0)
    cols = uvs[:, 0].astype(np.int64)
    rows = uvs[:, 1].astype(np.int64)
    if np.any((cols < 0) | (cols >= depth.width) | (rows < 0) | (rows >= depth.height)):
        raise ValueError("keypoint outside image")
    pc = cols[:, None] + _PATCH_DU[None, :]
    pr = rows[:, None] + _PATCH_DV[None, :]
    inside = (pc >= 0) & (pc < depth.width) & (pr >= 0) & (pr < depth.height)
    vals = depth.depth[np.clip(pr, 0, depth.height - 1), np.clip(pc, 0, depth.width - 1)]
    vals = np.where(inside & (vals > 0), vals, np.nan)
    # sort-based median over the valid prefix (NaNs sort to the end)
    count = np.sum(~np.isnan(vals), axis=1)
    c = np.maximum(count, 1)
    lo = (c - 1) // 2
    hi = c // 2
    ridx = np.arange(n)
    svals = np.sort(vals, axis=1)
    med = 0.5 * (svals[ridx, lo] + svals[ridx, hi])
    sdev = np.sort(np.abs(vals - med[:, None]), axis=1)
    mad = 0.5 * (sdev[ridx, lo] + sdev[ridx, hi]) * 1.4826
    sigma = np.maximum(mad, sigma_floor)
    empty = count == 0
    med[empty] = np.nan
    sigma[empty] = np.nan
    return med, sigma


def estimate_keypoint_depth(depth: DepthImage, u: float, v: float,
                            sigma_floor: float = 0.0) -> tuple[float, float] | None:
    """Single-keypoint convenience wrapper around estimate_keypoint_depths."""
    med, sigma = estimate_keypoint_depths(depth, [(u, v)], sigma_floor)
    if np.isnan(med[0]):
        return None
    return float(med[0]), float(sigma[0])


class SensorNode:
    """State machine of one edge sensor; driven by the orchestrator.

    Outgoing frames go through a bounded send queue: on overflow the
    oldest cloud frame is dropped; pose frames are never dropped.
    """

    def __init__(self, config: SensorConfig, class_fingerprint: int):
        self.config = config
        self.class_fingerprint = class_fingerprint
        self.latest_feedback: dict[int, FeedbackPose] = {}
        self.feedback_delay_s: float | None = None
        self._queue: deque[tuple[int, bytes]] = deque()
        self._last_pose_ts = -1
        self.stats = {"pose_sent": 0, "cloud_sent": 0, "clouds_dropped": 0,
                      "feedback_received": 0}

    # -- transport --------------------------------------------------------

    def _enqueue(self, msg_type: int, frame: bytes) -> None:
        if len(self._queue) >= SEND_QUEUE_LIMIT:
            for i, (mt, _) in enumerate(self._queue):
                if mt == protocol.MSG_CLOUD:
                    del self._queue[i]
                    self.stats["clouds_dropped"] += 1
                    break
            # all-pose queue: keep everything, poses must not be dropped
        self._queue.append((msg_type, frame))

    def pop_frames(self) -> list[bytes]:
        frames = [f for _, f in self._queue]
        self._queue.clear()
        return frames

    def hello(self, timestamp_us: int) -> bytes:
        frame = protocol.encode(
            protocol.Hello(
                sensor_id=self.config.sensor_id,
                timestamp_us=timestamp_us,
                calib=self.config.calib,
                class_set_fingerprint=self.class_fingerprint,
            )
        )
        return frame

    def handle_feedback(self, msg: protocol.FeedbackMessage, now_us: int) -> None:
        self.stats["feedback_received"] += 1
        measured = max((now_us - msg.timestamp_us) / 1e6, 0.0)
        self.feedback_delay_s = update_delay(self.feedback_delay_s, measured)
        for fp in msg.poses:
            self.latest_feedback[fp.person_id] = fp

    # -- pose path ---------------------------------------------------------

    def _match_feedback(self, persons: list) -> dict[int, FeedbackPose]:
        """Associate feedback poses to local detections by mean pixel
        distance over shared joints; returns local_id -> feedback."""
        matches: dict[int, FeedbackPose] = {}
        used: set[int] = set()
        for obs in persons:
            best = None
            best_d = FEEDBACK_MATCH_PX
            for pid, fp in self.latest_feedback.items():
                if pid in used:
                    continue
                ds = [
                    math.hypot(kp[0] - fj.u, kp[1] - fj.v)
                    for kp, fj in zip(obs.keypoints, fp.joints)
                    if kp is not None and fj is not None
                ]
                if len(ds) >= 3:
                    mean_d = sum(ds) / len(ds)
                    if mean_d < best_d:
                        best_d = mean_d
                        best = pid
            if best is not None:
                used.add(best)
                matches[obs.local_id] = self.latest_feedback[best]
        return matches

    def process_frame(self, persons: list, depth: DepthImage | None,
                      timestamp_us: int) -> PoseSet2p5D:
        """Local 2.5D pose model for one tick.

        persons: keypoint observations (objects with local_id and a
        17-slot keypoints list of (u, v, conf) or None).  With feedback
        enabled, missing joints are completed from the backend's
        reprojections; with occlusion handling, occlusion-flagged local
        detections are discarded and replaced as well, and persons seen
        only in feedback are appended.  Feedback-sourced joints always
        carry confidence kappa_fb and occluded_by_feedback=True.
        """
        if timestamp_us < self._last_pose_ts:
            raise ValueError("observation timestamps must be monotonic")
        self._last_pose_ts = timestamp_us
        cfg = self.config
        # drop feedback that has gone stale (no refresh for half a second)
        self.latest_feedback = {
            pid: fp
            for pid, fp in self.latest_feedback.items()
            if timestamp_us - fp.timestamp_us <= 500_000
        }
        matches = self._match_feedback(persons) if cfg.use_feedback else {}
        out_persons: list[PersonPose] = []
        pending: list[tuple[list, int, float, float, float, bool]] = []
        for obs in persons:
            fp = matches.get(obs.local_id)
            joints: list[Keypoint2p5D | None] = [None] * NUM_JOINTS
            for j in range(NUM_JOINTS):
                kp = obs.keypoints[j]
                fj = fp.joints[j] if fp is not None else None
                from_feedback = False
                if kp is not None:
                    u, v, conf = kp
                    if cfg.use_occlusion and fj is not None and fj.occluded:
                        u, v = fj.u, fj.v
                        conf = cfg.kappa_fb
                        from_feedback = True
                elif fj is not None:
                    u, v = fj.u, fj.v
                    conf = cfg.kappa_fb
                    from_feedback = True
                else:
                    continue
                pending.append((joints, j, u, v, conf, from_feedback))
            out_persons.append(PersonPose(obs.local_id, joints))
        if cfg.use_occlusion:
            # persons present only in feedback (fully occluded locally) are
            # added back; without occlusion information the sensor cannot
            # distinguish an absent person from an occluded one
            matched = {id(fp) for fp in matches.values()}
            for pid, fp in self.latest_feedback.items():
                if id(fp) in matched:
                    continue
                joints = [None] * NUM_JOINTS
                any_joint = False
                for j, fj in enumerate(fp.joints):
                    if fj is None:
                        continue
                    pending.append((joints, j, fj.u, fj.v, cfg.kappa_fb, True))
                    any_joint = True
                if any_joint:
                    out_persons.append(
                        PersonPose(FEEDBACK_PERSON_ID_BASE + pid, joints)
                    )
        self._finish_joints(pending, depth)
        return PoseSet2p5D(cfg.sensor_id, timestamp_us, out_persons)

    def _finish_joints(self, pending: list, depth: DepthImage | None) -> None:
        """Construct the keypoints, estimating depth for the whole frame
        in one batch."""
        ds = sigmas = None
        if pending and self.config.has_depth and depth is not None:
            uvs = np.array([(u, v) for _, _, u, v, _, _ in pending])
            ds, sigmas = estimate_keypoint_depths(
                depth, uvs, self.config.calib.depth_noise_sigma
            )
        for i, (joints, j, u, v, conf, from_feedback) in enumerate(pending):
            d = sigma = None
            if ds is not None and not np.isnan(ds[i]):
                d = float(ds[i])
                sigma = float(sigmas[i])
            joints[j] = Keypoint2p5D(
                joint_idx=j,
                u=u,
                v=v,
                confidence=conf,
                depth=d,
                depth_sigma=sigma,
                occluded_by_feedback=from_feedback,
            )

    def pose_tick(self, persons: list, depth: DepthImage | None,
                  timestamp_us: int) -> PoseSet2p5D:
        pose_set = self.process_frame(persons, depth, timestamp_us)
        frame = protocol.encode(protocol.PoseMessage(pose_set))
        self._enqueue(protocol.MSG_POSE, frame)
        self.stats["pose_sent"] += 1
        return pose_set

    # -- cloud path --------------------------------------------------------

    def build_semantic_cloud(self, depth: DepthImage, mask: SegmentationMask,
                             dets: DetectionSet, timestamp_us: int) -> SemanticCloud:
        """Back-project, downsample, filter, cluster and semantically
        label one depth frame (the full local cloud pipeline)."""
        if not self.config.has_depth:
            raise ValueError("cloud path requires a depth sensor")
        calib = self.config.calib
        points = cloudmod.depth_to_points(depth, calib)
        points = cloudmod.voxel_downsample(points)
        points = cloudmod.statistical_outlier_filter(points)
        points_world = points @ calib.rotation.T + calib.translation
        clusters = cloudmod.remove_ground_and_cluster(points_world)
        return cloudmod.fuse_semantics(
            points, calib, mask, dets, clusters,
            sensor_id=self.config.sensor_id, timestamp_us=timestamp_us,
        )

    def cloud_tick(self, depth: DepthImage, mask: SegmentationMask,
                   dets: DetectionSet, timestamp_us: int) -> SemanticCloud:
        cloud = self.build_semantic_cloud(depth, mask, dets, timestamp_us)
        frame = protocol.encode(protocol.CloudMessage(cloud))
        self._enqueue(protocol.MSG_CLOUD, frame)
        self.stats["cloud_sent"] += 1
        return cloud
