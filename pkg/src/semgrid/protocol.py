"""Bit-exact wire format between sensor nodes and backend.

Frame layout (all integers little-endian):

    magic 'SES1' | msg_type u8 | sensor_id u16 | timestamp_us u64 |
    payload_len u32 | payload

See PROTOCOL.md for the payload layouts and hex-dump examples.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .cloud import SemanticCloud
from .geometry import CameraCalib
from .pose import (
    NUM_JOINTS,
    FeedbackJoint,
    FeedbackPose,
    Joint3D,
    Keypoint2p5D,
    PersonPose,
    PoseSet2p5D,
    Skeleton3D,
)
from .semantics import NUM_CLASSES, PROB_FLOOR

MAGIC = b"SES1"
PROTOCOL_VERSION = 1
MAX_PAYLOAD = 64 * 1024 * 1024

MSG_HELLO = 1
MSG_CLOUD = 2
MSG_POSE = 3
MSG_FEEDBACK = 4
MSG_SNAPSHOT = 5

_HEADER = struct.Struct("<4sBHQI")


class ProtocolError(Exception):
    """Base class for wire-format violations."""


class BadMagicError(ProtocolError):
    pass


class UnknownMessageTypeError(ProtocolError):
    pass


class TruncatedFrameError(ProtocolError):
    pass


class LengthMismatchError(ProtocolError):
    pass


class MalformedPayloadError(ProtocolError):
    pass


@dataclass
class Hello:
    sensor_id: int
    timestamp_us: int
    calib: CameraCalib
    class_set_fingerprint: int
    protocol_version: int = PROTOCOL_VERSION


@dataclass
class CloudMessage:
    cloud: SemanticCloud


@dataclass
class PoseMessage:
    pose_set: PoseSet2p5D


@dataclass
class FeedbackMessage:
    sensor_id: int
    timestamp_us: int
    poses: list[FeedbackPose] = field(default_factory=list)


@dataclass
class SnapshotMessage:
    timestamp_us: int
    voxel_indices: np.ndarray  # (N,3) int32
    voxel_occupancy: np.ndarray  # (N,) f32 log-odds
    voxel_classes: np.ndarray  # (N,) u8
    voxel_probs: np.ndarray  # (N,) f32
    skeletons: list[Skeleton3D] = field(default_factory=list)


def quantize_probs(probs: np.ndarray) -> np.ndarray:
    """Sum-preserving u16 quantization: rows sum to exactly 65535.

    Largest-remainder rounding keeps each entry within 1/65535 of the
    input, so decoding never needs a lossy renormalization step.
    """
    p = np.asarray(probs, dtype=np.float64).reshape(-1, NUM_CLASSES)
    scaled = p * 65535.0
    q = np.floor(scaled).astype(np.int64)
    remainder = (65535 - q.sum(axis=-1)).astype(np.int64)
    frac = scaled - q
    order = np.argsort(-frac, axis=-1, kind="stable")
    bump = np.arange(p.shape[-1])[None, :] < remainder[:, None]
    out = q.copy()
    np.put_along_axis(out, order, np.take_along_axis(q, order, -1) + bump, -1)
    return out.astype(np.uint16)


def dequantize_probs(q: np.ndarray) -> np.ndarray:
    """Back to floored, normalized log-probability rows."""
    p = np.asarray(q, dtype=np.float64) / 65535.0
    p = np.maximum(p, PROB_FLOOR)
    p /= p.sum(axis=-1, keepdims=True)
    return np.log(p)


def _encode_hello(msg: Hello) -> bytes:
    c = msg.calib
    vals = [c.fx, c.fy, c.cx, c.cy, *c.rotation.reshape(-1), *c.translation, c.depth_noise_sigma]
    return struct.pack(
        "<HQHH17d",
        msg.protocol_version,
        msg.class_set_fingerprint,
        c.width,
        c.height,
        *vals,
    )


def _decode_hello(sensor_id: int, ts: int, payload: bytes) -> Hello:
    try:
        version, fp, w, h, *vals = struct.unpack("<HQHH17d", payload)
    except struct.error as e:
        raise MalformedPayloadError(str(e)) from None
    try:
        calib = CameraCalib(
            sensor_id=sensor_id,
            width=w,
            height=h,
            fx=vals[0],
            fy=vals[1],
            cx=vals[2],
            cy=vals[3],
            rotation=np.array(vals[4:13]).reshape(3, 3),
            translation=np.array(vals[13:16]),
            depth_noise_sigma=vals[16],
        )
    except ValueError as e:
        raise MalformedPayloadError(f"invalid calibration: {e}") from None
    return Hello(sensor_id, ts, calib, fp, version)


_cloud_point_dtype = np.dtype(
    [("xyz", "<f4", (3,)), ("q", "<u2", (NUM_CLASSES,))]
)


def _encode_cloud(msg: CloudMessage) -> bytes:
    cloud = msg.cloud
    n = len(cloud)
    rec = np.empty(n, dtype=_cloud_point_dtype)
    rec["xyz"] = cloud.positions.astype(np.float32)
    rec["q"] = quantize_probs(np.exp(cloud.log_probs)) if n else 0
    return struct.pack("<I", n) + rec.tobytes()


def _decode_cloud(sensor_id: int, ts: int, payload: bytes) -> CloudMessage:
    if len(payload) < 4:
        raise MalformedPayloadError("cloud payload shorter than point count")
    (n,) = struct.unpack_from("<I", payload)
    expect = 4 + n * _cloud_point_dtype.itemsize
    if len(payload) != expect:
        raise MalformedPayloadError(
            f"cloud payload size {len(payload)} != expected {expect}"
        )
    rec = np.frombuffer(payload, dtype=_cloud_point_dtype, count=n, offset=4)
    positions = rec["xyz"].astype(np.float64)
    log_p = dequantize_probs(rec["q"]) if n else np.empty((0, NUM_CLASSES))
    return CloudMessage(SemanticCloud(sensor_id, ts, positions, log_p))


def _encode_pose_like(persons, encode_joint) -> bytes:
    if len(persons) > 255:
        raise ValueError("at most 255 persons per message")
    parts = [struct.pack("<B", len(persons))]
    for person_id, joints in persons:
        mask = 0
        for j in range(NUM_JOINTS):
            if joints[j] is not None:
                mask |= 1 << j
        parts.append(struct.pack("<II", person_id, mask))
        for j in range(NUM_JOINTS):
            if joints[j] is not None:
                parts.append(encode_joint(joints[j]))
    return b"".join(parts)


_KP = struct.Struct("<5fB")
_FBJ = struct.Struct("<3fB")


def _encode_pose(msg: PoseMessage) -> bytes:
    ps = msg.pose_set

    def enc(kp: Keypoint2p5D) -> bytes:
        d = np.float32(kp.depth) if kp.depth is not None else np.float32(np.nan)
        s = np.float32(kp.depth_sigma) if kp.depth_sigma is not None else np.float32(np.nan)
        return _KP.pack(
            kp.u, kp.v, kp.confidence, d, s,
            1 if kp.occluded_by_feedback else 0,
        )

    return _encode_pose_like(
        [(p.local_person_id, p.joints) for p in ps.persons], enc
    )


def _decode_pose_like(payload: bytes, decode_joint, joint_size: int):
    if len(payload) < 1:
        raise MalformedPayloadError("empty pose payload")
    count = payload[0]
    off = 1
    persons = []
    for _ in range(count):
        if off + 8 > len(payload):
            raise MalformedPayloadError("truncated person header")
        person_id, mask = struct.unpack_from("<II", payload, off)
        off += 8
        if mask >> NUM_JOINTS:
            raise MalformedPayloadError("joint mask has bits beyond joint count")
        joints = [None] * NUM_JOINTS
        for j in range(NUM_JOINTS):
            if mask & (1 << j):
                if off + joint_size > len(payload):
                    raise MalformedPayloadError("truncated joint record")
                joints[j] = decode_joint(j, payload, off)
                off += joint_size
        persons.append((person_id, joints))
    if off != len(payload):
        raise MalformedPayloadError("trailing bytes after last person")
    return persons


def _decode_pose(sensor_id: int, ts: int, payload: bytes) -> PoseMessage:
    def dec(j: int, buf: bytes, off: int) -> Keypoint2p5D:
        u, v, conf, d, s, flags = _KP.unpack_from(buf, off)
        if flags not in (0, 1):
            raise MalformedPayloadError("keypoint flags must be 0 or 1")
        has_depth = not np.isnan(d)
        return Keypoint2p5D(
            joint_idx=j,
            u=u,
            v=v,
            confidence=conf,
            depth=float(d) if has_depth else None,
            depth_sigma=float(s) if has_depth else None,
            occluded_by_feedback=bool(flags),
        )

    try:
        persons = _decode_pose_like(payload, dec, _KP.size)
    except ValueError as e:
        raise MalformedPayloadError(f"invalid keypoint: {e}") from None
    return PoseMessage(
        PoseSet2p5D(
            sensor_id,
            ts,
            [PersonPose(pid, joints) for pid, joints in persons],
        )
    )


def _encode_feedback(msg: FeedbackMessage) -> bytes:
    def enc(fj: FeedbackJoint) -> bytes:
        return _FBJ.pack(fj.u, fj.v, fj.confidence, 1 if fj.occluded else 0)

    return _encode_pose_like([(p.person_id, p.joints) for p in msg.poses], enc)


def _decode_feedback(sensor_id: int, ts: int, payload: bytes) -> FeedbackMessage:
    def dec(j: int, buf: bytes, off: int) -> FeedbackJoint:
        u, v, conf, occ = _FBJ.unpack_from(buf, off)
        if occ not in (0, 1):
            raise MalformedPayloadError("occluded flag must be 0 or 1")
        return FeedbackJoint(u, v, conf, bool(occ))

    try:
        persons = _decode_pose_like(payload, dec, _FBJ.size)
    except ValueError as e:
        raise MalformedPayloadError(f"invalid feedback joint: {e}") from None
    return FeedbackMessage(
        sensor_id, ts, [FeedbackPose(sensor_id, pid, ts, joints) for pid, joints in persons]
    )


_voxel_dtype = np.dtype(
    [("ixyz", "<i4", (3,)), ("occ", "<f4"), ("cls", "u1"), ("prob", "<f4")]
)
_SKJ = struct.Struct("<4fB")


def _encode_snapshot(msg: SnapshotMessage) -> bytes:
    n = len(msg.voxel_indices)
    rec = np.empty(n, dtype=_voxel_dtype)
    rec["ixyz"] = np.asarray(msg.voxel_indices, dtype=np.int32).reshape(n, 3)
    rec["occ"] = np.asarray(msg.voxel_occupancy, dtype=np.float32)
    rec["cls"] = np.asarray(msg.voxel_classes, dtype=np.uint8)
    rec["prob"] = np.asarray(msg.voxel_probs, dtype=np.float32)
    parts = [struct.pack("<I", n), rec.tobytes()]
    if len(msg.skeletons) > 255:
        raise ValueError("at most 255 skeletons per snapshot")
    parts.append(struct.pack("<B", len(msg.skeletons)))
    for skel in msg.skeletons:
        mask = 0
        for j in range(NUM_JOINTS):
            if skel.joints[j] is not None:
                mask |= 1 << j
        parts.append(struct.pack("<II", skel.person_id, mask))
        for j in range(NUM_JOINTS):
            jt = skel.joints[j]
            if jt is not None:
                parts.append(
                    _SKJ.pack(*jt.position.astype(np.float32), jt.confidence, jt.n_views)
                )
    return b"".join(parts)


def _decode_snapshot(sensor_id: int, ts: int, payload: bytes) -> SnapshotMessage:
    if len(payload) < 4:
        raise MalformedPayloadError("snapshot payload shorter than voxel count")
    (n,) = struct.unpack_from("<I", payload)
    off = 4 + n * _voxel_dtype.itemsize
    if len(payload) < off + 1:
        raise MalformedPayloadError("truncated snapshot voxel block")
    rec = np.frombuffer(payload, dtype=_voxel_dtype, count=n, offset=4)
    skel_count = payload[off]
    off += 1
    skeletons = []
    for _ in range(skel_count):
        if off + 8 > len(payload):
            raise MalformedPayloadError("truncated skeleton header")
        person_id, mask = struct.unpack_from("<II", payload, off)
        off += 8
        if mask >> NUM_JOINTS:
            raise MalformedPayloadError("joint mask has bits beyond joint count")
        joints = [None] * NUM_JOINTS
        for j in range(NUM_JOINTS):
            if mask & (1 << j):
                if off + _SKJ.size > len(payload):
                    raise MalformedPayloadError("truncated skeleton joint")
                x, y, z, conf, n_views = _SKJ.unpack_from(payload, off)
                off += _SKJ.size
                joints[j] = Joint3D(np.array([x, y, z], dtype=np.float64), conf, n_views)
        skeletons.append(Skeleton3D(person_id, ts, joints))
    if off != len(payload):
        raise MalformedPayloadError("trailing bytes after last skeleton")
    return SnapshotMessage(
        ts,
        rec["ixyz"].astype(np.int32).reshape(n, 3),
        rec["occ"].copy(),
        rec["cls"].copy(),
        rec["prob"].copy(),
        skeletons,
    )


def encode(msg) -> bytes:
    """Serialize a message into one complete frame."""
    if isinstance(msg, Hello):
        mt, sid, ts, payload = MSG_HELLO, msg.sensor_id, msg.timestamp_us, _encode_hello(msg)
    elif isinstance(msg, CloudMessage):
        c = msg.cloud
        mt, sid, ts, payload = MSG_CLOUD, c.sensor_id, c.timestamp_us, _encode_cloud(msg)
    elif isinstance(msg, PoseMessage):
        p = msg.pose_set
        mt, sid, ts, payload = MSG_POSE, p.sensor_id, p.timestamp_us, _encode_pose(msg)
    elif isinstance(msg, FeedbackMessage):
        mt, sid, ts, payload = MSG_FEEDBACK, msg.sensor_id, msg.timestamp_us, _encode_feedback(msg)
    elif isinstance(msg, SnapshotMessage):
        mt, sid, ts, payload = MSG_SNAPSHOT, 0, msg.timestamp_us, _encode_snapshot(msg)
    else:
        raise TypeError(f"cannot encode {type(msg).__name__}")
    if len(payload) > MAX_PAYLOAD:
        raise ValueError("payload exceeds 64 MiB limit")
    return _HEADER.pack(MAGIC, mt, sid, ts, len(payload)) + payload


_DECODERS = {
    MSG_HELLO: _decode_hello,
    MSG_CLOUD: _decode_cloud,
    MSG_POSE: _decode_pose,
    MSG_FEEDBACK: _decode_feedback,
    MSG_SNAPSHOT: _decode_snapshot,
}


def _parse_header(data: bytes):
    if len(data) < _HEADER.size:
        raise TruncatedFrameError(f"need {_HEADER.size} header bytes, have {len(data)}")
    magic, mt, sid, ts, plen = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if mt not in _DECODERS:
        raise UnknownMessageTypeError(f"unknown message type {mt}")
    if plen > MAX_PAYLOAD:
        raise LengthMismatchError(f"payload length {plen} exceeds 64 MiB limit")
    return mt, sid, ts, plen


def decode(data: bytes):
    """Decode exactly one frame; trailing bytes are a length mismatch."""
    mt, sid, ts, plen = _parse_header(data)
    if len(data) < _HEADER.size + plen:
        raise TruncatedFrameError("frame shorter than declared payload length")
    if len(data) != _HEADER.size + plen:
        raise LengthMismatchError("frame longer than declared payload length")
    return _DECODERS[mt](sid, ts, data[_HEADER.size :])


class StreamDecoder:
    """Reassembles a byte stream into messages, chunk boundaries ignored."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, chunk: bytes) -> list:
        self._buf.extend(chunk)
        out = []
        while True:
            if len(self._buf) < _HEADER.size:
                break
            mt, sid, ts, plen = _parse_header(bytes(self._buf[: _HEADER.size]))
            total = _HEADER.size + plen
            if len(self._buf) < total:
                break
            payload = bytes(self._buf[_HEADER.size : total])
            del self._buf[:total]
            out.append(_DECODERS[mt](sid, ts, payload))
        return out

    @property
    def pending_bytes(self) -> int:
        return len(self._buf)
