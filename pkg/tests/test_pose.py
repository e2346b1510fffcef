import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from semgrid.geometry import project
from semgrid.pose import (
    ALPHA_POS,
    ALPHA_VEL,
    BONES,
    CONF_MIN,
    NUM_JOINTS,
    VEL_MAX,
    FeedbackPose,
    Joint3D,
    Keypoint2p5D,
    PersonPose,
    PoseSet2p5D,
    Skeleton3D,
    SkeletonTracker,
    associate,
    format_skeleton_log,
    make_feedback,
    predict,
    refine_skeleton,
    triangulate_group,
    triangulate_joint,
    update_delay,
)
from semgrid.voxmap import VoxelMap
from tests.conftest import make_ring_calibs


def observations_of(point, calibs, conf=0.9, noise=None, rng=None):
    obs = []
    for calib in calibs:
        uvd = project(calib, point)
        if uvd is None:
            continue
        u, v, _ = uvd
        if noise:
            u += rng.normal(scale=noise)
            v += rng.normal(scale=noise)
        obs.append((calib, u, v, conf))
    return obs


def skeleton_with(joint_positions: dict[int, np.ndarray], ts=0,
                  conf=0.9) -> Skeleton3D:
    joints = [None] * NUM_JOINTS
    for j, p in joint_positions.items():
        joints[j] = Joint3D(np.asarray(p, dtype=np.float64), conf, 2)
    return Skeleton3D(0, ts, joints)


class TestTriangulateJoint:
    @given(st.floats(-1.0, 1.0), st.floats(-1.0, 1.0), st.floats(0.3, 1.9))
    def test_noiseless_recovery(self, x, y, z):
        calibs = make_ring_calibs()
        p = np.array([x, y, z])
        result = triangulate_joint(observations_of(p, calibs))
        assert result is not None
        pos, residual = result
        assert np.linalg.norm(pos - p) <= 1e-6
        assert residual <= 1e-6

    def test_single_view_rejected(self):
        calibs = make_ring_calibs()
        p = np.array([0.2, 0.1, 1.0])
        assert triangulate_joint(observations_of(p, calibs[:1])) is None

    def test_near_parallel_rays_rejected(self):
        # two cameras almost at the same place see almost parallel rays
        a = make_ring_calibs(1, radius=4.0)[0]
        b = make_ring_calibs(1, radius=4.001)[0]
        p = np.array([0.0, 0.0, 1.0])
        obs = observations_of(p, [a, b])
        assert triangulate_joint(obs) is None

    def test_residual_gate(self):
        calibs = make_ring_calibs()
        p = np.array([0.0, 0.0, 1.0])
        obs = observations_of(p, calibs)
        # push one observation far off; the joint fit degrades past the gate
        calib, u, v, conf = obs[0]
        obs[0] = (calib, u + 400.0, v, conf)
        assert triangulate_joint(obs) is None

    def test_noisy_recovery_reasonable(self):
        rng = np.random.default_rng(0)
        calibs = make_ring_calibs()
        errs = []
        for _ in range(50):
            p = rng.uniform([-1, -1, 0.4], [1, 1, 1.8])
            result = triangulate_joint(
                observations_of(p, calibs, noise=2.0, rng=rng))
            if result is not None:
                errs.append(np.linalg.norm(result[0] - p))
        assert len(errs) >= 40
        assert np.median(errs) < 0.05


class TestAssociate:
    def _views(self, people, calibs, conf=0.9):
        views = []
        for calib in calibs:
            persons = []
            for pid, center in enumerate(people):
                joints = [None] * NUM_JOINTS
                uvd = project(calib, center)
                if uvd is not None:
                    joints[0] = Keypoint2p5D(0, uvd[0], uvd[1], conf)
                    joints[5] = Keypoint2p5D(
                        5, uvd[0] + 5, uvd[1] + 5, conf)
                persons.append(PersonPose(pid, joints))
            views.append(PoseSet2p5D(calib.sensor_id, 0, persons))
        return views

    def test_two_people_grouped_across_views(self):
        calibs = make_ring_calibs()
        people = [np.array([-0.8, 0.0, 1.2]), np.array([0.9, 0.3, 1.2])]
        views = self._views(people, calibs)
        groups = associate(views, {c.sensor_id: c for c in calibs})
        assert len(groups) == 2
        for group in groups:
            assert len(group) == 4
            assert len({pid for _, pid in group}) == 1  # same person everywhere

    def test_low_confidence_not_grouped(self):
        calibs = make_ring_calibs()
        views = self._views([np.array([0.0, 0.0, 1.2])], calibs,
                            conf=CONF_MIN / 2)
        groups = associate(views, {c.sensor_id: c for c in calibs})
        # without usable joints every detection stays its own group
        assert all(len(g) == 1 for g in groups)

    def test_empty(self):
        assert associate([], {}) == []


class TestTriangulateGroup:
    def test_two_view_joint(self):
        calibs = make_ring_calibs()
        p = np.array([0.1, -0.2, 1.4])
        persons = {}
        for calib in calibs[:2]:
            u, v, _ = project(calib, p)
            joints = [None] * NUM_JOINTS
            joints[7] = Keypoint2p5D(7, u, v, 0.8)
            persons[calib.sensor_id] = PoseSet2p5D(
                calib.sensor_id, 0, [PersonPose(0, joints)])
        skel = triangulate_group(persons, [(0, 0), (1, 0)],
                                 {c.sensor_id: c for c in calibs}, 123)
        assert skel is not None
        assert np.linalg.norm(skel.joints[7].position - p) <= 1e-6
        assert skel.joints[7].n_views == 2

    def test_single_depth_view_backprojects(self):
        calib = make_ring_calibs()[0]
        p = np.array([0.1, -0.2, 1.4])
        u, v, depth = project(calib, p)
        joints = [None] * NUM_JOINTS
        joints[0] = Keypoint2p5D(0, u, v, 0.8, depth=depth, depth_sigma=0.05)
        persons = {0: PoseSet2p5D(0, 0, [PersonPose(0, joints)])}
        skel = triangulate_group(persons, [(0, 0)], {0: calib}, 0)
        assert skel is not None
        assert np.linalg.norm(skel.joints[0].position - p) <= 1e-9
        assert skel.joints[0].n_views == 1

    def test_feedback_joints_excluded(self):
        calibs = make_ring_calibs()
        p = np.array([0.1, -0.2, 1.4])
        persons = {}
        for calib in calibs[:2]:
            u, v, _ = project(calib, p)
            joints = [None] * NUM_JOINTS
            joints[7] = Keypoint2p5D(7, u, v, 0.8, occluded_by_feedback=True)
            persons[calib.sensor_id] = PoseSet2p5D(
                calib.sensor_id, 0, [PersonPose(0, joints)])
        skel = triangulate_group(persons, [(0, 0), (1, 0)],
                                 {c.sensor_id: c for c in calibs}, 0)
        assert skel is None


class TestRefineAndPredict:
    def test_position_ema(self):
        prev = skeleton_with({0: [0.0, 0.0, 1.0]})
        prev.velocities[0] = np.zeros(3)
        raw = skeleton_with({0: [0.1, 0.0, 1.0]})
        out = refine_skeleton(raw, prev, dt_s=0.1)
        expected = ALPHA_POS * 0.1
        assert abs(out.joints[0].position[0] - expected) <= 1e-12

    def test_velocity_capped(self):
        prev = skeleton_with({0: [0.0, 0.0, 1.0]})
        prev.velocities[0] = None
        raw = skeleton_with({0: [5.0, 0.0, 1.0]})  # 17 m in one frame
        out = refine_skeleton(raw, prev, dt_s=0.1)
        assert np.linalg.norm(out.velocities[0]) <= VEL_MAX + 1e-9

    def test_velocity_ema(self):
        prev = skeleton_with({0: [0.0, 0.0, 1.0]})
        prev.velocities[0] = np.array([1.0, 0.0, 0.0])
        raw = skeleton_with({0: [0.0, 0.0, 1.0]})  # EMA pulls toward zero
        out = refine_skeleton(raw, prev, dt_s=0.1)
        expected = (1 - ALPHA_VEL) * 1.0
        assert abs(out.velocities[0][0] - expected) <= 1e-9

    def test_bone_outlier_demoted(self):
        j0, j1 = BONES[0]
        raw = skeleton_with({j0: [0.0, 0.0, 1.0], j1: [0.0, 0.0, 2.0]})
        ref = np.full(len(BONES), np.nan)
        ref[0] = 0.25  # observed length 1.0 deviates far beyond 50%
        out = refine_skeleton(raw, None, bone_ref=ref)
        assert out.joints[max(j0, j1)].confidence < 0.2

    def test_predict_advances_and_decays(self):
        skel = skeleton_with({0: [1.0, 2.0, 1.0]}, conf=0.8)
        skel.velocities[0] = np.array([0.5, 0.0, 0.0])
        out = predict(skel, 0.2)
        assert np.abs(out.joints[0].position - [1.1, 2.0, 1.0]).max() <= 1e-12
        assert out.joints[0].confidence < 0.8

    def test_predict_rejects_negative_dt(self):
        with pytest.raises(ValueError):
            predict(skeleton_with({0: [0, 0, 1.0]}), -0.1)


class TestFeedback:
    def test_projection_and_no_occlusion(self):
        calib = make_ring_calibs()[0]
        p = np.array([0.0, 0.0, 1.0])
        fps = make_feedback([skeleton_with({0: p})], calib, VoxelMap(), 0.0)
        assert len(fps) == 1
        fj = fps[0].joints[0]
        u, v, _ = project(calib, p)
        assert abs(fj.u - u) <= 1e-9 and abs(fj.v - v) <= 1e-9
        assert not fj.occluded

    def test_occlusion_flag_behind_wall(self):
        calib = make_ring_calibs()[0]  # at (4, 0, 2) looking at origin
        p = np.array([0.0, 0.0, 1.0])
        vmap = VoxelMap()
        # a slab of occupied voxels between camera and target
        ys, zs = np.meshgrid(np.arange(-0.5, 0.55, 0.1),
                             np.arange(0.5, 2.05, 0.1))
        wall = np.column_stack([np.full(ys.size, 2.05), ys.ravel(), zs.ravel()])
        wall = np.vstack([wall, wall + [0.1, 0, 0]])  # two voxels thick (k=2)
        vmap.load_prior(wall)
        fps = make_feedback([skeleton_with({0: p})], calib, vmap, 0.0)
        assert fps[0].joints[0].occluded

    def test_behind_camera_dropped(self):
        calib = make_ring_calibs()[0]  # looks towards origin from (4,0,2)
        p = calib.translation + calib.rotation[:, 2] * -2.0  # behind
        fps = make_feedback([skeleton_with({0: p})], calib, VoxelMap(), 0.0)
        assert fps == []

    def test_delay_prediction_applied(self):
        calib = make_ring_calibs()[0]
        skel = skeleton_with({0: [0.0, 0.0, 1.0]})
        skel.velocities[0] = np.array([0.0, 1.0, 0.0])
        still = make_feedback([skel], calib, VoxelMap(), 0.0)[0].joints[0]
        moved = make_feedback([skel], calib, VoxelMap(), 0.2)[0].joints[0]
        assert abs(moved.u - still.u) > 1.0  # the sideways motion shows up


class TestTrackerAndLog:
    def test_stable_ids(self):
        tracker = SkeletonTracker()
        a0 = skeleton_with({0: [0.0, 0.0, 1.0]})
        b0 = skeleton_with({0: [2.0, 0.0, 1.0]})
        first = tracker.update([a0, b0], 1 / 30)
        ids = {tuple(np.round(s.joints[0].position, 1))[0]: s.person_id
               for s in first}
        a1 = skeleton_with({0: [0.05, 0.0, 1.0]})
        b1 = skeleton_with({0: [2.05, 0.0, 1.0]})
        second = tracker.update([b1, a1], 1 / 30)
        for s in second:
            x = s.joints[0].position[0]
            assert s.person_id == ids[0.0 if x < 1 else 2.0]

    def test_new_id_outside_gate(self):
        tracker = SkeletonTracker()
        first = tracker.update([skeleton_with({0: [0.0, 0.0, 1.0]})], 1 / 30)
        second = tracker.update([skeleton_with({0: [5.0, 0.0, 1.0]})], 1 / 30)
        assert second[0].person_id != first[0].person_id

    def test_update_delay_ema(self):
        assert update_delay(None, 0.1) == 0.1
        d = update_delay(0.1, 0.2, alpha=0.5)
        assert abs(d - 0.15) <= 1e-12
        with pytest.raises(ValueError):
            update_delay(0.1, -0.1)

    def test_format_skeleton_log(self):
        skel = skeleton_with({3: [1.0, 2.0, 3.0]}, ts=42)
        skel.person_id = 7
        line = format_skeleton_log([skel])
        assert line == "42 7 3 1.000000 2.000000 3.000000 0.9000 2\n"
        assert format_skeleton_log([]) == ""

    def test_skeleton_slot_validation(self):
        with pytest.raises(ValueError):
            Skeleton3D(0, 0, [None] * (NUM_JOINTS - 1))
        with pytest.raises(ValueError):
            FeedbackPose(0, 0, 0, [None] * 3)
        with pytest.raises(ValueError):
            Keypoint2p5D(0, 1.0, 1.0, 1.5)
        with pytest.raises(ValueError):
            Keypoint2p5D(0, 1.0, 1.0, 0.5, depth=1.0)  # depth without sigma
