import numpy as np
import pytest

from semgrid.cloud import SemanticCloud
from semgrid.geometry import CameraCalib, VoxelIndex, voxel_indices_of
from semgrid.ply import read_ply
from semgrid.semantics import (
    NUM_CLASSES,
    PERSON_CLASS,
    log_softmax_rows,
)
from semgrid.voxmap import (
    L_FREE,
    L_MAX,
    L_MIN,
    L_OCC,
    L_PRIOR_OCC,
    OCCLUSION_K,
    VoxelMap,
)

RES = 0.10


def forward_calib(center=(0.0, 0.0, 0.0)) -> CameraCalib:
    """Camera at `center` looking along +z world."""
    return CameraCalib(0, 64, 48, 40.0, 40.0, 32.0, 24.0, np.eye(3),
                       np.asarray(center, dtype=np.float64))


def cloud_of(points_world, class_idx, calib, ts=0) -> SemanticCloud:
    pts = np.asarray(points_world, dtype=np.float64).reshape(-1, 3)
    pts_cam = (pts - calib.translation) @ calib.rotation
    scores = np.zeros((len(pts), NUM_CLASSES))
    scores[:, class_idx] = 12.0
    return SemanticCloud(0, ts, pts_cam, log_softmax_rows(scores))


def full_state(vmap: VoxelMap):
    n = vmap._n
    return (vmap._keys[:n].copy(), vmap._log_odds[:n].copy(),
            vmap._log_p[:n].copy())


class TestBasics:
    def test_empty(self):
        vmap = VoxelMap()
        assert len(vmap) == 0
        assert vmap.cell(VoxelIndex(0, 0, 0)) is None
        assert vmap.snapshot() == []

    def test_prior_cells_occupied_and_uniform(self):
        vmap = VoxelMap()
        n = vmap.load_prior(np.array([[0.05, 0.05, 0.05], [0.35, 0.05, 0.05]]))
        assert n == 2 and len(vmap) == 2
        cell = vmap.cell(VoxelIndex(0, 0, 0))
        assert cell.occupancy_log_odds == L_PRIOR_OCC
        assert cell.source == "prior"
        assert np.allclose(cell.dist.probs(), 1.0 / NUM_CLASSES)

    def test_prior_requires_empty_map(self):
        vmap = VoxelMap()
        vmap.load_prior(np.array([[0.05, 0.05, 0.05]]))
        with pytest.raises(ValueError):
            vmap.load_prior(np.array([[1.0, 1.0, 1.0]]))

    def test_endpoint_occupancy_and_class(self):
        vmap = VoxelMap()
        calib = forward_calib()
        target = [0.05, 0.05, 2.05]
        vmap.integrate_cloud(cloud_of([target], 4, calib), calib)
        cell = vmap.cell(VoxelIndex(0, 0, 20))
        assert cell is not None
        assert abs(cell.occupancy_log_odds - L_OCC) <= 1e-12
        top = int(np.argmax(cell.dist.probs()))
        assert top == 4

    def test_crossed_cells_freed(self):
        vmap = VoxelMap()
        calib = forward_calib()
        vmap.integrate_cloud(cloud_of([[0.05, 0.05, 2.05]], 4, calib), calib)
        crossed = vmap.cell(VoxelIndex(0, 0, 10))
        assert crossed is not None
        assert abs(crossed.occupancy_log_odds - L_FREE) <= 1e-12

    def test_log_odds_clamped(self):
        vmap = VoxelMap()
        calib = forward_calib()
        cloud = cloud_of([[0.05, 0.05, 1.05]], 4, calib)
        for _ in range(20):
            vmap.integrate_cloud(cloud, calib)
        cell = vmap.cell(VoxelIndex(0, 0, 10))
        assert cell.occupancy_log_odds == L_MAX
        near = vmap.cell(VoxelIndex(0, 0, 5))
        assert near.occupancy_log_odds == L_MIN


class TestPersonPointsSkipped:
    def test_person_only_cloud_changes_nothing(self):
        vmap = VoxelMap()
        vmap.load_prior(np.array([[0.05, 0.05, 0.05], [1.05, 0.05, 0.05]]))
        calib = forward_calib()
        before = full_state(vmap)
        pts = [[0.05 + 0.1 * i, 0.05, 1.55] for i in range(10)]
        stats = vmap.integrate_cloud(cloud_of(pts, PERSON_CLASS, calib), calib)
        after = full_state(vmap)
        assert stats.occupied_updates == 0
        assert stats.freed == 0
        assert stats.semantic_fused == 0
        for b, a in zip(before, after):
            assert np.array_equal(b, a)

    def test_mixed_cloud_integrates_only_nonperson(self):
        vmap = VoxelMap()
        calib = forward_calib()
        person = cloud_of([[0.05, 0.05, 2.05]], PERSON_CLASS, calib)
        chair = cloud_of([[1.05, 0.05, 2.05]], 5, calib)
        mixed = SemanticCloud(
            0, 0,
            np.vstack([person.positions, chair.positions]),
            np.vstack([person.log_probs, chair.log_probs]),
        )
        stats = vmap.integrate_cloud(mixed, calib)
        assert stats.occupied_updates == 1
        assert vmap.cell(VoxelIndex(0, 0, 20)) is None
        assert vmap.cell(VoxelIndex(10, 0, 20)) is not None


class TestMovingObject:
    def test_vacated_voxels_freed_and_uniform(self):
        vmap = VoxelMap()
        calib = forward_calib()
        # chair-sized slab of surface points 2 m ahead
        xs = np.arange(-0.25, 0.26, 0.05)
        zs = np.arange(1.95, 2.16, 0.05)
        gx, gz = np.meshgrid(xs, zs)
        old = np.column_stack([gx.ravel(),
                               np.full(gx.size, 0.05), gz.ravel()])
        for t in range(3):
            vmap.integrate_cloud(cloud_of(old, 5, calib, ts=t), calib)
        old_idx = np.unique(voxel_indices_of(old, RES), axis=0)
        assert all(vmap.cell(VoxelIndex(*i)).occupancy_log_odds > 0
                   for i in old_idx)

        # object moves away; the sensor now sees the wall behind it, so
        # every frame casts rays straight through the vacated cells (the
        # wall points sit on the same rays, scaled out from the camera)
        scale = (old[:, 2:3] + 2.0) / old[:, 2:3]
        wall = old * scale
        n_clears = int(np.ceil((3 * L_OCC) / -L_FREE)) + 2
        for t in range(n_clears):
            vmap.integrate_cloud(cloud_of(wall, 6, calib, ts=10 + t), calib)

        freed = uniform = 0
        for i in old_idx:
            cell = vmap.cell(VoxelIndex(*i))
            if cell.occupancy_log_odds <= 0:
                freed += 1
                if np.allclose(cell.dist.probs(), 1.0 / NUM_CLASSES):
                    uniform += 1
        assert freed >= 0.9 * len(old_idx)
        assert uniform == freed


class TestOcclusion:
    def _map_with_blockers(self, blocker_x):
        vmap = VoxelMap()
        centers = [[x + 0.05, 0.05, 0.05] for x in blocker_x]
        if centers:
            vmap.load_prior(np.array(centers))
        return vmap

    def test_k2_boundary(self):
        origin = [0.05, 0.05, 0.05]
        target = [1.55, 0.05, 0.05]
        assert OCCLUSION_K == 2
        vmap = self._map_with_blockers([0.5])
        assert not vmap.is_occluded(origin, target)
        vmap = self._map_with_blockers([0.5, 0.9])
        assert vmap.is_occluded(origin, target)

    def test_endpoints_never_count(self):
        origin = [0.05, 0.05, 0.05]
        target = [1.55, 0.05, 0.05]
        vmap = self._map_with_blockers([0.0, 1.5])  # both endpoint voxels
        assert not vmap.is_occluded(origin, target)

    def test_k_parameter(self):
        origin = [0.05, 0.05, 0.05]
        target = [1.55, 0.05, 0.05]
        vmap = self._map_with_blockers([0.3])
        assert vmap.is_occluded(origin, target, k=1)
        assert not vmap.is_occluded(origin, target, k=2)

    def test_many_matches_scalar(self):
        rng = np.random.default_rng(3)
        vmap = VoxelMap()
        vmap.load_prior(rng.uniform(0, 2, size=(150, 3)))
        origin = [1.0, 1.0, 1.0]
        targets = rng.uniform(0, 2, size=(60, 3))
        batch = vmap.is_occluded_many(origin, targets)
        for i, t in enumerate(targets):
            assert batch[i] == vmap.is_occluded(origin, t)

    def test_free_cells_do_not_block(self):
        vmap = VoxelMap()
        calib = forward_calib()
        # integrating a far wall leaves a tube of freed cells; freed
        # cells must not count as blockers
        vmap.integrate_cloud(cloud_of([[0.05, 0.05, 3.05]], 6, calib), calib)
        assert not vmap.is_occluded([0.05, 0.05, 0.05], [0.05, 0.05, 2.55])


class TestSnapshotAndExport:
    def test_snapshot_sorted_and_occupied_only(self):
        vmap = VoxelMap()
        vmap.load_prior(np.array([[0.35, 0.05, 0.05], [0.05, 0.05, 0.05]]))
        calib = forward_calib((0.0, 0.0, -1.0))
        # free one of them
        for _ in range(10):
            vmap.integrate_cloud(
                cloud_of([[0.35, 0.05, 1.05]], 6, calib), calib)
        snap = vmap.snapshot()
        indices = [entry[0].as_tuple() for entry in snap]
        assert indices == sorted(indices)
        assert all(entry[1] > 0 for entry in snap)
        assert (0, 0, 0) in indices

    def test_export_ply_fields(self, tmp_path):
        vmap = VoxelMap()
        vmap.load_prior(np.array([[0.05, 0.15, 0.25]]))
        vmap.export_ply(tmp_path / "m.ply")
        fields = read_ply(tmp_path / "m.ply")
        assert set(fields) == {"x", "y", "z", "class", "occupancy", "prob"}
        assert np.allclose(
            [fields["x"][0], fields["y"][0], fields["z"][0]],
            [0.05, 0.15, 0.25])
        expected_occ = 1.0 / (1.0 + np.exp(-L_PRIOR_OCC))
        assert abs(fields["occupancy"][0] - expected_occ) <= 1e-6
        assert abs(fields["prob"][0] - 1.0 / NUM_CLASSES) <= 1e-6
