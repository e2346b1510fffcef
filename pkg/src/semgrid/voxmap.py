"""Allocentric sparse voxel-hashed semantic occupancy map.

Cells are addressed by packed integer voxel keys and stored columnar
(log-odds, class log-probabilities, bookkeeping) so whole clouds can be
integrated with array arithmetic.  Occupancy follows the additive
log-odds model; semantics fuse multiplicatively per Bayes' rule.
Single-writer / multi-reader: integrate_cloud requires exclusive access.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ply, semantics
from .geometry import (
    CameraCalib,
    VoxelIndex,
    bresenham3d,
    bresenham3d_keys,
    pack_voxel_keys,
    unpack_voxel_keys,
    voxel_index_of,
    voxel_indices_of,
)
from .semantics import NUM_CLASSES, PERSON_CLASS, ClassDistribution

MAP_RESOLUTION = 0.10
L_OCC = 0.85
L_FREE = -0.4
L_MIN = -2.0
L_MAX = 3.5
L_PRIOR_OCC = 1.0
OCCLUSION_K = 2

SOURCE_PRIOR = 0
SOURCE_OBSERVED = 1


@dataclass
class VoxelCell:
    occupancy_log_odds: float
    dist: ClassDistribution
    last_update_us: int
    source: str  # "prior" | "observed"


@dataclass
class IntegrationStats:
    occupied_updates: int = 0
    freed: int = 0
    semantic_fused: int = 0


class VoxelMap:
    def __init__(self, resolution: float = MAP_RESOLUTION):
        if resolution <= 0:
            raise ValueError("resolution must be positive")
        self._resolution = float(resolution)
        self._index: dict[int, int] = {}
        cap = 1024
        self._keys = np.zeros(cap, dtype=np.int64)
        self._log_odds = np.zeros(cap)
        self._log_p = np.zeros((cap, NUM_CLASSES))
        self._last_update = np.zeros(cap, dtype=np.int64)
        self._source = np.zeros(cap, dtype=np.uint8)
        self._n = 0
        # sorted keys of occupied cells, rebuilt lazily after writes
        self._occ_keys_sorted: np.ndarray | None = None

    @property
    def resolution(self) -> float:
        return self._resolution

    def __len__(self) -> int:
        return self._n

    def _grow(self, need: int) -> None:
        cap = len(self._keys)
        if self._n + need <= cap:
            return
        new_cap = max(cap * 2, self._n + need)
        self._keys = np.resize(self._keys, new_cap)
        self._log_odds = np.resize(self._log_odds, new_cap)
        self._log_p = np.resize(self._log_p, (new_cap, NUM_CLASSES))
        self._last_update = np.resize(self._last_update, new_cap)
        self._source = np.resize(self._source, new_cap)

    def _rows_for(self, keys: np.ndarray, create: bool) -> np.ndarray:
        """Rows for packed keys; missing cells are allocated (uniform,
        log-odds 0) when create is set, otherwise marked -1."""
        get = self._index.get
        rows = np.fromiter((get(int(k), -1) for k in keys), dtype=np.int64, count=len(keys))
        if create:
            missing = np.nonzero(rows < 0)[0]
            if len(missing):
                self._grow(len(missing))
                uni = -np.log(NUM_CLASSES)
                for i in missing:
                    row = self._n
                    self._n += 1
                    k = int(keys[i])
                    self._index[k] = row
                    self._keys[row] = k
                    self._log_odds[row] = 0.0
                    self._log_p[row] = uni
                    self._last_update[row] = 0
                    self._source[row] = SOURCE_OBSERVED
                    rows[i] = row
        return rows

    def cell(self, idx: VoxelIndex) -> VoxelCell | None:
        key = int(pack_voxel_keys(np.array([idx.as_tuple()]))[0])
        row = self._index.get(key)
        if row is None:
            return None
        return VoxelCell(
            occupancy_log_odds=float(self._log_odds[row]),
            dist=ClassDistribution(self._log_p[row].copy(), _trusted=True),
            last_update_us=int(self._last_update[row]),
            source="prior" if self._source[row] == SOURCE_PRIOR else "observed",
        )

    def load_prior(self, prior_points: np.ndarray) -> int:
        """Seed an empty map: one occupied, uniformly-classed cell per
        distinct voxel touched by the prior points."""
        if self._n != 0:
            raise ValueError("prior can only be loaded into an empty map")
        pts = np.asarray(prior_points, dtype=np.float64).reshape(-1, 3)
        if len(pts) == 0:
            return 0
        keys = np.unique(pack_voxel_keys(voxel_indices_of(pts, self._resolution)))
        rows = self._rows_for(keys, create=True)
        self._log_odds[rows] = L_PRIOR_OCC
        self._source[rows] = SOURCE_PRIOR
        self._occ_keys_sorted = None
        return len(keys)

    def load_prior_ply(self, path) -> int:
        return self.load_prior(ply.read_xyz(path))

    def integrate_cloud(self, cloud, calib: CameraCalib) -> IntegrationStats:
        """Ray-traced occupancy update plus per-voxel semantic fusion.

        Person-labeled points are skipped entirely.  Every cell crossed by
        a ray gets one free-space update per call; measured endpoint
        voxels get one occupied update and fuse the distributions of all
        their points.  A cell whose log-odds crosses zero downward has its
        class distribution reset to uniform.
        """
        stats = IntegrationStats()
        if len(cloud) == 0:
            return stats
        pts_world = cloud.positions @ calib.rotation.T + calib.translation
        keep = cloud.argmax_classes() != PERSON_CLASS
        if not keep.any():
            return stats
        pts = pts_world[keep]
        log_p_pts = cloud.log_probs[keep]
        end_idx = voxel_indices_of(pts, self._resolution)
        end_keys = pack_voxel_keys(end_idx)
        uniq_end, inv = np.unique(end_keys, return_inverse=True)
        origin_idx = np.array(voxel_index_of(calib.center, self._resolution).as_tuple())
        ray_keys, _ = bresenham3d_keys(origin_idx, unpack_voxel_keys(uniq_end))
        free_keys = np.setdiff1d(ray_keys, uniq_end, assume_unique=False)

        ts = int(cloud.timestamp_us)
        if len(free_keys):
            rows = self._rows_for(free_keys, create=True)
            before = self._log_odds[rows]
            after = np.clip(before + L_FREE, L_MIN, L_MAX)
            crossed = (before > 0) & (after <= 0)
            self._log_odds[rows] = after
            if crossed.any():
                self._log_p[rows[crossed]] = -np.log(NUM_CLASSES)
                stats.freed = int(crossed.sum())
            self._last_update[rows] = ts
            self._source[rows] = SOURCE_OBSERVED

        rows = self._rows_for(uniq_end, create=True)
        self._log_odds[rows] = np.clip(self._log_odds[rows] + L_OCC, L_MIN, L_MAX)
        sums = np.zeros((len(uniq_end), NUM_CLASSES))
        np.add.at(sums, inv, log_p_pts)
        self._log_p[rows] = semantics.fuse_rows(self._log_p[rows], sums)
        self._last_update[rows] = ts
        self._source[rows] = SOURCE_OBSERVED
        stats.occupied_updates = len(uniq_end)
        stats.semantic_fused = int(keep.sum())
        self._occ_keys_sorted = None
        return stats

    def _occupied_lookup(self, keys: np.ndarray) -> np.ndarray:
        if self._occ_keys_sorted is None:
            occ = self._log_odds[: self._n] > 0
            self._occ_keys_sorted = np.sort(self._keys[: self._n][occ])
        sorted_keys = self._occ_keys_sorted
        pos = np.searchsorted(sorted_keys, keys)
        pos = np.minimum(pos, max(len(sorted_keys) - 1, 0))
        if len(sorted_keys) == 0:
            return np.zeros(len(keys), dtype=bool)
        return sorted_keys[pos] == keys

    def is_occluded(self, from_world, to_world, k: int = OCCLUSION_K) -> bool:
        """True when the ray strictly between the endpoint voxels crosses
        at least k occupied cells.  Endpoint voxels never count."""
        a = voxel_index_of(from_world, self._resolution)
        b = voxel_index_of(to_world, self._resolution)
        cells = bresenham3d(a, b)[1:-1]
        if len(cells) < k:
            return False
        hits = 0
        for c in cells:
            row = self._index.get(int(pack_voxel_keys(np.array([c.as_tuple()]))[0]), -1)
            if row >= 0 and self._log_odds[row] > 0:
                hits += 1
                if hits >= k:
                    return True
        return False

    def is_occluded_many(self, from_world, targets_world: np.ndarray, k: int = OCCLUSION_K) -> np.ndarray:
        """Vectorized is_occluded for many targets from one origin."""
        targets = np.asarray(targets_world, dtype=np.float64).reshape(-1, 3)
        n = len(targets)
        if n == 0:
            return np.zeros(0, dtype=bool)
        origin_idx = np.array(voxel_index_of(from_world, self._resolution).as_tuple())
        target_idx = voxel_indices_of(targets, self._resolution)
        all_keys, ray_id = bresenham3d_keys(origin_idx, target_idx)
        lengths = np.bincount(ray_id, minlength=n)
        offsets = np.concatenate(([0], np.cumsum(lengths)[:-1]))
        pos = np.arange(len(ray_id)) - offsets[ray_id]
        interior = (pos > 0) & (pos < lengths[ray_id] - 1)
        if not interior.any():
            return np.zeros(n, dtype=bool)
        keys = all_keys[interior]
        rid = ray_id[interior]
        uniq, inv = np.unique(keys, return_inverse=True)
        occ = self._occupied_lookup(uniq)
        counts = np.bincount(rid, weights=occ[inv].astype(np.float64), minlength=n)
        return counts >= k

    def snapshot(self) -> list[tuple[VoxelIndex, float, int, float]]:
        """Occupied cells in lexicographic index order:
        (index, occupancy log-odds, argmax class, max probability)."""
        if self._n == 0:
            return []
        occ = np.nonzero(self._log_odds[: self._n] > 0)[0]
        if len(occ) == 0:
            return []
        idx = unpack_voxel_keys(self._keys[occ])
        order = np.lexsort((idx[:, 2], idx[:, 1], idx[:, 0]))
        occ = occ[order]
        idx = idx[order]
        classes = np.argmax(self._log_p[occ], axis=1)
        probs = np.exp(self._log_p[occ, classes])
        return [
            (VoxelIndex(*idx[i]), float(self._log_odds[occ[i]]), int(classes[i]), float(probs[i]))
            for i in range(len(occ))
        ]

    def occupied_arrays(self):
        """(indices (N,3), log_odds, classes, probs, source) of occupied
        cells in lexicographic order; columnar variant of snapshot."""
        if self._n == 0:
            z = np.empty(0)
            return np.empty((0, 3), dtype=np.int64), z, z.astype(np.int64), z, z.astype(np.uint8)
        occ = np.nonzero(self._log_odds[: self._n] > 0)[0]
        idx = unpack_voxel_keys(self._keys[occ])
        order = np.lexsort((idx[:, 2], idx[:, 1], idx[:, 0]))
        occ = occ[order]
        idx = idx[order]
        classes = np.argmax(self._log_p[occ], axis=1)
        probs = np.exp(self._log_p[occ, classes])
        return idx, self._log_odds[occ], classes, probs, self._source[occ]

    def export_ply(self, path) -> None:
        """Binary PLY of occupied voxel centers with class and occupancy
        probability."""
        idx, log_odds, classes, probs, _ = self.occupied_arrays()
        centers = (idx + 0.5) * self._resolution
        occ_prob = 1.0 / (1.0 + np.exp(-log_odds))
        ply.write_ply(
            path,
            {
                "x": centers[:, 0].astype(np.float32),
                "y": centers[:, 1].astype(np.float32),
                "z": centers[:, 2].astype(np.float32),
                "class": classes.astype(np.uint8),
                "occupancy": occ_prob.astype(np.float32),
                "prob": probs.astype(np.float32),
            },
        )
