import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from semgrid.cloud import (
    CLOUD_VOXEL_RES,
    DepthImage,
    Detection,
    DetectionSet,
    SegmentationMask,
    SemanticCloud,
    depth_to_points,
    export_cloud_ply,
    fuse_semantics,
    nms_detections,
    remove_ground_and_cluster,
    statistical_outlier_filter,
    voxel_downsample,
)
from semgrid.geometry import pack_voxel_keys, voxel_indices_of
from semgrid.ply import read_ply
from semgrid.semantics import NUM_CLASSES, PERSON_CLASS, uniform_rows
from tests.conftest import make_ring_calibs


def flat_depth(calib, value: float) -> DepthImage:
    return DepthImage(calib.width, calib.height,
                      np.full((calib.height, calib.width), value))


class TestDepthToPoints:
    def test_principal_pixel_on_axis(self):
        calib = make_ring_calibs(1, width=8, height_px=6, f_px=5.0)[0]
        depth = np.zeros((6, 8))
        depth[3, 4] = 2.0  # principal point (cx=4, cy=3)
        pts = depth_to_points(DepthImage(8, 6, depth), calib)
        assert pts.shape == (1, 3)
        assert np.abs(pts[0] - [0.0, 0.0, 2.0]).max() <= 1e-12

    def test_pinhole_hand_computed(self):
        calib = make_ring_calibs(1, width=8, height_px=6, f_px=5.0)[0]
        depth = np.zeros((6, 8))
        depth[1, 6] = 2.0  # u=6, v=1
        pts = depth_to_points(DepthImage(8, 6, depth), calib)
        # x = (u - cx) / fx * z = (6-4)/5*2; y = (v - cy) / fy * z = (1-3)/5*2
        assert np.abs(pts[0] - [0.8, -0.8, 2.0]).max() <= 1e-12

    def test_invalid_pixels_skipped(self):
        calib = make_ring_calibs(1, width=8, height_px=6, f_px=5.0)[0]
        pts = depth_to_points(flat_depth(calib, 0.0), calib)
        assert len(pts) == 0

    def test_size_mismatch_rejected(self):
        calib = make_ring_calibs(1)[0]
        with pytest.raises(ValueError):
            depth_to_points(DepthImage(8, 6, np.ones((6, 8))), calib)

    def test_depth_image_rejects_nan(self):
        with pytest.raises(ValueError):
            DepthImage(2, 2, np.array([[1.0, np.nan], [1.0, 1.0]]))


class TestVoxelDownsample:
    @given(st.lists(st.tuples(st.floats(-3, 3), st.floats(-3, 3),
                              st.floats(-3, 3)), min_size=1, max_size=60))
    def test_one_point_per_occupied_cell(self, raw):
        pts = np.array(raw)
        out = voxel_downsample(pts)
        in_keys = np.unique(pack_voxel_keys(voxel_indices_of(pts, CLOUD_VOXEL_RES)))
        out_keys = pack_voxel_keys(voxel_indices_of(out, CLOUD_VOXEL_RES))
        assert len(out) == len(in_keys)
        assert np.array_equal(np.sort(out_keys), in_keys)

    def test_centroid_value(self):
        pts = np.array([[0.01, 0.01, 0.01], [0.03, 0.03, 0.03]])
        out = voxel_downsample(pts)
        assert len(out) == 1
        assert np.abs(out[0] - [0.02, 0.02, 0.02]).max() <= 1e-12

    def test_empty(self):
        assert len(voxel_downsample(np.empty((0, 3)))) == 0


class TestOutlierFilter:
    def test_removes_isolated_point(self):
        rng = np.random.default_rng(0)
        dense = rng.normal(scale=0.05, size=(200, 3))
        outlier = np.array([[5.0, 5.0, 5.0]])
        kept = statistical_outlier_filter(np.vstack([dense, outlier]), k=10)
        assert len(kept) < 201
        assert not np.any(np.all(np.isclose(kept, outlier), axis=1))

    def test_small_input_passthrough(self):
        pts = np.array([[0, 0, 0], [1, 1, 1.0]])
        assert np.array_equal(statistical_outlier_filter(pts, k=10), pts)


class TestClustering:
    def test_two_blobs(self):
        rng = np.random.default_rng(1)
        a = rng.normal(loc=(0, 0, 1.0), scale=0.05, size=(30, 3))
        b = rng.normal(loc=(3, 0, 1.0), scale=0.05, size=(30, 3))
        floor = np.column_stack([rng.uniform(-1, 4, 40),
                                 rng.uniform(-1, 1, 40),
                                 np.full(40, 0.02)])
        pts = np.vstack([a, b, floor])
        clusters = remove_ground_and_cluster(pts)
        assert len(clusters) == 2
        for members in clusters:
            assert np.all(pts[members][:, 2] > 0.1)
        assert sum(len(c) for c in clusters) == 60

    def test_small_clusters_dropped(self):
        pts = np.array([[0, 0, 1.0], [0.01, 0, 1.0]])
        assert remove_ground_and_cluster(pts) == []


class TestFuseSemantics:
    def _setup(self):
        calib = make_ring_calibs(1, width=40, height_px=30, f_px=30.0)[0]
        scores = np.zeros((30, 40, NUM_CLASSES))
        scores[..., 2] = 5.0  # whole mask votes class 2
        return calib, SegmentationMask(scores)

    def test_mask_only(self):
        calib, mask = self._setup()
        pts = np.array([[0.0, 0.0, 2.0], [0.1, 0.0, 2.0]])
        cloud = fuse_semantics(pts, calib, mask, DetectionSet(), [])
        assert list(cloud.argmax_classes()) == [2, 2]

    def test_detection_overrides_in_cluster(self):
        calib, mask = self._setup()
        pts = np.array([[0.0, 0.0, 2.0], [0.1, 0.0, 2.0]])
        det = Detection(PERSON_CLASS, 0.95,
                        (calib.cx - 5, calib.cy - 5, calib.cx + 5, calib.cy + 5))
        # only point 0 projects into the box and only point 0 is clustered
        cloud = fuse_semantics(pts, calib, mask, DetectionSet([det]),
                               [np.array([0])])
        assert cloud.argmax_classes()[0] == PERSON_CLASS
        assert cloud.argmax_classes()[1] == 2

    def test_unclustered_points_ignore_detections(self):
        calib, mask = self._setup()
        pts = np.array([[0.0, 0.0, 2.0]])
        det = Detection(PERSON_CLASS, 0.95, (0, 0, calib.width, calib.height))
        cloud = fuse_semantics(pts, calib, mask, DetectionSet([det]), [])
        assert cloud.argmax_classes()[0] == 2

    def test_point_behind_camera_stays_uniform(self):
        calib, mask = self._setup()
        cloud = fuse_semantics(np.array([[0.0, 0.0, -1.0]]), calib, mask,
                               DetectionSet(), [])
        assert np.allclose(np.exp(cloud.log_probs[0]), 1.0 / NUM_CLASSES)

    def test_nms_drops_duplicate(self):
        calib, _ = self._setup()
        box = (10.0, 10.0, 30.0, 25.0)
        strong = Detection(3, 0.9, box)
        weak = Detection(3, 0.6, (11.0, 11.0, 31.0, 26.0))
        other = Detection(4, 0.6, box)  # different class survives
        kept = nms_detections(np.empty((0, 3)), np.empty((0, 2)), calib,
                              DetectionSet([strong, weak, other]))
        assert strong in kept and other in kept and weak not in kept


class TestCloudContainer:
    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            SemanticCloud(0, 0, np.zeros((2, 3)), uniform_rows(3))

    def test_export_ply_roundtrip(self, tmp_path):
        cloud = SemanticCloud(0, 0, np.array([[1.0, 2.0, 3.0]]),
                              uniform_rows(1))
        export_cloud_ply(tmp_path / "c.ply", cloud)
        fields = read_ply(tmp_path / "c.ply")
        assert fields["x"][0] == np.float32(1.0)
        assert fields["class"][0] == 0
        assert abs(fields["prob"][0] - 1.0 / NUM_CLASSES) <= 1e-6
