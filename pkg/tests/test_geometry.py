import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ptta.geometry import (EvalThresholds, PointCloud, RegistrationResult,
                           RigidTransform, apply_transform, compose, invert,
                           registration_recall, rot_x, rot_z, rotation_error,
                           sample_random_transform, translation_error,
                           voxel_downsample)


def random_transform(seed):
    return sample_random_transform(np.random.default_rng(seed))


def random_cloud(seed, n=20):
    return PointCloud(np.random.default_rng(seed).normal(size=(n, 3)))


class TestApplyTransform:
    def test_identity(self):
        cloud = random_cloud(0)
        out = apply_transform(cloud, RigidTransform.identity())
        assert np.array_equal(out.points, cloud.points)

    def test_axis_rotation(self):
        cloud = PointCloud([[1.0, 0.0, 0.0]])
        out = apply_transform(cloud, RigidTransform(rot_z(90.0), np.zeros(3)))
        assert np.allclose(out.points, [[0.0, 1.0, 0.0]], atol=1e-12)

    def test_roundtrip_through_inverse(self):
        cloud = random_cloud(1)
        T = random_transform(1)
        back = apply_transform(apply_transform(cloud, T), invert(T))
        assert np.abs(back.points - cloud.points).max() < 1e-12

    def test_features_copied(self):
        cloud = PointCloud(np.ones((3, 3)), features=np.arange(6.0).reshape(3, 2))
        out = apply_transform(cloud, random_transform(2))
        assert np.array_equal(out.features, cloud.features)


class TestComposeInvert:
    def test_identity_neutral(self):
        B = random_transform(3)
        out = compose(RigidTransform.identity(), B)
        assert np.allclose(out.R, B.R) and np.allclose(out.t, B.t)

    def test_inverse_composes_to_identity(self):
        T = random_transform(4)
        out = compose(T, invert(T))
        assert np.abs(out.R - np.eye(3)).max() < 1e-12
        assert np.abs(out.t).max() < 1e-12

    def test_matches_homogeneous_product(self):
        A, B = random_transform(5), random_transform(6)
        M = compose(A, B).as_matrix()
        assert np.abs(M - A.as_matrix() @ B.as_matrix()).max() < 1e-12

    def test_associative(self):
        A, B, C = (random_transform(s) for s in (7, 8, 9))
        left = compose(compose(A, B), C)
        right = compose(A, compose(B, C))
        assert np.abs(left.as_matrix() - right.as_matrix()).max() < 1e-12

    def test_invert_pure_translation(self):
        T = RigidTransform(np.eye(3), [1.0, -2.0, 3.0])
        assert np.allclose(invert(T).t, [-1.0, 2.0, -3.0])


class TestErrors:
    def test_zero_for_equal(self):
        T = random_transform(10)
        assert rotation_error(T, T) == 0.0
        assert translation_error(T, T) == 0.0

    def test_rot_z_30_degrees(self):
        pred = RigidTransform(rot_z(30.0), np.zeros(3))
        assert abs(rotation_error(pred, RigidTransform.identity()) - 30.0) < 1e-9

    def test_antipodal(self):
        pred = RigidTransform(rot_x(180.0), np.zeros(3))
        assert abs(rotation_error(pred, RigidTransform.identity()) - 180.0) < 1e-9

    def test_symmetry(self):
        A, B = random_transform(11), random_transform(12)
        assert abs(rotation_error(A, B) - rotation_error(B, A)) < 1e-9

    def test_translation_345(self):
        pred = RigidTransform(np.eye(3), [3.0, 4.0, 0.0])
        assert translation_error(pred, RigidTransform.identity()) == 5.0

    def test_translation_matches_norm(self):
        A, B = random_transform(13), random_transform(14)
        assert translation_error(A, B) == pytest.approx(
            float(np.sqrt(np.sum((A.t - B.t) ** 2))), abs=1e-15)


class TestRecall:
    def _result(self, re, te):
        r = RegistrationResult(predicted=RigidTransform.identity())
        r.re, r.te = re, te
        return r

    def test_all_pass(self):
        results = [self._result(0.0, 0.0)] * 5
        assert registration_recall(results, EvalThresholds()) == 1.0

    def test_threshold_is_inclusive_and_16_deg_fails(self):
        th = EvalThresholds(15.0, 0.30)
        assert registration_recall([self._result(16.0, 0.1)], th) == 0.0
        assert registration_recall([self._result(15.0, 0.30)], th) == 1.0

    def test_three_of_four(self):
        results = [self._result(1, 0.1), self._result(2, 0.2),
                   self._result(3, 0.1), self._result(30, 0.5)]
        assert registration_recall(results, EvalThresholds()) == 0.75

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            registration_recall([], EvalThresholds())

    def test_monotone_in_thresholds(self):
        rng = np.random.default_rng(15)
        results = [self._result(rng.uniform(0, 40), rng.uniform(0, 0.8))
                   for _ in range(50)]
        prev = 0.0
        for re_max, te_max in [(2, 0.05), (5, 0.1), (15, 0.30), (40, 0.8)]:
            rr = registration_recall(results, EvalThresholds(re_max, te_max))
            assert rr >= prev
            prev = rr


class TestSampleRandomTransform:
    def test_zero_ranges_give_identity(self):
        T = sample_random_transform(np.random.default_rng(0), 0.0, 0.0)
        assert np.allclose(T.R, np.eye(3)) and np.allclose(T.t, 0.0)

    def test_translation_range(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            T = sample_random_transform(rng)
            assert np.all(T.t >= 0.0) and np.all(T.t <= 0.60)

    def test_mean_translation(self):
        rng = np.random.default_rng(2)
        ts = np.array([sample_random_transform(rng).t for _ in range(10_000)])
        assert np.abs(ts.mean(axis=0) - 0.30).max() < 0.01

    def test_negative_range_rejected(self):
        with pytest.raises(ValueError):
            sample_random_transform(np.random.default_rng(0), -1.0, 0.0)


class TestVoxelDownsample:
    def test_single_voxel_collapses_to_centroid(self):
        pts = np.random.default_rng(3).uniform(0, 0.01, size=(10, 3))
        out = voxel_downsample(PointCloud(pts), 1.0)
        assert len(out) == 1
        assert np.allclose(out.points[0], pts.mean(axis=0))

    def test_tiny_voxel_keeps_cloud(self):
        pts = np.array([[0.0, 0, 0], [1.0, 0, 0], [0, 1.0, 0]])
        out = voxel_downsample(PointCloud(pts), 1e-6)
        assert len(out) == 3

    def test_grid_cases(self):
        grid = np.array([[i, j, k] for i in (0.25, 0.75)
                         for j in (0.25, 0.75) for k in (0.25, 0.75)])
        assert len(voxel_downsample(PointCloud(grid), 0.5)) == 8
        big = voxel_downsample(PointCloud(grid), 2.0)
        assert len(big) == 1
        assert np.allclose(big.points[0], [0.5, 0.5, 0.5])

    def test_centroids_inside_their_voxel(self):
        pts = np.random.default_rng(4).normal(size=(200, 3))
        voxel = 0.3
        out = voxel_downsample(PointCloud(pts), voxel)
        keys = np.floor(out.points / voxel)
        assert np.all(out.points >= keys * voxel - 1e-12)
        assert np.all(out.points <= (keys + 1) * voxel + 1e-12)

    def test_bad_voxel(self):
        with pytest.raises(ValueError):
            voxel_downsample(PointCloud(np.zeros((1, 3))), 0.0)


class TestInvariants:
    @given(st.integers(0, 10_000))
    @settings(max_examples=25, deadline=None)
    def test_transform_roundtrip_property(self, seed):
        cloud = random_cloud(seed, n=8)
        T = random_transform(seed)
        back = apply_transform(apply_transform(cloud, T), invert(T))
        assert np.abs(back.points - cloud.points).max() < 1e-12

    @given(st.integers(0, 10_000))
    @settings(max_examples=25, deadline=None)
    def test_rotation_error_bounds(self, seed):
        A, B = random_transform(seed), random_transform(seed + 1)
        re = rotation_error(A, B)
        assert 0.0 <= re <= 180.0

    def test_invalid_rotation_rejected(self):
        with pytest.raises(ValueError):
            RigidTransform(2 * np.eye(3), np.zeros(3))
        with pytest.raises(ValueError):
            RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
