"""Geometry primitives: point clouds, rigid transforms, and registration metrics."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError

ORTHOGONALITY_TOL = 1e-9


@dataclass
class PointCloud:
    """N x 3 coordinate set (meters) with optional per-point features."""

    points: np.ndarray
    features: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3 or self.points.shape[0] < 1:
            raise ValueError(f"points must be N x 3 with N >= 1, got {self.points.shape}")
        if not np.all(np.isfinite(self.points)):
            raise NumericError("non-finite point coordinates")
        if self.features is not None:
            self.features = np.asarray(self.features, dtype=np.float64)
            if self.features.shape[0] != self.points.shape[0]:
                raise ValueError("feature count must equal point count")

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass
class RigidTransform:
    """Rotation matrix R (3x3) and translation t (3,), applied as R p + t."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if self.R.shape != (3, 3):
            raise ValueError("R must be 3x3")
        if not (np.all(np.isfinite(self.R)) and np.all(np.isfinite(self.t))):
            raise NumericError("non-finite transform entries")
        if np.abs(self.R.T @ self.R - np.eye(3)).max() > ORTHOGONALITY_TOL:
            raise ValueError("R is not orthogonal")
        if abs(np.linalg.det(self.R) - 1.0) > ORTHOGONALITY_TOL:
            raise ValueError("det(R) must be +1")

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    def as_matrix(self) -> np.ndarray:
        """4x4 homogeneous matrix."""
        M = np.eye(4)
        M[:3, :3] = self.R
        M[:3, 3] = self.t
        return M


@dataclass
class EvalThresholds:
    """Success thresholds: max rotation error (degrees), max translation error (meters)."""

    re_max: float = 15.0
    te_max: float = 0.30

    def __post_init__(self):
        if self.re_max <= 0 or self.te_max <= 0:
            raise ValueError("thresholds must be strictly positive")


@dataclass
class RegistrationResult:
    predicted: RigidTransform
    re: float | None = None
    te: float | None = None
    success: bool | None = None
    aux_loss_trace: list[float] = field(default_factory=list)
    fallback: bool = False


def apply_transform(cloud: PointCloud, T: RigidTransform) -> PointCloud:
    pts = cloud.points @ T.R.T + T.t
    feats = None if cloud.features is None else cloud.features.copy()
    return PointCloud(pts, feats)


def compose(A: RigidTransform, B: RigidTransform) -> RigidTransform:
    """Transform applying B first, then A."""
    return RigidTransform(A.R @ B.R, A.R @ B.t + A.t)


def invert(T: RigidTransform) -> RigidTransform:
    return RigidTransform(T.R.T, -T.R.T @ T.t)


def rot_x(deg: float) -> np.ndarray:
    a = np.deg2rad(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]], dtype=np.float64)


def rot_y(deg: float) -> np.ndarray:
    a = np.deg2rad(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]], dtype=np.float64)


def rot_z(deg: float) -> np.ndarray:
    a = np.deg2rad(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], dtype=np.float64)


def rotation_error(pred: RigidTransform, gt: RigidTransform) -> float:
    """Geodesic angle between rotations, in degrees.

    Computed as 2 asin(||R_pred - R_gt||_F / (2 sqrt(2))), which equals
    acos((tr(R_pred^T R_gt) - 1) / 2) exactly but stays accurate for
    near-identical rotations where acos loses half the significant digits.
    """
    arg = np.linalg.norm(pred.R - gt.R) / (2.0 * np.sqrt(2.0))
    return float(np.rad2deg(2.0 * np.arcsin(min(arg, 1.0))))


def translation_error(pred: RigidTransform, gt: RigidTransform) -> float:
    """Euclidean distance between translations, in meters."""
    return float(np.linalg.norm(pred.t - gt.t))


def registration_recall(results: list[RegistrationResult],
                        thresholds: EvalThresholds) -> float:
    if not results:
        raise ValueError("registration_recall requires a nonempty result list")
    ok = sum(1 for r in results
             if r.re is not None and r.te is not None
             and r.re <= thresholds.re_max and r.te <= thresholds.te_max)
    return ok / len(results)


def score_result(result: RegistrationResult, gt: RigidTransform,
                 thresholds: EvalThresholds) -> RegistrationResult:
    """Fill in RE/TE/success for a prediction against ground truth."""
    result.re = rotation_error(result.predicted, gt)
    result.te = translation_error(result.predicted, gt)
    result.success = result.re <= thresholds.re_max and result.te <= thresholds.te_max
    return result


def sample_random_transform(rng: np.random.Generator, rot_range: float = 360.0,
                            trans_range: float = 0.60) -> RigidTransform:
    """Rotation from three axis rotations uniform in [0, rot_range] degrees
    (composed as rot_x @ rot_y @ rot_z), translation uniform in [0, trans_range]
    per component."""
    if rot_range < 0 or trans_range < 0:
        raise ValueError("ranges must be non-negative")
    ax, ay, az = rng.uniform(0.0, rot_range, size=3)
    R = rot_x(ax) @ rot_y(ay) @ rot_z(az)
    t = rng.uniform(0.0, trans_range, size=3)
    return RigidTransform(R, t)


def voxel_downsample(cloud: PointCloud, voxel: float) -> PointCloud:
    """One centroid per occupied voxel; output ordered by voxel index."""
    if voxel <= 0:
        raise ValueError("voxel size must be positive")
    keys = np.floor(cloud.points / voxel).astype(np.int64)
    order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0]))
    sk = keys[order]
    sp = cloud.points[order]
    boundaries = np.ones(len(sk), dtype=bool)
    boundaries[1:] = np.any(sk[1:] != sk[:-1], axis=1)
    starts = np.flatnonzero(boundaries)
    ends = np.append(starts[1:], len(sk))
    centroids = np.add.reduceat(sp, starts, axis=0) / (ends - starts)[:, None]
    return PointCloud(centroids)
