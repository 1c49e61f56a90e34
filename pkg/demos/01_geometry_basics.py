"""Rigid transforms and registration error metrics.

Builds a few transforms, composes and inverts them, and shows how
rotation/translation errors and registration recall are computed.
"""
import numpy as np

from ptta.geometry import (EvalThresholds, PointCloud, RegistrationResult,
                           RigidTransform, apply_transform, compose, invert,
                           registration_recall, rot_z, rotation_error,
                           sample_random_transform, score_result,
                           translation_error)

rng = np.random.default_rng(0)

# A rigid transform is a rotation matrix plus a translation vector.
T = RigidTransform(rot_z(30.0), np.array([0.1, -0.2, 0.05]))
cloud = PointCloud(rng.normal(size=(50, 3)))
moved = apply_transform(cloud, T)
print("moved 50 points by a 30 deg z-rotation and a small shift")

# compose(A, B) applies B first, then A; invert undoes a transform.
roundtrip = compose(invert(T), T)
print("compose(invert(T), T) deviates from identity by",
      f"{np.abs(roundtrip.R - np.eye(3)).max():.2e}")

# Error metrics compare an estimate against the ground truth.
gt = sample_random_transform(rng)
est = RigidTransform(gt.R @ rot_z(5.0), gt.t + np.array([0.0, 0.02, 0.0]))
print(f"rotation error:    {rotation_error(RegistrationResult(est).predicted, gt):.3f} deg"
      f" (5 deg perturbation)")
print(f"translation error: {translation_error(est, gt):.3f} m"
      f" (0.02 m perturbation)")

# Recall counts estimates within both thresholds at once.
thresholds = EvalThresholds()  # 15 deg, 0.30 m
results = []
for deg in (1.0, 10.0, 20.0, 45.0):
    pred = RegistrationResult(RigidTransform(gt.R @ rot_z(deg), gt.t))
    results.append(score_result(pred, gt, thresholds))
recall = registration_recall(results, thresholds)
print(f"recall over perturbations of 1/10/20/45 deg at (15 deg, 0.30 m): {recall:.2f}")
