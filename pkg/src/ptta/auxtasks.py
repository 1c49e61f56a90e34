"""Self-supervised auxiliary losses (reconstruction, BYOL, correspondence
classification) and their learnable balancing. None of these take a
ground-truth transform: the whole surface is usable at test time.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import NumericError
from .geometry import PointCloud, apply_transform, sample_random_transform
from .networks import (ParamPartition, byol_predict, byol_project, decode_points,
                       encode_points, score_correspondences)
from .registration import (_corr_feature_tensor, bce_loss, label_inliers,
                           match_features)

TASK_NAMES = ("rec", "byol", "cc")
MIN_VIEW_POINTS = 16


@dataclass
class AugmentationSpec:
    """Mild augmentations that preserve registratable structure."""

    crop_fraction: tuple[float, float] = (0.6, 0.9)
    rotation_max_deg: float = 30.0
    jitter_sigma: float = 0.01
    downsample_fraction: tuple[float, float] = (0.7, 1.0)

    def __post_init__(self):
        for lo, hi in (self.crop_fraction, self.downsample_fraction):
            if not (0.0 < lo <= hi <= 1.0):
                raise ValueError("fraction ranges must satisfy 0 < lo <= hi <= 1")
        if self.rotation_max_deg < 0 or self.jitter_sigma < 0:
            raise ValueError("rotation range and jitter sigma must be non-negative")

    def is_identity(self) -> bool:
        return (self.crop_fraction == (1.0, 1.0) and self.rotation_max_deg == 0.0
                and self.jitter_sigma == 0.0 and self.downsample_fraction == (1.0, 1.0))


@dataclass
class AuxWeights:
    """Balancing parameters c with the derived softmax weights."""

    c: np.ndarray = field(default_factory=lambda: np.ones(3))

    @property
    def lam(self) -> np.ndarray:
        return balance_weights(Tensor(self.c)).data


def _augment_once(P: PointCloud, spec: AugmentationSpec,
                  rng: np.random.Generator) -> PointCloud:
    pts = P.points
    # half-space crop to a sampled fraction of points
    frac = rng.uniform(*spec.crop_fraction)
    keep = max(MIN_VIEW_POINTS, int(round(frac * len(pts))))
    if keep < len(pts):
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        proj = pts @ direction
        order = np.argsort(proj, kind="stable")
        pts = pts[np.sort(order[:keep])]
    T = sample_random_transform(rng, spec.rotation_max_deg, 0.0)
    pts = pts @ T.R.T
    if spec.jitter_sigma > 0:
        pts = pts + rng.normal(scale=spec.jitter_sigma, size=pts.shape)
    frac = rng.uniform(*spec.downsample_fraction)
    keep = max(MIN_VIEW_POINTS, int(round(frac * len(pts))))
    if keep < len(pts):
        idx = np.sort(rng.choice(len(pts), size=keep, replace=False))
        pts = pts[idx]
    if len(pts) < MIN_VIEW_POINTS:
        raise NumericError("augmented view fell below 16 points")
    return PointCloud(pts.copy())


def make_views(P: PointCloud, spec: AugmentationSpec,
               rng: np.random.Generator) -> tuple[PointCloud, PointCloud]:
    """Two independent augmentations of P; deterministic per RNG state."""
    if spec.is_identity():
        return PointCloud(P.points.copy()), PointCloud(P.points.copy())
    return _augment_once(P, spec, rng), _augment_once(P, spec, rng)


def reconstruction_loss(partition: ParamPartition, P: PointCloud) -> Tensor:
    """Mean absolute coordinate error of the index-aligned reconstruction."""
    feats = encode_points(partition.shar, P, partition.config)
    recon = decode_points(partition.aux, feats)
    err = ad.add(recon, Tensor(-P.points))
    return ad.reduce_mean(ad.abs_(err))


def byol_alignment_loss(q: Tensor, z: np.ndarray) -> Tensor:
    """2 - 2 cos(q, z): 0 when parallel, 2 when orthogonal, 4 when
    antiparallel. ``z`` is a constant (no gradient into the target)."""
    qn = ad.l2_normalize(q, axis=1)
    zn = Tensor(z / (np.linalg.norm(z) + 1e-12))
    return ad.add(2.0, ad.mul(-2.0, ad.reduce_sum(ad.mul(qn, zn))))


def _byol_direction(partition: ParamPartition, online_view: PointCloud,
                    target_view: PointCloud) -> Tensor:
    cfg = partition.config
    pooled = ad.reduce_mean(encode_points(partition.shar, online_view, cfg),
                            axis=0, keepdims=True)
    q = byol_predict(partition.aux, byol_project(partition.aux, pooled))
    with ad.no_grad():
        tgt_pooled = ad.reduce_mean(
            encode_points(partition.byol_target, target_view, cfg),
            axis=0, keepdims=True)
        z_t = byol_project(partition.byol_target, tgt_pooled)
    return byol_alignment_loss(q, z_t.data)


def byol_loss(partition: ParamPartition, P: PointCloud, spec: AugmentationSpec,
              rng: np.random.Generator) -> Tensor:
    """Symmetric cosine objective between online predictions and EMA-target
    projections of two augmented views; range [0, 8]; no gradient into the
    target network."""
    v1, v2 = make_views(P, spec, rng)
    return ad.add(_byol_direction(partition, v1, v2),
                  _byol_direction(partition, v2, v1))


def cc_loss(partition: ParamPartition, P: PointCloud, rng: np.random.Generator,
            tau_in: float = 0.10) -> Tensor:
    """Correspondence classification: self-pair under a random transform,
    scored by the auxiliary rejection head; mean negated BCE."""
    T = sample_random_transform(rng)
    P2 = apply_transform(P, T)
    cfg = partition.config
    fs = encode_points(partition.shar, P, cfg)
    ft = encode_points(partition.shar, P2, cfg)
    corr = match_features(fs, ft)
    labels = label_inliers(corr, P, P2, T, tau_in)
    feats = _corr_feature_tensor(P, P2, corr, fs, ft)
    probs = score_correspondences(partition.aux, feats)
    return bce_loss(probs, labels)


def balance_weights(c: Tensor) -> Tensor:
    """lambda = softmax over logits 1 / (2 c_i^2); positive, sums to 1."""
    if np.any(c.data == 0.0):
        raise NumericError("balancing parameter c_i must be nonzero")
    logits = ad.div(1.0, ad.mul(2.0, ad.mul(c, c)))
    return ad.softmax(logits)


def aux_total_loss(partition: ParamPartition, X: PointCloud, Y: PointCloud,
                   rng: np.random.Generator, spec: AugmentationSpec | None = None,
                   tau_in: float = 0.10,
                   enabled: tuple[bool, bool, bool] = (True, True, True),
                   ) -> tuple[Tensor, dict]:
    """Weighted sum of the enabled auxiliary losses, each evaluated on both
    clouds of the pair and averaged. Needs no ground truth."""
    if spec is None:
        spec = AugmentationSpec()
    if not any(enabled):
        raise ValueError("at least one auxiliary task must be enabled")
    task_losses: list[Tensor] = []
    idx: list[int] = []
    breakdown: dict[str, float] = {}
    for ti, (name, on) in enumerate(zip(TASK_NAMES, enabled)):
        if not on:
            continue
        if name == "rec":
            lx = reconstruction_loss(partition, X)
            ly = reconstruction_loss(partition, Y)
        elif name == "byol":
            lx = byol_loss(partition, X, spec, rng)
            ly = byol_loss(partition, Y, spec, rng)
        else:
            lx = cc_loss(partition, X, rng, tau_in)
            ly = cc_loss(partition, Y, rng, tau_in)
        task = ad.mul(0.5, ad.add(lx, ly))
        task_losses.append(task)
        idx.append(ti)
        breakdown[name] = float(task.data)
    c = partition.balance["c"]
    if np.any(c.data == 0.0):
        raise NumericError("balancing parameter c_i must be nonzero")
    logits = ad.div(1.0, ad.mul(2.0, ad.mul(c, c)))
    lam = ad.softmax(ad.gather_rows(logits, np.array(idx)))
    total = ad.reduce_sum(ad.mul(lam, ad.concat(
        [ad.reshape(t, (1,)) for t in task_losses], axis=0)))
    for pos, name in enumerate(n for n, on in zip(TASK_NAMES, enabled) if on):
        breakdown[f"lambda_{name}"] = float(lam.data[pos])
    return total, breakdown
