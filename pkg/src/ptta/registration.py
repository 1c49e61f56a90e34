"""The primary task: feature matching, outlier scoring, weighted Procrustes,
and the primary loss.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import NumericError
from .geometry import PointCloud, RegistrationResult, RigidTransform
from .networks import ParamPartition, encode_points, score_correspondences
from .synthdata import ScenePair

PROB_CLAMP = 1e-7
FEAT_DIST_EPS = 1e-18


@dataclass
class CorrespondenceSet:
    """Matched index pairs with optional confidence weights and inlier labels."""

    pairs: np.ndarray  # (M, 2) intp
    weights: np.ndarray | None = None
    gt_labels: np.ndarray | None = None

    def __post_init__(self):
        self.pairs = np.asarray(self.pairs, dtype=np.intp).reshape(-1, 2)
        if self.weights is not None:
            self.weights = np.asarray(self.weights, dtype=np.float64)
            if self.weights.shape != (len(self.pairs),):
                raise ValueError("weights length must match pair count")
            if np.any(self.weights < 0) or np.any(self.weights > 1):
                raise ValueError("weights must lie in [0, 1]")
        if self.gt_labels is not None:
            self.gt_labels = np.asarray(self.gt_labels, dtype=bool)
            if self.gt_labels.shape != (len(self.pairs),):
                raise ValueError("gt_labels length must match pair count")

    def __len__(self) -> int:
        return len(self.pairs)


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def match_features(src_feats, tgt_feats) -> CorrespondenceSet:
    """One pair per source row: nearest target row by Euclidean feature
    distance, ties broken by smallest target index."""
    fs, ft = _as_array(src_feats), _as_array(tgt_feats)
    if fs.ndim != 2 or ft.ndim != 2 or fs.shape[1] != ft.shape[1]:
        raise ValueError("feature dimension mismatch")
    if fs.shape[0] == 0 or ft.shape[0] == 0:
        raise ValueError("empty feature set")
    d2 = (np.sum(fs * fs, axis=1)[:, None] - 2.0 * fs @ ft.T
          + np.sum(ft * ft, axis=1)[None, :])
    j = np.argmin(d2, axis=1)  # argmin returns the smallest index on ties
    pairs = np.column_stack([np.arange(fs.shape[0]), j])
    return CorrespondenceSet(pairs)


def label_inliers(corr: CorrespondenceSet, src: PointCloud, tgt: PointCloud,
                  T: RigidTransform, tau_in: float) -> np.ndarray:
    """Residual-threshold inlier labels: ||R x_i + t - y_j|| <= tau_in."""
    if tau_in <= 0:
        raise ValueError("tau_in must be positive")
    xi = src.points[corr.pairs[:, 0]]
    yj = tgt.points[corr.pairs[:, 1]]
    res = np.linalg.norm(xi @ T.R.T + T.t - yj, axis=1)
    return res <= tau_in


def weighted_procrustes(src: PointCloud, tgt: PointCloud,
                        corr: CorrespondenceSet) -> RigidTransform:
    """Closed-form minimizer of sum_k w_k ||R x_k + t - y_k||^2 over rotations."""
    if len(corr) < 3:
        raise ValueError("weighted Procrustes needs at least 3 correspondences")
    w = corr.weights if corr.weights is not None else np.ones(len(corr))
    wsum = float(w.sum())
    if wsum <= 1e-12:
        raise NumericError("total correspondence weight is zero")
    wn = w / wsum
    x = src.points[corr.pairs[:, 0]]
    y = tgt.points[corr.pairs[:, 1]]
    cx = wn @ x
    cy = wn @ y
    xc = x - cx
    yc = y - cy
    H = (yc * wn[:, None]).T @ xc  # 3x3 cross-covariance, target-major
    U, S, Vt = np.linalg.svd(H)
    if S[1] <= 1e-9:
        raise NumericError("degenerate correspondence geometry: rank < 2")
    d = np.sign(np.linalg.det(U @ Vt))
    R = U @ np.diag([1.0, 1.0, d]) @ Vt
    t = cy - R @ cx
    return RigidTransform(R, t)


def procrustes_transform_tensor(x: np.ndarray, y: np.ndarray,
                                w: Tensor) -> tuple[Tensor, Tensor]:
    """Differentiable weighted Procrustes: gradients flow into the weights
    through the centroids, the cross-covariance, and the SVD rotation.

    Returns (R, t) as tensors of shape (3, 3) and (1, 3); the transform
    maps x to y as x @ R.T + t.
    """
    m = len(x)
    if m < 3:
        raise ValueError("weighted Procrustes needs at least 3 correspondences")
    wsum = ad.reduce_sum(w)
    if wsum.data <= 1e-12:
        raise NumericError("total correspondence weight is zero")
    wn = ad.reshape(ad.div(w, wsum), (1, m))
    cx = ad.matmul(wn, Tensor(x))          # (1, 3)
    cy = ad.matmul(wn, Tensor(y))
    xc = ad.add(Tensor(x), ad.neg(cx))     # broadcast (m, 3)
    yc = ad.add(Tensor(y), ad.neg(cy))
    wyc = ad.mul(ad.reshape(wn, (m, 1)), yc)
    H = ad.matmul(ad.transpose(wyc), xc)   # (3, 3)
    R = ad.procrustes_rotation(H)
    t = ad.add(cy, ad.neg(ad.matmul(cx, ad.transpose(R))))
    return R, t


def bce_loss(probs: Tensor, labels: np.ndarray) -> Tensor:
    """Mean binary cross entropy with probabilities clamped to
    [PROB_CLAMP, 1 - PROB_CLAMP]."""
    p = ad.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = labels.astype(np.float64)
    terms = ad.add(ad.mul(y, ad.log(p)),
                   ad.mul(1.0 - y, ad.log(ad.add(1.0, ad.neg(p)))))
    return ad.neg(ad.reduce_mean(terms))


def _corr_feature_tensor(src: PointCloud, tgt: PointCloud,
                         corr: CorrespondenceSet, src_feats: Tensor,
                         tgt_feats: Tensor) -> Tensor:
    """(M, 9) correspondence encoding: x_i, y_j, feature distance, Lowe
    ratio, mutual-match flag.

    The ratio (nearest over second-nearest feature distance, low =
    distinctive) is differentiable through both distances; the neighbour
    indices and the mutual flag are piecewise constant.
    """
    i, j = corr.pairs[:, 0], corr.pairs[:, 1]
    fs, ft = src_feats.data, tgt_feats.data
    d2 = (np.sum(fs * fs, axis=1)[:, None] - 2.0 * fs @ ft.T
          + np.sum(ft * ft, axis=1)[None, :])
    mutual = (np.argmin(d2, axis=0)[j] == i).astype(np.float64)
    if ft.shape[0] >= 2:
        d2m = d2.copy()
        d2m[np.arange(len(i)), j] = np.inf
        j2 = np.argmin(d2m, axis=1)
    else:
        j2 = j
    fi = ad.gather_rows(src_feats, i)
    fj = ad.gather_rows(tgt_feats, j)
    diff = ad.add(fi, ad.neg(fj))
    dist2 = ad.reduce_sum(ad.mul(diff, diff), axis=1, keepdims=True)
    dist = ad.sqrt(ad.add(dist2, FEAT_DIST_EPS))
    diff2 = ad.add(fi, ad.neg(ad.gather_rows(tgt_feats, j2)))
    dist_2nd = ad.sqrt(ad.add(
        ad.reduce_sum(ad.mul(diff2, diff2), axis=1, keepdims=True),
        FEAT_DIST_EPS))
    ratio = ad.div(dist, dist_2nd)
    return ad.concat([Tensor(src.points[i]), Tensor(tgt.points[j]), dist,
                      ratio, Tensor(mutual[:, None])], axis=1)


def primary_loss(partition: ParamPartition, pair: ScenePair,
                 tau_in: float = 0.10, lambda_t: float = 1.0) -> tuple[Tensor, dict]:
    """BCE against residual-threshold inlier labels plus a transform error
    term evaluated at the weighted-Procrustes solution."""
    cfg = partition.config
    fs = encode_points(partition.shar, pair.source, cfg)
    ft = encode_points(partition.shar, pair.target, cfg)
    corr = match_features(fs, ft)
    labels = label_inliers(corr, pair.source, pair.target, pair.gt, tau_in)
    feats = _corr_feature_tensor(pair.source, pair.target, corr, fs, ft)
    probs = score_correspondences(partition.pri, feats)
    bce = bce_loss(probs, labels)
    x = pair.source.points[corr.pairs[:, 0]]
    y = pair.target.points[corr.pairs[:, 1]]
    R, t = procrustes_transform_tensor(x, y, probs)
    dR = ad.add(R, Tensor(-pair.gt.R))
    fro = ad.sqrt(ad.add(ad.reduce_sum(ad.mul(dR, dR)), FEAT_DIST_EPS))
    dt = ad.add(t, Tensor(-pair.gt.t.reshape(1, 3)))
    tnorm = ad.sqrt(ad.add(ad.reduce_sum(ad.mul(dt, dt)), FEAT_DIST_EPS))
    loss = ad.add(bce, ad.mul(lambda_t, ad.add(fro, tnorm)))
    info = {"bce": float(bce.data), "transform_term": float(fro.data + tnorm.data),
            "inlier_rate": float(labels.mean()), "n_corr": len(corr)}
    return loss, info


KEEP_FRACTION = 0.2  # fraction of top-scored correspondences kept at inference
MIN_KEPT = 12


def register(partition: ParamPartition, X: PointCloud,
             Y: PointCloud) -> RegistrationResult:
    """encode -> match -> score -> top-fraction select -> weighted
    Procrustes; deterministic.

    Only the highest-scored correspondences are solved over: soft weights
    alone cannot suppress a large outlier majority, so the estimate comes
    from the top KEEP_FRACTION by predicted inlier probability.
    """
    cfg = partition.config
    with ad.no_grad():
        fs = encode_points(partition.shar, X, cfg)
        ft = encode_points(partition.shar, Y, cfg)
        corr = match_features(fs, ft)
        feats = _corr_feature_tensor(X, Y, corr, fs, ft)
        probs = np.clip(score_correspondences(partition.pri, feats).data,
                        0.0, 1.0)
    n_keep = min(len(corr), max(MIN_KEPT, int(KEEP_FRACTION * len(corr))))
    # stable selection: sort by (-prob, index) so ties keep the lowest index
    order = np.lexsort((corr.pairs[:, 0], -probs))[:n_keep]
    keep = np.sort(order)
    w = probs[keep]
    if w.sum() <= 1e-12:  # all-zero scores: fall back to an unweighted solve
        w = np.ones(len(keep))
    try:
        T = weighted_procrustes(X, Y, CorrespondenceSet(corr.pairs[keep],
                                                        weights=w))
    except NumericError:
        # the selected subset was geometrically degenerate: widen to all
        # correspondences with their soft weights
        w = probs if probs.sum() > 1e-12 else np.ones(len(corr))
        T = weighted_procrustes(X, Y, CorrespondenceSet(corr.pairs, weights=w))
    return RegistrationResult(predicted=T)
