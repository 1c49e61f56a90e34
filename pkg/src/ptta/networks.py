"""Parameterized components: shared point encoder, decoder, BYOL heads,
correspondence scoring heads, and the BYOL target-network EMA.

The encoder consumes rigid-motion-invariant local descriptors (sorted
neighborhood covariance eigenvalues and distance statistics at two
neighborhood scales), so feature matching survives arbitrary rotations.
Feature rows are L2-normalized and exactly permutation-equivariant.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from .autodiff import Tensor
from .errors import InternalError
from .geometry import PointCloud
from .params import ParamStore

DESCRIPTOR_DIM = 12  # 6 invariants x 2 neighborhood scales
CORR_FEATURE_DIM = 9  # source xyz, target xyz, feature distance, ratio, mutual flag
CN_GUARD = 1e-8


@dataclass
class EncoderConfig:
    feature_dim: int = 32
    hidden: int = 32
    k: int = 8
    proj_dim: int = 16
    head_hidden: int = 32
    dec_hidden: int = 32

    def __post_init__(self):
        if self.feature_dim < 8:
            raise ValueError("feature_dim must be >= 8")
        if self.k < 1:
            raise ValueError("k must be >= 1")


@dataclass
class ParamPartition:
    """The parameter split the meta-learner manipulates.

    ``shar``: shared encoder. ``pri``: primary rejection head.
    ``aux``: decoder + BYOL projector/predictor + auxiliary rejection head.
    ``balance``: the three balancing parameters c. ``byol_target``: EMA
    copy of encoder + projector, never gradient-trained.
    """

    shar: ParamStore
    pri: ParamStore
    aux: ParamStore
    balance: ParamStore
    byol_target: ParamStore
    config: EncoderConfig

    def trainable_stores(self) -> list[ParamStore]:
        return [self.shar, self.pri, self.aux, self.balance]

    def trainable_tensors(self) -> list[Tensor]:
        out = []
        for store in self.trainable_stores():
            out.extend(store.tensors())
        return out

    def num_parameters(self) -> int:
        return sum(s.num_values() for s in self.trainable_stores())

    def adapted_copy(self, shar: ParamStore, pri: ParamStore,
                     aux: ParamStore) -> "ParamPartition":
        """New partition with adapted branches; balance and target are shared."""
        return ParamPartition(shar=shar, pri=pri, aux=aux, balance=self.balance,
                              byol_target=self.byol_target, config=self.config)

    def clone(self) -> "ParamPartition":
        return ParamPartition(shar=self.shar.clone(), pri=self.pri.clone(),
                              aux=self.aux.clone(), balance=self.balance.clone(),
                              byol_target=self.byol_target.clone(),
                              config=self.config)

    def value_hash(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for store in (*self.trainable_stores(), self.byol_target):
            h.update(store.value_hash().encode())
        return h.hexdigest()


def _init_linear(store: ParamStore, name: str, fan_in: int, fan_out: int,
                 rng: np.random.Generator) -> None:
    scale = np.sqrt(2.0 / fan_in)
    store.add(f"{name}.w", rng.normal(scale=scale, size=(fan_in, fan_out)))
    store.add(f"{name}.b", np.zeros(fan_out))


def _linear(store: ParamStore, name: str, x: Tensor) -> Tensor:
    return ad.add(ad.matmul(x, store[f"{name}.w"]), store[f"{name}.b"])


def _init_head(store: ParamStore, prefix: str, hidden: int,
               rng: np.random.Generator) -> None:
    _init_linear(store, f"{prefix}.l1", CORR_FEATURE_DIM, hidden, rng)
    _init_linear(store, f"{prefix}.l2", hidden, hidden, rng)
    _init_linear(store, f"{prefix}.out", hidden, 1, rng)


def init_partition(config: EncoderConfig, rng: np.random.Generator) -> ParamPartition:
    h, d = config.hidden, config.feature_dim
    shar = ParamStore()
    _init_linear(shar, "enc.l1", DESCRIPTOR_DIM, h, rng)
    _init_linear(shar, "enc.l2", 2 * h, h, rng)
    _init_linear(shar, "enc.l3", h, d, rng)

    pri = ParamStore()
    _init_head(pri, "head", config.head_hidden, rng)

    aux = ParamStore()
    _init_linear(aux, "dec.l1", d, config.dec_hidden, rng)
    _init_linear(aux, "dec.l2", config.dec_hidden, 3, rng)
    _init_linear(aux, "proj.l1", d, h, rng)
    _init_linear(aux, "proj.l2", h, config.proj_dim, rng)
    _init_linear(aux, "pred.l1", config.proj_dim, h, rng)
    _init_linear(aux, "pred.l2", h, config.proj_dim, rng)
    _init_head(aux, "head", config.head_hidden, rng)

    balance = ParamStore()
    balance.add("c", np.ones(3))

    byol_target = ParamStore()
    for name, t in shar.items():
        byol_target.add(name, t.data.copy(), requires_grad=False)
    for name, t in aux.items():
        if name.startswith("proj."):
            byol_target.add(name, t.data.copy(), requires_grad=False)

    return ParamPartition(shar=shar, pri=pri, aux=aux, balance=balance,
                          byol_target=byol_target, config=config)


# ---------------------------------------------------------------------------
# encoder

def point_descriptors(points: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Rigid-motion-invariant per-point descriptors plus the k-NN index table.

    Per neighborhood scale (k and 2k): sorted covariance eigenvalues of the
    neighbor offsets, mean and std of neighbor distances, and the distance
    from the point to the neighborhood centroid.
    """
    n = len(points)
    k1 = min(k, n - 1)
    k2 = min(2 * k, n - 1)
    if k1 < 1:
        raise ValueError("need at least 2 points to build neighborhoods")
    tree = cKDTree(points)
    dists, idx = tree.query(points, k=k2 + 1)
    # column 0 is the point itself
    nn_idx = idx[:, 1:]
    nn_dist = dists[:, 1:]
    feats = np.zeros((n, DESCRIPTOR_DIM))
    for col, kk in enumerate((k1, k2)):
        nb = points[nn_idx[:, :kk]]                     # (n, kk, 3)
        centroid = nb.mean(axis=1)                      # (n, 3)
        off = nb - centroid[:, None, :]
        cov = np.einsum("nki,nkj->nij", off, off) / kk  # (n, 3, 3)
        eig = np.linalg.eigvalsh(cov)                   # ascending
        d = nn_dist[:, :kk]
        block = np.column_stack([
            eig,
            d.mean(axis=1),
            d.std(axis=1),
            np.linalg.norm(points - centroid, axis=1),
        ])
        feats[:, col * 6:(col + 1) * 6] = block
    return feats, nn_idx[:, :k1]


def encode_points(store: ParamStore, cloud: PointCloud,
                  config: EncoderConfig) -> Tensor:
    """Per-point L2-normalized features, (N, feature_dim)."""
    desc, nn_idx = point_descriptors(cloud.points, config.k)
    n, kk = nn_idx.shape
    x = Tensor(desc)
    h1 = ad.relu(_linear(store, "enc.l1", x))
    gathered = ad.gather_rows(h1, nn_idx.reshape(-1))
    pooled = ad.reduce_mean(ad.reshape(gathered, (n, kk, config.hidden)), axis=1)
    h2 = ad.relu(_linear(store, "enc.l2", ad.concat([h1, pooled], axis=1)))
    out = _linear(store, "enc.l3", h2)
    return ad.l2_normalize(out, axis=1)


def decode_points(store: ParamStore, features: Tensor) -> Tensor:
    """Index-aligned reconstruction: row i reconstructs input point i."""
    h = ad.relu(_linear(store, "dec.l1", features))
    return _linear(store, "dec.l2", h)


def byol_project(store: ParamStore, pooled: Tensor) -> Tensor:
    h = ad.relu(_linear(store, "proj.l1", pooled))
    return _linear(store, "proj.l2", h)


def byol_predict(store: ParamStore, z: Tensor) -> Tensor:
    h = ad.relu(_linear(store, "pred.l1", z))
    return _linear(store, "pred.l2", h)


def _context_normalize(h: Tensor) -> Tensor:
    """Per-channel standardization over the correspondence set.

    Channels with std below the guard use a unit denominator, so a
    single correspondence stays finite.
    """
    mean = ad.reduce_mean(h, axis=0, keepdims=True)
    centered = ad.add(h, ad.neg(mean))
    var = ad.reduce_mean(ad.mul(centered, centered), axis=0, keepdims=True)
    std = ad.sqrt(ad.add(var, 1e-16))
    guard = (std.data < CN_GUARD).astype(np.float64)
    denom = ad.add(ad.mul(std, 1.0 - guard), Tensor(guard))
    return ad.div(centered, denom)


def score_correspondences(store: ParamStore, corr_features: Tensor) -> Tensor:
    """Per-correspondence inlier probability in (0, 1), shape (M,)."""
    if corr_features.shape[0] < 1:
        raise ValueError("empty correspondence set")
    h = ad.relu(_context_normalize(_linear(store, "head.l1", corr_features)))
    h = ad.relu(_context_normalize(_linear(store, "head.l2", h)))
    logits = _linear(store, "head.out", h)
    return ad.reshape(ad.sigmoid(logits), (corr_features.shape[0],))


def ema_update(partition: ParamPartition, tau: float) -> None:
    """In-place target update: target <- tau * target + (1 - tau) * online."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must be in [0, 1]")
    for name, tgt in partition.byol_target.items():
        if name.startswith("enc."):
            online = partition.shar[name]
        elif name.startswith("proj."):
            online = partition.aux[name]
        else:
            raise InternalError(f"unexpected target parameter {name!r}")
        if tgt.data.shape != online.data.shape:
            raise ValueError("target/online shape mismatch")
        tgt.data *= tau
        tgt.data += (1.0 - tau) * online.data
