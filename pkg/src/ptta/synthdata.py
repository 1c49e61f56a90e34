"""Synthetic registration pairs with ground truth and controllable domain shift.

A scene is sampled from a mix of primitive generators, then cropped into
two overlapping views by a random plane through the centroid; the second
view is moved by a sampled rigid transform, and noise/outliers are
injected afterwards so they cannot be explained by any rigid motion.

On-disk contract: one ``.ptta`` binary blob per cloud (magic ``PTTA``,
version, counts, little-endian float64) plus a line-delimited JSON
manifest with per-file SHA-256 checksums.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .errors import DataError, NumericError
from .geometry import PointCloud, RigidTransform, apply_transform, sample_random_transform

CLOUD_MAGIC = b"PTTA"
CLOUD_VERSION = 1
MANIFEST_NAME = "manifest.jsonl"

PRIMITIVES = ("plane", "box", "sphere", "gauss")


@dataclass
class DomainProfile:
    """Knobs that define one synthetic 'scanner domain'."""

    name: str
    shape_mix: dict[str, float] = field(
        default_factory=lambda: {"plane": 0.25, "box": 0.25, "sphere": 0.25, "gauss": 0.25})
    point_count: int = 512
    noise_sigma: float = 0.005
    outlier_fraction: float = 0.05
    overlap_ratio: float = 0.7
    voxel: float = 0.05
    extent: float = 2.0
    rot_range: float = 360.0
    trans_range: float = 0.60

    def __post_init__(self):
        weights = np.array(list(self.shape_mix.values()), dtype=np.float64)
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
            raise ValueError("shape_mix weights must be non-negative and sum to 1")
        for k in self.shape_mix:
            if k not in PRIMITIVES:
                raise ValueError(f"unknown primitive {k!r}")
        if self.point_count < 32:
            raise ValueError("point_count must be >= 32")
        if not 0.0 <= self.overlap_ratio <= 1.0:
            raise ValueError("overlap_ratio must be in [0, 1]")
        if not 0.0 <= self.outlier_fraction <= 1.0:
            raise ValueError("outlier_fraction must be in [0, 1]")


@dataclass
class ScenePair:
    source: PointCloud
    target: PointCloud
    gt: RigidTransform
    profile_name: str
    pair_id: str


@dataclass
class PairEntry:
    pair_id: str
    profile_name: str
    split: str
    source_path: str
    target_path: str
    gt_R: list
    gt_t: list
    sha256_source: str
    sha256_target: str


@dataclass
class DatasetManifest:
    profiles: list[DomainProfile]
    entries: list[PairEntry]
    seed: int

    def __post_init__(self):
        ids = [e.pair_id for e in self.entries]
        if len(ids) != len(set(ids)):
            raise ValueError("pair_ids must be unique")


# ---------------------------------------------------------------------------
# scene generation

def _random_basis(rng: np.random.Generator) -> np.ndarray:
    """Random orthonormal 3x3 basis (uniform via QR of a Gaussian matrix)."""
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 2] = -q[:, 2]
    return q


def _sample_primitive(kind: str, n: int, extent: float,
                      rng: np.random.Generator, ctx: dict) -> np.ndarray:
    half = extent / 2.0
    if kind == "plane":
        basis = ctx.setdefault("plane_basis", _random_basis(rng))
        uv = rng.uniform(-half, half, size=(n, 2))
        return uv @ basis[:, :2].T
    if kind == "box":
        he = ctx.setdefault("box_half_extents", rng.uniform(0.3, 0.5, size=3) * extent)
        faces = rng.integers(0, 6, size=n)
        pts = rng.uniform(-1.0, 1.0, size=(n, 3)) * he
        axis = faces // 2
        side = np.where(faces % 2 == 0, 1.0, -1.0)
        pts[np.arange(n), axis] = side * he[axis]
        return pts
    if kind == "sphere":
        dirs = rng.normal(size=(n, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        return dirs * half
    if kind == "gauss":
        centers = ctx.setdefault("gauss_centers",
                                 rng.uniform(-half, half, size=(4, 3)))
        which = rng.integers(0, len(centers), size=n)
        return centers[which] + rng.normal(scale=0.1 * extent, size=(n, 3))
    raise ValueError(f"unknown primitive {kind!r}")


def generate_scene(profile: DomainProfile, rng: np.random.Generator) -> PointCloud:
    """Sample ``point_count`` points from the profile's shape mix."""
    kinds = list(profile.shape_mix)
    weights = np.array([profile.shape_mix[k] for k in kinds])
    choice = rng.choice(len(kinds), size=profile.point_count, p=weights)
    ctx: dict = {}
    pts = np.zeros((profile.point_count, 3))
    for ki, kind in enumerate(kinds):
        idx = np.flatnonzero(choice == ki)
        if idx.size:
            pts[idx] = _sample_primitive(kind, idx.size, profile.extent, rng, ctx)
    if profile.noise_sigma > 0:
        pts = pts + rng.normal(scale=profile.noise_sigma, size=pts.shape)
    return PointCloud(pts)


def _crop_views(points: np.ndarray, overlap_ratio: float,
                rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, int]:
    """Two half-space crops sharing at least overlap_ratio of the smaller crop."""
    centroid = points.mean(axis=0)
    for _ in range(100):
        n = rng.normal(size=3)
        n /= np.linalg.norm(n)
        s = (points - centroid) @ n
        hi = float(np.abs(s).max())

        def measure(d):
            src = s <= d
            tgt = s >= -d
            both = int(np.sum(src & tgt))
            m = min(int(src.sum()), int(tgt.sum()))
            return src, tgt, (both / m if m else 0.0)

        lo_d, hi_d = 0.0, hi
        src, tgt, ov = measure(hi_d)
        if ov < overlap_ratio:
            continue
        if overlap_ratio < 1.0:
            for _ in range(40):
                mid = 0.5 * (lo_d + hi_d)
                smask, tmask, ov_mid = measure(mid)
                if ov_mid >= overlap_ratio:
                    hi_d, src, tgt, ov = mid, smask, tmask, ov_mid
                else:
                    lo_d = mid
        if int(src.sum()) >= 16 and int(tgt.sum()) >= 16 and ov >= overlap_ratio:
            overlap_count = int(np.sum(src & tgt))
            return np.flatnonzero(src), np.flatnonzero(tgt), overlap_count
    raise NumericError("could not satisfy overlap constraint after 100 attempts")


def make_pair(scene: PointCloud, profile: DomainProfile, rng: np.random.Generator,
              pair_id: str = "pair") -> ScenePair:
    """Crop two overlapping views, transform the target, add noise and outliers."""
    src_idx, tgt_idx, _ = _crop_views(scene.points, profile.overlap_ratio, rng)
    src_pts = scene.points[src_idx].copy()
    gt = sample_random_transform(rng, profile.rot_range, profile.trans_range)
    tgt_pts = scene.points[tgt_idx] @ gt.R.T + gt.t
    if profile.noise_sigma > 0:
        src_pts = src_pts + rng.normal(scale=profile.noise_sigma, size=src_pts.shape)
        tgt_pts = tgt_pts + rng.normal(scale=profile.noise_sigma, size=tgt_pts.shape)
    if profile.outlier_fraction > 0:
        for pts in (src_pts, tgt_pts):
            k = int(round(profile.outlier_fraction * len(pts)))
            if k:
                idx = rng.choice(len(pts), size=k, replace=False)
                lo, hi = pts.min(axis=0), pts.max(axis=0)
                pts[idx] = rng.uniform(lo, hi, size=(k, 3))
    return ScenePair(PointCloud(src_pts), PointCloud(tgt_pts), gt,
                     profile.name, pair_id)


def generate_dataset(profiles: list[DomainProfile], pairs_per_profile: int,
                     seed: int) -> tuple[list[ScenePair], DatasetManifest]:
    """Deterministic dataset: independent RNG streams per pair_id."""
    pairs: list[ScenePair] = []
    entries: list[PairEntry] = []
    root = np.random.SeedSequence(seed)
    streams = root.spawn(len(profiles) * pairs_per_profile)
    si = 0
    for profile in profiles:
        for i in range(pairs_per_profile):
            rng = np.random.Generator(np.random.PCG64(streams[si]))
            si += 1
            pair_id = f"{profile.name}_{i:05d}"
            scene = generate_scene(profile, rng)
            pair = make_pair(scene, profile, rng, pair_id=pair_id)
            pairs.append(pair)
            entries.append(PairEntry(
                pair_id=pair_id, profile_name=profile.name, split="train",
                source_path=f"{pair_id}_src.ptta", target_path=f"{pair_id}_tgt.ptta",
                gt_R=pair.gt.R.tolist(), gt_t=pair.gt.t.tolist(),
                sha256_source="", sha256_target=""))
    return pairs, DatasetManifest(profiles=list(profiles), entries=entries, seed=seed)


def split_dataset(manifest: DatasetManifest, fractions: tuple[float, float, float],
                  rng: np.random.Generator) -> DatasetManifest:
    """Assign disjoint exhaustive train/val/test splits, deterministic per seed."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("split fractions must sum to 1")
    n = len(manifest.entries)
    perm = rng.permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    n_val = min(n_val, n - n_train)
    split_of = {}
    for rank, ei in enumerate(perm):
        if rank < n_train:
            split_of[ei] = "train"
        elif rank < n_train + n_val:
            split_of[ei] = "val"
        else:
            split_of[ei] = "test"
    for i, e in enumerate(manifest.entries):
        e.split = split_of[i]
    return manifest


# ---------------------------------------------------------------------------
# on-disk format

def write_cloud(path: Path | str, cloud: PointCloud) -> str:
    """Write one .ptta blob; returns its SHA-256 hex digest."""
    buf = bytearray()
    buf += CLOUD_MAGIC
    buf += struct.pack("<I", CLOUD_VERSION)
    buf += struct.pack("<I", len(cloud))
    feat_dim = 0 if cloud.features is None else cloud.features.shape[1]
    buf += struct.pack("<I", feat_dim)
    buf += np.ascontiguousarray(cloud.points, dtype="<f8").tobytes()
    if feat_dim:
        buf += np.ascontiguousarray(cloud.features, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(buf))
    return hashlib.sha256(bytes(buf)).hexdigest()


def read_cloud(path: Path | str) -> PointCloud:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing cloud file: {path}")
    raw = path.read_bytes()
    if len(raw) < 16 or raw[:4] != CLOUD_MAGIC:
        raise DataError(f"corrupt cloud file (bad magic): {path}")
    version, count, feat_dim = struct.unpack_from("<III", raw, 4)
    if version != CLOUD_VERSION:
        raise DataError(f"unsupported cloud file version {version}: {path}")
    need = 16 + 8 * count * (3 + feat_dim)
    if len(raw) != need:
        raise DataError(f"corrupt cloud file (truncated): {path}")
    pts = np.frombuffer(raw, dtype="<f8", count=3 * count, offset=16).reshape(count, 3)
    feats = None
    if feat_dim:
        feats = np.frombuffer(raw, dtype="<f8", count=feat_dim * count,
                              offset=16 + 24 * count).reshape(count, feat_dim)
        feats = feats.copy()
    return PointCloud(pts.copy(), feats)


def write_dataset(pairs: list[ScenePair], manifest: DatasetManifest,
                  out_dir: Path | str) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    by_id = {p.pair_id: p for p in pairs}
    lines = [json.dumps({"kind": "ptta-manifest", "version": 1, "seed": manifest.seed,
                         "profiles": [asdict(p) for p in manifest.profiles]},
                        sort_keys=True)]
    for e in manifest.entries:
        pair = by_id[e.pair_id]
        e.sha256_source = write_cloud(out_dir / e.source_path, pair.source)
        e.sha256_target = write_cloud(out_dir / e.target_path, pair.target)
        lines.append(json.dumps({"kind": "pair", **asdict(e)}, sort_keys=True))
    (out_dir / MANIFEST_NAME).write_text("\n".join(lines) + "\n")


def read_dataset(in_dir: Path | str) -> tuple[list[ScenePair], DatasetManifest]:
    in_dir = Path(in_dir)
    mpath = in_dir / MANIFEST_NAME
    if not mpath.exists():
        raise DataError(f"missing manifest: {mpath}")
    lines = mpath.read_text().splitlines()
    try:
        header = json.loads(lines[0])
    except (json.JSONDecodeError, IndexError) as e:
        raise DataError(f"corrupt manifest: {mpath}") from e
    if header.get("kind") != "ptta-manifest":
        raise DataError(f"corrupt manifest (bad header): {mpath}")
    if header.get("version") != 1:
        raise DataError(f"unsupported manifest version: {mpath}")
    profiles = [DomainProfile(**p) for p in header["profiles"]]
    pairs: list[ScenePair] = []
    entries: list[PairEntry] = []
    for line in lines[1:]:
        if not line.strip():
            continue
        rec = json.loads(line)
        rec.pop("kind", None)
        entry = PairEntry(**rec)
        for rel, want in ((entry.source_path, entry.sha256_source),
                          (entry.target_path, entry.sha256_target)):
            fpath = in_dir / rel
            if not fpath.exists():
                raise DataError(f"manifest references missing file: {fpath}")
            got = hashlib.sha256(fpath.read_bytes()).hexdigest()
            if got != want:
                raise DataError(f"checksum mismatch for {fpath}")
        pairs.append(ScenePair(
            source=read_cloud(in_dir / entry.source_path),
            target=read_cloud(in_dir / entry.target_path),
            gt=RigidTransform(np.array(entry.gt_R), np.array(entry.gt_t)),
            profile_name=entry.profile_name, pair_id=entry.pair_id))
        entries.append(entry)
    manifest = DatasetManifest(profiles=profiles, entries=entries,
                               seed=header["seed"])
    return pairs, manifest
