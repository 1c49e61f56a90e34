"""Training regimes and evaluation drivers: joint training, meta-auxiliary
training (first-order inner/outer loops), and per-instance test-time
adaptation with a divergence safeguard.
"""
from __future__ import annotations

import hashlib
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .auxtasks import AugmentationSpec, aux_total_loss
from .errors import ConfigError, NumericError
from .geometry import (EvalThresholds, PointCloud, RegistrationResult,
                       score_result)
from .networks import EncoderConfig, ParamPartition, ema_update, init_partition
from .params import ParamStore, adam_step, load_tensor_file, save_tensor_file, sgd_step
from .registration import primary_loss, register
from .synthdata import ScenePair


@dataclass
class TrainConfig:
    alpha: float = 2.5e-5          # inner/TTA learning rate
    beta: float = 2.5e-5           # meta learning rate
    joint_lr: float = 1e-4
    joint_decay: float = 0.99      # applied to the joint lr per epoch
    batch_size: int = 4
    inner_steps: int = 5
    tta_steps: int = 5
    joint_epochs: int = 10
    meta_epochs: int = 5
    seed: int = 0
    tau_in: float = 0.10
    lambda_t: float = 1.0
    ema_tau: float = 0.99
    use_rec: bool = True
    use_byol: bool = True
    use_cc: bool = True
    use_meta: bool = True
    use_tta: bool = True

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be non-negative")
        if self.inner_steps < 1 or self.batch_size < 1:
            raise ConfigError("inner_steps and batch_size must be >= 1")
        if not 0.0 <= self.ema_tau <= 1.0:
            raise ConfigError("ema_tau must lie in [0, 1]")
        if self.tta_steps < 0:
            raise ConfigError("tta_steps must be >= 0")
        if (self.use_meta or self.use_tta) and not (
                self.use_rec or self.use_byol or self.use_cc):
            raise ConfigError("meta/TTA require at least one auxiliary task")

    @property
    def enabled_tasks(self) -> tuple[bool, bool, bool]:
        return (self.use_rec, self.use_byol, self.use_cc)


@dataclass
class Checkpoint:
    partition: ParamPartition
    config: TrainConfig
    epoch: int
    rng_state: dict
    history: list = field(default_factory=list)


def substream(seed: int, name: str) -> np.random.Generator:
    """Named deterministic RNG substream derived from a single seed."""
    digest = hashlib.sha256(name.encode()).digest()
    key = int.from_bytes(digest[:8], "little")
    return np.random.Generator(np.random.PCG64(
        np.random.SeedSequence(entropy=seed, spawn_key=(key,))))


def _all_grads(loss, partition: ParamPartition) -> dict[int, np.ndarray]:
    return ad.backward(loss, wrt=partition.trainable_tensors())


# ---------------------------------------------------------------------------
# joint training (combined primary + auxiliary loss)

def joint_train_step(partition: ParamPartition, batch: list[ScenePair],
                     config: TrainConfig, lr: float,
                     rng: np.random.Generator,
                     spec: AugmentationSpec | None = None) -> dict:
    """One Adam step on all parameters (including c) against the summed
    primary + auxiliary loss, followed by one EMA target update."""
    if not batch:
        raise ValueError("empty batch")
    total = None
    pri_sum = aux_sum = 0.0
    for pair in batch:
        lp, _ = primary_loss(partition, pair, config.tau_in, config.lambda_t)
        la, _ = aux_total_loss(partition, pair.source, pair.target, rng, spec,
                               config.tau_in, config.enabled_tasks)
        pri_sum += float(lp.data)
        aux_sum += float(la.data)
        term = ad.add(lp, la)
        total = term if total is None else ad.add(total, term)
    if not np.isfinite(total.data):
        raise NumericError("non-finite joint loss")
    grads = ad.backward(total, wrt=partition.trainable_tensors())
    for store in partition.trainable_stores():
        adam_step(store, grads, lr)
    ema_update(partition, config.ema_tau)
    return {"loss": float(total.data), "pri": pri_sum, "aux": aux_sum}


# ---------------------------------------------------------------------------
# inner adaptation (shared by meta-training and TTA)

def inner_adapt(partition: ParamPartition, X: PointCloud, Y: PointCloud,
                alpha: float, steps: int, aux_seed: int,
                spec: AugmentationSpec | None = None, tau_in: float = 0.10,
                enabled: tuple[bool, bool, bool] = (True, True, True),
                ) -> tuple[ParamPartition, list[float], dict[str, np.ndarray]]:
    """Plain-gradient adaptation of a non-mutating full copy on the
    auxiliary loss only; needs no ground truth.

    The auxiliary randomness (views, random transforms) is frozen to
    ``aux_seed`` so every step descends the same sampled objective. The
    balancing parameters stay fixed. Returns the adapted partition, the
    loss trace (length steps + 1), and the first-step gradients of the
    auxiliary branch keyed by parameter name (used by the outer loop).
    """
    phi = partition
    trace: list[float] = []
    aux_branch_grads: dict[str, np.ndarray] = {}
    for step in range(steps):
        rng = np.random.Generator(np.random.PCG64(aux_seed))
        loss, _ = aux_total_loss(phi, X, Y, rng, spec, tau_in, enabled)
        if not np.isfinite(loss.data):
            raise NumericError("non-finite auxiliary loss during adaptation")
        trace.append(float(loss.data))
        grads = _all_grads(loss, phi)
        if step == 0:
            for store in (partition.aux, partition.balance):
                for name, t in store.items():
                    g = grads.get(id(t))
                    if g is not None:
                        key = ("aux." if store is partition.aux else "balance.") + name
                        aux_branch_grads[key] = g.copy()
        phi = phi.adapted_copy(
            shar=phi.shar.apply_delta(grads, alpha),
            pri=phi.pri.apply_delta(grads, alpha),
            aux=phi.aux.apply_delta(grads, alpha))
    rng = np.random.Generator(np.random.PCG64(aux_seed))
    with ad.no_grad():
        final, _ = aux_total_loss(phi, X, Y, rng, spec, tau_in, enabled)
    trace.append(float(final.data))
    return phi, trace, aux_branch_grads


# ---------------------------------------------------------------------------
# meta-auxiliary training

def meta_outer_step(partition: ParamPartition, batch: list[ScenePair],
                    config: TrainConfig, rng: np.random.Generator,
                    spec: AugmentationSpec | None = None,
                    outer_opt: str = "sgd") -> dict:
    """First-order meta update.

    Per batch element: adapt a private copy on the auxiliary loss,
    evaluate the primary loss at the adapted encoder and primary head,
    and apply those gradients to the originals (first-order MAML). The
    auxiliary branch additionally takes a direct plain-gradient update
    from its own loss. One EMA update per outer step.
    """
    if not batch:
        raise ValueError("empty batch")
    shar_acc: dict[str, np.ndarray] = {}
    pri_acc: dict[str, np.ndarray] = {}
    pri_losses = []
    aux_losses = []
    for pair in batch:
        aux_seed = int(rng.integers(0, 2**63 - 1))
        phi, trace, aux_grads = inner_adapt(
            partition, pair.source, pair.target, config.alpha,
            config.inner_steps, aux_seed, spec, config.tau_in,
            config.enabled_tasks)
        aux_losses.append(trace[0])
        # direct auxiliary-branch update at the original parameters
        line7 = {}
        for name, t in partition.aux.items():
            g = aux_grads.get("aux." + name)
            if g is not None:
                line7[id(t)] = g
        for name, t in partition.balance.items():
            g = aux_grads.get("balance." + name)
            if g is not None:
                line7[id(t)] = g
        sgd_step(partition.aux, line7, config.alpha)
        sgd_step(partition.balance, line7, config.alpha)
        # primary loss at the adapted parameters
        lp, _ = primary_loss(phi, pair, config.tau_in, config.lambda_t)
        if not np.isfinite(lp.data):
            raise NumericError("non-finite primary loss in outer step")
        pri_losses.append(float(lp.data))
        grads = ad.backward(lp, wrt=phi.shar.tensors() + phi.pri.tensors())
        for acc, phi_store in ((shar_acc, phi.shar), (pri_acc, phi.pri)):
            for name, t in phi_store.items():
                g = grads.get(id(t))
                if g is not None:
                    if name in acc:
                        acc[name] = acc[name] + g
                    else:
                        acc[name] = g
    for acc, store in ((shar_acc, partition.shar), (pri_acc, partition.pri)):
        keyed = {id(store[name]): g for name, g in acc.items()}
        if outer_opt == "adam":
            adam_step(store, keyed, config.beta)
        else:
            sgd_step(store, keyed, config.beta)
    ema_update(partition, config.ema_tau)
    return {"pri": float(np.sum(pri_losses)), "aux": float(np.sum(aux_losses))}


def _epoch_batches(n: int, batch_size: int,
                   rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def joint_train(partition: ParamPartition, pairs: list[ScenePair],
                config: TrainConfig, ckpt_dir: Path | str | None = None,
                spec: AugmentationSpec | None = None,
                start_epoch: int = 0,
                rng: np.random.Generator | None = None,
                history: list | None = None) -> Checkpoint:
    """Joint training: Adam on the combined loss, lr decayed per epoch."""
    if not pairs:
        raise ValueError("empty training set")
    if rng is None:
        rng = substream(config.seed, "joint")
    history = history if history is not None else []
    for epoch in range(start_epoch, config.joint_epochs):
        lr = config.joint_lr * (config.joint_decay ** epoch)
        losses = []
        for idx in _epoch_batches(len(pairs), config.batch_size, rng):
            stats = joint_train_step(partition, [pairs[i] for i in idx],
                                     config, lr, rng, spec)
            losses.append(stats["loss"])
        history.append({"epoch": epoch, "regime": "joint",
                        "loss": float(np.mean(losses)), "lr": lr})
        if ckpt_dir is not None:
            save_checkpoint(Path(ckpt_dir) / "joint.ckpt", partition, config,
                            epoch + 1, rng, history)
    return Checkpoint(partition, config, config.joint_epochs,
                      rng.bit_generator.state, history)


def meta_train(partition: ParamPartition, pairs: list[ScenePair],
               config: TrainConfig, ckpt_dir: Path | str | None = None,
               spec: AugmentationSpec | None = None,
               start_epoch: int = 0,
               rng: np.random.Generator | None = None,
               history: list | None = None,
               outer_opt: str = "adam") -> Checkpoint:
    """Meta-auxiliary training over shuffled batches; deterministic per seed."""
    if not pairs:
        raise ValueError("empty training set")
    if rng is None:
        rng = substream(config.seed, "meta")
    history = history if history is not None else []
    for epoch in range(start_epoch, config.meta_epochs):
        pri_losses = []
        for idx in _epoch_batches(len(pairs), config.batch_size, rng):
            stats = meta_outer_step(partition, [pairs[i] for i in idx],
                                    config, rng, spec, outer_opt=outer_opt)
            pri_losses.append(stats["pri"])
        history.append({"epoch": epoch, "regime": "meta",
                        "pri_loss": float(np.mean(pri_losses))})
        if ckpt_dir is not None:
            save_checkpoint(Path(ckpt_dir) / "meta.ckpt", partition, config,
                            epoch + 1, rng, history)
    return Checkpoint(partition, config, config.meta_epochs,
                      rng.bit_generator.state, history)


# ---------------------------------------------------------------------------
# test-time adaptation

def tta_register(partition: ParamPartition, X: PointCloud, Y: PointCloud,
                 alpha: float, tta_steps: int, aux_seed: int = 0,
                 spec: AugmentationSpec | None = None, tau_in: float = 0.10,
                 enabled: tuple[bool, bool, bool] = (True, True, True),
                 ) -> RegistrationResult:
    """Adapt a private copy on the auxiliary loss, then register.

    The original parameters are never modified, so every test instance
    adapts from the same starting point. Safeguard: if the auxiliary loss
    increased over the trace, retry once with alpha/2; if it still
    increased, fall back to the unadapted parameters.
    """
    if tta_steps == 0:
        return register(partition, X, Y)
    phi, trace, _ = inner_adapt(partition, X, Y, alpha, tta_steps, aux_seed,
                                spec, tau_in, enabled)
    fallback = False
    if trace[-1] > trace[0]:
        phi, trace, _ = inner_adapt(partition, X, Y, alpha / 2.0, tta_steps,
                                    aux_seed, spec, tau_in, enabled)
        if trace[-1] > trace[0]:
            phi = partition
            fallback = True
    result = register(phi, X, Y)
    result.aux_loss_trace = trace
    result.fallback = fallback
    return result


# ---------------------------------------------------------------------------
# evaluation

def pair_seed(seed: int, pair_id: str) -> int:
    digest = hashlib.sha256(f"{seed}/{pair_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little") % (2**63 - 1)


def evaluate(partition: ParamPartition, pairs: list[ScenePair],
             thresholds: EvalThresholds, mode: str, config: TrainConfig,
             spec: AugmentationSpec | None = None) -> dict:
    """Per-pair registration results plus per-profile and overall aggregates."""
    if not pairs:
        raise ValueError("empty evaluation split")
    if mode not in ("plain", "tta"):
        raise ConfigError(f"unknown evaluation mode {mode!r}")

    workers = int(os.environ.get("PTTA_THREADS", "1"))

    def run_one(pair: ScenePair) -> RegistrationResult:
        # adaptation accumulates gradients on the starting tensors, so
        # concurrent workers each take a private copy of the parameters
        part = partition.clone() if workers > 1 and mode == "tta" else partition
        if mode == "tta":
            res = tta_register(part, pair.source, pair.target,
                               config.alpha, config.tta_steps,
                               pair_seed(config.seed, pair.pair_id),
                               spec, config.tau_in, config.enabled_tasks)
        else:
            res = register(part, pair.source, pair.target)
        return score_result(res, pair.gt, thresholds)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_one, pairs))
    else:
        results = [run_one(p) for p in pairs]

    rows = [{"pair_id": p.pair_id, "profile": p.profile_name,
             "re": r.re, "te": r.te, "success": r.success,
             "fallback": r.fallback, "aux_loss_trace": list(r.aux_loss_trace)}
            for p, r in zip(pairs, results)]

    def agg(sel_rows):
        res = [r for r in sel_rows]
        return {
            "n": len(res),
            "rr": float(np.mean([r["success"] for r in res])),
            "mean_re": float(np.mean([r["re"] for r in res])),
            "median_re": float(np.median([r["re"] for r in res])),
            "mean_te": float(np.mean([r["te"] for r in res])),
            "median_te": float(np.median([r["te"] for r in res])),
            "fallback_rate": float(np.mean([r["fallback"] for r in res])),
        }

    profiles = sorted({p.profile_name for p in pairs})
    aggregates = {name: agg([r for r in rows if r["profile"] == name])
                  for name in profiles}
    aggregates["overall"] = agg(rows)
    return {"mode": mode, "rows": rows, "aggregates": aggregates,
            "thresholds": {"re_max": thresholds.re_max, "te_max": thresholds.te_max}}


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path: Path | str, partition: ParamPartition,
                    config: TrainConfig, epoch: int,
                    rng: np.random.Generator | dict, history: list) -> None:
    tensors: dict[str, np.ndarray] = {}
    store_names = {"shar": partition.shar, "pri": partition.pri,
                   "aux": partition.aux, "balance": partition.balance,
                   "target": partition.byol_target}
    adam_t = {}
    for prefix, store in store_names.items():
        for name, t in store.items():
            tensors[f"{prefix}/{name}"] = t.data
        for name, arr in store._adam_m.items():
            tensors[f"adam_m/{prefix}/{name}"] = arr
        for name, arr in store._adam_v.items():
            tensors[f"adam_v/{prefix}/{name}"] = arr
        adam_t[prefix] = store._adam_t
    state = rng if isinstance(rng, dict) else rng.bit_generator.state
    meta = {
        "kind": "ptta-checkpoint",
        "encoder_config": asdict(partition.config),
        "train_config": asdict(config),
        "epoch": epoch,
        "rng_state": _jsonable(state),
        "history": history,
        "adam_t": adam_t,
    }
    save_tensor_file(path, tensors, meta)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj


def load_checkpoint(path: Path | str) -> Checkpoint:
    tensors, meta = load_tensor_file(path)
    if meta.get("kind") != "ptta-checkpoint":
        raise ConfigError(f"not a checkpoint file: {path}")
    enc_config = EncoderConfig(**meta["encoder_config"])
    config = TrainConfig(**meta["train_config"])
    partition = init_partition(enc_config, np.random.default_rng(0))
    store_names = {"shar": partition.shar, "pri": partition.pri,
                   "aux": partition.aux, "balance": partition.balance,
                   "target": partition.byol_target}
    for prefix, store in store_names.items():
        for name, t in store.items():
            key = f"{prefix}/{name}"
            if tensors[key].shape != t.data.shape:
                raise ConfigError(f"checkpoint shape mismatch for {key}")
            t.data[...] = tensors[key]
        store._adam_m = {name: tensors[f"adam_m/{prefix}/{name}"].copy()
                         for name in store.names()
                         if f"adam_m/{prefix}/{name}" in tensors}
        store._adam_v = {name: tensors[f"adam_v/{prefix}/{name}"].copy()
                         for name in store.names()
                         if f"adam_v/{prefix}/{name}" in tensors}
        store._adam_t = meta["adam_t"][prefix]
    return Checkpoint(partition=partition, config=config, epoch=meta["epoch"],
                      rng_state=meta["rng_state"], history=meta["history"])


def rng_from_state(state: dict) -> np.random.Generator:
    gen = np.random.Generator(np.random.PCG64())
    gen.bit_generator.state = state
    return gen
