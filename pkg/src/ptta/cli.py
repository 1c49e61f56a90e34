"""Command-line entry points: generate, train-joint, train-meta, eval, register.

Exit codes partition error classes: config (2), data I/O (3), numeric
failure (4), internal invariant (5).
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, load_run_config
from .errors import ConfigError, PttaError
from .geometry import (EvalThresholds, PointCloud, rotation_error,
                       translation_error, RigidTransform)
from .metatrain import (Checkpoint, evaluate, joint_train, load_checkpoint,
                        meta_train, rng_from_state, save_checkpoint, substream,
                        tta_register)
from .networks import init_partition
from .registration import register
from .synthdata import generate_dataset, read_cloud, read_dataset, write_dataset


def _collect_overrides(args: argparse.Namespace) -> dict:
    mapping = {
        "seed": "seed", "out_dir": "out_dir", "alpha": "train.alpha",
        "beta": "train.beta", "tta_steps": "train.tta_steps",
        "use_rec": "train.use_rec", "use_byol": "train.use_byol",
        "use_cc": "train.use_cc", "use_meta": "train.use_meta",
        "use_tta": "train.use_tta",
    }
    out = {}
    for attr, key in mapping.items():
        val = getattr(args, attr, None)
        if val is not None:
            out[key] = val
    return out


def _load_config(args: argparse.Namespace) -> RunConfig:
    return load_run_config(getattr(args, "config", None), _collect_overrides(args))


def _splits(cfg: RunConfig, manifest) -> None:
    """Assign splits: 'train'-role profiles go to train/val, 'test'-role to
    test, 'both' follows the configured three-way fractions."""
    role_of = {p.name: role for p, role in cfg.domain_profiles()}
    rng = substream(cfg.seed, "split")
    tr, va, te = cfg.split
    for entry in manifest.entries:
        role = role_of.get(entry.profile_name, "both")
        u = rng.random()
        if role == "test":
            entry.split = "test"
        elif role == "train":
            denom = tr + va
            entry.split = "train" if denom == 0 or u < tr / denom else "val"
        else:
            entry.split = "train" if u < tr else ("val" if u < tr + va else "test")


def cmd_generate(args) -> int:
    cfg = _load_config(args)
    profiles = [p for p, _ in cfg.domain_profiles()]
    pairs, manifest = generate_dataset(profiles, cfg.pairs_per_profile, cfg.seed)
    _splits(cfg, manifest)
    write_dataset(pairs, manifest, cfg.data_dir)
    counts = {}
    for e in manifest.entries:
        counts[e.split] = counts.get(e.split, 0) + 1
    print(f"wrote {len(pairs)} pairs to {cfg.data_dir} "
          f"(profiles: {[p.name for p in profiles]}, splits: {counts})")
    return 0


def _loss_curve_csv(path: Path, history: list) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        keys = sorted({k for h in history for k in h})
        writer.writerow(keys)
        for h in history:
            writer.writerow([h.get(k, "") for k in keys])


def cmd_train_joint(args) -> int:
    cfg = _load_config(args)
    pairs, manifest = read_dataset(cfg.data_dir)
    train_pairs = [p for p, e in zip(pairs, manifest.entries) if e.split == "train"]
    tconfig = cfg.train_config()
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "joint.ckpt"
    if args.resume and ckpt_path.exists():
        ckpt = load_checkpoint(ckpt_path)
        partition, start = ckpt.partition, ckpt.epoch
        rng, history = rng_from_state(ckpt.rng_state), ckpt.history
    else:
        partition = init_partition(cfg.encoder_config(), substream(cfg.seed, "init"))
        start, rng, history = 0, None, None
    result = joint_train(partition, train_pairs, tconfig, ckpt_dir=out_dir,
                         spec=cfg.augmentation_spec(), start_epoch=start,
                         rng=rng, history=history)
    if result.history:
        _loss_curve_csv(out_dir / "loss_joint.csv", result.history)
    if not ckpt_path.exists():  # zero-epoch run still produces a checkpoint
        save_checkpoint(ckpt_path, partition, tconfig, 0,
                        substream(cfg.seed, "joint"), [])
    print(f"joint checkpoint: {ckpt_path} "
          f"({partition.num_parameters()} parameters)")
    return 0


def cmd_train_meta(args) -> int:
    cfg = _load_config(args)
    pairs, manifest = read_dataset(cfg.data_dir)
    train_pairs = [p for p, e in zip(pairs, manifest.entries) if e.split == "train"]
    tconfig = cfg.train_config()
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    init_path = Path(args.checkpoint) if args.checkpoint else out_dir / "joint.ckpt"
    meta_path = out_dir / "meta.ckpt"
    if args.resume and meta_path.exists():
        ckpt = load_checkpoint(meta_path)
        partition, start = ckpt.partition, ckpt.epoch
        rng, history = rng_from_state(ckpt.rng_state), ckpt.history
    elif args.from_scratch:
        partition = init_partition(cfg.encoder_config(), substream(cfg.seed, "init"))
        start, rng, history = 0, None, None
    elif init_path.exists():
        ckpt = load_checkpoint(init_path)
        partition, start, rng, history = ckpt.partition, 0, None, None
    else:
        raise ConfigError(f"no joint checkpoint at {init_path}; "
                          "run train-joint first or pass --from-scratch")
    result = meta_train(partition, train_pairs, tconfig, ckpt_dir=out_dir,
                        spec=cfg.augmentation_spec(), start_epoch=start,
                        rng=rng, history=history)
    if result.history:
        _loss_curve_csv(out_dir / "loss_meta.csv", result.history)
    if not meta_path.exists():
        save_checkpoint(meta_path, partition, tconfig, 0,
                        substream(cfg.seed, "meta"), [])
    print(f"meta checkpoint: {meta_path}")
    return 0


def _report_paths(out_dir: Path, mode: str) -> tuple[Path, Path, Path]:
    return (out_dir / f"report_{mode}.csv", out_dir / f"report_{mode}.txt",
            out_dir / f"curves_{mode}.csv")


def write_report(out_dir: Path, mode: str, report: dict, cfg: RunConfig,
                 ckpt_hash: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path, txt_path, curves_path = _report_paths(out_dir, mode)
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["pair_id", "profile", "re", "te", "success", "fallback"])
        for row in report["rows"]:
            writer.writerow([row["pair_id"], row["profile"], row["re"],
                             row["te"], int(row["success"]), int(row["fallback"])])
    payload = {"config": cfg.echo(), "checkpoint_sha256": ckpt_hash, **report}
    txt_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    # recall-vs-threshold curve sweep
    re_grid = np.linspace(1.0, 20.0, 20)
    te_grid = np.linspace(0.05, 0.60, 12)
    res = np.array([[row["re"], row["te"]] for row in report["rows"]])
    with open(curves_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["re_max", "te_max", "rr"])
        for re_max in re_grid:
            for te_max in te_grid:
                rr = float(np.mean((res[:, 0] <= re_max) & (res[:, 1] <= te_max)))
                writer.writerow([f"{re_max:.6g}", f"{te_max:.6g}", f"{rr:.10g}"])


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    pairs, manifest = read_dataset(cfg.data_dir)
    split = args.split
    eval_pairs = [p for p, e in zip(pairs, manifest.entries) if e.split == split]
    ckpt_path = Path(args.checkpoint) if args.checkpoint else (
        Path(cfg.out_dir) / "meta.ckpt")
    ckpt = load_checkpoint(ckpt_path)
    tconfig = cfg.train_config()
    thresholds = EvalThresholds(**cfg.thresholds)
    report = evaluate(ckpt.partition, eval_pairs, thresholds, args.mode,
                      tconfig, cfg.augmentation_spec())
    ckpt_hash = hashlib.sha256(ckpt_path.read_bytes()).hexdigest()
    write_report(Path(cfg.out_dir), args.mode, report, cfg, ckpt_hash)
    overall = report["aggregates"]["overall"]
    print(f"{args.mode} on {split}: RR={overall['rr']:.4f} "
          f"mean RE={overall['mean_re']:.3f} deg mean TE={overall['mean_te']:.4f} m "
          f"({overall['n']} pairs)")
    return 0


def cmd_register(args) -> int:
    cfg = _load_config(args)
    ckpt = load_checkpoint(args.checkpoint)
    src = read_cloud(args.source)
    tgt = read_cloud(args.target)
    tconfig = cfg.train_config()
    if args.tta:
        res = tta_register(ckpt.partition, src, tgt, tconfig.alpha,
                           tconfig.tta_steps, aux_seed=cfg.seed,
                           spec=cfg.augmentation_spec(), tau_in=tconfig.tau_in,
                           enabled=tconfig.enabled_tasks)
    else:
        res = register(ckpt.partition, src, tgt)
    T = res.predicted
    row_major = np.hstack([T.R, T.t.reshape(3, 1)]).reshape(-1)
    print(" ".join(f"{v:.17g}" for v in row_major))
    payload = {"transform_3x4_row_major": row_major.tolist(),
               "tta": bool(args.tta),
               "aux_loss_trace": list(res.aux_loss_trace),
               "fallback": res.fallback}
    if args.gt:
        gt_vals = np.loadtxt(args.gt).reshape(3, 4)
        gt = RigidTransform(gt_vals[:, :3], gt_vals[:, 3])
        payload["re"] = rotation_error(T, gt)
        payload["te"] = translation_error(T, gt)
        print(f"RE={payload['re']:.6f} deg TE={payload['te']:.6f} m")
    if args.out:
        Path(args.out).write_text(json.dumps(payload, indent=2) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ptta",
        description="Test-time-adaptive point cloud registration toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", type=str, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out-dir", dest="out_dir", type=str, default=None)
        p.add_argument("--alpha", type=float, default=None)
        p.add_argument("--beta", type=float, default=None)
        p.add_argument("--tta-steps", dest="tta_steps", type=int, default=None)
        for flag in ("use-rec", "use-byol", "use-cc", "use-meta", "use-tta"):
            p.add_argument(f"--{flag}", dest=flag.replace("-", "_"),
                           action=argparse.BooleanOptionalAction, default=None)

    p = sub.add_parser("generate", help="generate a synthetic dataset")
    add_common(p)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("train-joint", help="joint primary + auxiliary training")
    add_common(p)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(fn=cmd_train_joint)

    p = sub.add_parser("train-meta", help="meta-auxiliary training")
    add_common(p)
    p.add_argument("--checkpoint", type=str, default=None)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--from-scratch", dest="from_scratch", action="store_true")
    p.set_defaults(fn=cmd_train_meta)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    add_common(p)
    p.add_argument("--checkpoint", type=str, default=None)
    p.add_argument("--mode", choices=("plain", "tta"), default="plain")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("register", help="register two .ptta cloud files")
    add_common(p)
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--tta", action="store_true")
    p.add_argument("--gt", type=str, default=None)
    p.add_argument("--out", type=str, default=None)
    p.add_argument("source", type=str)
    p.add_argument("target", type=str)
    p.set_defaults(fn=cmd_register)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except PttaError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
