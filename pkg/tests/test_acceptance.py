"""End-to-end acceptance gate.

Each test exercises one numbered criterion and prints a single
``ACCEPTANCE n: PASS/FAIL`` line (run with ``pytest -s`` to see them all).
Criteria 6 and 7 share one benchmark run (three training seeds, a fixed
shifted test set) provided by a module-scoped fixture; that run takes the
bulk of the suite's time.
"""
import dataclasses
import json
import time

import numpy as np
import pytest

from ptta import autodiff as ad
from ptta.autodiff import Tensor, backward
from ptta.auxtasks import (AugmentationSpec, aux_total_loss,
                           balance_weights, byol_alignment_loss, byol_loss,
                           cc_loss, reconstruction_loss)
from ptta.geometry import (EvalThresholds, PointCloud, RigidTransform,
                           rot_z, registration_recall, rotation_error,
                           sample_random_transform, translation_error)
from ptta.metatrain import (TrainConfig, evaluate, inner_adapt, joint_train,
                            load_checkpoint, meta_outer_step, meta_train,
                            pair_seed, rng_from_state, save_checkpoint,
                            substream)
from ptta.networks import EncoderConfig, ema_update, init_partition
from ptta.registration import (CorrespondenceSet, match_features,
                               primary_loss, weighted_procrustes)
from ptta.synthdata import (DomainProfile, generate_dataset, read_dataset,
                            write_dataset)


def _verdict(n: int, ok: bool, detail: str = "") -> None:
    print(f"\nACCEPTANCE {n}: {'PASS' if ok else 'FAIL'}"
          + (f" ({detail})" if detail else ""))


SMALL = EncoderConfig(feature_dim=8, hidden=8, k=4, proj_dim=4,
                      head_hidden=8, dec_hidden=8)


def small_partition(seed=0):
    return init_partition(SMALL, np.random.default_rng(seed))


def small_pair(seed=0, n=48, profile=None):
    profile = profile or DomainProfile(name="unit", point_count=n,
                                       noise_sigma=0.003,
                                       outlier_fraction=0.05,
                                       overlap_ratio=0.7)
    from ptta.synthdata import generate_scene, make_pair
    rng = np.random.default_rng(seed)
    scene = generate_scene(profile, rng)
    return make_pair(scene, profile, rng)


# ---------------------------------------------------------------------------
# 1. closed-form alignment oracle

def test_criterion_1_procrustes_oracle():
    t0 = time.time()
    rng = np.random.default_rng(11)
    worst_re = worst_te = 0.0
    for trial in range(1000):
        x = rng.normal(size=(32, 3))
        T = sample_random_transform(rng, 360.0, 0.60)
        y = x @ T.R.T + T.t
        if trial % 2 == 0:
            corr = CorrespondenceSet(
                np.column_stack([np.arange(32), np.arange(32)]))
            est = weighted_procrustes(PointCloud(x), PointCloud(y), corr)
        else:
            # 20% of pairs replaced by junk but given zero weight
            n_out = 6  # ~20% of 32
            xo = np.vstack([x, rng.normal(size=(n_out, 3)) * 5])
            yo = np.vstack([y, rng.normal(size=(n_out, 3)) * 5])
            w = np.concatenate([np.ones(32), np.zeros(n_out)])
            corr = CorrespondenceSet(
                np.column_stack([np.arange(38), np.arange(38)]), weights=w)
            est = weighted_procrustes(PointCloud(xo), PointCloud(yo), corr)
        worst_re = max(worst_re, rotation_error(est, T))
        worst_te = max(worst_te, translation_error(est, T))
    elapsed = time.time() - t0
    ok = worst_re < 1e-6 and worst_te < 1e-9 and elapsed < 10.0
    _verdict(1, ok, f"worst RE={worst_re:.2e} deg, worst TE={worst_te:.2e} m, "
                    f"{elapsed:.1f}s")
    assert worst_re < 1e-6
    assert worst_te < 1e-9
    assert elapsed < 10.0


# ---------------------------------------------------------------------------
# 2. finite-difference gradient suite over every loss head

def _central_diff(loss_fn, flat, i, h):
    orig = flat[i]
    flat[i] = orig + h
    with ad.no_grad():
        fp = float(loss_fn().data)
    flat[i] = orig - h
    with ad.no_grad():
        fm = float(loss_fn().data)
    flat[i] = orig
    return (fp - fm) / (2.0 * h)


def _fd_check(loss_fn, tensors, rng, n_coords=20, h=1e-6, tol=1e-4):
    """Sample coordinates across the given parameter tensors and compare
    reverse-mode gradients against central differences.

    The losses are piecewise smooth (nearest-neighbour matching, relu,
    clamping); a coordinate sitting on a kink gives inconsistent finite
    differences at different step sizes and is resampled rather than
    counted as a gradient error. The second-step-size consistency check
    runs only when the first difference disagrees with the analytic value,
    which keeps the common case at two loss evaluations per coordinate.
    """
    grads = backward(loss_fn(), wrt=tensors)
    worst = 0.0
    checked = 0
    sizes = np.array([t.size for t in tensors], dtype=float)
    attempts = 0
    while checked < n_coords and attempts < 6 * n_coords:
        attempts += 1
        t = tensors[rng.choice(len(tensors), p=sizes / sizes.sum())]
        flat = t.data.reshape(-1)
        i = int(rng.integers(flat.size))
        n1 = _central_diff(loss_fn, flat, i, h)
        analytic = grads[id(t)].reshape(-1)[i]
        if max(abs(n1), abs(analytic)) < 1e-6:
            continue  # derivative below FD resolution: no signal to compare
        rel = abs(n1 - analytic) / max(abs(n1), abs(analytic))
        if rel > 0.5 * tol:
            n2 = _central_diff(loss_fn, flat, i, 8 * h)
            if abs(n1 - n2) > 1e-3 * max(abs(n1), abs(n2), 1e-6):
                continue  # non-smooth point: FD itself is unreliable here
        worst = max(worst, rel)
        checked += 1
    assert checked >= n_coords // 2, "too few smooth coordinates found"
    return worst


def test_criterion_2_gradient_suite():
    t0 = time.time()
    results = {}
    for inst in range(10):
        part = small_partition(seed=inst)
        pair = small_pair(seed=100 + inst)
        P = pair.source
        spec = AugmentationSpec()
        params = part.shar.tensors() + part.pri.tensors() + \
            part.aux.tensors() + part.balance.tensors()
        rng = np.random.default_rng(7000 + inst)
        heads = {
            "reconstruction": (lambda: reconstruction_loss(part, P),
                               part.shar.tensors() + part.aux.tensors(), 1e-4),
            "byol": (lambda: byol_loss(part, P, spec,
                                       np.random.default_rng(5)),
                     part.shar.tensors() + part.aux.tensors(), 1e-4),
            "cc": (lambda: cc_loss(part, P, np.random.default_rng(6)),
                   part.shar.tensors() + part.aux.tensors(), 1e-4),
            "aux_total": (lambda: aux_total_loss(
                part, pair.source, pair.target,
                np.random.default_rng(8))[0], params, 1e-4),
            "balance": (lambda: ad.reduce_sum(
                balance_weights(part.balance["c"])
                * Tensor(np.array([1.0, 2.0, 3.0]))),
                part.balance.tensors(), 1e-4),
            # the primary loss includes the Procrustes rotation path
            "primary": (lambda: primary_loss(part, pair)[0], params, 1e-2),
        }
        for name, (fn, tensors, tol) in heads.items():
            worst = _fd_check(fn, tensors, rng, tol=tol)
            results.setdefault(name, []).append(worst)
            assert worst < tol, (name, inst, worst)
    elapsed = time.time() - t0
    summary = ", ".join(f"{k}={max(v):.1e}" for k, v in results.items())
    ok = elapsed < 120.0
    _verdict(2, ok, f"max rel err per head: {summary}; {elapsed:.0f}s")
    assert elapsed < 120.0


# ---------------------------------------------------------------------------
# 3. formula fixtures: BYOL endpoints, balance weights, EMA decay

def test_criterion_3_formula_fixtures():
    # symmetric BYOL loss on parallel / orthogonal / antiparallel fixtures
    e1 = np.array([[1.0, 0.0, 0.0]])
    e2 = np.array([[0.0, 1.0, 0.0]])
    vals = []
    for z in (e1, e2, -e1):
        sym = byol_alignment_loss(Tensor(e1), z).data \
            + byol_alignment_loss(Tensor(z.copy()), e1[0]).data
        vals.append(float(sym))
    byol_ok = (abs(vals[0] - 0.0) < 1e-9 and abs(vals[1] - 4.0) < 1e-9
               and abs(vals[2] - 8.0) < 1e-9)

    lam = balance_weights(Tensor(np.ones(3))).data
    balance_ok = np.abs(lam - 1.0 / 3.0).max() < 1e-12

    # geometric decay: with frozen online weights the target gap after
    # 100 steps is tau^100 times the initial gap
    part = small_partition(seed=3)
    name = part.byol_target.names()[0]
    part.byol_target[name].data += 1.0
    for _ in range(100):
        ema_update(part, tau=0.97)
    gap = part.byol_target[name].data - part.shar[name].data
    ema_ok = np.abs(gap - 0.97 ** 100).max() < 1e-12

    ok = byol_ok and balance_ok and ema_ok
    _verdict(3, ok, f"byol={['%.3g' % v for v in vals]}, "
                    f"lam err={np.abs(lam - 1/3).max():.1e}, "
                    f"ema err={np.abs(gap - 0.97**100).max():.1e}")
    assert byol_ok and balance_ok and ema_ok


# ---------------------------------------------------------------------------
# 4. first-order meta update against an independently computed oracle

def _store_grads_by_name(loss, store):
    grads = backward(loss, wrt=store.tensors())
    return {name: grads[id(t)].copy() for name, t in store.items()}


def _fomaml_oracle(partition, batch, config, rng):
    """Recompute the first-order meta update from the raw losses with plain
    numpy arithmetic: K inner plain-gradient steps on the auxiliary loss,
    a direct first-step update on the auxiliary branch, and an outer
    plain-gradient step on the primary loss at the adapted parameters."""
    shar_g = {n: np.zeros_like(t.data) for n, t in partition.shar.items()}
    pri_g = {n: np.zeros_like(t.data) for n, t in partition.pri.items()}
    for pair in batch:
        aux_seed = int(rng.integers(0, 2**63 - 1))
        phi = partition.clone()
        phi = phi.adapted_copy(shar=phi.shar, pri=phi.pri, aux=phi.aux)
        # keep balance/target identical to theta (shared in the real path)
        phi.balance.copy_values_from(partition.balance)
        first_step = None
        for _ in range(config.inner_steps):
            arng = np.random.Generator(np.random.PCG64(aux_seed))
            loss, _ = aux_total_loss(phi, pair.source, pair.target, arng,
                                     None, config.tau_in, config.enabled_tasks)
            grads = backward(loss, wrt=phi.shar.tensors() + phi.pri.tensors()
                             + phi.aux.tensors() + phi.balance.tensors())
            if first_step is None:
                first_step = {
                    "aux": {n: grads[id(t)].copy()
                            for n, t in phi.aux.items()},
                    "c": grads[id(phi.balance["c"])].copy()}
            for store in (phi.shar, phi.pri, phi.aux):
                for n, t in store.items():
                    t.data[...] = t.data - config.alpha * grads[id(t)]
        # direct auxiliary-branch update at the original parameters
        for n, t in partition.aux.items():
            t.data[...] = t.data - config.alpha * first_step["aux"][n]
        partition.balance["c"].data[...] -= config.alpha * first_step["c"]
        lp, _ = primary_loss(phi, pair, config.tau_in, config.lambda_t)
        grads = backward(lp, wrt=phi.shar.tensors() + phi.pri.tensors())
        for n, t in phi.shar.items():
            shar_g[n] += grads[id(t)]
        for n, t in phi.pri.items():
            pri_g[n] += grads[id(t)]
    for n, t in partition.shar.items():
        t.data[...] = t.data - config.beta * shar_g[n]
    for n, t in partition.pri.items():
        t.data[...] = t.data - config.beta * pri_g[n]
    ema_update(partition, config.ema_tau)


def test_criterion_4_meta_update_oracle():
    config = TrainConfig(alpha=1e-3, beta=2e-3, inner_steps=2, batch_size=2,
                         seed=0)
    batch = [small_pair(seed=41), small_pair(seed=42)]

    engine = small_partition(seed=4)
    oracle = engine.clone()
    meta_outer_step(engine, batch, config, np.random.default_rng(17),
                    outer_opt="sgd")
    _fomaml_oracle(oracle, batch, config, np.random.default_rng(17))
    diffs = []
    for s_eng, s_ora in zip(engine.trainable_stores(),
                            oracle.trainable_stores()):
        for (n, t), (_, u) in zip(s_eng.items(), s_ora.items()):
            diffs.append(np.abs(t.data - u.data).max())
    worst = max(diffs)
    match_ok = worst < 1e-12

    # alpha = 0: no adaptation, update reduces to plain-gradient descent on
    # the primary loss at theta; auxiliary branch and balance stay put
    cfg0 = dataclasses.replace(config, alpha=0.0)
    p_a0 = small_partition(seed=5)
    ref = p_a0.clone()
    aux_before = p_a0.aux.value_hash()
    c_before = p_a0.balance["c"].data.copy()
    meta_outer_step(p_a0, batch, cfg0, np.random.default_rng(17),
                    outer_opt="sgd")
    for pair in batch:
        lp, _ = primary_loss(ref, pair, cfg0.tau_in, cfg0.lambda_t)
        grads = backward(lp, wrt=ref.shar.tensors() + ref.pri.tensors())
        for store in (ref.shar, ref.pri):
            for n, t in store.items():
                t.data[...] = t.data - 0.0  # accumulate below instead
        # accumulate per-name so both pairs sum before the single step
        if pair is batch[0]:
            acc = {id(t): grads[id(t)].copy()
                   for t in ref.shar.tensors() + ref.pri.tensors()}
        else:
            for t in ref.shar.tensors() + ref.pri.tensors():
                acc[id(t)] += grads[id(t)]
    for store in (ref.shar, ref.pri):
        for n, t in store.items():
            t.data[...] = t.data - cfg0.beta * acc[id(t)]
    ema_update(ref, cfg0.ema_tau)
    alpha0_ok = (max(np.abs(a.data - b.data).max()
                     for a, b in zip(p_a0.trainable_tensors(),
                                     ref.trainable_tensors())) < 1e-12
                 and p_a0.aux.value_hash() == aux_before
                 and np.array_equal(p_a0.balance["c"].data, c_before))

    # beta = 0: encoder and primary head unchanged by the outer step
    cfgb = dataclasses.replace(config, beta=0.0)
    p_b0 = small_partition(seed=6)
    shar_before = p_b0.shar.value_hash()
    pri_before = p_b0.pri.value_hash()
    meta_outer_step(p_b0, batch, cfgb, np.random.default_rng(17),
                    outer_opt="sgd")
    beta0_ok = (p_b0.shar.value_hash() == shar_before
                and p_b0.pri.value_hash() == pri_before)

    ok = match_ok and alpha0_ok and beta0_ok
    _verdict(4, ok, f"max |engine - oracle| = {worst:.2e}, "
                    f"alpha0={alpha0_ok}, beta0={beta0_ok}")
    assert match_ok and alpha0_ok and beta0_ok


# ---------------------------------------------------------------------------
# 5. nearest-neighbour matching against brute force

def test_criterion_5_matching_oracle():
    rng = np.random.default_rng(55)
    agree = True
    for _ in range(100):
        m, n, d = rng.integers(2, 40), rng.integers(2, 40), rng.integers(2, 9)
        fs, ft = rng.normal(size=(m, d)), rng.normal(size=(n, d))
        corr = match_features(fs, ft)
        brute = np.array([
            int(np.argmin([np.sum((f - g) ** 2) for g in ft])) for f in fs])
        agree &= np.array_equal(corr.pairs[:, 1], brute)
    # tie fixtures: equidistant targets resolve to the smallest index
    fs = np.array([[0.0, 0.0]])
    ft = np.array([[2.0, 0.0], [0.0, 2.0], [-2.0, 0.0]])
    ties_ok = match_features(fs, ft).pairs[0, 1] == 0
    dup = np.array([[1.0, 1.0], [1.0, 1.0]])
    dup_ok = match_features(dup, dup).pairs[:, 1].tolist() == [0, 0]
    ok = agree and ties_ok and dup_ok
    _verdict(5, ok, f"100 instances exact, ties={ties_ok}, dups={dup_ok}")
    assert agree and ties_ok and dup_ok


# ---------------------------------------------------------------------------
# 6 + 7. scaled-down adaptation benchmark (one run shared by both criteria)

BENCH_CONFIG = EncoderConfig(feature_dim=64, hidden=80, k=16, proj_dim=32,
                             head_hidden=80, dec_hidden=80)
BENCH_TRAIN = DomainProfile(name="clean", shape_mix={"gauss": 1.0},
                            point_count=192, noise_sigma=0.004,
                            outlier_fraction=0.0, overlap_ratio=0.85)
# shift: 2x noise, 0.5x density, lower overlap
BENCH_TEST = DomainProfile(name="shifted", shape_mix={"gauss": 1.0},
                           point_count=96, noise_sigma=0.008,
                           outlier_fraction=0.0, overlap_ratio=0.75)
BENCH_SEEDS = (0, 1, 2)
REGIMES = ("plain", "+tta", "+meta", "full")


@pytest.fixture(scope="module")
def benchmark_run():
    """Train/evaluate all four regimes for three seeds on a fixed shifted
    test set; returns {seed: {regime: report}} plus the joint wall times."""
    train_pairs, _ = generate_dataset([BENCH_TRAIN], 64, seed=101)
    test_pairs, _ = generate_dataset([BENCH_TEST], 200, seed=202)
    thresholds = EvalThresholds()
    out = {}
    joint_times = []
    for seed in BENCH_SEEDS:
        config = TrainConfig(seed=seed, joint_epochs=10, joint_lr=1e-3,
                             batch_size=4, meta_epochs=8, alpha=1e-3,
                             beta=5e-4, tta_steps=3)
        partition = init_partition(BENCH_CONFIG, np.random.default_rng(seed))
        t0 = time.time()
        joint_train(partition, train_pairs, config)
        joint_times.append(time.time() - t0)
        joint_part = partition.clone()
        meta_train(partition, train_pairs, config)
        reports = {}
        for regime, part, mode in (("plain", joint_part, "plain"),
                                   ("+tta", joint_part, "tta"),
                                   ("+meta", partition, "plain"),
                                   ("full", partition, "tta")):
            reports[regime] = evaluate(part, test_pairs, thresholds, mode,
                                       config)
        out[seed] = reports
    return {"reports": out, "joint_times": joint_times,
            "n_test": len(test_pairs)}


def _benchmark_table(reports) -> str:
    """Four-regime comparison table: recall and errors per regime, seed
    columns plus the mean over seeds."""
    lines = [f"{'regime':>8} | " + "  ".join(f"RR s{s}" for s in BENCH_SEEDS)
             + " | mean RR | mean RE (deg) | mean TE (m)"]
    lines.append("-" * len(lines[0]))
    for regime in REGIMES:
        rrs = [reports[s][regime]["aggregates"]["overall"]["rr"]
               for s in BENCH_SEEDS]
        res = [reports[s][regime]["aggregates"]["overall"]["mean_re"]
               for s in BENCH_SEEDS]
        tes = [reports[s][regime]["aggregates"]["overall"]["mean_te"]
               for s in BENCH_SEEDS]
        lines.append(f"{regime:>8} | " + "  ".join(f"{r:5.2f}" for r in rrs)
                     + f" |   {np.mean(rrs):5.3f} |        {np.mean(res):6.2f}"
                     + f" |      {np.mean(tes):6.3f}")
    return "\n".join(lines)


def test_criterion_6_adaptation_benchmark(benchmark_run, tmp_path):
    reports = benchmark_run["reports"]
    table = _benchmark_table(reports)
    (tmp_path / "benchmark_table.txt").write_text(table + "\n")
    print("\n" + table)

    def mean_of(regime, key):
        return float(np.mean(
            [reports[s][regime]["aggregates"]["overall"][key]
             for s in BENCH_SEEDS]))

    rr_ok = mean_of("full", "rr") >= mean_of("plain", "rr")
    re_ok = mean_of("full", "mean_re") <= mean_of("plain", "mean_re")
    te_ok = mean_of("full", "mean_te") <= mean_of("plain", "mean_te")
    wins = sum(reports[s]["full"]["aggregates"]["overall"]["rr"]
               > reports[s]["plain"]["aggregates"]["overall"]["rr"]
               for s in BENCH_SEEDS)
    time_ok = max(benchmark_run["joint_times"]) < 1800.0
    n_ok = benchmark_run["n_test"] >= 200

    ok = rr_ok and re_ok and te_ok and wins >= 2 and time_ok and n_ok
    _verdict(6, ok, f"mean RR full={mean_of('full', 'rr'):.3f} vs "
                    f"plain={mean_of('plain', 'rr'):.3f}, RR wins {wins}/3, "
                    f"RE {mean_of('full', 'mean_re'):.1f} vs "
                    f"{mean_of('plain', 'mean_re'):.1f} deg, "
                    f"TE {mean_of('full', 'mean_te'):.3f} vs "
                    f"{mean_of('plain', 'mean_te'):.3f} m, "
                    f"joint <= {max(benchmark_run['joint_times']):.0f}s")
    assert rr_ok and re_ok and te_ok
    assert wins >= 2
    assert time_ok and n_ok


def test_criterion_7_adaptation_descends(benchmark_run):
    deltas, fallbacks = [], []
    for seed in BENCH_SEEDS:
        for row in benchmark_run["reports"][seed]["full"]["rows"]:
            trace = row["aux_loss_trace"]
            fallbacks.append(row["fallback"])
            if not row["fallback"]:
                deltas.append(trace[-1] - trace[0])
    median_delta = float(np.median(deltas))
    fallback_rate = float(np.mean(fallbacks))
    ok = median_delta <= 0.0 and fallback_rate < 0.20
    _verdict(7, ok, f"median aux-loss change {median_delta:+.5f} over "
                    f"{len(deltas)} adapted pairs, "
                    f"fallback rate {fallback_rate:.1%}")
    assert median_delta <= 0.0
    assert fallback_rate < 0.20


# ---------------------------------------------------------------------------
# 8. determinism and persistence

def test_criterion_8_determinism_and_persistence(tmp_path):
    profile = DomainProfile(name="det", shape_mix={"gauss": 1.0},
                            point_count=48, noise_sigma=0.005,
                            outlier_fraction=0.05, overlap_ratio=0.75)

    # datasets: identical seeds give bit-identical files on disk
    digests = []
    for run in range(2):
        pairs, manifest = generate_dataset([profile], 6, seed=77)
        d = tmp_path / f"ds{run}"
        d.mkdir()
        write_dataset(pairs, manifest, d)
        digests.append({f.name: f.read_bytes()
                        for f in sorted(d.iterdir())})
    data_ok = digests[0] == digests[1]

    # dataset round-trip is bit-exact
    pairs, manifest = generate_dataset([profile], 6, seed=77)
    back, _ = read_dataset(tmp_path / "ds0")
    trip_ok = all(
        np.array_equal(a.source.points, b.source.points)
        and np.array_equal(a.target.points, b.target.points)
        and np.array_equal(a.gt.R, b.gt.R) and np.array_equal(a.gt.t, b.gt.t)
        for a, b in zip(pairs, back))

    # checkpoints: identical runs write identical bytes
    config = TrainConfig(seed=5, joint_epochs=2, meta_epochs=1, batch_size=2,
                         alpha=1e-3, beta=1e-3, tta_steps=2)
    train_pairs = [small_pair(seed=500 + i) for i in range(4)]
    ckpt_bytes = []
    for run in range(2):
        part = small_partition(seed=9)
        d = tmp_path / f"run{run}"
        d.mkdir()
        joint_train(part, train_pairs, config, ckpt_dir=d)
        meta_train(part, train_pairs, config, ckpt_dir=d)
        ckpt_bytes.append(((d / "joint.ckpt").read_bytes(),
                           (d / "meta.ckpt").read_bytes()))
    ckpt_ok = ckpt_bytes[0] == ckpt_bytes[1]

    # plain-mode evaluation reports are identical across reruns
    part = small_partition(seed=9)
    joint_train(part, train_pairs, config)
    test_split = [small_pair(seed=600 + i) for i in range(6)]
    r1 = evaluate(part, test_split, EvalThresholds(), "plain", config)
    r2 = evaluate(part, test_split, EvalThresholds(), "plain", config)
    report_ok = json.dumps(r1, sort_keys=True) == json.dumps(r2, sort_keys=True)

    # interrupt/resume matches uninterrupted training bit-exactly
    straight = small_partition(seed=9)
    joint_train(straight, train_pairs, config)
    resumed = small_partition(seed=9)
    one_epoch = dataclasses.replace(config, joint_epochs=1)
    d = tmp_path / "resume"
    d.mkdir()
    joint_train(resumed, train_pairs, one_epoch, ckpt_dir=d)
    loaded = load_checkpoint(d / "joint.ckpt")
    joint_train(loaded.partition, train_pairs, config,
                start_epoch=loaded.epoch,
                rng=rng_from_state(loaded.rng_state),
                history=loaded.history)
    resume_ok = all(a.value_hash() == b.value_hash()
                    for a, b in zip(loaded.partition.trainable_stores(),
                                    straight.trainable_stores()))

    ok = data_ok and trip_ok and ckpt_ok and report_ok and resume_ok
    _verdict(8, ok, f"dataset={data_ok}, round-trip={trip_ok}, "
                    f"checkpoints={ckpt_ok}, reports={report_ok}, "
                    f"resume={resume_ok}")
    assert data_ok and trip_ok and ckpt_ok and report_ok and resume_ok


# ---------------------------------------------------------------------------
# 9. metric fixtures

def test_criterion_9_metric_fixtures():
    re_fix = rotation_error(RigidTransform(rot_z(30.0), np.zeros(3)),
                            RigidTransform.identity())
    re_ok = abs(re_fix - 30.0) < 1e-9

    from ptta.geometry import RegistrationResult

    def result(re, te):
        r = RegistrationResult(predicted=RigidTransform.identity())
        r.re, r.te = re, te
        return r

    rng = np.random.default_rng(9)
    results = [result(rng.uniform(0, 40), rng.uniform(0, 0.8))
               for _ in range(200)]
    prev, monotone = -1.0, True
    for re_max, te_max in [(1, 0.02), (5, 0.1), (15, 0.30), (45, 1.0)]:
        rr = registration_recall(results, EvalThresholds(re_max, te_max))
        monotone &= rr >= prev
        prev = rr

    th = EvalThresholds()
    defaults_ok = th.re_max == 15.0 and th.te_max == 0.30
    ok = re_ok and monotone and defaults_ok
    _verdict(9, ok, f"RE fixture err={abs(re_fix - 30.0):.1e}, "
                    f"monotone={monotone}, defaults={defaults_ok}")
    assert re_ok and monotone and defaults_ok
