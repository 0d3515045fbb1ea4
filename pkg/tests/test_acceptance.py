"""Acceptance gate: one test and one PASS/FAIL summary line per criterion.

Criteria 5 and 6 share a single desk-scale training run (20,000 pairs,
seed 42); expect roughly ten minutes on one CPU core.
"""

import math
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from clsr.data import (
    PrepConfig,
    Situation,
    build_pair_dataset,
    cyclic_shift,
    impute,
    interleave,
    keep_min_points,
    odd_even_split,
    scale,
    vertical_shift,
)
from clsr.evaluation import RetrievalTask, average_precision, compare, derive_tasks, evaluate, map_at_k
from clsr.experiment import BASELINE, Scale, corpus_pairs, fit_model, reproduce
from clsr.nn import Architecture, Dropout, Encoder, load_checkpoint, save_checkpoint
from clsr.retrieval import CosineRetriever, L2Retriever, build_index, embed, l2_baseline_top_k, query_top_k
from clsr.synth import generate_labeled, generate_unlabeled
from clsr.trainer import PRESETS, nt_xent_loss

from conftest import ACCEPTANCE_LINES
from helpers import (
    brute_average_precision,
    brute_cosine_ranking,
    brute_l2_ranking,
    layer_gradcheck,
    make_layers,
    numeric_grad,
    rel_err,
    stack_gradcheck,
)

SMALL = Architecture(T=8, C=2, E=5, widths=(4, 6, 3), dense_width=7, kernel=5)


def record(number, title, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] {number}. {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# --- 1 ------------------------------------------------------------------------------


class _SeededDropout:
    """Dropout with its mask pinned by a fixed seed, so it is a fixed linear map."""

    def __init__(self, seed):
        self.layer = Dropout(0.5)
        self.seed = seed

    def forward(self, x, train=True):
        return self.layer.forward(x, train=True, rng=np.random.default_rng(self.seed))

    def backward(self, g):
        return self.layer.backward(g)

    def params(self):
        return []


def test_criterion_1_gradient_correctness():
    t0 = time.perf_counter()
    worst = {}
    names = ["normalization", "conv1d", "batchnorm", "relu", "dense", "gap", "dropout"]
    for seed in range(5):
        rng = np.random.default_rng(seed)
        layers = make_layers(rng)
        layers["dropout"] = _SeededDropout(seed)
        for name in names:
            x = rng.normal(size=(4, 7, 3))
            if name == "relu":
                x = np.where(np.abs(x) < 0.05, 0.1, x)
            errs = layer_gradcheck(layers[name], x, rng)
            worst[name] = max(worst.get(name, 0.0), max(errs.values()))
        z = rng.normal(size=(6, 4))
        _, dz = nt_xent_loss(z, 0.2)
        num = numeric_grad(lambda: nt_xent_loss(z, 0.2)[0], z, 1e-3)
        worst["nt_xent"] = max(worst.get("nt_xent", 0.0), rel_err(dz, num))
        for label, arch, n in (("stack_small", SMALL, 12), ("stack_full", Architecture(), 4)):
            frozen, plain = stack_gradcheck(arch, seed, n_samples=n)
            worst[label] = max(worst.get(label, 0.0), *frozen.values(), *plain.values())
    elapsed = time.perf_counter() - t0
    top = max(worst, key=worst.get)
    ok = max(worst.values()) < 1e-4 and elapsed < 60
    record(1, "gradient correctness", ok,
           f"max rel err {worst[top]:.2e} ({top}) over {len(worst)} checks x 5 instances, {elapsed:.1f}s")


# --- 2 ------------------------------------------------------------------------------


def test_criterion_2_loss_oracle():
    z = np.array([[1.0, 0], [1, 0], [0, 1], [0, 1]])
    orth = nt_xent_loss(z, 1.0)[0]
    errs = [abs(orth - 0.55144)]
    for B in (2, 4, 16, 256):
        same = nt_xent_loss(np.tile([0.5, -1.0, 2.0], (B, 1)), 0.1)[0]
        errs.append(abs(same - math.log(B - 1)))
    record(2, "loss oracle", max(errs) < 1e-4, f"orthogonal pairs {orth:.5f}, max deviation {max(errs):.1e}")


# --- 3 ------------------------------------------------------------------------------


def test_criterion_3_retrieval_oracle():
    mismatches = 0
    for f in range(100):
        rng = np.random.default_rng([3, f])
        sits = []
        for i in range(50):
            mask = rng.random((30, 1)) > rng.uniform(0, 0.4)
            sits.append(Situation(f"s{i}", np.where(mask, rng.uniform(0, 100, (30, 1)), -100.0), mask))
        model = Encoder(seed=f)
        model.fit_normalization(np.stack([s.values for s in sits]))
        index = build_index(sits, model)
        inside = sits[int(rng.integers(50))]
        outside_mask = rng.random((30, 1)) > 0.2
        outside = Situation("q", np.where(outside_mask, rng.uniform(0, 100, (30, 1)), -100.0), outside_mask)
        for q in (inside, outside):
            qvec = embed([q], model)[0]
            got = query_top_k(q, index, model, 50).ids
            mismatches += got != brute_cosine_ranking(qvec, index.matrix, index.ids, exclude=q.id)
            got = l2_baseline_top_k(q, sits, 50).ids
            mismatches += got != brute_l2_ranking(q.values, [s.values for s in sits], index.ids, exclude=q.id)
    record(3, "retrieval oracle", mismatches == 0, f"{mismatches} mismatching rankings in 100 fixtures x 2 queries x 2 retrievers")


# --- 4 ------------------------------------------------------------------------------


class _Fixed:
    def __init__(self, ids, rankings):
        self.ids = ids
        self.rankings = rankings

    def rank(self, query_id, k):
        return self.rankings[query_id][:k]


def test_criterion_4_metric_oracle():
    worst = 0.0
    for f in range(100):
        rng = np.random.default_rng([4, f])
        n = int(rng.integers(6, 40))
        ids = [f"i{j}" for j in range(n)]
        labels = rng.integers(0, int(rng.integers(1, 4)) + 1, size=n)
        classes = {}
        for id_, lab in zip(ids, labels):
            classes.setdefault(f"c{lab}", []).append(id_)
        classes = {c: m for c, m in classes.items() if len(m) >= 2}
        if not classes:
            classes = {"c": ids[:2]}
        tasks = derive_tasks(classes)
        rankings = {}
        for t in tasks:
            others = [i for i in ids if i != t.query_id]
            rankings[t.query_id] = [others[j] for j in rng.permutation(len(others))]
        r = _Fixed(ids, rankings)
        for k in (1, 3, 5, n):
            brute = [brute_average_precision(t.relevant_ids, rankings[t.query_id], k) for t in tasks]
            for t, b in zip(tasks, brute):
                worst = max(worst, abs(average_precision(t, rankings[t.query_id], k) - b))
            worst = max(worst, abs(map_at_k(tasks, r, k) - sum(brute) / len(brute)))
        full = [brute_average_precision(t.relevant_ids, rankings[t.query_id]) for t in tasks]
        worst = max(worst, abs(evaluate("r", tasks, r).map - sum(full) / len(full)))
    worked = average_precision(RetrievalTask("q", {"a", "b"}), ["a", "x", "b"], 3)
    ok = worst <= 1e-12 and abs(worked - 5 / 6) <= 1e-12
    record(4, "metric oracle", ok, f"max deviation {worst:.1e} over 100 fixtures; worked example {worked:.4f}")


# --- 5 & 6 --------------------------------------------------------------------------


@pytest.fixture(scope="module")
def desk_run():
    seed = 42
    scale_ = Scale()
    cfg = PRESETS["clsr-10"]
    tr, va, manifest = corpus_pairs(scale_.n_train, scale_.n_val, PrepConfig(rng_seed=seed), seed)
    cfg = replace(cfg, seed=seed, max_epochs=scale_.max_epochs)
    t0 = time.perf_counter()
    model, report = fit_model(cfg, tr, va)
    train_seconds = time.perf_counter() - t0
    labeled = generate_labeled(seed=seed)
    reports = compare(
        derive_tasks(labeled.classes),
        {BASELINE: L2Retriever(labeled.situations), "clsr-10": CosineRetriever(labeled.situations, model)},
    )
    return {"reports": reports, "train_seconds": train_seconds, "n_train": len(tr), "train_report": report}


@pytest.mark.slow
def test_criterion_5_directional_reproduction(desk_run):
    base, clsr = desk_run["reports"][BASELINE], desk_run["reports"]["clsr-10"]
    secs = desk_run["train_seconds"]
    ok = clsr.map >= base.map + 0.10 and clsr.precision_at[1] >= 0.85 and secs < 30 * 60 and desk_run["n_train"] == 20_000
    record(5, "directional reproduction", ok,
           f"clsr-10 MAP {clsr.map:.3f} vs baseline {base.map:.3f} (gain {clsr.map - base.map:+.3f}, need +0.10), "
           f"P@1 {clsr.precision_at[1]:.3f} (need 0.85), {desk_run['n_train']} pairs, "
           f"{len(desk_run['train_report'].train_loss)} epochs in {secs / 60:.1f} min")


@pytest.mark.slow
def test_criterion_6_per_class_structure(desk_run):
    base = desk_run["reports"][BASELINE].per_class_map["multi_disassoc"]
    clsr = desk_run["reports"]["clsr-10"].per_class_map["multi_disassoc"]
    record(6, "per-class structure", clsr >= base + 0.15,
           f"multi_disassoc MAP clsr-10 {clsr:.3f} vs baseline {base:.3f} (gain {clsr - base:+.3f}, need +0.15)")


# --- 7 ------------------------------------------------------------------------------


def test_criterion_7_determinism(tmp_path):
    tiny = Scale(n_train=256, n_val=64, max_epochs=2, batch_size=64)
    for run in ("a", "b"):
        reproduce(tmp_path / run, seed=42, scale=tiny)
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    differing = [str(p) for p in files_a if (tmp_path / "a" / p).read_bytes() != (tmp_path / "b" / p).read_bytes()]
    kinds = {Path(p).name for p in files_a}
    ok = files_a == files_b and not differing and {"model.ckpt", "index.bin", "metrics.csv", "per_class.csv"} <= kinds
    n_ckpt = sum(1 for p in files_a if p.name == "model.ckpt")
    record(7, "determinism", ok,
           f"{len(files_a)} files ({n_ckpt} checkpoints) compared across two reproduce runs (tiny scale), {len(differing)} differ")


# --- 8 ------------------------------------------------------------------------------


def test_criterion_8_checkpoint_roundtrip(tmp_path):
    pairs, _ = build_pair_dataset(generate_unlabeled(1200, seed=8), PrepConfig(rng_seed=8), limit=1000)
    sits = [p.first for p in pairs]
    model = Encoder(seed=8)
    x = np.stack([s.values for s in sits]).astype(np.float32)
    model.fit_normalization(x)
    model.forward(x[:256], train=True, rng=np.random.default_rng(0))  # move BN running stats off their init
    before = embed(sits, model)
    save_checkpoint(model, tmp_path / "m.ckpt")
    after = embed(sits, load_checkpoint(tmp_path / "m.ckpt"))
    ok = len(sits) == 1000 and before.tobytes() == after.tobytes()
    record(8, "checkpoint round-trip", ok, f"{len(sits)} embeddings, bit-identical={before.tobytes() == after.tobytes()}")


# --- 9 ------------------------------------------------------------------------------


def test_criterion_9_data_prep_invariants():
    rng = np.random.default_rng(9)
    cfg = PrepConfig()
    failures = []
    for case in range(10_000):
        T = int(rng.integers(1, 41))
        seq = rng.uniform(0, 100, 2 * T)
        seq[rng.random(2 * T) < rng.uniform(0, 0.6)] = np.nan
        pair = odd_even_split(seq, id=f"c{case}")
        first, second = pair.first, pair.second
        checks = {}
        # split / re-interleave, against direct index arithmetic
        checks["split"] = all(
            (math.isnan(seq[2 * t]) != bool(first.mask[t, 0])) and (math.isnan(seq[2 * t + 1]) != bool(second.mask[t, 0]))
            and (not first.mask[t, 0] or first.values[t, 0] == seq[2 * t])
            and (not second.mask[t, 0] or second.values[t, 0] == seq[2 * t + 1])
            for t in range(T)
        )
        checks["interleave"] = np.array_equal(interleave(pair)[:, 0], seq, equal_nan=True)
        imp = impute(first, cfg)
        checks["sentinel"] = bool(np.all(imp.values[~first.mask] == -100.0)) and np.array_equal(
            imp.values[first.mask], first.values[first.mask]
        )
        n_obs = sum(1 for t in range(T) if not math.isnan(seq[2 * t]))
        checks["min_points"] = keep_min_points(first, 10) == (n_obs >= 10)
        checks["offset0"] = np.array_equal(cyclic_shift(imp, 0).values, imp.values)
        checks["alpha1"] = np.array_equal(scale(imp, 1.0).values, imp.values)
        checks["delta0"] = np.array_equal(vertical_shift(imp, 0.0).values, imp.values)
        a, b = (int(v) for v in rng.integers(0, 3 * T + 1, 2))
        two = cyclic_shift(cyclic_shift(imp, a), b)
        one = cyclic_shift(imp, (a + b) % T)
        checks["cyclic_compose"] = np.array_equal(two.values, one.values) and np.array_equal(two.mask, one.mask)
        off = a % T
        checks["cyclic_position"] = all(one.values[(t + (a + b)) % T, 0] == imp.values[t, 0] for t in range(T)) and all(
            cyclic_shift(imp, off).values[(t + off) % T, 0] == imp.values[t, 0] for t in range(T)
        )
        d1, d2 = rng.uniform(-10, 10, 2)
        checks["vertical_compose"] = np.allclose(
            vertical_shift(vertical_shift(imp, d1), d2).values, vertical_shift(imp, d1 + d2).values, rtol=0, atol=1e-9
        )
        failures.extend(f"case {case}: {k}" for k, v in checks.items() if not v)
    record(9, "data-prep invariants", not failures,
           f"10000 randomized cases x 11 invariants, {len(failures)} failures" + (f" (first: {failures[0]})" if failures else ""))
