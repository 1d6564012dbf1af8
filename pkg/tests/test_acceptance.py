"""Acceptance criteria; each test records one PASS/FAIL line in the terminal summary."""

import json
import math
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np
import pytest

from coatcbm import gradcheck
from coatcbm.cco import cco_loss
from coatcbm.cli import hash_path, main
from coatcbm.coat import attend, init_params
from coatcbm.interp import EvalSet, RelevanceOracle, build_eval_set, cc, cdr
from coatcbm.scoring import PosNegSplit
from coatcbm.synth import SynthConfig, generate, nearest_centroid_accuracy, relevance_rows
from coatcbm.trainer import TrainConfig, evaluate, train

from conftest import ACCEPTANCE_LINES

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
SEEDS = (0, 1, 2, 3)


def record(num, title, ok, detail):
    ACCEPTANCE_LINES.append(f"[{'PASS' if ok else 'FAIL'}] {num:>2}. {title}: {detail}")
    assert ok, detail


def preset(**overrides):
    data = json.loads((CONFIGS / "acceptance_train.json").read_text())
    data.update(overrides)
    return TrainConfig.from_dict(data)


def synth(seed):
    data = json.loads((CONFIGS / "synth_default.json").read_text())
    data["seed"] = seed
    return generate(SynthConfig.from_dict(data))


def truth_oracle(test, bank, truth):
    rows = relevance_rows(test.labels, truth.class_relevant, bank.n_concepts, bank.n_classes)
    return RelevanceOracle(table={(k, str(s), c): bool(f) for k, s, c, f in rows})


_cache = {}


def run_model(seed, **overrides):
    """Train on the synthetic config for ``seed``; returns test accuracy, gap, CDR, CC."""
    key = (seed, tuple(sorted(overrides.items())))
    if key not in _cache:
        tr, va, te, bank, truth = synth(seed)
        ckpt = train(tr, va, bank, preset(seed=seed, **overrides))
        res = evaluate(te, ckpt, bank)
        es = build_eval_set(te, ckpt, bank)
        oracle = truth_oracle(te, bank, truth)
        _cache[key] = dict(acc=res.accuracy, gap=res.score_gap, cdr=cdr(es, bank, oracle), cc=cc(es, bank, oracle))
    return _cache[key]


def test_c01_gradient_suite():
    start = time.perf_counter()
    errs = gradcheck.run(seed=0, count=50, dims="small", lam=0.5, tau=0.07, loss_mode="cco")
    elapsed = time.perf_counter() - start
    ok = max(errs) < 1e-4 and elapsed < 60
    record(1, "gradient suite", ok, f"max rel err {max(errs):.2e} over {len(errs)} instances in {elapsed:.1f}s")


def test_c02_cco_closed_forms():
    a = cco_loss([1.0, 0.0], PosNegSplit.from_positives([0], 2), 1.0)
    b = cco_loss([0.2] * 6, PosNegSplit.from_positives([0, 2, 4], 6), 0.07)
    c = cco_loss([0.7, -0.1], PosNegSplit.from_positives([0, 1], 2), 0.07)
    ok = abs(a - 0.313262) < 1e-6 and abs(b - math.log(2)) < 1e-9 and c == 0.0
    record(2, "CCO closed forms", ok, f"{a:.6f}, {b:.12f}, {c!r}")


def test_c03_cco_invariances():
    rng = np.random.default_rng(0)
    worst_shift = worst_scale = 0.0
    violations = 0
    for _ in range(100):
        n = int(rng.integers(2, 12))
        s = rng.uniform(-1, 1, n)
        sp = PosNegSplit.from_positives(rng.choice(n, size=int(rng.integers(1, n)), replace=False), n)
        tau = float(rng.uniform(0.05, 2.0))
        base = cco_loss(s, sp, tau)
        worst_shift = max(worst_shift, abs(cco_loss(s + rng.uniform(-3, 3), sp, tau) - base))
        a = float(rng.uniform(0.1, 10))
        worst_scale = max(worst_scale, abs(cco_loss(a * s, sp, a * tau) - base))
        for i in range(n):
            for delta in (1e-3, -1e-3):
                t = s.copy()
                t[i] += delta
                direction = -1 if sp.mask[i] else 1
                if not direction * delta * (cco_loss(t, sp, tau) - base) > 0:
                    violations += 1
    ok = worst_shift < 1e-9 and worst_scale < 1e-9 and violations == 0
    record(3, "CCO invariances", ok,
           f"shift {worst_shift:.1e}, scale {worst_scale:.1e}, monotonicity violations {violations}")


def test_c04_attention_invariants():
    rng = np.random.default_rng(1)
    row_err = hull_err = perm_err = 0.0
    for i in range(100):
        n, d, n_tok = int(rng.integers(1, 6)), int(rng.integers(1, 8)), int(rng.integers(1, 9))
        p = init_params(i, n, d, int(rng.integers(1, 6)), int(rng.integers(1, 5)), float(rng.uniform(0.1, 1.0)))
        p.Q *= 4.0
        Z = 3 * rng.standard_normal((n_tok, d))
        tr = attend(Z, p)
        V = Z @ p.W_V
        row_err = max(row_err, float(np.max(np.abs(tr.alphas.sum(axis=1) - 1))), float(-tr.alphas.min()))
        hull_err = max(hull_err, float(np.max(V.min(axis=0) - tr.embeddings)),
                       float(np.max(tr.embeddings - V.max(axis=0))))
        perm = rng.permutation(n_tok)
        tp = attend(Z[perm], p)
        perm_err = max(perm_err, float(np.max(np.abs(tp.embeddings - tr.embeddings))),
                       float(np.max(np.abs(tp.alphas - tr.alphas[:, perm]))))
    ok = row_err <= 1e-6 and hull_err <= 1e-12 and perm_err <= 1e-12
    record(4, "attention invariants", ok, f"row {row_err:.1e}, hull {hull_err:.1e}, permutation {perm_err:.1e}")


@pytest.mark.slow
def test_c05_synthetic_end_to_end():
    start = time.perf_counter()
    tr, va, te, bank, truth = synth(0)
    nc = nearest_centroid_accuracy(tr, te)
    ckpt = train(tr, va, bank, preset(seed=0))
    res = evaluate(te, ckpt, bank)
    oracle = truth_oracle(te, bank, truth)
    es = build_eval_set(te, ckpt, bank)
    trained_cdr, trained_cc = cdr(es, bank, oracle), cc(es, bank, oracle)
    untrained = train(tr, va, bank, preset(seed=0, epochs=0))
    base_cdr = cdr(build_eval_set(te, untrained, bank), bank, oracle)
    elapsed = time.perf_counter() - start
    ok = (nc >= 0.99 and res.accuracy >= 0.95 and res.score_gap >= 0.2 and trained_cdr >= 0.9
          and trained_cc >= 0.9 and trained_cdr - base_cdr >= 0.25 and elapsed < 300)
    record(5, "synthetic end-to-end", ok,
           f"NC {nc:.3f}, acc {res.accuracy:.3f}, gap {res.score_gap:.3f}, CDR {trained_cdr:.3f} "
           f"(untrained {base_cdr:.3f}), CC {trained_cc:.3f}, {elapsed:.1f}s")


@pytest.mark.slow
def test_c06_cco_vs_bce():
    means = {}
    for mode in ("cco", "bce", "none"):
        means[mode] = float(np.mean([run_model(s, loss_mode=mode)["cdr"] for s in SEEDS]))
    ok = means["cco"] >= means["bce"] and min(means["cco"], means["bce"]) >= means["none"]
    record(6, "CCO vs BCE CDR", ok,
           f"CCO {means['cco']:.3f}, BCE {means['bce']:.3f}, no concept loss {means['none']:.3f}")


@pytest.mark.slow
def test_c07_grouping_ablation():
    ratios = (0.1, 0.5, 1.0)
    acc = [float(np.mean([run_model(s, group_ratio=r)["acc"] for s in SEEDS])) for r in ratios]
    cdrs = [float(np.mean([run_model(s, group_ratio=r)["cdr"] for s in SEEDS])) for r in ratios]
    ok = acc[0] <= acc[1] <= acc[2] and acc[2] > acc[0]
    record(7, "grouping ablation", ok,
           "accuracy " + ", ".join(f"{r}: {a:.4f}" for r, a in zip(ratios, acc))
           + " | CDR " + ", ".join(f"{r}: {c:.3f}" for r, c in zip(ratios, cdrs)))


def _brute(scores, n_pos, rel_of):
    total = 0.0
    for i in range(len(scores)):
        ranked = sorted(range(len(scores[i])), key=lambda c: (-scores[i][c], c))
        total += sum(1 for c in ranked[:n_pos[i]] if rel_of(i, c)) / n_pos[i]
    return total / len(scores)


def test_c08_metric_oracle_equivalence():
    rng = np.random.default_rng(2)
    mismatches = 0
    for _ in range(100):
        L, n, k = int(rng.integers(1, 10)), int(rng.integers(1, 8)), int(rng.integers(1, 5))
        scores = rng.integers(-3, 4, size=(L, n)) / 3.0
        n_pos = rng.integers(1, n + 1, size=L)
        preds = rng.integers(0, k, size=L)
        img = rng.random((L, n)) < 0.5
        cls = rng.random((k, n)) < 0.5
        table = {("image", str(i), c): bool(img[i, c]) for i in range(L) for c in range(n)}
        table.update({("class", str(y), c): bool(cls[y, c]) for y in range(k) for c in range(n)})
        es = EvalSet([str(i) for i in range(L)], np.zeros(L, int), preds, scores, n_pos)
        oracle = RelevanceOracle(table=table)
        mismatches += cdr(es, None, oracle) != _brute(scores, n_pos, lambda i, c: img[i, c])
        mismatches += cc(es, None, oracle) != _brute(scores, n_pos, lambda i, c: cls[preds[i], c])
    record(8, "metric oracle equivalence", mismatches == 0, f"{mismatches} mismatches over 100 sets")


def test_c09_determinism(tmp_path, capsys):
    cfg = {"seed": 5, "n_classes": 4, "concepts_per_class": 3, "d": 12, "d_c": 6, "n_patches": 10,
           "train_per_class": 15, "test_per_class": 5}
    (tmp_path / "synth.json").write_text(json.dumps(cfg))
    for out in ("a", "b"):
        assert main(["gen-synth", "--config", str(tmp_path / "synth.json"), "--out", str(tmp_path / out)]) == 0
    same_data = hash_path(tmp_path / "a") == hash_path(tmp_path / "b")
    hashes = []
    for out in ("ck1", "ck2"):
        assert main(["train", "--data", str(tmp_path / "a"), "--out", str(tmp_path / out),
                     "--config", str(CONFIGS / "acceptance_train.json"), "--epochs", "5"]) == 0
        hashes.append(json.loads((tmp_path / out / "checkpoint.json").read_text())["hash"])
    capsys.readouterr()
    ok = same_data and hashes[0] == hashes[1]
    record(9, "determinism", ok, f"gen-synth identical {same_data}, checkpoint hash {hashes[0][:16]}... x2")


def test_c10_io_golden(tmp_path):
    from coatcbm.errors import DataError
    from coatcbm.tensorio import read_bundle, write_bundle

    write_bundle({"one": np.array([1.0], dtype=np.float32)}, tmp_path / "g")
    golden = (tmp_path / "g" / "one.bin").read_bytes() == b"\x00\x00\x80\x3f"
    tensors = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.array([np.nan, -np.inf], np.float32)}
    write_bundle(tensors, tmp_path / "rt")
    back = read_bundle(tmp_path / "rt")
    round_trip = all(back[k].tobytes() == v.tobytes() for k, v in tensors.items())
    manifest = json.loads((tmp_path / "rt" / "manifest.json").read_text())

    caught = []

    def expect_error(name, mutate):
        d = tmp_path / name
        write_bundle(tensors, d)
        mutate(d)
        try:
            read_bundle(d)
        except DataError:
            caught.append(name)

    def edit_manifest(fn):
        def mutate(d):
            m = json.loads((d / "manifest.json").read_text())
            fn(m)
            (d / "manifest.json").write_text(json.dumps(m))
        return mutate

    cases = {
        "missing_manifest": lambda d: (d / "manifest.json").unlink(),
        "truncated": lambda d: (d / "a.bin").write_bytes((d / "a.bin").read_bytes()[:-1]),
        "missing_file": lambda d: (d / "b.bin").unlink(),
        "bad_dtype": edit_manifest(lambda m: m["entries"][0].update(dtype="f16")),
        "bad_json": lambda d: (d / "manifest.json").write_text("{"),
    }
    for name, mutate in cases.items():
        expect_error(name, mutate)
    ok = golden and round_trip and len(caught) == len(cases)
    record(10, "I/O golden tests", ok,
           f"f32 1.0 bytes {golden}, round trip {round_trip}, errors caught {len(caught)}/{len(cases)}, "
           f"manifest keys {sorted(manifest)}")
