"""Acceptance suite: one test per criterion, each at its stated tolerance.

Every test records a single ``PASS``/``FAIL`` line (also shown in pytest's
terminal summary). Run ``python3 tests/test_acceptance.py`` to get just the
lines.
"""

import itertools
import json
import struct
import time

import numpy as np
import pytest

from mlakit.attention import AttentionConfig, mla_attend, mla_attend_absorbed
from mlakit.checkpoint import Checkpoint
from mlakit.conversion import ConversionSpec, convert_layer, convert_model
from mlakit.linalg import truncated_svd
from mlakit.memory import footprint, format_percent, mla_spec, reduction_ratio, sweep
from mlakit.memory import whisper_small_spec
from mlakit.model import BOS, ModelSpec, Seq2SeqModel
from mlakit.selection import select_2norm, select_uniform
from mlakit.training import (
    DSO_FREEZE,
    Batch,
    SyntheticTask,
    TrainConfig,
    evaluate,
    finetune,
    finite_diff_check,
)

from _factories import random_mha, random_selection

RESULTS = []


def report(number, title, passed, detail, elapsed, budget):
    within = elapsed <= budget
    ok = passed and within
    line = (f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d} {title}: {detail} "
            f"({elapsed:.1f}s, limit {budget:g}s)")
    RESULTS.append(line)
    print(line)
    assert passed, line
    assert within, line


def _convert(model, strategy, r, placement, d_latent=8):
    return convert_model(model, ConversionSpec(strategy, d_latent, r, placement)).to_model()


# 1 ---------------------------------------------------------------------------


def test_criterion_01_reduction_arithmetic():
    t = time.perf_counter()
    full = format_percent(reduction_ratio("key_only", 768, 96, 0))
    preserving = format_percent(reduction_ratio("key_only", 768, 96, 48))
    report(1, "reduction arithmetic", full == "87.50%" and preserving == "81.25%",
           f"full compression {full}, preserving {preserving}", time.perf_counter() - t, 1)


# 2 ---------------------------------------------------------------------------


def _low_rank_model(rank, seed):
    model = Seq2SeqModel.initialize(seed=seed)
    rng = np.random.default_rng(seed + 100)
    d = model.spec.d_model
    for site in model.spec.site_names():
        shared = rng.standard_normal((d, rank)) / np.sqrt(d)
        model.params[f"{site}.w_k"] = shared @ rng.standard_normal((rank, d))
        model.params[f"{site}.w_v"] = shared @ rng.standard_normal((rank, d))
    return model


def test_criterion_02_lossless_conversion():
    t = time.perf_counter()
    rank = 6
    model = _low_rank_model(rank, seed=11)
    worst = 0.0
    for strategy, r in (("full_compression", 0), ("uniform", 1)):
        conv = _convert(model, strategy, r, "full", d_latent=8)
        for seed in range(20):
            rng = np.random.default_rng(seed)
            src = rng.integers(3, 64, int(rng.integers(1, 17)))
            tgt = np.concatenate([[BOS], rng.integers(3, 64, int(rng.integers(0, 16)))])
            worst = max(worst, float(np.max(np.abs(conv.forward(src, tgt)
                                                   - model.forward(src, tgt)))))
    report(2, "lossless conversion", worst <= 1e-7,
           f"rank {rank} <= d_latent 8, 20 inputs x 2 variants, max |dlogit| {worst:.2e} <= 1e-7",
           time.perf_counter() - t, 30)


# 3 ---------------------------------------------------------------------------


def test_criterion_03_absorbed_equivalence():
    t = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        heads = int(rng.integers(1, 5))
        half = int(rng.integers(1, 9))
        d = heads * 2 * half
        full = rng.random() < 0.3
        r = 0 if full else int(rng.integers(1, half + 1))
        latent = int(rng.integers(1, d + 1))
        cfg = AttentionConfig(d, heads, "mla_full" if full else "mla_preserving", latent, r)
        w = convert_layer(random_mha(rng, d, heads), cfg,
                          random_selection(rng, heads, 2 * half, r))
        causal = rng.random() < 0.5
        b, sq = int(rng.integers(1, 4)), int(rng.integers(1, 9))
        xq = rng.standard_normal((b, sq, d))
        xkv = xq if causal else rng.standard_normal((b, int(rng.integers(1, 9)), d))
        worst = max(worst, float(np.max(np.abs(
            mla_attend(xq, xkv, w, causal) - mla_attend_absorbed(xq, xkv, w, causal)))))
    report(3, "absorbed equivalence", worst <= 1e-10,
           f"100 random configs, max deviation {worst:.2e} <= 1e-10",
           time.perf_counter() - t, 30)


# 4 ---------------------------------------------------------------------------


def test_criterion_04_incremental_decoding():
    t = time.perf_counter()
    base = Seq2SeqModel.initialize(seed=4)
    models = {"mha": base, "mla_full": _convert(base, "full_compression", 0, "full"),
              "mla_preserving": _convert(base, "uniform", 1, "full")}
    rng = np.random.default_rng(4)
    src = rng.integers(3, 64, 16)
    tgt = np.concatenate([[BOS], rng.integers(3, 64, 63)])
    worst = {}
    for name, model in models.items():
        full = model.forward(src, tgt)
        enc = model.encode(src)
        dev = 0.0
        for absorbed in (False, True) if name != "mha" else (False,):
            state = model.new_decoder_state()
            for pos, tok in enumerate(tgt):
                step = model.decode_step(int(tok), pos, enc, state, absorbed=absorbed)
                dev = max(dev, float(np.max(np.abs(step - full[pos]))))
        worst[name] = dev
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    report(4, "incremental decoding", max(worst.values()) <= 1e-9,
           f"length 64, max per-step deviation {detail} <= 1e-9", time.perf_counter() - t, 30)


# 5 ---------------------------------------------------------------------------


def test_criterion_05_svd_properties():
    t = time.perf_counter()
    shapes = [(8, 8), (16, 24), (32, 20), (48, 64), (64, 96), (96, 64)]
    ortho = oracle = 0.0
    ordered = monotone = True
    for seed, shape in enumerate(shapes):
        a = np.random.default_rng(seed).standard_normal(shape)
        k = min(shape)
        f = truncated_svd(a, k)
        ortho = max(ortho, np.abs(f.u.T @ f.u - np.eye(k)).max(),
                    np.abs(f.v.T @ f.v - np.eye(k)).max())
        ordered &= bool(np.all(np.diff(f.s) <= 0))
        u, s, vt = np.linalg.svd(a, full_matrices=False)
        oracle = max(oracle, np.abs(f.s - s).max())
        errors = []
        for r in range(1, k + 1, max(1, k // 8)):
            approx = truncated_svd(a, r).reconstruct()
            oracle = max(oracle, np.abs(approx - (u[:, :r] * s[:r]) @ vt[:r]).max())
            errors.append(np.linalg.norm(a - approx))
        monotone &= all(x >= y for x, y in zip(errors, errors[1:]))
    passed = ortho <= 1e-10 and ordered and monotone and oracle <= 1e-8
    report(5, "svd properties", passed,
           f"orthonormality {ortho:.1e}, non-increasing {ordered}, monotone error {monotone}, "
           f"oracle deviation {oracle:.1e}", time.perf_counter() - t, 30)


# 6 ---------------------------------------------------------------------------


def test_criterion_06_selection_formulas():
    t = time.perf_counter()
    exact = (select_uniform(64, 2).tolist() == [0, 16]
             and select_uniform(64, 4).tolist() == [0, 8, 16, 24])
    rng = np.random.default_rng(6)
    mismatches = 0
    for _ in range(1000):
        half = int(rng.integers(1, 9))
        r = int(rng.integers(1, half + 1))
        scores = rng.integers(0, 5, (2, half)).astype(float)
        if rng.random() < 0.5:
            scores = rng.random((2, half))
        got = select_2norm(scores, r).subspaces
        for h in range(2):
            best = min(itertools.combinations(range(half), r),
                       key=lambda c: (-scores[h, list(c)].sum(), c))
            mismatches += got[h].tolist() != list(best)
    report(6, "selection formulas", exact and mismatches == 0,
           f"uniform exact {exact}, 2-norm vs brute force 1000 trials, {mismatches} mismatches",
           time.perf_counter() - t, 10)


# 7 ---------------------------------------------------------------------------


def test_criterion_07_gradient_correctness():
    t = time.perf_counter()
    base = Seq2SeqModel.initialize(seed=7)
    variants = {"mha": base, "mla_full": _convert(base, "full_compression", 0, "full"),
                "mla_preserving": _convert(base, "uniform", 1, "full")}
    task = SyntheticTask(seq_len_range=(2, 8), sample_count=4, seed=7)
    batch = Batch.from_pairs(task.samples())
    worst = {}
    for name, model in variants.items():
        rep = finite_diff_check(model, batch, sample_count=60, seed=7)
        worst[name] = rep.max_relative_error
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    report(7, "gradient correctness", max(worst.values()) <= 1e-3,
           f"60 coordinates per variant, max relative error {detail} <= 1e-3",
           time.perf_counter() - t, 120)


# 8 ---------------------------------------------------------------------------


def test_criterion_08_recovery_experiment():
    t = time.perf_counter()
    task = SyntheticTask()
    heldout = task.samples("heldout")
    baseline, trace = finetune(Seq2SeqModel.initialize(seed=0), task, TrainConfig(epochs=20))
    base_acc = trace[-1]["token_accuracy"]
    recovery, curves = {}, {}
    for placement, freeze in (("dso", DSO_FREEZE), ("full", frozenset())):
        conv = _convert(baseline, "uniform", 1, placement)
        tuned, tr = finetune(conv, task, TrainConfig(epochs=3), freeze=freeze)
        recovery[placement] = evaluate(tuned, heldout)[1] / base_acc
        curves[placement] = "/".join(f"{r['token_accuracy'] / base_acc:.4f}"
                                     for r in tr if r["split"] == "heldout")
    passed = (base_acc >= 0.99 and recovery["dso"] >= 0.95
              and recovery["dso"] >= recovery["full"])
    report(8, "recovery experiment", passed,
           f"baseline acc {base_acc:.4f} (>= 0.99), DSO recovery {recovery['dso']:.4f} "
           f"(>= 0.95), Full recovery {recovery['full']:.4f} (<= DSO); "
           f"per-epoch DSO {curves['dso']}, Full {curves['full']}",
           time.perf_counter() - t, 600)


# 9 ---------------------------------------------------------------------------


def test_criterion_09_memory_sweep():
    t = time.perf_counter()
    base = whisper_small_spec()
    specs = {"mha": base, "mla": mla_spec(base, "dso", d_latent=96, r_per_head=2)}
    batches, lengths = [1, 4, 16, 64], [256, 512, 1024, 2048, 4096]
    mha_need = footprint(specs["mha"], 64, 2048, 1500).total
    mla_need = footprint(specs["mla"], 64, 2048, 1500).total
    budget = (mha_need + mla_need) // 2
    rows = sweep(specs, batches, lengths, budget_bytes=budget)
    by = {(r["model"], r["batch"], r["seq_len"]): r for r in rows}
    dominated = all(by["mla", b, n]["bytes_total"] <= by["mha", b, n]["bytes_total"]
                    for b in batches for n in lengths)
    monotone = all(
        by[m, b, n]["bytes_total"] <= by[m, b2, n2]["bytes_total"]
        for m in specs for b, b2 in zip(batches, batches[1:]) for n in lengths
        for n2 in [n]
    ) and all(
        by[m, b, n]["bytes_total"] <= by[m, b, n2]["bytes_total"]
        for m in specs for b in batches for n, n2 in zip(lengths, lengths[1:])
    )
    at_point = [m for m in specs if by[m, 64, 2048]["oom"]]
    passed = dominated and monotone and at_point == ["mha"]
    report(9, "memory sweep", passed,
           f"MLA <= MHA everywhere {dominated}, monotone {monotone}, "
           f"flagged at (64, 2048): {at_point}", time.perf_counter() - t, 5)


# 10 --------------------------------------------------------------------------


def _tensor_bytes(raw):
    _, _, n = struct.unpack_from("<4sIQ", raw)
    header = json.loads(raw[16:16 + n])
    payload = raw[16 + n:]
    return {e["name"]: payload[e["offset"]:e["offset"] + e["nbytes"]]
            for e in header["tensors"]}


def test_criterion_10_checkpoint_roundtrip(tmp_path):
    t = time.perf_counter()
    model = Seq2SeqModel.initialize(seed=10)
    path = tmp_path / "base.wmla"
    Checkpoint.from_model(model).save(path)
    raw = path.read_bytes()
    again = tmp_path / "again.wmla"
    Checkpoint.load(path).save(again)
    identical = again.read_bytes() == raw

    conv = convert_model(Checkpoint.load(path), ConversionSpec("uniform", 8, 1, "dso"))
    conv_path = tmp_path / "dso.wmla"
    conv.save(conv_path)
    before, after = _tensor_bytes(raw), _tensor_bytes(conv_path.read_bytes())
    untouched = [n for n in before if ".self_attn." not in n or n.startswith("encoder.")]
    same = all(after.get(n) == before[n] for n in untouched)
    conv_again = Checkpoint.load(conv_path).to_bytes() == conv_path.read_bytes()
    report(10, "checkpoint round-trip", identical and same and conv_again,
           f"save(load) byte-identical {identical and conv_again}, "
           f"{len(untouched)} non-decoder-self tensors byte-identical after DSO {same}",
           time.perf_counter() - t, 5)


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
