"""Acceptance gate: one PASS/FAIL line per criterion.

Corpus-backed criteria read their data from environment variables:

  BABI_QA_DIR       bAbI QA 1k files (qa1_*_train.txt ...)
  BABI_QA10K_DIR    bAbI QA 10k files
  DIALOG_BABI_DIR   Dialog bAbI files (dialog-babi-task1-API-calls-trn.txt ...)

A missing corpus is a FAIL. Each corpus criterion also runs on a synthetic
stand-in and logs an INFO line, which shows the pipeline works end to end but
never counts as a pass. Set ACCEPTANCE_SURROGATE=0 to skip the stand-ins.
"""
import json
import math
import os
import warnings
from pathlib import Path

import numpy as np
import pytest

from gmemn2n.cli import EXIT_OK, main
from gmemn2n.corpus import (
    USER,
    find_dialog_files,
    parse_candidates,
    parse_dialog_task,
    parse_kb,
    parse_qa_task,
    read_text,
)
from gmemn2n.evaluator import dialog_accuracy
from gmemn2n.model import ADJACENT, CANDIDATE_HEAD, GLOBAL, GMEMN2N, HOP, MEMN2N, QA_HEAD, UNTIED, ModelVariant
from gmemn2n.model import forward_batch, trace_example
from gmemn2n.encoder import make_batch
from gmemn2n.tasks import default_encoding, load_task, parse_task_id
from gmemn2n.trainer import TrainConfig, train_with_restarts
from helpers import ACCEPTANCE_LINES, tiny_dataset
from synthetic import write_dialog_task, write_qa_task
from test_model import FD_COMBOS, FD_STEP, K, _clamp_gates, _fd_error, make_instance, oracle_logits

TARGET = 99.0
SURROGATE = os.environ.get("ACCEPTANCE_SURROGATE", "1") != "0"


def record(n, status, text):
    line = f"[{status}] criterion {n}: {text}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def corpus_dir(var):
    value = os.environ.get(var)
    if value and Path(value).is_dir():
        return Path(value)
    return None


def missing(n, var, what):
    record(n, "FAIL", f"{what} not available (set {var}); criterion not evaluated")


def train_cli(data_dir, task, out, restarts, seed=0, *extra):
    argv = ["train", "--task", task, "--data-dir", str(data_dir), "--out-dir", str(out),
            "--restarts", str(restarts), "--seed", str(seed), *extra]
    assert main(argv) == EXIT_OK
    return json.loads((out / "report.json").read_text())


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="module")
def synthetic_qa(work):
    root = work / "synthetic_qa"
    for task, seed in ((1, 1), (12, 2), (17, 3)):
        write_qa_task(root, task, 1000, 1000, seed=seed)
    return root


# module-level memo so criterion 10 can reuse the criterion 4 runs
_RUNS = {}


def qa1_run(data_dir, out):
    key = str(data_dir)
    if key not in _RUNS:
        _RUNS[key] = (train_cli(data_dir, "qa1", out, 5), out)
    return _RUNS[key]


# ---------------------------------------------------------------------------
# 1-3: model properties


def test_criterion_1_gradients():
    worst = {}
    for kind, head, emb, gates in FD_COMBOS:
        errs = [_fd_error(*make_instance(seed, kind, head, emb, gates)[:3], h=FD_STEP) for seed in range(10)]
        worst[(kind, head, emb, gates)] = max(errs)
    top = max(worst.values())
    ok = top < 1e-4
    record(1, "PASS" if ok else "FAIL",
           f"max finite-difference relative error {top:.2e} over {len(worst)} variants x 10 seeds (< 1e-4)")
    assert ok, worst


def test_criterion_2_oracle():
    kinds = [(GMEMN2N, QA_HEAD), (MEMN2N, QA_HEAD), (GMEMN2N, CANDIDATE_HEAD), (MEMN2N, CANDIDATE_HEAD)]
    worst = 0.0
    for seed in range(100):
        kind, head = kinds[seed % 4]
        emb = ADJACENT if (seed // 4) % 2 == 0 else UNTIED
        gates = HOP if (seed // 8) % 2 == 0 else GLOBAL
        params, batch, variant, data, vocab, sents, qs, cands = make_instance(seed, kind, head, emb, gates)
        logits = forward_batch(params, batch, variant).logits
        for b in range(batch.size):
            bits = (batch.match[b], data.candidates.match_slots) if head == CANDIDATE_HEAD else None
            ref = oracle_logits(params, variant, sents[b], qs[b], vocab, cands, bits)
            worst = max(worst, float(np.max(np.abs(logits[b] - ref))))
    ok = worst < 1e-10
    record(2, "PASS" if ok else "FAIL", f"max |logit - oracle| {worst:.2e} over 100 instances (< 1e-10)")
    assert ok


def test_criterion_3_gate_endpoints():
    closed_ok = opened_ok = True
    for seed in range(10):
        params, batch, variant, data = make_instance(seed)[:4]
        _clamp_gates(params, -1000.0)
        base = forward_batch(params, batch, variant).logits
        other, *_ = tiny_dataset(np.random.default_rng(seed + 100), n_examples=len(data))
        for ex, o in zip(data.examples, other.examples):
            ex.memory, ex.n_memory = o.memory, o.n_memory
        swapped = forward_batch(params, make_batch(data, range(len(data))), variant).logits
        closed_ok &= bool(np.array_equal(base, swapped))

        params, batch, variant = make_instance(seed)[:3]
        _clamp_gates(params, 1000.0)
        cache = forward_batch(params, batch, variant)
        for b in range(batch.size):
            tr = trace_example(cache, b)
            states = tr.controllers[1:] + [tr.final_state]
            opened_ok &= all(np.array_equal(states[k], tr.responses[k]) for k in range(K))
    ok = closed_ok and opened_ok
    record(3, "PASS" if ok else "FAIL",
           f"gate=0 memory-invariant: {closed_ok}; gate=1 u(k+1) == o(k) exactly: {opened_ok} (10 seeds)")
    assert ok


# ---------------------------------------------------------------------------
# 4, 5, 10: QA reproduction and determinism


def _qa_target(n, task, work, synthetic_qa, label):
    qa_dir = corpus_dir("BABI_QA_DIR")
    if SURROGATE:
        if task == "qa1":
            report, _ = qa1_run(synthetic_qa, work / "syn_qa1_a")
        else:
            report = train_cli(synthetic_qa, task, work / f"syn_{task}", 5)
        acc = report["results"]["test"]["accuracy"]
        record(n, "INFO", f"synthetic {task} stand-in: test accuracy {acc:.1f} (best of 5)")
    if qa_dir is None:
        missing(n, "BABI_QA_DIR", "bAbI 1k corpus")
        pytest.fail("bAbI 1k corpus not available")
    if task == "qa1":
        report, _ = qa1_run(qa_dir, work / "qa1_a")
    else:
        report = train_cli(qa_dir, task, work / task, 5)
    acc = report["results"]["test"]["accuracy"]
    ok = acc >= TARGET
    record(n, "PASS" if ok else "FAIL", f"{label}: test accuracy {acc:.1f}, best of 5 (>= {TARGET})")
    assert ok


def test_criterion_4_task1(work, synthetic_qa):
    _qa_target(4, "qa1", work, synthetic_qa, "qa1 1k gmemn2n hop-specific")


def test_criterion_5_task12(work, synthetic_qa):
    _qa_target(5, "qa12", work, synthetic_qa, "qa12 1k gmemn2n hop-specific")


def _same_bytes(a, b):
    return all((a / f).read_bytes() == (b / f).read_bytes() for f in ("checkpoint.json", "report.json"))


def test_criterion_10_determinism(work, synthetic_qa):
    if SURROGATE:
        _, first = qa1_run(synthetic_qa, work / "syn_qa1_a")
        train_cli(synthetic_qa, "qa1", work / "syn_qa1_b", 5)
        record(10, "INFO", f"synthetic qa1 stand-in: identical bytes {_same_bytes(first, work / 'syn_qa1_b')}")
    qa_dir = corpus_dir("BABI_QA_DIR")
    if qa_dir is None:
        missing(10, "BABI_QA_DIR", "bAbI 1k corpus")
        pytest.fail("bAbI 1k corpus not available")
    _, first = qa1_run(qa_dir, work / "qa1_a")
    train_cli(qa_dir, "qa1", work / "qa1_b", 5)
    ok = _same_bytes(first, work / "qa1_b")
    record(10, "PASS" if ok else "FAIL", f"two qa1 runs, seed 0: checkpoint and report byte-identical: {ok}")
    assert ok


# ---------------------------------------------------------------------------
# 6: positional reasoning, gated vs plain


def _mean_valid(data_dir, n_seeds=10):
    task = parse_task_id("qa17")
    cfg = TrainConfig(restarts=n_seeds, seed=0)
    td = load_task(task, data_dir, cfg.valid_fraction, 0, default_encoding(task, cfg.noise, cfg.max_memory))
    means = {}
    for kind in (GMEMN2N, MEMN2N):
        rep = train_with_restarts(td.encoded("train"), td.encoded("valid"), ModelVariant(kind, HOP), cfg)
        accs = [r.valid_accuracy for r in rep.runs if not r.diverged]
        means[kind] = float(np.mean(accs)) if accs else math.nan
    return means


def test_criterion_6_task17_direction(synthetic_qa):
    if SURROGATE:
        m = _mean_valid(synthetic_qa)
        record(6, "INFO", f"synthetic qa17 stand-in: mean valid gmemn2n {m[GMEMN2N]:.1f} vs memn2n {m[MEMN2N]:.1f}")
    qa_dir = corpus_dir("BABI_QA_DIR")
    if qa_dir is None:
        missing(6, "BABI_QA_DIR", "bAbI 1k corpus")
        pytest.fail("bAbI 1k corpus not available")
    m = _mean_valid(qa_dir)
    gap = m[GMEMN2N] - m[MEMN2N]
    text = f"qa17 mean valid accuracy over 10 seeds: gmemn2n {m[GMEMN2N]:.1f}, memn2n {m[MEMN2N]:.1f}, gap {gap:+.1f}"
    if gap < 0:
        record(6, "PASS", text + " (WARNING: gap below 0; soft criterion)")
        warnings.warn(f"positional reasoning gap is negative: {gap:.1f}")
    else:
        record(6, "PASS", text)


# ---------------------------------------------------------------------------
# 7: dialog task 1


def test_criterion_7_dialog1(work):
    if SURROGATE:
        syn = write_dialog_task(work / "synthetic_dialog", 300, 50, 200, seed=4)
        report = train_cli(syn, "dialog1", work / "syn_dialog1", 3)
        r = report["results"]["test"]
        record(7, "INFO", f"synthetic dialog1 stand-in: per-response {r['accuracy']:.1f} "
                          f"(per-dialog {r['per_dialog_accuracy']:.1f}), best of 3")
    dlg_dir = corpus_dir("DIALOG_BABI_DIR")
    if dlg_dir is None:
        missing(7, "DIALOG_BABI_DIR", "Dialog bAbI corpus")
        pytest.fail("Dialog bAbI corpus not available")
    r = train_cli(dlg_dir, "dialog1", work / "dialog1", 3)["results"]["test"]
    ok = r["accuracy"] >= TARGET
    record(7, "PASS" if ok else "FAIL",
           f"dialog1 gmemn2n + match features: per-response {r['accuracy']:.1f} "
           f"(per-dialog {r['per_dialog_accuracy']:.1f}), best of 3 (>= {TARGET})")
    assert ok


# ---------------------------------------------------------------------------
# 8: metrics


def test_criterion_8_metrics():
    cases = [
        ((["x", "y", "z", "bad"], ["x", "y", "z", "w"], [0, 0, 1, 1]), (75.0, 50.0)),
        (([1, 2], [1, 2], [0, 1]), (100.0, 100.0)),
        (([0, 0, 0], [1, 1, 1], [0, 0, 1]), (0.0, 0.0)),
        (([1, 1, 0, 1, 1, 1], [1] * 6, [0, 0, 0, 1, 1, 2]), (500 / 6, 200 / 3)),
    ]
    got = [dialog_accuracy(*args) for args, _ in cases]
    ok = all(g == want for g, (_, want) in zip(got, cases))
    record(8, "PASS" if ok else "FAIL", f"per-response/per-dialog fixtures exact: {got}")
    assert ok


# ---------------------------------------------------------------------------
# 9: parsers over every shipped file


def _qa_invariants(path):
    exs = parse_qa_task(read_text(path))
    assert exs, f"{path.name}: no questions"
    for ex in exs:
        assert ex.answers and ex.question
        assert all(1 <= s <= len(ex.sentences) for s in ex.supporting), path.name
    return len(exs)


def _dialog_invariants(path, cands):
    exs = parse_dialog_task(read_text(path), cands)
    by_dialog = {}
    for ex in exs:
        by_dialog.setdefault(ex.dialog_id, []).append(ex)
    for turns in by_dialog.values():
        assert [t.turn for t in turns] == list(range(1, len(turns) + 1)), path.name
        last = turns[-1]
        users = [i for i, (who, _) in enumerate(last.history) if who == USER]
        assert len(users) == last.turn - 1, path.name
        # every user utterance is answered by the bot before the next user turn
        for i in users:
            assert i + 1 < len(last.history) and last.history[i + 1][0] != USER, path.name
    return len(exs)


def _parse_all(qa_dirs, dlg_dir):
    n_files = n_items = 0
    for d in qa_dirs:
        for path in sorted(d.glob("qa*_*.txt")):
            n_items += _qa_invariants(path)
            n_files += 1
    if dlg_dir is not None:
        for task in range(1, 7):
            try:
                files = find_dialog_files(dlg_dir, task)
            except FileNotFoundError:
                continue
            cands = parse_candidates(read_text(files["candidates"]))
            if "kb" in files:
                parse_kb(read_text(files["kb"]))
                n_files += 1
            for split in ("train", "valid", "test", "oov-test"):
                if split in files:
                    n_items += _dialog_invariants(files[split], cands)
                    n_files += 1
    return n_files, n_items


def test_criterion_9_parser_totality(work, synthetic_qa):
    if SURROGATE:
        syn_dlg = write_dialog_task(work / "parse_dialog", 50, 10, 20, seed=5)
        n_files, n_items = _parse_all([synthetic_qa], syn_dlg)
        record(9, "INFO", f"synthetic stand-in: {n_files} files, {n_items} items parsed, invariants hold")
    dirs = {v: corpus_dir(v) for v in ("BABI_QA_DIR", "BABI_QA10K_DIR", "DIALOG_BABI_DIR")}
    absent = [v for v, d in dirs.items() if d is None]
    if absent:
        record(9, "FAIL", f"corpora not available (set {', '.join(absent)}); criterion not evaluated")
        pytest.fail("corpora not available")
    try:
        n_files, n_items = _parse_all([dirs["BABI_QA_DIR"], dirs["BABI_QA10K_DIR"]], dirs["DIALOG_BABI_DIR"])
    except (ValueError, AssertionError) as exc:
        record(9, "FAIL", f"parse error or broken invariant: {exc}")
        raise
    ok = n_files > 0
    record(9, "PASS" if ok else "FAIL", f"{n_files} files, {n_items} items parsed with zero errors; invariants hold")
    assert ok
