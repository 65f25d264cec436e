"""Command line entry point: ``gmemn2n {train,eval,trace}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric divergence.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import shutil
import sys
import tempfile
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .corpus import CorpusFormatError
from .encoder import dialog_memory, truncate_memory
from .evaluator import (
    EvalReport,
    NoGatesError,
    attention_table,
    dialog_accuracy,
    gate_dump,
    gate_patterns,
    mean_gate,
    qa_accuracy,
    run_model,
)
from .model import FINAL_HOP, FINAL_SUM, GLOBAL, GMEMN2N, HOP, MEMN2N, ModelVariant
from .tasks import QA, TaskData, default_encoding, default_restarts, file_digest, load_task, parse_task_id
from .trainer import AllRunsDivergedError, DivergenceError, TrainConfig, train_with_restarts

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3
VALID_SPLIT_SEED = 0

logger = logging.getLogger(__name__)


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# configuration


def parse_config_file(text: str) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment. Values are typed by
    the matching :class:`TrainConfig` field."""
    types = TrainConfig.field_types()
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise UsageError(f"config line {lineno}: expected key=value")
        if key not in types:
            raise UsageError(f"config line {lineno}: unknown key {key!r}")
        try:
            out[key] = types[key](value)
        except ValueError:
            raise UsageError(f"config line {lineno}: bad {types[key].__name__} for {key}: {value!r}") from None
    return out


def resolve_config(file_values: dict, flag_values: dict) -> TrainConfig:
    """Defaults, then config file, then command-line flags."""
    merged = {**file_values, **{k: v for k, v in flag_values.items() if v is not None}}
    try:
        return TrainConfig(**merged)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def canonical_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def make_manifest(subcommand: str, config: dict, corpus: dict[str, Path], seed: int, out_dir: Path, extra: dict | None = None) -> dict:
    """Run description; the hash covers everything that determines outputs
    (not the output directory or absolute paths)."""
    digests = {name: file_digest(p) for name, p in sorted(corpus.items())}
    core = {"subcommand": subcommand, "config": config, "corpus_sha256": digests, "seed": seed, **(extra or {})}
    return {
        **core,
        "corpus_paths": {k: str(Path(p).resolve()) for k, p in sorted(corpus.items())},
        "out_dir": str(out_dir),
        "manifest_hash": canonical_hash(core),
    }


# ---------------------------------------------------------------------------
# output staging


class OutputDir:
    """Write into a staging directory; publish on success, discard on failure."""

    def __init__(self, target: str | Path):
        self.target = Path(target)

    def __enter__(self) -> Path:
        self.target.parent.mkdir(parents=True, exist_ok=True)
        self.stage = Path(tempfile.mkdtemp(prefix=f".{self.target.name}.", dir=self.target.parent))
        return self.stage

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            shutil.rmtree(self.stage, ignore_errors=True)
            return False
        if not self.target.exists():
            os.rename(self.stage, self.target)
            return False
        for src in sorted(self.stage.rglob("*")):
            dst = self.target / src.relative_to(self.stage)
            if src.is_dir():
                dst.mkdir(parents=True, exist_ok=True)
            else:
                os.replace(src, dst)
        shutil.rmtree(self.stage, ignore_errors=True)
        return False


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# subcommands


def _load(task, data_dir, cfg: TrainConfig, encoding=None, match_features=True) -> TaskData:
    if not Path(data_dir).is_dir():
        raise DataError(f"data directory not found: {data_dir}")
    try:
        enc = encoding or default_encoding(task, cfg.noise, cfg.max_memory)
        # the held-out split is fixed per task, independent of the training seed
        return load_task(task, data_dir, cfg.valid_fraction, VALID_SPLIT_SEED, enc, match_features)
    except (FileNotFoundError, CorpusFormatError) as exc:
        raise DataError(str(exc)) from None


def _variant_config(variant: ModelVariant, cfg: TrainConfig, td: TaskData) -> dict:
    return {
        "train": cfg.to_dict(),
        "encoding": asdict(td.encoding),
        "variant": asdict(variant),
        "match_features": td.match_features,
    }


def _evaluate(td: TaskData, params, variant, split: str) -> tuple[list, list, float, float | None, list]:
    data = td.encoded(split)
    pred, traces = run_model(params, data, variant)
    examples = td.splits[split]
    if td.task.kind == QA:
        words = td.vocab.index_to_word
        preds = [words[i] for i in pred]
        gold = [ex.answer for ex in examples]
        return preds, gold, qa_accuracy(preds, gold), None, traces
    texts = td.candidates.texts
    preds = [texts[i] for i in pred]
    gold = [ex.gold_response for ex in examples]
    resp, dlg = dialog_accuracy(preds, gold, [ex.dialog_id for ex in examples])
    return preds, gold, resp, dlg, traces


def cmd_train(args) -> int:
    task = _task(args.task)
    flags = {"restarts": args.restarts, "seed": args.seed, "hops": args.hops, "dim": args.dim, "total_epochs": args.epochs}
    if args.restarts is not None and args.restarts < 1:
        raise UsageError("--restarts must be >= 1")
    file_values = parse_config_file(_read(args.config)) if args.config else {}
    if "restarts" not in file_values and args.restarts is None:
        flags["restarts"] = default_restarts(task, args.data_dir)
    cfg = resolve_config(file_values, flags)
    variant = ModelVariant(args.variant, args.gate_tying, args.embedding_tying, task.head, args.final_combine)
    td = _load(task, args.data_dir, cfg, match_features=not args.no_match_features)
    config = _variant_config(variant, cfg, td)
    manifest = make_manifest("train", config, td.paths, cfg.seed, Path(args.out_dir), {"task": str(task)})
    _announce(manifest)

    try:
        report = train_with_restarts(td.encoded("train"), td.encoded("valid"), variant, cfg, args.jobs, args.verbose)
    except AllRunsDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    best = report.best
    mhash = manifest["manifest_hash"]
    results = {}
    for split in ("test", "oov-test"):
        if split in td.splits:
            _, _, acc, dlg, _ = _evaluate(td, best.params, variant, split)
            results[split] = {"accuracy": acc, "per_dialog_accuracy": dlg}
    metadata = {
        "task": str(task),
        "data_dir": str(Path(args.data_dir).resolve()),
        "match_features": td.match_features,
        "valid_accuracy": best.valid_accuracy,
        "manifest_hash": mhash,
    }
    ck = ckpt_io.Checkpoint(variant, cfg, td.encoding, best.params, td.vocab, best.seed, metadata)
    with OutputDir(args.out_dir) as out:
        ckpt_io.save(ck, out / "checkpoint.json")
        for i, run in enumerate(report.runs):
            _write_json(out / "runs" / f"run{i:03d}_seed{run.seed}.json", {**run.to_dict(), "manifest_hash": mhash})
        _write_json(out / "report.json", {**report.to_dict(), "task": str(task), "results": results, "manifest_hash": mhash})
        _write_json(out / "manifest.json", manifest)
    print(f"best seed {best.seed}: valid {best.valid_accuracy:.1f}")
    for split, r in results.items():
        print(_accuracy_line(str(task), split, r["accuracy"], r["per_dialog_accuracy"]))
    return EXIT_OK


def _accuracy_line(task: str, split: str, acc: float, dlg: float | None) -> str:
    if dlg is None:
        return f"{task} {split}: accuracy {acc:.1f}"
    return f"{task} {split}: {acc:.1f} ({dlg:.1f})"


def _load_checkpoint(args):
    try:
        ck = ckpt_io.load(args.checkpoint)
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {args.checkpoint}") from None
    except (ckpt_io.CheckpointError, KeyError, TypeError) as exc:
        raise DataError(f"bad checkpoint {args.checkpoint}: {exc}") from None
    if "task" not in ck.metadata:
        raise DataError("checkpoint does not record its task")
    task = _task(ck.metadata["task"])
    data_dir = args.data_dir or ck.metadata.get("data_dir")
    if not data_dir:
        raise UsageError("--data-dir is required")
    td = _load(task, data_dir, ck.train_config, ck.encoding, bool(ck.metadata.get("match_features", True)))
    if td.vocab != ck.vocabulary:
        raise DataError(
            f"vocabulary mismatch: checkpoint has {ck.vocabulary.size} words, corpus gives {td.vocab.size}"
        )
    split = args.split or task.default_split
    if split not in td.splits:
        raise DataError(f"task {task} has no {split!r} split under {data_dir}")
    return ck, td, split


def cmd_eval(args) -> int:
    ck, td, split = _load_checkpoint(args)
    config = _variant_config(ck.variant, ck.train_config, td)
    extra = {"task": str(td.task), "split": split, "checkpoint_sha256": file_digest(args.checkpoint)}
    manifest = make_manifest("eval", config, td.paths, ck.rng_seed, Path(args.out_dir), extra)
    _announce(manifest)
    preds, gold, acc, dlg, _ = _evaluate(td, ck.params, ck.variant, split)
    report = EvalReport(
        task=str(td.task), variant=asdict(ck.variant), split=split, predictions=preds, gold=gold,
        accuracy=acc, seed=ck.rng_seed, config_hash=canonical_hash(config),
        per_dialog_accuracy=dlg, manifest_hash=manifest["manifest_hash"],
    )
    with OutputDir(args.out_dir) as out:
        (out / f"eval_{split}.json").write_text(report.to_json(), encoding="utf-8")
        _write_json(out / f"eval_{split}.manifest.json", manifest)
    print(report.summary_line())
    return EXIT_OK


def _memories(td: TaskData, ex) -> list:
    enc = td.encoding
    if td.task.kind == QA:
        return truncate_memory(ex.sentences, enc.max_memory)
    return truncate_memory(dialog_memory(ex, enc.speaker_features), enc.max_memory)


def _example_header(td: TaskData, ex, pred: str) -> dict:
    if td.task.kind == QA:
        return {"question": " ".join(ex.question), "answer": ex.answer, "predicted": pred}
    return {"query": " ".join(ex.query), "gold": ex.gold_response, "predicted": pred}


def _example_rows(ids, pred, targets, labels, traces) -> str:
    """One CSV row per example: outcome, most attended memory and mean gate per hop."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    hops = len(traces[0].attention)
    w.writerow(["example", "correct", "predicted", "gold"]
               + [f"top_row_hop{k + 1}" for k in range(hops)] + [f"gate_mean_hop{k + 1}" for k in range(hops)])
    for i, p, t, tr in zip(ids, pred, targets, traces):
        gates = [mean_gate(g) for g in tr.gates]
        w.writerow([i, int(p == t), labels[p], labels[t]]
                   + [int(np.argmax(a)) for a in tr.attention]
                   + ["N/A" if g is None else format(g, ".6g") for g in gates])
    return buf.getvalue()


def cmd_trace(args) -> int:
    ck, td, split = _load_checkpoint(args)
    if args.gates and not ck.variant.gated:
        raise UsageError("gate dump requested for a memn2n checkpoint (no gates)")
    examples = td.splits[split]
    if args.example_id is not None and not 0 <= args.example_id < len(examples):
        raise UsageError(f"--example-id {args.example_id} out of range [0, {len(examples)})")
    config = _variant_config(ck.variant, ck.train_config, td)
    extra = {
        "task": str(td.task), "split": split, "checkpoint_sha256": file_digest(args.checkpoint),
        "example_id": args.example_id, "all": bool(args.all),
    }
    manifest = make_manifest("trace", config, td.paths, ck.rng_seed, Path(args.out_dir), extra)
    mhash = manifest["manifest_hash"]
    _announce(manifest)
    ids = [args.example_id] if args.example_id is not None else list(range(len(examples)))
    pred, traces = run_model(ck.params, td.encoded(split), ck.variant, ids)
    labels = td.vocab.index_to_word if td.task.kind == QA else td.candidates.texts
    targets = td.encoded(split).targets[ids]
    stamp = f"# manifest_hash: {mhash}\n"
    with OutputDir(args.out_dir) as out:
        if args.example_id is not None:
            ex, tr = examples[args.example_id], traces[0]
            header = {"example": args.example_id, **_example_header(td, ex, labels[pred[0]]), "manifest_hash": mhash}
            table = attention_table(tr, _memories(td, ex), header)
            stem = f"trace_{split}_{args.example_id}"
            (out / f"{stem}.txt").write_text(table.to_text(), encoding="utf-8")
            (out / f"{stem}.csv").write_text(stamp + table.to_csv(), encoding="utf-8")
            print(table.to_text(), end="")
        if args.all or args.gates:
            if ck.variant.gated:
                dump = gate_dump(traces, list(pred == targets), ids)
                (out / f"gates_{split}.csv").write_text(stamp + dump.to_csv(), encoding="utf-8")
                patterns = gate_patterns(dump, 3, seed=0)
                _write_json(out / f"gate_patterns_{split}.json", {"patterns": patterns, "manifest_hash": mhash})
            if args.all:
                rows = ["example,memory_row," + ",".join(f"hop{k + 1}" for k in range(len(traces[0].attention)))]
                for i, tr in zip(ids, traces):
                    att = np.stack(tr.attention, axis=1)
                    rows += [f"{i},{r}," + ",".join(format(float(x), ".6g") for x in row) for r, row in enumerate(att)]
                (out / f"attention_{split}.csv").write_text(stamp + "\n".join(rows) + "\n", encoding="utf-8")
                (out / f"examples_{split}.csv").write_text(
                    stamp + _example_rows(ids, pred, targets, labels, traces), encoding="utf-8"
                )
        _write_json(out / f"trace_{split}.manifest.json", manifest)
    if args.all:
        acc = 100.0 * float(np.mean(pred == targets))
        print(f"traced {len(ids)} examples of {td.task} {split} (accuracy {acc:.1f})")
    return EXIT_OK


# ---------------------------------------------------------------------------


def _task(text: str):
    try:
        return parse_task_id(text)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _read(path: str) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config file: {exc}") from None


def _announce(manifest: dict) -> None:
    print(json.dumps({k: manifest[k] for k in ("subcommand", "config", "seed", "manifest_hash")}, sort_keys=True),
          file=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gmemn2n", description="Train, evaluate and inspect (gated) end-to-end memory networks.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train with restarts and save the best checkpoint")
    t.add_argument("--task", required=True, help="qa1..qa20 or dialog1..dialog6")
    t.add_argument("--data-dir", required=True)
    t.add_argument("--variant", choices=[MEMN2N, GMEMN2N], default=GMEMN2N)
    t.add_argument("--gate-tying", choices=[GLOBAL, HOP], default=HOP)
    t.add_argument("--embedding-tying", choices=["adjacent", "none"], default="adjacent")
    t.add_argument("--final-combine", choices=[FINAL_HOP, FINAL_SUM], default=FINAL_HOP)
    t.add_argument("--restarts", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--hops", type=int)
    t.add_argument("--dim", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--config", help="file of key=value TrainConfig overrides")
    t.add_argument("--no-match-features", action="store_true")
    t.add_argument("--jobs", type=int, default=None, help="parallel restarts")
    t.add_argument("--out-dir", required=True)
    t.add_argument("--verbose", action="store_true")
    t.set_defaults(func=cmd_train)

    for name, func, helptext in (
        ("eval", cmd_eval, "accuracy of a checkpoint on a split"),
        ("trace", cmd_trace, "attention tables and gate dumps"),
    ):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--data-dir", help="defaults to the directory recorded in the checkpoint")
        s.add_argument("--split", choices=["test", "oov-test", "valid"])
        s.add_argument("--out-dir", required=True)
        s.set_defaults(func=func)
        if name == "trace":
            g = s.add_mutually_exclusive_group(required=True)
            g.add_argument("--example-id", type=int)
            g.add_argument("--all", action="store_true")
            s.add_argument("--gates", action="store_true", help="also dump gate vectors (gmemn2n only)")
    return p


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, NoGatesError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DivergenceError, FloatingPointError) as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
