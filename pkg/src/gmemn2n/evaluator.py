"""Accuracy metrics, attention tables and gate dumps."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from sklearn.cluster import KMeans

from .encoder import EncodedDataset, make_batch
from .model import HopTrace, ModelParams, ModelVariant, forward_batch, trace_example


class NoGatesError(ValueError):
    """Raised when gate values are requested from a model without gates."""


def qa_accuracy(predictions: Sequence, gold: Sequence) -> float:
    """Percentage of exact matches between predicted and gold answers."""
    if len(predictions) != len(gold):
        raise ValueError(f"{len(predictions)} predictions for {len(gold)} gold answers")
    if not len(gold):
        return float("nan")
    return 100.0 * sum(p == g for p, g in zip(predictions, gold)) / len(gold)


def dialog_accuracy(predictions: Sequence, gold: Sequence, dialog_ids: Sequence) -> tuple[float, float]:
    """``(per_response, per_dialog)`` accuracy in percent.

    A dialog counts as correct only when every one of its responses is.
    """
    if not len(predictions) == len(gold) == len(dialog_ids):
        raise ValueError("predictions, gold and dialog_ids must have equal length")
    if not len(gold):
        return float("nan"), float("nan")
    per_dialog: dict = {}
    hits = 0
    for p, g, d in zip(predictions, gold, dialog_ids):
        ok = p == g
        hits += ok
        per_dialog[d] = per_dialog.get(d, True) and ok
    return 100.0 * hits / len(gold), 100.0 * sum(per_dialog.values()) / len(per_dialog)


@dataclass
class EvalReport:
    task: str
    variant: dict
    split: str
    predictions: list
    gold: list
    accuracy: float
    seed: int
    config_hash: str
    per_dialog_accuracy: float | None = None
    manifest_hash: str | None = None

    def __post_init__(self):
        if len(self.predictions) != len(self.gold):
            raise ValueError("prediction count must equal example count")

    def summary_line(self) -> str:
        if self.per_dialog_accuracy is None:
            return f"{self.task} {self.split}: accuracy {self.accuracy:.1f}"
        return f"{self.task} {self.split}: {self.accuracy:.1f} ({self.per_dialog_accuracy:.1f})"

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))


def run_model(
    params: ModelParams,
    data: EncodedDataset,
    variant: ModelVariant,
    indices: Sequence[int] | None = None,
    batch_size: int = 256,
) -> tuple[np.ndarray, list[HopTrace]]:
    """Argmax predictions and per-example traces for ``indices`` (default: all)."""
    indices = list(range(len(data))) if indices is None else list(indices)
    preds, traces = [], []
    for start in range(0, len(indices), batch_size):
        chunk = indices[start : start + batch_size]
        cache = forward_batch(params, make_batch(data, chunk, "eval"), variant, True)
        preds.append(cache.logits.argmax(axis=1))
        traces.extend(trace_example(cache, b) for b in range(len(chunk)))
    pred = np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)
    return pred, traces


# ---------------------------------------------------------------------------
# attention tables


def mean_gate(gate: np.ndarray | None) -> float | None:
    """Average transform-gate cell value of one hop, ``Σ_i T_i / d``."""
    if gate is None:
        return None
    return float(np.sum(gate) / gate.shape[0])


@dataclass
class AttentionTable:
    sentences: list[str]
    attention: np.ndarray            # (n, K)
    gate_means: list[float | None]   # per hop; None for plain hops
    header: dict = field(default_factory=dict)

    @property
    def hops(self) -> int:
        return self.attention.shape[1]

    def to_text(self) -> str:
        width = max([len(s) for s in self.sentences] + [len("Avg. gate value")])
        cols = "".join(f"  {'hop ' + str(k + 1):>7}" for k in range(self.hops))
        lines = [f"# {k}: {v}" for k, v in self.header.items()]
        lines.append(f"{'memory':<{width}}{cols}")
        for s, row in zip(self.sentences, self.attention):
            lines.append(f"{s:<{width}}" + "".join(f"  {x:7.2f}" for x in row))
        footer = "".join(f"  {'N/A' if g is None else format(g, '.2f'):>7}" for g in self.gate_means)
        lines.append(f"{'Avg. gate value':<{width}}{footer}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["row", "memory"] + [f"hop{k + 1}" for k in range(self.hops)])
        for i, (s, row) in enumerate(zip(self.sentences, self.attention)):
            w.writerow([i, s] + [format(float(x), ".6g") for x in row])
        w.writerow(["gate_mean", ""] + ["N/A" if g is None else format(g, ".6g") for g in self.gate_means])
        return buf.getvalue()


def attention_table(trace: HopTrace, sentences: Sequence[Sequence[str]] | Sequence[str], header: dict | None = None) -> AttentionTable:
    """Per-sentence attention for every hop with the mean gate per hop as footer.

    ``sentences`` are the memories actually attended to (already truncated).
    An empty memory is shown as a single nil row.
    """
    texts = [s if isinstance(s, str) else " ".join(s) for s in sentences] or ["<nil>"]
    att = np.stack(trace.attention, axis=1)
    if att.shape[0] != len(texts):
        raise ValueError(f"{len(texts)} sentences for {att.shape[0]} attention rows")
    return AttentionTable(texts, att, [mean_gate(g) for g in trace.gates], dict(header or {}))


# ---------------------------------------------------------------------------
# gate dumps


def gate_vector(trace: HopTrace) -> np.ndarray:
    """Flattened ``[T^1; ...; T^K]`` for one example (gated hops only)."""
    gates = [g for g in trace.gates if g is not None]
    if not gates:
        raise NoGatesError("model has no gates (plain memn2n variant)")
    return np.concatenate(gates)


@dataclass
class GateDump:
    ids: list
    correct: list[bool]
    vectors: np.ndarray      # (N, K*d)
    hops: list[int]          # hop number of each gate block
    dim: int

    def columns(self) -> list[str]:
        return [f"T{k}_{j + 1}" for k in self.hops for j in range(self.dim)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["id", "correct"] + self.columns())
        for i, ok, vec in zip(self.ids, self.correct, self.vectors):
            w.writerow([i, int(bool(ok))] + [format(float(x), ".6g") for x in vec])
        return buf.getvalue()


def gate_dump(traces: Sequence[HopTrace], correct: Sequence[bool], ids: Sequence | None = None) -> GateDump:
    """One gate row per example; columns run hop-major, then dimension."""
    if not traces:
        raise ValueError("no traces to dump")
    ids = list(range(len(traces))) if ids is None else list(ids)
    vectors = np.stack([gate_vector(t) for t in traces])
    hops = [k + 1 for k, g in enumerate(traces[0].gates) if g is not None]
    dim = vectors.shape[1] // len(hops)
    return GateDump(ids, list(correct), vectors, hops, dim)


def gate_patterns(dump: GateDump, n_patterns: int = 3, seed: int = 0) -> list[dict]:
    """Most frequent gate patterns as k-means centroids, largest cluster first."""
    n = len(dump.vectors)
    k = min(n_patterns, len(np.unique(dump.vectors, axis=0)))
    km = KMeans(n_clusters=k, n_init=10, random_state=seed).fit(dump.vectors)
    counts = np.bincount(km.labels_, minlength=k)
    correct = np.asarray(dump.correct, dtype=bool)
    out = []
    for c in np.argsort(-counts, kind="stable"):
        members = km.labels_ == c
        out.append({
            "count": int(counts[c]),
            "fraction": float(counts[c] / n),
            "correct_fraction": float(correct[members].mean()) if members.any() else float("nan"),
            "centroid": [float(format(x, ".6g")) for x in km.cluster_centers_[c]],
        })
    return out
