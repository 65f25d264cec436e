"""Task ids and corpus loading: from ``qa1`` / ``dialog1`` plus a data directory
to parsed splits, a closed-world vocabulary and encoded datasets."""
from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from pathlib import Path

from .corpus import (
    CandidateSet,
    KnowledgeBaseIndex,
    Vocabulary,
    build_vocab,
    find_dialog_files,
    find_qa_files,
    parse_candidates,
    parse_dialog_task,
    parse_kb,
    parse_qa_task,
    read_text,
    split_validation,
)
from .encoder import (
    BAG_OF_WORDS,
    POSITION_ENCODING,
    CandidateFeatures,
    EncodedDataset,
    EncodingConfig,
    candidate_features,
    dialog_extra_tokens,
    encode_dialog_dataset,
    encode_qa_dataset,
)
from .model import CANDIDATE_HEAD, QA_HEAD

QA = "qa"
DIALOG = "dialog"
SPLITS = ("train", "valid", "test", "oov-test")

_TASK_RE = re.compile(r"^(qa|dialog)(\d+)(?:[,-](oov))?$")


@dataclass(frozen=True)
class TaskId:
    kind: str
    number: int
    oov: bool = False

    def __str__(self) -> str:
        return f"{self.kind}{self.number}" + (",oov" if self.oov else "")

    @property
    def head(self) -> str:
        return QA_HEAD if self.kind == QA else CANDIDATE_HEAD

    @property
    def default_split(self) -> str:
        return "oov-test" if self.oov else "test"


def parse_task_id(text: str) -> TaskId:
    """``qa1``..``qa20``, ``dialog1``..``dialog6``, optionally ``dialogN,oov``."""
    m = _TASK_RE.match(text.strip().lower())
    if not m:
        raise ValueError(f"unknown task id {text!r}")
    kind, num, oov = m.group(1), int(m.group(2)), bool(m.group(3))
    if kind == QA and not 1 <= num <= 20:
        raise ValueError(f"unknown task id {text!r}: QA tasks are qa1..qa20")
    if kind == DIALOG and not 1 <= num <= 6:
        raise ValueError(f"unknown task id {text!r}: dialog tasks are dialog1..dialog6")
    if oov and (kind == QA or num == 6):
        raise ValueError(f"task {text!r} has no OOV test set")
    return TaskId(kind, num, oov)


def default_encoding(task: TaskId, noise: float = 0.1, max_memory: int = 50) -> EncodingConfig:
    """QA: position encoding with noisy temporal matrices. Dialog: bags of words
    with speaker and turn tokens standing in for temporal features."""
    if task.kind == QA:
        return EncodingConfig(POSITION_ENCODING, True, noise, max_memory, False)
    return EncodingConfig(BAG_OF_WORDS, False, 0.0, max_memory, True)


def default_restarts(task: TaskId, data_dir: str | Path) -> int:
    if task.kind == DIALOG:
        return 10
    return 30 if "10k" in str(data_dir) else 100


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class TaskData:
    task: TaskId
    splits: dict[str, list]
    vocab: Vocabulary
    encoding: EncodingConfig
    paths: dict[str, Path]
    candidates: CandidateSet | None = None
    kb: KnowledgeBaseIndex | None = None
    match_features: bool = True
    _features: CandidateFeatures | None = field(default=None, repr=False)
    _encoded: dict[str, EncodedDataset] = field(default_factory=dict, repr=False)

    @property
    def features(self) -> CandidateFeatures | None:
        if self.candidates is None:
            return None
        if self._features is None:
            self._features = candidate_features(self.candidates, self.vocab, self.kb, self.match_features)
        return self._features

    def encoded(self, split: str) -> EncodedDataset:
        if split not in self.splits:
            raise KeyError(f"task {self.task} has no {split!r} split")
        if split not in self._encoded:
            exs = self.splits[split]
            if self.task.kind == QA:
                self._encoded[split] = encode_qa_dataset(exs, self.vocab, self.encoding)
            else:
                self._encoded[split] = encode_dialog_dataset(exs, self.vocab, self.encoding, self.features)
        return self._encoded[split]

    def digests(self) -> dict[str, str]:
        return {name: file_digest(p) for name, p in sorted(self.paths.items())}


def load_task(
    task: TaskId | str,
    data_dir: str | Path,
    valid_fraction: float = 0.1,
    seed: int = 0,
    encoding: EncodingConfig | None = None,
    match_features: bool = True,
) -> TaskData:
    """Parse every split of ``task`` and build the task's closed-world vocabulary.

    QA tasks hold out ``valid_fraction`` of the training file (fixed per task by
    ``seed``); dialog tasks use the corpus development split.
    """
    task = parse_task_id(task) if isinstance(task, str) else task
    enc = encoding or default_encoding(task)
    if task.kind == QA:
        paths = find_qa_files(data_dir, task.number)
        train = parse_qa_task(read_text(paths["train"]))
        train, valid = split_validation(train, valid_fraction, seed)
        splits = {"train": train, "valid": valid, "test": parse_qa_task(read_text(paths["test"]))}
        vocab = build_vocab(splits["train"] + splits["valid"] + splits["test"])
        return TaskData(task, splits, vocab, enc, paths)

    paths = find_dialog_files(data_dir, task.number)
    cands = parse_candidates(read_text(paths["candidates"]))
    kb = parse_kb(read_text(paths["kb"])) if "kb" in paths else None
    splits = {}
    for split in SPLITS:
        if split in paths:
            splits[split] = parse_dialog_task(read_text(paths[split]), cands)
    if "valid" not in splits:
        splits["train"], splits["valid"] = split_validation(splits["train"], valid_fraction, seed)
    if task.oov and "oov-test" not in splits:
        raise FileNotFoundError(f"no OOV test file for {task} under {data_dir}")
    everything = [ex for s in SPLITS if s in splits for ex in splits[s]]
    use_kb = kb if match_features else None
    vocab = build_vocab(everything, dialog_extra_tokens(everything, use_kb), cands)
    return TaskData(task, splits, vocab, enc, paths, cands, kb, match_features)
