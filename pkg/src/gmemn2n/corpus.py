"""Readers for the bAbI QA (v1.2) and Dialog bAbI text formats.

QA task files (``qa<N>_<name>_{train,test}.txt``)::

    file     := line*
    line     := ID ' ' sentence '\\n'
              | ID ' ' question '\\t' answer '\\t' support '\\n'
    answer   := word (',' word)*
    support  := ID (' ' ID)*

``ID`` restarts at 1 for every story and otherwise increases by one per line.
Supporting ids point at earlier statement lines of the same story.

Dialog task files (``dialog-babi-task<N>-<name>-{trn,dev,tst,tst-OOV}.txt``)::

    dialog   := turn+ '\\n'
    turn     := ID ' ' user_utterance '\\t' bot_utterance '\\n'
              | ID ' ' kb_result '\\n'

Candidate files hold one ``ID response`` per line; knowledge-base files hold
``[ID] restaurant R_property value`` triples.
"""
from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

NIL = "<nil>"
USER = "user"
BOT = "bot"

_PUNCT = re.compile(r"[.?!]+$")


class CorpusFormatError(ValueError):
    """Malformed corpus input; the message carries the offending line number."""


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, drop trailing ``.``/``?``/``!``."""
    tokens = []
    for raw in text.lower().split():
        word = _PUNCT.sub("", raw)
        if word:
            tokens.append(word)
    return tokens


def normalize_utterance(text: str) -> str:
    return " ".join(text.split())


@dataclass
class QaExample:
    sentences: list[list[str]]
    question: list[str]
    answers: list[str]
    supporting: list[int] = field(default_factory=list)

    @property
    def answer(self) -> str:
        """Single label for the softmax head; multi-word answers are comma-joined."""
        return ",".join(self.answers)


@dataclass
class DialogExample:
    history: list[tuple[str, list[str]]]
    query: list[str]
    gold_response: str
    candidate_ids: list[int]
    dialog_id: int = 0
    turn: int = 1
    # 1-based turn index of each history entry, used for time features
    history_turns: list[int] = field(default_factory=list)

    @property
    def gold_index(self) -> int:
        return self.candidate_ids[0]


class Vocabulary:
    """Bijective word <-> index map; index 0 is the nil word."""

    def __init__(self, words: Iterable[str] = ()):
        self.index_to_word: list[str] = [NIL]
        self.word_to_index: dict[str, int] = {NIL: 0}
        for w in words:
            self.add(w)

    def add(self, word: str) -> int:
        idx = self.word_to_index.get(word)
        if idx is None:
            idx = len(self.index_to_word)
            self.word_to_index[word] = idx
            self.index_to_word.append(word)
        return idx

    def __len__(self) -> int:
        return len(self.index_to_word)

    def __contains__(self, word: str) -> bool:
        return word in self.word_to_index

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.index_to_word == other.index_to_word

    @property
    def size(self) -> int:
        return len(self.index_to_word)

    def index(self, word: str) -> int:
        return self.word_to_index[word]

    def lookup(self, tokens: Sequence[str]) -> list[int]:
        """Map tokens to indices; unknown tokens become the nil index."""
        out = []
        for t in tokens:
            idx = self.word_to_index.get(t)
            if idx is None:
                logger.warning("out-of-vocabulary token %r mapped to nil", t)
                idx = 0
            out.append(idx)
        return out


@dataclass
class CandidateSet:
    texts: list[str]
    tokens: list[list[str]]
    _index: dict[str, int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._index = {}
        for i, t in enumerate(self.texts):
            if t in self._index:
                raise CorpusFormatError(f"duplicate candidate {t!r}")
            self._index[t] = i

    def __len__(self) -> int:
        return len(self.texts)

    def index_of(self, text: str) -> int | None:
        return self._index.get(normalize_utterance(text))

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "CandidateSet":
        norm = [normalize_utterance(t) for t in texts]
        return cls(norm, [tokenize(t) for t in norm])


@dataclass
class KnowledgeBaseIndex:
    """Known values per restaurant property type, in file order of first appearance."""

    properties: dict[str, set[str]] = field(default_factory=dict)

    @property
    def property_names(self) -> list[str]:
        return list(self.properties)

    def __bool__(self) -> bool:
        return bool(self.properties)


# ---------------------------------------------------------------------------
# QA


def _split_id(line: str, lineno: int) -> tuple[int, str]:
    head, _, rest = line.partition(" ")
    try:
        return int(head), rest
    except ValueError:
        raise CorpusFormatError(f"line {lineno}: expected a numeric line id, got {head!r}") from None


def parse_qa_task(text: str) -> list[QaExample]:
    """Parse one bAbI v1.2 QA file into one example per question line."""
    examples: list[QaExample] = []
    story: list[list[str]] = []
    line_to_sentence: dict[int, int] = {}
    prev_id = 0
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip("\n\r")
        if not line.strip():
            continue
        line_id, rest = _split_id(line.lstrip(), lineno)
        if line_id == 1:
            story, line_to_sentence = [], {}
        elif line_id != prev_id + 1:
            raise CorpusFormatError(f"line {lineno}: non-monotone id {line_id} after {prev_id}")
        prev_id = line_id
        if "\t" in rest:
            fields = rest.split("\t")
            question = tokenize(fields[0])
            answer_field = fields[1].strip() if len(fields) > 1 else ""
            if not answer_field:
                raise CorpusFormatError(f"line {lineno}: question without answer")
            answers = [a.strip().lower() for a in answer_field.split(",") if a.strip()]
            support = []
            if len(fields) > 2 and fields[2].strip():
                for tok in fields[2].split():
                    sid = int(tok) if tok.isdigit() else -1
                    if sid not in line_to_sentence:
                        raise CorpusFormatError(
                            f"line {lineno}: supporting id {sid} is not an earlier statement"
                        )
                    support.append(line_to_sentence[sid])
            examples.append(QaExample([list(s) for s in story], question, answers, support))
        else:
            story.append(tokenize(rest))
            line_to_sentence[line_id] = len(story)
    return examples


def format_qa_examples(examples: Iterable[QaExample]) -> str:
    """Canonical text with one story per example; re-parses to equal examples."""
    lines = []
    for ex in examples:
        for i, sent in enumerate(ex.sentences, start=1):
            lines.append(f"{i} {' '.join(sent)}")
        qid = len(ex.sentences) + 1
        support = " ".join(str(s) for s in ex.supporting)
        lines.append(f"{qid} {' '.join(ex.question)}\t{','.join(ex.answers)}\t{support}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Dialog


def parse_candidates(text: str) -> CandidateSet:
    texts = []
    for raw in text.splitlines():
        if not raw.strip():
            continue
        head, _, rest = raw.strip().partition(" ")
        texts.append(rest if head.isdigit() else raw.strip())
    return CandidateSet.from_texts(texts)


def parse_kb(text: str) -> KnowledgeBaseIndex:
    kb = KnowledgeBaseIndex()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        parts = raw.split()
        if not parts:
            continue
        if parts[0].isdigit():
            parts = parts[1:]
        if len(parts) < 3:
            raise CorpusFormatError(f"kb line {lineno}: expected '<restaurant> <property> <value>'")
        prop = parts[1].lower()
        value = " ".join(parts[2:]).lower()
        kb.properties.setdefault(prop, set()).add(value)
    overlap = _kb_ambiguities(kb)
    if overlap:
        logger.info("kb values shared across property types: %s", sorted(overlap)[:10])
    return kb


def _kb_ambiguities(kb: KnowledgeBaseIndex) -> set[str]:
    seen: dict[str, str] = {}
    shared = set()
    for prop, values in kb.properties.items():
        for v in values:
            if v in seen and seen[v] != prop:
                shared.add(v)
            seen[v] = prop
    return shared


def parse_dialog_task(text: str, candidates: CandidateSet) -> list[DialogExample]:
    """One example per bot turn; memory holds every earlier utterance of the dialog.

    Lines without a tab (knowledge-base results returned to the bot) are stored
    as bot-side memories and do not produce examples.
    """
    examples: list[DialogExample] = []
    history: list[tuple[str, list[str]]] = []
    turns: list[int] = []
    dialog_id = 0
    turn = 0
    in_dialog = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        if not raw.strip():
            if in_dialog:
                dialog_id += 1
            history, turns, turn, in_dialog = [], [], 0, False
            continue
        _, rest = _split_id(raw.strip(), lineno)
        in_dialog = True
        if "\t" not in rest:
            history.append((BOT, tokenize(rest)))
            turns.append(max(turn, 1))
            continue
        user, bot = rest.split("\t", 1)
        bot = normalize_utterance(bot)
        cid = candidates.index_of(bot)
        if cid is None:
            raise CorpusFormatError(f"line {lineno}: bot utterance not in candidate set: {bot!r}")
        turn += 1
        examples.append(
            DialogExample(
                history=[(s, list(t)) for s, t in history],
                query=tokenize(user),
                gold_response=bot,
                candidate_ids=[cid],
                dialog_id=dialog_id,
                turn=turn,
                history_turns=list(turns),
            )
        )
        history.append((USER, tokenize(user)))
        history.append((BOT, tokenize(bot)))
        turns.extend([turn, turn])
    return examples


N_KB_PROPERTIES = 7
_warned_no_kb = False


def extract_match_features(
    context_words: set[str], candidate: Sequence[str], kb: KnowledgeBaseIndex | None
) -> np.ndarray:
    """One bit per KB property type: a candidate word is a known value of that
    type and also occurs in the query or memory.

    Without a knowledge base every bit is zero (one warning per process).
    """
    global _warned_no_kb
    if not kb:
        if not _warned_no_kb:
            logger.warning("no knowledge base loaded: match features are all zero")
            _warned_no_kb = True
        return np.zeros(N_KB_PROPERTIES)
    bits = np.zeros(len(kb.properties))
    for p, values in enumerate(kb.properties.values()):
        for w in candidate:
            if w in values and w in context_words:
                bits[p] = 1.0
                break
    return bits


# ---------------------------------------------------------------------------
# Vocabulary and splits


def qa_tokens(ex: QaExample) -> Iterable[str]:
    for s in ex.sentences:
        yield from s
    yield from ex.question
    yield ex.answer


def dialog_tokens(ex: DialogExample) -> Iterable[str]:
    for _, utt in ex.history:
        yield from utt
    yield from ex.query


def build_vocab(
    examples: Iterable[QaExample | DialogExample],
    extra_tokens: Iterable[str] = (),
    candidates: CandidateSet | None = None,
) -> Vocabulary:
    """First-occurrence vocabulary; ``extra_tokens`` take the slots right after nil."""
    vocab = Vocabulary(extra_tokens)
    for ex in examples:
        toks = qa_tokens(ex) if isinstance(ex, QaExample) else dialog_tokens(ex)
        for t in toks:
            vocab.add(t)
    if candidates is not None:
        for toks in candidates.tokens:
            for t in toks:
                vocab.add(t)
    return vocab


def split_validation(train: Sequence, fraction: float = 0.1, seed: int = 0) -> tuple[list, list]:
    """Hold out ``round(fraction * N)`` examples (at least one) chosen by ``seed``."""
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie in (0, 1)")
    n = len(train)
    n_valid = min(max(1, int(math.floor(fraction * n + 0.5))), n - 1) if n > 1 else 0
    perm = np.random.default_rng(seed).permutation(n)
    valid_idx = set(perm[:n_valid].tolist())
    kept = [x for i, x in enumerate(train) if i not in valid_idx]
    valid = [train[i] for i in sorted(valid_idx)]
    return kept, valid


# ---------------------------------------------------------------------------
# Task file discovery


def find_qa_files(data_dir: str | Path, task: int) -> dict[str, Path]:
    data_dir = Path(data_dir)
    out = {}
    for split in ("train", "test"):
        hits = sorted(data_dir.glob(f"qa{task}_*_{split}.txt"))
        if not hits:
            raise FileNotFoundError(f"no qa{task} {split} file under {data_dir}")
        out[split] = hits[0]
    return out


def find_dialog_files(data_dir: str | Path, task: int) -> dict[str, Path]:
    data_dir = Path(data_dir)
    out = {}
    for split, suffix in (("train", "trn"), ("valid", "dev"), ("test", "tst"), ("oov-test", "tst-OOV")):
        hits = sorted(data_dir.glob(f"dialog-babi-task{task}-*-{suffix}.txt"))
        if hits:
            out[split] = hits[0]
    if "train" not in out:
        raise FileNotFoundError(f"no dialog task {task} training file under {data_dir}")
    if task == 6:
        cands = sorted(data_dir.glob("dialog-babi-task6-*candidates*.txt"))
        kbs = sorted(data_dir.glob("dialog-babi-task6-*kb*.txt"))
    else:
        cands = [data_dir / "dialog-babi-candidates.txt"]
        kbs = [data_dir / "dialog-babi-kb-all.txt"]
    if not cands or not cands[0].exists():
        raise FileNotFoundError(f"no candidates file for dialog task {task} under {data_dir}")
    out["candidates"] = cands[0]
    if kbs and kbs[0].exists():
        out["kb"] = kbs[0]
    return out


def read_text(path: str | Path) -> str:
    return Path(path).read_text(encoding="utf-8")
