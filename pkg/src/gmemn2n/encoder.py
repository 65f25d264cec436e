"""Map token sequences into the model's bag and embedding spaces.

Position encoding weights word ``j`` of a ``J``-word sentence in embedding
dimension ``k`` by ``l_kj = (1 - j/J) - (k/d)(1 - 2j/J)``. Writing this as
``a_j + (k/d) b_j`` with ``a_j = 1 - j/J`` and ``b_j = 2j/J - 1`` lets an
embedding be computed from two weighted bags::

    E·bag_a(x) + (k/d) ⊙ E·bag_b(x)

which is how batches are built (sparse ``(rows, |V|)`` matrices). The per-example
functions here (:func:`embed_sentence`, :func:`encode_memory`) follow the formula
word by word and serve as the reference path.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .corpus import (
    BOT,
    USER,
    CandidateSet,
    DialogExample,
    KnowledgeBaseIndex,
    QaExample,
    Vocabulary,
)
from .tensor_core import ContractError, make_rng

BAG_OF_WORDS = "bag_of_words"
POSITION_ENCODING = "position_encoding"
SCHEMES = (BAG_OF_WORDS, POSITION_ENCODING)

SPEAKER_TOKENS = {USER: "$user", BOT: "$bot"}


def time_token(turn: int) -> str:
    return f"$t{turn}"


def match_token(prop: str) -> str:
    return f"$match_{prop}"


@dataclass
class EncodingConfig:
    scheme: str = POSITION_ENCODING
    temporal: bool = True
    noise_fraction: float = 0.1
    max_memory: int = 50
    speaker_features: bool = False

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown encoding scheme {self.scheme!r}")
        if not 0 <= self.noise_fraction < 1:
            raise ValueError("noise_fraction must lie in [0, 1)")
        if self.max_memory < 1:
            raise ValueError("max_memory must be >= 1")

    @property
    def temporal_slots(self) -> int:
        # round first: 50 * 1.1 is 55.000000000000007 in binary
        return int(math.ceil(round(self.max_memory * (1 + self.noise_fraction), 9))) + 1


@dataclass
class EncodedMemory:
    input_cells: np.ndarray   # (n, d)
    output_cells: np.ndarray  # (n, d)

    @property
    def count(self) -> int:
        return self.input_cells.shape[0]


# ---------------------------------------------------------------------------
# reference (per-example) path


def phi(tokens: Sequence[str], vocab: Vocabulary) -> np.ndarray:
    """|V|-dim multiplicity vector."""
    out = np.zeros(vocab.size)
    for idx in vocab.lookup(tokens):
        out[idx] += 1.0
    return out


def position_weights(n_words: int, dim: int) -> np.ndarray:
    """``(J, d)`` matrix of ``l_kj``; row ``j-1`` holds the weights of word ``j``."""
    J = n_words
    j = np.arange(1, J + 1)[:, None]
    k = np.arange(1, dim + 1)[None, :]
    return (1 - j / J) - (k / dim) * (1 - 2 * j / J)


def embed_sentence(tokens: Sequence[str], E: np.ndarray, vocab: Vocabulary, scheme: str) -> np.ndarray:
    """Embed a sentence with ``E`` of shape ``(d, |V|)``."""
    d = E.shape[0]
    if not tokens:
        return np.zeros(d)
    if scheme == BAG_OF_WORDS:
        return E @ phi(tokens, vocab)
    if scheme != POSITION_ENCODING:
        raise ValueError(f"unknown encoding scheme {scheme!r}")
    l = position_weights(len(tokens), d)
    out = np.zeros(d)
    for j, idx in enumerate(vocab.lookup(tokens)):
        out += l[j] * E[:, idx]
    return out


def encode_question(tokens: Sequence[str], B: np.ndarray, vocab: Vocabulary, scheme: str) -> np.ndarray:
    return embed_sentence(tokens, B, vocab, scheme)


def truncate_memory(sentences: Sequence, max_memory: int) -> list:
    return list(sentences[-max_memory:]) if max_memory else list(sentences)


def temporal_indices(n: int, noise_fraction: float, mode: str, rng=None) -> np.ndarray:
    """Recency index of each of ``n`` memories (0 = most recent).

    In train mode a random number of dummy memories, uniform on
    ``[0, ceil(noise_fraction * n)]`` inclusive, is interleaved at random positions;
    the dummies only shift the indices of the real memories.
    """
    if mode == "train" and noise_fraction > 0 and n > 0:
        rng = make_rng(rng)
        n_blank = int(rng.integers(0, int(math.ceil(noise_fraction * n)), endpoint=True))
        if n_blank:
            total = n + n_blank
            real = np.sort(rng.choice(total, size=n, replace=False))
            return (total - 1 - real).astype(np.int64)
    return np.arange(n - 1, -1, -1, dtype=np.int64)


def encode_memory(
    sentences: Sequence[Sequence[str]],
    A: np.ndarray,
    C: np.ndarray,
    T_A: np.ndarray | None,
    T_C: np.ndarray | None,
    vocab: Vocabulary,
    cfg: EncodingConfig,
    mode: str = "eval",
    rng=None,
) -> EncodedMemory:
    """``m_i = embed(x_i, A) + T_A[:, rev(i)]`` and likewise for ``c_i``.

    ``sentences`` must already be truncated to ``cfg.max_memory``.
    """
    n = len(sentences)
    if n > cfg.max_memory:
        raise ContractError(f"{n} memories exceed max_memory={cfg.max_memory}")
    m = np.array([embed_sentence(s, A, vocab, cfg.scheme) for s in sentences]).reshape(n, A.shape[0])
    c = np.array([embed_sentence(s, C, vocab, cfg.scheme) for s in sentences]).reshape(n, C.shape[0])
    if cfg.temporal and T_A is not None:
        idx = temporal_indices(n, cfg.noise_fraction, mode, rng)
        if n and idx.max() >= T_A.shape[1]:
            raise ContractError(f"temporal index {idx.max()} exceeds {T_A.shape[1]} slots")
        m = m + T_A[:, idx].T
        c = c + T_C[:, idx].T
    return EncodedMemory(m, c)


def add_speaker_features(tokens: Sequence[str], speaker: str, turn: int | None = None) -> list[str]:
    out = list(tokens) + [SPEAKER_TOKENS[speaker]]
    if turn is not None:
        out.append(time_token(turn))
    return out


def dialog_memory(ex: DialogExample, speaker_features: bool = True) -> list[list[str]]:
    mem = []
    turns = ex.history_turns or [None] * len(ex.history)
    for (speaker, utt), turn in zip(ex.history, turns):
        mem.append(add_speaker_features(utt, speaker, turn) if speaker_features else list(utt))
    return mem


def dialog_extra_tokens(examples: Sequence[DialogExample], kb: KnowledgeBaseIndex | None) -> list[str]:
    """Reserved vocabulary slots: speakers, turn times and match features."""
    max_turn = max((t for ex in examples for t in ex.history_turns), default=0)
    extras = [SPEAKER_TOKENS[USER], SPEAKER_TOKENS[BOT]]
    extras += [time_token(t) for t in range(1, max_turn + 1)]
    if kb:
        extras += [match_token(p) for p in kb.property_names]
    return extras


# ---------------------------------------------------------------------------
# batched path


@dataclass
class _Bags:
    rows: np.ndarray
    cols: np.ndarray
    wa: np.ndarray
    wb: np.ndarray


def _bag_entries(sentences: Sequence[Sequence[str]], vocab: Vocabulary, scheme: str) -> _Bags:
    rows, cols, wa, wb = [], [], [], []
    for r, sent in enumerate(sentences):
        J = len(sent)
        if not J:
            continue
        ids = vocab.lookup(sent)
        j = np.arange(1, J + 1)
        rows.append(np.full(J, r))
        cols.append(np.asarray(ids))
        if scheme == POSITION_ENCODING:
            wa.append(1 - j / J)
            wb.append(2 * j / J - 1)
        else:
            wa.append(np.ones(J))
            wb.append(np.zeros(J))
    if not rows:
        empty = np.zeros(0)
        return _Bags(empty.astype(np.int64), empty.astype(np.int64), empty, empty)
    return _Bags(
        np.concatenate(rows).astype(np.int64),
        np.concatenate(cols).astype(np.int64),
        np.concatenate(wa),
        np.concatenate(wb),
    )


@dataclass
class CandidateFeatures:
    """Shared candidate-side inputs for the ranking head."""

    bags: sp.csr_matrix                 # (|C|, |V|) word counts
    match_slots: np.ndarray             # vocab index of each match-feature token
    # kb word -> [(candidate index, feature index)] for words that are KB values
    match_index: dict[str, list[tuple[int, int]]] = field(default_factory=dict)

    @property
    def size(self) -> int:
        return self.bags.shape[0]

    @property
    def n_features(self) -> int:
        return len(self.match_slots)


def candidate_features(
    candidates: CandidateSet, vocab: Vocabulary, kb: KnowledgeBaseIndex | None, match: bool = True
) -> CandidateFeatures:
    rows, cols = [], []
    for i, toks in enumerate(candidates.tokens):
        for idx in vocab.lookup(toks):
            rows.append(i)
            cols.append(idx)
    bags = sp.csr_matrix(
        (np.ones(len(rows)), (np.asarray(rows, dtype=np.int64), np.asarray(cols, dtype=np.int64))),
        shape=(len(candidates), vocab.size),
    )
    index: dict[str, list[tuple[int, int]]] = {}
    slots = np.zeros(0, dtype=np.int64)
    if match and kb:
        slots = np.array([vocab.index(match_token(p)) for p in kb.property_names], dtype=np.int64)
        for i, toks in enumerate(candidates.tokens):
            for p, values in enumerate(kb.properties.values()):
                for w in set(toks):
                    if w in values:
                        index.setdefault(w, []).append((i, p))
    return CandidateFeatures(bags, slots, index)


@dataclass
class EncodedExample:
    memory: _Bags
    n_memory: int          # memory slots, >= 1 (an empty memory gets one nil slot)
    offset: int            # index of the first kept sentence in the untruncated list
    question: _Bags
    target: int
    context: frozenset = frozenset()
    # (candidate, feature) pairs set in the match tensor; filled on first use
    match_pairs: np.ndarray | None = field(default=None, repr=False, compare=False)


@dataclass
class EncodedDataset:
    examples: list[EncodedExample]
    vocab_size: int
    cfg: EncodingConfig
    candidates: CandidateFeatures | None = None

    def __len__(self) -> int:
        return len(self.examples)

    @property
    def targets(self) -> np.ndarray:
        return np.array([e.target for e in self.examples], dtype=np.int64)


def encode_qa_dataset(examples: Sequence[QaExample], vocab: Vocabulary, cfg: EncodingConfig) -> EncodedDataset:
    out = []
    for ex in examples:
        kept = truncate_memory(ex.sentences, cfg.max_memory)
        target = vocab.word_to_index.get(ex.answer, 0)
        out.append(
            EncodedExample(
                memory=_bag_entries(kept, vocab, cfg.scheme),
                n_memory=max(1, len(kept)),
                offset=len(ex.sentences) - len(kept),
                question=_bag_entries([ex.question], vocab, cfg.scheme),
                target=target,
            )
        )
    return EncodedDataset(out, vocab.size, cfg)


def encode_dialog_dataset(
    examples: Sequence[DialogExample],
    vocab: Vocabulary,
    cfg: EncodingConfig,
    candidates: CandidateFeatures,
) -> EncodedDataset:
    out = []
    for ex in examples:
        mem = dialog_memory(ex, cfg.speaker_features)
        kept = truncate_memory(mem, cfg.max_memory)
        kept_raw = truncate_memory([u for _, u in ex.history], cfg.max_memory)
        context = frozenset(ex.query).union(*[frozenset(u) for u in kept_raw]) if kept_raw else frozenset(ex.query)
        out.append(
            EncodedExample(
                memory=_bag_entries(kept, vocab, cfg.scheme),
                n_memory=max(1, len(kept)),
                offset=len(mem) - len(kept),
                question=_bag_entries([ex.query], vocab, cfg.scheme),
                target=ex.gold_index,
                context=context,
            )
        )
    return EncodedDataset(out, vocab.size, cfg, candidates)


@dataclass
class Batch:
    mem_a: sp.csr_matrix      # (B*n, |V|)
    mem_b: sp.csr_matrix      # (B*n, |V|)
    mask: np.ndarray          # (B, n) bool, real memory slots
    slots: np.ndarray         # (B, n) temporal index, 0 where masked
    q_a: sp.csr_matrix        # (B, |V|)
    q_b: sp.csr_matrix
    targets: np.ndarray       # (B,)
    temporal: bool
    candidates: CandidateFeatures | None = None
    match: np.ndarray | None = None  # (B, |C|, F)

    @property
    def size(self) -> int:
        return self.mask.shape[0]

    @property
    def n_memory(self) -> int:
        return self.mask.shape[1]


def _stack(bags: Sequence[_Bags], row_offsets: Sequence[int], n_rows: int, n_cols: int) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    rows = np.concatenate([b.rows + off for b, off in zip(bags, row_offsets)])
    cols = np.concatenate([b.cols for b in bags])
    wa = np.concatenate([b.wa for b in bags])
    wb = np.concatenate([b.wb for b in bags])
    shape = (n_rows, n_cols)
    return (
        sp.csr_matrix((wa, (rows, cols)), shape=shape),
        sp.csr_matrix((wb, (rows, cols)), shape=shape),
    )


def match_tensor(encoded: Sequence[EncodedExample], cands: CandidateFeatures) -> np.ndarray:
    out = np.zeros((len(encoded), cands.size, cands.n_features))
    if not cands.n_features:
        return out
    for b, ex in enumerate(encoded):
        if ex.match_pairs is None:
            pairs = {cp for w in ex.context for cp in cands.match_index.get(w, ())}
            ex.match_pairs = np.array(sorted(pairs), dtype=np.int64).reshape(-1, 2)
        out[b, ex.match_pairs[:, 0], ex.match_pairs[:, 1]] = 1.0
    return out


def make_batch(data: EncodedDataset, indices: Sequence[int], mode: str = "eval", rng=None) -> Batch:
    """Pad the selected examples to a common memory size and stack them."""
    exs = [data.examples[i] for i in indices]
    B = len(exs)
    n = max(e.n_memory for e in exs)
    V = data.vocab_size
    mask = np.zeros((B, n), dtype=bool)
    slots = np.zeros((B, n), dtype=np.int64)
    cfg = data.cfg
    for b, e in enumerate(exs):
        mask[b, : e.n_memory] = True
        if cfg.temporal:
            slots[b, : e.n_memory] = temporal_indices(e.n_memory, cfg.noise_fraction, mode, rng)
    mem_a, mem_b = _stack([e.memory for e in exs], [b * n for b in range(B)], B * n, V)
    q_a, q_b = _stack([e.question for e in exs], list(range(B)), B, V)
    match = None
    if data.candidates is not None:
        match = match_tensor(exs, data.candidates)
    return Batch(
        mem_a, mem_b, mask, slots, q_a, q_b,
        np.array([e.target for e in exs], dtype=np.int64),
        cfg.temporal, data.candidates, match,
    )
