"""Shared builders for tiny random instances and the acceptance line log."""
import numpy as np

from gmemn2n.corpus import CandidateSet, KnowledgeBaseIndex, Vocabulary
from gmemn2n.encoder import (
    POSITION_ENCODING,
    EncodedDataset,
    EncodedExample,
    EncodingConfig,
    _bag_entries,
    candidate_features,
)

ACCEPTANCE_LINES: list[str] = []


def tiny_dataset(
    rng: np.random.Generator,
    vocab_size: int = 8,
    n_examples: int = 3,
    max_sentences: int = 3,
    head: str = "qa",
    scheme: str = POSITION_ENCODING,
    temporal: bool = True,
    n_candidates: int = 4,
):
    """Random tiny encoded dataset over a synthetic vocabulary ``w1..w{V-1}``."""
    words = [f"w{i}" for i in range(1, vocab_size)]
    vocab = Vocabulary(words)
    cfg = EncodingConfig(scheme, temporal, 0.0, max_sentences)
    sentences_all, questions = [], []
    exs = []
    cands = None
    if head != "qa":
        kb_words = words[:2]
        # candidates reuse story words so |V| stays at vocab_size + match slots
        texts = []
        while len(texts) < n_candidates:
            t = " ".join(rng.choice(words, size=rng.integers(1, 4)))
            if t not in texts:
                texts.append(t)
        cands = CandidateSet.from_texts(texts)
        for t in cands.tokens:
            for w in t:
                vocab.add(w)
        kb = KnowledgeBaseIndex({"location": {kb_words[0]}, "cuisine": {kb_words[1]}})
        for p in kb.properties:
            vocab.add(f"$match_{p}")
        feats = candidate_features(cands, vocab, kb)
    for _ in range(n_examples):
        n = int(rng.integers(1, max_sentences + 1))
        sents = [list(rng.choice(words, size=rng.integers(1, 5))) for _ in range(n)]
        q = list(rng.choice(words, size=rng.integers(1, 4)))
        sentences_all.append(sents)
        questions.append(q)
        target = int(rng.integers(0, vocab.size if head == "qa" else len(cands)))
        ctx = frozenset(q).union(*[frozenset(s) for s in sents])
        exs.append(EncodedExample(_bag_entries(sents, vocab, scheme), n, 0, _bag_entries([q], vocab, scheme), target, ctx))
    data = EncodedDataset(exs, vocab.size, cfg, feats if head != "qa" else None)
    return data, vocab, sentences_all, questions, cands
