"""Input checks shared by the estimators."""
from __future__ import annotations

import dataclasses
from typing import Sequence

from .corpus import CandidateSet, DialogExample, QaExample, Vocabulary


def _as_list(X, kind: type, name: str) -> list:
    if isinstance(X, (str, bytes)) or not hasattr(X, "__len__"):
        raise TypeError(f"{name} must be a sequence of {kind.__name__}, got {type(X).__name__}")
    X = list(X)
    if not X:
        raise ValueError(f"{name} is empty")
    for i, x in enumerate(X):
        if not isinstance(x, kind):
            raise TypeError(f"{name}[{i}] is {type(x).__name__}, expected {kind.__name__}")
    return X


def check_qa_examples(X, name: str = "X") -> list[QaExample]:
    X = _as_list(X, QaExample, name)
    for i, ex in enumerate(X):
        if not ex.question:
            raise ValueError(f"{name}[{i}] has an empty question")
    return X


def check_dialog_examples(X, name: str = "X") -> list[DialogExample]:
    return _as_list(X, DialogExample, name)


def check_labels(y, n: int, name: str = "y") -> list[str] | None:
    """``None`` or a sequence of ``n`` string labels."""
    if y is None:
        return None
    if isinstance(y, str) or not hasattr(y, "__len__"):
        raise TypeError(f"{name} must be a sequence of strings")
    y = [str(v) for v in y]
    if len(y) != n:
        raise ValueError(f"{name} has {len(y)} labels for {n} examples")
    return y


def with_answers(X: Sequence[QaExample], y: Sequence[str] | None) -> list[QaExample]:
    if y is None:
        return list(X)
    return [dataclasses.replace(ex, answers=label.split(",")) for ex, label in zip(X, y)]


def with_responses(X: Sequence[DialogExample], y: Sequence[str] | None, candidates: CandidateSet) -> list[DialogExample]:
    if y is None:
        return list(X)
    out = []
    for ex, text in zip(X, y):
        cid = candidates.index_of(text)
        if cid is None:
            raise ValueError(f"response {text!r} is not in the candidate set")
        out.append(dataclasses.replace(ex, gold_response=candidates.texts[cid], candidate_ids=[cid]))
    return out


def check_candidates(candidates) -> CandidateSet:
    if candidates is None:
        raise ValueError("a candidate set is required")
    if isinstance(candidates, CandidateSet):
        return candidates
    if isinstance(candidates, str):
        raise TypeError("candidates must be a CandidateSet or a sequence of response strings")
    cands = CandidateSet.from_texts(candidates)
    if not len(cands):
        raise ValueError("candidate set is empty")
    return cands


def check_vocabulary(vocab) -> Vocabulary | None:
    if vocab is None or isinstance(vocab, Vocabulary):
        return vocab
    if isinstance(vocab, str):
        raise TypeError("vocabulary must be a Vocabulary or a sequence of words")
    words = list(vocab)
    return Vocabulary(words[1:] if words and words[0] == Vocabulary().index_to_word[0] else words)


def check_answers_in_vocab(X: Sequence[QaExample], vocab: Vocabulary) -> None:
    missing = sorted({ex.answer for ex in X} - set(vocab.word_to_index))
    if missing:
        raise ValueError(f"answers missing from the vocabulary: {missing[:5]}")
