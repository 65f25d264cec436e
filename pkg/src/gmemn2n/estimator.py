"""scikit-learn style estimators for question answering and response ranking.

Both estimators take lists of parsed examples as ``X``:

>>> clf = MemN2NClassifier(kind="gmemn2n", gate_tying="hop", restarts=5)
>>> clf.fit(train_examples).score(test_examples)   # doctest: +SKIP

Labels default to the answers (or gold responses) stored on the examples; an
explicit ``y`` overrides them.
"""
from __future__ import annotations

import logging
from dataclasses import fields

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .checkpoint import Checkpoint
from .corpus import build_vocab, split_validation
from .encoder import (
    BAG_OF_WORDS,
    POSITION_ENCODING,
    EncodingConfig,
    candidate_features,
    dialog_extra_tokens,
    dialog_memory,
    encode_dialog_dataset,
    encode_qa_dataset,
    make_batch,
    truncate_memory,
)
from .evaluator import AttentionTable, attention_table, dialog_accuracy, run_model
from .model import CANDIDATE_HEAD, FINAL_HOP, QA_HEAD, ModelVariant, forward_batch
from .tensor_core import softmax
from .trainer import RestartReport, TrainConfig, train_with_restarts
from .validation import (
    check_answers_in_vocab,
    check_candidates,
    check_dialog_examples,
    check_labels,
    check_qa_examples,
    check_vocabulary,
    with_answers,
    with_responses,
)

logger = logging.getLogger(__name__)

_TRAIN_FIELDS = [f.name for f in fields(TrainConfig)]


class _MemN2NBase(ClassifierMixin, BaseEstimator):
    _head = QA_HEAD

    def _train_config(self) -> TrainConfig:
        params = self.get_params()
        return TrainConfig(**{k: params[k] for k in _TRAIN_FIELDS if k in params})

    def _variant(self) -> ModelVariant:
        return ModelVariant(self.kind, self.gate_tying, self.embedding_tying, self._head, self.final_combine)

    def _encoding(self) -> EncodingConfig:
        return EncodingConfig(self.encoding, self.temporal, self.noise, self.max_memory, self._speaker_features())

    def _speaker_features(self) -> bool:
        return False

    def _fit_encoded(self, train, valid) -> "_MemN2NBase":
        self.variant_ = self._variant()
        self.train_config_ = self._train_config()
        report = train_with_restarts(train, valid, self.variant_, self.train_config_, self.n_jobs, self.verbose)
        self.report_: RestartReport = report
        self.params_ = report.best.params
        self.best_seed_ = report.best.seed
        self.valid_accuracy_ = report.best.valid_accuracy
        return self

    def _logits(self, data) -> np.ndarray:
        out = []
        for start in range(0, len(data), 256):
            idx = range(start, min(start + 256, len(data)))
            out.append(forward_batch(self.params_, make_batch(data, idx, "eval"), self.variant_, True).logits)
        return np.concatenate(out)

    def to_checkpoint(self, metadata: dict | None = None) -> Checkpoint:
        check_is_fitted(self, "params_")
        return Checkpoint(
            self.variant_, self.train_config_, self.encoding_, self.params_,
            self.vocabulary_, self.best_seed_, dict(metadata or {}),
        )


class MemN2NClassifier(_MemN2NBase):
    """Answer bAbI-style questions with a (gated) end-to-end memory network.

    Parameters
    ----------
    kind : {"gmemn2n", "memn2n"}
        Gated hop updates or plain residual ones.
    gate_tying : {"hop", "global"}
        Per-hop gate parameters or one set shared by all hops.
    embedding_tying : {"adjacent", "none"}
        Adjacent weight sharing between hops, or independent embeddings.
    final_combine : {"hop", "sum"}
        Answer from the last hop's output state, or from ``o^K + u^K``.
    encoding : {"position_encoding", "bag_of_words"}
    temporal : bool
        Add learned recency vectors to memories.
    vocabulary : Vocabulary or list of str, optional
        Closed-world vocabulary. Built from the training examples when omitted;
        pass one covering the test data so unseen words are not mapped to nil.
    restarts : int
        Independent trainings; the one with the best validation accuracy is kept.
    n_jobs : int, optional
        Parallel restarts (joblib semantics).

    The remaining parameters mirror :class:`~gmemn2n.trainer.TrainConfig`.

    Attributes
    ----------
    params_ : ModelParams
    vocabulary_ : Vocabulary
    classes_ : ndarray of str
        Vocabulary words; columns of :meth:`predict_proba`.
    report_ : RestartReport
    """

    _head = QA_HEAD

    def __init__(
        self,
        kind="gmemn2n",
        gate_tying="hop",
        embedding_tying="adjacent",
        final_combine=FINAL_HOP,
        encoding=POSITION_ENCODING,
        temporal=True,
        noise=0.1,
        max_memory=50,
        hops=3,
        dim=20,
        lr0=0.005,
        decay_every=25,
        decay_factor=0.5,
        decay_until=100,
        total_epochs=100,
        linear_start_epochs=20,
        batch_size=32,
        clip_norm=40.0,
        init_std=0.1,
        gate_bias_mean=0.5,
        loss_reduction="sum",
        restarts=1,
        valid_fraction=0.1,
        seed=0,
        vocabulary=None,
        n_jobs=None,
        verbose=False,
    ):
        self.kind = kind
        self.gate_tying = gate_tying
        self.embedding_tying = embedding_tying
        self.final_combine = final_combine
        self.encoding = encoding
        self.temporal = temporal
        self.noise = noise
        self.max_memory = max_memory
        self.hops = hops
        self.dim = dim
        self.lr0 = lr0
        self.decay_every = decay_every
        self.decay_factor = decay_factor
        self.decay_until = decay_until
        self.total_epochs = total_epochs
        self.linear_start_epochs = linear_start_epochs
        self.batch_size = batch_size
        self.clip_norm = clip_norm
        self.init_std = init_std
        self.gate_bias_mean = gate_bias_mean
        self.loss_reduction = loss_reduction
        self.restarts = restarts
        self.valid_fraction = valid_fraction
        self.seed = seed
        self.vocabulary = vocabulary
        self.n_jobs = n_jobs
        self.verbose = verbose

    def fit(self, X, y=None, X_valid=None, y_valid=None):
        """Train on ``X``; hold out ``valid_fraction`` of it unless ``X_valid`` is given."""
        X = with_answers(check_qa_examples(X), check_labels(y, len(X)))
        if X_valid is None:
            X, X_valid = split_validation(X, self.valid_fraction, self.seed)
        else:
            X_valid = with_answers(check_qa_examples(X_valid, "X_valid"), check_labels(y_valid, len(X_valid), "y_valid"))
        vocab = check_vocabulary(self.vocabulary) or build_vocab(list(X) + list(X_valid))
        check_answers_in_vocab(list(X) + list(X_valid), vocab)
        self.vocabulary_ = vocab
        self.encoding_ = self._encoding()
        self.classes_ = np.array(vocab.index_to_word, dtype=object)
        train = encode_qa_dataset(X, vocab, self.encoding_)
        valid = encode_qa_dataset(X_valid, vocab, self.encoding_)
        return self._fit_encoded(train, valid)

    def _encode(self, X):
        check_is_fitted(self, "params_")
        return encode_qa_dataset(check_qa_examples(X), self.vocabulary_, self.encoding_)

    def predict_proba(self, X) -> np.ndarray:
        """Answer distribution over the vocabulary, one row per example."""
        return softmax(self._logits(self._encode(X)))

    def predict(self, X) -> np.ndarray:
        logits = self._logits(self._encode(X))
        return self.classes_[logits.argmax(axis=1)]

    def score(self, X, y=None, sample_weight=None) -> float:
        """Mean exact-match accuracy in [0, 1]; ``y`` defaults to the stored answers."""
        X = check_qa_examples(X)
        y = check_labels(y, len(X)) or [ex.answer for ex in X]
        return super().score(X, np.array(y, dtype=object), sample_weight)

    def trace(self, X) -> list:
        """Per-example :class:`~gmemn2n.model.HopTrace` (attention, gates, states)."""
        data = self._encode(X)
        _, traces = run_model(self.params_, data, self.variant_)
        return traces

    def attention_tables(self, X) -> list[AttentionTable]:
        X = check_qa_examples(X)
        tables = []
        for ex, tr in zip(X, self.trace(X)):
            kept = truncate_memory(ex.sentences, self.encoding_.max_memory)
            tables.append(attention_table(tr, kept, {"question": " ".join(ex.question), "answer": ex.answer}))
        return tables

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "MemN2NClassifier":
        if ckpt.variant.head != QA_HEAD:
            raise ValueError("checkpoint holds a candidate-ranking model")
        return _restore(cls, ckpt)


class MemN2NResponseRanker(_MemN2NBase):
    """Rank candidate responses for goal-oriented dialog turns.

    Parameters
    ----------
    candidates : CandidateSet or list of str
        The fixed response set; :meth:`predict` returns members of it.
    kb : KnowledgeBaseIndex, optional
        Enables match features when ``match_features`` is true.
    speaker_features : bool
        Append speaker and turn tokens to every memory utterance.

    Other parameters are as for :class:`MemN2NClassifier`. The default
    encoding is bag of words without temporal matrices.
    """

    _head = CANDIDATE_HEAD

    def __init__(
        self,
        candidates=None,
        kb=None,
        match_features=True,
        speaker_features=True,
        kind="gmemn2n",
        gate_tying="hop",
        embedding_tying="adjacent",
        final_combine=FINAL_HOP,
        encoding=BAG_OF_WORDS,
        temporal=False,
        noise=0.0,
        max_memory=50,
        hops=3,
        dim=20,
        lr0=0.005,
        decay_every=25,
        decay_factor=0.5,
        decay_until=100,
        total_epochs=100,
        linear_start_epochs=20,
        batch_size=32,
        clip_norm=40.0,
        init_std=0.1,
        gate_bias_mean=0.5,
        loss_reduction="sum",
        restarts=1,
        valid_fraction=0.1,
        seed=0,
        vocabulary=None,
        n_jobs=None,
        verbose=False,
    ):
        self.candidates = candidates
        self.kb = kb
        self.match_features = match_features
        self.speaker_features = speaker_features
        self.kind = kind
        self.gate_tying = gate_tying
        self.embedding_tying = embedding_tying
        self.final_combine = final_combine
        self.encoding = encoding
        self.temporal = temporal
        self.noise = noise
        self.max_memory = max_memory
        self.hops = hops
        self.dim = dim
        self.lr0 = lr0
        self.decay_every = decay_every
        self.decay_factor = decay_factor
        self.decay_until = decay_until
        self.total_epochs = total_epochs
        self.linear_start_epochs = linear_start_epochs
        self.batch_size = batch_size
        self.clip_norm = clip_norm
        self.init_std = init_std
        self.gate_bias_mean = gate_bias_mean
        self.loss_reduction = loss_reduction
        self.restarts = restarts
        self.valid_fraction = valid_fraction
        self.seed = seed
        self.vocabulary = vocabulary
        self.n_jobs = n_jobs
        self.verbose = verbose

    def _speaker_features(self) -> bool:
        return self.speaker_features

    def fit(self, X, y=None, X_valid=None, y_valid=None):
        cands = check_candidates(self.candidates)
        X = with_responses(check_dialog_examples(X), check_labels(y, len(X)), cands)
        if X_valid is None:
            X, X_valid = split_validation(X, self.valid_fraction, self.seed)
        else:
            X_valid = with_responses(
                check_dialog_examples(X_valid, "X_valid"), check_labels(y_valid, len(X_valid), "y_valid"), cands
            )
        kb = self.kb if self.match_features else None
        everything = list(X) + list(X_valid)
        vocab = check_vocabulary(self.vocabulary) or build_vocab(everything, dialog_extra_tokens(everything, kb), cands)
        self.vocabulary_ = vocab
        self.candidates_ = cands
        self.encoding_ = self._encoding()
        self.features_ = candidate_features(cands, vocab, kb, self.match_features)
        self.classes_ = np.array(cands.texts, dtype=object)
        train = encode_dialog_dataset(X, vocab, self.encoding_, self.features_)
        valid = encode_dialog_dataset(X_valid, vocab, self.encoding_, self.features_)
        return self._fit_encoded(train, valid)

    def _encode(self, X):
        check_is_fitted(self, "params_")
        return encode_dialog_dataset(check_dialog_examples(X), self.vocabulary_, self.encoding_, self.features_)

    def predict_proba(self, X) -> np.ndarray:
        """Distribution over the candidate set, one row per example."""
        return softmax(self._logits(self._encode(X)))

    def predict(self, X) -> np.ndarray:
        logits = self._logits(self._encode(X))
        return self.classes_[logits.argmax(axis=1)]

    def score(self, X, y=None, sample_weight=None) -> float:
        """Per-response accuracy in [0, 1]."""
        X = check_dialog_examples(X)
        y = check_labels(y, len(X)) or [ex.gold_response for ex in X]
        return super().score(X, np.array(y, dtype=object), sample_weight)

    def dialog_scores(self, X) -> tuple[float, float]:
        """``(per_response, per_dialog)`` accuracy in percent."""
        X = check_dialog_examples(X)
        return dialog_accuracy(list(self.predict(X)), [ex.gold_response for ex in X], [ex.dialog_id for ex in X])

    def trace(self, X) -> list:
        data = self._encode(X)
        _, traces = run_model(self.params_, data, self.variant_)
        return traces

    def attention_tables(self, X) -> list[AttentionTable]:
        X = check_dialog_examples(X)
        tables = []
        for ex, tr in zip(X, self.trace(X)):
            kept = truncate_memory(dialog_memory(ex, self.encoding_.speaker_features), self.encoding_.max_memory)
            tables.append(attention_table(tr, kept, {"query": " ".join(ex.query), "gold": ex.gold_response}))
        return tables

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, candidates, kb=None) -> "MemN2NResponseRanker":
        if ckpt.variant.head != CANDIDATE_HEAD:
            raise ValueError("checkpoint holds a question-answering model")
        est = _restore(cls, ckpt, candidates=candidates, kb=kb)
        est.candidates_ = check_candidates(candidates)
        est.features_ = candidate_features(est.candidates_, est.vocabulary_, kb, est.match_features)
        est.classes_ = np.array(est.candidates_.texts, dtype=object)
        return est


def _restore(cls, ckpt: Checkpoint, **extra):
    v, cfg, enc = ckpt.variant, ckpt.train_config, ckpt.encoding
    kw = {k: getattr(cfg, k) for k in _TRAIN_FIELDS if k != "noise"}
    est = cls(
        kind=v.kind, gate_tying=v.gate_tying, embedding_tying=v.embedding_tying, final_combine=v.final_combine,
        encoding=enc.scheme, temporal=enc.temporal, noise=enc.noise_fraction,
        vocabulary=ckpt.vocabulary, **{k: x for k, x in kw.items() if k != "max_memory"},
        max_memory=enc.max_memory, **extra,
    )
    if "match_features" in ckpt.metadata and hasattr(est, "match_features"):
        est.match_features = bool(ckpt.metadata["match_features"])
    est.variant_, est.train_config_, est.encoding_ = v, cfg, enc
    est.params_, est.vocabulary_, est.best_seed_ = ckpt.params, ckpt.vocabulary, ckpt.rng_seed
    est.valid_accuracy_ = ckpt.metadata.get("valid_accuracy", float("nan"))
    if cls._head == QA_HEAD:
        est.classes_ = np.array(ckpt.vocabulary.index_to_word, dtype=object)
    return est
