"""MemN2N / GMemN2N forward and backward passes.

Parameters are addressed by *role* (``B``, ``A1``, ``C1``, ``TA1``, ``W``,
``WT1``, ``bT1`` ...). Each role resolves to a storage array; tying makes
several roles share one storage (``W`` may read ``C<K>`` transposed). Gradients
are computed per role and summed into storage, so an aliased array receives
the total gradient of all its uses.

Shapes: embeddings ``(d, |V|)``, answer matrix ``W`` ``(|V|, d)``, candidate
matrix ``Wc`` ``(d, |V|)``, temporal matrices ``(d, slots)``, gate weights
``(d, d)`` and gate biases ``(d,)``.

By default the answer head reads the controller state produced by the last
hop update, ``u^{K+1}``. For plain hops this is ``o^K + u^K``; for gated hops it
is the gated combination of the last hop. ``final_combine="sum"`` makes gated
models read ``o^K + u^K`` instead, leaving the last hop's gate unused.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .encoder import Batch
from .tensor_core import (
    ContractError,
    gaussian_init,
    hadamard,
    hadamard_backward,
    make_rng,
    matvec,
    matvec_backward,
    sigmoid,
    sigmoid_backward,
    softmax,
    softmax_backward,
)

MEMN2N = "memn2n"
GMEMN2N = "gmemn2n"
GLOBAL = "global"
HOP = "hop"
ADJACENT = "adjacent"
UNTIED = "none"
QA_HEAD = "qa"
CANDIDATE_HEAD = "candidates"
FINAL_HOP = "hop"
FINAL_SUM = "sum"


@dataclass(frozen=True)
class ModelVariant:
    kind: str = GMEMN2N
    gate_tying: str = HOP
    embedding_tying: str = ADJACENT
    head: str = QA_HEAD
    final_combine: str = FINAL_HOP

    def __post_init__(self):
        if self.kind not in (MEMN2N, GMEMN2N):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.gate_tying not in (GLOBAL, HOP):
            raise ValueError(f"unknown gate tying {self.gate_tying!r}")
        if self.embedding_tying not in (ADJACENT, UNTIED):
            raise ValueError(f"unknown embedding tying {self.embedding_tying!r}")
        if self.head not in (QA_HEAD, CANDIDATE_HEAD):
            raise ValueError(f"unknown head {self.head!r}")
        if self.final_combine not in (FINAL_HOP, FINAL_SUM):
            raise ValueError(f"unknown final combine {self.final_combine!r}")

    @property
    def gated(self) -> bool:
        return self.kind == GMEMN2N

    def gated_hop_at(self, k: int, hops: int) -> bool:
        """Whether hop ``k`` (1-based) of ``hops`` feeds forward through its gate."""
        return self.gated and not (k == hops and self.final_combine == FINAL_SUM)


class ModelParams:
    """Named parameter storage plus a role -> (storage key, transposed) map."""

    def __init__(self, store: dict[str, np.ndarray], tying: dict[str, tuple[str, bool]], hops: int):
        self.store = store
        self.tying = tying
        self.hops = hops

    def __getitem__(self, role: str) -> np.ndarray:
        key, transposed = self.tying[role]
        arr = self.store[key]
        return arr.T if transposed else arr

    def __contains__(self, role: str) -> bool:
        return role in self.tying

    def roles(self) -> Iterator[str]:
        return iter(self.tying)

    @property
    def dim(self) -> int:
        return self["B"].shape[0]

    @property
    def vocab_size(self) -> int:
        return self["B"].shape[1]

    @property
    def temporal(self) -> bool:
        return "TA1" in self.tying

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.store.items()}, dict(self.tying), self.hops)

    def with_store(self, store: dict[str, np.ndarray]) -> "ModelParams":
        return ModelParams(store, self.tying, self.hops)

    def reduce_grads(self, role_grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        """Sum per-role gradients into per-storage gradients."""
        out = {k: np.zeros_like(v) for k, v in self.store.items()}
        for role, g in role_grads.items():
            key, transposed = self.tying[role]
            out[key] += g.T if transposed else g
        return out


def role_shapes(variant: ModelVariant, vocab_size: int, dim: int, hops: int, temporal_slots: int = 0) -> dict[str, tuple]:
    shapes: dict[str, tuple] = {"B": (dim, vocab_size)}
    for k in range(1, hops + 1):
        shapes[f"A{k}"] = (dim, vocab_size)
        shapes[f"C{k}"] = (dim, vocab_size)
        if temporal_slots:
            shapes[f"TA{k}"] = (dim, temporal_slots)
            shapes[f"TC{k}"] = (dim, temporal_slots)
    if variant.gated:
        for k in range(1, hops + 1):
            shapes[f"WT{k}"] = (dim, dim)
            shapes[f"bT{k}"] = (dim,)
    if variant.head == QA_HEAD:
        shapes["W"] = (vocab_size, dim)
    else:
        shapes["Wc"] = (dim, vocab_size)
    return shapes


def init_params(
    variant: ModelVariant,
    vocab_size: int,
    dim: int,
    hops: int,
    temporal_slots: int = 0,
    rng=None,
    init_std: float = 0.1,
    gate_bias_mean: float = 0.5,
) -> ModelParams:
    """Gaussian initialisation followed by :func:`tie_parameters`."""
    if hops < 1:
        raise ContractError("hops must be >= 1")
    rng = make_rng(rng)
    store = {}
    for role, shape in role_shapes(variant, vocab_size, dim, hops, temporal_slots).items():
        mean = gate_bias_mean if role.startswith("bT") else 0.0
        store[role] = gaussian_init(shape, mean, init_std, rng)
    untied = ModelParams(store, {r: (r, False) for r in store}, hops)
    return tie_parameters(untied, variant)


def tie_parameters(params: ModelParams, variant: ModelVariant) -> ModelParams:
    """Install aliasing for adjacent embedding tying and global gate tying.

    Adjacent: ``A1 = B``, ``A(k+1) = C(k)``, ``TA(k+1) = TC(k)`` and, for the
    QA head, ``W = C(K)ᵀ``. Global: every ``WTk``/``bTk`` shares hop 1's storage.
    """
    K = params.hops
    tying = dict(params.tying)

    def alias(role: str, target: str, transposed: bool = False):
        if role not in tying:
            return
        src_key, src_t = tying[target]
        want = params[role].shape
        have = params.store[src_key].T.shape if (src_t ^ transposed) else params.store[src_key].shape
        if want != have:
            raise ContractError(f"cannot tie {role}{want} to {target}{have}")
        tying[role] = (src_key, src_t ^ transposed)

    if variant.embedding_tying == ADJACENT:
        alias("A1", "B")
        for k in range(1, K):
            alias(f"A{k + 1}", f"C{k}")
            alias(f"TA{k + 1}", f"TC{k}")
        if variant.head == QA_HEAD:
            alias("W", f"C{K}", transposed=True)
    if variant.gated and variant.gate_tying == GLOBAL:
        for k in range(2, K + 1):
            alias(f"WT{k}", "WT1")
            alias(f"bT{k}", "bT1")
    used = {key for key, _ in tying.values()}
    store = {k: v for k, v in params.store.items() if k in used}
    return ModelParams(store, tying, K)


# ---------------------------------------------------------------------------
# single operations


def attention(u: np.ndarray, m: np.ndarray, softmax_active: bool = True, mask: np.ndarray | None = None) -> np.ndarray:
    """Scores ``a_i = uᵀ m_i``; softmax over them unless in the linear-start phase."""
    a = matvec(m, u)
    if softmax_active:
        return softmax(a, mask)
    return a if mask is None else a * mask


def memory_response(p: np.ndarray, c: np.ndarray) -> np.ndarray:
    """``o = Σ_i p_i c_i``."""
    return matvec(np.swapaxes(c, -1, -2), p)


def plain_hop(u: np.ndarray, o: np.ndarray) -> np.ndarray:
    return o + u


def gated_hop(u: np.ndarray, o: np.ndarray, W_T: np.ndarray, b_T: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Highway-style update ``o ⊙ T + u ⊙ (1 - T)`` with ``T = σ(W_T u + b_T)``."""
    gate = sigmoid(matvec(W_T, u) + b_T)
    return hadamard(o, gate) + hadamard(u, 1.0 - gate), gate


def answer_logits(z: np.ndarray, W: np.ndarray) -> np.ndarray:
    return matvec(W, z)


def predict_word(z: np.ndarray, W: np.ndarray) -> np.ndarray:
    """Answer distribution ``softmax(W z)`` over the vocabulary."""
    return softmax(answer_logits(z, W))


def candidate_logits(z: np.ndarray, Wc: np.ndarray, bags, match=None, match_slots=None) -> np.ndarray:
    """``s_i = zᵀ Wc Φ(y_i)``; ``match`` adds per-example feature slots to Φ(y_i).

    ``bags`` is a (possibly sparse) ``(|C|, |V|)`` matrix; ``match`` has shape
    ``(B, |C|, F)`` and ``match_slots`` lists the vocabulary column of each feature.
    """
    if bags.shape[0] == 0:
        raise ContractError("rank_candidates: empty candidate set")
    r = z @ Wc  # (B, |V|)
    s = np.asarray((bags @ r.T).T)
    if match is not None and len(match_slots):
        s = s + np.einsum("bcf,bf->bc", match, r[:, match_slots])
    return s


def rank_candidates(z, Wc, bags, match=None, match_slots=None) -> np.ndarray:
    z2 = np.atleast_2d(z)
    out = softmax(candidate_logits(z2, Wc, bags, match, match_slots))
    return out[0] if np.ndim(z) == 1 else out


# ---------------------------------------------------------------------------
# batched forward / backward


@dataclass
class HopCache:
    u: np.ndarray
    m: np.ndarray
    c: np.ndarray
    p: np.ndarray
    o: np.ndarray
    gate: np.ndarray | None = None


@dataclass
class ForwardCache:
    hops: list[HopCache]
    final: np.ndarray
    logits: np.ndarray
    softmax_active: bool
    batch: Batch = field(repr=False, default=None)


@dataclass
class HopTrace:
    """Per-hop introspection for one example; lists are indexed by hop."""

    attention: list[np.ndarray]
    gates: list[np.ndarray | None]
    controllers: list[np.ndarray]
    responses: list[np.ndarray]
    final_state: np.ndarray
    logits: np.ndarray


def _pe_scale(d: int) -> np.ndarray:
    return np.arange(1, d + 1) / d


def _embed(bag_a, bag_b, E: np.ndarray, kd: np.ndarray) -> np.ndarray:
    return np.asarray(bag_a @ E.T) + np.asarray(bag_b @ E.T) * kd


def _embed_backward(bag_a, bag_b, g: np.ndarray, kd: np.ndarray) -> np.ndarray:
    return (np.asarray(bag_a.T @ g) + np.asarray(bag_b.T @ (g * kd))).T


def forward_batch(params: ModelParams, batch: Batch, variant: ModelVariant, softmax_active: bool = True) -> ForwardCache:
    d = params.dim
    kd = _pe_scale(d)
    B, n = batch.size, batch.n_memory
    mask3 = batch.mask[..., None]
    u = _embed(batch.q_a, batch.q_b, params["B"], kd)
    hops = []
    for k in range(1, params.hops + 1):
        m = _embed(batch.mem_a, batch.mem_b, params[f"A{k}"], kd).reshape(B, n, d)
        c = _embed(batch.mem_a, batch.mem_b, params[f"C{k}"], kd).reshape(B, n, d)
        if batch.temporal and params.temporal:
            m = m + params[f"TA{k}"].T[batch.slots] * mask3
            c = c + params[f"TC{k}"].T[batch.slots] * mask3
        # divergence surfaces here first; report it as such, not as a contract error
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(m))):
            raise FloatingPointError(f"non-finite activations at hop {k}")
        p = attention(u, m, softmax_active, batch.mask)
        o = memory_response(p, c)
        if variant.gated_hop_at(k, params.hops):
            u_next, gate = gated_hop(u, o, params[f"WT{k}"], params[f"bT{k}"])
        else:
            u_next, gate = plain_hop(u, o), None
        hops.append(HopCache(u, m, c, p, o, gate))
        u = u_next
    if variant.head == QA_HEAD:
        logits = answer_logits(u, params["W"])
    else:
        cands = batch.candidates
        logits = candidate_logits(u, params["Wc"], cands.bags, batch.match, cands.match_slots)
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError("non-finite logits")
    return ForwardCache(hops, u, logits, softmax_active, batch)


def backward(params: ModelParams, cache: ForwardCache, dlogits: np.ndarray, variant: ModelVariant) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. every role, given ``dL/dlogits``."""
    batch = cache.batch
    d = params.dim
    kd = _pe_scale(d)
    B, n = batch.size, batch.n_memory
    grads: dict[str, np.ndarray] = {}

    def acc(role, g):
        if role in grads:
            grads[role] = grads[role] + g
        else:
            grads[role] = g

    z = cache.final
    if variant.head == QA_HEAD:
        dW, du = matvec_backward(params["W"], z, dlogits)
        acc("W", dW)
    else:
        cands = batch.candidates
        Wc = params["Wc"]
        dr = np.asarray((cands.bags.T @ dlogits.T).T)
        if batch.match is not None and len(cands.match_slots):
            dr[:, cands.match_slots] += np.einsum("bcf,bc->bf", batch.match, dlogits)
        acc("Wc", z.T @ dr)
        du = dr @ Wc.T

    for k in range(params.hops, 0, -1):
        h = cache.hops[k - 1]
        if h.gate is not None:
            do, dg_o = hadamard_backward(h.o, h.gate, du)
            du_prev, dg_u = hadamard_backward(h.u, 1.0 - h.gate, du)
            dpre = sigmoid_backward(h.gate, dg_o - dg_u)
            dWT, du_gate = matvec_backward(params[f"WT{k}"], h.u, dpre)
            acc(f"WT{k}", dWT)
            acc(f"bT{k}", dpre.sum(axis=0))
            du_prev = du_prev + du_gate
        else:
            do, du_prev = du, du
        dcT, dp = matvec_backward(np.swapaxes(h.c, -1, -2), h.p, do)
        dc = np.swapaxes(dcT, -1, -2)
        da = softmax_backward(h.p, dp) if cache.softmax_active else dp * batch.mask
        dm, du_att = matvec_backward(h.m, h.u, da)
        du_prev = du_prev + du_att
        acc(f"A{k}", _embed_backward(batch.mem_a, batch.mem_b, dm.reshape(B * n, d), kd))
        acc(f"C{k}", _embed_backward(batch.mem_a, batch.mem_b, dc.reshape(B * n, d), kd))
        if batch.temporal and params.temporal:
            sel = batch.mask
            for role, g in ((f"TA{k}", dm), (f"TC{k}", dc)):
                dT = np.zeros((params[role].shape[1], d))
                np.add.at(dT, batch.slots[sel], g[sel])
                acc(role, dT.T)
        du = du_prev
    acc("B", _embed_backward(batch.q_a, batch.q_b, du, kd))
    return grads


def cross_entropy(logits: np.ndarray, targets: np.ndarray, reduction: str = "sum") -> tuple[float, np.ndarray]:
    """Negative log-likelihood of ``targets`` and its gradient w.r.t. ``logits``.

    ``reduction`` is ``"sum"`` (over the batch) or ``"mean"``.
    """
    B = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    nll = logz - shifted[np.arange(B), targets]
    grad = np.exp(shifted - logz[:, None])
    grad[np.arange(B), targets] -= 1.0
    if reduction == "mean":
        return float(nll.mean()), grad / B
    if reduction != "sum":
        raise ValueError(f"unknown reduction {reduction!r}")
    return float(nll.sum()), grad


def loss_and_grads(
    params: ModelParams,
    batch: Batch,
    variant: ModelVariant,
    softmax_active: bool = True,
    reduction: str = "sum",
) -> tuple[float, dict[str, np.ndarray]]:
    """Cross-entropy over the batch and its gradients keyed by storage."""
    cache = forward_batch(params, batch, variant, softmax_active)
    loss, dlogits = cross_entropy(cache.logits, batch.targets, reduction)
    return loss, params.reduce_grads(backward(params, cache, dlogits, variant))


def trace_example(cache: ForwardCache, b: int) -> HopTrace:
    """Unpad batch row ``b`` of a forward cache into a :class:`HopTrace`."""
    n = int(cache.batch.mask[b].sum())
    return HopTrace(
        attention=[h.p[b, :n].copy() for h in cache.hops],
        gates=[None if h.gate is None else h.gate[b].copy() for h in cache.hops],
        controllers=[h.u[b].copy() for h in cache.hops],
        responses=[h.o[b].copy() for h in cache.hops],
        final_state=cache.final[b].copy(),
        logits=cache.logits[b].copy(),
    )
