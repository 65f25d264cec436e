"""Dense float64 primitives with hand-written backward rules.

Every forward op has a ``*_backward`` companion taking the upstream gradient
and returning gradients with respect to each input. Ops accept leading batch
axes; when a parameter is broadcast across a batch, its backward rule sums the
gradient back down to the parameter's shape.

Random numbers come from :func:`numpy.random.default_rng` (PCG64). A single
generator per training run is threaded through initialisation, shuffling and
noise so a run is reproducible from its integer seed.
"""
from __future__ import annotations

from typing import Callable, Mapping

import numpy as np
from scipy.special import expit

__all__ = [
    "ContractError",
    "matvec",
    "matvec_backward",
    "softmax",
    "softmax_backward",
    "sigmoid",
    "sigmoid_backward",
    "hadamard",
    "hadamard_backward",
    "global_norm",
    "clip_global_norm",
    "gaussian_init",
    "make_rng",
    "finite_diff_check",
]


class ContractError(ValueError):
    """Raised when an operation's preconditions (shapes, ranges) are violated."""


def _check_finite(x: np.ndarray, name: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise ContractError(f"{name}: non-finite values")
    return x


def _sum_to_shape(g: np.ndarray, shape: tuple) -> np.ndarray:
    # Undo numpy broadcasting for a gradient.
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def matvec(M: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Dense product ``M @ v`` over the last two axes of ``M``.

    ``M`` has shape ``(..., r, c)`` and ``v`` shape ``(..., c)``; leading
    axes broadcast. Returns shape ``(..., r)``.
    """
    M = np.asarray(M, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if M.ndim < 2 or v.ndim < 1 or M.shape[-1] != v.shape[-1]:
        raise ContractError(f"matvec: shape mismatch M{M.shape} v{v.shape}")
    return (M @ v[..., None])[..., 0]


def matvec_backward(M: np.ndarray, v: np.ndarray, g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``matvec(M, v)``: ``dM = g vᵀ`` and ``dv = Mᵀ g``."""
    dM = g[..., :, None] * v[..., None, :]
    dv = (np.swapaxes(M, -1, -2) @ g[..., None])[..., 0]
    return _sum_to_shape(dM, M.shape), _sum_to_shape(dv, v.shape)


def softmax(a: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Softmax over the last axis with max subtraction.

    Entries where ``mask`` is False get probability exactly 0. Each row must
    keep at least one unmasked entry.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 0 or a.shape[-1] == 0:
        raise ContractError("softmax: empty input")
    _check_finite(a, "softmax")
    if mask is not None:
        if not np.all(mask.any(axis=-1)):
            raise ContractError("softmax: a row is fully masked")
        a = np.where(mask, a, -np.inf)
    e = np.exp(a - a.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(p: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Jacobian-vector product of softmax given its output ``p``."""
    return p * (g - (p * g).sum(axis=-1, keepdims=True))


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    _check_finite(x, "sigmoid")
    return expit(x)


def sigmoid_backward(s: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Gradient through a sigmoid given its output ``s``."""
    return g * s * (1.0 - s)


def hadamard(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"hadamard: shape mismatch {a.shape} vs {b.shape}")
    return a * b


def hadamard_backward(a: np.ndarray, b: np.ndarray, g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return g * b, g * a


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    """l2 norm over all entries of all gradients, as if concatenated."""
    return float(np.sqrt(sum(float(np.sum(np.square(g))) for g in grads.values())))


def clip_global_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    """Rescale every gradient by ``max_norm / norm`` when the joint norm exceeds ``max_norm``."""
    if max_norm <= 0:
        raise ContractError("clip_global_norm: max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return dict(grads)
    scale = max_norm / norm
    return {name: g * scale for name, g in grads.items()}


def make_rng(seed: int | np.random.Generator | None) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def gaussian_init(shape, mean: float, std: float, rng) -> np.ndarray:
    """I.i.d. ``Normal(mean, std**2)`` entries drawn from ``rng`` (seed or Generator)."""
    if std < 0:
        raise ContractError("gaussian_init: std must be non-negative")
    rng = make_rng(rng)
    if std == 0:
        return np.full(shape, float(mean))
    return rng.normal(mean, std, size=shape)


def finite_diff_check(
    loss_fn: Callable[[dict[str, np.ndarray]], tuple[float, Mapping[str, np.ndarray]]],
    params: Mapping[str, np.ndarray],
    h: float = 1e-5,
) -> float:
    """Compare analytic gradients against central differences.

    ``loss_fn(params)`` must return ``(loss, grads)`` with ``grads`` keyed like
    ``params`` and must be deterministic. Returns the max over all entries of
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    """
    if h <= 0:
        raise ContractError("finite_diff_check: h must be positive")
    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    _, analytic = loss_fn(work)
    analytic = {k: np.array(v, copy=True) for k, v in analytic.items()}
    worst = 0.0
    for name, arr in work.items():
        flat = arr.reshape(-1)
        ga = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            plus = loss_fn(work)[0]
            flat[i] = orig - h
            minus = loss_fn(work)[0]
            flat[i] = orig
            num = (plus - minus) / (2.0 * h)
            err = abs(ga[i] - num) / max(abs(ga[i]), abs(num), 1e-8)
            worst = max(worst, err)
    return worst
