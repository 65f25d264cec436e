"""SGD training with step decay, linear start, gradient clipping and restarts."""
from __future__ import annotations

import logging
import math
import sys
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from joblib import Parallel, delayed

from .encoder import EncodedDataset, make_batch
from .model import ModelParams, ModelVariant, forward_batch, init_params, loss_and_grads
from .tensor_core import clip_global_norm, global_norm

logger = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    def __init__(self, seed: int, epoch: int, batch: int):
        super().__init__(f"training diverged (seed={seed}, epoch={epoch}, batch={batch})")
        self.seed, self.epoch, self.batch = seed, epoch, batch


class AllRunsDivergedError(FloatingPointError):
    def __init__(self, seeds: list[int]):
        super().__init__("all restarts diverged: seeds " + ", ".join(map(str, seeds)))
        self.seeds = seeds


@dataclass
class TrainConfig:
    lr0: float = 0.005
    decay_every: int = 25
    decay_factor: float = 0.5
    decay_until: int = 100
    total_epochs: int = 100
    linear_start_epochs: int = 20
    batch_size: int = 32
    clip_norm: float = 40.0
    init_std: float = 0.1
    gate_bias_mean: float = 0.5
    noise: float = 0.1
    max_memory: int = 50
    hops: int = 3
    dim: int = 20
    restarts: int = 1
    valid_fraction: float = 0.1
    seed: int = 0
    loss_reduction: str = "sum"

    def __post_init__(self):
        for f in ("decay_every", "total_epochs", "batch_size", "max_memory", "hops", "dim", "restarts"):
            if getattr(self, f) < 1:
                raise ValueError(f"{f} must be >= 1")
        for f in ("lr0", "decay_factor", "clip_norm"):
            if getattr(self, f) <= 0:
                raise ValueError(f"{f} must be positive")
        if self.linear_start_epochs < 0 or self.linear_start_epochs > self.total_epochs:
            raise ValueError("linear_start_epochs must lie in [0, total_epochs]")
        if not 0 <= self.noise < 1:
            raise ValueError("noise must lie in [0, 1)")
        if self.loss_reduction not in ("sum", "mean"):
            raise ValueError("loss_reduction must be 'sum' or 'mean'")

    @classmethod
    def field_types(cls) -> dict[str, type]:
        return {f.name: type(getattr(cls(), f.name)) for f in fields(cls)}

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochLog:
    epoch: int
    lr: float
    train_loss: float
    valid_accuracy: float
    softmax_active: bool
    max_grad_norm: float


@dataclass
class TrainRun:
    seed: int
    log: list[EpochLog] = field(default_factory=list)
    params: ModelParams | None = None
    diverged: str | None = None

    @property
    def valid_accuracy(self) -> float:
        return self.log[-1].valid_accuracy if self.log and not self.diverged else float("nan")

    def summary(self) -> dict:
        return {
            "seed": self.seed,
            "epochs": len(self.log),
            "valid_accuracy": self.valid_accuracy,
            "final_train_loss": self.log[-1].train_loss if self.log else None,
            "diverged": self.diverged,
        }

    def to_dict(self) -> dict:
        """Summary plus the per-epoch log."""
        return {**self.summary(), "log": [asdict(e) for e in self.log]}


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """``lr0 * factor ** floor(min(epoch, decay_until) / decay_every)``."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    steps = min(epoch, cfg.decay_until) // cfg.decay_every
    return cfg.lr0 * cfg.decay_factor ** steps


def predict_indices(
    params: ModelParams,
    data: EncodedDataset,
    variant: ModelVariant,
    batch_size: int = 256,
    softmax_active: bool = True,
) -> np.ndarray:
    out = []
    for start in range(0, len(data), batch_size):
        idx = range(start, min(start + batch_size, len(data)))
        cache = forward_batch(params, make_batch(data, idx, "eval"), variant, softmax_active)
        out.append(cache.logits.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def accuracy(params: ModelParams, data: EncodedDataset, variant: ModelVariant, softmax_active: bool = True) -> float:
    """Percentage of examples whose argmax prediction equals the target."""
    if not len(data):
        return float("nan")
    pred = predict_indices(params, data, variant, softmax_active=softmax_active)
    return 100.0 * float(np.mean(pred == data.targets))


def sgd_step(params: ModelParams, grads: dict[str, np.ndarray], lr: float) -> None:
    for key, g in grads.items():
        params.store[key] -= lr * g


def train_epoch(
    params: ModelParams,
    data: EncodedDataset,
    variant: ModelVariant,
    cfg: TrainConfig,
    epoch: int,
    rng: np.random.Generator,
    seed: int = -1,
) -> dict:
    """One pass over ``data`` in shuffled mini-batches; updates ``params`` in place."""
    lr = lr_schedule(epoch, cfg)
    softmax_active = epoch >= cfg.linear_start_epochs
    order = rng.permutation(len(data))
    losses, norms = [], []
    for bi, start in enumerate(range(0, len(order), cfg.batch_size)):
        batch = make_batch(data, order[start : start + cfg.batch_size], "train", rng)
        try:
            with np.errstate(over="raise", invalid="raise"):
                loss, grads = loss_and_grads(params, batch, variant, softmax_active, cfg.loss_reduction)
        except FloatingPointError:
            raise DivergenceError(seed, epoch, bi) from None
        if not math.isfinite(loss):
            raise DivergenceError(seed, epoch, bi)
        grads = clip_global_norm(grads, cfg.clip_norm)
        norms.append(global_norm(grads))
        sgd_step(params, grads, lr)
        losses.append(loss if cfg.loss_reduction == "sum" else loss * batch.size)
    return {
        "lr": lr,
        "softmax_active": softmax_active,
        "train_loss": float(np.sum(losses) / max(1, len(data))),
        "max_grad_norm": float(max(norms, default=0.0)),
    }


def train_run(
    train: EncodedDataset,
    valid: EncodedDataset,
    variant: ModelVariant,
    cfg: TrainConfig,
    seed: int,
    verbose: bool = False,
) -> TrainRun:
    """A single training run from a fresh initialisation drawn from ``seed``."""
    rng = np.random.default_rng(seed)
    slots = train.cfg.temporal_slots if train.cfg.temporal else 0
    params = init_params(
        variant, train.vocab_size, cfg.dim, cfg.hops, slots, rng, cfg.init_std, cfg.gate_bias_mean
    )
    run = TrainRun(seed=seed, params=params)
    for epoch in range(cfg.total_epochs):
        try:
            stats = train_epoch(params, train, variant, cfg, epoch, rng, seed)
        except DivergenceError as exc:
            run.diverged = str(exc)
            logger.warning("%s", exc)
            return run
        valid_acc = accuracy(params, valid, variant, stats["softmax_active"])
        run.log.append(EpochLog(epoch, stats["lr"], stats["train_loss"], valid_acc,
                                stats["softmax_active"], stats["max_grad_norm"]))
        if verbose:
            print(
                f"[seed {seed}] epoch {epoch:3d} lr {stats['lr']:.6f} loss {stats['train_loss']:.4f} "
                f"valid {valid_acc:6.2f}",
                file=sys.stderr,
            )
    return run


def restart_seeds(seed: int, restarts: int) -> list[int]:
    """Distinct per-restart seeds derived from the task seed."""
    children = np.random.SeedSequence(seed).spawn(restarts)
    return [int(c.generate_state(1, dtype=np.uint32)[0]) for c in children]


@dataclass
class RestartReport:
    best: TrainRun
    runs: list[TrainRun]   # every restart in seed-derivation order; only ``best`` keeps params

    def to_dict(self) -> dict:
        return {
            "best_seed": self.best.seed,
            "best_valid_accuracy": self.best.valid_accuracy,
            "runs": [r.summary() for r in self.runs],
        }


def select_best(runs: list[TrainRun]) -> TrainRun:
    """Highest validation accuracy; ties go to the lower seed."""
    ok = [r for r in runs if not r.diverged]
    if not ok:
        raise AllRunsDivergedError([r.seed for r in runs])
    return min(ok, key=lambda r: (-r.valid_accuracy, r.seed))


def train_with_restarts(
    train: EncodedDataset,
    valid: EncodedDataset,
    variant: ModelVariant,
    cfg: TrainConfig,
    n_jobs: int | None = None,
    verbose: bool = False,
) -> RestartReport:
    if cfg.restarts < 1:
        raise ValueError("restarts must be >= 1")
    seeds = restart_seeds(cfg.seed, cfg.restarts)
    runs = Parallel(n_jobs=n_jobs)(
        delayed(train_run)(train, valid, variant, cfg, s, verbose) for s in seeds
    )
    best = select_best(runs)
    for r in runs:
        if r is not best:
            r.params = None
    return RestartReport(best, runs)
