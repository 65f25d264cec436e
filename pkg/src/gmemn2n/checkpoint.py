"""JSON checkpoints of named parameter arrays.

Layout::

    {
      "format_version": 1,
      "variant": {...},
      "config": {"train": {...}, "encoding": {...}},
      "params": {"<storage key>": {"shape": [...], "row_major_values": [...]}},
      "tying_map": {"<role>": ["<storage key>", <transposed>]},
      "rng_seed": <int>,
      "vocabulary": ["<nil>", ...],
      ...extra metadata (task, manifest hash)
    }

Values are written with 17 significant digits, which round-trips float64
exactly. Keys are sorted so identical parameters give identical bytes.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .corpus import NIL, Vocabulary
from .encoder import EncodingConfig
from .model import ModelParams, ModelVariant
from .trainer import TrainConfig

FORMAT_VERSION = 1
_PLACEHOLDER = "\x00params\x00"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    variant: ModelVariant
    train_config: TrainConfig
    encoding: EncodingConfig
    params: ModelParams
    vocabulary: Vocabulary
    rng_seed: int
    metadata: dict = field(default_factory=dict)


def _format_float(x: float) -> str:
    s = format(x, ".17g")
    # keep a float marker so "-0" does not load back as the integer 0
    return s if "." in s or "e" in s else s + ".0"


def _format_array(a: np.ndarray) -> str:
    return "[" + ", ".join(_format_float(float(x)) for x in np.ravel(a)) + "]"


def dumps(ckpt: Checkpoint) -> str:
    p = ckpt.params
    params_json = ",\n".join(
        f'  {json.dumps(key)}: {{"shape": {json.dumps(list(p.store[key].shape))}, '
        f'"row_major_values": {_format_array(p.store[key])}}}'
        for key in sorted(p.store)
    )
    doc = {
        "format_version": FORMAT_VERSION,
        "variant": asdict(ckpt.variant),
        "config": {"train": ckpt.train_config.to_dict(), "encoding": asdict(ckpt.encoding), "hops": p.hops},
        "params": _PLACEHOLDER,
        "tying_map": {role: [key, t] for role, (key, t) in sorted(p.tying.items())},
        "rng_seed": int(ckpt.rng_seed),
        "vocabulary": list(ckpt.vocabulary.index_to_word),
    }
    for k, v in sorted(ckpt.metadata.items()):
        if k in doc:
            raise CheckpointError(f"metadata key {k!r} collides with a checkpoint field")
        doc[k] = v
    text = json.dumps(doc, indent=1, sort_keys=True, ensure_ascii=False)
    return text.replace(json.dumps(_PLACEHOLDER), "{\n" + params_json + "\n}") + "\n"


def loads(text: str) -> Checkpoint:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"checkpoint is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise CheckpointError("checkpoint must be a JSON object")
    try:
        return _from_doc(doc)
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc!r}") from None


def _from_doc(doc: dict) -> Checkpoint:
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format_version {version!r}")
    store = {}
    for key, entry in doc["params"].items():
        shape = tuple(entry["shape"])
        values = np.asarray(entry["row_major_values"], dtype=np.float64)
        if values.size != int(np.prod(shape)):
            raise CheckpointError(f"parameter {key!r}: {values.size} values for shape {shape}")
        store[key] = values.reshape(shape)
    tying = {role: (key, bool(t)) for role, (key, t) in doc["tying_map"].items()}
    missing = {key for key, _ in tying.values()} - set(store)
    if missing:
        raise CheckpointError(f"tying map references missing parameters {sorted(missing)}")
    words = doc["vocabulary"]
    if not words or words[0] != NIL:
        raise CheckpointError("vocabulary must start with the nil word")
    cfg = doc["config"]
    known = {"format_version", "variant", "config", "params", "tying_map", "rng_seed", "vocabulary"}
    return Checkpoint(
        variant=ModelVariant(**doc["variant"]),
        train_config=TrainConfig(**cfg["train"]),
        encoding=EncodingConfig(**cfg["encoding"]),
        params=ModelParams(store, tying, int(cfg["hops"])),
        vocabulary=Vocabulary(words[1:]),
        rng_seed=int(doc["rng_seed"]),
        metadata={k: v for k, v in doc.items() if k not in known},
    )


def save(ckpt: Checkpoint, path: str | Path) -> None:
    Path(path).write_text(dumps(ckpt), encoding="utf-8")


def load(path: str | Path) -> Checkpoint:
    return loads(Path(path).read_text(encoding="utf-8"))
