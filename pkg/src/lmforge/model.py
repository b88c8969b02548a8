"""Transformer encoder in three flavours, parameter counting and checkpoints.

``bert``    token + position + segment embeddings, pooler and NSP head.
``distil``  no segment embeddings, no pooler, no NSP head.
``roberta`` like ``distil`` but paired with a BPE tokenizer.

All flavours use post-layer-norm blocks, learned absolute positions and an
MLM head ``dense -> gelu -> layer norm -> projection + bias`` whose
projection is the token-embedding matrix when ``tie_mlm_head`` is set.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

FLAVORS = ("bert", "distil", "roberta")
INIT_STD = 0.02
LN_EPS = 1e-12
MASK_NEG = -1e9

CHECKPOINT_FORMAT = "lmforge-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    """Checkpoint directory is inconsistent (size, checksum or manifest mismatch)."""


@dataclass(frozen=True)
class ModelConfig:
    flavor: str = "bert"
    vocab_size: int = 30000
    hidden_size: int = 768
    num_layers: int = 12
    num_heads: int = 12
    feedforward_size: int = 3072
    max_positions: int = 512
    num_segment_types: int = 2
    cased: bool = True
    tie_mlm_head: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.flavor not in FLAVORS:
            raise ValueError(f"flavor must be one of {FLAVORS}, got {self.flavor!r}")
        for name in ("vocab_size", "hidden_size", "num_layers", "num_heads", "feedforward_size", "max_positions"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.hidden_size % self.num_heads:
            raise ValueError(f"hidden_size {self.hidden_size} is not divisible by num_heads {self.num_heads}")
        if self.num_segment_types not in (0, 2):
            raise ValueError("num_segment_types must be 0 or 2")
        if self.flavor in ("distil", "roberta") and self.num_segment_types:
            raise ValueError(f"{self.flavor} flavor has no segment embeddings")
        if self.vocab_size <= 5:
            raise ValueError("vocab_size must exceed the 5 special tokens")

    @property
    def has_nsp(self) -> bool:
        return self.flavor == "bert"

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.num_heads

    @classmethod
    def for_flavor(cls, flavor: str, **kw) -> "ModelConfig":
        kw.setdefault("num_segment_types", 2 if flavor == "bert" else 0)
        return cls(flavor=flavor, **kw)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


def mbert_config() -> ModelConfig:
    """Multilingual BERT-base dimensions."""
    return ModelConfig("bert", vocab_size=119547, hidden_size=768, num_layers=12, num_heads=12,
                       feedforward_size=3072, max_positions=512, num_segment_types=2)


def distil_mbert_config() -> ModelConfig:
    return replace(mbert_config(), flavor="distil", num_layers=6, num_segment_types=0)


def roberta_small_config() -> ModelConfig:
    """52k-vocab, 6-layer RoBERTa-style dimensions."""
    return ModelConfig("roberta", vocab_size=52000, hidden_size=768, num_layers=6, num_heads=12,
                       feedforward_size=3072, max_positions=512, num_segment_types=0)


# -- parameter layout -------------------------------------------------------------


def parameter_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, shape) of every stored tensor; the tied projection is not listed."""
    d, f, v = config.hidden_size, config.feedforward_size, config.vocab_size
    shapes: list[tuple[str, tuple[int, ...]]] = [
        ("embeddings.token", (v, d)),
        ("embeddings.position", (config.max_positions, d)),
    ]
    if config.num_segment_types:
        shapes.append(("embeddings.segment", (config.num_segment_types, d)))
    shapes += [("embeddings.ln.gain", (d,)), ("embeddings.ln.bias", (d,))]
    for i in range(config.num_layers):
        p = f"layers.{i}."
        for proj in ("query", "key", "value", "output"):
            shapes += [(p + f"attn.{proj}.weight", (d, d)), (p + f"attn.{proj}.bias", (d,))]
        shapes += [(p + "attn.ln.gain", (d,)), (p + "attn.ln.bias", (d,)),
                   (p + "ff.in.weight", (d, f)), (p + "ff.in.bias", (f,)),
                   (p + "ff.out.weight", (f, d)), (p + "ff.out.bias", (d,)),
                   (p + "ff.ln.gain", (d,)), (p + "ff.ln.bias", (d,))]
    shapes += [("mlm.dense.weight", (d, d)), ("mlm.dense.bias", (d,)),
               ("mlm.ln.gain", (d,)), ("mlm.ln.bias", (d,))]
    if not config.tie_mlm_head:
        shapes.append(("mlm.decoder.weight", (v, d)))
    shapes.append(("mlm.decoder.bias", (v,)))
    if config.has_nsp:
        shapes += [("pooler.weight", (d, d)), ("pooler.bias", (d,)),
                   ("nsp.weight", (d, 2)), ("nsp.bias", (2,))]
    return shapes


def param_count(config: ModelConfig) -> int:
    """Exact number of trainable scalars, with a tied MLM projection counted once."""
    d, f, v, L = (config.hidden_size, config.feedforward_size, config.vocab_size, config.num_layers)
    embeddings = v * d + config.max_positions * d + config.num_segment_types * d + 2 * d
    per_layer = 4 * (d * d + d) + 2 * d + (d * f + f) + (f * d + d) + 2 * d
    mlm = (d * d + d) + 2 * d + v + (0 if config.tie_mlm_head else v * d)
    nsp = (d * d + d) + (2 * d + 2) if config.has_nsp else 0
    return embeddings + L * per_layer + mlm + nsp


def _is_body(name: str) -> bool:
    return name not in ("embeddings.token", "mlm.decoder.weight", "mlm.decoder.bias")


class ModelParameters:
    """Named trainable tensors. With a tied head, the MLM projection *is* ``embeddings.token``."""

    def __init__(self, tensors: dict[str, Tensor], tied: bool):
        self.tensors = dict(tensors)
        self.tied = tied

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def values(self) -> list[Tensor]:
        return list(self.tensors.values())

    @property
    def mlm_projection(self) -> Tensor:
        return self.tensors["embeddings.token"] if self.tied else self.tensors["mlm.decoder.weight"]

    def num_scalars(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def copy(self) -> "ModelParameters":
        return ModelParameters({k: T.parameter(v.data.copy(), dtype=None) for k, v in self.items()}, self.tied)

    def astype(self, dtype) -> "ModelParameters":
        return ModelParameters({k: T.parameter(v.data.astype(dtype), dtype=None) for k, v in self.items()},
                               self.tied)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.items()}


def truncated_normal(rng: np.random.Generator, shape, std: float = INIT_STD, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by resampling."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)


def _init_tensor(name: str, shape, rng) -> np.ndarray:
    if name.endswith(".gain"):
        return np.ones(shape, dtype=np.float32)
    if name.endswith(".bias"):
        return np.zeros(shape, dtype=np.float32)
    return truncated_normal(rng, shape)


def new_model(config: ModelConfig, seed: int = 0) -> ModelParameters:
    config.validate()
    rng = np.random.default_rng(seed)
    tensors = {name: T.parameter(_init_tensor(name, shape, rng)) for name, shape in parameter_shapes(config)}
    return ModelParameters(tensors, tied=config.tie_mlm_head)


# -- forward ------------------------------------------------------------------------


@dataclass
class ForwardOutput:
    hidden: Tensor
    mlm_logits: Tensor
    nsp_logits: Tensor | None = None
    attentions: list[np.ndarray] = field(default_factory=list)


def _linear(x: Tensor, params: ModelParameters, prefix: str) -> Tensor:
    return x @ params[prefix + ".weight"] + params[prefix + ".bias"]


def _ln(x: Tensor, params: ModelParameters, prefix: str) -> Tensor:
    return T.layer_norm(x, params[prefix + ".gain"], params[prefix + ".bias"], LN_EPS)


def _attention(x: Tensor, params, prefix, config, mask_add, keep_attn):
    b, s, d = x.shape
    h, dh = config.num_heads, config.head_dim

    def heads(t):
        return t.reshape(b, s, h, dh).transpose(0, 2, 1, 3)

    q = heads(_linear(x, params, prefix + "query"))
    k = heads(_linear(x, params, prefix + "key"))
    v = heads(_linear(x, params, prefix + "value"))
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
    scores = T.add_constant(scores, mask_add)
    probs = T.softmax(scores, axis=-1)
    if keep_attn is not None:
        keep_attn.append(probs.data)
    ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(b, s, d)
    return _linear(ctx, params, prefix + "output")


def _check_inputs(config: ModelConfig, ids: np.ndarray, segment_ids) -> None:
    if ids.ndim != 2:
        raise ValueError(f"token_ids must be (batch, seq), got shape {ids.shape}")
    if ids.shape[1] > config.max_positions:
        raise ValueError(f"sequence length {ids.shape[1]} exceeds max_positions {config.max_positions}")
    if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
        raise ValueError(f"token id out of range [0, {config.vocab_size})")
    if segment_ids is not None and config.num_segment_types:
        seg = np.asarray(segment_ids)
        if seg.shape != ids.shape:
            raise ValueError("segment_ids shape must match token_ids")
        if seg.size and (seg.min() < 0 or seg.max() >= config.num_segment_types):
            raise ValueError("segment id out of range")


def forward(params: ModelParameters, config: ModelConfig, token_ids, attention_mask=None, segment_ids=None,
            return_attentions: bool = False) -> ForwardOutput:
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    _check_inputs(config, ids, segment_ids)
    b, s = ids.shape
    mask = np.ones((b, s), dtype=np.float32) if attention_mask is None else np.asarray(attention_mask).reshape(b, s)
    dt = params["embeddings.token"].dtype

    x = T.embedding(params["embeddings.token"], ids)
    x = x + T.embedding(params["embeddings.position"], np.arange(s))
    if config.num_segment_types:
        seg = np.zeros((b, s), dtype=np.int64) if segment_ids is None else np.asarray(segment_ids, dtype=np.int64)
        x = x + T.embedding(params["embeddings.segment"], seg)
    x = _ln(x, params, "embeddings.ln")

    mask_add = ((1.0 - mask) * MASK_NEG).astype(dt)[:, None, None, :]
    attns: list[np.ndarray] | None = [] if return_attentions else None
    for i in range(config.num_layers):
        p = f"layers.{i}."
        x = _ln(x + _attention(x, params, p + "attn.", config, mask_add, attns), params, p + "attn.ln")
        ff = _linear(T.gelu(_linear(x, params, p + "ff.in")), params, p + "ff.out")
        x = _ln(x + ff, params, p + "ff.ln")

    h = _ln(T.gelu(_linear(x, params, "mlm.dense")), params, "mlm.ln")
    logits = h @ params.mlm_projection.T + params["mlm.decoder.bias"]

    nsp = None
    if config.has_nsp:
        pooled = T.tanh(_linear(x[:, 0, :], params, "pooler"))
        nsp = _linear(pooled, params, "nsp")
    return ForwardOutput(hidden=x, mlm_logits=logits, nsp_logits=nsp, attentions=attns or [])


# -- tokenizer replacement ----------------------------------------------------------------


def replace_embeddings_for_new_tokenizer(params: ModelParameters, config: ModelConfig, new_vocab_size: int,
                                         seed: int = 0) -> tuple[ModelParameters, ModelConfig]:
    """Re-initialise the vocabulary-sized tensors for a new tokenizer; the body is copied bit-exactly."""
    if new_vocab_size <= 5:
        raise ValueError(f"new vocab size {new_vocab_size} must exceed the 5 special tokens")
    new_config = replace(config, vocab_size=new_vocab_size)
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in parameter_shapes(new_config):
        if _is_body(name):
            tensors[name] = T.parameter(params[name].data.copy(), dtype=None)
        else:
            tensors[name] = T.parameter(_init_tensor(name, shape, rng))
    return ModelParameters(tensors, tied=new_config.tie_mlm_head), new_config


# -- checkpoints ------------------------------------------------------------------------------


def save_checkpoint(params: ModelParameters, config: ModelConfig, tokenizer, path) -> Path:
    """Write ``manifest.json`` + ``weights.bin`` (+ tokenizer files) into directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    table = []
    offset = 0
    h = hashlib.sha256()
    with open(path / "weights.bin", "wb") as fh:
        for name, shape in parameter_shapes(config):
            arr = params[name].data
            if arr.shape != shape:
                raise ValueError(f"{name}: shape {arr.shape} does not match config {shape}")
            raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            fh.write(raw)
            h.update(raw)
            table.append({"name": name, "shape": list(shape), "offset": offset, "nbytes": len(raw)})
            offset += len(raw)
    tok_files = tokenizer.save(path) if tokenizer is not None else []
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "dtype": "float32-le",
        "total_bytes": offset,
        "sha256": h.hexdigest(),
        "tensors": table,
        "tokenizer_files": tok_files,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"{mpath} not found")
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{mpath}: invalid JSON ({exc})") from exc
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{mpath}: not an {CHECKPOINT_FORMAT} manifest")
    return manifest


def load_checkpoint(path) -> tuple[ModelParameters, ModelConfig]:
    path = Path(path)
    manifest = read_manifest(path)
    config = ModelConfig.from_dict(manifest["config"])
    wpath = path / "weights.bin"
    if not wpath.exists():
        raise FileNotFoundError(f"{wpath} not found")
    blob = wpath.read_bytes()
    if len(blob) != manifest["total_bytes"]:
        raise CheckpointError(f"{wpath}: {len(blob)} bytes on disk, manifest declares {manifest['total_bytes']}")
    if hashlib.sha256(blob).hexdigest() != manifest.get("sha256"):
        raise CheckpointError(f"{wpath}: checksum mismatch")
    expected = dict(parameter_shapes(config))
    tensors = {}
    for entry in manifest["tensors"]:
        name, shape, off, nbytes = entry["name"], tuple(entry["shape"]), entry["offset"], entry["nbytes"]
        if expected.get(name) != shape or nbytes != 4 * int(np.prod(shape)) or off + nbytes > len(blob):
            raise CheckpointError(f"manifest entry {name} is inconsistent with the config or blob")
        arr = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=off).reshape(shape)
        tensors[name] = T.parameter(arr.astype(np.float32), dtype=None)
    if set(tensors) != set(expected):
        raise CheckpointError("manifest tensor table does not cover the model layout")
    ordered = {name: tensors[name] for name, _ in parameter_shapes(config)}
    return ModelParameters(ordered, tied=config.tie_mlm_head), config
