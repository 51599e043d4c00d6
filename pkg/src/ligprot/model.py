"""Text/ligand-conditioned protein decoder.

Four parts: a text encoder whose output is compressed by learned memory
queries, a ligand (SMILES) encoder, adapters projecting both into the decoder
width, and a causal protein decoder that sees the projected rows as a
key/value prefix at every self-attention layer.

All functions take a :class:`ModelState` and token-id lists for one example;
batching happens one level up by summing per-example losses.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .tokenizers import PROTEIN_VOCAB, EncodedTriple

logger = logging.getLogger(__name__)

__all__ = [
    "ConfigError",
    "ModelConfig",
    "ModelState",
    "EncodedTriple",
    "PRESETS",
    "preset",
    "init_state",
    "encode_text",
    "elicit_memory",
    "encode_ligand",
    "build_prefix",
    "condition",
    "decode_logits",
    "negative_log_likelihood",
    "count_parameters",
    "SUBNETWORKS",
]

SUBNETWORKS = ("text", "memory", "ligand", "adapter", "decoder")


class ConfigError(ValueError):
    """Invalid configuration value; ``field`` names the offending entry."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class ModelConfig:
    text_layers: int = 2
    text_heads: int = 2
    text_dim: int = 32
    ligand_layers: int = 2
    ligand_heads: int = 2
    ligand_dim: int = 32
    decoder_layers: int = 2
    decoder_heads: int = 2
    decoder_dim: int = 64
    memory_size: int = 8
    text_ffn_mult: int = 4
    ligand_ffn_mult: int = 4
    decoder_ffn_mult: int = 4
    max_text_positions: int = 256
    max_ligand_positions: int = 256
    max_protein_positions: int = 256
    text_vocab_size: int = 64
    smiles_vocab_size: int = 32
    protein_vocab_size: int = len(PROTEIN_VOCAB)
    use_text_encoder: bool = True
    use_ligand_encoder: bool = True
    use_memory_module: bool = True
    dropout: float = 0.0
    layer_norm_eps: float = 1e-5

    def __post_init__(self):
        for stream in ("text", "ligand", "decoder"):
            dim = getattr(self, f"{stream}_dim")
            heads = getattr(self, f"{stream}_heads")
            if heads < 1:
                raise ConfigError(f"{stream}_heads", "must be >= 1")
            if dim < 1 or dim % heads:
                raise ConfigError(f"{stream}_dim", f"{dim} is not divisible by {heads} heads")
            if getattr(self, f"{stream}_layers") < 0:
                raise ConfigError(f"{stream}_layers", "must be >= 0")
        if self.use_memory_module and self.use_text_encoder and self.memory_size < 1:
            raise ConfigError("memory_size", "must be >= 1 when the memory module is enabled")
        for name in ("max_text_positions", "max_ligand_positions", "max_protein_positions",
                     "text_vocab_size", "smiles_vocab_size", "protein_vocab_size"):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout", "must lie in [0, 1)")
        if self.layer_norm_eps <= 0:
            raise ConfigError("layer_norm_eps", "must be positive")

    @property
    def has_memory(self) -> bool:
        return self.use_text_encoder and self.use_memory_module

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(unknown[0], "unknown model config field")
        return cls(**data)


PRESETS: dict[str, dict] = {
    "toy": dict(
        text_layers=2, text_heads=2, text_dim=32, memory_size=8,
        ligand_layers=2, ligand_heads=2, ligand_dim=32,
        decoder_layers=2, decoder_heads=2, decoder_dim=64,
    ),
    "paper-1B": dict(
        text_layers=12, text_heads=12, text_dim=768, memory_size=64,
        ligand_layers=6, ligand_heads=12, ligand_dim=768,
        decoder_layers=27, decoder_heads=16, decoder_dim=1536,
        max_text_positions=1024, max_ligand_positions=512, max_protein_positions=1024,
    ),
    "paper-3B": dict(
        text_layers=12, text_heads=12, text_dim=768, memory_size=64,
        ligand_layers=6, ligand_heads=12, ligand_dim=768,
        decoder_layers=32, decoder_heads=32, decoder_dim=2560,
        max_text_positions=1024, max_ligand_positions=512, max_protein_positions=1024,
    ),
}


def preset(name: str, **overrides) -> ModelConfig:
    """Named configuration with optional field overrides."""
    try:
        base = PRESETS[name]
    except KeyError:
        raise ConfigError("preset", f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return ModelConfig(**{**base, **overrides})


@dataclass
class ModelState:
    """Named parameter tensors plus the configuration they were built for."""

    config: ModelConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def copy(self) -> ModelState:
        return ModelState(self.config, {k: Tensor(v.data, requires_grad=v.requires_grad)
                                        for k, v in self.params.items()})


# ---------------------------------------------------------------------------
# initialisation


def _stream_shapes(prefix: str, vocab: int, positions: int, layers: int, dim: int, mult: int):
    hidden = mult * dim
    yield f"{prefix}.embed", (vocab, dim), "embed"
    yield f"{prefix}.pos", (positions, dim), "embed"
    for i in range(layers):
        base = f"{prefix}.layers.{i}"
        for proj in ("q", "k", "v", "o"):
            yield f"{base}.attn.w{proj}", (dim, dim), "linear"
            yield f"{base}.attn.b{proj}", (dim,), "zeros"
        yield f"{base}.ln1.gain", (dim,), "ones"
        yield f"{base}.ln1.bias", (dim,), "zeros"
        yield f"{base}.ffn.w1", (dim, hidden), "linear"
        yield f"{base}.ffn.b1", (hidden,), "zeros"
        yield f"{base}.ffn.w2", (hidden, dim), "linear"
        yield f"{base}.ffn.b2", (dim,), "zeros"
        yield f"{base}.ln2.gain", (dim,), "ones"
        yield f"{base}.ln2.bias", (dim,), "zeros"


def parameter_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """``(name, shape, init kind)`` for every parameter the config implies."""
    c = config
    shapes = []
    if c.use_text_encoder:
        shapes += _stream_shapes("text", c.text_vocab_size, c.max_text_positions,
                                 c.text_layers, c.text_dim, c.text_ffn_mult)
        if c.use_memory_module:
            shapes.append(("memory.M", (c.memory_size, c.text_dim), "normal"))
            for proj in ("q", "k", "v"):
                shapes.append((f"memory.w{proj}", (c.text_dim, c.text_dim), "linear"))
        shapes.append(("adapter.memory.w", (c.text_dim, c.decoder_dim), "linear"))
        shapes.append(("adapter.memory.b", (c.decoder_dim,), "zeros"))
    if c.use_ligand_encoder:
        shapes += _stream_shapes("ligand", c.smiles_vocab_size, c.max_ligand_positions,
                                 c.ligand_layers, c.ligand_dim, c.ligand_ffn_mult)
        shapes.append(("adapter.ligand.w", (c.ligand_dim, c.decoder_dim), "linear"))
        shapes.append(("adapter.ligand.b", (c.decoder_dim,), "zeros"))
    shapes += _stream_shapes("decoder", c.protein_vocab_size, c.max_protein_positions,
                             c.decoder_layers, c.decoder_dim, c.decoder_ffn_mult)
    shapes.append(("decoder.head.w", (c.decoder_dim, c.protein_vocab_size), "linear"))
    shapes.append(("decoder.head.b", (c.protein_vocab_size,), "zeros"))
    return shapes


def init_state(config: ModelConfig, seed: int = 0, parts: Sequence[str] | None = None) -> ModelState:
    """Randomly initialise parameters.

    ``parts`` restricts initialisation to the named sub-networks, which keeps
    full-scale shape checks from allocating the full model.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape, kind in parameter_shapes(config):
        if parts is not None and name.split(".")[0] not in parts:
            continue
        if kind == "linear":
            data = rng.standard_normal(shape) / math.sqrt(shape[0])
        elif kind == "embed":
            data = rng.standard_normal(shape) * 0.1
        elif kind == "normal":
            data = rng.standard_normal(shape)
        elif kind == "ones":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data, requires_grad=True)
    return ModelState(config, params)


def count_parameters(state: ModelState) -> dict[str, int]:
    counts = {name: 0 for name in SUBNETWORKS}
    for name, p in state.params.items():
        counts[name.split(".")[0]] += p.size
    counts["total"] = sum(counts.values())
    return counts


# ---------------------------------------------------------------------------
# building blocks


def _linear(x: Tensor, state: ModelState, w: str, b: str | None = None) -> Tensor:
    out = T.matmul(x, state[w])
    return T.add(out, state[b]) if b is not None else out


def _split_heads(x: Tensor, n_heads: int, keys: bool = False) -> Tensor:
    n, d = x.shape
    x = T.reshape(x, (n, n_heads, d // n_heads))
    # keys come out pre-transposed as (H, dh, n) for the score product
    return T.transpose(x, (1, 2, 0) if keys else (1, 0, 2))


def _attention(x: Tensor, state: ModelState, base: str, n_heads: int,
               prefix: Tensor | None = None, causal: bool = False) -> Tensor:
    """Multi-head self-attention; ``prefix`` rows join keys/values only."""
    n, d = x.shape
    kv_in = x if prefix is None or prefix.shape[0] == 0 else T.concat([prefix, x], axis=0)
    n_prefix = kv_in.shape[0] - n
    q = _split_heads(_linear(x, state, f"{base}.wq", f"{base}.bq"), n_heads)
    k = _split_heads(_linear(kv_in, state, f"{base}.wk", f"{base}.bk"), n_heads, keys=True)
    v = _split_heads(_linear(kv_in, state, f"{base}.wv", f"{base}.bv"), n_heads)
    scores = T.scale(T.matmul(q, k), 1.0 / math.sqrt(d // n_heads))
    if causal:
        future = np.zeros((n, n_prefix + n), dtype=bool)
        future[:, n_prefix:] = np.triu(np.ones((n, n), dtype=bool), k=1)
        scores = T.masked_fill(scores, future, -np.inf)
    heads = T.matmul(T.softmax(scores, axis=-1), v)
    merged = T.reshape(T.transpose(heads, (1, 0, 2)), (n, d))
    return _linear(merged, state, f"{base}.wo", f"{base}.bo")


def _block(x: Tensor, state: ModelState, base: str, n_heads: int, rate: float, rng,
           prefix: Tensor | None = None, causal: bool = False) -> Tensor:
    """Post-norm layer: LN(x + MHA(x)), then LN(h + FFN(h))."""
    eps = state.config.layer_norm_eps
    attn = T.dropout(_attention(x, state, f"{base}.attn", n_heads, prefix, causal), rate, rng)
    h = T.layer_norm(T.add(x, attn), state[f"{base}.ln1.gain"], state[f"{base}.ln1.bias"], eps)
    ff = T.gelu(_linear(h, state, f"{base}.ffn.w1", f"{base}.ffn.b1"))
    ff = T.dropout(_linear(ff, state, f"{base}.ffn.w2", f"{base}.ffn.b2"), rate, rng)
    return T.layer_norm(T.add(h, ff), state[f"{base}.ln2.gain"], state[f"{base}.ln2.bias"], eps)


def _truncate(ids: Sequence[int], limit: int, stream: str) -> list[int]:
    ids = list(ids)
    if len(ids) > limit:
        logger.warning("%s input of length %d truncated to %d positions", stream, len(ids), limit)
        ids = ids[:limit]
    return ids


def _embed(ids: Sequence[int], state: ModelState, stream: str, rng) -> Tensor:
    tok = T.embedding_lookup(state[f"{stream}.embed"], ids)
    pos = T.embedding_lookup(state[f"{stream}.pos"], np.arange(len(ids)))
    return T.dropout(T.add(tok, pos), state.config.dropout, rng)


def _encode(ids: Sequence[int], state: ModelState, stream: str, rng) -> Tensor:
    c = state.config
    layers, heads, limit = (
        (c.text_layers, c.text_heads, c.max_text_positions) if stream == "text"
        else (c.ligand_layers, c.ligand_heads, c.max_ligand_positions)
    )
    ids = _truncate(ids, limit, stream)
    if not ids:
        raise ValueError(f"empty {stream} input")
    h = _embed(ids, state, stream, rng)
    for i in range(layers):
        h = _block(h, state, f"{stream}.layers.{i}", heads, c.dropout, rng)
    return h


# ---------------------------------------------------------------------------
# public forward operations


def encode_text(ids: Sequence[int], state: ModelState, rng: np.random.Generator | None = None) -> Tensor:
    """Contextual text token representations, shape ``(N_w, D_t)``."""
    if not state.config.use_text_encoder:
        raise ConfigError("use_text_encoder", "text encoder is disabled in this configuration")
    return _encode(ids, state, "text", rng)


def encode_ligand(ids: Sequence[int], state: ModelState, rng: np.random.Generator | None = None) -> Tensor:
    """Contextual SMILES token representations, shape ``(N_s, D_g)``."""
    if not state.config.use_ligand_encoder:
        raise ConfigError("use_ligand_encoder", "ligand encoder is disabled in this configuration")
    return _encode(ids, state, "ligand", rng)


def elicit_memory(text_states: Tensor, state: ModelState, return_weights: bool = False):
    """Compress encoder output into ``memory_size`` rows.

    Single-head attention with the learned memory matrix as queries:
    ``softmax((M Wq)(H Wk)^T / sqrt(D_t)) (H Wv)``, normalised over text
    positions.

    Returns
    -------
    Tensor or (Tensor, ndarray)
        Memory rows ``(N_m, D_t)``; with ``return_weights`` also the
        ``(N_m, N_w)`` attention matrix.
    """
    d = text_states.shape[1]
    queries = T.matmul(state["memory.M"], state["memory.wq"])
    keys = T.transpose(T.matmul(text_states, state["memory.wk"]))
    values = T.matmul(text_states, state["memory.wv"])
    weights = T.softmax(T.scale(T.matmul(queries, keys), 1.0 / math.sqrt(d)), axis=-1)
    out = T.matmul(weights, values)
    return (out, weights.data) if return_weights else out


def build_prefix(memory: Tensor | None, ligand: Tensor | None, state: ModelState) -> Tensor:
    """Project conditioning rows to decoder width and stack memory-first.

    Both streams absent yields a ``(0, D_p)`` prefix (unconditional decoder).
    """
    rows = []
    if memory is not None:
        rows.append(_linear(memory, state, "adapter.memory.w", "adapter.memory.b"))
    if ligand is not None:
        rows.append(_linear(ligand, state, "adapter.ligand.w", "adapter.ligand.b"))
    if not rows:
        return Tensor(np.zeros((0, state.config.decoder_dim)))
    return rows[0] if len(rows) == 1 else T.concat(rows, axis=0)


def condition(text_ids: Sequence[int] | None, smiles_ids: Sequence[int] | None, state: ModelState,
              rng: np.random.Generator | None = None) -> Tensor:
    """Run whichever encoders the configuration enables and build the prefix."""
    c = state.config
    memory = ligand = None
    if c.use_text_encoder:
        text_states = encode_text(text_ids, state, rng)
        memory = elicit_memory(text_states, state) if c.use_memory_module else text_states
    if c.use_ligand_encoder:
        ligand = encode_ligand(smiles_ids, state, rng)
    return build_prefix(memory, ligand, state)


def decode_logits(prefix: Tensor, protein_ids: Sequence[int], state: ModelState,
                  rng: np.random.Generator | None = None) -> Tensor:
    """Next-residue logits for every position of ``protein_ids``.

    ``protein_ids`` must start with BOS; row ``i`` of the result scores the
    token following position ``i``.
    """
    c = state.config
    if len(protein_ids) == 0:
        raise ValueError("protein input must contain at least BOS")
    if protein_ids[0] != PROTEIN_VOCAB.bos_id:
        raise ValueError("protein input must start with BOS")
    ids = _truncate(protein_ids, c.max_protein_positions, "protein")
    h = _embed(ids, state, "decoder", rng)
    for i in range(c.decoder_layers):
        h = _block(h, state, f"decoder.layers.{i}", c.decoder_heads, c.dropout, rng,
                   prefix=prefix, causal=True)
    return _linear(h, state, "decoder.head.w", "decoder.head.b")


def negative_log_likelihood(example: EncodedTriple, state: ModelState,
                            rng: np.random.Generator | None = None,
                            reduction: str = "sum") -> Tensor:
    """Teacher-forced NLL of the protein given text and ligand.

    BOS predicts the first residue and the last residue predicts EOS; PAD
    targets are ignored.
    """
    prefix = condition(example.text_ids, example.smiles_ids, state, rng)
    ids = list(example.protein_ids)
    limit = state.config.max_protein_positions
    inputs, targets = ids[:-1], ids[1:]
    if len(inputs) > limit:
        inputs, targets = inputs[:limit], targets[:limit]
    logits = decode_logits(prefix, inputs, state, rng)
    return T.cross_entropy(logits, targets, ignore_index=PROTEIN_VOCAB.pad_id, reduction=reduction)
