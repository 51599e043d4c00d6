"""Greedy and nucleus decoding of protein sequences."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .model import ModelState, condition, decode_logits
from .tokenizers import PROTEIN_VOCAB, Vocab, tokenize_smiles, tokenize_text

logger = logging.getLogger(__name__)

__all__ = [
    "EmptyOutputError",
    "GenerationRequest",
    "ModelBundle",
    "Sample",
    "GenerationResult",
    "nucleus_set",
    "greedy_decode",
    "nucleus_sample",
    "generate_batch",
    "sequence_log_prob",
]

MODES = ("greedy", "nucleus")


class EmptyOutputError(RuntimeError):
    """Decoding produced no residues."""


@dataclass(frozen=True)
class GenerationRequest:
    description: str
    smiles: str
    instruction: str = ""
    mode: str = "greedy"
    nucleus_p: float | None = None
    num_samples: int = 1
    max_length: int = 512
    seed: int = 0
    request_id: str = "request"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "nucleus":
            if self.nucleus_p is None:
                raise ValueError("nucleus mode requires nucleus_p")
            if not 0.0 < self.nucleus_p <= 1.0:
                raise ValueError(f"nucleus_p must lie in (0, 1], got {self.nucleus_p}")
        if self.num_samples < 1:
            raise ValueError("num_samples must be >= 1")
        if self.max_length < 1:
            raise ValueError("max_length must be >= 1")

    @classmethod
    def from_dict(cls, data: dict, **defaults) -> GenerationRequest:
        merged = {**defaults, **data}
        if "id" in merged:
            merged["request_id"] = str(merged.pop("id"))
        allowed = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in merged.items() if k in allowed})


@dataclass
class ModelBundle:
    """A model state with the vocabularies its embeddings were sized for."""

    state: ModelState
    text_vocab: Vocab
    smiles_vocab: Vocab

    @property
    def vocab_hashes(self) -> dict[str, str]:
        return {"text": self.text_vocab.content_hash, "smiles": self.smiles_vocab.content_hash}

    def prefix_for(self, request: GenerationRequest) -> T.Tensor:
        text_ids = tokenize_text(request.instruction, request.description, self.text_vocab)
        smiles_ids = tokenize_smiles(request.smiles, self.smiles_vocab)
        with T.no_grad():
            return condition(text_ids, smiles_ids, self.state)


@dataclass
class Sample:
    sequence: str
    token_ids: list[int]
    log_prob: float
    seed: int | None = None

    @property
    def length(self) -> int:
        return len(self.sequence)


@dataclass
class GenerationResult:
    request: GenerationRequest
    samples: list[Sample] = field(default_factory=list)
    error: str | None = None

    def records(self) -> list[dict]:
        """Line-delimited metadata records, one per sample (or one error record)."""
        base = {"request_id": self.request.request_id, "mode": self.request.mode}
        if self.error is not None:
            return [{**base, "error": self.error}]
        return [
            {**base, "sample": k, "seed": s.seed, "sequence": s.sequence, "length": s.length,
             "log_prob": s.log_prob, "token_ids": s.token_ids}
            for k, s in enumerate(self.samples)
        ]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records())


def _log_softmax(row: np.ndarray) -> np.ndarray:
    shifted = row - row.max()
    return shifted - np.log(np.exp(shifted).sum())


def nucleus_set(probs: np.ndarray, p: float) -> np.ndarray:
    """Token ids of the smallest top mass reaching ``p``.

    Tokens tied with the boundary probability are all included, so the set
    does not depend on how the sort orders equal values.
    """
    order = np.argsort(-probs, kind="stable")
    cumulative = np.cumsum(probs[order])
    cut = int(np.searchsorted(cumulative, p, side="left"))
    cut = min(cut, len(order) - 1)
    boundary = probs[order[cut]]
    return np.sort(np.nonzero(probs >= boundary)[0])


def _decode(bundle: ModelBundle, prefix: T.Tensor, max_length: int,
            choose: Callable[[np.ndarray], int]) -> tuple[list[int], float]:
    state = bundle.state
    eos = PROTEIN_VOCAB.eos_id
    limit = min(max_length, state.config.max_protein_positions - 1)
    if limit < max_length:
        logger.info("max_length %d capped at %d by decoder positions", max_length, limit)
    ids = [PROTEIN_VOCAB.bos_id]
    log_prob = 0.0
    with T.no_grad():
        while len(ids) - 1 < limit:
            logits = decode_logits(prefix, ids, state).data[-1]
            log_p = _log_softmax(logits)
            token = choose(log_p)
            log_prob += float(log_p[token])
            if token == eos:
                return ids[1:] + [eos], log_prob
            ids.append(token)
    return ids[1:], log_prob


def _finish(tokens: list[int], log_prob: float, seed: int | None) -> Sample:
    sequence = PROTEIN_VOCAB.decode(tokens)
    if not sequence:
        raise EmptyOutputError("decoder produced no residues")
    return Sample(sequence, tokens, log_prob, seed)


def _greedy_sample(request: GenerationRequest, bundle: ModelBundle) -> Sample:
    prefix = bundle.prefix_for(request)
    # np.argmax returns the first maximum, i.e. the lowest token id on ties
    tokens, log_prob = _decode(bundle, prefix, request.max_length, lambda lp: int(np.argmax(lp)))
    return _finish(tokens, log_prob, None)


def greedy_decode(request: GenerationRequest, bundle: ModelBundle) -> str:
    """Argmax decoding from BOS until EOS or ``max_length`` residues."""
    return _greedy_sample(request, bundle).sequence


def _nucleus_samples(request: GenerationRequest, bundle: ModelBundle,
                     on_step: Callable[[np.ndarray, np.ndarray, int], None] | None = None) -> list[Sample]:
    p = request.nucleus_p if request.nucleus_p is not None else 1.0
    prefix = bundle.prefix_for(request)
    samples = []
    for k in range(request.num_samples):
        rng = np.random.default_rng(request.seed + k)

        def choose(log_p, rng=rng):
            probs = np.exp(log_p)
            allowed = nucleus_set(probs, p)
            weights = probs[allowed] / probs[allowed].sum()
            token = int(allowed[min(np.searchsorted(np.cumsum(weights), rng.random(), side="right"),
                                    len(allowed) - 1)])
            if on_step is not None:
                on_step(probs, allowed, token)
            return token

        tokens, log_prob = _decode(bundle, prefix, request.max_length, choose)
        samples.append(_finish(tokens, log_prob, request.seed + k))
    return samples


def nucleus_sample(request: GenerationRequest, bundle: ModelBundle,
                   on_step: Callable[[np.ndarray, np.ndarray, int], None] | None = None) -> list[str]:
    """``num_samples`` independent top-p samples, stream ``k`` seeded with ``seed + k``.

    ``on_step(probs, nucleus_ids, chosen)`` is called for every sampled token.
    """
    return [s.sequence for s in _nucleus_samples(request, bundle, on_step)]


def generate_batch(requests: Sequence[GenerationRequest], bundle: ModelBundle) -> list[GenerationResult]:
    """Run each request; failures are recorded on the result, not raised."""
    results = []
    for request in requests:
        result = GenerationResult(request)
        try:
            if request.mode == "greedy":
                result.samples = [_greedy_sample(request, bundle)]
            else:
                result.samples = _nucleus_samples(request, bundle)
        except (EmptyOutputError, ValueError) as exc:
            result.error = f"{type(exc).__name__}: {exc}"
        results.append(result)
    return results


def sequence_log_prob(request: GenerationRequest, bundle: ModelBundle, tokens: Sequence[int]) -> float:
    """Teacher-forced log-probability of emitted ``tokens`` (BOS excluded)."""
    prefix = bundle.prefix_for(request)
    inputs = [PROTEIN_VOCAB.bos_id, *tokens[:-1]]
    with T.no_grad():
        logits = decode_logits(prefix, inputs, bundle.state).data
    return float(sum(_log_softmax(row)[tok] for row, tok in zip(logits, tokens)))

