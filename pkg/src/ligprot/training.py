"""NLL training: warmup/decay schedule, token-budget batching and Adam."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .model import ConfigError, ModelState, negative_log_likelihood
from .tokenizers import EncodedTriple

logger = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "TRAIN_PRESETS",
    "train_preset",
    "lr_at",
    "BatchPlan",
    "make_batches",
    "Adam",
    "StepRecord",
    "TrainReport",
    "batch_loss",
    "evaluate",
    "train",
]


@dataclass(frozen=True)
class TrainConfig:
    peak_lr: float = 1e-3
    warmup_steps: int = 10_000
    total_steps: int = 1_000_000
    tokens_per_batch: int = 16_384
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float | None = 1.0
    seed: int = 0
    checkpoint_interval: int = 0

    def __post_init__(self):
        if self.peak_lr <= 0:
            raise ConfigError("peak_lr", "must be positive")
        if self.total_steps < 0:
            raise ConfigError("total_steps", "must be >= 0")
        if not 0 <= self.warmup_steps <= max(self.total_steps, 0):
            raise ConfigError("warmup_steps", f"{self.warmup_steps} must lie in [0, total_steps={self.total_steps}]")
        if self.tokens_per_batch < 1:
            raise ConfigError("tokens_per_batch", "must be >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("beta1", "Adam betas must lie in [0, 1)")
        if self.eps <= 0:
            raise ConfigError("eps", "must be positive")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("grad_clip", "must be positive or null")
        if self.checkpoint_interval < 0:
            raise ConfigError("checkpoint_interval", "must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(unknown[0], "unknown training config field")
        return cls(**data)


TRAIN_PRESETS = {
    "paper-1B": dict(tokens_per_batch=16_384),
    "paper-3B": dict(tokens_per_batch=6_144),
    "toy": dict(tokens_per_batch=512, warmup_steps=100, total_steps=2_000),
}


def train_preset(name: str, **overrides) -> TrainConfig:
    try:
        base = TRAIN_PRESETS[name]
    except KeyError:
        raise ConfigError("preset", f"unknown training preset {name!r}") from None
    return TrainConfig(**{**base, **overrides})


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear warmup to ``peak_lr`` then linear decay to zero at ``total_steps``."""
    if not 1 <= step <= config.total_steps:
        raise ValueError(f"step {step} outside [1, {config.total_steps}]")
    if step <= config.warmup_steps:
        return config.peak_lr * step / config.warmup_steps
    return config.peak_lr * (config.total_steps - step) / (config.total_steps - config.warmup_steps)


@dataclass
class BatchPlan:
    batches: list[list[int]]
    skipped: list[int]

    def __len__(self) -> int:
        return len(self.batches)


def make_batches(examples: Sequence[EncodedTriple], tokens_per_batch: int, seed: int) -> BatchPlan:
    """Shuffle, then pack examples greedily under a token budget.

    Examples larger than the whole budget are reported in ``skipped``.
    """
    if not examples:
        raise ValueError("cannot batch an empty dataset")
    order = np.random.default_rng(seed).permutation(len(examples))
    batches, skipped = [], []
    current, used = [], 0
    for idx in order.tolist():
        n = examples[idx].n_tokens
        if n > tokens_per_batch:
            logger.warning("example %d has %d tokens, above the %d-token budget; skipped",
                           idx, n, tokens_per_batch)
            skipped.append(idx)
            continue
        if used + n > tokens_per_batch:
            batches.append(current)
            current, used = [], 0
        current.append(idx)
        used += n
    if current:
        batches.append(current)
    return BatchPlan(batches, skipped)


class Adam:
    """Adam with bias correction and optional global-norm clipping."""

    def __init__(self, state: ModelState, config: TrainConfig):
        self.state = state
        self.config = config
        self.m = {name: np.zeros_like(p.data) for name, p in state.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in state.params.items()}

    def load_moments(self, moments: dict[str, dict[str, np.ndarray]]) -> None:
        for name in self.m:
            self.m[name] = moments["m"][name].copy()
            self.v[name] = moments["v"][name].copy()

    def step(self, step: int) -> float:
        """Apply one update at ``lr_at(step)``; returns the pre-clip gradient norm."""
        c = self.config
        grads = {}
        for name, p in self.state.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient in parameter {name!r} at step {step}")
            grads[name] = g
        norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
        factor = c.grad_clip / norm if c.grad_clip is not None and norm > c.grad_clip else 1.0
        lr = lr_at(step, c)
        bc1 = 1.0 - c.beta1 ** step
        bc2 = 1.0 - c.beta2 ** step
        for name, p in self.state.params.items():
            g = grads[name] * factor if factor != 1.0 else grads[name]
            m, v = self.m[name], self.v[name]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)
        return norm


@dataclass
class StepRecord:
    step: int
    loss: float
    lr: float
    grad_norm: float
    tokens: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class TrainReport:
    steps: list[StepRecord] = field(default_factory=list)
    skipped: list[int] = field(default_factory=list)
    final_loss: float | None = None

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.steps]


def batch_loss(examples: Sequence[EncodedTriple], state: ModelState,
               rng: np.random.Generator | None = None) -> T.Tensor:
    """Mean per-target-token NLL over a batch, as a differentiable scalar."""
    total = None
    n_targets = 0
    for ex in examples:
        nll = negative_log_likelihood(ex, state, rng)
        total = nll if total is None else T.add(total, nll)
        n_targets += min(len(ex.protein_ids) - 1, state.config.max_protein_positions)
    return T.scale(total, 1.0 / n_targets)


def evaluate(examples: Sequence[EncodedTriple], state: ModelState) -> float:
    """Mean per-token NLL over ``examples`` without recording a tape."""
    with T.no_grad():
        return batch_loss(examples, state).item()


def _batch_stream(examples, config: TrainConfig) -> Iterator[list[int]]:
    epoch = 0
    while True:
        plan = make_batches(examples, config.tokens_per_batch, config.seed + epoch)
        if not plan.batches:
            raise ValueError("every example exceeds tokens_per_batch")
        logger.debug("epoch %d: %d batches", epoch, len(plan))
        yield from plan.batches
        epoch += 1


def train(
    examples: Sequence[EncodedTriple],
    state: ModelState,
    config: TrainConfig,
    *,
    optimizer: Adam | None = None,
    start_step: int = 0,
    vocab_hashes: dict[str, str] | None = None,
    checkpoint_dir: str | Path | None = None,
    log_path: str | Path | None = None,
    callback: Callable[[StepRecord], None] | None = None,
) -> TrainReport:
    """Minimise batch NLL from ``start_step + 1`` through ``config.total_steps``.

    Batches are drawn from epochs reshuffled with ``seed + epoch``, so a run
    resumed from a checkpoint at step ``k`` (with its optimizer moments) sees
    exactly the batches the uninterrupted run would have.
    """
    if not examples:
        raise ValueError("empty training set")
    longest = max(ex.n_tokens for ex in examples)
    if longest > config.tokens_per_batch:
        logger.warning("longest example (%d tokens) exceeds tokens_per_batch=%d",
                       longest, config.tokens_per_batch)
    optimizer = optimizer or Adam(state, config)
    report = TrainReport(skipped=make_batches(examples, config.tokens_per_batch, config.seed).skipped)
    if config.total_steps <= start_step:
        report.final_loss = evaluate(examples, state)
        return report

    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    log_fh = open(log_path, "a", encoding="utf-8") if log_path is not None else None
    stream = _batch_stream(examples, config)
    for _ in range(start_step):
        next(stream)
    try:
        for step in range(start_step + 1, config.total_steps + 1):
            batch = [examples[i] for i in next(stream)]
            rng = np.random.default_rng([config.seed, step]) if state.config.dropout > 0 else None
            state.zero_grad()
            loss = batch_loss(batch, state, rng)
            loss.backward()
            grad_norm = optimizer.step(step)
            record = StepRecord(step, loss.item(), lr_at(step, config), grad_norm,
                                sum(ex.n_tokens for ex in batch))
            if not math.isfinite(record.loss):
                raise FloatingPointError(f"non-finite loss at step {step}")
            report.steps.append(record)
            if log_fh is not None:
                log_fh.write(record.to_json() + "\n")
            if callback is not None:
                callback(record)
            if ckpt_dir is not None and config.checkpoint_interval and step % config.checkpoint_interval == 0:
                save_checkpoint(ckpt_dir / f"checkpoint-{step:07d}.bin", state, vocab_hashes or {},
                                step=step, optimizer=optimizer, train_config=config.to_dict())
    finally:
        if log_fh is not None:
            log_fh.close()
    state.zero_grad()
    if ckpt_dir is not None:
        save_checkpoint(ckpt_dir / "checkpoint.bin", state, vocab_hashes or {},
                        step=config.total_steps, optimizer=optimizer, train_config=config.to_dict())
    report.final_loss = evaluate(examples, state)
    return report
