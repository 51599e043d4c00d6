"""Estimator-style wrappers around the model and the identity clustering.

These follow the scikit-learn conventions (constructor stores parameters
verbatim, learned state ends in an underscore, ``get_params``/``set_params``
via :class:`~sklearn.base.BaseEstimator`) so they compose with its tooling.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.utils.validation import check_is_fitted

from .datakit import cluster_sequences
from .generation import GenerationRequest, ModelBundle, _greedy_sample, _nucleus_samples
from .model import init_state, preset
from .tokenizers import AMINO_ACIDS, VocabCaps, build_vocab, encode_triple
from .training import TrainConfig, TrainReport, evaluate, train

__all__ = ["Condition", "check_conditions", "check_proteins", "ProteinDesigner", "IdentityClusterer"]

_RESIDUES = frozenset(AMINO_ACIDS)


@dataclass(frozen=True)
class Condition:
    description: str
    smiles: str
    instruction: str = ""
    protein: str = ""


def _get(item: Any, name: str, default=None):
    if isinstance(item, dict):
        return item.get(name, default)
    return getattr(item, name, default)


def check_conditions(X) -> list[Condition]:
    """Coerce ``X`` to conditions.

    Accepts dicts or objects with ``description`` and ``smiles`` (and
    optionally ``instruction`` and ``protein``), or ``(description, smiles)``
    pairs.
    """
    if isinstance(X, (str, bytes)) or not hasattr(X, "__len__"):
        raise TypeError("X must be a sequence of conditions")
    if len(X) == 0:
        raise ValueError("X is empty")
    out = []
    for k, item in enumerate(X):
        if isinstance(item, (tuple, list)):
            if len(item) != 2:
                raise ValueError(f"X[{k}]: expected (description, smiles)")
            item = {"description": item[0], "smiles": item[1]}
        description, smiles = _get(item, "description"), _get(item, "smiles")
        if not isinstance(description, str) or not description.strip():
            raise ValueError(f"X[{k}]: missing or empty description")
        if not isinstance(smiles, str) or not smiles:
            raise ValueError(f"X[{k}]: missing or empty smiles")
        out.append(Condition(description, smiles, _get(item, "instruction", "") or "",
                             _get(item, "protein", "") or ""))
    return out


def check_proteins(y, n: int | None = None) -> list[str]:
    proteins = [str(p) for p in y]
    if n is not None and len(proteins) != n:
        raise ValueError(f"y has {len(proteins)} entries but X has {n}")
    for k, p in enumerate(proteins):
        if not p or not set(p) <= _RESIDUES:
            raise ValueError(f"y[{k}]: protein must be a non-empty string over {AMINO_ACIDS}")
    return proteins


class ProteinDesigner(BaseEstimator):
    """Text- and ligand-conditioned protein generator.

    Parameters
    ----------
    preset : str
        Architecture preset (``"toy"``, ``"paper-1B"``, ``"paper-3B"``).
    memory_size : int or None
        Number of memory rows; ``None`` keeps the preset value.
    use_text_encoder, use_ligand_encoder, use_memory_module : bool
        Ablation switches.
    peak_lr, warmup_steps, total_steps, tokens_per_batch, grad_clip
        Optimisation settings.
    text_vocab_cap, smiles_vocab_cap : int or None
        Vocabulary size limits (including special tokens).
    nucleus_p, num_samples, max_length
        Decoding settings for :meth:`sample` and :meth:`predict`.
    random_state : int
        Seed for initialisation, batching and sampling.
    """

    def __init__(self, preset="toy", memory_size=None, use_text_encoder=True, use_ligand_encoder=True,
                 use_memory_module=True, peak_lr=1e-3, warmup_steps=100, total_steps=2000,
                 tokens_per_batch=512, grad_clip=1.0, text_vocab_cap=None, smiles_vocab_cap=None,
                 nucleus_p=0.4, num_samples=5, max_length=512, random_state=0):
        self.preset = preset
        self.memory_size = memory_size
        self.use_text_encoder = use_text_encoder
        self.use_ligand_encoder = use_ligand_encoder
        self.use_memory_module = use_memory_module
        self.peak_lr = peak_lr
        self.warmup_steps = warmup_steps
        self.total_steps = total_steps
        self.tokens_per_batch = tokens_per_batch
        self.grad_clip = grad_clip
        self.text_vocab_cap = text_vocab_cap
        self.smiles_vocab_cap = smiles_vocab_cap
        self.nucleus_p = nucleus_p
        self.num_samples = num_samples
        self.max_length = max_length
        self.random_state = random_state

    def _model_config(self):
        overrides = dict(use_text_encoder=self.use_text_encoder, use_ligand_encoder=self.use_ligand_encoder,
                         use_memory_module=self.use_memory_module,
                         text_vocab_size=len(self.text_vocab_), smiles_vocab_size=len(self.smiles_vocab_))
        if self.memory_size is not None:
            overrides["memory_size"] = self.memory_size
        return preset(self.preset, **overrides)

    def _train_config(self) -> TrainConfig:
        return TrainConfig(peak_lr=self.peak_lr, warmup_steps=self.warmup_steps, total_steps=self.total_steps,
                           tokens_per_batch=self.tokens_per_batch, grad_clip=self.grad_clip,
                           seed=self.random_state)

    def _records(self, X, y):
        conditions = check_conditions(X)
        proteins = check_proteins([c.protein for c in conditions] if y is None else y, len(conditions))
        return [Condition(c.description, c.smiles, c.instruction, p) for c, p in zip(conditions, proteins)]

    def fit(self, X, y=None):
        """Build vocabularies, initialise, and train on (condition, protein) pairs.

        ``y`` may be omitted when every item of ``X`` carries a ``protein``.
        """
        records = self._records(X, y)
        self.text_vocab_, self.smiles_vocab_ = build_vocab(
            records, VocabCaps(text=self.text_vocab_cap, smiles=self.smiles_vocab_cap))
        self.state_ = init_state(self._model_config(), seed=self.random_state)
        examples = [encode_triple(r, self.text_vocab_, self.smiles_vocab_) for r in records]
        self.report_: TrainReport = train(examples, self.state_, self._train_config())
        self.bundle_ = ModelBundle(self.state_, self.text_vocab_, self.smiles_vocab_)
        return self

    def _request(self, c: Condition, k: int, mode: str) -> GenerationRequest:
        return GenerationRequest(c.description, c.smiles, c.instruction, mode=mode,
                                 nucleus_p=self.nucleus_p if mode == "nucleus" else None,
                                 num_samples=self.num_samples if mode == "nucleus" else 1,
                                 max_length=self.max_length, seed=self.random_state, request_id=str(k))

    def predict(self, X) -> np.ndarray:
        """Greedy designs, one per condition."""
        check_is_fitted(self, "state_")
        return np.array([_greedy_sample(self._request(c, k, "greedy"), self.bundle_).sequence
                         for k, c in enumerate(check_conditions(X))], dtype=object)

    def sample(self, X) -> list[list[str]]:
        """``num_samples`` nucleus samples per condition."""
        check_is_fitted(self, "state_")
        return [[s.sequence for s in _nucleus_samples(self._request(c, k, "nucleus"), self.bundle_)]
                for k, c in enumerate(check_conditions(X))]

    def score(self, X, y=None) -> float:
        """Negative mean per-token NLL of the reference proteins (higher is better)."""
        check_is_fitted(self, "state_")
        records = self._records(X, y)
        examples = [encode_triple(r, self.text_vocab_, self.smiles_vocab_) for r in records]
        return -evaluate(examples, self.state_)


class IdentityClusterer(ClusterMixin, BaseEstimator):
    """Greedy representative clustering at a global-alignment identity threshold.

    Attributes
    ----------
    labels_ : ndarray of int
        Cluster index per input sequence.
    representative_indices_ : ndarray of int
        Input index of each cluster's representative.
    """

    def __init__(self, threshold=0.30, prefilter=True):
        self.threshold = threshold
        self.prefilter = prefilter

    def fit(self, X: Sequence[str], y=None):
        seqs = check_proteins(X)
        width = len(str(len(seqs)))
        ids = {f"{k:0{width}d}": s for k, s in enumerate(seqs)}
        clusters = cluster_sequences(ids, self.threshold, prefilter=self.prefilter)
        self.labels_ = np.empty(len(seqs), dtype=int)
        for c in clusters:
            for m in c.members:
                self.labels_[int(m)] = c.cluster_id
        self.representative_indices_ = np.array([int(c.representative) for c in clusters], dtype=int)
        self.n_clusters_ = len(clusters)
        return self
