"""Ligand- and text-conditioned protein sequence design.

A small numpy autodiff core drives a text encoder, a memory module that
compresses function descriptions, a SMILES encoder and a prefix-conditioned
protein decoder. Around the model sit tokenizers, training, decoding,
alignment metrics, dataset curation and a command-line interface.
"""

__version__ = "0.1.0"

from .generation import GenerationRequest, ModelBundle, greedy_decode, nucleus_sample
from .metrics import diversity, global_align, identity, novelty
from .model import ModelConfig, init_state, preset
from .training import TrainConfig, lr_at, train

__all__ = [
    "__version__",
    "GenerationRequest",
    "ModelBundle",
    "greedy_decode",
    "nucleus_sample",
    "diversity",
    "global_align",
    "identity",
    "novelty",
    "ModelConfig",
    "init_state",
    "preset",
    "TrainConfig",
    "lr_at",
    "train",
]
