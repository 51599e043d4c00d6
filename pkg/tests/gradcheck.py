"""Full-model gradient check against central finite differences."""

from __future__ import annotations

from types import SimpleNamespace

import numpy as np

from ligprot import tensor as T
from ligprot.model import init_state, negative_log_likelihood, preset
from ligprot.tokenizers import AMINO_ACIDS, EncodedTriple
from oracles import central_difference, relative_error

TEXT_VOCAB, SMILES_VOCAB = 40, 20


def random_example(rng, text_len=(3, 7), smiles_len=(3, 6), protein_len=(2, 6)) -> EncodedTriple:
    """Random token ids with BOS/EOS framing (ids 1 and 2 in every vocabulary)."""
    def body(lo_hi, vocab):
        return [int(x) for x in rng.integers(4, vocab, int(rng.integers(*lo_hi)))]

    residues = [int(x) for x in rng.integers(4, 4 + len(AMINO_ACIDS), int(rng.integers(*protein_len)))]
    return EncodedTriple(tuple([1] + body(text_len, TEXT_VOCAB) + [2]),
                         tuple([1] + body(smiles_len, SMILES_VOCAB) + [2]),
                         tuple([1] + residues + [2]))


def _probe_sites(state, example, n, rng):
    """Random (name, index) sites; embedding tables only at rows the input uses."""
    used = {"text.embed": example.text_ids, "ligand.embed": example.smiles_ids,
            "decoder.embed": example.protein_ids[:-1],
            "text.pos": range(len(example.text_ids)), "ligand.pos": range(len(example.smiles_ids)),
            "decoder.pos": range(len(example.protein_ids) - 1)}
    names = sorted(state.params)
    sites = []
    while len(sites) < n:
        name = names[int(rng.integers(len(names)))]
        shape = state[name].shape
        if name in used:
            rows = sorted(set(used[name]))
            idx = (rows[int(rng.integers(len(rows)))],) + tuple(int(rng.integers(s)) for s in shape[1:])
        else:
            idx = tuple(int(rng.integers(s)) for s in shape)
        sites.append((name, idx))
    return sites


def model_gradient_check(seed: int, n_params: int = 64, step: float = 1e-5, **config_overrides):
    """Worst relative error between analytic and numeric gradients for one draw."""
    rng = np.random.default_rng(seed)
    config = preset("toy", text_vocab_size=TEXT_VOCAB, smiles_vocab_size=SMILES_VOCAB, **config_overrides)
    state = init_state(config, seed=seed)
    example = random_example(rng)

    state.zero_grad()
    negative_log_likelihood(example, state).backward()

    def loss():
        with T.no_grad():
            return negative_log_likelihood(example, state).item()

    worst = 0.0
    details = []
    for name, idx in _probe_sites(state, example, n_params, rng):
        analytic = state[name].grad[idx] if state[name].grad is not None else 0.0
        numeric = central_difference(loss, state[name].data, idx, step)
        err = relative_error(analytic, numeric)
        details.append((name, idx, analytic, numeric, err))
        worst = max(worst, err)
    return SimpleNamespace(worst=worst, details=details)
