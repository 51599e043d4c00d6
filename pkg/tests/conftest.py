import sys
import time
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ligprot.generation import ModelBundle  # noqa: E402
from ligprot.model import init_state, preset  # noqa: E402
from ligprot.tokenizers import AMINO_ACIDS, build_vocab, encode_triple  # noqa: E402
from ligprot.training import train, train_preset  # noqa: E402

OVERFIT_LIGANDS = ["CCO", "c1ccccc1O", "C[NH4+].Cl", "OC(=O)CCC(=O)O", "Nc1ncnc2c1ncn2",
                   "CC(=O)Oc1ccccc1C(=O)O", "O=P(O)(O)O", "C1CCNCC1"]
OVERFIT_DESCRIPTIONS = ["binds ethanol", "binds phenol and catalyzes oxidation", "transports ammonium",
                        "binds succinate", "binds adenine nucleotide", "hydrolyzes aspirin",
                        "binds phosphate ion", "binds piperidine ring"]


def make_triples(n=8, seed=7, lengths=(16, 30)):
    rng = np.random.default_rng(seed)
    return [
        SimpleNamespace(instruction="Please design a protein", description=d, smiles=s,
                        protein="".join(rng.choice(list(AMINO_ACIDS), int(rng.integers(*lengths)))))
        for d, s in zip(OVERFIT_DESCRIPTIONS[:n], OVERFIT_LIGANDS[:n])
    ]


# cluster-size profile: 2 families of 11, 10 of 6, 21 of 3, 55 singletons (200 sequences)
FAMILY_SIZES = [11] * 2 + [6] * 10 + [3] * 21 + [1] * 55
SCALED_STRATA = ((1, 2), (3, 5), (6, 10), (11, None))


def family_corpus(seed=0, sizes=FAMILY_SIZES, lengths=(100, 140), mutation=0.10):
    """Triples whose proteins descend from random ancestors by point mutation.

    Odd families share one of seven ligands; even families get a ligand of their own.
    """
    from ligprot.datakit import Triple

    rng = np.random.default_rng(seed)
    alphabet = list(AMINO_ACIDS)
    triples = []
    for f, size in enumerate(sizes):
        ancestor = rng.choice(alphabet, int(rng.integers(*lengths)))
        ligand = f"C{'C' * (f % 7)}O" if f % 2 else f"N{'C' * (f // 2 + 1)}S"
        for _ in range(size):
            seq = ancestor.copy()
            hit = rng.random(len(seq)) < mutation
            seq[hit] = rng.choice(alphabet, int(hit.sum()))
            triples.append(Triple(f"r{len(triples):04d}", f"family {f}", ligand, "".join(seq),
                                  instruction="Please design a protein"))
    return triples


def toy_bundle(triples, seed=0, **overrides):
    """Untrained toy model with vocabularies built from ``triples``."""
    text_vocab, smiles_vocab = build_vocab(triples)
    config = preset("toy", text_vocab_size=len(text_vocab), smiles_vocab_size=len(smiles_vocab), **overrides)
    return ModelBundle(init_state(config, seed=seed), text_vocab, smiles_vocab)


@pytest.fixture(scope="session")
def corpus():
    return make_triples()


@pytest.fixture(scope="session")
def overfit(corpus):
    """Toy model trained with the toy schedule (2,000 steps) on the 8-triple corpus."""
    bundle = toy_bundle(corpus)
    examples = [encode_triple(t, bundle.text_vocab, bundle.smiles_vocab) for t in corpus]
    start = time.perf_counter()
    report = train(examples, bundle.state, train_preset("toy"))
    elapsed = time.perf_counter() - start
    return SimpleNamespace(bundle=bundle, examples=examples, report=report, triples=corpus, seconds=elapsed)


# acceptance criteria append (number, title, passed, detail) here
ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} [{number:2d}] {title}: {detail}")
