import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from ligprot.datakit import cluster_sequences
from ligprot.estimators import IdentityClusterer, ProteinDesigner, check_conditions
from ligprot.tokenizers import AMINO_ACIDS
from conftest import make_triples

TRIPLES = make_triples(3, seed=11, lengths=(6, 10))
X = [{"description": t.description, "smiles": t.smiles, "instruction": t.instruction} for t in TRIPLES]
Y = [t.protein for t in TRIPLES]


@pytest.fixture(scope="module")
def fitted():
    return ProteinDesigner(total_steps=60, warmup_steps=5, tokens_per_batch=120, num_samples=2,
                           max_length=20, random_state=3).fit(X, Y)


def test_params_round_trip_through_clone():
    est = ProteinDesigner(memory_size=32, use_text_encoder=False, peak_lr=5e-4)
    copy = clone(est)
    assert copy.get_params() == est.get_params()
    assert copy.set_params(total_steps=10).total_steps == 10


def test_unfitted_predict_raises():
    with pytest.raises(NotFittedError):
        ProteinDesigner().predict(X)


def test_fit_trains_and_improves_score(fitted):
    losses = fitted.report_.losses
    assert len(losses) == 60 and losses[-1] < losses[0]
    assert fitted.score(X, Y) == pytest.approx(-fitted.report_.final_loss)


def test_predict_returns_one_design_per_condition(fitted):
    designs = fitted.predict(X)
    assert designs.dtype == object and designs.shape == (3,)
    assert all(set(d) <= set(AMINO_ACIDS) and 1 <= len(d) <= 20 for d in designs)
    assert list(designs) == list(fitted.predict(X))


def test_sample_returns_num_samples(fitted):
    samples = fitted.sample(X[:2])
    assert [len(s) for s in samples] == [2, 2]


def test_condition_formats_are_equivalent():
    tuples = [(x["description"], x["smiles"]) for x in X]
    assert check_conditions(tuples)[0].description == X[0]["description"]
    with pytest.raises(ValueError):
        check_conditions([("only one",)])
    with pytest.raises(ValueError):
        check_conditions([])


def test_fit_rejects_bad_proteins():
    with pytest.raises(ValueError):
        ProteinDesigner(total_steps=1, warmup_steps=0).fit(X, ["MK", "MK", "MZ"])
    with pytest.raises(ValueError):
        ProteinDesigner(total_steps=1, warmup_steps=0).fit(X, ["MK"])


@pytest.mark.parametrize("overrides", [{"use_text_encoder": False}, {"use_ligand_encoder": False},
                                       {"use_memory_module": False}, {"memory_size": 32}])
def test_ablations_fit(overrides):
    est = ProteinDesigner(total_steps=3, warmup_steps=1, tokens_per_batch=120, **overrides).fit(X, Y)
    assert np.isfinite(est.report_.final_loss)


def test_identity_clusterer_labels():
    seqs = ["MKTAYIAKQR", "MKTAYIAKQK", "GGGGWWWW"]
    model = IdentityClusterer().fit(seqs)
    assert model.labels_.tolist() == [0, 0, 1]
    assert model.representative_indices_.tolist() == [0, 2] and model.n_clusters_ == 2
    assert model.fit_predict(seqs).tolist() == [0, 0, 1]


def test_identity_clusterer_agrees_with_function():
    rng = np.random.default_rng(0)
    seqs = ["".join(rng.choice(list("ACDEG"), int(rng.integers(5, 15)))) for _ in range(12)]
    model = IdentityClusterer(threshold=0.5).fit(seqs)
    clusters = cluster_sequences({f"{k:02d}": s for k, s in enumerate(seqs)}, 0.5)
    assert model.n_clusters_ == len(clusters)
    for c in clusters:
        assert {model.labels_[int(m)] for m in c.members} == {c.cluster_id}
