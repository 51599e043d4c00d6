import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ligprot.generation import (
    EmptyOutputError,
    GenerationRequest,
    generate_batch,
    greedy_decode,
    nucleus_sample,
    nucleus_set,
    sequence_log_prob,
)
from ligprot.tokenizers import PROTEIN_VOCAB
from conftest import make_triples, toy_bundle
from oracles import nucleus_by_enumeration


@pytest.fixture(scope="module")
def untrained():
    return toy_bundle(make_triples(), seed=5)


def request(mode="greedy", **kw):
    base = dict(description="binds ethanol", smiles="CCO", instruction="Please design a protein", max_length=40)
    if mode == "nucleus":
        base.update(nucleus_p=0.4)
    base.update(kw)
    return GenerationRequest(mode=mode, **base)


# ---------------------------------------------------------------------------
# nucleus set


def test_nucleus_top_token_only():
    assert nucleus_set(np.array([0.5, 0.3, 0.15, 0.05]), 0.4).tolist() == [0]


def test_nucleus_full_distribution_at_one():
    assert nucleus_set(np.array([0.5, 0.3, 0.15, 0.05]), 1.0).tolist() == [0, 1, 2, 3]


def test_nucleus_tiny_p_is_argmax():
    probs = np.array([0.1, 0.2, 0.6, 0.1])
    assert nucleus_set(probs, 1e-12).tolist() == [2]


def test_nucleus_includes_boundary_ties():
    assert nucleus_set(np.array([0.4, 0.2, 0.2, 0.2]), 0.5).tolist() == [0, 1, 2, 3]


@settings(max_examples=300, deadline=None)
@given(st.lists(st.integers(1, 6), min_size=1, max_size=8), st.floats(1e-6, 1.0))
def test_nucleus_matches_enumeration(weights, p):
    probs = np.array(weights, dtype=float) / sum(weights)
    assert set(nucleus_set(probs, p).tolist()) == nucleus_by_enumeration(probs, p)


# ---------------------------------------------------------------------------
# requests


def test_request_validation():
    with pytest.raises(ValueError):
        GenerationRequest("d", "C", mode="nucleus")
    with pytest.raises(ValueError):
        GenerationRequest("d", "C", mode="nucleus", nucleus_p=0.0)
    with pytest.raises(ValueError):
        GenerationRequest("d", "C", num_samples=0)
    with pytest.raises(ValueError):
        GenerationRequest("d", "C", max_length=0)
    with pytest.raises(ValueError):
        GenerationRequest("d", "C", mode="beam")


def test_request_from_dict_maps_id():
    r = GenerationRequest.from_dict({"id": 7, "description": "d", "smiles": "C"}, mode="greedy")
    assert r.request_id == "7"


# ---------------------------------------------------------------------------
# greedy


def test_greedy_reproduces_training_proteins(overfit):
    for t in overfit.triples:
        req = GenerationRequest(t.description, t.smiles, t.instruction)
        assert greedy_decode(req, overfit.bundle) == t.protein


def test_greedy_ignores_seed_and_num_samples(untrained):
    a = greedy_decode(request(seed=0), untrained)
    b = greedy_decode(request(seed=99, num_samples=4), untrained)
    assert a == b


def test_greedy_max_length_one(untrained):
    try:
        out = greedy_decode(request(max_length=1), untrained)
    except EmptyOutputError:
        return
    assert len(out) == 1


def test_greedy_only_specials_is_empty_output_error(untrained):
    state = untrained.state.copy()
    bias = state["decoder.head.b"].data
    bias[:] = 0.0
    bias[PROTEIN_VOCAB.eos_id] = 1e6
    bundle = type(untrained)(state, untrained.text_vocab, untrained.smiles_vocab)
    with pytest.raises(EmptyOutputError):
        greedy_decode(request(), bundle)
    [result] = generate_batch([request()], bundle)
    assert result.error.startswith("EmptyOutputError") and result.samples == []


# ---------------------------------------------------------------------------
# nucleus


def test_sampled_tokens_lie_in_nucleus(untrained):
    seen = []

    def check(probs, allowed, token):
        seen.append(token in set(allowed.tolist()))
        assert set(allowed.tolist()) == nucleus_by_enumeration(probs, 0.4)

    seed = 0
    while len(seen) < 1000:
        nucleus_sample(request("nucleus", num_samples=10, max_length=60, seed=seed), untrained, on_step=check)
        seed += 10
    assert all(seen)


def test_tiny_p_equals_greedy(untrained):
    samples = nucleus_sample(request("nucleus", nucleus_p=1e-9, num_samples=3), untrained)
    assert samples == [greedy_decode(request(), untrained)] * 3


def test_five_samples_from_independent_streams(untrained):
    req = request("nucleus", num_samples=5, seed=10)
    samples = nucleus_sample(req, untrained)
    assert len(samples) == 5
    for k in range(5):
        assert nucleus_sample(request("nucleus", num_samples=1, seed=10 + k), untrained) == [samples[k]]


# ---------------------------------------------------------------------------
# batch generation


def test_empty_batch(untrained):
    assert generate_batch([], untrained) == []


def test_batch_collects_errors_without_aborting(untrained):
    results = generate_batch([request(smiles="C!C"), request()], untrained)
    assert results[0].error is not None and results[1].error is None
    assert len(results[1].samples) == 1


def test_logged_log_prob_matches_teacher_forcing(untrained):
    results = generate_batch([request(), request("nucleus", num_samples=3)], untrained)
    assert [len(r.samples) for r in results] == [1, 3]
    for result in results:
        for s in result.samples:
            assert s.log_prob == pytest.approx(sequence_log_prob(result.request, untrained, s.token_ids),
                                               rel=0, abs=1e-9)


def test_records_carry_metadata(untrained):
    [result] = generate_batch([request("nucleus", num_samples=2, request_id="q1", seed=4)], untrained)
    records = result.records()
    assert [r["sample"] for r in records] == [0, 1]
    assert [r["seed"] for r in records] == [4, 5]
    assert all(r["length"] == len(r["sequence"]) and r["request_id"] == "q1" for r in records)
