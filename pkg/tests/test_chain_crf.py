# tests/test_chain_crf.py
import itertools

import numpy as np
import pytest
from scipy.special import logsumexp

from app.core.config import FeatureConfig
from app.services.chain_crf import (ChainModel, ChainObjective, bio_tags, build_candidates, crf_objective_and_gradient,
                                    decode_spans, entity_spans, forward_backward, generate_candidates, gold_tag_sequence,
                                    kbest, kbest_decode, marginals, path_score, span_type_log_marginal, tag_segments,
                                    viterbi, viterbi_decode)
from app.services.utils.corpus import Span
from app.services.utils.features import HashedSpace
from app.services.utils.lbfgs import check_gradient
from conftest import make_doc


def all_paths(emissions, transitions):
    L, T = emissions.shape
    scored = [(p, path_score(emissions, transitions, p)) for p in itertools.product(range(T), repeat=L)]
    return sorted(scored, key=lambda x: -x[1])


@pytest.fixture
def random_chain():
    rng = np.random.default_rng(3)
    return rng.normal(size=(4, 5)), rng.normal(size=(5, 5))


def test_bio_layout():
    assert bio_tags(("NONE", "PER", "GPE")) == ("O", "B-PER", "I-PER", "B-GPE", "I-GPE")


def test_zero_weights_give_uniform_marginals():
    lat = forward_backward(np.zeros((3, 3)), np.zeros((3, 3)))
    assert np.allclose(lat.node_marginals(), 1.0 / 3)
    assert lat.log_z == pytest.approx(3 * np.log(3))


def test_single_token_span_marginal():
    lat = forward_backward(np.zeros((1, 3)), np.zeros((3, 3)))
    assert lat.span_log_marginal(0, 1, 1, 2) == pytest.approx(np.log(1 / 3))
    scores = lat.label_log_marginals(0, 1)
    # NONE takes the O and I-at-start paths
    assert np.exp(scores) == pytest.approx([2 / 3, 1 / 3])


def test_partition_matches_enumeration(random_chain):
    E, A = random_chain
    lat = forward_backward(E, A)
    brute = logsumexp([s for _, s in all_paths(E, A)])
    assert lat.log_z == pytest.approx(brute)
    assert lat.log_z_backward == pytest.approx(brute)
    assert lat.node_marginals().sum(axis=1) == pytest.approx(np.ones(4))
    assert lat.edge_marginals().sum(axis=(1, 2)) == pytest.approx(np.ones(3))


def test_span_marginal_matches_enumeration(random_chain):
    E, A = random_chain
    lat = forward_backward(E, A)
    paths = all_paths(E, A)
    log_z = logsumexp([s for _, s in paths])
    # B-l0 at 1, I-l0 at 2, anything but I-l0 at 3
    hits = [s for p, s in paths if p[1] == 1 and p[2] == 2 and p[3] != 2]
    assert lat.span_log_marginal(1, 3, 1, 2) == pytest.approx(logsumexp(hits) - log_z)


def test_viterbi_is_best_path(random_chain):
    E, A = random_chain
    path, score = viterbi_decode(E, A)
    best_path, best_score = all_paths(E, A)[0]
    assert path == best_path
    assert score == pytest.approx(best_score)


def test_kbest_matches_enumeration(random_chain):
    E, A = random_chain
    top = kbest_decode(E, A, 7)
    expected = all_paths(E, A)[:7]
    assert [s for _, s in top] == pytest.approx([s for _, s in expected])
    assert len({p for p, _ in top}) == 7
    assert kbest_decode(E, A, 1)[0][0] == viterbi_decode(E, A)[0]


@pytest.mark.parametrize("seed", range(200))
def test_chain_inference_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    L, T = int(rng.integers(1, 7)), int(rng.integers(1, 5))
    if seed < 4:
        L = 1
    E, A = rng.normal(scale=2.0, size=(L, T)), rng.normal(scale=2.0, size=(T, T))
    paths = all_paths(E, A)
    scores = np.array([s for _, s in paths])
    log_z = logsumexp(scores)
    probs = np.exp(scores - log_z)

    lat = forward_backward(E, A)
    assert abs(lat.log_z - log_z) <= 1e-9
    nodes = np.zeros((L, T))
    edges = np.zeros((max(L - 1, 0), T, T))
    for (p, _), w in zip(paths, probs):
        nodes[np.arange(L), p] += w
        for t in range(L - 1):
            edges[t, p[t], p[t + 1]] += w
    np.testing.assert_allclose(lat.node_marginals(), nodes, rtol=0, atol=1e-9)
    if L > 1:
        np.testing.assert_allclose(lat.edge_marginals(), edges, rtol=0, atol=1e-9)

    path, score = viterbi_decode(E, A)
    assert path == paths[0][0]
    assert abs(score - paths[0][1]) <= 1e-9
    k = int(rng.integers(1, 9))
    top = kbest_decode(E, A, k)
    np.testing.assert_allclose([s for _, s in top], scores[:k], rtol=0, atol=1e-9)
    assert [p for p, _ in top] == [p for p, _ in paths[:k]]

    if T >= 3:
        start = int(rng.integers(0, L))
        end = int(rng.integers(start + 1, L + 1))
        hits = [s for p, s in paths
                if p[start] == 1 and all(x == 2 for x in p[start + 1:end]) and (end == L or p[end] != 2)]
        expected = logsumexp(hits) - log_z
        assert abs(lat.span_log_marginal(start, end, 1, 2) - expected) <= 1e-9


def test_all_outside_chain():
    rng = np.random.default_rng(0)
    E, A = rng.normal(size=(4, 3)), rng.normal(size=(3, 3))
    E[:, 1:] = -1e30
    lat = forward_backward(E, A)
    assert lat.log_z == pytest.approx(E[:, 0].sum() + 3 * A[0, 0])
    np.testing.assert_allclose(lat.node_marginals(), np.tile([1.0, 0.0, 0.0], (4, 1)), atol=1e-12)
    assert viterbi_decode(E, A)[0] == (0, 0, 0, 0)
    assert np.exp(lat.label_log_marginals(1, 2))[0] == pytest.approx(1.0)


def test_kbest_shorter_than_k():
    top = kbest_decode(np.zeros((1, 3)), np.zeros((3, 3)), 10)
    assert len(top) == 3
    with pytest.raises(ValueError):
        kbest_decode(np.zeros((1, 3)), np.zeros((3, 3)), 0)


def test_tag_segments():
    # O B-0 I-0 B-1 I-0 I-1
    assert tag_segments([0, 1, 2, 3, 2, 4]) == [(1, 3, 0), (3, 4, 1)]
    assert tag_segments([1, 1, 2]) == [(0, 1, 0), (1, 3, 0)]


def test_gold_tags_prefer_longer_overlap():
    spans = [(Span(0, 1, 2), "GPE"), (Span(0, 0, 3), "PER")]
    tags = gold_tag_sequence(4, spans, ("PER", "GPE"))
    assert tags.tolist() == [1, 2, 2, 0]


def test_objective_value_at_zero():
    doc = make_doc(sentences=(("Rebels",),))
    objective = ChainObjective.from_corpus([doc], ("NONE", "PER"), entity_spans, FeatureConfig(hash_bits=12), 0.0)
    value, _ = objective(np.zeros(objective.size))
    assert value == pytest.approx(np.log(3))


def test_objective_gradient(synth_corpus, tiny_schema):
    objective = ChainObjective.from_corpus(synth_corpus["train"][:3], tiny_schema.entity_types, entity_spans,
                                           FeatureConfig(hash_bits=12), 0.5)
    theta = np.random.default_rng(0).normal(scale=0.1, size=objective.size)
    assert check_gradient(objective, theta, n_coords=30) < 1e-4


def test_untrained_model_scores_zero():
    model = ChainModel.zeros(("NONE", "PER"), FeatureConfig(hash_bits=12), HashedSpace(np.zeros(0, dtype=np.int64)))
    doc = make_doc(sentences=(("Rebels",),))
    assert model.emissions(doc, 0).shape == (1, 3)
    assert span_type_log_marginal(model, doc, Span(0, 0, 1), "PER") == pytest.approx(np.log(1 / 3))
    with pytest.raises(ValueError):
        span_type_log_marginal(model, doc, Span(0, 0, 1), "GPE")


def test_candidates_from_trained_tagger(tiny_bundle, synth_corpus):
    model = tiny_bundle.entity_crf
    doc = synth_corpus["dev"][0]
    cands = generate_candidates(model, doc, 5)
    keys = [c.span.key for c in cands]
    assert keys == sorted(set(keys))
    for c in cands:
        assert c.label_scores.shape == (len(model.labels) + 1,)
        assert np.exp(c.label_scores).sum() == pytest.approx(1.0, abs=1e-6)
    viterbi_keys = {c.span.key for c in decode_spans(model, doc)}
    assert viterbi_keys <= set(keys)


def test_build_candidates_scores_align_with_schema(tiny_bundle, synth_corpus, tiny_schema):
    doc = synth_corpus["dev"][0]
    cands = build_candidates(doc, tiny_bundle.entity_crf, tiny_bundle.trigger_crf, 5, 3)
    for ent in cands.entities:
        assert ent.type_scores.shape == (tiny_schema.n_entities,)
        assert ent.label in tiny_schema.entity_types[1:]
        assert 0.0 <= ent.confidence <= 1.0
    assert len(cands.per_trigger_args) == len(cands.triggers)


def test_model_level_inference(tiny_bundle, synth_corpus):
    model = tiny_bundle.entity_crf
    doc = synth_corpus["dev"][0]
    nodes, edges, log_z = marginals(model, doc, 0)
    np.testing.assert_allclose(nodes.sum(axis=1), 1.0, atol=1e-9)
    assert np.isfinite(log_z)
    if len(doc.sentences[0]) > 1:
        assert edges.shape == (len(doc.sentences[0]) - 1, nodes.shape[1], nodes.shape[1])
    path, score = viterbi(model, doc, 0)
    best = kbest(model, doc, 0, 3)
    assert best[0][0] == path
    assert best[0][1] == pytest.approx(score)


def test_crf_objective_and_gradient(tiny_bundle, synth_corpus):
    model = tiny_bundle.entity_crf
    value, grad = crf_objective_and_gradient(model, synth_corpus["train"][:3], 1.0, gold=entity_spans)
    assert np.isfinite(value) and value > 0
    assert grad.shape == model.params.shape
