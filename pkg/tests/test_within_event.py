# tests/test_within_event.py
import itertools
from dataclasses import replace

import numpy as np
import pytest
from scipy.special import logsumexp

from app.core.config import FeatureConfig, TrainConfig
from app.core.errors import ModelError
from app.services.utils.corpus import Argument, CandidateSet, EventMention, Span
from app.services.utils.features import HashedSpace
from app.services.utils.lbfgs import check_gradient
from app.services.utils.schema import build_schema
from app.services.within_event import (NEG, EventFactorGraph, StarCells, WithinEventObjective, WithinEventParams,
                                       build_graph, collect_instances, exact_inference, export_joint_tables,
                                       fit_within_event, map_config, project_gold, template_for,
                                       we_objective_and_gradient)
from conftest import TINY_SCHEMA

CFG = FeatureConfig(hash_bits=12)


def random_graph(schema, n_args, seed=0):
    rng = np.random.default_rng(seed)
    E, R, A = schema.n_events, schema.n_roles, schema.n_entities
    return EventFactorGraph(
        Span(0, 0, 1), tuple(Span(0, j + 1, j + 2) for j in range(n_args)),
        rng.normal(size=E), rng.normal(size=(n_args, R)), rng.normal(size=(n_args, A)),
        np.where(schema.valid_tr, rng.normal(size=(E, R)), NEG),
        np.where(schema.valid_ra, rng.normal(size=(R, A)), NEG),
        StarCells.from_masks(schema.valid_tr, schema.valid_ra),
    )


def valid_configs(schema, n_args):
    E, R, A = schema.n_events, schema.n_roles, schema.n_entities
    for t in range(E):
        for roles in itertools.product(range(R), repeat=n_args):
            if not all(schema.valid_tr[t, r] for r in roles):
                continue
            for ents in itertools.product(range(A), repeat=n_args):
                if all(schema.valid_ra[r, a] for r, a in zip(roles, ents)):
                    yield t, roles, ents


def empty_params(schema):
    empty = HashedSpace(np.zeros(0, dtype=np.int64))
    return WithinEventParams.zeros(schema, CFG, empty, empty, empty)


def test_no_arguments_uniform(tiny_schema, attack_doc):
    g = build_graph(empty_params(tiny_schema), attack_doc, Span(0, 1, 2), [])
    res = exact_inference(g)
    assert res.p_t == pytest.approx(np.full(tiny_schema.n_events, 1 / tiny_schema.n_events))
    assert res.log_z == pytest.approx(np.log(tiny_schema.n_events))
    assert map_config(g) == (0, (), ())


def enumerated_marginals(schema, g, n_args):
    configs = list(valid_configs(schema, n_args))
    scores = np.array([g.score(*c) for c in configs])
    log_z = logsumexp(scores)
    probs = np.exp(scores - log_z)
    E, R, A = schema.n_events, schema.n_roles, schema.n_entities
    p_t = np.zeros(E)
    p_r, p_a = np.zeros((n_args, R)), np.zeros((n_args, A))
    p_tr, p_ra = np.zeros((n_args, E, R)), np.zeros((n_args, R, A))
    for (t, roles, ents), p in zip(configs, probs):
        p_t[t] += p
        for j in range(n_args):
            p_r[j, roles[j]] += p
            p_a[j, ents[j]] += p
            p_tr[j, t, roles[j]] += p
            p_ra[j, roles[j], ents[j]] += p
    best = configs[int(np.argmax(scores))]
    return log_z, p_t, p_r, p_a, p_tr, p_ra, best


@pytest.mark.parametrize("seed", range(200))
def test_inference_matches_enumeration(tiny_schema, seed):
    n_args = seed % 4
    g = random_graph(tiny_schema, n_args, seed)
    res = exact_inference(g)
    log_z, p_t, p_r, p_a, p_tr, p_ra, best = enumerated_marginals(tiny_schema, g, n_args)
    assert abs(res.log_z - log_z) <= 1e-9
    np.testing.assert_allclose(res.p_t, p_t, rtol=0, atol=1e-9)
    np.testing.assert_allclose(res.p_r, p_r, rtol=0, atol=1e-9)
    np.testing.assert_allclose(res.p_a, p_a, rtol=0, atol=1e-9)
    np.testing.assert_allclose(res.p_tr, p_tr, rtol=0, atol=1e-9)
    np.testing.assert_allclose(res.p_ra, p_ra, rtol=0, atol=1e-9)
    # invalid cells are exactly zero
    assert (res.p_tr[:, ~tiny_schema.valid_tr] == 0).all()
    assert (res.p_ra[:, ~tiny_schema.valid_ra] == 0).all()
    t, roles, ents = map_config(g)
    assert g.score(t, roles, ents) == pytest.approx(g.score(*best), abs=1e-9)


def test_all_none_mass(tiny_schema):
    g = random_graph(tiny_schema, 3, seed=9)
    unary_t = np.full(tiny_schema.n_events, NEG)
    unary_t[0] = 0.0
    g = EventFactorGraph(g.trigger, g.arguments, unary_t, g.unary_r, g.unary_a, g.pair_tr, g.pair_ra, g.cells)
    res = exact_inference(g)
    np.testing.assert_allclose(res.p_t, np.eye(tiny_schema.n_events)[0], atol=1e-12)
    np.testing.assert_allclose(res.p_r[:, 0], 1.0, atol=1e-12)
    log_z, _, _, p_a, _, _, _ = enumerated_marginals(tiny_schema, g, 3)
    assert abs(res.log_z - log_z) <= 1e-9
    np.testing.assert_allclose(res.p_a, p_a, rtol=0, atol=1e-9)
    t, roles, _ = map_config(g)
    assert (t, roles) == (0, (0, 0, 0))


def test_none_trigger_forces_none_roles(tiny_schema):
    g = random_graph(tiny_schema, 3, seed=5)
    g = EventFactorGraph(g.trigger, g.arguments, np.array([50.0, 0.0, 0.0]), g.unary_r, g.unary_a,
                         g.pair_tr, g.pair_ra, g.cells)
    t, roles, _ = map_config(g)
    assert t == 0
    assert roles == (0, 0, 0)


def test_export_tables_floor_valid_cells(tiny_schema, attack_doc):
    spans = [Span(0, 0, 1), Span(0, 2, 3)]
    tables = export_joint_tables(empty_params(tiny_schema), attack_doc, Span(0, 1, 2), spans)
    assert tables.log_tr.shape == (2, tiny_schema.n_events, tiny_schema.n_roles)
    assert np.isneginf(tables.log_tr[:, ~tiny_schema.valid_tr]).all()
    assert np.isfinite(tables.log_tr[:, tiny_schema.valid_tr]).all()
    assert np.isfinite(tables.log_ra[:, tiny_schema.valid_ra]).all()


def test_build_graph_rejects_other_sentence(tiny_schema, attack_doc):
    with pytest.raises(ValueError):
        build_graph(empty_params(tiny_schema), attack_doc, Span(0, 1, 2), [Span(1, 0, 1)])


def test_check_schema(tiny_schema):
    params = empty_params(tiny_schema)
    params.check_schema(tiny_schema)
    raw = dict(TINY_SCHEMA, event_roles={**TINY_SCHEMA["event_roles"], "DIE": ["VICTIM"]})
    with pytest.raises(ModelError):
        params.check_schema(build_schema(raw))


def test_project_gold(attack_doc, tiny_schema):
    cands = CandidateSet.from_gold(attack_doc, tiny_schema)
    assert project_gold(attack_doc, cands, 0, tiny_schema) == (
        "ATTACK", ("ATTACKER", "PLACE", "INSTRUMENT"), ("PER", "GPE", "WEA"))


def test_project_gold_rejects_incompatible(tiny_schema, attack_doc):
    doc = replace(
        attack_doc,
        gold_events=(EventMention(Span(0, 1, 2), "DIE", (Argument(2, "PLACE"),)),),
    )
    cands = CandidateSet.from_gold(doc, tiny_schema)
    assert project_gold(doc, cands, 0, tiny_schema) is None
    assert collect_instances([(doc, cands)], tiny_schema, CFG) == []


def test_zero_parameters_objective_value(tiny_schema, attack_doc):
    doc = replace(attack_doc, gold_entities=(), gold_events=(EventMention(Span(0, 1, 2), "ATTACK"),))
    instances = collect_instances([(doc, CandidateSet.from_gold(doc, tiny_schema))], tiny_schema, CFG)
    objective = WithinEventObjective(template_for(instances, tiny_schema, CFG), instances, 0.0)
    value, _ = objective(np.zeros(objective.size))
    assert value == pytest.approx(np.log(tiny_schema.n_events))


def test_objective_gradient(synth_corpus, tiny_schema):
    pairs = [(d, CandidateSet.from_gold(d, tiny_schema)) for d in synth_corpus["train"][:4]]
    instances = collect_instances(pairs, tiny_schema, CFG)
    objective = WithinEventObjective(template_for(instances, tiny_schema, CFG), instances, 0.3)
    theta = np.random.default_rng(1).normal(scale=0.1, size=objective.size)
    assert check_gradient(objective, theta, n_coords=40) < 1e-4


def test_objective_needs_instances(tiny_schema):
    with pytest.raises(ValueError):
        WithinEventObjective(empty_params(tiny_schema), [], 1.0)


def test_fit_recovers_gold_on_training_data(synth_corpus, tiny_schema):
    docs = synth_corpus["train"][:6]
    pairs = [(d, CandidateSet.from_gold(d, tiny_schema)) for d in docs]
    instances = collect_instances(pairs, tiny_schema, CFG)
    params, result = fit_within_event(instances, tiny_schema, CFG, TrainConfig(max_iters=100), l2=0.01)
    assert result.value < result.trace[0].value_before
    doc, cands = pairs[0]
    for i, trig in enumerate(cands.triggers):
        scope = cands.per_trigger_args[i]
        args = [cands.entities[j] for j in scope]
        g = build_graph(params, doc, trig.span, [a.span for a in args], [(a.label, a.confidence) for a in args])
        t, _, _ = map_config(g)
        assert tiny_schema.event_types[t] == trig.label


def test_params_payload_roundtrip(synth_corpus, tiny_schema):
    pairs = [(d, CandidateSet.from_gold(d, tiny_schema)) for d in synth_corpus["train"][:2]]
    instances = collect_instances(pairs, tiny_schema, CFG)
    params = template_for(instances, tiny_schema, CFG)
    theta = np.random.default_rng(2).normal(size=params.params.size)
    params = params.with_params(theta)
    again = WithinEventParams.from_payload(params.to_payload())
    assert np.array_equal(again.params, params.params)
    assert np.array_equal(again.valid_tr, params.valid_tr)


def test_objective_entry_point_matches_objective(synth_corpus, tiny_schema):
    pairs = [(d, CandidateSet.from_gold(d, tiny_schema)) for d in synth_corpus["train"][:2]]
    instances = collect_instances(pairs, tiny_schema, CFG)
    params = template_for(instances, tiny_schema, CFG)
    params = params.with_params(np.random.default_rng(6).normal(scale=0.1, size=params.params.size))
    value, grad = we_objective_and_gradient(params, instances, 0.5)
    expected, expected_grad = WithinEventObjective(params, instances, 0.5)(params.params)
    assert value == pytest.approx(expected)
    np.testing.assert_allclose(grad, expected_grad)


@pytest.mark.parametrize("n_args", [0, 1, 4])
def test_cells_evaluated_counts_allowed_cells(tiny_schema, n_args):
    g = random_graph(tiny_schema, n_args)
    result = exact_inference(g)
    assert result.cells_evaluated == n_args * (g.cells.k1 + g.cells.k2) + tiny_schema.n_events
    assert g.cells.k1 == int(tiny_schema.valid_tr.sum())
