# tests/test_acceptance.py
"""End-to-end runs on the full synthetic corpus; select with ``pytest -m slow``."""
import time

import numpy as np
import pytest

from app.core.config import AD3Config, PipelineConfig
from app.services.evaluation_service import evaluate
from app.services.extraction_service import ExtractionService
from app.services.joint_decoder import INTEGRAL_EXACT, ad3_solve, assemble_problem, brute_force_solve
from app.services.synthetic_corpus import gen_synth
from app.services.training_service import candidate_coverage, train_pipeline

pytestmark = pytest.mark.slow


def random_joint_problem(schema, rng):
    E, R, A = schema.n_events, schema.n_roles, schema.n_entities
    n_trig, n_ent = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    links = [(i, j) for i in range(n_trig) for j in range(n_ent) if rng.random() < 0.8]
    pairs = [(0, 1)] if n_trig == 2 and rng.random() < 0.5 else []
    return assemble_problem(
        schema,
        [rng.normal(size=E) for _ in range(n_trig)],
        [rng.normal(size=A) for _ in range(n_ent)],
        [(i, j, rng.normal(size=(E, R)), rng.normal(size=(R, A))) for i, j in links],
        [(i, k, rng.normal(size=(E, E))) for i, k in pairs],
    )


def test_ad3_matches_brute_force(tiny_schema):
    rng = np.random.default_rng(2024)
    cfg = AD3Config(max_iterations=2000)
    exact = 0
    for _ in range(100):
        problem = random_joint_problem(tiny_schema, rng)
        oracle = brute_force_solve(problem)
        sol = ad3_solve(problem, cfg)
        assert sol.dual >= oracle.objective - 1e-6
        assert problem.is_valid(sol.assignment)
        if sol.status == INTEGRAL_EXACT:
            exact += 1
            assert problem.objective(sol.assignment) == pytest.approx(oracle.objective, abs=1e-6)
            if oracle.margin > 1e-6:
                assert sol.assignment == oracle.assignment
    assert exact >= 90


@pytest.fixture(scope="module")
def full_run(ace_schema):
    corpus = gen_synth(42, 200, 40, 30, ace_schema)
    started = time.perf_counter()
    bundle = train_pipeline(corpus["train"], ace_schema, PipelineConfig())
    service = ExtractionService(bundle)
    joint = service.predict(corpus["test"], "joint")
    elapsed = time.perf_counter() - started
    within = service.predict(corpus["test"], "within_event")
    return corpus, service, joint, within, elapsed


def test_end_to_end_quality(full_run):
    corpus, _, joint, _, elapsed = full_run
    report = evaluate(corpus["test"], [r.document for r in joint])
    assert report.f1("trigger_classification") >= 0.90
    assert report.f1("argument_classification") >= 0.80
    assert report.f1("entity") >= 0.90
    assert elapsed <= 15 * 60


def test_joint_beats_pipeline(full_run):
    corpus, _, joint, within, _ = full_run
    joint_report = evaluate(corpus["test"], [r.document for r in joint])
    within_report = evaluate(corpus["test"], [r.document for r in within])
    assert joint_report.f1("argument_classification") >= within_report.f1("argument_classification")
    assert joint_report.tasks["entity"].recall >= within_report.tasks["entity"].recall


def test_candidate_coverage(full_run):
    corpus, service, _, _, _ = full_run
    coverage = candidate_coverage([(d, service.candidates(d)) for d in corpus["test"]])
    assert coverage["triggers"] >= 0.95
    assert coverage["entities"] >= 0.95
