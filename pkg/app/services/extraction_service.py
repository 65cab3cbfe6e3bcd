# app/services/extraction_service.py
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from app.core.config import DECODE_MODES
from app.core.errors import NumericalError
from app.services.chain_crf import build_candidates, decode_spans, generate_candidates
from app.services.joint_decoder import (INTEGRAL_EXACT, JointProblem, JointSolution, ad3_solve, build_problem,
                                        trace_frame)
from app.services.model_bundle import ModelBundle
from app.services.utils.corpus import (Argument, CandidateSet, Document, EntityCandidate, EntityMention,
                                       EventMention, TriggerCandidate)
from app.services.within_event import build_graph, map_config

logger = logging.getLogger(__name__)

STATUS_COLUMNS = ("doc_id", "mode", "status", "iterations", "primal", "dual",
                  "n_triggers", "n_entities", "n_variables")


@dataclass(frozen=True)
class DecodeResult:
    document: Document
    mode: str
    status: str
    iterations: int
    primal: float
    dual: float
    n_triggers: int
    n_entities: int
    n_variables: int
    solution: Optional[JointSolution] = None

    def status_row(self) -> Dict[str, object]:
        return {name: (self.document.doc_id if name == "doc_id" else getattr(self, name)) for name in STATUS_COLUMNS}


def status_frame(results: Sequence[DecodeResult]) -> pd.DataFrame:
    return pd.DataFrame([r.status_row() for r in results], columns=list(STATUS_COLUMNS))


def _unannotated(doc: Document) -> Document:
    return replace(doc, gold_entities=(), gold_events=())


class ExtractionService:
    """Runs a trained bundle over documents: candidates, then one of the decoding modes."""

    def __init__(self, bundle: ModelBundle):
        bundle.check()
        self.bundle = bundle
        self.schema = bundle.schema

    def candidates(self, doc: Document) -> CandidateSet:
        train = self.bundle.config.train
        return build_candidates(doc, self.bundle.entity_crf, self.bundle.trigger_crf, train.entity_k, train.trigger_k)

    def build_problem(self, doc: Document, mode: Optional[str] = None) -> Tuple[CandidateSet, JointProblem]:
        mode = self._mode(mode)
        cands = self.candidates(doc)
        b = self.bundle
        return cands, build_problem(doc, cands, b.within_event, b.event_pair, self.schema, mode)

    def _mode(self, mode: Optional[str]) -> str:
        mode = mode or self.bundle.config.decode_mode
        if mode not in DECODE_MODES:
            raise ValueError(f"unknown decode mode {mode!r}; expected one of {DECODE_MODES}")
        return mode

    def decode(self, doc: Document, mode: Optional[str] = None) -> DecodeResult:
        mode = self._mode(mode)
        if mode == "within_event":
            return self._decode_within_event(doc)
        cands, problem = self.build_problem(doc, mode)
        solution = ad3_solve(problem, self.bundle.config.ad3)
        if not problem.is_valid(solution.assignment):
            raise NumericalError(f"decoder produced a schema-invalid assignment for {doc.doc_id}")
        predicted = self._to_document(doc, cands, problem, solution.assignment)
        logger.debug("decoded %s (%s): %s after %d iterations", doc.doc_id, mode, solution.status,
                     solution.iterations)
        return DecodeResult(predicted, mode, solution.status, solution.iterations, solution.primal, solution.dual,
                            len(cands.triggers), len(cands.entities), problem.n_vars, solution)

    def _to_document(self, doc: Document, cands: CandidateSet, problem: JointProblem,
                     assignment: Sequence[int]) -> Document:
        s = self.schema
        entities: List[EntityMention] = []
        new_index: Dict[int, int] = {}
        for j, ent in enumerate(cands.entities):
            a = assignment[problem.entity_vars[j]]
            if a != 0:
                new_index[j] = len(entities)
                entities.append(EntityMention(ent.span, s.entity_types[a]))
        events: List[EventMention] = []
        for i, trig in enumerate(cands.triggers):
            t = assignment[problem.trigger_vars[i]]
            if t == 0:
                continue
            args = []
            for j in cands.per_trigger_args[i]:
                r = assignment[problem.role_vars[(i, j)]]
                if r != 0 and j in new_index:
                    args.append(Argument(new_index[j], s.role_types[r]))
            events.append(EventMention(trig.span, s.event_types[t], tuple(args)))
        return replace(_unannotated(doc), gold_entities=tuple(entities), gold_events=tuple(events))

    def _decode_within_event(self, doc: Document) -> DecodeResult:
        """Standalone CRF entities, then an independent max-product per trigger candidate."""
        b, s = self.bundle, self.schema
        triggers = [TriggerCandidate(c.span, c.label, c.score)
                    for c in generate_candidates(b.trigger_crf, doc, b.config.train.trigger_k)]
        viterbi = [EntityCandidate(c.span, c.label, float(np.exp(c.score)), c.label_scores)
                   for c in decode_spans(b.entity_crf, doc)]
        cands = CandidateSet.build(triggers, viterbi)
        entities = [EntityMention(e.span, e.label) for e in cands.entities]
        events: List[EventMention] = []
        total = 0.0
        n_links = 0
        for i, trig in enumerate(cands.triggers):
            scope = cands.per_trigger_args[i]
            args = [cands.entities[j] for j in scope]
            g = build_graph(b.within_event, doc, trig.span, [a.span for a in args],
                            [(a.label, a.confidence) for a in args])
            t, roles, ents = map_config(g)
            total += g.score(t, roles, ents)
            n_links += len(scope)
            if t == 0:
                continue
            kept = []
            for j, r in zip(scope, roles):
                if r == 0:
                    continue
                # the tagger's type is final here, so roles it cannot fill are dropped
                if s.valid_ra[r, s.entity_index[cands.entities[j].label]]:
                    kept.append(Argument(j, s.role_types[r]))
            events.append(EventMention(trig.span, s.event_types[t], tuple(kept)))
        predicted = replace(_unannotated(doc), gold_entities=tuple(entities), gold_events=tuple(events))
        return DecodeResult(predicted, "within_event", INTEGRAL_EXACT, 0, total, total,
                            len(cands.triggers), len(cands.entities), len(cands.triggers) + n_links)

    def predict(self, docs: Sequence[Document], mode: Optional[str] = None) -> List[DecodeResult]:
        mode = self._mode(mode)
        results = [self.decode(doc, mode) for doc in docs]
        counts = status_frame(results)["status"].value_counts().to_dict() if results else {}
        logger.info("decoded %d documents in mode %s: %s", len(results), mode, counts)
        return results

    def trace(self, doc: Document, mode: Optional[str] = None) -> pd.DataFrame:
        mode = self._mode(mode)
        if mode == "within_event":
            raise ValueError("the within_event mode runs no AD3 iterations to trace")
        result = self.decode(doc, mode)
        return trace_frame(result.solution)
