# app/services/evaluation_service.py
"""Micro-averaged scoring of predicted documents against gold.

Matching is on token offsets ``(sentence, start, end)``:

* trigger identification: offsets; classification adds the event type;
* argument identification: argument offsets and the event type, matched
  anywhere in the document; classification adds the role;
* entity: head token and entity type.

Counts are multisets, so a mention predicted twice only matches once.
"""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Dict, Hashable, Iterable, List, Sequence, Tuple

import pandas as pd

from app.core.errors import CorpusError
from app.services.utils.corpus import Document

logger = logging.getLogger(__name__)

EVENT_TASKS = ("trigger_identification", "trigger_classification",
               "argument_identification", "argument_classification")
TASKS = EVENT_TASKS + ("entity",)


@dataclass(frozen=True)
class TaskScore:
    correct: int
    predicted: int
    gold: int

    @property
    def undefined_precision(self) -> bool:
        return self.predicted == 0

    @property
    def precision(self) -> float:
        return self.correct / self.predicted if self.predicted else 0.0

    @property
    def recall(self) -> float:
        return self.correct / self.gold if self.gold else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r > 0 else 0.0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "correct": self.correct,
            "predicted": self.predicted,
            "gold": self.gold,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "undefined_precision": self.undefined_precision,
        }


@dataclass(frozen=True)
class ErrorCounts:
    missing: int
    spurious: int
    misclassified: int

    def to_dict(self) -> Dict[str, int]:
        return {"missing": self.missing, "spurious": self.spurious, "misclassified": self.misclassified}


@dataclass
class EvalReport:
    tasks: Dict[str, TaskScore]
    errors: Dict[str, ErrorCounts]
    per_entity_type: Dict[str, TaskScore] = field(default_factory=dict)
    per_event_type: Dict[str, TaskScore] = field(default_factory=dict)
    n_documents: int = 0

    def f1(self, task: str) -> float:
        return self.tasks[task].f1

    def to_dict(self) -> Dict[str, Any]:
        return {
            "n_documents": self.n_documents,
            "tasks": {name: self.tasks[name].to_dict() for name in TASKS if name in self.tasks},
            "errors": {name: self.errors[name].to_dict() for name in sorted(self.errors)},
            "per_entity_type": {k: v.to_dict() for k, v in sorted(self.per_entity_type.items())},
            "per_event_type": {k: v.to_dict() for k, v in sorted(self.per_event_type.items())},
        }

    def summary_frame(self) -> pd.DataFrame:
        rows = [{"task": name, **self.tasks[name].to_dict()} for name in TASKS if name in self.tasks]
        return pd.DataFrame(rows, columns=["task", "precision", "recall", "f1", "correct", "predicted", "gold"])

    def breakdown_frame(self) -> pd.DataFrame:
        rows = []
        for group, table in (("entity_type", self.per_entity_type), ("event_type", self.per_event_type)):
            for label, score in sorted(table.items()):
                rows.append({"group": group, "label": label, **score.to_dict()})
        return pd.DataFrame(rows, columns=["group", "label", "precision", "recall", "f1",
                                           "correct", "predicted", "gold"])


# --------------------------------------------------------------------------
# matching
# --------------------------------------------------------------------------

def align_documents(gold: Sequence[Document], predicted: Sequence[Document]) -> List[Tuple[Document, Document]]:
    """Pair documents by doc_id; both sides must hold exactly the same ids."""
    def index(docs: Sequence[Document], side: str) -> Dict[str, Document]:
        out: Dict[str, Document] = {}
        for d in docs:
            if d.doc_id in out:
                raise CorpusError(f"duplicate doc_id {d.doc_id!r} in the {side} documents")
            out[d.doc_id] = d
        return out

    g, p = index(gold, "gold"), index(predicted, "predicted")
    if set(g) != set(p):
        only_gold = sorted(set(g) - set(p))[:5]
        only_pred = sorted(set(p) - set(g))[:5]
        raise CorpusError(f"gold and predicted doc_ids differ (gold only: {only_gold}, predicted only: {only_pred})")
    return [(g[k], p[k]) for k in sorted(g)]


def _score(gold: Counter, predicted: Counter) -> TaskScore:
    return TaskScore(sum((gold & predicted).values()), sum(predicted.values()), sum(gold.values()))


def _trigger_keys(doc: Document) -> Tuple[Counter, Counter]:
    ident = Counter((doc.doc_id,) + ev.trigger.key for ev in doc.gold_events)
    cls = Counter((doc.doc_id,) + ev.trigger.key + (ev.type,) for ev in doc.gold_events)
    return ident, cls


def _argument_keys(doc: Document) -> Tuple[Counter, Counter]:
    ident: Counter = Counter()
    cls: Counter = Counter()
    for ev in doc.gold_events:
        for arg in ev.arguments:
            key = (doc.doc_id, ev.type) + doc.gold_entities[arg.entity].span.key
            ident[key] += 1
            cls[key + (arg.role,)] += 1
    return ident, cls


def _entity_keys(doc: Document) -> Tuple[Counter, Counter]:
    ident = Counter((doc.doc_id, e.span.sentence, e.span.head_token) for e in doc.gold_entities)
    cls = Counter((doc.doc_id, e.span.sentence, e.span.head_token, e.type) for e in doc.gold_entities)
    return ident, cls


def _pooled(pairs: Iterable[Tuple[Document, Document]], keys) -> Tuple[Counter, Counter, Counter, Counter]:
    gi, gc, pi, pc = Counter(), Counter(), Counter(), Counter()
    for g, p in pairs:
        a, b = keys(g)
        c, d = keys(p)
        gi.update(a)
        gc.update(b)
        pi.update(c)
        pc.update(d)
    return gi, gc, pi, pc


def _errors(ident: TaskScore, cls: TaskScore) -> ErrorCounts:
    return ErrorCounts(ident.gold - ident.correct, ident.predicted - ident.correct, ident.correct - cls.correct)


def _per_label(gold: Counter, predicted: Counter) -> Dict[str, TaskScore]:
    """Split classification counters on their last key element (the label)."""
    labels = sorted({k[-1] for k in gold} | {k[-1] for k in predicted})
    out = {}
    for lab in labels:
        g = Counter({k: v for k, v in gold.items() if k[-1] == lab})
        p = Counter({k: v for k, v in predicted.items() if k[-1] == lab})
        out[lab] = _score(g, p)
    return out


# --------------------------------------------------------------------------
# public scoring
# --------------------------------------------------------------------------

def score_events(gold: Sequence[Document], predicted: Sequence[Document]) -> EvalReport:
    pairs = align_documents(gold, predicted)
    gi, gc, pi, pc = _pooled(pairs, _trigger_keys)
    ai, ac, bi, bc = _pooled(pairs, _argument_keys)
    tasks = {
        "trigger_identification": _score(gi, pi),
        "trigger_classification": _score(gc, pc),
        "argument_identification": _score(ai, bi),
        "argument_classification": _score(ac, bc),
    }
    errors = {
        "trigger": _errors(tasks["trigger_identification"], tasks["trigger_classification"]),
        "argument": _errors(tasks["argument_identification"], tasks["argument_classification"]),
    }
    return EvalReport(tasks, errors, per_event_type=_per_label(gc, pc), n_documents=len(pairs))


def score_entities(gold: Sequence[Document], predicted: Sequence[Document]) -> EvalReport:
    pairs = align_documents(gold, predicted)
    gi, gc, pi, pc = _pooled(pairs, _entity_keys)
    ident, cls = _score(gi, pi), _score(gc, pc)
    return EvalReport({"entity": cls}, {"entity": _errors(ident, cls)},
                      per_entity_type=_per_label(gc, pc), n_documents=len(pairs))


def evaluate(gold: Sequence[Document], predicted: Sequence[Document]) -> EvalReport:
    events = score_events(gold, predicted)
    entities = score_entities(gold, predicted)
    report = EvalReport({**events.tasks, **entities.tasks}, {**events.errors, **entities.errors},
                        entities.per_entity_type, events.per_event_type, events.n_documents)
    for name in TASKS:
        if report.tasks[name].undefined_precision:
            logger.warning("%s: no predictions, precision reported as 0", name)
    return report
