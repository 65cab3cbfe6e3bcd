# app/services/utils/corpus.py
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from app.core.errors import CorpusError
from app.services.utils.schema import NONE, LabelSchema, is_valid_config

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Span:
    sentence: int
    start: int
    end: int
    head: Optional[int] = None

    @property
    def head_token(self) -> int:
        # English NPs are mostly head-final; the last token stands in for a missing head.
        return self.head if self.head is not None else self.end - 1

    @property
    def key(self) -> Tuple[int, int, int]:
        return (self.sentence, self.start, self.end)

    def tokens(self) -> range:
        return range(self.start, self.end)

    def to_dict(self) -> Dict[str, int]:
        out = {"sentence": self.sentence, "start": self.start, "end": self.end}
        if self.head is not None:
            out["head"] = self.head
        return out

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "Span":
        head = raw.get("head")
        return cls(int(raw["sentence"]), int(raw["start"]), int(raw["end"]), None if head is None else int(head))


@dataclass(frozen=True)
class Token:
    surface: str
    lemma: Optional[str] = None
    pos: Optional[str] = None
    dep_head: Optional[int] = None
    dep_label: Optional[str] = None

    @property
    def norm(self) -> str:
        """Lemma when annotated, lowercased surface otherwise."""
        return self.lemma if self.lemma else self.surface.lower()


@dataclass(frozen=True)
class EntityMention:
    span: Span
    type: str


@dataclass(frozen=True)
class Argument:
    entity: int
    role: str


@dataclass(frozen=True)
class EventMention:
    trigger: Span
    type: str
    arguments: Tuple[Argument, ...] = ()


@dataclass(frozen=True)
class Document:
    doc_id: str
    sentences: Tuple[Tuple[Token, ...], ...]
    coref_chains: Optional[Tuple[Tuple[Span, ...], ...]] = None
    gold_entities: Tuple[EntityMention, ...] = ()
    gold_events: Tuple[EventMention, ...] = ()

    def sentence(self, index: int) -> Tuple[Token, ...]:
        return self.sentences[index]

    @property
    def has_dependencies(self) -> bool:
        return any(tok.dep_head is not None for sent in self.sentences for tok in sent)


@dataclass(frozen=True)
class TriggerCandidate:
    span: Span
    label: str
    score: float


@dataclass(frozen=True)
class EntityCandidate:
    span: Span
    label: str
    confidence: float
    # log-scores over schema.entity_types (NONE at index 0): the decoder's D(a_j)
    type_scores: np.ndarray = field(compare=False)


@dataclass(frozen=True)
class CandidateSet:
    triggers: Tuple[TriggerCandidate, ...]
    entities: Tuple[EntityCandidate, ...]
    per_trigger_args: Tuple[Tuple[int, ...], ...]

    @classmethod
    def build(cls, triggers: Sequence[TriggerCandidate], entities: Sequence[EntityCandidate]) -> "CandidateSet":
        for name, items in (("trigger", triggers), ("entity", entities)):
            keys = [c.span.key for c in items]
            if len(keys) != len(set(keys)):
                raise ValueError(f"duplicate {name} candidate spans")
        spans = [e.span for e in entities]
        scopes = tuple(tuple(argument_scope(t.span, spans)) for t in triggers)
        return cls(tuple(triggers), tuple(entities), scopes)

    @classmethod
    def empty(cls) -> "CandidateSet":
        return cls((), (), ())

    @classmethod
    def from_gold(cls, doc: "Document", schema: LabelSchema) -> "CandidateSet":
        """The gold mentions as candidates, each with a near one-hot type distribution."""
        triggers, seen = [], set()
        for ev in doc.gold_events:
            if ev.trigger.key not in seen:
                seen.add(ev.trigger.key)
                triggers.append(TriggerCandidate(ev.trigger, ev.type, 0.0))
        entities, seen = [], set()
        for ent in doc.gold_entities:
            if ent.span.key in seen:
                continue
            seen.add(ent.span.key)
            scores = np.full(schema.n_entities, np.log(1e-12))
            scores[schema.entity_index[ent.type]] = 0.0
            entities.append(EntityCandidate(ent.span, ent.type, 1.0, scores))
        return cls.build(triggers, entities)


def argument_scope(trigger: Span, entities: Sequence[Span]) -> List[int]:
    """Indices of the entity spans sharing the trigger's sentence, in input order."""
    return [j for j, e in enumerate(entities) if e.sentence == trigger.sentence]


# --------------------------------------------------------------------------
# codec
# --------------------------------------------------------------------------

def _token_to_dict(tok: Token) -> Dict[str, Any]:
    out: Dict[str, Any] = {"surface": tok.surface}
    for name in ("lemma", "pos", "dep_head", "dep_label"):
        value = getattr(tok, name)
        if value is not None:
            out[name] = value
    return out


def document_to_dict(doc: Document) -> Dict[str, Any]:
    out: Dict[str, Any] = {
        "doc_id": doc.doc_id,
        "sentences": [[_token_to_dict(t) for t in sent] for sent in doc.sentences],
        "gold_entities": [{"span": e.span.to_dict(), "type": e.type} for e in doc.gold_entities],
        "gold_events": [
            {
                "trigger": ev.trigger.to_dict(),
                "type": ev.type,
                "arguments": [{"entity": a.entity, "role": a.role} for a in ev.arguments],
            }
            for ev in doc.gold_events
        ],
    }
    if doc.coref_chains is not None:
        out["coref_chains"] = [[s.to_dict() for s in chain] for chain in doc.coref_chains]
    return out


def document_from_dict(raw: Dict[str, Any]) -> Document:
    try:
        sentences = tuple(
            tuple(
                Token(
                    surface=str(t["surface"]),
                    lemma=t.get("lemma"),
                    pos=t.get("pos"),
                    dep_head=None if t.get("dep_head") is None else int(t["dep_head"]),
                    dep_label=t.get("dep_label"),
                )
                for t in sent
            )
            for sent in raw["sentences"]
        )
        chains = raw.get("coref_chains")
        coref = None if chains is None else tuple(tuple(Span.from_dict(s) for s in chain) for chain in chains)
        entities = tuple(EntityMention(Span.from_dict(e["span"]), str(e["type"])) for e in raw.get("gold_entities", []))
        events = tuple(
            EventMention(
                Span.from_dict(ev["trigger"]),
                str(ev["type"]),
                tuple(Argument(int(a["entity"]), str(a["role"])) for a in ev.get("arguments", [])),
            )
            for ev in raw.get("gold_events", [])
        )
        return Document(str(raw["doc_id"]), sentences, coref, entities, events)
    except (KeyError, TypeError, ValueError) as e:
        raise CorpusError(f"malformed document: {e!r}") from e


# --------------------------------------------------------------------------
# validation and I/O
# --------------------------------------------------------------------------

def _check_span(doc: Document, span: Span, what: str) -> None:
    if not 0 <= span.sentence < len(doc.sentences):
        raise CorpusError(f"{what} span {span.key} refers to a missing sentence")
    n = len(doc.sentences[span.sentence])
    if not 0 <= span.start < span.end <= n:
        raise CorpusError(f"{what} span {span.key} is out of bounds for a sentence of {n} tokens")
    if span.head is not None and not span.start <= span.head < span.end:
        raise CorpusError(f"{what} span {span.key} has its head {span.head} outside the span")


def validate_document(doc: Document, schema: LabelSchema) -> int:
    """Raise CorpusError on structural problems; return the number of schema-incompatible gold events."""
    for s_idx, sent in enumerate(doc.sentences):
        for t_idx, tok in enumerate(sent):
            if tok.dep_head is not None and not -1 <= tok.dep_head < len(sent):
                raise CorpusError(f"token {s_idx}:{t_idx} has dep_head {tok.dep_head} outside its sentence")
    for chain in doc.coref_chains or ():
        for span in chain:
            _check_span(doc, span, "coref")
    for ent in doc.gold_entities:
        _check_span(doc, ent.span, "entity")
        if ent.type not in schema.entity_index or ent.type == NONE:
            raise CorpusError(f"entity type {ent.type!r} is not in the schema")
    incompatible = 0
    for ev in doc.gold_events:
        _check_span(doc, ev.trigger, "trigger")
        if ev.type not in schema.event_index or ev.type == NONE:
            raise CorpusError(f"event type {ev.type!r} is not in the schema")
        for arg in ev.arguments:
            if not 0 <= arg.entity < len(doc.gold_entities):
                raise CorpusError(f"argument refers to missing entity {arg.entity}")
            if arg.role not in schema.role_index or arg.role == NONE:
                raise CorpusError(f"role {arg.role!r} is not in the schema")
            ent = doc.gold_entities[arg.entity]
            if ent.span.sentence != ev.trigger.sentence:
                raise CorpusError(
                    f"argument entity {arg.entity} is not in the same sentence as its {ev.type} trigger")
            if not is_valid_config(ev.type, arg.role, ent.type, schema):
                incompatible += 1
    return incompatible


def parse_corpus_lines(lines: Iterable[str], schema: LabelSchema) -> List[Document]:
    docs: List[Document] = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
            doc = document_from_dict(raw)
            incompatible = validate_document(doc, schema)
        except json.JSONDecodeError as e:
            raise CorpusError(f"invalid JSON: {e.msg}", line=lineno) from e
        except CorpusError as e:
            raise CorpusError(str(e), line=lineno) from e
        if incompatible:
            logger.warning("line %d (%s): %d gold arguments violate the schema compatibility maps",
                           lineno, doc.doc_id, incompatible)
        docs.append(doc)
    return docs


def _utf8_lines(fh: Iterable[bytes]) -> Iterator[str]:
    for lineno, raw in enumerate(fh, start=1):
        try:
            yield raw.decode("utf-8", errors="strict")
        except UnicodeDecodeError as e:
            raise CorpusError(f"invalid UTF-8 at byte {e.start}", line=lineno) from e


def load_corpus(path: str | Path, schema: LabelSchema) -> List[Document]:
    try:
        with open(path, "rb") as fh:
            return parse_corpus_lines(_utf8_lines(fh), schema)
    except OSError as e:
        raise CorpusError(f"cannot read corpus {path}: {e}") from e


def dump_document(doc: Document) -> str:
    return json.dumps(document_to_dict(doc), sort_keys=True, ensure_ascii=False)


def save_corpus(documents: Iterable[Document], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for doc in documents:
            fh.write(dump_document(doc) + "\n")
