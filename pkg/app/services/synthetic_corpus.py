# app/services/synthetic_corpus.py
"""Deterministic synthetic corpora with learnable structure.

Trigger words identify their event type, entity mentions are drawn from
type-specific vocabularies, non-subject arguments are introduced by a
role marker, and events co-occur with a fixed partner type joined by
"and". Every gold annotation satisfies the schema's compatibility maps.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.core.config import SynthConfig
from app.services.utils.corpus import Argument, Document, EntityMention, EventMention, Span, Token, save_corpus
from app.services.utils.schema import NONE, LabelSchema, save_schema

logger = logging.getLogger(__name__)

SPLITS = ("train", "dev", "test")

TRIGGER_WORDS: Dict[str, Tuple[str, ...]] = {
    "BE-BORN": ("born", "birth", "delivered"),
    "MARRY": ("married", "wed", "wedding"),
    "DIVORCE": ("divorced", "divorce", "split"),
    "INJURE": ("injured", "wounded", "hurt"),
    "DIE": ("died", "killed", "dead"),
    "TRANSPORT": ("moved", "traveled", "shipped"),
    "TRANSFER-OWNERSHIP": ("bought", "sold", "acquired"),
    "TRANSFER-MONEY": ("paid", "donated", "loaned"),
    "START-ORG": ("founded", "launched", "created"),
    "MERGE-ORG": ("merged", "merger", "combined"),
    "DECLARE-BANKRUPTCY": ("bankrupt", "bankruptcy", "insolvent"),
    "END-ORG": ("closed", "dissolved", "shut"),
    "ATTACK": ("attacked", "bombed", "struck"),
    "DEMONSTRATE": ("protested", "rallied", "marched"),
    "MEET": ("met", "meeting", "summit"),
    "PHONE-WRITE": ("called", "wrote", "emailed"),
    "START-POSITION": ("hired", "appointed", "joined"),
    "END-POSITION": ("resigned", "fired", "retired"),
    "NOMINATE": ("nominated", "named", "proposed"),
    "ELECT": ("elected", "voted", "won"),
    "ARREST-JAIL": ("arrested", "jailed", "detained"),
    "RELEASE-PAROLE": ("released", "freed", "paroled"),
    "TRIAL-HEARING": ("tried", "trial", "hearing"),
    "CHARGE-INDICT": ("charged", "indicted", "accused"),
    "SUE": ("sued", "lawsuit", "litigated"),
    "CONVICT": ("convicted", "guilty", "condemned"),
    "SENTENCE": ("sentenced", "sentence", "punished"),
    "FINE": ("fined", "penalized", "levied"),
    "EXECUTE": ("executed", "hanged", "beheaded"),
    "EXTRADITE": ("extradited", "deported", "handed"),
    "ACQUIT": ("acquitted", "cleared", "exonerated"),
    "APPEAL": ("appealed", "challenged", "contested"),
    "PARDON": ("pardoned", "forgiven", "amnestied"),
}

ROLE_MARKERS: Dict[str, str] = {
    "PERSON": "involving", "PLACE": "in", "BUYER": "to", "SELLER": "from", "BENEFICIARY": "for",
    "PRICE": "at", "ARTIFACT": "carrying", "ORIGIN": "leaving", "DESTINATION": "toward", "GIVER": "via",
    "RECIPIENT": "unto", "MONEY": "worth", "ORG": "of", "AGENT": "by", "VICTIM": "hurting",
    "INSTRUMENT": "with", "ENTITY": "alongside", "ATTACKER": "led-by", "TARGET": "against",
    "DEFENDANT": "accusing", "ADJUDICATOR": "before", "PROSECUTOR": "pressed-by", "PLAINTIFF": "filed-by",
    "CRIME": "over", "POSITION": "as", "SENTENCE": "getting", "VEHICLE": "aboard", "TIME": "on",
}

# roles preferred as the pre-verbal subject, in order
SUBJECT_ROLES = ("ATTACKER", "AGENT", "DEFENDANT", "PLAINTIFF", "GIVER", "BUYER", "PERSON", "ENTITY", "ORG",
                 "VICTIM")

PARTNERS: Dict[str, str] = {
    "ATTACK": "DIE", "DIE": "ATTACK", "INJURE": "ATTACK", "ARREST-JAIL": "CHARGE-INDICT",
    "CHARGE-INDICT": "TRIAL-HEARING", "TRIAL-HEARING": "CONVICT", "CONVICT": "SENTENCE", "SENTENCE": "APPEAL",
    "MARRY": "BE-BORN", "START-POSITION": "END-POSITION", "END-POSITION": "START-POSITION",
    "TRANSFER-OWNERSHIP": "TRANSFER-MONEY", "TRANSPORT": "MEET", "ELECT": "START-POSITION",
    "MERGE-ORG": "END-ORG", "DECLARE-BANKRUPTCY": "END-ORG",
}

# (modifier tokens, head tokens, pos of modifier, pos of head); a mention is one modifier (if any) + one head
ENTITY_VOCAB: Dict[str, Tuple[Tuple[str, ...], Tuple[str, ...], str, str]] = {
    "PER": (("Mr.", "Ms.", "Dr."), ("Smith", "Jones", "Garcia", "Chen", "Okafor", "Ivanova", "Haddad", "Tanaka"),
            "NNP", "NNP"),
    "ORG": (("Acme", "Globex", "Initech", "Umbrella", "Tyrell", "Cyberdyne"), ("Corp",), "NNP", "NNP"),
    "GPE": ((), ("Paris", "Baghdad", "Lagos", "Lima", "Oslo", "Hanoi", "Quito", "Dublin"), "", "NNP"),
    "LOC": (("Nile", "Rhine", "Jordan", "Danube"), ("River", "Valley"), "NNP", "NNP"),
    "FAC": (("Golden", "Central", "Harbor", "Union"), ("Bridge", "Airport"), "NNP", "NNP"),
    "VEH": ((), ("truck", "jeep", "helicopter", "tanker"), "", "NN"),
    "WEA": ((), ("rifle", "missile", "grenade", "mortar"), "", "NN"),
    "VALUE": (("5", "12", "40", "300"), ("dollars", "years", "counts"), "CD", "NNS"),
    "TIME": ((), ("Monday", "Tuesday", "Friday", "January", "March", "October"), "", "NNP"),
}

DISTRACTOR_TYPES = ("ORG", "GPE")


def trigger_lexicon(schema: LabelSchema) -> Dict[str, Tuple[str, ...]]:
    """Three distinct words per event type; types without a curated entry get words built from their name."""
    taken = set(ROLE_MARKERS.values()) | {w.lower() for m, h, _, _ in ENTITY_VOCAB.values() for w in m + h}
    taken |= {"and", "according", "to", "visited", "."}
    out: Dict[str, Tuple[str, ...]] = {}
    for t in schema.event_types[1:]:
        base = t.lower().replace(" ", "-")
        words = TRIGGER_WORDS.get(t, (base, base + "ed", base + "ing"))
        unique = []
        for w in words:
            cand, n = w, 1
            while cand in taken:
                cand, n = f"{w}{n}", n + 1
            taken.add(cand)
            unique.append(cand)
        out[t] = tuple(unique)
    return out


def _vocab(entity_type: str):
    if entity_type in ENTITY_VOCAB:
        return ENTITY_VOCAB[entity_type]
    base = entity_type.lower()
    return (), tuple(f"{base}-{k}" for k in range(6)), "", "NN"


def subject_role(event_type: str, schema: LabelSchema) -> Optional[str]:
    roles = [r for r in schema.event_roles[event_type] if _fillers(r, schema)]
    for r in SUBJECT_ROLES:
        if r in roles:
            return r
    return min(roles, key=schema.role_index.get) if roles else None


def _fillers(role: str, schema: LabelSchema) -> List[str]:
    return sorted((a for a in schema.role_entities[role] if a != NONE), key=schema.entity_index.get)


def partner_of(event_type: str, schema: LabelSchema) -> str:
    if PARTNERS.get(event_type) in schema.event_index:
        return PARTNERS[event_type]
    types = schema.event_types[1:]
    return types[(types.index(event_type) + 1) % len(types)]


@dataclass
class _Sentence:
    """Tokens plus sentence-local mentions; dependency heads are token indices (-1 for the root)."""
    tokens: List[List[object]] = field(default_factory=list)  # [surface, pos, dep_head, dep_label]
    entities: List[Tuple[int, int, int, str]] = field(default_factory=list)  # start, end, head, type
    events: List[Tuple[int, str, List[Tuple[int, str]]]] = field(default_factory=list)  # trigger, type, args

    def word(self, surface: str, pos: str, head: int = -1, label: str = "root") -> int:
        self.tokens.append([surface, pos, head, label])
        return len(self.tokens) - 1

    def attach(self, tok: int, head: int, label: str) -> None:
        self.tokens[tok][2] = head
        self.tokens[tok][3] = label

    def mention(self, rng: np.random.Generator, entity_type: str) -> int:
        mods, heads, mod_pos, head_pos = _vocab(entity_type)
        start = len(self.tokens)
        mod = self.word(str(mods[int(rng.integers(len(mods)))]), mod_pos) if mods else None
        head = self.word(str(heads[int(rng.integers(len(heads)))]), head_pos)
        if mod is not None:
            self.attach(mod, head, "compound")
        self.entities.append((start, len(self.tokens), head, entity_type))
        return len(self.entities) - 1


class SyntheticCorpusGenerator:
    def __init__(self, schema: LabelSchema, cfg: Optional[SynthConfig] = None):
        if len(schema.event_types) < 2:
            raise ValueError("the schema has no event types to generate")
        self.schema = schema
        self.cfg = cfg or SynthConfig()
        self.triggers = trigger_lexicon(schema)
        self.subjects = {t: subject_role(t, schema) for t in schema.event_types[1:]}

    def _pick_type(self, rng: np.random.Generator, role: str) -> str:
        types = _fillers(role, self.schema)
        return types[int(rng.integers(len(types)))]

    def _arguments(self, rng: np.random.Generator, s: _Sentence, trigger: int, event_type: str) -> List[Tuple[int, str]]:
        args = []
        subject = self.subjects[event_type]
        for role in sorted(self.schema.event_roles[event_type], key=self.schema.role_index.get):
            if role == subject or not _fillers(role, self.schema):
                continue
            if rng.random() >= self.cfg.optional_role_rate:
                continue
            marker = s.word(ROLE_MARKERS.get(role, role.lower()), "IN")
            ent = s.mention(rng, self._pick_type(rng, role))
            head = s.entities[ent][2]
            s.attach(marker, head, "case")
            s.attach(head, trigger, "obl")
            args.append((ent, role))
        return args

    def _trigger(self, rng: np.random.Generator, s: _Sentence, event_type: str) -> int:
        words = self.triggers[event_type]
        return s.word(words[int(rng.integers(len(words)))], "VBD")

    def _event_sentence(self, rng: np.random.Generator) -> _Sentence:
        schema = self.schema
        s = _Sentence()
        t = schema.event_types[1 + int(rng.integers(schema.n_events - 1))]
        subject = self.subjects[t]
        subj_ent = s.mention(rng, self._pick_type(rng, subject)) if subject is not None else None
        trig = self._trigger(rng, s, t)
        args: List[Tuple[int, str]] = []
        if subj_ent is not None:
            s.attach(s.entities[subj_ent][2], trig, "nsubj")
            args.append((subj_ent, subject))
        args += self._arguments(rng, s, trig, t)
        s.events.append((trig, t, args))

        if rng.random() < self.cfg.partner_rate:
            u = partner_of(t, schema)
            conj = s.word("and", "CC")
            trig2 = self._trigger(rng, s, u)
            s.attach(conj, trig2, "cc")
            s.attach(trig2, trig, "conj")
            args2: List[Tuple[int, str]] = []
            subject2 = self.subjects[u]
            if subj_ent is not None and subject2 is not None and \
                    s.entities[subj_ent][3] in schema.role_entities[subject2]:
                args2.append((subj_ent, subject2))
            args2 += self._arguments(rng, s, trig2, u)
            s.events.append((trig2, u, args2))

        if rng.random() < self.cfg.distractor_rate:
            according = s.word("according", "VBG")
            to = s.word("to", "TO")
            types = [a for a in DISTRACTOR_TYPES if a in schema.entity_index] or list(schema.entity_types[1:])
            ent = s.mention(rng, types[int(rng.integers(len(types)))])
            head = s.entities[ent][2]
            s.attach(according, head, "case")
            s.attach(to, head, "case")
            s.attach(head, trig, "obl")
        s.word(".", ".", trig, "punct")
        return s

    def _entity_sentence(self, rng: np.random.Generator) -> _Sentence:
        s = _Sentence()
        types = list(self.schema.entity_types[1:])
        first = s.mention(rng, types[int(rng.integers(len(types)))])
        verb = s.word("visited", "VBD")
        s.attach(s.entities[first][2], verb, "nsubj")
        second = s.mention(rng, types[int(rng.integers(len(types)))])
        s.attach(s.entities[second][2], verb, "obj")
        s.word(".", ".", verb, "punct")
        return s

    def document(self, rng: np.random.Generator, doc_id: str) -> Document:
        cfg = self.cfg
        sentences: List[Tuple[Token, ...]] = []
        entities: List[EntityMention] = []
        events: List[EventMention] = []
        n = int(rng.integers(cfg.min_sentences, cfg.max_sentences + 1))
        for k in range(n):
            s = self._entity_sentence(rng) if rng.random() < cfg.entity_only_rate else self._event_sentence(rng)
            sentences.append(tuple(Token(str(w), str(w).lower(), pos, head, label) for w, pos, head, label in s.tokens))
            offset = len(entities)
            for start, end, head, etype in s.entities:
                entities.append(EntityMention(Span(k, start, end, head), etype))
            for trig, etype, args in s.events:
                events.append(EventMention(Span(k, trig, trig + 1, trig), etype,
                                           tuple(Argument(offset + e, r) for e, r in args)))
        return Document(doc_id, tuple(sentences), None, tuple(entities), tuple(events))

    def split(self, seed: int, split_idx: int, size: int) -> List[Document]:
        if size < 0:
            raise ValueError("split sizes must be >= 0")
        rng = np.random.default_rng([seed, split_idx])
        name = SPLITS[split_idx]
        return [self.document(rng, f"{name}-{k:04d}") for k in range(size)]


def gen_synth(seed: int, n_train: int, n_dev: int, n_test: int, schema: LabelSchema,
              cfg: Optional[SynthConfig] = None) -> Dict[str, List[Document]]:
    gen = SyntheticCorpusGenerator(schema, cfg)
    sizes = (n_train, n_dev, n_test)
    if any(n < 0 for n in sizes):
        raise ValueError("split sizes must be >= 0")
    return {name: gen.split(seed, idx, n) for idx, (name, n) in enumerate(zip(SPLITS, sizes))}


def write_synth(out_dir: str | Path, seed: int, sizes: Sequence[int], schema: LabelSchema,
                cfg: Optional[SynthConfig] = None) -> Dict[str, Path]:
    """Write train/dev/test JSONL files plus the schema they were generated under."""
    if len(sizes) != 3:
        raise ValueError("sizes must give the train, dev and test document counts")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    corpora = gen_synth(seed, *sizes, schema=schema, cfg=cfg)
    paths: Dict[str, Path] = {}
    for name, docs in corpora.items():
        paths[name] = out / f"{name}.jsonl"
        save_corpus(docs, paths[name])
    paths["schema"] = out / "schema.json"
    save_schema(schema, paths["schema"])
    logger.info("wrote synthetic corpus (seed %d, sizes %s) to %s", seed, tuple(sizes), out)
    return paths
