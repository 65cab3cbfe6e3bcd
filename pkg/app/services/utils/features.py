# app/services/utils/features.py
"""Sparse hashed feature extraction.

A feature is a ``family=value`` string mapped to an index with an unsigned
64-bit BLAKE2b hash (8-byte digest read little-endian) masked to
``hash_bits``. The hash is fixed so trained bundles stay portable; changing
it requires bumping ``HASH_VERSION`` (stored in every bundle).

Providers are plain functions registered per extraction context with the
``@provider`` decorator. ``FeatureConfig.providers`` picks which ones run.
"""
from __future__ import annotations

import hashlib
import math
from collections import deque
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse

from app.core.config import FeatureConfig
from app.core.errors import CorpusError
from app.services.utils.corpus import Document, Span, Token

HASH_VERSION = "blake2b-64-le-v1"

BOS = "<S>"
EOS = "</S>"
PRONOUNS = frozenset(
    "i me my mine we us our ours you your yours he him his she her hers it its they them their theirs "
    "this that these those who whom whose which".split()
)
PRONOUN_TAGS = frozenset({"PRP", "PRP$", "WP", "WP$", "PRON"})
SUBJ_LABELS = frozenset({"nsubj", "nsubjpass", "nsubj:pass", "csubj", "agent"})
OBJ_LABELS = frozenset({"dobj", "obj", "iobj", "nmod:poss"})
CLAUSE_LABELS = frozenset({"ccomp", "advcl", "acl:relcl", "relcl", "parataxis", "csubj", "mark"})
MAX_PATH = 4


@lru_cache(maxsize=1 << 20)
def _hash64(key: str) -> int:
    return int.from_bytes(hashlib.blake2b(key.encode("utf-8"), digest_size=8).digest(), "little")


def feature_index(key: str, hash_bits: int) -> int:
    return _hash64(key) & ((1 << hash_bits) - 1)


@dataclass(frozen=True)
class FeatureVector:
    indices: np.ndarray  # int64, strictly increasing
    values: np.ndarray  # float64, finite, non-zero

    def __len__(self) -> int:
        return int(self.indices.shape[0])

    def to_pairs(self) -> List[Tuple[int, float]]:
        return list(zip(self.indices.tolist(), self.values.tolist()))

    def to_bytes(self) -> bytes:
        return self.indices.astype("<i8").tobytes() + self.values.astype("<f8").tobytes()

    @classmethod
    def empty(cls) -> "FeatureVector":
        return cls(np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.float64))


class FeatureBuilder:
    def __init__(self, hash_bits: int):
        self.hash_bits = hash_bits
        self._acc: Dict[int, float] = {}

    def add(self, family: str, value: object, weight: float = 1.0) -> None:
        idx = feature_index(f"{family}={value}", self.hash_bits)
        self._acc[idx] = self._acc.get(idx, 0.0) + float(weight)

    def build(self) -> FeatureVector:
        items = sorted((i, v) for i, v in self._acc.items() if v != 0.0 and math.isfinite(v))
        if not items:
            return FeatureVector.empty()
        idx, vals = zip(*items)
        return FeatureVector(np.asarray(idx, dtype=np.int64), np.asarray(vals, dtype=np.float64))


# --------------------------------------------------------------------------
# resources
# --------------------------------------------------------------------------

def load_lexicon(path: str | Path) -> Dict[str, Tuple[str, ...]]:
    """TSV ``key<TAB>tag1,tag2``; keys are matched lowercased."""
    out: Dict[str, Tuple[str, ...]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            if "\t" not in line:
                raise CorpusError(f"lexicon {path}: expected key<TAB>tags", line=lineno)
            key, tags = line.split("\t", 1)
            merged = set(out.get(key.lower(), ())) | {t.strip() for t in tags.split(",") if t.strip()}
            out[key.lower()] = tuple(sorted(merged))
    return out


def load_embeddings(path: str | Path) -> Dict[str, np.ndarray]:
    """Text ``word v1 v2 ...``; every vector must share one dimensionality."""
    out: Dict[str, np.ndarray] = {}
    dim: Optional[int] = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            try:
                vec = np.asarray([float(x) for x in parts[1:]], dtype=np.float64)
            except ValueError as e:
                raise CorpusError(f"embeddings {path}: {e}", line=lineno) from e
            if dim is None:
                dim = vec.shape[0]
            if vec.shape[0] != dim:
                raise CorpusError(f"embeddings {path}: expected {dim} components, got {vec.shape[0]}", line=lineno)
            if not np.all(np.isfinite(vec)):
                raise CorpusError(f"embeddings {path}: non-finite component", line=lineno)
            out[parts[0]] = vec
    return out


# --------------------------------------------------------------------------
# provider registry
# --------------------------------------------------------------------------

CONTEXTS = ("trigger", "argument", "entity", "pair", "token")
_PROVIDERS: Dict[str, Dict[str, Callable]] = {c: {} for c in CONTEXTS}


def provider(name: str, *contexts: str):
    def register(fn: Callable) -> Callable:
        for ctx in contexts:
            _PROVIDERS[ctx][name] = fn
        return fn
    return register


def registered_providers(context: str) -> List[str]:
    return sorted(_PROVIDERS[context])


class FeatureExtractor:
    def __init__(self, cfg: FeatureConfig):
        self.cfg = cfg
        self.enabled = list(cfg.providers)
        self.lexicons = {name: load_lexicon(path) for name, path in sorted(cfg.lexicons.items())}
        self.embeddings = load_embeddings(cfg.embeddings) if cfg.embeddings else {}

    # ---- resource lookups
    def lexicon_tags(self, *keys: str) -> List[str]:
        tags = set()
        for lex in self.lexicons.values():
            for key in keys:
                tags.update(lex.get(key.lower(), ()))
        return sorted(tags)

    def token_tags(self, tok: Token) -> List[str]:
        return self.lexicon_tags(tok.surface, tok.norm)

    def embedding(self, tok: Token) -> Optional[np.ndarray]:
        for key in (tok.surface, tok.surface.lower(), tok.norm):
            vec = self.embeddings.get(key)
            if vec is not None:
                return vec
        return None

    # ---- the five extraction contexts
    def _run(self, context: str, *args) -> FeatureVector:
        out = FeatureBuilder(self.cfg.hash_bits)
        table = _PROVIDERS[context]
        for name in self.enabled:
            fn = table.get(name)
            if fn is not None:
                fn(self, out, *args)
        return out.build()

    def trigger(self, doc: Document, trigger: Span) -> FeatureVector:
        return self._run("trigger", doc, trigger)

    def argument(self, doc: Document, trigger: Span, entity: Span) -> FeatureVector:
        if trigger.sentence != entity.sentence:
            raise ValueError("argument features need co-sentential spans")
        return self._run("argument", doc, trigger, entity)

    def entity(self, doc: Document, entity: Span, predicted: Optional[Tuple[str, float]] = None) -> FeatureVector:
        return self._run("entity", doc, entity, predicted)

    def pair(self, doc: Document, i: Span, j: Span) -> FeatureVector:
        return self._run("pair", doc, i, j)

    def token(self, doc: Document, sent: int, tok: int) -> FeatureVector:
        return self._run("token", doc, sent, tok)

    def sentence_tokens(self, doc: Document, sent: int) -> List[FeatureVector]:
        return [self.token(doc, sent, t) for t in range(len(doc.sentences[sent]))]


_EXTRACTORS: Dict[str, FeatureExtractor] = {}


def get_extractor(cfg: FeatureConfig) -> FeatureExtractor:
    key = cfg.fingerprint_payload()
    ex = _EXTRACTORS.get(key)
    if ex is None:
        ex = _EXTRACTORS[key] = FeatureExtractor(cfg)
    return ex


def trigger_features(doc: Document, trigger: Span, cfg: FeatureConfig) -> FeatureVector:
    return get_extractor(cfg).trigger(doc, trigger)


def argument_features(doc: Document, trigger: Span, entity: Span, cfg: FeatureConfig) -> FeatureVector:
    return get_extractor(cfg).argument(doc, trigger, entity)


def entity_features(doc: Document, entity: Span, cfg: FeatureConfig,
                    predicted: Optional[Tuple[str, float]] = None) -> FeatureVector:
    return get_extractor(cfg).entity(doc, entity, predicted)


def pair_relational_features(doc: Document, i: Span, j: Span, cfg: FeatureConfig) -> FeatureVector:
    return get_extractor(cfg).pair(doc, i, j)


def token_features(doc: Document, sent: int, tok: int, cfg: FeatureConfig) -> FeatureVector:
    return get_extractor(cfg).token(doc, sent, tok)


# --------------------------------------------------------------------------
# syntactic helpers
# --------------------------------------------------------------------------

def word_shape(surface: str) -> str:
    if surface.isdigit():
        return "all_digits"
    if surface.isalpha() and surface.isupper():
        return "all_caps"
    if surface[:1].isupper():
        return "init_cap"
    if surface.islower():
        return "lower"
    return "mixed"


def _window(sent: Sequence[Token], pos: int, offset: int) -> str:
    k = pos + offset
    if k < 0:
        return BOS
    if k >= len(sent):
        return EOS
    return sent[k].norm


def _children(sent: Sequence[Token], head: int) -> List[int]:
    return [c for c, tok in enumerate(sent) if tok.dep_head == head]


def governed(sent: Sequence[Token], head: int, labels: frozenset) -> List[int]:
    return [c for c in _children(sent, head) if (sent[c].dep_label or "") in labels]


def _has_deps(sent: Sequence[Token]) -> bool:
    return any(tok.dep_head is not None for tok in sent)


def dependency_path(sent: Sequence[Token], src: int, dst: int, max_len: int = MAX_PATH) -> Optional[str]:
    """Shortest path between two tokens of a dependency tree as ``<label`` (up) / ``>label`` (down) steps."""
    if src == dst:
        return ""
    adj: Dict[int, List[Tuple[int, str]]] = {i: [] for i in range(len(sent))}
    for child, tok in enumerate(sent):
        if tok.dep_head is not None and tok.dep_head >= 0:
            label = tok.dep_label or "dep"
            adj[child].append((tok.dep_head, "<" + label))
            adj[tok.dep_head].append((child, ">" + label))
    prev: Dict[int, Tuple[int, str]] = {src: (-1, "")}
    queue = deque([src])
    while queue:
        node = queue.popleft()
        if node == dst:
            break
        for nxt, step in adj[node]:
            if nxt not in prev:
                prev[nxt] = (node, step)
                queue.append(nxt)
    if dst not in prev:
        return None
    steps: List[str] = []
    node = dst
    while node != src:
        node, step = prev[node][0], prev[node][1]
        steps.append(step)
    if len(steps) > max_len:
        return None
    return "".join(reversed(steps))


def tokens_linked(doc: Document, a: Tuple[int, int], b: Tuple[int, int]) -> bool:
    """Same token, same coreference chain, or (without chains) the same lemma."""
    if a == b:
        return True
    if doc.coref_chains is not None:
        for chain in doc.coref_chains:
            in_a = any(s.sentence == a[0] and s.start <= a[1] < s.end for s in chain)
            if in_a and any(s.sentence == b[0] and s.start <= b[1] < s.end for s in chain):
                return True
        return False
    return doc.sentences[a[0]][a[1]].norm == doc.sentences[b[0]][b[1]].norm


def _shared(doc: Document, i: Span, j: Span, labels: frozenset) -> bool:
    si, sj = doc.sentences[i.sentence], doc.sentences[j.sentence]
    left = [(i.sentence, t) for t in governed(si, i.head_token, labels)]
    right = [(j.sentence, t) for t in governed(sj, j.head_token, labels)]
    return any(tokens_linked(doc, a, b) for a in left for b in right)


def shares_subject_or_object(doc: Document, i: Span, j: Span) -> bool:
    return _shared(doc, i, j, SUBJ_LABELS) or _shared(doc, i, j, OBJ_LABELS)


def _relpos(trigger: Span, entity: Span) -> str:
    if entity.end <= trigger.start:
        return "before"
    if entity.start >= trigger.end:
        return "after"
    return "contain"


# --------------------------------------------------------------------------
# providers
# --------------------------------------------------------------------------

@provider("bias", "trigger", "argument", "entity", "pair", "token")
def _bias(ex: FeatureExtractor, out: FeatureBuilder, *args) -> None:
    out.add("bias", 1)


@provider("lemma", "trigger")
def _trigger_lemma(ex, out, doc: Document, span: Span) -> None:
    sent = doc.sentences[span.sentence]
    for t in span.tokens():
        out.add("trig_lemma", sent[t].norm)
    out.add("trig_head", sent[span.head_token].norm)


@provider("context", "trigger")
def _trigger_context(ex, out, doc: Document, span: Span) -> None:
    sent = doc.sentences[span.sentence]
    head = span.head_token
    for off in range(-ex.cfg.window, ex.cfg.window + 1):
        if off:
            out.add(f"trig_ctx[{off}]", _window(sent, head, off))


@provider("lexicon", "trigger")
def _trigger_lexicon(ex, out, doc: Document, span: Span) -> None:
    for tag in ex.token_tags(doc.sentences[span.sentence][span.head_token]):
        out.add("trig_lex", tag)


@provider("dependency", "trigger")
def _trigger_dependency(ex, out, doc: Document, span: Span) -> None:
    sent = doc.sentences[span.sentence]
    head = span.head_token
    tok = sent[head]
    if tok.dep_head is not None:
        label = tok.dep_label or "dep"
        governor = sent[tok.dep_head].norm if tok.dep_head >= 0 else "ROOT"
        out.add("trig_dep_up", label)
        out.add("trig_dep_up", f"{label}:{governor}")
    for child in _children(sent, head):
        label = sent[child].dep_label or "dep"
        out.add("trig_dep_down", label)
        out.add("trig_dep_down", f"{label}:{sent[child].norm}")


@provider("pronoun", "trigger")
def _trigger_pronoun(ex, out, doc: Document, span: Span) -> None:
    tok = doc.sentences[span.sentence][span.head_token]
    if tok.pos in PRONOUN_TAGS or tok.surface.lower() in PRONOUNS:
        out.add("trig_pronoun", 1)


def _add_embedding(ex: FeatureExtractor, out: FeatureBuilder, family: str, tok: Token) -> None:
    vec = ex.embedding(tok)
    if vec is None:
        return
    for k, v in enumerate(vec):
        if v != 0.0:
            out.add(f"{family}[{k}]", "", float(v))


@provider("embedding", "trigger")
def _trigger_embedding(ex, out, doc: Document, span: Span) -> None:
    _add_embedding(ex, out, "trig_emb", doc.sentences[span.sentence][span.head_token])


@provider("lemma", "argument")
def _argument_lemma(ex, out, doc: Document, trigger: Span, entity: Span) -> None:
    sent = doc.sentences[trigger.sentence]
    for t in entity.tokens():
        out.add("arg_ent_lemma", sent[t].norm)
    out.add("arg_ent_head", sent[entity.head_token].norm)
    for t in trigger.tokens():
        out.add("arg_trig_lemma", sent[t].norm)
    out.add("arg_ent_prev", _window(sent, entity.start, -1))
    lo, hi = min(trigger.end, entity.end), max(trigger.start, entity.start)
    for t in range(lo, hi):
        out.add("arg_between", sent[t].norm)


@provider("position", "argument")
def _argument_position(ex, out, doc: Document, trigger: Span, entity: Span) -> None:
    pos = _relpos(trigger, entity)
    out.add("relpos", pos)
    head = doc.sentences[trigger.sentence][trigger.head_token].norm
    out.add("arg_trig_relpos", f"{head}|{pos}")


@provider("clause", "argument")
def _argument_clause(ex, out, doc: Document, trigger: Span, entity: Span) -> None:
    sent = doc.sentences[trigger.sentence]
    if not _has_deps(sent):
        return
    lo, hi = min(trigger.end, entity.end), max(trigger.start, entity.start)
    boundary = any((sent[t].dep_label or "") in CLAUSE_LABELS for t in range(lo, hi))
    out.add("arg_same_clause", 0 if boundary else 1)


@provider("path", "argument")
def _argument_path(ex, out, doc: Document, trigger: Span, entity: Span) -> None:
    sent = doc.sentences[trigger.sentence]
    if not _has_deps(sent):
        return
    path = dependency_path(sent, trigger.head_token, entity.head_token)
    if path is not None:
        out.add("arg_dep_path", path)


@provider("lemma", "entity")
def _entity_lemma(ex, out, doc: Document, span: Span, predicted) -> None:
    sent = doc.sentences[span.sentence]
    for t in span.tokens():
        out.add("ent_lemma", sent[t].norm)
    out.add("ent_head", sent[span.head_token].norm)
    out.add("ent_prev", _window(sent, span.start, -1))


@provider("shape", "entity")
def _entity_shape(ex, out, doc: Document, span: Span, predicted) -> None:
    out.add("ent_shape", word_shape(doc.sentences[span.sentence][span.head_token].surface))


@provider("lexicon", "entity")
def _entity_lexicon(ex, out, doc: Document, span: Span, predicted) -> None:
    sent = doc.sentences[span.sentence]
    phrase = " ".join(sent[t].surface for t in span.tokens())
    head = sent[span.head_token]
    for tag in ex.lexicon_tags(phrase, head.surface, head.norm):
        out.add("ent_lex", tag)


@provider("prediction", "entity")
def _entity_prediction(ex, out, doc: Document, span: Span, predicted) -> None:
    if predicted is None:
        return
    label, confidence = predicted
    out.add("crf_type", label)
    out.add("crf_conf_bin", f"{math.floor(min(max(confidence, 0.0), 1.0) * 10 + 1e-9) / 10:.1f}")


@provider("lemma", "pair")
def _pair_lemma(ex, out, doc: Document, i: Span, j: Span) -> None:
    if doc.sentences[i.sentence][i.head_token].norm == doc.sentences[j.sentence][j.head_token].norm:
        out.add("pair_same_lemma", 1)


@provider("relational", "pair")
def _pair_relational(ex, out, doc: Document, i: Span, j: Span) -> None:
    if i.sentence == j.sentence:
        sent = doc.sentences[i.sentence]
        hi, hj = i.head_token, j.head_token
        if (sent[hi].dep_head == hj and sent[hi].dep_label == "conj") or \
                (sent[hj].dep_head == hi and sent[hj].dep_label == "conj"):
            out.add("pair_conj", 1)
    if _shared(doc, i, j, SUBJ_LABELS):
        out.add("pair_shared_subj", 1)
    if _shared(doc, i, j, OBJ_LABELS):
        out.add("pair_shared_obj", 1)
    ti = set(ex.token_tags(doc.sentences[i.sentence][i.head_token]))
    tj = set(ex.token_tags(doc.sentences[j.sentence][j.head_token]))
    if ti & tj:
        out.add("pair_shared_frame", 1)


@provider("lemma", "token")
def _token_word(ex, out, doc: Document, sent: int, tok: int) -> None:
    token = doc.sentences[sent][tok]
    out.add("w", token.norm)
    out.add("suf3", token.surface.lower()[-3:])


@provider("pos", "token")
def _token_pos(ex, out, doc: Document, sent: int, tok: int) -> None:
    token = doc.sentences[sent][tok]
    if token.pos:
        out.add("pos", token.pos)


@provider("context", "token")
def _token_context(ex, out, doc: Document, sent: int, tok: int) -> None:
    tokens = doc.sentences[sent]
    for off in range(-ex.cfg.window, ex.cfg.window + 1):
        if off:
            out.add(f"w[{off}]", _window(tokens, tok, off))


@provider("shape", "token")
def _token_shape(ex, out, doc: Document, sent: int, tok: int) -> None:
    out.add("shape", word_shape(doc.sentences[sent][tok].surface))


@provider("gazetteer", "token")
def _token_gazetteer(ex, out, doc: Document, sent: int, tok: int) -> None:
    for tag in ex.token_tags(doc.sentences[sent][tok]):
        out.add("gaz", tag)


@provider("embedding", "token")
def _token_embedding(ex, out, doc: Document, sent: int, tok: int) -> None:
    _add_embedding(ex, out, "emb", doc.sentences[sent][tok])


def stack_rows(vectors: Iterable[FeatureVector]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """CSR pieces (indptr, hashed indices, values) for a sequence of vectors."""
    vectors = list(vectors)
    indptr = np.zeros(len(vectors) + 1, dtype=np.int64)
    if vectors:
        indptr[1:] = np.cumsum([len(v) for v in vectors])
        idx = np.concatenate([v.indices for v in vectors]) if indptr[-1] else np.zeros(0, dtype=np.int64)
        val = np.concatenate([v.values for v in vectors]) if indptr[-1] else np.zeros(0, dtype=np.float64)
    else:
        idx, val = np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.float64)
    return indptr, idx, val


@dataclass(frozen=True)
class HashedSpace:
    """Sorted hashed indices seen in training; weight matrices keep one row per index.

    Indices outside the space would carry weight exactly 0 under zero
    initialisation and L2, so dropping them at scoring time is lossless.
    """

    indices: np.ndarray

    def __len__(self) -> int:
        return int(self.indices.shape[0])

    @classmethod
    def from_vectors(cls, vectors: Iterable[FeatureVector]) -> "HashedSpace":
        parts = [v.indices for v in vectors]
        if not parts:
            return cls(np.zeros(0, dtype=np.int64))
        return cls(np.unique(np.concatenate(parts)).astype(np.int64))

    def rows(self, vectors: Sequence[FeatureVector]) -> sparse.csr_matrix:
        indptr, idx, val = stack_rows(vectors)
        n = len(vectors)
        if len(self) == 0 or idx.size == 0:
            return sparse.csr_matrix((n, len(self)), dtype=np.float64)
        row = np.repeat(np.arange(n), np.diff(indptr))
        pos = np.searchsorted(self.indices, idx)
        pos_clip = np.minimum(pos, len(self) - 1)
        keep = self.indices[pos_clip] == idx
        return sparse.csr_matrix((val[keep], (row[keep], pos_clip[keep])), shape=(n, len(self)))
