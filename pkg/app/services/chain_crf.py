# app/services/chain_crf.py
"""Linear-chain CRF over BIO tags.

Tag layout for labels ``l_0..l_{n-1}`` (NONE excluded): index 0 is ``O``,
``B-l_k`` is ``1 + 2k`` and ``I-l_k`` is ``2 + 2k``. Every transition is
allowed; a stray ``I-l`` that does not continue an ``l`` segment reads as
``O`` when segments are formed. Ties resolve toward the lower tag index.
"""
from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse
from scipy.special import logsumexp

from app.core.config import FeatureConfig, TrainConfig
from app.services.utils.corpus import CandidateSet, Document, EntityCandidate, Span, TriggerCandidate
from app.services.utils.features import HashedSpace, get_extractor
from app.services.utils.lbfgs import LbfgsResult, lbfgs_minimize
from app.services.utils.schema import NONE

logger = logging.getLogger(__name__)

OUTSIDE = "O"
NONE_FLOOR = 1e-12

GoldFn = Callable[[Document], Iterable[Tuple[Span, str]]]


def bio_tags(labels: Sequence[str]) -> Tuple[str, ...]:
    tags = [OUTSIDE]
    for lab in labels:
        if lab != NONE:
            tags += [f"B-{lab}", f"I-{lab}"]
    return tuple(tags)


def entity_spans(doc: Document) -> List[Tuple[Span, str]]:
    return [(e.span, e.type) for e in doc.gold_entities]


def trigger_spans(doc: Document) -> List[Tuple[Span, str]]:
    return [(ev.trigger, ev.type) for ev in doc.gold_events]


# --------------------------------------------------------------------------
# score-level algorithms (emissions L x T, transitions T x T)
# --------------------------------------------------------------------------

def _forward_backward_batch(E: np.ndarray, A: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """E is (B, L, T); returns alpha, beta (both B x L x T) and log Z (B,)."""
    _, L, _ = E.shape
    alpha = np.empty_like(E)
    alpha[:, 0] = E[:, 0]
    for t in range(1, L):
        alpha[:, t] = logsumexp(alpha[:, t - 1, :, None] + A[None], axis=1) + E[:, t]
    beta = np.zeros_like(E)
    for t in range(L - 2, -1, -1):
        beta[:, t] = logsumexp(A[None] + (E[:, t + 1] + beta[:, t + 1])[:, None, :], axis=2)
    return alpha, beta, logsumexp(alpha[:, -1], axis=1)


@dataclass(frozen=True)
class Lattice:
    emissions: np.ndarray
    transitions: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    log_z: float
    log_z_backward: float

    @property
    def n_tags(self) -> int:
        return self.emissions.shape[1]

    def node_marginals(self) -> np.ndarray:
        return np.exp(self.alpha + self.beta - self.log_z)

    def edge_marginals(self) -> np.ndarray:
        E, A = self.emissions, self.transitions
        if E.shape[0] < 2:
            return np.zeros((0, self.n_tags, self.n_tags))
        return np.exp(self.alpha[:-1, :, None] + A[None] + (E[1:] + self.beta[1:])[:, None, :] - self.log_z)

    def path_score(self, path: Sequence[int]) -> float:
        return path_score(self.emissions, self.transitions, path)

    def span_log_marginal(self, start: int, end: int, b: int, i: int) -> float:
        """log P(tags[start:end] = B, I, ..., I and tags[end] != I)."""
        E, A = self.emissions, self.transitions
        score = float(self.alpha[start, b])
        prev = b
        for t in range(start + 1, end):
            score += float(A[prev, i] + E[t, i])
            prev = i
        if end < E.shape[0]:
            nxt = A[prev] + E[end] + self.beta[end]
            score += float(logsumexp(np.delete(nxt, i)))
        return score - self.log_z

    def label_log_marginals(self, start: int, end: int) -> np.ndarray:
        """Span log-marginals over (NONE, l_0, ..., l_{n-1})."""
        n = (self.n_tags - 1) // 2
        out = np.empty(n + 1)
        for k in range(n):
            out[k + 1] = self.span_log_marginal(start, end, 1 + 2 * k, 2 + 2 * k)
        rest = 1.0 - float(np.exp(out[1:]).sum())
        out[0] = np.log(max(rest, NONE_FLOOR))
        return out


def forward_backward(emissions: np.ndarray, transitions: np.ndarray) -> Lattice:
    E = np.asarray(emissions, dtype=np.float64)
    if E.ndim != 2 or E.shape[0] == 0:
        raise ValueError("forward_backward needs a non-empty (length x tags) emission table")
    alpha, beta, log_z = _forward_backward_batch(E[None], transitions)
    log_z_b = float(logsumexp(E[0] + beta[0, 0]))
    return Lattice(E, transitions, alpha[0], beta[0], float(log_z[0]), log_z_b)


def path_score(emissions: np.ndarray, transitions: np.ndarray, path: Sequence[int]) -> float:
    path = np.asarray(path, dtype=np.int64)
    score = float(emissions[np.arange(len(path)), path].sum())
    if len(path) > 1:
        score += float(transitions[path[:-1], path[1:]].sum())
    return score


def viterbi_decode(emissions: np.ndarray, transitions: np.ndarray) -> Tuple[Tuple[int, ...], float]:
    L, T = emissions.shape
    delta = emissions[0].copy()
    back = np.zeros((L, T), dtype=np.int64)
    for t in range(1, L):
        cand = delta[:, None] + transitions
        back[t] = np.argmax(cand, axis=0)
        delta = cand[back[t], np.arange(T)] + emissions[t]
    last = int(np.argmax(delta))
    best = float(delta[last])
    path = [last]
    for t in range(L - 1, 0, -1):
        last = int(back[t, last])
        path.append(last)
    return tuple(reversed(path)), best


def kbest_decode(emissions: np.ndarray, transitions: np.ndarray, k: int) -> List[Tuple[Tuple[int, ...], float]]:
    """Exact k best paths, keeping a ranked list of the k best prefixes per (position, tag)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    L, T = emissions.shape
    scores = np.full((L, T, k), -np.inf)
    back_tag = np.full((L, T, k), -1, dtype=np.int64)
    back_rank = np.full((L, T, k), -1, dtype=np.int64)
    scores[0, :, 0] = emissions[0]
    for t in range(1, L):
        # rows ordered by (previous tag, previous rank): the stable sort breaks ties that way
        flat = (scores[t - 1][:, :, None] + transitions[:, None, :]).reshape(T * k, T)
        order = np.argsort(-flat, axis=0, kind="stable")[:k]
        top = np.take_along_axis(flat, order, axis=0)
        scores[t] = (top + emissions[t][None, :]).T
        back_tag[t] = (order // k).T
        back_rank[t] = (order % k).T

    last = scores[L - 1].reshape(T * k)
    out: List[Tuple[Tuple[int, ...], float]] = []
    for idx in np.argsort(-last, kind="stable")[:k]:
        if not np.isfinite(last[idx]):
            break
        tag, rank = divmod(int(idx), k)
        path = [tag]
        for t in range(L - 1, 0, -1):
            tag, rank = int(back_tag[t, tag, rank]), int(back_rank[t, tag, rank])
            path.append(tag)
        out.append((tuple(reversed(path)), float(last[idx])))
    return out


def tag_segments(path: Sequence[int]) -> List[Tuple[int, int, int]]:
    """Maximal (start, end, label_k) segments of a BIO tag path."""
    out: List[Tuple[int, int, int]] = []
    cur: Optional[List[int]] = None
    for pos, tag in enumerate(path):
        if tag != 0 and tag % 2 == 0 and cur is not None and cur[1] == (tag - 2) // 2:
            continue
        if cur is not None:
            out.append((cur[0], pos, cur[1]))
            cur = None
        if tag % 2 == 1:
            cur = [pos, (tag - 1) // 2]
    if cur is not None:
        out.append((cur[0], len(path), cur[1]))
    return out


# --------------------------------------------------------------------------
# model
# --------------------------------------------------------------------------

@dataclass
class ChainModel:
    labels: Tuple[str, ...]
    features: FeatureConfig
    space: HashedSpace
    emission: np.ndarray  # len(space) x n_tags
    transition: np.ndarray  # n_tags x n_tags

    @classmethod
    def zeros(cls, labels: Sequence[str], features: FeatureConfig, space: HashedSpace) -> "ChainModel":
        labels = tuple(lab for lab in labels if lab != NONE)
        n_tags = 1 + 2 * len(labels)
        return cls(labels, features, space, np.zeros((len(space), n_tags)), np.zeros((n_tags, n_tags)))

    @property
    def tags(self) -> Tuple[str, ...]:
        return bio_tags(self.labels)

    @property
    def n_tags(self) -> int:
        return 1 + 2 * len(self.labels)

    @property
    def params(self) -> np.ndarray:
        return np.concatenate([self.emission.ravel(), self.transition.ravel()])

    def with_params(self, theta: np.ndarray) -> "ChainModel":
        n = self.emission.size
        return ChainModel(self.labels, self.features, self.space,
                          theta[:n].reshape(self.emission.shape).copy(),
                          theta[n:].reshape(self.transition.shape).copy())

    def emissions(self, doc: Document, sent: int) -> np.ndarray:
        n = len(doc.sentences[sent])
        if len(self.space) == 0:
            return np.zeros((n, self.n_tags))
        X = self.space.rows(get_extractor(self.features).sentence_tokens(doc, sent))
        return np.asarray(X @ self.emission)

    def lattice(self, doc: Document, sent: int) -> Lattice:
        return forward_backward(self.emissions(doc, sent), self.transition)

    def to_payload(self) -> Dict[str, object]:
        return {
            "labels": list(self.labels),
            "features": self.features.model_dump(),
            "space": self.space.indices,
            "emission": self.emission,
            "transition": self.transition,
        }

    @classmethod
    def from_payload(cls, raw: Dict[str, object]) -> "ChainModel":
        return cls(tuple(raw["labels"]), FeatureConfig.model_validate(raw["features"]),
                   HashedSpace(np.asarray(raw["space"], dtype=np.int64)),
                   np.asarray(raw["emission"], dtype=np.float64), np.asarray(raw["transition"], dtype=np.float64))


class SpanCandidate(NamedTuple):
    span: Span
    label: str
    score: float  # span log-marginal of `label`
    label_scores: np.ndarray  # span log-marginals over (NONE,) + model.labels


def marginals(model: ChainModel, doc: Document, sent: int) -> Tuple[np.ndarray, np.ndarray, float]:
    lat = model.lattice(doc, sent)
    return lat.node_marginals(), lat.edge_marginals(), lat.log_z


def viterbi(model: ChainModel, doc: Document, sent: int) -> Tuple[Tuple[int, ...], float]:
    return viterbi_decode(model.emissions(doc, sent), model.transition)


def kbest(model: ChainModel, doc: Document, sent: int, k: int) -> List[Tuple[Tuple[int, ...], float]]:
    return kbest_decode(model.emissions(doc, sent), model.transition, k)


def span_type_log_marginal(model: ChainModel, doc: Document, span: Span, label: str) -> float:
    lat = model.lattice(doc, span.sentence)
    if label == NONE:
        return float(lat.label_log_marginals(span.start, span.end)[0])
    if label not in model.labels:
        raise ValueError(f"label {label!r} is not modelled by this CRF")
    k = model.labels.index(label)
    return lat.span_log_marginal(span.start, span.end, 1 + 2 * k, 2 + 2 * k)


def _candidates_from_paths(model: ChainModel, lat: Lattice, sent: int,
                           paths: Iterable[Sequence[int]]) -> List[SpanCandidate]:
    seen: Dict[Tuple[int, int], int] = {}
    for path in paths:
        for start, end, k in tag_segments(path):
            seen.setdefault((start, end), k)
    out = []
    for (start, end), k in sorted(seen.items()):
        scores = lat.label_log_marginals(start, end)
        out.append(SpanCandidate(Span(sent, start, end), model.labels[k], float(scores[k + 1]), scores))
    return out


def generate_candidates(model: ChainModel, doc: Document, k: int) -> List[SpanCandidate]:
    """Union of the segments in each sentence's k best paths, ordered by (sentence, start, end)."""
    out: List[SpanCandidate] = []
    for s, tokens in enumerate(doc.sentences):
        if not tokens:
            continue
        lat = model.lattice(doc, s)
        paths = [p for p, _ in kbest_decode(lat.emissions, lat.transitions, k)]
        out.extend(_candidates_from_paths(model, lat, s, paths))
    return out


def decode_spans(model: ChainModel, doc: Document) -> List[SpanCandidate]:
    """Viterbi segments only (the standalone tagger output)."""
    out: List[SpanCandidate] = []
    for s, tokens in enumerate(doc.sentences):
        if not tokens:
            continue
        lat = model.lattice(doc, s)
        path, _ = viterbi_decode(lat.emissions, lat.transitions)
        out.extend(_candidates_from_paths(model, lat, s, [path]))
    return out


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

def gold_tag_sequence(n_tokens: int, spans: Iterable[Tuple[Span, str]], labels: Sequence[str]) -> np.ndarray:
    """BIO tags for one sentence; overlapping gold spans keep the longer one (then the earlier)."""
    index = {lab: k for k, lab in enumerate(labels)}
    tags = np.zeros(n_tokens, dtype=np.int64)
    taken = np.zeros(n_tokens, dtype=bool)
    for span, label in sorted(spans, key=lambda x: (-(x[0].end - x[0].start), x[0].start)):
        if label not in index or taken[span.start:span.end].any():
            continue
        k = index[label]
        tags[span.start] = 1 + 2 * k
        tags[span.start + 1:span.end] = 2 + 2 * k
        taken[span.start:span.end] = True
    return tags


@dataclass
class _Bucket:
    X: sparse.csr_matrix  # (B * L) x n_features
    gold: np.ndarray  # B x L
    length: int


class ChainObjective:
    """Negative L2-regularised log-likelihood over ``theta = [emission.ravel(), transition.ravel()]``."""

    def __init__(self, model: ChainModel, buckets: List[_Bucket], l2: float):
        self.model = model
        self.buckets = buckets
        self.l2 = l2
        self.n_tags = model.n_tags
        self.n_features = len(model.space)
        T = self.n_tags
        emp_w = np.zeros((self.n_features, T))
        emp_a = np.zeros((T, T))
        for b in buckets:
            onehot = np.zeros((b.gold.size, T))
            onehot[np.arange(b.gold.size), b.gold.ravel()] = 1.0
            emp_w += np.asarray(b.X.T @ onehot)
            if b.length > 1:
                np.add.at(emp_a, (b.gold[:, :-1].ravel(), b.gold[:, 1:].ravel()), 1.0)
        self.empirical = np.concatenate([emp_w.ravel(), emp_a.ravel()])

    @classmethod
    def from_corpus(cls, docs: Sequence[Document], labels: Sequence[str], gold: GoldFn, features: FeatureConfig,
                    l2: float, space: Optional[HashedSpace] = None) -> "ChainObjective":
        labels = tuple(lab for lab in labels if lab != NONE)
        extractor = get_extractor(features)
        by_length: Dict[int, List[Tuple[list, np.ndarray]]] = defaultdict(list)
        for doc in docs:
            per_sent: Dict[int, List[Tuple[Span, str]]] = defaultdict(list)
            for span, label in gold(doc):
                per_sent[span.sentence].append((span, label))
            for s, tokens in enumerate(doc.sentences):
                if not tokens:
                    continue
                vectors = extractor.sentence_tokens(doc, s)
                by_length[len(tokens)].append((vectors, gold_tag_sequence(len(tokens), per_sent[s], labels)))
        if space is None:
            space = HashedSpace.from_vectors(v for items in by_length.values() for vecs, _ in items for v in vecs)
        buckets = []
        for length in sorted(by_length):
            items = by_length[length]
            X = space.rows([v for vecs, _ in items for v in vecs])
            buckets.append(_Bucket(X, np.stack([g for _, g in items]), length))
        return cls(ChainModel.zeros(labels, features, space), buckets, l2)

    @property
    def size(self) -> int:
        return self.n_features * self.n_tags + self.n_tags * self.n_tags

    def __call__(self, theta: np.ndarray) -> Tuple[float, np.ndarray]:
        T = self.n_tags
        n = self.n_features * T
        W = theta[:n].reshape(self.n_features, T)
        A = theta[n:].reshape(T, T)
        grad_w = np.zeros_like(W)
        grad_a = np.zeros_like(A)
        log_z_total = 0.0
        for b in self.buckets:
            B, L = b.gold.shape
            E = np.asarray(b.X @ W).reshape(B, L, T)
            alpha, beta, log_z = _forward_backward_batch(E, A)
            log_z_total += float(log_z.sum())
            node = np.exp(alpha + beta - log_z[:, None, None])
            grad_w += np.asarray(b.X.T @ node.reshape(B * L, T))
            if L > 1:
                edge = np.exp(alpha[:, :-1, :, None] + A[None, None]
                              + (E[:, 1:] + beta[:, 1:])[:, :, None, :] - log_z[:, None, None, None])
                grad_a += edge.sum(axis=(0, 1))
        value = log_z_total - float(theta @ self.empirical) + self.l2 * float(theta @ theta)
        grad = np.concatenate([grad_w.ravel(), grad_a.ravel()]) - self.empirical + 2.0 * self.l2 * theta
        return value, grad


def crf_objective_and_gradient(model: ChainModel, corpus: Sequence[Document], l2: float,
                               gold: GoldFn = entity_spans) -> Tuple[float, np.ndarray]:
    objective = ChainObjective.from_corpus(corpus, model.labels, gold, model.features, l2, space=model.space)
    return objective(model.params)


def fit_chain_crf(docs: Sequence[Document], labels: Sequence[str], gold: GoldFn, features: FeatureConfig,
                  train: TrainConfig, l2: Optional[float] = None, name: str = "crf") -> Tuple[ChainModel, LbfgsResult]:
    objective = ChainObjective.from_corpus(docs, labels, gold, features, train.l2 if l2 is None else l2)
    logger.info("%s: %d labels, %d active features, %d parameters", name, len(objective.model.labels),
                objective.n_features, objective.size)
    result = lbfgs_minimize(objective, np.zeros(objective.size), train)
    return objective.model.with_params(result.params), result


def build_candidates(doc: Document, entity_model: ChainModel, trigger_model: ChainModel,
                     entity_k: int, trigger_k: int) -> CandidateSet:
    """Trigger and entity candidates from the two taggers' k-best segments."""
    triggers = [TriggerCandidate(c.span, c.label, c.score) for c in generate_candidates(trigger_model, doc, trigger_k)]
    entities = [EntityCandidate(c.span, c.label, float(np.exp(c.score)), c.label_scores)
                for c in generate_candidates(entity_model, doc, entity_k)]
    return CandidateSet.build(triggers, entities)
