# app/services/event_pair.py
"""Log-linear distribution over the event types of a related trigger pair.

score(t, t') = x_i . W[(t, t')] + x_i' . W[(t', t)] + rel . V[{t, t'}]

where x_* are trigger features, rel the relational pair features and
{t, t'} the unordered label pair (stored at cell (min, max)).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse
from scipy.special import logsumexp

from app.core.config import FeatureConfig, TrainConfig
from app.services.utils.corpus import CandidateSet, Document, Span
from app.services.utils.features import FeatureVector, HashedSpace, get_extractor, shares_subject_or_object
from app.services.utils.lbfgs import LbfgsResult, lbfgs_minimize
from app.services.utils.schema import NONE, LabelSchema

logger = logging.getLogger(__name__)


def select_pairs(doc: Document, triggers: Sequence[Span]) -> List[Tuple[int, int]]:
    """Same-sentence pairs plus cross-sentence pairs sharing a (coreferent) subject or object."""
    out = []
    for a in range(len(triggers)):
        for b in range(a + 1, len(triggers)):
            ta, tb = triggers[a], triggers[b]
            if ta.sentence == tb.sentence or shares_subject_or_object(doc, ta, tb):
                out.append((a, b))
    return out


@dataclass
class PairParams:
    features: FeatureConfig
    n_events: int
    trigger_space: HashedSpace
    relation_space: HashedSpace
    directed: np.ndarray  # trigger features x E^2, cell t * E + t'
    undirected: np.ndarray  # relational features x E^2, only cells (min, max) are used

    @classmethod
    def zeros(cls, n_events: int, features: FeatureConfig, trigger_space: HashedSpace,
              relation_space: HashedSpace) -> "PairParams":
        cells = n_events * n_events
        return cls(features, n_events, trigger_space, relation_space,
                   np.zeros((len(trigger_space), cells)), np.zeros((len(relation_space), cells)))

    @cached_property
    def swap(self) -> np.ndarray:
        t, u = np.divmod(np.arange(self.n_events ** 2), self.n_events)
        return u * self.n_events + t

    @cached_property
    def unordered(self) -> np.ndarray:
        t, u = np.divmod(np.arange(self.n_events ** 2), self.n_events)
        return np.minimum(t, u) * self.n_events + np.maximum(t, u)

    @cached_property
    def fold(self) -> sparse.csr_matrix:
        n = self.n_events ** 2
        return sparse.csr_matrix((np.ones(n), (np.arange(n), self.unordered)), shape=(n, n))

    @property
    def params(self) -> np.ndarray:
        return np.concatenate([self.directed.ravel(), self.undirected.ravel()])

    def split(self, theta: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        n = self.directed.size
        return theta[:n].reshape(self.directed.shape), theta[n:].reshape(self.undirected.shape)

    def with_params(self, theta: np.ndarray) -> "PairParams":
        d, u = self.split(theta)
        return PairParams(self.features, self.n_events, self.trigger_space, self.relation_space, d.copy(), u.copy())

    def scores(self, x_i: sparse.csr_matrix, x_j: sparse.csr_matrix, rel: sparse.csr_matrix,
               directed: Optional[np.ndarray] = None, undirected: Optional[np.ndarray] = None) -> np.ndarray:
        """Row b holds the flattened E x E score table of pair b."""
        d = self.directed if directed is None else directed
        u = self.undirected if undirected is None else undirected
        return (_dense(x_i @ d) + _dense(x_j @ d)[:, self.swap] + _dense(rel @ u)[:, self.unordered])

    def to_payload(self) -> Dict[str, object]:
        return {
            "features": self.features.model_dump(),
            "n_events": self.n_events,
            "trigger_space": self.trigger_space.indices,
            "relation_space": self.relation_space.indices,
            "directed": self.directed,
            "undirected": self.undirected,
        }

    @classmethod
    def from_payload(cls, raw: Dict[str, object]) -> "PairParams":
        return cls(FeatureConfig.model_validate(raw["features"]), int(raw["n_events"]),
                   HashedSpace(np.asarray(raw["trigger_space"], dtype=np.int64)),
                   HashedSpace(np.asarray(raw["relation_space"], dtype=np.int64)),
                   np.asarray(raw["directed"], dtype=np.float64), np.asarray(raw["undirected"], dtype=np.float64))


def _dense(x) -> np.ndarray:
    return np.asarray(x.todense() if sparse.issparse(x) else x)


def _pair_rows(params: PairParams, doc: Document, i: Span, j: Span):
    ex = get_extractor(params.features)
    return (params.trigger_space.rows([ex.trigger(doc, i)]), params.trigger_space.rows([ex.trigger(doc, j)]),
            params.relation_space.rows([ex.pair(doc, i, j)]))


def pair_log_table(params: PairParams, doc: Document, i: Span, j: Span) -> np.ndarray:
    """E x E table of log p(t_i = t, t_j = t')."""
    s = params.scores(*_pair_rows(params, doc, i, j))[0]
    return (s - logsumexp(s)).reshape(params.n_events, params.n_events)


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PairInstance:
    first: FeatureVector
    second: FeatureVector
    relation: FeatureVector
    gold: Tuple[int, int]


def collect_pair_instances(pairs: Sequence[Tuple[Document, CandidateSet]], schema: LabelSchema,
                           features: FeatureConfig, include_none_pairs: bool = True) -> List[PairInstance]:
    ex = get_extractor(features)
    out: List[PairInstance] = []
    for doc, cands in pairs:
        gold_type = {}
        for ev in doc.gold_events:
            gold_type.setdefault(ev.trigger.key, ev.type)
        spans = [c.span for c in cands.triggers]
        for a, b in select_pairs(doc, spans):
            ta = gold_type.get(spans[a].key, NONE)
            tb = gold_type.get(spans[b].key, NONE)
            if not include_none_pairs and ta == NONE and tb == NONE:
                continue
            out.append(PairInstance(ex.trigger(doc, spans[a]), ex.trigger(doc, spans[b]),
                                    ex.pair(doc, spans[a], spans[b]),
                                    (schema.event_index[ta], schema.event_index[tb])))
    return out


class PairObjective:
    def __init__(self, template: PairParams, instances: Sequence[PairInstance], l2: float):
        if not instances:
            raise ValueError("no event pairs in the training corpus")
        self.template = template
        self.l2 = l2
        self.x_i = template.trigger_space.rows([p.first for p in instances])
        self.x_j = template.trigger_space.rows([p.second for p in instances])
        self.rel = template.relation_space.rows([p.relation for p in instances])
        E = template.n_events
        self.gold = np.array([a * E + b for a, b in (p.gold for p in instances)], dtype=np.int64)

    @property
    def size(self) -> int:
        return self.template.directed.size + self.template.undirected.size

    def __call__(self, theta: np.ndarray) -> Tuple[float, np.ndarray]:
        tp = self.template
        d, u = tp.split(theta)
        s = tp.scores(self.x_i, self.x_j, self.rel, d, u)
        log_z = logsumexp(s, axis=1)
        rows = np.arange(len(self.gold))
        value = float(log_z.sum() - s[rows, self.gold].sum()) + self.l2 * float(theta @ theta)
        delta = np.exp(s - log_z[:, None])
        delta[rows, self.gold] -= 1.0
        grad_d = _dense(self.x_i.T @ delta) + _dense(self.x_j.T @ delta[:, tp.swap])
        grad_u = _dense(self.rel.T @ _dense(delta @ tp.fold))
        grad = np.concatenate([grad_d.ravel(), grad_u.ravel()]) + 2.0 * self.l2 * theta
        return value, grad


def template_for(instances: Sequence[PairInstance], schema: LabelSchema, features: FeatureConfig) -> PairParams:
    return PairParams.zeros(
        schema.n_events, features,
        HashedSpace.from_vectors(v for p in instances for v in (p.first, p.second)),
        HashedSpace.from_vectors(p.relation for p in instances),
    )


def ep_objective_and_gradient(params: PairParams, instances: Sequence[PairInstance],
                              l2: float) -> Tuple[float, np.ndarray]:
    return PairObjective(params, instances, l2)(params.params)


def fit_event_pair(instances: Sequence[PairInstance], schema: LabelSchema, features: FeatureConfig,
                   train: TrainConfig, l2: Optional[float] = None) -> Tuple[PairParams, LbfgsResult]:
    objective = PairObjective(template_for(instances, schema, features), instances,
                              train.l2_for("event_pair") if l2 is None else l2)
    logger.info("event_pair: %d pairs, %d parameters", len(instances), objective.size)
    result = lbfgs_minimize(objective, np.zeros(objective.size), train)
    return objective.template.with_params(result.params), result
