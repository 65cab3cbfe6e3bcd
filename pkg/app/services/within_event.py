# app/services/within_event.py
"""Per-trigger factor graph: t -- r_j -- a_j for every argument candidate j.

Only schema-valid (t, r) and (r, a) cells are ever evaluated, so invalid
configurations get probability exactly 0. Dense tables use ``NEG`` in
invalid cells; marginal tables carry exact zeros (log tables ``-inf``).
"""
from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse
from scipy.special import logsumexp

from app.core.config import FeatureConfig, TrainConfig
from app.core.errors import ModelError
from app.services.utils.corpus import CandidateSet, Document, Span
from app.services.utils.features import FeatureVector, HashedSpace, get_extractor
from app.services.utils.lbfgs import LbfgsResult, lbfgs_minimize
from app.services.utils.schema import NONE, LabelSchema, is_valid_config

logger = logging.getLogger(__name__)

NEG = -1e30
LOG_FLOOR = float(np.log(1e-300))

Prediction = Optional[Tuple[str, float]]


# --------------------------------------------------------------------------
# valid-cell bookkeeping
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class StarCells:
    t1: np.ndarray  # valid (t, r) cells, sorted by t
    r1: np.ndarray
    starts1: np.ndarray  # group starts per t (every t has r = NONE)
    r2: np.ndarray  # valid (r, a) cells, sorted by r
    a2: np.ndarray
    roles2: np.ndarray  # roles owning at least one (r, a) cell
    starts2: np.ndarray
    to_role: sparse.csr_matrix  # K1 x R indicator
    to_entity: sparse.csr_matrix  # K2 x A indicator

    @classmethod
    def from_masks(cls, valid_tr: np.ndarray, valid_ra: np.ndarray) -> "StarCells":
        t1, r1 = np.nonzero(valid_tr)
        r2, a2 = np.nonzero(valid_ra)
        _, starts1 = np.unique(t1, return_index=True)
        roles2, starts2 = np.unique(r2, return_index=True)
        k1, k2 = len(t1), len(r2)
        to_role = sparse.csr_matrix((np.ones(k1), (np.arange(k1), r1)), shape=(k1, valid_tr.shape[1]))
        to_entity = sparse.csr_matrix((np.ones(k2), (np.arange(k2), a2)), shape=(k2, valid_ra.shape[1]))
        return cls(t1, r1, starts1, r2, a2, roles2, starts2, to_role, to_entity)

    @property
    def k1(self) -> int:
        return len(self.t1)

    @property
    def k2(self) -> int:
        return len(self.r2)


def _group_logsumexp(vals: np.ndarray, starts: np.ndarray) -> np.ndarray:
    """logsumexp over contiguous column groups beginning at ``starts``."""
    mx = np.maximum.reduceat(vals, starts, axis=1)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    lens = np.diff(np.append(starts, vals.shape[1]))
    total = np.add.reduceat(np.exp(vals - np.repeat(mx, lens, axis=1)), starts, axis=1)
    with np.errstate(divide="ignore"):
        return np.log(total) + mx


@dataclass
class _StarMarginals:
    log_z: np.ndarray  # B
    log_pt: np.ndarray  # B x E
    lp1: np.ndarray  # BM x K1, log p(t, r_j) on valid cells
    lp2: np.ndarray  # BM x K2, log p(r_j, a_j) on valid cells
    p_r: np.ndarray  # BM x R
    p_a: np.ndarray  # BM x A


def _sum_product(U_t: np.ndarray, U_r: np.ndarray, U_a: np.ndarray, th3: np.ndarray, th5: np.ndarray,
                 cells: StarCells) -> _StarMarginals:
    B, E = U_t.shape
    M, R, A = U_r.shape[1], U_r.shape[2], U_a.shape[2]
    if M == 0:
        log_z = logsumexp(U_t, axis=1)
        return _StarMarginals(log_z, U_t - log_z[:, None], np.zeros((0, cells.k1)), np.zeros((0, cells.k2)),
                              np.zeros((0, R)), np.zeros((0, A)))
    ur = U_r.reshape(B * M, R)
    ua = U_a.reshape(B * M, A)
    # a_j -> r_j
    vals2 = th5[cells.r2, cells.a2][None, :] + ua[:, cells.a2]
    inner = np.full((B * M, R), -np.inf)
    inner[:, cells.roles2] = _group_logsumexp(vals2, cells.starts2)
    # r_j -> t
    vals1 = th3[cells.t1, cells.r1][None, :] + ur[:, cells.r1] + inner[:, cells.r1]
    msg = _group_logsumexp(vals1, cells.starts1).reshape(B, M, E)
    belief = U_t + msg.sum(axis=1)
    log_z = logsumexp(belief, axis=1)
    log_pt = belief - log_z[:, None]
    cavity = (log_pt[:, None, :] - msg).reshape(B * M, E)
    lp1 = cavity[:, cells.t1] + vals1
    p_r = np.asarray(np.exp(lp1) @ cells.to_role)
    with np.errstate(divide="ignore"):
        log_pr = np.log(p_r)
    lp2 = log_pr[:, cells.r2] - inner[:, cells.r2] + vals2
    p_a = np.asarray(np.exp(lp2) @ cells.to_entity)
    return _StarMarginals(log_z, log_pt, lp1, lp2, p_r, p_a)


# --------------------------------------------------------------------------
# parameters and graphs
# --------------------------------------------------------------------------

@dataclass
class WithinEventParams:
    features: FeatureConfig
    valid_tr: np.ndarray
    valid_ra: np.ndarray
    trigger_space: HashedSpace
    argument_space: HashedSpace
    entity_space: HashedSpace
    theta1: np.ndarray  # trigger features x event types
    theta2: np.ndarray  # argument features x roles
    theta3: np.ndarray  # event types x roles (indicator pairs)
    theta4: np.ndarray  # entity features x entity types
    theta5: np.ndarray  # roles x entity types (indicator pairs)

    BLOCKS = ("theta1", "theta2", "theta3", "theta4", "theta5")

    @classmethod
    def zeros(cls, schema: LabelSchema, features: FeatureConfig, trigger_space: HashedSpace,
              argument_space: HashedSpace, entity_space: HashedSpace) -> "WithinEventParams":
        E, R, A = schema.n_events, schema.n_roles, schema.n_entities
        return cls(features, schema.valid_tr.copy(), schema.valid_ra.copy(),
                   trigger_space, argument_space, entity_space,
                   np.zeros((len(trigger_space), E)), np.zeros((len(argument_space), R)), np.zeros((E, R)),
                   np.zeros((len(entity_space), A)), np.zeros((R, A)))

    @cached_property
    def cells(self) -> StarCells:
        return StarCells.from_masks(self.valid_tr, self.valid_ra)

    @property
    def params(self) -> np.ndarray:
        return np.concatenate([getattr(self, b).ravel() for b in self.BLOCKS])

    def split(self, theta: np.ndarray) -> List[np.ndarray]:
        out, offset = [], 0
        for b in self.BLOCKS:
            shape = getattr(self, b).shape
            size = int(np.prod(shape))
            out.append(theta[offset:offset + size].reshape(shape))
            offset += size
        return out

    def with_params(self, theta: np.ndarray) -> "WithinEventParams":
        blocks = [b.copy() for b in self.split(theta)]
        return WithinEventParams(self.features, self.valid_tr, self.valid_ra, self.trigger_space,
                                 self.argument_space, self.entity_space, *blocks)

    def check_schema(self, schema: LabelSchema) -> None:
        if self.valid_tr.shape != schema.valid_tr.shape or not np.array_equal(self.valid_tr, schema.valid_tr) \
                or not np.array_equal(self.valid_ra, schema.valid_ra):
            raise ModelError("within-event parameters were trained under a different schema")

    def to_payload(self) -> Dict[str, object]:
        out: Dict[str, object] = {
            "features": self.features.model_dump(),
            "valid_tr": self.valid_tr.astype(np.int64),
            "valid_ra": self.valid_ra.astype(np.int64),
            "trigger_space": self.trigger_space.indices,
            "argument_space": self.argument_space.indices,
            "entity_space": self.entity_space.indices,
        }
        out.update({b: getattr(self, b) for b in self.BLOCKS})
        return out

    @classmethod
    def from_payload(cls, raw: Dict[str, object]) -> "WithinEventParams":
        return cls(FeatureConfig.model_validate(raw["features"]),
                   np.asarray(raw["valid_tr"]).astype(bool), np.asarray(raw["valid_ra"]).astype(bool),
                   HashedSpace(np.asarray(raw["trigger_space"], dtype=np.int64)),
                   HashedSpace(np.asarray(raw["argument_space"], dtype=np.int64)),
                   HashedSpace(np.asarray(raw["entity_space"], dtype=np.int64)),
                   *(np.asarray(raw[b], dtype=np.float64) for b in cls.BLOCKS))


@dataclass(frozen=True)
class EventFactorGraph:
    trigger: Span
    arguments: Tuple[Span, ...]
    unary_t: np.ndarray  # E
    unary_r: np.ndarray  # M x R
    unary_a: np.ndarray  # M x A
    pair_tr: np.ndarray  # E x R, shared by every j; NEG where invalid
    pair_ra: np.ndarray  # R x A, shared by every j; NEG where invalid
    cells: StarCells = field(repr=False)

    @property
    def n_arguments(self) -> int:
        return len(self.arguments)

    def score(self, t: int, roles: Sequence[int], entities: Sequence[int]) -> float:
        """Unnormalised log-score of one full configuration (NEG-dominated when invalid)."""
        total = float(self.unary_t[t])
        for j, (r, a) in enumerate(zip(roles, entities)):
            total += float(self.unary_r[j, r] + self.unary_a[j, a] + self.pair_tr[t, r] + self.pair_ra[r, a])
        return total


@dataclass(frozen=True)
class InferenceResult:
    log_z: float
    p_t: np.ndarray
    p_r: np.ndarray
    p_a: np.ndarray
    log_tr: np.ndarray  # M x E x R, -inf where invalid
    log_ra: np.ndarray  # M x R x A, -inf where invalid
    cells_evaluated: int

    @property
    def p_tr(self) -> np.ndarray:
        return np.exp(self.log_tr)

    @property
    def p_ra(self) -> np.ndarray:
        return np.exp(self.log_ra)


def _rows(space: HashedSpace, vectors: Sequence[FeatureVector], W: np.ndarray) -> np.ndarray:
    if not vectors:
        return np.zeros((0, W.shape[1]))
    if len(space) == 0:
        return np.zeros((len(vectors), W.shape[1]))
    return np.asarray(space.rows(vectors) @ W)


def build_graph(params: WithinEventParams, doc: Document, trigger: Span, arguments: Sequence[Span],
                predictions: Optional[Sequence[Prediction]] = None) -> EventFactorGraph:
    for span in arguments:
        if span.sentence != trigger.sentence:
            raise ValueError(f"argument candidate {span.key} is not in the trigger's sentence")
    predictions = list(predictions) if predictions is not None else [None] * len(arguments)
    ex = get_extractor(params.features)
    U_t = _rows(params.trigger_space, [ex.trigger(doc, trigger)], params.theta1)[0]
    U_r = _rows(params.argument_space, [ex.argument(doc, trigger, a) for a in arguments], params.theta2)
    U_a = _rows(params.entity_space, [ex.entity(doc, a, p) for a, p in zip(arguments, predictions)], params.theta4)
    return EventFactorGraph(trigger, tuple(arguments), U_t, U_r, U_a,
                            np.where(params.valid_tr, params.theta3, NEG),
                            np.where(params.valid_ra, params.theta5, NEG), params.cells)


def exact_inference(g: EventFactorGraph) -> InferenceResult:
    M, E, R, A = g.n_arguments, len(g.unary_t), g.pair_tr.shape[1], g.pair_ra.shape[1]
    c = g.cells
    m = _sum_product(g.unary_t[None], g.unary_r[None], g.unary_a[None], g.pair_tr, g.pair_ra, c)
    log_tr = np.full((M, E, R), -np.inf)
    log_ra = np.full((M, R, A), -np.inf)
    if M:
        log_tr[:, c.t1, c.r1] = m.lp1
        log_ra[:, c.r2, c.a2] = m.lp2
    return InferenceResult(float(m.log_z[0]), np.exp(m.log_pt[0]), m.p_r, m.p_a, log_tr, log_ra,
                           M * (c.k1 + c.k2) + E)


def map_config(g: EventFactorGraph) -> Tuple[int, Tuple[int, ...], Tuple[int, ...]]:
    """Max-product on the star; ties go to the lowest label index (NONE first)."""
    M = g.n_arguments
    if M == 0:
        return int(np.argmax(g.unary_t)), (), ()
    ra = g.pair_ra[None] + g.unary_a[:, None, :]  # M x R x A
    best_a = np.argmax(ra, axis=2)
    val_r = np.take_along_axis(ra, best_a[:, :, None], axis=2)[:, :, 0] + g.unary_r  # M x R
    tr = g.pair_tr[None] + val_r[:, None, :]  # M x E x R
    best_r = np.argmax(tr, axis=2)
    val_t = np.take_along_axis(tr, best_r[:, :, None], axis=2)[:, :, 0]  # M x E
    t = int(np.argmax(g.unary_t + val_t.sum(axis=0)))
    roles = tuple(int(best_r[j, t]) for j in range(M))
    return t, roles, tuple(int(best_a[j, r]) for j, r in enumerate(roles))


@dataclass(frozen=True)
class JointTables:
    log_t: np.ndarray  # E
    log_tr: np.ndarray  # M x E x R
    log_ra: np.ndarray  # M x R x A


def export_joint_tables(params: WithinEventParams, doc: Document, trigger: Span, arguments: Sequence[Span],
                        predictions: Optional[Sequence[Prediction]] = None) -> JointTables:
    res = exact_inference(build_graph(params, doc, trigger, arguments, predictions))
    with np.errstate(divide="ignore"):
        log_t = np.maximum(np.log(res.p_t), LOG_FLOOR)
    log_tr = np.where(np.isneginf(res.log_tr) & ~params.valid_tr[None], -np.inf, np.maximum(res.log_tr, LOG_FLOOR))
    log_ra = np.where(np.isneginf(res.log_ra) & ~params.valid_ra[None], -np.inf, np.maximum(res.log_ra, LOG_FLOOR))
    return JointTables(log_t, log_tr, log_ra)


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class EventInstance:
    trigger: FeatureVector
    arguments: Tuple[FeatureVector, ...]
    entities: Tuple[FeatureVector, ...]
    gold_t: int
    gold_r: Tuple[int, ...]
    gold_a: Tuple[int, ...]


def project_gold(doc: Document, candidates: CandidateSet, i: int,
                 schema: LabelSchema) -> Optional[Tuple[str, Tuple[str, ...], Tuple[str, ...]]]:
    """Gold labels of trigger candidate i and its scoped entity candidates (exact span match).

    Returns None when the projection violates the compatibility maps.
    """
    trig = candidates.triggers[i].span
    event = next((ev for ev in doc.gold_events if ev.trigger.key == trig.key), None)
    gold_type = {e.span.key: e.type for e in doc.gold_entities}
    roles_by_span: Dict[Tuple[int, int, int], str] = {}
    if event is not None:
        for arg in event.arguments:
            roles_by_span.setdefault(doc.gold_entities[arg.entity].span.key, arg.role)
    t = event.type if event is not None else NONE
    roles, ents = [], []
    for j in candidates.per_trigger_args[i]:
        key = candidates.entities[j].span.key
        roles.append(roles_by_span.get(key, NONE))
        ents.append(gold_type.get(key, NONE))
    for r, a in zip(roles, ents):
        if not is_valid_config(t, r, a, schema):
            return None
    return t, tuple(roles), tuple(ents)


def collect_instances(pairs: Sequence[Tuple[Document, CandidateSet]], schema: LabelSchema,
                      features: FeatureConfig, negative_rate: float = 1.0, seed: int = 0) -> List[EventInstance]:
    rng = np.random.default_rng(seed)
    ex = get_extractor(features)
    out: List[EventInstance] = []
    skipped = 0
    for doc, cands in pairs:
        for i, trig in enumerate(cands.triggers):
            gold = project_gold(doc, cands, i, schema)
            if gold is None:
                skipped += 1
                continue
            t, roles, ents = gold
            # one draw per candidate keeps the stream aligned whatever the rate
            draw = rng.random()
            if t == NONE and draw >= negative_rate:
                continue
            args = [cands.entities[j] for j in cands.per_trigger_args[i]]
            out.append(EventInstance(
                ex.trigger(doc, trig.span),
                tuple(ex.argument(doc, trig.span, a.span) for a in args),
                tuple(ex.entity(doc, a.span, (a.label, a.confidence)) for a in args),
                schema.event_index[t],
                tuple(schema.role_index[r] for r in roles),
                tuple(schema.entity_index[a] for a in ents),
            ))
    if skipped:
        logger.warning("skipped %d trigger candidates whose gold projection is schema-invalid", skipped)
    return out


@dataclass
class _Bucket:
    x_t: sparse.csr_matrix  # B x n1
    x_r: sparse.csr_matrix  # BM x n2
    x_a: sparse.csr_matrix  # BM x n4
    gold_t: np.ndarray  # B
    gold_r: np.ndarray  # BM
    gold_a: np.ndarray  # BM
    n_args: int


class WithinEventObjective:
    def __init__(self, template: WithinEventParams, instances: Sequence[EventInstance], l2: float):
        if not instances:
            raise ValueError("no within-event training instances")
        self.template = template
        self.l2 = l2
        by_m: Dict[int, List[EventInstance]] = defaultdict(list)
        for inst in instances:
            by_m[len(inst.arguments)].append(inst)
        self.buckets: List[_Bucket] = []
        for m in sorted(by_m):
            items = by_m[m]
            self.buckets.append(_Bucket(
                template.trigger_space.rows([x.trigger for x in items]),
                template.argument_space.rows([v for x in items for v in x.arguments]),
                template.entity_space.rows([v for x in items for v in x.entities]),
                np.array([x.gold_t for x in items], dtype=np.int64),
                np.array([r for x in items for r in x.gold_r], dtype=np.int64),
                np.array([a for x in items for a in x.gold_a], dtype=np.int64),
                m,
            ))
        self.empirical = self._empirical()

    def _empirical(self) -> np.ndarray:
        th = self.template
        g = [np.zeros_like(getattr(th, b)) for b in th.BLOCKS]
        for b in self.buckets:
            g[0] += np.asarray(b.x_t.T @ _onehot(b.gold_t, g[0].shape[1]))
            if b.n_args:
                g[1] += np.asarray(b.x_r.T @ _onehot(b.gold_r, g[1].shape[1]))
                g[3] += np.asarray(b.x_a.T @ _onehot(b.gold_a, g[3].shape[1]))
                np.add.at(g[2], (np.repeat(b.gold_t, b.n_args), b.gold_r), 1.0)
                np.add.at(g[4], (b.gold_r, b.gold_a), 1.0)
        return np.concatenate([x.ravel() for x in g])

    @property
    def size(self) -> int:
        return int(self.empirical.size)

    def __call__(self, theta: np.ndarray) -> Tuple[float, np.ndarray]:
        th1, th2, th3, th4, th5 = self.template.split(theta)
        c = self.template.cells
        g1, g2, g3, g4, g5 = (np.zeros_like(x) for x in (th1, th2, th3, th4, th5))
        log_z_total = 0.0
        for b in self.buckets:
            B, M = len(b.gold_t), b.n_args
            U_t = np.asarray(b.x_t @ th1)
            U_r = np.asarray(b.x_r @ th2).reshape(B, M, th2.shape[1])
            U_a = np.asarray(b.x_a @ th4).reshape(B, M, th4.shape[1])
            m = _sum_product(U_t, U_r, U_a, th3, th5, c)
            log_z_total += float(m.log_z.sum())
            g1 += np.asarray(b.x_t.T @ np.exp(m.log_pt))
            if M:
                g2 += np.asarray(b.x_r.T @ m.p_r)
                g4 += np.asarray(b.x_a.T @ m.p_a)
                np.add.at(g3, (c.t1, c.r1), np.exp(m.lp1).sum(axis=0))
                np.add.at(g5, (c.r2, c.a2), np.exp(m.lp2).sum(axis=0))
        grad = np.concatenate([x.ravel() for x in (g1, g2, g3, g4, g5)]) - self.empirical + 2.0 * self.l2 * theta
        value = log_z_total - float(theta @ self.empirical) + self.l2 * float(theta @ theta)
        return value, grad


def _onehot(idx: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((len(idx), n))
    out[np.arange(len(idx)), idx] = 1.0
    return out


def template_for(instances: Sequence[EventInstance], schema: LabelSchema, features: FeatureConfig) -> WithinEventParams:
    return WithinEventParams.zeros(
        schema, features,
        HashedSpace.from_vectors(x.trigger for x in instances),
        HashedSpace.from_vectors(v for x in instances for v in x.arguments),
        HashedSpace.from_vectors(v for x in instances for v in x.entities),
    )


def we_objective_and_gradient(params: WithinEventParams, instances: Sequence[EventInstance],
                              l2: float) -> Tuple[float, np.ndarray]:
    return WithinEventObjective(params, instances, l2)(params.params)


def fit_within_event(instances: Sequence[EventInstance], schema: LabelSchema, features: FeatureConfig,
                     train: TrainConfig, l2: Optional[float] = None) -> Tuple[WithinEventParams, LbfgsResult]:
    objective = WithinEventObjective(template_for(instances, schema, features), instances,
                                     train.l2_for("within_event") if l2 is None else l2)
    logger.info("within_event: %d instances, %d parameters", len(instances), objective.size)
    result = lbfgs_minimize(objective, np.zeros(objective.size), train)
    return objective.template.with_params(result.params), result
