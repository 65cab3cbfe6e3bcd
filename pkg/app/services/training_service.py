# app/services/training_service.py
"""End-to-end training: the two taggers, held-out candidates, then the event models."""
from __future__ import annotations

import logging
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from app.core.config import PipelineConfig
from app.core.errors import CorpusError, StageError
from app.services.chain_crf import (ChainModel, ChainObjective, build_candidates, entity_spans, fit_chain_crf,
                                    trigger_spans)
from app.services.evaluation_service import evaluate
from app.services.event_pair import PairObjective, PairParams, collect_pair_instances, fit_event_pair
from app.services.event_pair import template_for as pair_template
from app.services.extraction_service import ExtractionService
from app.services.model_bundle import ModelBundle
from app.services.utils.corpus import CandidateSet, Document
from app.services.utils.lbfgs import check_gradient
from app.services.utils.schema import LabelSchema
from app.services.within_event import WithinEventObjective, collect_instances, fit_within_event
from app.services.within_event import template_for as within_template

logger = logging.getLogger(__name__)

STAGES = ("entity_crf", "trigger_crf", "candidates", "within_event", "event_pair")


@contextmanager
def stage(name: str) -> Iterator[None]:
    logger.info("stage %s: start", name)
    try:
        yield
    except Exception as e:
        logger.error("stage %s failed: %s", name, e)
        raise StageError(name, e) from e
    logger.info("stage %s: done", name)


def _fit_tagger(name: str, docs: Sequence[Document], schema: LabelSchema, cfg: PipelineConfig) -> ChainModel:
    if name == "entity_crf":
        labels, gold, features = schema.entity_types, entity_spans, cfg.entity_features
    else:
        labels, gold, features = schema.event_types, trigger_spans, cfg.trigger_features
    model, _ = fit_chain_crf(docs, labels, gold, features, cfg.train, l2=cfg.train.l2_for(name), name=name)
    return model


def fit_taggers(docs: Sequence[Document], schema: LabelSchema, cfg: PipelineConfig) -> Tuple[ChainModel, ChainModel]:
    return _fit_tagger("entity_crf", docs, schema, cfg), _fit_tagger("trigger_crf", docs, schema, cfg)


def cross_fold_candidates(docs: Sequence[Document], schema: LabelSchema, cfg: PipelineConfig,
                          entity: ChainModel, trigger: ChainModel) -> List[Tuple[Document, CandidateSet]]:
    """Candidates for each training document from taggers that never saw it (document idx goes to fold idx % n)."""
    train = cfg.train
    folds = min(train.candidate_folds, len(docs))
    if folds < 2:
        logger.warning("%d training documents: candidates come from the in-sample taggers", len(docs))
        return [(d, build_candidates(d, entity, trigger, train.entity_k, train.trigger_k)) for d in docs]
    out: List[Optional[Tuple[Document, CandidateSet]]] = [None] * len(docs)
    for f in range(folds):
        held = [i for i in range(len(docs)) if i % folds == f]
        rest = [docs[i] for i in range(len(docs)) if i % folds != f]
        logger.info("candidate fold %d/%d: %d held-out documents", f + 1, folds, len(held))
        fold_entity, fold_trigger = fit_taggers(rest, schema, cfg)
        for i in held:
            out[i] = (docs[i], build_candidates(docs[i], fold_entity, fold_trigger, train.entity_k, train.trigger_k))
    return out


def candidate_coverage(pairs: Sequence[Tuple[Document, CandidateSet]]) -> Dict[str, float]:
    """Share of gold trigger and entity spans present among the candidates (1.0 when there are none)."""
    hit_t = total_t = hit_e = total_e = 0
    for doc, cands in pairs:
        t_keys = {c.span.key for c in cands.triggers}
        e_keys = {c.span.key for c in cands.entities}
        total_t += len(doc.gold_events)
        hit_t += sum(ev.trigger.key in t_keys for ev in doc.gold_events)
        total_e += len(doc.gold_entities)
        hit_e += sum(e.span.key in e_keys for e in doc.gold_entities)
    return {
        "triggers": hit_t / total_t if total_t else 1.0,
        "entities": hit_e / total_e if total_e else 1.0,
    }


def _fit_pair_model(pairs, schema: LabelSchema, cfg: PipelineConfig) -> Optional[PairParams]:
    instances = collect_pair_instances(pairs, schema, cfg.pair_features, cfg.train.include_none_pairs)
    if not instances:
        logger.warning("no related trigger pairs among the candidates; the bundle carries no event-pair model")
        return None
    params, _ = fit_event_pair(instances, schema, cfg.pair_features, cfg.train)
    return params


def _candidate_stages(corpus: Sequence[Document], schema: LabelSchema, cfg: PipelineConfig):
    if not corpus:
        raise CorpusError("the training corpus is empty")
    with stage("entity_crf"):
        entity = _fit_tagger("entity_crf", corpus, schema, cfg)
    with stage("trigger_crf"):
        trigger = _fit_tagger("trigger_crf", corpus, schema, cfg)
    with stage("candidates"):
        pairs = cross_fold_candidates(corpus, schema, cfg, entity, trigger)
        coverage = candidate_coverage(pairs)
        logger.info("candidate coverage on training data: triggers %.3f, entities %.3f",
                    coverage["triggers"], coverage["entities"])
    return entity, trigger, pairs


def train_pipeline(corpus: Sequence[Document], schema: LabelSchema,
                   cfg: Optional[PipelineConfig] = None) -> ModelBundle:
    cfg = cfg or PipelineConfig()
    train = cfg.train
    entity, trigger, pairs = _candidate_stages(corpus, schema, cfg)
    with stage("within_event"):
        instances = collect_instances(pairs, schema, cfg.event_features, train.negative_rate, train.seed)
        within, _ = fit_within_event(instances, schema, cfg.event_features, train)
    with stage("event_pair"):
        pair = _fit_pair_model(pairs, schema, cfg)
    return ModelBundle(schema, cfg, entity, trigger, within, pair)


@dataclass
class LambdaSearch:
    best_l2: float
    scores: Dict[float, float]  # l2 -> dev argument-role F1
    bundle: ModelBundle


def lambda_grid_search(train_docs: Sequence[Document], dev_docs: Sequence[Document], schema: LabelSchema,
                       cfg: Optional[PipelineConfig] = None,
                       grid: Sequence[float] = (0.1, 1.0, 10.0)) -> LambdaSearch:
    """Pick the within-event L2 coefficient by dev argument-role F1; the first best value in grid order wins.

    The taggers, candidates and event-pair model are trained once and shared by every grid point.
    """
    cfg = cfg or PipelineConfig()
    if not grid:
        raise ValueError("empty lambda grid")
    entity, trigger, pairs = _candidate_stages(train_docs, schema, cfg)
    with stage("event_pair"):
        pair = _fit_pair_model(pairs, schema, cfg)
    instances = collect_instances(pairs, schema, cfg.event_features, cfg.train.negative_rate, cfg.train.seed)
    scores: Dict[float, float] = {}
    best: Optional[Tuple[float, float, ModelBundle]] = None
    for l2 in grid:
        overrides = {**cfg.train.l2_overrides, "within_event": float(l2)}
        run_cfg = cfg.model_copy(update={"train": cfg.train.model_copy(update={"l2_overrides": overrides})})
        within, _ = fit_within_event(instances, schema, cfg.event_features, run_cfg.train)
        bundle = ModelBundle(schema, run_cfg, entity, trigger, within, pair)
        predicted = [r.document for r in ExtractionService(bundle).predict(dev_docs)]
        f1 = evaluate(dev_docs, predicted).f1("argument_classification")
        scores[float(l2)] = f1
        logger.info("lambda %.4g: dev argument-role F1 %.4f", l2, f1)
        if best is None or f1 > best[1]:
            best = (float(l2), f1, bundle)
    return LambdaSearch(best[0], scores, best[2])


def gradient_check(model: str, docs: Sequence[Document], schema: LabelSchema, cfg: Optional[PipelineConfig] = None,
                   seed: int = 0, n_coords: int = 50) -> float:
    """Finite-difference check of one training objective at a random point, on gold candidates.

    ``model`` is ``crf`` (entity tagger), ``within`` or ``pair``.
    """
    cfg = cfg or PipelineConfig()
    train = cfg.train
    if model == "crf":
        objective = ChainObjective.from_corpus(docs, schema.entity_types, entity_spans, cfg.entity_features,
                                               train.l2_for("entity_crf"))
    elif model == "within":
        pairs = [(d, CandidateSet.from_gold(d, schema)) for d in docs]
        instances = collect_instances(pairs, schema, cfg.event_features, 1.0, train.seed)
        objective = WithinEventObjective(within_template(instances, schema, cfg.event_features), instances,
                                         train.l2_for("within_event"))
    elif model == "pair":
        pairs = [(d, CandidateSet.from_gold(d, schema)) for d in docs]
        instances = collect_pair_instances(pairs, schema, cfg.pair_features, True)
        objective = PairObjective(pair_template(instances, schema, cfg.pair_features), instances,
                                  train.l2_for("event_pair"))
    else:
        raise ValueError(f"unknown model {model!r}; expected crf, within or pair")
    theta = np.random.default_rng(seed).normal(scale=0.1, size=objective.size)
    error = check_gradient(objective, theta, eps=1e-5, n_coords=n_coords, seed=seed)
    logger.info("%s gradient check: max relative error %.3g over %d coordinates", model, error,
                min(n_coords, objective.size))
    return error
