# tests/conftest.py
import pytest
from fastapi.testclient import TestClient

from app.core.config import AD3Config, FeatureConfig, PipelineConfig, TrainConfig, settings
from app.main import app
from app.services.synthetic_corpus import gen_synth
from app.services.training_service import train_pipeline
from app.services.utils.corpus import Argument, Document, EntityMention, EventMention, Span, Token
from app.services.utils.schema import build_schema, load_schema

TINY_SCHEMA = {
    "event_types": ["ATTACK", "DIE"],
    "role_types": ["ATTACKER", "TARGET", "VICTIM", "PLACE", "INSTRUMENT"],
    "entity_types": ["PER", "GPE", "WEA"],
    "event_roles": {
        "ATTACK": ["ATTACKER", "TARGET", "PLACE", "INSTRUMENT"],
        "DIE": ["VICTIM", "PLACE", "INSTRUMENT"],
    },
    "role_entities": {
        "ATTACKER": ["PER", "GPE"],
        "TARGET": ["PER", "GPE"],
        "VICTIM": ["PER"],
        "PLACE": ["GPE"],
        "INSTRUMENT": ["WEA"],
    },
}


def fast_config(**train) -> PipelineConfig:
    """Small hash space and few iterations; enough for the synthetic corpus."""
    feats = FeatureConfig(hash_bits=14)
    params = dict(max_iters=30, candidate_folds=2, entity_k=5, trigger_k=3)
    params.update(train)
    return PipelineConfig(
        entity_features=feats,
        trigger_features=feats.without("gazetteer"),
        event_features=feats,
        pair_features=feats.only("bias", "lemma", "lexicon", "relational"),
        train=TrainConfig(**params),
        ad3=AD3Config(max_iterations=200),
    )


def make_doc(doc_id="d1", sentences=(("Rebels", "attacked", "Baghdad", "."),), entities=(), events=()):
    """Document from plain word lists; lemmas default to the lowercased surface."""
    sents = tuple(tuple(Token(w) for w in words) for words in sentences)
    return Document(doc_id, sents, None, tuple(entities), tuple(events))


@pytest.fixture(scope="session")
def tiny_schema():
    return build_schema(TINY_SCHEMA)


@pytest.fixture(scope="session")
def ace_schema():
    return load_schema(settings.SCHEMA_PATH)


@pytest.fixture(scope="session")
def synth_corpus(tiny_schema):
    return gen_synth(7, 12, 4, 2, tiny_schema)


@pytest.fixture(scope="session")
def pipeline_config():
    return fast_config()


@pytest.fixture(scope="session")
def tiny_bundle(synth_corpus, tiny_schema, pipeline_config):
    return train_pipeline(synth_corpus["train"], tiny_schema, pipeline_config)


@pytest.fixture
def attack_doc():
    """'Rebels attacked Baghdad with rockets .' annotated with one ATTACK event."""
    entities = (
        EntityMention(Span(0, 0, 1), "PER"),
        EntityMention(Span(0, 2, 3), "GPE"),
        EntityMention(Span(0, 4, 5), "WEA"),
    )
    events = (
        EventMention(Span(0, 1, 2), "ATTACK",
                     (Argument(0, "ATTACKER"), Argument(1, "PLACE"), Argument(2, "INSTRUMENT"))),
    )
    return make_doc(sentences=(("Rebels", "attacked", "Baghdad", "with", "rockets", "."),),
                    entities=entities, events=events)


@pytest.fixture(scope="session")
def client():
    return TestClient(app)


#
# Common monkeypatch helpers
#

@pytest.fixture
def patch_bundle(monkeypatch, tiny_bundle):
    """Serve the session bundle from the API without touching BUNDLE_PATH."""
    import app.api.endpoints.extract as extract

    monkeypatch.setattr(extract.bundle_cache, "get", lambda path: tiny_bundle)
    return tiny_bundle
