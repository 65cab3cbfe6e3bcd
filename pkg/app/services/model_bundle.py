# app/services/model_bundle.py
"""The trained pipeline: schema, config snapshot and the four parameter blocks."""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional

from app.core.config import FeatureConfig, PipelineConfig
from app.core.errors import ModelError
from app.services.chain_crf import ChainModel
from app.services.event_pair import PairParams
from app.services.utils.features import HASH_VERSION
from app.services.utils.model_store import dumps_container, loads_container, read_container, write_container
from app.services.utils.schema import LabelSchema, build_schema, schema_fingerprint
from app.services.within_event import WithinEventParams

logger = logging.getLogger(__name__)


def feature_fingerprint(cfg: FeatureConfig) -> str:
    return hashlib.sha256(f"{HASH_VERSION}|{cfg.fingerprint_payload()}".encode("utf-8")).hexdigest()


@dataclass
class ModelBundle:
    schema: LabelSchema
    config: PipelineConfig
    entity_crf: ChainModel
    trigger_crf: ChainModel
    within_event: WithinEventParams
    event_pair: Optional[PairParams] = None

    def check(self) -> None:
        """Raise ModelError when a block disagrees with the schema or the config snapshot."""
        self.within_event.check_schema(self.schema)
        if self.entity_crf.labels != self.schema.entity_types[1:]:
            raise ModelError("entity CRF labels do not match the schema's entity types")
        if self.trigger_crf.labels != self.schema.event_types[1:]:
            raise ModelError("trigger CRF labels do not match the schema's event types")
        if self.event_pair is not None and self.event_pair.n_events != self.schema.n_events:
            raise ModelError("event-pair parameters were trained under a different schema")
        expected = {
            "entity_crf": self.config.entity_features,
            "trigger_crf": self.config.trigger_features,
            "within_event": self.config.event_features,
            "event_pair": self.config.pair_features,
        }
        for name, cfg in expected.items():
            block = getattr(self, name)
            if block is not None and block.features != cfg:
                raise ModelError(f"{name} was trained with a feature configuration other than the bundle's")

    def to_payload(self) -> Dict[str, Any]:
        models: Dict[str, Any] = {
            "entity_crf": self.entity_crf.to_payload(),
            "trigger_crf": self.trigger_crf.to_payload(),
            "within_event": self.within_event.to_payload(),
        }
        if self.event_pair is not None:
            models["event_pair"] = self.event_pair.to_payload()
        return {
            "schema": self.schema.to_dict(),
            "schema_fingerprint": schema_fingerprint(self.schema),
            "config": self.config.model_dump(),
            "hash_version": HASH_VERSION,
            "feature_fingerprints": {
                "entity_crf": feature_fingerprint(self.config.entity_features),
                "trigger_crf": feature_fingerprint(self.config.trigger_features),
                "within_event": feature_fingerprint(self.config.event_features),
                "event_pair": feature_fingerprint(self.config.pair_features),
            },
            "models": models,
        }

    @classmethod
    def from_payload(cls, raw: Dict[str, Any]) -> "ModelBundle":
        try:
            schema = build_schema(raw["schema"])
            config = PipelineConfig.model_validate(raw["config"])
            models = raw["models"]
            if raw["hash_version"] != HASH_VERSION:
                raise ModelError(f"bundle hashes features with {raw['hash_version']!r}, "
                                 f"this build uses {HASH_VERSION!r}")
            if raw["schema_fingerprint"] != schema_fingerprint(schema):
                raise ModelError("bundle schema fingerprint does not match its schema")
            for name, fp in raw["feature_fingerprints"].items():
                cfg = getattr(config, {"entity_crf": "entity_features", "trigger_crf": "trigger_features",
                                       "within_event": "event_features", "event_pair": "pair_features"}[name])
                if fp != feature_fingerprint(cfg):
                    raise ModelError(f"feature fingerprint mismatch for {name}")
            bundle = cls(
                schema, config,
                ChainModel.from_payload(models["entity_crf"]),
                ChainModel.from_payload(models["trigger_crf"]),
                WithinEventParams.from_payload(models["within_event"]),
                PairParams.from_payload(models["event_pair"]) if "event_pair" in models else None,
            )
        except KeyError as e:
            raise ModelError(f"bundle is missing field {e}") from e
        bundle.check()
        return bundle

    def dumps(self) -> str:
        return dumps_container(self.to_payload())

    @classmethod
    def loads(cls, text: str) -> "ModelBundle":
        return cls.from_payload(loads_container(text))

    def save(self, path: str | Path) -> None:
        write_container(self.to_payload(), path)
        logger.info("wrote bundle to %s", path)

    @classmethod
    def load(cls, path: str | Path) -> "ModelBundle":
        return cls.from_payload(read_container(path))
