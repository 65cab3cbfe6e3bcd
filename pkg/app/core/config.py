# app/core/config.py
import json
from pathlib import Path
from typing import Dict, List, Optional

from pydantic import BaseModel, Field, field_validator, model_validator
from pydantic_settings import BaseSettings

DATA_DIR = Path(__file__).resolve().parent.parent / "data"

# Every name a FeatureConfig may enable; features.py registers one provider per name.
FEATURE_PROVIDERS = (
    "bias", "lemma", "context", "lexicon", "dependency", "pronoun", "embedding",
    "shape", "pos", "gazetteer", "position", "clause", "path", "prediction", "relational",
)
MODEL_NAMES = ("entity_crf", "trigger_crf", "within_event", "event_pair")
DECODE_MODES = ("joint", "joint_no_pairs", "joint_no_entities", "within_event")


class Settings(BaseSettings):
    SCHEMA_PATH: str = str(DATA_DIR / "ace_like_schema.json")
    BUNDLE_PATH: str = "bundle.json"
    LOG_LEVEL: str = "INFO"
    BUNDLE_CACHE_TTL: int = 600

    class Config:
        env_file = ".env"
        env_prefix = "JOINTIE_"


settings = Settings()


class FeatureConfig(BaseModel):
    hash_bits: int = 20
    providers: List[str] = Field(default_factory=lambda: list(FEATURE_PROVIDERS))
    lexicons: Dict[str, str] = Field(default_factory=dict)
    embeddings: Optional[str] = None
    window: int = 2

    @field_validator("hash_bits")
    @classmethod
    def _hash_bits_range(cls, v: int) -> int:
        if not 8 <= v <= 30:
            raise ValueError(f"hash_bits must lie in [8, 30], got {v}")
        return v

    @field_validator("window")
    @classmethod
    def _window_non_negative(cls, v: int) -> int:
        if v < 0:
            raise ValueError("window must be >= 0")
        return v

    @field_validator("providers")
    @classmethod
    def _known_providers(cls, v: List[str]) -> List[str]:
        unknown = sorted(set(v) - set(FEATURE_PROVIDERS))
        if unknown:
            raise ValueError(f"unknown feature providers: {unknown}")
        return v

    def without(self, *names: str) -> "FeatureConfig":
        return self.model_copy(update={"providers": [p for p in self.providers if p not in names]})

    def only(self, *names: str) -> "FeatureConfig":
        return self.model_copy(update={"providers": [p for p in self.providers if p in names]})

    def fingerprint_payload(self) -> str:
        return json.dumps(self.model_dump(), sort_keys=True)


class AD3Config(BaseModel):
    eta: float = 0.1
    max_iterations: int = 1000
    residual_tolerance: float = 1e-6
    eta_adapt: bool = True
    adapt_ratio: float = 10.0
    adapt_factor: float = 2.0
    eta_min: float = 1e-3
    eta_max: float = 1e3
    integrality_tolerance: float = 1e-4

    @model_validator(mode="after")
    def _all_positive(self) -> "AD3Config":
        for name in ("eta", "max_iterations", "residual_tolerance", "adapt_ratio",
                     "adapt_factor", "eta_min", "eta_max", "integrality_tolerance"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not self.eta_min <= self.eta <= self.eta_max:
            raise ValueError("eta must lie within [eta_min, eta_max]")
        return self


class TrainConfig(BaseModel):
    l2: float = 1.0
    l2_overrides: Dict[str, float] = Field(default_factory=dict)
    lbfgs_memory: int = 10
    max_iters: int = 200
    wolfe_c1: float = 1e-4
    wolfe_c2: float = 0.9
    ftol: float = 1e-6
    gtol: float = 1e-5
    seed: int = 42
    entity_k: int = 50
    trigger_k: int = 10
    candidate_folds: int = 10
    negative_rate: float = 1.0
    include_none_pairs: bool = True
    strict_order: bool = True

    @model_validator(mode="after")
    def _check(self) -> "TrainConfig":
        if not 0 < self.wolfe_c1 < self.wolfe_c2 < 1:
            raise ValueError("Wolfe constants must satisfy 0 < c1 < c2 < 1")
        if self.l2 < 0 or any(v < 0 for v in self.l2_overrides.values()):
            raise ValueError("L2 coefficients must be >= 0")
        unknown = sorted(set(self.l2_overrides) - set(MODEL_NAMES))
        if unknown:
            raise ValueError(f"l2_overrides has unknown model names: {unknown}")
        if self.lbfgs_memory < 1 or self.max_iters < 1:
            raise ValueError("lbfgs_memory and max_iters must be >= 1")
        if self.entity_k < 1 or self.trigger_k < 1:
            raise ValueError("k values must be >= 1")
        if not 0.0 < self.negative_rate <= 1.0:
            raise ValueError("negative_rate must lie in (0, 1]")
        return self

    def l2_for(self, model: str) -> float:
        return self.l2_overrides.get(model, self.l2)


class PipelineConfig(BaseModel):
    entity_features: FeatureConfig = Field(default_factory=FeatureConfig)
    # Trigger CRF: same token features except the gazetteers.
    trigger_features: FeatureConfig = Field(default_factory=lambda: FeatureConfig().without("gazetteer"))
    event_features: FeatureConfig = Field(default_factory=FeatureConfig)
    pair_features: FeatureConfig = Field(
        default_factory=lambda: FeatureConfig().only("bias", "lemma", "lexicon", "relational"))
    train: TrainConfig = Field(default_factory=TrainConfig)
    ad3: AD3Config = Field(default_factory=AD3Config)
    decode_mode: str = "joint"

    @field_validator("decode_mode")
    @classmethod
    def _known_mode(cls, v: str) -> str:
        if v not in DECODE_MODES:
            raise ValueError(f"decode_mode must be one of {DECODE_MODES}")
        return v

    @classmethod
    def from_file(cls, path: Optional[str]) -> "PipelineConfig":
        if not path:
            return cls()
        return cls.model_validate_json(Path(path).read_text(encoding="utf-8"))


class SynthConfig(BaseModel):
    """Correlation strengths of the synthetic corpus generator."""

    entity_only_rate: float = 0.1
    optional_role_rate: float = 0.6
    partner_rate: float = 0.5
    distractor_rate: float = 0.3
    min_sentences: int = 3
    max_sentences: int = 6

    @model_validator(mode="after")
    def _check(self) -> "SynthConfig":
        for name in ("entity_only_rate", "optional_role_rate", "partner_rate", "distractor_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not 1 <= self.min_sentences <= self.max_sentences:
            raise ValueError("need 1 <= min_sentences <= max_sentences")
        return self
