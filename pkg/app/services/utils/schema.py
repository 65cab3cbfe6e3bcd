# app/services/utils/schema.py
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Any, Dict, FrozenSet, Iterable, Mapping, Tuple

import numpy as np

from app.core.errors import SchemaError

NONE = "NONE"


@dataclass(frozen=True)
class LabelSchema:
    """Label inventories plus the two compatibility maps.

    NONE sits at index 0 of every label tuple, so "ties go to NONE first"
    and "ties go to the lowest index" are the same rule everywhere.
    """

    event_types: Tuple[str, ...]
    role_types: Tuple[str, ...]
    entity_types: Tuple[str, ...]
    event_roles: Mapping[str, FrozenSet[str]]
    role_entities: Mapping[str, FrozenSet[str]]

    @cached_property
    def event_index(self) -> Dict[str, int]:
        return {t: i for i, t in enumerate(self.event_types)}

    @cached_property
    def role_index(self) -> Dict[str, int]:
        return {r: i for i, r in enumerate(self.role_types)}

    @cached_property
    def entity_index(self) -> Dict[str, int]:
        return {a: i for i, a in enumerate(self.entity_types)}

    @cached_property
    def valid_tr(self) -> np.ndarray:
        mask = np.zeros((len(self.event_types), len(self.role_types)), dtype=bool)
        for t, ti in self.event_index.items():
            mask[ti, 0] = True
            for r in self.event_roles.get(t, ()):
                mask[ti, self.role_index[r]] = True
        return mask

    @cached_property
    def valid_ra(self) -> np.ndarray:
        mask = np.zeros((len(self.role_types), len(self.entity_types)), dtype=bool)
        for r, ri in self.role_index.items():
            for a in self.role_entities.get(r, ()):
                mask[ri, self.entity_index[a]] = True
        return mask

    @property
    def n_events(self) -> int:
        return len(self.event_types)

    @property
    def n_roles(self) -> int:
        return len(self.role_types)

    @property
    def n_entities(self) -> int:
        return len(self.entity_types)

    @property
    def k1(self) -> float:
        """Average number of roles per non-NONE event type."""
        sizes = [len(self.event_roles.get(t, ())) for t in self.event_types[1:]]
        return float(np.mean(sizes)) if sizes else 0.0

    @property
    def k2(self) -> float:
        """Average number of entity types per non-NONE role."""
        sizes = [len(self.role_entities.get(r, ())) for r in self.role_types[1:]]
        return float(np.mean(sizes)) if sizes else 0.0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "event_types": list(self.event_types),
            "role_types": list(self.role_types),
            "entity_types": list(self.entity_types),
            "event_roles": {t: sorted(self.event_roles[t], key=self.role_index.get) for t in self.event_types},
            "role_entities": {r: sorted(self.role_entities[r], key=self.entity_index.get) for r in self.role_types},
        }


def _label_list(raw: Iterable[str], field: str) -> Tuple[str, ...]:
    labels = [str(x) for x in raw]
    seen = set()
    for lab in labels:
        if lab in seen:
            raise SchemaError(f"duplicate label in {field}", lab)
        seen.add(lab)
    return (NONE,) + tuple(lab for lab in labels if lab != NONE)


def build_schema(raw: Mapping[str, Any]) -> LabelSchema:
    missing = [k for k in ("event_types", "role_types", "entity_types", "event_roles", "role_entities") if k not in raw]
    if missing:
        raise SchemaError(f"schema is missing fields {missing}")
    events = _label_list(raw["event_types"], "event_types")
    roles = _label_list(raw["role_types"], "role_types")
    entities = _label_list(raw["entity_types"], "entity_types")
    role_set, entity_set = set(roles), set(entities)

    event_roles: Dict[str, FrozenSet[str]] = {}
    for t, rs in dict(raw["event_roles"]).items():
        if t not in events:
            raise SchemaError("event_roles key is not an event type", t)
        for r in rs:
            if r not in role_set:
                raise SchemaError(f"event_roles[{t}] names an unknown role", r)
            if r == NONE:
                raise SchemaError(f"event_roles[{t}] must not list NONE explicitly", r)
        event_roles[t] = frozenset(rs)
    if event_roles.get(NONE):
        raise SchemaError("a NONE event takes no arguments", sorted(event_roles[NONE])[0])
    for t in events:
        event_roles.setdefault(t, frozenset())

    all_entities = frozenset(entities)
    role_entities: Dict[str, FrozenSet[str]] = {}
    for r, ents in dict(raw["role_entities"]).items():
        if r not in role_set:
            raise SchemaError("role_entities key is not a role type", r)
        for a in ents:
            if a not in entity_set:
                raise SchemaError(f"role_entities[{r}] names an unknown entity type", a)
        role_entities[r] = frozenset(ents)
    if NONE in role_entities and role_entities[NONE] != all_entities:
        raise SchemaError("role_entities[NONE] must permit every entity type", NONE)
    role_entities[NONE] = all_entities
    for r in roles[1:]:
        allowed = role_entities.setdefault(r, frozenset())
        if NONE in allowed:
            raise SchemaError("a non-NONE role cannot be filled by the NONE entity type", r)

    return LabelSchema(events, roles, entities, event_roles, role_entities)


def load_schema(path: str | Path) -> LabelSchema:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise SchemaError(f"cannot read schema {path}: {e}") from e
    if not isinstance(raw, dict):
        raise SchemaError(f"schema {path} is not a JSON object")
    return build_schema(raw)


def save_schema(schema: LabelSchema, path: str | Path) -> None:
    Path(path).write_text(json.dumps(schema.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def schema_fingerprint(schema: LabelSchema) -> str:
    return hashlib.sha256(json.dumps(schema.to_dict(), sort_keys=True).encode("utf-8")).hexdigest()


def is_valid_config(t: str, r: str, a: str, schema: LabelSchema) -> bool:
    for label, index in ((t, schema.event_index), (r, schema.role_index), (a, schema.entity_index)):
        if label not in index:
            raise SchemaError("unknown label", label)
    if t == NONE:
        return r == NONE
    if r != NONE and r not in schema.event_roles[t]:
        return False
    return a in schema.role_entities[r]
