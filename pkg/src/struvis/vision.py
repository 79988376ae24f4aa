"""Structured visual state, CoT records, validation and canonical serialization."""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from typing import Any, Iterable, Mapping

import jsonschema

DOMAINS: tuple[str, ...] = (
    "culture",
    "nature",
    "science",
    "metaphor",
    "spatial",
    "textual",
    "entity",
    "story",
)

SV_OPEN = "<structure vision>"
SV_CLOSE = "</structure vision>"
FP_OPEN = "<final prompt>"
FP_CLOSE = "</final prompt>"
TAG_LITERALS: tuple[str, ...] = (SV_OPEN, SV_CLOSE, FP_OPEN, FP_CLOSE)

MALFORMED_JSON = "malformed JSON"

_ID_RE = re.compile(r"^[a-z0-9_]+$")
_IDENT_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")


class InvalidStateError(ValueError):
    """Raised when a state (or its serialized text) violates the schema invariants."""

    def __init__(self, report: "ValidationReport") -> None:
        self.report = report
        detail = "; ".join(f"{v.path}: {v.message}" for v in report.violations)
        super().__init__(f"invalid structured vision state: {detail}")


class RecordError(ValueError):
    pass


class RenderError(ValueError):
    pass


@dataclass(frozen=True)
class Violation:
    path: str
    message: str

    def to_dict(self) -> dict[str, str]:
        return {"path": self.path, "message": self.message}


@dataclass(frozen=True)
class ValidationReport:
    valid: bool
    violations: tuple[Violation, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "violations", tuple(self.violations))
        if self.valid != (not self.violations):
            raise ValueError("ValidationReport.valid must equal 'no violations'")

    @classmethod
    def of(cls, violations: Iterable[Violation]) -> "ValidationReport":
        vs = tuple(violations)
        return cls(valid=not vs, violations=vs)

    @property
    def well_formed(self) -> bool:
        """True unless the text failed to parse as JSON at all."""
        return not any(v.message.startswith(MALFORMED_JSON) for v in self.violations)

    def to_dict(self) -> dict[str, Any]:
        return {"valid": self.valid, "violations": [v.to_dict() for v in self.violations]}


@dataclass(frozen=True)
class Entity:
    id: str
    name: str
    attributes: tuple[tuple[str, str], ...] = ()
    count: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "attributes", tuple((k, v) for k, v in self.attributes))

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "name": self.name,
            "attributes": [[k, v] for k, v in self.attributes],
            "count": self.count,
        }


@dataclass(frozen=True)
class Relation:
    subject: str
    predicate: str
    object: str

    def key(self) -> tuple[str, str, str]:
        return (self.subject, self.predicate, self.object)

    def to_dict(self) -> dict[str, str]:
        return {"subject": self.subject, "predicate": self.predicate, "object": self.object}


@dataclass(frozen=True)
class Region:
    """Normalized bounding box; depth 0 is the farthest layer."""

    x0: float
    y0: float
    x1: float
    y1: float
    depth: int = 0

    def to_dict(self) -> dict[str, Any]:
        return {"x0": self.x0, "y0": self.y0, "x1": self.x1, "y1": self.y1, "depth": self.depth}


@dataclass(frozen=True)
class StructuredVisionState:
    entities: tuple[Entity, ...]
    relations: tuple[Relation, ...] = ()
    layout: Mapping[str, Region] = field(default_factory=dict)
    global_style: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "entities", tuple(self.entities))
        object.__setattr__(self, "relations", tuple(self.relations))
        object.__setattr__(self, "layout", dict(self.layout))

    def to_dict(self) -> dict[str, Any]:
        return {
            "entities": [e.to_dict() for e in self.entities],
            "relations": [r.to_dict() for r in self.relations],
            "layout": {k: r.to_dict() for k, r in self.layout.items()},
            "global_style": self.global_style,
        }

    def normalized(self) -> "StructuredVisionState":
        """Same state with entities and relations in canonical order."""
        return StructuredVisionState(
            entities=tuple(sorted(self.entities, key=lambda e: e.id)),
            relations=tuple(sorted(self.relations, key=Relation.key)),
            layout=dict(sorted(self.layout.items())),
            global_style=self.global_style,
        )

    @classmethod
    def from_dict(cls, obj: Mapping[str, Any]) -> "StructuredVisionState":
        """Build from an already-validated mapping (see validate_state)."""
        entities = tuple(
            Entity(
                id=e["id"],
                name=e["name"],
                attributes=tuple((k, v) for k, v in e.get("attributes", ())),
                count=int(e.get("count", 1)),
            )
            for e in obj["entities"]
        )
        relations = tuple(
            Relation(subject=r["subject"], predicate=r["predicate"], object=r["object"])
            for r in obj["relations"]
        )
        layout = {
            k: Region(
                x0=float(r["x0"]),
                y0=float(r["y0"]),
                x1=float(r["x1"]),
                y1=float(r["y1"]),
                depth=int(r["depth"]),
            )
            for k, r in obj["layout"].items()
        }
        return cls(entities, relations, layout, obj.get("global_style"))


# --- validation -------------------------------------------------------------


@lru_cache(maxsize=1)
def state_schema() -> dict[str, Any]:
    """The published JSON Schema document for StructuredVisionState."""
    text = resources.files("struvis.schema").joinpath("structured_vision.schema.json").read_text()
    return json.loads(text)


@lru_cache(maxsize=1)
def _validator() -> jsonschema.Draft202012Validator:
    return jsonschema.Draft202012Validator(state_schema())


def format_path(parts: Iterable[Any]) -> str:
    out = "$"
    for p in parts:
        if isinstance(p, int):
            out += f"[{p}]"
        elif _IDENT_RE.match(p):
            out += f".{p}"
        else:
            out += "[" + json.dumps(p) + "]"
    return out


class _DuplicateKeys(list):
    pass


def _reject_constant(name: str) -> Any:
    raise ValueError(f"non-standard JSON constant {name}")


def loads_strict(text: str, duplicates: list[str] | None = None) -> Any:
    """json.loads that refuses NaN/Infinity and optionally records duplicate keys."""

    def pairs(items: list[tuple[str, Any]]) -> dict[str, Any]:
        out: dict[str, Any] = {}
        for k, v in items:
            if k in out and duplicates is not None:
                duplicates.append(k)
            out[k] = v
        return out

    return json.loads(text, parse_constant=_reject_constant, object_pairs_hook=pairs)


def is_well_formed_json(text: str) -> bool:
    try:
        loads_strict(text)
    except (ValueError, RecursionError):
        return False
    return True


def check_state_obj(
    obj: Any, reflexive_predicates: Iterable[str] = ()
) -> list[Violation]:
    """All invariant violations of a decoded JSON value, in deterministic order."""
    violations: list[Violation] = []
    schema_errors = sorted(
        _validator().iter_errors(obj), key=lambda e: (list(map(str, e.absolute_path)), e.message)
    )
    for err in schema_errors:
        violations.append(Violation(format_path(err.absolute_path), err.message))
    if not isinstance(obj, dict):
        return violations

    allowed = frozenset(reflexive_predicates)
    ids: set[str] = set()
    entities = obj.get("entities")
    if isinstance(entities, list):
        for i, ent in enumerate(entities):
            if not isinstance(ent, dict):
                continue
            eid = ent.get("id")
            if isinstance(eid, str):
                if eid in ids:
                    violations.append(
                        Violation(format_path(["entities", i, "id"]), f"duplicate entity id {eid!r}")
                    )
                ids.add(eid)
            attrs = ent.get("attributes")
            if isinstance(attrs, list):
                seen: set[str] = set()
                for j, pair in enumerate(attrs):
                    if isinstance(pair, list) and pair and isinstance(pair[0], str):
                        if pair[0] in seen:
                            violations.append(
                                Violation(
                                    format_path(["entities", i, "attributes", j]),
                                    f"duplicate attribute key {pair[0]!r}",
                                )
                            )
                        seen.add(pair[0])

    relations = obj.get("relations")
    if isinstance(relations, list):
        for i, rel in enumerate(relations):
            if not isinstance(rel, dict):
                continue
            for end in ("subject", "object"):
                ref = rel.get(end)
                if isinstance(ref, str) and ref not in ids:
                    violations.append(
                        Violation(
                            format_path(["relations", i, end]),
                            f"relation {end} {ref!r} does not resolve to an entity id",
                        )
                    )
            subj, obj_ = rel.get("subject"), rel.get("object")
            if (
                isinstance(subj, str)
                and subj == obj_
                and rel.get("predicate") not in allowed
            ):
                violations.append(
                    Violation(
                        format_path(["relations", i]),
                        f"reflexive relation on {subj!r} with predicate {rel.get('predicate')!r} is not allowed",
                    )
                )

    layout = obj.get("layout")
    if isinstance(layout, dict):
        for key, region in layout.items():
            if key not in ids:
                violations.append(
                    Violation(format_path(["layout", key]), f"layout key {key!r} does not resolve to an entity id")
                )
            if not isinstance(region, dict):
                continue
            for lo, hi in (("x0", "x1"), ("y0", "y1")):
                a, b = region.get(lo), region.get(hi)
                if _is_number(a) and _is_number(b) and not a < b:
                    violations.append(
                        Violation(format_path(["layout", key, hi]), f"{lo} must be < {hi} (got {a} >= {b})")
                    )
    return violations


def _is_number(x: Any) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def validate_state(
    raw_json_text: str, reflexive_predicates: Iterable[str] = ()
) -> ValidationReport:
    """Check text against JSON syntax and every StructuredVisionState invariant.

    Never raises; every problem is returned as a path-addressed violation.
    """
    duplicates: list[str] = []
    try:
        obj = loads_strict(raw_json_text, duplicates)
    except (ValueError, TypeError, RecursionError) as exc:
        return ValidationReport.of([Violation("$", f"{MALFORMED_JSON}: {exc}")])
    violations = [Violation("$", f"duplicate object key {k!r}") for k in duplicates]
    violations.extend(check_state_obj(obj, reflexive_predicates))
    return ValidationReport.of(violations)


def parse_state(text: str, reflexive_predicates: Iterable[str] = ()) -> StructuredVisionState:
    report = validate_state(text, reflexive_predicates)
    if not report.valid:
        raise InvalidStateError(report)
    return StructuredVisionState.from_dict(json.loads(text))


def check_state(
    state: StructuredVisionState, reflexive_predicates: Iterable[str] = ()
) -> ValidationReport:
    return ValidationReport.of(check_state_obj(state.to_dict(), reflexive_predicates))


def _dumps(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False)


def canonical_obj(state: StructuredVisionState) -> dict[str, Any]:
    return state.normalized().to_dict()


def canonicalize(state: StructuredVisionState, reflexive_predicates: Iterable[str] = ()) -> str:
    """Byte-stable JSON text: sorted keys, entities by id, relations by triple, compact."""
    report = check_state(state, reflexive_predicates)
    if not report.valid:
        raise InvalidStateError(report)
    return _dumps(canonical_obj(state))


# --- CoT records ------------------------------------------------------------


@dataclass(frozen=True)
class CoTRecord:
    record_id: str
    domain: str
    user_prompt: str
    thinking_text: str
    structured_vision: StructuredVisionState
    generative_prompt: str

    def to_dict(self) -> dict[str, Any]:
        return {
            "record_id": self.record_id,
            "domain": self.domain,
            "user_prompt": self.user_prompt,
            "thinking_text": self.thinking_text,
            "structured_vision": canonical_obj(self.structured_vision),
            "generative_prompt": self.generative_prompt,
        }

    def to_json(self) -> str:
        """One canonical JSONL line (without the newline)."""
        return _dumps(self.to_dict())


def compute_record_id(
    domain: str,
    user_prompt: str,
    thinking_text: str,
    state: StructuredVisionState,
    generative_prompt: str,
) -> str:
    payload = _dumps(
        {
            "domain": domain,
            "generative_prompt": generative_prompt,
            "structured_vision": canonical_obj(state),
            "thinking_text": thinking_text,
            "user_prompt": user_prompt,
        }
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def _require_domain(domain: str) -> None:
    if domain not in DOMAINS:
        raise RecordError(f"unknown domain {domain!r}; valid domains: {', '.join(DOMAINS)}")


def compose_cot(
    user_prompt: str,
    thinking_text: str,
    state: StructuredVisionState,
    generative_prompt: str,
    domain: str,
    reflexive_predicates: Iterable[str] = (),
) -> CoTRecord:
    for name, value in (
        ("user_prompt", user_prompt),
        ("thinking_text", thinking_text),
        ("generative_prompt", generative_prompt),
    ):
        if not isinstance(value, str) or not value.strip():
            raise RecordError(f"{name} must be non-empty")
    _require_domain(domain)
    report = check_state(state, reflexive_predicates)
    if not report.valid:
        raise InvalidStateError(report)
    rid = compute_record_id(domain, user_prompt, thinking_text, state, generative_prompt)
    return CoTRecord(rid, domain, user_prompt, thinking_text, state, generative_prompt)


_RECORD_KEYS = frozenset(
    {"record_id", "domain", "user_prompt", "thinking_text", "structured_vision", "generative_prompt"}
)


def check_record_obj(obj: Any) -> list[Violation]:
    """Violations of a decoded JSONL record; record_id is verified only if the rest is clean."""
    if not isinstance(obj, dict):
        return [Violation("$", "record must be a JSON object")]
    out: list[Violation] = []
    for key in sorted(_RECORD_KEYS - obj.keys()):
        out.append(Violation("$", f"missing field {key!r}"))
    for key in sorted(obj.keys() - _RECORD_KEYS):
        out.append(Violation(format_path([key]), "unknown field"))
    for key in ("record_id", "user_prompt", "thinking_text", "generative_prompt"):
        if key in obj and (not isinstance(obj[key], str) or not obj[key].strip()):
            out.append(Violation(format_path([key]), f"{key} must be a non-empty string"))
    if "domain" in obj and obj["domain"] not in DOMAINS:
        out.append(Violation("$.domain", f"unknown domain {obj['domain']!r}"))
    if "structured_vision" in obj:
        for v in check_state_obj(obj["structured_vision"]):
            out.append(Violation("$.structured_vision" + v.path[1:], v.message))
    if out:
        return out
    state = StructuredVisionState.from_dict(obj["structured_vision"])
    expected = compute_record_id(
        obj["domain"], obj["user_prompt"], obj["thinking_text"], state, obj["generative_prompt"]
    )
    if obj["record_id"] != expected:
        out.append(Violation("$.record_id", f"record_id does not match content hash {expected}"))
    return out


def record_from_dict(obj: Mapping[str, Any]) -> CoTRecord:
    violations = check_record_obj(obj)
    if violations:
        raise RecordError("; ".join(f"{v.path}: {v.message}" for v in violations))
    return CoTRecord(
        record_id=obj["record_id"],
        domain=obj["domain"],
        user_prompt=obj["user_prompt"],
        thinking_text=obj["thinking_text"],
        structured_vision=StructuredVisionState.from_dict(obj["structured_vision"]),
        generative_prompt=obj["generative_prompt"],
    )


def render_rollout_target(record: CoTRecord) -> str:
    """SFT target text: thinking, then the tagged state, then the tagged final prompt.

    Content that contains any tag literal is rejected rather than escaped.
    """
    for name in ("user_prompt", "thinking_text", "generative_prompt"):
        if not getattr(record, name).strip():
            raise RecordError(f"{name} must be non-empty")
    _require_domain(record.domain)
    sv = canonicalize(record.structured_vision)
    for name, text in (
        ("thinking_text", record.thinking_text),
        ("structured_vision", sv),
        ("generative_prompt", record.generative_prompt),
    ):
        for tag in TAG_LITERALS:
            if tag in text:
                raise RenderError(f"{name} contains reserved tag literal {tag!r}")
    return f"{record.thinking_text} {SV_OPEN}{sv}{SV_CLOSE} {FP_OPEN}{record.generative_prompt}{FP_CLOSE}"
