import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from struvis.parsing import extract_tagged_sections
from struvis.vision import (
    DOMAINS,
    FP_CLOSE,
    FP_OPEN,
    SV_CLOSE,
    SV_OPEN,
    TAG_LITERALS,
    CoTRecord,
    Entity,
    InvalidStateError,
    RecordError,
    Region,
    Relation,
    RenderError,
    StructuredVisionState,
    ValidationReport,
    Violation,
    canonicalize,
    check_record_obj,
    compose_cot,
    parse_state,
    record_from_dict,
    render_rollout_target,
    state_schema,
    validate_state,
)

from .strategies import domains, states

MINIMAL = {
    "entities": [{"id": "cat_1", "name": "cat", "count": 1}],
    "relations": [],
    "layout": {"cat_1": {"x0": 0.1, "y0": 0.1, "x1": 0.9, "y1": 0.9, "depth": 0}},
}


def minimal_state() -> StructuredVisionState:
    return parse_state(json.dumps(MINIMAL))


def test_minimal_state_is_valid():
    report = validate_state(json.dumps(MINIMAL))
    assert report.valid and report.violations == ()


def test_malformed_text_single_root_violation():
    report = validate_state("{")
    assert not report.valid
    assert len(report.violations) == 1
    assert report.violations[0].path == "$"
    assert "malformed JSON" in report.violations[0].message


def test_dangling_relation_object_path():
    doc = dict(MINIMAL, relations=[{"subject": "cat_1", "predicate": "near", "object": "dog_2"}])
    report = validate_state(json.dumps(doc))
    assert not report.valid
    assert "$.relations[0].object" in [v.path for v in report.violations]


@pytest.mark.parametrize("text", ["", "null", "[]", "42", '"x"', "NaN", '{"entities": [] ', "{" * 5000, "\x00"])
def test_validate_never_raises(text):
    report = validate_state(text)
    assert report.valid is False
    assert report.violations


def test_report_invariant_enforced():
    with pytest.raises(ValueError):
        ValidationReport(valid=True, violations=(Violation("$", "x"),))
    with pytest.raises(ValueError):
        ValidationReport(valid=False)


def test_published_schema_names_every_field():
    schema = state_schema()
    assert set(schema["properties"]) == {"entities", "relations", "layout", "global_style"}
    defs = json.dumps(schema)
    for key in ("id", "name", "attributes", "count", "subject", "predicate", "object", "x0", "y0", "x1", "y1", "depth"):
        assert f'"{key}"' in defs


def test_unknown_keys_rejected():
    doc = json.loads(json.dumps(MINIMAL))
    doc["entities"][0]["colour"] = "red"
    report = validate_state(json.dumps(doc))
    assert any(v.path.startswith("$.entities[0]") for v in report.violations)


def test_reflexive_relation_allow_list():
    doc = dict(MINIMAL, relations=[{"subject": "cat_1", "predicate": "touches", "object": "cat_1"}])
    text = json.dumps(doc)
    assert not validate_state(text).valid
    assert validate_state(text, reflexive_predicates=["touches"]).valid


def test_global_style_optional_and_ignored():
    assert validate_state(json.dumps(dict(MINIMAL, global_style="watercolor"))).valid
    assert validate_state(json.dumps(dict(MINIMAL, global_style=None))).valid


# --- fault injection: each mutation breaks exactly one invariant ------------

FAULTS = [
    (lambda d: d["entities"][0].__setitem__("id", "Cat-1"), "$.entities[0].id"),
    (lambda d: d["entities"][0].__setitem__("name", ""), "$.entities[0].name"),
    (lambda d: d["entities"][0].__setitem__("count", 0), "$.entities[0].count"),
    (lambda d: d["entities"][0].__setitem__("attributes", [["k", "a"], ["k", "b"]]), "$.entities[0].attributes"),
    (lambda d: d["entities"].append({"id": "cat_1", "name": "cat"}), "$.entities[1].id"),
    (lambda d: d.__setitem__("entities", []), "$.entities"),
    (lambda d: d["relations"].append({"subject": "ghost", "predicate": "p", "object": "cat_1"}), "$.relations[0].subject"),
    (lambda d: d["relations"].append({"subject": "cat_1", "predicate": "", "object": "cat_1"}), "$.relations[0]"),
    (lambda d: d["layout"].__setitem__("ghost", d["layout"]["cat_1"]), "$.layout.ghost"),
    (lambda d: d["layout"]["cat_1"].__setitem__("x1", 1.5), "$.layout.cat_1.x1"),
    (lambda d: d["layout"]["cat_1"].__setitem__("y0", -0.1), "$.layout.cat_1.y0"),
    (lambda d: d["layout"]["cat_1"].__setitem__("x0", 0.95), "$.layout.cat_1"),
    (lambda d: d["layout"]["cat_1"].__setitem__("depth", -1), "$.layout.cat_1.depth"),
    (lambda d: d["layout"]["cat_1"].__setitem__("depth", 1.5), "$.layout.cat_1.depth"),
    (lambda d: d.__setitem__("global_style", 3), "$.global_style"),
    (lambda d: d.pop("relations"), "$"),
]


@pytest.mark.parametrize("mutate,prefix", FAULTS)
def test_injected_fault_is_located(mutate, prefix):
    doc = json.loads(json.dumps(MINIMAL))
    mutate(doc)
    report = validate_state(json.dumps(doc))
    assert not report.valid
    assert any(v.path.startswith(prefix) for v in report.violations), report.violations


# --- canonical form ---------------------------------------------------------


def test_canonical_sort_and_compactness():
    a = Entity("b", "bee")
    b = Entity("a", "ant")
    s = StructuredVisionState((a, b))
    text = canonicalize(s)
    assert text.index('"id":"a"') < text.index('"id":"b"')
    assert " " not in text.replace("ant", "").replace("bee", "")
    assert canonicalize(StructuredVisionState((b, a))) == text


def test_canonicalize_rejects_invalid_state():
    bad = StructuredVisionState((Entity("a", "x"),), (Relation("a", "near", "zz"),))
    with pytest.raises(InvalidStateError) as exc:
        canonicalize(bad)
    assert "$.relations[0].object" in str(exc.value)


@settings(max_examples=200, deadline=None)
@given(states())
def test_round_trip_and_fixpoint(state):
    text = canonicalize(state)
    assert validate_state(text).valid
    back = parse_state(text)
    assert back.normalized() == state.normalized()
    assert canonicalize(back) == text


@settings(max_examples=100, deadline=None)
@given(states(), st.randoms(use_true_random=False))
def test_order_does_not_change_canonical_text(state, rnd):
    ents = list(state.entities)
    rels = list(state.relations)
    rnd.shuffle(ents)
    rnd.shuffle(rels)
    layout = dict(rnd.sample(list(state.layout.items()), len(state.layout)))
    shuffled = StructuredVisionState(tuple(ents), tuple(rels), layout, state.global_style)
    assert canonicalize(shuffled) == canonicalize(state)


# --- CoT records ------------------------------------------------------------


def test_compose_cot_contract():
    rec = compose_cot("a monument", "think...", minimal_state(), "Christ the Redeemer statue at dawn", "culture")
    assert rec.domain == "culture"
    assert (rec.user_prompt, rec.thinking_text) == ("a monument", "think...")
    assert rec.generative_prompt == "Christ the Redeemer statue at dawn"
    assert len(rec.record_id) == 16


def test_compose_cot_empty_field():
    with pytest.raises(RecordError, match="thinking_text must be non-empty"):
        compose_cot("a monument", "", minimal_state(), "statue", "culture")


def test_compose_cot_unknown_domain_lists_all():
    with pytest.raises(RecordError) as exc:
        compose_cot("a", "b", minimal_state(), "c", "sports")
    for d in DOMAINS:
        assert d in str(exc.value)
    assert DOMAINS == ("culture", "nature", "science", "metaphor", "spatial", "textual", "entity", "story")


def test_record_id_is_content_hash():
    s = minimal_state()
    a = compose_cot("p", "t", s, "g", "nature")
    b = compose_cot("p", "t", s, "g", "nature")
    c = compose_cot("p", "t", s, "g2", "nature")
    assert a.record_id == b.record_id != c.record_id


def test_record_json_round_trip_and_tamper():
    rec = compose_cot("p", "t", minimal_state(), "g", "story")
    obj = json.loads(rec.to_json())
    assert record_from_dict(obj) == rec
    obj["thinking_text"] = "changed"
    assert [v.path for v in check_record_obj(obj)] == ["$.record_id"]


@settings(max_examples=100, deadline=None)
@given(states(), domains)
def test_render_then_extract_recovers_fields(state, domain):
    rec = compose_cot("user asks", "some thinking", state, "a final prompt", domain)
    text = render_rollout_target(rec)
    for tag in TAG_LITERALS:
        assert text.count(tag) == 1
    tagged = extract_tagged_sections(text)
    assert tagged.structure_vision == canonicalize(state)
    assert tagged.final_prompt == "a final prompt"
    assert tagged.thinking_text == "some thinking"


def test_render_layout():
    rec = compose_cot("u", "T", minimal_state(), "P", "nature")
    assert render_rollout_target(rec) == f"T {SV_OPEN}{canonicalize(minimal_state())}{SV_CLOSE} {FP_OPEN}P{FP_CLOSE}"


@pytest.mark.parametrize("field", ["thinking_text", "generative_prompt"])
@pytest.mark.parametrize("tag", TAG_LITERALS)
def test_render_rejects_tag_literals(field, tag):
    kwargs = {"thinking_text": "t", "generative_prompt": "g"}
    kwargs[field] = f"before {tag} after"
    rec = compose_cot("u", kwargs["thinking_text"], minimal_state(), kwargs["generative_prompt"], "story")
    with pytest.raises(RenderError, match="tag literal"):
        render_rollout_target(rec)


def test_render_rejects_tag_inside_state_strings():
    s = StructuredVisionState((Entity("a", f"x{FP_CLOSE}"),))
    rec = compose_cot("u", "t", s, "g", "story")
    with pytest.raises(RenderError):
        render_rollout_target(rec)


def test_partial_tag_text_survives_round_trip():
    rec = compose_cot("u", "t", minimal_state(), "a sign reading </final", "textual")
    tagged = extract_tagged_sections(render_rollout_target(rec))
    assert tagged.final_prompt == "a sign reading </final"


def test_region_defaults():
    assert Region(0, 0, 1, 1).depth == 0
    assert Entity("a", "b").count == 1
    assert isinstance(CoTRecord, type)
