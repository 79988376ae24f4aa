import itertools
import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from struvis.parsing import SECTION_MISSING, extract_tagged_sections, parse_structured_vision
from struvis.vision import FP_CLOSE, FP_OPEN, SV_CLOSE, SV_OPEN, TAG_LITERALS

from .oracles import TAGS, brute_extract


def test_happy_path():
    t = extract_tagged_sections("think... <structure vision>{}</structure vision> <final prompt>a cat</final prompt>")
    assert t.structure_vision_raw == "{}"
    assert t.final_prompt_raw == "a cat"
    assert t.thinking_text == "think..."
    assert t.extraction_notes == ()


def test_missing_section():
    t = extract_tagged_sections("<final prompt>a cat</final prompt>")
    assert t.structure_vision_raw is None
    assert t.final_prompt_raw == "a cat"


def test_duplicate_tags_leave_section_absent():
    t = extract_tagged_sections(
        "<structure vision>{</structure vision><structure vision>x</structure vision><final prompt>p</final prompt>"
    )
    assert t.structure_vision_raw is None
    assert t.final_prompt_raw == "p"
    assert any("duplicate tag" in n for n in t.extraction_notes)


@pytest.mark.parametrize(
    "raw,note",
    [
        ("<final prompt>abc", "unclosed tag"),
        ("abc</final prompt>", "close tag without open"),
        ("</final prompt>abc<final prompt>", "misordered tags"),
    ],
)
def test_malformed_notes(raw, note):
    t = extract_tagged_sections(raw)
    assert t.final_prompt_raw is None
    assert any(n.startswith(note) for n in t.extraction_notes)


@pytest.mark.parametrize(
    "raw",
    [
        f"{FP_OPEN}a {SV_OPEN}1{SV_CLOSE}{FP_CLOSE}",
        f"{SV_OPEN}1{FP_OPEN}a{SV_CLOSE}{FP_CLOSE}",
        f"{FP_OPEN}a{SV_OPEN}{FP_CLOSE}1{SV_CLOSE}",
    ],
)
def test_nested_or_crossed_sections_are_malformed(raw):
    t = extract_tagged_sections(raw)
    assert t.structure_vision_raw is None and t.final_prompt_raw is None
    assert any(n.startswith("overlapping sections") for n in t.extraction_notes)


def test_adjacent_sections_are_fine():
    t = extract_tagged_sections(f"{FP_OPEN}a{FP_CLOSE}{SV_OPEN}1{SV_CLOSE}")
    assert (t.structure_vision_raw, t.final_prompt_raw) == ("1", "a")


def test_raw_kept_and_content_trimmed():
    raw = "<final prompt>  a cat \n</final prompt>"
    t = extract_tagged_sections(raw)
    assert t.raw == raw
    assert t.final_prompt_raw == "  a cat \n"
    assert t.final_prompt == "a cat"


def test_case_and_spacing_are_exact():
    for variant in ("<Structure Vision>{}</Structure Vision>", "<structure_vision>{}</structure_vision>",
                    "<structurevision>{}</structurevision>"):
        assert extract_tagged_sections(variant).structure_vision_raw is None


ALPHABET = TAGS + ("x",)


def test_oracle_agreement_exhaustive():
    checked = 0
    for n in range(9):
        for combo in itertools.product(ALPHABET, repeat=n):
            raw = "".join(combo)
            t = extract_tagged_sections(raw)
            assert (t.structure_vision_raw, t.final_prompt_raw) == brute_extract(raw), combo
            checked += 1
    assert checked == sum(5**n for n in range(9))


def test_oracle_agreement_with_lookalike_filler():
    filler = ("<", "prompt>", " ")
    for n in range(6):
        for combo in itertools.product(TAGS + filler, repeat=n):
            raw = "".join(combo)
            t = extract_tagged_sections(raw)
            assert (t.structure_vision_raw, t.final_prompt_raw) == brute_extract(raw), combo


def _fuzz_string(rng: random.Random) -> str:
    parts = []
    for _ in range(rng.randint(0, 12)):
        if rng.random() < 0.4:
            parts.append(rng.choice(TAG_LITERALS))
        else:
            parts.append(bytes(rng.getrandbits(8) for _ in range(rng.randint(0, 10))).decode("latin-1"))
    return "".join(parts)


def test_fuzz_totality_and_agreement():
    rng = random.Random(1234)
    for _ in range(20_000):
        raw = _fuzz_string(rng)
        t = extract_tagged_sections(raw)
        assert t.raw == raw
        assert (t.structure_vision_raw, t.final_prompt_raw) == brute_extract(raw)


@settings(max_examples=300)
@given(st.text())
def test_totality_and_determinism(raw):
    assert extract_tagged_sections(raw) == extract_tagged_sections(raw)


@settings(max_examples=300)
@given(
    st.text().filter(lambda s: "<" not in s),
    st.text().filter(lambda s: "<" not in s),
    st.text().filter(lambda s: "<" not in s),
    st.text().filter(lambda s: "<" not in s),
)
def test_locality(pre, sv, mid, post):
    raw = f"{pre}{SV_OPEN}{sv}{SV_CLOSE}{mid}{FP_OPEN}x{FP_CLOSE}{post}"
    t = extract_tagged_sections(raw)
    assert t.structure_vision_raw == sv
    assert t.final_prompt_raw == "x"


def test_parse_missing_section():
    report, state = parse_structured_vision(extract_tagged_sections("no tags"))
    assert not report.valid and state is None
    assert report.violations[0].message == SECTION_MISSING


def test_parse_valid_state():
    doc = {"entities": [{"id": "a", "name": "x"}], "relations": [], "layout": {}}
    report, state = parse_structured_vision(extract_tagged_sections(f"{SV_OPEN} {json.dumps(doc)} {SV_CLOSE}"))
    assert report.valid
    assert state is not None and state.entities[0].id == "a"


def test_parse_malformed_json():
    report, state = parse_structured_vision(extract_tagged_sections(f"{SV_OPEN}{{{SV_CLOSE}"))
    assert not report.valid and state is None
    assert not report.well_formed


def test_parse_schema_violation_is_still_well_formed():
    doc = {"entities": [{"id": "a", "name": "x"}], "relations": [{"subject": "a", "predicate": "p", "object": "b"}],
           "layout": {}}
    report, state = parse_structured_vision(extract_tagged_sections(f"{SV_OPEN}{json.dumps(doc)}{SV_CLOSE}"))
    assert not report.valid and state is None
    assert report.well_formed
    assert [v.path for v in report.violations] == ["$.relations[0].object"]
