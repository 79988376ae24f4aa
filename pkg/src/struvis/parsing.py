"""Extraction of the tagged sections of a policy rollout."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

from .vision import (
    FP_CLOSE,
    FP_OPEN,
    SV_CLOSE,
    SV_OPEN,
    TAG_LITERALS,
    StructuredVisionState,
    ValidationReport,
    Violation,
    parse_state,
    validate_state,
)

SECTION_MISSING = "section missing"


@dataclass(frozen=True)
class TaggedOutput:
    raw: str
    structure_vision_raw: str | None = None
    final_prompt_raw: str | None = None
    extraction_notes: tuple[str, ...] = ()

    @property
    def structure_vision(self) -> str | None:
        return None if self.structure_vision_raw is None else self.structure_vision_raw.strip()

    @property
    def final_prompt(self) -> str | None:
        return None if self.final_prompt_raw is None else self.final_prompt_raw.strip()

    @property
    def thinking_text(self) -> str:
        """Text preceding the first tag literal, trimmed."""
        cut = len(self.raw)
        for tag in TAG_LITERALS:
            i = self.raw.find(tag)
            if i != -1:
                cut = min(cut, i)
        return self.raw[:cut].strip()

    def to_dict(self) -> dict:
        return {
            "raw": self.raw,
            "structure_vision_raw": self.structure_vision_raw,
            "final_prompt_raw": self.final_prompt_raw,
            "extraction_notes": list(self.extraction_notes),
        }


def _positions(text: str, literal: str) -> list[int]:
    out = []
    i = text.find(literal)
    while i != -1:
        out.append(i)
        i = text.find(literal, i + len(literal))
    return out


def _section(raw: str, open_tag: str, close_tag: str, notes: list[str]) -> tuple[int, int] | None:
    """(content start, content end) of the section, or None."""
    opens = _positions(raw, open_tag)
    closes = _positions(raw, close_tag)
    if len(opens) == 1 and len(closes) == 1:
        start = opens[0] + len(open_tag)
        if start <= closes[0]:
            return start, closes[0]
        notes.append(f"misordered tags: {close_tag} precedes {open_tag}")
        return None
    if len(opens) > 1:
        notes.append(f"duplicate tag: {open_tag} x{len(opens)}")
    if len(closes) > 1:
        notes.append(f"duplicate tag: {close_tag} x{len(closes)}")
    if len(opens) > 1 or len(closes) > 1:
        return None
    if opens and not closes:
        notes.append(f"unclosed tag: {open_tag}")
    elif closes and not opens:
        notes.append(f"close tag without open: {close_tag}")
    return None


def extract_tagged_sections(raw: str) -> TaggedOutput:
    """Locate the structure-vision and final-prompt sections of ``raw``.

    A section is present only when its open and close literals each occur
    exactly once, open before close, and the two sections do not overlap.
    Anything else (duplicates, unclosed, reversed, nested or crossing pairs)
    leaves the section absent and records a note. Never raises.
    """
    notes: list[str] = []
    sv = _section(raw, SV_OPEN, SV_CLOSE, notes)
    fp = _section(raw, FP_OPEN, FP_CLOSE, notes)
    if sv is not None and fp is not None:
        sv_span = (sv[0] - len(SV_OPEN), sv[1] + len(SV_CLOSE))
        fp_span = (fp[0] - len(FP_OPEN), fp[1] + len(FP_CLOSE))
        if sv_span[0] < fp_span[1] and fp_span[0] < sv_span[1]:
            notes.append("overlapping sections: tag pairs are nested or crossed")
            sv = fp = None
    return TaggedOutput(
        raw,
        None if sv is None else raw[sv[0] : sv[1]],
        None if fp is None else raw[fp[0] : fp[1]],
        tuple(notes),
    )


def parse_structured_vision(
    tagged: TaggedOutput, reflexive_predicates: Iterable[str] = ()
) -> tuple[ValidationReport, StructuredVisionState | None]:
    if tagged.structure_vision_raw is None:
        return ValidationReport.of([Violation("$", SECTION_MISSING)]), None
    text = tagged.structure_vision
    report = validate_state(text, reflexive_predicates)
    if not report.valid:
        return report, None
    return report, parse_state(text, reflexive_predicates)
