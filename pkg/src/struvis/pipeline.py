"""Four-stage CoT data construction: prompts -> image -> structured vision -> user prompt/thinking."""

from __future__ import annotations

import json
import logging
import os
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping

from .clients import (
    DEFAULT_BACKOFF,
    DEFAULT_RETRIES,
    Endpoints,
    ExternalServiceError,
    PipelineClients,
    call_with_retry,
)
from .vision import (
    DOMAINS,
    MALFORMED_JSON,
    CoTRecord,
    RecordError,
    StructuredVisionState,
    ValidationReport,
    check_record_obj,
    compose_cot,
    loads_strict,
    record_from_dict,
    validate_state,
)

log = logging.getLogger(__name__)

STAGES = ("prompts", "generate", "extract", "abstract", "compose")


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str) -> None:
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


class BadExtractionError(StageError):
    def __init__(self, report: ValidationReport) -> None:
        detail = "; ".join(f"{v.path}: {v.message}" for v in report.violations)
        super().__init__("extract", f"bad extraction: {detail}")
        self.report = report


@dataclass(frozen=True)
class PipelineConfig:
    output: Path
    targets: Mapping[str, int] = field(default_factory=lambda: {d: 10 for d in DOMAINS})
    max_parallel: int = 1
    resume: bool = False
    retries: int = DEFAULT_RETRIES
    backoff: float = DEFAULT_BACKOFF
    endpoints: Endpoints | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "output", Path(self.output))
        unknown = set(self.targets) - set(DOMAINS)
        if unknown:
            raise ValueError(f"unknown domains in targets: {sorted(unknown)}; valid domains: {', '.join(DOMAINS)}")
        if any(int(n) < 0 for n in self.targets.values()):
            raise ValueError("target counts must be >= 0")
        if self.max_parallel < 1:
            raise ValueError("max_parallel must be >= 1")

    @classmethod
    def uniform(cls, per_domain: int, output: str | Path, **kwargs: Any) -> "PipelineConfig":
        return cls(output=Path(output), targets={d: per_domain for d in DOMAINS}, **kwargs)


@dataclass(frozen=True)
class Failure:
    domain: str
    prompt: str | None
    stage: str
    error: str

    def to_dict(self) -> dict[str, Any]:
        return {"domain": self.domain, "prompt": self.prompt, "stage": self.stage, "error": self.error}


@dataclass
class PipelineReport:
    output: str
    successes: Counter = field(default_factory=Counter)
    skips: Counter = field(default_factory=Counter)
    failures: list[Failure] = field(default_factory=list)

    @property
    def failures_by_stage(self) -> Counter:
        return Counter(f.stage for f in self.failures)

    def failures_by_domain(self) -> Counter:
        return Counter(f.domain for f in self.failures)

    def to_dict(self) -> dict[str, Any]:
        return {
            "output": self.output,
            "records_written": sum(self.successes.values()),
            "successes": {d: self.successes[d] for d in DOMAINS if d in self.successes},
            "skips": {d: self.skips[d] for d in DOMAINS if d in self.skips},
            "failures_by_stage": dict(sorted(self.failures_by_stage.items())),
            "failures": [f.to_dict() for f in self.failures],
        }


def build_record(
    generative_prompt: str,
    domain: str,
    clients: PipelineClients,
    *,
    retries: int = DEFAULT_RETRIES,
    backoff: float = DEFAULT_BACKOFF,
    sleep: Callable[[float], None] | None = None,
) -> CoTRecord:
    if not generative_prompt.strip():
        raise RecordError("generative_prompt must be non-empty")
    kw: dict[str, Any] = {"retries": retries, "backoff": backoff}
    if sleep is not None:
        kw["sleep"] = sleep

    def stage(name: str, fn: Callable[[], Any]) -> Any:
        try:
            return call_with_retry(fn, **kw)
        except ExternalServiceError as exc:
            raise StageError(name, str(exc)) from exc

    image_ref = stage("generate", lambda: clients.generate(generative_prompt))
    sv_text = stage("extract", lambda: clients.extract(image_ref))
    report = validate_state(sv_text)
    if not report.valid:
        raise BadExtractionError(report)
    state = StructuredVisionState.from_dict(loads_strict(sv_text))
    user_prompt, thinking = stage("abstract", lambda: clients.abstract(generative_prompt, image_ref))
    try:
        return compose_cot(user_prompt, thinking, state, generative_prompt, domain)
    except (RecordError, ValueError) as exc:
        raise StageError("compose", str(exc)) from exc


def _prepare_output(path: Path, resume: bool) -> tuple[set[str], set[tuple[str, str]]]:
    """Open-or-create the output before any client call; on resume index what exists."""
    ids: set[str] = set()
    done: set[tuple[str, str]] = set()
    path.parent.mkdir(parents=True, exist_ok=True)
    if not resume or not path.exists():
        with open(path, "w", encoding="utf-8"):
            pass
        return ids, done
    with open(path, "r+b") as fh:
        data = fh.read()
        if data and not data.endswith(b"\n"):
            cut = data.rfind(b"\n") + 1
            log.warning("%s: dropping partial trailing line (%d bytes)", path, len(data) - cut)
            fh.truncate(cut)
            data = data[:cut]
    for line in data.decode("utf-8").splitlines():
        try:
            obj = json.loads(line)
        except ValueError:
            continue
        if isinstance(obj, dict) and isinstance(obj.get("record_id"), str):
            ids.add(obj["record_id"])
            done.add((str(obj.get("domain")), str(obj.get("generative_prompt"))))
    return ids, done


def run_pipeline(
    config: PipelineConfig,
    clients: PipelineClients,
    sleep: Callable[[float], None] | None = None,
) -> PipelineReport:
    """Build records for every domain target and append them to the JSONL output.

    Lines are written by this thread only, in work-item order, one complete
    line per write. With ``resume`` the (domain, generative prompt) pairs and
    record ids already in the file are skipped.
    """
    try:
        existing_ids, done = _prepare_output(config.output, config.resume)
    except OSError as exc:
        raise OSError(f"output {config.output} is not writable: {exc}") from exc
    report = PipelineReport(output=str(config.output))
    kw: dict[str, Any] = {"retries": config.retries, "backoff": config.backoff}
    if sleep is not None:
        kw["sleep"] = sleep

    work: list[tuple[str, str]] = []
    for domain in DOMAINS:
        n = int(config.targets.get(domain, 0))
        if n == 0:
            continue
        try:
            prompts = list(call_with_retry(lambda: clients.create_prompts(domain, n), **kw))[:n]
        except ExternalServiceError as exc:
            report.failures.extend(Failure(domain, None, "prompts", str(exc)) for _ in range(n))
            continue
        for _ in range(n - len(prompts)):
            report.failures.append(Failure(domain, None, "prompts", "prompt creator returned too few prompts"))
        seen: set[str] = set()
        for p in prompts:
            if not isinstance(p, str) or not p.strip() or p in seen:
                report.failures.append(Failure(domain, p, "prompts", "empty or duplicate generative prompt"))
                continue
            seen.add(p)
            if (domain, p) in done:
                report.skips[domain] += 1
            else:
                work.append((domain, p))

    def build(item: tuple[str, str]) -> CoTRecord | StageError:
        domain, prompt = item
        try:
            return build_record(prompt, domain, clients, **kw)
        except StageError as exc:
            return exc

    with open(config.output, "a", encoding="utf-8") as out, ThreadPoolExecutor(config.max_parallel) as pool:
        for (domain, prompt), result in zip(work, pool.map(build, work)):
            if isinstance(result, StageError):
                log.info("record failed at %s: %s", result.stage, result)
                report.failures.append(Failure(domain, prompt, result.stage, str(result)))
                continue
            if result.record_id in existing_ids:
                report.skips[domain] += 1
                continue
            out.write(result.to_json() + "\n")
            out.flush()
            existing_ids.add(result.record_id)
            report.successes[domain] += 1
        os.fsync(out.fileno())
    return report


# --- dataset validation -----------------------------------------------------


@dataclass(frozen=True)
class LineViolation:
    line: int
    path: str
    message: str

    def to_dict(self) -> dict[str, Any]:
        return {"line": self.line, "path": self.path, "message": self.message}


@dataclass
class DatasetReport:
    path: str
    records: int = 0
    domain_counts: Counter = field(default_factory=Counter)
    violations: list[LineViolation] = field(default_factory=list)
    duplicates: dict[str, list[int]] = field(default_factory=dict)

    @property
    def valid(self) -> bool:
        return not self.violations and not self.duplicates

    def to_dict(self) -> dict[str, Any]:
        return {
            "valid": self.valid,
            "path": self.path,
            "records": self.records,
            "domain_counts": {d: self.domain_counts[d] for d in DOMAINS if d in self.domain_counts},
            "violations": [v.to_dict() for v in self.violations],
            "duplicates": self.duplicates,
        }


def validate_dataset(path: str | Path) -> DatasetReport:
    """Check every JSONL line as a CoT record; report counts, violations and duplicate ids."""
    p = Path(path)
    text = p.read_text(encoding="utf-8")
    report = DatasetReport(path=str(p))
    lines_by_id: dict[str, list[int]] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            report.violations.append(LineViolation(lineno, "$", "empty line"))
            continue
        try:
            obj = loads_strict(line)
        except (ValueError, RecursionError) as exc:
            report.violations.append(LineViolation(lineno, "$", f"{MALFORMED_JSON}: {exc}"))
            continue
        problems = check_record_obj(obj)
        if problems:
            report.violations.extend(LineViolation(lineno, v.path, v.message) for v in problems)
            continue
        report.records += 1
        report.domain_counts[obj["domain"]] += 1
        lines_by_id.setdefault(obj["record_id"], []).append(lineno)
    report.duplicates = {rid: ls for rid, ls in lines_by_id.items() if len(ls) > 1}
    return report


def load_records(path: str | Path) -> list[CoTRecord]:
    """Parse a JSONL dataset, raising on the first invalid line."""
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            out.append(record_from_dict(loads_strict(line)))
        except (ValueError, RecordError) as exc:
            raise RecordError(f"{path}:{lineno}: {exc}") from exc
    return out
