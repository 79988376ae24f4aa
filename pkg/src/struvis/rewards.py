"""Format, understanding and image rewards and the gated final reward."""

from __future__ import annotations

import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Any, Callable, Mapping, Sequence

from .clients import DEFAULT_BACKOFF, DEFAULT_RETRIES, ExternalServiceError, ScoringClients, call_with_retry
from .parsing import TaggedOutput, extract_tagged_sections, parse_structured_vision
from .vision import ValidationReport, is_well_formed_json

W_LABEL, W_JSON, W_PROMPT = 0.4, 0.4, 0.2
W_HPS, W_VLM = 0.6, 0.4
W_UNDERSTANDING, W_IMAGE = 0.3, 0.7
GATE_THRESHOLD = 0.6


class ScoringError(RuntimeError):
    """An external call failed after retries; carries what was computed so far."""

    def __init__(self, message: str, partial: "RewardBreakdown") -> None:
        super().__init__(message)
        self.partial = partial


class GroupScoringError(RuntimeError):
    def __init__(self, errors: Mapping[int, ScoringError], results: Sequence["RewardBreakdown | None"]) -> None:
        self.errors = dict(errors)
        self.results = list(results)
        idx = ", ".join(str(i) for i in sorted(self.errors))
        super().__init__(f"scoring failed for rollouts at positions [{idx}]")


@dataclass(frozen=True)
class RewardConfig:
    """Reward-stack switches.

    ``use_understanding`` / ``use_image`` drop a family from the final reward
    (and skip its external calls); the remaining weights are renormalized. With
    both off the final reward is the raw format reward, ungated.
    """

    gate_threshold: float = GATE_THRESHOLD
    strict_json_schema: bool = False
    gated_format_shaping_coef: float = 0.0
    use_understanding: bool = True
    use_image: bool = True
    max_retries: int = DEFAULT_RETRIES
    backoff: float = DEFAULT_BACKOFF
    reflexive_predicates: tuple[str, ...] = ()

    @property
    def format_only(self) -> bool:
        return not (self.use_understanding or self.use_image)


@dataclass(frozen=True)
class FormatComponents:
    r_label: int
    r_json: int
    r_prompt: int
    r_format: float


@dataclass(frozen=True)
class UnderstandingComponents:
    r_perception: int
    r_completeness: int
    r_faithfulness: int
    r_understanding: float


@dataclass(frozen=True)
class ImageComponents:
    r_hps: float
    r_vlm: float
    r_image: float


@dataclass(frozen=True)
class JudgeScores:
    perception: int
    completeness: int
    faithfulness: int

    @classmethod
    def from_raw(cls, data: Mapping[str, Any]) -> "JudgeScores":
        """Clamp raw judge output to {0, 1, 2}."""
        vals = []
        for key in ("perception", "completeness", "faithfulness"):
            v = data[key]
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
                raise ExternalServiceError(f"judge returned non-numeric {key}: {v!r}")
            vals.append(min(2, max(0, int(round(v)))))
        return cls(*vals)


@dataclass(frozen=True)
class RewardBreakdown:
    format: FormatComponents
    understanding: UnderstandingComponents | None
    image: ImageComponents | None
    gate_passed: bool
    r_final: float
    external_calls_made: int = 0

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def aggregate_format(r_label: int, r_json: int, r_prompt: int) -> FormatComponents:
    return FormatComponents(r_label, r_json, r_prompt, W_LABEL * r_label + W_JSON * r_json + W_PROMPT * r_prompt)


def format_reward(
    tagged: TaggedOutput, json_report: ValidationReport, strict_json_schema: bool = False
) -> FormatComponents:
    """r_json is JSON well-formedness only unless ``strict_json_schema`` folds in schema validity."""
    sv = tagged.structure_vision
    fp = tagged.final_prompt
    r_label = int(sv is not None and fp is not None)
    if sv is None:
        r_json = 0
    elif strict_json_schema:
        r_json = int(json_report.valid)
    else:
        r_json = int(is_well_formed_json(sv))
    r_prompt = int(bool(fp))
    return aggregate_format(r_label, r_json, r_prompt)


def understanding_reward(scores: JudgeScores) -> UnderstandingComponents:
    p, c, f = scores.perception, scores.completeness, scores.faithfulness
    return UnderstandingComponents(p, c, f, (p + c + f) / 6)


def image_reward(hps: float, vlm: float) -> ImageComponents:
    for name, v in (("hps", hps), ("vlm", vlm)):
        if not (isinstance(v, (int, float)) and 0.0 <= v <= 1.0):
            raise ValueError(f"{name} must lie in [0, 1], got {v!r}")
    return ImageComponents(hps, vlm, W_HPS * hps + W_VLM * vlm)


def gate(r_format: float, threshold: float = GATE_THRESHOLD) -> bool:
    return r_format >= threshold


def final_reward(
    format: FormatComponents,
    understanding: UnderstandingComponents | None,
    image: ImageComponents | None,
    config: RewardConfig | None = None,
) -> float:
    cfg = config or RewardConfig()
    if cfg.format_only:
        return format.r_format
    if not gate(format.r_format, cfg.gate_threshold):
        return cfg.gated_format_shaping_coef * format.r_format
    if cfg.use_understanding and understanding is None:
        raise RuntimeError("gate passed but understanding reward is missing")
    if cfg.use_image and image is None:
        raise RuntimeError("gate passed but image reward is missing")
    if cfg.use_understanding and cfg.use_image:
        return W_UNDERSTANDING * understanding.r_understanding + W_IMAGE * image.r_image
    if cfg.use_understanding:
        return understanding.r_understanding
    return image.r_image


class _Serial:
    """Wraps single-flight clients so at most one call runs at a time."""

    def __init__(self, inner: ScoringClients) -> None:
        self._inner = inner
        self._lock = threading.Lock()

    def __getattr__(self, name: str) -> Any:
        attr = getattr(self._inner, name)
        if not callable(attr):
            return attr

        def locked(*args: Any, **kwargs: Any) -> Any:
            with self._lock:
                return attr(*args, **kwargs)

        return locked


def score_rollout(
    rollout_text: str,
    user_prompt: str,
    clients: ScoringClients | None,
    config: RewardConfig | None = None,
    sleep: Callable[[float], None] | None = None,
) -> RewardBreakdown:
    """Score one rollout. The format reward is computed locally; below the gate
    threshold nothing external is called. Otherwise: one judge call, one
    generator call, one image-scorer call (each retried on failure)."""
    cfg = config or RewardConfig()
    tagged = extract_tagged_sections(rollout_text)
    report, _ = parse_structured_vision(tagged, cfg.reflexive_predicates)
    fmt = format_reward(tagged, report, cfg.strict_json_schema)
    passed = gate(fmt.r_format, cfg.gate_threshold)
    if cfg.format_only or not passed:
        return RewardBreakdown(fmt, None, None, passed, final_reward(fmt, None, None, cfg), 0)
    if clients is None:
        raise ValueError("scoring clients are required once the format gate passes")

    calls = 0

    def count() -> None:
        nonlocal calls
        calls += 1

    retry_kw: dict[str, Any] = {"retries": cfg.max_retries, "backoff": cfg.backoff, "on_attempt": count}
    if sleep is not None:
        retry_kw["sleep"] = sleep

    und: UnderstandingComponents | None = None
    img: ImageComponents | None = None
    stage = "judge"
    try:
        if cfg.use_understanding:
            raw = call_with_retry(
                lambda: clients.judge(user_prompt, tagged.thinking_text, tagged.structure_vision, tagged.final_prompt),
                **retry_kw,
            )
            und = understanding_reward(JudgeScores.from_raw(raw))
        if cfg.use_image:
            stage = "generate"
            image_ref = call_with_retry(lambda: clients.generate(tagged.final_prompt), **retry_kw)
            stage = "score"
            hps, vlm = call_with_retry(lambda: clients.score_image(image_ref, tagged.final_prompt), **retry_kw)
            try:
                img = image_reward(hps, vlm)
            except ValueError as exc:
                raise ExternalServiceError(str(exc)) from exc
    except (ExternalServiceError, KeyError) as exc:
        partial = RewardBreakdown(fmt, und, img, True, 0.0, calls)
        raise ScoringError(f"{stage} failed: {exc}", partial) from exc
    return RewardBreakdown(fmt, und, img, True, final_reward(fmt, und, img, cfg), calls)


def score_group(
    rollouts: Sequence[str],
    user_prompt: str,
    clients: ScoringClients | None,
    max_parallel: int = 1,
    config: RewardConfig | None = None,
    sleep: Callable[[float], None] | None = None,
) -> list[RewardBreakdown]:
    """Score a batch; output order follows input order regardless of ``max_parallel``."""
    if not rollouts:
        raise ValueError("rollouts must be non-empty")
    if max_parallel < 1:
        raise ValueError("max_parallel must be >= 1")
    if clients is not None and getattr(clients, "single_flight", False):
        clients = _Serial(clients)

    def one(text: str) -> RewardBreakdown | ScoringError:
        try:
            return score_rollout(text, user_prompt, clients, config, sleep)
        except ScoringError as exc:
            return exc

    if max_parallel == 1:
        outcomes = [one(t) for t in rollouts]
    else:
        with ThreadPoolExecutor(max_workers=max_parallel) as pool:
            outcomes = list(pool.map(one, rollouts))
    errors = {i: o for i, o in enumerate(outcomes) if isinstance(o, ScoringError)}
    if errors:
        raise GroupScoringError(errors, [None if isinstance(o, ScoringError) else o for o in outcomes])
    return outcomes  # type: ignore[return-value]
