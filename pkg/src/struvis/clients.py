"""External-service contracts: retry policy, HTTP adapters and deterministic mocks.

HTTP wire formats (JSON bodies):

    POST /judge    {user_prompt, thinking_text, structure_vision, final_prompt}
                   -> {perception, completeness, faithfulness}
    POST /generate {prompt} -> {image_ref}
    POST /score    {image_ref, prompt} -> {hps, vlm}
    POST /prompts  {domain, n} -> {prompts: [...]}
    POST /extract  {image_ref} -> {structured_vision}
    POST /abstract {generative_prompt, image_ref} -> {user_prompt, thinking_text}
"""

from __future__ import annotations

import hashlib
import json
import logging
import threading
import time
from collections import Counter
from dataclasses import dataclass
from importlib import resources
from typing import Any, Callable, Iterable, Mapping, Protocol, TypeVar

import httpx

log = logging.getLogger(__name__)

T = TypeVar("T")

DEFAULT_RETRIES = 2
DEFAULT_BACKOFF = 0.5


def judge_rubric() -> str:
    """The fixed rubric a judge service should apply to each scored rollout."""
    return resources.files("struvis.templates").joinpath("judge_rubric.txt").read_text(encoding="utf-8")


class ExternalServiceError(RuntimeError):
    """A judge, generator, scorer or pipeline service failed to answer usably."""


def call_with_retry(
    fn: Callable[[], T],
    *,
    retries: int = DEFAULT_RETRIES,
    backoff: float = DEFAULT_BACKOFF,
    sleep: Callable[[float], None] = time.sleep,
    on_attempt: Callable[[], None] | None = None,
) -> T:
    """Run ``fn``; on ExternalServiceError retry up to ``retries`` times with
    exponential backoff (backoff, 2*backoff, ...), then re-raise the last error."""
    for attempt in range(retries + 1):
        if on_attempt is not None:
            on_attempt()
        try:
            return fn()
        except ExternalServiceError as exc:
            if attempt == retries:
                raise
            delay = backoff * (2**attempt)
            log.warning("external call failed (%s); retry %d/%d in %.2fs", exc, attempt + 1, retries, delay)
            if delay > 0:
                sleep(delay)
    raise AssertionError("unreachable")


# --- contracts --------------------------------------------------------------


class ScoringClients(Protocol):
    """Judge, generator and image scorer used after the format gate.

    Implementations set ``single_flight = True`` if they are not safe for
    concurrent use; the reward engine then serializes calls to them.
    """

    def judge(
        self, user_prompt: str, thinking_text: str, structure_vision: str, final_prompt: str
    ) -> Mapping[str, Any]: ...

    def generate(self, prompt: str) -> str: ...

    def score_image(self, image_ref: str, prompt: str) -> tuple[float, float]: ...


class PipelineClients(Protocol):
    def create_prompts(self, domain: str, n: int) -> list[str]: ...

    def generate(self, prompt: str) -> str: ...

    def extract(self, image_ref: str) -> str: ...

    def abstract(self, generative_prompt: str, image_ref: str) -> tuple[str, str]: ...


# --- HTTP adapters ----------------------------------------------------------


@dataclass(frozen=True)
class Endpoints:
    judge: str = "http://127.0.0.1:8700"
    generator: str = "http://127.0.0.1:8700"
    scorer: str = "http://127.0.0.1:8700"
    prompts: str = "http://127.0.0.1:8700"
    extractor: str = "http://127.0.0.1:8700"
    abstractor: str = "http://127.0.0.1:8700"
    timeout: float = 30.0

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any] | None) -> "Endpoints":
        data = dict(data or {})
        base = data.pop("base_url", None)
        kwargs: dict[str, Any] = {}
        for name in ("judge", "generator", "scorer", "prompts", "extractor", "abstractor"):
            url = data.pop(name, None)
            url = base if url is None else url
            if url is not None:
                kwargs[name] = str(url)
        timeout = data.pop("timeout", None)
        if timeout is not None:
            kwargs["timeout"] = float(timeout)
        if data:
            raise ValueError(f"unknown endpoint keys: {sorted(data)}")
        return cls(**kwargs)


class _HttpBase:
    def __init__(self, endpoints: Endpoints, http: httpx.Client | None = None) -> None:
        self.endpoints = endpoints
        self._http = http or httpx.Client(timeout=endpoints.timeout)

    def _post(self, base: str, path: str, body: dict[str, Any], keys: Iterable[str]) -> dict[str, Any]:
        url = base.rstrip("/") + path
        try:
            resp = self._http.post(url, json=body)
        except httpx.HTTPError as exc:
            raise ExternalServiceError(f"POST {url}: {exc}") from exc
        if resp.status_code >= 400:
            raise ExternalServiceError(f"POST {url}: HTTP {resp.status_code}")
        try:
            data = resp.json()
        except ValueError as exc:
            raise ExternalServiceError(f"POST {url}: response is not JSON") from exc
        missing = [k for k in keys if not isinstance(data, dict) or k not in data]
        if missing:
            raise ExternalServiceError(f"POST {url}: response lacks {missing}")
        return data

    def close(self) -> None:
        self._http.close()


class HttpScoringClients(_HttpBase):
    single_flight = False

    def judge(self, user_prompt: str, thinking_text: str, structure_vision: str, final_prompt: str) -> dict:
        body = {
            "user_prompt": user_prompt,
            "thinking_text": thinking_text,
            "structure_vision": structure_vision,
            "final_prompt": final_prompt,
        }
        keys = ("perception", "completeness", "faithfulness")
        data = self._post(self.endpoints.judge, "/judge", body, keys)
        return {k: data[k] for k in keys}

    def generate(self, prompt: str) -> str:
        return str(self._post(self.endpoints.generator, "/generate", {"prompt": prompt}, ["image_ref"])["image_ref"])

    def score_image(self, image_ref: str, prompt: str) -> tuple[float, float]:
        data = self._post(self.endpoints.scorer, "/score", {"image_ref": image_ref, "prompt": prompt}, ["hps", "vlm"])
        try:
            return float(data["hps"]), float(data["vlm"])
        except (TypeError, ValueError) as exc:
            raise ExternalServiceError(f"scorer returned non-numeric scores: {data}") from exc


class HttpPipelineClients(_HttpBase):
    def create_prompts(self, domain: str, n: int) -> list[str]:
        data = self._post(self.endpoints.prompts, "/prompts", {"domain": domain, "n": n}, ["prompts"])
        prompts = data["prompts"]
        if not isinstance(prompts, list) or not all(isinstance(p, str) for p in prompts):
            raise ExternalServiceError("prompt creator returned a non-list of strings")
        return prompts

    def generate(self, prompt: str) -> str:
        return str(self._post(self.endpoints.generator, "/generate", {"prompt": prompt}, ["image_ref"])["image_ref"])

    def extract(self, image_ref: str) -> str:
        sv = self._post(self.endpoints.extractor, "/extract", {"image_ref": image_ref}, ["structured_vision"])[
            "structured_vision"
        ]
        return sv if isinstance(sv, str) else json.dumps(sv)

    def abstract(self, generative_prompt: str, image_ref: str) -> tuple[str, str]:
        data = self._post(
            self.endpoints.abstractor,
            "/abstract",
            {"generative_prompt": generative_prompt, "image_ref": image_ref},
            ["user_prompt", "thinking_text"],
        )
        return str(data["user_prompt"]), str(data["thinking_text"])


# --- mocks ------------------------------------------------------------------


def _digest(*parts: str) -> bytes:
    h = hashlib.sha256()
    for p in parts:
        h.update(p.encode("utf-8"))
        h.update(b"\x00")
    return h.digest()


def image_ref_for(prompt: str) -> str:
    return "img-" + _digest("generate", prompt).hex()[:16]


class _CallCounter:
    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.calls: Counter[str] = Counter()
        self.in_flight = 0
        self.max_in_flight = 0

    def _enter(self, name: str) -> None:
        with self._lock:
            self.calls[name] += 1
            self.in_flight += 1
            self.max_in_flight = max(self.max_in_flight, self.in_flight)

    def _exit(self) -> None:
        with self._lock:
            self.in_flight -= 1

    @property
    def total_calls(self) -> int:
        with self._lock:
            return sum(self.calls.values())


class FixedScoringClients(_CallCounter):
    """Returns the same judge triple and image scores for every request.

    ``failures`` maps a stage name (judge/generate/score) to how many initial
    calls of that stage raise ExternalServiceError. ``delay`` (seconds) keeps
    calls in flight long enough for concurrency tests to observe overlap.
    """

    single_flight = False

    def __init__(
        self,
        perception: Any = 2,
        completeness: Any = 2,
        faithfulness: Any = 2,
        hps: float = 1.0,
        vlm: float = 1.0,
        failures: Mapping[str, int] | None = None,
        delay: float = 0.0,
    ) -> None:
        super().__init__()
        self.judge_scores = {"perception": perception, "completeness": completeness, "faithfulness": faithfulness}
        self.hps = hps
        self.vlm = vlm
        self._failures = dict(failures or {})
        self.delay = delay

    def _call(self, name: str, result: Callable[[], T]) -> T:
        self._enter(name)
        try:
            if self.delay:
                time.sleep(self.delay)
            with self._lock:
                fail = self._failures.get(name, 0) > 0
                if fail:
                    self._failures[name] -= 1
            if fail:
                raise ExternalServiceError(f"mock {name} failure")
            return result()
        finally:
            self._exit()

    def judge(self, user_prompt: str, thinking_text: str, structure_vision: str, final_prompt: str) -> dict:
        return self._call("judge", lambda: dict(self.judge_scores))

    def generate(self, prompt: str) -> str:
        return self._call("generate", lambda: image_ref_for(prompt))

    def score_image(self, image_ref: str, prompt: str) -> tuple[float, float]:
        return self._call("score", lambda: (self.hps, self.vlm))


class HashScoringClients(_CallCounter):
    """Scores are a pure function of the request content (sha256-seeded)."""

    single_flight = False

    def __init__(self, salt: str = "") -> None:
        super().__init__()
        self.salt = salt

    def judge(self, user_prompt: str, thinking_text: str, structure_vision: str, final_prompt: str) -> dict:
        self._enter("judge")
        try:
            d = _digest(self.salt, "judge", user_prompt, thinking_text, structure_vision, final_prompt)
            return {"perception": d[0] % 3, "completeness": d[1] % 3, "faithfulness": d[2] % 3}
        finally:
            self._exit()

    def generate(self, prompt: str) -> str:
        self._enter("generate")
        try:
            return image_ref_for(self.salt + prompt)
        finally:
            self._exit()

    def score_image(self, image_ref: str, prompt: str) -> tuple[float, float]:
        self._enter("score")
        try:
            d = _digest(self.salt, "score", image_ref, prompt)
            hps = int.from_bytes(d[:4], "big") % 1001 / 1000
            vlm = int.from_bytes(d[4:8], "big") % 1001 / 1000
            return hps, vlm
        finally:
            self._exit()


COLORS = ("red", "blue", "green")
NOUNS = ("cat", "dog", "tree", "sun")
SIZES = ("small", "big")
# (words in prompt, predicate id, subject box, object box)
RELATIONS: tuple[tuple[str, str, tuple[float, ...], tuple[float, ...]], ...] = (
    ("left of", "left_of", (0.05, 0.3, 0.45, 0.9), (0.55, 0.3, 0.95, 0.9)),
    ("right of", "right_of", (0.55, 0.3, 0.95, 0.9), (0.05, 0.3, 0.45, 0.9)),
    ("above", "above", (0.25, 0.05, 0.75, 0.45), (0.25, 0.55, 0.75, 0.95)),
    ("under", "under", (0.25, 0.55, 0.75, 0.95), (0.25, 0.05, 0.75, 0.45)),
    ("on", "on", (0.3, 0.2, 0.7, 0.5), (0.1, 0.5, 0.9, 0.95)),
    ("near", "near", (0.1, 0.4, 0.5, 0.9), (0.45, 0.35, 0.9, 0.9)),
)


@dataclass(frozen=True)
class _Scene:
    size: str
    color1: str
    noun1: str
    relation: int
    color2: str
    noun2: str

    @property
    def prompt(self) -> str:
        rel = RELATIONS[self.relation][0]
        return f"a {self.size} {self.color1} {self.noun1} {rel} a {self.color2} {self.noun2}"


def _scene_for(index: int) -> _Scene:
    pairs = [(a, b) for a in NOUNS for b in NOUNS if a != b]
    i = index
    size = SIZES[i % len(SIZES)]
    i //= len(SIZES)
    rel = i % len(RELATIONS)
    i //= len(RELATIONS)
    n1, n2 = pairs[i % len(pairs)]
    i //= len(pairs)
    c1 = COLORS[i % len(COLORS)]
    i //= len(COLORS)
    c2 = COLORS[i % len(COLORS)]
    return _Scene(size, c1, n1, rel, c2, n2)


def _scene_from_prompt(prompt: str) -> _Scene | None:
    words = prompt.split(" ")
    for ri, (rel_words, *_rest) in enumerate(RELATIONS):
        rw = rel_words.split(" ")
        # a SIZE COLOR NOUN <rel...> a COLOR NOUN
        if len(words) == 4 + len(rw) + 3 and words[4 : 4 + len(rw)] == rw:
            _, size, c1, n1 = words[:4]
            _, c2, n2 = words[4 + len(rw) :]
            return _Scene(size, c1, n1, ri, c2, n2)
    return None


def mock_state_json(prompt: str) -> str:
    """Structured-vision JSON the mock extractor returns for a mock prompt."""
    scene = _scene_from_prompt(prompt)
    if scene is None:
        entities = [{"id": "scene_1", "name": "scene", "attributes": [], "count": 1}]
        return json.dumps({"entities": entities, "relations": [], "layout": {
            "scene_1": {"x0": 0.0, "y0": 0.0, "x1": 1.0, "y1": 1.0, "depth": 0}}})
    _, pred, box1, box2 = RELATIONS[scene.relation]
    id1, id2 = f"{scene.noun1}_1", f"{scene.noun2}_2"
    state = {
        "entities": [
            {"id": id1, "name": scene.noun1, "attributes": [["color", scene.color1], ["size", scene.size]], "count": 1},
            {"id": id2, "name": scene.noun2, "attributes": [["color", scene.color2]], "count": 1},
        ],
        "relations": [{"subject": id1, "predicate": pred, "object": id2}],
        "layout": {
            id1: dict(zip(("x0", "y0", "x1", "y1"), box1), depth=1),
            id2: dict(zip(("x0", "y0", "x1", "y1"), box2), depth=0),
        },
        "global_style": None,
    }
    return json.dumps(state)


class MockPipelineClients(_CallCounter):
    """Deterministic stand-ins for the prompt creator, generator, extractor and abstractor.

    All text they produce stays inside the toy tokenizer's vocabulary so the
    resulting corpus can be fed straight into SFT.

    ``fail`` maps a stage (prompts/generate/extract/abstract) to generative
    prompts (or domains, for "prompts") on which that stage raises.
    ``bad_extract`` lists prompts whose extraction returns malformed JSON.
    """

    def __init__(
        self,
        fail: Mapping[str, Iterable[str]] | None = None,
        bad_extract: Iterable[str] = (),
    ) -> None:
        super().__init__()
        self.fail = {k: frozenset(v) for k, v in (fail or {}).items()}
        self.bad_extract = frozenset(bad_extract)
        self._images: dict[str, str] = {}

    def _check(self, stage: str, key: str) -> None:
        if key in self.fail.get(stage, ()):
            raise ExternalServiceError(f"mock {stage} failure for {key!r}")

    def create_prompts(self, domain: str, n: int) -> list[str]:
        self._enter("prompts")
        try:
            self._check("prompts", domain)
            return [mock_prompt(domain, i) for i in range(n)]
        finally:
            self._exit()

    def generate(self, prompt: str) -> str:
        self._enter("generate")
        try:
            self._check("generate", prompt)
            ref = image_ref_for(prompt)
            with self._lock:
                self._images[ref] = prompt
            return ref
        finally:
            self._exit()

    def _prompt_of(self, image_ref: str) -> str:
        with self._lock:
            prompt = self._images.get(image_ref)
        if prompt is None:
            raise ExternalServiceError(f"unknown image_ref {image_ref!r}")
        return prompt

    def extract(self, image_ref: str) -> str:
        self._enter("extract")
        try:
            prompt = self._prompt_of(image_ref)
            self._check("extract", prompt)
            if prompt in self.bad_extract:
                return "{"
            return mock_state_json(prompt)
        finally:
            self._exit()

    def abstract(self, generative_prompt: str, image_ref: str) -> tuple[str, str]:
        self._enter("abstract")
        try:
            self._check("abstract", generative_prompt)
            scene = _scene_from_prompt(generative_prompt)
            if scene is None:
                return "a scene", f"think the scene {generative_prompt}"
            user = f"a {scene.noun1} with a {scene.noun2}"
            thinking = f"think the scene {scene.prompt}"
            return user, thinking
        finally:
            self._exit()


_DOMAIN_OFFSET = {d: i * 97 for i, d in enumerate(
    ("culture", "nature", "science", "metaphor", "spatial", "textual", "entity", "story"))}


def mock_prompt(domain: str, index: int) -> str:
    """The ``index``-th generative prompt the mock creator returns for ``domain``."""
    return _scene_for(_DOMAIN_OFFSET.get(domain, 0) + index).prompt
