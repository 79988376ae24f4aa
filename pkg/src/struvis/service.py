"""HTTP service: deterministic stand-ins for the external models plus the core API.

The stand-in endpoints speak the same wire format the HTTP clients expect, so
``struvis serve`` followed by ``struvis score --endpoints ...`` or
``struvis pipeline ...`` exercises the real network path without any model.
"""

from __future__ import annotations

from typing import Any

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from . import __version__
from .clients import ExternalServiceError, HashScoringClients, MockPipelineClients
from .rewards import RewardConfig, ScoringError, score_rollout
from .vision import DOMAINS, validate_state


class JudgeRequest(BaseModel):
    user_prompt: str
    thinking_text: str
    structure_vision: str
    final_prompt: str


class JudgeResponse(BaseModel):
    perception: int = Field(ge=0, le=2)
    completeness: int = Field(ge=0, le=2)
    faithfulness: int = Field(ge=0, le=2)


class GenerateRequest(BaseModel):
    prompt: str


class GenerateResponse(BaseModel):
    image_ref: str


class ScoreRequest(BaseModel):
    image_ref: str
    prompt: str


class ScoreResponse(BaseModel):
    hps: float = Field(ge=0.0, le=1.0)
    vlm: float = Field(ge=0.0, le=1.0)


class PromptsRequest(BaseModel):
    domain: str
    n: int = Field(ge=0)


class PromptsResponse(BaseModel):
    prompts: list[str]


class ExtractRequest(BaseModel):
    image_ref: str


class ExtractResponse(BaseModel):
    structured_vision: str


class AbstractRequest(BaseModel):
    generative_prompt: str
    image_ref: str


class AbstractResponse(BaseModel):
    user_prompt: str
    thinking_text: str


class ValidateRequest(BaseModel):
    text: str
    reflexive_predicates: list[str] = []


class RewardRequest(BaseModel):
    rollout: str
    user_prompt: str
    strict_json_schema: bool = False


def create_app(
    scoring: Any | None = None,
    pipeline: MockPipelineClients | None = None,
) -> FastAPI:
    app = FastAPI(title="struvis", version=__version__)
    scoring = scoring if scoring is not None else HashScoringClients()
    pipeline = pipeline if pipeline is not None else MockPipelineClients()

    def upstream(fn, *args):
        try:
            return fn(*args)
        except ExternalServiceError as exc:
            raise HTTPException(status_code=503, detail=str(exc)) from exc

    @app.get("/health")
    def health() -> dict[str, str]:
        return {"status": "ok", "version": __version__}

    @app.post("/judge", response_model=JudgeResponse)
    def judge(req: JudgeRequest) -> dict:
        return upstream(scoring.judge, req.user_prompt, req.thinking_text, req.structure_vision, req.final_prompt)

    @app.post("/generate", response_model=GenerateResponse)
    def generate(req: GenerateRequest) -> dict:
        # Register with the pipeline stand-in too, so /extract can resolve the ref.
        ref = upstream(pipeline.generate, req.prompt)
        return {"image_ref": ref}

    @app.post("/score", response_model=ScoreResponse)
    def score(req: ScoreRequest) -> dict:
        hps, vlm = upstream(scoring.score_image, req.image_ref, req.prompt)
        return {"hps": hps, "vlm": vlm}

    @app.post("/prompts", response_model=PromptsResponse)
    def prompts(req: PromptsRequest) -> dict:
        if req.domain not in DOMAINS:
            raise HTTPException(status_code=422, detail=f"unknown domain {req.domain!r}")
        return {"prompts": upstream(pipeline.create_prompts, req.domain, req.n)}

    @app.post("/extract", response_model=ExtractResponse)
    def extract(req: ExtractRequest) -> dict:
        return {"structured_vision": upstream(pipeline.extract, req.image_ref)}

    @app.post("/abstract", response_model=AbstractResponse)
    def abstract(req: AbstractRequest) -> dict:
        user, thinking = upstream(pipeline.abstract, req.generative_prompt, req.image_ref)
        return {"user_prompt": user, "thinking_text": thinking}

    @app.post("/validate")
    def validate(req: ValidateRequest) -> dict:
        return validate_state(req.text, tuple(req.reflexive_predicates)).to_dict()

    @app.post("/reward")
    def reward(req: RewardRequest) -> dict:
        config = RewardConfig(strict_json_schema=req.strict_json_schema, backoff=0.0)
        try:
            return score_rollout(req.rollout, req.user_prompt, scoring, config).to_dict()
        except ScoringError as exc:
            raise HTTPException(status_code=503, detail={"error": str(exc), "partial": exc.partial.to_dict()}) from exc

    return app
