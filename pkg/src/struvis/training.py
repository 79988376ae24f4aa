"""SFT cross-entropy, the GRPO objective, and desk-scale training loops."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from .clients import ScoringClients
from .policy import PolicyInterface, TokenizationError, ToyPolicy, ToyTokenizer
from .rewards import RewardBreakdown, RewardConfig, score_group
from .vision import TAG_LITERALS, CoTRecord, render_rollout_target

CHECKPOINT_FORMAT = "struvis-checkpoint"
CHECKPOINT_VERSION = 1

Scorer = Callable[[Sequence[str], str], Sequence[RewardBreakdown]]


@dataclass(frozen=True)
class GRPOConfig:
    group_size: int = 8
    clip_eps: float = 0.2
    kl_coef: float = 0.04
    lr: float = 2e-5
    std_eps: float = 1e-8
    min_lr_ratio: float = 0.0
    max_len: int = 16
    inner_epochs: int = 1
    max_parallel: int = 1

    def __post_init__(self) -> None:
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if not 0.0 < self.clip_eps < 1.0:
            raise ValueError("clip_eps must lie in (0, 1)")
        if self.kl_coef < 0:
            raise ValueError("kl_coef must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.inner_epochs < 1 or self.max_len < 1 or self.max_parallel < 1:
            raise ValueError("inner_epochs, max_len and max_parallel must be >= 1")


@dataclass(frozen=True)
class SFTConfig:
    lr: float = 5e-5
    min_lr_ratio: float = 0.0

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ValueError("lr must be > 0")


@dataclass(frozen=True)
class ToyTaskConfig:
    """Geometry of the built-in format-reward task."""

    n_positions: int = 16
    prompts_per_step: int = 4
    init_scale: float = 0.01
    prev_token: bool = True
    tag_state: bool = False


# Toy-scale hyperparameters for the built-in format task. The toy policy's
# logits are raw table entries, so it needs a far larger step than an MLLM.
# The tag-state rows let it condition on which tags it has already written.
TOY_GRPO = GRPOConfig(lr=10.0, kl_coef=0.04, max_len=16)
TOY_TASK = ToyTaskConfig(tag_state=True)


def cosine_lr(base_lr: float, step: int, total_steps: int, min_ratio: float = 0.0) -> float:
    """Cosine decay from ``base_lr`` at step 0 to ``min_ratio * base_lr`` at the last step."""
    floor = base_lr * min_ratio
    if total_steps <= 1:
        return base_lr
    progress = min(max(step, 0), total_steps - 1) / (total_steps - 1)
    return floor + 0.5 * (base_lr - floor) * (1.0 + math.cos(math.pi * progress))


# --- losses -----------------------------------------------------------------


def sft_loss(policy: PolicyInterface, prompt: Sequence[int], target: Sequence[int]) -> tuple[float, np.ndarray]:
    """Summed negative log-likelihood of ``target`` given ``prompt`` and its parameter gradient."""
    if len(target) == 0:
        raise ValueError("target must be non-empty")
    lp = policy.logprobs(prompt, target)
    grad = policy.logprobs_backward(prompt, target, -np.ones(len(target)))
    return float(-lp.sum()), grad


def compute_group_advantages(rewards: Sequence[float], std_eps: float = 1e-8) -> np.ndarray:
    """(r - mean) / (population std + std_eps); a constant group maps to zeros."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise ValueError("a group needs at least 2 rewards")
    if np.all(r == r[0]):
        return np.zeros_like(r)
    # fsum is correctly rounded, so the result is exactly permutation-equivariant
    centered = r - math.fsum(r) / r.size
    std = math.sqrt(math.fsum(centered * centered) / r.size)
    return centered / (std + std_eps)


def kl_k3(lp_ref: np.ndarray, lp_new: np.ndarray) -> np.ndarray:
    """Per-token estimator exp(d) - d - 1 with d = lp_ref - lp_new (never negative)."""
    d = np.asarray(lp_ref, dtype=np.float64) - np.asarray(lp_new, dtype=np.float64)
    return np.expm1(d) - d


def grpo_loss(
    logprobs_new: Sequence[Sequence[float]],
    logprobs_old: Sequence[Sequence[float]],
    logprobs_ref: Sequence[Sequence[float]],
    advantages: Sequence[float],
    config: GRPOConfig,
) -> tuple[float, list[np.ndarray]]:
    """Clipped token-level surrogate minus beta*KL, averaged over tokens then completions.

    Returns the loss (negated objective) and its gradient with respect to each
    completion's new log-probabilities.
    """
    g = len(advantages)
    if not (len(logprobs_new) == len(logprobs_old) == len(logprobs_ref) == g) or g == 0:
        raise ValueError("logprob lists and advantages must all have the same (non-zero) length")
    eps, beta = config.clip_eps, config.kl_coef
    total = 0.0
    grads = []
    for new, old, ref, adv in zip(logprobs_new, logprobs_old, logprobs_ref, advantages):
        new = np.asarray(new, dtype=np.float64)
        old = np.asarray(old, dtype=np.float64)
        ref = np.asarray(ref, dtype=np.float64)
        if not (new.shape == old.shape == ref.shape) or new.ndim != 1 or new.size == 0:
            raise ValueError("per-completion logprob arrays must be 1-D, non-empty and equally long")
        ratio = np.exp(new - old)
        unclipped = ratio * adv
        clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv
        surrogate = np.minimum(unclipped, clipped)
        d = ref - new
        kl = np.expm1(d) - d
        total += float(np.mean(surrogate - beta * kl))
        d_surrogate = np.where(unclipped <= clipped, unclipped, 0.0)
        d_kl = -np.expm1(d)
        grads.append(-(d_surrogate - beta * d_kl) / (new.size * g))
    return -total / g, grads


# --- GRPO step --------------------------------------------------------------


@dataclass(frozen=True)
class StepReport:
    step: int
    mean_reward: float
    mean_advantage: float
    loss: float
    grad_norm: float
    lr: float

    def curve_row(self) -> dict[str, Any]:
        return {"step": self.step, "mean_reward": self.mean_reward, "loss": self.loss,
                "grad_norm": self.grad_norm, "lr": self.lr}


@dataclass(frozen=True)
class RolloutGroup:
    prompt_id: str
    completions: tuple[tuple[int, ...], ...]
    old_logprobs: tuple[tuple[float, ...], ...]
    rewards: tuple[float, ...]
    advantages: tuple[float, ...]


def make_scorer(
    clients: ScoringClients | None = None,
    reward_config: RewardConfig | None = None,
    max_parallel: int = 1,
) -> Scorer:
    def scorer(rollouts: Sequence[str], user_prompt: str) -> Sequence[RewardBreakdown]:
        return score_group(rollouts, user_prompt, clients, max_parallel, reward_config)

    return scorer


FORMAT_ONLY = RewardConfig(use_understanding=False, use_image=False)


def grpo_step(
    policy: PolicyInterface,
    ref_policy: PolicyInterface,
    prompts: Sequence[Sequence[int]],
    scorer: Scorer,
    config: GRPOConfig,
    seed: int,
    *,
    step: int = 0,
    total_steps: int = 1,
    tokenizer: ToyTokenizer | None = None,
) -> tuple[StepReport, list[RolloutGroup]]:
    """Sample a group per prompt, score, normalize within groups, take one descent step.

    Scoring finishes before the parameters are touched, so a scoring failure
    leaves the policy unchanged.
    """
    tok = tokenizer or ToyTokenizer()
    seeds = np.random.SeedSequence([seed, step]).spawn(len(prompts) * config.group_size)
    groups: list[RolloutGroup] = []
    flat_prompts: list[Sequence[int]] = []
    for pi, prompt in enumerate(prompts):
        group_seeds = seeds[pi * config.group_size : (pi + 1) * config.group_size]
        if hasattr(policy, "sample_batch"):
            samples = policy.sample_batch([prompt] * config.group_size, config.max_len, group_seeds)
        else:
            samples = [policy.sample(prompt, config.max_len, s) for s in group_seeds]
        texts = [tok.decode(s.tokens) for s in samples]
        rewards = [b.r_final for b in scorer(texts, tok.decode(prompt))]
        adv = compute_group_advantages(rewards, config.std_eps)
        groups.append(
            RolloutGroup(
                prompt_id=f"p{pi}",
                completions=tuple(s.tokens for s in samples),
                old_logprobs=tuple(s.logprobs for s in samples),
                rewards=tuple(rewards),
                advantages=tuple(float(a) for a in adv),
            )
        )
        flat_prompts.extend([prompt] * config.group_size)

    completions = [c for grp in groups for c in grp.completions]
    old = [np.asarray(lp) for grp in groups for lp in grp.old_logprobs]
    advantages = [a for grp in groups for a in grp.advantages]
    ref = [ref_policy.logprobs(p, c) for p, c in zip(flat_prompts, completions)]
    lr = cosine_lr(config.lr, step, total_steps, config.min_lr_ratio)

    first: tuple[float, float] | None = None
    for _ in range(config.inner_epochs):
        new = [policy.logprobs(p, c) for p, c in zip(flat_prompts, completions)]
        loss, lp_grads = grpo_loss(new, old, ref, advantages, config)
        grad = np.zeros_like(policy.params)
        for p, c, g in zip(flat_prompts, completions, lp_grads):
            grad += policy.logprobs_backward(p, c, g)
        if first is None:
            first = (loss, float(np.linalg.norm(grad)))
        policy.params[...] -= lr * grad

    all_rewards = [r for grp in groups for r in grp.rewards]
    report = StepReport(
        step=step,
        mean_reward=float(np.mean(all_rewards)),
        mean_advantage=float(np.mean(advantages)),
        loss=first[0],
        grad_norm=first[1],
        lr=lr,
    )
    return report, groups


# --- curves and checkpoints -------------------------------------------------


@dataclass
class TrainingCurve:
    rows: list[dict[str, Any]] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)
    policy: PolicyInterface | None = None

    @property
    def final_mean_reward(self) -> float | None:
        return self.rows[-1]["mean_reward"] if self.rows else None

    def window_mean_reward(self, window: int = 50) -> float | None:
        """Mean of the per-step mean rewards over the last ``window`` steps."""
        if not self.rows:
            return None
        return math.fsum(r["mean_reward"] for r in self.rows[-window:]) / len(self.rows[-window:])

    def to_jsonl(self) -> str:
        return "".join(json.dumps(row) + "\n" for row in self.rows)

    def write_jsonl(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl())


def save_checkpoint(path: str | Path, policy: ToyPolicy, config: Any, seed: int, stage: str) -> None:
    cfg = asdict(config) if hasattr(config, "__dataclass_fields__") else dict(config)
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "stage": stage,
        "seed": seed,
        "config": cfg,
        "policy": policy.to_dict(),
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n")


def load_checkpoint(path: str | Path) -> tuple[ToyPolicy, dict[str, Any]]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION} file")
    return ToyPolicy.from_dict(doc["policy"]), doc


# --- loops ------------------------------------------------------------------

TOY_PROMPTS: tuple[str, ...] = tuple(
    f"a {c} {n}" for c in ("red", "blue", "green", "big") for n in ("cat", "dog", "tree", "sun")
)


def toy_policy(tokenizer: ToyTokenizer, n_positions: int, seed: int, scale: float = 0.01,
               prev_token: bool = True, tag_state: bool = False) -> ToyPolicy:
    """Toy policy over the tokenizer's vocabulary; ``tag_state`` adds a context
    row for the set of tag literals emitted so far."""
    markers = [tokenizer.index[t] for t in TAG_LITERALS] if tag_state else []
    return ToyPolicy.random(len(tokenizer), n_positions, seed, scale, eos_id=tokenizer.eos_id,
                            prev_token=prev_token, marker_ids=markers)


def train_toy(
    config: GRPOConfig,
    total_steps: int,
    seed: int,
    task: ToyTaskConfig | None = None,
    on_step: Callable[[StepReport], None] | None = None,
    policy: PolicyInterface | None = None,
    prompts: Sequence[str] | None = None,
) -> TrainingCurve:
    """GRPO on the format-reward-only toy task (no external calls).

    ``prompts`` replaces the built-in prompt pool; each must tokenize.

    ``policy`` (e.g. an SFT checkpoint) is trained in place; otherwise a fresh
    toy policy is initialised from ``seed``. The reference is frozen at entry.
    """
    task = task or TOY_TASK
    tok = ToyTokenizer()
    if policy is None:
        policy = toy_policy(tok, task.n_positions, seed, task.init_scale, task.prev_token, task.tag_state)
    ref = policy.copy()
    pool = [tok.encode(p) for p in (TOY_PROMPTS if prompts is None else prompts)]
    if not pool:
        raise ValueError("the prompt pool is empty")
    scorer = make_scorer(None, FORMAT_ONLY, config.max_parallel)
    curve = TrainingCurve(policy=policy)
    for step in range(total_steps):
        prompts = [pool[(step * task.prompts_per_step + j) % len(pool)] for j in range(task.prompts_per_step)]
        report, _ = grpo_step(policy, ref, prompts, scorer, config, seed, step=step,
                              total_steps=total_steps, tokenizer=tok)
        curve.rows.append(report.curve_row())
        if on_step is not None:
            on_step(report)
    return curve


def tokenize_records(records: Sequence[CoTRecord], tokenizer: ToyTokenizer) -> list[tuple[list[int], list[int]]]:
    out = []
    for rec in records:
        try:
            prompt = tokenizer.encode(rec.user_prompt)
            target = tokenizer.encode(render_rollout_target(rec)) + [tokenizer.eos_id]
        except TokenizationError as exc:
            raise TokenizationError(f"record {rec.record_id}: {exc}") from exc
        out.append((prompt, target))
    return out


def train_sft(
    policy: PolicyInterface,
    records: Sequence[CoTRecord],
    config: SFTConfig,
    epochs: int,
    seed: int,
    tokenizer: ToyTokenizer | None = None,
) -> TrainingCurve:
    """Per-record gradient descent on the summed NLL of rendered CoT targets.

    Record order is reshuffled each epoch from ``seed``; lr follows a cosine
    decay over all optimizer steps.
    """
    if not records:
        raise ValueError("records must be non-empty")
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    tok = tokenizer or ToyTokenizer()
    data = tokenize_records(records, tok)
    total = epochs * len(data)
    rng = np.random.default_rng(seed)
    curve = TrainingCurve(policy=policy)
    step = 0
    for _ in range(epochs):
        losses = []
        for idx in rng.permutation(len(data)):
            prompt, target = data[idx]
            loss, grad = sft_loss(policy, prompt, target)
            lr = cosine_lr(config.lr, step, total, config.min_lr_ratio)
            policy.params[...] -= lr * grad
            curve.rows.append({"step": step, "mean_reward": None, "loss": loss,
                               "grad_norm": float(np.linalg.norm(grad)), "lr": lr})
            losses.append(loss)
            step += 1
        curve.epoch_losses.append(float(np.mean(losses)))
    return curve
