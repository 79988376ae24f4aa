"""Command-line entry point: validate, score, pipeline, train, serve.

Every payload on stdout is JSON; logs go to stderr.

Exit codes:
  0  success
  1  validation or scoring failure (invalid input data, failed records)
  2  usage error (bad flags, unreadable input, bad config)
  3  external-service error (judge/generator/scorer unreachable after retries)
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from .clients import (
    Endpoints,
    ExternalServiceError,
    FixedScoringClients,
    HttpPipelineClients,
    HttpScoringClients,
    MockPipelineClients,
)
from .config import ENV_PREFIX, ConfigError, Settings
from .pipeline import PipelineConfig, load_records, run_pipeline, validate_dataset
from .policy import TokenizationError, ToyTokenizer
from .rewards import RewardConfig, ScoringError, score_rollout
from .training import (
    GRPOConfig,
    SFTConfig,
    ToyTaskConfig,
    load_checkpoint,
    save_checkpoint,
    toy_policy,
    train_sft,
    train_toy,
)
from .vision import RecordError, validate_state

EXIT_OK, EXIT_INVALID, EXIT_USAGE, EXIT_EXTERNAL = 0, 1, 2, 3

log = logging.getLogger("struvis")


class UsageError(Exception):
    pass


def _emit(payload: Any) -> None:
    sys.stdout.write(json.dumps(payload, sort_keys=True) + "\n")
    sys.stdout.flush()


def _read_input(path: str) -> str:
    if path == "-":
        return sys.stdin.read()
    try:
        return Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise UsageError(f"cannot read {path}: {exc}") from exc


# --- validate ---------------------------------------------------------------


def cmd_validate(args: argparse.Namespace, settings: Settings) -> int:
    reflexive = settings.get("rewards.reflexive_predicates", args.reflexive)
    is_dataset = settings.get("validate.dataset", True if args.dataset else None) or (
        args.path != "-" and args.path.endswith(".jsonl"))
    if is_dataset:
        if args.path == "-":
            raise UsageError("dataset validation needs a file path")
        try:
            report = validate_dataset(args.path)
        except (OSError, UnicodeDecodeError) as exc:
            raise UsageError(f"cannot read {args.path}: {exc}") from exc
        _emit(report.to_dict())
        return EXIT_OK if report.valid else EXIT_INVALID
    result = validate_state(_read_input(args.path), reflexive)
    _emit(result.to_dict())
    return EXIT_OK if result.valid else EXIT_INVALID


# --- score ------------------------------------------------------------------


def _reward_config(settings: Settings, flags: dict[str, Any]) -> RewardConfig:
    r = settings.section("rewards", flags)
    return RewardConfig(
        gate_threshold=float(r["gate_threshold"]),
        strict_json_schema=bool(r["strict_json_schema"]),
        gated_format_shaping_coef=float(r["gated_format_shaping_coef"]),
        use_understanding=bool(r["use_understanding"]),
        use_image=bool(r["use_image"]),
        max_retries=int(r["max_retries"]),
        backoff=float(r["backoff"]),
        reflexive_predicates=tuple(r["reflexive_predicates"] or ()),
    )


def cmd_score(args: argparse.Namespace, settings: Settings) -> int:
    text = _read_input(args.rollout)
    cfg = _reward_config(settings, {
        "strict_json_schema": args.strict_json_schema,
        "max_retries": args.retries,
        "backoff": args.backoff,
    })
    judge = args.mock_judge or [None, None, None]
    mock = settings.section("mock", {
        "enabled": True if args.mock else None,
        "perception": judge[0], "completeness": judge[1], "faithfulness": judge[2],
        "hps": args.mock_hps, "vlm": args.mock_vlm,
    })
    if mock["enabled"]:
        clients: Any = FixedScoringClients(mock["perception"], mock["completeness"], mock["faithfulness"],
                                           mock["hps"], mock["vlm"])
    else:
        clients = HttpScoringClients(_endpoints(settings))
    try:
        breakdown = score_rollout(text, args.prompt, clients, cfg)
    except ScoringError as exc:
        log.error("%s", exc)
        _emit({"error": str(exc), "partial": exc.partial.to_dict()})
        return EXIT_EXTERNAL
    _emit(breakdown.to_dict())
    return EXIT_OK


def _endpoints(settings: Settings) -> Endpoints:
    try:
        return Endpoints.from_mapping(settings.section("endpoints"))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad endpoints: {exc}") from exc


# --- pipeline ---------------------------------------------------------------


def cmd_pipeline(args: argparse.Namespace, settings: Settings) -> int:
    p = settings.section("pipeline", {
        "output": args.output,
        "resume": True if args.resume else None,
        "max_parallel": args.max_parallel,
        "per_domain": args.per_domain,
    })
    try:
        targets = p["targets"]
        if targets is None:
            config = PipelineConfig.uniform(int(p["per_domain"]), p["output"], max_parallel=int(p["max_parallel"]),
                                            resume=bool(p["resume"]), retries=int(p["retries"]),
                                            backoff=float(p["backoff"]))
        else:
            config = PipelineConfig(output=Path(p["output"]), targets={k: int(v) for k, v in targets.items()},
                                    max_parallel=int(p["max_parallel"]), resume=bool(p["resume"]),
                                    retries=int(p["retries"]), backoff=float(p["backoff"]))
    except (TypeError, ValueError, AttributeError) as exc:
        raise ConfigError(f"bad pipeline config: {exc}") from exc
    mock = settings.section("mock")
    if mock["enabled"]:
        clients: Any = MockPipelineClients(fail=mock["fail"] or {}, bad_extract=mock["bad_extract"] or ())
    else:
        clients = HttpPipelineClients(_endpoints(settings))
    try:
        report = run_pipeline(config, clients)
    except OSError as exc:
        raise UsageError(str(exc)) from exc
    _emit(report.to_dict())
    return EXIT_OK if not report.failures else EXIT_INVALID


# --- train ------------------------------------------------------------------


def cmd_train(args: argparse.Namespace, settings: Settings) -> int:
    t = settings.section("train", {
        "seed": args.seed, "steps": getattr(args, "steps", None), "epochs": getattr(args, "epochs", None),
        "data": getattr(args, "data", None), "out_dir": args.out_dir, "init": getattr(args, "init", None),
        "prompts": getattr(args, "prompts", None),
    })
    out_dir = Path(t["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    seed = int(t["seed"])
    curve_path = out_dir / f"{args.mode}_curve.jsonl"
    ckpt_path = out_dir / f"{args.mode}_checkpoint.json"

    if args.mode == "toy":
        g = settings.section("grpo", {
            "lr": args.lr, "group_size": args.group_size, "kl_coef": args.kl_coef,
            "clip_eps": args.clip_eps, "max_len": args.max_len,
        })
        try:
            config = GRPOConfig(**g)
            task = ToyTaskConfig(**settings.section("toy", {"prompts_per_step": args.prompts_per_step}))
        except (TypeError, ValueError) as exc:
            raise UsageError(f"bad GRPO settings: {exc}") from exc
        init = None
        if t["init"]:
            try:
                init, _ = load_checkpoint(t["init"])
            except (OSError, ValueError, KeyError) as exc:
                raise UsageError(f"cannot load checkpoint {t['init']}: {exc}") from exc
        prompts = None
        if t["prompts"]:
            try:
                text = Path(t["prompts"]).read_text(encoding="utf-8")
            except OSError as exc:
                raise UsageError(f"cannot read {t['prompts']}: {exc}") from exc
            prompts = [line for line in text.splitlines() if line.strip()]
            if not prompts:
                raise UsageError(f"{t['prompts']} holds no prompts")
            tok = ToyTokenizer()
            for n, line in enumerate(prompts, 1):
                try:
                    tok.encode(line)
                except TokenizationError as exc:
                    _emit({"error": f"bad prompt file: prompt {n}: {exc}"})
                    return EXIT_INVALID
        steps = int(t["steps"])
        if steps < 1:
            raise UsageError("--steps must be >= 1")
        curve = train_toy(config, steps, seed, task, policy=init, prompts=prompts,
                          on_step=lambda r: log.debug("step %d reward %.3f", r.step, r.mean_reward))
        curve.write_jsonl(curve_path)
        save_checkpoint(ckpt_path, curve.policy, config, seed, "grpo")
        rewards = [row["mean_reward"] for row in curve.rows]
        _emit({
            "mode": "toy", "seed": seed, "steps": steps,
            "initial_mean_reward": rewards[0], "final_mean_reward": rewards[-1],
            "final_window_mean_reward": curve.window_mean_reward(),
            "final_loss": curve.rows[-1]["loss"], "curve": str(curve_path), "checkpoint": str(ckpt_path),
        })
        return EXIT_OK

    s = settings.section("sft", {"lr": args.lr, "n_positions": args.n_positions})
    if not t["data"]:
        raise UsageError("train sft needs --data (or train.data in the config)")
    try:
        records = load_records(t["data"])
    except OSError as exc:
        raise UsageError(f"cannot read {t['data']}: {exc}") from exc
    except RecordError as exc:
        log.error("bad dataset: %s", exc)
        _emit({"error": f"bad dataset: {exc}"})
        return EXIT_INVALID
    if not records:
        _emit({"error": "bad dataset: no records"})
        return EXIT_INVALID
    try:
        config = SFTConfig(lr=float(s["lr"]), min_lr_ratio=float(s["min_lr_ratio"]))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    tok = ToyTokenizer()
    try:
        policy = toy_policy(tok, int(s["n_positions"]), seed, float(s["init_scale"]), bool(s["prev_token"]))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    epochs = int(t["epochs"])
    if epochs < 1:
        raise UsageError("--epochs must be >= 1")
    try:
        curve = train_sft(policy, records, config, epochs, seed, tok)
    except TokenizationError as exc:
        _emit({"error": f"bad dataset: {exc}"})
        return EXIT_INVALID
    curve.write_jsonl(curve_path)
    save_checkpoint(ckpt_path, policy, config, seed, "sft")
    losses = curve.epoch_losses
    _emit({
        "mode": "sft", "seed": seed, "epochs": epochs, "records": len(records),
        "epoch_losses": losses, "final_loss": losses[-1],
        "strictly_decreasing": all(b < a for a, b in zip(losses, losses[1:])),
        "curve": str(curve_path), "checkpoint": str(ckpt_path),
    })
    return EXIT_OK


# --- serve ------------------------------------------------------------------


def cmd_serve(args: argparse.Namespace, settings: Settings) -> int:
    import uvicorn

    from .service import create_app

    s = settings.section("serve", {"host": args.host, "port": args.port})
    uvicorn.run(create_app(), host=s["host"], port=int(s["port"]), log_level="warning")
    return EXIT_OK


# --- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="struvis",
        description="Structured-vision CoT tooling: validation, reward scoring, data pipeline, toy training.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=(
            "exit codes:\n"
            "  0 success\n"
            "  1 validation or scoring failure (invalid data, failed records)\n"
            "  2 usage error (bad flags, unreadable input, bad config)\n"
            "  3 external-service error (unreachable after retries)\n\n"
            "Each setting flag names its config key in [brackets]. Precedence:\n"
            f"flag > env var {ENV_PREFIX}<SECTION>__<KEY> > config file > default."
        ),
    )
    parser.add_argument("--version", action="version", version=f"struvis {__version__}")
    parser.add_argument("--config", help="YAML config file")
    parser.add_argument("--log-level", help="stderr log level, default WARNING [cli.log_level]")
    sub = parser.add_subparsers(dest="command", required=True)

    v = sub.add_parser("validate", help="validate a structured-vision JSON file or a JSONL dataset")
    v.add_argument("path", help="file to check, or - for stdin [no config key]")
    v.add_argument("--dataset", action="store_true",
                   help="treat input as a JSONL CoT dataset, automatic for *.jsonl [validate.dataset]")
    v.add_argument("--reflexive", action="append", default=None, metavar="PREDICATE",
                   help="predicate allowed on reflexive relations [rewards.reflexive_predicates]")
    v.set_defaults(func=cmd_validate)

    s = sub.add_parser("score", help="score one rollout with the gated reward stack")
    s.add_argument("rollout", help="file holding the raw rollout text, or - for stdin")
    s.add_argument("--prompt", required=True, help="the user prompt the rollout answers")
    group = s.add_mutually_exclusive_group()
    group.add_argument("--mock", action="store_true", help="use fixed in-process mock clients [mock.enabled]")
    group.add_argument("--endpoints", metavar="CONFIG", help="YAML file whose [endpoints] section names services")
    s.add_argument("--mock-judge", type=int, nargs=3, metavar=("P", "C", "F"),
                   help="mock judge perception/completeness/faithfulness [mock.perception ...]")
    s.add_argument("--mock-hps", type=float, help="mock HPS in [0,1] [mock.hps]")
    s.add_argument("--mock-vlm", type=float, help="mock VLM score in [0,1] [mock.vlm]")
    s.add_argument("--strict-json-schema", action="store_const", const=True, default=None,
                   help="R_json also requires schema validity [rewards.strict_json_schema]")
    s.add_argument("--retries", type=int, help="retries per external call [rewards.max_retries]")
    s.add_argument("--backoff", type=float, help="initial retry backoff seconds [rewards.backoff]")
    s.set_defaults(func=cmd_score)

    p = sub.add_parser("pipeline", help="build a CoT dataset from a pipeline config")
    p.add_argument("pipeline_config", metavar="CONFIG", help="YAML file with [pipeline] (and [mock]/[endpoints])")
    p.add_argument("--output", help="JSONL output path [pipeline.output]")
    p.add_argument("--resume", action="store_true", help="skip records already in the output [pipeline.resume]")
    p.add_argument("--max-parallel", type=int, help="concurrent record builders [pipeline.max_parallel]")
    p.add_argument("--per-domain", type=int, help="uniform target per domain [pipeline.per_domain]")
    p.set_defaults(func=cmd_pipeline)

    t = sub.add_parser("train", help="toy GRPO or SFT training")
    tsub = t.add_subparsers(dest="mode", required=True)
    for mode in ("toy", "sft"):
        m = tsub.add_parser(mode)
        m.add_argument("--seed", type=int, help="RNG seed [train.seed]")
        m.add_argument("--out-dir", help="directory for curve and checkpoint [train.out_dir]")
        m.add_argument("--lr", type=float, help=f"learning rate [{'grpo' if mode == 'toy' else 'sft'}.lr]")
        m.set_defaults(func=cmd_train)
    toy = tsub.choices["toy"]
    toy.add_argument("--steps", type=int, help="GRPO steps [train.steps]")
    toy.add_argument("--group-size", type=int, help="completions per prompt [grpo.group_size]")
    toy.add_argument("--kl-coef", type=float, help="KL penalty beta [grpo.kl_coef]")
    toy.add_argument("--clip-eps", type=float, help="ratio clip epsilon [grpo.clip_eps]")
    toy.add_argument("--max-len", type=int, help="completion length cap [grpo.max_len]")
    toy.add_argument("--prompts-per-step", type=int, help="prompts sampled per step [toy.prompts_per_step]")
    toy.add_argument("--init", help="start from a checkpoint (e.g. after SFT) [train.init]")
    toy.add_argument("--prompts", help="prompt file, one per line, toy vocabulary only [train.prompts]")
    sft = tsub.choices["sft"]
    sft.add_argument("--data", help="JSONL CoT dataset [train.data]")
    sft.add_argument("--epochs", type=int, help="passes over the data [train.epochs]")
    sft.add_argument("--n-positions", type=int, help="positional rows of the toy policy [sft.n_positions]")

    sv = sub.add_parser("serve", help="run the HTTP service (mock judge/generator/scorer/pipeline + core API)")
    sv.add_argument("--host", help="bind address [serve.host]")
    sv.add_argument("--port", type=int, help="port [serve.port]")
    sv.set_defaults(func=cmd_serve)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        settings = Settings.load(args.config)
        level = str(settings.get("cli.log_level", args.log_level)).upper()
        logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                            format="%(levelname)s %(name)s: %(message)s", force=True)
        if getattr(args, "endpoints", None):
            settings.file.update({k: v for k, v in Settings.load(args.endpoints).file.items()})
        if getattr(args, "pipeline_config", None):
            pipeline_file = Settings.load(args.pipeline_config).file
            for section, body in pipeline_file.items():
                settings.file.setdefault(section, {}).update(body)
        return args.func(args, settings)
    except (UsageError, ConfigError) as exc:
        print(f"struvis: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ExternalServiceError as exc:
        print(f"struvis: external service error: {exc}", file=sys.stderr)
        return EXIT_EXTERNAL


if __name__ == "__main__":
    sys.exit(main())
