"""Constructed rollouts with hand-derived reward values."""

from __future__ import annotations

from struvis.vision import FP_CLOSE, FP_OPEN, SV_CLOSE, SV_OPEN

STATE = '{"entities":[{"id":"cat_1","name":"cat"}],"relations":[],"layout":{}}'


def rollout(sv: str | None, fp: str | None, think: str = "think about it") -> str:
    out = think
    if sv is not None:
        out += f" {SV_OPEN}{sv}{SV_CLOSE}"
    if fp is not None:
        out += f" {FP_OPEN}{fp}{FP_CLOSE}"
    return out


# (text, (r_label, r_json, r_prompt), r_format). Every combination except
# (0, 1, 1) is reachable from text: r_json and r_prompt both need their
# section present, which forces r_label = 1.
FORMAT_TABLE = [
    (rollout(None, None), (0, 0, 0), 0.0),
    (rollout(STATE, None), (0, 1, 0), 0.4),
    (rollout(None, "a red cat"), (0, 0, 1), 0.2),
    (rollout("{", "   "), (1, 0, 0), 0.4),
    (rollout(STATE, " \n "), (1, 1, 0), 0.8),
    (rollout("{", "a red cat"), (1, 0, 1), 0.6),
    (rollout(STATE, "a red cat"), (1, 1, 1), 1.0),
    (rollout("not json", None), (0, 0, 0), 0.0),
    (rollout('{"dangling": true}', "p"), (1, 1, 1), 1.0),
]
UNREACHABLE_FORMAT = ((0, 1, 1), 0.6)

# judge triple -> r_understanding, by hand: sum / 6
UNDERSTANDING = [((2, 2, 2), 1.0), ((1, 2, 0), 0.5), ((0, 1, 0), 1 / 6)]
# (hps, vlm) -> 0.6 hps + 0.4 vlm
IMAGE = [((1.0, 1.0), 1.0), ((0.5, 1.0), 0.7), ((0.25, 0.5), 0.35)]
# r_final = 0.3 U + 0.7 I, written out per cell
FINAL = {
    (0, 0): 1.0, (0, 1): 0.79, (0, 2): 0.545,
    (1, 0): 0.85, (1, 1): 0.64, (1, 2): 0.395,
    (2, 0): 0.75, (2, 1): 0.54, (2, 2): 0.295,
}
# gate-passing rollouts used for the understanding x image grid
GATED_IN = [rollout(STATE, "a red cat"), rollout("{", "a red cat"), rollout(STATE, " ")]
