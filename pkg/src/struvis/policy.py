"""Toy tokenizer and a positional softmax policy small enough for exhaustive gradient checks."""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

from .vision import TAG_LITERALS

EOS = "<eos>"

_JSON_PIECES = ("{", "}", "[", "]", ":", ",", '"')
_JSON_KEYS = tuple(
    f'"{k}"'
    for k in (
        "entities", "relations", "layout", "global_style", "id", "name", "attributes", "count",
        "subject", "predicate", "object", "x0", "y0", "x1", "y1", "depth",
    )
)
_DIGITS = tuple("0123456789")
_MISC = ("null", ".", "_", " ")
_WORDS = (
    "a", "the", "cat", "dog", "tree", "sun", "sky", "red", "blue", "green", "on", "under",
    "left", "right", "of", "above", "near", "small", "big", "think", "scene", "with", "color", "size",
)

TOY_VOCAB: tuple[str, ...] = (EOS,) + TAG_LITERALS + _JSON_PIECES + _JSON_KEYS + _DIGITS + _MISC + _WORDS


class TokenizationError(ValueError):
    pass


class ToyTokenizer:
    """Greedy longest-match tokenizer over a fixed piece inventory.

    Every non-special piece is literal text, so decode(encode(s)) == s for any
    string the vocabulary covers.
    """

    def __init__(self, vocab: Sequence[str] = TOY_VOCAB) -> None:
        if len(set(vocab)) != len(vocab):
            raise ValueError("vocabulary pieces must be unique")
        self.vocab = tuple(vocab)
        self.index = {p: i for i, p in enumerate(self.vocab)}
        self.eos_id = self.index.get(EOS, -1)
        self._by_first: dict[str, list[str]] = {}
        for piece in sorted((p for p in self.vocab if p != EOS), key=len, reverse=True):
            self._by_first.setdefault(piece[0], []).append(piece)

    def __len__(self) -> int:
        return len(self.vocab)

    def encode(self, text: str) -> list[int]:
        ids = []
        i = 0
        while i < len(text):
            for piece in self._by_first.get(text[i], ()):
                if text.startswith(piece, i):
                    ids.append(self.index[piece])
                    i += len(piece)
                    break
            else:
                raise TokenizationError(f"character {text[i]!r} at offset {i} is outside the toy vocabulary")
        return ids

    def decode(self, ids: Sequence[int]) -> str:
        return "".join("" if i == self.eos_id else self.vocab[i] for i in ids)


@dataclass(frozen=True)
class Sample:
    tokens: tuple[int, ...]
    logprobs: tuple[float, ...]


class PolicyInterface(ABC):
    """A differentiable autoregressive token policy with flat parameters."""

    vocab_size: int
    eos_id: int | None = None

    @property
    @abstractmethod
    def params(self) -> np.ndarray:
        """Flat float64 parameter vector (a view: writes update the policy)."""

    @abstractmethod
    def sample(self, prompt: Sequence[int], max_len: int, seed: int | np.random.SeedSequence) -> Sample: ...

    @abstractmethod
    def logprobs(self, prompt: Sequence[int], completion: Sequence[int]) -> np.ndarray: ...

    @abstractmethod
    def logprobs_backward(
        self, prompt: Sequence[int], completion: Sequence[int], grad_logprobs: np.ndarray
    ) -> np.ndarray:
        """Vector-Jacobian product: d(sum_t g_t * logprob_t)/d(params), flat."""

    def set_params(self, flat: np.ndarray) -> None:
        self.params[...] = flat

    def copy(self) -> "PolicyInterface":
        raise NotImplementedError


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


class ToyPolicy(PolicyInterface):
    """Softmax policy whose logits are a sum of table rows selected by context.

    Completion position t always selects the positional row ``min(t,
    n_positions - 1)``. With ``prev_token=True`` it also adds the row of the
    previous completion token (a dedicated start row at t = 0). With
    ``marker_ids`` it adds one row per subset of those tokens already emitted
    (a bitmask over k markers, 2**k rows). The prompt does not condition the
    distribution.
    """

    MAX_PARAMS = 10_000

    def __init__(self, vocab_size: int, n_positions: int, weights: np.ndarray | None = None,
                 eos_id: int | None = 0, prev_token: bool = False, marker_ids: Sequence[int] = ()) -> None:
        if vocab_size < 2 or n_positions < 1:
            raise ValueError("need vocab_size >= 2 and n_positions >= 1")
        marker_ids = tuple(int(m) for m in marker_ids)
        if len(set(marker_ids)) != len(marker_ids) or any(not 0 <= m < vocab_size for m in marker_ids):
            raise ValueError("marker_ids must be distinct token ids")
        n_rows = self.n_rows(vocab_size, n_positions, prev_token, len(marker_ids))
        if n_rows * vocab_size >= self.MAX_PARAMS:
            raise ValueError(f"toy policy limited to < {self.MAX_PARAMS} parameters")
        self.vocab_size = vocab_size
        self.n_positions = n_positions
        self.prev_token = prev_token
        self.marker_ids = marker_ids
        self.eos_id = eos_id
        if weights is None:
            weights = np.zeros((n_rows, vocab_size))
        self.weights = np.array(weights, dtype=np.float64).reshape(n_rows, vocab_size)

    @staticmethod
    def n_rows(vocab_size: int, n_positions: int, prev_token: bool, n_markers: int) -> int:
        return n_positions + (vocab_size + 1 if prev_token else 0) + (2**n_markers if n_markers else 0)

    @classmethod
    def random(cls, vocab_size: int, n_positions: int, seed: int, scale: float = 0.01,
               eos_id: int | None = 0, prev_token: bool = False, marker_ids: Sequence[int] = ()) -> "ToyPolicy":
        n_rows = cls.n_rows(vocab_size, n_positions, prev_token, len(tuple(marker_ids)))
        rng = np.random.default_rng(seed)
        return cls(vocab_size, n_positions, rng.normal(0.0, scale, (n_rows, vocab_size)), eos_id, prev_token,
                   marker_ids)

    @property
    def _marker_base(self) -> int:
        return self.n_positions + (self.vocab_size + 1 if self.prev_token else 0)

    def _marker_bits(self, tokens: np.ndarray) -> np.ndarray:
        """Bit of each token among the markers (0 for non-markers)."""
        bits = np.zeros(tokens.shape, dtype=np.int64)
        for k, m in enumerate(self.marker_ids):
            bits[tokens == m] = 1 << k
        return bits

    @property
    def params(self) -> np.ndarray:
        return self.weights.reshape(-1)

    def copy(self) -> "ToyPolicy":
        return ToyPolicy(self.vocab_size, self.n_positions, self.weights.copy(), self.eos_id, self.prev_token,
                         self.marker_ids)

    def _check(self, tokens: Sequence[int]) -> np.ndarray:
        arr = np.asarray(tokens, dtype=np.int64)
        if arr.size and (arr.min() < 0 or arr.max() >= self.vocab_size):
            raise ValueError(f"token ids must lie in [0, {self.vocab_size})")
        return arr

    def _rows(self, completion: np.ndarray) -> list[np.ndarray]:
        n = len(completion)
        rows = [np.minimum(np.arange(n), self.n_positions - 1)]
        if self.prev_token:
            prev = np.empty(n, dtype=np.int64)
            prev[:1] = self.vocab_size
            prev[1:] = completion[:-1]
            rows.append(self.n_positions + prev)
        if self.marker_ids:
            seen = np.zeros(n, dtype=np.int64)
            if n > 1:
                seen[1:] = np.bitwise_or.accumulate(self._marker_bits(completion[:-1]))
            rows.append(self._marker_base + seen)
        return rows

    def _logits(self, rows: list[np.ndarray]) -> np.ndarray:
        out = self.weights[rows[0]]
        for r in rows[1:]:
            out = out + self.weights[r]
        return out

    def distribution(self, position: int, prev: int | None = None, seen_mask: int = 0) -> np.ndarray:
        logits = self.weights[min(position, self.n_positions - 1)]
        if self.prev_token:
            logits = logits + self.weights[self.n_positions + (self.vocab_size if prev is None else prev)]
        if self.marker_ids:
            logits = logits + self.weights[self._marker_base + seen_mask]
        return np.exp(_log_softmax(logits))

    def sample(self, prompt: Sequence[int], max_len: int, seed: int | np.random.SeedSequence) -> Sample:
        return self.sample_batch([prompt], max_len, [seed])[0]

    def sample_batch(
        self, prompts: Sequence[Sequence[int]], max_len: int, seeds: Sequence[int | np.random.SeedSequence]
    ) -> list[Sample]:
        """Sample one completion per (prompt, seed); identical to calling ``sample`` on each.

        Every sample draws its ``max_len`` uniforms from its own seed up front, so
        batching never changes the result.
        """
        for p in prompts:
            self._check(p)
        b = len(seeds)
        u = np.stack([np.random.default_rng(s).random(max_len) for s in seeds]) if b else np.zeros((0, max_len))
        tokens = np.zeros((b, max_len), dtype=np.int64)
        lengths = np.full(b, max_len)
        alive = np.ones(b, dtype=bool)
        prev = np.full(b, self.vocab_size)
        seen = np.zeros(b, dtype=np.int64)
        for t in range(max_len):
            logits = self.weights[min(t, self.n_positions - 1)][None, :]
            if self.prev_token:
                logits = logits + self.weights[self.n_positions + prev]
            if self.marker_ids:
                logits = logits + self.weights[self._marker_base + seen]
            cdf = np.cumsum(np.exp(_log_softmax(np.broadcast_to(logits, (b, self.vocab_size)))), axis=1)
            tok = np.minimum((cdf <= (u[:, t] * cdf[:, -1])[:, None]).sum(axis=1), self.vocab_size - 1)
            tokens[:, t] = np.where(alive, tok, 0)
            prev = tok
            if self.marker_ids:
                seen |= self._marker_bits(tok)
            if self.eos_id is not None:
                ended = alive & (tok == self.eos_id)
                lengths[ended] = t + 1
                alive &= ~ended
            if not alive.any():
                break
        out = []
        for i in range(b):
            comp = tokens[i, : lengths[i]]
            out.append(Sample(tuple(int(x) for x in comp), tuple(float(x) for x in self.logprobs(prompts[i], comp))))
        return out

    def logprobs(self, prompt: Sequence[int], completion: Sequence[int]) -> np.ndarray:
        self._check(prompt)
        comp = self._check(completion)
        logp = _log_softmax(self._logits(self._rows(comp)))
        return logp[np.arange(len(comp)), comp]

    def logprobs_backward(self, prompt: Sequence[int], completion: Sequence[int],
                          grad_logprobs: np.ndarray) -> np.ndarray:
        comp = self._check(completion)
        g = np.asarray(grad_logprobs, dtype=np.float64)
        if g.shape != comp.shape:
            raise ValueError("grad_logprobs must match completion length")
        rows = self._rows(comp)
        probs = np.exp(_log_softmax(self._logits(rows)))
        # d logp(tok) / d logits = onehot(tok) - softmax(logits), shared by every active row
        dlogits = -g[:, None] * probs
        dlogits[np.arange(len(comp)), comp] += g
        grad = np.zeros_like(self.weights)
        for r in rows:
            np.add.at(grad, r, dlogits)
        return grad.reshape(-1)

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": "toy_positional",
            "vocab_size": self.vocab_size,
            "n_positions": self.n_positions,
            "eos_id": self.eos_id,
            "prev_token": self.prev_token,
            "marker_ids": list(self.marker_ids),
            "params": self.params.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ToyPolicy":
        if data.get("kind") != "toy_positional":
            raise ValueError(f"unsupported policy kind {data.get('kind')!r}")
        return cls(int(data["vocab_size"]), int(data["n_positions"]), np.asarray(data["params"], dtype=np.float64),
                   data.get("eos_id"), bool(data.get("prev_token", False)), data.get("marker_ids", ()))
