"""Token-model abstraction, synthetic model zoo, and empirical entropy.

A model maps (prompt, response prefix) to a distribution over its alphabet.
The last alphabet id is always the terminator token, and a response is a
token sequence ending with it (or truncated at the model's hard cap).
Empirical entropy measures the randomness a specific response actually
consumed: the sum of -log2 of each realized conditional probability.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

DEFAULT_MAX_LEN = 1 << 16


class ModelContractError(Exception):
    """A model returned an invalid distribution."""


class ImpossibleResponseError(Exception):
    """A response contains a token its model gives zero probability."""


class TokenModel:
    """Interface: deterministic next-token distributions plus metadata."""

    alphabet_size: int
    done_id: int
    max_len: int
    # True only when tokens 0/1 ARE the bit stream: the done token never
    # competes probabilistically (its mass is 0 or 1 at every step), so the
    # binary reduction is the identity and costs no extra bits.
    pure_bit_stream: bool = False

    def next_dist(self, prompt: bytes, prefix: Sequence[int]) -> np.ndarray:
        raise NotImplementedError


def _validate_dist(probs: np.ndarray, alphabet_size: int) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape != (alphabet_size,):
        raise ModelContractError("distribution has wrong arity")
    if not np.all(np.isfinite(probs)) or np.any(probs < 0):
        raise ModelContractError("distribution entries must be finite and >= 0")
    if abs(float(probs.sum()) - 1.0) > 1e-9:
        raise ModelContractError("distribution does not sum to 1")
    return probs


@dataclass
class Response:
    tokens: list
    per_token_logprobs: np.ndarray  # -log2 p of each realized token, in bits

    @property
    def entropy_bits(self) -> float:
        return float(self.per_token_logprobs.sum())

    def ended(self, model: TokenModel) -> bool:
        return bool(self.tokens) and self.tokens[-1] == model.done_id


class _BitStyleModel(TokenModel):
    """Base for the binary-alphabet synthetics: tokens 0, 1, done=2."""

    alphabet_size = 3
    done_id = 2

    def __init__(self, max_len: int = DEFAULT_MAX_LEN):
        self.max_len = max_len


class UniformModel(_BitStyleModel):
    pure_bit_stream = True

    def __init__(self, length: int, max_len: int = DEFAULT_MAX_LEN):
        super().__init__(max_len)
        if length < 1:
            raise ValueError("length must be at least 1")
        self.length = length

    def next_dist(self, prompt, prefix):
        if len(prefix) < self.length:
            return np.array([0.5, 0.5, 0.0])
        return np.array([0.0, 0.0, 1.0])


class BernoulliModel(_BitStyleModel):
    pure_bit_stream = True

    def __init__(self, p: float, length: int, max_len: int = DEFAULT_MAX_LEN):
        super().__init__(max_len)
        if not 0.0 <= p <= 1.0:
            raise ValueError("p must be a probability")
        if length < 1:
            raise ValueError("length must be at least 1")
        self.p = p
        self.length = length

    def next_dist(self, prompt, prefix):
        if len(prefix) < self.length:
            return np.array([1.0 - self.p, self.p, 0.0])
        return np.array([0.0, 0.0, 1.0])


class MixtureModel(_BitStyleModel):
    """Terminates immediately with probability 1-eps, else emits a uniform
    block of block_len bits.  The one-shot branch decision is what makes
    low-entropy outputs unavoidably frequent."""

    def __init__(self, eps: float, block_len: int, max_len: int = DEFAULT_MAX_LEN):
        super().__init__(max_len)
        if not 0.0 <= eps <= 1.0:
            raise ValueError("eps must be a probability")
        if block_len < 1:
            raise ValueError("block_len must be at least 1")
        self.eps = eps
        self.block_len = block_len

    def next_dist(self, prompt, prefix):
        if not prefix:
            return np.array([self.eps / 2, self.eps / 2, 1.0 - self.eps])
        if len(prefix) < self.block_len:
            return np.array([0.5, 0.5, 0.0])
        return np.array([0.0, 0.0, 1.0])


class DeterministicModel(TokenModel):
    def __init__(self, seq: Sequence[int], alphabet_size: int,
                 max_len: int = DEFAULT_MAX_LEN):
        if alphabet_size < 2:
            raise ValueError("alphabet_size must be at least 2")
        self.alphabet_size = alphabet_size
        self.done_id = alphabet_size - 1
        self.max_len = max_len
        seq = list(seq)
        if not seq or seq[-1] != self.done_id:
            raise ValueError("sequence must end with the done token")
        if any(not 0 <= t < alphabet_size for t in seq):
            raise ValueError("sequence token out of range")
        self.seq = seq

    def next_dist(self, prompt, prefix):
        probs = np.zeros(self.alphabet_size)
        t = self.seq[len(prefix)] if len(prefix) < len(self.seq) else self.done_id
        probs[t] = 1.0
        return probs


class NgramModel(TokenModel):
    """Conditional table over the last `order` tokens, done-padded on the
    left.  The prompt, if given, must be in-alphabet bytes and primes the
    context."""

    def __init__(self, order: int, table: np.ndarray, alphabet_size: int,
                 max_len: int = DEFAULT_MAX_LEN,
                 alphabet_bytes: Optional[bytes] = None):
        if order < 0:
            raise ValueError("order must be non-negative")
        table = np.asarray(table, dtype=np.float64)
        if table.shape != (alphabet_size**order, alphabet_size):
            raise ValueError("table shape does not match order/alphabet")
        self.order = order
        self.table = table
        self.alphabet_size = alphabet_size
        self.done_id = alphabet_size - 1
        self.max_len = max_len
        self.alphabet_bytes = alphabet_bytes
        self._byte_to_id = (
            {v: i for i, v in enumerate(alphabet_bytes)}
            if alphabet_bytes is not None else None)

    def _prompt_ids(self, prompt: bytes) -> list:
        if not prompt:
            return []
        if self._byte_to_id is None:
            raise ModelContractError("model has no byte alphabet for prompts")
        try:
            return [self._byte_to_id[x] for x in prompt]
        except KeyError as e:
            raise ModelContractError(f"prompt byte {e} not in alphabet") from e

    def next_dist(self, prompt, prefix):
        ctx = [self.done_id] * self.order + self._prompt_ids(prompt) + list(prefix)
        row = 0
        for t in ctx[len(ctx) - self.order:]:
            row = row * self.alphabet_size + t
        return self.table[row].copy()


@dataclass
class SyntheticModelSpec:
    kind: str
    params: dict = field(default_factory=dict)

    def to_json(self) -> str:
        doc = {"kind": self.kind, **self.params}
        if self.kind == "ngram":
            doc = {k: v for k, v in doc.items() if k != "table"}
            ab = self.params.get("alphabet_bytes")
            doc["alphabet_bytes"] = ab.hex() if ab is not None else None
        return json.dumps(doc, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str, table: Optional[np.ndarray] = None
                  ) -> "SyntheticModelSpec":
        doc = json.loads(text)
        kind = doc.pop("kind")
        if kind == "ngram":
            ab = doc.get("alphabet_bytes")
            doc["alphabet_bytes"] = bytes.fromhex(ab) if ab else None
            if table is not None:
                doc["table"] = table
        return cls(kind=kind, params=doc)


def make_synthetic_model(spec: SyntheticModelSpec) -> TokenModel:
    p = dict(spec.params)
    p.pop("table_file", None)
    kind = spec.kind
    if kind == "uniform":
        return UniformModel(p["length"], p.get("max_len", DEFAULT_MAX_LEN))
    if kind == "bernoulli":
        return BernoulliModel(p["p"], p["length"], p.get("max_len", DEFAULT_MAX_LEN))
    if kind == "mixture":
        return MixtureModel(p["eps"], p["block_len"], p.get("max_len", DEFAULT_MAX_LEN))
    if kind == "deterministic":
        return DeterministicModel(p["seq"], p["alphabet_size"],
                                  p.get("max_len", DEFAULT_MAX_LEN))
    if kind == "ngram":
        return NgramModel(p["order"], p["table"], p["alphabet_size"],
                          p.get("max_len", DEFAULT_MAX_LEN),
                          p.get("alphabet_bytes"))
    raise ValueError(f"unknown model kind: {kind!r}")


def sample_response(model: TokenModel, prompt: bytes,
                    rng: np.random.Generator) -> Response:
    """Draw tokens sequentially until the done token or the length cap."""
    tokens: list = []
    logprobs: list = []
    while len(tokens) < model.max_len:
        probs = _validate_dist(model.next_dist(prompt, tokens), model.alphabet_size)
        t = _draw(probs, rng)
        tokens.append(t)
        logprobs.append(-math.log2(probs[t]) if probs[t] < 1.0 else 0.0)
        if t == model.done_id:
            break
    return Response(tokens=tokens, per_token_logprobs=np.array(logprobs))


def _draw(probs: np.ndarray, rng: np.random.Generator) -> int:
    u = rng.random()
    idx = int(np.searchsorted(np.cumsum(probs), u, side="right"))
    idx = min(idx, len(probs) - 1)
    while probs[idx] == 0.0:  # never select zero-mass tokens
        idx -= 1
    return idx


def empirical_entropy(model: TokenModel, prompt: bytes,
                      x: Sequence[int]) -> float:
    """-log2 of the probability the model assigns to response prefix x."""
    return empirical_entropy_substring(model, prompt, x, 1, len(x)) if x else 0.0


def empirical_entropy_substring(model: TokenModel, prompt: bytes,
                                x: Sequence[int], i: int, j: int) -> float:
    """Entropy of positions [i..j] (1-based, inclusive) given the prefix."""
    if not 1 <= i <= j <= len(x):
        raise ValueError("need 1 <= i <= j <= len(x)")
    total = 0.0
    for t in range(j):
        if t < i - 1:
            continue
        probs = _validate_dist(model.next_dist(prompt, list(x[:t])),
                               model.alphabet_size)
        p = float(probs[x[t]])
        if p == 0.0:
            raise ImpossibleResponseError(f"token at position {t + 1} has probability 0")
        total += -math.log2(p) if p < 1.0 else 0.0
    return total


def train_ngram(corpus: bytes, order: int,
                alphabet: Optional[bytes] = None) -> SyntheticModelSpec:
    """Count transitions with add-one smoothing over corpus bytes.

    The training stream is the corpus padded with the done token on both
    sides, so the table also learns how responses start and end.
    """
    if not corpus:
        raise ValueError("corpus must be non-empty")
    if alphabet is None:
        alphabet = bytes(sorted(set(corpus)))
    byte_to_id = {v: i for i, v in enumerate(alphabet)}
    if any(x not in byte_to_id for x in corpus):
        raise ValueError("corpus contains bytes outside the alphabet")
    size = len(alphabet) + 1  # plus done
    done = size - 1
    stream = [done] * order + [byte_to_id[x] for x in corpus] + [done]
    counts = np.zeros((size**order, size), dtype=np.float64)
    for t in range(order, len(stream)):
        row = 0
        for c in stream[t - order:t]:
            row = row * size + c
        counts[row, stream[t]] += 1.0
    table = (counts + 1.0) / (counts.sum(axis=1, keepdims=True) + size)
    return SyntheticModelSpec(kind="ngram", params={
        "order": order, "alphabet_size": size, "table": table,
        "alphabet_bytes": alphabet})


NGRAM_MAGIC = b"ENTM"


def save_ngram_table(spec: SyntheticModelSpec, path) -> None:
    """Binary table format: magic, version u8, order u8, alphabet u32 BE,
    then the row-major float64 little-endian table."""
    if spec.kind != "ngram":
        raise ValueError("not an ngram spec")
    table = np.ascontiguousarray(spec.params["table"], dtype="<f8")
    with open(path, "wb") as f:
        f.write(NGRAM_MAGIC + bytes([1, spec.params["order"]]))
        f.write(struct.pack(">I", spec.params["alphabet_size"]))
        f.write(table.tobytes())


def load_ngram_table(path) -> Tuple[int, int, np.ndarray]:
    with open(path, "rb") as f:
        head = f.read(10)
        if len(head) != 10 or head[:4] != NGRAM_MAGIC or head[4] != 1:
            raise ValueError("not a recognized ngram table file")
        order = head[5]
        size = struct.unpack(">I", head[6:10])[0]
        table = np.frombuffer(f.read(), dtype="<f8").reshape(size**order, size)
    return order, size, table
