"""Watermark removal by one-token-at-a-time resampling.

The attacker holds no key.  It only needs query access to the watermarked
generator, plus the ability to force a response prefix, and it rebuilds a
response token by token: ask for one fresh continuation token of the
text collected so far, keep it, repeat.  Every kept token is the first
token of an independent generator call, so the assembled text carries no
cross-token key correlation for a detector to find.

The oracle supports two prefix semantics.  The default ("fresh") treats
the forced prefix as conditioning context: each query runs the generator
from scratch on the conditioned model, with an empty entropy ledger.
The alternative (replay_ledger=True) pins the generator's output to the
forced prefix and lets the ledger, and any seeds formed inside the
prefix, rebuild exactly as they did when the prefix was first produced.
Replay keeps post-seed bits keyed identically across queries, so the
resampled text is still watermarked; it exists to demonstrate that the
attack's independence argument genuinely needs fresh ledgers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .codec import BinaryModel, TokenCodec, binarize, decode_bits, encode_tokens
from .complete import wat_complete
from .models import Response, TokenModel, _validate_dist
from .prf import SecretKey
from .simple import wat_simple
from .substring import wat_substring


class ImpossiblePrefixError(Exception):
    """The forced prefix has probability zero under the model."""


class ConditionedModel(TokenModel):
    """Base model with a token prefix burned into every context.

    next_dist(prompt, prefix) == base.next_dist(prompt, forced + prefix),
    so a generator run on this model produces a continuation of the
    forced tokens.  max_new_tokens caps how many tokens the continuation
    may add (the done token counts).
    """

    def __init__(self, base: TokenModel, forced: Sequence[int],
                 max_new_tokens: Optional[int] = None):
        self.base = base
        self.forced = [int(t) for t in forced]
        self.alphabet_size = base.alphabet_size
        self.done_id = base.done_id
        self.pure_bit_stream = getattr(base, "pure_bit_stream", False)
        remaining = base.max_len - len(self.forced)
        if max_new_tokens is not None:
            if max_new_tokens < 1:
                raise ValueError("max_new_tokens must be at least 1")
            remaining = min(remaining, max_new_tokens)
        if remaining < 1:
            raise ValueError("forced prefix leaves no room to generate")
        self.max_len = remaining

    def next_dist(self, prompt: bytes, prefix: Sequence[int]) -> np.ndarray:
        return self.base.next_dist(prompt, self.forced + list(prefix))


def _walk_logprobs(model: TokenModel, prompt: bytes,
                   tokens: Sequence[int], start: int = 0) -> List[float]:
    """Per-token -log2 probabilities from position start on; raises if
    any step has mass zero.  Positions before start must already be
    validated."""
    lps: List[float] = []
    for n in range(start, len(tokens)):
        t = int(tokens[n])
        if not 0 <= t < model.alphabet_size:
            raise ImpossiblePrefixError(f"token {t} outside the alphabet")
        if n > 0 and int(tokens[n - 1]) == model.done_id:
            raise ImpossiblePrefixError("token after the done token")
        dist = _validate_dist(model.next_dist(prompt, [int(x) for x in tokens[:n]]),
                              model.alphabet_size)
        p = float(dist[t])
        if p == 0.0:
            raise ImpossiblePrefixError(
                f"token at position {n + 1} has probability 0")
        lps.append(-np.log2(p) if p < 1.0 else 0.0)
    return lps


def _bits_to_tokens(bits: Sequence[int], bmodel: BinaryModel) -> List[int]:
    if bmodel.codec is None:
        tokens = [int(b) for b in bits]
        if len(tokens) < bmodel.token_model.max_len:
            tokens.append(bmodel.token_model.done_id)
        return tokens
    tokens, _remainder = decode_bits([int(b) for b in bits], bmodel.codec)
    return tokens


class PrefixOracle:
    """Query interface the resampling attack drives.

    Implementations expose done_id and answer query() with a Response
    whose tokens start with the forced prefix verbatim; repeated queries
    are independent samples of the continuation.
    """

    done_id: int

    def query(self, prompt: bytes, forced_prefix: Sequence[int] = (),
              max_new_tokens: Optional[int] = None) -> Response:
        raise NotImplementedError


class WatermarkOracle(PrefixOracle):
    """Watermarked generator wrapped as a prefix-continuation oracle."""

    def __init__(self, sk: SecretKey, model: TokenModel,
                 rng: np.random.Generator, codec: Optional[TokenCodec] = None,
                 replay_ledger: bool = False):
        if replay_ledger and sk.scheme_id == "simple":
            raise ValueError("ledger replay is undefined for the simple "
                             "scheme (it resamples whole responses)")
        self.sk = sk
        self.model = model
        self.codec = codec
        self.rng = rng
        self.replay_ledger = replay_ledger
        self.done_id = model.done_id
        self.queries_made = 0
        self._walk_cache: Optional[Tuple[bytes, List[int], List[float]]] = None
        if sk.scheme_id != "simple":
            # fail fast on codec/model mismatch
            self._base_bmodel = binarize(model, codec)

    def _validated_prefix(self, prompt: bytes,
                          forced: Sequence[int]) -> Tuple[List[int], List[float]]:
        """Feasibility walk with a one-entry cache: a prefix extending the
        previously validated one only pays for the new tokens, which keeps
        the one-token-at-a-time attack loop linear overall."""
        tokens = [int(t) for t in forced]
        if self.model.done_id in tokens[:-1]:
            raise ImpossiblePrefixError("done token inside the prefix")
        cached = self._walk_cache
        if (cached is not None and cached[0] == prompt
                and len(cached[1]) <= len(tokens)
                and tokens[:len(cached[1])] == cached[1]):
            lps = cached[2] + _walk_logprobs(self.model, prompt, tokens,
                                             start=len(cached[1]))
        else:
            lps = _walk_logprobs(self.model, prompt, tokens)
        self._walk_cache = (prompt, tokens, lps)
        return list(tokens), list(lps)

    def query(self, prompt: bytes, forced_prefix: Sequence[int] = (),
              max_new_tokens: Optional[int] = None) -> Response:
        self.queries_made += 1
        forced, forced_lps = self._validated_prefix(prompt, forced_prefix)
        if forced and forced[-1] == self.model.done_id:
            return Response(forced, np.asarray(forced_lps, dtype=np.float64))
        if self.replay_ledger:
            tokens = self._replay_continuation(prompt, forced, max_new_tokens)
        else:
            tokens = self._fresh_continuation(prompt, forced, max_new_tokens)
        cont_lps = _walk_logprobs(
            ConditionedModel(self.model, forced) if forced else self.model,
            prompt, tokens[len(forced):])
        return Response(tokens,
                        np.asarray(forced_lps + cont_lps, dtype=np.float64))

    def _fresh_continuation(self, prompt: bytes, forced: List[int],
                            max_new_tokens: Optional[int]) -> List[int]:
        cond = ConditionedModel(self.model, forced, max_new_tokens)
        if self.sk.scheme_id == "simple":
            resp, _stats = wat_simple(self.sk, cond, prompt, self.rng)
            return forced + list(resp.tokens)
        bmodel = binarize(cond, self.codec)
        wat = wat_complete if self.sk.scheme_id == "complete" else wat_substring
        bits, _ledger = wat(self.sk, bmodel, prompt, self.rng)
        return forced + _bits_to_tokens(bits, bmodel)

    def _replay_continuation(self, prompt: bytes, forced: List[int],
                             max_new_tokens: Optional[int]) -> List[int]:
        model = self.model
        if max_new_tokens is not None:
            model = ConditionedModel(model, [], len(forced) + max_new_tokens)
        bmodel = binarize(model, self.codec)
        if bmodel.codec is None:
            forced_bits = list(forced)
        else:
            forced_bits = encode_tokens(forced, bmodel.codec)
        wat = wat_complete if self.sk.scheme_id == "complete" else wat_substring
        bits, _ledger = wat(self.sk, bmodel, prompt, self.rng,
                            forced_bits=forced_bits)
        tokens = _bits_to_tokens(bits, bmodel)
        if tokens[:len(forced)] != forced:
            raise AssertionError("replayed output lost the forced prefix")
        return tokens


@dataclass
class AttackStats:
    queries: int
    output_length: int  # tokens emitted, done included


def prefix_extend(oracle: PrefixOracle, prompt: bytes,
                  prefix: Sequence[int]) -> int:
    """One freshly generated token extending the given prefix."""
    resp = oracle.query(prompt, prefix, max_new_tokens=1)
    new = resp.tokens[len(prefix):]
    if not new:
        raise ValueError("prefix is already a complete response")
    return int(new[0])


def resample_attack(oracle: PrefixOracle, prompt: bytes,
                    max_len: int) -> Tuple[List[int], AttackStats]:
    """Rebuild a response one independently sampled token at a time.

    Stops at the done token or after max_len tokens.  Each output token
    costs exactly one oracle query, so stats.queries == output length.
    """
    if max_len < 1:
        raise ValueError("max_len must be at least 1")
    tokens: List[int] = []
    queries = 0
    while len(tokens) < max_len:
        t = prefix_extend(oracle, prompt, tokens)
        queries += 1
        tokens.append(t)
        if t == oracle.done_id:
            break
    return tokens, AttackStats(queries=queries, output_length=len(tokens))
