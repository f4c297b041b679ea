"""Rejection-sampling watermark: resample whole responses until a short
keyed tag of the text is all zeros.

Low-entropy responses are returned untouched (they cannot hide a tag
without skewing their distribution), so detection is only weakly sound:
unrelated text matches the tag with probability 2^-b.  High-entropy
responses are redrawn until the tag hits, costing 2^b extra model calls
on average.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .codec import build_codec, encode_tokens
from .models import Response, TokenModel, sample_response
from .prf import SecretKey, prf_tag


@dataclass
class SimpleRunStats:
    model_calls: int
    watermark_branch_taken: bool


class AttemptBudgetError(Exception):
    """Resample budget ran out; carries the last (unwatermarked) draw."""

    def __init__(self, last_response: Response, stats: SimpleRunStats):
        super().__init__(
            f"no tag match within {stats.model_calls} model calls")
        self.last_response = last_response
        self.stats = stats


def _tag_bits(tokens: Sequence[int], alphabet_size: int, done_id: int) -> list:
    codec = build_codec(alphabet_size, done_id, "fixed_width")
    return encode_tokens(tokens, codec)


def _tag_is_zero(sk: SecretKey, tokens: Sequence[int], alphabet_size: int,
                 done_id: int) -> bool:
    tag = prf_tag(sk, _tag_bits(tokens, alphabet_size, done_id))
    return not np.any(tag)


def wat_simple(sk: SecretKey, model: TokenModel, prompt: bytes,
               rng: np.random.Generator, max_attempts: Optional[int] = None,
               entropy_cutoff: Optional[float] = None):
    """Returns (Response, SimpleRunStats) or raises AttemptBudgetError."""
    if sk.scheme_id != "simple":
        raise ValueError("key is not for the simple scheme")
    if max_attempts is None:
        max_attempts = 2 ** (sk.b + 7)
    if max_attempts < 1:
        raise ValueError("max_attempts must be at least 1")
    cutoff = 6.0 * sk.lam if entropy_cutoff is None else entropy_cutoff

    first = sample_response(model, prompt, rng)
    if first.entropy_bits <= cutoff:
        return first, SimpleRunStats(model_calls=1, watermark_branch_taken=False)

    last = first
    for calls in range(2, max_attempts + 1):
        last = sample_response(model, prompt, rng)
        if last.entropy_bits > cutoff and _tag_is_zero(
                sk, last.tokens, model.alphabet_size, model.done_id):
            return last, SimpleRunStats(model_calls=calls,
                                        watermark_branch_taken=True)
    raise AttemptBudgetError(last, SimpleRunStats(
        model_calls=max_attempts, watermark_branch_taken=True))


def detect_simple(sk: SecretKey, x: Union[Response, Sequence[int]],
                  alphabet_size: int, done_id: Optional[int] = None) -> bool:
    if sk.scheme_id != "simple":
        raise ValueError("key is not for the simple scheme")
    tokens = x.tokens if isinstance(x, Response) else list(x)
    if done_id is None:
        done_id = alphabet_size - 1
    return _tag_is_zero(sk, tokens, alphabet_size, done_id)
