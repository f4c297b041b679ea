"""Per-bit detector scores, thresholds, and the exponential tail bounds.

A detector pairs each scored bit with its keyed unit value: v is the unit for
a 1 bit and its complement for a 0 bit, and the bit contributes ln(1/v).  On
text independent of the key these contributions are Exp(1); on watermarked
text the mean is inflated by ln2 times the binary entropy of the bit's model
probability, which is the entire detection signal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .prf import UnitReal

# prf units have 64 fraction bits; with integer complements the extreme score
# is -ln(0.5 * 2**-64) = 65*ln2
MAX_SCORE = 65.0 * math.log(2.0)


def score_bit(x: int, u: UnitReal) -> float:
    """ln(1/v) where v pairs the bit with the unit value."""
    if x not in (0, 1):
        raise ValueError("x must be a bit")
    v = u if x else u.complement()
    return -math.log((v.z + 0.5) * 2.0**-64)


def score_words(bits: np.ndarray, words: np.ndarray) -> np.ndarray:
    """Vector form of score_bit over raw 64-bit PRF words."""
    bits = np.asarray(bits, dtype=np.uint64)
    words = np.asarray(words, dtype=np.uint64)
    if bits.shape != words.shape:
        raise ValueError("bits and words must align")
    w = np.where(bits == 1, words, ~words)
    return -np.log((w.astype(np.float64) + 0.5) * 2.0**-64)


def detection_threshold(m: int, lam: float) -> float:
    """Score a detector must beat on a window of m bits: m + lam*sqrt(m)."""
    if m < 1:
        raise ValueError("window length must be at least 1")
    return m + lam * math.sqrt(m)


@dataclass(frozen=True)
class TailBounds:
    upper: float  # Pr[sum of n Exp(1) >= n + sqrt(tau*n)]
    lower: float  # Pr[sum of n Exp(1) <= n - sqrt(tau*n)]


def exp_tail_bounds(n: int, tau: float) -> TailBounds:
    """Closed-form tail bounds for a sum of n independent Exp(1) draws."""
    if n < 1:
        raise ValueError("n must be at least 1")
    if tau <= 0:
        raise ValueError("tau must be positive")
    return TailBounds(upper=0.8 ** math.sqrt(tau), lower=math.exp(-tau / 2.0))


def binary_entropy(p1: float) -> float:
    """H2(p) in bits with the 0*log0 = 0 convention."""
    if not 0.0 <= p1 <= 1.0:
        raise ValueError("p1 must be a probability")
    if p1 in (0.0, 1.0):
        return 0.0
    return -(p1 * math.log2(p1) + (1.0 - p1) * math.log2(1.0 - p1))


def watermarked_score_mean(p1: float) -> float:
    """Expected per-bit score when the bit was embedded at probability p1."""
    return 1.0 + math.log(2.0) * binary_entropy(p1)
