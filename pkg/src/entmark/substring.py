"""Block-chained watermark detectable from any contained substring.

Instead of one seed for the whole response, the generator carves the bit
stream into consecutive blocks: a block ends the moment its accumulated
empirical entropy reaches (2/ln2) * lam * sqrt(block length), and the
finished block becomes the PRF seed for the bits that follow it.  PRF
indices are counted relative to the seed's last bit on both sides, so a
detector handed an arbitrary window of the text lines up with the
generator as long as one complete block and a stretch of its successor
survive inside the window.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .codec import BinaryModel
from .complete import (
    CandidateWindow,
    DetectionReport,
    _check_bits,
    _empty_report,
    _pick_engine,
    _UnitFeed,
)
from .prf import KeyedUnitSource, SecretKey
from .scoring import score_words

try:
    from . import _fastscan
except ImportError:  # pragma: no cover - built extension is normally present
    _fastscan = None

BLOCK_RATE = 2.0 / math.log(2.0)


def block_threshold(lam: float, block_len: int) -> float:
    """Entropy a block must accumulate to close at the given length."""
    return BLOCK_RATE * lam * math.sqrt(block_len)


@dataclass
class BlockLedger:
    """Seed-block bookkeeping for one generated response."""

    blocks: List[Tuple[int, int]] = field(default_factory=list)  # 1-based
    block_entropies: List[float] = field(default_factory=list)
    H: float = 0.0          # entropy of the still-open block
    block_len: int = 0      # bits already in the open block
    total_entropy: float = 0.0


def wat_substring(sk: SecretKey, bmodel: BinaryModel, prompt: bytes,
                  rng: np.random.Generator, unit_source=None,
                  forced_bits: Optional[Sequence[int]] = None):
    """Returns (bits as uint8 array, BlockLedger).

    forced_bits pins the leading bits while block accounting runs over
    them normally (the replay hook for the removal-attack oracle).
    """
    if sk.scheme_id != "substring":
        raise ValueError("key is not for the substring scheme")
    source = KeyedUnitSource(sk) if unit_source is None else unit_source
    forced = [int(b) for b in forced_bits] if forced_bits is not None else []
    lam = float(sk.lam)
    stream = bmodel.open(prompt)
    ledger = BlockLedger()
    seed_end = 0
    seed_bits: List[int] = []
    feed: Optional[_UnitFeed] = None

    i = 0
    while not stream.finished:
        i += 1
        if i - 1 < len(forced):
            bit = forced[i - 1]
        elif seed_end == 0:
            bit = 1 if rng.random() < stream.p1() else 0
        else:
            if feed is None:
                feed = _UnitFeed(source, seed_bits, i - seed_end)
            bit = 1 if feed.take(i - seed_end) <= stream.p1() else 0
        stream.push(bit)
        lp = stream.bit_logprobs[-1]
        ledger.H += lp
        ledger.total_entropy += lp
        if ledger.H >= block_threshold(lam, ledger.block_len + 1):
            start = i - ledger.block_len
            ledger.blocks.append((start, i))
            ledger.block_entropies.append(ledger.H)
            seed_end = i
            seed_bits = stream.bits[start - 1:i]
            feed = None
            ledger.H = 0.0
            ledger.block_len = 0
        else:
            ledger.block_len += 1
    return np.array(stream.bits, dtype=np.uint8), ledger


def detect_substring(sk: SecretKey, bits, lam: Optional[float] = None,
                     stride: int = 1, unit_source=None,
                     engine: str = "auto") -> DetectionReport:
    """Scan every candidate seed window (cut i, length back l+1) and test
    the running score of the bits after the cut at every extension.

    stride > 1 subsamples the window lengths; that trades away the
    exhaustive-scan guarantee and is recorded in the report.
    """
    if sk.scheme_id != "substring":
        raise ValueError("key is not for the substring scheme")
    if stride < 1:
        raise ValueError("stride must be at least 1")
    arr = _check_bits(bits)
    lam = float(sk.lam if lam is None else lam)
    if arr.size < 3:
        return _empty_report(stride)
    mode = _pick_engine(engine, unit_source, None)
    if mode == "native":
        raw = _fastscan.scan_substring(sk.key_bytes, arr, lam, stride)
        report = _report_from_substring_scan(raw, stride)
    else:
        report = _detect_substring_py(sk, arr, lam, stride, unit_source)
    if report.prf_evals > arr.size**3 / 2:
        raise AssertionError("detector exceeded its evaluation budget")
    return report


def _report_from_substring_scan(raw, stride: int) -> DetectionReport:
    (found, fi, fl, fk, fscore, fthr, best_i, best_l, best_k, best_margin,
     best_score, best_thr, evals, scanned) = raw
    if found:
        cand = CandidateWindow(int(fi - fl), int(fi), int(fk), fscore, fthr)
        margin = fscore - fthr
    elif best_i >= 0:
        cand = CandidateWindow(int(best_i - best_l), int(best_i), int(best_k),
                               best_score, best_thr)
        margin = best_margin
    else:
        cand, margin = None, float("-inf")
    return DetectionReport(bool(found), cand, margin, int(scanned),
                           int(evals), stride)


def _detect_substring_py(sk: SecretKey, arr: np.ndarray, lam: float,
                         stride: int, unit_source) -> DetectionReport:
    source = KeyedUnitSource(sk) if unit_source is None else unit_source
    L = arr.size
    best: Optional[CandidateWindow] = None
    best_margin = float("-inf")
    evals = scanned = 0
    lengths = np.arange(1, L, dtype=np.float64)
    thresholds = lengths + lam * np.sqrt(lengths)
    for i in range(2, L):
        tail = arr[i:]
        thr = thresholds[:L - i]
        for l in range(1, i, stride):
            scanned += 1
            words = source.unit_words(arr[i - l - 1:i], 1, L - i)
            sums = np.cumsum(score_words(tail, words))
            margins = sums - thr
            hits = np.nonzero(margins > 0)[0]
            consumed = (hits[0] + 1) if hits.size else L - i
            evals += int(consumed)
            local = int(np.argmax(margins[:consumed]))
            if margins[local] > best_margin:
                best_margin = float(margins[local])
                best = CandidateWindow(i - l, i, i + 1 + local,
                                       float(sums[local]), float(thr[local]))
            if hits.size:
                k = i + 1 + int(hits[0])
                cand = CandidateWindow(i - l, i, k, float(sums[hits[0]]),
                                       float(thr[hits[0]]))
                return DetectionReport(True, cand, float(margins[hits[0]]),
                                       scanned, evals, stride)
    return DetectionReport(False, best, best_margin, scanned, evals, stride)
