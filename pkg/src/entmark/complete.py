"""Entropy-seeded watermark over a bit stream.

Generation samples honestly until the response prefix has soaked up
enough empirical entropy to serve as a PRF seed, then switches to
inverse-transform draws: bit i is 1 exactly when the keyed unit value for
(seed, i) falls below the model's conditional probability.  Each bit's
marginal is untouched, but every post-seed bit is now predictable from
the key, which is what the detector's score scan looks for.

Detection tries every prefix cut as the seed, scores the remaining
suffix, and fires when the sum clears mean + lam * sqrt(window).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .codec import BinaryModel
from .prf import KeyedUnitSource, SecretKey, UnitReal
from .scoring import detection_threshold, score_words

try:
    from . import _fastscan
except ImportError:  # pragma: no cover - built extension is normally present
    _fastscan = None

PREFETCH_START = 64
PREFETCH_MAX = 4096


@dataclass
class EntropyLedger:
    """Running entropy accumulator; freezes once the seed is fixed."""

    H: float = 0.0
    seed: Optional[List[int]] = None
    seed_end_index: Optional[int] = None  # 1-based bit position
    total_entropy: float = 0.0


@dataclass
class CandidateWindow:
    seed_start: int  # 1-based, inclusive
    seed_end: int
    window_end: int
    score: float
    threshold: float


@dataclass
class DetectionReport:
    verdict: bool
    best_candidate: Optional[CandidateWindow]
    margin: float
    candidates_scanned: int
    prf_evals: int = 0
    stride: int = 1

    def as_dict(self) -> dict:
        cand = None
        if self.best_candidate is not None:
            c = self.best_candidate
            cand = {"seed_start": c.seed_start, "seed_end": c.seed_end,
                    "window_end": c.window_end, "score": c.score,
                    "threshold": c.threshold}
        return {"verdict": self.verdict, "best_candidate": cand,
                "margin": self.margin if cand is not None else None,
                "candidates_scanned": self.candidates_scanned,
                "prf_evals": self.prf_evals, "stride": self.stride,
                "exhaustive": self.stride == 1}


def _empty_report(stride: int = 1) -> DetectionReport:
    return DetectionReport(verdict=False, best_candidate=None,
                           margin=float("-inf"), candidates_scanned=0,
                           prf_evals=0, stride=stride)


class _UnitFeed:
    """Chunked prefetch of unit words for one fixed seed, consumed in index
    order.  Keeps the per-bit cost at one array lookup instead of one MAC."""

    def __init__(self, source, seed: Sequence[int], first_index: int):
        self._source = source
        self._seed = list(seed)
        self._next = first_index
        self._buf: Optional[np.ndarray] = None
        self._base = 0
        self._chunk = PREFETCH_START

    def take(self, index: int) -> float:
        if index != self._next:
            raise ValueError("unit feed consumed out of order")
        self._next += 1
        if self._buf is None or index - self._base >= len(self._buf):
            self._buf = self._source.unit_words(self._seed, index, self._chunk)
            self._base = index
            self._chunk = min(self._chunk * 2, PREFETCH_MAX)
        return UnitReal(int(self._buf[index - self._base])).value


def wat_complete(sk: SecretKey, bmodel: BinaryModel, prompt: bytes,
                 rng: np.random.Generator, unit_source=None,
                 forced_bits: Optional[Sequence[int]] = None):
    """Returns (bits as uint8 array, EntropyLedger).

    forced_bits pins the leading bits of the output while the ledger and
    seed bookkeeping run over them as if they had been generated; this is
    the replay hook the removal-attack oracle uses.
    """
    if sk.scheme_id != "complete":
        raise ValueError("key is not for the complete scheme")
    source = KeyedUnitSource(sk) if unit_source is None else unit_source
    forced = [int(b) for b in forced_bits] if forced_bits is not None else []
    lam = float(sk.lam)
    stream = bmodel.open(prompt)
    ledger = EntropyLedger()

    while not stream.finished and ledger.H < lam:
        n = len(stream.bits)
        if n < len(forced):
            bit = forced[n]
        else:
            bit = 1 if rng.random() < stream.p1() else 0
        stream.push(bit)
        ledger.H += stream.bit_logprobs[-1]
    ledger.total_entropy = ledger.H
    if ledger.H >= lam:
        ledger.seed = list(stream.bits)
        ledger.seed_end_index = len(stream.bits)
        feed: Optional[_UnitFeed] = None
        i = ledger.seed_end_index
        while not stream.finished:
            i += 1
            if i - 1 < len(forced):
                bit = forced[i - 1]
            else:
                if feed is None:
                    feed = _UnitFeed(source, ledger.seed, i)
                bit = 1 if feed.take(i) <= stream.p1() else 0
            stream.push(bit)
            ledger.total_entropy += stream.bit_logprobs[-1]
    return np.array(stream.bits, dtype=np.uint8), ledger


def _check_bits(bits) -> np.ndarray:
    arr = np.ascontiguousarray(bits, dtype=np.uint8)
    if arr.ndim != 1:
        raise ValueError("bits must be one-dimensional")
    if arr.size and arr.max() > 1:
        raise ValueError("bits must be 0/1 valued")
    return arr


def _pick_engine(engine: str, unit_source, max_candidates) -> str:
    if engine not in ("auto", "native", "python"):
        raise ValueError(f"unknown engine {engine!r}")
    if engine == "native":
        if _fastscan is None:
            raise RuntimeError("native extension not available")
        if unit_source is not None or max_candidates is not None:
            raise ValueError("native engine supports keyed full scans only")
        return "native"
    if engine == "python":
        return "python"
    usable = (_fastscan is not None and unit_source is None
              and max_candidates is None)
    return "native" if usable else "python"


def detect_complete(sk: SecretKey, bits, lam: Optional[float] = None,
                    unit_source=None, max_candidates: Optional[int] = None,
                    engine: str = "auto") -> DetectionReport:
    """Full-suffix score scan over every candidate seed cut.

    max_candidates caps the number of cuts tried (experiments only; a cap
    can miss seeds formed later in the text).
    """
    if sk.scheme_id != "complete":
        raise ValueError("key is not for the complete scheme")
    arr = _check_bits(bits)
    lam = float(sk.lam if lam is None else lam)
    if arr.size < 2:
        return _empty_report()
    mode = _pick_engine(engine, unit_source, max_candidates)
    if mode == "native":
        raw = _fastscan.scan_complete(sk.key_bytes, arr, lam)
        report = _report_from_complete_scan(raw, arr.size)
    else:
        report = _detect_complete_py(sk, arr, lam, unit_source, max_candidates)
    L = arr.size
    if report.prf_evals > L * (L - 1) // 2 + L:
        raise AssertionError("detector exceeded its evaluation budget")
    return report


def _report_from_complete_scan(raw, L: int) -> DetectionReport:
    (found, fi, fscore, fthr, best_i, best_margin, best_score, best_thr,
     evals, scanned) = raw
    if found:
        cand = CandidateWindow(1, int(fi), L, fscore, fthr)
        margin = fscore - fthr
    elif best_i >= 0:
        cand = CandidateWindow(1, int(best_i), L, best_score, best_thr)
        margin = best_margin
    else:
        cand, margin = None, float("-inf")
    return DetectionReport(bool(found), cand, margin, int(scanned), int(evals))


def _detect_complete_py(sk: SecretKey, arr: np.ndarray, lam: float,
                        unit_source, max_candidates) -> DetectionReport:
    source = KeyedUnitSource(sk) if unit_source is None else unit_source
    L = arr.size
    last = L - 1 if max_candidates is None else min(L - 1, max_candidates)
    best: Optional[CandidateWindow] = None
    best_margin = float("-inf")
    evals = scanned = 0
    for i in range(1, last + 1):
        m = L - i
        words = source.unit_words(arr[:i], i + 1, m)
        score = float(score_words(arr[i:], words).sum())
        thr = detection_threshold(m, lam)
        evals += m
        scanned += 1
        margin = score - thr
        if margin > best_margin:
            best_margin = margin
            best = CandidateWindow(1, i, L, score, thr)
        if score > thr:
            return DetectionReport(True, best, margin, scanned, evals)
    return DetectionReport(False, best, best_margin, scanned, evals)
