import math

import numpy as np
import pytest

from entmark.models import DeterministicModel, MixtureModel, UniformModel
from entmark.prf import prf_tag, setup
from entmark.simple import (
    AttemptBudgetError,
    detect_simple,
    wat_simple,
)


def test_low_entropy_branch_returns_first_sample():
    sk = setup(4, "simple", np.random.default_rng(0), b=2)
    model = DeterministicModel([1, 0, 1, 2], alphabet_size=3)
    resp, stats = wat_simple(sk, model, b"", np.random.default_rng(1))
    assert resp.tokens == [1, 0, 1, 2]
    assert stats.model_calls == 1 and not stats.watermark_branch_taken


def test_cutoff_is_inclusive():
    # uniform(24) at lambda=4 gives exactly 6*lambda bits: still low-entropy
    sk = setup(4, "simple", np.random.default_rng(0), b=8)
    resp, stats = wat_simple(sk, UniformModel(24), b"", np.random.default_rng(2))
    assert stats.model_calls == 1 and not stats.watermark_branch_taken
    resp, stats = wat_simple(sk, UniformModel(25), b"", np.random.default_rng(2),
                             max_attempts=1 << 14)
    assert stats.watermark_branch_taken and stats.model_calls >= 2


def test_watermarked_branch_output_detects():
    rng = np.random.default_rng(3)
    model = UniformModel(32)
    for trial in range(20):
        sk = setup(4, "simple", np.random.default_rng(100 + trial), b=2)
        resp, stats = wat_simple(sk, model, b"", rng)
        assert stats.watermark_branch_taken
        assert detect_simple(sk, resp, model.alphabet_size)


def test_expected_call_count_matches_tag_width():
    model = UniformModel(32)  # 8*lambda bits at lambda=4, always high entropy
    for b, runs in ((1, 200), (2, 200)):
        rng = np.random.default_rng(b)
        calls = []
        for trial in range(runs):
            sk = setup(4, "simple", np.random.default_rng(trial * 7 + b), b=b)
            _, stats = wat_simple(sk, model, b"", rng)
            calls.append(stats.model_calls)
        want = 1 + 2**b
        assert abs(np.mean(calls) - want) < 0.3 * want


def test_budget_exhaustion_carries_last_sample():
    sk = setup(4, "simple", np.random.default_rng(0), b=14)
    model = UniformModel(32)
    with pytest.raises(AttemptBudgetError) as info:
        wat_simple(sk, model, b"", np.random.default_rng(5), max_attempts=4)
    err = info.value
    assert err.stats.model_calls == 4
    assert len(err.last_response.tokens) == 33
    assert err.last_response.tokens[-1] == model.done_id


def test_detect_rate_tracks_tag_width():
    b = 4
    sk = setup(8, "simple", np.random.default_rng(9), b=b)
    rng = np.random.default_rng(10)
    n = 4000
    hits = sum(
        detect_simple(sk, rng.integers(0, 2, size=64).tolist() + [2], 3)
        for _ in range(n))
    rate, want = hits / n, 2.0**-b
    assert abs(rate - want) < 4 * math.sqrt(want * (1 - want) / n)


def test_detect_matches_manual_tag():
    sk = setup(8, "simple", np.random.default_rng(11), b=6)
    tokens = [0, 1, 1, 0, 2]
    # fixed-width 2-bit encoding of the token ids, done included
    bits = [0, 0, 0, 1, 0, 1, 0, 0, 1, 0]
    want = not np.any(prf_tag(sk, bits))
    assert detect_simple(sk, tokens, 3) == want


def test_wrong_scheme_key_rejected():
    sk = setup(8, "complete", np.random.default_rng(0))
    with pytest.raises(ValueError):
        wat_simple(sk, UniformModel(4), b"", np.random.default_rng(0))
    with pytest.raises(ValueError):
        detect_simple(sk, [0, 2], 3)


def test_branch_frequency_preserved_on_mixture():
    # the immediate-return rule keeps the done-only mass at 1 - eps
    model = MixtureModel(0.5, 16)
    rng = np.random.default_rng(21)
    n, short = 600, 0
    for trial in range(n):
        sk = setup(2, "simple", np.random.default_rng(trial), b=1)
        resp, stats = wat_simple(sk, model, b"", rng)
        if len(resp.tokens) == 1:
            short += 1
            assert not stats.watermark_branch_taken
    assert abs(short / n - 0.5) < 4 * math.sqrt(0.25 / n)


def test_runs_reproducible():
    model = UniformModel(32)
    sk = setup(4, "simple", np.random.default_rng(33), b=2)
    a, sa = wat_simple(sk, model, b"", np.random.default_rng(77))
    b_, sb = wat_simple(sk, model, b"", np.random.default_rng(77))
    assert a.tokens == b_.tokens and sa == sb
