import math

import numpy as np
import pytest

from entmark.codec import binarize, build_codec, sample_bit_response
from entmark.complete import (
    DetectionReport,
    detect_complete,
    wat_complete,
)
from entmark.models import (
    BernoulliModel,
    DeterministicModel,
    MixtureModel,
    UniformModel,
)
from entmark.prf import OracleUnitSource, UnitReal, prf_unit, setup
from entmark.scoring import score_bit


def make_key(lam, seed=0):
    return setup(lam, "complete", np.random.default_rng(seed))


def test_deterministic_model_never_seeds():
    sk = make_key(8)
    model = DeterministicModel([0, 1, 1, 0, 2], alphabet_size=3)
    bm = binarize(model, build_codec(3, 2, "fixed_width"))
    bits, ledger = wat_complete(sk, bm, b"", np.random.default_rng(1))
    assert ledger.seed is None and ledger.seed_end_index is None
    assert ledger.H == 0.0 and ledger.total_entropy == 0.0
    plain = sample_bit_response(bm, b"", np.random.default_rng(1))
    assert bits.tolist() == plain.bits


def test_uniform_seed_fixed_at_lambda_bits():
    sk = make_key(8)
    bm = binarize(UniformModel(64))
    bits, ledger = wat_complete(sk, bm, b"", np.random.default_rng(2))
    assert ledger.seed_end_index == 8
    assert ledger.seed == bits[:8].tolist()
    assert ledger.H == 8.0
    assert ledger.total_entropy == 64.0
    assert len(bits) == 64


def test_preseed_bits_match_plain_sampling():
    sk = make_key(8)
    model = MixtureModel(0.5, 64)
    bm = binarize(model, build_codec(3, 2, "fixed_width"))
    bits, ledger = wat_complete(sk, bm, b"", np.random.default_rng(3))
    plain = sample_bit_response(bm, b"", np.random.default_rng(3))
    k = ledger.seed_end_index
    if k is None:
        assert bits.tolist() == plain.bits
    else:
        assert bits[:k].tolist() == plain.bits[:k]


def test_forced_bits_survive_embedding():
    # post-seed tokens with probability 1 must come out unchanged
    sk = make_key(4)

    class UniformThenForced(UniformModel):
        pure_bit_stream = True

        def next_dist(self, prompt, prefix):
            if len(prefix) < 8:
                return np.array([0.5, 0.5, 0.0])
            if len(prefix) < 16:
                return np.array([0.0, 1.0, 0.0])
            return np.array([0.0, 0.0, 1.0])

    bits, ledger = wat_complete(sk, binarize(UniformThenForced(16)), b"",
                                np.random.default_rng(4))
    assert ledger.seed_end_index == 4
    assert bits[8:16].tolist() == [1] * 8


def test_embedded_bits_follow_inverse_transform():
    sk = make_key(8)
    bm = binarize(UniformModel(40))
    bits, ledger = wat_complete(sk, bm, b"", np.random.default_rng(5))
    for i in range(9, 41):
        u = prf_unit(sk, ledger.seed, i)
        assert bits[i - 1] == (1 if u.value <= 0.5 else 0)


def test_unit_choice_matches_marginal_analytically():
    # inverse transform: the fraction of 64-bit words mapping below p is
    # within one part in 2^64 of p itself
    for p in (0.1, 0.25, 0.5, 0.9):
        n_below = math.floor(p * 2.0**64 - 0.5) + 1
        assert abs(n_below * 2.0**-64 - p) <= 2.0**-63


def test_end_to_end_detects_and_pins_seed():
    for trial in range(10):
        sk = make_key(8, seed=trial + 10)
        bm = binarize(UniformModel(512))
        bits, ledger = wat_complete(sk, bm, b"", np.random.default_rng(trial))
        report = detect_complete(sk, bits)
        assert report.verdict
        assert report.best_candidate.seed_end == ledger.seed_end_index
        assert report.margin > 0
        assert report.best_candidate.window_end == 512


def test_detection_soundness_on_noise():
    sk = make_key(16, seed=99)
    rng = np.random.default_rng(6)
    for _ in range(200):
        noise = rng.integers(0, 2, size=256, dtype=np.uint8)
        report = detect_complete(sk, noise)
        assert not report.verdict
        assert report.margin <= 0
        assert report.candidates_scanned == 255
        assert report.prf_evals == 255 * 256 // 2


def test_two_bit_smallest_case():
    sk = make_key(4, seed=7)
    bits = np.array([1, 0], dtype=np.uint8)
    report = detect_complete(sk, bits)
    assert report.candidates_scanned == 1
    u = prf_unit(sk, [1], 2)
    want = score_bit(0, u)
    assert report.best_candidate.score == pytest.approx(want, rel=1e-12)
    assert report.best_candidate.threshold == pytest.approx(1 + 4.0)
    assert report.verdict == (want > 5.0)


def test_short_input_returns_empty_report():
    sk = make_key(8)
    for bits in ([], [1]):
        report = detect_complete(sk, bits)
        assert isinstance(report, DetectionReport)
        assert not report.verdict and report.best_candidate is None
        assert report.candidates_scanned == 0
        assert report.as_dict()["margin"] is None


def test_native_and_python_agree():
    rng = np.random.default_rng(8)
    cases = []
    sk = make_key(8, seed=30)
    bm = binarize(UniformModel(128))
    for trial in range(5):
        bits, _ = wat_complete(sk, bm, b"", np.random.default_rng(40 + trial))
        cases.append(bits)
        cases.append(rng.integers(0, 2, size=128, dtype=np.uint8))
    for bits in cases:
        a = detect_complete(sk, bits, engine="native")
        b = detect_complete(sk, bits, engine="python")
        assert a.verdict == b.verdict
        assert a.candidates_scanned == b.candidates_scanned
        assert a.prf_evals == b.prf_evals
        if a.best_candidate is None:
            assert b.best_candidate is None
        else:
            assert a.best_candidate.seed_end == b.best_candidate.seed_end
            assert a.best_candidate.window_end == b.best_candidate.window_end
            assert a.best_candidate.score == pytest.approx(
                b.best_candidate.score, rel=1e-9)
            assert a.margin == pytest.approx(b.margin, rel=1e-9, abs=1e-9)


def test_oracle_variant_needs_shared_table():
    sk = make_key(8, seed=50)
    bm = binarize(UniformModel(256))
    shared = OracleUnitSource(np.random.default_rng(51))
    bits, ledger = wat_complete(sk, bm, b"", np.random.default_rng(52),
                                unit_source=shared)
    assert ledger.seed_end_index == 8
    hit = detect_complete(sk, bits, unit_source=shared)
    assert hit.verdict and hit.best_candidate.seed_end == 8
    fresh = OracleUnitSource(np.random.default_rng(53))
    miss = detect_complete(sk, bits, unit_source=fresh)
    assert not miss.verdict


def test_max_candidates_caps_the_scan():
    sk = make_key(8, seed=60)
    bm = binarize(UniformModel(256))
    bits, ledger = wat_complete(sk, bm, b"", np.random.default_rng(61))
    assert ledger.seed_end_index == 8
    wide = detect_complete(sk, bits, max_candidates=16)
    assert wide.verdict
    narrow = detect_complete(sk, bits, max_candidates=4)
    assert not narrow.verdict
    assert narrow.candidates_scanned == 4


def test_detect_validates_input():
    sk = make_key(8)
    with pytest.raises(ValueError):
        detect_complete(sk, [0, 1, 2])
    with pytest.raises(ValueError):
        detect_complete(setup(8, "simple", np.random.default_rng(0), b=4),
                        [0, 1])


def test_wat_requires_complete_key():
    sk = setup(8, "substring", np.random.default_rng(0))
    with pytest.raises(ValueError):
        wat_complete(sk, binarize(UniformModel(16)), b"", np.random.default_rng(0))


def test_truncated_stream_still_watermarks():
    sk = make_key(4)
    model = BernoulliModel(0.5, 1000, max_len=32)
    bits, ledger = wat_complete(sk, binarize(model), b"", np.random.default_rng(9))
    assert len(bits) == 32
    assert ledger.seed_end_index == 4
    assert detect_complete(sk, bits).verdict


def test_detection_reproducible():
    sk = make_key(8, seed=70)
    bm = binarize(UniformModel(128))
    bits, _ = wat_complete(sk, bm, b"", np.random.default_rng(71))
    a = detect_complete(sk, bits)
    b = detect_complete(sk, bits)
    assert a == b


def test_seed_collisions_rare_under_one_key():
    # t responses whose seeds carry lam bits collide with probability
    # at most t^2 * 2^-lam overall
    sk = make_key(16, seed=80)
    bm = binarize(UniformModel(64))
    rng = np.random.default_rng(81)
    t = 100
    seeds = []
    for _ in range(t):
        _, ledger = wat_complete(sk, bm, b"", rng)
        assert len(ledger.seed) == 16
        seeds.append(tuple(ledger.seed))
    from collections import Counter
    counts = Counter(seeds)
    colliding = sum(c for c in counts.values() if c > 1)
    assert colliding / t <= t * t * 2.0 ** -16
