import csv
import hashlib
import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from entmark import prf

DATA = Path(__file__).parent / "data"


def hmac_independent(key: bytes, msg: bytes) -> bytes:
    # RFC 2104 from raw sha256 only; deliberately avoids the hmac module
    if len(key) > 64:
        key = hashlib.sha256(key).digest()
    k = key + b"\x00" * (64 - len(key))
    inner = hashlib.sha256(bytes(x ^ 0x36 for x in k) + msg).digest()
    return hashlib.sha256(bytes(x ^ 0x5C for x in k) + inner).digest()


def test_golden_unit_vectors():
    rows = list(csv.DictReader(open(DATA / "prf_golden.csv")))
    assert len(rows) >= 32
    for row in rows:
        key = bytes.fromhex(row["key_hex"])
        seed = prf.bits_from_string(row["seed_bits"]) if row["seed_bits"] else []
        idx = int(row["index"])
        got = prf.prf_unit(key, seed, idx)
        assert got.z == int(row["z"])
        # triple agreement: frozen file, package, and an in-test independent MAC
        msg = prf.seed_message(seed) + struct.pack(">Q", idx)
        assert int.from_bytes(hmac_independent(key, msg)[:8], "big") == got.z


def test_golden_tag_vectors():
    for row in csv.DictReader(open(DATA / "prf_tag_golden.csv")):
        key = bytes.fromhex(row["key_hex"])
        msg = prf.bits_from_string(row["message_bits"]) if row["message_bits"] else []
        digest = hmac_independent(key, prf.tag_message(msg))
        assert digest.hex() == row["digest_hex"]
        want = np.unpackbits(np.frombuffer(digest, dtype=np.uint8))[:16]
        assert np.array_equal(prf.prf_tag(key, msg, b=16), want)


def test_unit_words_match_scalar():
    key = bytes(range(32))
    seed = [1, 0, 1, 1, 0, 0, 1]
    words = prf.prf_unit_words(key, seed, 5, 40)
    for t in range(40):
        assert int(words[t]) == prf.prf_unit(key, seed, 5 + t).z


def test_unit_real_bounds_and_complement():
    lo, hi = prf.UnitReal(0), prf.UnitReal(2**64 - 1)
    assert 0.0 < lo.value < hi.value < 1.0
    u = prf.UnitReal(123456789)
    assert u.complement().z == u.z ^ (2**64 - 1)
    assert u.complement().complement() == u
    with pytest.raises(ValueError):
        prf.UnitReal(2**64)


def test_setup_and_key_roundtrip():
    rng = np.random.default_rng(0)
    k1 = prf.setup(16, "complete", rng)
    k2 = prf.setup(16, "complete", rng)
    assert k1.key_bytes != k2.key_bytes
    back = prf.SecretKey.from_json(k1.to_json())
    assert back == k1
    assert prf.prf_unit(back, [1, 0], 3) == prf.prf_unit(k1, [1, 0], 3)
    assert len(k1.fingerprint()) == 8


def test_simple_scheme_b_bound():
    # limit is 3*ceil(log2 lambda) + 8; for lambda=8 that is 17
    prf.SecretKey(bytes(32), 8, "simple", b=12)
    prf.SecretKey(bytes(32), 8, "simple", b=17)
    with pytest.raises(ValueError):
        prf.SecretKey(bytes(32), 8, "simple", b=18)
    with pytest.raises(ValueError):
        prf.SecretKey(bytes(32), 8, "simple", b=0)
    with pytest.raises(ValueError):
        prf.SecretKey(bytes(32), 8, "complete", b=4)


def test_tag_width_and_determinism():
    key = prf.SecretKey(bytes(range(32)), 8, "simple", b=10)
    t = prf.prf_tag(key, [1, 1, 0])
    assert t.shape == (10,) and set(np.unique(t)) <= {0, 1}
    assert np.array_equal(t, prf.prf_tag(key, [1, 1, 0]))
    with pytest.raises(ValueError):
        prf.prf_tag(bytes(32), [1], b=0)


def test_prf_uniformity_large_sample():
    words = prf.prf_unit_words(bytes(range(32)), [1, 0, 1], 0, 1_000_000)
    vals = (words.astype(np.float64) + 0.5) * 2.0**-64
    assert abs(vals.mean() - 0.5) < 0.002
    assert stats.kstest(vals, "uniform").pvalue > 0.001


def test_oracle_unit_memoizes_and_separates():
    rng = np.random.default_rng(1)
    table = {}
    a = prf.oracle_unit(table, [1, 0], 4, rng)
    assert prf.oracle_unit(table, [1, 0], 4, rng) == a
    b = prf.oracle_unit(table, [1, 0], 5, rng)
    assert len(table) == 2 and a != b
    src = prf.OracleUnitSource(np.random.default_rng(2))
    w = src.unit_words([1], 0, 6)
    assert all(int(w[t]) == src.unit([1], t).z for t in range(6))


@given(st.lists(st.integers(0, 1), max_size=200))
@settings(max_examples=60, deadline=None)
def test_pack_bits_roundtrip(bits):
    packed = prf.pack_bits(bits)
    assert len(packed) == (len(bits) + 7) // 8
    back = np.unpackbits(np.frombuffer(packed, dtype=np.uint8))[: len(bits)]
    assert list(back) == bits


@given(st.lists(st.integers(0, 1), max_size=64))
@settings(max_examples=60, deadline=None)
def test_domain_separation(bits):
    # unit and tag framings can never collide in MAC input space
    assert not prf.seed_message(bits).startswith(prf.tag_message(bits)[:5])
    assert prf.seed_message(bits)[:4] == b"WMv1"
    assert prf.tag_message(bits)[:5] == b"WMv1S"


def test_native_batch_agrees_with_pure_python():
    if prf._fastscan is None:
        pytest.skip("extension not built")
    key, seed = bytes(range(32)), [0, 1, 1, 0, 1]
    import hmac as hmac_mod

    prefix = prf.seed_message(seed)
    got = prf.prf_unit_words(key, seed, 100, 16)
    for t in range(16):
        msg = prefix + struct.pack(">Q", 100 + t)
        want = hmac_mod.new(key, msg, hashlib.sha256).digest()[:8]
        assert int(got[t]) == int.from_bytes(want, "big")
