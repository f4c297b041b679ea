"""Key generation and the keyed pseudorandom values behind every scheme.

A generator and a detector only ever share two primitives: a unit-interval
value derived from a (seed, index) pair, and a short tag derived from a bit
string.  Both are HMAC-SHA256 under the secret key with fixed framing, so a
value computed while generating can be recomputed bit-exactly by any detector
holding the key.  A lazy random-oracle stand-in with the same surface exists
for experiments that need the idealized variant.
"""

from __future__ import annotations

import hashlib
import hmac
import json
import math
import secrets
import struct
from dataclasses import dataclass
from typing import Iterator, Optional, Sequence

import numpy as np

try:
    from . import _fastscan
except ImportError:  # extension not built; pure-Python paths still work
    _fastscan = None

_SEED_MAGIC = b"WMv1"
_TAG_MAGIC = b"WMv1S"
_MASK64 = (1 << 64) - 1

SCHEME_IDS = ("simple", "complete", "substring")

BitSequence = Sequence[int]


def pack_bits(bits: BitSequence) -> bytes:
    """Pack 0/1 values MSB-first, zero-padded to a byte boundary."""
    arr = np.asarray(bits, dtype=np.uint8)
    if arr.ndim != 1:
        raise ValueError("bits must be one-dimensional")
    if arr.size and arr.max() > 1:
        raise ValueError("bits must be 0 or 1")
    return np.packbits(arr).tobytes()


def bits_from_string(s: str) -> np.ndarray:
    return np.frombuffer(s.encode("ascii"), dtype=np.uint8) - ord("0")


def seed_message(seed: BitSequence) -> bytes:
    """Framed PRF input for a seed: magic, bit count, packed bits."""
    arr = np.asarray(seed, dtype=np.uint8)
    if arr.size >= 1 << 32:
        raise ValueError("seed too long")
    return _SEED_MAGIC + struct.pack(">I", arr.size) + pack_bits(arr)


def tag_message(bits: BitSequence) -> bytes:
    arr = np.asarray(bits, dtype=np.uint8)
    if arr.size >= 1 << 32:
        raise ValueError("message too long")
    return _TAG_MAGIC + struct.pack(">I", arr.size) + pack_bits(arr)


@dataclass(frozen=True)
class UnitReal:
    """A unit-interval value with 64 fraction bits, never exactly 0 or 1.

    value = (z + 0.5) / 2**64 for the underlying 64-bit integer z.  The
    complement is taken on the integer, which keeps ln(1/v) finite for both
    bit polarities (worst case 65*ln2, about 45.1).
    """

    z: int

    def __post_init__(self):
        if not 0 <= self.z <= _MASK64:
            raise ValueError("z out of 64-bit range")

    @property
    def value(self) -> float:
        # the top ~2^11 z values would round to exactly 1.0 in float64;
        # clamp so the open-interval contract survives the conversion
        return min((self.z + 0.5) * 2.0**-64, 1.0 - 2.0**-53)

    def complement(self) -> "UnitReal":
        return UnitReal(self.z ^ _MASK64)


def _check_b(lam: int, b: Optional[int]) -> None:
    limit = 3 * math.ceil(math.log2(lam)) + 8 if lam > 1 else 8
    if b is None or b < 1 or b > limit:
        raise ValueError(f"b must be in [1, {limit}] for lambda={lam}")


@dataclass(frozen=True)
class SecretKey:
    """Watermarking key: 32 random bytes plus the scheme parameters."""

    key_bytes: bytes
    lam: int
    scheme_id: str
    b: Optional[int] = None

    def __post_init__(self):
        if len(self.key_bytes) != 32:
            raise ValueError("key_bytes must be exactly 32 bytes")
        if self.lam < 1:
            raise ValueError("lambda must be at least 1")
        if self.scheme_id not in SCHEME_IDS:
            raise ValueError(f"unknown scheme_id: {self.scheme_id!r}")
        if self.scheme_id == "simple":
            _check_b(self.lam, self.b)
        elif self.b is not None:
            raise ValueError("b is a simple-scheme parameter")

    def fingerprint(self) -> str:
        return hashlib.sha256(self.key_bytes).hexdigest()[:8]

    def to_json(self) -> str:
        doc = {"version": 1, "scheme_id": self.scheme_id, "lambda": self.lam,
               "key_hex": self.key_bytes.hex()}
        if self.b is not None:
            doc["b"] = self.b
        return json.dumps(doc, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "SecretKey":
        doc = json.loads(text)
        if doc.get("version") != 1:
            raise ValueError("unsupported key file version")
        return cls(key_bytes=bytes.fromhex(doc["key_hex"]), lam=doc["lambda"],
                   scheme_id=doc["scheme_id"], b=doc.get("b"))


def setup(lam: int, scheme_id: str, rng: Optional[np.random.Generator] = None,
          b: Optional[int] = None) -> SecretKey:
    """Draw a fresh key.  Pass an rng only for reproducible experiments."""
    if scheme_id == "simple" and b is None:
        b = min(4, 3 * math.ceil(math.log2(max(lam, 2))) + 8)
    material = (rng.bytes(32) if rng is not None
                else secrets.token_bytes(32))
    return SecretKey(key_bytes=material, lam=lam, scheme_id=scheme_id, b=b)


def _key_material(key) -> bytes:
    return key.key_bytes if isinstance(key, SecretKey) else bytes(key)


def prf_unit(key, seed: BitSequence, index: int) -> UnitReal:
    """The keyed unit-interval value for one (seed, index) pair."""
    if index < 0 or index > _MASK64:
        raise ValueError("index out of 64-bit range")
    msg = seed_message(seed) + struct.pack(">Q", index)
    digest = hmac.new(_key_material(key), msg, hashlib.sha256).digest()
    return UnitReal(int.from_bytes(digest[:8], "big"))


def prf_unit_words(key, seed: BitSequence, start: int, count: int) -> np.ndarray:
    """Raw 64-bit words for a contiguous index range (vector form of prf_unit)."""
    if count < 0:
        raise ValueError("count must be non-negative")
    if start < 0 or start + count - 1 > _MASK64:
        raise ValueError("index range out of 64-bit bounds")
    material = _key_material(key)
    prefix = seed_message(seed)
    if _fastscan is not None and len(material) <= 64:
        return _fastscan.prf_z_range(material, prefix, start, count)
    out = np.empty(count, dtype=np.uint64)
    for t in range(count):
        msg = prefix + struct.pack(">Q", start + t)
        digest = hmac.new(material, msg, hashlib.sha256).digest()
        out[t] = int.from_bytes(digest[:8], "big")
    return out


def prf_tag(key, message: BitSequence, b: Optional[int] = None) -> np.ndarray:
    """First b bits of the keyed tag of a bit string, as a 0/1 array."""
    if b is None:
        if not isinstance(key, SecretKey) or key.b is None:
            raise ValueError("tag width b is required")
        b = key.b
    if not 1 <= b <= 256:
        raise ValueError("b must be in [1, 256]")
    digest = hmac.new(_key_material(key), tag_message(message),
                      hashlib.sha256).digest()
    return np.unpackbits(np.frombuffer(digest, dtype=np.uint8))[:b]


def oracle_unit(table: dict, seed: BitSequence, index: int,
                rng: np.random.Generator) -> UnitReal:
    """Lazy random-oracle replacement for prf_unit over a shared table.

    The table must be the same object on the generating and detecting side;
    the idealized argument only holds if both see identical values.
    """
    k = (seed_message(seed), index)
    hit = table.get(k)
    if hit is None:
        hit = UnitReal(int(rng.integers(0, 1 << 64, dtype=np.uint64)))
        table[k] = hit
    return hit


class KeyedUnitSource:
    """Unit-value provider backed by the PRF; the normal production path."""

    __slots__ = ("key", "_material")

    def __init__(self, key: SecretKey):
        self.key = key
        self._material = key.key_bytes

    def unit(self, seed: BitSequence, index: int) -> UnitReal:
        return prf_unit(self._material, seed, index)

    def unit_words(self, seed: BitSequence, start: int, count: int) -> np.ndarray:
        return prf_unit_words(self._material, seed, start, count)

    @property
    def native_key(self) -> Optional[bytes]:
        return self._material


class OracleUnitSource:
    """Unit-value provider from a shared lazy random-oracle table."""

    __slots__ = ("table", "rng")

    def __init__(self, rng: np.random.Generator, table: Optional[dict] = None):
        self.table = {} if table is None else table
        self.rng = rng

    def unit(self, seed: BitSequence, index: int) -> UnitReal:
        return oracle_unit(self.table, seed, index, self.rng)

    def unit_words(self, seed: BitSequence, start: int, count: int) -> np.ndarray:
        out = np.empty(count, dtype=np.uint64)
        for t in range(count):
            out[t] = self.unit(seed, start + t).z
        return out

    @property
    def native_key(self) -> None:
        return None  # no native fast path for the oracle variant
