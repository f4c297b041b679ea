"""Reduction of an arbitrary token alphabet to binary.

A codec maps every token (the done token included) to a distinct bit
string, prefix-free so decoding is unambiguous.  Wrapping a token model
with a codec yields a bit-level model whose conditional bit probabilities
are the exact pushforward of the token distribution: restrict to tokens
whose codewords extend the bits seen so far, renormalize, marginalize the
next bit.  Models that are already bit streams (tokens 0/1, done never in
contention) skip the codec entirely so the bit length equals the token
length.
"""

from __future__ import annotations

import heapq
import json
import math
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .models import (
    ImpossibleResponseError,
    ModelContractError,
    TokenModel,
    _validate_dist,
)

Bits = Tuple[int, ...]


class TokenCodec:
    """Immutable prefix-free token <-> bit-string table."""

    def __init__(self, kind: str, codewords: Sequence[Bits], done_id: int,
                 alphabet_size: int):
        if kind not in ("fixed_width", "huffman"):
            raise ValueError(f"unknown codec kind {kind!r}")
        if len(codewords) != alphabet_size or alphabet_size < 2:
            raise ValueError("need one codeword per token, alphabet >= 2")
        if not 0 <= done_id < alphabet_size:
            raise ValueError("done_id out of range")
        self.kind = kind
        self.codewords = tuple(tuple(cw) for cw in codewords)
        self.done_id = done_id
        self.alphabet_size = alphabet_size
        self.max_len = max(len(cw) for cw in self.codewords)
        self._decode_map = {cw: t for t, cw in enumerate(self.codewords)}
        if len(self._decode_map) != alphabet_size:
            raise ValueError("codewords are not distinct")
        for cw in self.codewords:
            for d in range(1, len(cw)):
                if cw[:d] in self._decode_map:
                    raise ValueError("codec is not prefix-free")

    @property
    def done_codeword(self) -> Bits:
        return self.codewords[self.done_id]

    @property
    def width(self) -> Optional[int]:
        return self.max_len if self.kind == "fixed_width" else None

    @property
    def lengths(self) -> List[int]:
        return [len(cw) for cw in self.codewords]

    def to_json(self) -> str:
        doc = {"kind": self.kind, "done_id": self.done_id,
               "alphabet_size": self.alphabet_size}
        if self.kind == "fixed_width":
            doc["width"] = self.width
        else:
            doc["lengths"] = self.lengths
        return json.dumps(doc, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "TokenCodec":
        doc = json.loads(text)
        n, done = doc["alphabet_size"], doc["done_id"]
        if doc["kind"] == "fixed_width":
            if doc["width"] != _fixed_width(n):
                raise ValueError("stored width disagrees with alphabet size")
            return build_codec(n, done, "fixed_width")
        return cls("huffman", _canonical_from_lengths(doc["lengths"]), done, n)


def _fixed_width(alphabet_size: int) -> int:
    return max(1, math.ceil(math.log2(alphabet_size)))


def _canonical_from_lengths(lengths: Sequence[int]) -> List[Bits]:
    """Assign codewords in (length, token id) order, numerically increasing."""
    if sum(2.0 ** -l for l in lengths) > 1.0 + 1e-12:
        raise ValueError("lengths violate the Kraft inequality")
    order = sorted(range(len(lengths)), key=lambda t: (lengths[t], t))
    codewords: List[Bits] = [()] * len(lengths)
    code, prev = 0, lengths[order[0]]
    for t in order:
        code <<= lengths[t] - prev
        prev = lengths[t]
        codewords[t] = tuple((code >> (prev - 1 - i)) & 1 for i in range(prev))
        code += 1
    return codewords


def _huffman_lengths(freqs: Sequence[float]) -> List[int]:
    n = len(freqs)
    if any(f < 0 for f in freqs):
        raise ValueError("frequencies must be non-negative")
    if sum(freqs) <= 0:
        raise ValueError("frequencies must have positive total")
    # heap keys (freq, smallest token id in subtree) make merges deterministic
    heap = [(float(f), t, (t,)) for t, f in enumerate(freqs)]
    heapq.heapify(heap)
    lengths = [0] * n
    while len(heap) > 1:
        f1, i1, m1 = heapq.heappop(heap)
        f2, i2, m2 = heapq.heappop(heap)
        for t in m1 + m2:
            lengths[t] += 1
        heapq.heappush(heap, (f1 + f2, min(i1, i2), m1 + m2))
    return lengths


def build_codec(alphabet_size: int, done_id: int, kind: str,
                freqs: Optional[Sequence[float]] = None) -> TokenCodec:
    if kind == "fixed_width":
        w = _fixed_width(alphabet_size)
        codewords = [tuple((t >> (w - 1 - i)) & 1 for i in range(w))
                     for t in range(alphabet_size)]
        return TokenCodec(kind, codewords, done_id, alphabet_size)
    if kind == "huffman":
        if freqs is None or len(freqs) != alphabet_size:
            raise ValueError("huffman needs one frequency per token")
        return TokenCodec(kind, _canonical_from_lengths(_huffman_lengths(freqs)),
                          done_id, alphabet_size)
    raise ValueError(f"unknown codec kind {kind!r}")


def encode_tokens(tokens: Sequence[int], codec: TokenCodec) -> List[int]:
    out: List[int] = []
    for t in tokens:
        out.extend(codec.codewords[t])
    return out


def decode_bits(bits: Sequence[int], codec: TokenCodec
                ) -> Tuple[List[int], List[int]]:
    """Greedy prefix-free decode; the trailing partial codeword (or any
    undecodable tail) comes back as the remainder."""
    tokens: List[int] = []
    cur: List[int] = []
    for pos, b in enumerate(bits):
        cur.append(int(b))
        t = codec._decode_map.get(tuple(cur))
        if t is not None:
            tokens.append(t)
            cur = []
        elif len(cur) >= codec.max_len:
            return tokens, cur + [int(x) for x in bits[pos + 1:]]
    return tokens, cur


class BitStream:
    """Single-consumer cursor over one binarized response.

    p1() reads the probability the next bit is 1; push(bit) commits a bit,
    advancing the underlying token model whenever a codeword completes.
    """

    def __init__(self, model: TokenModel, codec: Optional[TokenCodec],
                 prompt: bytes):
        self._model = model
        self._codec = codec
        self._prompt = prompt
        self.tokens: List[int] = []
        self.bits: List[int] = []
        self.bit_logprobs: List[float] = []
        self.truncated = False
        self.finished = False
        self._partial: List[int] = []
        self._cand: List[int] = []
        self._dist: Optional[np.ndarray] = None
        self._advance()

    def _fetch(self) -> np.ndarray:
        return _validate_dist(self._model.next_dist(self._prompt, self.tokens),
                              self._model.alphabet_size)

    def _advance(self) -> None:
        if self.tokens and self.tokens[-1] == self._model.done_id:
            self.finished = True
            return
        if len(self.tokens) >= self._model.max_len:
            self.finished = True
            self.truncated = True
            return
        dist = self._fetch()
        if self._codec is None:
            done_mass = float(dist[self._model.done_id])
            if done_mass >= 1.0 - 1e-12:
                self.tokens.append(self._model.done_id)
                self.finished = True
                return
            if done_mass > 1e-12:
                raise ModelContractError(
                    "model is not a pure bit stream: done is in contention")
        self._dist = dist
        self._partial = []
        self._cand = list(range(self._model.alphabet_size))

    def _masses(self) -> Tuple[float, float]:
        if self._codec is None:
            total = float(self._dist[0] + self._dist[1])
            return float(self._dist[1]), total
        d = len(self._partial)
        ones = tot = 0.0
        for t in self._cand:
            p = float(self._dist[t])
            tot += p
            if self._codec.codewords[t][d] == 1:
                ones += p
        return ones, tot

    def p1(self) -> float:
        if self.finished:
            raise ValueError("stream already finished")
        ones, tot = self._masses()
        return ones / tot

    def push(self, bit: int) -> None:
        if self.finished:
            raise ValueError("stream already finished")
        if bit not in (0, 1):
            raise ValueError("bit must be 0 or 1")
        ones, tot = self._masses()
        mass = ones if bit == 1 else tot - ones
        if mass <= 0.0:
            raise ImpossibleResponseError(
                f"bit {bit} has probability 0 at bit position {len(self.bits) + 1}")
        self.bits.append(bit)
        self.bit_logprobs.append(max(0.0, -math.log2(mass / tot)))
        if self._codec is None:
            self.tokens.append(bit)
            self._advance()
            return
        self._partial.append(bit)
        d = len(self._partial)
        self._cand = [t for t in self._cand
                      if self._codec.codewords[t][d - 1] == bit]
        for t in self._cand:
            if len(self._codec.codewords[t]) == d:
                self.tokens.append(t)
                self._advance()
                return


class BinaryModel:
    """A token model seen through bit-level glasses."""

    def __init__(self, model: TokenModel, codec: Optional[TokenCodec]):
        self.token_model = model
        self.codec = codec

    @property
    def max_bits(self) -> int:
        per_token = 1 if self.codec is None else self.codec.max_len
        return self.token_model.max_len * per_token

    def open(self, prompt: bytes) -> BitStream:
        return BitStream(self.token_model, self.codec, prompt)

    def replay(self, prompt: bytes, prefix_bits: Sequence[int]) -> BitStream:
        stream = self.open(prompt)
        for b in prefix_bits:
            if stream.finished:
                raise ValueError("prefix extends past the end of the response")
            stream.push(int(b))
        return stream

    def next_bit_prob(self, prompt: bytes, prefix_bits: Sequence[int]) -> float:
        stream = self.replay(prompt, prefix_bits)
        if stream.finished:
            raise ValueError("no next bit: response already complete")
        return stream.p1()


def binarize(model: TokenModel, codec: Optional[TokenCodec] = None) -> BinaryModel:
    if codec is None:
        if model.alphabet_size == 3 and getattr(model, "pure_bit_stream", False):
            return BinaryModel(model, None)
        raise ValueError("model needs an explicit codec (not a pure bit stream)")
    if codec.alphabet_size != model.alphabet_size:
        raise ValueError("codec alphabet does not match the model")
    if codec.done_id != model.done_id:
        raise ValueError("codec done token does not match the model")
    return BinaryModel(model, codec)


def sample_bit_response(bmodel: BinaryModel, prompt: bytes,
                        rng: np.random.Generator) -> BitStream:
    """Plain (unwatermarked) sampling in bit space; exactly equivalent to
    token-level sampling pushed through the codec."""
    stream = bmodel.open(prompt)
    while not stream.finished:
        stream.push(1 if rng.random() < stream.p1() else 0)
    return stream
