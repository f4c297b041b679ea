// Native scoring core: midstate-cached HMAC-SHA256 evaluation plus the two
// detector window scans.  The hot path keeps hand-laid-out message tails and
// 32-byte state copies so each evaluation costs ~2 compression calls; pairs of
// consecutive indices are hashed back to back so the CPU overlaps the two
// independent dependency chains.  A SHA-NI compression function is used when
// the CPU supports it, with OpenSSL's SHA256_Transform as the fallback.
//
// Module init cross-checks the active path against a plain streaming HMAC
// built from SHA256_Init/Update/Final and refuses to import on mismatch.

#include <pybind11/pybind11.h>
#include <pybind11/numpy.h>

#include <openssl/sha.h>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#if defined(__x86_64__) || defined(_M_X64)
#define FASTSCAN_X86 1
#include <cpuid.h>
#include <immintrin.h>
#else
#define FASTSCAN_X86 0
#endif

namespace py = pybind11;

namespace {

// ---------------------------------------------------------------------------
// byte helpers
// ---------------------------------------------------------------------------

inline void store_be32(uint8_t *p, uint32_t v) {
    p[0] = (uint8_t)(v >> 24);
    p[1] = (uint8_t)(v >> 16);
    p[2] = (uint8_t)(v >> 8);
    p[3] = (uint8_t)v;
}

inline void store_be64(uint8_t *p, uint64_t v) {
    p[0] = (uint8_t)(v >> 56);
    p[1] = (uint8_t)(v >> 48);
    p[2] = (uint8_t)(v >> 40);
    p[3] = (uint8_t)(v >> 32);
    p[4] = (uint8_t)(v >> 24);
    p[5] = (uint8_t)(v >> 16);
    p[6] = (uint8_t)(v >> 8);
    p[7] = (uint8_t)v;
}

const uint32_t SHA256_IV[8] = {
    0x6a09e667u, 0xbb67ae85u, 0x3c6ef372u, 0xa54ff53au,
    0x510e527fu, 0x9b05688cu, 0x1f83d9abu, 0x5be0cd19u,
};

// ---------------------------------------------------------------------------
// compression backends
// ---------------------------------------------------------------------------

// OpenSSL's raw one-block compression; only ctx->h is read or written.
inline void ssl_transform(uint32_t st[8], const uint8_t blk[64]) {
    SHA256_CTX c;
    std::memcpy(c.h, st, 32);
    SHA256_Transform(&c, blk);
    std::memcpy(st, c.h, 32);
}

#if FASTSCAN_X86

bool cpu_has_shani() {
    unsigned eax = 0, ebx = 0, ecx = 0, edx = 0;
    if (!__get_cpuid_count(7, 0, &eax, &ebx, &ecx, &edx)) return false;
    if (!((ebx >> 29) & 1u)) return false;  // SHA extensions
    if (!__get_cpuid(1, &eax, &ebx, &ecx, &edx)) return false;
    return ((ecx >> 9) & 1u) && ((ecx >> 19) & 1u);  // SSSE3, SSE4.1
}

// One-block SHA-256 with the SHA-NI round instructions.  Message schedule and
// round pairing follow the standard published flow for these instructions.
__attribute__((target("sha,sse4.1,ssse3"), always_inline)) inline void
shani_body(uint32_t state[8], const uint8_t data[64]) {
    const __m128i MASK =
        _mm_set_epi64x(0x0c0d0e0f08090a0bULL, 0x0405060700010203ULL);

    __m128i TMP = _mm_loadu_si128((const __m128i *)&state[0]);
    __m128i STATE1 = _mm_loadu_si128((const __m128i *)&state[4]);
    TMP = _mm_shuffle_epi32(TMP, 0xB1);
    STATE1 = _mm_shuffle_epi32(STATE1, 0x1B);
    __m128i STATE0 = _mm_alignr_epi8(TMP, STATE1, 8);
    STATE1 = _mm_blend_epi16(STATE1, TMP, 0xF0);

    const __m128i ABEF_SAVE = STATE0;
    const __m128i CDGH_SAVE = STATE1;
    __m128i MSG, MSG0, MSG1, MSG2, MSG3;

    // rounds 0-3
    MSG = _mm_loadu_si128((const __m128i *)(data + 0));
    MSG0 = _mm_shuffle_epi8(MSG, MASK);
    MSG = _mm_add_epi32(
        MSG0, _mm_set_epi64x(0xE9B5DBA5B5C0FBCFULL, 0x71374491428A2F98ULL));
    STATE1 = _mm_sha256rnds2_epu32(STATE1, STATE0, MSG);
    MSG = _mm_shuffle_epi32(MSG, 0x0E);
    STATE0 = _mm_sha256rnds2_epu32(STATE0, STATE1, MSG);

    // rounds 4-7
    MSG1 = _mm_loadu_si128((const __m128i *)(data + 16));
    MSG1 = _mm_shuffle_epi8(MSG1, MASK);
    MSG = _mm_add_epi32(
        MSG1, _mm_set_epi64x(0xAB1C5ED5923F82A4ULL, 0x59F111F13956C25BULL));
    STATE1 = _mm_sha256rnds2_epu32(STATE1, STATE0, MSG);
    MSG = _mm_shuffle_epi32(MSG, 0x0E);
    STATE0 = _mm_sha256rnds2_epu32(STATE0, STATE1, MSG);
    MSG0 = _mm_sha256msg1_epu32(MSG0, MSG1);

    // rounds 8-11
    MSG2 = _mm_loadu_si128((const __m128i *)(data + 32));
    MSG2 = _mm_shuffle_epi8(MSG2, MASK);
    MSG = _mm_add_epi32(
        MSG2, _mm_set_epi64x(0x550C7DC3243185BEULL, 0x12835B01D807AA98ULL));
    STATE1 = _mm_sha256rnds2_epu32(STATE1, STATE0, MSG);
    MSG = _mm_shuffle_epi32(MSG, 0x0E);
    STATE0 = _mm_sha256rnds2_epu32(STATE0, STATE1, MSG);
    MSG1 = _mm_sha256msg1_epu32(MSG1, MSG2);

    // rounds 12-15
    MSG3 = _mm_loadu_si128((const __m128i *)(data + 48));
    MSG3 = _mm_shuffle_epi8(MSG3, MASK);
    MSG = _mm_add_epi32(
        MSG3, _mm_set_epi64x(0xC19BF1749BDC06A7ULL, 0x80DEB1FE72BE5D74ULL));
    STATE1 = _mm_sha256rnds2_epu32(STATE1, STATE0, MSG);
    TMP = _mm_alignr_epi8(MSG3, MSG2, 4);
    MSG0 = _mm_add_epi32(MSG0, TMP);
    MSG0 = _mm_sha256msg2_epu32(MSG0, MSG3);
    MSG = _mm_shuffle_epi32(MSG, 0x0E);
    STATE0 = _mm_sha256rnds2_epu32(STATE0, STATE1, MSG);
    MSG2 = _mm_sha256msg1_epu32(MSG2, MSG3);

    // rounds 16-19
    MSG = _mm_add_epi32(
        MSG0, _mm_set_epi64x(0x240CA1CC0FC19DC6ULL, 0xEFBE4786E49B69C1ULL));
    STATE1 = _mm_sha256rnds2_epu32(STATE1, STATE0, MSG);
    TMP = _mm_alignr_epi8(MSG0, MSG3, 4);
    MSG1 = _mm_add_epi32(MSG1, TMP);
    MSG1 = _mm_sha256msg2_epu32(MSG1, MSG0);
    MSG = _mm_shuffle_epi32(MSG, 0x0E);
    STATE0 = _mm_sha256rnds2_epu32(STATE0, STATE1, MSG);
    MSG3 = _mm_sha256msg1_epu32(MSG3, MSG0);

    // rounds 20-23
    MSG = _mm_add_epi32(
        MSG1, _mm_set_epi64x(0x76F988DA5CB0A9DCULL, 0x4A7484AA2DE92C6FULL));
    STATE1 = _mm_sha256rnds2_epu32(STATE1, STATE0, MSG);
    TMP = _mm_alignr_epi8(MSG1, MSG0, 4);
    MSG2 = _mm_add_epi32(MSG2, TMP);
    MSG2 = _mm_sha256msg2_epu32(MSG2, MSG1);
    MSG = _mm_shuffle_epi32(MSG, 0x0E);
    STATE0 = _mm_sha256rnds2_epu32(STATE0, STATE1, MSG);
    MSG0 = _mm_sha256msg1_epu32(MSG0, MSG1);

    // rounds 24-27
    MSG = _mm_add_epi32(
        MSG2, _mm_set_epi64x(0xBF597FC7B00327C8ULL, 0xA831C66D983E5152ULL));
    STATE1 = _mm_sha256rnds2_epu32(STATE1, STATE0, MSG);
    TMP = _mm_alignr_epi8(MSG2, MSG1, 4);
    MSG3 = _mm_add_epi32(MSG3, TMP);
    MSG3 = _mm_sha256msg2_epu32(MSG3, MSG2);
    MSG = _mm_shuffle_epi32(MSG, 0x0E);
    STATE0 = _mm_sha256rnds2_epu32(STATE0, STATE1, MSG);
    MSG1 = _mm_sha256msg1_epu32(MSG1, MSG2);

    // rounds 28-31
    MSG = _mm_add_epi32(
        MSG3, _mm_set_epi64x(0x1429296706CA6351ULL, 0xD5A79147C6E00BF3ULL));
    STATE1 = _mm_sha256rnds2_epu32(STATE1, STATE0, MSG);
    TMP = _mm_alignr_epi8(MSG3, MSG2, 4);
    MSG0 = _mm_add_epi32(MSG0, TMP);
    MSG0 = _mm_sha256msg2_epu32(MSG0, MSG3);
    MSG = _mm_shuffle_epi32(MSG, 0x0E);
    STATE0 = _mm_sha256rnds2_epu32(STATE0, STATE1, MSG);
    MSG2 = _mm_sha256msg1_epu32(MSG2, MSG3);

    // rounds 32-35
    MSG = _mm_add_epi32(
        MSG0, _mm_set_epi64x(0x53380D134D2C6DFCULL, 0x2E1B213827B70A85ULL));
    STATE1 = _mm_sha256rnds2_epu32(STATE1, STATE0, MSG);
    TMP = _mm_alignr_epi8(MSG0, MSG3, 4);
    MSG1 = _mm_add_epi32(MSG1, TMP);
    MSG1 = _mm_sha256msg2_epu32(MSG1, MSG0);
    MSG = _mm_shuffle_epi32(MSG, 0x0E);
    STATE0 = _mm_sha256rnds2_epu32(STATE0, STATE1, MSG);
    MSG3 = _mm_sha256msg1_epu32(MSG3, MSG0);

    // rounds 36-39
    MSG = _mm_add_epi32(
        MSG1, _mm_set_epi64x(0x92722C8581C2C92EULL, 0x766A0ABB650A7354ULL));
    STATE1 = _mm_sha256rnds2_epu32(STATE1, STATE0, MSG);
    TMP = _mm_alignr_epi8(MSG1, MSG0, 4);
    MSG2 = _mm_add_epi32(MSG2, TMP);
    MSG2 = _mm_sha256msg2_epu32(MSG2, MSG1);
    MSG = _mm_shuffle_epi32(MSG, 0x0E);
    STATE0 = _mm_sha256rnds2_epu32(STATE0, STATE1, MSG);
    MSG0 = _mm_sha256msg1_epu32(MSG0, MSG1);

    // rounds 40-43
    MSG = _mm_add_epi32(
        MSG2, _mm_set_epi64x(0xC76C51A3C24B8B70ULL, 0xA81A664BA2BFE8A1ULL));
    STATE1 = _mm_sha256rnds2_epu32(STATE1, STATE0, MSG);
    TMP = _mm_alignr_epi8(MSG2, MSG1, 4);
    MSG3 = _mm_add_epi32(MSG3, TMP);
    MSG3 = _mm_sha256msg2_epu32(MSG3, MSG2);
    MSG = _mm_shuffle_epi32(MSG, 0x0E);
    STATE0 = _mm_sha256rnds2_epu32(STATE0, STATE1, MSG);
    MSG1 = _mm_sha256msg1_epu32(MSG1, MSG2);

    // rounds 44-47
    MSG = _mm_add_epi32(
        MSG3, _mm_set_epi64x(0x106AA070F40E3585ULL, 0xD6990624D192E819ULL));
    STATE1 = _mm_sha256rnds2_epu32(STATE1, STATE0, MSG);
    TMP = _mm_alignr_epi8(MSG3, MSG2, 4);
    MSG0 = _mm_add_epi32(MSG0, TMP);
    MSG0 = _mm_sha256msg2_epu32(MSG0, MSG3);
    MSG = _mm_shuffle_epi32(MSG, 0x0E);
    STATE0 = _mm_sha256rnds2_epu32(STATE0, STATE1, MSG);
    MSG2 = _mm_sha256msg1_epu32(MSG2, MSG3);

    // rounds 48-51
    MSG = _mm_add_epi32(
        MSG0, _mm_set_epi64x(0x34B0BCB52748774CULL, 0x1E376C0819A4C116ULL));
    STATE1 = _mm_sha256rnds2_epu32(STATE1, STATE0, MSG);
    TMP = _mm_alignr_epi8(MSG0, MSG3, 4);
    MSG1 = _mm_add_epi32(MSG1, TMP);
    MSG1 = _mm_sha256msg2_epu32(MSG1, MSG0);
    MSG = _mm_shuffle_epi32(MSG, 0x0E);
    STATE0 = _mm_sha256rnds2_epu32(STATE0, STATE1, MSG);
    MSG3 = _mm_sha256msg1_epu32(MSG3, MSG0);

    // rounds 52-55
    MSG = _mm_add_epi32(
        MSG1, _mm_set_epi64x(0x682E6FF35B9CCA4FULL, 0x4ED8AA4A391C0CB3ULL));
    STATE1 = _mm_sha256rnds2_epu32(STATE1, STATE0, MSG);
    TMP = _mm_alignr_epi8(MSG1, MSG0, 4);
    MSG2 = _mm_add_epi32(MSG2, TMP);
    MSG2 = _mm_sha256msg2_epu32(MSG2, MSG1);
    MSG = _mm_shuffle_epi32(MSG, 0x0E);
    STATE0 = _mm_sha256rnds2_epu32(STATE0, STATE1, MSG);

    // rounds 56-59
    MSG = _mm_add_epi32(
        MSG2, _mm_set_epi64x(0x8CC7020884C87814ULL, 0x78A5636F748F82EEULL));
    STATE1 = _mm_sha256rnds2_epu32(STATE1, STATE0, MSG);
    TMP = _mm_alignr_epi8(MSG2, MSG1, 4);
    MSG3 = _mm_add_epi32(MSG3, TMP);
    MSG3 = _mm_sha256msg2_epu32(MSG3, MSG2);
    MSG = _mm_shuffle_epi32(MSG, 0x0E);
    STATE0 = _mm_sha256rnds2_epu32(STATE0, STATE1, MSG);

    // rounds 60-63
    MSG = _mm_add_epi32(
        MSG3, _mm_set_epi64x(0xC67178F2BEF9A3F7ULL, 0xA4506CEB90BEFFFAULL));
    STATE1 = _mm_sha256rnds2_epu32(STATE1, STATE0, MSG);
    MSG = _mm_shuffle_epi32(MSG, 0x0E);
    STATE0 = _mm_sha256rnds2_epu32(STATE0, STATE1, MSG);

    STATE0 = _mm_add_epi32(STATE0, ABEF_SAVE);
    STATE1 = _mm_add_epi32(STATE1, CDGH_SAVE);

    TMP = _mm_shuffle_epi32(STATE0, 0x1B);
    STATE1 = _mm_shuffle_epi32(STATE1, 0xB1);
    STATE0 = _mm_blend_epi16(TMP, STATE1, 0xF0);
    STATE1 = _mm_alignr_epi8(STATE1, TMP, 8);

    _mm_storeu_si128((__m128i *)&state[0], STATE0);
    _mm_storeu_si128((__m128i *)&state[4], STATE1);
}

__attribute__((target("sha,sse4.1,ssse3"))) void shani_transform1(
    uint32_t st[8], const uint8_t blk[64]) {
    shani_body(st, blk);
}

// Two independent blocks in one call; the straight-line chains overlap in the
// out-of-order core, which is where the pairwise speedup comes from.
__attribute__((target("sha,sse4.1,ssse3"))) void shani_transform2(
    uint32_t sa[8], const uint8_t da[64], uint32_t sb[8], const uint8_t db[64]) {
    shani_body(sa, da);
    shani_body(sb, db);
}

#else

bool cpu_has_shani() { return false; }
void shani_transform1(uint32_t *, const uint8_t *) {}
void shani_transform2(uint32_t *, const uint8_t *, uint32_t *, const uint8_t *) {}

#endif  // FASTSCAN_X86

bool g_shani = false;

inline void transform1(uint32_t st[8], const uint8_t blk[64]) {
    if (g_shani)
        shani_transform1(st, blk);
    else
        ssl_transform(st, blk);
}

inline void transform2(uint32_t sa[8], const uint8_t da[64], uint32_t sb[8],
                       const uint8_t db[64]) {
    if (g_shani) {
        shani_transform2(sa, da, sb, db);
    } else {
        ssl_transform(sa, da);
        ssl_transform(sb, db);
    }
}

// ---------------------------------------------------------------------------
// midstate-cached HMAC
// ---------------------------------------------------------------------------

struct KeyBase {
    uint32_t ist[8];  // state after the (key ^ ipad) block
    uint32_t ost[8];  // state after the (key ^ opad) block
};

void key_base_init(KeyBase &kb, const uint8_t *key, size_t klen) {
    if (klen > 64)
        throw std::invalid_argument("key longer than one hash block");
    uint8_t blk[64];
    for (int i = 0; i < 64; i++)
        blk[i] = (uint8_t)((i < (int)klen ? key[i] : 0) ^ 0x36);
    std::memcpy(kb.ist, SHA256_IV, 32);
    transform1(kb.ist, blk);
    for (int i = 0; i < 64; i++) blk[i] ^= 0x36 ^ 0x5c;
    std::memcpy(kb.ost, SHA256_IV, 32);
    transform1(kb.ost, blk);
}

// Per-candidate inner-hash context.  The message is keyblock | prefix | index
// and only the 8 index bytes change between evaluations, so the tail blocks
// (residual prefix bytes, index slot, padding, length) are prebuilt once.
// Two tail copies let a pair of indices run through transform2 together.
struct Cand {
    uint32_t ist[8];  // inner state after all full blocks of keyblock | prefix
    uint8_t tail_a[128];
    uint8_t tail_b[128];
    size_t r;    // residual byte count; index lands at tail[r]
    int nblk;    // tail blocks: 1 or 2
};

void cand_init(Cand &c, const KeyBase &kb, const uint8_t *pfx, size_t plen) {
    std::memcpy(c.ist, kb.ist, 32);
    size_t off = 0;
    while (plen - off >= 64) {
        transform1(c.ist, pfx + off);
        off += 64;
    }
    c.r = plen - off;
    c.nblk = (c.r + 8 + 9 <= 64) ? 1 : 2;
    uint64_t msg_bytes = 64 + (uint64_t)plen + 8;
    std::memset(c.tail_a, 0, sizeof c.tail_a);
    std::memcpy(c.tail_a, pfx + off, c.r);
    c.tail_a[c.r + 8] = 0x80;
    store_be64(c.tail_a + (size_t)c.nblk * 64 - 8, msg_bytes * 8);
    std::memcpy(c.tail_b, c.tail_a, sizeof c.tail_a);
}

// outer block: digest | 0x80 | zeros | bit length of keyblock+digest (768)
inline void fill_outer(uint8_t ob[64], const uint32_t dig[8]) {
    for (int t = 0; t < 8; t++) store_be32(ob + 4 * t, dig[t]);
    ob[32] = 0x80;
    std::memset(ob + 33, 0, 23);
    store_be64(ob + 56, 768);
}

inline uint64_t cand_z1(Cand &c, const KeyBase &kb, uint64_t idx) {
    store_be64(c.tail_a + c.r, idx);
    uint32_t st[8];
    std::memcpy(st, c.ist, 32);
    transform1(st, c.tail_a);
    if (c.nblk == 2) transform1(st, c.tail_a + 64);
    uint8_t ob[64];
    fill_outer(ob, st);
    uint32_t os[8];
    std::memcpy(os, kb.ost, 32);
    transform1(os, ob);
    return ((uint64_t)os[0] << 32) | os[1];
}

inline void cand_z2(Cand &c, const KeyBase &kb, uint64_t i0, uint64_t i1,
                    uint64_t out[2]) {
    store_be64(c.tail_a + c.r, i0);
    store_be64(c.tail_b + c.r, i1);
    uint32_t sa[8], sb[8];
    std::memcpy(sa, c.ist, 32);
    std::memcpy(sb, c.ist, 32);
    transform2(sa, c.tail_a, sb, c.tail_b);
    if (c.nblk == 2) transform2(sa, c.tail_a + 64, sb, c.tail_b + 64);
    uint8_t oa[64], obuf[64];
    fill_outer(oa, sa);
    fill_outer(obuf, sb);
    uint32_t qa[8], qb[8];
    std::memcpy(qa, kb.ost, 32);
    std::memcpy(qb, kb.ost, 32);
    transform2(qa, oa, qb, obuf);
    out[0] = ((uint64_t)qa[0] << 32) | qa[1];
    out[1] = ((uint64_t)qb[0] << 32) | qb[1];
}

// ---------------------------------------------------------------------------
// framing and scoring
// ---------------------------------------------------------------------------

// Seed prefix wire format: "WMv1" | u32 BE bit count | bits packed MSB-first.
size_t build_seed_prefix(uint8_t *out, const uint8_t *bits, size_t start,
                         size_t nbits) {
    out[0] = 'W';
    out[1] = 'M';
    out[2] = 'v';
    out[3] = '1';
    store_be32(out + 4, (uint32_t)nbits);
    size_t nbytes = (nbits + 7) / 8;
    std::memset(out + 8, 0, nbytes);
    for (size_t t = 0; t < nbits; t++) {
        if (bits[start + t]) out[8 + t / 8] |= (uint8_t)(0x80u >> (t % 8));
    }
    return 8 + nbytes;
}

// Score of one position: -ln(unit) for a 1 bit, -ln(1 - unit) for a 0 bit,
// with the complement taken on the integer so the result stays finite.
inline double score_of(uint64_t z, uint8_t bit) {
    uint64_t w = bit ? z : ~z;
    return -std::log(((double)w + 0.5) * 0x1p-64);
}

uint64_t ref_hmac_z(const std::string &key, const uint8_t *msg, size_t mlen);

// ---------------------------------------------------------------------------
// exported: PRF batch
// ---------------------------------------------------------------------------

py::array_t<uint64_t> prf_z_range(py::bytes key, py::bytes prefix,
                                  uint64_t start, size_t count) {
    std::string k = key;
    std::string p = prefix;
    auto out = py::array_t<uint64_t>((py::ssize_t)count);
    uint64_t *o = out.mutable_data();
    {
        py::gil_scoped_release rel;
        KeyBase kb;
        key_base_init(kb, (const uint8_t *)k.data(), k.size());
        Cand c;
        cand_init(c, kb, (const uint8_t *)p.data(), p.size());
        size_t t = 0;
        for (; t + 2 <= count; t += 2)
            cand_z2(c, kb, start + t, start + t + 1, o + t);
        if (t < count) o[t] = cand_z1(c, kb, start + t);
    }
    return out;
}

// ---------------------------------------------------------------------------
// exported: full-suffix window scan (one threshold test per seed cut)
// ---------------------------------------------------------------------------

py::tuple scan_complete(py::bytes key,
                        py::array_t<uint8_t, py::array::c_style |
                                                 py::array::forcecast> bits,
                        double lam) {
    std::string k = key;
    if (k.size() > 64) throw std::invalid_argument("key longer than one hash block");
    py::buffer_info bi = bits.request();
    if (bi.ndim != 1) throw std::invalid_argument("bits must be a 1-d array");
    size_t L = (size_t)bi.shape[0];
    if (L < 2) throw std::invalid_argument("need at least 2 bits to scan");
    std::vector<uint8_t> vb((const uint8_t *)bi.ptr,
                            (const uint8_t *)bi.ptr + L);

    bool found = false;
    uint64_t fi = 0;
    double fscore = 0.0, fthr = 0.0;
    int64_t best_i = -1;
    double best_margin = -std::numeric_limits<double>::infinity();
    double best_score = 0.0, best_thr = 0.0;
    uint64_t evals = 0, scanned = 0;

    {
        py::gil_scoped_release rel;
        KeyBase kb;
        key_base_init(kb, (const uint8_t *)k.data(), k.size());
        std::vector<uint8_t> pfx(8 + (L + 7) / 8);
        for (uint64_t i = 1; i + 1 <= L && !found; i++) {
            size_t plen = build_seed_prefix(pfx.data(), vb.data(), 0, i);
            Cand c;
            cand_init(c, kb, pfx.data(), plen);
            uint64_t m = L - i;
            double thr = (double)m + lam * std::sqrt((double)m);
            double s = 0.0;
            uint64_t j = i + 1;
            uint64_t zz[2];
            for (; j + 1 <= L; j += 2) {
                cand_z2(c, kb, j, j + 1, zz);
                s += score_of(zz[0], vb[j - 1]);
                s += score_of(zz[1], vb[j]);
            }
            if (j <= L) s += score_of(cand_z1(c, kb, j), vb[j - 1]);
            evals += m;
            scanned++;
            double margin = s - thr;
            if (margin > best_margin) {
                best_margin = margin;
                best_i = (int64_t)i;
                best_score = s;
                best_thr = thr;
            }
            if (s > thr) {
                found = true;
                fi = i;
                fscore = s;
                fthr = thr;
            }
        }
    }
    return py::make_tuple(found, fi, fscore, fthr, best_i, best_margin,
                          best_score, best_thr, evals, scanned);
}

// ---------------------------------------------------------------------------
// exported: anchored-window scan over (cut, window-length) pairs with a
// running-sum threshold test at every extension step
// ---------------------------------------------------------------------------

py::tuple scan_substring(py::bytes key,
                         py::array_t<uint8_t, py::array::c_style |
                                                  py::array::forcecast> bits,
                         double lam, uint64_t stride) {
    std::string k = key;
    if (k.size() > 64) throw std::invalid_argument("key longer than one hash block");
    if (stride < 1) throw std::invalid_argument("stride must be at least 1");
    py::buffer_info bi = bits.request();
    if (bi.ndim != 1) throw std::invalid_argument("bits must be a 1-d array");
    size_t L = (size_t)bi.shape[0];
    if (L < 3) throw std::invalid_argument("need at least 3 bits to scan");
    std::vector<uint8_t> vb((const uint8_t *)bi.ptr,
                            (const uint8_t *)bi.ptr + L);

    bool found = false;
    uint64_t fi = 0, fl = 0, fk = 0;
    double fscore = 0.0, fthr = 0.0;
    int64_t best_i = -1, best_l = -1, best_k = -1;
    double best_margin = -std::numeric_limits<double>::infinity();
    double best_score = 0.0, best_thr = 0.0;
    uint64_t evals = 0, scanned = 0;

    {
        py::gil_scoped_release rel;
        KeyBase kb;
        key_base_init(kb, (const uint8_t *)k.data(), k.size());
        std::vector<double> thr(L + 1);
        for (size_t n = 1; n <= L; n++)
            thr[n] = (double)n + lam * std::sqrt((double)n);
        std::vector<uint8_t> pfx(8 + (L + 7) / 8);

        for (uint64_t i = 2; i + 1 <= L && !found; i++) {
            for (uint64_t l = 1; l < i && !found; l += stride) {
                // seed window covers positions [i-l .. i], l+1 bits
                size_t plen =
                    build_seed_prefix(pfx.data(), vb.data(), i - l - 1, l + 1);
                Cand c;
                cand_init(c, kb, pfx.data(), plen);
                scanned++;
                double s = 0.0;
                uint64_t zz[2];
                uint64_t k2 = i + 1;
                for (; !found && k2 + 1 <= L; k2 += 2) {
                    cand_z2(c, kb, k2 - i, k2 + 1 - i, zz);
                    for (int half = 0; half < 2; half++) {
                        uint64_t kk = k2 + (uint64_t)half;
                        s += score_of(zz[half], vb[kk - 1]);
                        evals++;
                        uint64_t n = kk - i;
                        double margin = s - thr[n];
                        if (margin > best_margin) {
                            best_margin = margin;
                            best_i = (int64_t)i;
                            best_l = (int64_t)l;
                            best_k = (int64_t)kk;
                            best_score = s;
                            best_thr = thr[n];
                        }
                        if (s > thr[n]) {
                            found = true;
                            fi = i;
                            fl = l;
                            fk = kk;
                            fscore = s;
                            fthr = thr[n];
                            break;
                        }
                    }
                }
                if (!found && k2 <= L) {
                    s += score_of(cand_z1(c, kb, k2 - i), vb[k2 - 1]);
                    evals++;
                    uint64_t n = k2 - i;
                    double margin = s - thr[n];
                    if (margin > best_margin) {
                        best_margin = margin;
                        best_i = (int64_t)i;
                        best_l = (int64_t)l;
                        best_k = (int64_t)k2;
                        best_score = s;
                        best_thr = thr[n];
                    }
                    if (s > thr[n]) {
                        found = true;
                        fi = i;
                        fl = l;
                        fk = k2;
                        fscore = s;
                        fthr = thr[n];
                    }
                }
            }
        }
    }
    return py::make_tuple(found, fi, fl, fk, fscore, fthr, best_i, best_l,
                          best_k, best_margin, best_score, best_thr, evals,
                          scanned);
}

// ---------------------------------------------------------------------------
// reference HMAC (streaming OpenSSL) and import-time self-check
// ---------------------------------------------------------------------------

uint64_t ref_hmac_z(const std::string &key, const uint8_t *msg, size_t mlen) {
    uint8_t blk[64], dig[32];
    std::memset(blk, 0, 64);
    std::memcpy(blk, key.data(), key.size());
    for (int i = 0; i < 64; i++) blk[i] ^= 0x36;
    SHA256_CTX c;
    SHA256_Init(&c);
    SHA256_Update(&c, blk, 64);
    SHA256_Update(&c, msg, mlen);
    SHA256_Final(dig, &c);
    for (int i = 0; i < 64; i++) blk[i] ^= 0x36 ^ 0x5c;
    SHA256_Init(&c);
    SHA256_Update(&c, blk, 64);
    SHA256_Update(&c, dig, 32);
    SHA256_Final(dig, &c);
    uint64_t z = 0;
    for (int i = 0; i < 8; i++) z = (z << 8) | dig[i];
    return z;
}

void self_check() {
    const size_t seed_bits[] = {0, 1, 17, 320, 511};
    const uint64_t idxs[] = {0, 1, 255, 4096, (1ull << 32) + 7,
                             (1ull << 63) + 5};
    uint8_t key[32];
    for (int i = 0; i < 32; i++) key[i] = (uint8_t)(i * 7 + 3);
    std::string ks((const char *)key, 32);
    KeyBase kb;
    key_base_init(kb, key, 32);
    uint8_t bits[512];
    for (int i = 0; i < 512; i++) bits[i] = (uint8_t)((i * 11 + 5) % 3 == 0);
    uint8_t pfx[8 + 64];
    for (size_t nb : seed_bits) {
        size_t plen = build_seed_prefix(pfx, bits, 0, nb);
        Cand c;
        cand_init(c, kb, pfx, plen);
        uint8_t msg[8 + 64 + 8];
        std::memcpy(msg, pfx, plen);
        for (uint64_t idx : idxs) {
            store_be64(msg + plen, idx);
            uint64_t want = ref_hmac_z(ks, msg, plen + 8);
            if (cand_z1(c, kb, idx) != want)
                throw std::runtime_error("fast-path HMAC mismatch (single)");
            uint64_t pair[2];
            cand_z2(c, kb, idx, idx + 1, pair);
            store_be64(msg + plen, idx + 1);
            if (pair[0] != want ||
                pair[1] != ref_hmac_z(ks, msg, plen + 8))
                throw std::runtime_error("fast-path HMAC mismatch (pair)");
        }
    }
}

std::string engine_info() { return g_shani ? "sha-ni" : "openssl"; }

// Test hook: force a backend ("sha-ni" or "openssl"); returns the active one.
std::string set_engine(const std::string &name) {
    if (name == "sha-ni") {
        if (!cpu_has_shani())
            throw std::invalid_argument("CPU lacks the SHA extensions");
        g_shani = true;
    } else if (name == "openssl") {
        g_shani = false;
    } else {
        throw std::invalid_argument("unknown engine: " + name);
    }
    self_check();
    return engine_info();
}

}  // namespace

PYBIND11_MODULE(_fastscan, m) {
    m.doc() = "HMAC-SHA256 scoring core with midstate caching";
    g_shani = cpu_has_shani();
    self_check();
    m.def("prf_z_range", &prf_z_range, py::arg("key"), py::arg("prefix"),
          py::arg("start"), py::arg("count"),
          "64-bit PRF words for a contiguous index range under one prefix");
    m.def("scan_complete", &scan_complete, py::arg("key"), py::arg("bits"),
          py::arg("lam"),
          "Scan seed cuts; score the full suffix after each cut");
    m.def("scan_substring", &scan_substring, py::arg("key"), py::arg("bits"),
          py::arg("lam"), py::arg("stride") = 1,
          "Scan anchored seed windows and every extension length");
    m.def("engine_info", &engine_info, "Active compression backend");
    m.def("_set_engine", &set_engine, py::arg("name"),
          "Force a compression backend (test hook)");
}
