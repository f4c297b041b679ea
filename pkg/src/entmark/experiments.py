"""Monte Carlo batteries for the watermarking schemes.

Each operation runs a batch of independent trials from a seeded config
and reports a TrialOutcome: a rate, its Wilson bounds, per-trial margins,
and enough detail to audit the statistical procedure used.  Assertions
about what the numbers must satisfy live in the callers (tests), except
where an operation's contract explicitly includes the check.

Confidence machinery: rates get Wilson score bounds at z = 2.326348
(each endpoint is a one-sided 99% limit); direct frequency comparisons
use 4-sigma bands; chi-square tests use no continuity correction and a
significance floor of p = 0.001.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import chi2_contingency

from .codec import (
    BinaryModel,
    binarize,
    build_codec,
    decode_bits,
    sample_bit_response,
)
from .complete import detect_complete, wat_complete
from .models import (
    SyntheticModelSpec,
    TokenModel,
    _validate_dist,
    make_synthetic_model,
    sample_response,
)
from .prf import SecretKey, setup
from .scoring import exp_tail_bounds
from .simple import detect_simple, wat_simple
from .substring import detect_substring, wat_substring

WILSON_Z99 = 2.326348  # one-sided 99% normal quantile
P_FLOOR = 0.001
SIGMA_BAND = 4.0


class RegimeError(Exception):
    """The config's length arithmetic can never meet the entropy bound."""


def wilson_interval(successes: int, trials: int,
                    z: float = WILSON_Z99) -> Tuple[float, float]:
    """Wilson score bounds; each endpoint is a one-sided 99% limit."""
    if trials < 1:
        raise ValueError("trials must be at least 1")
    if not 0 <= successes <= trials:
        raise ValueError("successes out of range")
    p = successes / trials
    denom = 1.0 + z * z / trials
    center = p + z * z / (2 * trials)
    half = z * math.sqrt(p * (1 - p) / trials + z * z / (4 * trials * trials))
    # the score interval contains the MLE by construction; clamping only
    # absorbs sqrt rounding at rates 0 and 1
    return (min(p, max(0.0, (center - half) / denom)),
            max(p, min(1.0, (center + half) / denom)))


@dataclass
class TrialConfig:
    scheme_id: str
    lam: int
    trials: int
    seed: int
    model: Optional[SyntheticModelSpec] = None
    text_bits: Optional[int] = None        # soundness: random-text length
    window: Optional[Tuple[int, int]] = None  # completeness: 1-based inclusive slice
    detector_lam: Optional[float] = None
    stride: int = 1
    b: Optional[int] = None                # simple-scheme tag width
    fresh_keys: bool = True
    battery: str = "positions"             # undetectability battery selector
    samples_per_oracle: int = 24           # toy distinguisher
    max_candidates: Optional[int] = None
    plain_oracles: bool = False            # toy: both oracles are the plain model
    min_successor_bits: Optional[int] = None  # substring completeness regime rule

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trial count must be at least 1")

    def to_json(self) -> str:
        doc = asdict(self)
        doc["model"] = json.loads(self.model.to_json()) if self.model else None
        return json.dumps(doc, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "TrialConfig":
        doc = json.loads(text)
        model = doc.pop("model", None)
        if model is not None:
            model = SyntheticModelSpec.from_json(json.dumps(model))
        window = doc.pop("window", None)
        return cls(model=model,
                   window=tuple(window) if window is not None else None, **doc)


@dataclass
class TrialOutcome:
    name: str
    rate: float
    wilson: Tuple[float, float]
    trials: int          # units the rate is taken over (see each op)
    successes: int
    margins: List[float]
    wall_time: float
    procedure: str
    details: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        lo, hi = self.wilson
        if not (lo <= self.rate <= hi or math.isnan(self.rate)):
            raise ValueError("rate must sit inside its Wilson interval")

    def to_json(self) -> str:
        doc = asdict(self)
        return json.dumps(doc, indent=2, default=float) + "\n"


def save_margins_csv(outcome: TrialOutcome, path) -> None:
    with open(path, "w") as fh:
        fh.write("trial,margin\n")
        for n, m in enumerate(outcome.margins):
            fh.write(f"{n},{m}\n")


def _child_rngs(seed: int, n: int) -> List[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def _as_binary(model: TokenModel) -> BinaryModel:
    if getattr(model, "pure_bit_stream", False) and model.alphabet_size == 3:
        return binarize(model)
    return binarize(model, build_codec(model.alphabet_size, model.done_id,
                                       "fixed_width"))


def _outcome(name: str, successes: int, trials: int, margins: List[float],
             t0: float, procedure: str, details: Dict) -> TrialOutcome:
    rate = successes / trials if trials else 0.0
    wilson = wilson_interval(successes, trials) if trials else (0.0, 1.0)
    return TrialOutcome(name=name, rate=rate, wilson=wilson, trials=trials,
                        successes=successes, margins=margins,
                        wall_time=time.perf_counter() - t0,
                        procedure=procedure, details=details)


def run_soundness(cfg: TrialConfig) -> TrialOutcome:
    """Detection rate on text generated independently of any key.

    A fresh key is drawn per trial.  Texts are uniform random bits
    (complete/substring) or uniform random token strings (simple) unless
    a model spec is given, in which case plain samples are used.
    """
    t0 = time.perf_counter()
    lam = cfg.detector_lam if cfg.detector_lam is not None else cfg.lam
    model = make_synthetic_model(cfg.model) if cfg.model else None
    detections = 0
    margins: List[float] = []
    for rng in _child_rngs(cfg.seed, cfg.trials):
        sk = setup(cfg.lam, cfg.scheme_id, rng, b=cfg.b)
        if cfg.scheme_id == "simple":
            if model is not None:
                text = sample_response(model, b"", rng).tokens
            else:
                text = list(rng.integers(0, 2, size=cfg.text_bits or 32)) + [2]
            hit = detect_simple(sk, text, alphabet_size=3)
            margins.append(1.0 if hit else 0.0)
        else:
            if model is not None:
                bits = np.array(sample_bit_response(_as_binary(model), b"", rng).bits,
                                dtype=np.uint8)
            else:
                bits = rng.integers(0, 2, size=cfg.text_bits, dtype=np.uint8)
            detect = detect_complete if cfg.scheme_id == "complete" else detect_substring
            report = detect(sk, bits, lam=lam)
            hit = report.verdict
            margins.append(report.margin if report.margin is not None
                           else float("nan"))
        detections += bool(hit)
    return _outcome("soundness", detections, cfg.trials, margins, t0,
                    "wilson-99 one-sided upper bound on the detection rate",
                    {"scheme": cfg.scheme_id, "lam": lam, "b": cfg.b,
                     "text_bits": cfg.text_bits})


def _complete_regime_floor(lam: float) -> float:
    return (4.0 / math.log(2.0)) * lam


def run_completeness(cfg: TrialConfig) -> TrialOutcome:
    """Detection rate among watermarked responses that meet the entropy
    bound; responses below the bound leave the denominator.

    Complete scheme: a response of L bits qualifies when its ledger
    entropy reaches (4/ln2)*lam*sqrt(L).  Substring scheme: the detection
    window must contain a finished seed block plus enough of the block it
    seeds for the score to clear its threshold (#successor bits, default
    2*(lam/ln2)^2).  A config whose lengths can never qualify raises
    RegimeError; a model that merely never reaches the bound yields a
    vacuous pass plus a warning in details.
    """
    t0 = time.perf_counter()
    if cfg.model is None:
        raise ValueError("completeness needs a model spec")
    model = make_synthetic_model(cfg.model)
    bmodel = _as_binary(model)
    lam = float(cfg.lam)
    if cfg.scheme_id == "complete":
        if bmodel.max_bits < _complete_regime_floor(lam) ** 2:
            raise RegimeError("model too short to ever meet (4/ln2)*lam*sqrt(L)")
    elif cfg.scheme_id == "substring":
        first_block = ((2.0 / math.log(2.0)) * lam) ** 2
        if bmodel.max_bits < first_block + 1:
            raise RegimeError("model too short to ever close a seed block")
    else:
        raise ValueError("completeness covers the complete and substring schemes")

    min_successor = (cfg.min_successor_bits if cfg.min_successor_bits is not None
                     else int(math.ceil(2.0 * (lam / math.log(2.0)) ** 2)))
    qualifying = 0
    detections = 0
    seed_matches = 0
    margins: List[float] = []
    entropies: List[float] = []
    for rng in _child_rngs(cfg.seed, cfg.trials):
        sk = setup(cfg.lam, cfg.scheme_id, rng)
        if cfg.scheme_id == "complete":
            bits, ledger = wat_complete(sk, bmodel, b"", rng)
            entropies.append(ledger.total_entropy)
            bound = _complete_regime_floor(lam) * math.sqrt(max(bits.size, 1))
            if ledger.total_entropy < bound:
                continue
            qualifying += 1
            report = detect_complete(sk, bits,
                                     lam=cfg.detector_lam,
                                     max_candidates=cfg.max_candidates)
            if report.verdict:
                detections += 1
                if (report.best_candidate is not None and
                        report.best_candidate.seed_end == ledger.seed_end_index):
                    seed_matches += 1
        else:
            bits, ledger = wat_substring(sk, bmodel, b"", rng)
            entropies.append(ledger.total_entropy)
            a, z = cfg.window if cfg.window else (1, bits.size)
            if not 1 <= a <= z <= bits.size:
                continue
            contained = False
            for n, (s, e) in enumerate(ledger.blocks):
                if s < a or e > z:
                    continue
                succ_end = (ledger.blocks[n + 1][1]
                            if n + 1 < len(ledger.blocks) else bits.size)
                if min(succ_end, z) - e >= min_successor:
                    contained = True
                    break
            if not contained:
                continue
            qualifying += 1
            report = detect_substring(sk, bits[a - 1:z],
                                      lam=cfg.detector_lam, stride=cfg.stride)
            detections += bool(report.verdict)
        margins.append(report.margin if report.margin is not None
                       else float("nan"))
    details: Dict[str, object] = {
        "scheme": cfg.scheme_id, "lam": cfg.lam,
        "qualifying": qualifying, "generated": cfg.trials,
        "mean_entropy_bits": float(np.mean(entropies)) if entropies else 0.0,
    }
    if cfg.scheme_id == "complete" and detections:
        details["seed_index_match_rate"] = seed_matches / detections
    if qualifying == 0:
        details["regime_warning"] = ("no response met the entropy bound; "
                                     "rate is vacuous")
    return _outcome("completeness", detections, qualifying, margins, t0,
                    "wilson-99 rate over qualifying responses", details)


def _plain_tokens(model: TokenModel, rng: np.random.Generator) -> List[int]:
    return sample_response(model, b"", rng).tokens


def _wat_tokens_and_bits(sk: SecretKey, bmodel: BinaryModel, scheme_id: str,
                         rng: np.random.Generator) -> Tuple[List[int], np.ndarray]:
    wat = wat_complete if scheme_id == "complete" else wat_substring
    bits, _ledger = wat(sk, bmodel, b"", rng)
    if bmodel.codec is None:
        tokens = [int(x) for x in bits]
        if len(tokens) < bmodel.token_model.max_len:
            tokens.append(bmodel.token_model.done_id)
    else:
        tokens, _rem = decode_bits([int(x) for x in bits], bmodel.codec)
    return tokens, bits


def _position_pvalues(wm: np.ndarray, plain: np.ndarray) -> List[float]:
    """Per-position chi-square (no continuity correction) between arms."""
    pvals: List[float] = []
    for j in range(wm.shape[1]):
        values = np.union1d(np.unique(wm[:, j]), np.unique(plain[:, j]))
        table = np.array([[int(np.sum(wm[:, j] == v)) for v in values],
                          [int(np.sum(plain[:, j] == v)) for v in values]])
        table = table[:, table.sum(axis=0) > 0]
        if table.shape[1] < 2:
            pvals.append(1.0)
            continue
        pvals.append(float(chi2_contingency(table, correction=False)[1]))
    return pvals


def _exact_outcome_probs(model: TokenModel) -> Dict[Tuple[int, ...], float]:
    """Exhaustive token-level outcome distribution (small models only)."""
    out: Dict[Tuple[int, ...], float] = {}
    stack: List[Tuple[List[int], float]] = [([], 1.0)]
    while stack:
        prefix, mass = stack.pop()
        if prefix and prefix[-1] == model.done_id:
            out[tuple(prefix)] = out.get(tuple(prefix), 0.0) + mass
            continue
        if len(prefix) >= model.max_len:
            out[tuple(prefix)] = out.get(tuple(prefix), 0.0) + mass
            continue
        dist = _validate_dist(model.next_dist(b"", prefix), model.alphabet_size)
        for t, p in enumerate(dist):
            if p > 0.0:
                stack.append((prefix + [t], mass * float(p)))
    if len(out) > 4096:
        raise ValueError("model too large for exhaustive enumeration")
    return out


def run_undetectability(cfg: TrialConfig) -> TrialOutcome:
    """Distributional comparison of watermarked output against the model.

    battery="positions": cfg.trials responses per arm, per-position
    chi-square p-values (margins = p-values; trials = positions tested;
    successes = positions with p > 0.001).
    battery="histogram": exhaustive outcome histogram of watermarked
    samples against exact model probabilities; successes = outcomes
    inside the 4-sigma multinomial band.
    battery="done_prob": frequency of the immediate-done outcome among
    watermarked samples, for mixture models.

    fresh_keys=False reuses one key across responses.  That mode is
    reported, never asserted: with a single key the per-position
    conditional marginals carry a genuine 2^(-lam/2)-scale bias, which is
    exactly the lambda-asymptotic the fresh-key mode sidesteps.
    """
    t0 = time.perf_counter()
    if cfg.model is None:
        raise ValueError("undetectability needs a model spec")
    model = make_synthetic_model(cfg.model)
    bmodel = _as_binary(model)
    rngs = _child_rngs(cfg.seed, cfg.trials + 1)
    key_rng = rngs[-1]
    fixed_key = None if cfg.fresh_keys else setup(cfg.lam, cfg.scheme_id, key_rng)

    wm_tokens: List[List[int]] = []
    for rng in rngs[:cfg.trials]:
        sk = fixed_key or setup(cfg.lam, cfg.scheme_id, rng)
        tokens, _bits = _wat_tokens_and_bits(sk, bmodel, cfg.scheme_id, rng)
        wm_tokens.append(tokens)

    details: Dict[str, object] = {"battery": cfg.battery,
                                  "fresh_keys": cfg.fresh_keys,
                                  "responses_per_arm": cfg.trials}
    if not cfg.fresh_keys:
        details["note"] = ("single-key mode: report-only (per-position "
                          "bias of order 2^(-lam/2) is expected)")

    if cfg.battery == "positions":
        plain = [_plain_tokens(model, rng) for rng in rngs[:cfg.trials]]
        width = min(min(map(len, wm_tokens)), min(map(len, plain)))
        wm_arr = np.array([t[:width] for t in wm_tokens], dtype=np.int64)
        pl_arr = np.array([t[:width] for t in plain], dtype=np.int64)
        pvals = _position_pvalues(wm_arr, pl_arr)
        ok = sum(p > P_FLOOR for p in pvals)
        details["min_p"] = min(pvals)
        return _outcome("undetectability", ok, len(pvals), pvals, t0,
                        "per-position chi-square, no continuity correction, "
                        "floor p=0.001", details)

    if cfg.battery == "histogram":
        probs = _exact_outcome_probs(model)
        outcomes = sorted(probs)
        index = {o: n for n, o in enumerate(outcomes)}
        counts = np.zeros(len(outcomes))
        for t in wm_tokens:
            counts[index[tuple(t)]] += 1
        n = cfg.trials
        p = np.array([probs[o] for o in outcomes])
        sigma = np.sqrt(n * p * (1 - p))
        dev = np.abs(counts - n * p) / np.where(sigma > 0, sigma, 1.0)
        ok = int(np.sum(dev <= SIGMA_BAND))
        details["max_dev_sigmas"] = float(dev.max())
        details["outcomes"] = len(outcomes)
        return _outcome("undetectability", ok, len(outcomes),
                        [float(d) for d in dev], t0,
                        "per-outcome 4-sigma multinomial band", details)

    if cfg.battery == "done_prob":
        hits = sum(t[0] == model.done_id for t in wm_tokens)
        details["done_frequency"] = hits / cfg.trials
        return _outcome("undetectability", hits, cfg.trials, [], t0,
                        "immediate-done frequency, 4-sigma band", details)

    raise ValueError(f"unknown battery: {cfg.battery!r}")


def run_mixture_necessity(eps: float, b: int, lam: int, trials: int = 10_000,
                          seed: int = 0) -> TrialOutcome:
    """Detected fraction of the complete scheme's own outputs on the
    mixture model (done with probability 1-eps, else b/eps uniform bits).

    Asserts rate <= eps + 4 sigma: most responses are the bare done
    token, carry no entropy, and cannot be watermarked, no matter how
    long the high-entropy branch is.
    """
    if not 0.0 <= eps <= 1.0:
        raise ValueError("eps must be a probability")
    t0 = time.perf_counter()
    block_len = max(1, round(b / eps)) if eps > 0 else 1
    model_spec = SyntheticModelSpec("mixture", {"eps": eps, "block_len": block_len})
    bmodel = _as_binary(make_synthetic_model(model_spec))
    detections = 0
    branch_taken = 0
    branch_detected = 0
    margins: List[float] = []
    for rng in _child_rngs(seed, trials):
        sk = setup(lam, "complete", rng)
        bits, ledger = wat_complete(sk, bmodel, b"", rng)
        report = detect_complete(sk, bits)
        margins.append(report.margin if report.margin is not None
                       else float("nan"))
        if bits.size > 2:
            branch_taken += 1
            branch_detected += bool(report.verdict)
        detections += bool(report.verdict)
    rate = detections / trials
    band = SIGMA_BAND * math.sqrt(eps * (1 - eps) / trials)
    if rate > eps + band:
        raise AssertionError(
            f"detected fraction {rate:.4f} exceeds eps + 4 sigma = {eps + band:.4f}")
    details = {"eps": eps, "b": b, "lam": lam, "block_len": block_len,
               "bound": eps + band, "branch_taken": branch_taken,
               "branch_detection_rate":
                   branch_detected / branch_taken if branch_taken else 0.0}
    return _outcome("mixture_necessity", detections, trials, margins, t0,
                    "rate <= eps + 4-sigma band", details)


def _toy_keys(n_keys: int, lam: int, scheme_id: str) -> List[SecretKey]:
    keys = []
    for k in range(n_keys):
        material = hashlib.sha256(b"toy-key-space" + k.to_bytes(4, "big")).digest()
        keys.append(SecretKey(key_bytes=material, lam=lam, scheme_id=scheme_id))
    return keys


def _separating_key(keys: Sequence[SecretKey], s1: List[np.ndarray],
                    s2: List[np.ndarray], cfg: TrialConfig) -> Optional[int]:
    """Index of the sample set (1 or 2) some key marks as watermarked:
    detected fraction >= 3/4 there and <= 1/4 in the other set.
    None when no key separates in either orientation.

    Early abandonment only skips work whose outcome is already decided,
    so the accept/reject rule is evaluated exactly.
    """
    m = len(s1)
    hi_needed = math.ceil(0.75 * m)
    lo_allowed = math.floor(0.25 * m)
    cache: Dict[Tuple[int, int, int], bool] = {}

    def hit(k: int, arm: int, idx: int) -> bool:
        key = (k, arm, idx)
        if key not in cache:
            bits = (s1, s2)[arm - 1][idx]
            cache[key] = detect_complete(keys[k], bits,
                                         max_candidates=cfg.max_candidates).verdict
        return cache[key]

    for chal, ref in ((2, 1), (1, 2)):
        for k in range(len(keys)):
            misses = 0
            hits = 0
            for idx in range(m):
                if hit(k, chal, idx):
                    hits += 1
                else:
                    misses += 1
                    if misses > m - hi_needed:
                        break
            if hits < hi_needed:
                continue
            ref_hits = 0
            for idx in range(m):
                if hit(k, ref, idx):
                    ref_hits += 1
                    if ref_hits > lo_allowed:
                        break
            if ref_hits <= lo_allowed:
                return chal
    return None


def toy_distinguisher(key_bits: int, cfg: TrialConfig) -> float:
    """Exhaustive-key distinguisher advantage at a truncated key space.

    Each game hides a watermarked-sample set behind a coin flip, and the
    adversary enumerates all 2^key_bits keys looking for one that
    separates the two sets.  Games with no separating key contribute 0
    (the random fallback guess integrated out), so the returned value is
    an exact-expectation estimate of Pr[correct] - Pr[incorrect].
    """
    if not 1 <= key_bits <= 14:
        raise ValueError("key_bits must be in [1, 14]")
    if cfg.model is None:
        raise ValueError("toy distinguisher needs a model spec")
    if cfg.scheme_id != "complete":
        raise ValueError("the toy key-space game is wired to the complete scheme")
    keys = _toy_keys(1 << key_bits, cfg.lam, "complete")
    bmodel = _as_binary(make_synthetic_model(cfg.model))
    m = cfg.samples_per_oracle
    score = 0
    for rng in _child_rngs(cfg.seed, cfg.trials):
        k_star = int(rng.integers(len(keys)))
        wm_arm = int(rng.integers(2)) + 1

        def plain_draw() -> np.ndarray:
            return np.array(sample_bit_response(bmodel, b"", rng).bits,
                            dtype=np.uint8)

        def wm_draw() -> np.ndarray:
            if cfg.plain_oracles:
                return plain_draw()
            return wat_complete(keys[k_star], bmodel, b"", rng)[0]

        s1 = [wm_draw() if wm_arm == 1 else plain_draw() for _ in range(m)]
        s2 = [wm_draw() if wm_arm == 2 else plain_draw() for _ in range(m)]
        guess = _separating_key(keys, s1, s2, cfg)
        if guess is not None:
            score += 1 if guess == wm_arm else -1
    return score / cfg.trials


def run_concentration(n: int, tau: float, trials: int,
                      seed: int = 0) -> TrialOutcome:
    """Monte Carlo check of the sum-of-exponentials tail bounds.

    Asserts the empirical tail frequencies stay within 4 sigma above the
    analytic bounds (upper: (4/5)^sqrt(tau), lower: e^(-tau/2)).
    """
    if trials < 1000:
        raise ValueError("need at least 10^3 trials")
    t0 = time.perf_counter()
    samples = np.random.default_rng(seed).gamma(shape=n, scale=1.0, size=trials)
    spread = math.sqrt(tau * n)
    upper_emp = float(np.mean(samples > n + spread))
    lower_emp = float(np.mean(samples < n - spread))
    bounds = exp_tail_bounds(n, tau)
    upper_bound, lower_bound = bounds.upper, bounds.lower
    for emp, bound, side in ((upper_emp, upper_bound, "upper"),
                             (lower_emp, lower_bound, "lower")):
        band = SIGMA_BAND * math.sqrt(bound * (1 - bound) / trials)
        if emp > bound + band:
            raise AssertionError(
                f"{side} tail {emp:.3g} exceeds bound {bound:.3g} + 4 sigma")
    details = {"n": n, "tau": tau, "upper_empirical": upper_emp,
               "upper_bound": upper_bound, "lower_empirical": lower_emp,
               "lower_bound": lower_bound}
    hits = int(round(upper_emp * trials))
    return _outcome("concentration", hits, trials, [], t0,
                    "empirical tails <= analytic bounds + 4 sigma", details)
