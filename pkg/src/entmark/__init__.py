"""Entropy-seeded watermarking for token-generating models.

Three schemes share one keyed scoring core: "simple" resamples whole
responses until a short tag vanishes, "complete" seeds a PRF once enough
entropy has streamed past and biases every later bit, and "substring"
re-seeds block by block so any long enough window detects on its own.
Detection needs only the key and the text.  Under a fresh key the output
distribution is the model's own, which is the point: the mark is
invisible without the key.
"""

from .attack import (
    AttackStats,
    ConditionedModel,
    ImpossiblePrefixError,
    PrefixOracle,
    WatermarkOracle,
    prefix_extend,
    resample_attack,
)
from .codec import (
    BinaryModel,
    BitStream,
    TokenCodec,
    binarize,
    build_codec,
    decode_bits,
    encode_tokens,
    sample_bit_response,
)
from .complete import (
    CandidateWindow,
    DetectionReport,
    EntropyLedger,
    detect_complete,
    wat_complete,
)
from .experiments import (
    TrialConfig,
    TrialOutcome,
    run_completeness,
    run_concentration,
    run_mixture_necessity,
    run_soundness,
    run_undetectability,
    toy_distinguisher,
    wilson_interval,
)
from .models import (
    BernoulliModel,
    DeterministicModel,
    MixtureModel,
    ModelContractError,
    NgramModel,
    Response,
    SyntheticModelSpec,
    TokenModel,
    UniformModel,
    empirical_entropy,
    make_synthetic_model,
    sample_response,
    train_ngram,
)
from .prf import (
    KeyedUnitSource,
    OracleUnitSource,
    SecretKey,
    UnitReal,
    prf_tag,
    prf_unit,
    prf_unit_words,
    setup,
)
from .scoring import detection_threshold, exp_tail_bounds, score_words
from .simple import AttemptBudgetError, detect_simple, wat_simple
from .substring import BlockLedger, detect_substring, wat_substring

__version__ = "0.1.0"

__all__ = [
    "AttackStats",
    "AttemptBudgetError",
    "BernoulliModel",
    "BinaryModel",
    "BitStream",
    "BlockLedger",
    "CandidateWindow",
    "ConditionedModel",
    "DetectionReport",
    "DeterministicModel",
    "EntropyLedger",
    "ImpossiblePrefixError",
    "KeyedUnitSource",
    "MixtureModel",
    "ModelContractError",
    "NgramModel",
    "OracleUnitSource",
    "PrefixOracle",
    "Response",
    "SecretKey",
    "SyntheticModelSpec",
    "TokenCodec",
    "TokenModel",
    "TrialConfig",
    "TrialOutcome",
    "UniformModel",
    "UnitReal",
    "WatermarkOracle",
    "binarize",
    "build_codec",
    "decode_bits",
    "detect_complete",
    "detect_simple",
    "detect_substring",
    "detection_threshold",
    "empirical_entropy",
    "encode_tokens",
    "exp_tail_bounds",
    "make_synthetic_model",
    "prefix_extend",
    "prf_tag",
    "prf_unit",
    "prf_unit_words",
    "resample_attack",
    "run_completeness",
    "run_concentration",
    "run_mixture_necessity",
    "run_soundness",
    "run_undetectability",
    "sample_bit_response",
    "sample_response",
    "score_words",
    "setup",
    "toy_distinguisher",
    "train_ngram",
    "wat_complete",
    "wat_simple",
    "wat_substring",
    "wilson_interval",
]
