"""Command-line front end.

Exit codes are a scripting contract: 0 means detected (or, for
non-detect commands, success), 1 means not detected, 2 means any error.
Machine-readable JSON goes to stdout; human summaries go to stderr.
ENTMARK_SEED overrides --seed everywhere, so CI can pin runs without
touching command lines.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from importlib import resources
from typing import List, Optional, Tuple

import numpy as np

from .attack import WatermarkOracle, resample_attack
from .codec import BinaryModel, TokenCodec, binarize, decode_bits, encode_tokens
from .complete import detect_complete, wat_complete
from .experiments import (
    TrialConfig,
    run_completeness,
    run_concentration,
    run_mixture_necessity,
    run_soundness,
    run_undetectability,
    save_margins_csv,
    toy_distinguisher,
)
from .models import (
    ImpossibleResponseError,
    ModelContractError,
    SyntheticModelSpec,
    TokenModel,
    load_ngram_table,
    make_synthetic_model,
    train_ngram,
    save_ngram_table,
)
from .prf import SecretKey, setup
from .simple import detect_simple, wat_simple
from .substring import detect_substring, wat_substring


class CliError(Exception):
    """User-facing error; message printed to stderr, exit code 2."""


def _say(msg: str) -> None:
    print(msg, file=sys.stderr)


def _emit(doc) -> None:
    print(json.dumps(doc, indent=2, default=float))


def _resolve_seed(flag_value: Optional[int]) -> Optional[int]:
    env = os.environ.get("ENTMARK_SEED")
    if env:
        try:
            return int(env)
        except ValueError as exc:
            raise CliError(f"ENTMARK_SEED is not an integer: {env!r}") from exc
    return flag_value


def _rng(seed: Optional[int]) -> np.random.Generator:
    return np.random.default_rng(seed)


def _parse_prompt(text: str) -> bytes:
    if text.startswith("@"):
        path = text[1:]
        if not os.path.exists(path):
            raise CliError(f"prompt file not found: {path}")
        with open(path, "rb") as fh:
            return fh.read()
    return text.encode("utf-8")


def _load_key(path: str) -> SecretKey:
    if not os.path.exists(path):
        raise CliError(f"key file not found: {path}")
    with open(path) as fh:
        return SecretKey.from_json(fh.read())


def _load_codec(path: str) -> TokenCodec:
    if not os.path.exists(path):
        raise CliError(f"codec file not found: {path}")
    with open(path) as fh:
        return TokenCodec.from_json(fh.read())


def _load_model(path: str) -> TokenModel:
    if not os.path.exists(path):
        raise CliError(f"model spec not found: {path}")
    with open(path) as fh:
        doc = json.load(fh)
    table_file = doc.pop("table_file", None)
    spec = SyntheticModelSpec.from_json(json.dumps(doc))
    if spec.kind == "ngram":
        if table_file is None:
            raise CliError("ngram model spec needs a table_file entry")
        table_path = os.path.join(os.path.dirname(path) or ".", table_file)
        if not os.path.exists(table_path):
            raise CliError(f"ngram table not found: {table_path}")
        order, alphabet_size, table = load_ngram_table(table_path)
        spec.params.setdefault("order", order)
        spec.params.setdefault("alphabet_size", alphabet_size)
        spec.params["table"] = table
    return make_synthetic_model(spec)


def _binarize_or_die(model: TokenModel, codec: Optional[TokenCodec]) -> BinaryModel:
    try:
        return binarize(model, codec)
    except ValueError as exc:
        raise CliError(str(exc)) from exc


def _tokens_from_bits(bits, bmodel: BinaryModel) -> Tuple[List[int], bool]:
    """Decode generated bits to token ids plus a truncation flag."""
    if bmodel.codec is None:
        tokens = [int(x) for x in bits]
        if len(tokens) < bmodel.token_model.max_len:
            return tokens + [bmodel.token_model.done_id], False
        return tokens, True
    tokens, remainder = decode_bits([int(x) for x in bits], bmodel.codec)
    done = bmodel.token_model.done_id
    truncated = bool(remainder) or not tokens or tokens[-1] != done
    return tokens, truncated


def _bits_from_tokens(tokens: List[int], codec: Optional[TokenCodec],
                      done_id: int) -> np.ndarray:
    if codec is not None:
        return np.array(encode_tokens(tokens, codec), dtype=np.uint8)
    body = tokens[:-1] if tokens and tokens[-1] == done_id else list(tokens)
    if any(t not in (0, 1) for t in body):
        raise CliError("token ids without a codec must be bits "
                       "(optionally ending in the done token)")
    return np.array(body, dtype=np.uint8)


def cmd_keygen(args) -> int:
    if os.path.exists(args.out) and not args.force:
        raise CliError(f"{args.out} exists; pass --force to overwrite")
    seed = _resolve_seed(args.seed)
    sk = setup(args.lam, args.scheme,
               _rng(seed) if seed is not None else None, b=args.b)
    with open(args.out, "w") as fh:
        fh.write(sk.to_json())
    _say(f"wrote {args.scheme} key (lambda={args.lam}) to {args.out}")
    _emit({"fingerprint": sk.fingerprint(), "scheme": sk.scheme_id,
           "lambda": sk.lam, "b": sk.b, "out": args.out})
    return 0


def _generate_payload(sk: SecretKey, model: TokenModel,
                      codec: Optional[TokenCodec], prompt: bytes,
                      rng: np.random.Generator, codec_ref: Optional[str]):
    if sk.scheme_id == "simple":
        resp, stats = wat_simple(sk, model, prompt, rng)
        return {
            "scheme": "simple",
            "codec_ref": codec_ref,
            "alphabet_size": model.alphabet_size,
            "token_ids": [int(t) for t in resp.tokens],
            "truncated": not resp.ended(model),
            "entropy_bits": resp.entropy_bits,
            "ledger": {"model_calls": stats.model_calls,
                       "watermark_branch": stats.watermark_branch_taken},
        }
    bmodel = _binarize_or_die(model, codec)
    if sk.scheme_id == "complete":
        bits, ledger = wat_complete(sk, bmodel, prompt, rng)
        summary = {"seed_end_index": ledger.seed_end_index,
                   "seed_entropy_bits": ledger.H,
                   "total_entropy_bits": ledger.total_entropy}
    else:
        bits, ledger = wat_substring(sk, bmodel, prompt, rng)
        summary = {"blocks": [list(b) for b in ledger.blocks],
                   "block_entropies": ledger.block_entropies,
                   "total_entropy_bits": ledger.total_entropy}
    tokens, truncated = _tokens_from_bits(bits, bmodel)
    return {
        "scheme": sk.scheme_id,
        "codec_ref": codec_ref,
        "token_ids": tokens,
        "truncated": truncated,
        "entropy_bits": summary["total_entropy_bits"],
        "ledger": summary,
    }


def cmd_generate(args) -> int:
    sk = _load_key(args.key)
    model = _load_model(args.model)
    codec = _load_codec(args.codec) if args.codec else None
    prompt = _parse_prompt(args.prompt)
    rng = _rng(_resolve_seed(args.seed))
    payload = _generate_payload(sk, model, codec, prompt, rng, args.codec)
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(payload, fh, indent=2, default=float)
            fh.write("\n")
        _say(f"wrote {len(payload['token_ids'])} tokens to {args.out}")
    _emit(payload)
    return 0


def _read_detect_input(path: str) -> Tuple[Optional[dict], Optional[List[int]]]:
    """Returns (interchange doc, None) or (None, raw bits)."""
    if path == "-":
        text = sys.stdin.read()
    else:
        if not os.path.exists(path):
            raise CliError(f"input file not found: {path}")
        with open(path) as fh:
            text = fh.read()
    stripped = text.strip()
    if not stripped:
        raise CliError("input is empty")
    try:
        doc = json.loads(stripped)
    except json.JSONDecodeError:
        compact = stripped.replace(" ", "").replace("\n", "")
        if compact and set(compact) <= {"0", "1"}:
            return None, [int(c) for c in compact]
        raise CliError("input is neither interchange JSON nor a 0/1 bit string")
    if not isinstance(doc, dict) or "token_ids" not in doc:
        raise CliError("interchange JSON must carry a token_ids array")
    return doc, None


def cmd_detect(args) -> int:
    sk = _load_key(args.key)
    doc, raw_bits = _read_detect_input(getattr(args, "in"))
    codec = None
    if args.codec:
        codec = _load_codec(args.codec)
    elif doc is not None and doc.get("codec_ref"):
        codec = _load_codec(doc["codec_ref"])

    if doc is not None:
        tokens = [int(t) for t in doc["token_ids"]]
        if not tokens:
            raise CliError("interchange token_ids is empty")
    else:
        tokens = list(raw_bits)

    if sk.scheme_id == "simple":
        alphabet = (doc.get("alphabet_size") if doc is not None else None) \
            or (codec.alphabet_size if codec is not None else 3)
        seq = tokens if doc is not None else tokens + [alphabet - 1]
        verdict = detect_simple(sk, seq, alphabet_size=alphabet)
        report = {"scheme": "simple", "verdict": bool(verdict)}
        margin_note = ""
    else:
        done_id = codec.done_id if codec is not None else 2
        bits = _bits_from_tokens(tokens, codec, done_id) if doc is not None \
            else np.array(tokens, dtype=np.uint8)
        if bits.size == 0:
            raise CliError("no bits to scan after stripping the done token")
        if codec is None and np.any(bits > 1):
            raise CliError("bit input must be 0/1")
        if sk.scheme_id == "complete":
            rep = detect_complete(sk, bits)
        else:
            rep = detect_substring(sk, bits, stride=args.stride)
        report = {"scheme": sk.scheme_id, **rep.as_dict()}
        margin_note = (f" (margin {report['margin']:.3f})"
                       if report["margin"] is not None else "")

    _emit(report)
    _say(f"verdict: {report['verdict']}{margin_note}")
    return 0 if report["verdict"] else 1


def cmd_attack(args) -> int:
    with open(args.oracle) as fh:
        doc = json.load(fh)
    for field in ("key", "model"):
        if field not in doc:
            raise CliError(f"oracle config is missing {field!r}")
    base = os.path.dirname(args.oracle) or "."
    sk = _load_key(os.path.join(base, doc["key"]))
    model = _load_model(os.path.join(base, doc["model"]))
    codec = (_load_codec(os.path.join(base, doc["codec"]))
             if doc.get("codec") else None)
    prompt = _parse_prompt(args.prompt)
    rng = _rng(_resolve_seed(args.seed))
    oracle = WatermarkOracle(sk, model, rng, codec=codec,
                             replay_ledger=bool(doc.get("replay_ledger", False)))
    tokens, stats = resample_attack(oracle, prompt, args.max_len)
    payload = {
        "scheme": sk.scheme_id,
        "codec_ref": doc.get("codec"),
        "token_ids": tokens,
        "truncated": not (tokens and tokens[-1] == model.done_id),
        "stats": {"queries": stats.queries, "output_length": stats.output_length},
    }
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(payload, fh, indent=2)
            fh.write("\n")
        _say(f"wrote attacked response to {args.out}")
    _emit(payload)
    return 0


def _experiment_config(path: str) -> dict:
    if path.startswith("preset:"):
        name = path.split(":", 1)[1]
        ref = resources.files("entmark").joinpath(f"presets/{name}.json")
        if not ref.is_file():
            raise CliError(f"no such preset: {name}")
        return json.loads(ref.read_text())
    if not os.path.exists(path):
        raise CliError(f"experiment config not found: {path}")
    with open(path) as fh:
        return json.load(fh)


def cmd_experiment(args) -> int:
    doc = _experiment_config(args.config)
    op = doc.get("op")
    seed_override = _resolve_seed(None)

    def cfg_from(block: dict) -> TrialConfig:
        cfg = TrialConfig.from_json(json.dumps(block))
        if seed_override is not None:
            cfg.seed = seed_override
        return cfg

    if op in ("soundness", "completeness", "undetectability"):
        runner = {"soundness": run_soundness,
                  "completeness": run_completeness,
                  "undetectability": run_undetectability}[op]
        outcome = runner(cfg_from(doc["config"]))
    elif op == "mixture_necessity":
        outcome = run_mixture_necessity(
            doc["eps"], doc["b"], doc["lam"],
            trials=doc.get("trials", 10_000),
            seed=seed_override if seed_override is not None
            else doc.get("seed", 0))
    elif op == "toy_distinguisher":
        advantage = toy_distinguisher(doc["key_bits"], cfg_from(doc["config"]))
        _emit({"op": op, "advantage": advantage})
        _say(f"advantage: {advantage:.3f}")
        return 0
    elif op == "concentration":
        outcome = run_concentration(
            doc["n"], doc["tau"], doc["trials"],
            seed=seed_override if seed_override is not None
            else doc.get("seed", 0))
    else:
        raise CliError(f"unknown experiment op: {op!r}")

    if args.margins_out:
        save_margins_csv(outcome, args.margins_out)
        _say(f"wrote per-trial margins to {args.margins_out}")
    print(outcome.to_json(), end="")
    _say(f"{outcome.name}: rate {outcome.rate:.6g} over {outcome.trials} "
         f"units in {outcome.wall_time:.1f}s")
    return 0


def cmd_train_ngram(args) -> int:
    if not os.path.exists(args.corpus):
        raise CliError(f"corpus file not found: {args.corpus}")
    if os.path.exists(args.out) and not args.force:
        raise CliError(f"{args.out} exists; pass --force to overwrite")
    with open(args.corpus, "rb") as fh:
        corpus = fh.read()
    if not corpus:
        raise CliError("corpus is empty")
    spec = train_ngram(corpus, args.order)
    save_ngram_table(spec, args.out)
    spec_path = args.spec_out or (os.path.splitext(args.out)[0] + ".json")
    doc = json.loads(spec.to_json())
    doc["table_file"] = os.path.basename(args.out)
    with open(spec_path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")
    _say(f"trained order-{args.order} model on {len(corpus)} bytes")
    _emit({"table": args.out, "spec": spec_path,
           "alphabet_size": spec.params["alphabet_size"],
           "order": args.order})
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="entmark",
        description="Watermark token streams, detect the marks, and run "
                    "the statistical batteries around them.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("keygen", help="draw a fresh secret key")
    p.add_argument("--scheme", required=True,
                   choices=["simple", "complete", "substring"])
    p.add_argument("--lambda", dest="lam", type=int, required=True)
    p.add_argument("--b", type=int, default=None,
                   help="simple-scheme tag width")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.add_argument("--seed", type=int, default=None,
                   help="deterministic key material (tests only)")
    p.set_defaults(func=cmd_keygen)

    p = sub.add_parser("generate", help="sample a watermarked response")
    p.add_argument("--key", required=True)
    p.add_argument("--model", required=True, help="model spec JSON")
    p.add_argument("--prompt", default="", help="UTF-8 text or @file")
    p.add_argument("--codec", default=None, help="codec JSON for non-bit models")
    p.add_argument("--out", default=None, help="write interchange JSON here")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("detect", help="scan a response for the watermark")
    p.add_argument("--key", required=True)
    p.add_argument("--in", required=True,
                   help="interchange JSON, raw 0/1 text, or - for stdin")
    p.add_argument("--codec", default=None)
    p.add_argument("--stride", type=int, default=1,
                   help="substring scan stride (1 = exhaustive)")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("attack", help="rebuild a response token by token")
    p.add_argument("--oracle", required=True,
                   help="JSON: {key, model, codec?, replay_ledger?}")
    p.add_argument("--prompt", default="")
    p.add_argument("--max-len", dest="max_len", type=int, required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("experiment", help="run a statistical battery")
    p.add_argument("--config", required=True,
                   help="config JSON path or preset:NAME")
    p.add_argument("--margins-out", dest="margins_out", default=None)
    p.add_argument("--jobs", type=int, default=1,
                   help="reserved; this build runs trials sequentially")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("train-ngram", help="fit an n-gram table to a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--order", type=int, required=True)
    p.add_argument("--out", required=True, help="binary table path")
    p.add_argument("--spec-out", dest="spec_out", default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train_ngram)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        _say(f"error: {exc}")
        return 2
    except (ValueError, KeyError, OSError, json.JSONDecodeError,
            ModelContractError, ImpossibleResponseError) as exc:
        _say(f"error: {exc}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
