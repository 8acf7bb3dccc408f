"""``onestop`` command line: prep | train | generate | eval | compare.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 non-finite loss.
Every command writes a ``*.manifest.json`` next to its outputs.
"""

from __future__ import annotations

import argparse
import json
import logging
import subprocess
import sys
import time
from pathlib import Path

from . import __version__
from .config import load_config, model_config, train_config
from .data import (
    CorpusFormatError,
    LoadReport,
    Vocabulary,
    example_to_record,
    load_corpus,
    read_jsonl,
    record_to_example,
    split_examples,
    tokenize,
    write_jsonl,
)
from .inference import compare_systems, generate_qa_pairs
from .metrics import MetricReport, evaluate
from .training import ConfigError, NonFiniteLossError, load_model, run_schedule, save_model, validate_stages

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("onestop")


class UsageError(Exception):
    pass


def _err(msg: str) -> None:
    print(f"onestop: {msg}", file=sys.stderr)


def _code_version() -> str:
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
        if rev.returncode == 0:
            return f"{__version__}+{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_manifest(path, command: str, args: argparse.Namespace, cfg: dict | None, inputs, outputs, started: float):
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "config_path": getattr(args, "config", None),
        "config": cfg,
        "seed": cfg["train"]["seed"] if cfg else None,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "code_version": _code_version(),
        "wall_clock_s": round(time.time() - started, 3),
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


def _overrides(args) -> dict:
    out = {}
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep or "." not in key:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _resolve(args, extra: dict | None = None) -> dict:
    overrides = _overrides(args)
    overrides.update({k: v for k, v in (extra or {}).items() if v is not None})
    try:
        return load_config(getattr(args, "config", None), overrides)
    except (KeyError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def prep_output_path(corpus_in) -> Path:
    p = Path(corpus_in)
    stem = p.name[:-len(".jsonl")] if p.name.endswith(".jsonl") else p.name
    return p.with_name(stem + ".prep.jsonl")


def load_split(path, window: int, stride: int, report: LoadReport | None = None):
    report = LoadReport() if report is None else report
    examples = load_corpus(path, report)
    return split_examples(examples, window, stride, report), report


# -- commands ---------------------------------------------------------------------


def cmd_prep(args) -> int:
    started = time.time()
    cfg = _resolve(args, {"data.window": args.window, "data.stride": args.stride,
                          "data.reject_threshold": args.reject_threshold})
    d = cfg["data"]
    out = Path(args.out) if args.out else prep_output_path(args.corpus)
    report = LoadReport()
    examples, report = load_split(args.corpus, d["window"], d["stride"], report)
    for n, reason in report.skipped:
        _err(f"{args.corpus}:{n}: skipped: {reason}")
    write_jsonl(out, [example_to_record(ex) for ex in examples])
    write_manifest(str(out) + ".manifest.json", "prep", args, cfg, [args.corpus], [out], started)
    print(f"{len(examples)} sub-documents written to {out} ({len(report.skipped)} of {report.lines} records rejected)")
    if report.rejected_rate > d["reject_threshold"]:
        _err(f"rejected-record rate {report.rejected_rate:.1%} exceeds threshold {d['reject_threshold']:.1%}")
        return EXIT_DATA
    return EXIT_OK


def cmd_train(args) -> int:
    started = time.time()
    cfg = _resolve(args, {"data.train": args.train, "data.valid": args.valid, "train.out_dir": args.out_dir,
                          "train.stages": args.stages, "train.seed": args.seed})
    d, t = cfg["data"], cfg["train"]
    if not d["train"]:
        raise UsageError("no training corpus given (data.train / --train)")
    if not Path(d["train"]).exists():
        raise UsageError(f"training corpus not found: {d['train']}")
    try:
        tcfg = train_config(cfg)
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc
    out_dir = Path(t["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    tcfg.checkpoint_dir = str(out_dir / "checkpoints")
    tcfg.log_path = str(out_dir / "train_log.jsonl")
    Path(tcfg.log_path).unlink(missing_ok=True)

    train, report = load_split(d["train"], d["window"], d["stride"])
    if not train:
        _err("training corpus has no usable examples")
        return EXIT_DATA
    valid = None
    if d["valid"]:
        valid, _ = load_split(d["valid"], d["window"], d["stride"])
    vocab = Vocabulary.build([ex.document + ex.question for ex in train], min_freq=d["min_freq"])
    vocab.save(out_dir / "vocab.txt")
    mcfg = model_config(cfg, len(vocab))
    from .model import OneStopModel

    model = OneStopModel(mcfg, seed=tcfg.seed, vocab=vocab)
    try:
        model, reports = run_schedule(train, tcfg, valid=valid, model=model)
    except NonFiniteLossError as exc:
        _err(str(exc))
        return EXIT_NUMERIC
    final = save_model(model, out_dir / "final.npz", extra={"train_config": tcfg.to_dict()})
    summary = {
        stage: {"best_epoch": r.best_epoch, "best_val": r.best_val, "epochs": r.epochs,
                "steps": len(r.steps), "checkpoints": r.checkpoints}
        for stage, r in reports.items()
    }
    (out_dir / "report.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    write_manifest(out_dir / "manifest.json", "train", args, cfg, [d["train"]] + ([d["valid"]] if d["valid"] else []),
                   [final, out_dir / "train_log.jsonl", out_dir / "report.json"], started)
    print(f"trained stages {list(tcfg.stages)} on {len(train)} examples; checkpoint {final}")
    return EXIT_OK


def _beam_arg(args, cfg) -> int | str:
    if args.greedy:
        return "greedy"
    beam = args.beam if args.beam is not None else cfg["decode"]["beam"]
    if beam < 1:
        raise UsageError(f"--beam must be >= 1, got {beam}")
    return beam


def cmd_generate(args) -> int:
    started = time.time()
    cfg = _resolve(args, {"decode.top_n": args.top_n, "decode.window": args.window, "decode.stride": args.stride})
    dc = cfg["decode"]
    beam = _beam_arg(args, cfg)
    if dc["top_n"] < 1:
        raise UsageError("--top-n must be >= 1")
    model = load_model(args.checkpoint)
    window = min(dc["window"], model.cfg.max_document_len)
    stride = min(dc["stride"], window)
    lines = []
    for n, rec in read_jsonl(args.docs):
        if "document" not in rec:
            raise CorpusFormatError([(n, "missing key 'document'")])
        doc_id = rec.get("id", f"line{n}")
        tokens = tokenize(rec["document"])
        if not tokens:
            _err(f"{args.docs}:{n}: empty document skipped")
            continue
        pairs = generate_qa_pairs(tokens, model, window, stride, dc["top_n"], beam, dc["max_len"], dc["max_answer_len"])
        for p in pairs:
            lines.append({
                "doc_id": doc_id,
                "window_start": p.window_start,
                "question": " ".join(p.question),
                "answer": " ".join(p.answer),
                "a_start_tok": p.window_start + p.start,
                "a_end_tok": p.window_start + p.end,
                "log_score": p.score,
            })
    write_jsonl(args.out, lines)
    write_manifest(str(args.out) + ".manifest.json", "generate", args, cfg, [args.checkpoint, args.docs], [args.out], started)
    print(f"{len(lines)} QA pairs written to {args.out}")
    return EXIT_OK


def _keyed(path) -> dict:
    out = {}
    for n, rec in read_jsonl(path):
        key = rec.get("id", rec.get("doc_id"))
        if key is None:
            raise CorpusFormatError([(n, "record has no 'id' or 'doc_id'")])
        out.setdefault(str(key), rec)
    return out


def _span(rec):
    if "a_start_tok" in rec and "a_end_tok" in rec:
        return int(rec["a_start_tok"]), int(rec["a_end_tok"])
    if all(k in rec for k in ("document", "answer_start_char", "answer_end_char")):
        try:
            ex = record_to_example({"question": "?", **rec})
        except (ValueError, TypeError):
            return None
        return ex.a_start, ex.a_end
    return None


def cmd_eval(args) -> int:
    started = time.time()
    preds, refs = _keyed(args.predictions), _keyed(args.references)
    keys = [k for k in refs if k in preds]
    if not keys:
        _err("no prediction ids match the references")
        return EXIT_DATA
    cands = [tokenize(preds[k]["question"]) for k in keys]
    golds = [tokenize(refs[k]["question"]) for k in keys]
    span_keys = [k for k in keys if _span(preds[k]) and _span(refs[k])]
    report = evaluate(cands, golds,
                      [_span(preds[k]) for k in span_keys] if span_keys else None,
                      [_span(refs[k]) for k in span_keys] if span_keys else None)
    out = report.to_dict()
    out["missing_predictions"] = len(refs) - len(keys)
    Path(args.out).write_text(json.dumps(out, indent=2) + "\n", encoding="utf-8")
    write_manifest(str(args.out) + ".manifest.json", "eval", args, None, [args.predictions, args.references], [args.out], started)
    print(json.dumps(out))
    return EXIT_OK


def cmd_compare(args) -> int:
    started = time.time()
    cfg = _resolve(args)
    beam = _beam_arg(args, cfg)
    one, qg, span = load_model(args.onestop), load_model(args.qg), load_model(args.span)
    window = min(one.cfg.max_document_len, qg.cfg.max_document_len, span.cfg.max_document_len)
    examples, _ = load_split(args.corpus, window, max(1, window // 2))
    if not examples:
        _err("evaluation corpus has no usable examples")
        return EXIT_DATA
    r_one, r_pipe, delta = compare_systems(examples, one, qg, span, beam, cfg["decode"]["max_len"],
                                           cfg["decode"]["max_answer_len"])
    out = {"onestop": r_one.to_dict(), "pipeline": r_pipe.to_dict(), "delta": delta, "examples": len(examples)}
    Path(args.out).write_text(json.dumps(out, indent=2) + "\n", encoding="utf-8")
    write_manifest(str(args.out) + ".manifest.json", "compare", args, cfg,
                   [args.onestop, args.qg, args.span, args.corpus], [args.out], started)
    print(json.dumps({"span_em": {"onestop": r_one.span_em, "pipeline": r_pipe.span_em}, "delta": delta}))
    return EXIT_OK


# -- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="onestop", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="INI config file")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config key")

    p = sub.add_parser("prep", help="tokenize, align spans and split long documents")
    common(p)
    p.add_argument("corpus")
    p.add_argument("--out")
    p.add_argument("--window", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--reject-threshold", type=float)
    p.set_defaults(func=cmd_prep)

    p = sub.add_parser("train", help="run the staged training schedule")
    common(p)
    p.add_argument("--train")
    p.add_argument("--valid")
    p.add_argument("--out-dir")
    p.add_argument("--stages", help="comma-separated subset of qg,span,joint (in that order)")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="generate QA pairs for documents")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--docs", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--beam", type=int)
    p.add_argument("--greedy", action="store_true")
    p.add_argument("--top-n", type=int)
    p.add_argument("--window", type=int)
    p.add_argument("--stride", type=int)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="score predicted questions/spans against references")
    p.add_argument("--predictions", required=True)
    p.add_argument("--references", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="OneStop vs the two-model question-then-answer pipeline")
    common(p)
    p.add_argument("--onestop", required=True)
    p.add_argument("--qg", required=True)
    p.add_argument("--span", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--beam", type=int)
    p.add_argument("--greedy", action="store_true")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if getattr(args, "stages", None):
            validate_stages(tuple(s.strip() for s in args.stages.split(",")))
        return args.func(args)
    except (UsageError, ConfigError, FileNotFoundError) as exc:
        _err(str(exc))
        return EXIT_USAGE
    except CorpusFormatError as exc:
        for n, msg in exc.errors:
            _err(f"line {n}: {msg}")
        return EXIT_DATA
    except NonFiniteLossError as exc:
        _err(str(exc))
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
