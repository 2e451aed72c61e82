"""Command-line entry point.

Exit codes: 0 success, 2 usage error, 3 missing file, 4 invalid input or
configuration, 5 numeric failure (non-finite values, failed gradient check).
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

from . import __version__
from .errors import DocfuseError, NumericError, ValidationError

EXIT_OK, EXIT_USAGE, EXIT_NOT_FOUND, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3, 4, 5


def _ints(text: str) -> list[int]:
    try:
        return [int(t) for t in text.replace(",", " ").split()]
    except ValueError as exc:
        raise ValidationError(f"expected integers, got {text!r}") from exc


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


# -- subcommands ---------------------------------------------------------------
def cmd_gen_data(args) -> int:
    from .config import build, read_flat
    from .data import CorpusSpec, generate_corpus

    src = args.spec or args.config
    values = read_flat(src) if src else {}
    if args.seed is not None:
        values["seed"] = args.seed
    spec = build(CorpusSpec, values)
    corpus = generate_corpus(spec, args.out)
    _emit({"out": str(args.out), "counts": corpus.manifest["counts"],
           "text_only_oracle": corpus.manifest["text_only_oracle"]})
    return EXIT_OK


def cmd_train(args) -> int:
    from .config import read_flat
    from .data import load_corpus
    from .pipeline import run_configs, train_on_corpus

    values = read_flat(args.config) if args.config else {}
    if args.seed is not None:
        values["seed"] = args.seed
    train_cfg, model_cfg = run_configs(values)
    corpus = load_corpus(args.data)
    if model_cfg.vocab_size < corpus.manifest["spec"]["vocab_size"]:
        raise ValidationError(f"model vocab {model_cfg.vocab_size} smaller than corpus vocab "
                              f"{corpus.manifest['spec']['vocab_size']}")
    _, log = train_on_corpus(corpus, train_cfg, model_cfg, args.out, log_every=args.log_every)
    _emit({"out": str(args.out), "steps": len(log), "final_loss": log[-1]["loss"] if log else None})
    return EXIT_OK


def cmd_infer(args) -> int:
    from .calibration import write_predictions
    from .checkpoint import load_checkpoint
    from .data import load_corpus
    from .layout import read_document
    from .pipeline import accuracy, predict

    model = load_checkpoint(args.checkpoint)
    if args.doc:
        if args.question is None:
            raise ValidationError("--doc needs --question")
        from .calibration import answer_confidence
        doc = read_document(args.doc)
        toks, scores = model.answer(doc, _ints(args.question), args.max_out, zero_image=args.zero_image,
                                    recompute_cross_kv=args.recompute_cross_kv or None)
        _emit({"answer_tokens": toks, "answer_text": " ".join(f"v{t}" for t in toks),
               "token_scores": scores, "confidence": answer_confidence(scores)})
        return EXIT_OK
    if not args.data:
        raise ValidationError("infer needs --doc/--question or --data")
    corpus = load_corpus(args.data)
    records = predict(model, corpus.load_split(args.split), args.max_out, args.zero_image,
                      recompute_cross_kv=args.recompute_cross_kv or None)
    out = Path(args.out) if args.out else Path("predictions.jsonl")
    if out.suffix != ".jsonl":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "predictions.jsonl"
    write_predictions(records, out)
    em, n = accuracy(records)
    _emit({"predictions": str(out), "count": n, "exact_match": em})
    return EXIT_OK


def cmd_eval(args) -> int:
    from . import calibration as cal

    records = cal.read_predictions(args.pred)
    metrics = cal.summary(records, args.ece_bins)
    out = Path(args.out) if args.out else Path(args.pred).parent
    out.mkdir(parents=True, exist_ok=True)
    (out / "calibration.tsv").write_text(cal.format_bins(cal.calibration_plot_data(records, args.ece_bins)))
    curve, _ = cal.risk_coverage(records)
    (out / "risk_coverage.tsv").write_text(cal.format_curve(curve))
    if any(r.evidence_page is not None for r in records):
        buckets = cal.evidence_position_report(records, args.bucket_pages)
        (out / "evidence_position.tsv").write_text(cal.format_buckets(buckets))
        metrics["evidence_buckets"] = [asdict(b) for b in buckets]
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    _emit(metrics)
    return EXIT_OK


def cmd_chunk_plan(args) -> int:
    from .chunker import plan_chunks

    plan = plan_chunks(args.input_len, args.core, args.overlap, args.prefix)
    for line in plan.to_lines():
        print(line)
    return EXIT_OK


def cmd_budget(args) -> int:
    from .config import build, read_flat
    from .memory import MemConfig, estimate_memory, max_context, sweep

    values = read_flat(args.config) if args.config else {}
    if args.mode:
        values["mode"] = args.mode
    for t in args.toggle or []:
        values[t] = True
    cfg = build(MemConfig, values)
    if args.sweep:
        print(f"{'configuration':<30s} {'max_context':>14s}")
        for label, n in sweep(cfg):
            print(f"{label:<30s} {n:>14d}")
        return EXIT_OK
    n = max_context(cfg)
    at = args.context or n
    br = estimate_memory(at, cfg)
    _emit({"mode": cfg.mode, "toggles": cfg.toggles, "max_context": n, "context": at,
           "breakdown_bytes": {k: float(v) for k, v in br.items()}})
    return EXIT_OK


def cmd_grad_check(args) -> int:
    from .gradcheck import grad_check
    from .suites import tiny_model_loss

    loss_fn, params = tiny_model_loss(seed=args.seed, d=args.d)
    report = grad_check(loss_fn, params, h=args.h, tol=args.tol, max_entries=args.max_entries, seed=args.seed)
    print(report.summary())
    if not report.passed:
        raise NumericError(f"gradient check failed: max relative error {report.max_rel_error:.3e}")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------
class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="docfuse", description="Layout-aware document QA with text/vision fusion.")
    p.add_argument("--version", action="version", version=f"docfuse {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, out_required=False):
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--config", default=None)
        sp.add_argument("--out", required=out_required, default=None)

    g = sub.add_parser("gen-data", help="generate a synthetic corpus")
    common(g, out_required=True)
    g.add_argument("--spec", default=None, help="flat key = value corpus spec")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model on a corpus")
    common(t, out_required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--log-every", type=int, default=0)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="answer questions with a checkpoint")
    common(i)
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--doc", default=None)
    i.add_argument("--question", default=None, help="question token ids, e.g. '3 17'")
    i.add_argument("--data", default=None, help="corpus directory (batch mode)")
    i.add_argument("--split", default="test")
    i.add_argument("--max-out", type=int, default=4)
    i.add_argument("--recompute-cross-kv", action="store_true")
    i.add_argument("--zero-image", action="store_true")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="calibration metrics for prediction records")
    common(e)
    e.add_argument("--pred", required=True)
    e.add_argument("--ece-bins", type=int, default=10)
    e.add_argument("--bucket-pages", type=int, default=5)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("chunk-plan", help="print a chunk plan")
    common(c)
    c.add_argument("--input-len", type=int, required=True)
    c.add_argument("--core", type=int, default=1024)
    c.add_argument("--overlap", type=int, default=0)
    c.add_argument("--prefix", type=int, default=0)
    c.set_defaults(func=cmd_chunk_plan)

    b = sub.add_parser("budget", help="analytical memory budget")
    common(b)
    b.add_argument("--mode", choices=["inference", "training"], default=None)
    b.add_argument("--toggle", action="append", default=None)
    b.add_argument("--context", type=int, default=None, help="report the breakdown at this length")
    b.add_argument("--sweep", action="store_true")
    b.set_defaults(func=cmd_budget)

    gc = sub.add_parser("grad-check", help="finite-difference check of the tiny model")
    common(gc)
    gc.add_argument("--d", type=int, default=16)
    gc.add_argument("--h", type=float, default=1e-5)
    gc.add_argument("--tol", type=float, default=1e-4)
    gc.add_argument("--max-entries", type=int, default=None)
    gc.set_defaults(func=cmd_grad_check, seed=0)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not getattr(args, "command", None):
        parser.print_usage(sys.stderr)
        print("error: a subcommand is required", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc}", file=sys.stderr)
        return EXIT_NOT_FOUND
    except DocfuseError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FloatingPointError, OverflowError) as exc:
        print(f"error: numeric: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
