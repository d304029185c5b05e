"""Command-line entry point: ``xalign {pipeline,train,eval,report,selftest}``.

Exit codes: 0 success, 1 internal or check failure, 2 usage/config/missing
input, 3 bad data.
"""
from __future__ import annotations

import argparse
import hashlib
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .bitext import (align_corpus, filter_corpus, parse_bitext, parse_pharaoh,
                     read_aligned_pairs, write_aligned_pairs)
from .config import AppConfig, dump_config, load_config
from .encoder import Vocab, init_encoder, load_encoder, save_encoder
from .errors import ConfigError, EmptyCorpusError, ParseError, SpanError, VocabError, XAlignError
from .evaluation import dumps_results, emit_report, loads_results, multi_seed_run, summarize
from .objectives import procrustes_svd
from .selftest import GRADIENT_CHECKS, run_selftest
from .trainer import OBJECTIVES, static_features, train_finetune, train_linear_mapping, write_loss_log

log = logging.getLogger("xalign")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_DATA = 0, 1, 2, 3
OUT_ENV = "XALIGN_OUT"


class UsageError(Exception):
    """Missing or unreadable inputs (exit 2)."""


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _read_lines(path) -> list[str]:
    try:
        with open(path, encoding="utf-8") as fh:
            return fh.read().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from None
    except UnicodeDecodeError:
        raise ParseError(f"{path} is not valid UTF-8") from None


def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get(OUT_ENV) or "xalign-out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config(args) -> AppConfig:
    if args.config is not None and not Path(args.config).is_file():
        raise UsageError(f"config file {args.config} not found")
    return load_config(args.config, args.preset, args.set or [])


def write_manifest(path: Path, command: str, cfg: AppConfig | None, inputs: dict, extra: dict | None = None) -> None:
    """Key-value manifest; no timestamps so reruns are byte-identical."""
    lines = [f"command = {command}", f"version = {__version__}"]
    for k, v in (extra or {}).items():
        lines.append(f"{k} = {v}")
    for name in sorted(inputs):
        p = inputs[name]
        lines.append(f"input.{name} = {p}")
        lines.append(f"input.{name}.sha256 = {file_digest(p)}")
    text = "\n".join(lines) + "\n"
    if cfg is not None:
        text += "\n" + dump_config(cfg)
    path.write_text(text, encoding="utf-8")


def _parse_pairs(path, lang: str):
    res = parse_bitext(_read_lines(path), lang)
    for lineno, msg in res.errors[:10]:
        print(f"{path}:{lineno + 1}: {msg}", file=sys.stderr)
    if len(res.errors) > 10:
        print(f"... {len(res.errors) - 10} more parse errors", file=sys.stderr)
    if not res.pairs:
        if res.errors:
            raise ParseError(f"all {len(res.errors)} non-blank lines of {path} failed to parse")
        raise EmptyCorpusError(f"{path} contains no sentence pairs")
    return res


# ---------------------------------------------------------------- subcommands


def cmd_pipeline(args) -> int:
    cfg = _config(args)
    lang = args.lang or cfg.pipeline.lang
    res = _parse_pairs(args.bitext, lang)
    pairs = res.pairs
    workers = args.workers or cfg.pipeline.workers
    inputs = {"bitext": args.bitext}
    if args.from_pharaoh:
        fwd_path, bwd_path = args.from_pharaoh
        fwd_lines, bwd_lines = _read_lines(fwd_path), _read_lines(bwd_path)
        need = max(p.pair_id for p in pairs) + 1
        if len(fwd_lines) < need or len(bwd_lines) < need:
            raise ParseError("alignment files have fewer lines than the bitext")
        fwd = [parse_pharaoh(fwd_lines[p.pair_id], len(p.src), len(p.tgt)) for p in pairs]
        bwd = [parse_pharaoh(bwd_lines[p.pair_id], len(p.src), len(p.tgt)) for p in pairs]
        aligned, stats = filter_corpus(pairs, fwd, bwd, workers)
        inputs.update(forward=fwd_path, backward=bwd_path)
    else:
        aligned, stats = align_corpus(pairs, cfg.pipeline.iterations, workers)
    out = _out_dir(args)
    target = Path(args.output) if args.output else out / "aligned.tsv"
    write_aligned_pairs(target, aligned)
    write_manifest(out / "pipeline.manifest", "pipeline", cfg, inputs,
                   {"pairs_in": stats.pairs_in, "links_kept": stats.links_kept,
                    "trivial_dropped": stats.trivial_dropped, "parse_errors": len(res.errors),
                    "skipped_lines": res.skipped, "output": target})
    print(f"pairs in: {stats.pairs_in}  links kept: {stats.links_kept}  "
          f"trivial dropped: {stats.trivial_dropped}  parse errors: {len(res.errors)}  "
          f"skipped: {res.skipped}")
    print(f"wrote {target}")
    return EXIT_OK


def _check_aligned(pairs, aligned) -> None:
    by_id = {p.pair_id: p for p in pairs}
    for a in aligned:
        p = by_id.get(a.pair_id)
        if p is None:
            raise ParseError(f"aligned pair refers to bitext line {a.pair_id + 1}, which has no sentence pair")
        if not (a.src_idx < len(p.src) and a.tgt_idx < len(p.tgt)) or \
                (p.src[a.src_idx], p.tgt[a.tgt_idx]) != (a.src_word, a.tgt_word):
            raise ParseError(f"aligned pair {a} does not match bitext line {a.pair_id + 1}")


def cmd_train(args) -> int:
    overrides = list(args.set or [])
    if args.objective:
        overrides.append(f"run.mode={args.objective}")
    if args.lam is not None:
        overrides.append(f"run.lam={args.lam!r}")
    if args.steps is not None:
        overrides.append(f"run.warmup_steps={min(args.steps, _config(args).run.warmup_steps)}")
        overrides.append(f"run.total_steps={args.steps}")
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    args.set = overrides
    cfg = _config(args)
    run = cfg.run
    lang = args.lang or cfg.pipeline.lang
    for p in [args.bitext, args.aligned] + ([args.encoder] if args.encoder else []):
        if not Path(p).is_file():
            raise UsageError(f"input {p} not found")
    pairs = _parse_pairs(args.bitext, lang).pairs
    aligned = read_aligned_pairs(args.aligned, lang)
    if not aligned:
        raise EmptyCorpusError(f"{args.aligned} contains no aligned pairs")
    _check_aligned(pairs, aligned)
    inputs = {"bitext": args.bitext, "aligned": args.aligned}
    if args.encoder:
        if not args.vocab:
            raise UsageError("--encoder needs --vocab")
        params, _ = load_encoder(args.encoder)
        vocab = Vocab.load(args.vocab)
        inputs.update(encoder=args.encoder, vocab=args.vocab)
    else:
        vocab = Vocab.from_sentences([s for p in pairs for s in (p.src, p.tgt)])
        params = init_encoder(len(vocab), args.dim, args.layers, seed=run.seed)
    out = _out_dir(args)
    extra: dict[str, np.ndarray] = {}
    t0 = time.perf_counter()
    if run.mode in ("l2", "weak", "strong"):
        res = train_finetune(params, pairs, aligned, vocab, run)
        params = res.params
        if res.head is not None:
            extra.update(res.head.params.to_dict())
        write_loss_log(out / "loss.tsv", res.history)
        final = f"{res.history[-1].loss!r}" if res.history else "n/a"
    elif run.mode in ("procrustes", "linear"):
        feats = static_features(params, pairs, aligned, vocab, run.max_seq_len)
        if run.mode == "procrustes":
            maps = {(l, k): procrustes_svd(S, T, l, k) for l in feats for k, (S, T) in feats[l].items()}
        else:
            lm = train_linear_mapping(feats, run)
            maps = lm.mappings
            for (l, k), hist in lm.history.items():
                with open(out / f"loss.{l}.{k}.tsv", "w", encoding="utf-8", newline="\n") as fh:
                    fh.write("step\tloss\tlr\n")
                    fh.writelines(f"{s}\t{v!r}\t{r!r}\n" for s, v, r in hist)
        for (l, k), m in maps.items():
            extra[f"mapping/{l}/{k}"] = m.W
        final = "n/a"
    else:
        final = "n/a"
    save_encoder(out / "checkpoint.xckpt", params, extra)
    vocab.save(out / "vocab.txt")
    write_manifest(out / "manifest.txt", "train", cfg, inputs,
                   {"objective": run.mode, "lambda": repr(run.lam), "seed": run.seed, "final_loss": final})
    print(f"trained objective={run.mode} steps={run.total_steps} in {time.perf_counter() - t0:.1f}s; "
          f"artifacts in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    overrides = list(args.set or [])
    if args.seeds:
        overrides.append("eval.seeds=" + ",".join(map(str, args.seeds)))
    if args.objectives:
        overrides.append("eval.objectives=" + ",".join(args.objectives))
    if args.workers:
        overrides.append(f"eval.workers={args.workers}")
    args.set = overrides
    cfg = _config(args)
    t0 = time.perf_counter()
    results = multi_seed_run(cfg.harness(), cfg.eval.seeds, cfg.eval.workers)
    out = _out_dir(args)
    (out / "results.tsv").write_text(dumps_results(results), encoding="utf-8")
    summaries = summarize(results)
    (out / "report.tsv").write_text(emit_report(summaries, "tsv"), encoding="utf-8")
    (out / "report.md").write_text(emit_report(summaries, "markdown", scale=args.scale), encoding="utf-8")
    write_manifest(out / "eval.manifest", "eval", cfg, {"config": args.config} if args.config else {})
    print(emit_report(summaries, "markdown", scale=args.scale), end="")
    log.info("eval finished in %.1fs", time.perf_counter() - t0)
    failed = sum(not r.ok for r in results)
    if failed:
        print(f"{failed} run(s) failed; see {out / 'results.tsv'}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_report(args) -> int:
    results = []
    for p in args.results:
        if not Path(p).is_file():
            raise UsageError(f"results file {p} not found")
        results += loads_results(Path(p).read_text(encoding="utf-8"))
    if not results:
        raise EmptyCorpusError("no results to report")
    summaries = summarize(results)
    out = _out_dir(args)
    tsv = emit_report(summaries, "tsv")
    md = emit_report(summaries, "markdown", scale=args.scale, decimals=args.decimals)
    (out / "report.tsv").write_text(tsv, encoding="utf-8")
    (out / "report.md").write_text(md, encoding="utf-8")
    print(tsv if args.format == "tsv" else md, end="")
    return EXIT_OK


def cmd_selftest(args) -> int:
    checks = run_selftest(seed=args.seed, instances=args.instances, broken=frozenset(args.broken or ()))
    for c in checks:
        print(c.line())
    failed = [c.name for c in checks if not c.ok]
    if failed:
        print("FAILED: " + ", ".join(failed), file=sys.stderr)
        return EXIT_FAIL
    print(f"all {len(checks)} checks passed")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="count", default=0)
    common.add_argument("--preset", choices=("paper", "desk"), default="desk")
    common.add_argument("--config", help="INI config file with [run], [synthetic], [eval], [pipeline]")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override a config value; repeatable, applied after the file")
    common.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or ./xalign-out)")

    parser = argparse.ArgumentParser(prog="xalign", description="Cross-lingual word alignment toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pipeline", parents=[common], help="bitext -> filtered aligned word pairs")
    p.add_argument("bitext")
    p.add_argument("--from-pharaoh", nargs=2, metavar=("FWD", "BWD"),
                   help="use existing forward/backward alignments instead of running EM")
    p.add_argument("--lang", help="target language label")
    p.add_argument("--workers", type=int)
    p.add_argument("-o", "--output", help="aligned-pair file (default: OUT/aligned.tsv)")
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("train", parents=[common], help="train an alignment objective")
    p.add_argument("--bitext", required=True)
    p.add_argument("--aligned", required=True)
    p.add_argument("--objective", choices=OBJECTIVES)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lang")
    p.add_argument("--encoder", help="encoder checkpoint to start from")
    p.add_argument("--vocab", help="vocabulary matching --encoder")
    p.add_argument("--dim", type=int, default=32, help="hidden size of a fresh encoder")
    p.add_argument("--layers", type=int, default=2, help="layers of a fresh encoder")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="multi-seed synthetic retrieval evaluation")
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--objectives", nargs="+", choices=OBJECTIVES)
    p.add_argument("--workers", type=int)
    p.add_argument("--scale", type=float, default=100.0, help="multiply markdown cells (default 100)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", parents=[common], help="summarize result files")
    p.add_argument("results", nargs="+")
    p.add_argument("--format", choices=("tsv", "markdown"), default="markdown")
    p.add_argument("--scale", type=float, default=100.0)
    p.add_argument("--decimals", type=int, default=1)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("selftest", parents=[common], help="numerical self-checks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=5)
    p.add_argument("--break", dest="broken", action="append", choices=sorted(GRADIENT_CHECKS),
                   help="corrupt one analytic gradient (tests the checker)")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = (logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"xalign: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ParseError, EmptyCorpusError, SpanError, VocabError) as exc:
        print(f"xalign: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except XAlignError as exc:
        print(f"xalign: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL
