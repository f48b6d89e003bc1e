"""Command-line entry point: ``valence-patching <subcommand> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .corpus import align_by_id, load_corpus
from .metric import CONDITIONS
from .model import ATTENTION_KINDS, MLP_KINDS, NORM_KINDS, POSITION_ENCODINGS, PRECISIONS, ModelConfig, make_toy_model, save_model
from .pipeline import STAGES, THREADS_ENV, Experiment, RunManifest, configure_threads
from .report import GROUPINGS
from .steering import DEFAULT_ALPHAS
from .text import SYSTEM_PROMPT, TEMPLATES

log = logging.getLogger("valence_patching")


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _names(text: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in text.split(",") if x.strip())


def _run_args() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("run configuration (recorded in manifest.json)")
    g.add_argument("--model", required=True, help="model directory (config.json + safetensors)")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--corpus", default=None, help="corpus directory or pairs.jsonl (default: bundled corpus)")
    g.add_argument("--anchors", default="default", help="anchor set name (default, alt1, alt2, toy) or JSON path")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--alphas", type=_floats, default=DEFAULT_ALPHAS, help="comma-separated steering strengths")
    g.add_argument("--precision", choices=sorted(PRECISIONS), default="float32")
    g.add_argument("--template", choices=sorted(TEMPLATES), default="", help="override the model's chat template")
    g.add_argument("--system-prompt", default=SYSTEM_PROMPT)
    g.add_argument("--n-pairs", type=int, default=50, help="pairs sampled for direction extraction")
    g.add_argument("--limit", type=int, default=None, help="use only the first N prompt ids")
    e = p.add_argument_group("execution")
    e.add_argument("--workers", type=int, default=1, help=f"worker threads over prompt pairs (torch threads: ${THREADS_ENV})")
    e.add_argument("--force", action="store_true", help="overwrite a manifest with a different configuration")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="valence-patching", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    run = _run_args()

    p = sub.add_parser("validate-corpus", help="check a prompt-pair corpus")
    p.add_argument("--corpus", default=None)

    p = sub.add_parser("make-toy-model", help="write a seeded random model")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--kv-heads", type=int, default=None, help="default: same as --heads")
    p.add_argument("--d-mlp", type=int, default=None, help="default: 4 * d_model")
    p.add_argument("--vocab", type=int, default=64)
    p.add_argument("--max-seq-len", type=int, default=512)
    p.add_argument("--position", choices=POSITION_ENCODINGS, default="rotary")
    p.add_argument("--norm", choices=NORM_KINDS, default="rmsnorm")
    p.add_argument("--mlp", choices=MLP_KINDS, default="gated_silu")
    p.add_argument("--attention", choices=ATTENTION_KINDS, default="auto")
    p.add_argument("--precision", choices=sorted(PRECISIONS), default="float32")

    p = sub.add_parser("score", parents=[run], help="clean/corrupted scores and gaps")
    p.add_argument("--anchor-sets", type=_names, default=(), help="extra anchor sets for the sensitivity table")

    sub.add_parser("patch-sweep", parents=[run], help="per-layer final-position patching")

    p = sub.add_parser("heatmap", parents=[run], help="layer x position patch heatmap for one pair")
    p.add_argument("--pair-id", type=int, required=True)
    p.add_argument("--condition", choices=CONDITIONS, default=None, help="default: both conditions")

    sub.add_parser("flip-test", parents=[run], help="gap sign flip between conditions")

    p = sub.add_parser("extract-direction", parents=[run], help="mean-difference steering direction")
    p.add_argument("--condition", choices=CONDITIONS, default="good_news")
    p.add_argument("--layer", type=int, default=None, help="default: median top layer from sweeps.jsonl")

    p = sub.add_parser("steer", parents=[run], help="alpha sweep over neutral prompts")
    p.add_argument("--direction", action="append", default=[], help="direction JSON (repeatable; default: all in --out)")

    p = sub.add_parser("stats", parents=[run], help="report tables from earlier stages")
    p.add_argument("--grouping", choices=GROUPINGS + ("both",), default="both")

    p = sub.add_parser("report", parents=[run], help="run every stage and bundle the outputs")
    p.add_argument("--skip", type=_names, default=(), help=f"comma-separated stages to skip: {','.join(STAGES)}")
    p.add_argument("--heatmap-ids", type=lambda s: tuple(int(x) for x in _names(s)), default=None)
    return parser


def _experiment(args, stages: tuple[str, ...]) -> Experiment:
    manifest = RunManifest.build(
        args.model,
        args.out,
        args.corpus,
        anchors=args.anchors,
        seed=args.seed,
        alphas=args.alphas,
        precision=args.precision,
        template=args.template,
        system_prompt=args.system_prompt,
        n_pairs=args.n_pairs,
        limit=args.limit,
        stages=stages,
    )
    return Experiment(manifest, workers=args.workers, force=args.force)


def _validate_corpus(args) -> None:
    corpus = load_corpus(args.corpus)
    aligned = align_by_id(corpus)
    print(f"ok: {len(corpus.pairs)} pairs, {len(aligned)} aligned ids, {len(corpus.neutral_prompts)} neutral prompts")


def _make_toy_model(args) -> None:
    cfg = ModelConfig(
        n_layers=args.layers,
        d_model=args.d_model,
        n_heads=args.heads,
        n_kv_heads=args.kv_heads or args.heads,
        d_mlp=args.d_mlp or 4 * args.d_model,
        vocab_size=args.vocab,
        position_encoding=args.position,
        norm_kind=args.norm,
        mlp_kind=args.mlp,
        max_seq_len=args.max_seq_len,
        attention_kind=args.attention,
    )
    path = save_model(make_toy_model(args.seed, cfg, precision=args.precision), args.out)
    print(f"wrote toy model to {path}")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr
    )
    configure_threads()
    try:
        cmd = args.command
        if cmd == "validate-corpus":
            _validate_corpus(args)
        elif cmd == "make-toy-model":
            _make_toy_model(args)
        elif cmd == "report":
            exp = _experiment(args, tuple(s for s in STAGES if s not in args.skip))
            targets = None if args.heatmap_ids is None else [(i, c) for i in args.heatmap_ids for c in CONDITIONS]
            exp.run_report(args.skip, targets)
        else:
            exp = _experiment(args, (cmd,))
            if cmd == "score":
                exp.run_score(args.anchor_sets)
            elif cmd == "patch-sweep":
                exp.run_sweeps()
            elif cmd == "heatmap":
                conds = CONDITIONS if args.condition is None else (args.condition,)
                exp.run_heatmaps([(args.pair_id, c) for c in conds])
            elif cmd == "flip-test":
                exp.run_flip()
            elif cmd == "extract-direction":
                exp.run_extract(args.condition, args.layer)
            elif cmd == "steer":
                exp.run_steer(args.direction)
            elif cmd == "stats":
                exp.run_stats(GROUPINGS if args.grouping == "both" else (args.grouping,))
        if cmd not in ("validate-corpus", "make-toy-model"):
            print(f"{cmd}: wrote outputs to {Path(args.out)}")
    except (ValueError, KeyError, OSError, RuntimeError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
