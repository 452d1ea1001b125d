"""Command-line entry point.

    tokenflow gen-corpus|train|synthesize|evaluate|rerank|augment-eval
              --config <path> [--seed <u64>] [--out <dir>] ...

Exit codes: 0 success, 2 config error, 3 missing artifact, 4 numerical
failure.
"""

import argparse
import sys

from . import pipeline
from .config import ConfigError, RunConfig


def _build_parser():
    p = argparse.ArgumentParser(prog="tokenflow",
                                description="desk-scale speech-token pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="key=value config file (defaults if omitted)")
        sp.add_argument("--seed", type=int, help="override the command's seed")
        sp.add_argument("--out", default="runs/default", help="run directory")

    common(sub.add_parser("gen-corpus", help="generate the synthetic corpus"))

    t = sub.add_parser("train", help="train one stage")
    t.add_argument("stage", choices=["tokenizer", "lm", "cfm"])
    common(t)

    s = sub.add_parser("synthesize", help="synthesize one utterance")
    s.add_argument("--mode", choices=pipeline.MODES, default="plain")
    s.add_argument("--text", required=True, help="space-separated text ids")
    s.add_argument("--lang", choices=["A", "B"], default="A")
    s.add_argument("--style", default=None)
    s.add_argument("--prompt-split", choices=["train", "dev", "test"])
    s.add_argument("--prompt-index", type=int, default=0)
    s.add_argument("--name", default=None, help="sample file stem")
    common(s)

    e = sub.add_parser("evaluate", help="seed-averaged synthesis evaluation")
    e.add_argument("--mode", choices=pipeline.MODES, default="plain")
    common(e)

    r = sub.add_parser("rerank", help="k-best re-ranked evaluation")
    r.add_argument("--mode", choices=pipeline.MODES, default="plain")
    common(r)

    common(sub.add_parser("augment-eval", help="data-generator experiment"))
    return p


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
        if args.seed is not None:
            if args.command == "gen-corpus":
                cfg = cfg.with_overrides(corpus_seed=args.seed)
            elif args.command == "train":
                key = {"tokenizer": "tokenizer_seed", "lm": "lm_seed",
                       "cfm": "flow_seed"}[args.stage]
                cfg = cfg.with_overrides(**{key: args.seed})
            elif args.command in ("evaluate", "rerank"):
                cfg = cfg.with_overrides(seeds=str(args.seed))

        if args.command == "gen-corpus":
            pipeline.cmd_gen_corpus(cfg, args.out)
        elif args.command == "train":
            pipeline.cmd_train(args.stage, cfg, args.out)
        elif args.command == "synthesize":
            text_ids = [int(t) for t in args.text.split()]
            pipeline.cmd_synthesize(cfg, args.out, args.mode, text_ids,
                                    lang=args.lang, style=args.style,
                                    prompt_split=args.prompt_split,
                                    prompt_index=args.prompt_index,
                                    seed=args.seed if args.seed is not None else 0,
                                    name=args.name)
        elif args.command == "evaluate":
            pipeline.cmd_evaluate(cfg, args.out, args.mode)
        elif args.command == "rerank":
            pipeline.cmd_rerank(cfg, args.out, args.mode)
        elif args.command == "augment-eval":
            pipeline.cmd_augment_eval(cfg, args.out)
    except (ConfigError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except pipeline.MissingArtifactError as e:
        print(f"missing artifact: {e}", file=sys.stderr)
        return 3
    except FloatingPointError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
