"""Command-line surface.

Exit codes: 0 success, 1 validation/contract failure (including training
divergence and a failing gradcheck), 2 I/O and data-format errors.
"""

from __future__ import annotations

import argparse
import json
import sys

from .config import default_config, load_config
from .data import generate_corpus, load_corpus, save_corpus
from .exceptions import ContractError, DataError, NonFiniteError
from . import trainer


def _cfg(path):
    return load_config(path) if path else default_config()


def cmd_gen_data(args):
    cfg = _cfg(args.config)
    corpus = generate_corpus(cfg.corpus)
    save_corpus(corpus, args.out)
    print(f"wrote corpus to {args.out} "
          f"(train={len(corpus.train)}, dev={len(corpus.dev)}, test={len(corpus.test)})")
    return 0


def cmd_pretrain(args):
    cfg = _cfg(args.config)
    corpus = load_corpus(args.data)
    path = trainer.pretrain(cfg, corpus, args.out, lam=args.lam)
    print(f"best pretrain checkpoint: {path}")
    return 0


def cmd_finetune(args):
    cfg = _cfg(args.config)
    corpus = load_corpus(args.data)
    init = None if args.random_init else args.init
    path = trainer.finetune(cfg, corpus, args.out, init_ckpt=init)
    print(f"best finetune checkpoint: {path}")
    return 0


def cmd_translate(args):
    print(trainer.translate_features(args.ckpt, args.features))
    return 0


def cmd_evaluate(args):
    report = trainer.evaluate_checkpoint(args.ckpt, args.data, args.split, args.out)
    print(json.dumps(report.to_dict(), sort_keys=True))
    return 0


def cmd_gradcheck(args):
    cfg = _cfg(args.config)
    report, ok = trainer.run_gradcheck(seed=cfg.train.seed)
    for name in sorted(report):
        print(f"{'ok  ' if report[name] <= 1e-4 else 'FAIL'} {name}: max rel err {report[name]:.3e}")
    if not ok:
        print("gradcheck FAILED", file=sys.stderr)
        return 1
    print("gradcheck passed")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="hialign",
                                description="hierarchical video-text alignment and translation")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="synthesize a corpus")
    g.add_argument("--config", default=None)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen_data)

    g = sub.add_parser("pretrain", help="alignment + localization pre-training")
    g.add_argument("--config", default=None)
    g.add_argument("--data", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--lambda", dest="lam", type=float, default=None)
    g.set_defaults(fn=cmd_pretrain)

    g = sub.add_parser("finetune", help="two-stage translation fine-tuning")
    g.add_argument("--config", default=None)
    g.add_argument("--data", required=True)
    g.add_argument("--out", required=True)
    init = g.add_mutually_exclusive_group(required=True)
    init.add_argument("--init", default=None, help="pretrain checkpoint to start from")
    init.add_argument("--random-init", action="store_true", help="ablation: skip pre-training")
    g.set_defaults(fn=cmd_finetune)

    g = sub.add_parser("translate", help="decode one feature file")
    g.add_argument("--ckpt", required=True)
    g.add_argument("--features", required=True)
    g.set_defaults(fn=cmd_translate)

    g = sub.add_parser("evaluate", help="score a split with BLEU/ROUGE-L")
    g.add_argument("--ckpt", required=True)
    g.add_argument("--data", required=True)
    g.add_argument("--split", required=True, choices=["dev", "test"])
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_evaluate)

    g = sub.add_parser("gradcheck", help="finite-difference check of all losses")
    g.add_argument("--config", default=None)
    g.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ContractError, NonFiniteError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (DataError, OSError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
