"""Command-line entry point.

Exit codes: 0 success, 1 config error, 2 data error, 3 training divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .chat_corpus import Label, load_corpus
from .config import ExperimentConfig, load_config, preset_names
from .errors import ConfigError, DataError, NonFiniteLoss, PromptClinicError

logger = logging.getLogger("promptclinic")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3


def _load_experiment(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    cfg = cfg.with_overrides(seed=args.seed, k=args.folds)
    if getattr(args, "corpus", None):
        data = cfg.to_dict()
        data["corpus"] = {"parsed": args.corpus}
        cfg = ExperimentConfig.from_dict(data)
    return cfg


def cmd_parse(args) -> int:
    corpus = load_corpus(args.input_dir, args.manifest, strict=args.strict, expect_adress=args.expect_adress)
    counts = corpus.label_counts
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(corpus.to_json(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
    print(f"{len(corpus)} transcripts (AD {counts[Label.AD]} / HC {counts[Label.HC]})")
    return EXIT_OK


def cmd_run(args) -> int:
    from .evaluation import run_cv, tune
    from .pipeline import corpus_from_config

    cfg = _load_experiment(args)
    corpus = corpus_from_config(cfg, strict=args.strict)
    out = Path(args.out or Path("runs") / cfg.name)
    if cfg.grid:
        cfg, search = tune(corpus, cfg)
        out.mkdir(parents=True, exist_ok=True)
        history = [{"point": p, "mean_cv_accuracy": s} for p, s in search.history]
        (out / "search.json").write_text(
            json.dumps({"best": search.best, "best_score": search.best_score, "history": history},
                       indent=2, sort_keys=True) + "\n", encoding="utf-8")
    result = run_cv(corpus, cfg)
    jpath, cpath = result.write(out)
    m = result.metrics
    print(f"{cfg.name}: accuracy {m.accuracy:.4f} (sd {m.acc_std_dev:.4f})  precision {m.precision:.4f}  "
          f"recall {m.recall:.4f}  F1 {m.f1:.4f} (sd {m.f1_std_dev:.4f})")
    print("fold accuracies: " + " ".join(f"{a:.3f}" for a in m.fold_accuracies))
    print(f"wrote {jpath} and {cpath}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .pipeline import corpus_from_config, train_final

    cfg = _load_experiment(args)
    corpus = corpus_from_config(cfg, strict=args.strict)
    path = train_final(cfg, corpus, args.out)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_predict(args) -> int:
    from .pipeline import predict_text

    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise DataError(f"checkpoint not found: {ckpt}")
    if args.file:
        text = Path(args.file).read_text(encoding="utf-8")
    else:
        text = args.text or ""
    pred = predict_text(ckpt, text.lower())
    if args.json:
        print(json.dumps(pred.to_dict(), sort_keys=True))
    else:
        print(f"label {pred.label.value}  score_AD {pred.score_ad:.6f}  score_HC {pred.score_hc:.6f}  tie {pred.tie}")
    return EXIT_OK


def cmd_presets(args) -> int:
    for name in preset_names():
        print(name)
    return EXIT_OK


def cmd_synth(args) -> int:
    from .synthetic import make_corpus, write_chat_corpus

    manifest = write_chat_corpus(make_corpus(args.n, args.seed), args.out)
    print(f"wrote {args.n} transcripts and {manifest}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="promptclinic", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("parse", help="parse and clean a directory of CHAT files")
    p.add_argument("input_dir")
    p.add_argument("--manifest", required=True, help="CSV with header id,label")
    p.add_argument("--out", required=True, help="output corpus JSON")
    p.add_argument("--strict", action="store_true", help="fail on any malformed file")
    p.add_argument("--expect-adress", action="store_true", help="require 108 transcripts, 54 per label")
    p.set_defaults(func=cmd_parse)

    for name, func, help_ in (("run", cmd_run, "10-fold cross-validation for one experiment"),
                              ("train", cmd_train, "train on the whole corpus and save a checkpoint")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="YAML file or preset name")
        p.add_argument("--seed", type=int)
        p.add_argument("--folds", type=int, help="override k (smoke runs)")
        p.add_argument("--corpus", help="parsed corpus JSON (overrides the config's corpus)")
        p.add_argument("--strict", action="store_true")
        p.add_argument("--out", required=(name == "train"),
                       help="report directory" if name == "run" else "checkpoint path")
        p.set_defaults(func=func)

    p = sub.add_parser("predict", help="classify one document with a saved checkpoint")
    p.add_argument("--checkpoint", required=True)
    src = p.add_mutually_exclusive_group()
    src.add_argument("--text")
    src.add_argument("--file")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("presets", help="list shipped experiment presets")
    p.set_defaults(func=cmd_presets)

    p = sub.add_parser("synth", help="write the synthetic toy corpus as CHAT files")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .evaluation import FoldFailed

    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FoldFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED if isinstance(exc.cause, NonFiniteLoss) else EXIT_DATA
    except NonFiniteLoss as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, OSError, ValueError, PromptClinicError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
