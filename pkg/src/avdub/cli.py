"""Command-line entry point: ``avdub <subcommand> ...``.

Exit codes: 0 success, 2 configuration or usage error, 3 runtime failure
(a manifest with ``"status": "failed"`` is still written to the output dir).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig, load_config
from .corpus import Corpus, load_corpus, load_pair, save_corpus, save_pair
from .duration import LOSS_MODES, finetune_duration, pretrain_duration
from .experiments import (SeedRun, ablation_markdown, build_world, eval_options, finetune_config,
                          load_model, pretrain_config, run_ablation_table3, run_paper, save_model,
                          translator_config, write_manifest, write_reports)
from .metrics import MetricReport, evaluate_system, markdown_table
from .plots import plot_loss_curve, plot_offset_curve
from .sync_expert import train_sync_expert
from .translator import train_translator

log = logging.getLogger("avdub")

STAGES = ("sync", "translator", "duration-pretrain")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- helpers

def resolve(args) -> tuple[ExperimentConfig, int]:
    """Config file + env + flags; the first seed is the one single-run commands use."""
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.seeds = [args.seed]
    if getattr(args, "out", None):
        cfg.output_dir = str(args.out)
    return cfg, cfg.seeds[0]


def out_dir(cfg: ExperimentConfig, sub: str | None = None) -> Path:
    d = Path(cfg.output_dir) / sub if sub else Path(cfg.output_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d


def read_corpus_dir(path) -> tuple:
    if path is None:
        raise UsageError("--corpus is required")
    d = Path(path)
    files = [d / "pair.json", d / "train.jsonl", d / "test.jsonl"]
    missing = [str(f) for f in files if not f.exists()]
    if missing:
        raise UsageError(f"corpus not found: missing {', '.join(missing)}")
    return load_pair(files[0]), Corpus(load_corpus(files[1]), load_corpus(files[2]))


def need_file(path, flag: str) -> Path:
    if path is None:
        raise UsageError(f"{flag} is required")
    if not Path(path).exists():
        raise UsageError(f"{flag}: file not found: {path}")
    return Path(path)


def finish(cfg: ExperimentConfig, d: Path) -> None:
    cfg.save(d / "config.json")
    write_manifest(d)


# ---------------------------------------------------------------- commands

def cmd_gen_corpus(args) -> None:
    cfg, seed = resolve(args)
    pair, corpus = build_world(cfg, seed)
    d = out_dir(cfg)
    save_pair(pair, d / "pair.json")
    save_corpus(corpus.train, d / "train.jsonl")
    save_corpus(corpus.test, d / "test.jsonl")
    finish(cfg, d)
    print(f"wrote {len(corpus.train)} train + {len(corpus.test)} test samples to {d}")


def cmd_train(args) -> None:
    cfg, seed = resolve(args)
    pair, corpus = read_corpus_dir(args.corpus)
    if args.stage == "sync":
        s = cfg.sync_expert
        model = train_sync_expert(corpus.train, pair, steps=s.steps, batch=s.batch, lr=s.lr, seed=seed)
    elif args.stage == "translator":
        model = train_translator(corpus.train, pair.vocab_size, translator_config(cfg), seed=seed)
    else:
        model = pretrain_duration(corpus.train, pair, pretrain_config(cfg), seed=seed)
    d = out_dir(cfg)
    name = args.stage.replace("-", "_")
    save_model(d / f"{name}.ckpt", model)
    (d / f"{name}_loss.csv").write_text(model.log.to_csv(), encoding="utf-8")
    if not args.no_plots:
        plot_loss_curve(model.log, d / f"{name}_loss.svg", title=args.stage)
    finish(cfg, d)
    print(f"wrote {d / (name + '.ckpt')}")


def cmd_finetune(args) -> None:
    cfg, seed = resolve(args)
    if args.losses not in LOSS_MODES:
        raise UsageError(f"--losses must be one of {', '.join(LOSS_MODES)}")
    if args.lam is not None:
        if args.lam < 0:
            raise UsageError("--lambda must be >= 0")
        cfg.duration.lam = args.lam
    if args.steps is not None:
        cfg.duration.steps = args.steps
    pair, corpus = read_corpus_dir(args.corpus)
    init_model = None
    if args.init == "pretrained":
        init_model = load_model(need_file(args.init_checkpoint, "--init-checkpoint"), "duration")
    expert = None
    if args.losses != "dur_only":
        expert = load_model(need_file(args.expert, "--expert"), "sync_expert")
    config = finetune_config(cfg, seed, args.init, args.losses)
    translator = None
    if config.target_source == "translator":
        translator = load_model(need_file(args.translator, "--translator"), "translator")
    model = finetune_duration(init_model, expert, corpus.train, pair, config, translator)
    d = out_dir(cfg)
    save_model(d / "duration_finetuned.ckpt", model)
    (d / "duration_finetuned_loss.csv").write_text(model.log.to_csv(), encoding="utf-8")
    if not args.no_plots:
        plot_loss_curve(model.log, d / "duration_finetuned_loss.svg", title=f"{args.init} / {args.losses}")
    finish(cfg, d)
    print(f"wrote {d / 'duration_finetuned.ckpt'}")


def cmd_evaluate(args) -> None:
    cfg, seed = resolve(args)
    if args.report and not args.out:
        cfg.output_dir = str(Path(args.report).parent)
    if args.duration_mode:
        cfg.eval.duration_mode = args.duration_mode
    if args.plots_n is not None:
        cfg.eval.plots = args.plots_n
    pair, corpus = read_corpus_dir(args.corpus)
    test = corpus.test if cfg.eval.n_test is None else corpus.test[:cfg.eval.n_test]
    expert = load_model(need_file(args.expert, "--expert"), "sync_expert")
    translator = duration = None
    if args.unit_source == "translator":
        translator = load_model(need_file(args.translator, "--translator"), "translator")
    if args.unit_source != "source" and args.duration_source == "model":
        duration = load_model(need_file(args.duration, "--duration"), "duration")
    opts = eval_options(cfg, unit_source=args.unit_source, duration_source=args.duration_source)
    report = evaluate_system(test, pair, translator, duration, expert, opts, args.system, seed)
    report_path = Path(args.report) if args.report else out_dir(cfg) / "report.json"
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report_path.write_text(report.to_json(), encoding="utf-8")
    report_path.with_suffix(".md").write_text(markdown_table([report]), encoding="utf-8")
    if not args.no_plots:
        plot_dir = Path(args.plots) if args.plots else report_path.parent / "plots"
        plot_dir.mkdir(parents=True, exist_ok=True)
        for sid, curve in report.notes.get("offset_curves", {}).items():
            plot_offset_curve(curve, plot_dir / f"offset_{sid}.svg", title=f"{args.system}: {sid}",
                              max_offset=cfg.eval.max_offset)
    finish(cfg, out_dir(cfg))
    agg = report.aggregate()
    print(f"{args.system}: LSE-D {agg['lse_d']['mean']:.4f}  LSE-C {agg['lse_c']['mean']:.4f}  "
          f"({len(report.samples)} samples, {len(report.failures)} failures)")


def cmd_ablate(args) -> None:
    cfg, _ = resolve(args)
    d = out_dir(cfg)
    runs = [SeedRun(cfg, s, d) for s in cfg.seeds]
    table = run_ablation_table3(cfg, runs)
    for r in runs:
        write_reports(r, ("LS+D FT", "LS+D", "LS FT"), d)
    text = ablation_markdown(table)
    (d / "table3.md").write_text(text, encoding="utf-8")
    finish(cfg, d)
    print(text, end="")


def cmd_run_paper(args) -> None:
    cfg, _ = resolve(args)
    text, _ = run_paper(cfg, out_dir(cfg))
    print(text, end="")


def cmd_report(args) -> None:
    reports = []
    for path in args.reports:
        p = need_file(path, "report")
        try:
            reports.append(MetricReport.from_dict(json.loads(p.read_text(encoding="utf-8"))))
        except (ValueError, KeyError) as e:
            raise UsageError(f"{p}: not a valid report ({e})") from None
    text = markdown_table(reports, keys=("lse_c", "lse_d", "lsd", "unit_bleu", "length_drift"))
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    print(text, end="")


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="avdub", description="Synthetic audio-visual dubbing experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--config", help="experiment config JSON (defaults when omitted)")
        p.add_argument("--seed", type=int, help="run seed; overrides config and AVS2S_SEED")
        if out:
            p.add_argument("--out", help="output directory (overrides output_dir)")
        return p

    p = common(sub.add_parser("gen-corpus", help="write pair.json, train.jsonl and test.jsonl"))
    p.set_defaults(func=cmd_gen_corpus)

    p = common(sub.add_parser("train", help="train one model stage"))
    p.add_argument("--stage", required=True, choices=STAGES)
    p.add_argument("--corpus", help="directory written by gen-corpus")
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("finetune", help="fine-tune the duration predictor"))
    p.add_argument("--corpus")
    p.add_argument("--init", choices=("pretrained", "scratch"), default="pretrained")
    p.add_argument("--init-checkpoint", help="pretrained duration checkpoint (for --init pretrained)")
    p.add_argument("--expert", help="sync expert checkpoint")
    p.add_argument("--translator", help="translator checkpoint (when duration.target_source is translator)")
    p.add_argument("--losses", default="sync+dur", help=f"one of {', '.join(LOSS_MODES)}")
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_finetune)

    p = common(sub.add_parser("evaluate", help="score one system on the test split"))
    p.add_argument("--corpus")
    p.add_argument("--system", default="system", help="name recorded in the report")
    p.add_argument("--expert")
    p.add_argument("--translator")
    p.add_argument("--duration")
    p.add_argument("--unit-source", choices=("translator", "ground_truth", "source"), default="translator")
    p.add_argument("--duration-source", choices=("model", "ground_truth"), default="model")
    p.add_argument("--duration-mode", choices=("free", "length_locked"))
    p.add_argument("--report", help="report JSON path (markdown is written beside it)")
    p.add_argument("--plots", help="directory for offset-curve SVGs")
    p.add_argument("--plots-n", type=int, help="number of samples to plot")
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = common(sub.add_parser("ablate-table3", help="loss/initialisation ablation over all seeds"))
    p.set_defaults(func=cmd_ablate)

    p = common(sub.add_parser("run-paper", help="full pipeline with summary markdown"))
    p.set_defaults(func=cmd_run_paper)

    p = sub.add_parser("report", help="render report JSON files as a markdown table")
    p.add_argument("reports", nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ConfigError, UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - runtime failures map to exit code 3
        log.exception("command failed")
        target = getattr(args, "out", None) or _output_dir_or_none(args)
        if target and Path(target).is_dir():
            write_manifest(target, status="failed", error=f"{type(e).__name__}: {e}")
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 3
    return 0


def _output_dir_or_none(args) -> str | None:
    try:
        return load_config(getattr(args, "config", None)).output_dir
    except ConfigError:
        return None


if __name__ == "__main__":
    sys.exit(main())
