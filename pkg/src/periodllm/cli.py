"""periodllm command line: gen-data, train, eval, ablate, plot."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import shutil
import sys
import tempfile
from dataclasses import asdict, replace
from importlib import resources
from pathlib import Path

from . import config as config_mod
from . import experiments as ex
from .curriculum import CurriculumError, Model, Trainer, answer, evaluate, load_corpus, new_model, read_loss_csv
from .instruct import (
    TASKS,
    CorpusError,
    CorpusManifest,
    gen_modal_corpus,
    gen_text_repeat_qa,
    write_jsonl,
)
from .metrics import extract_number
from .plotting import align_curves, plot_ablation, plot_channel_weights, plot_loss_curves, smooth, write_merged_csv
from .rlo import RloError
from .signals import ConfigError

log = logging.getLogger("periodllm")

DESK_DATA_SEED = 1
EVAL_FIELDS = ["n", "mae", "rmse", "std", "extraction_failure_rate", "bleu1", "meteor", "cider",
               "cider_normalized", "exact_accuracy"]
ABLATION_FIELDS = ["setting", "value", "mae", "retention_delta", "stage_b_loss", "seeds", "error"]


class UsageError(Exception):
    pass


# -------------------------- helpers --------------------------


def _refuse_existing(paths, force: bool) -> None:
    existing = [str(p) for p in paths if Path(p).exists()]
    if existing and not force:
        raise UsageError(f"output exists (use --force to overwrite): {', '.join(existing)}")


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _atomic(path: Path, writer) -> None:
    """Run ``writer(tmp_path)`` then rename into place."""
    tmp = path.with_name(path.name + ".tmp" + path.suffix)
    try:
        writer(tmp)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def _echo(out: Path, command: str, args: argparse.Namespace, extra: str = "") -> None:
    lines = [f"command = {command}\n"]
    for k, v in sorted(vars(args).items()):
        if k in ("func", "command"):
            continue
        lines.append(f"arg.{k} = {v}\n")
    _atomic_write_text(out / f"{command}.echo", "".join(lines) + extra)


def _seed(args, default: int) -> int:
    return default if args.seed is None else args.seed


def _desk_cfg_text() -> str:
    return resources.files("periodllm").joinpath("configs/desk.cfg").read_text("utf-8")


def _load_config(args) -> config_mod.RunConfig:
    if args.config is None:
        raise UsageError("--config is required")
    return config_mod.load(args.config)


# -------------------------- gen-data --------------------------


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    if args.desk:
        return _gen_desk(args, out)
    if args.task is None or args.size is None:
        raise UsageError("gen-data needs --task and --size (or --desk)")
    seed = _seed(args, 0)
    manifest = CorpusManifest(args.task, args.size, seed, args.split,
                              extra={"holdout": args.holdout, "n_range": [args.n_min, args.n_max]})
    stem = f"{args.task}_{args.split}"
    corpus, man_path = out / f"{stem}.jsonl", out / f"{stem}.manifest.json"
    _refuse_existing([corpus, man_path], args.force)
    out.mkdir(parents=True, exist_ok=True)
    _echo(out, "gen-data", args)

    staging = Path(tempfile.mkdtemp(prefix=".staging-", dir=out))
    try:
        if args.task == "text_repeat":
            pairs = gen_text_repeat_qa(seed, args.size, args.split, holdout=args.holdout,
                                       n_range=(args.n_min, args.n_max))
        else:
            pairs = gen_modal_corpus(args.task, seed, args.size, staging / "seqs", args.split, ref_base=staging)
        write_jsonl(pairs, staging / corpus.name)
        (staging / man_path.name).write_text(json.dumps(asdict(manifest), indent=1, sort_keys=True) + "\n")
        seq_src = staging / "seqs"
        if seq_src.is_dir():
            (out / "seqs").mkdir(exist_ok=True)
            for f in sorted(seq_src.iterdir()):
                os.replace(f, out / "seqs" / f.name)
        os.replace(staging / man_path.name, man_path)
        os.replace(staging / corpus.name, corpus)
    finally:
        shutil.rmtree(staging, ignore_errors=True)
    print(f"wrote {len(pairs)} pairs to {corpus}")
    return 0


def _gen_desk(args, out: Path) -> int:
    names = ["text_repeat_train.jsonl", "text_repeat_test.jsonl", "macro_count_train.jsonl",
             "macro_count_test.jsonl", "desk.cfg"]
    _refuse_existing([out / n for n in names], args.force)
    out.mkdir(parents=True, exist_ok=True)
    _echo(out, "gen-data", args)
    staging = Path(tempfile.mkdtemp(prefix=".staging-", dir=out))
    try:
        ex.build_desk_corpora(staging, seed=_seed(args, DESK_DATA_SEED))
        (staging / "desk.cfg").write_text(_desk_cfg_text())
        (out / "seqs").mkdir(exist_ok=True)
        for f in sorted((staging / "seqs").iterdir()):
            os.replace(f, out / "seqs" / f.name)
        for n in names:
            os.replace(staging / n, out / n)
    finally:
        shutil.rmtree(staging, ignore_errors=True)
    print(f"wrote desk corpora and desk.cfg to {out}")
    return 0


# -------------------------- train --------------------------


def _train_out(args, cfg: config_mod.RunConfig) -> Path:
    if args.out is not None:
        return Path(args.out)
    if "out" in cfg.raw:
        return Path(args.config).parent / cfg.raw["out"]
    return Path("runs")


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed, settings=replace(cfg.settings, seed=args.seed))
    out = _train_out(args, cfg)
    loss_csv = out / "loss.csv"
    if args.resume is None:
        _refuse_existing([loss_csv, out / "run_log.json"], args.force)
    out.mkdir(parents=True, exist_ok=True)
    _atomic_write_text(out / "config.echo", cfg.echo() + f"seed.effective = {cfg.seed}\n")

    if args.resume is not None:
        trainer = Trainer.resume(args.resume, cfg.stages, cfg.settings, out)
    else:
        corpora = list(dict.fromkeys(s.corpus for s in cfg.stages))
        model = new_model(corpora, cfg.seed, **cfg.model)
        trainer = Trainer(model, cfg.stages, cfg.settings, out)
    trainer.run(max_steps=args.max_steps)
    if args.max_steps is not None and trainer.stage_idx < len(trainer.stages):
        trainer.save(out / "ckpt_partial")

    _atomic(loss_csv, trainer.log.write_loss_csv)
    _atomic_write_text(out / "run_log.json", json.dumps(trainer.log.summary(), indent=1, sort_keys=True) + "\n")
    if trainer.log.weight_dumps:
        _atomic(out / "channel_weights.csv", trainer.log.write_weights_csv)
        _atomic(out / "channel_weights.svg",
                lambda p: plot_channel_weights([w for _, _, w in trainer.log.weight_dumps], p))
    for stage, reports in trainer.log.evals.items():
        for name, rep in reports.items():
            print(f"{stage}/{name}: mae={rep.mae} exact={rep.exact_accuracy}")
    return 0


# -------------------------- eval --------------------------


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    if ckpt.is_dir():
        ckpt = ckpt / "model.pllm"
    out = Path(args.out)
    targets = [out / "eval.json", out / "eval.csv"]
    if args.debug_extraction:
        targets.append(out / "extraction_debug.jsonl")
    _refuse_existing(targets, args.force)
    model = Model.load(ckpt)
    out.mkdir(parents=True, exist_ok=True)
    _echo(out, "eval", args)

    report = evaluate(model, args.corpus, task=args.task, limit=args.limit, max_new=args.max_new)
    d = report.to_dict()
    _atomic_write_text(out / "eval.json", json.dumps(d, indent=1, sort_keys=True) + "\n")

    def write_row(p):
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["checkpoint", "corpus"] + EVAL_FIELDS)
            w.writerow([str(ckpt), str(args.corpus)] + ["" if d[k] is None else d[k] for k in EVAL_FIELDS])

    _atomic(out / "eval.csv", write_row)
    if args.debug_extraction:
        items = load_corpus(args.corpus, model.vocab, model.cfg.feat_dim)
        if args.task is not None:
            items = [e for e in items if e.pair.task == args.task]
        if args.limit is not None:
            items = items[: args.limit]
        lines = []
        for e in items:
            text = answer(model, e, args.max_new)
            x = extract_number(text)
            lines.append(json.dumps({"id": e.pair.id, "text": text, "span": x.span, "value": x.value,
                                     "key_count": e.pair.key_count}))
        _atomic_write_text(out / "extraction_debug.jsonl", "\n".join(lines) + "\n")
    print(json.dumps(d, sort_keys=True))
    return 0


# -------------------------- ablate --------------------------


def _csv_list(text: str | None, kind=str) -> list:
    if text is None:
        return []
    return [kind(x.strip()) for x in text.split(",") if x.strip()]


def cmd_ablate(args) -> int:
    betas = _csv_list(args.beta, float)
    modes = _csv_list(args.threshold)
    if not betas and not modes:
        raise UsageError("empty ablation grid: give --beta and/or --threshold values")
    cfg = _load_config(args)
    if len(cfg.stages) != 2:
        raise UsageError("ablate needs a two-stage config (easy stage, then the RLO stage)")
    seeds = _csv_list(args.seeds, int) or [_seed(args, cfg.seed)]
    out = Path(args.out)
    table, fig = out / "ablation.csv", out / "ablation.svg"
    _refuse_existing([table, fig], args.force)

    variants, groups = {}, []
    base = replace(cfg.rlo, enabled=True)
    for b in betas:
        variants[f"beta={b}"] = replace(base, beta=b)
    for m in modes:
        variants[f"threshold={m}"] = replace(base, threshold_mode=m)  # validated here, before any training
    if betas:
        groups.append(("beta", {f"beta={b}": b for b in betas}))
    if modes:
        groups.append(("threshold", {f"threshold={m}": m for m in modes}))

    out.mkdir(parents=True, exist_ok=True)
    _atomic_write_text(out / "config.echo", cfg.echo() + f"ablate.seeds = {seeds}\n")
    stage_a, stage_b = cfg.stages
    setup = ex.PairedSetup(stage_a, replace(stage_b, rlo=None), model_kwargs=cfg.model, settings=cfg.settings,
                           max_iter_given=cfg.rlo_max_iter_given)
    results = ex.paired_runs(setup, seeds, variants)
    rows = []
    for setting, values in groups:
        rows += ex.ablation_rows(results, setting, values)

    def write_table(p):
        with open(p, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=ABLATION_FIELDS)
            w.writeheader()
            for r in rows:
                w.writerow({k: ("" if r[k] is None else r[k]) for k in ABLATION_FIELDS})

    _atomic(table, write_table)
    _atomic(fig, lambda p: plot_ablation(rows, p))
    for r in rows:
        print(f"{r['setting']}={r['value']}: mae={r['mae']} {r['error']}".rstrip())
    failed = [r for r in rows if r["error"]]
    return 1 if failed else 0


# -------------------------- plot --------------------------


def _parse_log_arg(text: str) -> tuple[str, str]:
    label, sep, path = text.partition("=")
    if not sep:
        return Path(text).parent.name or Path(text).stem, text
    return label, path


def cmd_plot(args) -> int:
    if not args.log:
        raise UsageError("plot needs at least one --log [label=]path")
    if args.window < 1:
        raise UsageError("--window must be >= 1")
    out = Path(args.out)
    csv_path, svg_path = out / "loss_curves.csv", out / "loss_curves.svg"
    _refuse_existing([csv_path, svg_path], args.force)
    raw = {}
    for item in args.log:
        label, path = _parse_log_arg(item)
        rows = read_loss_csv(path)
        if args.stage is not None:
            rows = [r for r in rows if r[0] == args.stage]
        if not rows:
            raise UsageError(f"{path}: no loss rows" + (f" for stage {args.stage}" if args.stage else ""))
        if label in raw:
            raise UsageError(f"duplicate curve label {label!r}")
        raw[label] = [x for _, _, x in rows]
    raw = align_curves(raw)
    curves = {k: smooth(v, args.window) for k, v in raw.items()}
    out.mkdir(parents=True, exist_ok=True)
    _echo(out, "plot", args)
    _atomic(csv_path, lambda p: write_merged_csv(curves, p, raw=raw))
    _atomic(svg_path, lambda p: plot_loss_curves(curves, p, args.title))
    print(f"wrote {csv_path} and {svg_path}")
    return 0


# -------------------------- entry point --------------------------


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    # subcommands repeat the global flags; SUPPRESS keeps them from clobbering values given earlier
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--seed", type=int, default=d(None), help="global seed (default: per command / config)")
    parser.add_argument("--out", default=d(None), help="output directory")
    parser.add_argument("--force", action="store_true", default=d(False), help="overwrite existing outputs")
    parser.add_argument("--config", default=d(None), help="run config file (key = value)")
    parser.add_argument("-v", "--verbose", action="count", default=d(0))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)

    p = argparse.ArgumentParser(prog="periodllm", description=__doc__)
    _global_flags(p, suppress=False)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="generate QA corpora (and sequence files)")
    g.add_argument("--task", choices=TASKS)
    g.add_argument("--size", type=int)
    g.add_argument("--split", choices=("train", "val", "test"), default="train")
    g.add_argument("--holdout", action="store_true", help="text_repeat: keep held-out words out of train")
    g.add_argument("--n-min", type=int, default=2)
    g.add_argument("--n-max", type=int, default=20)
    g.add_argument("--desk", action="store_true", help="write the desk-scale corpora plus desk.cfg")
    g.set_defaults(func=cmd_gen_data, default_out="data")

    t = sub.add_parser("train", parents=[common], help="run the staged curriculum from a config")
    t.add_argument("--resume", default=None, help="checkpoint directory to continue from")
    t.add_argument("--max-steps", type=int, default=None, help="stop after this many updates")
    t.set_defaults(func=cmd_train, default_out=None)

    e = sub.add_parser("eval", parents=[common], help="score a checkpoint on a corpus")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--task", choices=TASKS, default=None)
    e.add_argument("--limit", type=int, default=None)
    e.add_argument("--max-new", type=int, default=32)
    e.add_argument("--debug-extraction", action="store_true", help="dump (text, span, value) per answer")
    e.set_defaults(func=cmd_eval, default_out="eval")

    a = sub.add_parser("ablate", parents=[common], help="paired retention runs over a beta/threshold grid")
    a.add_argument("--beta", default=None, help="comma-separated beta values")
    a.add_argument("--threshold", default=None, help="comma-separated threshold modes (mean, median)")
    a.add_argument("--seeds", default=None, help="comma-separated seeds (default: --seed or config seed)")
    a.set_defaults(func=cmd_ablate, default_out="ablation")

    pl = sub.add_parser("plot", parents=[common], help="overlay smoothed loss curves")
    pl.add_argument("--log", action="append", default=[], help="[label=]path to a loss.csv (repeatable)")
    pl.add_argument("--window", type=int, default=100, help="moving-average window (1 = raw)")
    pl.add_argument("--stage", default=None, help="only plot this stage's iterations")
    pl.add_argument("--title", default=None)
    pl.set_defaults(func=cmd_plot, default_out="plots")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    if args.out is None and args.default_out is not None:
        args.out = args.default_out
    try:
        return args.func(args)
    except (UsageError, config_mod.ConfigKeyError, CorpusError, CurriculumError, ConfigError, RloError) as exc:
        print(f"periodllm: error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"periodllm: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
