"""Command line entry point: ``loglm {synth,vocab,run,baseline,eval,matrix}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import metrics
from .baselines import baseline_run
from .config import ConfigError, RunConfig, _csv
from .ingest import LabelIndex, ParseStats, UserFilter, load_events, load_labels, partition_days
from .models import build_model, save_model
from .pipeline import PipelineConfig, ScoreWriter, read_event_csv, read_user_day_csv, run_online, write_user_day_csv
from .synth import generate_synthetic
from .tokenizer import Vocabulary, build_char_vocab, build_word_vocab

logger = logging.getLogger("loglm")


class CliError(RuntimeError):
    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(message)


def _require(path: str, key: str) -> Path:
    if not path:
        raise CliError(key, "path not set")
    p = Path(path)
    if not p.exists():
        raise CliError(key, f"file not found: {path}")
    return p


def event_days(cfg: RunConfig, with_labels: bool = True, stats: ParseStats | None = None):
    """Day-partitioned, filtered (and optionally labelled) event stream."""
    events = load_events(_require(cfg.run.events, "run.events"), stats)
    split = cfg.day_split()
    events = UserFilter(cfg.data.machine_pattern, split.skip_days)(events)
    if with_labels and cfg.run.labels:
        index = LabelIndex(load_labels(_require(cfg.run.labels, "run.labels")))
        events = index.apply(events)
    return partition_days(events)


def load_or_build_vocab(cfg: RunConfig) -> Vocabulary:
    if cfg.tokenizer.mode == "char":
        return build_char_vocab()
    if cfg.tokenizer.vocab:
        vocab = Vocabulary.load(_require(cfg.tokenizer.vocab, "tokenizer.vocab"))
        if vocab.mode != "word":
            raise CliError("tokenizer.vocab", "vocabulary file is not word-mode")
        return vocab
    lo, hi = cfg.vocab_days()
    window = (e for day, evs in event_days(cfg, with_labels=False) if lo <= day <= hi for e in evs)
    return build_word_vocab(window, cfg.tokenizer.min_count)


def cmd_synth(cfg: RunConfig) -> dict:
    out = Path(cfg.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    events_path = Path(cfg.run.events) if cfg.run.events else out / "auth.txt"
    labels_path = Path(cfg.run.labels) if cfg.run.labels else out / "redteam.txt"
    corpus = generate_synthetic(cfg.synth_config(), cfg.run.seed, events_path, labels_path)
    cfg.echo(out, "synth_config.ini")
    return {"events": str(events_path), "labels": str(labels_path), "n_events": len(corpus.events), "n_labels": len(corpus.labels)}


def cmd_vocab(cfg: RunConfig) -> dict:
    if cfg.tokenizer.mode != "word":
        raise CliError("tokenizer.mode", "vocab command builds word vocabularies; set tokenizer.mode = word")
    saved = cfg.tokenizer.vocab
    cfg.tokenizer.vocab = ""
    vocab = load_or_build_vocab(cfg)
    out = Path(saved) if saved else Path(cfg.run.out_dir) / "vocab.tsv"
    out.parent.mkdir(parents=True, exist_ok=True)
    vocab.save(out)
    return {"vocab": str(out), "size": vocab.size}


def run_model(cfg: RunConfig, out_dir: Path) -> dict:
    vocab = load_or_build_vocab(cfg)
    model = build_model(cfg.model_config(), vocab.size)
    pcfg = PipelineConfig(cfg.model.batch_size, cfg.model.score_batch_size, cfg.model.epochs, cfg.run.workers,
                          cfg.run.seed, cfg.pipeline.keep_per_token,
                          str(out_dir / "checkpoints") if cfg.pipeline.checkpoint else None)
    if pcfg.checkpoint_dir:
        Path(pcfg.checkpoint_dir).mkdir(parents=True, exist_ok=True)
    out_dir.mkdir(parents=True, exist_ok=True)
    vocab.save(out_dir / "vocab.tsv")
    stats = ParseStats()
    n_days = n_events = 0
    t0 = time.time()
    with ScoreWriter(out_dir) as writer:
        for result in run_online(model, event_days(cfg, stats=stats), vocab, pcfg):
            writer.write_day(result)
            n_days += 1
            n_events += len(result.events)
            logger.info("day %d done (%.0fs)", result.day, time.time() - t0)
    save_model(model, out_dir / "model_final.npz", seed=cfg.run.seed)
    return {"days": n_days, "events": n_events, "malformed": stats.malformed, "vocab_size": vocab.size,
            "seconds": round(time.time() - t0, 1)}


def cmd_run(cfg: RunConfig) -> dict:
    out = Path(cfg.run.out_dir)
    cfg.echo(out)
    return run_model(cfg, out)


def run_baseline(cfg: RunConfig, out_dir: Path) -> dict:
    schema = cfg.feature_schema()
    logger.info("feature dimension %d", schema.dim)
    scores = [s for day in baseline_run(event_days(cfg), cfg.baseline_config(), schema) for s in day]
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"user_day_{cfg.baseline.detector}.csv"
    write_user_day_csv(path, scores)
    return {"scores": str(path), "user_days": len(scores), "feature_dim": schema.dim}


def cmd_baseline(cfg: RunConfig) -> dict:
    out = Path(cfg.run.out_dir)
    cfg.echo(out, f"config_{cfg.baseline.detector}.ini")
    return run_baseline(cfg, out)


def _score_file(cfg: RunConfig, out_dir: Path) -> Path:
    if cfg.eval.scores:
        return _require(cfg.eval.scores, "eval.scores")
    if cfg.eval.source != "model":
        return _require(str(out_dir / f"user_day_{cfg.eval.source}.csv"), "eval.scores")
    if cfg.eval.granularity == "event":
        return _require(str(out_dir / "event_scores.csv"), "eval.scores")
    return _require(str(out_dir / f"user_day_{cfg.eval.normalization}.csv"), "eval.scores")


def load_scores(cfg: RunConfig, path: Path):
    """(days, scores, labels) restricted to the configured split."""
    with open(path, newline="") as fh:
        header = next(csv.reader(fh))
    if "ordinal" in header:
        rows = read_event_csv(path)
        col = cfg.eval.normalization
        days = np.array([r.day for r in rows])
        s = np.array([getattr(r, col) for r in rows])
        y = np.array([r.is_redteam for r in rows])
    else:
        rows = read_user_day_csv(path)
        days = np.array([r.day for r in rows])
        s = np.array([r.score for r in rows])
        y = np.array([r.is_redteam_day for r in rows])
    split = cfg.day_split()
    if cfg.eval.split == "all":
        keep = np.ones(len(days), bool)
    else:
        lo, hi = split.dev_days if cfg.eval.split == "dev" else split.test_days
        keep = (days >= lo) & (days <= hi)
    return days[keep], s[keep], y[keep]


def evaluate(cfg: RunConfig, path: Path, out_dir: Path, tag: str) -> dict:
    days, s, y = load_scores(cfg, path)
    report = {"scores": str(path), "split": cfg.eval.split}
    report.update(metrics.summarize(s, y, days, budgets=sorted({0.01, 0.03, 0.05, 0.12, cfg.eval.budget})))
    curve = metrics.roc_curve(s, y)
    with open(out_dir / f"roc_{tag}.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("fpr", "tpr", "threshold"))
        w.writerow((0.0, 0.0, "inf"))
        for f, t, th in zip(curve.fpr[1:], curve.tpr[1:], curve.thresholds):
            w.writerow((repr(float(f)), repr(float(t)), repr(float(th))))
    if cfg.eval.plots:
        from . import plotting

        plotting.plot_roc({tag: curve}, out_dir / f"roc_{tag}.png")
        if "event" in tag:
            plotting.plot_percentile_bands(days, s, y, out_dir / f"percentiles_{tag}.png")
    return report


def cmd_eval(cfg: RunConfig) -> dict:
    out = Path(cfg.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = _score_file(cfg, out)
    if cfg.eval.source != "model":
        tag = f"{cfg.eval.source}_user_day"
    else:
        tag = f"{cfg.eval.granularity}_{cfg.eval.normalization}"
    report = evaluate(cfg, path, out, tag)
    (out / f"metrics_{tag}.txt").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report


def cmd_matrix(cfg: RunConfig) -> dict:
    """Every variant x tokenization cell, AUC under event/day x raw/diff, plus baselines."""
    from . import plotting

    root = Path(cfg.run.out_dir)
    root.mkdir(parents=True, exist_ok=True)
    cfg.echo(root)
    columns = ("event_diff", "event_max", "day_diff", "day_max")
    table: dict[str, dict[str, float]] = {}
    curves = {}
    base = cfg.to_ini()
    for tok in _csv(cfg.matrix.tokenizations):
        for variant in _csv(cfg.matrix.variants):
            cell = RunConfig()
            cell.update(_ini_dict(base))
            cell.tokenizer.mode = tok
            cell.model.variant = variant
            cell.model.embed_dim = cell.model.hidden_dim = 0
            cell.model.lr = 0.0
            cell.resolve()
            cell_dir = root / f"{tok}_{variant}"
            cell.run.out_dir = str(cell_dir)
            cell.echo(cell_dir)
            logger.info("matrix cell %s %s", tok, variant)
            run_model(cell, cell_dir)
            name = f"{tok[0].upper()} {variant.upper()}"
            row = {}
            for col, (gran, norm) in zip(columns, (("event", "diff"), ("event", "raw"), ("user_day", "diff"), ("user_day", "raw"))):
                cell.eval.granularity, cell.eval.normalization = gran, norm
                d, s, y = load_scores(cell, _score_file(cell, cell_dir))
                row[col] = metrics.auc(s, y)
                if col == "day_diff":
                    row["day_diff_ap"] = metrics.average_percentile(s, y, d)
                if col in ("event_max", "day_diff"):
                    curves[f"{name} {col}"] = metrics.roc_curve(s, y)
            table[name] = row
    for det in _csv(cfg.matrix.baselines):
        cell = RunConfig()
        cell.update(_ini_dict(base))
        cell.baseline.detector = det
        cell.resolve()
        run_baseline(cell, root)
        d, s, y = load_scores(cell, root / f"user_day_{det}.csv")
        table[det] = {"day_max": metrics.auc(s, y), "day_diff_ap": metrics.average_percentile(s, y, d)}
        curves[det] = metrics.roc_curve(s, y)
    with open(root / "matrix.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("model",) + columns + ("day_diff_ap",))
        for name, row in table.items():
            w.writerow([name] + [f"{row[c]:.4f}" if c in row else "" for c in columns + ("day_diff_ap",)])
    (root / "matrix.txt").write_text(format_matrix(table, columns))
    plotting.plot_auc_bars(table, columns, root / "auc_comparison.png")
    plotting.plot_roc(curves, root / "roc_matrix.png")
    return {"cells": len(table), "table": str(root / "matrix.csv")}


def format_matrix(table, columns) -> str:
    head = f"{'model':<12}" + "".join(f"{c:>12}" for c in columns) + f"{'day AP':>10}"
    lines = [head, "-" * len(head)]
    for name, row in table.items():
        cells = "".join(f"{row[c]:>12.3f}" if c in row else f"{'-':>12}" for c in columns)
        ap = f"{row['day_diff_ap']:>10.1f}" if "day_diff_ap" in row else f"{'-':>10}"
        lines.append(f"{name:<12}{cells}{ap}")
    return "\n".join(lines) + "\n"


def _ini_dict(text: str) -> dict[str, dict[str, str]]:
    import configparser

    parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
    parser.optionxform = str
    parser.read_string(text)
    return {s: dict(parser.items(s)) for s in parser.sections()}


COMMANDS = {
    "synth": cmd_synth,
    "vocab": cmd_vocab,
    "run": cmd_run,
    "baseline": cmd_baseline,
    "eval": cmd_eval,
    "matrix": cmd_matrix,
}

# Convenience flags mapped onto config keys.
FLAGS = {
    "events": "run.events",
    "labels": "run.labels",
    "out": "run.out_dir",
    "seed": "run.seed",
    "workers": "run.workers",
    "variant": "model.variant",
    "tokenization": "tokenizer.mode",
    "vocab": "tokenizer.vocab",
    "detector": "baseline.detector",
    "granularity": "eval.granularity",
    "normalization": "eval.normalization",
    "scores": "eval.scores",
    "source": "eval.source",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="loglm", description="Online language-model anomaly detection for authentication logs.")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("-c", "--config", help="INI config file")
    parser.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override a config key")
    for flag, key in FLAGS.items():
        parser.add_argument(f"--{flag}", dest=flag, help=f"shorthand for --set {key}=...")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(name)s %(message)s")
    overrides = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            print(f"error key={key} message=expected SECTION.KEY=VALUE", file=sys.stderr)
            return 2
        overrides[key.strip()] = value.strip()
    for flag, key in FLAGS.items():
        value = getattr(args, flag)
        if value is not None:
            overrides[key] = value
    try:
        cfg = RunConfig.load(args.config, overrides)
        result = COMMANDS[args.command](cfg)
    except (ConfigError, CliError) as err:
        print(f"error key={err.key} message={err}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as err:
        print(f"error key=- message={err}", file=sys.stderr)
        return 1
    print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
