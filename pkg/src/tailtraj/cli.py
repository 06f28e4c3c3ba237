"""Command-line pipeline: gen | score | train | eval | export-embeddings | export-histogram | compare.

Exit codes: 0 success, 2 usage/config error, 3 I/O error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import config as C
from .data import SyntheticConfig, extract_samples, generate_synthetic, load_ethucy, split_samples, write_ethucy
from .difficulty import DifficultyTable, KalmanConfig, score_split
from .evaluation import ComparisonError, EvalReport, compare_runs, evaluate, export_embeddings, export_histogram
from .losses import LossConfig
from .model import CheckpointError, ModelConfig, read_checkpoint, save_checkpoint
from .trainer import CalibrationError, TrainConfig, train

log = logging.getLogger("tailtraj")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

SECTIONS = {
    "gen": ("gen", "data.dt"),
    "score": ("data", "kalman"),
    "train": ("data", "model", "loss", "train", "eval"),
    "eval": ("data", "eval"),
    "export-embeddings": ("data",),
    "export-histogram": (),
    "compare": (),
}


class UsageError(Exception):
    pass


def _keys_for(command):
    keys = []
    for sel in SECTIONS[command]:
        keys += [k for k in C.OPTION_MAP if k == sel or k.startswith(sel + ".")]
    return keys


def _add_options(parser, command):
    keys = _keys_for(command)
    if not keys:
        return
    parser.add_argument("--config", help="key = value config file (default: none)")
    group = parser.add_argument_group("configuration overrides")
    for key in keys:
        opt = C.OPTION_MAP[key]
        group.add_argument(
            f"--{key}", dest=f"cfg:{key}", metavar="VALUE", default=argparse.SUPPRESS,
            help=f"{opt.help} (default: {C._fmt(opt.default)})",
        )


def build_parser():
    p = argparse.ArgumentParser(prog="tailtraj", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr (default: off)")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic long-tailed scene")
    g.add_argument("--seed", type=int, default=0, help="generator seed (default: 0)")
    g.add_argument("--out", required=True, help="output ETH-UCY text file")
    _add_options(g, "gen")

    s = sub.add_parser("score", help="Kalman difficulty score for every extracted sample")
    s.add_argument("--data", required=True, help="ETH-UCY text file")
    s.add_argument("--out", required=True, help="output CSV (sample_id,score)")
    _add_options(s, "score")

    t = sub.add_parser("train", help="train a predictor")
    t.add_argument("--data", required=True, help="ETH-UCY text file")
    t.add_argument("--scores", required=True, help="difficulty CSV from 'tailtraj score'")
    t.add_argument("--out-dir", required=True, help="directory for checkpoints and run log")
    _add_options(t, "train")

    e = sub.add_parser("eval", help="min-ADE/min-FDE overall and on the hardest samples")
    e.add_argument("--checkpoint", required=True, help="checkpoint file")
    e.add_argument("--data", required=True, help="ETH-UCY text file")
    e.add_argument("--scores", required=True, help="difficulty CSV")
    e.add_argument("--split", default="test", choices=("train", "val", "test", "all"), help="split (default: test)")
    e.add_argument("--out", required=True, help="output report (JSON)")
    _add_options(e, "eval")

    x = sub.add_parser("export-embeddings", help="write embeddings as CSV")
    x.add_argument("--checkpoint", required=True, help="checkpoint file")
    x.add_argument("--data", required=True, help="ETH-UCY text file")
    x.add_argument("--scores", required=True, help="difficulty CSV")
    x.add_argument("--split", default="test", choices=("train", "val", "test", "all"), help="split (default: test)")
    x.add_argument("--out", required=True, help="output CSV")
    _add_options(x, "export-embeddings")

    hg = sub.add_parser("export-histogram", help="difficulty histogram as CSV")
    hg.add_argument("--scores", required=True, help="difficulty CSV")
    hg.add_argument("--bin-width", type=float, default=0.1, help="bin width in meters (default: 0.1)")
    hg.add_argument("--out", required=True, help="output CSV")

    c = sub.add_parser("compare", help="side-by-side table of eval reports")
    c.add_argument("reports", nargs="+", help="report files from 'tailtraj eval'")
    c.add_argument("--baseline", type=int, default=0, help="index of the baseline report (default: 0)")
    c.add_argument("--format", default="csv", choices=("csv", "markdown"), help="table format (default: csv)")
    c.add_argument("--out", required=True, help="output table")
    return p


def resolve_config(args, command, base_meta=None):
    """Defaults <- checkpoint meta (data keys only) <- config file <- flags."""
    file_values = C.read_config_file(args.config) if getattr(args, "config", None) else {}
    flags = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg:")}
    rc = C.resolve(file_values, flags, _keys_for(command))
    if base_meta:
        for key, value in base_meta.items():
            if key in rc.values and rc.provenance[key] == "default" and key.startswith("data."):
                rc.values[key] = C.OPTION_MAP[key].parse(value)
                rc.provenance[key] = "checkpoint"
    return rc


def _synthetic_config(rc):
    kw = rc.section("gen")
    kw["dt"] = rc["data.dt"]
    cfg = SyntheticConfig(**kw)
    try:
        cfg.validate()
    except ValueError as exc:
        field = str(exc).split(":", 1)[0].split("/")[0]
        raise C.ConfigError(f"gen.{field}", str(exc).split(":", 1)[-1].strip()) from None
    return cfg


def load_samples(path, rc):
    scene = load_ethucy(path, rc["data.dt"])
    step = rc["data.frame_step"] or None
    return extract_samples(scene, rc["data.h"], rc["data.M"], rc["data.neighbor_radius"], rc["data.max_neighbors"], step)


def split_of(samples, rc, which):
    if which == "all":
        return samples
    sp = split_samples(samples, rc["data.val_fraction"], rc["data.test_fraction"], rc["data.split_seed"])
    keep = set(getattr(sp, which))
    return [s for s in samples if s.sample_id in keep]


def build_train_config(rc):
    m = rc.section("model")
    model = ModelConfig(
        h=rc["data.h"], M=rc["data.M"], K=m["K"], embed_dim=m["embed_dim"], hidden_widths=m["hidden_widths"],
        use_neighbors=m["use_neighbors"], max_neighbors=rc["data.max_neighbors"], neighbor_width=m["neighbor_width"],
        decoder_widths=m["decoder_widths"],
    )
    lo = rc.section("loss")
    loss = LossConfig(
        tau=lo["tau"], lam=lo["lambda"], theta_p=lo["theta_p"], theta_n=lo["theta_n"],
        denominator_mode=lo["denominator_mode"], normalize_z=lo["normalize_z"], ewta_mode=lo["ewta_mode"],
        baseline=lo["baseline"], beta=lo["beta"], ldam_C=lo["ldam_C"], ldam_s=lo["ldam_s"],
    )
    t = rc.section("train")
    drw = t["drw_start_epoch"]
    if drw == "final":
        drw = (model.K - 1) * t["epochs_per_stage"]
    return TrainConfig(
        seed=t["seed"], batch_size=t["batch_size"], epochs_per_stage=t["epochs_per_stage"], lr=t["lr"],
        beta1=t["beta1"], beta2=t["beta2"], eps_adam=t["eps"], target_pos_ratio=t["target_pos_ratio"],
        target_neg_ratio=t["target_neg_ratio"], drw_start_epoch=drw, bin_width=t["bin_width"],
        tail_threshold=t["tail_threshold"], eval_percents=rc["eval.percents"], model=model, loss=loss,
    )


def _read_scores(path):
    if not Path(path).exists():
        raise UsageError(f"score file {path} not found; run 'tailtraj score' first")
    return DifficultyTable.from_csv(path)


def _require_file(path):
    if not Path(path).is_file():
        raise FileNotFoundError(f"{path}: no such file")


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args):
    rc = resolve_config(args, "gen")
    scene = generate_synthetic(_synthetic_config(rc), args.seed)
    write_ethucy(scene, args.out)
    log.info("wrote %d tracks to %s", len(scene.tracks), args.out)


def cmd_score(args):
    rc = resolve_config(args, "score")
    _require_file(args.data)
    samples = load_samples(args.data, rc)
    k = rc.section("kalman")
    try:
        kcfg = KalmanConfig(process_noise_std=k["process_noise_std"], obs_noise_std=k["obs_noise_std"], reduce=k["reduce"])
    except ValueError as exc:
        raise C.ConfigError("kalman", str(exc)) from None
    score_split(samples, kcfg, "all").to_csv(args.out)
    log.info("scored %d samples", len(samples))


def cmd_train(args):
    rc = resolve_config(args, "train")
    try:
        cfg = build_train_config(rc)
    except ValueError as exc:
        raise C.ConfigError("config", str(exc)) from None
    table = _read_scores(args.scores)
    _require_file(args.data)
    samples = load_samples(args.data, rc)
    missing = [s.sample_id for s in samples if s.sample_id not in table]
    if missing:
        raise UsageError(f"score file lacks {len(missing)} samples (e.g. {missing[0]}); re-run 'tailtraj score'")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_s = split_of(samples, rc, "train")
    val_s = split_of(samples, rc, "val")
    meta = {"config": rc.echo(), "provenance": rc.provenance}
    runlog_path = out / "runlog.jsonl"
    params, runlog = train(
        cfg, train_s, table, val_samples=val_s or None, val_table=table,
        log_path=runlog_path, checkpoint_dir=out, meta=meta,
    )
    # config echo heads the run log
    body = runlog_path.read_text()
    runlog_path.write_text(json.dumps({"config": rc.echo(), "train_config": runlog.config}) + "\n" + body)
    save_checkpoint(params, out / "final.ckpt", meta)
    (out / "config.txt").write_text(rc.to_text())


def _load_ckpt(path):
    _require_file(path)
    try:
        return read_checkpoint(path)
    except (CheckpointError, ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"invalid checkpoint: {exc}") from None


def cmd_eval(args):
    params, meta = _load_ckpt(args.checkpoint)
    rc = resolve_config(args, "eval", meta.get("config"))
    table = _read_scores(args.scores)
    _require_file(args.data)
    samples = split_of(load_samples(args.data, rc), rc, args.split)
    run_id = rc["eval.run_id"] or Path(args.checkpoint).parent.name
    echo = {"eval": rc.echo(), "train": meta.get("config", {}), "split": args.split, "checkpoint": str(args.checkpoint)}
    evaluate(params, samples, table, rc["eval.percents"], run_id, echo).save(args.out)


def cmd_export_embeddings(args):
    params, meta = _load_ckpt(args.checkpoint)
    rc = resolve_config(args, "export-embeddings", meta.get("config"))
    table = _read_scores(args.scores)
    _require_file(args.data)
    samples = split_of(load_samples(args.data, rc), rc, args.split)
    export_embeddings(params, samples, table, args.out)


def cmd_export_histogram(args):
    table = _read_scores(args.scores)
    if not args.bin_width > 0:
        raise C.ConfigError("bin-width", "must be > 0")
    export_histogram(table, args.bin_width, args.out)


def cmd_compare(args):
    reports = []
    for path in args.reports:
        _require_file(path)
        try:
            reports.append(EvalReport.load(path))
        except (ValueError, KeyError) as exc:
            raise UsageError(f"{path}: unreadable report ({exc})") from None
    try:
        table = compare_runs(reports, args.baseline)
    except ComparisonError as exc:
        raise UsageError(str(exc)) from None
    Path(args.out).write_text(table.to_csv() if args.format == "csv" else table.to_markdown())


COMMANDS = {
    "gen": cmd_gen,
    "score": cmd_score,
    "train": cmd_train,
    "eval": cmd_eval,
    "export-embeddings": cmd_export_embeddings,
    "export-histogram": cmd_export_histogram,
    "compare": cmd_compare,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        COMMANDS[args.command](args)
    except (C.ConfigError, UsageError, CalibrationError) as exc:
        print(f"tailtraj {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"tailtraj {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"tailtraj {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        # malformed input files and invalid parameter combinations
        print(f"tailtraj {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
