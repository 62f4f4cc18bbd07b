"""Command-line interface.

Subcommands mirror the pipeline stages: train, attack, prune, quantize,
finetune, eval, pipeline, sweep, export-features, report. All commands
read a JSON experiment config (--config) with optional --preset
{paper,desk}, --seed and --out overrides. Exit code is nonzero with the
failing stage named on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict

import numpy as np

from . import nn, prune, quant
from .attack import AttackConfig, evaluate, train_adversarial
from .experiment import (ExperimentConfig, RunReport, StageError,
                         calibration_images, export_features, load_datasets,
                         report_table, run_pipeline, sweep)
from .seeds import derive_seed
from .train import TrainConfig, finetune, log_to_csv, train_standard


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="experiment config JSON path")
    p.add_argument("--out", help="output directory")
    p.add_argument("--preset", choices=["paper", "desk"])
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, default=1,
                   help="reserved; execution is single-threaded")


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_json(args.config) if args.config else ExperimentConfig()
    if args.preset:
        cfg.apply_preset(args.preset)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out:
        cfg.out_dir = args.out
    return cfg


def _save_model(model, cfg, name: str) -> str:
    os.makedirs(cfg.out_dir, exist_ok=True)
    path = os.path.join(cfg.out_dir, name)
    nn.save(model, path)
    return path


def cmd_train(args) -> int:
    cfg = _load_config(args)
    train, _ = load_datasets(cfg)
    model = nn.build_small_cnn(derive_seed(cfg.seed, "init"))
    tcfg = TrainConfig(epochs=cfg.train_epochs, batch_size=cfg.batch_size,
                       seed=derive_seed(cfg.seed, "train"))
    if cfg.train_mode == "adversarial":
        atk = AttackConfig(eps=cfg.eps, step_size=cfg.attack_step_size,
                           steps=cfg.attack_steps_train,
                           seed=derive_seed(cfg.seed, "train-attack"))
        _, log = train_adversarial(model, train, tcfg, atk)
    else:
        _, log = train_standard(model, train, tcfg)
    path = _save_model(model, cfg, "trained.model")
    with open(os.path.join(cfg.out_dir, "train_log.csv"), "w") as f:
        f.write(log_to_csv(log))
    print(path)
    return 0


def cmd_attack(args) -> int:
    cfg = _load_config(args)
    model = nn.load(args.model)
    _, test = load_datasets(cfg)
    atk = AttackConfig(eps=cfg.eps, step_size=cfg.attack_step_size,
                       steps=cfg.attack_steps_eval,
                       seed=derive_seed(cfg.seed, "eval-attack"))
    report = evaluate(model, test, atk)
    print(report.to_json(atk, model.param_digest()))
    return 0


cmd_eval = cmd_attack


def cmd_prune(args) -> int:
    cfg = _load_config(args)
    model = nn.load(args.model)
    plan = prune.plan_prune(model, cfg.prune_ratio)
    pruned = prune.apply_prune(model, plan)
    path = _save_model(pruned, cfg, "pruned.model")
    with open(os.path.join(cfg.out_dir, "prune_plan.json"), "w") as f:
        f.write(plan.to_json())
    print(path)
    return 0


def cmd_quantize(args) -> int:
    cfg = _load_config(args)
    model = nn.load(args.model)
    train, _ = load_datasets(cfg)
    calib = calibration_images(train, derive_seed(cfg.seed, "calib"))
    qmodel = quant.ptq_calibrate(model, calib, cfg.quant_bits)
    os.makedirs(cfg.out_dir, exist_ok=True)
    with open(os.path.join(cfg.out_dir, "schemes.json"), "w") as f:
        f.write(qmodel.schemes_json())
    path = _save_model(model, cfg, "quantized.model")
    print(path)
    return 0


def cmd_finetune(args) -> int:
    cfg = _load_config(args)
    model = nn.load(args.model)
    train, _ = load_datasets(cfg)
    atk = AttackConfig(eps=cfg.eps, step_size=cfg.attack_step_size,
                       steps=cfg.attack_steps_train,
                       seed=derive_seed(cfg.seed, "finetune-attack"))
    model, log = finetune(model, train, args.preset_name,
                          epochs=cfg.finetune_epochs, attack_config=atk,
                          seed=derive_seed(cfg.seed, "finetune"),
                          batch_size=cfg.batch_size)
    path = _save_model(model, cfg, "finetuned.model")
    with open(os.path.join(cfg.out_dir, "finetune_log.csv"), "w") as f:
        f.write(log_to_csv(log))
    print(path)
    return 0


def cmd_pipeline(args) -> int:
    cfg = _load_config(args)
    report = run_pipeline(cfg)
    print(report.to_json())
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    levels = ([float(v) for v in args.levels.split(",")] if args.axis == "ratio"
              else [int(v) for v in args.levels.split(",")])
    os.makedirs(cfg.out_dir, exist_ok=True)
    out_csv = os.path.join(cfg.out_dir, f"sweep_{args.axis}.csv")
    sweep(cfg, args.axis, levels, out_csv, figures=not args.no_figures)
    print(out_csv)
    return 0


def cmd_export_features(args) -> int:
    cfg = _load_config(args)
    model = nn.load(args.model)
    _, test = load_datasets(cfg)
    taps = [int(t) for t in args.taps.split(",")]
    atk = None
    if not args.no_attack:
        atk = AttackConfig(eps=cfg.eps, step_size=cfg.attack_step_size,
                           steps=cfg.attack_steps_eval,
                           seed=derive_seed(cfg.seed, "feature-attack"))
    if args.label is not None:
        keep = test.labels == args.label
        from .data import Dataset
        test = Dataset(test.images[keep].copy(), test.labels[keep].copy(),
                       split=test.split)
    paths = export_features(model, test, taps, atk, cfg.out_dir)
    print("\n".join(paths))
    return 0


def cmd_report(args) -> int:
    reports = []
    for path in args.reports:
        with open(path) as f:
            reports.append(RunReport.from_json(f.read()))
    fig = None if args.no_figures else (args.out_csv.rsplit(".", 1)[0] + ".png")
    text, csv = report_table(reports, figures_path=fig)
    with open(args.out_csv, "w") as f:
        f.write(csv)
    print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="robustcomp",
        description="Train, compress, fine-tune and attack small CNNs.")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, fn in [("train", cmd_train), ("pipeline", cmd_pipeline)]:
        p = sub.add_parser(name)
        _add_common(p)
        p.set_defaults(fn=fn)

    for name, fn in [("attack", cmd_attack), ("eval", cmd_eval),
                     ("prune", cmd_prune), ("quantize", cmd_quantize)]:
        p = sub.add_parser(name)
        _add_common(p)
        p.add_argument("--model", required=True, help="model file path")
        p.set_defaults(fn=fn)

    p = sub.add_parser("finetune")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--preset-name", required=True,
                   choices=["prune-std", "prune-adv", "quant-std", "quant-adv"])
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("sweep")
    _add_common(p)
    p.add_argument("--axis", required=True, choices=["ratio", "bits"])
    p.add_argument("--levels", required=True,
                   help="comma-separated levels, e.g. 0.1,0.2 or 16,8,4")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("export-features")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--taps", default="6,7,8")
    p.add_argument("--label", type=int, help="restrict to one class index")
    p.add_argument("--no-attack", action="store_true")
    p.set_defaults(fn=cmd_export_features)

    p = sub.add_parser("report")
    p.add_argument("reports", nargs="+", help="run report JSON files")
    p.add_argument("--out-csv", default="report_table.csv")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(fn=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except StageError as e:
        print(f"error in stage {e.stage}: {e.cause}", file=sys.stderr)
        return 2
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
