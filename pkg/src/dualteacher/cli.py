"""Command-line entry point.

Subcommands:
  run       train one experiment from a JSON config into a run directory
  schedule  write the domain/teacher/lambda trace CSV without training
  ablate    run named variants across seeds and tabulate target mAP
  eval      score a checkpoint against a dumped dataset directory

A run directory contains config.norm.json, metrics.jsonl, schedule.csv,
eval_final.json, checkpoints/, and data/target_test/ (so `eval` can
reproduce the run's final numbers). Re-running the same config into a
fresh directory reproduces every byte.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import trainer as trainer_mod
from .config import (
    LAMBDA_DYNAMIC,
    LAMBDA_FIXED,
    REGIME_SOURCE_ONLY,
    REGIMES,
    ExperimentConfig,
    dump_config,
    load_config,
    with_seed,
)
from .detector import DecodeConfig, load_checkpoint, save_checkpoint
from .errors import DualTeacherError
from .evaluation import evaluate
from .scenes import load_dataset, save_dataset
from .schedule import fixed_mode, write_schedule_csv

_CHECKPOINT_NAMES = {"student": "student", "teacher_rgb": "teacher_rgb", "teacher_thr": "teacher_thr"}


def _write_run_outputs(out_dir: Path, cfg: ExperimentConfig, datasets, result) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out_dir / "config.norm.json")
    (out_dir / "metrics.jsonl").write_text(
        trainer_mod.serialize_metric_rows(result.state.metric_log), encoding="utf-8"
    )
    write_schedule_csv(
        cfg.trainer.zigzag, cfg.trainer.lambda_value, out_dir / "schedule.csv"
    )
    (out_dir / "eval_final.json").write_text(
        json.dumps(
            {"model": result.deployed, **result.final_report.to_dict()},
            sort_keys=True,
            separators=(",", ":"),
        )
        + "\n",
        encoding="utf-8",
    )
    ckpt_dir = out_dir / "checkpoints"
    save_checkpoint(ckpt_dir / "student.ckpt", result.state.student, cfg.detector)
    bank = result.state.teachers
    if bank is not None:
        save_checkpoint(ckpt_dir / "teacher_rgb.ckpt", bank.rgb_teacher, cfg.detector)
        save_checkpoint(ckpt_dir / "teacher_thr.ckpt", bank.thermal_teacher, cfg.detector)
    save_dataset(out_dir / "data" / "target_test", datasets.target_test)


def _resolve_out(cfg: ExperimentConfig, out_flag: str | None) -> Path:
    if out_flag:
        return Path(out_flag)
    if cfg.output_dir:
        return Path(cfg.output_dir)
    raise DualTeacherError("no output directory: pass --out or set output_dir in the config")


def _load_with_overrides(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = with_seed(cfg, args.seed)
    return cfg


def _run_one(cfg: ExperimentConfig, out_dir: Path) -> trainer_mod.RunResult:
    datasets = trainer_mod.build_datasets(cfg)
    result = trainer_mod.run(cfg, datasets)
    cfg_written = dataclasses.replace(cfg, output_dir=str(out_dir))
    _write_run_outputs(out_dir, cfg_written, datasets, result)
    return result


def _cmd_run(args) -> int:
    cfg = _load_with_overrides(args)
    out_dir = _resolve_out(cfg, args.out)
    result = _run_one(cfg, out_dir)
    if not args.quiet:
        print(f"run complete: regime={cfg.regime} seed={cfg.seed} out={out_dir}")
        print(f"deployed={result.deployed} target_map={result.final_report.map:.4f}")
    return 0


def _cmd_schedule(args) -> int:
    cfg = _load_with_overrides(args)
    out_dir = _resolve_out(cfg, args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "schedule.csv"
    write_schedule_csv(cfg.trainer.zigzag, cfg.trainer.lambda_value, path)
    if not args.quiet:
        print(f"schedule trace written to {path}")
    return 0


def apply_variant(cfg: ExperimentConfig, token: str) -> ExperimentConfig:
    """Variant tokens: a regime name, fixed=<k>, or lambda=<dynamic|value>."""
    if token in REGIMES:
        return config_mod.with_regime(cfg, token)
    if token.startswith("fixed="):
        k = int(token.split("=", 1)[1])
        zz = fixed_mode(k, cfg.trainer.total_iterations, cfg.trainer.burn_in_iterations)
        return dataclasses.replace(
            config_mod.with_regime(cfg, "d3t"),
            trainer=dataclasses.replace(cfg.trainer, zigzag=zz),
        )
    if token.startswith("lambda="):
        value = token.split("=", 1)[1]
        base = config_mod.with_regime(cfg, "d3t")
        if value == "dynamic":
            new_trainer = dataclasses.replace(cfg.trainer, lambda_mode=LAMBDA_DYNAMIC)
        else:
            new_trainer = dataclasses.replace(
                cfg.trainer, lambda_mode=LAMBDA_FIXED, lambda_fixed=float(value)
            )
        return dataclasses.replace(base, trainer=new_trainer)
    raise DualTeacherError(
        f"unknown variant {token!r}; expected a regime, fixed=<k>, or lambda=<dynamic|value>"
    )


def _variant_dirname(token: str) -> str:
    return token.replace("=", "_").replace(".", "p")


def _cmd_ablate(args) -> int:
    cfg = _load_with_overrides(args)
    out_dir = _resolve_out(cfg, args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    tokens = [t.strip() for t in args.variants.split(",") if t.strip()]
    if not tokens:
        raise DualTeacherError("ablate needs at least one variant")
    seeds = [cfg.seed + j for j in range(args.seeds)]
    summary = []
    for token in tokens:
        maps = []
        for seed in seeds:
            run_cfg = with_seed(apply_variant(cfg, token), seed)
            run_dir = out_dir / _variant_dirname(token) / f"seed_{seed}"
            result = _run_one(run_cfg, run_dir)
            maps.append(result.final_report.map)
        mean = float(np.mean(maps))
        sd = float(np.std(maps, ddof=1)) if len(maps) > 1 else 0.0
        summary.append({"variant": token, "n_seeds": len(seeds), "mean_map": mean, "sd_map": sd})
        if not args.quiet:
            print(f"{token}: mean target mAP {mean:.4f} +/- {sd:.4f} over {len(seeds)} seed(s)")

    with open(out_dir / "summary.csv", "w", encoding="utf-8") as f:
        f.write("variant,n_seeds,mean_map,sd_map\n")
        for row in summary:
            f.write(f"{row['variant']},{row['n_seeds']},{row['mean_map']:.6f},{row['sd_map']:.6f}\n")
    width = max(len(r["variant"]) for r in summary)
    lines = [f"{'variant'.ljust(width)}  n_seeds  mean_map  sd_map"]
    for row in summary:
        lines.append(
            f"{row['variant'].ljust(width)}  {row['n_seeds']:>7d}  {row['mean_map']:.4f}    {row['sd_map']:.4f}"
        )
    (out_dir / "summary.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return 0


def _cmd_eval(args) -> int:
    params, arch = load_checkpoint(args.checkpoint)
    samples = load_dataset(args.dataset)
    decode_cfg = DecodeConfig(score_threshold=args.score_threshold, nms_iou=args.nms_iou)
    report = evaluate(params, samples, decode_cfg, arch, args.iou_threshold)
    print(report.to_json())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dualteacher", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment from a JSON config")
    p_run.add_argument("--config", required=True, help="path to the experiment JSON config")
    p_run.add_argument("--out", default=None, help="run output directory")
    p_run.add_argument("--seed", type=int, default=None, help="override the config seed")
    p_run.add_argument("--quiet", action="store_true")
    p_run.set_defaults(func=_cmd_run)

    p_sched = sub.add_parser("schedule", help="write the schedule trace CSV without training")
    p_sched.add_argument("--config", required=True)
    p_sched.add_argument("--out", default=None)
    p_sched.add_argument("--seed", type=int, default=None)
    p_sched.add_argument("--quiet", action="store_true")
    p_sched.set_defaults(func=_cmd_schedule)

    p_abl = sub.add_parser("ablate", help="run variants across seeds and tabulate target mAP")
    p_abl.add_argument("--config", required=True)
    p_abl.add_argument("--out", default=None)
    p_abl.add_argument("--variants", required=True, help="comma-separated variant tokens")
    p_abl.add_argument("--seeds", type=int, default=5, help="number of consecutive seeds")
    p_abl.add_argument("--seed", type=int, default=None, help="override the base seed")
    p_abl.add_argument("--quiet", action="store_true")
    p_abl.set_defaults(func=_cmd_ablate)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a dumped dataset")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--dataset", required=True, help="dataset directory (binary + JSON sidecars)")
    p_eval.add_argument("--score-threshold", type=float, default=0.05)
    p_eval.add_argument("--nms-iou", type=float, default=0.5)
    p_eval.add_argument("--iou-threshold", type=float, default=0.5)
    p_eval.set_defaults(func=_cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DualTeacherError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
