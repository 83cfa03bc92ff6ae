"""Command-line experiment driver.

Subcommands cover the full pipeline: ``pretrain-teacher`` fits the
contrastive teacher, ``distill`` trains students (one method and head
width per run, or a width sweep), ``probe`` scores a checkpoint with
linear, label-fraction, and transfer probes, ``info-plane`` traces
mutual information across a run's checkpoints, and ``report`` aggregates
run directories into tables and charts.

Exit codes: 0 success, 2 configuration or usage error, 3 checkpoint or
aggregation digest mismatch, 4 numeric failure (non-finite values).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .checkpoint import CheckpointError, DigestMismatch, load_checkpoint, \
    peek_digest
from .config import (ConfigError, config_digest, load_config, merge_config,
                     teacher_digest, validate_config)
from .contrastive import bundle_from_records, run_contrastive_pretraining
from .data import Dataset, make_synthetic_dataset
from .distill import load_teacher, run_distillation, run_hidden_sweep
from .evaluation import (ProbeConfig, linear_probe, semi_supervised_probe,
                         transfer_probe, write_probe_result)
from .mi import BinningConfig, info_plane_trace, write_info_plane_csv
from .report import ReportError, write_report
from .tensor import NumericError, set_precision

__all__ = ["main", "build_parser"]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="disco", description="Contrastive pretraining and distillation "
        "experiments on synthetic image data.")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None,
                        help="JSON config; defaults fill missing keys")
    common.add_argument("--seed", type=int, default=None,
                        help="override the seed governing this run")
    common.add_argument("--precision", choices=("f32", "f64"), default=None,
                        help="float precision override")

    p = sub.add_parser("pretrain-teacher", parents=[common],
                       help="contrastive pretraining of the teacher")
    p.add_argument("--out", type=Path, required=True, help="run directory")
    p.add_argument("--resume", action="store_true",
                   help="continue from the newest checkpoint in --out")
    p.set_defaults(func=_cmd_pretrain_teacher)

    p = sub.add_parser("distill", parents=[common],
                       help="train a student against a frozen teacher")
    p.add_argument("--teacher", type=Path, default=None,
                   help="teacher checkpoint (unused for method=contrastive)")
    p.add_argument("--method", default=None,
                   help="override disco.method from the config")
    p.add_argument("--widths", default=None,
                   help="comma-separated head widths for a sweep, e.g. "
                        "'absent,32,128,512'; runs land in --out/width_*")
    p.add_argument("--out", type=Path, required=True, help="run directory")
    p.add_argument("--resume", action="store_true",
                   help="continue from the newest checkpoint")
    p.set_defaults(func=_cmd_distill)

    p = sub.add_parser("probe", parents=[common],
                       help="linear, label-fraction, and transfer probes")
    p.add_argument("--checkpoint", type=Path, required=True,
                   help="encoder checkpoint to score")
    p.add_argument("--out", type=Path, default=None,
                   help="run directory for probes/ (default: the "
                        "checkpoint's run directory)")
    p.add_argument("--fractions", action="store_true",
                   help="also probe at probe.fractions label budgets")
    p.add_argument("--transfer", action="store_true",
                   help="also probe on the transfer recipe dataset")
    p.add_argument("--kd-teacher", type=Path, default=None,
                   help="teacher checkpoint whose probe logits soften the "
                        "student probe objective")
    p.set_defaults(func=_cmd_probe)

    p = sub.add_parser("info-plane", parents=[common],
                       help="mutual-information trace over a run's "
                            "checkpoints")
    p.add_argument("--run", type=Path, required=True, help="run directory")
    p.set_defaults(func=_cmd_info_plane)

    p = sub.add_parser("report", parents=[common],
                       help="aggregate run directories into a report")
    p.add_argument("--runs", type=Path, required=True,
                   help="root directory scanned for runs")
    p.add_argument("--out", type=Path, required=True,
                   help="report output directory")
    p.add_argument("--force", action="store_true",
                   help="aggregate across differing teacher digests")
    p.set_defaults(func=_cmd_report)
    return parser


def _load_cfg(args, seed_target: str = "top") -> dict:
    cfg = load_config(args.config) if args.config else merge_config({})
    if args.seed is not None:
        if seed_target == "teacher":
            cfg["teacher"]["seed"] = args.seed
        else:
            cfg["seed"] = args.seed
    if args.precision is not None:
        cfg["precision"] = args.precision
    validate_config(cfg)
    set_precision(cfg["precision"])
    return cfg


def _dataset(cfg: dict, transfer: bool = False) -> Dataset:
    d = cfg["data"]
    return make_synthetic_dataset(
        num_classes=d["classes"], per_class=d["per_class"],
        test_per_class=d["test_per_class"], height=d["height"],
        width=d["width"], channels=d["channels"], seed=d["seed"],
        recipe=d["transfer_recipe"] if transfer else d["recipe"])


def _guard_fresh(out_dir: Path, pattern: str, resume: bool) -> None:
    ckpt_dir = Path(out_dir) / "checkpoints"
    if not resume and ckpt_dir.is_dir() and list(ckpt_dir.glob(pattern)):
        raise ConfigError(f"{out_dir} already holds checkpoints; pass "
                          f"--resume to continue it or pick a fresh --out")


def _cmd_pretrain_teacher(args) -> int:
    cfg = _load_cfg(args, seed_target="teacher")
    _guard_fresh(args.out, "teacher_epoch*.ckpt", args.resume)
    ds = _dataset(cfg)
    res = run_contrastive_pretraining(cfg, ds.train, args.out,
                                      resume=args.resume)
    print(f"teacher done: {res['final_checkpoint']} "
          f"(params {res['checksum']})")
    return 0


def _parse_widths(text: str) -> list:
    widths = []
    for piece in text.split(","):
        piece = piece.strip().lower()
        widths.append(None if piece in ("absent", "none") else int(piece))
    return widths


def _cmd_distill(args) -> int:
    cfg = _load_cfg(args)
    if args.method is not None:
        cfg["disco"]["method"] = args.method
        validate_config(cfg)
    method = cfg["disco"]["method"]
    if method != "contrastive" and args.teacher is None:
        raise ConfigError(f"method {method!r} needs --teacher")
    ds = _dataset(cfg)
    if args.widths:
        results = run_hidden_sweep(cfg, ds.train, args.teacher, args.out,
                                   _parse_widths(args.widths),
                                   resume=args.resume)
    else:
        _guard_fresh(args.out, "student_epoch*.ckpt", args.resume)
        results = [run_distillation(cfg, ds.train, args.teacher, args.out,
                                    resume=args.resume)]
    for res in results:
        width = "absent" if res["head_hidden"] is None else res["head_hidden"]
        print(f"student done: method={res['method']} width={width} "
              f"seed={res['seed']} -> {res['final_checkpoint']}")
    return 0


def _verified_bundle(ckpt: Path, cfg: dict):
    digest = peek_digest(ckpt)
    accepted = {config_digest(cfg): "config",
                teacher_digest(cfg): "teacher sections"}
    if digest not in accepted:
        raise DigestMismatch(
            f"{ckpt}: digest {digest:016x} matches neither the config digest "
            f"{config_digest(cfg):016x} nor the teacher digest "
            f"{teacher_digest(cfg):016x}; probe with the run's own "
            f"config.json")
    records, _ = load_checkpoint(ckpt)
    return bundle_from_records(records, "query")


def _cmd_probe(args) -> int:
    cfg = _load_cfg(args)
    bundle = _verified_bundle(args.checkpoint, cfg)
    out_dir = args.out if args.out is not None \
        else args.checkpoint.parent.parent
    probes_dir = Path(out_dir) / "probes"
    probes_dir.mkdir(parents=True, exist_ok=True)
    ds = _dataset(cfg)
    pcfg = ProbeConfig.from_config(cfg)
    teacher_bundle = None
    if args.kd_teacher is not None:
        teacher_bundle = load_teacher(args.kd_teacher,
                                      expect_digest=teacher_digest(cfg)).bundle

    res = linear_probe(bundle, ds, pcfg, fraction_seed=cfg["seed"],
                       teacher_bundle=teacher_bundle)
    write_probe_result(res, probes_dir / "linear_1.json")
    print(f"linear probe: top1 {res.top1:.4f} top5 {res.top5:.4f}")
    if args.fractions:
        for fr_res in semi_supervised_probe(bundle, ds, pcfg,
                                            cfg["probe"]["fractions"],
                                            fraction_seed=cfg["seed"],
                                            teacher_bundle=teacher_bundle):
            name = f"semi_{fr_res.label_fraction:g}.json"
            write_probe_result(fr_res, probes_dir / name)
            print(f"fraction {fr_res.label_fraction:g}: "
                  f"top1 {fr_res.top1:.4f}")
    if args.transfer:
        tr_res = transfer_probe(bundle, ds, _dataset(cfg, transfer=True),
                                pcfg)
        write_probe_result(tr_res, probes_dir / "transfer_1.json")
        print(f"transfer probe: top1 {tr_res.top1:.4f}")
    return 0


def _cmd_info_plane(args) -> int:
    cfg = _load_cfg(args)
    run_dir = Path(args.run)
    ckpts = sorted((run_dir / "checkpoints").glob("student_epoch*.ckpt")) \
        or sorted((run_dir / "checkpoints").glob("teacher_epoch*.ckpt"))
    if not ckpts:
        raise ConfigError(f"{run_dir}: no epoch checkpoints to trace")
    accepted = (config_digest(cfg), teacher_digest(cfg))
    for ck in ckpts:
        if peek_digest(ck) not in accepted:
            raise DigestMismatch(f"{ck}: checkpoint digest does not match "
                                 f"this config")
    rows = info_plane_trace(ckpts, _dataset(cfg),
                            BinningConfig.from_config(cfg),
                            ProbeConfig.from_config(cfg))
    out = run_dir / "info_plane.csv"
    write_info_plane_csv(rows, out)
    print(f"info plane: {len(rows)} checkpoints -> {out}")
    return 0


def _cmd_report(args) -> int:
    res = write_report(args.runs, args.out, force=args.force)
    print(f"report over {res['runs']} runs -> {res['out_dir']}")
    for flag in res["flags"]:
        print(f"flagged: {flag}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DigestMismatch as e:
        print(f"digest mismatch: {e}", file=sys.stderr)
        return 3
    except (ConfigError, CheckpointError, ReportError,
            FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
