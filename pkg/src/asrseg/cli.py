"""Command-line entry point: ``asrseg <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from . import tensor as T
from .analysis import identity_errors, verify_identity
from .encoder import ModelParams
from .episodes import export_dataset, make_dataset
from .harness import (
    ConfigError, TrainConfig, TrainingDiverged, ablate, downsample_curve, evaluate, sweep_d, train,
)

log = logging.getLogger("asrseg")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
REPORT_KEYS = ("per_class_iou", "miou", "fb_iou", "confusion", "mean_offdiag_cos",
               "sparsity_entropy", "loss_curve", "config", "wall_time_s")


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("list is empty")
    return vals


def _load_config(path) -> TrainConfig:
    return TrainConfig.load(path) if path else TrainConfig()


def cmd_gen_data(args) -> int:
    cfg = _load_config(args.config)
    out = export_dataset(make_dataset(cfg.dataset_config()), args.out, n_episodes=args.episodes, k=cfg.k_shot)
    log.info("wrote dataset export to %s", out)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    every = max(1, cfg.steps // 20)

    def progress(step, rec):
        if step % every == 0 or step == cfg.steps - 1:
            log.info("step %d/%d loss=%.4f lr=%.4g", step, cfg.steps, rec["total"], rec["lr"])

    result = train(cfg, on_step=progress)
    meta = {"config": asdict(cfg), "loss_log": result.loss_log, "wall_time_s": result.wall_time_s}
    T.save_checkpoint(args.out, result.params.named(), meta)
    log.info("saved checkpoint %s (%.1fs)", args.out, result.wall_time_s)
    return EXIT_OK


def cmd_eval(args) -> int:
    named, meta = T.load_checkpoint(args.ckpt)
    cfg = _load_config(args.config) if args.config else TrainConfig.from_dict(meta["config"])
    params = ModelParams.from_named(named, requires_grad=False)
    report = evaluate(params, cfg, args.split, args.episodes, k_shot=args.k_shot,
                      loss_log=meta.get("loss_log"))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(report.to_json())
    log.info("%s mIoU=%s FB-IoU=%s -> %s", args.split, report.miou, report.fb_iou, args.out)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _load_config(args.config)
    rows = ablate(cfg, seeds=args.seeds, n_episodes=args.episodes, out_csv=args.out)
    log.info("wrote %d rows to %s", len(rows), args.out)
    return EXIT_OK


def cmd_sweep_d(args) -> int:
    cfg = _load_config(args.config)
    rows = sweep_d(cfg, args.d, seeds=args.seeds, n_episodes=args.episodes, out_csv=args.out)
    log.info("wrote %d rows to %s", len(rows), args.out)
    return EXIT_OK


def cmd_analyze(args) -> int:
    if args.verify_identity is not None:
        check = verify_identity(args.verify_identity, seed=args.seed)
        _, gap = identity_errors([0.5], [0.5], [1.5707963267948966])
        print(json.dumps({
            "n_samples": check.n_samples,
            "max_abs_error": check.max_abs_error,
            "max_normalized_gap": check.max_normalized_gap,
            "normalized_gap_at_half_half_90deg": float(gap[0]),
        }, indent=1))
        return EXIT_OK
    report = json.loads(Path(args.report).read_text())
    missing = [k for k in REPORT_KEYS if k not in report]
    if missing:
        raise ConfigError(f"report is missing keys {missing}")
    summary = {
        "miou": report["miou"],
        "fb_iou": report["fb_iou"],
        "per_class_iou": report["per_class_iou"],
        "mean_offdiag_cos": report["mean_offdiag_cos"],
        "sparsity_entropy": report["sparsity_entropy"],
        "loss_curve_head_tail": [downsample_curve(report["loss_curve"], 1), report["loss_curve"][-1:]]
        if report["loss_curve"] else [],
        "mode": report["config"].get("mode"),
    }
    print(json.dumps(summary, indent=1, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="asrseg", description="Few-shot segmentation by basis reconstruction (toy scale).")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="export the synthetic benchmark as PPM/PGM files")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--episodes", type=int, default=20)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one model and write a checkpoint")
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint and write a JSON report")
    e.add_argument("--config", help="defaults to the config stored in the checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--split", choices=("base", "novel"), default="novel")
    e.add_argument("--episodes", type=int, default=200)
    e.add_argument("--k-shot", type=int, default=None)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="module and filter-strategy ablation table (CSV)")
    a.add_argument("--config")
    a.add_argument("--seeds", type=_int_list, default=[0])
    a.add_argument("--episodes", type=int, default=200)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablate)

    s = sub.add_parser("sweep-d", help="mIoU against the per-group channel count D (CSV)")
    s.add_argument("--config")
    s.add_argument("--d", type=_int_list, default=[2, 4, 8, 16])
    s.add_argument("--seeds", type=_int_list, default=[0])
    s.add_argument("--episodes", type=int, default=200)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep_d)

    z = sub.add_parser("analyze", help="closed-form identity check or report summary")
    mx = z.add_mutually_exclusive_group(required=True)
    mx.add_argument("--verify-identity", type=int, metavar="N")
    mx.add_argument("--report")
    z.add_argument("--seed", type=int, default=0)
    z.set_defaults(func=cmd_analyze)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (TrainingDiverged, T.NonFiniteError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
