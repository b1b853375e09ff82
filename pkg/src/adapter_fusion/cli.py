"""Command-line front end: ``run``, ``verify``, ``fuse-offline`` and ``report``.

Exit codes: 0 ok, 1 verification failure, 2 usage/config error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, CheckpointError, atomic_write, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, load_config
from .fusion import FusionConfig, compute_beta, fuse, fuse_gamma
from .harness import NumericalError, build_backbone, build_synthetic_stream, run_strategy
from .model import ConfigurationError, LayoutError
from .verify import run_checks

log = logging.getLogger("adapter_fusion")

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3
OUTPUT_ROOT_ENV = "DAF_OUTPUT_ROOT"


class UsageError(Exception):
    pass


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def output_dir(cfg: ExperimentConfig, flag: str | None) -> Path:
    """Flag, then config, then ``$DAF_OUTPUT_ROOT``, then ``./runs``."""
    if flag:
        return Path(flag)
    if cfg.output_dir:
        root = os.environ.get(OUTPUT_ROOT_ENV)
        path = Path(cfg.output_dir)
        return path if path.is_absolute() or not root else Path(root) / path
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def run_experiment(cfg: ExperimentConfig, out: Path) -> list[Path]:
    """Run every (strategy, seed) pair; returns the written report paths."""
    written = []
    for seed in cfg.seeds:
        stream = build_synthetic_stream(**cfg.stream.kwargs(seed))
        backbone = build_backbone(stream, width=cfg.backbone_width, n_layers=cfg.backbone_layers,
                                  epochs=cfg.backbone_epochs, seed=seed, mode=cfg.backbone_mode)
        for strat in cfg.strategies:
            scfg = replace(strat, seed=seed)
            stem = f"{strat.name}_seed{seed}"
            log.info("running %s", stem)
            result = run_strategy(stream, scfg, backbone, record_fusion=cfg.replay_fusion)
            report = dict(result.report)
            report["kind"] = "run_report"
            report["run"] = stem
            report["backbone"] = {"mode": cfg.backbone_mode, "width": cfg.backbone_width,
                                  "layers": cfg.backbone_layers, "epochs": cfg.backbone_epochs, "seed": seed}
            report["stream"] = cfg.stream.kwargs(seed)
            ck = Checkpoint(result.state.theta_star.layout,
                            {"theta_star": result.state.theta_star, "theta_avg": result.state.theta_avg},
                            result.state.task_index, strat.strategy, result.prototypes, result.gaussians)
            save_checkpoint(ck, out / f"{stem}.ckpt")
            if cfg.replay_fusion and result.last_fusion is not None:
                report["audits"]["fusion_replay"] = _record_fusion(result.last_fusion, scfg, out / f"{stem}.fusion")
            atomic_write(out / f"{stem}.csv", result.accuracy.to_csv())
            atomic_write(out / f"{stem}.report.json", _dumps(report))
            written.append(out / f"{stem}.report.json")
    return written


def _record_fusion(rec, scfg, directory: Path) -> bool | None:
    """Store the last fusion step's inputs and check that an offline replay matches."""
    layout = rec.theta_t.layout
    save_checkpoint(Checkpoint(layout, {"theta": rec.theta_p}, strategy="theta_p"), directory / "theta_p.ckpt")
    save_checkpoint(Checkpoint(layout, {"theta": rec.theta_prev_star}, strategy="theta_prev_star"),
                    directory / "theta_prev_star.ckpt")
    save_checkpoint(Checkpoint(layout, {"theta": rec.theta_t}, strategy="theta_t", stats=rec.stats),
                    directory / "theta_t.ckpt")
    save_checkpoint(Checkpoint(layout, {"theta": rec.theta_star}, strategy="theta_star"),
                    directory / "theta_star.ckpt")
    if rec.stats is None:
        return None
    beta = compute_beta(rec.theta_p, rec.theta_prev_star, rec.theta_t, rec.stats, scfg.fusion_config())
    if scfg.strategy == "daf_gamma":
        replay = fuse_gamma(rec.theta_p, rec.theta_prev_star, rec.theta_t, beta, scfg.gamma)
    else:
        replay = fuse(rec.theta_p, rec.theta_prev_star, rec.theta_t, beta)
    return replay == rec.theta_star


# ---------------------------------------------------------------------------
# subcommands


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seeds=(args.seed,))
    if args.alpha is not None or args.gamma is not None:
        overrides = {k: v for k, v in (("alpha", args.alpha), ("gamma", args.gamma)) if v is not None}
        try:
            cfg = replace(cfg, strategies=tuple(replace(s, **overrides) for s in cfg.strategies))
        except ConfigurationError as exc:
            raise UsageError(str(exc)) from None
    out = output_dir(cfg, args.output_dir)
    atomic_write(out / "config.ini", cfg.to_ini())
    try:
        paths = run_experiment(cfg, out)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    failed = []
    for p in paths:
        audits = json.loads(p.read_text())["audits"]
        if not all(v for k, v in audits.items() if k != "backbone_sha256" and v is not None):
            failed.append(p.name)
    if cfg.verify_suite:
        results = run_checks(cfg.seeds[0])
        failed += [r.name for r in results if not r.passed]
    for p in paths:
        print(p)
    if failed:
        print("audit/verification failures: " + ", ".join(failed), file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def cmd_verify(args) -> int:
    clip = None
    if args.inject_clip:
        try:
            lo, hi = (float(v) for v in args.inject_clip.split(","))
        except ValueError:
            raise UsageError("--inject-clip expects LO,HI") from None
        clip = (lo, hi)
    results = run_checks(args.seed, clip_override=clip, only=args.check or None)
    if not results:
        raise UsageError("no checks selected")
    for r in results:
        print(r.line())
    failing = [r for r in results if not r.passed]
    if failing:
        print("FAILED: " + ", ".join(f"{r.name} ({r.residual:.3e})" for r in failing))
        return EXIT_VERIFY
    print(f"all {len(results)} checks passed")
    return EXIT_OK


def _primary(ck: Checkpoint, path):
    if not ck.vectors:
        raise UsageError(f"{path} holds no adapter vector")
    return next(iter(ck.vectors.values()))


def cmd_fuse_offline(args) -> int:
    cks = {}
    for key in ("theta_p", "theta_prev", "theta_t"):
        cks[key] = load_checkpoint(getattr(args, key))
    stats_ck = load_checkpoint(args.stats) if args.stats else cks["theta_t"]
    if stats_ck.stats is None:
        raise UsageError("no fusion statistics: pass --stats or a theta_t checkpoint that carries them")
    p, prev, cur = (_primary(cks[k], getattr(args, k)) for k in ("theta_p", "theta_prev", "theta_t"))
    try:
        cur.check_layout(p, prev, stats_ck.stats.grad)
        fcfg = FusionConfig(alpha=args.alpha, gamma=args.gamma)
    except ConfigurationError as exc:
        raise UsageError(str(exc)) from None
    beta = compute_beta(p, prev, cur, stats_ck.stats, fcfg)
    star = fuse(p, prev, cur, beta) if args.gamma == 0.5 else fuse_gamma(p, prev, cur, beta, args.gamma)
    out = Path(args.output)
    save_checkpoint(Checkpoint(cur.layout, {"theta_star": star}, cks["theta_t"].task_index, "fuse-offline"), out)
    summary = beta.summary()
    summary.update({"alpha": args.alpha, "gamma": args.gamma})
    atomic_write(Path(str(out) + ".beta.json"), _dumps(summary))
    print(out)
    return EXIT_OK


REPORT_COLUMNS = ("run", "strategy", "init", "avg_acc", "final_acc", "stability", "plasticity", "beta_mean",
                  "beta_clipped")


def collect_reports(directory: Path) -> list[dict]:
    reports = []
    for path in sorted(directory.glob("*.report.json")):
        data = json.loads(path.read_text())
        if data.get("kind") == "run_report":
            reports.append(data)
    return reports


def report_rows(reports: list[dict]) -> list[dict]:
    rows = []
    for rep in reports:
        betas = [t["beta"] for t in rep["tasks"] if "beta" in t]
        m = rep["metrics"]
        rows.append({
            "run": rep["run"],
            "strategy": rep["strategy"]["strategy"],
            "init": rep["strategy"]["init"],
            "avg_acc": m["avg_acc"],
            "final_acc": m["final_acc"],
            "stability": m["stability"],
            "plasticity": m["plasticity"],
            "beta_mean": float(np.mean([b["mean"] for b in betas])) if betas else None,
            "beta_clipped": sum(b["clipped_low"] + b["clipped_high"] for b in betas) if betas else None,
        })
    # per-strategy means when a strategy was run with several seeds
    by_name: dict[str, list[dict]] = {}
    for rep, row in zip(reports, rows):
        by_name.setdefault(rep["name"], []).append(row)
    for name, group in by_name.items():
        if len(group) > 1:
            mean = {"run": f"{name} (mean of {len(group)})", "strategy": group[0]["strategy"],
                    "init": group[0]["init"]}
            for col in REPORT_COLUMNS[3:]:
                vals = [r[col] for r in group if r[col] is not None]
                mean[col] = float(np.mean(vals)) if vals else None
            rows.append(mean)
    return rows


def _cell(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def format_table(rows: list[dict]) -> str:
    cells = [list(REPORT_COLUMNS)] + [[_cell(r[c]) for c in REPORT_COLUMNS] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(REPORT_COLUMNS))]
    lines = ["  ".join(c.ljust(w) if i < 3 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths)))
             for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    directory = Path(args.directory)
    reports = collect_reports(directory) if directory.is_dir() else []
    if not reports:
        raise UsageError(f"no run reports found in {directory}")
    rows = report_rows(reports)
    sys.stdout.write(format_table(rows))
    if args.csv:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: "" if r[k] is None else (repr(r[k]) if isinstance(r[k], float) else r[k])
                             for k in REPORT_COLUMNS})
        atomic_write(args.csv, buf.getvalue())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="daf", description="Continual learning with a Fisher-fused global adapter.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run the strategies of a config file")
    p.add_argument("config")
    p.add_argument("--seed", type=int, help="run only this seed")
    p.add_argument("--output-dir", help=f"output directory (default: config, then ${OUTPUT_ROOT_ENV}, then ./runs)")
    p.add_argument("--alpha", type=float, help="override alpha for every strategy")
    p.add_argument("--gamma", type=float, help="override gamma for every strategy")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("verify", help="run the oracle and identity checks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--check", action="append", help="run only the named check (repeatable)")
    p.add_argument("--inject-clip", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("fuse-offline", help="fuse stored adapters without retraining")
    p.add_argument("--theta-p", required=True, dest="theta_p")
    p.add_argument("--theta-prev", required=True, dest="theta_prev")
    p.add_argument("--theta-t", required=True, dest="theta_t")
    p.add_argument("--stats", help="checkpoint with gradient/Fisher segments (default: --theta-t)")
    p.add_argument("--alpha", type=float, default=1.25)
    p.add_argument("--gamma", type=float, default=0.5)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_fuse_offline)

    p = sub.add_parser("report", help="summarise the runs in a directory")
    p.add_argument("directory")
    p.add_argument("--csv", help="also write the comparison table as CSV")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigurationError, UsageError, CheckpointError, LayoutError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
