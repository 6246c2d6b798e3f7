"""Command line front end.

Subcommands:

  train        run one experiment from a JSON config
  quant-sweep  re-evaluate a checkpoint at several weight bit widths
  bound-check  verify perturbation lower bounds on random problems
  contour      loss surface slice around a checkpoint
  compare      side-by-side final metrics for several configs

Exit codes: 0 on success, 2 for configuration or input problems, 3 for
numerical aborts (non-finite training state, exhausted searches).

Heavy imports happen inside the command handlers, after the
HERO_LAB_THREADS cap has been copied into the usual BLAS thread
variables; importing numpy first would lock in whatever thread count the
environment started with.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .errors import ConfigError, HeroLabError, NumericalError, SearchError

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS")


def _apply_thread_cap():
    cap = os.environ.get("HERO_LAB_THREADS")
    if not cap:
        return
    if not cap.isdigit() or int(cap) < 1:
        raise ConfigError([f"HERO_LAB_THREADS must be a positive integer, got {cap!r}"])
    for var in _THREAD_VARS:
        os.environ[var] = cap


def parse_bits(text: str) -> list[int]:
    """Bit widths as an inclusive range "2..8" or a list "2,4,8"."""
    text = text.strip()
    try:
        if ".." in text:
            lo_s, hi_s = text.split("..", 1)
            lo, hi = int(lo_s), int(hi_s)
            if hi < lo:
                raise ConfigError([f"--bits range {text!r} is empty"])
            return list(range(lo, hi + 1))
        bits = [int(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise ConfigError([f"--bits must look like \"2..8\" or \"2,4,8\", got {text!r}"]) from None
    if not bits:
        raise ConfigError([f"--bits must name at least one width, got {text!r}"])
    return bits


def _load_run(checkpoint, config_path):
    """Checkpoint plus the resolved config that produced it."""
    from . import config as config_mod
    from . import models, serialization

    ckpt_path = Path(checkpoint)
    if not ckpt_path.exists():
        raise ConfigError([f"checkpoint not found: {ckpt_path}"])
    cfg_path = Path(config_path) if config_path else ckpt_path.parent / "config.resolved.json"
    cfg = config_mod.ExperimentConfig.from_file(cfg_path)
    params, running = serialization.load_checkpoint(ckpt_path)
    spec = cfg.model_spec()
    models.validate_params(spec, params)
    return cfg, spec, params, running


def _eval_dataset(cfg):
    train_ds, test_ds = cfg.datasets()
    return test_ds if test_ds is not None else train_ds


def _cmd_train(args) -> int:
    from . import config as config_mod

    cfg = config_mod.ExperimentConfig.from_file(args.config)
    res = config_mod.run_experiment(cfg, output_dir=args.output_dir,
                                    figures=not args.no_figures)
    for name in ("config", "metrics", "timing", "checkpoint", "quant_sweep", "contour"):
        if name in res.artifacts:
            print(f"wrote {res.artifacts[name]}")
    last = res.result.records[-1]
    parts = [f"rule={cfg.resolved['trainer']['rule']}", f"seed={cfg.seed}",
             f"epochs={last.epoch + 1}", f"train_loss={last.train_loss:.4f}"]
    if last.train_acc is not None:
        parts.append(f"train_acc={last.train_acc:.4f}")
    if last.eval_acc is not None:
        parts.append(f"eval_acc={last.eval_acc:.4f}")
    if last.hessian_norm is not None:
        parts.append(f"hessian_norm={last.hessian_norm:.4g}")
    print(" ".join(parts))
    return 0


def _cmd_quant_sweep(args) -> int:
    from . import quantize, reporting

    bits = parse_bits(args.bits)
    cfg, spec, params, running = _load_run(args.checkpoint, args.config)
    rows = quantize.sweep(spec, params, _eval_dataset(cfg), bits,
                          range_policy=cfg.resolved["quant"]["policy"], running=running)
    out = Path(args.output) if args.output else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "quant_sweep.csv"
    reporting.write_sweep_csv(csv_path, rows)
    print(f"wrote {csv_path}")
    if not args.no_figures:
        fig_path = out / "quant_sweep.png"
        reporting.sweep_figure(fig_path, rows)
        print(f"wrote {fig_path}")
    for r in rows:
        label = "fp" if r.bits == 0 else f"{r.bits}b"
        print(f"{label}: loss={r.eval_loss:.4f} acc={r.eval_acc:.4f}")
    return 0


def _cmd_bound_check(args) -> int:
    from . import reporting, robustness

    if args.trials < 0:
        raise ConfigError([f"--trials must be >= 0, got {args.trials}"])
    rows, summary = robustness.bound_sweep(args.trials, args.dim_max, args.seed)
    out = Path(args.output)
    if out.parent != Path("."):
        out.parent.mkdir(parents=True, exist_ok=True)
    reporting.write_bounds_csv(out, rows)
    print(f"wrote {out}")
    if rows and not args.no_figures:
        fig_path = out.with_suffix(".png")
        reporting.bounds_figure(fig_path, rows)
        print(f"wrote {fig_path}")
    print(reporting.format_bound_summary(summary))
    return 0


def _cmd_contour(args) -> int:
    from . import reporting, robustness, seeding

    cfg, spec, params, running = _load_run(args.checkpoint, args.config)
    seed = args.seed if args.seed is not None else seeding.sub_seed(cfg.seed, seeding.CONTOUR)
    offsets, grid = robustness.loss_contour(spec, params, _eval_dataset(cfg),
                                            args.half_width, args.steps, seed,
                                            running=running)
    out = Path(args.output) if args.output else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "contour.csv"
    reporting.write_contour_csv(csv_path, offsets, grid)
    print(f"wrote {csv_path}")
    if not args.no_figures:
        fig_path = out / "contour.png"
        reporting.contour_figure(fig_path, offsets, grid)
        print(f"wrote {fig_path}")
    return 0


def _parse_opt_float(text: str) -> float | None:
    return float(text) if text not in (None, "") else None


def _cmd_compare(args) -> int:
    from . import config as config_mod
    from . import reporting

    entries = []
    for path in args.configs:
        cfg = config_mod.ExperimentConfig.from_file(path)
        out_dir = cfg.output_dir
        metrics_path = out_dir / "metrics.csv"
        resolved_path = out_dir / "config.resolved.json"
        reusable = (metrics_path.exists() and resolved_path.exists()
                    and resolved_path.read_text() == cfg.to_json())
        if not reusable:
            config_mod.run_experiment(cfg, figures=not args.no_figures)
        _, metric_rows = reporting.read_csv(metrics_path)
        if not metric_rows:
            raise HeroLabError(f"{metrics_path} has no epochs")
        sweep_path = out_dir / "quant_sweep.csv"
        sweep = {}
        if sweep_path.exists():
            for row in reporting.read_csv(sweep_path)[1]:
                sweep[int(row["bits"])] = _parse_opt_float(row["eval_acc"])
        entries.append((Path(path).stem, cfg, metric_rows[-1], sweep))

    all_bits = sorted({b for _, _, _, sweep in entries for b in sweep if b > 0})
    header = ["config", "rule", "seed", "train_acc", "eval_acc", "gap"]
    header += [f"int{b}_acc" for b in all_bits]
    rows = []
    for label, cfg, last, sweep in entries:
        train_acc = _parse_opt_float(last.get("train_acc"))
        eval_acc = _parse_opt_float(last.get("eval_acc"))
        gap = (train_acc - eval_acc) if train_acc is not None and eval_acc is not None else None
        row = [label, cfg.resolved["trainer"]["rule"], cfg.seed, train_acc, eval_acc, gap]
        row += [sweep.get(b) for b in all_bits]
        rows.append(row)

    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "compare.csv"
    reporting.write_compare_csv(csv_path, header, rows)
    print(f"wrote {csv_path}")
    if not args.no_figures:
        fig_path = out / "compare.png"
        reporting.compare_figure(fig_path, [r[0] for r in rows], [r[4] for r in rows])
        print(f"wrote {fig_path}")

    widths = [max(len(str(h)), *(len(_cell(r[i])) for r in rows)) for i, h in enumerate(header)]
    print("  ".join(h.ljust(w) for h, w in zip(header, widths)))
    for r in rows:
        print("  ".join(_cell(v).ljust(w) for v, w in zip(r, widths)))
    return 0


def _cell(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hero-lab",
        description="Curvature-regularized training experiments, quantization sweeps, "
                    "and perturbation-bound checks.")
    from . import __version__
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command")

    t = sub.add_parser("train", help="run one experiment from a JSON config")
    t.add_argument("--config", required=True, help="experiment config (JSON)")
    t.add_argument("--output-dir", default=None, help="override the config's output_dir")
    t.add_argument("--no-figures", action="store_true", help="write CSV artifacts only")
    t.set_defaults(func=_cmd_train)

    q = sub.add_parser("quant-sweep", help="evaluate a checkpoint at several bit widths")
    q.add_argument("--checkpoint", required=True)
    q.add_argument("--bits", required=True, help='inclusive range "2..8" or list "2,4,8"')
    q.add_argument("--config", default=None,
                   help="resolved config (default: config.resolved.json next to the checkpoint)")
    q.add_argument("--output", default=None, help="output directory (default: the checkpoint's)")
    q.add_argument("--no-figures", action="store_true")
    q.set_defaults(func=_cmd_quant_sweep)

    b = sub.add_parser("bound-check", help="verify perturbation bounds on random problems")
    b.add_argument("--trials", type=int, required=True)
    b.add_argument("--dim-max", type=int, default=8)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--output", default="bounds.csv", help="CSV path (default bounds.csv)")
    b.add_argument("--no-figures", action="store_true")
    b.set_defaults(func=_cmd_bound_check)

    c = sub.add_parser("contour", help="loss surface slice around a checkpoint")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--half-width", type=float, default=1.0)
    c.add_argument("--steps", type=int, default=41)
    c.add_argument("--seed", type=int, default=None,
                   help="direction seed (default: derived from the run seed)")
    c.add_argument("--config", default=None)
    c.add_argument("--output", default=None)
    c.add_argument("--no-figures", action="store_true")
    c.set_defaults(func=_cmd_contour)

    m = sub.add_parser("compare", help="side-by-side final metrics for several configs")
    m.add_argument("--configs", nargs="+", required=True, help="config JSON paths")
    m.add_argument("--output", default=".", help="directory for compare.csv")
    m.add_argument("--no-figures", action="store_true")
    m.set_defaults(func=_cmd_compare)
    return parser


def main(argv=None) -> int:
    try:
        _apply_thread_cap()
        parser = build_parser()
        args = parser.parse_args(argv)
        if not hasattr(args, "func"):
            parser.print_help()
            return 2
        return args.func(args)
    except ConfigError as exc:
        for violation in exc.violations:
            print(f"config error: {violation}", file=sys.stderr)
        return 2
    except (NumericalError, SearchError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 3
    except HeroLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
