"""CSV emission and companion figures.

Every table the experiments produce goes through here. CSV cells are
written with Python's shortest round-trip float repr, `.` decimal, no
locale involvement, and a bare-newline line terminator, so identical
inputs give byte-identical files on every platform. Optional values
(diagnostics a rule does not produce) become empty cells under a schema
that never changes shape between rules.

Each CSV writer has a figure twin rendering the same data to PNG through
the Agg backend, so a run directory is readable both by plotting tools
and by eye.
"""

from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, bool):
        return str(x)
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _write_rows(path, header: list[str], rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


# ---------------------------------------------------------------------------
# training metrics


def metrics_header(layer_names: list[str]) -> list[str]:
    head = ["epoch", "train_loss", "train_acc", "eval_loss", "eval_acc",
            "hessian_norm", "lr", "reg_total"]
    head += [f"z_norm.{n}" for n in layer_names]
    head += [f"reg.{n}" for n in layer_names]
    return head


def write_metrics_csv(path, records, layer_names: list[str]):
    """One row per epoch; per-layer perturbation norms and penalty values
    appear as extra columns, empty for rules that never form them."""
    rows = []
    for r in records:
        row = [r.epoch, r.train_loss, r.train_acc, r.eval_loss, r.eval_acc,
               r.hessian_norm, r.lr, r.reg_total]
        row += [r.z_norms.get(n) for n in layer_names]
        row += [r.reg_values.get(n) for n in layer_names]
        rows.append(row)
    _write_rows(path, metrics_header(layer_names), rows)


def write_timing_csv(path, records):
    """Wall-clock sidecar, kept out of metrics.csv so that file stays
    byte-identical across reruns."""
    _write_rows(path, ["epoch", "wall_ms"], [[r.epoch, r.wall_ms] for r in records])


def read_csv(path) -> tuple[list[str], list[dict[str, str]]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return list(reader.fieldnames or []), list(reader)


def metrics_figure(path, records):
    epochs = [r.epoch for r in records]
    fig, axes = plt.subplots(2, 2, figsize=(9, 6), constrained_layout=True)

    ax = axes[0][0]
    ax.plot(epochs, [r.train_loss for r in records], label="train")
    if any(r.eval_loss is not None for r in records):
        ax.plot(epochs, [r.eval_loss for r in records], label="test")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()

    ax = axes[0][1]
    if any(r.train_acc is not None for r in records):
        ax.plot(epochs, [r.train_acc for r in records], label="train")
    if any(r.eval_acc is not None for r in records):
        ax.plot(epochs, [r.eval_acc for r in records], label="test")
    ax.set_xlabel("epoch")
    ax.set_ylabel("accuracy")
    ax.legend()

    ax = axes[1][0]
    tracked = [(r.epoch, r.hessian_norm) for r in records if r.hessian_norm is not None]
    if tracked:
        ax.plot([e for e, _ in tracked], [v for _, v in tracked], marker="o")
        ax.set_ylabel("||Hz||")
    elif any(r.reg_total is not None for r in records):
        ax.plot(epochs, [r.reg_total for r in records])
        ax.set_ylabel("curvature penalty")
    ax.set_xlabel("epoch")

    ax = axes[1][1]
    ax.plot(epochs, [r.lr for r in records])
    ax.set_xlabel("epoch")
    ax.set_ylabel("lr")

    fig.savefig(path, dpi=120)
    plt.close(fig)


# ---------------------------------------------------------------------------
# quantization sweeps


def write_sweep_csv(path, rows):
    _write_rows(path, ["bits", "eval_loss", "eval_acc"],
                [[r.bits, r.eval_loss, r.eval_acc] for r in rows])


def sweep_figure(path, rows):
    full = [r for r in rows if r.bits == 0]
    quant = [r for r in rows if r.bits > 0]
    fig, ax = plt.subplots(figsize=(6, 4), constrained_layout=True)
    if quant:
        ax.plot([r.bits for r in quant], [r.eval_acc for r in quant], marker="o",
                label="quantized")
    if full:
        ax.axhline(full[0].eval_acc, linestyle="--", color="gray", label="full precision")
    ax.set_xlabel("weight bits")
    ax.set_ylabel("accuracy")
    ax.legend()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# ---------------------------------------------------------------------------
# bound checks


BOUNDS_HEADER = ["index", "dim", "v", "g_norm2", "g_norm1", "c",
                 "bound_l2", "brute_l2", "slack_l2",
                 "bound_linf", "brute_linf", "slack_linf"]


def write_bounds_csv(path, rows):
    _write_rows(path, BOUNDS_HEADER,
                [[r.index, r.dim, r.v, r.g_norm2, r.g_norm1, r.c,
                  r.bound_l2, r.brute_l2, r.slack_l2,
                  r.bound_linf, r.brute_linf, r.slack_linf] for r in rows])


def format_bound_summary(summary) -> str:
    return (f"trials={summary.trials} "
            f"violations_l2={summary.violations_l2} "
            f"violations_linf={summary.violations_linf} "
            f"median_slack_l2={_fmt(summary.median_slack_l2)} "
            f"median_slack_linf={_fmt(summary.median_slack_linf)}")


def bounds_figure(path, rows):
    fig, axes = plt.subplots(1, 2, figsize=(9, 4), constrained_layout=True)
    for ax, bound, brute, title in (
            (axes[0], [r.bound_l2 for r in rows], [r.brute_l2 for r in rows], "l2"),
            (axes[1], [r.bound_linf for r in rows], [r.brute_linf for r in rows], "linf")):
        ax.scatter(bound, brute, s=8, alpha=0.6)
        if bound:
            lo, hi = min(bound + brute), max(bound + brute)
            ax.plot([lo, hi], [lo, hi], color="gray", linestyle="--", linewidth=1)
        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.set_xlabel("closed-form bound")
        ax.set_ylabel("brute-force minimum")
        ax.set_title(title)
    fig.savefig(path, dpi=120)
    plt.close(fig)


# ---------------------------------------------------------------------------
# contours


def write_contour_csv(path, offsets, grid):
    """Long form: one row per grid point, plot-ready for pivoting."""
    rows = []
    for i, a in enumerate(offsets):
        for j, b in enumerate(offsets):
            rows.append([float(a), float(b), float(grid[i, j])])
    _write_rows(path, ["offset_a", "offset_b", "loss"], rows)


def contour_figure(path, offsets, grid):
    fig, ax = plt.subplots(figsize=(5.5, 4.5), constrained_layout=True)
    mesh = ax.contourf(offsets, offsets, np.asarray(grid).T, levels=30, cmap="viridis")
    fig.colorbar(mesh, ax=ax, label="loss")
    ax.set_xlabel("direction 1 offset")
    ax.set_ylabel("direction 2 offset")
    fig.savefig(path, dpi=120)
    plt.close(fig)


# ---------------------------------------------------------------------------
# run comparison


def write_compare_csv(path, header: list[str], rows: list[list]):
    _write_rows(path, header, rows)


def compare_figure(path, labels: list[str], final_accs: list[float | None]):
    fig, ax = plt.subplots(figsize=(max(4.0, 1.2 * len(labels)), 4), constrained_layout=True)
    xs = np.arange(len(labels))
    ax.bar(xs, [a if a is not None else 0.0 for a in final_accs])
    ax.set_xticks(xs)
    ax.set_xticklabels(labels, rotation=20, ha="right")
    ax.set_ylabel("final test accuracy")
    fig.savefig(path, dpi=120)
    plt.close(fig)
