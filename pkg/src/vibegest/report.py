"""Report rendering: result tables as CSV and figures as SVG files.

All writers are deterministic for fixed inputs: no timestamps, fixed float
formats, a fixed SVG hash salt, and figure metadata stripped of creation
dates, so a rerun with the same seed reproduces the bundle byte for byte.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

from . import dataio, reference  # noqa: E402

matplotlib.rcParams["svg.hashsalt"] = "vibegest"

TABLE2_COLUMNS = ("split", "arch", "num_blocks", "bits", "batch_size", "lr",
                  "fp32_accuracy", "quant_accuracy", "accuracy_drop",
                  "lut_pct", "bram_pct", "dsp_pct", "latency_ms", "power_mw",
                  "energy_mj")


def format_accuracy_drop(fp32_acc, quant_acc):
    """Relative drop of the quantized model, e.g. 0.998 -> 0.996 is ↓0.20%."""
    if fp32_acc <= 0:
        return "n/a"
    drop = (fp32_acc - quant_acc) / fp32_acc * 100.0
    if abs(drop) < 0.005:
        return "-0.00%"
    arrow = "↓" if drop > 0 else "↑"
    return f"{arrow}{abs(drop):.2f}%"


_FORMATS = {"fp32_accuracy": "{:.4f}", "quant_accuracy": "{:.4f}",
            "lut_pct": "{:.2f}", "bram_pct": "{:.2f}", "dsp_pct": "{:.2f}",
            "latency_ms": "{:.2f}", "power_mw": "{:.1f}",
            "energy_mj": "{:.3f}", "lr": "{:.3e}"}


def _cell(key, value):
    if value is None:
        return ""
    fmt = _FORMATS.get(key)
    return fmt.format(value) if fmt else str(value)


def write_table2_csv(rows, path):
    """Selected-configuration table, one row per (split, arch) study."""
    lines = [",".join(TABLE2_COLUMNS)]
    for row in rows:
        row = dict(row)
        if "accuracy_drop" not in row:
            row["accuracy_drop"] = format_accuracy_drop(
                row["fp32_accuracy"], row["quant_accuracy"])
        lines.append(",".join(_cell(c, row.get(c)) for c in TABLE2_COLUMNS))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def write_confusion_csv(conf, path, labels=dataio.LABELS):
    conf = np.asarray(conf)
    lines = ["true\\pred," + ",".join(labels)]
    for i, label in enumerate(labels):
        lines.append(label + "," + ",".join(str(int(v)) for v in conf[i]))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def render_confusion_svg(conf, path, labels=dataio.LABELS, title=None):
    conf = np.asarray(conf)
    fig, ax = plt.subplots(figsize=(4.0, 3.6))
    im = ax.imshow(conf, cmap="Blues")
    ax.set_xticks(range(len(labels)), labels)
    ax.set_yticks(range(len(labels)), labels)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    if title:
        ax.set_title(title)
    thresh = conf.max() / 2.0 if conf.max() else 0.5
    for i in range(conf.shape[0]):
        for j in range(conf.shape[1]):
            ax.text(j, i, str(int(conf[i, j])), ha="center", va="center",
                    color="white" if conf[i, j] > thresh else "black")
    fig.colorbar(im, ax=ax, shrink=0.85)
    _save_svg(fig, path)


def render_scatter_svg(trial_points, front_points, path):
    """All completed trials with the Pareto front highlighted.

    Points are (energy_mj, accuracy) pairs."""
    fig, ax = plt.subplots(figsize=(4.8, 3.6))
    if trial_points:
        xs, ys = zip(*trial_points)
        ax.scatter(xs, ys, s=18, c="#9ab0c4", label="completed trials")
    if front_points:
        fp = sorted(front_points)
        xs, ys = zip(*fp)
        ax.plot(xs, ys, "o-", c="#c0392b", markersize=5, label="Pareto front")
    ax.set_xlabel("energy per inference (mJ)")
    ax.set_ylabel("quantized validation accuracy")
    if trial_points or front_points:
        ax.legend(loc="lower right", fontsize=8)
    ax.grid(True, alpha=0.3)
    _save_svg(fig, path)


def write_generalization_csv(rows, path):
    """Accuracy grid across evaluation targets (one row per study/target)."""
    cols = ("method", "target", "arch", "num_blocks", "bits",
            "fp32_accuracy", "quant_accuracy")
    lines = [",".join(cols)]
    for row in sorted(rows, key=lambda r: (r["method"], str(r["target"]))):
        lines.append(",".join(_cell(c, row.get(c)) for c in cols))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def write_reference_constants(outdir):
    """Ship the fixed reference rows used for surrogate calibration.

    These report published measurements (synthesis resources, measured
    power, a large 2D-CNN baseline) that this toolchain does not attempt to
    recompute; they appear in reports as constants only."""
    outdir = str(outdir)
    cols = ("split", "arch", "num_blocks", "bits", "batch_size", "lr",
            "fp32_accuracy", "quant_accuracy", "lut_pct", "bram_pct",
            "dsp_pct", "latency_ms", "power_mw", "energy_mj")
    lines = [",".join(cols)]
    for r in reference.REFERENCE_DESIGNS:
        lines.append(",".join(_cell(c, getattr(r, c)) for c in cols))
    with open(outdir + "/reference_designs.csv", "w") as f:
        f.write("\n".join(lines) + "\n")

    notes = [
        ("hardware_latency_deviation_pct",
         reference.HARDWARE_LATENCY_DEVIATION_PCT),
        ("hardware_power_deviation_pct",
         reference.HARDWARE_POWER_DEVIATION_PCT),
        ("baseline_2dcnn_params", reference.BASELINE_2DCNN["params"]),
        ("baseline_2dcnn_latency_ms", reference.BASELINE_2DCNN["latency_ms"]),
        ("baseline_input_elems", reference.BASELINE_INPUT_ELEMS),
        ("raw_input_elems", reference.RAW_INPUT_ELEMS),
        ("input_reduction_factor",
         round(reference.BASELINE_INPUT_ELEMS / reference.RAW_INPUT_ELEMS, 1)),
    ]
    for split, accs in sorted(reference.BASELINE_2DCNN["accuracy"].items()):
        notes.append((f"baseline_2dcnn_{split}_fp32_accuracy", accs[0]))
        notes.append((f"baseline_2dcnn_{split}_test_accuracy", accs[1]))
    with open(outdir + "/reference_notes.csv", "w") as f:
        f.write("key,value\n")
        for key, value in notes:
            f.write(f"{key},{value}\n")


def write_run_report_csv(metrics, path):
    """Key/value run summary for one compiled design."""
    with open(path, "w") as f:
        f.write("key,value\n")
        for key in sorted(metrics):
            f.write(f"{key},{metrics[key]}\n")


def _save_svg(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
