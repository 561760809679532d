"""Delimited metric output plus the matching rendered figures.

Every report path writes a CSV and, next to it, a PNG of the same data, so
runs can be inspected without re-loading anything. Float formatting is fixed
(%.10g) to keep identical runs byte-identical.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.10g}"
    return str(v)


def write_csv(path, header, rows):
    tmp = f"{path}.tmp"
    with open(tmp, "w") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(_fmt(v) for v in row) + "\n")
    os.replace(tmp, path)


def loss_curves_figure(metrics, path):
    """Per-term training curves on a log scale."""
    epochs = [row["epoch"] for row in metrics]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    for key in ("L_sdf_eik", "L_sdf_norm", "L_sdf_on", "L_sdf_off", "L_com", "L_seg"):
        vals = [row[key] for row in metrics]
        if any(v != 0.0 for v in vals):
            ax1.plot(epochs, vals, label=key)
    ax1.set_yscale("log")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("term value")
    ax1.legend(fontsize=7)
    ax2.plot(epochs, [row["total"] for row in metrics], color="k")
    ax2.set_yscale("log")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("total loss")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def sweep_figure(rows, path, label="model"):
    """IoU versus surface-selection threshold."""
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot([r[0] for r in rows], [r[1] for r in rows], marker="o", ms=3, label=label)
    ax.set_xscale("log")
    ax.set_xlabel("selection threshold")
    ax.set_ylabel("IoU (%)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def per_class_figure(per_class, class_names, path):
    """Bar chart of per-class IoU."""
    fig, ax = plt.subplots(figsize=(6, 4))
    ids = sorted(per_class)
    names = [class_names[c] if c < len(class_names) else str(c) for c in ids]
    ax.bar(range(len(ids)), [per_class[c] for c in ids])
    ax.set_xticks(range(len(ids)), names, rotation=30, ha="right")
    ax.set_ylabel("IoU (%)")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
