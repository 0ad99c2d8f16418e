"""Per-layer decision-entropy ratio lines with the parity reference at 1.0."""

from __future__ import annotations

import sys

import matplotlib.pyplot as plt

from .common import color_for, load_metric_csv, run, save_deterministic

HEADER = ["layer", "ratio"]


def prepare(inputs):
    series = []
    for label, path in inputs:
        rows = load_metric_csv(path, HEADER)
        series.append((label, [int(r["layer"]) for r in rows], [r["ratio"] for r in rows]))
    return series


def render(inputs, out_path) -> None:
    series = prepare(inputs)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for i, (label, layers, ratios) in enumerate(series):
        ax.plot(layers, ratios, marker="o", label=label, color=color_for(label, i))
    ax.axhline(1.0, color="black", linewidth=0.8, linestyle="--", label="baseline parity")
    ax.set_xlabel("layer")
    ax.set_ylabel("entropy ratio vs baseline")
    all_layers = sorted({l for _, layers, _ in series for l in layers})
    ax.set_xticks(all_layers)
    ax.legend(fontsize=8)
    fig.tight_layout()
    save_deterministic(fig, out_path)


def main(argv=None) -> int:
    code = run(render, "per-layer decision-entropy ratio lines", argv)
    if argv is None:
        sys.exit(code)
    return code


if __name__ == "__main__":
    main()
