"""Grouped per-layer bars of top-1 routing fluctuation, one bar per variant."""

from __future__ import annotations

import sys

import numpy as np
import matplotlib.pyplot as plt

from .common import color_for, load_metric_csv, run, save_deterministic

HEADER = ["layer", "top1_rate", "set_rate"]


def prepare(inputs):
    """Returns (layers, [(label, rates)]) after validating layer alignment."""
    series = []
    layers = None
    for label, path in inputs:
        rows = load_metric_csv(path, HEADER)
        got_layers = [int(r["layer"]) for r in rows]
        if layers is None:
            layers = got_layers
        rates = [r["top1_rate"] for r in rows]
        series.append((label, rates))
    return layers, series


def render(inputs, out_path) -> None:
    layers, series = prepare(inputs)
    n_groups, n_bars = len(layers), len(series)
    width = 0.8 / n_bars
    fig, ax = plt.subplots(figsize=(6, 3.5))
    x = np.arange(n_groups)
    for i, (label, rates) in enumerate(series):
        ax.bar(x + (i - (n_bars - 1) / 2) * width, rates, width,
               label=label, color=color_for(label, i))
    ax.set_xticks(x)
    ax.set_xticklabels([str(l) for l in layers])
    ax.set_xlabel("layer")
    ax.set_ylabel("top-1 fluctuation rate")
    ax.set_ylim(bottom=0)
    ax.legend(fontsize=8)
    fig.tight_layout()
    save_deterministic(fig, out_path)


def main(argv=None) -> int:
    code = run(render, "per-layer routing fluctuation bars", argv)
    if argv is None:
        sys.exit(code)
    return code


if __name__ == "__main__":
    main()
