"""Expert-load histograms: fraction of routed tokens per expert, one panel per
layer, grouped bars per variant."""

from __future__ import annotations

import sys
from collections import defaultdict

import numpy as np
import matplotlib.pyplot as plt

from .common import color_for, load_metric_csv, run, save_deterministic

HEADER = ["layer", "expert", "fraction"]


def prepare(inputs):
    """Returns (sorted layers, experts, {label: {layer: fractions}})."""
    data = {}
    layers = set()
    n_experts = 0
    for label, path in inputs:
        rows = load_metric_csv(path, HEADER)
        per_layer = defaultdict(dict)
        for r in rows:
            per_layer[int(r["layer"])][int(r["expert"])] = r["fraction"]
            layers.add(int(r["layer"]))
            n_experts = max(n_experts, int(r["expert"]) + 1)
        data[label] = {
            layer: [cols.get(e, 0.0) for e in range(n_experts)]
            for layer, cols in per_layer.items()
        }
    return sorted(layers), n_experts, data


def render(inputs, out_path) -> None:
    layers, n_experts, data = prepare(inputs)
    fig, axes = plt.subplots(1, len(layers), figsize=(4 * len(layers), 3.2),
                             squeeze=False, sharey=True)
    labels = list(data)
    width = 0.8 / len(labels)
    x = np.arange(n_experts)
    for col, layer in enumerate(layers):
        ax = axes[0][col]
        for i, label in enumerate(labels):
            fractions = data[label].get(layer, [0.0] * n_experts)
            ax.bar(x + (i - (len(labels) - 1) / 2) * width, fractions, width,
                   label=label, color=color_for(label, i))
        ax.axhline(1.0 / n_experts, color="black", linewidth=0.8, linestyle="--")
        ax.set_title(f"layer {layer}", fontsize=9)
        ax.set_xlabel("expert")
        ax.set_xticks(x)
    axes[0][0].set_ylabel("load fraction")
    axes[0][0].legend(fontsize=8)
    fig.tight_layout()
    save_deterministic(fig, out_path)


def main(argv=None) -> int:
    code = run(render, "expert load distribution histograms", argv)
    if argv is None:
        sys.exit(code)
    return code


if __name__ == "__main__":
    main()
