"""Shared CSV loading, argument handling, and deterministic rendering.

Each figure script consumes one or more labeled metric CSVs written by the
training CLI (`--in label=path`, repeatable) and writes one image. Rendering
is deterministic: identical inputs produce byte-identical files.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

VARIANT_COLORS = {
    "baseline": "#666666",
    "similarity_aware": "#1f77b4",
    "attention_aware": "#d62728",
}
FALLBACK_COLORS = ["#2ca02c", "#9467bd", "#8c564b", "#e377c2"]


class CsvFormatError(Exception):
    def __init__(self, path, detail):
        super().__init__(f"{path}: {detail}")


def load_metric_csv(path, expected_header: list[str]) -> list[dict]:
    """Strictly validated read: the header and every cell must conform."""
    path = Path(path)
    if not path.exists():
        raise CsvFormatError(path, "file not found")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvFormatError(path, "file is empty") from None
        if header != expected_header:
            raise CsvFormatError(path, f"expected columns {expected_header}, found {header}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise CsvFormatError(path, f"line {lineno}: wrong field count")
            parsed = {}
            for col, cell in zip(header, row):
                try:
                    parsed[col] = float(cell)
                except ValueError:
                    raise CsvFormatError(
                        path, f"line {lineno}: column {col!r} is not numeric: {cell!r}") from None
            rows.append(parsed)
    if not rows:
        raise CsvFormatError(path, "no data rows")
    return rows


def parse_labeled_inputs(values: list[str]) -> list[tuple[str, Path]]:
    out = []
    for v in values:
        if "=" in v:
            label, _, path = v.partition("=")
        else:
            label, path = Path(v).stem, v
        out.append((label, Path(path)))
    return out


def color_for(label: str, index: int) -> str:
    return VARIANT_COLORS.get(label, FALLBACK_COLORS[index % len(FALLBACK_COLORS)])


def save_deterministic(fig, out_path) -> None:
    """PNG/SVG output with tool metadata stripped so re-renders are byte-stable."""
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    suffix = out_path.suffix.lower()
    if suffix == ".svg":
        metadata = {"Date": None, "Creator": None}
    else:
        metadata = {"Software": None}
    fig.savefig(out_path, dpi=150, metadata=metadata)
    plt.close(fig)


def build_parser(description: str) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description=description)
    parser.add_argument("--in", dest="inputs", action="append", required=True,
                        metavar="LABEL=CSV", help="labeled input CSV (repeatable)")
    parser.add_argument("--out", required=True, help="output image path (.png or .svg)")
    return parser


def run(render_fn, description: str, argv=None) -> int:
    args = build_parser(description).parse_args(argv)
    try:
        render_fn(parse_labeled_inputs(args.inputs), args.out)
    except CsvFormatError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    return 0
