"""Routing stability and balance measurements.

A RoutingRecord is one checkpoint's snapshot of routing on a fixed evaluation
token set: per layer, each token's selection distribution (dense gate scores
for the baseline, mixed scores for the aware variants) and its selected
expert ids. All entropies are in nats; entropy is always measured on the
pre-top-K distribution.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .errors import AlignmentError, ValidationError
from .moe import RoutingCapture


@dataclass
class RoutingRecord:
    """Per-layer routing snapshots for one epoch on a fixed token set."""

    epoch: int
    token_keys: np.ndarray
    layers: list[RoutingCapture]

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def validate(self) -> None:
        for cap in self.layers:
            if cap.scores.shape[0] != self.token_keys.shape[0]:
                raise ValidationError("layer capture does not cover the token set")


def _check_aligned(rec_a: RoutingRecord, rec_b: RoutingRecord) -> None:
    if rec_a.n_layers != rec_b.n_layers:
        raise AlignmentError(f"layer counts differ: {rec_a.n_layers} vs {rec_b.n_layers}")
    if rec_a.token_keys.shape != rec_b.token_keys.shape or \
            np.any(rec_a.token_keys != rec_b.token_keys):
        raise AlignmentError("records cover different evaluation token sets")


def fluctuation_rate(rec_a: RoutingRecord, rec_b: RoutingRecord) -> dict[str, np.ndarray]:
    """Fraction of tokens whose routing changed between two checkpoints.

    `top1` compares the single highest-scoring expert (the headline rate);
    `set_change` compares the whole selected-id set, which only differs from
    top1 when more than one expert is kept.
    """
    _check_aligned(rec_a, rec_b)
    top1, set_change = [], []
    for cap_a, cap_b in zip(rec_a.layers, rec_b.layers):
        changed_top1 = cap_a.selected[:, 0] != cap_b.selected[:, 0]
        top1.append(float(changed_top1.mean()))
        sets_differ = np.any(np.sort(cap_a.selected, axis=1) != np.sort(cap_b.selected, axis=1), axis=1)
        set_change.append(float(sets_differ.mean()))
    return {"top1": np.array(top1), "set_change": np.array(set_change)}


def mean_decision_entropy(rec: RoutingRecord) -> np.ndarray:
    """Per-layer mean entropy (nats) of the selection distributions."""
    return np.array([float(nm.entropy_rows(cap.scores).mean()) for cap in rec.layers])


def entropy_ratio(rec_model: RoutingRecord, rec_baseline: RoutingRecord) -> np.ndarray:
    """Per-layer mean decision entropy of a model divided by a baseline's.

    A zero-entropy baseline layer with a nonzero numerator is reported as the
    +inf sentinel.
    """
    if rec_model.n_layers != rec_baseline.n_layers:
        raise AlignmentError("records have different layer counts")
    num = mean_decision_entropy(rec_model)
    den = mean_decision_entropy(rec_baseline)
    out = np.empty_like(num)
    for i, (a, b) in enumerate(zip(num, den)):
        if b == 0.0:
            out[i] = 1.0 if a == 0.0 else math.inf
        else:
            out[i] = a / b
    return out


def load_distribution(rec: RoutingRecord) -> dict[str, np.ndarray]:
    """Per-layer fraction of token-selections routed to each expert, plus the
    KL divergence of that load from the uniform distribution (nats)."""
    loads, kls = [], []
    for cap in rec.layers:
        n_experts = cap.scores.shape[1]
        counts = np.bincount(cap.selected.reshape(-1), minlength=n_experts).astype(np.float64)
        frac = counts / counts.sum()
        loads.append(frac)
        nz = frac[frac > 0]
        kls.append(float((nz * np.log(nz * n_experts)).sum()))
    return {"load": np.stack(loads), "kl_from_uniform": np.array(kls)}


def prop1_bound_check(r_rows, s_weights, restrict_to_ji: bool = False) -> dict[str, np.ndarray]:
    """Checks the mixture-entropy upper bound per token.

    For token i with mixing weights s(i, .) over peer tokens and per-peer
    selection distributions r_j, the mixed distribution p_i = sum_j s(i,j) r_j
    satisfies H(p_i) <= sum_j s(i,j) H(r_j) + H(s_i). With `restrict_to_ji`,
    weights on peers whose decision entropy exceeds H(r_i) are zeroed (ties
    kept; i itself always qualifies) and the row is renormalized first.
    """
    r = np.asarray(r_rows, dtype=np.float64)
    s = np.asarray(s_weights, dtype=np.float64).copy()
    n = r.shape[0]
    if s.shape != (n, n):
        raise ValidationError(f"weights must be ({n},{n}), got {s.shape}")
    h_r = nm.entropy_rows(r)
    lhs = np.empty(n)
    rhs = np.empty(n)
    for i in range(n):
        row = s[i].copy()
        if restrict_to_ji:
            row[h_r > h_r[i]] = 0.0
            total = row.sum()
            if total <= 0:
                raise ValidationError("restricted mixing weights carry no mass")
            row /= total
        p = row @ r
        lhs[i] = nm.entropy(p / p.sum())
        mix_entropy = float(nm.entropy(row / row.sum()))
        rhs[i] = float(row @ h_r) + mix_entropy
    margin = rhs - lhs
    return {"lhs": lhs, "rhs": rhs, "margin": margin, "holds": margin >= -1e-9}


# ---------------------------------------------------------------------------
# report assembly and serialization
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    """Everything the analysis step measures for one run (and optional baseline)."""

    variant: str
    seed: int
    epoch_pair: tuple[int, int]
    fluctuation_top1: np.ndarray = None
    fluctuation_set: np.ndarray = None
    mean_entropy: np.ndarray = None
    entropy_ratio: np.ndarray | None = None
    baseline_variant: str | None = None
    load: np.ndarray = None
    load_kl: np.ndarray = None
    extra: dict = field(default_factory=dict)

    def file_stem(self) -> str:
        a, b = self.epoch_pair
        return f"metrics__{self.variant}__seed{self.seed}__ep{a}-{b}"

    def to_json_dict(self) -> dict:
        def arr(x):
            return None if x is None else [float(v) for v in np.asarray(x).reshape(-1)]

        return {
            "variant": self.variant,
            "seed": self.seed,
            "epoch_pair": list(self.epoch_pair),
            "baseline_variant": self.baseline_variant,
            "fluctuation_top1": arr(self.fluctuation_top1),
            "fluctuation_set": arr(self.fluctuation_set),
            "mean_entropy": arr(self.mean_entropy),
            "entropy_ratio": arr(self.entropy_ratio),
            "load": None if self.load is None else [[float(v) for v in row] for row in self.load],
            "load_kl": arr(self.load_kl),
            "extra": self.extra,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        """One row per layer per metric; vector-valued metrics carry an index."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["metric", "layer", "index", "value"])
        def rows(name, values):
            if values is None:
                return
            for layer, v in enumerate(values):
                writer.writerow([name, layer, "", repr(float(v))])

        rows("fluctuation_top1", self.fluctuation_top1)
        rows("fluctuation_set", self.fluctuation_set)
        rows("mean_entropy", self.mean_entropy)
        rows("entropy_ratio", self.entropy_ratio)
        rows("load_kl", self.load_kl)
        if self.load is not None:
            for layer, frac in enumerate(self.load):
                for e, v in enumerate(frac):
                    writer.writerow(["load_fraction", layer, e, repr(float(v))])
        return buf.getvalue()

    @staticmethod
    def from_json(text: str) -> "MetricsReport":
        raw = json.loads(text)
        def arr(x):
            return None if x is None else np.asarray(x, dtype=np.float64)

        return MetricsReport(
            variant=raw["variant"], seed=raw["seed"],
            epoch_pair=tuple(raw["epoch_pair"]),
            baseline_variant=raw.get("baseline_variant"),
            fluctuation_top1=arr(raw.get("fluctuation_top1")),
            fluctuation_set=arr(raw.get("fluctuation_set")),
            mean_entropy=arr(raw.get("mean_entropy")),
            entropy_ratio=arr(raw.get("entropy_ratio")),
            load=arr(raw.get("load")),
            load_kl=arr(raw.get("load_kl")),
            extra=raw.get("extra", {}),
        )


def build_report(variant: str, seed: int, rec_prev: RoutingRecord, rec_last: RoutingRecord,
                 rec_baseline: RoutingRecord | None = None,
                 baseline_variant: str | None = None) -> MetricsReport:
    """Standard report: fluctuation over the final epoch pair, entropy at the
    penultimate epoch (optionally as a ratio against a baseline's record at
    the same epoch), and the final load distribution."""
    fluct = fluctuation_rate(rec_prev, rec_last)
    loads = load_distribution(rec_last)
    report = MetricsReport(
        variant=variant, seed=seed,
        epoch_pair=(rec_prev.epoch, rec_last.epoch),
        fluctuation_top1=fluct["top1"], fluctuation_set=fluct["set_change"],
        mean_entropy=mean_decision_entropy(rec_prev),
        load=loads["load"], load_kl=loads["kl_from_uniform"],
        baseline_variant=baseline_variant,
    )
    if rec_baseline is not None:
        report.entropy_ratio = entropy_ratio(rec_prev, rec_baseline)
    return report


def records_to_csv(records: list[RoutingRecord]) -> str:
    """Flat CSV of every captured routing decision across epochs."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    n_experts = records[0].layers[0].scores.shape[1] if records else 0
    header = ["layer", "token_global_index", "epoch", "selected_experts"]
    header += [f"score_{e}" for e in range(n_experts)]
    header.append("h_star")
    writer.writerow(header)
    for rec in records:
        for layer, cap in enumerate(rec.layers):
            for t in range(cap.scores.shape[0]):
                sel = "|".join(str(int(v)) for v in cap.selected[t])
                row = [layer, int(rec.token_keys[t]), rec.epoch, sel]
                row += [repr(float(v)) for v in cap.scores[t]]
                row.append(cap.h_star)
                writer.writerow(row)
    return buf.getvalue()
