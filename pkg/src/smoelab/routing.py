"""Per-token expert scoring and sparse top-K selection.

Three router kinds produce a probability vector over experts:

* ``softmax_linear`` — softmax of affine scores W u + b (the default gate);
* ``frozen_random``  — same scoring, but W, b are seeded at construction and
  excluded from the trainable parameter set;
* ``cosine``         — softmax of cosine similarity between a low-dimensional
  projection of the token and per-expert embeddings, divided by a learnable
  temperature.

Top-K selection is deterministic: experts are ranked by descending score with
ties broken by ascending expert id. The kept scores are renormalized to sum
to one. ``topk_neginf_softmax`` implements the equivalent formulation that
masks non-selected affinity scores to -inf before the softmax.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .errors import ParameterError, ValidationError
from .numerics import Tensor


@dataclass
class RouterParams:
    """Gating parameters for one expert layer."""

    kind: str
    w: Tensor
    b: Tensor
    projection: Tensor | None = None
    tau_c: Tensor | None = None
    trainable: bool = True

    KINDS = ("softmax_linear", "cosine", "frozen_random")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ParameterError(f"unknown router kind {self.kind!r}")
        if self.kind == "cosine" and (self.projection is None or self.tau_c is None):
            raise ParameterError("cosine router needs a projection and a temperature")
        if self.kind == "frozen_random":
            self.trainable = False

    @property
    def n_experts(self) -> int:
        return self.w.shape[0]

    def trainable_params(self) -> list[Tensor]:
        if not self.trainable:
            return []
        params = [self.w, self.b]
        if self.kind == "cosine":
            params += [self.projection, self.tau_c]
        return params


@dataclass
class SparseSelection:
    """Result of sparse selection for a single token.

    `indices` are the selected expert ids ordered by descending score then
    ascending id; `weights` are the renormalized scores over that set;
    `dense_scores` retains the full pre-selection distribution for metrics.
    """

    indices: np.ndarray
    weights: np.ndarray
    dense_scores: np.ndarray = field(repr=False, default=None)


def make_linear_router(d: int, e: int, seed: int, scale: float | None = None) -> RouterParams:
    """Trainable softmax gate with W ~ N(0, 1/D), b = 0."""
    rng = nm.make_rng(seed)
    std = scale if scale is not None else d ** -0.5
    w = Tensor(rng.normal(0.0, std, size=(e, d)), requires_grad=True, name="router.w")
    b = Tensor(np.zeros(e), requires_grad=True, name="router.b")
    return RouterParams(kind="softmax_linear", w=w, b=b)


def make_frozen_router(d: int, e: int, seed: int) -> RouterParams:
    """Seeded random gate whose weights never join the trainable set."""
    rng = nm.make_rng(seed)
    w = Tensor(rng.normal(0.0, d ** -0.5, size=(e, d)), name="router.w")
    b = Tensor(np.zeros(e), name="router.b")
    return RouterParams(kind="frozen_random", w=w, b=b)


def make_cosine_router(d: int, e: int, seed: int, d_proj: int | None = None) -> RouterParams:
    """Cosine-similarity router on a d/4-dimensional projection, temperature 1."""
    rng = nm.make_rng(seed)
    dp = d_proj if d_proj is not None else max(1, d // 4)
    w = Tensor(rng.normal(0.0, dp ** -0.5, size=(e, dp)), requires_grad=True, name="router.w")
    b = Tensor(np.zeros(e), name="router.b")
    proj = Tensor(rng.normal(0.0, d ** -0.5, size=(dp, d)), requires_grad=True, name="router.proj")
    tau_c = Tensor(np.asarray(1.0), requires_grad=True, name="router.tau_c")
    return RouterParams(kind="cosine", w=w, b=b, projection=proj, tau_c=tau_c)


def affinity_scores(u, params: RouterParams) -> Tensor:
    """Affine expert scores W u + b for a single token."""
    if params.kind == "cosine":
        raise ValueError("affinity_scores is undefined for the cosine router kind")
    u = u if isinstance(u, Tensor) else Tensor(u)
    return nm.add(nm.matvec(params.w, u), params.b)


def gate_rows(u_rows, params: RouterParams) -> Tensor:
    """Expert-score distributions for a stack of tokens (last axis = features)."""
    u_rows = u_rows if isinstance(u_rows, Tensor) else Tensor(u_rows)
    if params.kind in ("softmax_linear", "frozen_random"):
        logits = nm.add(nm.matmul(u_rows, nm.transpose(params.w)), params.b)
        return nm.softmax_rows(logits)
    # cosine: unit-normalize both the projected tokens and the expert rows;
    # all-zero vectors stay zero, giving a flat pre-softmax score of 0
    proj = nm.l2_normalize_rows(nm.matmul(u_rows, nm.transpose(params.projection)))
    anchors = nm.l2_normalize_rows(params.w)
    cos = nm.matmul(proj, nm.transpose(anchors))
    return nm.softmax_rows(nm.div(cos, params.tau_c))


def gate(u, params: RouterParams) -> Tensor:
    """Probability vector over experts for one token."""
    u = u if isinstance(u, Tensor) else Tensor(u)
    rows = nm.reshape(u, (1, u.shape[-1]))
    return nm.reshape(gate_rows(rows, params), (params.n_experts,))


def topk_indices_rows(scores: np.ndarray, k: int) -> np.ndarray:
    """Top-k column indices per row, descending score, ties to the lower id."""
    order = np.argsort(-scores, axis=-1, kind="stable")
    return order[..., :k]


def topk_rows(p: Tensor, k: int) -> tuple[Tensor, np.ndarray]:
    """Differentiable row-wise top-k renormalization.

    Returns the renormalized weights (gradient flows into the selected
    entries of `p`) and the integer index matrix. The index set itself is
    treated as a constant of the forward pass.
    """
    if k < 1:
        raise ParameterError(f"k must be >= 1, got {k}")
    p = p if isinstance(p, Tensor) else Tensor(p)
    e = p.shape[-1]
    keep = min(k, e)
    idx = topk_indices_rows(p.array, keep)
    sel = np.take_along_axis(p.array, idx, axis=-1)
    totals = sel.sum(axis=-1, keepdims=True)
    if np.any(totals <= 0):
        raise ValidationError("top-k selection has zero total mass")
    w = sel / totals

    def bw(g):
        inner = (g * w).sum(axis=-1, keepdims=True)
        dsel = (g - inner) / totals
        dp = np.zeros_like(p.array)
        np.put_along_axis(dp, idx, dsel, axis=-1)
        nm._accumulate(p, dp)

    weights = nm._make(w, (p,), bw, "topk_rows")
    return weights, idx


def topk_renormalize(r, k: int) -> SparseSelection:
    """Keep the k largest entries of a probability vector, renormalized."""
    if k < 1:
        raise ParameterError(f"k must be >= 1, got {k}")
    dense = np.asarray(r.array if isinstance(r, Tensor) else r, dtype=np.float64).reshape(-1)
    weights, idx = topk_rows(Tensor(dense.reshape(1, -1)), k)
    return SparseSelection(indices=idx[0].copy(), weights=weights.array[0].copy(),
                           dense_scores=dense.copy())


def topk_neginf_softmax(gamma, k: int) -> SparseSelection:
    """Mask non-top-k affinity scores to -inf, then softmax the remainder."""
    if k < 1:
        raise ParameterError(f"k must be >= 1, got {k}")
    g = np.asarray(gamma.array if isinstance(gamma, Tensor) else gamma, dtype=np.float64).reshape(-1)
    e = g.size
    keep = min(k, e)
    idx = topk_indices_rows(g.reshape(1, -1), keep)[0]
    sel = g[idx]
    shifted = np.exp(sel - sel.max())
    weights = shifted / shifted.sum()
    full = np.exp(g - g.max())
    return SparseSelection(indices=idx.copy(), weights=weights, dense_scores=full / full.sum())
