"""Multi-head self-attention that keeps its per-head attention matrices.

Each head h owns query and key projections plus one merged value-output
matrix, so a head's contribution to the output is A_h X W_h^T (rows) and the
multi-head output is the plain average over heads. The raw attention
matrices are retained because downstream routing mixes expert scores through
them.

Inputs may be a single sequence (N x D) or a batch of sequences
(B x N x D); attention is always within a sequence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .errors import ShapeError, ValidationError
from .numerics import Tensor

MASK_MODES = ("full", "causal")


@dataclass
class AttentionParams:
    """Per-head projections; `w_merged[h]` is the single DxD value-output map."""

    w_query: list[Tensor]
    w_key: list[Tensor]
    w_merged: list[Tensor]

    def __post_init__(self):
        if not (len(self.w_query) == len(self.w_key) == len(self.w_merged)):
            raise ShapeError("per-head parameter lists must have equal length")
        d_qk, d = self.w_query[0].shape
        for wq, wk, wm in zip(self.w_query, self.w_key, self.w_merged):
            if wq.shape != (d_qk, d) or wk.shape != (d_qk, d):
                raise ShapeError("all heads must share D and D_qk")
            if wm.shape != (d, d):
                raise ShapeError("merged value-output matrix must be DxD")

    @property
    def n_heads(self) -> int:
        return len(self.w_query)

    @property
    def d_qk(self) -> int:
        return self.w_query[0].shape[0]

    @property
    def d_model(self) -> int:
        return self.w_query[0].shape[1]

    def all_params(self) -> list[Tensor]:
        return [*self.w_query, *self.w_key, *self.w_merged]


@dataclass
class AttentionOutput:
    u: Tensor
    a: list[Tensor]
    mask_mode: str


def make_attention_params(d: int, d_qk: int, n_heads: int, seed: int) -> AttentionParams:
    rng = nm.make_rng(seed)
    wq, wk, wm = [], [], []
    for h in range(n_heads):
        wq.append(Tensor(rng.normal(0.0, d ** -0.5, (d_qk, d)), requires_grad=True, name=f"attn.wq{h}"))
        wk.append(Tensor(rng.normal(0.0, d ** -0.5, (d_qk, d)), requires_grad=True, name=f"attn.wk{h}"))
        wm.append(Tensor(rng.normal(0.0, d ** -0.5, (d, d)), requires_grad=True, name=f"attn.wm{h}"))
    return AttentionParams(w_query=wq, w_key=wk, w_merged=wm)


def causal_mask(n: int) -> np.ndarray:
    """Boolean keep-mask: position i may attend to j <= i."""
    return np.tril(np.ones((n, n), dtype=bool))


def _check_input(x) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim not in (2, 3):
        raise ShapeError(f"attention input must be (N,D) or (B,N,D), got {x.shape}")
    if x.shape[-2] == 0:
        raise ShapeError("attention over an empty token sequence")
    return x


def attention_matrices(x, params: AttentionParams, mask_mode: str = "full") -> list[Tensor]:
    """Row-stochastic attention matrix per head.

    A_h = softmax(X Wq_h^T Wk_h X^T / sqrt(D_qk)) with future positions
    masked to exactly zero in causal mode.
    """
    if mask_mode not in MASK_MODES:
        raise ValidationError(f"unknown mask mode {mask_mode!r}")
    x = _check_input(x)
    n = x.shape[-2]
    scale = 1.0 / np.sqrt(params.d_qk)
    mask = causal_mask(n) if mask_mode == "causal" else None
    mats = []
    for h in range(params.n_heads):
        q = nm.matmul(x, nm.transpose(params.w_query[h]))
        k = nm.matmul(x, nm.transpose(params.w_key[h]))
        logits = nm.mul(nm.matmul(q, nm.transpose(k)), scale)
        mats.append(nm.softmax_rows(logits, mask=mask))
    return mats


def mha_forward(x, params: AttentionParams, mask_mode: str = "full") -> AttentionOutput:
    """Multi-head attention output plus the retained attention matrices.

    Row i of the output is the head-average of sum_j A_h[i,j] (W_h x_j).
    """
    x = _check_input(x)
    mats = attention_matrices(x, params, mask_mode)
    acc = None
    for h in range(params.n_heads):
        values = nm.matmul(x, nm.transpose(params.w_merged[h]))
        head_out = nm.matmul(mats[h], values)
        acc = head_out if acc is None else nm.add(acc, head_out)
    u = nm.mul(acc, 1.0 / params.n_heads)
    return AttentionOutput(u=u, a=mats, mask_mode=mask_mode)


def mean_attention_row_entropy(a_h) -> float:
    """Mean entropy (nats) over all rows of an attention matrix.

    Masked positions hold exact zeros and contribute nothing, so causal rows
    are measured over their unmasked prefix.
    """
    arr = a_h.array if isinstance(a_h, Tensor) else np.asarray(a_h, dtype=np.float64)
    return float(nm.entropy_rows(arr).mean())


def select_min_entropy_head(a: list) -> int:
    """Index of the head with minimal mean row entropy; ties to the lowest index."""
    if not a:
        raise ValueError("no attention matrices given")
    entropies = np.array([mean_attention_row_entropy(m) for m in a])
    return int(np.argmin(entropies))
