"""Expert networks and the four output combiners.

* ``moe_dense``            — every expert runs on every token; outputs are
  combined with the full gate distribution.
* ``smoe_forward``         — sparse baseline: top-K of the gate scores.
* ``similarity_aware_smoe``— per-token gate scores are mixed through a
  row-stochastic token-similarity matrix before the top-K.
* ``attention_aware_smoe`` — gate scores are mixed through the posterior
  attention matrix: prior attention reweighted by the Gaussian likelihood of
  the observed post-attention token, row-normalized. Either the single
  minimum-entropy head or the full head-responsibility mixture can be used.

All combiners accept a single sequence (N x D) or a batch (B x N x D) and
return the combined output together with a RoutingCapture holding the dense
(or mixed) selection distributions and the chosen expert sets. Discrete
choices (top-K index sets, the selected head) are constants of the forward
pass; gradients flow through the retained weights, the gate scores, and the
mixing-matrix entries.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import attention as attnmod
from . import numerics as nm
from . import routing
from .errors import DegenerateRowError, ParameterError, ValidationError
from .numerics import Tensor

NONLINEARITIES = ("softplus",)
HEAD_MODES = ("min_entropy_only", "full_posterior")


@dataclass
class ExpertParams:
    """E two-layer feed-forward experts sharing (D, d_ff).

    `eval_count` tallies per-token expert invocations so tests can assert the
    sparsity contract.
    """

    w1: list[Tensor]
    b1: list[Tensor]
    w2: list[Tensor]
    b2: list[Tensor]
    nonlinearity: str = "softplus"
    eval_count: int = 0

    def __post_init__(self):
        if self.nonlinearity not in NONLINEARITIES:
            raise ParameterError(f"unknown nonlinearity {self.nonlinearity!r}")

    @property
    def n_experts(self) -> int:
        return len(self.w1)

    @property
    def d_model(self) -> int:
        return self.w1[0].shape[1]

    def all_params(self) -> list[Tensor]:
        return [*self.w1, *self.b1, *self.w2, *self.b2]


@dataclass
class SimilarityConfig:
    """Token-similarity mixing: row-softmax of (U W_s U^T) / tau."""

    w_s: Tensor
    tau: float = 1.0
    mask_mode: str = "full"

    def __post_init__(self):
        if self.tau <= 0:
            raise ParameterError(f"tau must be positive, got {self.tau}")
        if self.mask_mode not in attnmod.MASK_MODES:
            raise ValidationError(f"unknown mask mode {self.mask_mode!r}")

    @classmethod
    def identity(cls, d: int, tau: float = 1.0, mask_mode: str = "full") -> "SimilarityConfig":
        return cls(w_s=Tensor(np.eye(d), name="w_s"), tau=tau, mask_mode=mask_mode)


@dataclass
class PosteriorConfig:
    """Attention-posterior mixing: likelihood width and head handling."""

    sigma: float = 1.0
    head_mode: str = "min_entropy_only"

    def __post_init__(self):
        if self.sigma <= 0:
            raise ParameterError(f"sigma must be positive, got {self.sigma}")
        if self.head_mode not in HEAD_MODES:
            raise ValidationError(f"unknown head mode {self.head_mode!r}")


@dataclass
class MixedScores:
    """Per-token expert-selection distributions after similarity/attention mixing."""

    p: Tensor

    def validate(self, atol: float = 1e-9) -> None:
        arr = self.p.array
        if np.any(arr < 0) or np.any(np.abs(arr.sum(axis=-1) - 1.0) > atol):
            raise ValidationError("mixed scores rows are not probability vectors")


@dataclass
class RoutingCapture:
    """One layer's routing snapshot on a token batch (rows flattened in order)."""

    scores: np.ndarray
    selected: np.ndarray
    h_star: int = -1


def make_expert_params(d: int, d_ff: int, e: int, seed: int) -> ExpertParams:
    rng = nm.make_rng(seed)
    w1, b1, w2, b2 = [], [], [], []
    for i in range(e):
        w1.append(Tensor(rng.normal(0.0, d ** -0.5, (d_ff, d)), requires_grad=True, name=f"expert{i}.w1"))
        b1.append(Tensor(np.zeros(d_ff), requires_grad=True, name=f"expert{i}.b1"))
        w2.append(Tensor(rng.normal(0.0, d_ff ** -0.5, (d, d_ff)), requires_grad=True, name=f"expert{i}.w2"))
        b2.append(Tensor(np.zeros(d), requires_grad=True, name=f"expert{i}.b2"))
    return ExpertParams(w1=w1, b1=b1, w2=w2, b2=b2)


def expert_rows(e: int, rows: Tensor, experts: ExpertParams) -> Tensor:
    """Run expert e on a stack of tokens (counts toward eval_count)."""
    if not 0 <= e < experts.n_experts:
        raise IndexError(f"expert index {e} out of range [0, {experts.n_experts})")
    experts.eval_count += rows.shape[0]
    hidden = nm.add(nm.matmul(rows, nm.transpose(experts.w1[e])), experts.b1[e])
    hidden = nm.softplus(hidden)
    return nm.add(nm.matmul(hidden, nm.transpose(experts.w2[e])), experts.b2[e])


def expert_forward(e: int, u, experts: ExpertParams) -> Tensor:
    """Run expert e on a single token."""
    u = u if isinstance(u, Tensor) else Tensor(u)
    rows = nm.reshape(u, (1, u.shape[-1]))
    return nm.reshape(expert_rows(e, rows, experts), (experts.d_model,))


def _flatten_tokens(t: Tensor) -> tuple[Tensor, tuple]:
    if t.ndim == 2:
        return t, t.shape
    return nm.reshape(t, (t.shape[0] * t.shape[1], t.shape[2])), t.shape


def _sparse_combine(u_flat: Tensor, weights: Tensor, idx: np.ndarray,
                    experts: ExpertParams) -> Tensor:
    """Sum of weight * expert(token) over each token's selected experts.

    Each expert is evaluated only on the tokens routed to it.
    """
    m = u_flat.shape[0]
    out = None
    for e in range(experts.n_experts):
        rows, cols = np.nonzero(idx == e)
        if rows.size == 0:
            continue
        sub = nm.take_rows(u_flat, rows)
        y = expert_rows(e, sub, experts)
        w = nm.reshape(nm.take_elements(weights, rows, cols), (rows.size, 1))
        contrib = nm.scatter_rows(nm.mul(w, y), rows, m)
        out = contrib if out is None else nm.add(out, contrib)
    return out


def moe_dense(u_rows, router: routing.RouterParams, experts: ExpertParams) -> Tensor:
    """Dense combine: row i = sum_e r_e(u_i) g_e(u_i)."""
    u_rows = u_rows if isinstance(u_rows, Tensor) else Tensor(u_rows)
    flat, shape = _flatten_tokens(u_rows)
    r = routing.gate_rows(flat, router)
    out = None
    for e in range(experts.n_experts):
        y = expert_rows(e, flat, experts)
        w = nm.narrow(r, -1, e, 1)
        term = nm.mul(w, y)
        out = term if out is None else nm.add(out, term)
    return nm.reshape(out, shape)


def smoe_forward(u_rows, router: routing.RouterParams, experts: ExpertParams,
                 k: int) -> tuple[Tensor, RoutingCapture]:
    """Sparse baseline: top-K of the per-token gate scores."""
    u_rows = u_rows if isinstance(u_rows, Tensor) else Tensor(u_rows)
    flat, shape = _flatten_tokens(u_rows)
    r = routing.gate_rows(flat, router)
    weights, idx = routing.topk_rows(r, k)
    out = _sparse_combine(flat, weights, idx, experts)
    capture = RoutingCapture(scores=r.array.copy(), selected=idx.copy())
    return nm.reshape(out, shape), capture


def similarity_matrix(u_rows, cfg: SimilarityConfig) -> Tensor:
    """Row-stochastic token-similarity matrix softmax((U W_s U^T) / tau).

    Causal mode zeroes mixing weights on future positions and renormalizes
    each row over its prefix.
    """
    u_rows = u_rows if isinstance(u_rows, Tensor) else Tensor(u_rows)
    logits = nm.matmul(nm.matmul(u_rows, cfg.w_s), nm.transpose(u_rows))
    n = u_rows.shape[-2]
    mask = attnmod.causal_mask(n) if cfg.mask_mode == "causal" else None
    return nm.softmax_rows(logits, temperature=cfg.tau, mask=mask)


def similarity_aware_scores(s, r) -> MixedScores:
    """Mix per-token gate scores through the similarity matrix: P = S R."""
    s = s if isinstance(s, Tensor) else Tensor(s)
    r = r if isinstance(r, Tensor) else Tensor(r)
    return MixedScores(p=nm.matmul(s, r))


def similarity_aware_smoe(u_rows, router: routing.RouterParams, experts: ExpertParams,
                          cfg: SimilarityConfig, k: int) -> tuple[Tensor, RoutingCapture]:
    """Top-K over similarity-mixed scores, combined with each token's own experts."""
    u_rows = u_rows if isinstance(u_rows, Tensor) else Tensor(u_rows)
    s = similarity_matrix(u_rows, cfg)
    r = routing.gate_rows(u_rows, router)
    mixed = similarity_aware_scores(s, r)
    flat, shape = _flatten_tokens(u_rows)
    p_flat, _ = _flatten_tokens(mixed.p)
    weights, idx = routing.topk_rows(p_flat, k)
    out = _sparse_combine(flat, weights, idx, experts)
    capture = RoutingCapture(scores=p_flat.array.copy(), selected=idx.copy())
    return nm.reshape(out, shape), capture


def likelihood_matrix(u_rows, x_rows, w_h: Tensor, sigma: float) -> Tensor:
    """Log-domain likelihood: entry (i, j) is the isotropic Gaussian log-density
    of token u_i around the projected input W_h x_j with width sigma."""
    if sigma <= 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    u_rows = u_rows if isinstance(u_rows, Tensor) else Tensor(u_rows)
    x_rows = x_rows if isinstance(x_rows, Tensor) else Tensor(x_rows)
    d = u_rows.shape[-1]
    means = nm.matmul(x_rows, nm.transpose(w_h))
    u_sq = nm.tensor_sum(nm.mul(u_rows, u_rows), axis=-1, keepdims=True)
    m_sq = nm.transpose(nm.tensor_sum(nm.mul(means, means), axis=-1, keepdims=True))
    cross = nm.matmul(u_rows, nm.transpose(means))
    sq_dist = nm.add(nm.sub(u_sq, nm.mul(cross, 2.0)), m_sq)
    const = -0.5 * d * np.log(2.0 * np.pi * sigma * sigma)
    return nm.add(nm.mul(sq_dist, -1.0 / (2.0 * sigma * sigma)), const)


def posterior_attention(a_h, logl_h) -> Tensor:
    """Prior attention reweighted by the token likelihood, row-normalized.

    Computed per row as softmax(log A + log L) over the positions where the
    prior is nonzero, so structurally masked entries stay exactly zero.
    """
    a_h = a_h if isinstance(a_h, Tensor) else Tensor(a_h)
    logl_h = logl_h if isinstance(logl_h, Tensor) else Tensor(logl_h)
    mask = a_h.array > 0
    if not mask.any(axis=-1).all():
        raise DegenerateRowError("attention row carries no probability mass")
    joint = nm.add(nm.log_where_positive(a_h, mask), logl_h)
    return nm.softmax_rows(joint, mask=mask)


def posterior_head(a: list, logl: list) -> Tensor:
    """Responsibility of each head for each token's representation.

    H^p[i, h] is proportional to prior(h) * sum_j A_h[i,j] L_h[i,j]; the head
    prior is uniform, so it cancels in the normalization. Everything is
    accumulated in the log domain.
    """
    if not a:
        raise ValueError("no attention matrices given")
    scores = []
    for a_h, logl_h in zip(a, logl):
        a_h = a_h if isinstance(a_h, Tensor) else Tensor(a_h)
        mask = a_h.array > 0
        if not mask.any(axis=-1).all():
            raise DegenerateRowError("attention row carries no probability mass")
        joint = nm.add(nm.log_where_positive(a_h, mask), logl_h)
        scores.append(nm.logsumexp_last(joint, mask=mask))
    return nm.softmax_rows(nm.stack_last(scores))


def attention_aware_scores(a_post, r) -> MixedScores:
    """Mix gate scores through the posterior attention matrix: P = A^p R."""
    a_post = a_post if isinstance(a_post, Tensor) else Tensor(a_post)
    r = r if isinstance(r, Tensor) else Tensor(r)
    return MixedScores(p=nm.matmul(a_post, r))


def posterior_mixed_scores(attn_out: attnmod.AttentionOutput, x_rows,
                           attn_params: attnmod.AttentionParams, r: Tensor,
                           pcfg: PosteriorConfig) -> tuple[MixedScores, int]:
    """Mix gate scores through the posterior attention of an attention pass.

    Uses the minimum-entropy head by default, or the exact head-responsibility
    mixture in full-posterior mode. Returns the mixed scores and the selected
    head index (-1 in full-posterior mode).
    """
    u = attn_out.u
    logl = [likelihood_matrix(u, x_rows, w_m, pcfg.sigma) for w_m in attn_params.w_merged]
    if pcfg.head_mode == "min_entropy_only":
        h_star = attnmod.select_min_entropy_head(attn_out.a)
        a_post = posterior_attention(attn_out.a[h_star], logl[h_star])
        return attention_aware_scores(a_post, r), h_star
    h_resp = posterior_head(attn_out.a, logl)
    p = None
    for h in range(attn_params.n_heads):
        a_post = posterior_attention(attn_out.a[h], logl[h])
        term = nm.mul(nm.narrow(h_resp, -1, h, 1), nm.matmul(a_post, r))
        p = term if p is None else nm.add(p, term)
    return MixedScores(p=p), -1


def attention_aware_smoe(x_rows, attn_params: attnmod.AttentionParams,
                         router: routing.RouterParams, experts: ExpertParams,
                         pcfg: PosteriorConfig, k: int,
                         mask_mode: str = "full") -> tuple[Tensor, RoutingCapture]:
    """Attention output routed through likelihood-reweighted attention.

    Runs multi-head attention on the inputs, forms the posterior attention of
    either the minimum-entropy head (default) or the full head-responsibility
    mixture, mixes the gate scores through it, and combines the top-K experts
    on each attention-output token.
    """
    attn_out = attnmod.mha_forward(x_rows, attn_params, mask_mode)
    u = attn_out.u
    r = routing.gate_rows(u, router)
    mixed, h_star = posterior_mixed_scores(attn_out, x_rows, attn_params, r, pcfg)

    flat, shape = _flatten_tokens(u)
    p_flat, _ = _flatten_tokens(mixed.p)
    weights, idx = routing.topk_rows(p_flat, k)
    out = _sparse_combine(flat, weights, idx, experts)
    capture = RoutingCapture(scores=p_flat.array.copy(), selected=idx.copy(), h_star=h_star)
    return nm.reshape(out, shape), capture
