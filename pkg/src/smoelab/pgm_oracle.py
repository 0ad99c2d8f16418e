"""Brute-force oracles for the generative models behind every combiner.

Everything here recomputes attention rows, gate distributions, Gaussian
densities, and expert networks with explicit numpy loops, independently of
the production modules, so that closed-form expressions elsewhere in the
package can be validated against exact enumeration and Monte-Carlo sampling
of the underlying chains:

* plain expert chain      — expert ~ Cat(gate(u)),      output ~ N(g_e(u), I)
* similarity chain        — peer ~ Cat(similarity row), expert ~ Cat(gate(u_peer))
* attention chain         — head uniform, position ~ Cat(attention row),
                            token ~ N(W_h x_z, sigma^2 I), expert ~ Cat(gate(token))
* attention-aware chain   — as above but the expert is drawn from the gate of
                            the token at the attended position.

Enumeration refuses instances beyond (N<=5, H<=3, E<=5, D<=4) rather than
silently running.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import attention as attnmod
from . import moe as moemod
from . import numerics as nm
from . import routing
from .errors import EnumerationBoundsError, ParameterError

BOUNDS = {"n": 5, "h": 3, "e": 5, "d": 4}


@dataclass
class PGMInstance:
    """A complete small parameterization to enumerate or sample over."""

    x: np.ndarray
    attn: attnmod.AttentionParams
    router: routing.RouterParams
    experts: moemod.ExpertParams
    sigma: float
    tau: float
    w_s: np.ndarray

    def __post_init__(self):
        if self.sigma < 0:
            raise ParameterError("sigma must be nonnegative (0 = point mass, oracle only)")
        if self.tau <= 0:
            raise ParameterError("tau must be positive")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    @property
    def n_heads(self) -> int:
        return self.attn.n_heads

    @property
    def n_experts(self) -> int:
        return self.experts.n_experts


def random_instance(seed: int, n: int = 3, h: int = 2, e: int = 4, d: int = 2,
                    d_qk: int = 2, sigma: float = 1.0, tau: float = 1.0) -> PGMInstance:
    """Seeded instance within enumeration bounds."""
    x = nm.make_rng(seed, stream=1).standard_normal((n, d))
    attn = attnmod.make_attention_params(d, d_qk, h, seed=seed * 7 + 1)
    router = routing.make_linear_router(d, e, seed=seed * 7 + 2)
    experts = moemod.make_expert_params(d, d + 1, e, seed=seed * 7 + 3)
    return PGMInstance(x=x, attn=attn, router=router, experts=experts,
                       sigma=sigma, tau=tau, w_s=np.eye(d))


def check_enumeration_bounds(n: int, h: int, e: int, d: int) -> None:
    if n > BOUNDS["n"] or h > BOUNDS["h"] or e > BOUNDS["e"] or d > BOUNDS["d"]:
        raise EnumerationBoundsError(
            f"instance (N={n}, H={h}, E={e}, D={d}) exceeds enumeration bounds "
            f"(N<={BOUNDS['n']}, H<={BOUNDS['h']}, E<={BOUNDS['e']}, D<={BOUNDS['d']})")


# ---------------------------------------------------------------------------
# loop-level reimplementations (the independent path)
# ---------------------------------------------------------------------------

def _softmax_vec(v: np.ndarray) -> np.ndarray:
    e = np.exp(v - v.max())
    return e / e.sum()


def _gate_vec(u: np.ndarray, inst: PGMInstance) -> np.ndarray:
    w, b = inst.router.w.array, inst.router.b.array
    gamma = np.array([float(w[k] @ u) + b[k] for k in range(w.shape[0])])
    return _softmax_vec(gamma)


def _gate_all(u_seq: np.ndarray, inst: PGMInstance) -> np.ndarray:
    return np.stack([_gate_vec(u_seq[j], inst) for j in range(u_seq.shape[0])])


def _gate_rows_np(u_rows: np.ndarray, inst: PGMInstance) -> np.ndarray:
    """Vectorized gate for chain samplers (many draws at once)."""
    gamma = u_rows @ inst.router.w.array.T + inst.router.b.array
    e = np.exp(gamma - gamma.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _expert_rows_np(e: int, u_rows: np.ndarray, inst: PGMInstance) -> np.ndarray:
    ex = inst.experts
    hidden = np.logaddexp(0.0, u_rows @ ex.w1[e].array.T + ex.b1[e].array)
    return hidden @ ex.w2[e].array.T + ex.b2[e].array


def _expert_vec(e: int, u: np.ndarray, inst: PGMInstance) -> np.ndarray:
    ex = inst.experts
    hidden = np.logaddexp(0.0, ex.w1[e].array @ u + ex.b1[e].array)
    return ex.w2[e].array @ hidden + ex.b2[e].array


def _attention_row(i: int, h: int, inst: PGMInstance) -> np.ndarray:
    wq, wk = inst.attn.w_query[h].array, inst.attn.w_key[h].array
    q = wq @ inst.x[i]
    logits = np.array([float(q @ (wk @ inst.x[j])) for j in range(inst.n)])
    return _softmax_vec(logits / math.sqrt(inst.attn.d_qk))


def _attention_all(inst: PGMInstance) -> np.ndarray:
    return np.stack([[_attention_row(i, h, inst) for i in range(inst.n)]
                     for h in range(inst.n_heads)])  # (H, N, N)


def _similarity_row(i: int, u_seq: np.ndarray, inst: PGMInstance) -> np.ndarray:
    logits = np.array([float(u_seq[i] @ inst.w_s @ u_seq[j]) for j in range(u_seq.shape[0])])
    return _softmax_vec(logits / inst.tau)


def _log_density(u: np.ndarray, mean: np.ndarray, sigma: float) -> float:
    d = u.size
    resid = u - mean
    return -0.5 * d * math.log(2.0 * math.pi * sigma * sigma) \
        - float(resid @ resid) / (2.0 * sigma * sigma)


def _categorical(rows: np.ndarray, draws: np.ndarray) -> np.ndarray:
    """Inverse-CDF categorical sampling: one uniform draw per row of `rows`."""
    cum = np.cumsum(rows, axis=-1)
    return (draws[..., None] > cum).sum(axis=-1).clip(max=rows.shape[-1] - 1)


# ---------------------------------------------------------------------------
# chain samplers (single draw by default, vectorized with n=...)
# ---------------------------------------------------------------------------

def sample_smoe_chain(u, inst: PGMInstance, rng: np.random.Generator, n: int | None = None):
    """Draw (expert, output) from the plain expert chain at token u."""
    u = np.asarray(u, dtype=np.float64)
    r = _gate_vec(u, inst)
    count = 1 if n is None else n
    e = _categorical(np.tile(r, (count, 1)), rng.uniform(size=count))
    outs = np.empty((count, inst.d))
    for k in range(inst.n_experts):
        sel = e == k
        if sel.any():
            outs[sel] = _expert_vec(k, u, inst) + rng.standard_normal((int(sel.sum()), inst.d))
    if n is None:
        return int(e[0]), outs[0]
    return e, outs


def sample_sam_chain(u_seq, inst: PGMInstance, rng: np.random.Generator, n: int | None = None):
    """Draw (peer, expert, output) per token from the similarity chain."""
    u_seq = np.asarray(u_seq, dtype=np.float64)
    n_tok = u_seq.shape[0]
    s_rows = np.stack([_similarity_row(i, u_seq, inst) for i in range(n_tok)])
    gates = _gate_all(u_seq, inst)
    count = 1 if n is None else n
    s = np.empty((count, n_tok), dtype=np.int64)
    e = np.empty((count, n_tok), dtype=np.int64)
    o = np.empty((count, n_tok, inst.d))
    for i in range(n_tok):
        s[:, i] = _categorical(np.tile(s_rows[i], (count, 1)), rng.uniform(size=count))
        e[:, i] = _categorical(gates[s[:, i]], rng.uniform(size=count))
        for k in range(inst.n_experts):
            sel = e[:, i] == k
            if sel.any():
                o[sel, i] = _expert_vec(k, u_seq[i], inst) \
                    + rng.standard_normal((int(sel.sum()), inst.d))
    if n is None:
        return s[0], e[0], o[0]
    return s, e, o


def _sample_attention_latents(inst: PGMInstance, rng: np.random.Generator, count: int):
    """Common first stage: heads, attended positions, and latent tokens."""
    a = _attention_all(inst)
    means = np.stack([np.stack([inst.attn.w_merged[h].array @ inst.x[j]
                                for j in range(inst.n)]) for h in range(inst.n_heads)])
    h = rng.integers(0, inst.n_heads, size=(count, inst.n))
    z = np.empty((count, inst.n), dtype=np.int64)
    for i in range(inst.n):
        for head in range(inst.n_heads):
            sel = h[:, i] == head
            if sel.any():
                z[sel, i] = _categorical(np.tile(a[head, i], (int(sel.sum()), 1)),
                                         rng.uniform(size=int(sel.sum())))
    u = means[h, z]
    if inst.sigma > 0:
        u = u + inst.sigma * rng.standard_normal((count, inst.n, inst.d))
    return h, z, u


def sample_mam_chain(x, inst: PGMInstance, rng: np.random.Generator, n: int | None = None):
    """Draw (head, position, token, expert, output) per token from the
    attention-then-expert chain. sigma = 0 collapses the token to its mean."""
    count = 1 if n is None else n
    h, z, u = _sample_attention_latents(inst, rng, count)
    e = np.empty((count, inst.n), dtype=np.int64)
    o = np.empty((count, inst.n, inst.d))
    for i in range(inst.n):
        e[:, i] = _categorical(_gate_rows_np(u[:, i], inst), rng.uniform(size=count))
        for k in range(inst.n_experts):
            sel = e[:, i] == k
            if sel.any():
                o[sel, i] = _expert_rows_np(k, u[sel, i], inst)
        o[:, i] += rng.standard_normal((count, inst.d))
    if n is None:
        return h[0], z[0], u[0], e[0], o[0]
    return h, z, u, e, o


def sample_a2mm_chain(x, inst: PGMInstance, rng: np.random.Generator, n: int | None = None):
    """As the attention chain, but each token's expert is drawn from the gate
    of the token at its attended position."""
    count = 1 if n is None else n
    h, z, u = _sample_attention_latents(inst, rng, count)
    e = np.empty((count, inst.n), dtype=np.int64)
    o = np.empty((count, inst.n, inst.d))
    for i in range(inst.n):
        peer_tokens = u[np.arange(count), z[:, i]]
        e[:, i] = _categorical(_gate_rows_np(peer_tokens, inst), rng.uniform(size=count))
        for k in range(inst.n_experts):
            sel = e[:, i] == k
            if sel.any():
                o[sel, i] = _expert_rows_np(k, u[sel, i], inst)
        o[:, i] += rng.standard_normal((count, inst.d))
    if n is None:
        return h[0], z[0], u[0], e[0], o[0]
    return h, z, u, e, o


# ---------------------------------------------------------------------------
# exact enumeration
# ---------------------------------------------------------------------------

def enumerate_expert_posterior(u_seq, x_seq, inst: PGMInstance) -> np.ndarray:
    """Exact P(expert | tokens, inputs) by enumerating the (head, position)
    lattice in the log domain. Ground truth for the posterior-mixing path."""
    u_seq = np.asarray(u_seq, dtype=np.float64)
    x_seq = np.asarray(x_seq, dtype=np.float64)
    check_enumeration_bounds(u_seq.shape[0], inst.n_heads, inst.n_experts, u_seq.shape[1])
    if inst.sigma <= 0:
        raise ParameterError("posterior enumeration needs sigma > 0")
    n, n_heads, n_experts = u_seq.shape[0], inst.n_heads, inst.n_experts
    gates = _gate_all(u_seq, inst)
    out = np.zeros((n, n_experts))
    for i in range(n):
        log_lat = np.empty((n_heads, n))
        for h in range(n_heads):
            row = _attention_row(i, h, inst)
            for j in range(n):
                mean = inst.attn.w_merged[h].array @ x_seq[j]
                log_lat[h, j] = -math.log(n_heads) + math.log(row[j]) \
                    + _log_density(u_seq[i], mean, inst.sigma)
        flat = log_lat.reshape(-1)
        mx = flat.max()
        weights = np.exp(flat - mx)
        weights /= weights.sum()
        weights = weights.reshape(n_heads, n)
        for h in range(n_heads):
            for j in range(n):
                out[i] += weights[h, j] * gates[j]
    return out


def enumerate_similarity_routing(u_seq, inst: PGMInstance) -> np.ndarray:
    """Exact per-token expert distribution of the similarity chain: row i is
    sum_j P(peer = j) * gate(u_j)."""
    u_seq = np.asarray(u_seq, dtype=np.float64)
    check_enumeration_bounds(u_seq.shape[0], 1, inst.n_experts, u_seq.shape[1])
    n = u_seq.shape[0]
    gates = _gate_all(u_seq, inst)
    out = np.zeros((n, inst.n_experts))
    for i in range(n):
        row = _similarity_row(i, u_seq, inst)
        for j in range(n):
            out[i] += row[j] * gates[j]
    return out


def conditional_expert_mc(u_seq, inst: PGMInstance, token: int, n: int,
                          rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Monte-Carlo estimate of the attention-aware expert distribution for one
    token, conditioned on the realized token sequence.

    (head, position) pairs are drawn from the prior chain and reweighted by the
    Gaussian likelihood of the observed token (self-normalized importance
    sampling); the expert is then drawn from the gate at the attended position.
    Returns per-expert estimates and standard errors from the ratio estimator.
    """
    u_seq = np.asarray(u_seq, dtype=np.float64)
    a = _attention_all(inst)
    means = np.stack([np.stack([inst.attn.w_merged[h].array @ inst.x[j]
                                for j in range(inst.n)]) for h in range(inst.n_heads)])
    gates = _gate_all(u_seq, inst)

    heads = rng.integers(0, inst.n_heads, size=n)
    z = np.empty(n, dtype=np.int64)
    for h in range(inst.n_heads):
        sel = heads == h
        if sel.any():
            z[sel] = _categorical(np.tile(a[h, token], (int(sel.sum()), 1)),
                                  rng.uniform(size=int(sel.sum())))
    resid = u_seq[token] - means[heads, z]
    log_w = -(resid * resid).sum(axis=1) / (2.0 * inst.sigma * inst.sigma)
    w = np.exp(log_w - log_w.max())
    experts = _categorical(gates[z], rng.uniform(size=n))

    w_sum = w.sum()
    est = np.zeros(inst.n_experts)
    se = np.zeros(inst.n_experts)
    for e in range(inst.n_experts):
        ind = (experts == e).astype(np.float64)
        est[e] = float(w @ ind) / w_sum
        se[e] = math.sqrt(float((w * w) @ (ind - est[e]) ** 2)) / w_sum
    return est, se
