"""Self-contained verification suites combining oracles and closed forms.

Each suite returns a list of check dicts {name, passed, detail}; the CLI
prints them and the acceptance tests assert on them. `perturb` hooks exist
solely as negative controls: they corrupt one computed quantity so a healthy
pipeline must then fail.
"""

from __future__ import annotations

import numpy as np

from . import attention as attnmod
from . import metrics as metricsmod
from . import moe as moemod
from . import numerics as nm
from . import pgm_oracle
from . import routing


def _check(name: str, passed: bool, detail: str) -> dict:
    return {"name": name, "passed": bool(passed), "detail": detail}


def suite_topk_equivalence(seed: int = 0, cases: int = 1000) -> list[dict]:
    """The renormalized and the -inf-masked top-K formulations must agree in
    indices exactly and weights within 1e-12."""
    rng = nm.make_rng(seed, stream=1)
    worst = 0.0
    index_mismatches = 0
    ks = (1, 2, 8)
    for c in range(cases):
        gamma = rng.standard_normal(16) * rng.uniform(0.5, 3.0)
        if c % 10 == 0:
            gamma[rng.integers(0, 16)] = gamma[int(rng.integers(0, 16))]
        k = ks[c % len(ks)]
        soft = np.exp(gamma - gamma.max())
        soft /= soft.sum()
        a = routing.topk_renormalize(soft, k)
        b = routing.topk_neginf_softmax(gamma, k)
        if not np.array_equal(a.indices, b.indices):
            index_mismatches += 1
        else:
            worst = max(worst, float(np.abs(a.weights - b.weights).max()))
    return [
        _check("topk/indices_identical", index_mismatches == 0,
               f"{index_mismatches} mismatches over {cases} cases"),
        _check("topk/weights_within_1e-12", worst < 1e-12,
               f"worst |diff| = {worst:.3e} over {cases} cases"),
    ]


def suite_posterior_oracle(seed: int = 0, instances: int = 5,
                           mc_samples: int = 500_000, perturb=None) -> list[dict]:
    """Full-posterior mixed scores vs exact enumeration (1e-8) and vs
    conditional Monte-Carlo (3 standard errors)."""
    checks = []
    worst_enum = 0.0
    worst_mc_sigma = 0.0
    for k in range(instances):
        inst = pgm_oracle.random_instance(1000 + k, n=3, h=2, e=4, d=2, d_qk=2, sigma=1.0)
        u = attnmod.mha_forward(inst.x, inst.attn, "full").u.array
        _, capture = moemod.attention_aware_smoe(
            inst.x, inst.attn, inst.router, inst.experts,
            moemod.PosteriorConfig(sigma=1.0, head_mode="full_posterior"), k=2)
        enum = pgm_oracle.enumerate_expert_posterior(u, inst.x, inst)
        if perturb is not None:
            enum = perturb(enum)
        worst_enum = max(worst_enum, float(np.abs(capture.scores - enum).max()))
        mc_rng = nm.make_rng(seed, stream=300 + k)
        for i in range(inst.n):
            est, se = pgm_oracle.conditional_expert_mc(u, inst, i, mc_samples, mc_rng)
            sigmas = np.abs(est - enum[i]) / np.maximum(se, 1e-7)
            worst_mc_sigma = max(worst_mc_sigma, float(sigmas.max()))
    checks.append(_check("posterior/enumeration_within_1e-8", worst_enum < 1e-8,
                         f"worst |diff| = {worst_enum:.3e} over {instances} instances"))
    checks.append(_check("posterior/conditional_mc_within_3se", worst_mc_sigma <= 3.0,
                         f"worst deviation = {worst_mc_sigma:.2f} standard errors"))
    return checks


def suite_similarity_oracle(seed: int = 0, instances: int = 5,
                            mc_samples: int = 200_000) -> list[dict]:
    """Similarity-mixed scores vs loop enumeration (1e-12) and vs chain
    frequencies (3 standard errors)."""
    worst_enum = 0.0
    worst_mc_sigma = 0.0
    for k in range(instances):
        inst = pgm_oracle.random_instance(2000 + k, n=3, h=2, e=4, d=2)
        u = nm.make_rng(seed, stream=400 + k).standard_normal((3, 2))
        s = moemod.similarity_matrix(u, moemod.SimilarityConfig(
            w_s=nm.Tensor(inst.w_s), tau=inst.tau))
        r = routing.gate_rows(nm.Tensor(u), inst.router)
        mixed = moemod.similarity_aware_scores(s, r).p.array
        enum = pgm_oracle.enumerate_similarity_routing(u, inst)
        worst_enum = max(worst_enum, float(np.abs(mixed - enum).max()))

        mc_rng = nm.make_rng(seed, stream=500 + k)
        _, e_draws, _ = pgm_oracle.sample_sam_chain(u, inst, mc_rng, n=mc_samples)
        for i in range(3):
            freq = np.bincount(e_draws[:, i], minlength=inst.n_experts) / mc_samples
            se = np.sqrt(np.maximum(enum[i] * (1 - enum[i]), 1e-12) / mc_samples)
            sigmas = np.abs(freq - enum[i]) / np.maximum(se, 1e-7)
            worst_mc_sigma = max(worst_mc_sigma, float(sigmas.max()))
    return [
        _check("similarity/enumeration_within_1e-12", worst_enum < 1e-12,
               f"worst |diff| = {worst_enum:.3e} over {instances} instances"),
        _check("similarity/chain_mc_within_3se", worst_mc_sigma <= 3.0,
               f"worst deviation = {worst_mc_sigma:.2f} standard errors"),
    ]


def suite_attention_mean(seed: int = 0, instances: int = 3,
                         mc_samples: int = 200_000) -> list[dict]:
    """Deterministic attention output vs the chain's Monte-Carlo token mean."""
    worst_sigma = 0.0
    for k in range(instances):
        inst = pgm_oracle.random_instance(3000 + k, n=3, h=2, e=4, d=2)
        mha = attnmod.mha_forward(inst.x, inst.attn, "full").u.array
        rng = nm.make_rng(seed, stream=600 + k)
        _, _, u, _, _ = pgm_oracle.sample_mam_chain(inst.x, inst, rng, n=mc_samples)
        for i in range(inst.n):
            se = u[:, i].std(axis=0, ddof=1) / np.sqrt(mc_samples)
            sigmas = np.abs(u[:, i].mean(axis=0) - mha[i]) / np.maximum(se, 1e-12)
            worst_sigma = max(worst_sigma, float(sigmas.max()))
    return [_check("attention_mean/mc_within_3se", worst_sigma <= 3.0,
                   f"worst deviation = {worst_sigma:.2f} standard errors")]


def suite_entropy_bound(seed: int = 0, cases: int = 10_000) -> list[dict]:
    """Mixture-entropy upper bound on random instances plus the sharp-mixing
    corner where the mixed entropy must drop below each token's own."""
    rng = nm.make_rng(seed, stream=700)
    worst_margin = np.inf
    for _ in range(cases):
        n = int(rng.integers(2, 9))
        e = int(rng.integers(2, 17))
        r = rng.dirichlet(np.ones(e) * rng.uniform(0.2, 3.0), size=n)
        s = rng.dirichlet(np.ones(n) * rng.uniform(0.2, 3.0), size=n)
        for restrict in (False, True):
            out = metricsmod.prop1_bound_check(r, s, restrict_to_ji=restrict)
            worst_margin = min(worst_margin, float(out["margin"].min()))
    holds = worst_margin >= -1e-9

    corner_rng = nm.make_rng(seed, stream=701)
    u = corner_rng.standard_normal((6, 8))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    logits = (u @ u.T) / 1e-4
    s = np.exp(logits - logits.max(axis=1, keepdims=True))
    s /= s.sum(axis=1, keepdims=True)
    r = corner_rng.dirichlet(np.ones(5), size=6)
    out = metricsmod.prop1_bound_check(r, s, restrict_to_ji=True)
    h_r = nm.entropy_rows(r)
    corner_gap = float((out["lhs"] - h_r).max())
    return [
        _check("entropy_bound/holds_on_random", holds,
               f"worst margin = {worst_margin:.3e} over {cases} instances (both modes)"),
        _check("entropy_bound/sharp_mixing_below_own", corner_gap <= 1e-6,
               f"max H(mixed) - H(own) = {corner_gap:.3e}"),
    ]


def suite_reductions(seed: int = 0) -> list[dict]:
    """Structural reduction laws between the combiners."""
    checks = []
    rng = nm.make_rng(seed, stream=800)

    router = routing.make_linear_router(4, 4, seed=801)
    experts = moemod.make_expert_params(4, 4, 4, seed=802)
    u = rng.standard_normal((5, 4))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    base, _ = moemod.smoe_forward(u, router, experts, k=2)
    sim, _ = moemod.similarity_aware_smoe(
        u, router, experts, moemod.SimilarityConfig.identity(4, tau=1e-6), k=2)
    diff = float(np.abs(base.array - sim.array).max())
    checks.append(_check("reduction/identity_similarity_is_baseline", diff < 1e-12,
                         f"max |diff| = {diff:.3e}"))

    dense = moemod.moe_dense(u, router, experts)
    full, _ = moemod.smoe_forward(u, router, experts, k=4)
    diff = float(np.abs(dense.array - full.array).max())
    checks.append(_check("reduction/k_equals_e_is_dense", diff < 1e-12,
                         f"max |diff| = {diff:.3e}"))

    inst = pgm_oracle.random_instance(803, n=4, h=2, e=4, d=3, d_qk=2)
    out_attn = attnmod.mha_forward(inst.x, inst.attn, "full")
    _, capture = moemod.attention_aware_smoe(
        inst.x, inst.attn, inst.router, inst.experts,
        moemod.PosteriorConfig(sigma=1e6), k=2)
    h_star = attnmod.select_min_entropy_head(out_attn.a)
    r = routing.gate_rows(out_attn.u, inst.router).array
    prior_mix = out_attn.a[h_star].array @ r
    diff = float(np.abs(capture.scores - prior_mix).max())
    checks.append(_check("reduction/flat_likelihood_is_prior_mixing", diff < 1e-6,
                         f"max |diff| = {diff:.3e}"))
    return checks


def run_all_suites(seed: int = 0, fast: bool = False, perturb=None) -> list[dict]:
    if fast:
        sizes = dict(topk_cases=200, instances=2, mc=20_000, bound_cases=500)
    else:
        sizes = dict(topk_cases=1000, instances=5, mc=None, bound_cases=10_000)
    checks = []
    checks += suite_topk_equivalence(seed, cases=sizes["topk_cases"])
    checks += suite_posterior_oracle(seed, instances=sizes["instances"],
                                     mc_samples=sizes["mc"] or 500_000, perturb=perturb)
    checks += suite_similarity_oracle(seed, instances=sizes["instances"],
                                      mc_samples=sizes["mc"] or 200_000)
    checks += suite_attention_mean(seed, instances=min(3, sizes["instances"]),
                                   mc_samples=sizes["mc"] or 200_000)
    checks += suite_entropy_bound(seed, cases=sizes["bound_cases"])
    checks += suite_reductions(seed)
    return checks
