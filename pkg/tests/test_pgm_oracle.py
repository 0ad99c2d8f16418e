import numpy as np
import pytest

from smoelab import attention as attnmod
from smoelab import moe, pgm_oracle, routing
from smoelab import numerics as nm
from smoelab.errors import EnumerationBoundsError
from smoelab.numerics import Tensor


def test_bounds_refusal():
    with pytest.raises(EnumerationBoundsError):
        pgm_oracle.check_enumeration_bounds(6, 2, 4, 2)
    with pytest.raises(EnumerationBoundsError):
        pgm_oracle.check_enumeration_bounds(3, 2, 9, 2)
    inst = pgm_oracle.random_instance(0, n=3)
    with pytest.raises(EnumerationBoundsError):
        pgm_oracle.enumerate_expert_posterior(np.zeros((6, 2)), np.zeros((6, 2)), inst)


# ---------------------------------------------------------------------------
# plain expert chain
# ---------------------------------------------------------------------------

def test_smoe_chain_near_one_hot_gate_is_deterministic():
    inst = pgm_oracle.random_instance(1)
    inst.router.b.array[:] = 0.0
    inst.router.b.array[2] = 200.0  # gate mass collapses onto expert 2
    inst.router.w.array[:] = 0.0
    rng = nm.make_rng(10)
    draws, _ = pgm_oracle.sample_smoe_chain(np.ones(2), inst, rng, n=500)
    assert np.all(draws == 2)


def test_smoe_chain_mc_mean_matches_dense_combine(rng):
    inst = pgm_oracle.random_instance(2)
    u = np.array([0.4, -0.9])
    n = 50_000
    _, outs = pgm_oracle.sample_smoe_chain(u, inst, rng, n=n)
    r = pgm_oracle._gate_vec(u, inst)
    expected = sum(r[e] * pgm_oracle._expert_vec(e, u, inst) for e in range(inst.n_experts))
    se = outs.std(axis=0, ddof=1) / np.sqrt(n)
    assert np.all(np.abs(outs.mean(axis=0) - expected) <= 3.0 * se)
    # the analytic target agrees with the production dense combiner
    dense = moe.moe_dense(u.reshape(1, 2), inst.router, inst.experts).array[0]
    np.testing.assert_allclose(expected, dense, atol=1e-10)


def test_smoe_chain_seeded_reproducibility():
    inst = pgm_oracle.random_instance(3)
    a = pgm_oracle.sample_smoe_chain(np.ones(2), inst, nm.make_rng(5), n=20)
    b = pgm_oracle.sample_smoe_chain(np.ones(2), inst, nm.make_rng(5), n=20)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


# ---------------------------------------------------------------------------
# similarity chain
# ---------------------------------------------------------------------------

def test_sam_chain_identity_similarity_selects_self(rng):
    inst = pgm_oracle.random_instance(4, tau=1e-6)
    u = rng.standard_normal((3, 2))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    s, _, _ = pgm_oracle.sample_sam_chain(u, inst, rng, n=200)
    np.testing.assert_array_equal(s, np.tile(np.arange(3), (200, 1)))


def test_sam_chain_expert_frequencies_match_enumeration(rng):
    inst = pgm_oracle.random_instance(5)
    u = rng.standard_normal((3, 2))
    n = 60_000
    _, e_draws, _ = pgm_oracle.sample_sam_chain(u, inst, rng, n=n)
    expected = pgm_oracle.enumerate_similarity_routing(u, inst)
    for i in range(3):
        freq = np.bincount(e_draws[:, i], minlength=inst.n_experts) / n
        se = np.sqrt(np.maximum(expected[i] * (1 - expected[i]), 1e-12) / n)
        assert np.all(np.abs(freq - expected[i]) <= 3.0 * se)


def test_sam_chain_single_token_reduces_to_expert_chain(rng):
    inst = pgm_oracle.random_instance(6)
    u = rng.standard_normal((1, 2))
    n = 40_000
    s, e_draws, _ = pgm_oracle.sample_sam_chain(u, inst, rng, n=n)
    assert np.all(s == 0)
    r = pgm_oracle._gate_vec(u[0], inst)
    freq = np.bincount(e_draws[:, 0], minlength=inst.n_experts) / n
    se = np.sqrt(np.maximum(r * (1 - r), 1e-12) / n)
    assert np.all(np.abs(freq - r) <= 3.0 * se)


# ---------------------------------------------------------------------------
# attention chain
# ---------------------------------------------------------------------------

def test_mam_chain_mc_mean_matches_mha(rng):
    inst = pgm_oracle.random_instance(7)
    n = 60_000
    _, _, u, _, _ = pgm_oracle.sample_mam_chain(inst.x, inst, rng, n=n)
    mha = attnmod.mha_forward(inst.x, inst.attn, "full").u.array
    for i in range(inst.n):
        se = u[:, i].std(axis=0, ddof=1) / np.sqrt(n)
        assert np.all(np.abs(u[:, i].mean(axis=0) - mha[i]) <= 3.0 * se)


def test_mam_chain_one_hot_attention_fixes_position():
    inst = pgm_oracle.random_instance(8, n=2, h=1)
    inst.x = 50.0 * np.eye(2)  # orthogonal high-norm tokens: self-attention only
    inst.attn.w_query[0] = Tensor(np.eye(2))
    inst.attn.w_key[0] = Tensor(np.eye(2))
    rng = nm.make_rng(11)
    _, z, _, _, _ = pgm_oracle.sample_mam_chain(inst.x, inst, rng, n=100)
    np.testing.assert_array_equal(z, np.tile(np.arange(2), (100, 1)))


def test_mam_chain_sigma_zero_is_point_mass():
    inst = pgm_oracle.random_instance(9, sigma=0.0)
    rng = nm.make_rng(12)
    h, z, u, _, _ = pgm_oracle.sample_mam_chain(inst.x, inst, rng, n=50)
    for k in range(50):
        for i in range(inst.n):
            mean = inst.attn.w_merged[int(h[k, i])].array @ inst.x[int(z[k, i])]
            np.testing.assert_array_equal(u[k, i], mean)


# ---------------------------------------------------------------------------
# attention-aware chain and the posterior oracle
# ---------------------------------------------------------------------------

def test_a2mm_single_token_expert_matches_gate(rng):
    inst = pgm_oracle.random_instance(10, n=1)
    inst.x = inst.x[:1]
    n = 40_000
    _, _, u, e_draws, _ = pgm_oracle.sample_a2mm_chain(inst.x, inst, rng, n=n)
    # with one token the attended position is itself, so experts follow its gate
    freqs = np.bincount(e_draws[:, 0], minlength=inst.n_experts) / n
    gates = np.stack([pgm_oracle._gate_vec(u[k, 0], inst) for k in range(0, n, 100)])
    expected = gates.mean(axis=0)
    assert np.abs(freqs - expected).max() < 0.02


def test_a2mm_seeded_reproducibility():
    inst = pgm_oracle.random_instance(11)
    a = pgm_oracle.sample_a2mm_chain(inst.x, inst, nm.make_rng(13), n=30)
    b = pgm_oracle.sample_a2mm_chain(inst.x, inst, nm.make_rng(13), n=30)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)


def test_enumeration_rows_sum_to_one(rng):
    inst = pgm_oracle.random_instance(12)
    u = rng.standard_normal((3, 2))
    post = pgm_oracle.enumerate_expert_posterior(u, inst.x, inst)
    np.testing.assert_allclose(post.sum(axis=1), np.ones(3), atol=1e-10)
    sim = pgm_oracle.enumerate_similarity_routing(u, inst)
    np.testing.assert_allclose(sim.sum(axis=1), np.ones(3), atol=1e-10)


def test_enumeration_flat_likelihood_reduces_to_prior_mixing(rng):
    inst = pgm_oracle.random_instance(13, h=1, sigma=1e6)
    u = rng.standard_normal((3, 2))
    post = pgm_oracle.enumerate_expert_posterior(u, inst.x, inst)
    a = np.stack([pgm_oracle._attention_row(i, 0, inst) for i in range(3)])
    gates = pgm_oracle._gate_all(u, inst)
    np.testing.assert_allclose(post, a @ gates, atol=1e-6)


def test_enumeration_identical_gates_collapse(rng):
    inst = pgm_oracle.random_instance(14)
    inst.router.w.array[:] = 0.0  # every token shares one gate distribution
    u = rng.standard_normal((3, 2))
    post = pgm_oracle.enumerate_expert_posterior(u, inst.x, inst)
    common = pgm_oracle._gate_vec(u[0], inst)
    for i in range(3):
        np.testing.assert_allclose(post[i], common, atol=1e-10)


def test_similarity_enumeration_identity_returns_gates(rng):
    inst = pgm_oracle.random_instance(15, tau=1e-6)
    u = rng.standard_normal((3, 2))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    sim = pgm_oracle.enumerate_similarity_routing(u, inst)
    np.testing.assert_allclose(sim, pgm_oracle._gate_all(u, inst), atol=1e-9)


def test_similarity_scores_match_enumeration(rng):
    inst = pgm_oracle.random_instance(16)
    u = rng.standard_normal((3, 2))
    s = moe.similarity_matrix(u, moe.SimilarityConfig(w_s=Tensor(inst.w_s), tau=inst.tau))
    r = routing.gate_rows(Tensor(u), inst.router)
    mixed = moe.similarity_aware_scores(s, r)
    oracle = pgm_oracle.enumerate_similarity_routing(u, inst)
    assert np.abs(mixed.p.array - oracle).max() < 1e-12


def test_full_posterior_mode_matches_enumeration():
    for seed in range(3):
        inst = pgm_oracle.random_instance(20 + seed)
        out = attnmod.mha_forward(inst.x, inst.attn, "full")
        _, capture = moe.attention_aware_smoe(
            inst.x, inst.attn, inst.router, inst.experts,
            moe.PosteriorConfig(sigma=inst.sigma, head_mode="full_posterior"), k=2)
        oracle = pgm_oracle.enumerate_expert_posterior(out.u.array, inst.x, inst)
        assert np.abs(capture.scores - oracle).max() < 1e-8


def test_conditional_mc_matches_enumeration(rng):
    inst = pgm_oracle.random_instance(17)
    u = attnmod.mha_forward(inst.x, inst.attn, "full").u.array
    oracle = pgm_oracle.enumerate_expert_posterior(u, inst.x, inst)
    for i in range(inst.n):
        est, se = pgm_oracle.conditional_expert_mc(u, inst, i, 100_000, rng)
        tol = 3.0 * np.maximum(se, 1e-6)
        assert np.all(np.abs(est - oracle[i]) <= tol)
