import numpy as np
import pytest

from smoelab import attention as attnmod
from smoelab import moe
from smoelab import numerics as nm
from smoelab import routing
from smoelab.errors import DegenerateRowError, ParameterError
from smoelab.numerics import Tensor

from conftest import assert_grads_match


# ---------------------------------------------------------------------------
# independent loop oracles (numpy only, no package combiner code)
# ---------------------------------------------------------------------------

def oracle_gate(u, w, b):
    gamma = w @ u + b
    e = np.exp(gamma - gamma.max())
    return e / e.sum()


def oracle_expert(e, u, experts):
    h = np.logaddexp(0.0, experts.w1[e].array @ u + experts.b1[e].array)
    return experts.w2[e].array @ h + experts.b2[e].array


def oracle_dense_row(u, router, experts):
    r = oracle_gate(u, router.w.array, router.b.array)
    out = np.zeros_like(u)
    for e in range(experts.n_experts):
        out += r[e] * oracle_expert(e, u, experts)
    return out


def small_setup(d=3, d_ff=4, e=4, seed=0):
    router = routing.make_linear_router(d, e, seed=seed)
    experts = moe.make_expert_params(d, d_ff, e, seed=seed + 100)
    return router, experts


# ---------------------------------------------------------------------------
# experts
# ---------------------------------------------------------------------------

def test_expert_zero_weights_zero_output():
    experts = moe.ExpertParams(
        w1=[Tensor(np.zeros((4, 3)))], b1=[Tensor(np.zeros(4))],
        w2=[Tensor(np.zeros((3, 4)))], b2=[Tensor(np.zeros(3))])
    out = moe.expert_forward(0, np.ones(3), experts)
    np.testing.assert_array_equal(out.array, np.zeros(3))


def test_expert_identity_passing_region(rng):
    d = 3
    experts = moe.ExpertParams(
        w1=[Tensor(np.eye(d))], b1=[Tensor(np.zeros(d))],
        w2=[Tensor(np.eye(d))], b2=[Tensor(np.zeros(d))])
    u = rng.uniform(30.0, 40.0, d)  # softplus(x) - x < 1e-13 here
    out = moe.expert_forward(0, u, experts)
    np.testing.assert_allclose(out.array, u, atol=1e-12)


def test_expert_matches_loop_oracle(rng):
    _, experts = small_setup(seed=1)
    u = rng.standard_normal(3)
    for e in range(4):
        got = moe.expert_forward(e, u, experts).array
        np.testing.assert_allclose(got, oracle_expert(e, u, experts), atol=1e-12)


def test_expert_bad_index():
    _, experts = small_setup()
    with pytest.raises(IndexError):
        moe.expert_forward(7, np.zeros(3), experts)


# ---------------------------------------------------------------------------
# dense and sparse combiners
# ---------------------------------------------------------------------------

def test_dense_single_expert_is_that_expert(rng):
    router, _ = small_setup(e=1)
    experts = moe.make_expert_params(3, 4, 1, seed=5)
    u = rng.standard_normal((4, 3))
    out = moe.moe_dense(u, routing.make_linear_router(3, 1, seed=2), experts)
    for i in range(4):
        np.testing.assert_allclose(out.array[i], oracle_expert(0, u[i], experts), atol=1e-12)


def test_dense_identical_experts_ignore_gate(rng):
    router, experts = small_setup(seed=3)
    for e in range(1, 4):
        for attr in ("w1", "b1", "w2", "b2"):
            getattr(experts, attr)[e] = getattr(experts, attr)[0]
    u = rng.standard_normal((3, 3))
    out = moe.moe_dense(u, router, experts)
    for i in range(3):
        np.testing.assert_allclose(out.array[i], oracle_expert(0, u[i], experts), atol=1e-12)


def test_dense_matches_loop_oracle(rng):
    router, experts = small_setup(seed=4)
    u = rng.standard_normal((5, 3))
    out = moe.moe_dense(u, router, experts)
    for i in range(5):
        np.testing.assert_allclose(out.array[i], oracle_dense_row(u[i], router, experts), atol=1e-12)


def test_smoe_k_equals_e_matches_dense(rng):
    router, experts = small_setup(seed=5)
    u = rng.standard_normal((6, 3))
    dense = moe.moe_dense(u, router, experts)
    sparse, _ = moe.smoe_forward(u, router, experts, k=4)
    assert np.abs(dense.array - sparse.array).max() < 1e-12


def test_smoe_k1_is_argmax_expert(rng):
    router, experts = small_setup(seed=6)
    u = rng.standard_normal((5, 3))
    out, capture = moe.smoe_forward(u, router, experts, k=1)
    for i in range(5):
        r = oracle_gate(u[i], router.w.array, router.b.array)
        e = int(np.argmax(r))
        assert capture.selected[i, 0] == e
        np.testing.assert_allclose(out.array[i], oracle_expert(e, u[i], experts), atol=1e-12)


def test_smoe_matches_dense_then_mask_oracle(rng):
    router, experts = small_setup(seed=7)
    u = rng.standard_normal((6, 3))
    out, capture = moe.smoe_forward(u, router, experts, k=2)
    for i in range(6):
        r = oracle_gate(u[i], router.w.array, router.b.array)
        top = np.argsort(-r, kind="stable")[:2]
        w = r[top] / r[top].sum()
        expected = sum(w[j] * oracle_expert(int(top[j]), u[i], experts) for j in range(2))
        np.testing.assert_allclose(out.array[i], expected, atol=1e-12)
        np.testing.assert_array_equal(capture.selected[i], top)
        np.testing.assert_allclose(capture.scores[i], r, atol=1e-12)


def test_sparsity_contract_eval_counts(rng):
    router, experts = small_setup(seed=8)
    u = rng.standard_normal((10, 3))
    experts.eval_count = 0
    moe.smoe_forward(u, router, experts, k=2)
    assert experts.eval_count <= 10 * 2
    experts.eval_count = 0
    cfg = moe.SimilarityConfig.identity(3)
    moe.similarity_aware_smoe(u, router, experts, cfg, k=2)
    assert experts.eval_count <= 10 * 2
    experts.eval_count = 0
    attn = attnmod.make_attention_params(3, 2, 2, seed=9)
    moe.attention_aware_smoe(u, attn, router, experts, moe.PosteriorConfig(), k=2)
    assert experts.eval_count <= 10 * 2


# ---------------------------------------------------------------------------
# similarity mixing
# ---------------------------------------------------------------------------

def test_similarity_matrix_single_token(rng):
    cfg = moe.SimilarityConfig.identity(3)
    s = moe.similarity_matrix(rng.standard_normal((1, 3)), cfg)
    np.testing.assert_array_equal(s.array, [[1.0]])


def test_similarity_matrix_flat_limit(rng):
    cfg = moe.SimilarityConfig.identity(3, tau=1e6)
    s = moe.similarity_matrix(rng.standard_normal((5, 3)), cfg)
    assert np.abs(s.array - 0.2).max() < 1e-6


def test_similarity_matrix_sharp_limit_is_identity(rng):
    # distinct unit-norm tokens at a tiny temperature: self-similarity dominates
    u = rng.standard_normal((4, 6))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    cfg = moe.SimilarityConfig.identity(6, tau=1e-4)
    s = moe.similarity_matrix(u, cfg)
    assert np.abs(s.array - np.eye(4)).max() < 1e-6


def test_similarity_matrix_bad_tau():
    with pytest.raises(ParameterError):
        moe.SimilarityConfig.identity(3, tau=0.0)


def test_similarity_scores_identity_mixing(rng):
    r = rng.dirichlet(np.ones(4), size=3)
    mixed = moe.similarity_aware_scores(np.eye(3), r)
    np.testing.assert_allclose(mixed.p.array, r, atol=1e-15)
    mixed.validate()


def test_similarity_scores_uniform_mixing(rng):
    r = rng.dirichlet(np.ones(4), size=3)
    mixed = moe.similarity_aware_scores(np.full((3, 3), 1.0 / 3.0), r)
    for i in range(3):
        np.testing.assert_allclose(mixed.p.array[i], r.mean(axis=0), atol=1e-12)


def test_similarity_scores_loop_oracle(rng):
    s = rng.dirichlet(np.ones(3), size=3)
    r = rng.dirichlet(np.ones(2), size=3)
    mixed = moe.similarity_aware_scores(s, r)
    for i in range(3):
        for e in range(2):
            expected = sum(s[i, j] * r[j, e] for j in range(3))
            assert abs(mixed.p.array[i, e] - expected) < 1e-12
    mixed.validate()


def test_similarity_smoe_identity_reduces_to_baseline(rng):
    router, experts = small_setup(seed=10)
    u = rng.standard_normal((5, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)  # distinct unit tokens
    cfg = moe.SimilarityConfig.identity(3, tau=1e-6)
    base, base_cap = moe.smoe_forward(u, router, experts, k=2)
    sim, sim_cap = moe.similarity_aware_smoe(u, router, experts, cfg, k=2)
    assert np.abs(base.array - sim.array).max() < 1e-12
    np.testing.assert_array_equal(base_cap.selected, sim_cap.selected)


def test_similarity_smoe_identical_tokens_identical_routing(rng):
    router, experts = small_setup(seed=11)
    u = np.tile(rng.standard_normal(3), (4, 1))
    _, capture = moe.similarity_aware_smoe(u, router, experts, moe.SimilarityConfig.identity(3), k=2)
    for i in range(1, 4):
        np.testing.assert_array_equal(capture.selected[i], capture.selected[0])
        np.testing.assert_allclose(capture.scores[i], capture.scores[0], atol=1e-12)


def test_similarity_smoe_k_equals_e_is_dense_mixing(rng):
    router, experts = small_setup(seed=12)
    u = rng.standard_normal((4, 3))
    cfg = moe.SimilarityConfig.identity(3)
    out, capture = moe.similarity_aware_smoe(u, router, experts, cfg, k=4)
    s = moe.similarity_matrix(u, cfg).array
    r = np.stack([oracle_gate(u[i], router.w.array, router.b.array) for i in range(4)])
    p = s @ r
    for i in range(4):
        expected = sum(p[i, e] * oracle_expert(e, u[i], experts) for e in range(4))
        np.testing.assert_allclose(out.array[i], expected, atol=1e-12)


def test_similarity_smoe_causal_mask_zeroes_future(rng):
    router, experts = small_setup(seed=13)
    u = rng.standard_normal((5, 3))
    cfg = moe.SimilarityConfig.identity(3, mask_mode="causal")
    s = moe.similarity_matrix(u, cfg).array
    assert np.array_equal(s[np.triu_indices(5, k=1)], np.zeros(10))
    np.testing.assert_allclose(s.sum(axis=-1), np.ones(5), atol=1e-12)


# ---------------------------------------------------------------------------
# likelihood and posteriors
# ---------------------------------------------------------------------------

def test_likelihood_row_max_at_exact_mean(rng):
    w_h = Tensor(rng.standard_normal((3, 3)))
    x = rng.standard_normal((4, 3))
    u = x @ w_h.array.T  # u_i equals the projection of x_i
    logl = moe.likelihood_matrix(u, x, w_h, sigma=0.5)
    assert np.array_equal(np.argmax(logl.array, axis=1), np.arange(4))


def test_likelihood_flat_for_huge_sigma(rng):
    w_h = Tensor(rng.standard_normal((3, 3)))
    x = rng.standard_normal((4, 3))
    u = rng.standard_normal((4, 3))
    logl = moe.likelihood_matrix(u, x, w_h, sigma=1e6).array
    spread = logl.max(axis=1) - logl.min(axis=1)
    assert np.all(spread < 1e-9)


def test_likelihood_matches_density_oracle(rng):
    w_h = Tensor(rng.standard_normal((3, 3)))
    x = rng.standard_normal((4, 3))
    u = rng.standard_normal((4, 3))
    sigma = 0.8
    logl = moe.likelihood_matrix(u, x, w_h, sigma).array
    for i in range(4):
        for j in range(4):
            expected = nm.log_gaussian_isotropic(u[i], w_h.array @ x[j], sigma)
            assert abs(logl[i, j] - expected) < 1e-10


def test_posterior_attention_uninformative_likelihood(rng):
    a = rng.dirichlet(np.ones(4), size=4)
    post = moe.posterior_attention(a, np.full((4, 4), -3.3))
    np.testing.assert_allclose(post.array, a, atol=1e-12)


def test_posterior_attention_uniform_prior(rng):
    logl = rng.standard_normal((3, 3))
    post = moe.posterior_attention(np.full((3, 3), 1.0 / 3.0), logl)
    expected = nm.softmax_rows(Tensor(logl)).array
    np.testing.assert_allclose(post.array, expected, atol=1e-12)


def test_posterior_attention_sharp_likelihood_one_hot(rng):
    w_h = Tensor(np.eye(2))
    x = np.array([[0.0, 0.0], [5.0, 0.0], [0.0, 5.0]])
    u = np.array([[4.9, 0.1], [0.1, 4.8], [0.0, 0.1]])
    logl = moe.likelihood_matrix(u, x, w_h, sigma=1e-3)
    a = np.full((3, 3), 1.0 / 3.0)
    post = moe.posterior_attention(a, logl).array
    expected_cols = np.argmax(logl.array, axis=1)
    for i in range(3):
        one_hot = np.zeros(3)
        one_hot[expected_cols[i]] = 1.0
        np.testing.assert_allclose(post[i], one_hot, atol=1e-6)


def test_posterior_attention_preserves_structural_zeros(rng):
    a = np.array([[1.0, 0.0], [0.5, 0.5]])
    post = moe.posterior_attention(a, rng.standard_normal((2, 2))).array
    assert post[0, 1] == 0.0
    np.testing.assert_allclose(post.sum(axis=1), np.ones(2), atol=1e-12)


def test_posterior_attention_degenerate_row():
    a = np.array([[0.0, 0.0], [0.5, 0.5]])
    with pytest.raises(DegenerateRowError):
        moe.posterior_attention(a, np.zeros((2, 2)))


def test_posterior_head_single_head(rng):
    a = [rng.dirichlet(np.ones(3), size=3)]
    logl = [rng.standard_normal((3, 3))]
    resp = moe.posterior_head(a, logl)
    np.testing.assert_allclose(resp.array, np.ones((3, 1)), atol=1e-12)


def test_posterior_head_identical_heads_split_evenly(rng):
    a = rng.dirichlet(np.ones(3), size=3)
    logl = rng.standard_normal((3, 3))
    resp = moe.posterior_head([a, a], [logl, logl])
    np.testing.assert_allclose(resp.array, np.full((3, 2), 0.5), atol=1e-12)


def test_attention_scores_identity_and_uniform(rng):
    r = rng.dirichlet(np.ones(2), size=3)
    np.testing.assert_allclose(moe.attention_aware_scores(np.eye(3), r).p.array, r, atol=1e-15)
    uniform = moe.attention_aware_scores(np.full((3, 3), 1.0 / 3.0), r).p.array
    for i in range(3):
        np.testing.assert_allclose(uniform[i], r.mean(axis=0), atol=1e-12)
    s = rng.dirichlet(np.ones(3), size=3)
    mixed = moe.attention_aware_scores(s, r).p.array
    for i in range(3):
        for e in range(2):
            assert abs(mixed[i, e] - sum(s[i, j] * r[j, e] for j in range(3))) < 1e-12


# ---------------------------------------------------------------------------
# attention-aware combiner
# ---------------------------------------------------------------------------

def test_attention_aware_reduces_to_smoe_when_attention_is_identity():
    # orthogonal high-norm tokens force the single head's attention to the
    # exact identity (off-diagonal terms underflow to zero)
    d = 4
    x = 50.0 * np.eye(3, d)
    attn = attnmod.AttentionParams(
        w_query=[Tensor(np.eye(d))], w_key=[Tensor(np.eye(d))],
        w_merged=[Tensor(nm.make_rng(20).standard_normal((d, d)) * 0.3)])
    router = routing.make_linear_router(d, 4, seed=21)
    experts = moe.make_expert_params(d, 4, 4, seed=22)

    out_attn = attnmod.mha_forward(x, attn, "full")
    np.testing.assert_array_equal(out_attn.a[0].array, np.eye(3))

    aware, cap_a = moe.attention_aware_smoe(x, attn, router, experts, moe.PosteriorConfig(), k=2)
    base, cap_b = moe.smoe_forward(out_attn.u, router, experts, k=2)
    assert np.abs(aware.array - base.array).max() < 1e-12
    np.testing.assert_array_equal(cap_a.selected, cap_b.selected)


def test_attention_aware_flat_sigma_reduces_to_prior_mixing(rng):
    d = 3
    attn = attnmod.make_attention_params(d, 2, 2, seed=23)
    router = routing.make_linear_router(d, 4, seed=24)
    experts = moe.make_expert_params(d, 4, 4, seed=25)
    x = rng.standard_normal((4, d))
    pcfg = moe.PosteriorConfig(sigma=1e6)
    _, capture = moe.attention_aware_smoe(x, attn, router, experts, pcfg, k=2)

    out_attn = attnmod.mha_forward(x, attn, "full")
    h_star = attnmod.select_min_entropy_head(out_attn.a)
    assert capture.h_star == h_star
    r = routing.gate_rows(out_attn.u, router).array
    expected = out_attn.a[h_star].array @ r
    assert np.abs(capture.scores - expected).max() < 1e-6


def test_attention_aware_mixed_scores_are_stochastic(rng):
    d = 3
    attn = attnmod.make_attention_params(d, 2, 2, seed=26)
    router = routing.make_linear_router(d, 5, seed=27)
    experts = moe.make_expert_params(d, 3, 5, seed=28)
    for mode in ("min_entropy_only", "full_posterior"):
        _, capture = moe.attention_aware_smoe(
            rng.standard_normal((4, d)), attn, router, experts,
            moe.PosteriorConfig(head_mode=mode), k=2)
        assert np.all(capture.scores >= 0)
        np.testing.assert_allclose(capture.scores.sum(axis=1), np.ones(4), atol=1e-9)


def test_combiner_permutation_equivariance(rng):
    router, experts = small_setup(seed=30)
    u = rng.standard_normal((5, 3))
    perm = rng.permutation(5)
    cfg = moe.SimilarityConfig.identity(3)
    base, _ = moe.similarity_aware_smoe(u, router, experts, cfg, k=2)
    permuted, _ = moe.similarity_aware_smoe(u[perm], router, experts, cfg, k=2)
    assert np.abs(permuted.array - base.array[perm]).max() < 1e-10

    attn = attnmod.make_attention_params(3, 2, 2, seed=31)
    base_a, _ = moe.attention_aware_smoe(u, attn, router, experts, moe.PosteriorConfig(), k=2)
    perm_a, _ = moe.attention_aware_smoe(u[perm], attn, router, experts, moe.PosteriorConfig(), k=2)
    assert np.abs(perm_a.array - base_a.array[perm]).max() < 1e-10


def test_batched_combiners_match_per_sequence(rng):
    router, experts = small_setup(seed=32)
    attn = attnmod.make_attention_params(3, 2, 2, seed=33)
    cfg = moe.SimilarityConfig.identity(3)
    xb = rng.standard_normal((2, 4, 3))
    sim_b, cap_sim = moe.similarity_aware_smoe(xb, router, experts, cfg, k=2)
    att_b, cap_att = moe.attention_aware_smoe(xb, attn, router, experts, moe.PosteriorConfig(), k=2)
    for b in range(2):
        sim_s, _ = moe.similarity_aware_smoe(xb[b], router, experts, cfg, k=2)
        np.testing.assert_allclose(sim_b.array[b], sim_s.array, atol=1e-12)
    assert cap_sim.scores.shape == (8, 4)
    assert cap_att.scores.shape == (8, 4)


# ---------------------------------------------------------------------------
# gradient checks through every combiner
# ---------------------------------------------------------------------------

def test_gradcheck_dense_and_smoe(rng):
    router, experts = small_setup(seed=34)
    # modest input scale keeps softplus units off their saturated tail, where
    # true gradients shrink below the finite-difference noise floor
    u = Tensor(0.6 * rng.standard_normal((4, 3)), requires_grad=True)
    # a small probe keeps the loss magnitude low: finite differences of an
    # O(1) loss cannot resolve the exact-zero gradients of unselected experts
    probe = 0.01 * rng.standard_normal((4, 3))
    params = [u, router.w, router.b, *experts.all_params()]

    def dense_loss():
        return nm.tensor_sum(nm.mul(moe.moe_dense(u, router, experts), Tensor(probe)))

    assert_grads_match(dense_loss, params)

    def smoe_loss():
        out, _ = moe.smoe_forward(u, router, experts, k=2)
        return nm.tensor_sum(nm.mul(out, Tensor(probe)))

    assert_grads_match(smoe_loss, params)


def test_gradcheck_similarity_aware(rng):
    router, experts = small_setup(seed=35)
    u = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    w_s = Tensor(np.eye(3) + 0.1 * rng.standard_normal((3, 3)), requires_grad=True)
    cfg = moe.SimilarityConfig(w_s=w_s, tau=1.0)
    probe = 0.01 * rng.standard_normal((4, 3))

    def loss():
        out, _ = moe.similarity_aware_smoe(u, router, experts, cfg, k=2)
        return nm.tensor_sum(nm.mul(out, Tensor(probe)))

    assert_grads_match(loss, [u, w_s, router.w, router.b, *experts.all_params()])


@pytest.mark.parametrize("head_mode", ["min_entropy_only", "full_posterior"])
def test_gradcheck_attention_aware(rng, head_mode):
    d = 3
    attn = attnmod.make_attention_params(d, 2, 2, seed=36)
    router = routing.make_linear_router(d, 3, seed=37)
    experts = moe.make_expert_params(d, 3, 3, seed=38)
    x = Tensor(rng.standard_normal((3, d)), requires_grad=True)
    probe = 0.01 * rng.standard_normal((3, d))
    pcfg = moe.PosteriorConfig(sigma=1.0, head_mode=head_mode)

    def loss():
        out, _ = moe.attention_aware_smoe(x, attn, router, experts, pcfg, k=2)
        return nm.tensor_sum(nm.mul(out, Tensor(probe)))

    assert_grads_match(loss, [x, *attn.all_params(), router.w, router.b, *experts.all_params()])
