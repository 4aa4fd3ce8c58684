import numpy as np
import pytest

from painvrl import backbone, dataset, maskgen, pareto
from painvrl.backbone import ItemGraph, LossWeights
from painvrl.dataset import FeatureTable, InteractionSet, sample_negatives
from painvrl.envid import EnvPartition
from painvrl.maskgen import MaskContext, MaskSample, MaskState
from painvrl.pareto import ParetoWeights


def small_context(seed=0, num_envs=2, nu=6, ni=12, d=4, k=3, reduction="sum"):
    rng = np.random.default_rng(seed)
    data = InteractionSet(nu, ni, rng.integers(0, nu, 20), rng.integers(0, ni, 20))
    part = EnvPartition(data, num_envs, np.arange(data.num_positives) % num_envs)
    feats = FeatureTable(rng.standard_normal((ni, d)))
    ctx = MaskContext(part, feats, ItemGraph.from_interactions(data, 3), LossWeights(), reduction=reduction)
    ctx.resample(rng)
    params = backbone.init_params(nu, ni, k, d, rng).with_vector(
        rng.uniform(-0.5, 0.5, backbone.init_params(nu, ni, k, d, rng).vector().size))
    return ctx, params, rng


# ---------------------------------------------------------------- sampling and views

def test_zero_noise_keeps_m():
    st = MaskState(np.array([0.1, 0.5, 0.9]), sigma=0.0)
    assert np.array_equal(maskgen.sample_mu(st, np.random.default_rng(0)).mu, st.m)


def test_clip_bounds():
    assert maskgen.clip_mu(np.array([0.9]), np.array([0.3]))[0] == 1.0
    assert maskgen.clip_mu(np.array([0.2]), np.array([-0.5]))[0] == 0.0


def test_sample_in_unit_box():
    st = MaskState(np.full(50, 0.5), sigma=2.0)
    mu = maskgen.sample_mu(st, np.random.default_rng(0)).mu
    assert mu.min() >= 0.0 and mu.max() <= 1.0


def test_invariant_and_variant_views():
    f = np.array([1.0, -2.0, 3.0])
    assert np.array_equal(maskgen.to_invariant(np.ones(3), f), f)
    assert np.array_equal(maskgen.to_variant(np.ones(3), f), np.zeros(3))
    assert np.array_equal(maskgen.to_invariant(np.full(3, 0.5), f), 0.5 * f)
    assert np.array_equal(maskgen.to_variant(np.full(3, 0.5), f), 0.5 * f)


def test_views_sum_to_features():
    rng = np.random.default_rng(0)
    m, f = rng.random(7), rng.standard_normal(7)
    assert np.array_equal(maskgen.to_invariant(m, f) + maskgen.to_variant(m, f), f)


def test_state_validation():
    with pytest.raises(ValueError):
        MaskState(np.array([1.5]))
    with pytest.raises(ValueError):
        MaskState(np.array([0.5]), sigma=-1)


# ---------------------------------------------------------------- attention fusion

def _force_attention(params, z_phi, z_psi):
    # zero hidden weights make each weight a sigmoid of its output bias alone
    for tag, z in (("1", z_phi), ("2", z_psi)):
        params.attn["v" + tag][:] = 0.0
        params.attn["c" + tag][:] = z


def test_fusion_with_forced_weights():
    ctx, params, rng = small_context()
    _force_attention(params, 60.0, -60.0)
    phi, psi = rng.standard_normal(4), rng.standard_normal(4)
    h = maskgen.attention_fuse(0, 1, phi, psi, params, ctx.features)
    assert np.allclose(h, phi, atol=1e-12)


def test_fusion_half_weights_is_half_features():
    ctx, params, rng = small_context()
    _force_attention(params, 0.0, 0.0)
    m = rng.random(4)
    f = ctx.features.vectors[1]
    h = maskgen.attention_fuse(0, 1, maskgen.to_invariant(m, f), maskgen.to_variant(m, f), params, ctx.features)
    assert np.allclose(h, 0.5 * f)


def test_fusion_per_coordinate_recompute():
    ctx, params, rng = small_context(seed=3)
    phi, psi = rng.standard_normal(4), rng.standard_normal(4)
    u, i = 2, 5
    a_phi, a_psi, _ = maskgen.attention_weights(np.array([u]), np.array([i]), params, ctx.features.vectors)
    h = maskgen.attention_fuse(u, i, phi, psi, params, ctx.features)
    for k in range(4):
        assert h[k] == pytest.approx(a_phi[0] * phi[k] + a_psi[0] * psi[k], rel=1e-12)


def test_softmax_weights_sum_to_one():
    ctx, params, _ = small_context()
    a, b, _ = maskgen.attention_weights(np.arange(3), np.arange(3), params, ctx.features.vectors, softmax=True)
    assert np.allclose(a + b, 1.0)


# ---------------------------------------------------------------- ERM and IRM terms

def test_erm_is_mean_over_environments(monkeypatch):
    ctx, params, _ = small_context()
    st = MaskState.initial(4)
    sample = MaskSample(st.m.copy(), np.zeros(4))
    for losses, want in (([1.7], 1.7), ([2.5, 2.5], 2.5), ([1.0, 3.0], 2.0)):
        monkeypatch.setattr(maskgen, "env_losses", lambda *a, _l=losses: np.array(_l))
        assert maskgen.erm_loss(ctx, sample, params, st) == pytest.approx(want)


def test_single_environment_erm_equals_its_loss():
    ctx, params, _ = small_context(num_envs=1)
    st = MaskState.initial(4)
    sample = MaskSample(st.m.copy(), np.zeros(4))
    (_, terms, _), = ctx.env_terms()
    h, _, _ = maskgen._fused(terms, st.m, sample.mu, params, ctx)
    loss, _, _ = backbone.terms_loss_grad(terms, sample.mu * h, params)
    assert maskgen.erm_loss(ctx, sample, params, st) == pytest.approx(loss)


def test_penalty_examples():
    assert maskgen._penalty_from_grads(np.array([[1.0, 0.0], [0.0, 1.0]]), np.ones(2)) == pytest.approx(0.125)
    assert maskgen._penalty_from_grads(np.array([[1.0, 2.0], [1.0, 2.0]]), np.ones(2)) == 0.0
    assert maskgen._penalty_from_grads(np.array([[1.0, 0.0], [0.0, 1.0]]), np.zeros(2)) == 0.0


def test_penalty_zero_for_single_environment():
    ctx, params, _ = small_context(num_envs=1)
    st = MaskState.initial(4)
    assert maskgen.irm_penalty(ctx, MaskSample(st.m, np.zeros(4)), params, st) == 0.0
    assert not np.any(maskgen.grad_mask(ctx, MaskSample(st.m, np.zeros(4)), params, st, "IRM"))


def test_penalty_zero_for_zero_mask():
    ctx, params, _ = small_context()
    st = MaskState(np.zeros(4))
    assert maskgen.irm_penalty(ctx, MaskSample(np.zeros(4), np.zeros(4)), params, st) == 0.0


def test_objective_pure_regulariser(monkeypatch):
    ctx, params, _ = small_context()
    monkeypatch.setattr(maskgen, "erm_loss", lambda *a: 0.0)
    st = MaskState(np.full(4, 0.5), lam=1.0)
    val = maskgen.mask_objective(ctx, MaskSample(st.m, np.zeros(4)), params, st, ParetoWeights(1.0, 0.0))
    assert val == pytest.approx(0.5)


def test_objective_erm_only_without_decay():
    ctx, params, _ = small_context()
    st = MaskState(np.full(4, 0.3), lam=0.0)
    s = MaskSample(st.m, np.zeros(4))
    assert maskgen.mask_objective(ctx, s, params, st, ParetoWeights(1.0, 0.0)) == \
        pytest.approx(maskgen.erm_loss(ctx, s, params, st))


def test_reduction_mean_divides_by_positives():
    a, params, _ = small_context(reduction="sum")
    b, _, _ = small_context(reduction="mean")
    st = MaskState.initial(4)
    s = MaskSample(st.m, np.zeros(4))
    la = maskgen.env_losses(a, st.m, s.mu, params)
    lb = maskgen.env_losses(b, st.m, s.mu, params)
    sizes = [bt.pos_users.size for bt in a.batches]
    assert np.allclose(lb, la / sizes)


# ---------------------------------------------------------------- mask gradients

@pytest.mark.parametrize("reduction", ["sum", "mean"])
def test_erm_gradient_matches_finite_differences(reduction):
    from painvrl.numgrad import check_gradient, finite_diff_grad
    ctx, params, rng = small_context(seed=5, reduction=reduction)
    m = np.array([0.3, 0.6, 0.45, 0.7])
    eps = np.array([0.05, -0.1, 0.02, 0.08])
    st = MaskState(m)
    _, g, _ = maskgen.erm_grads(ctx, MaskSample(maskgen.clip_mu(m, eps), eps), params, st)

    def f(mm):
        return maskgen.erm_loss(ctx, MaskSample(maskgen.clip_mu(mm, eps), eps), params, MaskState(mm))

    assert check_gradient(g, finite_diff_grad(f, m)).passed


def test_saturated_coordinate_gets_no_clip_gradient():
    ctx, params, _ = small_context(seed=2)
    ctx.features.vectors[:, 1:] = 0.0
    ctx.resample(np.random.default_rng(0))
    m = np.array([0.2, 0.5, 0.5, 0.5])
    eps = np.array([-0.5, 0.0, 0.0, 0.0])  # mu_0 clipped at 0
    _, g, _ = maskgen.erm_grads(ctx, MaskSample(maskgen.clip_mu(m, eps), eps), params, MaskState(m))
    # mu_0 = 0 removes feature 0 from the content, so neither path reaches m_0
    assert g[0] == 0.0


def test_irm_gradient_zero_when_environments_coincide():
    rng = np.random.default_rng(0)
    base = InteractionSet(4, 6, [0, 1, 2, 3], [1, 2, 3, 4])
    # duplicate the interactions into a second environment with identical content
    data = InteractionSet(8, 6, [0, 1, 2, 3, 4, 5, 6, 7], [1, 2, 3, 4, 1, 2, 3, 4])
    part = EnvPartition(data, 2, np.array([0, 0, 0, 0, 1, 1, 1, 1]))
    feats = FeatureTable(rng.standard_normal((6, 3)))
    ctx = MaskContext(part, feats, ItemGraph.from_interactions(data), LossWeights(0, 0))
    p = backbone.init_params(8, 6, 2, 3, rng)
    p.p_t[4:] = p.p_t[:4]
    p.p_f[4:] = p.p_f[:4]
    ctx.resample(rng)
    # same negatives in both environments
    b0 = ctx.batches[0]
    ctx.batches[1] = backbone.Batch(b0.pos_users + 4, b0.pos_items, b0.neg_users + 4, b0.neg_items)
    ctx._terms = [backbone.expand_terms(b, ctx.graph, ctx.weights) for b in ctx.batches]
    st = MaskState.initial(3)
    g = maskgen.grad_mask(ctx, MaskSample(st.m, np.zeros(3)), p, st, "IRM")
    assert np.allclose(g, 0.0, atol=1e-12)
    assert base.num_positives == 4


def test_grad_mask_rejects_unknown_kind():
    ctx, params, _ = small_context()
    st = MaskState.initial(4)
    with pytest.raises(ValueError):
        maskgen.grad_mask(ctx, MaskSample(st.m, np.zeros(4)), params, st, "XYZ")


# ---------------------------------------------------------------- update

def test_pure_decay():
    st = MaskState(np.full(4, 0.5), lam=1.0, step=0.1)
    out = maskgen.update_mask(st, np.zeros(4), np.zeros(4))
    assert np.allclose(out.m, 0.45)


def test_zero_step_unchanged():
    st = MaskState(np.full(4, 0.5), step=0.0)
    out = maskgen.update_mask(st, np.ones(4), -np.ones(4))
    assert np.array_equal(out.m, st.m)


def test_update_recompute():
    rng = np.random.default_rng(1)
    st = MaskState(rng.random(6), lam=0.7, step=0.05)
    g1, g2 = rng.standard_normal(6), rng.standard_normal(6)
    w = pareto.solve_weights(g1, g2)
    want = np.clip(st.m - 0.05 * (pareto.combined_direction(g1, g2, w) + 0.7 * st.m), 0, 1)
    assert np.array_equal(maskgen.update_mask(st, g1, g2).m, want)


def test_update_stays_in_box():
    st = MaskState(np.array([0.01, 0.99]), step=1.0, lam=0.0)
    out = maskgen.update_mask(st, np.array([5.0, -5.0]), np.array([5.0, -5.0]))
    assert out.m.tolist() == [0.0, 1.0]


def test_normalize_grads():
    a, b = maskgen.normalize_grads(np.array([3.0, 4.0]), np.zeros(2), "l2")
    assert np.allclose(a, [0.6, 0.8]) and not np.any(b)
    a2, _ = maskgen.normalize_grads(np.array([3.0, 4.0]), np.zeros(2), "none")
    assert a2.tolist() == [3.0, 4.0]
    with pytest.raises(ValueError):
        maskgen.normalize_grads(np.ones(2), np.ones(2), "max")


# ---------------------------------------------------------------- fit loop

def test_zero_iterations_unchanged():
    ctx, params, rng = small_context()
    st = MaskState.initial(4)
    out, p2, hist = maskgen.fit_mask(ctx, params, st, 0, rng)
    assert np.array_equal(out.m, st.m) and p2.equals(params) and not hist.w_erm


def test_fit_deterministic():
    runs = []
    for _ in range(2):
        ctx, params, _ = small_context(seed=4)
        st, _, _ = maskgen.fit_mask(ctx, params, MaskState.initial(4, step=0.05), 5, np.random.default_rng(8))
        runs.append(st.m)
    assert np.array_equal(*runs)


def test_fixed_weights_recorded():
    ctx, params, rng = small_context()
    _, _, hist = maskgen.fit_mask(ctx, params, MaskState.initial(4), 3, rng, fixed_w_erm=1.0)
    assert hist.w_erm == [1.0, 1.0, 1.0]


def test_mask_file_roundtrip(tmp_path):
    feats = FeatureTable(np.zeros((2, 3)), (0, 2), ("V", "T"))
    m = np.array([0.1, 0.25, 1.0 / 3.0])
    maskgen.write_mask(m, feats, tmp_path / "mask.tsv")
    lines = (tmp_path / "mask.tsv").read_text().splitlines()
    assert [l.split("\t")[1] for l in lines] == ["V", "V", "T"]
    assert np.allclose(maskgen.read_mask(tmp_path / "mask.tsv"), m, atol=1e-10)


@pytest.mark.slow
def test_planted_recovery_single_mask_phase():
    """40 mask iterations on the planted data with its true environments separate the blocks."""
    spec = dataset.SyntheticSpec(num_users=200, num_items=300, d_inv=4, d_spu=4, flip_strength=1.0,
                                 num_envs_true=2, seed=0)
    data, feats, env = dataset.make_synthetic(spec)
    rng = np.random.default_rng(0)
    part = EnvPartition(data, 2, env)
    ctx = MaskContext(part, feats, ItemGraph.from_interactions(data))
    params = backbone.init_params(data.num_users, data.num_items, 16, feats.dim, rng)
    st, _, _ = maskgen.fit_mask(ctx, params, MaskState.initial(feats.dim, step=0.01), 40, rng)
    gap = st.m[:4].mean() - st.m[4:].mean()
    assert gap > 0.15, st.m
