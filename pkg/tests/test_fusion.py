import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from cage import cost, fusion, ops
from cage.fusion import CageConfig
from cage.gradcheck import check_block
from cage.tensor import DimensionError

SMALL = CageConfig(c_in=8, c_out=8, embed_dim=16, proj_dim=8, heads=2)


def _inputs(cfg, rng, B=2, H=4, W=4, L=3):
    return (rng.standard_normal((B, cfg.c_in, H, W)),
            rng.standard_normal((B, L, cfg.embed_dim)))


# ------------------------------------------------------------------ config / init

def test_config_validation():
    with pytest.raises(fusion.ConfigError):
        CageConfig(8, 8, 16, 9, heads=2)
    with pytest.raises(fusion.ConfigError):
        CageConfig(8, 4, 16, 8)  # identity residual needs c_in == c_out
    with pytest.raises(fusion.ConfigError):
        CageConfig(0, 8, 16, 8)
    with pytest.raises(fusion.ConfigError):
        CageConfig.from_dict({**SMALL.to_dict(), "hedas": 2})
    assert CageConfig.from_dict(SMALL.to_dict()) == SMALL
    assert SMALL.ctx_channels == 4 and SMALL.film_hidden == 16 and SMALL.head_dim == 4


def test_init_is_deterministic():
    a, b = fusion.init_params(SMALL, 3), fusion.init_params(SMALL, 3)
    for k in a.weights:
        assert a[k].tobytes() == b[k].tobytes()
    c = fusion.init_params(SMALL, 4)
    assert c.weights_digest() != a.weights_digest()


def test_init_zeroes_bn_gain_and_film_output():
    p = fusion.init_params(SMALL, 0)
    assert not p["bn.g"].any()
    assert not p["film_fc2.w"].any() and not p["film_fc2.b"].any()
    q = fusion.init_params(SMALL, 0, identity_init=False)
    assert q["bn.g"].any() and q["film_fc2.w"].any()


@pytest.mark.parametrize("cfg", [
    SMALL,
    CageConfig(6, 10, 12, 6, heads=3, residual_kind="projected", gate_enabled=False,
               attn_out_proj=False, dw_units=1, ctx_channels=3, film_hidden=5),
])
def test_shape_audit_matches_cost_table(cfg):
    p = fusion.init_params(cfg, 0)
    assert fusion.shape_audit(p, cfg) == []
    report = cost.count_params(cfg)
    assert report.total_params == p.num_parameters()
    covered = [t for r in report.rows for t in r.tensors]
    assert sorted(covered) == sorted(p.weights)
    for r in report.rows:
        assert r.param_count == sum(p[t].size for t in r.tensors)


def test_shape_audit_reports_problems():
    p = fusion.init_params(SMALL, 0)
    p.weights["w_k"] = np.zeros((3, 3))
    del p.weights["merge.b"]
    problems = fusion.shape_audit(p, SMALL)
    assert any("w_k" in s for s in problems) and any("merge.b" in s for s in problems)


# ------------------------------------------------------------------ forward

def test_identity_at_init(rng):
    p = fusion.init_params(SMALL, 0)
    x, t = _inputs(SMALL, rng)
    out, _ = fusion.forward(x, t, p, SMALL, "eval")
    assert np.max(np.abs(out - x)) < 1e-6


def test_input_errors(rng):
    p = fusion.init_params(SMALL, 0)
    x, t = _inputs(SMALL, rng)
    with pytest.raises(fusion.EmptyVocabularyError):
        fusion.forward(x, t[:, :0], p, SMALL)
    with pytest.raises(DimensionError):
        fusion.forward(x, t[..., :5], p, SMALL)
    with pytest.raises(DimensionError):
        fusion.forward(x[:, :3], t, p, SMALL)
    with pytest.raises(ops.DegenerateStatisticsError):
        fusion.forward(x[:1, :, :1, :1], t[:1], p, SMALL, "train")


def test_single_token_gives_constant_context(rng):
    cfg = SMALL
    p = fusion.init_params(cfg, 1, identity_init=False)
    x, t = _inputs(cfg, rng, L=1)
    ctx, cache = fusion.cross_attention_context(x, t, p, cfg)
    assert np.all(cache["attn"] == 1.0)
    # spatially constant and equal to the output-projected V token
    expected = cache["V"][:, 0] @ p["attn_out.w"] + p["attn_out.b"]
    np.testing.assert_allclose(ctx, np.broadcast_to(expected[:, :, None, None], ctx.shape),
                               atol=1e-12, rtol=0)


def test_duplicate_tokens_match_single_token(rng):
    p = fusion.init_params(SMALL, 1, identity_init=False)
    x, t = _inputs(SMALL, rng, L=1)
    one, _ = fusion.forward(x, t, p, SMALL)
    two, _ = fusion.forward(x, np.concatenate([t, t], axis=1), p, SMALL)
    np.testing.assert_allclose(two, one, atol=1e-12, rtol=0)


def test_attention_matches_loop_oracle(rng):
    cfg = CageConfig(8, 8, 16, 8, heads=2)
    p = fusion.init_params(cfg, 2, identity_init=False)
    x, t = _inputs(cfg, rng, B=1, L=3)
    _, cache = fusion.cross_attention_context(x, t, p, cfg)
    out, weights = oracles.attention_loop(cache["Q"], cache["K"], cache["V"], cfg.heads)
    np.testing.assert_allclose(cache["attn"], weights, atol=1e-10, rtol=0)
    np.testing.assert_allclose(cache["O"], out, atol=1e-10, rtol=0)


def test_gate_cases(rng):
    x, _ = _inputs(SMALL, rng)
    off = CageConfig(8, 8, 16, 8, heads=2, gate_enabled=False)
    G, _ = fusion.occlusion_gate(x, fusion.init_params(off, 0), off)
    assert G.shape == (2, 1, 4, 4) and np.all(G == 1.0)
    p = fusion.init_params(SMALL, 0, identity_init=False)
    G, _ = fusion.occlusion_gate(x * 5, p, SMALL)
    assert G.min() >= 0.0 and G.max() <= 1.0
    for k in ("gate_conv3x3.w", "gate_conv3x3.b", "gate_conv1x1.w", "gate_conv1x1.b"):
        p.weights[k] = np.zeros_like(p[k])
    G, _ = fusion.occlusion_gate(x, p, SMALL)
    assert np.all(G == 0.5)


def test_refine_context_cases(rng):
    p = fusion.init_params(SMALL, 0, identity_init=False)
    ctx = rng.standard_normal((2, 8, 4, 4))
    zero, _ = fusion.refine_context(ctx, np.zeros((2, 1, 4, 4)), p, SMALL)
    assert not zero.any()
    ones, cache = fusion.refine_context(ctx, np.ones((2, 1, 4, 4)), p, SMALL)
    assert np.array_equal(ones, cache["dw_out"])
    G = rng.uniform(size=(2, 1, 4, 4))
    full, _ = fusion.refine_context(ctx, G, p, SMALL)
    half, _ = fusion.refine_context(ctx, 0.5 * G, p, SMALL)
    np.testing.assert_allclose(half, 0.5 * full, atol=1e-12, rtol=0)


def test_film_cases(rng):
    p = fusion.init_params(SMALL, 0, identity_init=False)
    x, t = _inputs(SMALL, rng)
    ref = rng.standard_normal((2, SMALL.ctx_channels, 4, 4))
    z = np.zeros((2, 8))
    mod, _, _, cache = fusion.merge_and_film(x, ref, t, p, SMALL, film_override=(z, z))
    assert np.array_equal(mod, cache["pre"])
    mod, _, _, cache = fusion.merge_and_film(x, ref, t, p, SMALL, film_override=(z + 1, z))
    np.testing.assert_allclose(mod, 2 * cache["pre"], atol=1e-12, rtol=0)
    _, g1, b1, _ = fusion.merge_and_film(x, ref, t, p, SMALL)
    _, g2, b2, _ = fusion.merge_and_film(x, ref, t[:, ::-1], p, SMALL)
    np.testing.assert_allclose(g2, g1, atol=1e-12, rtol=0)
    np.testing.assert_allclose(b2, b1, atol=1e-12, rtol=0)


def test_zero_residual(rng):
    cfg = CageConfig(8, 8, 16, 8, heads=2, gate_enabled=False, residual_kind="projected")
    p = fusion.init_params(cfg, 0, identity_init=False)
    p.weights["residual.w"][:] = 0
    p.weights["residual.b"][:] = 0
    _, t = _inputs(cfg, rng)
    out, acts = fusion.forward(np.zeros((2, 8, 4, 4)), t, p, cfg)
    bn, _, _ = ops.batch_norm(acts.F_modulated, p["bn.g"], p["bn.b"], p.running_mean,
                              p.running_var, "eval", cfg.bn_eps)
    assert np.array_equal(out, bn)


def test_train_mode_updates_running_stats(rng):
    p = fusion.init_params(SMALL, 0, identity_init=False)
    x, t = _inputs(SMALL, rng)
    before = p.running_mean.copy()
    _, acts = fusion.forward(x, t, p, SMALL, "train")
    np.testing.assert_allclose(p.running_mean,
                               0.9 * before + 0.1 * acts.F_modulated.mean(axis=(0, 2, 3)),
                               atol=1e-12)
    q = fusion.init_params(SMALL, 0, identity_init=False)
    fusion.forward(x, t, q, SMALL, "train", update_running_stats=False)
    assert np.array_equal(q.running_mean, before)


def test_activation_statistics(rng):
    p = fusion.init_params(SMALL, 0, identity_init=False)
    x, t = _inputs(SMALL, rng)
    _, acts = fusion.forward(x, t, p, SMALL)
    stats = acts.statistics()
    assert set(stats) == set(fusion.CageActivations.NAMES)
    assert stats["G"]["min"] >= 0 and stats["G"]["max"] <= 1
    np.testing.assert_allclose(acts.attention.sum(-1), 1.0, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), L=st.integers(1, 5))
def test_token_permutation_invariance(seed, L):
    rng = np.random.default_rng(seed)
    p = fusion.init_params(SMALL, seed % 7, identity_init=False)
    x, t = _inputs(SMALL, rng, L=L)
    perm = rng.permutation(L)
    a, acts_a = fusion.forward(x, t, p, SMALL)
    b, acts_b = fusion.forward(x, t[:, perm], p, SMALL)
    np.testing.assert_allclose(b, a, atol=1e-10, rtol=0)
    np.testing.assert_allclose(acts_b.K, acts_a.K[:, perm], atol=1e-12, rtol=0)


# ------------------------------------------------------------------ backward

def test_block_gradcheck_train_and_eval():
    for mode in ("train", "eval"):
        rep = check_block(SMALL, seed=0, mode=mode)
        assert rep.passed, (mode, rep.worst)


def test_block_gradcheck_variant_config():
    cfg = CageConfig(6, 4, 10, 6, heads=3, residual_kind="projected", attn_out_proj=False,
                     dw_units=1)
    rep = check_block(cfg, seed=5, batch=2, height=3, width=3, tokens=2)
    assert rep.passed, rep.worst


def test_zero_upstream_gives_zero_gradients(rng):
    p = fusion.init_params(SMALL, 0, identity_init=False)
    x, t = _inputs(SMALL, rng)
    out, acts = fusion.forward(x, t, p, SMALL, "train", update_running_stats=False)
    grads = fusion.backward(np.zeros_like(out), acts, p, SMALL)
    assert all(not g.any() for g in grads.values())


def test_scale_law(rng):
    p = fusion.init_params(SMALL, 0, identity_init=False)
    x, t = _inputs(SMALL, rng)
    out, acts = fusion.forward(x, t, p, SMALL, "train", update_running_stats=False)
    u = rng.standard_normal(out.shape)
    g1 = fusion.backward(u, acts, p, SMALL)
    g2 = fusion.backward(2 * u, acts, p, SMALL)
    for k in g1:
        assert np.array_equal(g2[k], 2 * g1[k]), k


def test_text_gradient_vanishes_behind_closed_gate(rng):
    p = fusion.init_params(SMALL, 0, identity_init=False)
    p.weights["gate_conv1x1.b"][:] = -1e3  # sigmoid underflows to exactly 0
    x, t = _inputs(SMALL, rng)
    film = (rng.standard_normal((2, 8)), rng.standard_normal((2, 8)))
    out, acts = fusion.forward(x, t, p, SMALL, "eval", film_override=film)
    assert not acts.G.any()
    grads = fusion.backward(rng.standard_normal(out.shape), acts, p, SMALL)
    assert not grads["F_text"].any()
    assert grads["F_img"].any()


def test_stale_or_mismatched_activations(rng):
    p = fusion.init_params(SMALL, 0, identity_init=False)
    x, t = _inputs(SMALL, rng)
    out, acts = fusion.forward(x, t, p, SMALL)
    with pytest.raises(fusion.ConsistencyError):
        fusion.backward(out[:, :4], acts, p, SMALL)
    other = CageConfig(8, 8, 16, 8, heads=4)
    with pytest.raises(fusion.ConsistencyError):
        fusion.backward(out, acts, p, other)
    p.weights["w_k"] = p["w_k"] + 1.0
    with pytest.raises(fusion.ConsistencyError):
        fusion.backward(out, acts, p, SMALL)


def test_sabotage_hook_breaks_gradcheck(monkeypatch):
    monkeypatch.setattr(fusion, "SABOTAGE_PARAM", "w_v")
    rep = check_block(SMALL, seed=0)
    assert not rep.passed and rep.worst[0] == "w_v"


# ------------------------------------------------------------------ drop-in

def test_drop_in_shapes_small_batch():
    levels = (fusion.NeckLevel("A", 16, 16, 6, 5), fusion.NeckLevel("B", 16, 32, 3, 3))
    reports = fusion.drop_in_check(levels, text_len=4, embed_dim=32)
    assert all(r.ok for r in reports)
    assert reports[1].actual_shape == (1, 32, 3, 3)
    assert all(r.params > 0 and r.flops > 0 for r in reports)


def test_drop_in_negative_names_level():
    levels = (fusion.NeckLevel("P3", 16, 16, 4, 4),
              fusion.NeckLevel("P4", 16, 32, 4, 4, expected_c_out=24))
    reports = fusion.drop_in_check(levels, text_len=2, embed_dim=32)
    bad = [r.level for r in reports if not r.ok]
    assert bad == ["P4"]
