import numpy as np
import pytest

from core.data import generate_synthetic, make_windows
from core.errors import DimensionError
from core.model import (PARAM_NAMES, ModelParams, aggregate_retrieval, backward, decompose, encode, forward, fuse,
                        param_shapes, predict)
from core.numerics import grad_check
from retrieval.knowledge_base import build_kb
from schemas.synthetic import SyntheticSpec
from schemas.train_config import Ablation
from tests.conftest import desk_config, tiny_config
from training.losses import batch_loss

ABLATIONS = list(Ablation)


def test_init_layout(tiny_cfg, tiny_params):
    shapes = param_shapes(tiny_cfg.L, tiny_cfg.patch.patch_len, tiny_cfg.d, tiny_cfg.d_hidden)
    assert [name for name, _ in tiny_params.items()] == list(PARAM_NAMES)
    assert tiny_params.n_params() == sum(int(np.prod(s)) for s in shapes.values())
    eye = np.eye(tiny_cfg.L)
    np.testing.assert_array_equal(tiny_params["fuse_w"], np.hstack([eye / 2, eye / 2]))
    assert not tiny_params["lam_b"].any() and not tiny_params["gam_b"].any()


def test_init_is_seeded(tiny_cfg):
    a, b, c = ModelParams.init(tiny_cfg, 1), ModelParams.init(tiny_cfg, 1), ModelParams.init(tiny_cfg, 2)
    assert a.encoder_hash() == b.encoder_hash() != c.encoder_hash()


def test_forward_identities_hold(tiny_cfg, tiny_params, tiny_kb, tiny_windows):
    rng = np.random.default_rng(0)
    for _ in range(1000):
        params = ModelParams.init(tiny_cfg, int(rng.integers(0, 2**31)))
        w = tiny_windows[int(rng.integers(0, len(tiny_windows)))]
        out = forward(w.context, tiny_kb, params, tiny_cfg, exclude_id=tiny_kb.id_for_source(w.source_id))
        assert np.max(np.abs(out.z_inv + out.z_dyn - out.h)) <= 1e-12
        assert abs(out.omega.sum() - 1.0) <= 1e-12
        assert np.all((out.gamma_gate > 0) & (out.gamma_gate < 1))
        assert np.all((out.lambda_gate > 0) & (out.lambda_gate < 1))
        assert out.y_hat.shape == (tiny_cfg.L,)
        assert tiny_kb.id_for_source(w.source_id) not in out.retrieved_ids.tolist()


def test_context_length_is_checked(tiny_cfg, tiny_params, tiny_kb):
    with pytest.raises(DimensionError, match=r"\(15,\)"):
        forward(np.zeros(15), tiny_kb, tiny_params, tiny_cfg)


def test_no_retrieval_equals_full_with_fusion_gate_pinned_open(tiny_cfg, tiny_params, tiny_kb, tiny_windows):
    d = tiny_cfg.d
    pinned = tiny_params.copy()
    pinned.tensors["lam_w"].value[...] = 0.0
    pinned.tensors["lam_b"].value[...] = 1000.0    # sigmoid -> exactly 1
    pinned.tensors["gam_w"].value[:, d:] = 0.0      # gate ignores h_ret
    no_ret = tiny_cfg.model_copy(update={"ablation": Ablation.no_retrieval})
    for w in tiny_windows[:20]:
        full = forward(w.context, tiny_kb, pinned, tiny_cfg)
        bare = forward(w.context, None, pinned, no_ret)
        np.testing.assert_array_equal(full.h, full.q)
        np.testing.assert_allclose(bare.y_hat, full.y_hat, rtol=0, atol=1e-12)
        assert bare.retrieved_ids.size == 0 and bare.omega.size == 0


def test_no_idd_uses_a_single_head(tiny_cfg, tiny_params, tiny_kb, tiny_windows):
    cfg = tiny_cfg.model_copy(update={"ablation": Ablation.no_idd})
    out = forward(tiny_windows[0].context, tiny_kb, tiny_params, cfg)
    assert not out.z_dyn.any()
    np.testing.assert_array_equal(out.gamma_gate, np.ones(cfg.d))
    np.testing.assert_allclose(out.y_hat, tiny_params["inv_w"] @ out.h + tiny_params["inv_b"], rtol=0, atol=1e-12)


def test_plain_skips_retrieval_and_decomposition(tiny_cfg, tiny_params, tiny_windows):
    cfg = tiny_cfg.model_copy(update={"ablation": Ablation.plain})
    out = forward(tiny_windows[0].context, None, tiny_params, cfg)
    np.testing.assert_array_equal(out.h, out.q)
    assert out.retrieved_ids.size == 0 and not out.z_dyn.any()


def test_dropout_only_in_training_mode(tiny_cfg, tiny_kb, tiny_windows):
    cfg = tiny_cfg.model_copy(update={"dropout": 0.5})
    params = ModelParams.init(cfg)
    x = tiny_windows[3].context
    eval_a = forward(x, tiny_kb, params, cfg, rng=np.random.default_rng(0))
    eval_b = forward(x, tiny_kb, params, cfg)
    np.testing.assert_array_equal(eval_a.y_hat, eval_b.y_hat)
    train_a = forward(x, tiny_kb, params, cfg, training=True, rng=np.random.default_rng(1))
    train_b = forward(x, tiny_kb, params, cfg, training=True, rng=np.random.default_rng(1))
    np.testing.assert_array_equal(train_a.y_hat, train_b.y_hat)
    assert not np.array_equal(train_a.y_hat, eval_a.y_hat)


# ---------- gradients ----------
def _graph_and_grads(params, kb, cfg, windows, rho):
    """Scalar batch loss as a function of params (retrieval frozen) and its analytic gradient."""
    fixed = [kb.top_k(forward(w.context, kb, params, cfg).q, cfg.K) if cfg.ablation.uses_retrieval else None
             for w in windows]

    def run():
        outs = [forward(w.context, kb, params, cfg, retrieval=r) for w, r in zip(windows, fixed)]
        return outs, batch_loss(outs, [w.horizon for w in windows], rho)

    outs, (_, adjoints) = run()
    params.zero_grad()
    for out, adj in zip(outs, adjoints):
        backward(out, params, *adj)
    return lambda: run()[1][0].total


@pytest.mark.parametrize("ablation", ABLATIONS, ids=[a.value for a in ABLATIONS])
def test_full_graph_gradients_match_finite_differences(ablation, tiny_kb, tiny_windows):
    cfg = tiny_config(ablation=ablation)
    params = ModelParams.init(cfg, 3)
    # move gates and fusion off their symmetric init so every path carries signal
    rng = np.random.default_rng(3)
    for name in ("lam_b", "gam_b", "fuse_w", "fuse_b"):
        params.tensors[name].value[...] += 0.3 * rng.standard_normal(params[name].shape)
    graph = _graph_and_grads(params, tiny_kb, cfg, tiny_windows[:3], rho=0.5)

    names = [name for name, _ in params.items()]
    report = grad_check(graph, [p for _, p in params.items()], step=1e-6, names=names)
    assert report.passed(1e-4), report.per_param


def _desk_setup(seed):
    cfg = desk_config()
    channels = generate_synthetic(SyntheticSpec(n_channels=3, length=160, seed=seed))
    windows = make_windows(channels, cfg.T, cfg.L, 8)
    params = ModelParams.init(cfg, seed)
    rng = np.random.default_rng(seed)
    for name in ("lam_b", "gam_b", "fuse_w"):
        params.tensors[name].value[...] += 0.3 * rng.standard_normal(params[name].shape)
    return cfg, params, build_kb(windows, params), windows


@pytest.mark.parametrize("seed", [0, 1])
def test_desk_scale_gradients(seed):
    cfg, params, kb, windows = _desk_setup(seed)
    graph = _graph_and_grads(params, kb, cfg, windows[:2], rho=0.1)
    report = grad_check(graph, [p for _, p in params.items()], step=1e-6,
                        names=[n for n, _ in params.items()], max_entries=25, seed=seed)
    assert report.passed(1e-4), report.per_param


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(20))
def test_desk_scale_gradients_many_seeds(seed):
    cfg, params, kb, windows = _desk_setup(seed)
    graph = _graph_and_grads(params, kb, cfg, windows[:2], rho=0.1)
    report = grad_check(graph, [p for _, p in params.items()], step=1e-6,
                        names=[n for n, _ in params.items()], max_entries=60, seed=seed)
    assert report.passed(1e-4), report.per_param


def test_zero_rho_gradient_equals_prediction_gradient(tiny_cfg, tiny_kb, tiny_windows):
    params = ModelParams.init(tiny_cfg, 4)
    batch = tiny_windows[:4]
    outs = [forward(w.context, tiny_kb, params, tiny_cfg) for w in batch]
    _, adjoints = batch_loss(outs, [w.horizon for w in batch], rho=0.0)

    params.zero_grad()
    for out, adj in zip(outs, adjoints):
        backward(out, params, *adj)
    with_dis = {n: p.grad.copy() for n, p in params.items()}

    params.zero_grad()
    for out, adj in zip(outs, adjoints):
        backward(out, params, adj[0])
    for name, p in params.items():
        np.testing.assert_array_equal(p.grad, with_dis[name])


# ---------- stages ----------
def test_encode_ignores_patch_order(tiny_cfg, tiny_params):
    x = np.random.default_rng(0).standard_normal(tiny_cfg.T)
    blocks = x.reshape(-1, tiny_cfg.patch.patch_len)      # stride == patch_len
    shuffled = blocks[[2, 0, 3, 1]].reshape(-1)
    np.testing.assert_allclose(encode(shuffled, tiny_params), encode(x, tiny_params), rtol=0, atol=1e-12)


def test_encode_of_identical_patches_is_the_single_patch_feature(tiny_cfg, tiny_params):
    block = np.random.default_rng(1).standard_normal(tiny_cfg.patch.patch_len)
    x = np.tile(block, tiny_cfg.T // tiny_cfg.patch.patch_len)
    p = tiny_params
    single = p["enc_w2"] @ np.tanh(p["enc_w1"] @ block + p["enc_b1"]) + p["enc_b2"]
    np.testing.assert_allclose(encode(x, p), single, rtol=0, atol=1e-12)


def test_aggregate_with_one_neighbour_returns_its_projection(tiny_cfg, tiny_params):
    rng = np.random.default_rng(2)
    q, y = rng.standard_normal(tiny_cfg.d), rng.standard_normal(tiny_cfg.L)
    h_ret, omega = aggregate_retrieval(q, y[None, :], tiny_params)
    assert omega.tolist() == [1.0]
    np.testing.assert_allclose(h_ret, tiny_params["proj_w"] @ y + tiny_params["proj_b"], rtol=0, atol=1e-12)


def test_aggregate_of_identical_neighbours_weights_them_equally(tiny_cfg, tiny_params):
    rng = np.random.default_rng(3)
    q, y = rng.standard_normal(tiny_cfg.d), rng.standard_normal(tiny_cfg.L)
    h_ret, omega = aggregate_retrieval(q, np.tile(y, (3, 1)), tiny_params, temperature=0.5)
    np.testing.assert_allclose(omega, np.full(3, 1 / 3), rtol=0, atol=1e-15)
    np.testing.assert_allclose(h_ret, tiny_params["proj_w"] @ y + tiny_params["proj_b"], rtol=0, atol=1e-12)


def test_zero_query_gives_uniform_weights_and_mean_projection(tiny_cfg, tiny_params):
    Y = np.random.default_rng(4).standard_normal((3, tiny_cfg.L))
    h_ret, omega = aggregate_retrieval(np.zeros(tiny_cfg.d), Y, tiny_params)
    assert omega.tolist() == [1 / 3] * 3
    Tk = Y @ tiny_params["proj_w"].T + tiny_params["proj_b"]
    np.testing.assert_allclose(h_ret, Tk.mean(axis=0), rtol=0, atol=1e-12)


def test_saturated_fusion_gate_passes_the_query_through(tiny_cfg, tiny_params):
    rng = np.random.default_rng(5)
    params = tiny_params.copy()
    params.tensors["lam_b"].value[...] = 50.0
    q, h_ret = rng.standard_normal(tiny_cfg.d), rng.standard_normal(tiny_cfg.d)
    h, lam = fuse(q, h_ret, params)
    assert np.max(np.abs(lam - 1.0)) <= 1e-15
    assert np.max(np.abs(h - q)) <= 1e-15


def test_fusion_stays_between_query_and_retrieval(tiny_cfg):
    rng = np.random.default_rng(6)
    for seed in range(100):
        params = ModelParams.init(tiny_cfg, seed)
        params.tensors["lam_b"].value[...] = rng.standard_normal(tiny_cfg.d)
        q, h_ret = 3 * rng.standard_normal(tiny_cfg.d), 3 * rng.standard_normal(tiny_cfg.d)
        h, _ = fuse(q, h_ret, params)
        assert np.all(h >= np.minimum(q, h_ret) - 1e-12)
        assert np.all(h <= np.maximum(q, h_ret) + 1e-12)


def test_predict_of_zero_with_zero_biases_is_zero(tiny_cfg, tiny_params):
    params = tiny_params.copy()
    for name in ("inv_b", "dyn_b", "fuse_b"):
        params.tensors[name].value[...] = 0.0
    zeros = np.zeros(tiny_cfg.d)
    for y in predict(zeros, zeros, params):
        assert y.shape == (tiny_cfg.L,) and not y.any()


def test_forward_is_the_composition_of_its_stages_at_desk_scale():
    cfg = desk_config()
    assert (cfg.T, cfg.L, cfg.d, cfg.K) == (64, 16, 32, 3)
    channels = generate_synthetic(SyntheticSpec(n_channels=4, length=400, seed=0))
    windows = make_windows(channels, cfg.T, cfg.L, 8)
    params = ModelParams.init(cfg, 3)
    kb = build_kb(windows[:50], params)
    assert len(kb) == 50
    for w in windows[50:60]:
        out = forward(w.context, kb, params, cfg)
        q = encode(w.context, params)
        hits = kb.top_k(q, cfg.K)
        h_ret, omega = aggregate_retrieval(q, hits.horizons, params, cfg.temperature)
        h, lam = fuse(q, h_ret, params)
        z_inv, z_dyn, gamma = decompose(h, h_ret, params)
        y_hat, y_inv, y_dyn = predict(z_inv, z_dyn, params)
        for got, want in [(out.q, q), (out.retrieved_ids, hits.ids), (out.omega, omega), (out.h_ret, h_ret),
                          (out.h, h), (out.lambda_gate, lam), (out.gamma_gate, gamma),
                          (out.y_inv, y_inv), (out.y_dyn, y_dyn), (out.y_hat, y_hat)]:
            np.testing.assert_array_equal(got, want)
        assert out.y_hat.shape == (16,) and out.q.shape == (32,)
        assert abs(omega.sum() - 1.0) <= 1e-12
        assert np.max(np.abs(z_inv + z_dyn - h)) <= 1e-12
