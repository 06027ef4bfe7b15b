import numpy as np
import pytest

from mgmt import tensor as T
from mgmt.encoder import (ConfigError, EncoderConfig, GraphBatch, GraphEncoder, attention_layer,
                          attention_matrix, encode, ffn_block, topk_sparsify)
from mgmt.graphs import Graph
from mgmt.synth import gen_topology


def make_encoder(seed=0, **kw):
    cfg = EncoderConfig(**{"layers": 2, "heads": 2, "dim": 4, **kw})
    return GraphEncoder(cfg, np.random.default_rng(seed))


def set_layer(enc, ell, **values):
    for name, v in values.items():
        enc.params[f"layer{ell}.{name}"].data = np.asarray(v, dtype=np.float64)


def random_graph(n, d, seed, p=0.4):
    rng = np.random.default_rng(seed)
    return Graph(rng.normal(size=(n, d)), gen_topology(n, p, rng))


def test_extended_edge_list():
    b = GraphBatch([3, 2], [[[0, 1], [1, 2]], [[0, 1]]])
    pairs = list(zip(b.src.tolist(), b.dst.tolist()))
    assert pairs == sorted(pairs)
    assert b.n_edges == 2 * 3 + 5
    assert b.is_self.sum() == 5 and b.max_degree() == 2


def test_zero_query_key_gives_uniform_attention():
    enc = make_encoder(layers=1)
    set_layer(enc, 0, W_Q=np.zeros((4, 4)), W_K=np.zeros((4, 4)))
    g = Graph(np.random.default_rng(1).normal(size=(4, 4)), [[0, 1], [0, 2], [0, 3]])
    out = encode(g, enc)
    A = attention_matrix(out.per_layer_attn[0], out.batch)
    np.testing.assert_allclose(A[0], [0.25] * 4, atol=1e-15)
    np.testing.assert_allclose(A[1], [0.5, 0.5, 0, 0], atol=1e-15)


def test_disconnected_graph_with_identity_values_keeps_features():
    enc = make_encoder(layers=1)
    set_layer(enc, 0, W_V=np.eye(4), W_O=np.eye(4))
    X = np.random.default_rng(2).normal(size=(3, 4))
    b = GraphBatch([3], [np.zeros((0, 2))])
    Z, attn = attention_layer(T.Tensor(X), b, enc.layers[0], enc.cfg)
    np.testing.assert_array_equal(Z.data, X)
    np.testing.assert_array_equal(attn, np.ones((3, 2)))


def test_identical_features_split_attention_evenly():
    enc = make_encoder(layers=1)
    X = np.tile(np.random.default_rng(3).normal(size=4), (2, 1))
    out = encode(Graph(X, [[0, 1]]), enc)
    np.testing.assert_allclose(attention_matrix(out.per_layer_attn[0], out.batch), 0.5, atol=1e-15)


def test_zero_ffn_is_layer_norm_of_attention():
    enc = make_encoder(layers=1)
    set_layer(enc, 0, W_F1=np.zeros((4, 4)), W_F2=np.zeros((4, 4)))
    Z = T.Tensor(np.random.default_rng(4).normal(size=(3, 4)))
    p = enc.layers[0]
    expect = T.layer_norm(Z, p["ln_scale"], p["ln_shift"]).data
    np.testing.assert_array_equal(ffn_block(Z, p, enc.cfg).data, expect)


def test_bypass_with_identity_ffn_passes_attention_through():
    enc = make_encoder(layers=1, norm_mode="bypass", activation="identity")
    set_layer(enc, 0, W_F1=np.eye(4), W_F2=np.eye(4))
    Z = T.Tensor(np.random.default_rng(5).normal(size=(3, 4)))
    np.testing.assert_array_equal(ffn_block(Z, enc.layers[0], enc.cfg).data, Z.data)


def test_depth_fusion_weights():
    g = random_graph(6, 4, 6)
    one = make_encoder(layers=1)
    out = encode(g, one, [1.0])
    np.testing.assert_array_equal(out.fused_H.data, out.per_layer_H[0].data)
    enc = make_encoder(layers=3)
    out = encode(g, enc, [0.0, 0.0, 1.0])
    np.testing.assert_array_equal(out.fused_H.data, out.per_layer_H[-1].data)
    gamma = np.array([0.3, -0.2, 1.4])
    out = encode(g, enc, gamma)
    rows = np.bincount(out.batch.src, weights=out.fused_attn)
    np.testing.assert_allclose(rows, gamma.sum(), atol=1e-12)
    with pytest.raises(ConfigError):
        encode(g, enc, [1.0, 0.0])


def test_topk_single_neighbour_keeps_largest_magnitude():
    assert topk_sparsify([0.9, -1.5, 0.2], 1).tolist() == [1]
    assert topk_sparsify([0.5, -0.5], 1).tolist() == [0]
    assert topk_sparsify([0.5, 0.5], 1).tolist() == [0]


def test_topk_limits_support():
    g = random_graph(8, 4, 7, p=0.8)
    out = encode(g, make_encoder(topk=1))
    for attn in out.per_layer_head_attn:
        nz = (attn > 0) & ~out.batch.is_self[:, None]
        for m in range(attn.shape[1]):
            assert np.bincount(out.batch.src[nz[:, m]], minlength=8).max() <= 1


def test_topk_at_max_degree_equals_dense():
    g = random_graph(7, 4, 8, p=0.5)
    k = GraphBatch.from_graphs([g]).max_degree()
    dense = encode(g, make_encoder(seed=3))
    sparse = encode(g, make_encoder(seed=3, topk=k))
    np.testing.assert_array_equal(dense.fused_H.data, sparse.fused_H.data)


@pytest.mark.parametrize("seed", range(5))
def test_permutation_equivariance(seed):
    g = random_graph(7, 4, seed)
    perm = np.random.default_rng(seed + 100).permutation(7)
    enc = make_encoder(seed=seed)
    a = encode(g, enc).fused_H.data
    b = encode(g.permuted(perm), enc).fused_H.data
    np.testing.assert_allclose(b, a[perm], atol=1e-12)


def test_batched_matches_single():
    gs = [random_graph(n, 4, n) for n in (3, 5, 1)]
    enc = make_encoder(seed=1)
    batched = enc.forward(np.vstack([g.features for g in gs]), GraphBatch.from_graphs(gs)).fused_H.data
    single = np.vstack([encode(g, enc).fused_H.data for g in gs])
    np.testing.assert_allclose(batched, single, atol=1e-12)


def test_input_projection_and_mismatch():
    g = random_graph(4, 3, 9)
    assert encode(g, make_encoder(in_dim=3)).fused_H.shape == (4, 4)
    with pytest.raises(ConfigError):
        encode(g, make_encoder())


def test_config_errors():
    with pytest.raises(ConfigError):
        EncoderConfig(dim=5, heads=2)
    with pytest.raises(ConfigError):
        EncoderConfig(layers=0)
    with pytest.raises(ConfigError):
        EncoderConfig(topk=0)


@pytest.mark.parametrize("mode", ["standard", "post", "bypass"])
def test_two_layer_encoder_gradients(mode):
    g = random_graph(5, 4, 10, p=0.6)
    enc = make_encoder(seed=11, norm_mode=mode)
    batch = GraphBatch.from_graphs([g])
    w = np.random.default_rng(12).normal(size=(5, 4))

    def f(x):
        return (enc.forward(x, batch, [0.4, 0.6]).fused_H * T.Tensor(w)).sum()

    assert T.grad_check(f, g.features) < 1e-4
    loss = lambda: (enc.forward(g.features, batch, [0.4, 0.6]).fused_H * T.Tensor(w)).sum()
    assert T.grad_check_params(loss, list(enc.named_params().values())) < 1e-4
