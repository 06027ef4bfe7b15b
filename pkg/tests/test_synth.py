import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mgmt.synth import (PRESETS, ConfigError, DatasetFactory, Setting1Config, Setting2Config, gen_setting1,
                        gen_setting2, gen_topology, generate, gp_gram, gp_kernel, gp_paths, nearest_psd,
                        preset, projection_vectors, setting1_covariance, setting2_graph_label, shared_label)


def test_topology_complete_graph():
    edges = gen_topology(6, 1.0, np.random.default_rng(0))
    assert len(edges) == 15


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 12), st.integers(0, 10_000))
def test_topology_empty_gets_patched(n, seed):
    edges = gen_topology(n, 0.0, np.random.default_rng(seed))
    assert len(edges) <= n
    assert set(np.unique(edges)) == set(range(n))
    assert np.all(edges[:, 0] < edges[:, 1])
    assert len({tuple(e) for e in edges.tolist()}) == len(edges)


def test_topology_deterministic_and_single_node():
    a = gen_topology(9, 0.3, np.random.default_rng(4))
    b = gen_topology(9, 0.3, np.random.default_rng(4))
    assert np.array_equal(a, b)
    assert gen_topology(1, 0.5, np.random.default_rng(0)).shape == (0, 2)
    with pytest.raises(ConfigError):
        gen_topology(3, 1.5, np.random.default_rng(0))


def test_shared_label_examples():
    w = [0.2] * 5
    assert shared_label([1] * 5, w, 1.0) == 1
    assert shared_label([1, 1, 0, 0, 0], w, 0.5) == 0
    assert shared_label([0] * 5, w, 0.1) == 0


def test_zero_noise_gives_identity_covariance():
    cov = setting1_covariance(4, 0.0, np.random.default_rng(0))
    np.testing.assert_array_equal(cov, np.eye(4))
    cfg = Setting1Config(sample_count=400, graphs_per_sample=1, nodes=3, informative_count=3, feature_dim=3,
                         noise_levels=[0.0])
    X = np.vstack([s.graphs[0].features for s in gen_setting1(cfg).samples])
    emp = np.cov(X.T)
    assert np.max(np.abs(emp - np.diag(np.diag(emp)))) < 0.1


def test_nearest_psd_repairs():
    bad = np.array([[1.0, 0.9, -0.9], [0.9, 1.0, 0.9], [-0.9, 0.9, 1.0]])
    assert np.linalg.eigvalsh(bad).min() < 0
    assert np.linalg.eigvalsh(nearest_psd(bad)).min() >= 1e-8 - 1e-12


def test_setting1_covariance_sanity():
    cfg = Setting1Config(sample_count=600, graphs_per_sample=2, nodes=4, informative_count=4, feature_dim=4,
                         noise_levels=[0.2, 0.6])
    ds = gen_setting1(cfg)
    for i, sigma in enumerate([0.2, 0.6]):
        X = np.vstack([s.graphs[i].features for s in ds.samples])
        emp = np.cov(X.T)
        off = np.abs(emp[~np.eye(4, dtype=bool)])
        stderr = np.sqrt((1 + emp[~np.eye(4, dtype=bool)] ** 2) / len(X))
        assert np.all(off <= sigma + 3 * stderr + 1e-9)


def test_setting1_label_balance_and_noise_range():
    ds = gen_setting1(Setting1Config(sample_count=1000))
    assert 0.35 <= ds.labels.mean() <= 0.65
    noise = np.vstack([g.features[5:] for s in ds.samples[:50] for g in s.graphs])
    assert noise.min() >= 0.0 and noise.max() <= 0.5


def test_generation_is_deterministic():
    setting, doc = preset("experiment1", sample_count=5)
    a, b = generate(setting, doc), generate(setting, doc)
    for sa, sb in zip(a.samples, b.samples):
        assert sa.label == sb.label
        for ga, gb in zip(sa.graphs, sb.graphs):
            assert np.array_equal(ga.features, gb.features) and np.array_equal(ga.edges, gb.edges)


def test_per_sample_streams_are_prefix_stable():
    small = gen_setting1(Setting1Config(sample_count=3))
    big = gen_setting1(Setting1Config(sample_count=8))
    for a, b in zip(small.samples, big.samples):
        assert np.array_equal(a.graphs[2].features, b.graphs[2].features)


def test_gp_kernel_examples():
    assert gp_kernel(0.3, 0.3, 2.5, 1.0) == 2.5
    assert gp_kernel(0.0, 1.0, 1.0, 1.0) == pytest.approx(np.exp(-1.0), abs=1e-15)
    assert gp_kernel(0.2, 0.9, 1.3, 0.4) == gp_kernel(0.9, 0.2, 1.3, 0.4)
    with pytest.raises(ConfigError):
        gp_kernel(0.0, 1.0, 1.0, 0.0)


def test_gp_gram_factorises():
    rng = np.random.default_rng(0)
    for _ in range(50):
        xs = np.sort(rng.uniform(size=12))
        np.linalg.cholesky(gp_gram(xs, 2.5, 1.0))


def test_gp_variances_match_kernel():
    rng = np.random.default_rng(1)
    inf = gp_paths(2000, 6, 1.0, 1.0, rng)
    noise = gp_paths(2000, 6, 2.5, 1.0, rng)
    assert abs(inf.var() - 1.0) < 0.1
    assert abs(noise.var() - 2.5) < 0.25


def test_projection_vectors():
    e = projection_vectors(6)
    np.testing.assert_array_equal(e, [[1, 1, 0, 0, 0, 0], [0, 0, 1, 1, 0, 0], [0, 0, 0, 0, 1, 1]])
    with pytest.raises(ConfigError):
        projection_vectors(7)


def test_setting2_zero_features_label_is_noise_sign():
    rng = np.random.default_rng(2)
    labels = [setting2_graph_label(np.zeros(6), rng.normal(0, np.sqrt(0.1))) for _ in range(4000)]
    assert abs(np.mean(labels) - 0.5) < 0.03
    assert setting2_graph_label(np.zeros(6), 0.0) == 0


def test_setting2_requires_divisible_dim():
    with pytest.raises(ConfigError):
        gen_setting2(Setting2Config(sample_count=1, feature_dim=10))


def test_setting2_shapes():
    ds = gen_setting2(Setting2Config(sample_count=3, graphs_per_sample=2, nodes=6, informative_count=4,
                                     feature_dim=6))
    assert ds.feature_dim == 6 and ds.graphs_per_sample == 2
    assert all(g.features.shape == (6, 6) for s in ds.samples for g in s.graphs)


def test_config_checks():
    with pytest.raises(ConfigError):
        gen_setting1(Setting1Config(informative_count=11, nodes=10))
    with pytest.raises(ConfigError):
        gen_setting1(Setting1Config(weights=[0.5, 0.5, 0.5, 0.0, 0.0]))
    with pytest.raises(ConfigError):
        generate(1, {"bogus": 1})
    with pytest.raises(ConfigError):
        gen_setting2(Setting2Config(noise_var=0.5))


def test_presets():
    assert set(PRESETS) == {"experiment1", "experiment2", "experiment3"}
    setting, doc = preset("experiment1")
    assert setting == 1 and doc["nodes"] == doc["informative_count"] == 5
    assert preset("experiment3")[1]["sample_count"] == 2000
    with pytest.raises(ConfigError):
        preset("nope")


def test_dataset_factory_matches_generate():
    setting, doc = preset("experiment1", sample_count=4)
    f = DatasetFactory.from_doc(setting, doc)
    a, b = f(11), generate(setting, {**doc, "seed": 11})
    assert np.array_equal(a.samples[3].graphs[4].features, b.samples[3].graphs[4].features)
