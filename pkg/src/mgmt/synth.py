"""Synthetic multi-graph datasets.

Setting 1 draws informative node features from graph-specific correlated
Gaussians and labels each graph by a linear threshold rule. Setting 2 draws
node features as Gaussian-process sample paths and labels each graph through
a sinusoidal/quadratic rule. In both, the per-graph labels are combined into
one shared label by a weighted vote.

Topology is not part of either recipe; graphs are Erdős–Rényi with
isolated nodes patched to a random partner.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .graphs import Dataset, Graph, MultiGraphSample

GP_JITTER = 1e-8
PSD_FLOOR = 1e-8

# substream tags for SeedSequence spawn keys
_COV_STREAM = 0
_SAMPLE_STREAM = 1


class ConfigError(ValueError):
    pass


class GenerationError(RuntimeError):
    pass


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


@dataclass
class Setting1Config:
    sample_count: int = 100
    graphs_per_sample: int = 5
    nodes: int = 10
    informative_count: int = 5
    feature_dim: int = 30
    noise_levels: list[float] | None = None
    weights: list[float] | None = None
    label_threshold: float = 0.5
    edge_prob: float = 0.3
    label_noise_var: float = 0.1
    seed: int = 0

    def resolved(self):
        n = self.graphs_per_sample
        sig = self.noise_levels if self.noise_levels is not None else list(np.linspace(0.1, 0.9, n))
        w = self.weights if self.weights is not None else [1.0 / n] * n
        return [float(s) for s in sig], [float(x) for x in w]

    def check(self) -> None:
        sig, w = self.resolved()
        n = self.graphs_per_sample
        if self.sample_count < 1 or n < 1 or self.nodes < 1 or self.feature_dim < 1:
            raise ConfigError("counts must be positive")
        if not 1 <= self.informative_count <= self.nodes:
            raise ConfigError("informative_count must lie in [1, nodes]")
        if len(sig) != n or len(w) != n:
            raise ConfigError("noise_levels and weights need one entry per graph")
        if any(s < 0 for s in sig):
            raise ConfigError("noise levels must be non-negative")
        if any(x < 0 or x > 1 for x in w) or not np.isclose(sum(w), 1.0):
            raise ConfigError("weights must lie in [0, 1] and sum to 1")
        if not 0.0 <= self.label_threshold <= 1.0:
            raise ConfigError("label_threshold must lie in [0, 1]")
        if not 0.0 <= self.edge_prob <= 1.0:
            raise ConfigError("edge_prob must lie in [0, 1]")

    def to_dict(self) -> dict:
        sig, w = self.resolved()
        d = asdict(self)
        d.update(noise_levels=sig, weights=w)
        return d


@dataclass
class Setting2Config(Setting1Config):
    feature_dim: int = 12
    length_scale: float = 1.0
    informative_var: float = 1.0
    noise_var: float = 2.5

    def check(self) -> None:
        super().check()
        if self.feature_dim % 3:
            raise ConfigError(f"feature_dim must be divisible by 3, got {self.feature_dim}")
        if self.length_scale <= 0:
            raise ConfigError("length_scale must be positive")
        if not self.noise_var >= self.informative_var > 0:
            raise ConfigError("need noise_var >= informative_var > 0")


def config_from_dict(setting: int, doc: dict) -> Setting1Config:
    cls = Setting1Config if setting == 1 else Setting2Config
    known = {f.name for f in fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown generator fields: {sorted(unknown)}")
    return cls(**doc)


# ------------------------------------------------------------------ topology


def gen_topology(n: int, p_edge: float, rng: np.random.Generator) -> np.ndarray:
    """Erdős–Rényi G(n, p) edge list; isolated nodes get one random partner."""
    if not 0.0 <= p_edge <= 1.0:
        raise ConfigError("p_edge must lie in [0, 1]")
    iu, ju = np.triu_indices(n, k=1)
    keep = rng.random(len(iu)) < p_edge
    edges = set(zip(iu[keep].tolist(), ju[keep].tolist()))
    if n > 1:
        deg = np.zeros(n, dtype=np.int64)
        for u, v in edges:
            deg[u] += 1
            deg[v] += 1
        for u in range(n):
            if deg[u] == 0:
                v = int(rng.integers(n - 1))
                v += v >= u
                edges.add((min(u, v), max(u, v)))
                deg[u] += 1
                deg[v] += 1
    return np.array(sorted(edges), dtype=np.int64).reshape(-1, 2)


# ------------------------------------------------------------------- labels


def shared_label(graph_labels, weights, threshold: float) -> int:
    """Weighted vote: 1 iff ``sum_i w_i y_i >= threshold``."""
    return int(float(np.dot(weights, graph_labels)) >= threshold)


def nearest_psd(mat: np.ndarray, floor: float = PSD_FLOOR) -> np.ndarray:
    sym = 0.5 * (mat + mat.T)
    vals, vecs = np.linalg.eigh(sym)
    fixed = (vecs * np.maximum(vals, floor)) @ vecs.T
    return 0.5 * (fixed + fixed.T)


def setting1_covariance(d: int, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Unit diagonal, Unif(-sigma, sigma) off-diagonals, repaired to PSD."""
    off = rng.uniform(-sigma, sigma, size=(d, d)) if sigma > 0 else np.zeros((d, d))
    upper = np.triu(off, k=1)
    mat = np.eye(d) + upper + upper.T
    return nearest_psd(mat) if sigma > 0 else mat


def gen_setting1(cfg: Setting1Config) -> Dataset:
    cfg.check()
    sigmas, weights = cfg.resolved()
    n, N, N0, d = cfg.graphs_per_sample, cfg.nodes, cfg.informative_count, cfg.feature_dim
    cov_rng = _rng(cfg.seed, _COV_STREAM)
    factors = []
    for s in sigmas:
        cov = setting1_covariance(d, s, cov_rng)
        try:
            factors.append(np.linalg.cholesky(cov + PSD_FLOOR * np.eye(d)))
        except np.linalg.LinAlgError as exc:
            raise GenerationError(f"covariance for sigma={s} is not PSD after repair") from exc
    eps_std = float(np.sqrt(cfg.label_noise_var))
    samples = []
    for k in range(cfg.sample_count):
        rng = _rng(cfg.seed, _SAMPLE_STREAM, k)
        eps = rng.normal(0.0, eps_std)
        graphs, ys = [], []
        for i in range(n):
            feats = np.empty((N, d))
            feats[:N0] = rng.standard_normal((N0, d)) @ factors[i].T
            feats[N0:] = rng.uniform(0.0, 0.5, size=(N - N0, d))
            ys.append(int(feats[:N0].sum(axis=1).mean() + eps > 0))
            graphs.append(Graph(feats, gen_topology(N, cfg.edge_prob, rng)))
        samples.append(MultiGraphSample(graphs, shared_label(ys, weights, cfg.label_threshold)))
    prov = {"generator": "setting1", "config": cfg.to_dict(), "topology": "erdos_renyi+patch"}
    return Dataset(samples, 2, d, prov, cfg.seed)


# --------------------------------------------------------------- setting 2


def gp_kernel(x, x2, variance: float, length_scale: float):
    """Squared-exponential kernel ``variance * exp(-(x - x2)^2 / length_scale^2)``."""
    if length_scale <= 0:
        raise ConfigError("length_scale must be positive")
    diff = np.subtract(x, x2)
    return variance * np.exp(-(diff * diff) / length_scale**2)


def gp_gram(xs: np.ndarray, variance: float, length_scale: float) -> np.ndarray:
    gram = gp_kernel(xs[:, None], xs[None, :], variance, length_scale)
    return gram + GP_JITTER * np.eye(len(xs))


def gp_paths(count: int, d: int, variance: float, length_scale: float,
             rng: np.random.Generator) -> np.ndarray:
    """``count`` independent zero-mean GP paths, each over its own sorted Unif(0,1) inputs."""
    out = np.empty((count, d))
    for j in range(count):
        xs = np.sort(rng.uniform(0.0, 1.0, size=d))
        chol = np.linalg.cholesky(gp_gram(xs, variance, length_scale))
        out[j] = chol @ rng.standard_normal(d)
    return out


def projection_vectors(d: int) -> np.ndarray:
    """Rows select the first, middle and last third of the features."""
    if d % 3:
        raise ConfigError(f"feature_dim must be divisible by 3, got {d}")
    e = np.zeros((3, d))
    t = d // 3
    for r in range(3):
        e[r, r * t:(r + 1) * t] = 1.0
    return e


def setting2_graph_label(mean_informative: np.ndarray, eps: float) -> int:
    e = projection_vectors(mean_informative.shape[0])
    x = mean_informative
    value = np.sin(x @ e[0]) * np.cos(x @ e[1]) + (x * x) @ e[2] + eps
    return int(value > 0)


def gen_setting2(cfg: Setting2Config) -> Dataset:
    cfg.check()
    _, weights = cfg.resolved()
    n, N, N0, d = cfg.graphs_per_sample, cfg.nodes, cfg.informative_count, cfg.feature_dim
    eps_std = float(np.sqrt(cfg.label_noise_var))
    samples = []
    for k in range(cfg.sample_count):
        rng = _rng(cfg.seed, _SAMPLE_STREAM, k)
        graphs, ys = [], []
        for _ in range(n):
            feats = np.empty((N, d))
            feats[:N0] = gp_paths(N0, d, cfg.informative_var, cfg.length_scale, rng)
            feats[N0:] = gp_paths(N - N0, d, cfg.noise_var, cfg.length_scale, rng)
            ys.append(setting2_graph_label(feats[:N0].mean(axis=0), rng.normal(0.0, eps_std)))
            graphs.append(Graph(feats, gen_topology(N, cfg.edge_prob, rng)))
        samples.append(MultiGraphSample(graphs, shared_label(ys, weights, cfg.label_threshold)))
    prov = {"generator": "setting2", "config": cfg.to_dict(), "topology": "erdos_renyi+patch"}
    return Dataset(samples, 2, d, prov, cfg.seed)


# ------------------------------------------------------------------ presets

PRESETS = {
    "experiment1": (1, dict(sample_count=100, graphs_per_sample=5, nodes=5, informative_count=5,
                            feature_dim=10)),
    "experiment2": (2, dict(sample_count=100, graphs_per_sample=5, nodes=50, informative_count=40,
                            feature_dim=12)),
    "experiment3": (2, dict(sample_count=2000, graphs_per_sample=5, nodes=50, informative_count=40,
                            feature_dim=12)),
}


def generate(setting: int, config: dict | Setting1Config) -> Dataset:
    if isinstance(config, dict):
        config = config_from_dict(setting, config)
    if setting == 1:
        return gen_setting1(config)
    if setting == 2:
        return gen_setting2(config)
    raise ConfigError(f"unknown setting {setting}")


def preset(name: str, **overrides) -> tuple[int, dict]:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    setting, base = PRESETS[name]
    doc = dict(base)
    doc.update(overrides)
    return setting, doc


@dataclass(frozen=True)
class DatasetFactory:
    """Picklable ``seed -> Dataset`` callable for repeated trials."""

    setting: int
    config: tuple

    @classmethod
    def from_doc(cls, setting: int, doc: dict) -> "DatasetFactory":
        config_from_dict(setting, doc)
        return cls(setting, tuple(sorted((k, tuple(v) if isinstance(v, list) else v) for k, v in doc.items())))

    def __call__(self, seed: int) -> Dataset:
        doc = {k: list(v) if isinstance(v, tuple) else v for k, v in self.config}
        return generate(self.setting, {**doc, "seed": int(seed)})
