"""Supernode selection, superedge construction and meta-graph assembly."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

NORM_GUARD = 1e-5
NORM_FLOOR = 1e-12
METRICS = ("cosine", "pearson", "euclidean", "dot")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Selection:
    """Supernode rule: ``fixed`` keeps ``score >= value``; ``quantile`` keeps a retention rate."""

    mode: str = "fixed"
    value: float = 0.3

    def __post_init__(self):
        if self.mode not in ("fixed", "quantile"):
            raise ConfigError(f"unknown selection mode {self.mode!r}")
        if self.mode == "quantile" and not 0.0 < self.value <= 1.0:
            raise ConfigError("retention rate must lie in (0, 1]")


@dataclass(frozen=True)
class EdgeRule:
    """Superedge rule: ``fixed`` keeps ``sim > value``; ``quantile`` keeps the top fraction."""

    mode: str = "fixed"
    value: float = 0.4
    metric: str = "cosine"

    def __post_init__(self):
        if self.mode not in ("fixed", "quantile"):
            raise ConfigError(f"unknown edge mode {self.mode!r}")
        if self.metric not in METRICS:
            raise ConfigError(f"unknown similarity metric {self.metric!r}")
        if self.mode == "quantile" and not 0.0 < self.value <= 1.0:
            raise ConfigError("edge fraction must lie in (0, 1]")


# ----------------------------------------------------------------- scores


def supernode_scores(fused_attn: np.ndarray, src: np.ndarray, is_self: np.ndarray,
                     n_nodes: int) -> np.ndarray:
    """Total fused attention each node sends to its neighbours (self-loop excluded)."""
    w = np.where(is_self, 0.0, fused_attn)
    return np.bincount(src, weights=w, minlength=n_nodes)


def _top1(scores: np.ndarray) -> np.ndarray:
    keep = np.zeros(len(scores), dtype=bool)
    keep[int(np.argmax(scores))] = True
    return keep


def select_supernodes(scores, rule: Selection) -> tuple[np.ndarray, bool]:
    """Selection mask for one graph and whether the top-1 fallback fired."""
    s = np.asarray(scores, dtype=np.float64)
    if rule.mode == "fixed":
        keep = s >= rule.value
    else:
        lo, hi = s.min(), s.max()
        norm = (s - lo) / max(hi - lo, NORM_GUARD)
        keep = norm >= np.quantile(norm, 1.0 - rule.value)
    if keep.any():
        return keep, False
    return _top1(s), True


def select_batch(scores: np.ndarray, offsets: np.ndarray, rule: Selection):
    """Apply :func:`select_supernodes` to every graph of a disjoint union."""
    keep = np.zeros(len(scores), dtype=bool)
    fallbacks = 0
    if rule.mode == "fixed":
        keep = scores >= rule.value
        for g in range(len(offsets) - 1):
            a, b = offsets[g], offsets[g + 1]
            if not keep[a:b].any():
                keep[a + int(np.argmax(scores[a:b]))] = True
                fallbacks += 1
        return keep, fallbacks
    for g in range(len(offsets) - 1):
        a, b = offsets[g], offsets[g + 1]
        keep[a:b], fb = select_supernodes(scores[a:b], rule)
        fallbacks += fb
    return keep, fallbacks


# ------------------------------------------------------------- similarity


def similarity_matrix(H: np.ndarray, metric: str = "cosine") -> np.ndarray:
    """Pairwise similarities between rows of ``H``."""
    H = np.asarray(H, dtype=np.float64)
    if metric == "dot":
        return H @ H.T
    if metric == "euclidean":
        sq = np.sum(H * H, axis=1)
        d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (H @ H.T), 0.0)
        np.fill_diagonal(d2, 0.0)
        return 1.0 / (1.0 + np.sqrt(d2))
    if metric == "pearson":
        H = H - H.mean(axis=1, keepdims=True)
    elif metric != "cosine":
        raise ConfigError(f"unknown similarity metric {metric!r}")
    norms = np.linalg.norm(H, axis=1)
    ok = norms >= NORM_FLOOR
    safe = np.where(ok, norms, 1.0)
    U = H / safe[:, None]
    sim = U @ U.T
    sim[~ok, :] = 0.0
    sim[:, ~ok] = 0.0
    return sim


def similarity(hu, hv, metric: str = "cosine") -> float:
    return float(similarity_matrix(np.vstack([hu, hv]), metric)[0, 1])


def build_superedges(H: np.ndarray, graph_index: np.ndarray, rule: EdgeRule):
    """Inter-graph pairs ``(a, b)`` with ``a < b`` and their similarities."""
    graph_index = np.asarray(graph_index)
    sim = similarity_matrix(H, rule.metric)
    a, b = np.triu_indices(len(graph_index), k=1)
    cross = graph_index[a] != graph_index[b]
    a, b = a[cross], b[cross]
    vals = sim[a, b]
    if vals.size == 0:
        return np.zeros((0, 2), dtype=np.int64), vals
    if rule.mode == "fixed":
        keep = vals > rule.value
    else:
        keep = vals >= np.quantile(vals, 1.0 - rule.value)
    return np.stack([a[keep], b[keep]], axis=1), vals[keep]


# --------------------------------------------------------------- assembly


@dataclass
class MetaGraph:
    """One sample's meta-graph. Node ``k`` is ``(graph_index[k], node_index[k])``."""

    graph_index: np.ndarray
    node_index: np.ndarray
    scores: np.ndarray
    intra_edges: np.ndarray
    inter_edges: np.ndarray
    inter_sims: np.ndarray
    provenance: dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        return len(self.graph_index)

    @property
    def edges(self) -> np.ndarray:
        return np.concatenate([self.intra_edges, self.inter_edges]).astype(np.int64).reshape(-1, 2)

    def adjacency(self) -> np.ndarray:
        A = np.zeros((self.size, self.size))
        e = self.edges
        A[e[:, 0], e[:, 1]] = 1.0
        A[e[:, 1], e[:, 0]] = 1.0
        return A


def prune_edges(edges: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Edges of one graph with both endpoints selected, relabelled to selection order."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    new_id = np.cumsum(keep) - 1
    both = keep[edges[:, 0]] & keep[edges[:, 1]]
    return new_id[edges[both]]


def assemble(selected: list, graph_edges: list, embeddings: list, scores: list,
             edge_rule: EdgeRule | None, *, intra: bool = True, provenance=None) -> MetaGraph:
    """Build a meta-graph from per-graph selections.

    ``selected[i]`` is a boolean node mask for graph ``i``; ``embeddings[i]``
    the fused embeddings of all its nodes. ``edge_rule=None`` disables
    inter-graph edges.
    """
    gi, ni, sc, blocks, intra_parts = [], [], [], [], []
    offset = 0
    for i, keep in enumerate(selected):
        keep = np.asarray(keep, dtype=bool)
        idx = np.flatnonzero(keep)
        gi.append(np.full(len(idx), i))
        ni.append(idx)
        sc.append(np.asarray(scores[i])[idx])
        blocks.append(np.asarray(embeddings[i])[idx])
        if intra:
            intra_parts.append(prune_edges(graph_edges[i], keep) + offset)
        offset += len(idx)
    graph_index = np.concatenate(gi).astype(np.int64)
    intra_edges = (np.concatenate(intra_parts) if intra_parts else np.zeros((0, 2))).astype(np.int64)
    if edge_rule is not None:
        inter, sims = build_superedges(np.vstack(blocks), graph_index, edge_rule)
    else:
        inter, sims = np.zeros((0, 2), dtype=np.int64), np.zeros(0)
    return MetaGraph(graph_index, np.concatenate(ni).astype(np.int64), np.concatenate(sc),
                     intra_edges.reshape(-1, 2), inter, sims, dict(provenance or {}))


# ------------------------------------------------------------ diagnostics


def dirichlet_energy(A, X, n: int | None = None) -> float:
    """``(1 / 2n²) Σ_ij A_ij ‖x_i − x_j‖²``."""
    A = np.asarray(A, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    n = A.shape[0] if n is None else n
    sq = np.sum(X * X, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (X @ X.T)
    return float(np.sum(A * d2) / (2.0 * n * n))


def dirichlet_energy_trace(A, X, n: int | None = None) -> float:
    """``(1/n²) tr(Xᵀ L X)`` with ``L = D − A``."""
    A = np.asarray(A, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    n = A.shape[0] if n is None else n
    L = np.diag(A.sum(axis=1)) - A
    return float(np.trace(X.T @ L @ X) / (n * n))
