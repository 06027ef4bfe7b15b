"""Localized multi-head graph transformer encoder.

Graphs are encoded in batches as a disjoint union. Attention runs over an
extended edge list (both directions of every edge plus one self-loop per
node) sorted by ``(src, dst)``, so every node's neighbourhood is one
contiguous segment.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .tensor import Index, NonFiniteError, Segments, Tensor

NORM_MODES = ("standard", "post", "bypass")


class ConfigError(ValueError):
    pass


@dataclass
class EncoderConfig:
    layers: int = 2
    heads: int = 2
    dim: int = 16
    in_dim: int | None = None
    ffn_dim: int | None = None
    activation: str = "relu"
    dropout: float = 0.0
    topk: int | None = None
    norm_mode: str = "standard"

    def __post_init__(self):
        if self.layers < 1:
            raise ConfigError("layers must be >= 1")
        if self.heads < 1 or self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} must be divisible by heads {self.heads}")
        if self.topk is not None and self.topk < 1:
            raise ConfigError("topk must be >= 1 when given")
        if self.activation not in T.ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.norm_mode not in NORM_MODES:
            raise ConfigError(f"norm_mode must be one of {NORM_MODES}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.norm_mode != "bypass" and self.dim < 2:
            raise ConfigError("LayerNorm needs dim >= 2")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def hidden(self) -> int:
        return self.ffn_dim or self.dim

    def to_dict(self) -> dict:
        return asdict(self)


class GraphBatch:
    """Disjoint union of graphs with the extended edge list precomputed.

    ``sizes[g]`` is the node count of graph ``g``; ``edges[g]`` its local
    undirected ``(u, v)`` pairs.
    """

    def __init__(self, sizes, edges):
        sizes = np.asarray(sizes, dtype=np.int64)
        if sizes.size == 0 or np.any(sizes < 1):
            raise ValueError("every graph in a batch needs at least one node")
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        total = int(offsets[-1])
        parts = [np.asarray(e, dtype=np.int64).reshape(-1, 2) + offsets[g] for g, e in enumerate(edges)]
        und = np.concatenate(parts) if parts else np.zeros((0, 2), dtype=np.int64)
        loops = np.arange(total, dtype=np.int64)
        src = np.concatenate([und[:, 0], und[:, 1], loops])
        dst = np.concatenate([und[:, 1], und[:, 0], loops])
        order = np.lexsort((dst, src))
        self.sizes = sizes
        self.offsets = offsets
        self.n_graphs = len(sizes)
        self.n_nodes = total
        self.src = src[order]
        self.dst = dst[order]
        self.is_self = self.src == self.dst
        self.graph_of_node = np.repeat(np.arange(len(sizes)), sizes)
        self.seg = Segments(self.src)
        self.src_index = Index(self.src, total)
        self.dst_index = Index(self.dst, total)
        self.node_seg = Segments(self.graph_of_node)
        self._head_cache: dict[int, tuple] = {}

    @classmethod
    def from_graphs(cls, graphs) -> "GraphBatch":
        return cls([g.n for g in graphs], [g.edges for g in graphs])

    @property
    def n_edges(self) -> int:
        return len(self.src)

    def head_layout(self, heads: int):
        """Flattened ``(edge, head)`` layout grouped by ``(src, head)``."""
        if heads not in self._head_cache:
            e = np.arange(self.n_edges)
            m = np.arange(heads)
            key = (self.src[:, None] * heads + m[None, :]).ravel()
            flat = (e[:, None] * heads + m[None, :]).ravel()
            order = np.argsort(key, kind="stable")
            key = key[order]
            self._head_cache[heads] = (flat[order], key, Segments(key))
        return self._head_cache[heads][:2]

    def head_segments(self, heads: int) -> Segments:
        self.head_layout(heads)
        return self._head_cache[heads][2]

    def max_degree(self) -> int:
        return int(np.max(self.seg.sizes)) - 1


@dataclass
class EncoderOutput:
    per_layer_H: list
    per_layer_attn: list
    per_layer_head_attn: list
    fused_H: Tensor
    fused_attn: np.ndarray
    gamma: np.ndarray
    batch: GraphBatch


# ----------------------------------------------------------------- top-k


def _topk_keep(s: np.ndarray, is_self: np.ndarray, seg: Segments, k: int) -> np.ndarray:
    """Keep flags for scores laid out in contiguous (node, head) segments."""
    keep = is_self.copy()
    sizes = seg.sizes
    big = sizes - 1 > k
    if not big.any():
        keep[:] = True
        return keep
    small_rows = ~big[seg.ids]
    keep |= small_rows
    # rank only inside segments whose degree exceeds k
    rows = np.flatnonzero(~small_rows)
    sub_ids = np.cumsum(big) - 1
    sub = Segments(sub_ids[seg.ids[rows]])
    ss = s[rows]
    mag = np.where(is_self[rows], -np.inf, np.abs(ss))
    pos = np.arange(len(rows))
    ids, starts = sub.ids, sub.starts
    for _ in range(k):
        best = np.maximum.reduceat(mag, starts)[ids]
        cand = mag == best
        if np.add.reduceat(cand.astype(np.int64), starts).max() > 1:
            signed = np.where(cand, ss, -np.inf)
            cand &= signed == np.maximum.reduceat(signed, starts)[ids]
            first = np.minimum.reduceat(np.where(cand, pos, len(pos)), starts)[ids]
            cand &= pos == first
        keep[rows[cand]] = True
        mag[cand] = -np.inf
    return keep


def topk_mask(scores: np.ndarray, batch: GraphBatch, k: int) -> np.ndarray:
    """Boolean (E, M) mask keeping each self-loop and the ``k`` largest-magnitude neighbour scores.

    Ties are broken by signed score (descending), then neighbour index (ascending).
    """
    E, M = scores.shape
    flat, key = batch.head_layout(M)
    keep = _topk_keep(scores.ravel()[flat], batch.is_self[flat // M], batch.head_segments(M), k)
    out = np.zeros(E * M, dtype=bool)
    out[flat] = keep
    return out.reshape(E, M)


def topk_sparsify(scores, k: int) -> np.ndarray:
    """Neighbour positions kept for one node: ``k`` largest ``|score|``, ties by (score desc, index asc)."""
    s = np.asarray(scores, dtype=np.float64)
    order = np.lexsort((np.arange(len(s)), -s, -np.abs(s)))
    return np.sort(order[:k])


# ------------------------------------------------------------- parameters


def _uniform(rng, rows, cols):
    bound = 1.0 / np.sqrt(cols)
    return Tensor(rng.uniform(-bound, bound, size=(rows, cols)), requires_grad=True)


def _zeros(*shape):
    return Tensor(np.zeros(shape), requires_grad=True)


def init_layer(cfg: EncoderConfig, rng: np.random.Generator) -> dict:
    d, h = cfg.dim, cfg.hidden
    p = {
        "W_Q": _uniform(rng, d, d), "b_Q": _zeros(d),
        "W_K": _uniform(rng, d, d), "b_K": _zeros(d),
        "W_V": _uniform(rng, d, d), "b_V": _zeros(d),
        "W_O": _uniform(rng, d, d), "b_O": _zeros(d),
        "W_F1": _uniform(rng, h, d), "b_F1": _zeros(h),
        "W_F2": _uniform(rng, d, h), "b_F2": _zeros(d),
    }
    if cfg.norm_mode != "bypass":
        p["ln_scale"] = Tensor(np.ones(d), requires_grad=True)
        p["ln_shift"] = _zeros(d)
    return p


def affine(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    return x @ W.T + b


# ------------------------------------------------------------------ layers


def attention_layer(H: Tensor, batch: GraphBatch, p: dict, cfg: EncoderConfig, *,
                    training: bool = False, rng=None, where: str = "layer"):
    """Localized multi-head attention. Returns ``(Z, per-head attention (E, M))``."""
    M, dh = cfg.heads, cfg.head_dim
    E = batch.n_edges
    Q = affine(H, p["W_Q"], p["b_Q"])
    K = affine(H, p["W_K"], p["b_K"])
    V = affine(H, p["W_V"], p["b_V"])
    Qe = T.take_rows(Q, batch.src_index).reshape(E, M, dh)
    Ke = T.take_rows(K, batch.dst_index).reshape(E, M, dh)
    scores = T.rowwise_dot(Qe, Ke) * (1.0 / np.sqrt(dh))
    if not np.isfinite(scores.data).all():
        bad = int(np.flatnonzero(~np.isfinite(scores.data).all(axis=0))[0])
        raise NonFiniteError(f"non-finite attention scores in {where}, head {bad}")

    if cfg.topk is None:
        alpha = T.segment_softmax(scores, batch.seg)
        attn = alpha.data
        weights = T.dropout(alpha, cfg.dropout, rng, training)
        Ve = T.take_rows(V, batch.dst_index).reshape(E, M, dh)
        msg = (weights.reshape(E, M, 1) * Ve).reshape(E, M * dh)
        agg = T.segment_sum(msg, batch.seg)
    else:
        flat, key = batch.head_layout(M)
        sel = _topk_keep(scores.data.ravel()[flat], batch.is_self[flat // M],
                         batch.head_segments(M), cfg.topk)
        flat, key = flat[sel], key[sel]
        seg = Segments(key)
        s = T.take_rows(scores.reshape(E * M), Index(flat, E * M))
        alpha = T.segment_softmax(s, seg)
        attn = np.zeros(E * M)
        attn[flat] = alpha.data
        attn = attn.reshape(E, M)
        weights = T.dropout(alpha, cfg.dropout, rng, training)
        e, m = np.divmod(flat, M)
        Vflat = V.reshape(batch.n_nodes * M, dh)
        Ve = T.take_rows(Vflat, Index(batch.dst[e] * M + m, batch.n_nodes * M))
        msg = weights.reshape(len(flat), 1) * Ve
        agg = T.segment_sum(msg, seg).reshape(batch.n_nodes, M * dh)
    Z = affine(agg, p["W_O"], p["b_O"])
    return Z, attn


def ffn_block(Z: Tensor, p: dict, cfg: EncoderConfig, *, training: bool = False, rng=None) -> Tensor:
    """``LayerNorm(Z + σ(FFN(Z)))`` in "standard" mode; see ``norm_mode`` for the others."""
    act = T.ACTIVATIONS[cfg.activation]
    hidden = T.dropout(act(affine(Z, p["W_F1"], p["b_F1"])), cfg.dropout, rng, training)
    out = affine(hidden, p["W_F2"], p["b_F2"])
    if cfg.norm_mode == "standard":
        return T.layer_norm(Z + act(out), p["ln_scale"], p["ln_shift"])
    if cfg.norm_mode == "post":
        return T.layer_norm(Z + out, p["ln_scale"], p["ln_shift"])
    return act(out)


class GraphEncoder:
    """Stack of localized transformer layers with an optional input projection."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        if cfg.in_dim is not None and cfg.in_dim != cfg.dim:
            self.params["in.W"] = _uniform(rng, cfg.dim, cfg.in_dim)
            self.params["in.b"] = _zeros(cfg.dim)
        self.layers = []
        for ell in range(cfg.layers):
            layer = init_layer(cfg, rng)
            self.layers.append(layer)
            for name, t in layer.items():
                self.params[f"layer{ell}.{name}"] = t

    def named_params(self) -> dict[str, Tensor]:
        return self.params

    def _rebind(self) -> None:
        for ell, layer in enumerate(self.layers):
            for name in layer:
                layer[name] = self.params[f"layer{ell}.{name}"]

    def project(self, X) -> Tensor:
        X = T.as_tensor(X)
        if "in.W" in self.params:
            return affine(X, self.params["in.W"], self.params["in.b"])
        if X.shape[1] != self.cfg.dim:
            raise ConfigError(f"input dim {X.shape[1]} != model dim {self.cfg.dim} and no projection")
        return X

    def forward(self, X, batch: GraphBatch, gamma=None, *, training: bool = False,
                rng=None, fuse: bool = True) -> EncoderOutput:
        cfg = self.cfg
        if gamma is None:
            gamma = np.zeros(cfg.layers)
            gamma[-1] = 1.0
        gamma = np.asarray(gamma, dtype=np.float64)
        if gamma.shape != (cfg.layers,):
            raise ConfigError(f"depth weights need length {cfg.layers}, got {gamma.shape}")
        H = self.project(X)
        hs, attns, head_attns = [], [], []
        for ell, p in enumerate(self.layers):
            Z, attn = attention_layer(H, batch, p, cfg, training=training, rng=rng,
                                      where=f"layer {ell}")
            H = ffn_block(Z, p, cfg, training=training, rng=rng)
            hs.append(H)
            head_attns.append(attn)
            attns.append(attn.mean(axis=1))
        if fuse:
            fused = hs[0] * float(gamma[0])
            for g, h in zip(gamma[1:], hs[1:]):
                fused = fused + h * float(g)
        else:
            fused = hs[-1]
        fused_attn = np.zeros(batch.n_edges)
        for g, a in zip(gamma, attns):
            fused_attn = fused_attn + g * a
        return EncoderOutput(hs, attns, head_attns, fused, fused_attn, gamma, batch)


def encode(graph, encoder: GraphEncoder, gamma=None) -> EncoderOutput:
    """Encode a single graph in evaluation mode."""
    return encoder.forward(graph.features, GraphBatch.from_graphs([graph]), gamma)


def attention_matrix(edge_values: np.ndarray, batch: GraphBatch) -> np.ndarray:
    """Scatter per-edge values into a dense (n_nodes, n_nodes) matrix."""
    out = np.zeros((batch.n_nodes, batch.n_nodes))
    out[batch.src, batch.dst] = edge_values
    return out
