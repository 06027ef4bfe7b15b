"""End-to-end multi-graph model: encoders, depth fusion, meta-graph, head."""

from __future__ import annotations

import json
import time
from contextlib import contextmanager, nullcontext
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .depth import DepthProbes
from .encoder import EncoderConfig, GraphBatch, GraphEncoder
from .graphs import dumps
from .metagraph import EdgeRule, MetaGraph, Selection, assemble, select_batch, supernode_scores
from .tensor import Index, Segments, Tensor

POOLINGS = ("mean", "max", "concat")
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    graphs: int
    in_dim: int
    classes: int = 2
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    meta_layers: int = 1
    meta_activation: str | None = None
    meta_norm_mode: str | None = None
    meta_depth_fusion: bool = False
    pooling: str = "mean"
    hidden: int = 16
    mlp_activation: str = "relu"
    selection: Selection = field(default_factory=Selection)
    edge_rule: EdgeRule = field(default_factory=EdgeRule)
    no_adaptive_depth: bool = False
    no_supernodes: bool = False
    no_inter_edges: bool = False
    no_intra_edges: bool = False
    no_meta_graph: bool = False
    late_fusion: bool = False
    learn_fusion_weights: bool = False
    share_encoders: bool = False
    floor_gamma: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.graphs < 1 or self.classes < 2 or self.hidden < 1 or self.meta_layers < 1:
            raise ConfigError("graphs, hidden, meta_layers must be >= 1 and classes >= 2")
        if self.pooling not in POOLINGS:
            raise ConfigError(f"pooling must be one of {POOLINGS}")
        meta_flags = (self.no_supernodes or self.no_inter_edges or self.no_intra_edges
                      or self.no_meta_graph)
        if self.late_fusion and meta_flags:
            raise ConfigError("late_fusion builds no meta-graph; meta-graph flags do not apply")
        if self.encoder.in_dim is None:
            self.encoder = EncoderConfig(**{**asdict(self.encoder), "in_dim": self.in_dim})

    @property
    def uses_meta_graph(self) -> bool:
        return not (self.late_fusion or self.no_meta_graph)

    def meta_encoder_config(self) -> EncoderConfig:
        e = self.encoder
        return EncoderConfig(
            layers=self.meta_layers, heads=e.heads, dim=e.dim, in_dim=None, ffn_dim=e.ffn_dim,
            activation=self.meta_activation or e.activation, dropout=e.dropout, topk=e.topk,
            norm_mode=self.meta_norm_mode or e.norm_mode,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["selection"] = asdict(self.selection)
        d["edge_rule"] = asdict(self.edge_rule)
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        doc = dict(doc)
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown model fields: {sorted(unknown)}")
        if isinstance(doc.get("encoder"), dict):
            doc["encoder"] = EncoderConfig(**doc["encoder"])
        if isinstance(doc.get("selection"), dict):
            doc["selection"] = Selection(**doc["selection"])
        if isinstance(doc.get("edge_rule"), dict):
            doc["edge_rule"] = EdgeRule(**doc["edge_rule"])
        return cls(**doc)


class StageTimer:
    """Accumulates wall-clock seconds per named stage."""

    def __init__(self):
        self.totals: dict[str, float] = {}

    @contextmanager
    def stage(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.totals[name] = self.totals.get(name, 0.0) + time.perf_counter() - t0


def _stage(timer, name):
    return timer.stage(name) if timer is not None else nullcontext()


@dataclass
class Prepared:
    """Batched, model-independent view of a list of samples."""

    samples: list
    labels: np.ndarray
    batches: list
    features: list

    @classmethod
    def build(cls, samples) -> "Prepared":
        samples = list(samples)
        n = len(samples[0].graphs)
        batches, feats = [], []
        for i in range(n):
            gs = [s.graphs[i] for s in samples]
            batches.append(GraphBatch.from_graphs(gs))
            feats.append(np.vstack([g.features for g in gs]))
        labels = np.array([s.label for s in samples], dtype=np.int64)
        return cls(samples, labels, batches, feats)

    def __len__(self) -> int:
        return len(self.samples)


@dataclass
class ForwardResult:
    logits: Tensor
    probe_logits: dict
    encodings: list
    meta_graphs: list | None = None
    fallbacks: int = 0

    @property
    def probabilities(self) -> np.ndarray:
        return T.softmax(self.logits.data)


@dataclass
class Prediction:
    probabilities: np.ndarray
    logits: np.ndarray
    meta_graph: MetaGraph | None


def _param(rng, rows, cols):
    bound = 1.0 / np.sqrt(cols)
    return Tensor(rng.uniform(-bound, bound, size=(rows, cols)), requires_grad=True)


def _zeros(n):
    return Tensor(np.zeros(n), requires_grad=True)


def mlp(x: Tensor, W1, b1, W2, b2, activation: str = "relu") -> Tensor:
    act = T.ACTIVATIONS[activation]
    return act(x @ W1.T + b1) @ W2.T + b2


def pool(H: Tensor, seg: Segments, mode: str) -> Tensor:
    if mode == "mean":
        return T.segment_mean(H, seg)
    if mode == "max":
        return T.segment_max(H, seg)
    raise ConfigError(f"pool mode {mode!r} needs per-graph segments; use concat_pool")


def concat_pool(H: Tensor, graph_seg: Segments, samples: int, graphs: int) -> Tensor:
    """Per-(sample, graph) mean pools laid side by side: ``(samples, graphs * d)``."""
    if graph_seg.count != samples * graphs:
        raise T.ContractError("concat pooling needs a non-empty node set for every graph")
    pooled = T.segment_mean(H, graph_seg)
    return pooled.reshape(samples, graphs * H.shape[1])


def pool_restricted(H, rows, mode: str = "mean") -> np.ndarray:
    """Pool a subset of rows of a plain array."""
    rows = np.asarray(rows)
    if rows.size == 0:
        raise T.ContractError("restricted pooling over an empty node set")
    sub = np.asarray(H)[rows]
    return sub.max(axis=0) if mode == "max" else sub.mean(axis=0)


class MGMTModel:
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(7,)))
        n, L, d, C = cfg.graphs, cfg.encoder.layers, cfg.encoder.dim, cfg.classes
        if cfg.share_encoders:
            shared = GraphEncoder(cfg.encoder, rng)
            self.encoders = [shared] * n
        else:
            self.encoders = [GraphEncoder(cfg.encoder, rng) for _ in range(n)]
        self.probes = DepthProbes(n, L, d, C, rng)
        self.head: dict[str, Tensor] = {}
        self.meta = None
        h = cfg.hidden
        if cfg.late_fusion:
            for i in range(n):
                self.head.update({
                    f"late{i}.W1": _param(rng, h, d), f"late{i}.b1": _zeros(h),
                    f"late{i}.W2": _param(rng, C, h), f"late{i}.b2": _zeros(C),
                })
            if cfg.learn_fusion_weights:
                self.head["fusion.logits"] = _zeros(n)
        else:
            if cfg.uses_meta_graph:
                self.meta = GraphEncoder(cfg.meta_encoder_config(), rng)
            width = d * n if (cfg.no_meta_graph or cfg.pooling == "concat") else d
            self.head.update({
                "head.W1": _param(rng, h, width), "head.b1": _zeros(h),
                "head.W2": _param(rng, C, h), "head.b2": _zeros(C),
            })
        self.gamma = np.zeros((n, L))
        self.gamma[:, -1] = 1.0

    # -------------------------------------------------------------- params

    def named_params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        seen: set[int] = set()
        for i, enc in enumerate(self.encoders):
            if id(enc) in seen:
                continue
            seen.add(id(enc))
            out.update({f"enc{i}.{k}": v for k, v in enc.named_params().items()})
        out.update(self.probes.named_params())
        if self.meta is not None:
            out.update({f"meta.{k}": v for k, v in self.meta.named_params().items()})
        out.update(self.head)
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_params().values())

    def snapshot(self) -> dict:
        return {k: v.data.copy() for k, v in self.named_params().items()}

    def load_snapshot(self, snap: dict) -> None:
        params = self.named_params()
        if set(snap) != set(params):
            raise ConfigError("snapshot does not match model parameters")
        for k, v in params.items():
            if v.data.shape != np.shape(snap[k]):
                raise ConfigError(f"parameter {k}: shape {np.shape(snap[k])} != {v.data.shape}")
            v.data = np.array(snap[k], dtype=np.float64)

    def effective_gamma(self) -> np.ndarray:
        L = self.cfg.encoder.layers
        if self.cfg.no_adaptive_depth:
            g = np.zeros((self.cfg.graphs, L))
            g[:, -1] = 1.0
            return g
        return np.maximum(self.gamma, 0.0) if self.cfg.floor_gamma else self.gamma

    def fusion_weights(self) -> np.ndarray:
        n = self.cfg.graphs
        if "fusion.logits" in self.head:
            return T.softmax(self.head["fusion.logits"].data)
        return np.full(n, 1.0 / n)

    # ------------------------------------------------------------- forward

    def encode(self, prep: Prepared, *, training=False, rng=None, timer=None):
        gamma = self.effective_gamma()
        with _stage(timer, "encoders"):
            return [enc.forward(prep.features[i], prep.batches[i], gamma[i], training=training, rng=rng)
                    for i, enc in enumerate(self.encoders)]

    def probe_logits(self, encodings) -> dict:
        out = {}
        for i, enc_out in enumerate(encodings):
            for ell, H in enumerate(enc_out.per_layer_H):
                out[(i, ell)] = self.probes.logits(i, ell, H, enc_out.batch.node_seg)
        return out

    def forward(self, prep: Prepared, *, training: bool = False, rng=None, timer=None,
                record: bool = False, probes: bool = True) -> ForwardResult:
        cfg = self.cfg
        encs = self.encode(prep, training=training, rng=rng, timer=timer)
        plog = self.probe_logits(encs) if probes else {}
        B, n = len(prep), cfg.graphs
        if cfg.late_fusion:
            with _stage(timer, "head"):
                w = self._fusion_tensor()
                logits = None
                for i, e in enumerate(encs):
                    pooled = T.segment_mean(e.fused_H, e.batch.node_seg)
                    part = mlp(pooled, self.head[f"late{i}.W1"], self.head[f"late{i}.b1"],
                               self.head[f"late{i}.W2"], self.head[f"late{i}.b2"], cfg.mlp_activation)
                    term = part * w[i] if isinstance(w[i], Tensor) else part * float(w[i])
                    logits = term if logits is None else logits + term
            return ForwardResult(logits, plog, encs)
        if cfg.no_meta_graph:
            with _stage(timer, "head"):
                pooled = T.concat([T.segment_mean(e.fused_H, e.batch.node_seg) for e in encs], axis=1)
                logits = self._head(pooled)
            return ForwardResult(logits, plog, encs)

        with _stage(timer, "extraction"):
            metas, fallbacks = self.build_meta_graphs(prep, encs)
        with _stage(timer, "meta_graph"):
            H_M, seg_sample, seg_graph = self._meta_forward(encs, metas, prep, training, rng)
        with _stage(timer, "head"):
            if cfg.pooling == "concat":
                pooled = concat_pool(H_M, seg_graph, B, n)
            else:
                pooled = pool(H_M, seg_sample, cfg.pooling)
            logits = self._head(pooled)
        return ForwardResult(logits, plog, encs, metas if record else None, fallbacks)

    def _fusion_tensor(self):
        if "fusion.logits" in self.head:
            z = self.head["fusion.logits"]
            e = T.exp(z - float(z.data.max()))
            w = e / e.sum()
            return [T.take_rows(w, Index([i], self.cfg.graphs)) for i in range(self.cfg.graphs)]
        return list(self.fusion_weights())

    def _head(self, pooled: Tensor) -> Tensor:
        h = self.head
        return mlp(pooled, h["head.W1"], h["head.b1"], h["head.W2"], h["head.b2"], self.cfg.mlp_activation)

    def build_meta_graphs(self, prep: Prepared, encs) -> tuple[list, int]:
        cfg = self.cfg
        keeps, scores, embs = [], [], []
        fallbacks = 0
        for e in encs:
            b = e.batch
            s = supernode_scores(e.fused_attn, b.src, b.is_self, b.n_nodes)
            if cfg.no_supernodes:
                keep = np.ones(b.n_nodes, dtype=bool)
            else:
                keep, fb = select_batch(s, b.offsets, cfg.selection)
                fallbacks += fb
            keeps.append(keep)
            scores.append(s)
            embs.append(e.fused_H.data)
        rule = None if cfg.no_inter_edges else cfg.edge_rule
        prov = {"selection": asdict(cfg.selection), "edge_rule": asdict(cfg.edge_rule),
                "no_supernodes": cfg.no_supernodes, "no_inter_edges": cfg.no_inter_edges,
                "no_intra_edges": cfg.no_intra_edges}
        metas = []
        for k, sample in enumerate(prep.samples):
            sl = [slice(e.batch.offsets[k], e.batch.offsets[k + 1]) for e in encs]
            metas.append(assemble(
                [keeps[i][sl[i]] for i in range(len(encs))],
                [g.edges for g in sample.graphs],
                [embs[i][sl[i]] for i in range(len(encs))],
                [scores[i][sl[i]] for i in range(len(encs))],
                rule, intra=not cfg.no_intra_edges, provenance=prov,
            ))
        return metas, fallbacks

    def _meta_forward(self, encs, metas, prep, training, rng):
        cfg = self.cfg
        bases = np.concatenate([[0], np.cumsum([e.batch.n_nodes for e in encs])])
        rows, sample_ids, graph_ids = [], [], []
        for k, mg in enumerate(metas):
            off = np.array([e.batch.offsets[k] for e in encs])
            rows.append(bases[mg.graph_index] + off[mg.graph_index] + mg.node_index)
            sample_ids.append(np.full(mg.size, k))
            graph_ids.append(k * cfg.graphs + mg.graph_index)
        allH = T.concat([e.fused_H for e in encs], axis=0)
        H0 = T.take_rows(allH, Index(np.concatenate(rows), int(bases[-1])))
        mbatch = GraphBatch([mg.size for mg in metas], [mg.edges for mg in metas])
        L = cfg.meta_layers
        out = self.meta.forward(H0, mbatch, np.full(L, 1.0 / L), training=training, rng=rng,
                                fuse=cfg.meta_depth_fusion)
        return out.fused_H, mbatch.node_seg, Segments(np.concatenate(graph_ids))

    # -------------------------------------------------------------- public

    def predict(self, samples, *, record: bool = True) -> list[Prediction]:
        prep = samples if isinstance(samples, Prepared) else Prepared.build(samples)
        with T.no_grad():
            res = self.forward(prep, record=record, probes=False)
        probs = res.probabilities
        metas = res.meta_graphs or [None] * len(prep)
        return [Prediction(probs[k], res.logits.data[k], metas[k]) for k in range(len(prep))]

    # ---------------------------------------------------------- checkpoint

    def to_dict(self) -> dict:
        return {
            "checkpoint_version": CHECKPOINT_VERSION,
            "config": self.cfg.to_dict(),
            "gamma": self.gamma.tolist(),
            "seed": self.cfg.seed,
            "params": {k: v.data.tolist() for k, v in self.named_params().items()},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MGMTModel":
        if doc.get("checkpoint_version") != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {doc.get('checkpoint_version')!r}")
        model = cls(ModelConfig.from_dict(doc["config"]))
        model.load_snapshot({k: np.array(v, dtype=np.float64) for k, v in doc["params"].items()})
        model.gamma = np.array(doc["gamma"], dtype=np.float64).reshape(model.gamma.shape)
        return model

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "MGMTModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))
