"""Supernode/superedge frequency maps and depth-attention dumps."""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .encoder import GraphBatch
from .model import MGMTModel, Prepared
from .tensor import ContractError

FREQ_COLUMNS = ("kind", "graph_i", "node_u", "graph_j", "node_v", "frequency")
DEPTH_COLUMNS = ("layer", "gamma", "u", "v", "attention", "node", "summed_attention")
META_COLUMNS = ("sample_id", "kind", "graph_i", "node_u", "graph_j", "node_v", "value")


def _fmt(x) -> str:
    return repr(float(x))


def _write(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    w.writerows(rows)
    return buf.getvalue()


@dataclass
class FrequencyMap:
    """Selection and edge frequencies keyed by structural identity.

    Each run contributes the fraction of evaluation samples in which an item
    occurred, so frequencies lie in ``[0, 1]`` and the denominator is the run
    count.
    """

    runs: int
    nodes: dict = field(default_factory=dict)
    intra: dict = field(default_factory=dict)
    inter: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def node_frequency(self, i: int, u: int) -> float:
        return self.nodes.get((i, u), 0.0) / self.runs

    def edge_frequency(self, a: tuple, b: tuple) -> float:
        key = (a, b) if a <= b else (b, a)
        table = self.intra if a[0] == b[0] else self.inter
        return table.get(key, 0.0) / self.runs

    def rows(self) -> list[tuple]:
        out = [("supernode", i, u, "", "", _fmt(c / self.runs)) for (i, u), c in sorted(self.nodes.items())]
        for kind, table in (("intra", self.intra), ("inter", self.inter)):
            out += [(kind, a[0], a[1], b[0], b[1], _fmt(c / self.runs)) for (a, b), c in sorted(table.items())]
        return out

    def to_csv(self) -> str:
        return _write(FREQ_COLUMNS, self.rows())


def _check_homogeneous(samples) -> list[int]:
    sizes = [g.n for g in samples[0].graphs]
    for k, s in enumerate(samples):
        if [g.n for g in s.graphs] != sizes:
            raise ContractError(f"sample {k} has node counts {[g.n for g in s.graphs]}, expected {sizes}; "
                                "frequency maps need the same node set per graph index")
    return sizes


def interpret_frequencies(models, samples) -> FrequencyMap:
    """Tally supernode selections and meta-graph edges over models and evaluation samples.

    ``samples`` is one list shared by all models or a list of per-model lists.
    """
    models = list(models)
    if not models:
        raise ContractError("interpret_frequencies needs at least one model")
    if samples and isinstance(samples[0], (list, tuple)):
        per_run = [list(s) for s in samples]
        if len(per_run) != len(models):
            raise ContractError("one evaluation set per model is required")
    else:
        per_run = [list(samples)] * len(models)
    sizes = None
    fmap = FrequencyMap(len(models))
    for model, evalset in zip(models, per_run):
        if not evalset:
            raise ContractError("empty evaluation set")
        s = _check_homogeneous(evalset)
        if sizes is not None and s != sizes:
            raise ContractError("node sets differ between runs")
        sizes = s
        if not model.cfg.uses_meta_graph:
            raise ContractError("frequency maps need a model that builds meta-graphs")
        share = 1.0 / len(evalset)
        nodes, intra, inter = defaultdict(float), defaultdict(float), defaultdict(float)
        for pred in model.predict(evalset):
            mg = pred.meta_graph
            ident = list(zip(mg.graph_index.tolist(), mg.node_index.tolist()))
            for key in ident:
                nodes[key] += share
            for table, edges in ((intra, mg.intra_edges), (inter, mg.inter_edges)):
                for a, b in edges.tolist():
                    x, y = ident[a], ident[b]
                    table[(x, y) if x <= y else (y, x)] += share
        for acc, part in ((fmap.nodes, nodes), (fmap.intra, intra), (fmap.inter, inter)):
            for k, v in part.items():
                acc[k] = acc.get(k, 0.0) + v
    cfg = models[0].cfg
    fmap.metadata = {"runs": len(models), "eval_samples": [len(e) for e in per_run],
                     "selection": [cfg.selection.mode, cfg.selection.value],
                     "edge_rule": [cfg.edge_rule.mode, cfg.edge_rule.value, cfg.edge_rule.metric]}
    return fmap


# ------------------------------------------------------------ depth dumps


def depth_attention_rows(model: MGMTModel, sample, graph_index: int = 0) -> list[tuple]:
    """Per-layer head-averaged attention on one graph of one sample.

    One row per directed edge of the extended edge list (self-loops
    included). ``summed_attention`` is the attention node ``u`` sends to its
    neighbours other than itself at that layer.
    """
    if not 0 <= graph_index < model.cfg.graphs:
        raise IndexError(f"graph index {graph_index} out of range")
    graph = sample.graphs[graph_index]
    batch = GraphBatch.from_graphs([graph])
    with T.no_grad():
        out = model.encoders[graph_index].forward(graph.features, batch, model.effective_gamma()[graph_index])
    rows = []
    for ell, attn in enumerate(out.per_layer_attn):
        summed = np.bincount(batch.src, weights=np.where(batch.is_self, 0.0, attn), minlength=batch.n_nodes)
        g = model.gamma[graph_index, ell]
        for e in range(batch.n_edges):
            u, v = int(batch.src[e]), int(batch.dst[e])
            rows.append((ell + 1, _fmt(g), u, v, _fmt(attn[e]), u, _fmt(summed[u])))
    return rows


def export_depth_attention(model: MGMTModel, samples, sample_index: int, graph_index: int = 0) -> str:
    if not 0 <= sample_index < len(samples):
        raise IndexError(f"sample index {sample_index} out of range (0..{len(samples) - 1})")
    return _write(DEPTH_COLUMNS, depth_attention_rows(model, samples[sample_index], graph_index))


# ------------------------------------------------------------ meta-graphs


def meta_graph_rows(model: MGMTModel, samples, start: int = 0) -> list[tuple]:
    """Supernodes (value = score) and edges (value = similarity, blank for intra) per sample."""
    rows = []
    preds = model.predict(Prepared.build(samples))
    for k, pred in enumerate(preds):
        mg = pred.meta_graph
        sid = start + k
        gi, ni = mg.graph_index.tolist(), mg.node_index.tolist()
        for a in range(mg.size):
            rows.append((sid, "supernode", gi[a], ni[a], "", "", _fmt(mg.scores[a])))
        for a, b in mg.intra_edges.tolist():
            rows.append((sid, "intra", gi[a], ni[a], gi[b], ni[b], ""))
        for (a, b), s in zip(mg.inter_edges.tolist(), mg.inter_sims):
            rows.append((sid, "inter", gi[a], ni[a], gi[b], ni[b], _fmt(s)))
    return rows


def export_meta_graphs(model: MGMTModel, samples) -> str:
    return _write(META_COLUMNS, meta_graph_rows(model, samples))
