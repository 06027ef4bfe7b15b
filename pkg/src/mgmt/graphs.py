"""Graphs, multi-graph samples, datasets and their JSON file format."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1


class DatasetFormatError(ValueError):
    """Malformed dataset file."""


class SchemaVersionError(DatasetFormatError):
    """Dataset file written under an unsupported schema version."""


class DatasetValidationError(ValueError):
    """A dataset violates a data-model invariant."""


@dataclass
class Graph:
    """Undirected simple graph with a dense node-feature matrix.

    Edges are stored once per pair as ``(u, v)`` with ``u < v``; self-loops are
    never stored (attention adds them at compute time).
    """

    features: np.ndarray
    edges: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))
    node_labels: list[str] | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        self.edges = edges

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @classmethod
    def from_pairs(cls, features, pairs, node_labels=None) -> "Graph":
        """Build from arbitrary undirected pairs; normalises to sorted ``u < v`` without duplicates."""
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        if len(pairs):
            pairs = np.sort(pairs, axis=1)
            pairs = pairs[pairs[:, 0] != pairs[:, 1]]
            pairs = np.unique(pairs, axis=0)
        return cls(features, pairs, node_labels)

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.n, self.n))
        if len(self.edges):
            a[self.edges[:, 0], self.edges[:, 1]] = 1.0
            a[self.edges[:, 1], self.edges[:, 0]] = 1.0
        return a

    def degrees(self) -> np.ndarray:
        return np.bincount(self.edges.reshape(-1), minlength=self.n)

    def permuted(self, perm) -> "Graph":
        """Relabel nodes so that old node ``perm[j]`` becomes new node ``j``."""
        perm = np.asarray(perm)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        labels = [self.node_labels[p] for p in perm] if self.node_labels else None
        return Graph.from_pairs(self.features[perm], inv[self.edges], labels)


@dataclass
class MultiGraphSample:
    graphs: list[Graph]
    label: int


@dataclass
class Dataset:
    samples: list[MultiGraphSample]
    class_count: int
    feature_dim: int
    provenance: dict = field(default_factory=dict)
    seed: int | None = None

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def graphs_per_sample(self) -> int:
        return len(self.samples[0].graphs)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def subset(self, indices, role: str | None = None) -> "Dataset":
        prov = dict(self.provenance)
        if role is not None:
            prov["subset"] = role
        return Dataset([self.samples[i] for i in indices], self.class_count, self.feature_dim,
                       prov, self.seed)


@dataclass(frozen=True)
class Violation:
    path: tuple
    message: str

    def __str__(self) -> str:
        return f"{'/'.join(str(p) for p in self.path)}: {self.message}"


def validate(sample: MultiGraphSample, *, sample_index: int = 0, class_count: int | None = None,
             feature_dim: int | None = None) -> list[Violation]:
    """Collect every invariant violation in ``sample``. Never raises."""
    out: list[Violation] = []
    if not sample.graphs:
        out.append(Violation((sample_index, "graphs"), "sample needs at least one graph"))
    if class_count is not None and not 0 <= sample.label < class_count:
        out.append(Violation((sample_index, "label"), "label out of range"))
    dims = set()
    for gi, g in enumerate(sample.graphs):
        where = (sample_index, gi)
        feats = np.asarray(g.features)
        if feats.ndim != 2 or feats.shape[0] < 1:
            out.append(Violation(where + ("features",), "features must be a non-empty N x d matrix"))
            continue
        dims.add(feats.shape[1])
        if not np.isfinite(feats).all():
            out.append(Violation(where + ("features",), "non-finite feature"))
        e = np.asarray(g.edges).reshape(-1, 2)
        if len(e):
            if np.any(e < 0) or np.any(e >= feats.shape[0]):
                out.append(Violation(where + ("edges",), "endpoint out of range"))
            if np.any(e[:, 0] == e[:, 1]):
                out.append(Violation(where + ("edges",), "explicit self-loop"))
            canon = np.sort(e, axis=1)
            if len(np.unique(canon, axis=0)) != len(canon):
                out.append(Violation(where + ("edges",), "duplicate edge"))
        if g.node_labels is not None and len(g.node_labels) != feats.shape[0]:
            out.append(Violation(where + ("node_labels",), "node label count differs from node count"))
    if len(dims) > 1:
        out.append(Violation((sample_index, "features"), "graphs disagree on feature dimension"))
    if feature_dim is not None and dims and dims != {feature_dim}:
        out.append(Violation((sample_index, "features"), "feature dimension differs from dataset"))
    return out


def validate_dataset(ds: Dataset) -> list[Violation]:
    if not ds.samples:
        return [Violation(("samples",), "non-empty")]
    out = []
    n = len(ds.samples[0].graphs)
    for k, s in enumerate(ds.samples):
        out.extend(validate(s, sample_index=k, class_count=ds.class_count, feature_dim=ds.feature_dim))
        if len(s.graphs) != n:
            out.append(Violation((k, "graphs"), "graph count differs across samples"))
    return out


# ------------------------------------------------------------------ JSON I/O


def _fmt_float(x: float) -> str:
    if not math.isfinite(x):
        raise DatasetValidationError("non-finite number cannot be serialised")
    return format(float(x), ".17g")


def dumps(obj, indent: int | None = None, _level: int = 0) -> str:
    """JSON text with every float written to 17 significant digits.

    Numeric lists (rows of matrices) stay on one line.
    """
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if obj is None:
        return "null"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _fmt_float(obj)
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, (list, tuple)):
        flat = all(not isinstance(v, (list, tuple, dict, np.ndarray)) for v in obj)
        if indent is None or flat:
            return "[" + ",".join(dumps(v) for v in obj) + "]"
        pad = " " * (indent * (_level + 1))
        inner = (",\n").join(pad + dumps(v, indent, _level + 1) for v in obj)
        return "[\n" + inner + "\n" + " " * (indent * _level) + "]"
    if isinstance(obj, dict):
        if indent is None:
            return "{" + ",".join(f"{json.dumps(str(k))}:{dumps(v)}" for k, v in obj.items()) + "}"
        if not obj:
            return "{}"
        pad = " " * (indent * (_level + 1))
        inner = ",\n".join(f"{pad}{json.dumps(str(k))}: {dumps(v, indent, _level + 1)}"
                           for k, v in obj.items())
        return "{\n" + inner + "\n" + " " * (indent * _level) + "}"
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def dataset_to_dict(ds: Dataset) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "class_count": ds.class_count,
        "feature_dim": ds.feature_dim,
        "seed": ds.seed,
        "provenance": ds.provenance,
        "samples": [
            {
                "label": s.label,
                "graphs": [
                    {
                        "n": g.n,
                        "features": g.features,
                        "edges": g.edges,
                        **({"node_labels": g.node_labels} if g.node_labels is not None else {}),
                    }
                    for g in s.graphs
                ],
            }
            for s in ds.samples
        ],
    }


def _require(obj: dict, key: str, where: str):
    if not isinstance(obj, dict) or key not in obj:
        raise DatasetFormatError(f"{where}: missing field {key!r}")
    return obj[key]


def dataset_from_dict(doc: dict) -> Dataset:
    version = _require(doc, "schema_version", "dataset")
    if version != SCHEMA_VERSION:
        raise SchemaVersionError(f"unsupported schema_version {version}; expected {SCHEMA_VERSION}")
    class_count = int(_require(doc, "class_count", "dataset"))
    d = int(_require(doc, "feature_dim", "dataset"))
    samples = []
    for k, s in enumerate(_require(doc, "samples", "dataset")):
        where = f"samples[{k}]"
        label = _require(s, "label", where)
        graphs = []
        for gi, g in enumerate(_require(s, "graphs", where)):
            gw = f"{where}.graphs[{gi}]"
            n = int(_require(g, "n", gw))
            try:
                feats = np.array(_require(g, "features", gw), dtype=np.float64).reshape(n, d)
                edges = np.array(g.get("edges", []), dtype=np.int64).reshape(-1, 2)
            except ValueError as exc:
                raise DatasetFormatError(f"{gw}: {exc}") from exc
            graphs.append(Graph(feats, edges, g.get("node_labels")))
        samples.append(MultiGraphSample(graphs, int(label)))
    ds = Dataset(samples, class_count, d, doc.get("provenance", {}), doc.get("seed"))
    problems = validate_dataset(ds)
    if problems:
        raise DatasetValidationError("; ".join(str(p) for p in problems[:10]))
    return ds


def save_dataset(ds: Dataset, path) -> None:
    problems = validate_dataset(ds)
    if problems:
        raise DatasetValidationError("; ".join(str(p) for p in problems[:10]))
    Path(path).write_text(dumps(dataset_to_dict(ds), indent=1) + "\n")


def load_dataset(path) -> Dataset:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return dataset_from_dict(doc)


# ---------------------------------------------------------------- splitting


def _part_sizes(total: int, ratios) -> list[int]:
    raw = [round(r * total, 9) for r in ratios]
    sizes = [int(math.floor(x)) for x in raw]
    rest = total - sum(sizes)
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[:rest]:
        sizes[i] += 1
    return sizes


def _stratified_order(labels: np.ndarray, rng: np.random.Generator, parts: int) -> np.ndarray:
    """Shuffled ordering whose every prefix is close to label-proportional.

    Falls back to a plain shuffle, with a warning, when some class has fewer
    than ``parts`` members.
    """
    classes, counts = np.unique(labels, return_counts=True)
    if counts.min() < parts:
        warnings.warn(f"class with {counts.min()} members < {parts}; splitting unstratified",
                      stacklevel=3)
        return rng.permutation(len(labels))
    keys, idx = [], []
    for c, n_c in zip(classes, counts):
        members = rng.permutation(np.flatnonzero(labels == c))
        keys.append((np.arange(n_c) + 0.5) / n_c)
        idx.append(members)
    keys = np.concatenate(keys)
    idx = np.concatenate(idx)
    cls = labels[idx]
    return idx[np.lexsort((cls, keys))]


def split(ds: Dataset, ratios=(0.8, 0.1, 0.1), seed: int = 0, stratify: bool = True):
    """Deterministic shuffled partition into ``len(ratios)`` datasets."""
    if not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)}")
    rng = np.random.default_rng(seed)
    labels = ds.labels
    order = _stratified_order(labels, rng, len(ratios)) if stratify else rng.permutation(len(ds))
    sizes = _part_sizes(len(ds), ratios)
    cuts = np.cumsum(sizes)[:-1]
    roles = ["train", "val", "test"] if len(ratios) == 3 else [f"part{i}" for i in range(len(ratios))]
    return tuple(ds.subset(np.sort(part), role) for part, role in zip(np.split(order, cuts), roles))


def kfold(ds: Dataset, k: int = 5, seed: int = 0, stratify: bool = True):
    """``k`` (train, val) pairs whose validation parts partition the dataset."""
    if k < 2:
        raise ValueError("kfold needs k >= 2")
    rng = np.random.default_rng(seed)
    order = _stratified_order(ds.labels, rng, k) if stratify else rng.permutation(len(ds))
    fold_of = np.empty(len(ds), dtype=np.int64)
    fold_of[order] = np.arange(len(ds)) % k
    out = []
    for f in range(k):
        out.append((ds.subset(np.flatnonzero(fold_of != f), "train"),
                    ds.subset(np.flatnonzero(fold_of == f), "val")))
    return out
