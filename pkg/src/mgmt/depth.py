"""Boosting-style layer confidences.

Each (graph index, layer) pair owns a linear probe on the mean-pooled layer
embedding. Layers are scored sequentially: the β-weighted probe error gives a
confidence Γ, and misclassified samples are up-weighted before the next
layer is scored.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ContractError, Tensor

EPS_CLIP = 1e-3
AUX_WEIGHT = 0.1


def layer_error(predictions, labels, beta) -> float:
    """β-weighted misclassification rate clipped to ``[EPS_CLIP, 1 - EPS_CLIP]``."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    beta = np.asarray(beta, dtype=np.float64)
    if labels.size == 0:
        raise ContractError("layer_error needs at least one sample")
    eps = float(np.sum(beta * (predictions != labels)))
    return float(np.clip(eps, EPS_CLIP, 1.0 - EPS_CLIP))


def confidence(eps: float) -> float:
    """``Γ = ½ log((1 - ε) / ε)``."""
    if not 0.0 < eps < 1.0:
        raise ContractError(f"confidence needs eps in (0, 1), got {eps}")
    return 0.5 * float(np.log((1.0 - eps) / eps))


def update_weights(beta, wrong, gamma: float) -> np.ndarray:
    """``β' ∝ β · exp(1{wrong} · Γ)``, renormalized."""
    beta = np.asarray(beta, dtype=np.float64)
    new = beta * np.exp(np.asarray(wrong, dtype=np.float64) * gamma)
    total = new.sum()
    if not total > 0 or not np.isfinite(total):
        raise ContractError("sample weights collapsed to zero")
    return new / total


@dataclass
class DepthTrace:
    """Per-layer errors, confidences and the weights each layer was scored with."""

    eps: list = field(default_factory=list)
    gamma: list = field(default_factory=list)
    betas: list = field(default_factory=list)


def boost_layers(predictions_per_layer, labels) -> DepthTrace:
    """Sequential scoring over layers starting from uniform β."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ContractError("boost_layers needs at least one sample")
    beta = np.full(labels.size, 1.0 / labels.size)
    trace = DepthTrace()
    for preds in predictions_per_layer:
        preds = np.asarray(preds)
        eps = layer_error(preds, labels, beta)
        g = confidence(eps)
        trace.betas.append(beta)
        trace.eps.append(eps)
        trace.gamma.append(g)
        beta = update_weights(beta, preds != labels, g)
    return trace


class DepthProbes:
    """Affine probes ``d -> classes`` for every (graph index, layer)."""

    def __init__(self, graphs: int, layers: int, dim: int, classes: int, rng: np.random.Generator):
        self.graphs, self.layers, self.classes = graphs, layers, classes
        bound = 1.0 / np.sqrt(dim)
        self.params: dict[str, Tensor] = {}
        for i in range(graphs):
            for ell in range(layers):
                self.params[f"probe{i}.{ell}.W"] = Tensor(
                    rng.uniform(-bound, bound, size=(classes, dim)), requires_grad=True)
                self.params[f"probe{i}.{ell}.b"] = Tensor(np.zeros(classes), requires_grad=True)

    def named_params(self) -> dict[str, Tensor]:
        return self.params

    def logits(self, i: int, ell: int, H: Tensor, node_seg) -> Tensor:
        pooled = T.segment_mean(H, node_seg)
        return pooled @ self.params[f"probe{i}.{ell}.W"].T + self.params[f"probe{i}.{ell}.b"]


def pooled_probe(H, W, b) -> np.ndarray:
    """Logits of an affine probe applied to the row-mean of ``H``."""
    H = np.asarray(H, dtype=np.float64)
    return np.asarray(W) @ H.mean(axis=0) + np.asarray(b)


def predict_classes(logits: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ties resolve to the lowest class index."""
    return np.argmax(logits, axis=-1)
