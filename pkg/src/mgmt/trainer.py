"""Training loop, evaluation, random search and repeated trials."""

from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from .depth import AUX_WEIGHT, boost_layers, predict_classes
from .encoder import EncoderConfig
from .graphs import Dataset, split
from .metagraph import EdgeRule, Selection
from .model import MGMTModel, ModelConfig, Prepared, StageTimer

FULL_BATCH_LIMIT = 256
MINI_BATCH = 32
EVAL_CHUNK = 256
STAGES = ("data_prep", "encoders", "extraction", "meta_graph", "head", "backward")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int | None = None
    lr: float = 5e-3
    patience: int = 20
    aux_weight: float = AUX_WEIGHT
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.patience < 1:
            raise ValueError("epochs and patience must be >= 1")
        if not self.lr >= 0:
            raise ValueError("learning rate must be non-negative")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    seconds: float
    stages: dict


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)
    gamma_trace: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = math.inf
    test_accuracy: float | None = None
    final_gamma: list | None = None

    def mean_epoch_seconds(self) -> float:
        return float(np.mean([e.seconds for e in self.epochs])) if self.epochs else 0.0

    def to_dict(self) -> dict:
        return {
            "epochs": [asdict(e) for e in self.epochs],
            "gamma_trace": self.gamma_trace,
            "best_epoch": self.best_epoch,
            "best_val_loss": self.best_val_loss,
            "test_accuracy": self.test_accuracy,
            "final_gamma": self.final_gamma,
        }


@dataclass
class EvalResult:
    accuracy: float
    confusion: np.ndarray
    loss: float


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def derive_seed(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=key).generate_state(1)[0])


def chunks(samples, size: int = EVAL_CHUNK) -> list[Prepared]:
    samples = list(samples)
    return [Prepared.build(samples[a:a + size]) for a in range(0, len(samples), size)]


# ------------------------------------------------------------------ depth


def compute_depth_weights(model: MGMTModel, preps: list[Prepared]):
    """Γ per (graph index, layer) from probe errors on ``preps``; also returns the traces."""
    cfg = model.cfg
    n, L = cfg.graphs, cfg.encoder.layers
    preds = [[[] for _ in range(L)] for _ in range(n)]
    labels = []
    with T.no_grad():
        for prep in preps:
            encs = model.encode(prep)
            plog = model.probe_logits(encs)
            for (i, ell), lg in plog.items():
                preds[i][ell].append(predict_classes(lg.data))
            labels.append(prep.labels)
    labels = np.concatenate(labels)
    gamma = np.zeros((n, L))
    traces = []
    for i in range(n):
        tr = boost_layers([np.concatenate(p) for p in preds[i]], labels)
        gamma[i] = tr.gamma
        traces.append(tr)
    return gamma, traces


# -------------------------------------------------------------- evaluate


def evaluate(model: MGMTModel, data) -> EvalResult:
    """Accuracy, confusion matrix (rows = truth) and mean cross-entropy."""
    preps = data if isinstance(data, list) and data and isinstance(data[0], Prepared) else chunks(
        data.samples if isinstance(data, Dataset) else data)
    C = model.cfg.classes
    conf = np.zeros((C, C), dtype=np.int64)
    loss_sum, count = 0.0, 0
    with T.no_grad():
        for prep in preps:
            res = model.forward(prep, probes=False)
            pred = predict_classes(res.logits.data)
            np.add.at(conf, (prep.labels, pred), 1)
            loss_sum += float(T.cross_entropy(res.logits, prep.labels).data) * len(prep)
            count += len(prep)
    if count == 0:
        raise T.ContractError("evaluate needs at least one sample")
    return EvalResult(float(np.trace(conf)) / count, conf, loss_sum / count)


def accuracy_from_predictions(pred, labels) -> float:
    pred, labels = np.asarray(pred), np.asarray(labels)
    if labels.size == 0:
        raise T.ContractError("accuracy needs at least one sample")
    return float(np.mean(pred == labels))


# ----------------------------------------------------------------- train


def _batches(samples, cfg: TrainConfig, rng) -> list:
    size = cfg.batch_size or (len(samples) if len(samples) <= FULL_BATCH_LIMIT else MINI_BATCH)
    if size >= len(samples):
        return [np.arange(len(samples))]
    order = rng.permutation(len(samples))
    return [order[a:a + size] for a in range(0, len(order), size)]


def train(train_ds: Dataset, val_ds: Dataset, model_cfg: ModelConfig, cfg: TrainConfig,
          test_ds: Dataset | None = None, *, log=None):
    """Fit a model with Adam and early stopping on validation loss."""
    model = MGMTModel(model_cfg)
    opt = T.Adam(model.parameters(), cfg.lr)
    rng = _rng(cfg.seed, 11)
    train_samples = train_ds.samples
    train_chunks = chunks(train_samples)
    val_chunks = chunks(val_ds.samples)
    full = None
    report = TrainReport()
    best = (model.snapshot(), model.gamma.copy())
    bad = 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        timer = StageTimer()
        if not model_cfg.no_adaptive_depth:
            with timer.stage("depth"):
                model.gamma, traces = compute_depth_weights(model, train_chunks)
            for i, tr in enumerate(traces):
                for ell, (e, g) in enumerate(zip(tr.eps, tr.gamma)):
                    report.gamma_trace.append({"epoch": epoch, "graph": i, "layer": ell + 1,
                                               "eps": e, "gamma": g})
        loss_sum, correct, seen = 0.0, 0, 0
        for idx in _batches(train_samples, cfg, rng):
            with timer.stage("data_prep"):
                if len(idx) == len(train_samples):
                    full = full or Prepared.build(train_samples)
                    prep = full
                else:
                    prep = Prepared.build([train_samples[j] for j in idx])
            res = model.forward(prep, training=True, rng=rng, timer=timer)
            main = T.cross_entropy(res.logits, prep.labels)
            loss = main
            for lg in res.probe_logits.values():
                loss = loss + T.cross_entropy(lg, prep.labels) * cfg.aux_weight
            if not np.isfinite(loss.data):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            with timer.stage("backward"):
                opt.zero_grad()
                loss.backward()
                opt.step()
            loss_sum += float(main.data) * len(prep)
            correct += int(np.sum(predict_classes(res.logits.data) == prep.labels))
            seen += len(prep)
        val = evaluate(model, val_chunks)
        if not np.isfinite(val.loss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        rec = EpochRecord(epoch, loss_sum / seen, correct / seen, val.loss, val.accuracy,
                          time.perf_counter() - t0, dict(timer.totals))
        report.epochs.append(rec)
        if log:
            log(rec)
        if val.loss < report.best_val_loss:
            report.best_val_loss = val.loss
            report.best_epoch = epoch
            best = (model.snapshot(), model.gamma.copy())
            bad = 0
        else:
            bad += 1
            if bad >= cfg.patience:
                break
    model.load_snapshot(best[0])
    model.gamma = best[1]
    report.final_gamma = model.gamma.tolist()
    if test_ds is not None:
        report.test_accuracy = evaluate(model, test_ds).accuracy
    return model, report


# ---------------------------------------------------------------- search

DEFAULT_SPACE = {
    "layers": ("choice", [1, 2, 3, 4]),
    "meta_layers": ("choice", [1, 2]),
    "heads": ("choice", [1, 2, 4]),
    "lr": ("loguniform", 1e-4, 1e-2),
    "dropout": ("uniform", 0.0, 0.5),
    "tau": ("uniform", 0.1, 0.7),
    "gamma": ("uniform", 0.1, 0.8),
}


def sample_config(space: dict, rng: np.random.Generator) -> dict:
    out = {}
    for name in sorted(space):
        kind, *args = space[name]
        if kind == "choice":
            out[name] = args[0][int(rng.integers(len(args[0])))]
        elif kind == "uniform":
            out[name] = float(rng.uniform(args[0], args[1]))
        elif kind == "loguniform":
            out[name] = float(np.exp(rng.uniform(np.log(args[0]), np.log(args[1]))))
        elif kind == "int":
            out[name] = int(rng.integers(args[0], args[1] + 1))
        else:
            raise ValueError(f"unknown search kind {kind!r} for {name}")
    return out


def apply_overrides(model_cfg: ModelConfig, train_cfg: TrainConfig, params: dict):
    """Map flat hyperparameters onto model and training configs."""
    enc = asdict(model_cfg.encoder)
    m = {}
    t = {}
    for k, v in params.items():
        if k in ("layers", "heads", "dropout", "topk", "dim", "activation", "norm_mode", "ffn_dim"):
            enc[k] = v
        elif k == "tau":
            m["selection"] = Selection(model_cfg.selection.mode, v)
        elif k == "gamma":
            rule = model_cfg.edge_rule
            m["edge_rule"] = EdgeRule(rule.mode, v, rule.metric)
        elif k in ("lr", "epochs", "patience", "batch_size", "aux_weight"):
            t[k] = v
        else:
            m[k] = v
    if enc["dim"] % enc["heads"]:
        enc["heads"] = math.gcd(enc["dim"], enc["heads"])
    m["encoder"] = EncoderConfig(**enc)
    return replace(model_cfg, **m), replace(train_cfg, **t)


def random_search(space: dict, budget: int, train_ds: Dataset, val_ds: Dataset,
                  model_cfg: ModelConfig, train_cfg: TrainConfig, seed: int = 0):
    """Uniform random search; trial ``t`` draws from its own substream so results have the prefix property."""
    if budget < 1:
        raise ValueError("budget must be >= 1")
    rows = []
    for t in range(budget):
        params = sample_config(space, _rng(seed, 3, t))
        mc, tc = apply_overrides(model_cfg, train_cfg, params)
        model, rep = train(train_ds, val_ds, mc, tc)
        val = evaluate(model, val_ds)
        rows.append({"trial": t, **params, "val_acc": val.accuracy, "val_loss": val.loss,
                     "best_epoch": rep.best_epoch})
    best = max(range(budget), key=lambda t: (rows[t]["val_acc"], -t))
    return rows[best], rows


# --------------------------------------------------------------- repeats


def mean_se(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        return float(v.mean()), float("nan")
    return float(v.mean()), float(v.std(ddof=1) / np.sqrt(v.size))


ABLATIONS = {
    "full": {},
    "no_adaptive_depth": {"no_adaptive_depth": True},
    "no_supernodes": {"no_supernodes": True},
    "no_inter_edges": {"no_inter_edges": True},
    "no_intra_edges": {"no_intra_edges": True},
    "no_meta_graph_no_adaptive_depth": {"no_meta_graph": True, "no_adaptive_depth": True},
}


def run_trial(make_dataset, model_cfg: ModelConfig, train_cfg: TrainConfig, seed: int, r: int,
              ratios=(0.8, 0.1, 0.1)):
    """Repetition ``r``: fresh data, split, model and training seeds, all derived from ``seed``."""
    ds = make_dataset(derive_seed(seed, r, 0))
    tr, va, te = split(ds, ratios, seed=derive_seed(seed, r, 1))
    mc = replace(model_cfg, seed=derive_seed(seed, r, 2))
    tc = replace(train_cfg, seed=derive_seed(seed, r, 3))
    model, rep = train(tr, va, mc, tc, te)
    return model, rep, te


def _trial_report(args):
    return run_trial(*args)[1]


def repeat_trials(make_dataset, model_cfg: ModelConfig, train_cfg: TrainConfig, reps: int,
                  seed: int = 0, ratios=(0.8, 0.1, 0.1), on_trial=None, workers: int = 1):
    """Fresh data and model per repetition; returns (mean, SE, per-trial accuracies, reports).

    With ``workers > 1`` repetitions run in separate processes (``make_dataset``
    must then be picklable); results do not depend on the worker count.
    """
    if workers > 1 and on_trial is None and reps > 1:
        jobs = [(make_dataset, model_cfg, train_cfg, seed, r, ratios) for r in range(reps)]
        with ProcessPoolExecutor(max_workers=min(workers, reps)) as pool:
            reports = list(pool.map(_trial_report, jobs))
    else:
        reports = []
        for r in range(reps):
            model, rep, te = run_trial(make_dataset, model_cfg, train_cfg, seed, r, ratios)
            reports.append(rep)
            if on_trial:
                on_trial(r, model, rep, te)
    accs = [rep.test_accuracy for rep in reports]
    mean, se = mean_se(accs)
    return mean, se, accs, reports
