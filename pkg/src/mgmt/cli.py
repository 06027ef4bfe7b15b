"""Command-line front end.

Every subcommand writes its artifacts plus ``manifest.json`` to ``--out``.
The manifest's ``config`` block can be passed back through ``--config`` to
rerun with identical outputs.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import platform
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .encoder import EncoderConfig
from .graphs import dumps, load_dataset, save_dataset, split
from .interpret import (export_depth_attention, export_meta_graphs, interpret_frequencies)
from .metagraph import EdgeRule, Selection
from .model import MGMTModel, ModelConfig
from .synth import PRESETS, DatasetFactory, preset
from .trainer import (ABLATIONS, DEFAULT_SPACE, TrainConfig, evaluate, mean_se, random_search,
                      repeat_trials, train)
from .verification import verify_all

MANIFEST_VERSION = 1
DEFAULTS = {
    "data": {"preset": "experiment1", "overrides": {}},
    "model": {},
    "train": {},
    "reps": 10,
    "ratios": [0.8, 0.1, 0.1],
}
ENCODER_FLAGS = ("layers", "heads", "dim", "dropout", "topk", "norm_mode", "activation")
MODEL_FLAGS = ("pooling", "hidden", "meta_layers")
TRAIN_FLAGS = ("epochs", "lr", "patience", "batch_size")
BOOL_FLAGS = ("no_adaptive_depth", "no_supernodes", "no_inter_edges", "no_intra_edges",
              "no_meta_graph", "late_fusion", "floor_gamma", "share_encoders")


class UsageError(Exception):
    pass


# ----------------------------------------------------------------- config


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def resolve_config(args) -> dict:
    """Defaults, then ``--config`` (a config or a manifest), then explicit flags."""
    cfg = json.loads(json.dumps(DEFAULTS))
    if args.config:
        doc = json.loads(Path(args.config).read_text())
        if "manifest_version" in doc:
            doc = doc["config"]
        cfg = _merge(cfg, doc)
    if getattr(args, "preset", None):
        cfg["data"] = {"preset": args.preset, "overrides": cfg["data"].get("overrides", {})}
    if getattr(args, "reps", None) is not None:
        cfg["reps"] = args.reps
    model, enc = cfg["model"], cfg["model"].setdefault("encoder", {})
    for name in ENCODER_FLAGS:
        if getattr(args, name, None) is not None:
            enc[name] = getattr(args, name)
    for name in MODEL_FLAGS:
        if getattr(args, name, None) is not None:
            model[name] = getattr(args, name)
    for name in BOOL_FLAGS:
        if getattr(args, name, False):
            model[name] = True
    if getattr(args, "tau", None) is not None or getattr(args, "selection_mode", None):
        sel = model.setdefault("selection", {})
        sel.update({k: v for k, v in (("mode", args.selection_mode), ("value", args.tau)) if v is not None})
    if any(getattr(args, k, None) is not None for k in ("gamma", "edge_mode", "metric")):
        rule = model.setdefault("edge_rule", {})
        rule.update({k: v for k, v in (("mode", args.edge_mode), ("value", args.gamma),
                                       ("metric", args.metric)) if v is not None})
    for name in TRAIN_FLAGS:
        if getattr(args, name, None) is not None:
            cfg["train"][name] = getattr(args, name)
    cfg["seed"] = args.seed
    return cfg


def data_factory(cfg: dict) -> DatasetFactory:
    data = cfg["data"]
    if "preset" in data:
        setting, doc = preset(data["preset"], **data.get("overrides", {}))
    else:
        setting, doc = data["setting"], dict(data.get("config", {}))
    doc.pop("seed", None)
    return DatasetFactory.from_doc(setting, doc)


def model_config(cfg: dict, graphs: int, in_dim: int) -> ModelConfig:
    doc = dict(cfg["model"])
    enc = EncoderConfig(**doc.pop("encoder", {}))
    if "selection" in doc:
        doc["selection"] = Selection(**doc["selection"])
    if "edge_rule" in doc:
        doc["edge_rule"] = EdgeRule(**doc["edge_rule"])
    return ModelConfig(graphs=graphs, in_dim=in_dim, encoder=enc, **doc)


def _shape(factory: DatasetFactory) -> tuple[int, int]:
    doc = dict(factory.config)
    return doc["graphs_per_sample"], doc["feature_dim"]


# ---------------------------------------------------------------- outputs


def _csv(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    w.writerows(rows)
    return buf.getvalue()


def _num(x) -> str:
    return "" if x is None or (isinstance(x, float) and np.isnan(x)) else repr(float(x))


class Writer:
    """Serializes every artifact write for one run."""

    def __init__(self, out: Path):
        self.out = out
        self.out.mkdir(parents=True, exist_ok=True)
        self.files: list[str] = []

    def text(self, name: str, content: str) -> Path:
        path = self.out / name
        path.write_text(content)
        self.files.append(name)
        return path

    def json(self, name: str, doc) -> Path:
        return self.text(name, dumps(doc) + "\n")


def write_manifest(w: Writer, command: str, cfg: dict, extra: dict | None = None) -> None:
    w.json("manifest.json", {
        "manifest_version": MANIFEST_VERSION,
        "command": command,
        "config": cfg,
        "seed": cfg["seed"],
        "extra": extra or {},
        "outputs": sorted(w.files),
        "versions": {"mgmt": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__},
    })


def _log(args, msg: str) -> None:
    if not args.quiet:
        print(msg, file=sys.stderr)


def _strip_timing(report: dict, timing: bool) -> dict:
    if not timing:
        for e in report["epochs"]:
            e.pop("seconds", None)
            e.pop("stages", None)
    return report


# --------------------------------------------------------------- commands


def cmd_generate(args, cfg, w: Writer) -> int:
    ds = data_factory(cfg)(cfg["seed"])
    save_dataset(ds, w.out / "dataset.json")
    w.files.append("dataset.json")
    _log(args, f"wrote {len(ds.samples)} samples")
    return 0


def _load_or_generate(args, cfg):
    if getattr(args, "data", None):
        return load_dataset(args.data)
    return data_factory(cfg)(cfg["seed"])


def cmd_train(args, cfg, w: Writer) -> int:
    ds = _load_or_generate(args, cfg)
    tr, va, te = split(ds, tuple(cfg["ratios"]), seed=cfg["seed"])
    mc = replace(model_config(cfg, len(ds.samples[0].graphs), ds.feature_dim), seed=cfg["seed"])
    tc = TrainConfig(**{**cfg["train"], "seed": cfg["seed"]})
    model, rep = train(tr, va, mc, tc, te, log=(lambda r: _log(args, f"epoch {r.epoch} val_loss {r.val_loss:.4f}")))
    model.save(w.out / "model.json")
    w.files.append("model.json")
    w.json("report.json", _strip_timing(rep.to_dict(), args.timing))
    w.text("epochs.csv", _csv(("epoch", "train_loss", "train_acc", "val_loss", "val_acc"),
                              [(e.epoch, _num(e.train_loss), _num(e.train_acc), _num(e.val_loss),
                                _num(e.val_acc)) for e in rep.epochs]))
    w.text("gamma.csv", _csv(("epoch", "graph", "layer", "eps", "gamma"),
                             [(g["epoch"], g["graph"], g["layer"], _num(g["eps"]), _num(g["gamma"]))
                              for g in rep.gamma_trace]))
    w.json("metrics.json", {"test_accuracy": rep.test_accuracy, "best_epoch": rep.best_epoch,
                            "best_val_loss": rep.best_val_loss})
    _log(args, f"test accuracy {rep.test_accuracy:.4f}")
    return 0


def cmd_evaluate(args, cfg, w: Writer) -> int:
    model = MGMTModel.load(args.model)
    ds = load_dataset(args.data) if args.data else data_factory(cfg)(cfg["seed"])
    m = model.cfg
    if (ds.graphs_per_sample, ds.feature_dim) != (m.graphs, m.in_dim) or ds.class_count > m.classes:
        raise ValueError(f"dataset has {ds.graphs_per_sample} graphs x {ds.feature_dim} features and "
                         f"{ds.class_count} classes; model expects {m.graphs} x {m.in_dim} and {m.classes}")
    res = evaluate(model, ds)
    C = model.cfg.classes
    w.text("confusion.csv", _csv(["truth"] + [f"pred_{c}" for c in range(C)],
                                 [[c] + res.confusion[c].tolist() for c in range(C)]))
    w.json("metrics.json", {"accuracy": res.accuracy, "loss": res.loss})
    _log(args, f"accuracy {res.accuracy:.4f}")
    return 0


def _repeat(args, cfg, overrides: dict | None = None, on_trial=None):
    factory = data_factory(cfg)
    graphs, dim = _shape(factory)
    mc = model_config(cfg, graphs, dim)
    if overrides:
        mc = replace(mc, **overrides)
    tc = TrainConfig(**cfg["train"])
    return repeat_trials(factory, mc, tc, cfg["reps"], seed=cfg["seed"], ratios=tuple(cfg["ratios"]),
                         on_trial=on_trial, workers=args.threads)


def cmd_repeat(args, cfg, w: Writer) -> int:
    mean, se, accs, reports = _repeat(args, cfg)
    w.text("repeat.csv", _csv(("rep", "test_accuracy", "best_epoch"),
                              [(r, _num(a), rep.best_epoch) for r, (a, rep) in enumerate(zip(accs, reports))]))
    w.text("summary.csv", _csv(("mean_acc", "se", "reps"), [(_num(mean), _num(se), len(accs))]))
    _log(args, f"mean {mean:.4f} se {se:.4f}")
    return 0


def cmd_ablate(args, cfg, w: Writer) -> int:
    variants = args.variants.split(",") if args.variants else list(ABLATIONS)
    unknown = set(variants) - set(ABLATIONS)
    if unknown:
        raise UsageError(f"unknown variants {sorted(unknown)}; choose from {list(ABLATIONS)}")
    rows = []
    for name in variants:
        mean, se, accs, _ = _repeat(args, cfg, ABLATIONS[name])
        rows.append((name, _num(mean), _num(se), len(accs)))
        _log(args, f"{name}: {mean:.4f} ± {se:.4f}")
    w.text("ablate.csv", _csv(("variant", "mean_acc", "se", "reps"), rows))
    return 0


def parse_grid(text: str) -> list[float]:
    """``start:stop:step`` inclusive of ``stop`` (up to rounding) or a comma list."""
    if ":" not in text:
        return [float(v) for v in text.split(",")]
    try:
        start, stop, step = (float(v) for v in text.split(":"))
    except ValueError as exc:
        raise UsageError(f"bad grid {text!r}; expected start:stop:step") from exc
    if step <= 0 or stop < start:
        raise UsageError("grid needs step > 0 and stop >= start")
    count = int(np.floor((stop - start) / step + 1e-9)) + 1
    return [round(start + i * step, 12) for i in range(count)]


def cmd_sweep(args, cfg, w: Writer) -> int:
    rows = []
    for value in parse_grid(args.grid):
        local = json.loads(json.dumps(cfg))
        key = "selection" if args.param == "tau" else "edge_rule"
        local["model"].setdefault(key, {})["value"] = value
        stats = {"nodes": [], "inter": []}

        def on_trial(r, model, rep, te, stats=stats):
            for p in model.predict(te.samples):
                stats["nodes"].append(p.meta_graph.size)
                stats["inter"].append(len(p.meta_graph.inter_edges))

        mean, se, accs, reports = _repeat(args, local, on_trial=on_trial)
        secs = float(np.mean([r.mean_epoch_seconds() for r in reports])) if args.timing else None
        rows.append((args.param, _num(value), _num(mean), _num(se), _num(np.mean(stats["nodes"])),
                     _num(np.mean(stats["inter"])), _num(secs)))
        _log(args, f"{args.param}={value}: {mean:.4f}")
    w.text("sweep.csv", _csv(("param", "value", "mean_acc", "se", "mean_supernodes", "mean_interedges",
                              "mean_epoch_seconds"), rows))
    return 0


def cmd_search(args, cfg, w: Writer) -> int:
    ds = _load_or_generate(args, cfg)
    tr, va, _ = split(ds, tuple(cfg["ratios"]), seed=cfg["seed"])
    mc = model_config(cfg, len(ds.samples[0].graphs), ds.feature_dim)
    tc = TrainConfig(**cfg["train"])
    space = json.loads(Path(args.space).read_text()) if args.space else DEFAULT_SPACE
    best, rows = random_search(space, args.budget, tr, va, mc, tc, seed=cfg["seed"])
    cols = list(rows[0])
    w.text("search.csv", _csv(cols, [[_num(r[c]) if isinstance(r[c], float) else r[c] for c in cols]
                                     for r in rows]))
    w.json("best.json", best)
    _log(args, f"best trial {best['trial']} val_acc {best['val_acc']:.4f}")
    return 0


def cmd_verify(args, cfg, w: Writer) -> int:
    report = verify_all(seed=cfg["seed"])
    w.text("verify.csv", report.to_csv())
    for name, row in report.summary().items():
        _log(args, f"{name}: {row['count'] - row['failures']}/{row['count']} ok, "
                   f"max deviation {row['max_deviation']:.3e}")
    return 0 if report.passed else 1


def cmd_interpret(args, cfg, w: Writer) -> int:
    models, tests = [], []

    def on_trial(r, model, rep, te):
        models.append(model)
        tests.append(te.samples)

    _repeat(args, cfg, on_trial=on_trial)
    fmap = interpret_frequencies(models, tests)
    w.text("frequencies.csv", fmap.to_csv())
    w.text("depth_attention.csv", export_depth_attention(models[0], tests[0], args.sample_index,
                                                         args.graph_index))
    w.text("meta_graphs.csv", export_meta_graphs(models[0], tests[0]))
    w.json("frequency_metadata.json", fmap.metadata)
    return 0


COMMANDS = {
    "generate": cmd_generate, "train": cmd_train, "evaluate": cmd_evaluate, "ablate": cmd_ablate,
    "sweep": cmd_sweep, "search": cmd_search, "repeat": cmd_repeat, "verify": cmd_verify,
    "interpret": cmd_interpret,
}


# ----------------------------------------------------------------- parser


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config or a previous manifest.json")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1, help="worker processes for repetitions")
    p.add_argument("--quiet", action="store_true")


def _experiment(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--reps", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--topk", type=int)
    p.add_argument("--norm-mode", choices=("standard", "post", "bypass"))
    p.add_argument("--activation", choices=("relu", "identity"))
    p.add_argument("--pooling", choices=("mean", "max", "concat"))
    p.add_argument("--hidden", type=int)
    p.add_argument("--meta-layers", type=int)
    p.add_argument("--tau", type=float)
    p.add_argument("--selection-mode", choices=("fixed", "quantile"))
    p.add_argument("--gamma", type=float, help="superedge threshold or fraction")
    p.add_argument("--edge-mode", choices=("fixed", "quantile"))
    p.add_argument("--metric", choices=("cosine", "pearson", "euclidean", "dot"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument("--batch-size", type=int)
    for name in BOOL_FLAGS:
        p.add_argument("--" + name.replace("_", "-"), action="store_true")
    p.add_argument("--timing", action="store_true", help="include wall-clock columns")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mgmt", description="Multi-graph meta-transformer toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("generate", help="generate a synthetic dataset")
    _common(p)
    _experiment(p)
    for name in ("train", "search"):
        p = sub.add_parser(name, help=f"{name} on a dataset file or a generated preset")
        _common(p)
        _experiment(p)
        p.add_argument("--data", help="dataset JSON (default: generate from the preset)")
        if name == "search":
            p.add_argument("--budget", type=int, default=20)
            p.add_argument("--space", help="JSON search space")
    p = sub.add_parser("evaluate", help="evaluate a saved model")
    _common(p)
    _experiment(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data")
    p = sub.add_parser("repeat", help="repeated trials with fresh data")
    _common(p)
    _experiment(p)
    p = sub.add_parser("ablate", help="full model and the five ablations")
    _common(p)
    _experiment(p)
    p.add_argument("--variants", help=f"comma list from {','.join(ABLATIONS)}")
    p = sub.add_parser("sweep", help="threshold sensitivity grid")
    _common(p)
    _experiment(p)
    p.add_argument("--param", choices=("tau", "gamma"), required=True)
    p.add_argument("--grid", required=True, help="start:stop:step or comma list")
    p = sub.add_parser("verify", help="numerical checks of the constructive results")
    _common(p)
    p = sub.add_parser("interpret", help="frequency maps and depth-attention dumps")
    _common(p)
    _experiment(p)
    p.add_argument("--sample-index", type=int, default=0)
    p.add_argument("--graph-index", type=int, default=0)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        cfg = resolve_config(args)
        w = Writer(Path(args.out))
        status = COMMANDS[args.command](args, cfg, w)
        write_manifest(w, args.command, cfg, {k: v for k, v in sorted(vars(args).items())
                                              if k not in ("config", "out", "quiet", "threads")})
    except UsageError as exc:
        parser.error(str(exc))
    except (ValueError, IndexError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return status


if __name__ == "__main__":
    sys.exit(main())
