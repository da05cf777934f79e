"""Command line entry point: ``cfintro <command> --config run.json``.

Exit codes: 0 success, 2 invalid config or query, 3 optimization failure,
4 I/O error.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import analysis, checkpoint, datasets, engine, gradcheck
from .datasets import ATTRIBUTE_NAMES, CLASS_NAMES, DatasetConfigError, IdxError
from .engine import (CounterfactualQuery, IdentityGenerator, NoFlipError, OptimizationError,
                     QueryError, VariableSpace)
from .models import (LinearClassifier, ModelSpecError, TrainConfig, train_attribute_editor,
                     train_attribute_predictor, train_classifier, train_latent_generator)

EXIT_OK, EXIT_CONFIG, EXIT_OPTIMIZATION, EXIT_IO = 0, 2, 3, 4

# values that are dicts here are checked key by key; FREE_FORM ones are not
DEFAULTS = {
    "dataset": {
        "kind": "glyphs",          # glyphs | exported | idx
        "seed": 0,
        "n_samples": 10000,
        "n_train": 5000,
        "n_test": 1000,
        "image_size": 16,
        "bias": {"large": 0.70, "small": 0.10},
        "path": None,              # exported: directory written by gen-data
        "train_images": None,      # idx paths
        "train_labels": None,
        "test_images": None,
        "test_labels": None,
    },
    "model": {
        "seed": 0,
        "checkpoint_dir": "checkpoints",
        "classifier": {"hidden": [128], "epochs": 10, "batch": 64, "lr": 1e-3},
        "generator": {"latent_dim": 10, "hidden": [64, 128], "epochs": 30, "batch": 64,
                      "lr": 1e-3},
        "predictor": {"hidden": [128], "epochs": 60, "batch": 64, "lr": 1e-3},
        "editor": {"code_dim": 16, "hidden": [256], "epochs": 60, "batch": 64, "lr": 1e-3,
                   "gamma": 1.0, "code_dropout": 0.5, "soft_targets": 0.25},
        "fixture": None,           # {"weights": [[...]], "bias": [...]}: linear classifier
    },
    "query": {
        "mode": "criticism",
        "space": "latent",         # latent | attribute
        "target_class": None,
        "frozen": [],
        "lambda": engine.DEFAULT_LAMBDA,
        "lambda_lo": 0.0,
        "lambda_hi": 1.0,
        "iterations": 20,
        "max_steps": 2000,
        "step_size": None,
        "threshold": None,
        "seed": 0,
        "indices": None,
        "count": 1,
        "refine_steps": 200,
        "image": None,
        "initial": None,
        "lower": 0.0,
        "upper": 1.0,
    },
    "output": {"directory": "out", "stride": 10},
    "report": {"classes": None, "threshold": 0.5},
    "overrides": {},               # filled in from command-line flags
}
FREE_FORM = {("dataset", "bias"), ("model", "fixture"), ("overrides",)}
MODEL_KINDS = ("classifier", "generator", "predictor", "editor")
CHECKPOINT_KIND = {"classifier": "classifier", "generator": "latent_generator",
                   "predictor": "attribute_predictor", "editor": "attribute_editor"}


class ConfigError(ValueError):
    pass


# -- config ----------------------------------------------------------------------

def _merge(user: dict, defaults: dict, path: tuple) -> dict:
    if not isinstance(user, dict):
        raise ConfigError(f"{'.'.join(path) or 'config'} must be an object")
    out = copy.deepcopy(defaults)
    for key, value in user.items():
        if key not in defaults:
            where = ".".join(path + (key,))
            raise ConfigError(f"unknown config key {where!r}")
        sub = defaults[key]
        if isinstance(sub, dict) and path + (key,) not in FREE_FORM:
            out[key] = _merge(value, sub, path + (key,))
        else:
            out[key] = value
    return out


def resolve_config(user: dict | None, overrides: dict | None = None) -> dict:
    """Defaults merged with ``user``; overrides are applied and recorded."""
    cfg = _merge(user or {}, DEFAULTS, ())
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    for dotted, value in overrides.items():
        section, key = dotted.split(".")
        cfg[section][key] = value
    cfg["overrides"] = {**cfg["overrides"], **overrides}
    return cfg


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as f:
            return json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON ({e})")


def _out_dir(cfg: dict) -> Path:
    d = Path(cfg["output"]["directory"])
    d.mkdir(parents=True, exist_ok=True)
    return d


def _write(path: Path, text: str) -> None:
    with open(path, "w") as f:
        f.write(text)


def echo_config(cfg: dict, out: Path) -> None:
    _write(out / "resolved_config.json", json.dumps(cfg, indent=2, sort_keys=True) + "\n")


# -- data ------------------------------------------------------------------------

def glyph_config(cfg: dict) -> datasets.GlyphDatasetConfig:
    d = cfg["dataset"]
    try:
        return datasets.GlyphDatasetConfig(n_samples=int(d["n_samples"]), seed=int(d["seed"]),
                                           image_size=int(d["image_size"]), bias=dict(d["bias"]))
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e))


def _splits(cfg: dict, n: int) -> tuple[slice, slice]:
    d = cfg["dataset"]
    n_train, n_test = int(d["n_train"]), int(d["n_test"])
    if n_train <= 0 or n_test <= 0 or n_train + n_test > n:
        raise ConfigError(f"n_train={n_train} and n_test={n_test} do not fit {n} samples")
    return slice(0, n_train), slice(n_train, n_train + n_test)


def load_data(cfg: dict) -> tuple[datasets.LabeledImages, datasets.LabeledImages]:
    """``(train, test)`` splits as described by the dataset section."""
    d = cfg["dataset"]
    kind = d["kind"]
    if kind == "glyphs":
        data = datasets.sample_dataset(glyph_config(cfg))
        tr, te = _splits(cfg, len(data))
        return data[tr], data[te]
    if kind == "exported":
        if not d["path"] or not Path(d["path"], datasets.MANIFEST).exists():
            raise ConfigError(f"no exported dataset at {d['path']!r}")
        return (datasets.load_exported(d["path"], "train"),
                datasets.load_exported(d["path"], "test"))
    if kind == "idx":
        keys = ("train_images", "train_labels", "test_images", "test_labels")
        for k in keys:
            if not d[k] or not Path(d[k]).exists():
                raise ConfigError(f"dataset.{k}: file not found ({d[k]!r})")
        return (datasets.load_idx(d["train_images"], d["train_labels"]),
                datasets.load_idx(d["test_images"], d["test_labels"]))
    raise ConfigError(f"unknown dataset kind {kind!r}")


# -- commands ----------------------------------------------------------------------

def cmd_gen_data(cfg: dict) -> int:
    if cfg["dataset"]["kind"] != "glyphs":
        raise ConfigError("gen-data only generates glyph datasets")
    data = datasets.sample_dataset(glyph_config(cfg))
    tr, te = _splits(cfg, len(data))
    splits = ["train" if i < tr.stop else "test" if i < te.stop else "unused"
              for i in range(len(data))]
    out = _out_dir(cfg)
    echo_config(cfg, out)
    datasets.export_dataset(data, out, splits)
    print(f"wrote {len(data)} glyphs to {out}")
    return EXIT_OK


def _train_config(section: dict, seed: int) -> TrainConfig:
    return TrainConfig(epochs=int(section["epochs"]), batch=int(section["batch"]),
                       lr=float(section["lr"]), seed=seed)


def cmd_train(cfg: dict, kind: str) -> int:
    kinds = MODEL_KINDS if kind == "all" else (kind,)
    train, test = load_data(cfg)
    m = cfg["model"]
    seed = int(m["seed"])
    ckpt_dir = Path(m["checkpoint_dir"])
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    out = _out_dir(cfg)
    echo_config(cfg, out)
    needs_attrs = {"predictor", "editor"} & set(kinds)
    if needs_attrs and train.attributes is None:
        raise ConfigError(f"{', '.join(sorted(needs_attrs))} training needs attribute annotations")
    metrics = {}
    predictor = None
    for k in kinds:
        if k == "editor" and predictor is None:
            predictor = _load(cfg, "predictor")
        model = train_model(k, train, test, m[k], seed, predictor)
        if k == "predictor":
            predictor = model
        checkpoint.save_checkpoint(model, ckpt_dir / f"{k}.cfxm",
                                   extra={"train": m[k], "seed": seed})
        metrics[k] = model.metrics
        print(f"{k}: " + ", ".join(f"{key}={_fmt(v)}" for key, v in model.metrics.items()))
    _write(out / "metrics.json", json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def train_model(kind: str, train, test, section: dict, seed: int, predictor=None):
    """Train one model kind from its config section. Each kind offsets the
    seed so the four models draw independent streams."""
    s = section
    names = list(train.attribute_names)
    if kind == "classifier":
        n_classes = int(max(train.labels.max(), test.labels.max())) + 1
        return train_classifier(train.images, train.labels, n_classes, _train_config(s, seed),
                                hidden=tuple(s["hidden"]), test=(test.images, test.labels))
    if kind == "generator":
        return train_latent_generator(train.images, _train_config(s, seed + 1),
                                      latent_dim=int(s["latent_dim"]), hidden=tuple(s["hidden"]),
                                      test=test.images)
    if kind == "predictor":
        return train_attribute_predictor(train.images, train.attributes, names,
                                         _train_config(s, seed + 2), hidden=tuple(s["hidden"]),
                                         test=(test.images, test.attributes))
    if kind == "editor":
        binary = "marker" if "marker" in names else None
        return train_attribute_editor(train.images, train.attributes, names, predictor,
                                      _train_config(s, seed + 3), code_dim=int(s["code_dim"]),
                                      hidden=tuple(s["hidden"]), gamma=float(s["gamma"]),
                                      binary_attribute=binary,
                                      code_dropout=float(s["code_dropout"]),
                                      soft_targets=float(s["soft_targets"]),
                                      test=(test.images, test.attributes))
    raise ConfigError(f"unknown model kind {kind!r}")


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4f}"
    if isinstance(v, list):
        return "[" + ", ".join(_fmt(x) for x in v) + "]"
    return str(v)


def _load(cfg: dict, kind: str):
    path = Path(cfg["model"]["checkpoint_dir"]) / f"{kind}.cfxm"
    if not path.exists():
        raise ConfigError(f"missing checkpoint {path}; run `cfintro train` first")
    return checkpoint.load_checkpoint(path, CHECKPOINT_KIND[kind])


def _fixture_models(cfg: dict):
    fx = cfg["model"]["fixture"]
    if not isinstance(fx, dict) or set(fx) - {"weights", "bias"} or "weights" not in fx:
        raise ConfigError("model.fixture needs 'weights' and optional 'bias'")
    clf = LinearClassifier(fx["weights"], fx.get("bias"))
    q = cfg["query"]
    if q["image"] is None:
        raise ConfigError("fixture queries need query.image")
    image = np.asarray(q["image"], dtype=np.float64)
    if image.size != clf.W.shape[1]:
        raise ConfigError(f"query.image has {image.size} pixels, fixture expects {clf.W.shape[1]}")
    space = VariableSpace.attribute(IdentityGenerator(image.shape), q["lower"], q["upper"])
    return clf, space, image


def _target(q: dict, mode: str, predicted: int, n_classes: int) -> int:
    if mode == "prototype":
        return predicted if q["target_class"] is None else int(q["target_class"])
    if q["target_class"] is not None:
        return int(q["target_class"])
    return (predicted + 1) % n_classes


def build_queries(cfg: dict, mode: str):
    """``(classifier, [(label, query), ...])`` for the query section."""
    q = cfg["query"]
    common = dict(lam=float(q["lambda"]), max_steps=int(q["max_steps"]),
                  step_size=q["step_size"], threshold=q["threshold"], seed=int(q["seed"]))
    if cfg["model"]["fixture"] is not None:
        clf, space, image = _fixture_models(cfg)
        pred = int(np.argmax(clf.probs(image.ravel())))
        initial = image.ravel() if q["initial"] is None else np.asarray(q["initial"], float)
        query = CounterfactualQuery(image, mode, _target(q, mode, pred, clf.num_classes), space,
                                    initial, frozen=space.mask_for(q["frozen"]), **common)
        return clf, [("fixture", query)]

    clf = _load(cfg, "classifier")
    _, test = load_data(cfg)
    if q["space"] == "latent":
        gen = _load(cfg, "generator")
        space = VariableSpace.latent(gen)
    elif q["space"] == "attribute":
        editor = _load(cfg, "editor")
        space = VariableSpace.attribute(editor, q["lower"], q["upper"])
    else:
        raise ConfigError(f"unknown query space {q['space']!r}")
    if q["indices"] is not None:
        indices = [int(i) for i in q["indices"]]
        bad = [i for i in indices if not 0 <= i < len(test)]
        if bad:
            raise ConfigError(f"query indices out of range: {bad}")
    else:
        correct = np.flatnonzero(clf.predict(test.images) == test.labels)
        rng = np.random.default_rng(int(q["seed"]))
        count = min(int(q["count"]), len(correct))
        indices = sorted(rng.choice(correct, size=count, replace=False).tolist())
    frozen = space.mask_for(q["frozen"])
    queries = []
    for i in indices:
        image = test.images[i]
        pred = int(clf.predict(image))
        if space.kind == "latent":
            initial, _ = engine.invert_to_latent(image, space.generator, int(q["refine_steps"]))
        elif test.attributes is not None:
            initial = test.attributes[i]
        else:
            initial = space.generator.predictor.predict(image)
        query = CounterfactualQuery(image, mode, _target(q, mode, pred, clf.num_classes), space,
                                    initial, frozen=frozen, **common)
        queries.append((f"q{i:05d}", query))
    return clf, queries


def _run_all(fn, items, jobs: int):
    if jobs <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _names(query: CounterfactualQuery):
    return query.space.names if query.space.kind == "attribute" else None


def cmd_explain(cfg: dict, mode: str, jobs: int = 1) -> int:
    clf, queries = build_queries(cfg, mode)
    for _, query in queries:
        engine.validate(query, clf)
    out = _out_dir(cfg)
    echo_config(cfg, out)
    stride = int(cfg["output"]["stride"])

    def run(item):
        label, query = item
        try:
            return label, query, engine.optimize(query, clf), None
        except OptimizationError as e:
            return label, query, None, e

    records, failed = [], 0
    for label, query, traj, err in _run_all(run, queries, jobs):
        qdir = out / label
        qdir.mkdir(exist_ok=True)
        if err is not None:
            failed += 1
            records.append({"query": label, "error": str(err)})
            continue
        _write(qdir / "trajectory.jsonl", traj.to_jsonl())
        analysis.export_trajectory_montage(traj, stride, qdir / "montage.pgm")
        rec = analysis.summarize_run(traj, query.initial, _names(query))
        _write(qdir / "summary.json", analysis.format_summary(rec))
        failed += not traj.succeeded
        records.append({"query": label, **rec})
        print(f"{label}: {traj.outcome} after {len(traj.steps) - 1} steps, "
              f"delta={traj.delta:.4f}, p={traj.final.probs[query.target_class]:.4f}")
    _write(out / "summary.jsonl", "".join(json.dumps(r, sort_keys=True) + "\n" for r in records))
    return EXIT_OPTIMIZATION if failed else EXIT_OK


def cmd_minimal(cfg: dict, jobs: int = 1) -> int:
    q = cfg["query"]
    lo, hi = float(q["lambda_lo"]), float(q["lambda_hi"])
    if not 0 <= lo <= hi:
        raise ConfigError(f"need 0 <= lambda_lo <= lambda_hi, got {lo} and {hi}")
    clf, queries = build_queries(cfg, "criticism")
    for _, query in queries:
        engine.validate(query, clf)
    out = _out_dir(cfg)
    echo_config(cfg, out)
    stride = int(cfg["output"]["stride"])

    def run(item):
        label, query = item
        try:
            return label, query, engine.minimal_change_bisect(query, clf, lo, hi,
                                                              int(q["iterations"]))
        except (NoFlipError, OptimizationError) as e:
            return label, query, e

    records, failed = [], 0
    for label, query, res in _run_all(run, queries, jobs):
        qdir = out / label
        qdir.mkdir(exist_ok=True)
        if isinstance(res, OptimizationError):
            failed += 1
            records.append({"query": label, "error": str(res)})
            continue
        rec = analysis.summarize_run(res, query.initial, _names(query))
        if isinstance(res, NoFlipError):
            failed += 1
            print(f"{label}: {res}")
        else:
            _write(qdir / "trajectory.jsonl", res.trajectory.to_jsonl())
            analysis.export_trajectory_montage(res.trajectory, stride, qdir / "montage.pgm")
            print(f"{label}: lambda*={res.lam:.6g}, delta*={res.delta:.4f}, "
                  f"{len(res.sweep)} probes")
        _write(qdir / "summary.json", analysis.format_summary(rec))
        _write(qdir / "sweep.jsonl", "".join(json.dumps(s) + "\n" for s in rec["sweep"]))
        records.append({"query": label, **rec})
    _write(out / "summary.jsonl", "".join(json.dumps(r, sort_keys=True) + "\n" for r in records))
    return EXIT_OPTIMIZATION if failed else EXIT_OK


def cmd_bias_report(cfg: dict) -> int:
    r = cfg["report"]
    d = cfg["dataset"]
    if d["kind"] == "exported":
        if not d["path"] or not Path(d["path"], datasets.MANIFEST).exists():
            raise ConfigError(f"no exported dataset at {d['path']!r}")
        report = analysis.bias_report_from_manifest(d["path"], CLASS_NAMES, r["threshold"])
    elif d["kind"] == "glyphs":
        data = datasets.sample_dataset(glyph_config(cfg))
        report = analysis.bias_report(data.attributes, data.labels, ATTRIBUTE_NAMES,
                                      CLASS_NAMES, r["threshold"])
    else:
        raise ConfigError("bias-report needs an attribute-annotated dataset (glyphs or exported)")
    if r["classes"] is not None:
        classes = list(r["classes"])
        if not classes:
            raise ConfigError("report.classes is empty")
        unknown = set(classes) - set(report.classes)
        if unknown:
            raise ConfigError(f"classes not in the dataset: {sorted(unknown)}")
        report.classes = [c for c in report.classes if c in classes]
    out = _out_dir(cfg)
    echo_config(cfg, out)
    _write(out / "bias_report.csv", report.to_csv())
    _write(out / "bias_report.jsonl", report.to_jsonl())
    print(report.to_csv(), end="")
    return EXIT_OK


def cmd_gradcheck(points: int, composed_points: int, seed: int, out: str | None) -> int:
    rows = gradcheck.run_gradcheck(points, composed_points, seed)
    table = gradcheck.format_table(rows)
    print(table)
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
        _write(Path(out) / "gradcheck.txt", table + "\n")
    return EXIT_OK if all(r.passed for r in rows) else EXIT_OPTIMIZATION


# -- entry point ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cfintro",
                                description="Counterfactual introspection of image classifiers.")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--seed", type=int, help="override the seed this command uses")
        sp.add_argument("--output", help="override output.directory")
        return sp

    with_config("gen-data", "generate and export the glyph dataset")
    sp = with_config("train", "train models and write checkpoints")
    sp.add_argument("--kind", choices=(*MODEL_KINDS, "all"), default="all")
    for name, help_ in (("explain", "criticism query"), ("prototype", "prototype query"),
                        ("minimal", "minimal-change search over lambda")):
        sp = with_config(name, help_)
        sp.add_argument("--lambda", dest="lam", type=float, help="override query.lambda")
        sp.add_argument("--target-class", type=int, help="override query.target_class")
        sp.add_argument("--jobs", type=int, default=1, help="run queries concurrently")
    with_config("bias-report", "per-class attribute frequencies")
    sp = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    sp.add_argument("--points", type=int, default=100)
    sp.add_argument("--composed-points", type=int, default=20)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--output")
    return p


SEED_KEY = {"gen-data": "dataset.seed", "bias-report": "dataset.seed", "train": "model.seed",
            "explain": "query.seed", "prototype": "query.seed", "minimal": "query.seed"}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "gradcheck":
            return cmd_gradcheck(args.points, args.composed_points, args.seed, args.output)
        overrides = {SEED_KEY[args.command]: args.seed, "output.directory": args.output}
        if args.command in ("explain", "prototype", "minimal"):
            overrides["query.lambda"] = args.lam
            overrides["query.target_class"] = args.target_class
        cfg = resolve_config(load_config(args.config), overrides)
        if args.command == "gen-data":
            return cmd_gen_data(cfg)
        if args.command == "train":
            return cmd_train(cfg, args.kind)
        if args.command in ("explain", "prototype"):
            return cmd_explain(cfg, "criticism" if args.command == "explain" else "prototype",
                               args.jobs)
        if args.command == "minimal":
            return cmd_minimal(cfg, args.jobs)
        return cmd_bias_report(cfg)
    except (ConfigError, QueryError, DatasetConfigError, ModelSpecError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (checkpoint.CheckpointError, IdxError, OSError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
