"""Command line experiment runner: ``edl train | analyze | simulate | gen-data | dump``.

Exit codes: 0 success, 1 runtime failure, 2 configuration / usage error.
Outputs are never overwritten unless ``--force`` is given; with ``--force``
identical inputs reproduce identical files.
"""

from __future__ import annotations

import argparse
import glob
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import jsonschema
import numpy as np

from . import analysis
from .datasets import GENERATORS
from .losses import decompose, loss_from_name, metrics
from .models import PRESETS, init_ensemble, load_checkpoint
from .regularizers import RegularizedObjectiveSpec, RegularizerKind
from .simlab import Dirichlet, DiversitySweepSpec, Geometric, LogitNoise, run_sweep, sweep_csv
from .simplex import _atomic_write_text, load_dataset_csv, load_predictions, save_dataset_csv, save_predictions
from .training import (OptimizerConfig, TrainingDiverged, TrainRunConfig, dump_predictions, make_splits,
                       train_joint, write_run_directory)

log = logging.getLogger("edl")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


class ConfigError(Exception):
    pass


CONFIG_SCHEMA = {
    "type": "object",
    "required": ["dataset", "grid", "seeds"],
    "additionalProperties": False,
    "properties": {
        "dataset": {
            "oneOf": [
                {"type": "object", "required": ["csv"], "additionalProperties": False,
                 "properties": {"csv": {"type": "string"},
                                "num_classes": {"type": "integer", "minimum": 2}}},
                {"type": "object", "required": ["generator"], "additionalProperties": False,
                 "properties": {
                     "generator": {"enum": sorted(GENERATORS)},
                     "n": {"type": "integer", "minimum": 1},
                     "classes": {"type": "integer", "minimum": 2},
                     "seed": {"type": "integer", "minimum": 0},
                     "radius": {"type": "number"}, "sigma": {"type": "number", "minimum": 0},
                     "dim": {"type": "integer", "minimum": 2},
                     "turns": {"type": "number", "exclusiveMinimum": 0},
                     "noise": {"type": "number", "minimum": 0}}},
            ]
        },
        "model": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["mlp", "rff"]},
                "preset": {"enum": sorted(PRESETS)},
                "hidden_layers": {"type": "array", "items": {"type": "integer", "minimum": 1}},
                "num_features": {"type": "integer", "minimum": 1}},
        },
        "train": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "num_members": {"type": "integer", "minimum": 1},
                "epochs": {"type": "integer", "minimum": 0},
                "batch_size": {"type": "integer", "minimum": 1},
                "patience": {"type": ["integer", "null"], "minimum": 0},
                "split": {"type": "array", "items": {"type": "number", "minimum": 0},
                          "minItems": 3, "maxItems": 3},
                "loss": {"enum": ["cross_entropy", "squared_error"]},
                "label_smoothing": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "clip_norm": {"anyOf": [{"type": "number", "exclusiveMinimum": 0}, {"type": "null"},
                                        {"const": "auto"}]},
                "data_seed": {"type": "integer", "minimum": 0},
                "optimizer": {
                    "type": "object", "additionalProperties": False,
                    "properties": {
                        "name": {"enum": ["adamw", "sgd"]},
                        "learning_rate": {"type": "number", "minimum": 0},
                        "weight_decay": {"type": "number", "minimum": 0},
                        "momentum": {"type": "number", "minimum": 0},
                        "beta1": {"type": "number"}, "beta2": {"type": "number"},
                        "eps": {"type": "number", "exclusiveMinimum": 0},
                        "schedule": {"enum": ["constant", "step", "cosine"]},
                        "milestones": {"type": "array", "items": {"type": "integer"}},
                        "factor": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                        "warmup_epochs": {"type": "integer", "minimum": 0}}},
            },
        },
        "seeds": {"type": "array", "minItems": 1, "items": {"type": "integer", "minimum": 0}},
        "grid": {
            "type": "array", "minItems": 1,
            "items": {"type": "object", "required": ["regularizer", "gammas"], "additionalProperties": False,
                      "properties": {"regularizer": {"enum": [k.value for k in RegularizerKind]},
                                     "gammas": {"type": "array", "minItems": 1, "items": {"type": "number"},
                                                "contains": {"const": 0}}}},
        },
        "output_dir": {"type": "string"},
    },
}


def validate_config(cfg: dict):
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        lines = [f"  {'/'.join(str(p) for p in e.absolute_path) or '<root>'}: {e.message}" for e in errors]
        raise ConfigError("invalid config:\n" + "\n".join(lines))
    split = cfg.get("train", {}).get("split")
    if split is not None and abs(sum(split) - 1.0) > 1e-9:
        raise ConfigError(f"invalid config:\n  train/split: fractions sum to {sum(split)}, not 1")


def apply_overrides(cfg: dict, assignments) -> dict:
    """``a.b.c=value`` assignments; value is parsed as JSON, else kept as a string."""
    for item in assignments:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not of the form path=value")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = cfg
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r}: {part} is not an object")
        node[parts[-1]] = value
    return cfg


def load_config(path, seed_override=None, overrides=()) -> dict:
    try:
        cfg = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    apply_overrides(cfg, overrides)
    validate_config(cfg)
    env_seed = os.environ.get("EDL_SEED")
    if seed_override is not None:
        cfg["seeds"] = [seed_override]
    elif env_seed:
        try:
            cfg["seeds"] = [int(env_seed)]
        except ValueError as exc:
            raise ConfigError(f"EDL_SEED must be an integer, got {env_seed!r}") from exc
    return cfg


def build_dataset(spec: dict, base_dir=Path(".")):
    if "csv" in spec:
        path = Path(spec["csv"])
        if not path.is_absolute():
            path = base_dir / path
        return load_dataset_csv(path, spec.get("num_classes", 0))
    params = {k: v for k, v in spec.items() if k != "generator"}
    if "classes" in params:
        params["num_classes"] = params.pop("classes")
    return GENERATORS[spec["generator"]](**params)


def build_run_config(cfg: dict, regularizer: str, gamma: float, seed: int) -> TrainRunConfig:
    t = cfg.get("train", {})
    loss = loss_from_name(t.get("loss", "cross_entropy"), t.get("label_smoothing", 0.0))
    return TrainRunConfig(
        objective=RegularizedObjectiveSpec(loss, regularizer, float(gamma)),
        num_members=t.get("num_members", 4),
        epochs=t.get("epochs", 100),
        batch_size=t.get("batch_size", 128),
        seed=seed,
        patience=t.get("patience", 10),
        split=tuple(t.get("split", (0.6, 0.2, 0.2))),
        optimizer=OptimizerConfig(**t.get("optimizer", {})),
        clip_norm=t.get("clip_norm", "auto"),
    )


def cell_dir(out: Path, regularizer, gamma, seed) -> Path:
    return out / regularizer / f"gamma_{float(gamma):g}" / f"seed_{seed}"


def _run_cell(job):
    cfg, base_dir, regularizer, gamma, seed, run_dir = job
    import warnings
    warnings.simplefilter("ignore")
    dataset = build_dataset(cfg["dataset"], Path(base_dir))
    run_cfg = build_run_config(cfg, regularizer, gamma, seed)
    splits = make_splits(dataset, run_cfg.split, cfg.get("train", {}).get("data_seed", 0))
    m = cfg.get("model", {})
    hidden = tuple(m.get("hidden_layers", PRESETS[m.get("preset", "smaller")]))
    num_features = m.get("num_features", 256) if m.get("kind", "mlp") == "rff" else None
    model = init_ensemble(dataset.num_features, dataset.num_classes, run_cfg.num_members, seed, hidden,
                          num_features=num_features)
    tag = f"{m.get('kind', 'mlp')}:{m.get('preset', 'custom') if num_features is None else num_features}"
    try:
        trained = train_joint(model, splits, run_cfg)
    except TrainingDiverged as exc:
        write_run_directory(exc.result, run_dir, tag=tag, extra_config=cfg)
        return str(run_dir), f"diverged: {exc}"
    write_run_directory(trained, run_dir, tag=tag, extra_config=cfg)
    return str(run_dir), None


def cmd_train(args) -> int:
    overrides = list(args.set)
    for flag, key in TRAIN_FLAGS:
        value = getattr(args, flag)
        if value is not None:
            overrides.append(f"{key}={json.dumps(value)}")
    cfg = load_config(args.config, args.seed, overrides)
    out = Path(args.out or cfg.get("output_dir") or "runs")
    base_dir = str(Path(args.config).resolve().parent)
    build_dataset(cfg["dataset"], Path(base_dir))  # fail fast on unreadable data
    jobs = []
    for cell in cfg["grid"]:
        for gamma in cell["gammas"]:
            for seed in cfg["seeds"]:
                jobs.append((cfg, base_dir, cell["regularizer"], gamma, seed,
                             cell_dir(out, cell["regularizer"], gamma, seed)))
    existing = [str(j[-1]) for j in jobs if j[-1].exists()]
    if existing and not args.force:
        print(f"error: {len(existing)} run directories already exist (e.g. {existing[0]}); "
              "use --force or a new output directory", file=sys.stderr)
        return EXIT_RUNTIME
    failures = []
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            results = list(pool.map(_safe_cell, jobs))
    else:
        results = [_safe_cell(j) for j in jobs]
    for run_dir, err in results:
        if err:
            failures.append((run_dir, err))
        else:
            log.info("finished %s", run_dir)
    print(f"{len(jobs) - len(failures)}/{len(jobs)} runs finished in {out}")
    for run_dir, err in failures:
        print(f"FAILED {run_dir}: {err}", file=sys.stderr)
    return EXIT_RUNTIME if failures else EXIT_OK


def _safe_cell(job):
    try:
        return _run_cell(job)
    except Exception as exc:  # reported per cell, the sweep goes on
        return str(job[-1]), f"{type(exc).__name__}: {exc}"


def _collect_dumps(pattern, split):
    paths = []
    for p in sorted(glob.glob(pattern, recursive=True)):
        p = Path(p)
        if p.is_dir():
            paths += sorted(p.rglob(f"predictions_{split}.csv"))
        elif p.suffix == ".csv":
            paths.append(p)
    runs = []
    for p in paths:
        preds, meta = load_predictions(p)
        meta["path"] = str(p)
        runs.append((meta, preds))
    return runs


def _check_same_data(runs):
    ref = runs[0][1]
    for meta, preds in runs[1:]:
        if preds.probs.shape[1:] != ref.probs.shape[1:] or not np.array_equal(preds.labels, ref.labels):
            raise ConfigError(f"{meta['path']} was produced on a different dataset than {runs[0][0]['path']}")


def _ensure_writable(paths, force):
    clash = [str(p) for p in paths if Path(p).exists()]
    if clash and not force:
        raise FileExistsError(f"{clash[0]} exists; pass --force to overwrite")


def cmd_analyze(args) -> int:
    runs = _collect_dumps(args.runs, args.split)
    if not runs:
        raise ConfigError(f"no prediction dumps match {args.runs!r}")
    out = Path(args.out)
    if args.kind != "pool":
        _check_same_data(runs)

    if args.kind == "summary":
        records = [{"regularizer": m.get("regularizer", ""), "gamma": m.get("gamma", 0.0),
                    "seed": m.get("seed"), "metrics": {**metrics(p), **decompose(
                        loss_from_name("cross_entropy"), p).to_dict()}} for m, p in runs]
        if not any(float(r["gamma"]) == 0 for r in records):
            raise ConfigError("summary needs gamma = 0 baseline runs")
        _ensure_writable([out / "summary.json", out / "summary.csv"], args.force)
        result = {name: analysis.sweep_summary(records, name).to_dict()
                  for name in ("accuracy", "nll", "brier", "ece")}
        analysis.write_json(out / "summary.json", {"primary_metric": args.metric, **result})
        analysis.write_report(out / "summary.csv", analysis.sweep_summary(records, args.metric).to_csv())
        print(f"wrote {out / 'summary.json'}")

    elif args.kind == "decompose":
        rows = analysis.decomposition_scatter(runs)
        _ensure_writable([out / "decomposition_scatter.csv"], args.force)
        analysis.write_report(out / "decomposition_scatter.csv",
                              analysis.rows_to_csv(rows, analysis.SCATTER_COLUMNS))
        print(f"wrote {out / 'decomposition_scatter.csv'} ({len(rows)} rows)")

    elif args.kind == "counterfactual":
        groups = {}
        for meta, preds in runs:
            groups.setdefault((meta.get("regularizer", ""), meta.get("seed")), {})[float(meta.get("gamma", 0))] = preds
        written = []
        for (reg, seed), by_gamma in sorted(groups.items(), key=lambda kv: (kv[0][0], str(kv[0][1]))):
            if 0.0 not in by_gamma:
                raise ConfigError(f"regularizer {reg!r}, seed {seed}: no gamma = 0 baseline run")
            rep = analysis.counterfactual_analysis(by_gamma[0.0], {g: p for g, p in by_gamma.items() if g <= 0})
            path = out / f"counterfactual_{reg}_seed{seed}.csv"
            _ensure_writable([path], args.force)
            analysis.write_report(path, rep.to_csv())
            written.append({"regularizer": reg, "seed": seed, "path": str(path),
                            "fits": {repr(g): {"intercept": f.intercept, "slope": f.slope,
                                               "degenerate": f.degenerate}
                                     for g, f in rep.fits.items()}})
        analysis.write_json(out / "counterfactual.json", written)
        print(f"wrote {len(written)} counterfactual reports to {out}")

    elif args.kind == "pool":
        entries = [(m.get("tag") or m["path"], p) for m, p in runs]
        spec = analysis.PoolSpec(entries, args.ensemble_size, args.num_ensembles, args.mode)
        ensembles = analysis.assemble_from_pool(spec, args.seed)
        rows = []
        for i, ens in enumerate(ensembles):
            rep = decompose(loss_from_name("cross_entropy"), ens)
            rows.append({"ensemble": i, "mode": args.mode, **rep.to_dict(), **metrics(ens)})
        _ensure_writable([out / "pool.csv"], args.force)
        analysis.write_report(out / "pool.csv", analysis.rows_to_csv(rows, list(rows[0])))
        print(f"wrote {out / 'pool.csv'} ({len(rows)} ensembles)")
    return EXIT_OK


def parse_grid(text: str):
    """``a:b:n`` for n evenly spaced points, or a comma separated list."""
    if ":" in text:
        a, b, n = text.split(":")
        return tuple(np.linspace(float(a), float(b), int(n)))
    return tuple(float(v) for v in text.split(","))


def cmd_simulate(args) -> int:
    if args.mechanism == "geometric":
        mech = Geometric()
        if args.members < 3:
            print(f"note: geometric mechanism with M={args.members} uses e_0..e_{args.members - 1}",
                  file=sys.stderr)
    elif args.mechanism == "logit":
        mech = LogitNoise(args.logit_scale)
    else:
        mech = Dirichlet(args.concentration_scale, anchored=not args.unanchored)
    try:
        spec = DiversitySweepSpec(mech, parse_grid(args.s_grid), args.members, args.classes,
                                  num_samples=args.samples)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    rows = run_sweep(spec, args.seed)
    text = sweep_csv(rows, mech.name, args.seed)
    if args.out:
        _ensure_writable([args.out], args.force)
        _atomic_write_text(Path(args.out), text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_gen_data(args) -> int:
    params = {"n": args.n, "num_classes": args.classes, "seed": args.seed}
    if args.generator == "gaussian_mixture":
        params.update(radius=args.radius, sigma=args.sigma, dim=args.dim)
    else:
        params.update(turns=args.turns, noise=args.noise)
    dataset = GENERATORS[args.generator](**params)
    _ensure_writable([args.out], args.force)
    save_dataset_csv(dataset, args.out)
    print(f"wrote {len(dataset)} rows to {args.out}")
    return EXIT_OK


def cmd_dump(args) -> int:
    model = load_checkpoint(args.checkpoint)
    dataset = load_dataset_csv(args.data, model.arch.num_classes)
    _ensure_writable([args.out], args.force)
    meta = {k: v for k, v in model.meta.items() if k not in ("tag",)}
    dump_predictions(model, dataset, args.out, tag=args.tag or model.meta.get("tag", ""), **meta)
    print(f"wrote predictions for {len(dataset)} points to {args.out}")
    return EXIT_OK


# shortcut flag -> config path
TRAIN_FLAGS = [("epochs", "train.epochs"), ("members", "train.num_members"),
               ("batch_size", "train.batch_size"), ("patience", "train.patience"),
               ("lr", "train.optimizer.learning_rate"), ("weight_decay", "train.optimizer.weight_decay"),
               ("optimizer", "train.optimizer.name"), ("schedule", "train.optimizer.schedule"),
               ("loss", "train.loss"), ("label_smoothing", "train.label_smoothing"),
               ("data_seed", "train.data_seed"), ("preset", "model.preset")]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="edl", description="Diversity-regularized ensemble experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run every (regularizer, gamma, seed) cell of a JSON config")
    t.add_argument("config", help="experiment config (JSON)")
    t.add_argument("--out", help="output directory (overrides output_dir in the config)")
    t.add_argument("--seed", type=int, help="run only this seed (overrides config and EDL_SEED)")
    t.add_argument("--jobs", type=int, default=1, help="worker processes for grid cells")
    t.add_argument("--force", action="store_true", help="overwrite existing run directories")
    t.add_argument("--set", action="append", default=[], metavar="PATH=VALUE",
                   help="override any config field, e.g. train.optimizer.learning_rate=1e-3 (repeatable)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--members", type=int, help="ensemble size")
    t.add_argument("--batch-size", type=int)
    t.add_argument("--patience", type=int)
    t.add_argument("--lr", type=float, help="learning rate")
    t.add_argument("--weight-decay", type=float)
    t.add_argument("--optimizer", choices=["adamw", "sgd"])
    t.add_argument("--schedule", choices=["constant", "step", "cosine"])
    t.add_argument("--loss", choices=["cross_entropy", "squared_error"])
    t.add_argument("--label-smoothing", type=float)
    t.add_argument("--data-seed", type=int, help="seed of the train/val/test split")
    t.add_argument("--preset", choices=sorted(PRESETS), help="MLP width preset")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("analyze", help="analyse prediction dumps of finished runs")
    a.add_argument("--runs", required=True, help="glob of run directories or prediction CSVs")
    a.add_argument("--kind", required=True, choices=["summary", "counterfactual", "decompose", "pool"])
    a.add_argument("--out", required=True, help="report directory")
    a.add_argument("--split", default="test", choices=["train", "val", "test"])
    a.add_argument("--metric", default="accuracy", choices=["accuracy", "nll", "brier", "ece"])
    a.add_argument("--mode", default="homogeneous", choices=["homogeneous", "heterogeneous"])
    a.add_argument("--ensemble-size", type=int, default=4)
    a.add_argument("--num-ensembles", type=int, default=20)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--force", action="store_true", help="overwrite existing reports")
    a.set_defaults(func=cmd_analyze)

    s = sub.add_parser("simulate", help="toy diversity sweep on a single perfect prediction")
    s.add_argument("--mechanism", required=True, choices=["geometric", "logit", "dirichlet"])
    s.add_argument("--s-grid", default="0:1:21", help="'start:stop:count' or comma list")
    s.add_argument("--samples", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--members", type=int, default=3)
    s.add_argument("--classes", type=int, default=3)
    s.add_argument("--logit-scale", type=float, default=10.0)
    s.add_argument("--concentration-scale", type=float, default=0.1)
    s.add_argument("--unanchored", action="store_true",
                   help="Dirichlet: use scale*[s, (1-s)/(C-1), ...] (perfect prediction at s=1)")
    s.add_argument("--out", help="CSV path (stdout if omitted)")
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_simulate)

    g = sub.add_parser("gen-data", help="write a seeded synthetic dataset as CSV")
    g.add_argument("generator", choices=sorted(GENERATORS))
    g.add_argument("--n", type=int, default=1000)
    g.add_argument("--classes", type=int, default=2)
    g.add_argument("--radius", type=float, default=1.0)
    g.add_argument("--sigma", type=float, default=0.5)
    g.add_argument("--dim", type=int, default=2)
    g.add_argument("--turns", type=float, default=1.5)
    g.add_argument("--noise", type=float, default=0.1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    d = sub.add_parser("dump", help="re-export predictions of a saved checkpoint")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--data", required=True, help="dataset CSV")
    d.add_argument("--out", required=True, help="prediction CSV path")
    d.add_argument("--tag", default="")
    d.add_argument("--force", action="store_true")
    d.set_defaults(func=cmd_dump)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
