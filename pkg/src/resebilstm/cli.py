"""Command-line entry point: ``resebilstm <subcommand> [flags]``.

Subcommands chain through files::

    synth   -> performance text file (+ .manifest.json)
    ingest  -> per-loan series archive directory
    window  -> cohort archive directory (windows, split, scaling, balance)
    train   -> checkpoints, metric table, training logs
    eval    -> metric table for one checkpoint
    rank    -> AvgR table from any metric table (e.g. published values)
    ablate  -> full model and M1-M4 variants on one cohort
    explain -> Shapley attributions, importance ranks, top-50 month counts

Settings come from an optional YAML ``--config`` with one section per
module; flags override it.  Exit status: 0 success, 1 invalid input or
configuration, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
import time
from dataclasses import asdict, fields, replace
from pathlib import Path
from typing import List, Optional

import numpy as np
import yaml

from . import __version__
from . import attribution as at
from . import data as dp
from . import evaluation as ev
from . import layers
from . import models as mdl
from . import synth as sy
from . import training as tr
from .checkpoint import CheckpointError

log = logging.getLogger("resebilstm")

DEFAULT_CONFIG = {
    "seed": 0,
    "synth": {"loans": 5000, "default_rate": 0.05, "signal": 0.8, "min_length": 12,
              "max_length": 60, "long_fraction": 0.9, "start": "201701"},
    "data": {"layout": None, "delimiter": None, "stride": 1, "train_ratio": 0.7,
             "balanced_test": False, "cohort": "synthetic", "strict": False},
    "model": {"architecture": "rese_bilstm", "H": 64, "heads": 4, "d_k": 16, "d_head": 64,
              "dropout": 0.1, "conv_channels": 64, "conv_kernel": 3},
    "train": {"epochs": 30, "batch_size": 64, "learning_rate": 1e-3, "optimizer": "adam",
              "patience": None, "trials": 10, "workers": 1, "threshold": 0.5},
    "explain": {"samples": 20, "permutations": 64, "background": 100},
    "ablate": {"variants": ["M1", "M2", "M3", "M4"], "trials": 10},
}


class ValidationError(Exception):
    """Bad flags, config or inputs (exit status 1)."""


VALIDATION_ERRORS = (ValidationError, dp.ParseError, dp.SplitError, dp.BalancingError, ev.RankError,
                     ev.UndefinedMetricError, mdl.ModelError, layers.ConfigurationError,
                     sy.SynthConfigError, CheckpointError, FileNotFoundError, NotADirectoryError,
                     IsADirectoryError, json.JSONDecodeError, yaml.YAMLError)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message)


# --------------------------------------------------------------------------
# configuration and manifests
# --------------------------------------------------------------------------

def load_config(path: Optional[str]) -> dict:
    cfg = json.loads(json.dumps(DEFAULT_CONFIG))
    if not path:
        return cfg
    with open(path) as fh:
        user = yaml.safe_load(fh) or {}
    if not isinstance(user, dict):
        raise ValidationError(f"{path}: config must be a mapping of sections")
    for key, value in user.items():
        if key not in cfg:
            raise ValidationError(f"{path}: unknown config section {key!r}")
        if isinstance(cfg[key], dict):
            if not isinstance(value, dict):
                raise ValidationError(f"{path}: section {key!r} must be a mapping")
            unknown = set(value) - set(cfg[key])
            if unknown:
                raise ValidationError(f"{path}: unknown key(s) {sorted(unknown)} in section {key!r}")
            cfg[key].update(value)
        else:
            cfg[key] = value
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def write_manifest(path: Path, command: str, cfg: dict, inputs: List[str], outputs: List[str],
                   started: float, **extra) -> None:
    doc = {
        "command": command,
        "argv": sys.argv[1:],
        "config": cfg,
        "config_hash": config_hash(cfg),
        "seed": cfg["seed"],
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "versions": {"resebilstm": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "timing": {"started_unix": round(started, 3), "seconds": round(time.time() - started, 3)},
        **extra,
    }
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")


def _need(path: Optional[str], flag: str, kind: str = "file") -> Path:
    if not path:
        raise ValidationError(f"missing required flag {flag}")
    p = Path(path)
    if kind == "file" and not p.is_file():
        raise ValidationError(f"{flag}: no such file: {p}")
    if kind == "dir" and not p.is_dir():
        raise ValidationError(f"{flag}: no such directory: {p}")
    return p


def _out(args, default: Optional[str] = None) -> Path:
    if not args.out and not default:
        raise ValidationError("missing required flag --out")
    return Path(args.out or default)


def _model_spec(cfg: dict, F: int, architecture: Optional[str] = None) -> mdl.ModelSpec:
    m = dict(cfg["model"])
    if architecture:
        m["architecture"] = architecture
    names = {f.name for f in fields(mdl.ModelSpec)}
    return mdl.ModelSpec(F=F, seed=cfg["seed"], **{k: v for k, v in m.items() if k in names}).validate()


def _train_config(cfg: dict) -> tr.TrainConfig:
    t = cfg["train"]
    return tr.TrainConfig(epochs=int(t["epochs"]), batch_size=int(t["batch_size"]),
                          learning_rate=float(t["learning_rate"]), optimizer=t["optimizer"],
                          patience=t["patience"], seed=int(cfg["seed"]),
                          threshold=float(t["threshold"])).validate()


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_synth(args, cfg) -> int:
    started = time.time()
    s = cfg["synth"]
    config = sy.SynthConfig(n_loans=int(s["loans"]), min_length=int(s["min_length"]),
                            max_length=int(s["max_length"]), long_fraction=float(s["long_fraction"]),
                            default_rate=float(s["default_rate"]), signal=float(s["signal"]),
                            seed=int(cfg["seed"]), start=str(s["start"])).validate()
    out = _out(args)
    out.parent.mkdir(parents=True, exist_ok=True)
    layout = dp.load_layout(cfg["data"]["layout"])
    if cfg["data"]["delimiter"]:
        layout = replace(layout, delimiter=cfg["data"]["delimiter"])
    n = dp.write_performance_file(out, sy.generate(config), layout)
    write_manifest(Path(f"{out}.manifest.json"), "synth", cfg, [], [out], started,
                   records=n, synth=asdict(config))
    print(f"wrote {n} records for {config.n_loans} loans to {out}")
    return 0


def cmd_ingest(args, cfg) -> int:
    started = time.time()
    src = _need(args.input, "--input")
    out = _out(args)
    d = cfg["data"]
    layout = dp.load_layout(d["layout"])
    diag = dp.ParseDiagnostics()
    records = list(dp.parse_performance_file(src, layout, d["delimiter"], bool(d["strict"]), diag))
    series, group_diag = dp.build_series(records, layout)
    summary = dp.cohort_summary(records)
    dp.save_series(out, series, layout, {
        "cohort": d["cohort"],
        "summary": summary,
        "diagnostics": {**asdict(diag), **group_diag},
    })
    write_manifest(out / "run.json", "ingest", cfg, [src], [out / "series.reseb", out / "manifest.json"], started)
    print(f"{summary['loans']} loans, mean length {summary['mean_length']:.3f}, median "
          f"{summary['median_length']:g}, default rate {100 * summary['default_rate']:.3f}%; "
          f"{diag.rejected} rows rejected")
    return 0


def cmd_window(args, cfg) -> int:
    started = time.time()
    src = _need(args.input, "--input", "dir")
    out = _out(args)
    d = cfg["data"]
    series, layout, smanifest = dp.load_series(src)
    ds = dp.build_cohort(series, layout, smanifest.get("cohort", d["cohort"]), seed=int(cfg["seed"]),
                         stride=int(d["stride"]), ratio=float(d["train_ratio"]),
                         balanced_test=bool(d["balanced_test"]),
                         diagnostics=smanifest.get("diagnostics"))
    ds.manifest["summary"] = smanifest.get("summary")
    ds.save(out)
    write_manifest(out / "run.json", "window", cfg, [src], [out / "samples.reseb", out / "manifest.json"], started)
    c = dp.counts_of(ds)
    print(f"train {c['train']['positive']}+{c['train']['negative']} (pool {c['train_pool']['positive']}+"
          f"{c['train_pool']['negative']}), test {c['test']['positive']}+{c['test']['negative']} "
          f"(positive+negative)")
    return 0


def _load_dataset(path) -> dp.CohortDataset:
    return dp.CohortDataset.load(_need(path, "--data", "dir"))


def cmd_train(args, cfg) -> int:
    started = time.time()
    ds = _load_dataset(args.data)
    out = _out(args)
    out.mkdir(parents=True, exist_ok=True)
    spec = _model_spec(cfg, ds.layout.n_features)
    config = _train_config(cfg)
    n = int(cfg["train"]["trials"])
    trials = tr.run_trials(spec, ds, config, n=n, workers=int(cfg["train"]["workers"]),
                           keep_models=True, log_dir=out)
    name = mdl.DISPLAY_NAMES[spec.architecture]
    ev.write_metric_table(out / "metrics.csv", trials.rows(name, ds.cohort))
    outputs = [out / "metrics.csv"]
    for k, model in enumerate(trials.models):
        path = out / f"model_{k}.reseb"
        model.save(path)
        outputs.append(path)
    write_manifest(out / "run.json", "train", cfg, [args.data], outputs, started,
                   spec=asdict(spec), train=asdict(config), trial_seeds=trials.seeds,
                   trial_seconds=[round(s, 3) for s in trials.seconds])
    mean = trials.mean()
    print(f"{name}: " + ", ".join(f"{m} {_show(mean[m])}" for m in ev.METRICS)
          + f" (mean of {n} trials, AUC sd {trials.std('auc'):.4f})")
    return 0


def _show(v) -> str:
    return f"{v:.4f}" if ev.is_defined(v) else "undefined"


def cmd_eval(args, cfg) -> int:
    started = time.time()
    ds = _load_dataset(args.data)
    ckpt = _need(args.checkpoint, "--checkpoint")
    model = mdl.Model.load(ckpt)
    if model.spec.F != ds.layout.n_features:
        raise ValidationError(f"checkpoint expects F={model.spec.F}, dataset has F={ds.layout.n_features}")
    report = tr.evaluate_model(model, ds.test, float(cfg["train"]["threshold"]))
    out = _out(args)
    out.parent.mkdir(parents=True, exist_ok=True)
    row = ev.MetricRow(mdl.DISPLAY_NAMES[model.spec.architecture], ds.cohort, "0", report.values())
    ev.write_metric_table(out, [row])
    write_manifest(Path(f"{out}.manifest.json"), "eval", cfg, [args.data, ckpt], [out], started,
                   confusion={"tp": report.tp, "tn": report.tn, "fp": report.fp, "fn": report.fn})
    print(", ".join(f"{m} {_show(v)}" for m, v in report.values().items()))
    return 0


def cmd_rank(args, cfg) -> int:
    started = time.time()
    src = _need(args.metrics, "--metrics")
    rows = ev.read_metric_table(src)
    tables = ev.rank_tables(rows, args.group)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        ev.write_rank_tables(out, tables, args.group)
        write_manifest(Path(f"{out}.manifest.json"), "rank", cfg, [src], [out], started, group=args.group)
    else:
        ev.write_rank_tables(sys.stdout, tables, args.group)
    return 0


def cmd_ablate(args, cfg) -> int:
    started = time.time()
    ds = _load_dataset(args.data)
    out = _out(args)
    out.mkdir(parents=True, exist_ok=True)
    variants = cfg["ablate"]["variants"]
    if isinstance(variants, str):
        variants = [v.strip() for v in variants.split(",") if v.strip()]
    base = _model_spec(cfg, ds.layout.n_features, "rese_bilstm")
    specs = [("ResE-BiLSTM", base)]
    for v in variants:
        specs.append((mdl.ABLATION_LABELS[v.upper()] if v.upper() in mdl.ABLATION_LABELS else v,
                      mdl.ablation_variant(base, v)))
    config = _train_config(cfg)
    n = int(cfg["ablate"]["trials"])
    rows = []
    means = {}
    for name, spec in specs:
        trials = tr.run_trials(spec, ds, config, n=n, workers=int(cfg["train"]["workers"]))
        rows.extend(trials.rows(name, ds.cohort))
        means[name] = trials.mean()
        log.info("%s done", name)
    ev.write_metric_table(out / "metrics.csv", rows)
    with open(out / "ablation.csv", "w") as fh:
        fh.write(",".join(["metric", *means]) + "\n")
        for m in ev.METRICS:
            fh.write(",".join([m, *(_show(means[name][m]) for name in means)]) + "\n")
    write_manifest(out / "run.json", "ablate", cfg, [args.data], [out / "metrics.csv", out / "ablation.csv"],
                   started, variants=variants, trials=n)
    print((out / "ablation.csv").read_text(), end="")
    return 0


def cmd_explain(args, cfg) -> int:
    started = time.time()
    ds = _load_dataset(args.data)
    ckpt = _need(args.checkpoint, "--checkpoint")
    model = mdl.Model.load(ckpt)
    e = cfg["explain"]
    seed = int(cfg["seed"])
    out = _out(args)
    out.mkdir(parents=True, exist_ok=True)
    bg = at.background_mean(ds.train.X, int(e["background"]), seed)
    idx = explain_selection(ds.test.y, int(e["samples"]), seed)
    X = ds.test.X[idx]
    ids = [f"{ds.test.loan_ids[k]}@{dp.format_period(int(ds.test.starts[k]))}" for k in idx]
    attr = at.explain(model, X, bg, int(e["permutations"]), seed, ds.layout.feature_names, ids,
                      mdl.DISPLAY_NAMES[model.spec.architecture])
    report = at.importance_report(attr)
    at.summary_plot_data(attr, out / "attributions.csv", raw_values=ds.scaler.inverse(X))
    at.write_importance(out / "importance.csv", report)
    at.write_month_counts(out / "month_counts.csv", report)
    at.write_manifest(out / "manifest.json", attr, checkpoint=str(ckpt), background_seed=seed,
                      background_samples=int(e["background"]))
    write_manifest(out / "run.json", "explain", cfg, [args.data, ckpt],
                   [out / "attributions.csv", out / "importance.csv", out / "month_counts.csv"], started)
    for rank, month, feat, imp in report.top(10):
        print(f"{rank:3d}  month {month:2d}  {feat}  {imp:.5f}")
    return 0


def explain_selection(y: np.ndarray, n: int, seed: int) -> np.ndarray:
    """Up to ``n`` test indices, half from each class where possible, seeded."""
    rng = np.random.default_rng(seed)
    pos = np.nonzero(y == 1)[0]
    neg = np.nonzero(y == 0)[0]
    n_pos = min(len(pos), n // 2)
    n_neg = min(len(neg), n - n_pos)
    pick = np.concatenate([rng.choice(pos, n_pos, replace=False), rng.choice(neg, n_neg, replace=False)])
    return np.sort(pick.astype(np.int64))


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

COMMANDS = {
    "synth": cmd_synth, "ingest": cmd_ingest, "window": cmd_window, "train": cmd_train,
    "eval": cmd_eval, "rank": cmd_rank, "ablate": cmd_ablate, "explain": cmd_explain,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="resebilstm", description="ResE-BiLSTM loan-default detection toolkit",
                     allow_abbrev=False)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def common(p):
        p.add_argument("--config", help="YAML config file (sections: synth, data, model, train, explain, ablate)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        return p

    p = common(sub.add_parser("synth", help="generate a synthetic performance file", allow_abbrev=False))
    p.add_argument("--loans", type=int)
    p.add_argument("--default-rate", type=float)
    p.add_argument("--signal", type=float)
    p.add_argument("--delimiter")
    p.add_argument("--layout")

    p = common(sub.add_parser("ingest", help="parse a performance file into per-loan series", allow_abbrev=False))
    p.add_argument("--input")
    p.add_argument("--delimiter")
    p.add_argument("--layout")
    p.add_argument("--cohort")
    p.add_argument("--strict", action="store_true", default=None)

    p = common(sub.add_parser("window", help="window, label, split, scale and balance", allow_abbrev=False))
    p.add_argument("--input")
    p.add_argument("--stride", type=int)
    p.add_argument("--balanced-test", action="store_true", default=None)

    p = common(sub.add_parser("train", help="train repeated trials of one architecture", allow_abbrev=False))
    p.add_argument("--data")
    p.add_argument("--model", choices=sorted(mdl.ARCHITECTURES))
    p.add_argument("--trials", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--workers", type=int)

    p = common(sub.add_parser("eval", help="evaluate a checkpoint on a cohort's test set", allow_abbrev=False))
    p.add_argument("--data")
    p.add_argument("--checkpoint")

    p = common(sub.add_parser("rank", help="AvgR rank aggregation of a metric table", allow_abbrev=False))
    p.add_argument("--metrics")
    p.add_argument("--group", choices=("cohort", "year"), default="cohort")

    p = common(sub.add_parser("ablate", help="full model vs ablation variants M1-M4", allow_abbrev=False))
    p.add_argument("--data")
    p.add_argument("--variants")
    p.add_argument("--trials", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--workers", type=int)

    p = common(sub.add_parser("explain", help="Shapley attribution for a checkpoint", allow_abbrev=False))
    p.add_argument("--data")
    p.add_argument("--checkpoint")
    p.add_argument("--samples", type=int)
    p.add_argument("--permutations", type=int)
    return parser


# flag -> (config section, key)
OVERRIDES = {
    "loans": ("synth", "loans"), "default_rate": ("synth", "default_rate"), "signal": ("synth", "signal"),
    "delimiter": ("data", "delimiter"), "layout": ("data", "layout"), "cohort": ("data", "cohort"),
    "strict": ("data", "strict"), "stride": ("data", "stride"), "balanced_test": ("data", "balanced_test"),
    "model": ("model", "architecture"), "epochs": ("train", "epochs"), "workers": ("train", "workers"),
    "samples": ("explain", "samples"), "permutations": ("explain", "permutations"),
    "variants": ("ablate", "variants"),
}


def resolve_config(args) -> dict:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    for flag, (section, key) in OVERRIDES.items():
        value = getattr(args, flag, None)
        if value is not None:
            cfg[section][key] = value
    trials = getattr(args, "trials", None)
    if trials is not None:
        cfg["ablate" if args.command == "ablate" else "train"]["trials"] = trials
    epochs = getattr(args, "epochs", None)
    if epochs is not None:
        cfg["train"]["epochs"] = epochs
    return cfg


def main(argv: Optional[List[str]] = None) -> int:
    level = os.environ.get("RESEB_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except VALIDATION_ERRORS as exc:
        print(f"resebilstm: error: {_one_line(exc)}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f"resebilstm: runtime error: {type(exc).__name__}: {_one_line(exc)}", file=sys.stderr)
        return 2


def _one_line(exc: BaseException) -> str:
    return " ".join(str(exc).split()) or type(exc).__name__


if __name__ == "__main__":
    sys.exit(main())
