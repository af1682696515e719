"""Batch experiment harness: gen-data, estimate-risk, learn, hmm-risk.

Each run reads a JSON config, writes tidy CSV (17 significant digits) plus a
manifest echoing the fully resolved config. A manifest can be passed back as
``--config`` to rerun the same experiment.

Exit codes: 0 success, 1 usage or input error, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np

from . import __version__
from .data import (MediatedGenerator, MultiViewDataset, MultiViewGenerator, dimming_factor,
                   gen_hmm_sequences, load_dataset, load_idx, load_sequences, patchwork_dataset,
                   save_dataset, save_sequences, synthetic_digits)
from .decomposition import DecompositionConfig
from .errors import InputError, MvRiskError, NumericError
from .hmm import HmmModel, hmm_risk, labeled_inner_risk, labeled_position_losses
from .learning import LearnConfig, labeled_constrained_fit, learn
from .models import build_builtin_model, load_model, model_from_dict, save_model
from .risk import estimate_risk, labeled_risk

log = logging.getLogger("mvrisk")

RISK_COLUMNS = ["a", "seed", "variant", "R_hat", "R_labeled_oracle", "validation_baseline",
                "entropy_baseline", "lambda", "pi_min", "residual"]
LEARN_COLUMNS = ["a", "seed", "risk_theta0", "risk_theta_hat", "risk_oracle"]
HMM_COLUMNS = ["a", "seed", "kind", "t", "value", "oracle", "lambda", "pi_min"]
VARIANTS = {"tensor": False, "tensor+refine": True}


class UsageError(InputError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- formatting --------------------------------------------------------------------

def fmt(value):
    """CSV cell: floats with 17 significant digits, missing values empty."""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return "" if math.isnan(value) else format(float(value), ".17g")
    return str(value)


def write_csv(path, columns, rows):
    def key(row):
        return tuple((0, row[c]) if isinstance(row.get(c), (int, float)) else (1, str(row.get(c)))
                     for c in columns)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in sorted(rows, key=key):
            w.writerow([fmt(row.get(c)) for c in columns])


def write_json(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def write_manifest(out, command, config, outputs):
    write_json(os.path.join(out, "manifest.json"),
               {"command": command, "version": __version__, "config": config,
                "outputs": sorted(outputs)})


# -- config -----------------------------------------------------------------------

def load_config(path):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise InputError(f"config not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from None
    if isinstance(doc, dict) and "command" in doc and "config" in doc:
        doc = doc["config"]          # rerun from a manifest
    if not isinstance(doc, dict):
        raise InputError("config must be a JSON object")
    return doc


def _resolve_path(path, base):
    if path is None:
        return None
    return path if os.path.isabs(path) else os.path.normpath(os.path.join(base, path))


def _require_file(path, what):
    if not os.path.isfile(path):
        raise InputError(f"{what} not found: {path}")
    return path


def parse_seeds(text):
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--seeds must be comma-separated integers, got {text!r}") from None
    if not seeds:
        raise UsageError("--seeds must list at least one seed")
    return seeds


def _apply_overrides(config, args):
    config = dict(config)
    if args.seeds is not None:
        config["seeds"] = parse_seeds(args.seeds)
    if args.dim_convention is not None:
        config["dim_convention"] = args.dim_convention
    return config


# -- gen-data ---------------------------------------------------------------------

def _shift_features(ds: MultiViewDataset, a, convention):
    """Radial dimming applied to the concatenated feature vector of a synthetic sample."""
    if a == 0:
        return ds
    P = sum(ds.view_dims)
    factor = dimming_factor((1, P), a, convention).reshape(-1)
    cuts = np.cumsum((0,) + ds.view_dims)
    views = tuple(x * factor[cuts[v]:cuts[v + 1]] for v, x in enumerate(ds.views))
    return MultiViewDataset(views, ds.labels, ds.k, dict(ds.descriptor, a=float(a)))


def _patchwork_source(src, base):
    if "images" in src:
        for key in ("images", "labels"):
            src[key] = os.path.abspath(_require_file(_resolve_path(src[key], base), f"{key} file"))
        images, labels = load_idx(src["images"], src["labels"])
        if labels is None:
            raise InputError("patchwork source needs labels")
        return images, labels
    syn = src.get("synthetic", {})
    return synthetic_digits(int(syn.get("k", 3)), int(syn.get("side", 10)),
                            int(syn.get("per_class", 200)), int(syn.get("seed", 0)))


def resolve_gen_config(config):
    src = dict(config.get("source") or {})
    if "type" not in src:
        raise InputError("gen-data config needs source.type")
    return {"source": src, "m": int(config.get("m", 10000)),
            "a": [float(a) for a in config.get("a", [0.0])],
            "seeds": [int(s) for s in config.get("seeds", [0])],
            "include_labels": bool(config.get("include_labels", True)),
            "dim_convention": config.get("dim_convention", "divide")}


def data_filename(kind, a, seed):
    ext = "mvsq" if kind == "hmm" else "mvds"
    return f"data_a{fmt(float(a))}_seed{seed}.{ext}"


def cmd_gen_data(config, out, base, jobs=1):
    cfg = resolve_gen_config(config)
    if not cfg["seeds"]:
        raise InputError("seeds must be non-empty")
    src, kind = cfg["source"], cfg["source"]["type"]
    images = None
    if kind == "patchwork":
        images = _patchwork_source(src, base)
    elif kind not in ("multiview", "mediated", "hmm"):
        raise InputError(f"unknown source type {kind!r}")
    entries = []

    def one(task):
        a, seed = task
        name = data_filename(kind, a, seed)
        path = os.path.join(out, name)
        if kind == "hmm":
            if a != 0:
                raise InputError("hmm sources do not take a shift")
            save_sequences(path, gen_hmm_sequences(src, cfg["m"], seed), cfg["include_labels"])
        else:
            if kind == "patchwork":
                ds = patchwork_dataset(images[0], images[1], cfg["m"], a, seed,
                                       cfg["dim_convention"])
            elif kind == "multiview":
                ds = _shift_features(MultiViewGenerator.from_config(src).sample(cfg["m"], seed),
                                     a, cfg["dim_convention"])
            else:
                ds = _shift_features(MediatedGenerator.from_config(src).sample(cfg["m"], seed),
                                     a, cfg["dim_convention"])
            save_dataset(path, ds, cfg["include_labels"])
        return {"path": name, "a": a, "seed": seed}

    tasks = [(a, s) for a in cfg["a"] for s in cfg["seeds"]]
    entries = _run_jobs(one, tasks, jobs)
    cfg["datasets"] = sorted(entries, key=lambda e: (e["a"], e["seed"]))
    write_manifest(out, "gen-data", cfg, [e["path"] for e in entries])
    return cfg


def _run_jobs(fn, tasks, jobs):
    if jobs > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, tasks))
    return [fn(t) for t in tasks]


# -- shared resolution ------------------------------------------------------------------

def resolve_datasets(config, base, seeds=None):
    """List of {path, a, seed} from an explicit list or a gen-data manifest."""
    if "manifest" in config:
        mpath = _require_file(_resolve_path(config["manifest"], base), "manifest")
        with open(mpath) as fh:
            man = json.load(fh)
        mbase = os.path.dirname(mpath)
        entries = [dict(e, path=_resolve_path(e["path"], mbase))
                   for e in man["config"]["datasets"]]
    elif "datasets" in config:
        entries = []
        for e in config["datasets"]:
            e = {"path": e} if isinstance(e, str) else dict(e)
            e["path"] = _resolve_path(e["path"], base)
            e.setdefault("a", 0.0)
            e.setdefault("seed", 0)
            entries.append(e)
    else:
        raise InputError("config needs 'datasets' or 'manifest'")
    for e in entries:
        e["path"] = os.path.abspath(_require_file(e["path"], "dataset"))
        e["a"], e["seed"] = float(e["a"]), int(e["seed"])
    if seeds is not None:
        entries = [e for e in entries if e["seed"] in seeds]
    if not entries:
        raise InputError("no datasets selected")
    return sorted(entries, key=lambda e: (e["a"], e["seed"]))


def resolve_model(descriptor, base, out):
    """A model from a JSON path, an inline descriptor, or {train: {...}} on labelled data."""
    if descriptor is None:
        raise InputError("config needs 'model'")
    if isinstance(descriptor, str):
        path = _require_file(_resolve_path(descriptor, base), "model file")
        return load_model(path), os.path.abspath(path)
    if "train" in descriptor:
        tr = descriptor["train"]
        ds = load_dataset(_require_file(_resolve_path(tr["data"], base), "training dataset"))
        if ds.labels is None:
            raise InputError("training dataset has no labels")
        kind = tr.get("kind", "logistic")
        model = build_builtin_model(kind, ds.k, ds.view_dims, bias=bool(tr.get("bias", True)))
        sol = labeled_constrained_fit(model, ds.views, ds.labels, float(tr.get("rho", 10.0)))
        model = model.with_theta(sol.theta)
        path = os.path.join(out, "model.json")
        save_model(model, path)
        return model, os.path.abspath(path)
    return model_from_dict(descriptor), descriptor


def _trained(config):
    descriptor = config.get("model")
    return isinstance(descriptor, dict) and "train" in descriptor


# -- estimate-risk ------------------------------------------------------------------

def cmd_estimate_risk(config, out, base, jobs=1):
    seeds = config.get("seeds")
    variants = list(config.get("variants", ["tensor"]))
    bad = [v for v in variants if v not in VARIANTS]
    if bad:
        raise InputError(f"unknown variants {bad}; choose from {sorted(VARIANTS)}")
    dec = DecompositionConfig.from_dict(config.get("decomposition"))
    entries = resolve_datasets(config, base, seeds)
    model, model_ref = resolve_model(config.get("model"), base, out)
    vpath = config.get("validation")
    if vpath:
        vpath = os.path.abspath(_require_file(_resolve_path(vpath, base), "validation set"))
    cfg = {"model": model_ref, "variants": variants, "decomposition": dec.to_dict(),
           "validation": vpath, "datasets": entries, "seeds": seeds}
    validation = None
    if vpath:
        vds = load_dataset(vpath)
        if vds.labels is None:
            raise InputError("validation dataset has no labels")
        validation = (vds.views, vds.labels)

    def one(task):
        entry, variant = task
        ds = load_dataset(entry["path"])
        est = estimate_risk(ds.unlabeled(), model, replace(dec, refine=VARIANTS[variant]),
                            validation=validation)
        lam = est.diagnostics.get("lambda")
        row = {"a": entry["a"], "seed": entry["seed"], "variant": variant, "R_hat": est.value,
               "R_labeled_oracle": (labeled_risk(ds.views, ds.labels, model)
                                    if ds.labels is not None else None),
               "validation_baseline": est.baselines.get("validation"),
               "entropy_baseline": est.baselines.get("entropy"),
               "lambda": float(np.min(lam)) if lam is not None else None,
               "pi_min": est.diagnostics.get("pi_min"),
               "residual": est.estimate.residual if est.estimate is not None else None}
        report = {"a": entry["a"], "seed": entry["seed"], "variant": variant, **est.to_dict()}
        return row, report

    tasks = [(e, v) for e in entries for v in cfg["variants"]]
    results = _run_jobs(one, tasks, jobs)
    write_csv(os.path.join(out, "risk.csv"), RISK_COLUMNS, [r for r, _ in results])
    reports = sorted((rep for _, rep in results), key=lambda r: (r["a"], r["seed"], r["variant"]))
    write_json(os.path.join(out, "risk_reports.json"), reports)
    outputs = ["risk.csv", "risk_reports.json"] + (["model.json"] if _trained(config) else [])
    write_manifest(out, "estimate-risk", cfg, outputs)
    return [r for r, _ in results]


# -- learn -----------------------------------------------------------------------------

def cmd_learn(config, out, base, jobs=1):
    seeds = config.get("seeds")
    entries = resolve_datasets(config, base, seeds)
    lcfg = LearnConfig.from_dict(config.get("learn"))
    dec = DecompositionConfig.from_dict(config.get("decomposition"))
    model, model_ref = resolve_model(config.get("model"), base, out)
    cfg = {"model": model_ref, "learn": lcfg.to_dict(), "decomposition": dec.to_dict(),
           "datasets": entries, "seeds": seeds}
    theta0 = model.theta
    outputs = ["learn.csv"]

    def one(entry):
        ds = load_dataset(entry["path"])
        log_name = f"learn_log_a{fmt(entry['a'])}_seed{entry['seed']}.jsonl"
        if lcfg.method == "general":
            with open(os.path.join(out, log_name), "w") as fh:
                res = learn(ds.unlabeled(), model, theta0, lcfg, dec, log_fh=fh)
        else:
            res = learn(ds.unlabeled(), model, theta0, lcfg, dec)
        row = {"a": entry["a"], "seed": entry["seed"]}
        if ds.labels is not None:
            row["risk_theta0"] = labeled_risk(ds.views, ds.labels, model)
            row["risk_theta_hat"] = labeled_risk(ds.views, ds.labels, model.with_theta(res.theta))
            if model.kind == "logistic":
                orc = labeled_constrained_fit(model, ds.views, ds.labels, lcfg.rho)
                row["risk_oracle"] = labeled_risk(ds.views, ds.labels, model.with_theta(orc.theta))
        return row, log_name if lcfg.method == "general" else None, res.theta

    results = _run_jobs(one, entries, jobs)
    write_csv(os.path.join(out, "learn.csv"), LEARN_COLUMNS, [r for r, _, _ in results])
    thetas = {f"a{fmt(r['a'])}_seed{r['seed']}": th.tolist() for r, _, th in results}
    write_json(os.path.join(out, "thetas.json"), thetas)
    outputs += ["thetas.json"] + [name for _, name, _ in results if name]
    if _trained(config):
        outputs.append("model.json")
    write_manifest(out, "learn", cfg, outputs)
    return [r for r, _, _ in results]


# -- hmm-risk -----------------------------------------------------------------------------

def cmd_hmm_risk(config, out, base, jobs=1):
    seeds = config.get("seeds")
    if "hmm" not in config:
        raise InputError("config needs 'hmm' (model parameters)")
    hmm = HmmModel.from_config(config["hmm"])
    dec = DecompositionConfig.from_dict(config.get("decomposition"))
    entries = resolve_datasets(config, base, seeds)
    cfg = {"hmm": hmm.to_dict(), "decomposition": dec.to_dict(), "datasets": entries,
           "seeds": seeds}
    rows, reports = [], []
    for entry in entries:
        sq = load_sequences(entry["path"])
        if sq.k != hmm.k:
            raise InputError(f"{entry['path']}: {sq.k} states, model has {hmm.k}")
        est = hmm_risk(hmm, sq.obs, dec, jobs)
        pair_l = unary_l = None
        if sq.labels is not None:
            pair_l, unary_l = labeled_position_losses(hmm, sq.obs, sq.labels)
        for kind, t, value, lam, pmin in est.rows():
            oracle = None
            if pair_l is not None:
                oracle = float(np.mean(pair_l[:, t - 1] if kind == "pair" else unary_l[:, t]))
            rows.append({"a": entry["a"], "seed": entry["seed"], "kind": kind, "t": t,
                         "value": value, "oracle": oracle, "lambda": lam, "pi_min": pmin})
        rows.append({"a": entry["a"], "seed": entry["seed"], "kind": "total", "t": None,
                     "value": est.value,
                     "oracle": (labeled_inner_risk(hmm, sq.obs, sq.labels)
                                if sq.labels is not None else None)})
        reports.append({"a": entry["a"], "seed": entry["seed"], **est.to_dict()})
    write_csv(os.path.join(out, "hmm_risk.csv"), HMM_COLUMNS, rows)
    write_json(os.path.join(out, "hmm_report.json"), reports)
    write_manifest(out, "hmm-risk", cfg, ["hmm_risk.csv", "hmm_report.json"])
    return rows


COMMANDS = {"gen-data": cmd_gen_data, "estimate-risk": cmd_estimate_risk, "learn": cmd_learn,
            "hmm-risk": cmd_hmm_risk}


def build_parser():
    p = _Parser(prog="mvrisk", description="Unsupervised risk estimation experiments.")
    p.add_argument("--version", action="version", version=f"mvrisk {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="JSON config or a previous manifest")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seeds", help="comma-separated seeds (overrides/filters the config)")
        sp.add_argument("--jobs", type=int, default=1, help="worker threads")
        sp.add_argument("--dim-convention", choices=("divide", "multiply"))
        sp.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required: " + ", ".join(COMMANDS))
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        config = _apply_overrides(load_config(args.config), args)
        base = os.path.dirname(os.path.abspath(args.config))
        os.makedirs(args.out, exist_ok=True)
        COMMANDS[args.command](config, args.out, base, args.jobs)
    except NumericError as exc:
        where = f" [stage {exc.stage}]" if getattr(exc, "stage", None) else ""
        print(f"mvrisk: numerical failure{where}: {exc}", file=sys.stderr)
        return 2
    except (MvRiskError, OSError, KeyError, ValueError) as exc:
        print(f"mvrisk: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
