"""Experiment orchestration: declarative configs, runs, and sweeps.

A run trains seven models (one expert per climate/time environment plus
one on all training data), predicts the shifted test set, optionally
calibrates, ensembles the experts by inverse variance, and scores every
prediction set.  Artifacts are plain JSON/CSV, written atomically, with
no timestamps or absolute paths inside, so identical configs reproduce
byte-identical outputs.

The config file is YAML with strict unknown-key rejection.  Sections and
their defaults mirror the module configs they feed:

    synth: / data:   exactly one; the benchmark generator or CSV paths
    split:           early_threshold (week), expected_climates
    network:         hidden, n_components, leaky_slope, pono_eps
    train:           batch_size, cycles, epochs_per_cycle, lr_max,
                     lr_min, beta1, beta2, eps, weight_decay, swa_window
    moex:            p, lambda_alpha, lambda_beta
    calibration:     none | crude | robust
    ensemble:        aleatoric_only
    metrics:         alpha, threshold, score, distribution_variance,
                     normalize_is
    seeds:           list of ints, one trained replicate each
    out_dir:         artifact directory
    threads:         worker processes for independent trainings

The config hash covers every experiment-defining section but not
out_dir/threads, which only place the work.
"""

import dataclasses
import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import yaml

from .augment import MoExConfig
from .calibrate import (
    ZPool,
    crude_apply_batch,
    crude_fit,
    robust_select,
)
from .ensemble import (
    combine_calibrated,
    inverse_variance_combine,
    seed_aggregate,
)
from .errors import ConfigError, DataError
from .ingest import (
    EnvironmentSplit,
    SchemaSpec,
    TimeRule,
    clamp_targets,
    fit_scalers,
    load_external_predictions,
    load_table,
    transform,
)
from .metrics import full_report, save_curve_csv, uncertainty_scores
from .network import NetworkConfig, save_checkpoint
from .optim import TrainConfig, save_log
from .optim import train as train_network
from .synth import SynthConfig, generate

DEFAULT_P_GRID = (0.05, 0.20, 0.40, 0.60, 0.80, 1.00)

_TOP_KEYS = {"synth", "data", "split", "network", "train", "moex",
             "calibration", "ensemble", "metrics", "seeds", "out_dir",
             "threads"}
_DATA_KEYS = {"train", "val", "test", "schema", "missing", "delimiter"}
_SPLIT_KEYS = {"early_threshold", "expected_climates"}
_ENSEMBLE_KEYS = {"aleatoric_only"}
_METRICS_KEYS = {"alpha", "threshold", "score", "distribution_variance",
                 "normalize_is"}
_CALIBRATION_MODES = ("none", "crude", "robust")
_HASHED_SECTIONS = ("calibration", "ensemble", "metrics", "moex", "network",
                    "seeds", "source", "split", "train")


def _field_defaults(cls, exclude=()):
    out = {}
    for f in dataclasses.fields(cls):
        if f.name in exclude or f.default is dataclasses.MISSING:
            continue
        value = f.default
        out[f.name] = list(value) if isinstance(value, tuple) else value
    return out


def _merge_section(name, user, defaults):
    if user is None:
        user = {}
    if not isinstance(user, dict):
        raise ConfigError(f"config section {name!r} must be a mapping")
    for key in user:
        if key not in defaults:
            raise ConfigError(f"unknown config key {key!r} in section {name!r}")
    merged = dict(defaults)
    merged.update(user)
    return merged


class ExperimentConfig:
    """Fully resolved experiment description; see the module docstring."""

    def __init__(self, raw, out_dir=None, seeds=None, threads=None):
        if not isinstance(raw, dict):
            raise ConfigError("config must be a mapping at the top level")
        for key in raw:
            if key not in _TOP_KEYS:
                raise ConfigError(f"unknown config key {key!r}")
        if ("synth" in raw) == ("data" in raw):
            raise ConfigError(
                "config needs exactly one data source: 'synth' or 'data'")

        if "synth" in raw:
            synth_keys = {f.name for f in dataclasses.fields(SynthConfig)}
            section = raw["synth"] or {}
            if not isinstance(section, dict):
                raise ConfigError("config section 'synth' must be a mapping")
            for key in section:
                if key not in synth_keys:
                    raise ConfigError(
                        f"unknown config key {key!r} in section 'synth'")
            self.source = {"synth": SynthConfig(**section).to_dict()}
        else:
            data = _merge_section("data", raw["data"], {
                "train": None, "val": None, "test": None, "schema": None,
                "missing": "drop", "delimiter": ",",
            })
            for key in ("train", "val", "test", "schema"):
                if not data[key]:
                    raise ConfigError(f"data source needs a {key!r} path")
            self.source = {"data": data}

        self.split = _merge_section("split", raw.get("split"), {
            "early_threshold": 27.0, "expected_climates": 3,
        })
        self.network = _merge_section(
            "network", raw.get("network"),
            _field_defaults(NetworkConfig, exclude=("input_dim", "seed")))
        self.train = _merge_section(
            "train", raw.get("train"),
            _field_defaults(TrainConfig, exclude=("seed",)))
        self.moex = _merge_section(
            "moex", raw.get("moex"),
            _field_defaults(MoExConfig, exclude=("seed",)))
        self.ensemble = _merge_section(
            "ensemble", raw.get("ensemble"),
            {"aleatoric_only": False})
        self.metrics = _merge_section("metrics", raw.get("metrics"), {
            "alpha": 0.32, "threshold": 1.0, "score": "total",
            "distribution_variance": "aleatoric", "normalize_is": True,
        })

        self.calibration = raw.get("calibration", "robust")
        if self.calibration not in _CALIBRATION_MODES:
            raise ConfigError(
                f"calibration must be one of {_CALIBRATION_MODES}, "
                f"got {self.calibration!r}")

        self.seeds = list(seeds if seeds is not None
                          else raw.get("seeds", [0]))
        if len(self.seeds) == 0:
            raise ConfigError("seeds must be a nonempty list")
        if any(int(s) != s for s in self.seeds):
            raise ConfigError("seeds must be integers")
        self.seeds = [int(s) for s in self.seeds]
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")

        self.out_dir = str(out_dir if out_dir is not None
                           else raw.get("out_dir", "shiftmdn-run"))
        self.threads = int(threads if threads is not None
                           else raw.get("threads", 1))
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")

        # constructing the module configs validates the section values
        self.network_config(input_dim=1, seed=0)
        self.train_config(seed=0)
        self.moex_config()
        if not 0.0 < self.metrics["alpha"] < 1.0:
            raise ConfigError("metrics alpha must lie in (0, 1)")
        if self.metrics["threshold"] <= 0.0:
            raise ConfigError("metrics threshold must be positive")
        if self.metrics["score"] not in ("total", "aleatoric"):
            raise ConfigError("metrics score must be 'total' or 'aleatoric'")
        if self.metrics["distribution_variance"] not in (
                "aleatoric", "total"):
            raise ConfigError(
                "metrics distribution_variance must be 'aleatoric' "
                "or 'total'")

    @classmethod
    def from_file(cls, path, out_dir=None, seeds=None, threads=None):
        try:
            with open(path, "r", encoding="utf-8") as fh:
                raw = yaml.safe_load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except yaml.YAMLError as err:
            raise ConfigError(f"could not parse {path}: {err}") from None
        if raw is None:
            raw = {}
        return cls(raw, out_dir=out_dir, seeds=seeds, threads=threads)

    def resolved(self):
        return {
            "source": self.source,
            "split": self.split,
            "network": self.network,
            "train": self.train,
            "moex": self.moex,
            "calibration": self.calibration,
            "ensemble": self.ensemble,
            "metrics": self.metrics,
            "seeds": self.seeds,
        }

    def config_hash(self):
        doc = self.resolved()
        blob = json.dumps({k: doc[k] for k in _HASHED_SECTIONS},
                          sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def network_config(self, input_dim, seed):
        return NetworkConfig(input_dim=input_dim, seed=seed, **self.network)

    def train_config(self, seed):
        return TrainConfig(seed=seed, **self.train)

    def moex_config(self, p=None):
        kwargs = dict(self.moex)
        if p is not None:
            kwargs["p"] = p
        return MoExConfig(**kwargs)

    def time_rule(self):
        return TimeRule(early_threshold=self.split["early_threshold"])


# ------------------------------------------------------------- file I/O


def _atomic(path, writer):
    """Write through a temp file in the same directory, then rename."""
    path = str(path)
    tmp = path + ".tmp"
    writer(tmp)
    os.replace(tmp, path)


def _write_json(path, doc):
    def writer(tmp):
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, sort_keys=True, indent=2)
            fh.write("\n")

    _atomic(path, writer)


def write_predictions_csv(path, summaries, targets, domains=None):
    """Predictions in the external-scoring CSV schema."""
    if len(summaries) != len(targets):
        raise DataError(
            f"{len(summaries)} predictions for {len(targets)} targets")

    def writer(tmp):
        with open(tmp, "w", encoding="utf-8") as fh:
            header = "pred_mean,pred_std_aleatoric,pred_std_epistemic,target"
            if domains is not None:
                header += ",domain"
            fh.write(header + "\n")
            for i, (s, y) in enumerate(zip(summaries, targets)):
                cells = [
                    repr(float(s.mean)),
                    repr(float(np.sqrt(s.var_aleatoric))),
                    repr(float(np.sqrt(s.var_epistemic))),
                    repr(float(y)),
                ]
                if domains is not None:
                    cells.append(str(domains[i]))
                fh.write(",".join(cells) + "\n")

    _atomic(path, writer)


def _sanitize(label):
    return label.replace("|", "_").replace("/", "_").replace(" ", "_")


# ----------------------------------------------------------- data source


def load_split(config):
    """(EnvironmentSplit, synth manifest or None) from the config source."""
    if "synth" in config.source:
        synth_config = SynthConfig(**{
            k: v for k, v in config.source["synth"].items()
        })
        split, manifest = generate(synth_config)
        return split, manifest
    data = config.source["data"]
    schema_path = data["schema"]
    try:
        with open(schema_path, "r", encoding="utf-8") as fh:
            schema = SchemaSpec.from_dict(json.load(fh))
    except FileNotFoundError:
        raise DataError(f"schema file not found: {schema_path}") from None
    frames = {}
    for part in ("train", "val", "test"):
        frames[part] = load_table(data[part], schema,
                                  missing=data["missing"],
                                  delimiter=data["delimiter"])
    split = EnvironmentSplit.build(
        frames["train"], frames["val"], frames["test"],
        config.time_rule(), config.split["expected_climates"])
    return split, None


# ----------------------------------------------------------- train units


def _prepare_unit(unit_id, label, train_frame, val_frame):
    """Fit scalers and produce the scaled, clamped training arrays."""
    scalers = fit_scalers(train_frame)
    strain = transform(train_frame, scalers)
    sval = transform(val_frame, scalers)
    y_train, clamped_train = clamp_targets(strain.target)
    y_val, clamped_val = clamp_targets(sval.target)
    return {
        "unit": unit_id,
        "label": label,
        "scalers": scalers,
        "x_train": strain.features,
        "y_train": y_train,
        "x_val": sval.features,
        "y_val": y_val,
        "clamped": {"train": clamped_train, "val": clamped_val},
        "n_train": train_frame.n_rows,
        "n_val": val_frame.n_rows,
    }


def _train_job(payload):
    """One (unit, seed) training; top-level so process pools can run it."""
    net_config = NetworkConfig.from_dict(payload["network"])
    train_config = TrainConfig(**payload["train"])
    moex_config = None
    if payload["moex"] is not None:
        moex_config = MoExConfig(**payload["moex"])
    result = train_network(
        net_config,
        (payload["x_train"], payload["y_train"]),
        (payload["x_val"], payload["y_val"]),
        train_config,
        moex_config,
    )
    return {
        "unit": payload["unit"],
        "seed": payload["seed"],
        "weights": result.weights,
        "log": result.log,
        "final_choice": result.final_choice,
        "final_val_loss": result.final_val_loss,
        "aborted": result.aborted,
        "abort_reason": result.abort_reason,
    }


def _make_job(config, prepared, seed, moex_p=None):
    input_dim = prepared["x_train"].shape[1]
    return {
        "unit": prepared["unit"],
        "seed": seed,
        "network": config.network_config(input_dim, seed).to_dict(),
        "train": dataclasses.asdict(config.train_config(seed)),
        "moex": dataclasses.asdict(config.moex_config(moex_p)),
        "x_train": prepared["x_train"],
        "y_train": prepared["y_train"],
        "x_val": prepared["x_val"],
        "y_val": prepared["y_val"],
    }


def _run_jobs(jobs, threads):
    if threads <= 1 or len(jobs) <= 1:
        return [_train_job(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(_train_job, jobs))


def _save_training_artifacts(out, config, prepared, outcome):
    unit, seed = outcome["unit"], outcome["seed"]
    net_config = config.network_config(
        prepared["x_train"].shape[1], seed)
    ckpt = out / "checkpoints" / f"{unit}_seed{seed}.json"
    _atomic(ckpt, lambda t: save_checkpoint(t, net_config,
                                            outcome["weights"]))
    _atomic(out / "logs" / f"{unit}_seed{seed}.jsonl",
            lambda t: save_log(t, outcome["log"]))


def _predict_unit(config, prepared, outcomes, frames):
    """Per-seed predictions on each frame, seed-aggregated when needed.

    frames: {name: Frame}; returns {name: list of summaries} in raw
    target units.
    """
    from .network import predict

    scalers = prepared["scalers"]
    per_frame = {name: [] for name in frames}
    for outcome in outcomes:
        net_config = config.network_config(
            prepared["x_train"].shape[1], outcome["seed"])
        for name, frame in frames.items():
            x = transform(frame, scalers).features
            per_frame[name].append(
                predict(net_config, outcome["weights"], x, scalers))
    combined = {}
    for name, members in per_frame.items():
        combined[name] = members[0] if len(members) == 1 \
            else seed_aggregate(members)
    return combined


# --------------------------------------------------------------- reports


def _report_row(config, summaries, targets, id_summaries):
    mk = config.metrics
    id_unc = uncertainty_scores(id_summaries, mk["score"])
    return full_report(
        summaries, targets,
        alpha=mk["alpha"], threshold=mk["threshold"], score=mk["score"],
        distribution_variance=mk["distribution_variance"],
        normalize_is=mk["normalize_is"], id_uncertainties=id_unc)


def _write_cell(out, cell_id, provenance, rows, config_hash):
    """rows: list of (row_name, report, calibration_source)."""
    doc = {
        "cell": cell_id,
        "config_hash": config_hash,
        "provenance": provenance,
        "rows": {},
    }
    for row_name, report, source in rows:
        doc["rows"][row_name] = {
            "calibration": source,
            "metrics": report.to_dict(),
        }
        base = out / "curves" / f"{cell_id}_{row_name}"
        _atomic(f"{base}_error.csv",
                lambda t, r=report: save_curve_csv(
                    r.error_retention_curve, t, "mse"))
        _atomic(f"{base}_f1.csv",
                lambda t, r=report: save_curve_csv(
                    r.f1_retention_curve, t, "f1"))
    _write_json(out / "reports" / f"{cell_id}.json", doc)
    return doc


def _ensure_layout(out):
    for sub in ("checkpoints", "scalers", "logs", "pools", "reports",
                "curves"):
        (out / sub).mkdir(parents=True, exist_ok=True)


# ------------------------------------------------------------------- run


def run_experiment(config):
    """Execute the full workflow; returns the run manifest dict.

    Any failure leaves a FAILED marker next to whatever artifacts were
    already written, then re-raises.
    """
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    failed = out / "FAILED"
    try:
        manifest = _execute_run(config, out)
    except Exception as err:
        _atomic(failed, lambda t: Path(t).write_text(
            f"{type(err).__name__}: {err}\n", encoding="utf-8"))
        raise
    if failed.exists():
        failed.unlink()
    return manifest


def _execute_run(config, out):
    _ensure_layout(out)
    config_hash = config.config_hash()
    split, synth_manifest = load_split(config)
    if synth_manifest is not None:
        _write_json(out / "synth_manifest.json", synth_manifest)

    test_targets = split.test.target
    if test_targets is None:
        raise DataError("test set has no target column to evaluate against")

    labels = split.labels
    units = []
    for label, tf, vf in zip(labels, split.train_envs, split.val_envs):
        units.append((f"expert_{_sanitize(label)}", label, tf, vf))
    units.append(("all", "all", split.train_all, split.val_all))

    prepared = {}
    jobs = []
    for unit_id, label, tf, vf in units:
        prep = _prepare_unit(unit_id, label, tf, vf)
        prepared[unit_id] = prep
        for seed in config.seeds:
            jobs.append(_make_job(config, prep, seed))
    results = _run_jobs(jobs, config.threads)

    by_unit = {unit_id: [] for unit_id, *_ in units}
    for outcome in results:
        by_unit[outcome["unit"]].append(outcome)
    for unit_id, label, tf, vf in units:
        prep = prepared[unit_id]
        _atomic(out / "scalers" / f"{unit_id}.json",
                lambda t, s=prep["scalers"]: s.save(t))
        for outcome in by_unit[unit_id]:
            _save_training_artifacts(out, config, prep, outcome)

    mode = config.calibration
    aleatoric_only = config.ensemble["aleatoric_only"]

    # predictions: every unit sees TEST and the pooled validation set;
    # experts also see their own validation environment (their
    # calibration set), the pooled model each environment separately
    # (the robust-selection candidates)
    expert_ids = [u for u, *_ in units[:-1]]
    predictions = {}
    for unit_id, label, tf, vf in units:
        frames = {"test": split.test, "val_all": split.val_all}
        if unit_id == "all":
            for env_label, env_frame in zip(labels, split.val_envs):
                frames[f"env:{env_label}"] = env_frame
        else:
            frames["own_val"] = vf
        predictions[unit_id] = _predict_unit(
            config, prepared[unit_id], by_unit[unit_id], frames)

    manifest_cells = {}
    pools_used = {}

    # expert cells: raw row, plus a CRUDE row calibrated on the expert's
    # own validation environment
    calibrated_test = {}
    calibrated_val_all = {}
    for (unit_id, label, tf, vf) in units[:-1]:
        preds = predictions[unit_id]
        rows = [("raw", _report_row(config, preds["test"], test_targets,
                                    preds["val_all"]), None)]
        if mode != "none":
            pool = crude_fit(preds["own_val"], vf.target, source=label)
            _atomic(out / "pools" / f"{unit_id}.json",
                    lambda t, p=pool: p.save(t))
            pools_used[unit_id] = pool
            calibrated_test[unit_id] = crude_apply_batch(preds["test"], pool)
            calibrated_val_all[unit_id] = crude_apply_batch(
                preds["val_all"], pool)
            rows.append(("calibrated",
                         _report_row(config, calibrated_test[unit_id],
                                     test_targets,
                                     calibrated_val_all[unit_id]),
                         pool.source))
        provenance = {
            "training_set": label,
            "seeds": config.seeds,
            "n_train": prepared[unit_id]["n_train"],
            "n_val": prepared[unit_id]["n_val"],
        }
        manifest_cells[unit_id] = _cell_entry(
            out, unit_id, provenance, rows, config_hash)

    # combined cell: inverse-variance over the six experts
    combined_rows = [(
        "raw",
        _report_row(
            config,
            inverse_variance_combine(
                [predictions[u]["test"] for u in expert_ids],
                aleatoric_only=aleatoric_only),
            test_targets,
            inverse_variance_combine(
                [predictions[u]["val_all"] for u in expert_ids],
                aleatoric_only=aleatoric_only)),
        None)]
    if mode != "none":
        combined_rows.append((
            "calibrated",
            _report_row(
                config,
                combine_calibrated(
                    [calibrated_test[u] for u in expert_ids],
                    aleatoric_only=aleatoric_only),
                test_targets,
                combine_calibrated(
                    [calibrated_val_all[u] for u in expert_ids],
                    aleatoric_only=aleatoric_only)),
            "combined"))
    provenance = {
        "training_set": "inverse-variance over experts",
        "members": [u for u in expert_ids],
        "seeds": config.seeds,
    }
    manifest_cells["combined"] = _cell_entry(
        out, "combined", provenance, combined_rows, config_hash)

    # pooled cell: raw, CRUDE on all validation data, robust selection
    all_preds = predictions["all"]
    rows = [("raw", _report_row(config, all_preds["test"], test_targets,
                                all_preds["val_all"]), None)]
    robust_choice = None
    if mode != "none":
        pool_all = crude_fit(all_preds["val_all"], split.val_all.target,
                             source="val_all")
        _atomic(out / "pools" / "all_crude.json",
                lambda t: pool_all.save(t))
        rows.append((
            "calibrated",
            _report_row(config,
                        crude_apply_batch(all_preds["test"], pool_all),
                        test_targets,
                        crude_apply_batch(all_preds["val_all"], pool_all)),
            pool_all.source))
    if mode == "robust":
        candidates = [
            (all_preds[f"env:{label}"], frame.target)
            for label, frame in zip(labels, split.val_envs)
        ]
        index, pool_robust = robust_select(candidates, labels=labels)
        _atomic(out / "pools" / "all_robust.json",
                lambda t: pool_robust.save(t))
        robust_choice = {"index": index, "source": pool_robust.source}
        rows.append((
            "robust",
            _report_row(config,
                        crude_apply_batch(all_preds["test"], pool_robust),
                        test_targets,
                        crude_apply_batch(all_preds["val_all"],
                                          pool_robust)),
            pool_robust.source))
    provenance = {
        "training_set": "all environments pooled",
        "seeds": config.seeds,
        "n_train": prepared["all"]["n_train"],
        "n_val": prepared["all"]["n_val"],
    }
    if robust_choice is not None:
        provenance["robust_choice"] = robust_choice
    manifest_cells["all"] = _cell_entry(
        out, "all", provenance, rows, config_hash)

    manifest = {
        "config": config.resolved(),
        "config_hash": config_hash,
        "environments": labels,
        "cells": manifest_cells,
        "training": {
            outcome["unit"]: {} for outcome in results
        },
        "clamped_targets": {
            unit_id: prepared[unit_id]["clamped"]
            for unit_id, *_ in units
        },
    }
    for outcome in results:
        manifest["training"][outcome["unit"]][str(outcome["seed"])] = {
            "final_choice": outcome["final_choice"],
            "final_val_loss": outcome["final_val_loss"],
            "aborted": outcome["aborted"],
        }
    if robust_choice is not None:
        manifest["robust_choice"] = robust_choice
    _write_json(out / "manifest.json", manifest)
    return manifest


def _cell_entry(out, cell_id, provenance, rows, config_hash):
    _write_cell(out, cell_id, provenance, rows, config_hash)
    return {
        "report": f"reports/{cell_id}.json",
        "rows": [name for name, _, _ in rows],
        "provenance": provenance,
    }


# ----------------------------------------------------------------- sweep


def sweep_moex(config, p_grid=None):
    """Train the pooled model across the MoEx probability grid.

    Each p gets three evaluation rows on the shifted test set: raw,
    CRUDE-calibrated on all validation data, and robust-calibrated on
    the best single validation environment.  Returns the list of row
    dicts; writes sweep.csv and a manifest under the config's out_dir.
    """
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    failed = out / "FAILED"
    try:
        rows = _execute_sweep(config, out, p_grid)
    except Exception as err:
        _atomic(failed, lambda t: Path(t).write_text(
            f"{type(err).__name__}: {err}\n", encoding="utf-8"))
        raise
    if failed.exists():
        failed.unlink()
    return rows


_SWEEP_METRICS = ("mae", "rmse", "be", "is", "ace", "nll")


def _execute_sweep(config, out, p_grid):
    grid = list(DEFAULT_P_GRID if p_grid is None else p_grid)
    if len(grid) == 0:
        raise ConfigError("p grid is empty")
    for p in grid:
        if not 0.0 <= p <= 1.0:
            raise ConfigError(f"p grid values must lie in [0, 1], got {p}")
    _ensure_layout(out)
    config_hash = config.config_hash()
    split, synth_manifest = load_split(config)
    if synth_manifest is not None:
        _write_json(out / "synth_manifest.json", synth_manifest)
    test_targets = split.test.target
    if test_targets is None:
        raise DataError("test set has no target column to evaluate against")
    labels = split.labels

    prep = _prepare_unit("all", "all", split.train_all, split.val_all)
    _atomic(out / "scalers" / "all.json",
            lambda t: prep["scalers"].save(t))

    jobs = []
    for p in grid:
        for seed in config.seeds:
            job = _make_job(config, prep, seed, moex_p=p)
            job["unit"] = f"p{p:g}"
            jobs.append(job)
    results = _run_jobs(jobs, config.threads)
    by_p = {}
    for job, outcome in zip(jobs, results):
        by_p.setdefault(outcome["unit"], []).append(outcome)
        _save_training_artifacts(out, config, prep, outcome)

    rows = []
    for p in grid:
        outcomes = by_p[f"p{p:g}"]
        frames = {"test": split.test, "val_all": split.val_all}
        for label, frame in zip(labels, split.val_envs):
            frames[f"env:{label}"] = frame
        preds = _predict_unit(config, prep, outcomes, frames)

        variants = [("raw", preds["test"], preds["val_all"], None)]
        pool_all = crude_fit(preds["val_all"], split.val_all.target,
                             source="val_all")
        _atomic(out / "pools" / f"p{p:g}_crude.json",
                lambda t: pool_all.save(t))
        variants.append((
            "calibrated",
            crude_apply_batch(preds["test"], pool_all),
            crude_apply_batch(preds["val_all"], pool_all),
            pool_all.source))
        candidates = [
            (preds[f"env:{label}"], frame.target)
            for label, frame in zip(labels, split.val_envs)
        ]
        index, pool_robust = robust_select(candidates, labels=labels)
        _atomic(out / "pools" / f"p{p:g}_robust.json",
                lambda t: pool_robust.save(t))
        variants.append((
            "robust",
            crude_apply_batch(preds["test"], pool_robust),
            crude_apply_batch(preds["val_all"], pool_robust),
            pool_robust.source))

        for variant, test_preds, id_preds, source in variants:
            report = _report_row(config, test_preds, test_targets, id_preds)
            doc = report.to_dict()
            row = {"p": p, "variant": variant}
            row.update({m: doc[m] for m in _SWEEP_METRICS})
            row["calibration"] = source
            row["robust_choice"] = (
                {"index": index, "source": pool_robust.source}
                if variant == "robust" else None)
            rows.append(row)

    def writer(tmp):
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write("p,variant," + ",".join(_SWEEP_METRICS) + "\n")
            for row in rows:
                cells = [repr(float(row["p"])), row["variant"]]
                cells += [repr(float(row[m])) for m in _SWEEP_METRICS]
                fh.write(",".join(cells) + "\n")

    _atomic(out / "sweep.csv", writer)
    _write_json(out / "sweep_manifest.json", {
        "config": config.resolved(),
        "config_hash": config_hash,
        "p_grid": [float(p) for p in grid],
        "environments": labels,
        "rows": rows,
    })
    return rows


# -------------------------------------------------------------- external


def evaluate_predictions(pred_path, *, pool_path=None, cal_path=None,
                         id_path=None, alpha=0.32, threshold=1.0,
                         score="total", distribution_variance="aleatoric",
                         normalize_is=True):
    """Score an externally produced prediction file.

    pool_path applies a saved ZPool; cal_path fits a fresh pool on a
    second prediction file first (mutually exclusive).  id_path supplies
    in-distribution predictions whose uncertainties feed the OOD
    detection ROC-AUC, calibrated the same way when a pool is in play.
    """
    if pool_path is not None and cal_path is not None:
        raise ConfigError(
            "pass either a fitted pool or a calibration file, not both")
    summaries, targets, _ = load_external_predictions(pred_path)
    pool = None
    if pool_path is not None:
        pool = ZPool.load(pool_path)
    elif cal_path is not None:
        cal_preds, cal_targets, _ = load_external_predictions(cal_path)
        pool = crude_fit(cal_preds, cal_targets,
                         source=Path(cal_path).name)
    if pool is not None:
        summaries = crude_apply_batch(summaries, pool)
    id_uncertainties = None
    if id_path is not None:
        id_summaries, _, _ = load_external_predictions(id_path)
        if pool is not None:
            id_summaries = crude_apply_batch(id_summaries, pool)
        id_uncertainties = uncertainty_scores(id_summaries, score)
    return full_report(
        summaries, targets, alpha=alpha, threshold=threshold, score=score,
        distribution_variance=distribution_variance,
        normalize_is=normalize_is, id_uncertainties=id_uncertainties), pool


# -------------------------------------------------------- single units


def train_unit(config, unit, out_dir):
    """Train one unit ("all" or an environment label) and save artifacts.

    Returns a small manifest dict; used by the train subcommand.
    """
    out = Path(out_dir)
    _ensure_layout(out)
    split, _ = load_split(config)
    if unit == "all":
        unit_id, label = "all", "all"
        train_frame, val_frame = split.train_all, split.val_all
    else:
        matches = [
            (lab, tf, vf)
            for lab, tf, vf in zip(split.labels, split.train_envs,
                                   split.val_envs)
            if lab == unit or _sanitize(lab) == unit
        ]
        if not matches:
            raise ConfigError(
                f"unknown unit {unit!r}; expected 'all' or one of "
                f"{split.labels}")
        label, train_frame, val_frame = matches[0]
        unit_id = f"expert_{_sanitize(label)}"
    prep = _prepare_unit(unit_id, label, train_frame, val_frame)
    _atomic(out / "scalers" / f"{unit_id}.json",
            lambda t: prep["scalers"].save(t))
    jobs = [_make_job(config, prep, seed) for seed in config.seeds]
    results = _run_jobs(jobs, config.threads)
    for outcome in results:
        _save_training_artifacts(out, config, prep, outcome)
    manifest = {
        "unit": unit_id,
        "training_set": label,
        "config_hash": config.config_hash(),
        "seeds": config.seeds,
        "checkpoints": [
            f"checkpoints/{unit_id}_seed{seed}.json"
            for seed in config.seeds
        ],
        "scalers": f"scalers/{unit_id}.json",
        "final_val_loss": {
            str(o["seed"]): o["final_val_loss"] for o in results
        },
    }
    _write_json(out / f"{unit_id}_train_manifest.json", manifest)
    return manifest
