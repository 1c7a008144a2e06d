"""Command line entry points.

Every subcommand maps domain errors onto process exit codes: bad
configuration exits 2, bad data exits 3, numerical failure exits 4.
"""

import functools
import json
from pathlib import Path

import click
import numpy as np

from . import experiment
from .calibrate import crude_fit, robust_select
from .ensemble import inverse_variance_combine, seed_aggregate
from .errors import ConfigError, DataError, ShiftMdnError
from .ingest import (
    ScalerParams,
    SchemaSpec,
    TimeRule,
    load_external_predictions,
    load_table,
    split_environments,
    transform,
)
from .network import load_checkpoint, predict
from .synth import SynthConfig, write_benchmark, write_frame_csv

import yaml


def _handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ShiftMdnError as err:
            click.echo(f"error: {err}", err=True)
            raise SystemExit(err.exit_code)

    return wrapper


def _parse_seeds(text):
    if text is None:
        return None
    try:
        seeds = [int(tok) for tok in text.split(",") if tok.strip()]
    except ValueError:
        raise ConfigError(f"could not parse seed list {text!r}") from None
    if not seeds:
        raise ConfigError(f"could not parse seed list {text!r}")
    return seeds


def _parse_floats(text):
    if text is None:
        return None
    try:
        values = [float(tok) for tok in text.split(",") if tok.strip()]
    except ValueError:
        raise ConfigError(f"could not parse float list {text!r}") from None
    if not values:
        raise ConfigError(f"could not parse float list {text!r}")
    return values


def _load_schema(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return SchemaSpec.from_dict(json.load(fh))
    except FileNotFoundError:
        raise DataError(f"schema file not found: {path}") from None
    except json.JSONDecodeError as err:
        raise DataError(f"could not parse schema {path}: {err}") from None


@click.group()
def main():
    """Probabilistic tabular regression under distributional shift."""


@main.command("gen-synth")
@click.option("--out", required=True, type=click.Path(),
              help="Directory for the benchmark CSVs and manifests.")
@click.option("--config", "config_path", type=click.Path(),
              help="YAML with generator settings (top level or a "
                   "'synth' section).")
@click.option("--seed", type=int, default=None,
              help="Override the generator seed.")
@_handle_errors
def gen_synth(out, config_path, seed):
    """Write the synthetic shifted benchmark as train/val/test CSVs."""
    section = {}
    if config_path is not None:
        try:
            with open(config_path, "r", encoding="utf-8") as fh:
                raw = yaml.safe_load(fh) or {}
        except FileNotFoundError:
            raise ConfigError(
                f"config file not found: {config_path}") from None
        except yaml.YAMLError as err:
            raise ConfigError(
                f"could not parse {config_path}: {err}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config must be a mapping at the top level")
        section = raw.get("synth", raw)
        if not isinstance(section, dict):
            raise ConfigError("config section 'synth' must be a mapping")
    if seed is not None:
        section = {**section, "seed": seed}
    try:
        config = SynthConfig(**section)
    except TypeError as err:
        raise ConfigError(f"bad generator settings: {err}") from None
    manifest = write_benchmark(out, config)
    per_domain = manifest["counts"]["train_per_domain"]
    click.echo(f"wrote benchmark to {out} "
               f"({per_domain} train rows per domain)")


@main.command("split")
@click.option("--data", "data_path", required=True, type=click.Path(),
              help="Input CSV.")
@click.option("--schema", "schema_path", required=True, type=click.Path(),
              help="Schema JSON naming the column roles.")
@click.option("--out", required=True, type=click.Path(),
              help="Directory for the per-environment CSVs.")
@click.option("--threshold", type=float, default=27.0, show_default=True,
              help="Week boundary between the Early and Late bins.")
@click.option("--climates", type=int, default=3, show_default=True,
              help="Exact number of distinct climates expected.")
@click.option("--missing", type=click.Choice(["drop", "error"]),
              default="drop", show_default=True)
@_handle_errors
def split_cmd(data_path, schema_path, out, threshold, climates, missing):
    """Partition a table into climate x time environments."""
    schema = _load_schema(schema_path)
    frame = load_table(data_path, schema, missing=missing)
    frames, labels = split_environments(
        frame, TimeRule(early_threshold=threshold), climates)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    for label, env in zip(labels, frames):
        name = f"env_{experiment._sanitize(label)}.csv"
        write_frame_csv(out / name, env)
        files[label] = name
    experiment._write_json(out / "split_manifest.json", {
        "environments": labels,
        "files": files,
        "counts": {label: env.n_rows
                   for label, env in zip(labels, frames)},
        "early_threshold": threshold,
    })
    click.echo(f"wrote {len(frames)} environment files to {out}")


@main.command("train")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--out", type=click.Path(), default=None,
              help="Override the config's out_dir.")
@click.option("--unit", default="all", show_default=True,
              help="'all' or an environment label.")
@click.option("--seed", "seed_text", default=None,
              help="Comma-separated seed list override.")
@click.option("--threads", type=int, default=None)
@_handle_errors
def train_cmd(config_path, out, unit, seed_text, threads):
    """Train one unit and save its checkpoints, scalers and logs."""
    config = experiment.ExperimentConfig.from_file(
        config_path, out_dir=out, seeds=_parse_seeds(seed_text),
        threads=threads)
    manifest = experiment.train_unit(config, unit, config.out_dir)
    click.echo(f"trained {manifest['unit']} "
               f"(seeds {','.join(str(s) for s in manifest['seeds'])}) "
               f"-> {config.out_dir}")


@main.command("predict")
@click.option("--checkpoint", required=True, type=click.Path())
@click.option("--scalers", "scalers_path", required=True,
              type=click.Path())
@click.option("--data", "data_path", required=True, type=click.Path())
@click.option("--schema", "schema_path", required=True, type=click.Path())
@click.option("--out", required=True, type=click.Path(),
              help="Predictions CSV path.")
@_handle_errors
def predict_cmd(checkpoint, scalers_path, data_path, schema_path, out):
    """Predict a table with a saved checkpoint, in raw target units."""
    net_config, weights = load_checkpoint(checkpoint)
    scalers = ScalerParams.load(scalers_path)
    schema = _load_schema(schema_path)
    frame = load_table(data_path, schema)
    x = transform(frame, scalers).features
    summaries = predict(net_config, weights, x, scalers)
    experiment.write_predictions_csv(
        out, summaries, frame.target, domains=frame.domain)
    click.echo(f"wrote {len(summaries)} predictions to {out}")


@main.command("calibrate")
@click.option("--preds", "pred_paths", required=True, multiple=True,
              type=click.Path(),
              help="Prediction CSV; repeat for robust selection.")
@click.option("--out", required=True, type=click.Path(),
              help="Fitted pool JSON path.")
@click.option("--labels", "labels_text", default=None,
              help="Comma-separated candidate labels.")
@click.option("--min-points", type=int, default=10, show_default=True)
@click.option("--total-variance", is_flag=True, default=False,
              help="Normalize by total rather than aleatoric std.")
@_handle_errors
def calibrate_cmd(pred_paths, out, labels_text, min_points,
                  total_variance):
    """Fit a calibration pool, robustly selecting among several sets."""
    sets = []
    for path in pred_paths:
        summaries, targets, _ = load_external_predictions(path)
        sets.append((summaries, targets))
    if labels_text is not None:
        labels = [tok.strip() for tok in labels_text.split(",")
                  if tok.strip()]
    else:
        labels = [Path(p).stem for p in pred_paths]
    if len(labels) != len(sets):
        raise ConfigError(
            f"{len(labels)} labels for {len(sets)} prediction sets")
    if len(sets) == 1:
        pool = crude_fit(sets[0][0], sets[0][1],
                         use_total_variance=total_variance,
                         min_points=min_points, source=labels[0])
        click.echo(f"fitted pool on {labels[0]} "
                   f"({pool.z.size} points)")
    else:
        index, pool = robust_select(
            sets, use_total_variance=total_variance,
            min_points=min_points, labels=labels)
        click.echo(f"selected candidate {index} ({pool.source})")
    experiment._atomic(out, lambda t: pool.save(t))


@main.command("ensemble")
@click.option("--preds", "pred_paths", required=True, multiple=True,
              type=click.Path(), help="Member prediction CSV; repeat.")
@click.option("--out", required=True, type=click.Path())
@click.option("--mode", type=click.Choice(["iv", "seed"]), default="iv",
              show_default=True,
              help="Inverse-variance pooling or seed aggregation.")
@click.option("--aleatoric-only", is_flag=True, default=False,
              help="Weight by aleatoric rather than total variance.")
@_handle_errors
def ensemble_cmd(pred_paths, out, mode, aleatoric_only):
    """Combine member prediction files into one prediction file."""
    if len(pred_paths) < 2:
        raise ConfigError("ensembling needs at least two prediction files")
    members = []
    targets = None
    domains = None
    for path in pred_paths:
        summaries, t, d = load_external_predictions(path)
        if targets is None:
            targets, domains = t, d
        elif len(t) != len(targets) or not np.allclose(
                t, targets, rtol=0.0, atol=0.0):
            raise DataError(
                f"targets in {path} disagree with the first file")
        members.append(summaries)
    if mode == "iv":
        combined = inverse_variance_combine(
            members, aleatoric_only=aleatoric_only)
    else:
        combined = seed_aggregate(members)
    experiment.write_predictions_csv(out, combined, targets,
                                     domains=domains)
    click.echo(f"wrote {len(combined)} combined predictions to {out}")


@main.command("evaluate")
@click.option("--preds", "pred_path", required=True, type=click.Path())
@click.option("--pool", "pool_path", type=click.Path(), default=None,
              help="Apply a saved calibration pool first.")
@click.option("--cal-preds", "cal_path", type=click.Path(), default=None,
              help="Fit a fresh pool on this prediction file first.")
@click.option("--id-preds", "id_path", type=click.Path(), default=None,
              help="In-distribution predictions for the OOD ROC-AUC.")
@click.option("--out", type=click.Path(), default=None,
              help="Report JSON path; stdout summary otherwise.")
@click.option("--alpha", type=float, default=0.32, show_default=True)
@click.option("--threshold", type=float, default=1.0, show_default=True)
@click.option("--score", type=click.Choice(["total", "aleatoric"]),
              default="total", show_default=True)
@click.option("--distribution-variance",
              type=click.Choice(["aleatoric", "total"]),
              default="aleatoric", show_default=True)
@click.option("--normalize-is/--no-normalize-is", default=True)
@_handle_errors
def evaluate_cmd(pred_path, pool_path, cal_path, id_path, out, alpha,
                 threshold, score, distribution_variance, normalize_is):
    """Score a prediction file with the full metric suite."""
    report, pool = experiment.evaluate_predictions(
        pred_path, pool_path=pool_path, cal_path=cal_path,
        id_path=id_path, alpha=alpha, threshold=threshold, score=score,
        distribution_variance=distribution_variance,
        normalize_is=normalize_is)
    doc = report.to_dict()
    if out is not None:
        experiment._write_json(out, doc)
    line = (f"mae={doc['mae']:.6g} rmse={doc['rmse']:.6g} "
            f"nll={doc['nll']:.6g} is={doc['is']:.6g} "
            f"ace={doc['ace']:.6g}")
    if doc.get("roc_auc_ood") is not None:
        line += f" roc_auc_ood={doc['roc_auc_ood']:.6g}"
    if pool is not None:
        line += f" calibration={pool.source or 'fitted'}"
    click.echo(line)


@main.command("run")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--out", type=click.Path(), default=None,
              help="Override the config's out_dir.")
@click.option("--seed", "seed_text", default=None,
              help="Comma-separated seed list override.")
@click.option("--threads", type=int, default=None)
@_handle_errors
def run_cmd(config_path, out, seed_text, threads):
    """Full workflow: experts, pooled model, ensembling, calibration."""
    config = experiment.ExperimentConfig.from_file(
        config_path, out_dir=out, seeds=_parse_seeds(seed_text),
        threads=threads)
    manifest = experiment.run_experiment(config)
    click.echo(f"run complete: {len(manifest['cells'])} report cells "
               f"in {config.out_dir} (config {manifest['config_hash'][:12]})")


@main.command("sweep-moex")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--out", type=click.Path(), default=None,
              help="Override the config's out_dir.")
@click.option("--p-grid", "p_grid_text", default=None,
              help="Comma-separated exchange probabilities.")
@click.option("--seed", "seed_text", default=None,
              help="Comma-separated seed list override.")
@click.option("--threads", type=int, default=None)
@_handle_errors
def sweep_moex_cmd(config_path, out, p_grid_text, seed_text, threads):
    """Train the pooled model across a MoEx probability grid."""
    config = experiment.ExperimentConfig.from_file(
        config_path, out_dir=out, seeds=_parse_seeds(seed_text),
        threads=threads)
    rows = experiment.sweep_moex(config,
                                 p_grid=_parse_floats(p_grid_text))
    click.echo(f"sweep complete: {len(rows)} rows in "
               f"{config.out_dir}/sweep.csv")


if __name__ == "__main__":
    main()
