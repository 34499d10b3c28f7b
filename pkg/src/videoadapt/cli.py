"""Command-line surface: train, eval, synth, gradcheck, ablate, features inspect.

Every command is deterministic given its flags and seed. Invalid
configuration exits with code 2 and names the offending field; runtime
failures exit 1. Each training run writes its outputs under one
directory together with a manifest of produced files.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np

from . import featureio
from .errors import ConfigError, FormatError
from .gradcheck import run_op_suite
from .model import build_model, expected_trainable_count, load_checkpoint
from .runconfig import (
    echo_config,
    load_run_config,
    load_synth_spec,
    resolve_encoder_config,
    resolve_synth_spec,
    resolve_train_config,
    resolved_summary,
)
from .synth import generate
from .trainer import PROTOCOLS, ablation_table, evaluate, run_ablation, train


@click.group()
def main():
    """Video feature adaptation workbench."""


def _fail_config(exc: Exception):
    raise click.UsageError(str(exc))


@main.command("train")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--out", "out_override", type=click.Path(file_okay=False), default=None)
def cmd_train(config_path, seed, out_override):
    """Train per the run config; writes metrics, checkpoints, and a report."""
    try:
        run = load_run_config(config_path)
        if run.train_manifest is None or run.test_manifest is None:
            raise ConfigError("data.train_manifest and data.test_manifest are required for training")
        out_dir = Path(out_override or run.out or "run_out")
        train_ds = featureio.Dataset.open(run.train_manifest)
        test_ds = featureio.Dataset.open(run.test_manifest)
        enc_cfg = resolve_encoder_config(run, feat_dim=train_ds.manifest.feat_dim)
        train_cfg = resolve_train_config(run)
        if seed is not None:
            from dataclasses import replace

            train_cfg = replace(train_cfg, seed=seed)
    except ConfigError as exc:
        _fail_config(exc)
    out_dir.mkdir(parents=True, exist_ok=True)
    echo_config(run, out_dir)
    n_classes = len(train_ds.manifest.classes)
    model = build_model(enc_cfg, n_classes, train_cfg.seed)
    summary = resolved_summary(enc_cfg, train_cfg)
    summary["trainable_parameters"] = model.trainable_count()
    summary["expected_trainable_parameters"] = expected_trainable_count(enc_cfg, n_classes)
    click.echo(json.dumps(summary, sort_keys=True))
    result = train(model, train_ds, test_ds, train_cfg, out_dir=out_dir)
    report = {
        "resolved": summary,
        "final_accuracy": result.final_accuracy,
        "best_accuracy": result.best_accuracy,
        "steps": result.steps,
        "param_hash": result.param_hash,
    }
    (out_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    produced = sorted(str(p.relative_to(out_dir)) for p in out_dir.rglob("*") if p.is_file())
    (out_dir / "files.json").write_text(json.dumps(produced, indent=2) + "\n")
    click.echo(f"final accuracy {result.final_accuracy:.4f}, best {result.best_accuracy:.4f}")


@main.command("eval")
@click.option("--checkpoint", "checkpoint_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--export-features", "export_dir", type=click.Path(file_okay=False), default=None)
def cmd_eval(checkpoint_path, manifest_path, export_dir):
    """Evaluate a checkpoint on a labeled manifest; optionally export features."""
    model = load_checkpoint(checkpoint_path)
    dataset = featureio.Dataset.open(manifest_path)
    result = evaluate(model, dataset, export_dir=export_dir)
    click.echo(json.dumps({
        "accuracy": result.accuracy,
        "per_class": result.per_class,
        "n_videos": result.n_videos,
        "exported": result.exported,
    }, sort_keys=True))


@main.command("synth")
@click.option("--spec", "spec_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
def cmd_synth(spec_path, out_dir):
    """Generate a two-domain synthetic dataset."""
    from .synth import SynthSpec

    try:
        spec = load_synth_spec(spec_path) if spec_path else SynthSpec()
        paths = generate(spec, out_dir)
    except ConfigError as exc:
        _fail_config(exc)
    click.echo(f"train manifest: {paths.train_manifest}")
    click.echo(f"test manifest: {paths.test_manifest}")


@main.command("gradcheck")
@click.option("--scope", type=click.Choice(["ops", "encoder", "dtab", "heads", "all"]), default="all")
@click.option("--tol", type=float, default=1e-4)
@click.option("--instances", type=int, default=25)
@click.option("--seed", type=int, default=0)
def cmd_gradcheck(scope, tol, instances, seed):
    """Finite-difference gradient suite; exits nonzero on any failure."""
    from .checks import run_scope_suite

    rng = np.random.default_rng(seed)
    rows = []
    scopes = ["ops", "encoder", "dtab", "heads"] if scope == "all" else [scope]
    for s in scopes:
        if s == "ops":
            rows += run_op_suite(rng, instances=instances, tol=tol)
        else:
            rows += run_scope_suite(s, rng, instances=instances, tol=tol)
    failed = False
    for name, err, ok in rows:
        click.echo(f"{'ok  ' if ok else 'FAIL'} {name}: max rel err {err:.3e} (tol {tol:.1e})")
        failed = failed or not ok
    if failed:
        sys.exit(1)


@main.command("ablate")
@click.option("--protocol", type=click.Choice(list(PROTOCOLS)), required=True)
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_override", type=click.Path(file_okay=False), default=None)
def cmd_ablate(protocol, config_path, out_override):
    """Run one ablation protocol on synthetic data; emits a JSON table."""
    try:
        run = load_run_config(config_path)
        out_dir = Path(out_override or run.out or "ablation_out")
        spec = resolve_synth_spec(run)
        enc_cfg = resolve_encoder_config(run, feat_dim=spec.feat_dim)
        train_cfg = resolve_train_config(run)
    except ConfigError as exc:
        _fail_config(exc)
    out_dir.mkdir(parents=True, exist_ok=True)
    echo_config(run, out_dir)
    rows = run_ablation(
        protocol,
        spec,
        enc_cfg,
        train_cfg,
        n_classes=spec.n_classes,
        work_dir=out_dir / "work",
        seeds=run.ablation_seeds,
    )
    table = ablation_table(rows)
    (out_dir / f"ablation_{protocol}.json").write_text(table + "\n")
    click.echo(table)


@main.group("features")
def cmd_features():
    """Feature-file utilities."""


@cmd_features.command("inspect")
@click.argument("path", type=click.Path(exists=True, dir_okay=False))
def cmd_features_inspect(path):
    """Print header fields and payload checksum status."""
    try:
        n_frames, feat_dim, crc = featureio.read_header(path)
    except FormatError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    status = "ok"
    try:
        featureio.read_features(path)
    except FormatError as exc:
        status = f"FAILED ({exc})"
    click.echo(f"magic: TFAT  version: {featureio.FORMAT_VERSION}  dtype: float32")
    click.echo(f"n_frames: {n_frames}  feat_dim: {feat_dim}  payload_crc: {crc:#010x}")
    click.echo(f"checksum: {status}")


if __name__ == "__main__":
    main()
