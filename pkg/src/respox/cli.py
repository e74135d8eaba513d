"""Command-line entry points tying the modules into reproducible workflows.

Every command is deterministic given (config, seed, data). Exit codes:
0 success, 1 runtime or check failure, 2 usage or configuration error.
Every artifact written here carries the config hash and the tool version.
"""

from __future__ import annotations

import json
import logging
import os
import sys
from dataclasses import replace

import click
import numpy as np

from . import __version__
from . import model as model_mod
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import (
    ConfigError,
    FULL_PARAM_COUNT_REFERENCE,
    RunConfig,
    config_hash,
    load_run_config,
    model_config_to_dict,
    run_config_to_dict,
)
from .data import (
    RecordError,
    crop_to_multiple,
    filter_split,
    load_dataset,
    write_record,
)
from .evaluate import EvalError, dump_predictions, evaluate
from .gate import GateError, load_gate_map, save_gate_map
from .gradcheck import run_all
from .synth import SynthError, SynthProfile, profile_from_dict, profile_to_dict, synth_generate
from .train import TrainingError, resolve_gate_map, train, train_gated_pipeline, write_train_log

log = logging.getLogger(__name__)

EXIT_FAILURE = 1
EXIT_USAGE = 2


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    return load_run_config(path)


def _override(cfg, section: str, **updates):
    """Apply non-None flag overrides onto one config section, logging each."""
    obj = getattr(cfg, section)
    applied = {}
    for key, value in updates.items():
        if value is None:
            continue
        if getattr(obj, key) != value:
            log.info("flag override: %s.%s = %r (config had %r)", section, key, value, getattr(obj, key))
        applied[key] = value
    if applied:
        obj = replace(obj, **applied)
        setattr(cfg, section, obj)
    return cfg


def _load_records(data_dir: str | None, cfg: RunConfig, split: str):
    directory = data_dir or cfg.data.dir
    if not directory:
        raise ConfigError("no data directory: pass --data or set data.dir in the config")
    records = load_dataset(directory)
    if split != "all":
        records = filter_split(records, split, ratio=cfg.data.split_ratio, seed=cfg.data.split_seed)
    return [crop_to_multiple(r) for r in records]


@click.group()
@click.version_option(version=__version__, prog_name="respox")
@click.option("-v", "--verbose", is_flag=True, help="Debug-level logging.")
def main(verbose: bool):
    """Breathing-to-SpO2 sequence regression: data, training, gating, evaluation."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


# ---------------------------------------------------------------- synth


@main.command()
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Output directory.")
@click.option("--profile", type=click.Path(exists=True, dir_okay=False), help="Generator profile JSON.")
@click.option("--seed", type=int, default=None, help="Override the profile seed.")
@click.option("--nights", type=int, default=None, help="Override the night count.")
@click.option("--duration", type=int, default=None, help="Override night duration in seconds.")
def synth(out, profile, seed, nights, duration):
    """Generate a deterministic synthetic dataset plus a manifest."""
    try:
        if profile is not None:
            with open(profile, "r", encoding="utf-8") as fh:
                prof = profile_from_dict(json.load(fh))
        else:
            prof = SynthProfile()
        overrides = {"seed": seed, "nights": nights, "duration_s": duration}
        overrides = {k: v for k, v in overrides.items() if v is not None}
        for key, value in overrides.items():
            log.info("flag override: profile.%s = %r", key, value)
        if overrides:
            prof = replace(prof, **overrides)
    except (SynthError, json.JSONDecodeError, OSError) as exc:
        _fail(EXIT_USAGE, f"bad profile: {exc}")

    os.makedirs(out, exist_ok=True)
    records = synth_generate(prof)
    files = []
    for record in records:
        name = f"{record.subject_id}.rsp"
        write_record(record, os.path.join(out, name))
        files.append(name)
    payload = profile_to_dict(prof)
    manifest = {
        "tool_version": __version__,
        "profile": payload,
        "profile_hash": config_hash(payload),
        "files": files,
    }
    with open(os.path.join(out, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    click.echo(f"wrote {len(files)} records and manifest.json to {out}")


# ---------------------------------------------------------------- train


@main.command(name="train")
@click.option("--config", "config_path", envvar="RESPOX_CONFIG",
              type=click.Path(exists=True, dir_okay=False), help="Run config JSON (env RESPOX_CONFIG).")
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False), help="Dataset directory.")
@click.option("--variant", type=click.Choice(["backbone", "cnn", "varaug", "gated"]), default=None)
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Checkpoint path.")
@click.option("--log-out", type=click.Path(dir_okay=False), help="Train log path (default OUT.log.jsonl).")
@click.option("--gate-map-out", type=click.Path(dir_okay=False),
              help="Gate map path for the gated variant (default OUT.gatemap.json).")
@click.option("--seed", type=int, default=None, help="Override the training seed.")
@click.option("--epochs", type=int, default=None, help="Override the epoch budget.")
@click.option("--split", type=click.Choice(["train", "all"]), default="train",
              help="Train on the subject-split train portion (default) or on everything.")
def train_cmd(config_path, data_dir, variant, out, log_out, gate_map_out, seed, epochs, split):
    """Train a model variant and write checkpoint, log, and gate map."""
    try:
        cfg = _load_config(config_path)
        cfg = _override(cfg, "train", seed=seed, epochs=epochs)
        cfg = _override(cfg, "data", dir=data_dir)
        model_updates = {}
        if variant is not None and variant != cfg.model.variant:
            log.info("flag override: model.variant = %r (config had %r)", variant, cfg.model.variant)
            model_updates["variant"] = variant
        model_cfg = replace(cfg.model, **model_updates) if model_updates else cfg.model
        if model_cfg.variant == "gated" and model_cfg.n_heads != cfg.gate.n_heads:
            log.info("sizing model.n_heads from gate.n_heads = %d", cfg.gate.n_heads)
            model_cfg = replace(model_cfg, n_heads=cfg.gate.n_heads)
        cfg.model = model_cfg
        digest = config_hash(cfg)
        records = _load_records(data_dir, cfg, split)
    except (ConfigError, RecordError, SynthError) as exc:
        _fail(EXIT_USAGE, str(exc))

    try:
        if cfg.model.variant == "gated":
            params, gate_map, train_log = train_gated_pipeline(
                cfg.model,
                records,
                cfg.train,
                cfg.gate,
                normalize=cfg.data.normalize,
                checkpoint_path=out,
                config_hash=digest,
            )
            gate_path = gate_map_out or f"{out}.gatemap.json"
            gate_map.provenance["config_hash"] = digest
            gate_map.provenance["tool_version"] = __version__
            save_gate_map(gate_path, gate_map)
            click.echo(f"gate map: {gate_path}")
        else:
            params, _, train_log = train(
                cfg.model,
                records,
                cfg.train,
                normalize=cfg.data.normalize,
                checkpoint_path=out,
                config_hash=digest,
            )
    except TrainingError as exc:
        _fail(EXIT_FAILURE, f"training failed: {exc}")

    log_path = log_out or f"{out}.log.jsonl"
    write_train_log(log_path, train_log)
    final = train_log.entries[-1]
    click.echo(
        f"trained {cfg.model.variant} for {len(train_log.entries)} epochs "
        f"(loss {final['loss']:.4f}, l1 {final['l1']:.4f}); checkpoint: {out}; log: {log_path}"
    )


# ---------------------------------------------------------------- gatemap


@main.command()
@click.option("--ckpt", required=True, type=click.Path(exists=True, dir_okay=False),
              help="Backbone checkpoint to differentiate.")
@click.option("--config", "config_path", envvar="RESPOX_CONFIG",
              type=click.Path(exists=True, dir_okay=False), help="Run config JSON (env RESPOX_CONFIG).")
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False), help="Dataset directory.")
@click.option("--n-heads", type=int, default=None, help="Override the head count.")
@click.option("--mode", type=click.Choice(["grad-sim", "identity", "manual"]), default=None)
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Gate map JSON path.")
def gatemap(ckpt, config_path, data_dir, n_heads, mode, out):
    """Derive a gate map from a trained backbone via gradient similarity."""
    try:
        cfg = _load_config(config_path)
        cfg = _override(cfg, "gate", n_heads=n_heads, mode=mode)
        checkpoint = load_checkpoint(ckpt)
        gated_cfg = replace(checkpoint.config, variant="gated", n_heads=cfg.gate.n_heads)
        records = None
        if cfg.gate.mode == "grad-sim":
            records = _load_records(data_dir, cfg, "train")
    except (ConfigError, CheckpointError, RecordError) as exc:
        _fail(EXIT_USAGE, str(exc))

    try:
        gate_map = resolve_gate_map(
            cfg.gate.mode,
            gated_cfg,
            cfg.gate,
            backbone_params=checkpoint.params,
            backbone_config=checkpoint.config,
            records=records,
            corr_weight=cfg.train.corr_weight,
            normalize=cfg.data.normalize,
        )
    except (GateError, ConfigError) as exc:
        _fail(EXIT_FAILURE, f"gate map construction failed: {exc}")
    gate_map.provenance["config_hash"] = config_hash(cfg)
    gate_map.provenance["tool_version"] = __version__
    save_gate_map(out, gate_map)
    click.echo(f"gate map with {gate_map.n_heads} heads over {len(gate_map.table)} states: {out}")


# ---------------------------------------------------------------- eval


@main.command(name="eval")
@click.option("--ckpt", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--config", "config_path", envvar="RESPOX_CONFIG",
              type=click.Path(exists=True, dir_okay=False), help="Run config JSON (env RESPOX_CONFIG).")
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False), help="Dataset directory.")
@click.option("--gate-map", "gate_map_path", type=click.Path(exists=True, dir_okay=False),
              help="Gate map JSON for gated checkpoints.")
@click.option("--split", type=click.Choice(["train", "test", "all"]), default=None,
              help="Which subject-split portion to score (config default: test).")
@click.option("--group-by", type=str, default=None, help="Add grouped distribution stats for this variable.")
@click.option("--dump", "dump_dir", type=click.Path(file_okay=False), help="Write per-night TSV dumps here.")
@click.option("--report", "report_path", required=True, type=click.Path(dir_okay=False))
@click.option("--jobs", type=int, default=1, help="Parallel per-record workers.")
def eval_cmd(ckpt, config_path, data_dir, gate_map_path, split, group_by, dump_dir, report_path, jobs):
    """Score a checkpoint on a dataset and write the JSON report."""
    try:
        cfg = _load_config(config_path)
        cfg = _override(cfg, "eval", split=split, group_var=group_by)
        checkpoint = load_checkpoint(ckpt)
        if config_path is not None:
            digest = config_hash(cfg)
            stored = checkpoint.meta.get("config_hash")
            if stored is not None and stored != digest:
                raise ConfigError(
                    f"config hash mismatch: checkpoint was trained under {stored[:12]}..., "
                    f"--config hashes to {digest[:12]}..."
                )
        gate_map = None
        if checkpoint.config.variant == "gated":
            if gate_map_path is None:
                raise ConfigError("gated checkpoint requires --gate-map")
            gate_map = load_gate_map(gate_map_path)
        records = _load_records(data_dir, cfg, cfg.eval.split)
    except (ConfigError, CheckpointError, GateError, RecordError) as exc:
        _fail(EXIT_USAGE, str(exc))

    try:
        report = evaluate(
            checkpoint.params,
            checkpoint.config,
            records,
            gate_map,
            normalize=cfg.data.normalize,
            config_hash=checkpoint.meta.get("config_hash"),
            checkpoint_id=os.path.basename(ckpt),
            group_var=cfg.eval.group_var,
            jobs=jobs,
        )
    except (EvalError, model_mod.LengthError) as exc:
        _fail(EXIT_FAILURE, f"evaluation failed: {exc}")

    payload = report.to_dict()
    payload["tool_version"] = __version__
    payload["aggregation"] = cfg.eval.aggregation
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")

    if dump_dir:
        os.makedirs(dump_dir, exist_ok=True)
        for record in records:
            dump_predictions(
                checkpoint.params,
                checkpoint.config,
                record,
                os.path.join(dump_dir, f"{record.subject_id}.tsv"),
                gate_map,
                normalize=cfg.data.normalize,
            )
        click.echo(f"dumped {len(records)} nights to {dump_dir}")

    table = report.by_night if cfg.eval.aggregation == "night" else report.by_segment
    for name in sorted(table):
        agg = table[name]
        click.echo(
            f"{name}: corr {agg.corr:.4f}  mae {agg.mae:.4f}  rmse {agg.rmse:.4f}  "
            f"({agg.count} {'nights' if cfg.eval.aggregation == 'night' else 'segments'}, "
            f"{agg.corr_excluded} excluded from corr)"
        )
    click.echo(f"report: {report_path}")


# ---------------------------------------------------------------- gradcheck


@main.command()
@click.option("--seed", type=int, default=0)
@click.option("--instances", type=int, default=20, help="Random fixtures per operator check.")
def gradcheck(seed, instances):
    """Run the finite-difference suite; exit nonzero on any violation."""
    results, elapsed = run_all(seed=seed, instances=instances)
    failures = sorted((r for r in results if not r.passed), key=lambda r: -r.error)
    click.echo(f"{len(results)} checks in {elapsed:.1f}s, {len(failures)} failures")
    if failures:
        for r in failures[:10]:
            click.echo(f"  FAIL {r.name} [{r.dtype}] error {r.error:.3e} tolerance {r.tolerance:.0e}")
        sys.exit(EXIT_FAILURE)


# ---------------------------------------------------------------- inspect


@main.command()
@click.option("--ckpt", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--tensors/--no-tensors", default=False, help="List every stored tensor.")
def inspect(ckpt, tensors):
    """Print a checkpoint's config, metadata, and parameter inventory."""
    try:
        checkpoint = load_checkpoint(ckpt)
    except CheckpointError as exc:
        _fail(EXIT_USAGE, f"cannot read checkpoint: {exc}")

    click.echo(json.dumps(model_config_to_dict(checkpoint.config), indent=2, sort_keys=True))
    if checkpoint.meta:
        click.echo("meta: " + json.dumps(checkpoint.meta, sort_keys=True))
    trainable = model_mod.param_count(checkpoint.params)
    total = sum(int(np.prod(t.data.shape)) for t in checkpoint.params.values())
    click.echo(
        f"parameters: {trainable:,} trainable, {total:,} with buffers "
        f"(full-scale reference: {FULL_PARAM_COUNT_REFERENCE:,})"
    )
    if checkpoint.optimizer:
        click.echo(f"optimizer tensors: {len(checkpoint.optimizer)}")
    if tensors:
        for name in sorted(checkpoint.params):
            t = checkpoint.params[name]
            click.echo(f"  {name}  {tuple(t.data.shape)}  {t.data.dtype}")


if __name__ == "__main__":
    main()
