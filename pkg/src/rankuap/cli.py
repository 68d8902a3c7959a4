"""Command-line interface: dataset generation, victim training, perturbation
crafting, black-box distillation, evaluation, and transfer studies.

Every flag can also come from a YAML config file (one section per subcommand);
explicit flags override the file. Errors exit nonzero with a category prefix.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np
import yaml

from .dataset import ingest_folder, synth_generate, export_folder
from .distill import (
    DistillationConfig,
    FolderOracle,
    VictimOracle,
    collect_rankings,
    distill,
)
from .errors import (
    ConfigurationError,
    FormatError,
    IngestionError,
    MetricError,
    OracleError,
    RankUapError,
)
from .evaluate import evaluate_attack, transfer_matrix
from .landmarks import kmeans_fit, save_landmarks
from .model import (
    ArchSpec,
    descriptor_table,
    load_checkpoint,
    save_checkpoint,
    train_classifier,
    train_victim,
)
from .objectives import LabelWise, objective_from_name
from .optimizer import (
    UapConfig,
    export_png,
    load_perturbation,
    run_uap_training,
    save_perturbation,
)
from .resizing import ResizePolicy

EXIT_CODES = {
    ConfigurationError: 2,
    FormatError: 3,
    IngestionError: 4,
    OracleError: 5,
    MetricError: 6,
}


def _fail(exc):
    code = EXIT_CODES.get(type(exc), 1)
    click.echo(f"error[{type(exc).__name__}]: {exc}", err=True)
    sys.exit(code)


def _load_config(path, section):
    if path is None:
        return {}
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
    except (OSError, yaml.YAMLError) as exc:
        _fail(ConfigurationError(f"cannot read config {path}: {exc}"))
    if not isinstance(data, dict):
        _fail(ConfigurationError(f"config {path} must be a mapping of sections"))
    section_data = data.get(section, {})
    if not isinstance(section_data, dict):
        _fail(ConfigurationError(f"config section {section!r} must be a mapping"))
    return section_data


def _opt(flag_value, cfg, key, default):
    if flag_value is not None:
        return flag_value
    if key in cfg:
        return cfg[key]
    return default


def _load_dataset(path, seed):
    if path is None:
        return synth_generate(seed=seed)
    return ingest_folder(path)


@click.group()
def main():
    """Universal perturbation attacks on embedding-based image retrieval."""


@main.command("make-dataset")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--classes", type=int, default=None)
@click.option("--per-class", type=int, default=None)
@click.option("--base-size", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", "out_dir", type=click.Path(), required=True)
def make_dataset_cmd(config_path, classes, per_class, base_size, seed, out_dir):
    """Generate the synthetic corpus and export it as a PNG folder."""
    cfg = _load_config(config_path, "make-dataset")
    try:
        ds = synth_generate(
            num_classes=int(_opt(classes, cfg, "classes", 8)),
            per_class=int(_opt(per_class, cfg, "per_class", 40)),
            base_size=int(_opt(base_size, cfg, "base_size", 64)),
            seed=int(_opt(seed, cfg, "seed", 0)),
        )
        export_folder(ds, out_dir)
    except RankUapError as exc:
        _fail(exc)
    click.echo(f"wrote {len(ds)} images to {out_dir}")


@main.command("train-victim")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--dataset", "dataset_path", type=click.Path(exists=True), default=None)
@click.option("--pooling", type=click.Choice(["gem", "mac"]), default=None)
@click.option("--epochs", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", "out_path", type=click.Path(), required=True)
def train_victim_cmd(config_path, dataset_path, pooling, epochs, seed, out_path):
    """Train the victim embedding model and save a checkpoint."""
    cfg = _load_config(config_path, "train-victim")
    seed = int(_opt(seed, cfg, "seed", 0))
    try:
        ds = _load_dataset(_opt(dataset_path, cfg, "dataset", None), seed)
        arch = ArchSpec(pooling=_opt(pooling, cfg, "pooling", "gem"))
        model = train_victim(ds, arch=arch, seed=seed, epochs=int(_opt(epochs, cfg, "epochs", 30)))
        save_checkpoint(model, out_path)
    except RankUapError as exc:
        _fail(exc)
    click.echo(f"checkpoint saved to {out_path}")


def _policy_from(cfg, resize_min, resize_max, fixed_size, seed):
    if fixed_size is not None:
        return ResizePolicy.fixed(int(fixed_size))
    return ResizePolicy(
        min_side=int(_opt(resize_min, cfg, "resize_min", 32)),
        max_side=int(_opt(resize_max, cfg, "resize_max", 96)),
        seed=seed,
    )


@main.command("gen-uap")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--model", "model_path", type=click.Path(exists=True), required=True)
@click.option("--dataset", "dataset_path", type=click.Path(exists=True), default=None)
@click.option("--objective", type=click.Choice(["label", "pair", "list"]), default=None)
@click.option("--epsilon", type=float, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--momentum", "mu", type=float, default=None)
@click.option("--resize-min", type=int, default=None)
@click.option("--resize-max", type=int, default=None)
@click.option("--landmarks", "num_landmarks", type=int, default=None)
@click.option("--epochs", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--png", "png_path", type=click.Path(), default=None)
@click.option("--report", "report_path", type=click.Path(), default=None)
def gen_uap_cmd(config_path, model_path, dataset_path, objective, epsilon, lr, mu,
                resize_min, resize_max, num_landmarks, epochs, seed, out_path,
                png_path, report_path):
    """Craft a universal perturbation against a trained model."""
    cfg = _load_config(config_path, "gen-uap")
    seed = int(_opt(seed, cfg, "seed", 0))
    try:
        model = load_checkpoint(model_path)
        ds = _load_dataset(_opt(dataset_path, cfg, "dataset", None), seed)
        policy = _policy_from(cfg, resize_min, resize_max, None, seed)
        table = descriptor_table(model, ds.images, size=64)
        lm = kmeans_fit(table, k=int(_opt(num_landmarks, cfg, "landmarks", 64)), seed=seed)
        obj = objective_from_name(_opt(objective, cfg, "objective", "list"))
        if isinstance(obj, LabelWise) and model.classifier is None:
            train_classifier(model, table, lm.assignments, seed=seed)
        uap_cfg = UapConfig(
            epsilon=float(_opt(epsilon, cfg, "epsilon", 10.0)),
            learning_rate=float(_opt(lr, cfg, "lr", 1.0)),
            mu=float(_opt(mu, cfg, "momentum", 0.9)),
            max_epochs=int(_opt(epochs, cfg, "epochs", 22)),
            restarts=int(_opt(None, cfg, "restarts", 1)),
            seed=seed,
        )
        pert = run_uap_training(obj, model, ds, lm, policy, uap_cfg, clean_descs=table)
        save_perturbation(pert, out_path)
        if png_path:
            export_png(pert, png_path)
        report = evaluate_attack(model, ds, pert, policy, seed=seed,
                                 config={"objective": obj.name, "epsilon": uap_cfg.epsilon})
        if report_path:
            Path(report_path).write_text(report.to_json())
    except RankUapError as exc:
        _fail(exc)
    click.echo(f"perturbation saved to {out_path} (training mDR {pert.train_mdr:.1f}%)")
    click.echo(f"evaluation mDR {report.mdr:.1f}%")


@main.command("distill")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--oracle", "oracle_spec", type=str, default=None,
              help="'victim' or 'folder:PATH'")
@click.option("--victim", "victim_path", type=click.Path(exists=True), default=None)
@click.option("--dataset", "dataset_path", type=click.Path(exists=True), default=None)
@click.option("--bins", type=int, default=None)
@click.option("--topk", type=int, default=None)
@click.option("--init", "init_path", type=click.Path(exists=True), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", "out_path", type=click.Path(), required=True)
def distill_cmd(config_path, oracle_spec, victim_path, dataset_path, bins, topk,
                init_path, seed, out_path):
    """Distill a substitute embedding from a black-box ranking oracle."""
    cfg = _load_config(config_path, "distill")
    seed = int(_opt(seed, cfg, "seed", 0))
    oracle_spec = _opt(oracle_spec, cfg, "oracle", "victim")
    try:
        ds = _load_dataset(_opt(dataset_path, cfg, "dataset", None), seed)
        if oracle_spec == "victim":
            victim_path = _opt(victim_path, cfg, "victim", None)
            if victim_path is None:
                raise ConfigurationError("oracle 'victim' needs --victim CHECKPOINT")
            oracle = VictimOracle(load_checkpoint(victim_path), ds)
        elif oracle_spec.startswith("folder:"):
            oracle = FolderOracle(oracle_spec.split(":", 1)[1])
        else:
            raise ConfigurationError(f"unknown oracle spec: {oracle_spec!r}")
        dcfg = DistillationConfig(
            num_bins=int(_opt(bins, cfg, "bins", 32)),
            top_k=int(_opt(topk, cfg, "topk", 10)),
            seed=seed,
        )
        init_path = _opt(init_path, cfg, "init", None)
        init_model = load_checkpoint(init_path) if init_path else None
        sub = distill(oracle, ArchSpec(), ds, dcfg, init_model=init_model)
        save_checkpoint(sub, out_path)
    except RankUapError as exc:
        _fail(exc)
    click.echo(
        f"substitute saved to {out_path} "
        f"(oracle budget {sub.metadata.get('oracle_budget', '?')} queries)"
    )


@main.command("evaluate")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--model", "model_path", type=click.Path(exists=True), required=True)
@click.option("--dataset", "dataset_path", type=click.Path(exists=True), default=None)
@click.option("--perturbation", "pert_path", type=click.Path(exists=True), default=None)
@click.option("--fixed-size", type=int, default=None)
@click.option("--query-only", is_flag=True, default=False)
@click.option("--seed", type=int, default=None)
@click.option("--json", "json_path", type=click.Path(), default=None)
@click.option("--csv", "csv_path", type=click.Path(), default=None)
def evaluate_cmd(config_path, model_path, dataset_path, pert_path, fixed_size,
                 query_only, seed, json_path, csv_path):
    """Report clean vs attacked retrieval metrics for a perturbation."""
    cfg = _load_config(config_path, "evaluate")
    seed = int(_opt(seed, cfg, "seed", 0))
    try:
        model = load_checkpoint(model_path)
        ds = _load_dataset(_opt(dataset_path, cfg, "dataset", None), seed)
        policy = _policy_from(cfg, None, None, _opt(fixed_size, cfg, "fixed_size", None), seed)
        pert = load_perturbation(pert_path) if pert_path else None
        report = evaluate_attack(
            model, ds, pert, policy, seed=seed, perturb_references=not query_only
        )
    except RankUapError as exc:
        _fail(exc)
    if json_path:
        Path(json_path).write_text(report.to_json())
    if csv_path:
        Path(csv_path).write_text(report.to_csv())
    click.echo(
        f"clean mAP {report.clean_map:.4f}  attacked mAP {report.attacked_map:.4f}  "
        f"mDR {report.mdr:.1f}%"
    )


@main.command("transfer")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--models", "model_paths", type=click.Path(exists=True), multiple=True, required=True)
@click.option("--perturbations", "pert_paths", type=click.Path(exists=True), multiple=True, required=True)
@click.option("--dataset", "dataset_path", type=click.Path(exists=True), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--json", "json_path", type=click.Path(), default=None)
def transfer_cmd(config_path, model_paths, pert_paths, dataset_path, seed, json_path):
    """Cross-model transfer matrix of mDR values."""
    cfg = _load_config(config_path, "transfer")
    seed = int(_opt(seed, cfg, "seed", 0))
    try:
        models = [load_checkpoint(p) for p in model_paths]
        perts = [load_perturbation(p) for p in pert_paths]
        ds = _load_dataset(_opt(dataset_path, cfg, "dataset", None), seed)
        policy = _policy_from(cfg, None, None, None, seed)
        matrix, _ = transfer_matrix(models, perts, ds, policy, seed=seed)
    except RankUapError as exc:
        _fail(exc)
    if json_path:
        Path(json_path).write_text(json.dumps({
            "models": list(model_paths),
            "perturbations": list(pert_paths),
            "mdr_matrix": matrix.tolist(),
        }, indent=2))
    for src, row in enumerate(matrix):
        click.echo(f"source {src}: " + "  ".join(f"{v:7.2f}" for v in row))


if __name__ == "__main__":
    main()
