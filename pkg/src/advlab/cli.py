"""Command-line front end: synth, train, attack, transfer, report.

Every command reads one declarative JSON config, resolves defaults
explicitly, and leaves a manifest (config hash + seeds + artifact paths)
sufficient to reproduce the run byte-for-byte. Progress goes to stderr,
machine-readable results to files and stdout.
"""

from __future__ import annotations

import hashlib
import json
import sys
from pathlib import Path

import click

from . import __version__
from .attack import AttackConfig, export_adversarial_pngs, pgd_attack
from .data import (
    batch_iterator,
    export_image_directory,
    load_image_directory,
    split_dataset,
    synth_dataset,
)
from .errors import AdvlabError, ConfigError, RosterError, SpecError
from .evaluation import emit_report, evaluate, transfer_eval
from .models import ClassifierSpec, build_model, load_checkpoint
from .training import TrainConfig, train_adversarial, train_clean

MANIFEST_NAME = "manifest.json"


# ----------------------------------------------------------------------
# strict config parsing
# ----------------------------------------------------------------------

_DATASET_FIELDS = {
    "source": "synthetic",
    "root": None,
    "resolution": 32,
    "seed": 0,
    "per_class": 200,
    "noise_std": 0.05,
    "split": [0.8, 0.1, 0.1],
}
_MODEL_FIELDS = {
    "arch": "vit",
    "resolution": 32,
    "channels": 3,
    "classes": 5,
    "patch_size": 4,
    "embed_dim": 64,
    "heads": 4,
    "depth": 4,
    "mlp_ratio": 2,
    "seed": 1,
}
_TRAIN_FIELDS = {
    "learning_rate": 1e-4,
    "batch_size": 32,
    "epochs": 20,
    "optimizer": "adam",
    "adversarial": False,
    "adv_mix": 0.5,
    "seed": 2,
}
_ATTACK_FIELDS = {
    "epsilon": 8.0 / 255.0,
    "alpha": 2.0 / 255.0,
    "steps": 10,
    "random_start": False,
    "targeted": False,
    "seed": 3,
}
_TOP_FIELDS = ("dataset", "model", "train", "attack", "output_dir")


def _parse_section(raw, defaults, path):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected an object")
    unknown = set(raw) - set(defaults)
    if unknown:
        raise ConfigError(f"{path}.{sorted(unknown)[0]}: unknown key")
    resolved = dict(defaults)
    resolved.update(raw)
    return resolved


def load_run_config(config_path) -> dict:
    """Parse and validate a run config; unknown keys are rejected.

    Returns the fully resolved config (defaults filled in) with paths
    resolved relative to the config file's directory.
    """
    config_path = Path(config_path)
    try:
        raw = json.loads(config_path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file '{config_path}' not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file '{config_path}' is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root: expected an object")
    unknown = set(raw) - set(_TOP_FIELDS)
    if unknown:
        raise ConfigError(f"{sorted(unknown)[0]}: unknown key")

    base = config_path.resolve().parent
    cfg = {
        "dataset": _parse_section(raw.get("dataset"), _DATASET_FIELDS, "dataset"),
        "model": _parse_section(raw.get("model"), _MODEL_FIELDS, "model"),
        "train": _parse_section(raw.get("train"), _TRAIN_FIELDS, "train"),
        "attack": _parse_section(raw.get("attack"), _ATTACK_FIELDS, "attack"),
        "output_dir": raw.get("output_dir", "run"),
    }
    ds = cfg["dataset"]
    if ds["source"] not in ("synthetic", "directory"):
        raise ConfigError(f"dataset.source: expected 'synthetic' or 'directory', got '{ds['source']}'")
    if ds["source"] == "directory":
        if not ds["root"]:
            raise ConfigError("dataset.root: required when dataset.source is 'directory'")
        ds["root"] = str((base / ds["root"]).resolve())
    if len(ds["split"]) != 3 or abs(sum(ds["split"]) - 1.0) > 1e-9:
        raise ConfigError("dataset.split: expected three ratios summing to 1")
    cfg["output_dir"] = str((base / cfg["output_dir"]).resolve())
    return cfg


def apply_seed_override(cfg: dict, seed: int) -> dict:
    """Replace every section seed with values derived from one master seed."""
    cfg = json.loads(json.dumps(cfg))
    for offset, section in enumerate(("dataset", "model", "train", "attack")):
        cfg[section]["seed"] = int(seed) + offset
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def _spec_from_config(cfg) -> ClassifierSpec:
    m = cfg["model"]
    return ClassifierSpec(
        arch=m["arch"],
        resolution=m["resolution"],
        channels=m["channels"],
        classes=m["classes"],
        patch_size=m["patch_size"],
        embed_dim=m["embed_dim"],
        heads=m["heads"],
        depth=m["depth"],
        mlp_ratio=m["mlp_ratio"],
    )


def _attack_from_config(cfg) -> AttackConfig:
    a = cfg["attack"]
    return AttackConfig(
        epsilon=a["epsilon"],
        alpha=a["alpha"],
        steps=a["steps"],
        random_start=a["random_start"],
        targeted=a["targeted"],
    )


def _train_from_config(cfg, adversarial: bool) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(
        learning_rate=t["learning_rate"],
        batch_size=t["batch_size"],
        epochs=t["epochs"],
        optimizer=t["optimizer"],
        adversarial=adversarial,
        adv_mix=t["adv_mix"],
        attack=_attack_from_config(cfg) if adversarial else None,
        seed=t["seed"],
    )


def _build_dataset(cfg):
    ds = cfg["dataset"]
    if ds["source"] == "synthetic":
        pool = synth_dataset(ds["seed"], ds["per_class"], ds["resolution"], ds["noise_std"])
    else:
        pool = load_image_directory(ds["root"], ds["resolution"])
    return split_dataset(pool, tuple(ds["split"]), ds["seed"])


def write_manifest(out_dir: Path, command: str, cfg: dict, artifacts: dict) -> Path:
    manifest = {
        "command": command,
        "package_version": __version__,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "seeds": {section: cfg[section]["seed"] for section in ("dataset", "model", "train", "attack")},
        "artifacts": artifacts,
    }
    path = out_dir / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _status(message: str) -> None:
    click.echo(message, err=True)


def _fail(exc: AdvlabError) -> None:
    click.echo(f"error: {exc}", err=True)
    code = 2 if isinstance(exc, (ConfigError, SpecError, RosterError)) else 1
    sys.exit(code)


# ----------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------


@click.group()
@click.version_option(__version__)
def main():
    """Adversarial robustness lab: data, training, attacks, transfer, reports."""


@main.command("synth")
@click.option("--config", "config_path", required=True, type=click.Path(), help="Run config JSON.")
@click.option("--out", "out_dir", default=None, type=click.Path(), help="Export directory.")
@click.option("--seed", default=None, type=int, help="Override all config seeds.")
def cmd_synth(config_path, out_dir, seed):
    """Generate the synthetic dataset and export it as root/<class>/*.png."""
    try:
        cfg = load_run_config(config_path)
        if seed is not None:
            cfg = apply_seed_override(cfg, seed)
        ds = cfg["dataset"]
        if ds["source"] != "synthetic":
            raise ConfigError("dataset.source: synth command requires 'synthetic'")
        out = Path(out_dir) if out_dir else Path(cfg["output_dir"]) / "synth"
        out.mkdir(parents=True, exist_ok=True)
        pool = synth_dataset(ds["seed"], ds["per_class"], ds["resolution"], ds["noise_std"])
        export_image_directory(pool, out / "images")
        write_manifest(out, "synth", cfg, {"images": "images"})
        _status(f"exported {len(pool)} images to {out / 'images'}")
        click.echo(str(out))
    except AdvlabError as exc:
        _fail(exc)


@main.command("train")
@click.option("--config", "config_path", required=True, type=click.Path(), help="Run config JSON.")
@click.option("--adversarial", is_flag=True, default=False, help="Train on attacked batches.")
@click.option("--out", "out_dir", default=None, type=click.Path(), help="Output directory override.")
@click.option("--seed", default=None, type=int, help="Override all config seeds.")
def cmd_train(config_path, adversarial, out_dir, seed):
    """Train a model and write checkpoints, logs, and an evaluation report."""
    try:
        cfg = load_run_config(config_path)
        if seed is not None:
            cfg = apply_seed_override(cfg, seed)
        adversarial = adversarial or cfg["train"]["adversarial"]
        cfg["train"]["adversarial"] = adversarial
        out = Path(out_dir) if out_dir else Path(cfg["output_dir"])
        out.mkdir(parents=True, exist_ok=True)

        train_split, val_split, test_split = _build_dataset(cfg)
        spec = _spec_from_config(cfg)
        model = build_model(spec, cfg["model"]["seed"])
        tcfg = _train_from_config(cfg, adversarial)
        _status(
            f"training {spec.arch} ({model.parameter_count} params) for {tcfg.epochs} epochs "
            f"on {len(train_split)} samples{' [adversarial]' if adversarial else ''}"
        )

        def progress(entry):
            extra = "" if entry.adv_val_acc is None else f" adv_val_acc={entry.adv_val_acc:.4f}"
            _status(
                f"epoch {entry.epoch:3d}  loss={entry.loss:.4f} acc={entry.acc:.4f} "
                f"val_acc={entry.val_acc:.4f}{extra} ({entry.seconds:.1f}s)"
            )

        trainer = train_adversarial if adversarial else train_clean
        trainer(model, train_split, val_split, tcfg, out_dir=out, progress=progress)

        attack = _attack_from_config(cfg)
        report = evaluate(
            model, test_split, attack=attack, batch_size=tcfg.batch_size,
            seed=cfg["attack"]["seed"], model_id=spec.arch,
        )
        emit_report(report, "json", out / "eval_report.json")
        emit_report(report, "csv", out / "eval_report.csv")
        write_manifest(
            out, "train", cfg,
            {
                "checkpoint_best": "checkpoint_best",
                "checkpoint_final": "checkpoint_final",
                "trainlog": "trainlog",
                "eval_report": "eval_report",
            },
        )
        clean = f"{report.clean_accuracy:.4f}"
        adv = f"{report.adv_accuracy:.4f}"
        click.echo(f"{spec.arch} test clean_acc={clean} adv_acc={adv}")
    except AdvlabError as exc:
        _fail(exc)


@main.command("attack")
@click.option("--config", "config_path", required=True, type=click.Path(), help="Run config JSON.")
@click.option("--model", "model_path", required=True, type=click.Path(), help="Checkpoint stem.")
@click.option("--out", "out_dir", default=None, type=click.Path(), help="Output directory override.")
@click.option("--seed", default=None, type=int, help="Override all config seeds.")
def cmd_attack(config_path, model_path, out_dir, seed):
    """Attack the test split and export clean/adversarial PNG pairs."""
    try:
        cfg = load_run_config(config_path)
        if seed is not None:
            cfg = apply_seed_override(cfg, seed)
        out = Path(out_dir) if out_dir else Path(cfg["output_dir"]) / "attack"
        out.mkdir(parents=True, exist_ok=True)
        model = load_checkpoint(_checkpoint_stem(model_path))
        _, _, test_split = _build_dataset(cfg)
        ds = cfg["dataset"]
        if (model.spec.resolution, model.spec.channels) != (ds["resolution"], 3):
            raise SpecError(
                f"checkpoint expects {model.spec.channels}x{model.spec.resolution}px inputs, "
                f"dataset provides 3x{ds['resolution']}px"
            )
        if model.spec.classes != test_split.num_classes:
            raise SpecError(
                f"checkpoint has {model.spec.classes} classes, dataset has {test_split.num_classes}"
            )
        attack = _attack_from_config(cfg)
        batch = cfg["train"]["batch_size"]
        ids = [s.id for s in test_split.samples]
        offset = 0
        linf_total = 0.0
        success_total = 0
        for b, (images, labels) in enumerate(batch_iterator(test_split, batch)):
            result = pgd_attack(model, images, labels, attack, seed=cfg["attack"]["seed"] + b)
            export_adversarial_pngs(
                images, result, ids[offset : offset + len(labels)], out / "images", attack
            )
            linf_total += float(result.linf.sum())
            success_total += int(result.success.sum())
            offset += len(labels)
        write_manifest(out, "attack", cfg, {"images": "images"})
        click.echo(
            f"attacked {offset} images: mean_linf={linf_total / offset:.6g} "
            f"success_rate={success_total / offset:.4f} (eps={attack.epsilon:.6g})"
        )
    except AdvlabError as exc:
        _fail(exc)


def _checkpoint_stem(path) -> Path:
    p = Path(path)
    if p.suffix in (".json", ".bin"):
        p = p.with_suffix("")
    if not p.with_suffix(".json").exists():
        raise ConfigError(f"checkpoint '{p}' not found (expected {p}.json and {p}.bin)")
    return p


@main.command("transfer")
@click.option("--config", "config_path", required=True, type=click.Path(), help="Run config JSON.")
@click.option("--model", "model_paths", required=True, multiple=True, type=click.Path(),
              help="Checkpoint stem; repeat for each roster member.")
@click.option("--out", "out_dir", default=None, type=click.Path(), help="Output directory override.")
@click.option("--seed", default=None, type=int, help="Override all config seeds.")
@click.option("--format", "fmt", type=click.Choice(["csv", "json", "both"]), default="both",
              help="Matrix serialization format.")
def cmd_transfer(config_path, model_paths, out_dir, seed, fmt):
    """Cross-model transfer study over every pair of supplied checkpoints."""
    try:
        cfg = load_run_config(config_path)
        if seed is not None:
            cfg = apply_seed_override(cfg, seed)
        if len(model_paths) < 2:
            raise RosterError(f"need at least 2 checkpoints, got {len(model_paths)}")
        out = Path(out_dir) if out_dir else Path(cfg["output_dir"]) / "transfer"
        out.mkdir(parents=True, exist_ok=True)
        models = [load_checkpoint(_checkpoint_stem(p)) for p in model_paths]
        _, _, test_split = _build_dataset(cfg)
        attack = _attack_from_config(cfg)
        matrix = transfer_eval(
            models, test_split, attack,
            seed=cfg["attack"]["seed"], batch_size=cfg["train"]["batch_size"],
        )
        artifacts = {}
        if fmt in ("csv", "both"):
            emit_report(matrix, "csv", out / "transfer_matrix.csv")
            artifacts["transfer_matrix_csv"] = "transfer_matrix.csv"
        if fmt in ("json", "both"):
            emit_report(matrix, "json", out / "transfer_matrix.json")
            artifacts["transfer_matrix_json"] = "transfer_matrix.json"
        write_manifest(out, "transfer", cfg, artifacts)
        click.echo(matrix.to_table())
    except AdvlabError as exc:
        _fail(exc)


@main.command("report")
@click.option("--run", "run_dir", required=True, type=click.Path(), help="Directory of run outputs.")
def cmd_report(run_dir):
    """Consolidate manifests under a directory into summary tables."""
    try:
        run_dir = Path(run_dir)
        manifests = sorted(run_dir.glob("**/manifest.json"))
        if not manifests:
            raise ConfigError(f"no {MANIFEST_NAME} found under '{run_dir}'")
        summary = _collect_report(manifests)
        out = run_dir / "report"
        out.mkdir(parents=True, exist_ok=True)
        _write_report(out, summary)
        click.echo((out / "summary.md").read_text())
    except AdvlabError as exc:
        _fail(exc)


def _collect_report(manifests):
    clean_rows, adv_rows, loss_curves, defense_rows = [], [], [], []
    for manifest_path in manifests:
        manifest = json.loads(manifest_path.read_text())
        if manifest.get("command") != "train":
            continue
        run = manifest_path.parent
        arch = manifest["config"]["model"]["arch"]
        adversarial = manifest["config"]["train"]["adversarial"]
        report_path = run / "eval_report.json"
        report = json.loads(report_path.read_text()) if report_path.exists() else None
        log_path = run / "trainlog.json"
        log = json.loads(log_path.read_text()) if log_path.exists() else None
        label = f"{arch}{'+advtrain' if adversarial else ''}"
        if report:
            if adversarial:
                defense_rows.append({"model": label, "adv_acc": report["adv_acc"],
                                     "clean_acc": report["clean_acc"]})
            else:
                clean_rows.append({"model": label, "clean_acc": report["clean_acc"]})
                adv_rows.append({"model": label, "clean_acc": report["clean_acc"],
                                 "adv_acc": report["adv_acc"]})
        if log and adversarial:
            for row in log["epochs"]:
                loss_curves.append({"model": label, "epoch": row["epoch"], "loss": row["loss"]})
    return {
        "clean_accuracy": clean_rows,
        "clean_vs_adversarial": adv_rows,
        "adversarial_training_loss": loss_curves,
        "post_defense_accuracy": defense_rows,
    }


def _write_report(out: Path, summary: dict) -> None:
    import csv as _csv

    sections = {
        "clean_accuracy": (["model", "clean_acc"], "Clean test accuracy per model"),
        "clean_vs_adversarial": (["model", "clean_acc", "adv_acc"], "Clean vs adversarial accuracy"),
        "adversarial_training_loss": (["model", "epoch", "loss"], "Adversarial training loss curve"),
        "post_defense_accuracy": (["model", "clean_acc", "adv_acc"], "Accuracy after adversarial training"),
    }
    lines = ["# Experiment summary", ""]
    for key, (header, title) in sections.items():
        rows = summary[key]
        lines.append(f"## {title}")
        lines.append("")
        if not rows:
            lines.append("_absent: no matching run artifacts_")
            lines.append("")
            continue
        with (out / f"{key}.csv").open("w", newline="") as fh:
            writer = _csv.DictWriter(fh, fieldnames=header, lineterminator="\n")
            writer.writeheader()
            for row in rows:
                writer.writerow({k: row.get(k, "") for k in header})
        lines.append("| " + " | ".join(header) + " |")
        lines.append("|" + "---|" * len(header))
        for row in rows:
            lines.append("| " + " | ".join(str(row.get(k, "")) for k in header) + " |")
        lines.append("")
    (out / "summary.md").write_text("\n".join(lines))


if __name__ == "__main__":
    main()
