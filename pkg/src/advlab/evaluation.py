"""Accuracy measurement, confusion matrices, and cross-model transfer grids.

The transfer protocol crafts one adversarial set per source model and scores
every target on that same set, so a cell isolates how well a perturbation
carries between architectures. A same-budget random sign-noise set rides
along as a pseudo-source baseline: transfer only means something if it hurts
more than generic noise.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attack import AttackConfig, pgd_attack
from .autodiff import Tensor
from .data import DatasetSplit, batch_iterator
from .errors import ReportError, RosterError

NOISE_SOURCE = "noise"

EVAL_CSV_HEADER = [
    "model", "dataset", "n_samples", "clean_acc", "adv_acc",
    "eps", "alpha", "steps", "random_start", "targeted",
]
TRANSFER_CSV_HEADER = ["source", "target", "adv_acc"]


def _fmt(x) -> str:
    return "" if x is None else f"{x:.6g}"


def _sig6(x):
    """Float reduced to 6 significant digits (the emission precision)."""
    return None if x is None else float(f"{float(x):.6g}")


@dataclass
class EvalReport:
    """Scalar metrics plus the confusion matrices they derive from."""

    model_id: str
    dataset: str
    n_samples: int
    clean_accuracy: float
    confusion: np.ndarray  # (K, K) ints, rows = true class
    precision: np.ndarray
    recall: np.ndarray
    adv_accuracy: float | None = None
    adv_confusion: np.ndarray | None = None
    attack: dict | None = None

    def to_dict(self):
        return {
            "model": self.model_id,
            "dataset": self.dataset,
            "n_samples": self.n_samples,
            "clean_acc": _sig6(self.clean_accuracy),
            "adv_acc": _sig6(self.adv_accuracy),
            "confusion": self.confusion.tolist(),
            "adv_confusion": None if self.adv_confusion is None else self.adv_confusion.tolist(),
            "precision": [_sig6(x) for x in self.precision],
            "recall": [_sig6(x) for x in self.recall],
            "attack": self.attack,
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(EVAL_CSV_HEADER)
        atk = self.attack or {}
        writer.writerow(
            [
                self.model_id,
                self.dataset,
                self.n_samples,
                _fmt(self.clean_accuracy),
                _fmt(self.adv_accuracy),
                _fmt(atk.get("epsilon")),
                _fmt(atk.get("alpha")),
                atk.get("steps", ""),
                atk.get("random_start", ""),
                atk.get("targeted", ""),
            ]
        )
        return buf.getvalue()


@dataclass
class TransferMatrix:
    """adv accuracy of every (source-crafted set, target model) pair."""

    model_ids: list
    cells: np.ndarray  # (S, S): row = source, column = target
    noise: np.ndarray  # (S,): per-target accuracy on the sign-noise set
    attack: dict = field(default_factory=dict)

    def cell(self, source: str, target: str) -> float:
        if source == NOISE_SOURCE:
            return float(self.noise[self.model_ids.index(target)])
        return float(self.cells[self.model_ids.index(source), self.model_ids.index(target)])

    def to_dict(self):
        rows = []
        for i, src in enumerate(self.model_ids):
            for j, tgt in enumerate(self.model_ids):
                rows.append({"source": src, "target": tgt, "adv_acc": _sig6(self.cells[i, j])})
        for j, tgt in enumerate(self.model_ids):
            rows.append({"source": NOISE_SOURCE, "target": tgt, "adv_acc": _sig6(self.noise[j])})
        return {"models": list(self.model_ids), "attack": self.attack, "cells": rows}

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(TRANSFER_CSV_HEADER)
        for row in self.to_dict()["cells"]:
            writer.writerow([row["source"], row["target"], _fmt(row["adv_acc"])])
        return buf.getvalue()

    def to_table(self) -> str:
        """Human-readable grid: rows are targets, columns are sources + noise."""
        headers = ["target \\ source"] + list(self.model_ids) + [NOISE_SOURCE]
        lines = ["  ".join(f"{h:>15}" for h in headers)]
        for j, tgt in enumerate(self.model_ids):
            cells = [f"{self.cells[i, j]:.4f}" for i in range(len(self.model_ids))]
            cells.append(f"{self.noise[j]:.4f}")
            lines.append("  ".join([f"{tgt:>15}"] + [f"{c:>15}" for c in cells]))
        return "\n".join(lines)


def _confusion_matrix(labels, predictions, k: int) -> np.ndarray:
    m = np.zeros((k, k), dtype=np.int64)
    np.add.at(m, (labels, predictions), 1)
    return m


def _precision_recall(confusion: np.ndarray):
    diag = np.diag(confusion).astype(np.float64)
    col = confusion.sum(axis=0).astype(np.float64)
    row = confusion.sum(axis=1).astype(np.float64)
    precision = np.divide(diag, col, out=np.zeros_like(diag), where=col > 0)
    recall = np.divide(diag, row, out=np.zeros_like(diag), where=row > 0)
    return precision, recall


def evaluate(
    model,
    split: DatasetSplit,
    attack: AttackConfig | None = None,
    batch_size: int = 64,
    seed: int = 0,
    model_id: str | None = None,
) -> EvalReport:
    """Clean (and optionally white-box adversarial) accuracy over a split."""
    k = split.num_classes
    clean_conf = np.zeros((k, k), dtype=np.int64)
    adv_conf = np.zeros((k, k), dtype=np.int64) if attack is not None else None
    for b, (images, labels) in enumerate(batch_iterator(split, batch_size)):
        clean_conf += _confusion_matrix(labels, model.predict(images), k)
        if attack is not None:
            result = pgd_attack(model, images, labels, attack, seed=seed + b)
            adv_conf += _confusion_matrix(labels, model.predict(result.adversarial), k)
    n = len(split)
    precision, recall = _precision_recall(clean_conf)
    return EvalReport(
        model_id=model_id or model.spec.arch,
        dataset=split.split,
        n_samples=n,
        clean_accuracy=float(np.trace(clean_conf)) / n,
        confusion=clean_conf,
        precision=precision,
        recall=recall,
        adv_accuracy=None if adv_conf is None else float(np.trace(adv_conf)) / n,
        adv_confusion=adv_conf,
        attack=attack.to_dict() if attack is not None else None,
    )


def _accuracy_on(model, batches) -> float:
    correct = 0
    total = 0
    for images, labels in batches:
        correct += int((model.predict(images) == labels).sum())
        total += len(labels)
    return correct / total


def transfer_eval(
    models: list,
    split: DatasetSplit,
    attack: AttackConfig,
    seed: int = 0,
    model_ids: list | None = None,
    batch_size: int = 64,
) -> TransferMatrix:
    """Craft one adversarial set per source model, score every target on it.

    Appends a sign-noise pseudo-source: each pixel shifted by +/- epsilon
    uniformly at random (then clipped), re-used for every target.
    """
    if len(models) < 2:
        raise RosterError(f"transfer evaluation needs at least 2 models, got {len(models)}")
    specs = [(m.spec.resolution, m.spec.channels, m.spec.classes) for m in models]
    if len(set(specs)) != 1:
        raise RosterError(f"roster models disagree on input spec or classes: {specs}")
    if model_ids is None:
        model_ids = []
        for i, m in enumerate(models):
            base = m.spec.arch
            model_ids.append(base if sum(x.spec.arch == base for x in models) == 1 else f"{base}{i}")
    if len(set(model_ids)) != len(model_ids):
        raise RosterError(f"duplicate model ids in roster: {model_ids}")

    clean_batches = list(batch_iterator(split, batch_size))
    s = len(models)
    cells = np.zeros((s, s), dtype=np.float64)
    for i, source in enumerate(models):
        adv_batches = []
        for b, (images, labels) in enumerate(clean_batches):
            result = pgd_attack(source, images, labels, attack, seed=seed + 1000 * i + b)
            adv_batches.append((result.adversarial, labels))
        for j, target in enumerate(models):
            cells[i, j] = _accuracy_on(target, adv_batches)

    noise_rng = np.random.default_rng(np.random.SeedSequence([int(seed), 99]))
    noise_batches = []
    for images, labels in clean_batches:
        signs = noise_rng.integers(0, 2, size=images.shape).astype(np.float32) * 2.0 - 1.0
        noisy = np.clip(images.data + attack.epsilon * signs, 0.0, 1.0).astype(np.float32)
        noise_batches.append((Tensor(noisy), labels))
    noise = np.array([_accuracy_on(m, noise_batches) for m in models])

    return TransferMatrix(model_ids=list(model_ids), cells=cells, noise=noise, attack=attack.to_dict())


# ----------------------------------------------------------------------
# emission and ingestion
# ----------------------------------------------------------------------


def emit_report(report, fmt: str, path) -> Path:
    """Serialize an EvalReport or TransferMatrix as 'csv' or 'json'."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        if fmt == "json":
            path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
        elif fmt == "csv":
            path.write_text(report.to_csv())
        else:
            raise ReportError(f"unknown report format '{fmt}'")
    except OSError as exc:
        raise ReportError(f"cannot write report to '{path}': {exc}") from exc
    return path


def load_eval_report(path) -> EvalReport:
    d = json.loads(Path(path).read_text())
    return EvalReport(
        model_id=d["model"],
        dataset=d["dataset"],
        n_samples=d["n_samples"],
        clean_accuracy=d["clean_acc"],
        confusion=np.array(d["confusion"], dtype=np.int64),
        precision=np.array(d["precision"]),
        recall=np.array(d["recall"]),
        adv_accuracy=d["adv_acc"],
        adv_confusion=None if d["adv_confusion"] is None else np.array(d["adv_confusion"], dtype=np.int64),
        attack=d["attack"],
    )


def load_transfer_matrix(path) -> TransferMatrix:
    d = json.loads(Path(path).read_text())
    ids = d["models"]
    s = len(ids)
    cells = np.zeros((s, s))
    noise = np.zeros(s)
    for row in d["cells"]:
        j = ids.index(row["target"])
        if row["source"] == NOISE_SOURCE:
            noise[j] = row["adv_acc"]
        else:
            cells[ids.index(row["source"]), j] = row["adv_acc"]
    return TransferMatrix(model_ids=list(ids), cells=cells, noise=noise, attack=d.get("attack", {}))
