"""Clean and adversarial training loops with Adam, logging, and checkpoints.

One master seed derives independent streams for shuffling, augmentation,
attack generation, and validation attacks; each stream is re-derivable from
(seed, stream id, epoch), so training can resume from a saved state and
reproduce the uninterrupted trajectory bit-exactly.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .attack import AttackConfig, pgd_attack
from .autodiff import Tensor
from .data import DatasetSplit, batch_iterator
from .errors import TrainingError, UsageError
from .models import Model, save_checkpoint

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# stream identifiers for deriving independent per-epoch generators
_STREAM_SHUFFLE = 0
_STREAM_AUGMENT = 1
_STREAM_ATTACK = 2
_STREAM_VAL_ATTACK = 3

TRAINLOG_CSV_HEADER = ["epoch", "loss", "acc", "val_loss", "val_acc", "adv_val_acc", "seconds"]


def stream_seed(master_seed: int, stream: int, epoch: int) -> int:
    """Stable derived integer seed for one (stream, epoch) cell."""
    seq = np.random.SeedSequence([int(master_seed), int(stream), int(epoch)])
    return int(seq.generate_state(1, dtype=np.uint64)[0])


def epoch_rng(master_seed: int, stream: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence([int(master_seed), int(stream), int(epoch)])
    )


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings; adversarial runs also carry an attack budget."""

    learning_rate: float = 1e-4
    batch_size: int = 32
    epochs: int = 20
    optimizer: str = "adam"
    adversarial: bool = False
    adv_mix: float = 0.5  # fraction of each batch replaced by attacked samples
    attack: AttackConfig | None = None
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise TrainingError(f"epochs must be >= 1, got {self.epochs}")
        if not 0.0 <= self.adv_mix <= 1.0:
            raise TrainingError(f"adv_mix must lie in [0, 1], got {self.adv_mix}")
        if self.optimizer != "adam":
            raise TrainingError(f"unsupported optimizer '{self.optimizer}'")
        if self.batch_size < 1:
            raise TrainingError(f"batch_size must be >= 1, got {self.batch_size}")

    def to_dict(self):
        d = {
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "optimizer": self.optimizer,
            "adversarial": self.adversarial,
            "adv_mix": self.adv_mix,
            "seed": self.seed,
        }
        d["attack"] = self.attack.to_dict() if self.attack else None
        return d


@dataclass
class EpochStats:
    epoch: int
    loss: float
    acc: float
    val_loss: float
    val_acc: float
    adv_val_acc: float | None
    seconds: float


@dataclass
class TrainLog:
    """Per-epoch metrics; one entry per completed epoch."""

    entries: list = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def to_rows(self):
        rows = []
        for e in self.entries:
            rows.append(
                {
                    "epoch": e.epoch,
                    "loss": f"{e.loss:.6g}",
                    "acc": f"{e.acc:.6g}",
                    "val_loss": f"{e.val_loss:.6g}",
                    "val_acc": f"{e.val_acc:.6g}",
                    "adv_val_acc": "" if e.adv_val_acc is None else f"{e.adv_val_acc:.6g}",
                    "seconds": f"{e.seconds:.3f}",
                }
            )
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=TRAINLOG_CSV_HEADER, lineterminator="\n")
        writer.writeheader()
        writer.writerows(self.to_rows())
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"epochs": self.to_rows()}, indent=2, sort_keys=True) + "\n"

    def write(self, stem) -> None:
        stem = Path(stem)
        stem.with_suffix(".csv").write_text(self.to_csv())
        stem.with_suffix(".json").write_text(self.to_json())


@dataclass
class AdamState:
    """First/second moment buffers plus the shared step counter."""

    m: dict
    v: dict
    t: int = 0

    @staticmethod
    def zeros_like(params) -> "AdamState":
        return AdamState(
            m={name: np.zeros_like(p.data) for name, p in params.items()},
            v={name: np.zeros_like(p.data) for name, p in params.items()},
        )


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    state.t += 1
    b1t = 1.0 - ADAM_BETA1**state.t
    b2t = 1.0 - ADAM_BETA2**state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter '{name}'")
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * (g * g)
        m_hat = m / b1t
        v_hat = v / b2t
        p.data = p.data - (lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)).astype(p.data.dtype)
    return state


@dataclass
class TrainResult:
    log: TrainLog
    best_epoch: int
    best_metric: float
    best_params: dict
    opt_state: AdamState


def _evaluate_split(model: Model, split: DatasetSplit, batch_size: int):
    """Mean loss and accuracy on a split, without augmentation."""
    total_loss = 0.0
    correct = 0
    n = 0
    for images, labels in batch_iterator(split, batch_size):
        logits = model.forward(images)
        losses = ad.per_sample_cross_entropy(logits.data, labels)
        total_loss += float(losses.sum())
        correct += int((np.argmax(logits.data, axis=1) == labels).sum())
        n += len(labels)
    return total_loss / n, correct / n


def _adversarial_accuracy(model: Model, split: DatasetSplit, attack: AttackConfig, batch_size: int, seed: int):
    correct = 0
    n = 0
    for b, (images, labels) in enumerate(batch_iterator(split, batch_size)):
        result = pgd_attack(model, images, labels, attack, seed=seed + b)
        correct += int((model.predict(result.adversarial) == labels).sum())
        n += len(labels)
    return correct / n


def _train(
    model: Model,
    train_split: DatasetSplit,
    val_split: DatasetSplit,
    cfg: TrainConfig,
    out_dir=None,
    start_epoch: int = 0,
    opt_state: AdamState | None = None,
    progress=None,
) -> TrainResult:
    if cfg.adversarial and cfg.adv_mix > 0 and cfg.attack is None:
        raise TrainingError("adversarial training requires an attack config")
    state = opt_state if opt_state is not None else AdamState.zeros_like(model.params)
    log = TrainLog()
    best_metric = -1.0
    best_epoch = -1
    best_params = model.state_arrays()

    for epoch in range(start_epoch, cfg.epochs):
        tic = time.perf_counter()
        aug_rng = epoch_rng(cfg.seed, _STREAM_AUGMENT, epoch)
        shuffle = stream_seed(cfg.seed, _STREAM_SHUFFLE, epoch)
        epoch_loss = 0.0
        epoch_correct = 0
        seen = 0
        batches = batch_iterator(train_split, cfg.batch_size, shuffle_seed=shuffle, augment_rng=aug_rng)
        for batch_idx, (images, labels) in enumerate(batches):
            if cfg.adversarial and cfg.adv_mix > 0:
                n_adv = int(np.ceil(cfg.adv_mix * len(labels)))
                adv = pgd_attack(
                    model,
                    Tensor(images.data[:n_adv]),
                    labels[:n_adv],
                    cfg.attack,
                    seed=stream_seed(cfg.seed, _STREAM_ATTACK, epoch) + batch_idx,
                )
                mixed = np.concatenate([adv.adversarial.data, images.data[n_adv:]], axis=0)
                images = Tensor(mixed)
            logits = model.forward(images)
            loss = ad.cross_entropy(logits, labels)
            loss_value = float(loss.item())
            if not np.isfinite(loss_value):
                raise TrainingError(f"divergence: non-finite loss at epoch {epoch + 1}, batch {batch_idx}")
            model.zero_grad()
            loss.backward()
            grads = {name: p.grad for name, p in model.params.items()}
            adam_step(model.params, grads, state, cfg.learning_rate)
            epoch_loss += loss_value * len(labels)
            epoch_correct += int((np.argmax(logits.data, axis=1) == labels).sum())
            seen += len(labels)

        val_loss, val_acc = _evaluate_split(model, val_split, cfg.batch_size)
        adv_val_acc = None
        if cfg.adversarial:
            adv_val_acc = _adversarial_accuracy(
                model, val_split, cfg.attack, cfg.batch_size,
                seed=stream_seed(cfg.seed, _STREAM_VAL_ATTACK, epoch),
            )
        entry = EpochStats(
            epoch=epoch + 1,
            loss=epoch_loss / seen,
            acc=epoch_correct / seen,
            val_loss=val_loss,
            val_acc=val_acc,
            adv_val_acc=adv_val_acc,
            seconds=time.perf_counter() - tic,
        )
        log.entries.append(entry)
        metric = adv_val_acc if cfg.adversarial else val_acc
        if metric > best_metric:
            best_metric = metric
            best_epoch = epoch + 1
            best_params = model.state_arrays()
        if progress is not None:
            progress(entry)

    result = TrainResult(
        log=log, best_epoch=best_epoch, best_metric=best_metric,
        best_params=best_params, opt_state=state,
    )
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, out_dir / "checkpoint_final")
        final_params = model.state_arrays()
        model.load_state_arrays(best_params)
        save_checkpoint(model, out_dir / "checkpoint_best")
        model.load_state_arrays(final_params)
        log.write(out_dir / "trainlog")
    return result


def train_clean(model, train_split, val_split, cfg: TrainConfig, out_dir=None, **kwargs) -> TrainResult:
    """Standard training on augmented clean batches."""
    if cfg.adversarial:
        raise UsageError("train_clean requires cfg.adversarial = False")
    return _train(model, train_split, val_split, cfg, out_dir=out_dir, **kwargs)


def train_adversarial(model, train_split, val_split, cfg: TrainConfig, out_dir=None, **kwargs) -> TrainResult:
    """Training on mixed batches with attacks regenerated against the live model.

    Each batch, the first ceil(adv_mix * N) samples are replaced by their
    attacked versions before the optimizer step; with ``adv_mix`` = 0 attack
    generation is skipped entirely and the run matches clean training.
    """
    if not cfg.adversarial:
        raise UsageError("train_adversarial requires cfg.adversarial = True")
    return _train(model, train_split, val_split, cfg, out_dir=out_dir, **kwargs)


# ----------------------------------------------------------------------
# resumable optimizer state
# ----------------------------------------------------------------------


def save_training_state(stem, model: Model, state: AdamState, completed_epochs: int) -> Path:
    """Persist parameters plus Adam moments so training can continue bit-exactly."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    chunks = []
    offset = 0
    for kind, mapping in (("param", {n: p.data for n, p in model.params.items()}),
                          ("m", state.m), ("v", state.v)):
        for name, arr in mapping.items():
            raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            entries.append({"kind": kind, "name": name, "shape": list(arr.shape),
                            "offset": offset, "length": len(raw)})
            chunks.append(raw)
            offset += len(raw)
    manifest = {
        "format": "advlab-trainstate/1",
        "spec": model.spec.to_dict(),
        "seed": model.seed,
        "adam_t": state.t,
        "completed_epochs": completed_epochs,
        "arrays": entries,
    }
    stem.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    stem.with_suffix(".bin").write_bytes(b"".join(chunks))
    return stem


def load_training_state(stem, model: Model):
    """Restore (into ``model``) the parameters and Adam state saved earlier.

    Returns (AdamState, completed_epochs).
    """
    stem = Path(stem)
    manifest = json.loads(stem.with_suffix(".json").read_text())
    if manifest.get("format") != "advlab-trainstate/1":
        raise TrainingError(f"unsupported training-state format {manifest.get('format')!r}")
    blob = stem.with_suffix(".bin").read_bytes()
    buckets = {"param": {}, "m": {}, "v": {}}
    for entry in manifest["arrays"]:
        raw = blob[entry["offset"] : entry["offset"] + entry["length"]]
        buckets[entry["kind"]][entry["name"]] = (
            np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).copy()
        )
    model.load_state_arrays(buckets["param"])
    state = AdamState(m=buckets["m"], v=buckets["v"], t=manifest["adam_t"])
    return state, manifest["completed_epochs"]
