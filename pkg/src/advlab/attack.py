"""Iterative sign-gradient attacks with projection onto the budget ball.

The attack ascends the cross-entropy loss in raw pixel space: each step adds
``alpha * sign(input gradient)`` and projects back into the intersection of
the L-infinity ball of radius ``epsilon`` around the clean batch and the
valid pixel range [0, 1].
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .autodiff import Tensor, per_sample_cross_entropy
from .errors import AttackError, DimensionError, ParameterError

DEFAULT_EPSILON = 8.0 / 255.0
DEFAULT_ALPHA = 2.0 / 255.0
DEFAULT_STEPS = 10


@dataclass(frozen=True)
class AttackConfig:
    """Budget and schedule of the iterative attack, in pixel units."""

    epsilon: float = DEFAULT_EPSILON
    alpha: float = DEFAULT_ALPHA
    steps: int = DEFAULT_STEPS
    random_start: bool = False
    targeted: bool = False

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ParameterError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.alpha <= 0.0:
            raise ParameterError(f"alpha must be positive, got {self.alpha}")
        if self.steps < 1:
            raise ParameterError(f"steps must be >= 1, got {self.steps}")

    def to_dict(self):
        return {
            "epsilon": self.epsilon,
            "alpha": self.alpha,
            "steps": self.steps,
            "random_start": self.random_start,
            "targeted": self.targeted,
        }

    @staticmethod
    def from_dict(d):
        return AttackConfig(**d)


@dataclass
class AttackResult:
    """Perturbed batch plus per-sample distance metrics and loss history."""

    adversarial: Tensor
    linf: np.ndarray
    l2: np.ndarray
    loss_trajectory: np.ndarray  # (steps + 1, N)
    success: np.ndarray  # prediction changed from the clean prediction
    iterates: np.ndarray | None = None  # (steps + 1, N, C, H, W) when requested


def project(x: Tensor, x_orig: Tensor, epsilon: float) -> Tensor:
    """Clamp ``x`` per pixel into [x_orig - eps, x_orig + eps] and [0, 1]."""
    if x.shape != x_orig.shape:
        raise DimensionError(f"project shape mismatch: {x.shape} vs {x_orig.shape}")
    lo = np.maximum(x_orig.data - epsilon, 0.0)
    hi = np.minimum(x_orig.data + epsilon, 1.0)
    return Tensor(np.clip(x.data, lo, hi).astype(x.dtype), dtype=x.dtype)


def _project_values(x, orig, epsilon):
    lo = np.maximum(orig - epsilon, 0.0)
    hi = np.minimum(orig + epsilon, 1.0)
    return np.clip(x, lo, hi)


def pgd_attack(
    model, images: Tensor, labels, cfg: AttackConfig, seed: int = 0, record_iterates: bool = False
) -> AttackResult:
    """Run ``cfg.steps`` sign-gradient iterations against ``model``.

    ``labels`` are the true labels for the default untargeted attack (loss
    ascent) or the desired labels when ``cfg.targeted`` (loss descent). The
    model's parameters are left untouched. Deterministic for fixed inputs;
    ``seed`` only feeds the optional random start.
    """
    labels = np.asarray(labels)
    orig = images.data
    clean_pred = model.predict(images)

    x = orig.copy()
    if cfg.random_start:
        rng = np.random.default_rng(np.random.SeedSequence([int(seed)]))
        x = x + rng.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape).astype(x.dtype)
        x = _project_values(x, orig, cfg.epsilon).astype(x.dtype)

    step = np.asarray(cfg.alpha, dtype=x.dtype)
    direction = -1.0 if cfg.targeted else 1.0
    trajectory = np.empty((cfg.steps + 1, orig.shape[0]), dtype=np.float64)
    iterates = [x.copy()] if record_iterates else None
    for t in range(cfg.steps):
        grad, losses = model.loss_and_input_gradient(Tensor(x, dtype=images.dtype), labels)
        if not np.all(np.isfinite(grad.data)):
            raise AttackError(f"non-finite input gradient at attack step {t}")
        trajectory[t] = losses
        x = x + direction * step * np.sign(grad.data)
        x = _project_values(x, orig, cfg.epsilon).astype(orig.dtype)
        if record_iterates:
            iterates.append(x.copy())

    adv = Tensor(x, dtype=images.dtype)
    final_logits = model.forward(adv)
    trajectory[cfg.steps] = per_sample_cross_entropy(final_logits.data, labels)
    adv_pred = np.argmax(final_logits.data, axis=1)

    diff = (x.astype(np.float64) - orig.astype(np.float64)).reshape(orig.shape[0], -1)
    return AttackResult(
        adversarial=adv,
        linf=np.abs(diff).max(axis=1),
        l2=np.sqrt((diff * diff).sum(axis=1)),
        loss_trajectory=trajectory,
        success=adv_pred != clean_pred,
        iterates=np.stack(iterates) if record_iterates else None,
    )


def perturbation_metrics(clean: Tensor, adv: Tensor):
    """Per-sample L-infinity, L2, and PSNR (peak 1.0; +inf when identical)."""
    if clean.shape != adv.shape:
        raise DimensionError(f"metric shape mismatch: {clean.shape} vs {adv.shape}")
    n = clean.shape[0]
    diff = (adv.data.astype(np.float64) - clean.data.astype(np.float64)).reshape(n, -1)
    linf = np.abs(diff).max(axis=1)
    l2 = np.sqrt((diff * diff).sum(axis=1))
    mse = (diff * diff).mean(axis=1)
    with np.errstate(divide="ignore"):
        psnr = np.where(mse > 0.0, 10.0 * np.log10(1.0 / np.where(mse > 0, mse, 1.0)), np.inf)
    return linf, l2, psnr


# ----------------------------------------------------------------------
# PNG export of adversarial batches
# ----------------------------------------------------------------------


def _to_png_array(image_chw: np.ndarray) -> np.ndarray:
    # round-half-to-even quantization to 8 bits
    return np.round(image_chw.transpose(1, 2, 0) * 255.0).astype(np.uint8)


def export_adversarial_pngs(clean: Tensor, result: AttackResult, ids, out_dir, cfg: AttackConfig) -> Path:
    """Write clean/adversarial PNG pairs plus a JSON metrics sidecar.

    Quantization to 8 bits can push the per-pixel deviation past the budget
    by at most 1/510, so the sidecar records both pre- and post-quantization
    norms.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    linf, l2, psnr = perturbation_metrics(clean, result.adversarial)
    records = []
    for i, sample_id in enumerate(ids):
        stem = sample_id.replace("/", "_")
        clean_arr = _to_png_array(clean.data[i])
        adv_arr = _to_png_array(result.adversarial.data[i])
        Image.fromarray(clean_arr, mode="RGB").save(out_dir / f"{stem}_clean.png")
        Image.fromarray(adv_arr, mode="RGB").save(out_dir / f"{stem}_adv.png")
        q_diff = adv_arr.astype(np.float64) / 255.0 - clean_arr.astype(np.float64) / 255.0
        records.append(
            {
                "id": sample_id,
                "linf": float(linf[i]),
                "l2": float(l2[i]),
                "psnr": float(psnr[i]),
                "quantized_linf": float(np.abs(q_diff).max()),
                "quantized_l2": float(np.sqrt((q_diff * q_diff).sum())),
                "success": bool(result.success[i]),
            }
        )
    sidecar = {
        "attack": cfg.to_dict(),
        "count": len(records),
        "mean_linf": float(linf.mean()) if len(records) else 0.0,
        "mean_l2": float(l2.mean()) if len(records) else 0.0,
        "success_rate": float(result.success.mean()) if len(records) else 0.0,
        "samples": records,
    }
    (out_dir / "metrics.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return out_dir
