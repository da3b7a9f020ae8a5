"""Dataset loading, a seeded synthetic 5-class generator, and preprocessing.

Images live in pixel space [0, 1] as float32 ``Tensor``s of shape (C, H, W);
normalization into model space happens inside the models, so perturbation
budgets stay interpretable in raw pixel units.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .autodiff import Tensor
from .errors import DatasetError, DimensionError, IngestionError, ParameterError

SYNTH_CLASS_NAMES = ("class0", "class1", "class2", "class3", "class4")
CROP_PAD = 4


@dataclass
class Sample:
    """One labeled image; pixel range is validated at construction."""

    image: Tensor
    label: int
    id: str

    def __post_init__(self):
        d = self.image.data
        if d.ndim != 3:
            raise DimensionError(f"sample image must be (C, H, W), got {d.shape}")
        if d.size and (d.min() < 0.0 or d.max() > 1.0):
            raise DatasetError(f"sample '{self.id}' has pixels outside [0, 1]")


@dataclass
class DatasetSplit:
    """Ordered sample collection with class names and a split tag."""

    samples: list
    class_names: list
    split: str = "train"

    def __post_init__(self):
        k = len(self.class_names)
        ids = set()
        for s in self.samples:
            if not 0 <= s.label < k:
                raise DatasetError(f"sample '{s.id}' has label {s.label} outside [0, {k})")
            if s.id in ids:
                raise DatasetError(f"duplicate sample id '{s.id}'")
            ids.add(s.id)

    def __len__(self):
        return len(self.samples)

    @property
    def num_classes(self):
        return len(self.class_names)

    def labels(self):
        return np.array([s.label for s in self.samples], dtype=np.int64)


# ----------------------------------------------------------------------
# ingestion
# ----------------------------------------------------------------------


def _bilinear_resize(image: np.ndarray, out_size: int) -> np.ndarray:
    """Half-pixel-center bilinear resize of a (C, H, W) array."""
    c, h, w = image.shape
    if h == out_size and w == out_size:
        return image
    scale_y, scale_x = h / out_size, w / out_size
    src_y = np.clip((np.arange(out_size) + 0.5) * scale_y - 0.5, 0.0, h - 1.0)
    src_x = np.clip((np.arange(out_size) + 0.5) * scale_x - 0.5, 0.0, w - 1.0)
    y0 = np.floor(src_y).astype(np.int64)
    x0 = np.floor(src_x).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (src_y - y0)[None, :, None]
    wx = (src_x - x0)[None, None, :]
    top = image[:, y0][:, :, x0] * (1 - wx) + image[:, y0][:, :, x1] * wx
    bottom = image[:, y1][:, :, x0] * (1 - wx) + image[:, y1][:, :, x1] * wx
    return top * (1 - wy) + bottom * wy


def load_image_directory(root, resolution: int) -> DatasetSplit:
    """Read ``root/<class>/*.png`` into a split; class index is lexicographic."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root '{root}' is not a directory")
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise DatasetError(f"dataset root '{root}' contains no class directories")
    samples = []
    class_names = [d.name for d in class_dirs]
    for label, class_dir in enumerate(class_dirs):
        files = sorted(class_dir.glob("*.png"))
        if not files:
            raise DatasetError(f"class directory '{class_dir}' contains no PNG images")
        for path in files:
            try:
                with Image.open(path) as img:
                    arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
            except Exception as exc:
                raise IngestionError(f"cannot decode image '{path}': {exc}") from exc
            chw = arr.transpose(2, 0, 1)
            resized = _bilinear_resize(chw, resolution)
            image = Tensor(np.clip(resized, 0.0, 1.0).astype(np.float32))
            samples.append(Sample(image, label, f"{class_dir.name}/{path.stem}"))
    return DatasetSplit(samples, class_names, split="train")


def export_image_directory(split: DatasetSplit, root) -> Path:
    """Write a split back out as ``root/<class>/<id>.png`` (8-bit PNG)."""
    root = Path(root)
    for sample in split.samples:
        class_name = split.class_names[sample.label]
        stem = sample.id.split("/")[-1]
        path = root / class_name / f"{stem}.png"
        path.parent.mkdir(parents=True, exist_ok=True)
        hwc = np.round(sample.image.data.transpose(1, 2, 0) * 255.0).astype(np.uint8)
        Image.fromarray(hwc, mode="RGB").save(path)
    return root


# ----------------------------------------------------------------------
# synthetic benchmark generator
# ----------------------------------------------------------------------


def synth_dataset(seed: int, per_class: int, resolution: int = 32, noise_std: float = 0.05) -> DatasetSplit:
    """Seeded 5-class image generator standing in for a real dataset.

    Class k renders k+1 Gaussian blobs at class-specific base positions plus
    a class-specific oriented sinusoidal texture; per-sample jitter, phase,
    and additive Gaussian noise come from per-sample seed streams. Pixels are
    clamped to [0, 1] and snapped to the 8-bit grid so PNG export/import is
    an identity.
    """
    if per_class < 1:
        raise ParameterError(f"per_class must be >= 1, got {per_class}")
    if noise_std < 0:
        raise ParameterError(f"noise_std must be >= 0, got {noise_std}")
    struct_rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0]))
    classes = []
    for k in range(5):
        classes.append(
            {
                "centers": struct_rng.uniform(0.15, 0.85, size=(k + 1, 2)),
                # soft blobs with heavy jitter: the count cue stays noisy, so
                # every architecture shortcuts to the shared low-amplitude
                # texture, whose margin sits inside the attack budget
                "amps": struct_rng.uniform(0.08, 0.20, size=(k + 1, 3)),
                "angle": struct_rng.uniform(0.0, np.pi),
                "freq": 3.0 + k * 0.8,
                "sigma": struct_rng.uniform(0.08, 0.13),
            }
        )

    yy, xx = np.mgrid[0:resolution, 0:resolution]
    yy = (yy + 0.5) / resolution
    xx = (xx + 0.5) / resolution

    samples = []
    for k, cfg in enumerate(classes):
        for i in range(per_class):
            rng = np.random.default_rng(np.random.SeedSequence([int(seed), 1, k, i]))
            img = np.full((3, resolution, resolution), 0.45)
            for c_idx in range(k + 1):
                cy, cx = cfg["centers"][c_idx] + rng.uniform(-0.07, 0.07, size=2)
                gain = rng.uniform(0.75, 1.25)
                blob = np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * cfg["sigma"] ** 2)))
                img += (cfg["amps"][c_idx] * gain)[:, None, None] * blob[None, :, :]
            phase = rng.uniform(0.0, 2 * np.pi)
            wave = np.sin(
                2 * np.pi * cfg["freq"] * (np.cos(cfg["angle"]) * xx + np.sin(cfg["angle"]) * yy)
                + phase
            )
            img += 0.10 * wave[None, :, :]
            if noise_std > 0:
                img += rng.normal(0.0, noise_std, size=img.shape)
            img = np.clip(img, 0.0, 1.0)
            img = np.round(img * 255.0) / 255.0  # 8-bit grid, PNG round-trip exact
            samples.append(
                Sample(Tensor(img.astype(np.float32)), k, f"{SYNTH_CLASS_NAMES[k]}/{i:04d}")
            )
    return DatasetSplit(samples, list(SYNTH_CLASS_NAMES), split="train")


def split_dataset(split: DatasetSplit, ratios, seed: int):
    """Stratified train/val/test partition with a seeded per-class shuffle."""
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ParameterError(f"split ratios must be three non-negative values summing to 1, got {ratios}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 2]))
    buckets = ([], [], [])
    for label in range(split.num_classes):
        indices = [i for i, s in enumerate(split.samples) if s.label == label]
        rng.shuffle(indices)
        n = len(indices)
        n_train = int(round(ratios[0] * n))
        n_val = int(round(ratios[1] * n))
        n_train = min(n_train, n)
        n_val = min(n_val, n - n_train)
        parts = (indices[:n_train], indices[n_train : n_train + n_val], indices[n_train + n_val :])
        for bucket, part in zip(buckets, parts):
            bucket.extend(part)
    names = ("train", "val", "test")
    return tuple(
        DatasetSplit([split.samples[i] for i in sorted(bucket)], list(split.class_names), split=name)
        for bucket, name in zip(buckets, names)
    )


# ----------------------------------------------------------------------
# augmentation and preprocessing defenses
# ----------------------------------------------------------------------


def augment(sample: Sample, rng: np.random.Generator) -> Sample:
    """Random horizontal flip, then reflect-pad-4 and random crop back.

    Consumes exactly three decisions from ``rng``: flip, dx, dy.
    """
    img = sample.image.data
    _, h, w = img.shape
    if rng.random() < 0.5:
        img = img[:, :, ::-1]
    dx = int(rng.integers(0, 2 * CROP_PAD + 1))
    dy = int(rng.integers(0, 2 * CROP_PAD + 1))
    padded = np.pad(img, ((0, 0), (CROP_PAD, CROP_PAD), (CROP_PAD, CROP_PAD)), mode="reflect")
    cropped = padded[:, dy : dy + h, dx : dx + w]
    return Sample(Tensor(np.ascontiguousarray(cropped)), sample.label, sample.id)


def gaussian_blur_kernel(sigma: float) -> np.ndarray:
    """1-D Gaussian taps out to radius ceil(3 sigma), normalized to sum 1."""
    if sigma <= 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    radius = int(np.ceil(3.0 * sigma))
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(offsets**2) / (2.0 * sigma * sigma))
    return kernel / kernel.sum()


def gaussian_blur(image: Tensor, sigma: float) -> Tensor:
    """Separable Gaussian blur with reflect padding; preprocessing defense."""
    kernel = gaussian_blur_kernel(sigma)
    radius = kernel.size // 2
    data = np.asarray(image.data, dtype=np.float64)
    if data.ndim != 3:
        raise DimensionError(f"gaussian_blur expects (C, H, W), got {data.shape}")

    def convolve_last(arr):
        padded = np.pad(arr, [(0, 0)] * (arr.ndim - 1) + [(radius, radius)], mode="reflect")
        windows = np.lib.stride_tricks.sliding_window_view(padded, kernel.size, axis=-1)
        return windows @ kernel

    blurred = convolve_last(data)  # along W
    blurred = convolve_last(blurred.transpose(0, 2, 1)).transpose(0, 2, 1)  # along H
    return Tensor(np.clip(blurred, 0.0, 1.0).astype(image.data.dtype))


# ----------------------------------------------------------------------
# batching
# ----------------------------------------------------------------------


def batch_iterator(split: DatasetSplit, batch_size: int, shuffle_seed=None, augment_rng=None):
    """Yield (images (N,C,H,W) Tensor, labels int array) covering one epoch.

    A seed gives a deterministic shuffle; the final partial batch is kept.
    When ``augment_rng`` is supplied each sample is augmented before stacking,
    consuming the generator in iteration order.
    """
    if batch_size < 1:
        raise ParameterError(f"batch_size must be >= 1, got {batch_size}")
    if not split.samples:
        raise DatasetError(f"cannot iterate over empty split '{split.split}'")
    order = np.arange(len(split.samples))
    if shuffle_seed is not None:
        np.random.default_rng(np.random.SeedSequence([int(shuffle_seed)])).shuffle(order)
    for start in range(0, len(order), batch_size):
        chunk = order[start : start + batch_size]
        rows = []
        labels = np.empty(len(chunk), dtype=np.int64)
        for j, idx in enumerate(chunk):
            sample = split.samples[int(idx)]
            if augment_rng is not None:
                sample = augment(sample, augment_rng)
            rows.append(sample.image.data)
            labels[j] = sample.label
        yield Tensor(np.stack(rows)), labels
