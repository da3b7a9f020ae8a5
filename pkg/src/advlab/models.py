"""Three small image classifiers behind one uniform interface.

* ``TinyViT`` — patch embedding + learnable class token and positional
  embeddings, pre-norm transformer blocks with multi-head self-attention.
* ``SmallResNet`` — 3 stages x 2 residual blocks, widths 16/32/64.
* ``SmallVGG`` — 3 plain conv blocks with max pooling, 2 dense layers.

Every model consumes pixel batches in [0, 1] (normalization to mean 0.5 /
std 0.5 happens inside ``forward``), exposes logits, per-batch loss,
parameter gradients, and gradients with respect to the input image.
"""

from __future__ import annotations

import json
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError, SpecError

CHECKPOINT_FORMAT = "advlab-checkpoint/1"

ARCHITECTURES = ("vit", "resnet", "vgg")


@dataclass(frozen=True)
class ClassifierSpec:
    """Architecture family plus the knobs shared by the model zoo."""

    arch: str
    resolution: int = 32
    channels: int = 3
    classes: int = 5
    # ViT knobs
    patch_size: int = 4
    embed_dim: int = 64
    heads: int = 4
    depth: int = 4
    mlp_ratio: int = 2
    # CNN knobs
    widths: tuple = (16, 32, 64)
    blocks_per_stage: int = 2
    dense_hidden: int = 128

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise SpecError(f"unknown architecture '{self.arch}', expected one of {ARCHITECTURES}")
        if self.classes < 2:
            raise SpecError(f"classes must be >= 2, got {self.classes}")
        if self.resolution < 1 or self.channels < 1:
            raise SpecError("resolution and channels must be positive")
        if self.arch == "vit":
            if self.resolution % self.patch_size != 0:
                raise SpecError(
                    f"resolution {self.resolution} not divisible by patch size {self.patch_size}"
                )
            if self.embed_dim % self.heads != 0:
                raise SpecError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")

    def to_dict(self):
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @staticmethod
    def from_dict(d):
        d = dict(d)
        if "widths" in d:
            d["widths"] = tuple(d["widths"])
        return ClassifierSpec(**d)


def _trunc_normal(rng, shape, std=0.02):
    """Normal(0, std) redrawn until every value lies within 2 std."""
    out = rng.normal(0.0, std, size=shape)
    for _ in range(16):
        bad = np.abs(out) > 2 * std
        if not bad.any():
            break
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
    return np.clip(out, -2 * std, 2 * std)


def _kaiming_uniform(rng, shape):
    """U(-b, b) with b = sqrt(6 / fan_in); fan_in from kernel geometry."""
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Model:
    """Base classifier: owns a named parameter dict and the shared plumbing."""

    def __init__(self, spec: ClassifierSpec, seed: int, dtype=np.float32):
        self.spec = spec
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        self.training = False
        self.params: dict[str, Tensor] = {}
        self._build(np.random.default_rng(np.random.SeedSequence(self.seed)))

    # subclasses fill self.params and implement _forward_core
    def _build(self, rng):
        raise NotImplementedError

    def _forward_core(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def _param(self, name, values):
        t = Tensor(np.asarray(values, dtype=self.dtype), requires_grad=True, dtype=self.dtype)
        self.params[name] = t
        return t

    @property
    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def forward(self, images: Tensor) -> Tensor:
        """Logits for a pixel batch of shape (N, C, H, W) with values in [0, 1]."""
        s = self.spec
        expected = (s.channels, s.resolution, s.resolution)
        if images.ndim != 4 or images.shape[1:] != expected:
            raise DimensionError(
                f"expected images of shape (N, {expected[0]}, {expected[1]}, {expected[2]}), "
                f"got {images.shape}"
            )
        # per-channel normalization: mean 0.5, std 0.5
        x = images * 2.0 - 1.0
        return self._forward_core(x)

    def loss(self, images: Tensor, labels) -> Tensor:
        return ad.cross_entropy(self.forward(images), labels)

    def predict(self, images: Tensor) -> np.ndarray:
        """Argmax class per row; ties resolve to the lowest class index."""
        return np.argmax(self.forward(images).data, axis=1)

    def input_gradient(self, images: Tensor, labels) -> Tensor:
        """Gradient of the mean cross-entropy w.r.t. raw pixels.

        Parameters are frozen for the duration, so their ``grad`` buffers are
        untouched and the parameter-gradient GEMMs are skipped.
        """
        grad, _ = self.loss_and_input_gradient(images, labels)
        return grad

    def loss_and_input_gradient(self, images: Tensor, labels):
        """(input gradient, per-sample loss values) in one forward/backward."""
        with self.frozen():
            x = Tensor(images.data, requires_grad=True, dtype=images.dtype)
            logits = self.forward(x)
            losses = ad.per_sample_cross_entropy(logits.data, labels)
            ad.cross_entropy(logits, labels).backward()
        return Tensor(x.grad, dtype=x.dtype), losses

    @contextmanager
    def frozen(self):
        """Temporarily stop parameters from tracking gradients."""
        flags = {name: p.requires_grad for name, p in self.params.items()}
        for p in self.params.values():
            p.requires_grad = False
        try:
            yield
        finally:
            for name, p in self.params.items():
                p.requires_grad = flags[name]

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_arrays(self):
        """Snapshot of parameter values as float32 arrays, in declaration order."""
        return {name: np.array(p.data, dtype=np.float32) for name, p in self.params.items()}

    def load_state_arrays(self, arrays):
        for name, p in self.params.items():
            if name not in arrays:
                raise DimensionError(f"missing parameter '{name}'")
            values = np.array(arrays[name], dtype=self.dtype)  # owned, writable copy
            if values.shape != p.shape:
                raise DimensionError(
                    f"parameter '{name}' has shape {values.shape}, expected {p.shape}"
                )
            p.data = values
            p.grad = None

    def checksum(self) -> str:
        """Order-sensitive digest of all parameter bytes."""
        import hashlib

        h = hashlib.sha256()
        for name, p in self.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()


class TinyViT(Model):
    """Patch-embedding transformer with a learnable class token."""

    def _build(self, rng):
        s = self.spec
        d = s.embed_dim
        patch_dim = s.channels * s.patch_size * s.patch_size
        self.tokens = (s.resolution // s.patch_size) ** 2 + 1  # patches + class token

        self._param("patch_proj_w", _trunc_normal(rng, (patch_dim, d)))
        self._param("patch_proj_b", np.zeros(d))
        self._param("cls_token", _trunc_normal(rng, (1, 1, d)))
        self._param("pos_embed", _trunc_normal(rng, (1, self.tokens, d)))
        for i in range(s.depth):
            self._param(f"block{i}.ln1_g", np.ones(d))
            self._param(f"block{i}.ln1_b", np.zeros(d))
            for proj in ("q", "k", "v", "out"):
                self._param(f"block{i}.attn_{proj}_w", _trunc_normal(rng, (d, d)))
                self._param(f"block{i}.attn_{proj}_b", np.zeros(d))
            self._param(f"block{i}.ln2_g", np.ones(d))
            self._param(f"block{i}.ln2_b", np.zeros(d))
            self._param(f"block{i}.mlp_w1", _trunc_normal(rng, (d, s.mlp_ratio * d)))
            self._param(f"block{i}.mlp_b1", np.zeros(s.mlp_ratio * d))
            self._param(f"block{i}.mlp_w2", _trunc_normal(rng, (s.mlp_ratio * d, d)))
            self._param(f"block{i}.mlp_b2", np.zeros(d))
        self._param("head_ln_g", np.ones(d))
        self._param("head_ln_b", np.zeros(d))
        self._param("head_w", _trunc_normal(rng, (d, s.classes)))
        self._param("head_b", np.zeros(s.classes))

    def _patchify(self, x: Tensor) -> Tensor:
        s = self.spec
        n = x.shape[0]
        g = s.resolution // s.patch_size  # patches per side
        x = ad.reshape(x, (n, s.channels, g, s.patch_size, g, s.patch_size))
        x = ad.transpose(x, (0, 2, 4, 1, 3, 5))  # (N, g, g, C, p, p)
        return ad.reshape(x, (n, g * g, s.channels * s.patch_size * s.patch_size))

    def _attention(self, x: Tensor, i: int) -> Tensor:
        s = self.spec
        p = self.params
        n, t, d = x.shape
        h, dh = s.heads, d // s.heads

        def split_heads(y):
            return ad.transpose(ad.reshape(y, (n, t, h, dh)), (0, 2, 1, 3))  # (N, h, T, dh)

        q = split_heads(x @ p[f"block{i}.attn_q_w"] + p[f"block{i}.attn_q_b"])
        k = split_heads(x @ p[f"block{i}.attn_k_w"] + p[f"block{i}.attn_k_b"])
        v = split_heads(x @ p[f"block{i}.attn_v_w"] + p[f"block{i}.attn_v_b"])
        scores = (q @ ad.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
        ctx = ad.softmax(scores, axis=-1) @ v  # (N, h, T, dh)
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (n, t, d))
        return ctx @ p[f"block{i}.attn_out_w"] + p[f"block{i}.attn_out_b"]

    def _forward_core(self, x: Tensor) -> Tensor:
        s = self.spec
        p = self.params
        n = x.shape[0]
        tok = self._patchify(x) @ p["patch_proj_w"] + p["patch_proj_b"]  # (N, T-1, D)
        cls = ad.broadcast_to(p["cls_token"], (n, 1, s.embed_dim))
        x = ad.concat([cls, tok], axis=1) + p["pos_embed"]  # (N, T, D)
        for i in range(s.depth):
            normed = ad.layer_norm(x, p[f"block{i}.ln1_g"], p[f"block{i}.ln1_b"])
            x = x + self._attention(normed, i)
            normed = ad.layer_norm(x, p[f"block{i}.ln2_g"], p[f"block{i}.ln2_b"])
            hidden = ad.gelu(normed @ p[f"block{i}.mlp_w1"] + p[f"block{i}.mlp_b1"])
            x = x + (hidden @ p[f"block{i}.mlp_w2"] + p[f"block{i}.mlp_b2"])
        x = ad.layer_norm(x, p["head_ln_g"], p["head_ln_b"])
        cls_final = x[:, 0, :]  # class-token embedding feeds the head
        return cls_final @ p["head_w"] + p["head_b"]


class SmallResNet(Model):
    """Plain residual network: stem conv, then 3 stages of 2 blocks each."""

    def _build(self, rng):
        s = self.spec
        w0 = s.widths[0]
        self._param("stem_w", _kaiming_uniform(rng, (w0, s.channels, 3, 3)))
        self._param("stem_b", np.zeros(w0))
        ch = w0
        for stage, width in enumerate(s.widths):
            for block in range(s.blocks_per_stage):
                tag = f"s{stage}b{block}"
                self._param(f"{tag}.conv1_w", _kaiming_uniform(rng, (width, ch, 3, 3)))
                self._param(f"{tag}.conv1_b", np.zeros(width))
                self._param(f"{tag}.conv2_w", _kaiming_uniform(rng, (width, width, 3, 3)))
                self._param(f"{tag}.conv2_b", np.zeros(width))
                if ch != width:
                    self._param(f"{tag}.proj_w", _kaiming_uniform(rng, (width, ch, 1, 1)))
                    self._param(f"{tag}.proj_b", np.zeros(width))
                ch = width
        self._param("head_w", _trunc_normal(rng, (s.widths[-1], s.classes)))
        self._param("head_b", np.zeros(s.classes))

    def _forward_core(self, x: Tensor) -> Tensor:
        s = self.spec
        p = self.params

        def conv(t, name, stride):
            b = ad.reshape(p[f"{name}_b"], (1, -1, 1, 1))
            return ad.conv2d(t, p[f"{name}_w"], stride=stride, padding=p[f"{name}_w"].shape[2] // 2) + b

        x = ad.relu(conv(x, "stem", 1))
        ch = s.widths[0]
        for stage, width in enumerate(s.widths):
            for block in range(s.blocks_per_stage):
                tag = f"s{stage}b{block}"
                stride = 2 if (ch != width) else 1  # downsample on width change
                h = ad.relu(conv(x, f"{tag}.conv1", stride))
                h = conv(h, f"{tag}.conv2", 1)
                shortcut = conv(x, f"{tag}.proj", stride) if ch != width else x
                x = ad.relu(h + shortcut)
                ch = width
        pooled = ad.mean(x, axis=(2, 3))  # global average pool -> (N, width)
        return pooled @ p["head_w"] + p["head_b"]


class SmallVGG(Model):
    """Stacked conv blocks with max pooling and a two-layer dense head."""

    def _build(self, rng):
        s = self.spec
        ch = s.channels
        for stage, width in enumerate(s.widths):
            self._param(f"b{stage}.conv1_w", _kaiming_uniform(rng, (width, ch, 3, 3)))
            self._param(f"b{stage}.conv1_b", np.zeros(width))
            self._param(f"b{stage}.conv2_w", _kaiming_uniform(rng, (width, width, 3, 3)))
            self._param(f"b{stage}.conv2_b", np.zeros(width))
            ch = width
        final_side = s.resolution // (2 ** len(s.widths))
        if final_side < 1:
            raise SpecError(f"resolution {s.resolution} too small for {len(s.widths)} pooling stages")
        flat = s.widths[-1] * final_side * final_side
        self._param("fc1_w", _trunc_normal(rng, (flat, s.dense_hidden)))
        self._param("fc1_b", np.zeros(s.dense_hidden))
        self._param("fc2_w", _trunc_normal(rng, (s.dense_hidden, s.classes)))
        self._param("fc2_b", np.zeros(s.classes))

    def _forward_core(self, x: Tensor) -> Tensor:
        s = self.spec
        p = self.params
        for stage in range(len(s.widths)):
            for conv_idx in (1, 2):
                w = p[f"b{stage}.conv{conv_idx}_w"]
                b = ad.reshape(p[f"b{stage}.conv{conv_idx}_b"], (1, -1, 1, 1))
                x = ad.relu(ad.conv2d(x, w, stride=1, padding=1) + b)
            x = ad.max_pool2d(x, size=2)
        n = x.shape[0]
        flat = ad.reshape(x, (n, -1))
        hidden = ad.relu(flat @ p["fc1_w"] + p["fc1_b"])
        return hidden @ p["fc2_w"] + p["fc2_b"]


_ARCH_CLASSES = {"vit": TinyViT, "resnet": SmallResNet, "vgg": SmallVGG}


def build_model(spec: ClassifierSpec, seed: int, dtype=np.float32) -> Model:
    """Deterministically initialized model for the given spec and seed."""
    return _ARCH_CLASSES[spec.arch](spec, seed, dtype=dtype)


# ----------------------------------------------------------------------
# checkpoints: JSON manifest + little-endian float32 blob
# ----------------------------------------------------------------------


def save_checkpoint(model: Model, stem) -> Path:
    """Write ``<stem>.json`` (manifest) and ``<stem>.bin`` (parameter blob)."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    chunks = []
    offset = 0
    for name, p in model.params.items():
        raw = np.ascontiguousarray(p.data, dtype="<f4").tobytes()
        entries.append(
            {"name": name, "shape": list(p.shape), "offset": offset, "length": len(raw)}
        )
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "spec": model.spec.to_dict(),
        "seed": model.seed,
        "params": entries,
    }
    stem.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    stem.with_suffix(".bin").write_bytes(b"".join(chunks))
    return stem


def load_checkpoint(stem, dtype=np.float32) -> Model:
    """Rebuild a model from ``save_checkpoint`` output, bit-exact in float32."""
    stem = Path(stem)
    manifest = json.loads(stem.with_suffix(".json").read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise DimensionError(f"unsupported checkpoint format {manifest.get('format')!r}")
    spec = ClassifierSpec.from_dict(manifest["spec"])
    model = build_model(spec, manifest["seed"], dtype=dtype)
    blob = stem.with_suffix(".bin").read_bytes()
    arrays = {}
    for entry in manifest["params"]:
        raw = blob[entry["offset"] : entry["offset"] + entry["length"]]
        arrays[entry["name"]] = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"])
    model.load_state_arrays(arrays)
    return model
