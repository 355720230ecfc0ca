"""Pyramid EATFormer: variant recipes, builder, heads, checkpoints and training step."""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import functional as F
from .attention import MultiHeadAttention
from .blocks import FFN, MSRA, EATBlock, split_channels
from .errors import ConfigurationError, DataError, FormatError, GeometryError, IntegrityError
from .fileio import atomic_write
from .modules import ACTIVATIONS, NORM_KINDS, LayerCost, LayerNorm, Linear, Module, leaf_cost, make_norm
from .tensor import Parameter, Tensor, as_tensor, mean, no_grad, pad2d

DEFAULT_DILATIONS = ((1,), (1,), (1, 2, 3), (1, 2))


@dataclass
class VariantSpec:
    """Architecture recipe of one EATFormer variant."""

    name: str
    depths: tuple = (1, 1, 1, 1)
    dims: tuple = (32, 64, 96, 128)
    head_dim: int = 32
    window: int = 7
    kernel: int = 3
    dilations: tuple = DEFAULT_DILATIONS
    gli_stages: tuple = (3, 4)
    split_ratio: float = 0.5
    num_classes: int = 1000
    mlp_ratio: int = 4
    group_width: int = 16
    downsample_group_width: int = 32
    norm: str = "batchnorm"
    ffn_activation: str = "gelu"
    deformable: bool = True
    modulation: str = "sigmoid"
    use_trh: bool = False
    task_dims: tuple = field(default_factory=tuple)

    def __post_init__(self):
        self.depths = tuple(int(d) for d in self.depths)
        self.dims = tuple(int(c) for c in self.dims)
        self.dilations = tuple(tuple(int(d) for d in stage) for stage in self.dilations)
        self.gli_stages = tuple(int(s) for s in self.gli_stages)
        self.task_dims = tuple(int(t) for t in self.task_dims)

    def validate(self) -> "VariantSpec":
        def fail(field_name, msg):
            raise ConfigurationError(f"{field_name}: {msg}")

        if len(self.depths) != 4 or any(d < 1 for d in self.depths):
            fail("depths", f"need four positive stage depths, got {list(self.depths)}")
        if len(self.dims) != 4 or any(c < 2 or c % 2 for c in self.dims):
            fail("dims", f"need four positive even widths, got {list(self.dims)}")
        if len(self.dilations) != 4 or any(not s or min(s) < 1 for s in self.dilations):
            fail("dilations", f"need four non-empty lists of positive ints, got {self.dilations}")
        if self.head_dim < 1:
            fail("head_dim", f"must be positive, got {self.head_dim}")
        if self.window < 1:
            fail("window", f"must be positive, got {self.window}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            fail("kernel", f"must be a positive odd size, got {self.kernel}")
        if not set(self.gli_stages) <= {1, 2, 3, 4}:
            fail("gli_stages", f"stages are numbered 1..4, got {list(self.gli_stages)}")
        if not 0.0 <= self.split_ratio <= 1.0:
            fail("split_ratio", f"must lie in [0, 1], got {self.split_ratio}")
        if self.split_ratio > 0:
            for s in self.gli_stages:
                cg, _ = split_channels(self.dims[s - 1], self.split_ratio, self.head_dim)
                if cg == 0:
                    fail("dims", f"stage {s} width {self.dims[s - 1]} leaves no whole head of {self.head_dim}")
        if self.num_classes < 1:
            fail("num_classes", f"must be positive, got {self.num_classes}")
        if self.mlp_ratio < 1:
            fail("mlp_ratio", f"must be >= 1, got {self.mlp_ratio}")
        if self.group_width < 1 or self.downsample_group_width < 1:
            fail("group_width", "group widths must be positive")
        if self.norm not in NORM_KINDS:
            fail("norm", f"must be one of {NORM_KINDS}, got {self.norm!r}")
        if self.ffn_activation not in ACTIVATIONS:
            fail("ffn_activation", f"must be one of {ACTIVATIONS}, got {self.ffn_activation!r}")
        if self.modulation not in ("sigmoid", "bypass"):
            fail("modulation", f"must be 'sigmoid' or 'bypass', got {self.modulation!r}")
        if any(t < 1 for t in self.task_dims):
            fail("task_dims", f"task output widths must be positive, got {list(self.task_dims)}")
        return self

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        for key, value in out.items():
            if isinstance(value, tuple):
                out[key] = [list(v) if isinstance(v, tuple) else v for v in value]
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "VariantSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown variant fields: {sorted(unknown)}")
        if "name" not in data:
            raise ConfigurationError("name: missing")
        return cls(**data)

    def replace(self, **changes) -> "VariantSpec":
        return dataclasses.replace(self, **changes)


VARIANTS: dict[str, VariantSpec] = {
    "mobile": VariantSpec("mobile", (1, 1, 4, 1), (48, 64, 160, 256), mlp_ratio=1),
    "lite": VariantSpec("lite", (1, 2, 6, 1), (64, 128, 192, 256), mlp_ratio=2),
    "tiny": VariantSpec("tiny", (2, 2, 6, 2), (64, 128, 192, 256)),
    "mini": VariantSpec("mini", (2, 3, 8, 2), (64, 128, 256, 320)),
    "small": VariantSpec("small", (3, 4, 12, 3), (64, 128, 320, 448)),
    "medium": VariantSpec("medium", (4, 5, 14, 4), (64, 160, 384, 512)),
    "base": VariantSpec("base", (5, 6, 20, 7), (96, 160, 384, 576)),
    "desk": VariantSpec("desk", (1, 1, 1, 1), (32, 64, 96, 128), num_classes=10),
}

# published sizes at 224x224: (params in millions, GFLOPs)
PUBLISHED_COSTS = {
    "mobile": (1.8, 0.36),
    "lite": (3.5, 0.91),
    "tiny": (6.1, 1.41),
    "mini": (11.1, 2.29),
    "small": (24.3, 4.32),
    "medium": (39.9, 7.07),
    "base": (63.5, 10.89),
}


def get_variant(name: str) -> VariantSpec:
    try:
        return VARIANTS[name]
    except KeyError:
        raise ConfigurationError(f"unknown variant {name!r}; known variants: {', '.join(VARIANTS)}") from None


def load_variant_config(path) -> VariantSpec:
    with open(path, encoding="utf-8") as fh:
        data = yaml.safe_load(fh)
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: expected a mapping of variant fields")
    return VariantSpec.from_dict(data).validate()


def save_variant_config(spec: VariantSpec, path) -> None:
    atomic_write(path, yaml.safe_dump(spec.to_dict(), sort_keys=False).encode("utf-8"))


# ---------------------------------------------------------------------------
# heads
# ---------------------------------------------------------------------------


class TRHLayer(Module):
    """Task tokens cross-attend to (normalised) features, then a pre-norm FFN."""

    def __init__(self, dim: int, num_heads: int, rng, mlp_ratio: int, act: str):
        self.norm_q = LayerNorm(dim, axis=-1)
        self.norm_kv = LayerNorm(dim, axis=-1)
        self.attn = MultiHeadAttention(dim, num_heads, rng)
        self.norm_ffn = LayerNorm(dim, axis=-1)
        self.ffn = FFN(dim, rng, mlp_ratio, act)

    def forward(self, tokens: Tensor, features: Tensor) -> Tensor:
        tokens = tokens + self.attn(self.norm_q(tokens), kv=self.norm_kv(features))
        return tokens + self.ffn(self.norm_ffn(tokens))

    def cost(self, tokens: int, length: int, prefix: str):
        rows = [
            leaf_cost(f"{prefix}.norm_q", self.norm_q),
            leaf_cost(f"{prefix}.norm_kv", self.norm_kv),
            leaf_cost(f"{prefix}.attn", self.attn, self.attn.macs(tokens, length), 3 * tokens * length),
            leaf_cost(f"{prefix}.norm_ffn", self.norm_ffn),
        ]
        return rows + self.ffn.cost(tokens, f"{prefix}.ffn")


class TaskRelatedHead(Module):
    """Learnable task tokens querying backbone features through cross-attention.

    Queries come only from the tokens, so the backbone sequence is never
    extended and its activations are untouched.
    """

    def __init__(self, dim: int, task_dims, rng, head_dim: int = 32, depth: int = 2, mlp_ratio: int = 4,
                 act: str = "gelu"):
        task_dims = list(task_dims)
        if not task_dims:
            raise ConfigurationError("task_dims: at least one task is required")
        heads = dim // head_dim if dim >= head_dim and dim % head_dim == 0 else 1
        self.tokens = Parameter(rng.normal(0.0, 0.02, size=(len(task_dims), dim)))
        self.layers = [TRHLayer(dim, heads, rng, mlp_ratio, act) for _ in range(depth)]
        self.norm = LayerNorm(dim, axis=-1)
        self.projections = [Linear(dim, t, rng) for t in task_dims]

    @property
    def num_tasks(self) -> int:
        return self.tokens.shape[0]

    def forward(self, features: Tensor) -> list[Tensor]:
        features = as_tensor(features)
        B = features.shape[0]
        tokens = self.tokens.reshape(1, *self.tokens.shape) + Tensor(np.zeros((B, 1, 1)))
        for layer in self.layers:
            tokens = layer(tokens, features)
        tokens = self.norm(tokens)
        return [proj(tokens[:, t, :]) for t, proj in enumerate(self.projections)]

    def cost(self, length: int, prefix: str):
        T = self.num_tasks
        rows = [LayerCost(f"{prefix}.tokens", self.tokens.size, 0)]
        for i, layer in enumerate(self.layers):
            rows += layer.cost(T, length, f"{prefix}.layers.{i}")
        rows.append(leaf_cost(f"{prefix}.norm", self.norm))
        rows += [leaf_cost(f"{prefix}.projections.{i}", p, p.macs(1)) for i, p in enumerate(self.projections)]
        return rows


def trh_forward(features: Tensor, p: TaskRelatedHead) -> list[Tensor]:
    """Per-task outputs for flattened final-stage features (B, L, C)."""
    return p(features)


# ---------------------------------------------------------------------------
# backbone
# ---------------------------------------------------------------------------


class Stage(Module):
    def __init__(self, downsample: MSRA | None, blocks: list[EATBlock]):
        self.downsample = downsample
        self.blocks = blocks

    def forward(self, x: Tensor) -> Tensor:
        if self.downsample is not None:
            x = self.downsample(x)
        for block in self.blocks:
            x = block(x)
        return x


class EATFormer(Module):
    """Stem (two stride-2 MSRA units), four stages of EAT blocks, and a head.

    Inputs whose sides are not multiples of 32 are zero-padded on the
    bottom/right; the most recent padding is kept in ``last_pad``.
    """

    MIN_SIZE = 32

    def __init__(self, spec: VariantSpec, rng: np.random.Generator):
        spec.validate()
        self.spec = spec
        c1 = spec.dims[0]
        self.stem = [
            MSRA(3, c1 // 2, rng, (1,), spec.kernel, 2, None, spec.norm),
            MSRA(c1 // 2, c1, rng, (1,), spec.kernel, 2, None, spec.norm),
        ]
        self.stages = []
        for s in range(4):
            C = spec.dims[s]
            down = None
            if s > 0:
                down = MSRA(spec.dims[s - 1], C, rng, spec.dilations[s], spec.kernel, 2,
                            spec.downsample_group_width, spec.norm)
            ratio = spec.split_ratio if (s + 1) in spec.gli_stages else 0.0
            blocks = [
                EATBlock(C, rng, spec.dilations[s], ratio, spec.head_dim, spec.window, spec.kernel,
                         spec.mlp_ratio, spec.group_width, spec.norm, spec.ffn_activation, spec.deformable,
                         spec.modulation)
                for _ in range(spec.depths[s])
            ]
            self.stages.append(Stage(down, blocks))
        C = spec.dims[-1]
        self.head_norm = make_norm(spec.norm, C)
        self.head = Linear(C, spec.num_classes, rng)
        self.trh = None
        if spec.use_trh:
            task_dims = spec.task_dims or (spec.num_classes,)
            self.trh = TaskRelatedHead(C, task_dims, rng, spec.head_dim, 2, spec.mlp_ratio, spec.ffn_activation)
        self.last_pad = (0, 0)

    def _pad(self, images: Tensor) -> Tensor:
        if images.ndim != 4 or images.shape[1] != 3:
            raise GeometryError(f"expected images of shape (B, 3, H, W), got {images.shape}")
        H, W = images.shape[2:]
        if H < self.MIN_SIZE or W < self.MIN_SIZE:
            raise GeometryError(f"input {H}x{W} is smaller than the minimum {self.MIN_SIZE}x{self.MIN_SIZE}")
        self.last_pad = ((-H) % 32, (-W) % 32)
        return pad2d(images, *self.last_pad) if any(self.last_pad) else images

    def stage_outputs(self, images) -> list[Tensor]:
        x = self._pad(as_tensor(images))
        for unit in self.stem:
            x = unit(x)
        outs = []
        for stage in self.stages:
            x = stage(x)
            outs.append(x)
        return outs

    def forward_features(self, images) -> Tensor:
        return self.stage_outputs(images)[-1]

    def forward(self, images) -> Tensor:
        x = self.forward_features(images)
        if self.trh is not None:
            return self.trh(F.img2seq(x))[0]
        return self.head(mean(self.head_norm(x), axis=(2, 3)))

    def predict(self, images) -> np.ndarray:
        with no_grad():
            return np.argmax(self(images).data, axis=1)

    def blocks(self) -> list[tuple[int, int, EATBlock]]:
        """(stage, depth index, block) for every EAT block in order."""
        return [(s + 1, d, b) for s, st in enumerate(self.stages) for d, b in enumerate(st.blocks)]

    def cost(self, h: int, w: int) -> list[LayerCost]:
        h, w = h + (-h) % 32, w + (-w) % 32
        rows = []
        for i, unit in enumerate(self.stem):
            r, (h, w) = unit.cost(h, w, f"stem.{i}")
            rows += r
        for s, stage in enumerate(self.stages):
            if stage.downsample is not None:
                r, (h, w) = stage.downsample.cost(h, w, f"stages.{s}.downsample")
                rows += r
            for d, block in enumerate(stage.blocks):
                r, (h, w) = block.cost(h, w, f"stages.{s}.blocks.{d}")
                rows += r
        rows.append(leaf_cost("head_norm", self.head_norm))
        rows.append(leaf_cost("head", self.head, self.head.macs(1)))
        if self.trh is not None:
            rows += self.trh.cost(h * w, "trh")
        return rows


def build_variant(spec: VariantSpec | str, seed: int = 0) -> EATFormer:
    if isinstance(spec, str):
        spec = get_variant(spec)
    return EATFormer(spec, np.random.default_rng(seed))


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

MAGIC = b"EATF"
FORMAT_VERSION = 1
CONFIG_RECORD = "__config__"
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("u1")}
_DTYPE_CODES = {np.dtype("float64"): 0, np.dtype("uint8"): 1}


def model_state(model: Module) -> dict[str, np.ndarray]:
    state = {name: p.data for name, p in model.named_parameters()}
    state.update({f"{name}#buffer": b for name, b in model.named_buffers()})
    return state


def encode_records(records: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(records))]
    for name, array in records.items():
        array = np.asarray(array)
        code = _DTYPE_CODES[array.dtype]
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<BI", code, array.ndim))
        parts.append(struct.pack(f"<{array.ndim}Q", *array.shape))
        parts.append(np.ascontiguousarray(array, dtype=_DTYPES[code]).tobytes())
    return b"".join(parts)


def decode_records(payload: bytes) -> dict[str, np.ndarray]:
    if payload[:4] != MAGIC:
        raise FormatError(f"bad magic {payload[:4]!r}; expected {MAGIC!r}")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(payload):
            raise IntegrityError(f"checkpoint truncated at byte {pos} (needed {n} more)")
        chunk = payload[pos : pos + n]
        pos += n
        return chunk

    (version,) = struct.unpack("<I", take(4))
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}; expected {FORMAT_VERSION}")
    (count,) = struct.unpack("<I", take(4))
    records = {}
    for _ in range(count):
        (length,) = struct.unpack("<I", take(4))
        name = take(length).decode("utf-8")
        code, rank = struct.unpack("<BI", take(5))
        if code not in _DTYPES:
            raise IntegrityError(f"record {name!r} has unknown dtype code {code}")
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        dtype = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        records[name] = np.frombuffer(take(nbytes), dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    if pos != len(payload):
        raise IntegrityError(f"{len(payload) - pos} trailing bytes after the last record")
    return records


def save_checkpoint(model: EATFormer, path) -> None:
    """Write parameters, buffers and the variant recipe atomically."""
    config = json.dumps(model.spec.to_dict(), sort_keys=True).encode("utf-8")
    records = {CONFIG_RECORD: np.frombuffer(config, dtype=np.uint8)}
    records.update(model_state(model))
    atomic_write(path, encode_records(records))


def load_checkpoint(path, spec: VariantSpec | None = None) -> EATFormer:
    """Rebuild the model stored at ``path``.

    When ``spec`` is given the stored arrays must fit that recipe; otherwise
    the embedded recipe is used.
    """
    records = decode_records(Path(path).read_bytes())
    if spec is None:
        if CONFIG_RECORD not in records:
            raise IntegrityError("checkpoint has no variant recipe record")
        spec = VariantSpec.from_dict(json.loads(records[CONFIG_RECORD].tobytes().decode("utf-8")))
    records.pop(CONFIG_RECORD, None)
    model = build_variant(spec, seed=0)
    state = model_state(model)
    missing, extra = set(state) - set(records), set(records) - set(state)
    if missing or extra:
        raise IntegrityError(f"checkpoint does not match {spec.name!r}: missing {sorted(missing)[:5]}, "
                             f"unexpected {sorted(extra)[:5]}")
    for name, target in state.items():
        if records[name].shape != target.shape:
            raise IntegrityError(f"{name}: stored shape {records[name].shape} != expected {target.shape}")
    for name, target in state.items():
        target[...] = records[name]
    return model


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


class AdamW:
    """Adam with decoupled weight decay applied to every parameter."""

    def __init__(self, params, lr: float = 5e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 5e-2):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.steps = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.steps += 1
        b1, b2 = self.betas
        c1, c2 = 1.0 - b1**self.steps, 1.0 - b2**self.steps
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            p.data -= self.lr * self.weight_decay * p.data
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def check_labels(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1 or not np.issubdtype(labels.dtype, np.integer):
        raise DataError(f"labels must be a 1-d integer array, got {labels.dtype} with shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise DataError(f"labels must lie in [0, {num_classes}), got range [{labels.min()}, {labels.max()}]")
    return labels


def train_step(model: EATFormer, images, labels, optimizer: AdamW) -> float:
    """One forward/backward/update on a batch; returns the mean cross-entropy."""
    labels = check_labels(labels, model.spec.num_classes)
    model.train()
    optimizer.zero_grad()
    loss = F.cross_entropy(model(images), labels)
    loss.backward()
    optimizer.step()
    return float(loss.item())


__all__ = [
    "VariantSpec",
    "VARIANTS",
    "PUBLISHED_COSTS",
    "get_variant",
    "load_variant_config",
    "save_variant_config",
    "TaskRelatedHead",
    "trh_forward",
    "EATFormer",
    "build_variant",
    "save_checkpoint",
    "load_checkpoint",
    "encode_records",
    "decode_records",
    "model_state",
    "AdamW",
    "train_step",
    "check_labels",
]
