"""The EAT block and its three residual parts: MSRA, GLI and FFN.

Every composite module exposes ``cost(h, w, prefix)`` returning a list of
:class:`~eatformer.modules.LayerCost` rows plus the output spatial size, so
model-level accounting is a plain walk over the structure.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import functional as F
from .attention import DeformableAttention, MultiHeadAttention, self_attention_cost, windowed_attention
from .errors import ConfigurationError, DimensionError
from .modules import Conv2d, LayerCost, Linear, Module, activation, leaf_cost, make_norm
from .tensor import Parameter, Tensor, as_tensor, channel_slice, concat, softmax


def wom_mix(outputs: Sequence[Tensor], alphas) -> Tensor:
    """Weighted operation mixing: sum_n softmax(alphas)_n * outputs[n]."""
    outputs = [as_tensor(o) for o in outputs]
    alphas = as_tensor(alphas)
    if not outputs or alphas.shape != (len(outputs),):
        raise DimensionError(f"{len(outputs)} outputs need alphas of shape ({len(outputs)},), got {alphas.shape}")
    first = outputs[0].shape
    for o in outputs[1:]:
        if o.shape != first:
            raise DimensionError(f"mixed outputs differ in shape: {first} vs {o.shape}")
    weights = softmax(alphas, axis=0)
    mixed = weights[0] * outputs[0]
    for n in range(1, len(outputs)):
        mixed = mixed + weights[n] * outputs[n]
    return mixed


def conv_groups(in_channels: int, out_channels: int, group_width: int | None) -> int:
    """Largest group count <= in_channels // group_width dividing both channel counts."""
    if group_width is None:
        return 1
    g = max(1, in_channels // group_width)
    while in_channels % g or out_channels % g:
        g -= 1
    return g


def split_channels(dim: int, split_ratio: float, head_dim: int) -> tuple[int, int]:
    """(C_g, C_l): round(p*C) half-up, then down to a whole number of heads."""
    if not 0.0 <= split_ratio <= 1.0:
        raise ConfigurationError(f"split_ratio must lie in [0, 1], got {split_ratio}")
    cg = int(np.floor(split_ratio * dim + 0.5))
    cg = (cg // head_dim) * head_dim
    return cg, dim - cg


class ConvPath(Module):
    """Norm -> k x k (dilated, grouped, strided) conv -> activation."""

    def __init__(self, in_channels, out_channels, rng, kernel=3, dilation=1, stride=1, groups=1,
                 norm="batchnorm", act="gelu"):
        self.norm = make_norm(norm, in_channels)
        self.conv = Conv2d(in_channels, out_channels, kernel, rng, stride=stride, dilation=dilation, groups=groups)
        self.act_kind = act
        self._act = activation(act)

    def forward(self, x: Tensor) -> Tensor:
        return self._act(self.conv(self.norm(x)))

    def cost(self, h: int, w: int, prefix: str):
        rows = [leaf_cost(f"{prefix}.norm", self.norm), leaf_cost(f"{prefix}.conv", self.conv, self.conv.macs(h, w))]
        return rows, self.conv.output_size(h, w)


class MSRA(Module):
    """Multi-scale region aggregation.

    Parallel dilated conv paths share stride and output width; their outputs
    are mixed by softmax weights, projected by a 1x1 conv and added to the
    shortcut (identity, or a strided 1x1 conv when the shape changes).
    """

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator,
                 dilations: Sequence[int] = (1,), kernel: int = 3, stride: int = 1,
                 group_width: int | None = None, norm: str = "batchnorm", act: str = "gelu"):
        if stride not in (1, 2):
            raise ConfigurationError(f"MSRA stride must be 1 or 2, got {stride}")
        if not dilations or any(d < 1 for d in dilations):
            raise ConfigurationError(f"dilations must be a non-empty list of positive ints, got {list(dilations)}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride = stride
        self.dilations = tuple(int(d) for d in dilations)
        groups = conv_groups(in_channels, out_channels, group_width)
        self.paths = [
            ConvPath(in_channels, out_channels, rng, kernel, d, stride, groups, norm, act) for d in self.dilations
        ]
        self.alphas = Parameter(np.zeros(len(self.dilations)))
        self.proj = Conv2d(out_channels, out_channels, 1, rng)
        self.shortcut = None
        if stride != 1 or in_channels != out_channels:
            self.shortcut = Conv2d(in_channels, out_channels, 1, rng, stride=stride, padding=0)

    def forward(self, x: Tensor) -> Tensor:
        x = as_tensor(x)
        mixed = wom_mix([p(x) for p in self.paths], self.alphas)
        residual = x if self.shortcut is None else self.shortcut(x)
        return residual + self.proj(mixed)

    def mixing_weights(self) -> np.ndarray:
        a = self.alphas.data
        e = np.exp(a - a.max())
        return e / e.sum()

    def cost(self, h: int, w: int, prefix: str):
        rows = []
        out_hw = (h, w)
        for i, p in enumerate(self.paths):
            r, out_hw = p.cost(h, w, f"{prefix}.paths.{i}")
            rows += r
        rows.append(LayerCost(f"{prefix}.alphas", self.alphas.size, 0))
        rows.append(leaf_cost(f"{prefix}.proj", self.proj, self.proj.macs(*out_hw)))
        if self.shortcut is not None:
            rows.append(leaf_cost(f"{prefix}.shortcut", self.shortcut, self.shortcut.macs(h, w)))
        return rows, out_hw


def msra_forward(x: Tensor, p: MSRA) -> Tensor:
    return p(x)


class LocalPath(Module):
    """Depthwise k x k conv -> norm -> activation -> pointwise conv."""

    def __init__(self, channels: int, rng, kernel=3, norm="batchnorm", act="gelu"):
        self.dw = Conv2d(channels, channels, kernel, rng, groups=channels)
        self.norm = make_norm(norm, channels)
        self._act = activation(act)
        self.pw = Conv2d(channels, channels, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.pw(self._act(self.norm(self.dw(x))))

    def cost(self, h: int, w: int, prefix: str):
        return [
            leaf_cost(f"{prefix}.dw", self.dw, self.dw.macs(h, w)),
            leaf_cost(f"{prefix}.norm", self.norm),
            leaf_cost(f"{prefix}.pw", self.pw, self.pw.macs(h, w)),
        ]


class GLI(Module):
    """Global and local interaction.

    The first C_g channels go through norm + windowed (MD-)MSA, the remaining
    C_l through :class:`LocalPath`; each branch is scaled by its softmax
    weight, the two are concatenated and the input is added back.
    """

    def __init__(self, dim: int, rng: np.random.Generator, split_ratio: float = 0.5, head_dim: int = 32,
                 window: int | None = 7, kernel: int = 3, norm: str = "batchnorm", act: str = "gelu",
                 deformable: bool = True, modulation: str = "sigmoid"):
        self.dim = dim
        self.split_ratio = split_ratio
        self.window = window
        self.global_channels, self.local_channels = split_channels(dim, split_ratio, head_dim)
        self.global_norm = None
        self.attn = None
        self.local = None
        cg, cl = self.global_channels, self.local_channels
        if cg:
            self.global_norm = make_norm(norm, cg)
            heads = cg // head_dim
            self.attn = DeformableAttention(cg, heads, rng, modulation) if deformable else MultiHeadAttention(cg, heads, rng)
        if cl:
            self.local = LocalPath(cl, rng, kernel, norm, act)
        self.alphas = Parameter(np.zeros(2))

    def global_path(self, xg: Tensor) -> Tensor:
        xg = self.global_norm(xg)
        h, w = xg.shape[2:]
        return windowed_attention(xg, self.attn, self.window if self.window is not None else max(h, w))

    def forward(self, x: Tensor) -> Tensor:
        x = as_tensor(x)
        if x.shape[1] != self.dim:
            raise ConfigurationError(f"GLI expects {self.dim} channels, got {x.shape[1]}")
        weights = softmax(self.alphas, axis=0)
        parts = []
        if self.global_channels:
            parts.append(weights[0] * self.global_path(channel_slice(x, 0, self.global_channels)))
        if self.local_channels:
            parts.append(weights[1] * self.local(channel_slice(x, self.global_channels, self.dim)))
        mixed = parts[0] if len(parts) == 1 else concat(parts, axis=1)
        return mixed + x

    def mixing_weights(self) -> np.ndarray:
        a = self.alphas.data
        e = np.exp(a - a.max())
        return e / e.sum()

    def cost(self, h: int, w: int, prefix: str):
        rows = []
        if self.global_channels:
            cg = self.global_channels
            rows.append(leaf_cost(f"{prefix}.global_norm", self.global_norm))
            macs, extra = self_attention_cost(cg, h, w, self.window)
            if isinstance(self.attn, DeformableAttention):
                macs += 3 * h * w * cg
            rows.append(leaf_cost(f"{prefix}.attn", self.attn, macs, extra))
        if self.local_channels:
            rows += self.local.cost(h, w, f"{prefix}.local")
        rows.append(LayerCost(f"{prefix}.alphas", self.alphas.size, 0))
        return rows, (h, w)


def gli_forward(x: Tensor, p: GLI) -> Tensor:
    return p(x)


class FFN(Module):
    """Per-position two-layer perceptron with hidden width ``ratio * dim``."""

    def __init__(self, dim: int, rng: np.random.Generator, ratio: int = 4, act: str = "gelu"):
        if ratio < 1:
            raise ConfigurationError(f"FFN ratio must be >= 1, got {ratio}")
        self.ratio = ratio
        self.fc1 = Linear(dim, ratio * dim, rng)
        self.fc2 = Linear(ratio * dim, dim, rng)
        self.act_kind = act
        self._act = activation(act)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(self._act(self.fc1(x)))

    def cost(self, tokens: int, prefix: str):
        return [
            leaf_cost(f"{prefix}.fc1", self.fc1, self.fc1.macs(tokens)),
            leaf_cost(f"{prefix}.fc2", self.fc2, self.fc2.macs(tokens)),
        ]


def ffn_forward(x: Tensor, p: FFN) -> Tensor:
    return p(x)


class EATBlock(Module):
    """MSRA residual, then GLI residual, then pre-norm FFN residual.

    Each part can be switched off; with all three off the block is the identity.
    """

    def __init__(self, dim: int, rng: np.random.Generator, dilations: Sequence[int] = (1,),
                 split_ratio: float = 0.5, head_dim: int = 32, window: int | None = 7, kernel: int = 3,
                 mlp_ratio: int = 4, group_width: int | None = 16, norm: str = "batchnorm",
                 ffn_activation: str = "gelu", deformable: bool = True, modulation: str = "sigmoid",
                 use_msra: bool = True, use_gli: bool = True, use_ffn: bool = True):
        self.dim = dim
        self.msra = MSRA(dim, dim, rng, dilations, kernel, 1, group_width, norm) if use_msra else None
        self.gli = (
            GLI(dim, rng, split_ratio, head_dim, window, kernel, norm, "gelu", deformable, modulation)
            if use_gli else None
        )
        self.ffn_norm = make_norm(norm, dim, axis=-1) if use_ffn else None
        self.ffn = FFN(dim, rng, mlp_ratio, ffn_activation) if use_ffn else None

    def forward(self, x: Tensor) -> Tensor:
        x = as_tensor(x)
        if self.msra is not None:
            x = self.msra(x)
        if self.gli is not None:
            x = self.gli(x)
        if self.ffn is not None:
            h, w = x.shape[2:]
            seq = F.img2seq(x)
            seq = seq + self.ffn(self.ffn_norm(seq))
            x = F.seq2img(seq, h, w)
        return x

    def cost(self, h: int, w: int, prefix: str):
        rows = []
        if self.msra is not None:
            r, (h, w) = self.msra.cost(h, w, f"{prefix}.msra")
            rows += r
        if self.gli is not None:
            rows += self.gli.cost(h, w, f"{prefix}.gli")[0]
        if self.ffn is not None:
            rows.append(leaf_cost(f"{prefix}.ffn_norm", self.ffn_norm))
            rows += self.ffn.cost(h * w, f"{prefix}.ffn")
        return rows, (h, w)


def eat_block_forward(x: Tensor, params: EATBlock) -> Tensor:
    return params(x)


__all__ = [
    "wom_mix",
    "conv_groups",
    "split_channels",
    "ConvPath",
    "MSRA",
    "msra_forward",
    "LocalPath",
    "GLI",
    "gli_forward",
    "FFN",
    "ffn_forward",
    "EATBlock",
    "eat_block_forward",
]
