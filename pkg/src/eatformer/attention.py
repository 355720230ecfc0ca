"""Multi-head attention, its deformable variant, windowing and cross-attention.

No positional terms exist anywhere: spatial inductive bias comes from the
convolutional parts of the block.
"""

from __future__ import annotations

import numpy as np

from . import functional as F
from .errors import ConfigurationError, DimensionError
from .modules import Linear, Module
from .tensor import Tensor, as_tensor, record_extra_flops, sigmoid, softmax, transpose

MODULATION_MODES = ("sigmoid", "bypass")


class MultiHeadAttention(Module):
    """Scaled dot-product attention with ``num_heads`` heads of equal width.

    Head ``h`` uses columns ``h*d:(h+1)*d`` of the query/key/value weights,
    so the per-head projection matrices are views of three (C, C) matrices.
    Parameters: 4(C+1)C.
    """

    def __init__(self, dim: int, num_heads: int, rng: np.random.Generator):
        if num_heads < 1 or dim % num_heads:
            raise ConfigurationError(f"dim={dim} is not divisible into {num_heads} heads")
        self.dim = dim
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.proj = Linear(dim, dim, rng)

    def _split(self, t: Tensor) -> Tensor:
        B, L, _ = t.shape
        return t.reshape(B, L, self.num_heads, self.head_dim).transpose(0, 2, 1, 3)

    def attention_weights(self, q: Tensor, k: Tensor, mask: np.ndarray | None = None) -> Tensor:
        """Row-stochastic (B, H, Lq, Lk) weights from projected queries and keys."""
        scores = self._split(q) @ transpose(self._split(k), (0, 1, 3, 2))
        scores = scores * (1.0 / np.sqrt(self.head_dim))
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)[:, None, None, :]
        B, Lq, Lk = q.shape[0], q.shape[1], k.shape[1]
        record_extra_flops(3 * B * Lq * Lk)
        return softmax(scores, axis=-1, mask=mask)

    def attend(self, q: Tensor, kv_tokens: Tensor, mask: np.ndarray | None = None) -> Tensor:
        """Attention of already-projected queries ``q`` over ``kv_tokens``."""
        if kv_tokens.shape[-1] != self.dim:
            raise ConfigurationError(f"key/value width {kv_tokens.shape[-1]} does not match d_m={self.dim}")
        k = self.k(kv_tokens)
        v = self.v(kv_tokens)
        weights = self.attention_weights(q, k, mask)
        heads = weights @ self._split(v)
        B, H, Lq, d = heads.shape
        return self.proj(heads.transpose(0, 2, 1, 3).reshape(B, Lq, H * d))

    def forward(self, x: Tensor, mask: np.ndarray | None = None, kv: Tensor | None = None) -> Tensor:
        x = as_tensor(x)
        if x.ndim != 3 or x.shape[-1] != self.dim:
            raise ConfigurationError(f"expected (B, L, {self.dim}) tokens, got {x.shape}")
        return self.attend(self.q(x), x if kv is None else as_tensor(kv), mask)

    def macs(self, lq: int, lk: int) -> int:
        C = self.dim
        return 2 * lq * C * C + 2 * lk * C * C + 2 * lq * lk * C


class DeformableAttention(Module):
    """Modulated deformable MSA.

    Queries predict, per position, a relative offset (dx, dy) and a
    modulation logit z through a zero-initialised linear map. Keys and
    values are computed from the feature map bilinearly resampled at the
    shifted positions and scaled by sigmoid(z) (or by 1 in ``bypass`` mode).
    """

    def __init__(self, dim: int, num_heads: int, rng: np.random.Generator, modulation: str = "sigmoid"):
        if modulation not in MODULATION_MODES:
            raise ConfigurationError(f"modulation must be one of {MODULATION_MODES}, got {modulation!r}")
        self.attn = MultiHeadAttention(dim, num_heads, rng)
        self.offset = Linear(dim, 3, rng)
        self.offset.weight.data[:] = 0.0
        self.offset.bias.data[:] = 0.0
        self.modulation = modulation

    @property
    def dim(self) -> int:
        return self.attn.dim

    def resample(self, x: Tensor, q: Tensor | None = None) -> tuple[Tensor, Tensor, Tensor]:
        """Return (x_hat, offsets (B, L, 2) as (dx, dy), modulation (B, L))."""
        B, C, H, W = x.shape
        if q is None:
            q = self.attn.q(F.img2seq(x))
        pred = self.offset(q)
        offsets = pred[:, :, 0:2]
        rows, cols = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
        base = np.stack([rows.ravel(), cols.ravel()], axis=-1)[None]
        # sampler takes (row, col) = (y, x)
        locations = offsets[:, :, [1, 0]] + base
        sampled = F.bilinear_sample(x, locations)
        if self.modulation == "sigmoid":
            modulation = sigmoid(pred[:, :, 2])
            sampled = sampled * modulation.reshape(B, 1, H * W)
        else:
            modulation = Tensor(np.ones((B, H * W)))
        return sampled.reshape(B, C, H, W), offsets, modulation

    def forward(self, x: Tensor, window: int | None = None) -> Tensor:
        x = as_tensor(x)
        B, C, H, W = x.shape
        if C != self.dim:
            raise ConfigurationError(f"expected {self.dim} channels, got {C}")
        q = self.attn.q(F.img2seq(x))
        x_hat, _, _ = self.resample(x, q)
        return _windowed(F.seq2img(q, H, W), x_hat, window, self.attn.attend)

    def macs(self, lq: int, lk: int) -> int:
        return self.attn.macs(lq, lk) + 3 * lq * self.dim


def _windowed(q_map: Tensor, kv_map: Tensor, window: int | None, attend) -> Tensor:
    """Run ``attend(q_tokens, kv_tokens, mask)`` per window and stitch the maps back."""
    B, C, H, W = q_map.shape
    if window is None or (window >= H and window >= W):
        out = attend(F.img2seq(q_map), F.img2seq(kv_map), None)
        return F.seq2img(out, H, W)
    q_tiles, mask, geo = F.window_partition(q_map, window)
    kv_tiles, _, _ = F.window_partition(kv_map, window)
    out = attend(F.img2seq(q_tiles), F.img2seq(kv_tiles), None if mask.all() else mask)
    return F.window_reverse(F.seq2img(out, window, window), geo)


def window_count(h: int, w: int, window: int | None) -> tuple[int, int]:
    """(number of windows, tokens per window) used by :func:`windowed_attention`."""
    if window is None or (window >= h and window >= w):
        return 1, h * w
    return (-(-h // window)) * (-(-w // window)), window * window


def self_attention_cost(dim: int, h: int, w: int, window: int | None) -> tuple[int, int]:
    """(MACs, softmax flops) of windowed self-attention on an h x w map.

    Queries are projected on the unpadded map; keys, values and the output
    projection run on every (possibly padded) window token.
    """
    count, per = window_count(h, w, window)
    padded = count * per
    macs = dim * dim * (h * w + 3 * padded) + 2 * count * per * per * dim
    return macs, 3 * count * per * per


# ---------------------------------------------------------------------------
# functional entry points
# ---------------------------------------------------------------------------


def msa_forward(x: Tensor, p: MultiHeadAttention, mask: np.ndarray | None = None) -> Tensor:
    """Multi-head self-attention over tokens (B, L, C); ``mask`` (B, L) marks valid keys."""
    return p(x, mask=mask)


def msa_sum_form_check(x, p: MultiHeadAttention) -> float:
    """Max |deviation| between ``msa_forward`` and the per-token summation form.

    The summation form writes each output token as a sum over the population,
    x_hat_i = sum_l x_l (A_l W^V) + b^V, where A_l W^V scales the value
    columns of head h by that head's attention weight from token l to i.
    The result is then projected by W^O exactly as in the forward pass.
    """
    x = np.asarray(as_tensor(x).data)
    B, L, C = x.shape
    Wq, bq = p.q.weight.data, p.q.bias.data
    Wk, bk = p.k.weight.data, p.k.bias.data
    Wv, bv = p.v.weight.data, p.v.bias.data
    H, d = p.num_heads, p.head_dim
    reference = p(Tensor(x)).data
    worst = 0.0
    for b in range(B):
        q = x[b] @ Wq + bq
        k = x[b] @ Wk + bk
        for i in range(L):
            mixed = np.zeros((1, 1, C))
            weights = np.empty((H, L))
            for h in range(H):
                s = q[i, h * d : (h + 1) * d] @ k[:, h * d : (h + 1) * d].T / np.sqrt(d)
                e = np.exp(s - s.max())
                weights[h] = e / e.sum()
            for l in range(L):
                scale = np.repeat(weights[:, l], d)
                mixed = mixed + x[b, l][None, None, :] @ (Wv * scale[None, :])
            token = (mixed + bv) @ p.proj.weight.data + p.proj.bias.data
            worst = max(worst, float(np.max(np.abs(token[0, 0] - reference[b, i]))))
    return worst


def md_msa_forward(x: Tensor, p: DeformableAttention) -> Tensor:
    """Global modulated deformable MSA on a feature map (B, C, H, W)."""
    return p(x, window=None)


def windowed_attention(x: Tensor, p: Module, window: int, deformable: bool | None = None) -> Tensor:
    """(MD-)MSA applied per ``window`` x ``window`` tile of (B, C, H, W).

    Deformable sampling reads from the whole (pre-partition) map; padded
    positions are masked out as keys.
    """
    if window < 1:
        raise ConfigurationError(f"window must be >= 1, got {window}")
    is_deformable = isinstance(p, DeformableAttention)
    if deformable is not None and deformable != is_deformable:
        raise ConfigurationError("deformable flag does not match the attention parameters")
    x = as_tensor(x)
    if is_deformable:
        return p(x, window=window)
    if not isinstance(p, MultiHeadAttention):
        raise ConfigurationError(f"unsupported attention module {type(p).__name__}")
    q = p.q(F.img2seq(x))
    B, C, H, W = x.shape
    return _windowed(F.seq2img(q, H, W), x, window, p.attend)


def cross_attention(q_tokens: Tensor, kv: Tensor, p: MultiHeadAttention) -> Tensor:
    """Queries from ``q_tokens`` (B, T, C), keys/values from ``kv`` (B, L, C)."""
    q_tokens, kv = as_tensor(q_tokens), as_tensor(kv)
    if q_tokens.shape[0] != kv.shape[0]:
        raise DimensionError(f"batch mismatch between {q_tokens.shape} and {kv.shape}")
    return p(q_tokens, kv=kv)


__all__ = [
    "MultiHeadAttention",
    "DeformableAttention",
    "msa_forward",
    "msa_sum_form_check",
    "md_msa_forward",
    "windowed_attention",
    "cross_attention",
    "window_count",
    "self_attention_cost",
]
