"""Differentiable building blocks on top of :mod:`eatformer.tensor`.

Convolution, normalisation and bilinear sampling are fused ops with
hand-written backward passes; the layout helpers (``img2seq``, windows)
are compositions of reshape/transpose and inherit their gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DataError, DimensionError, GeometryError
from .tensor import Tensor, as_tensor, crop2d, log_softmax, matmul, pad2d, record_macs

# layer norm keeps the unit-variance property to ~1e-7 on small vectors;
# batch norm uses the customary 1e-5
LAYERNORM_EPS = 1e-7
BATCHNORM_EPS = 1e-5

# ---------------------------------------------------------------------------
# linear / convolution
# ---------------------------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as (in, out)."""
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear input {x.shape} does not match weight {weight.shape}")
    out = matmul(x, weight)
    return out + bias if bias is not None else out


def conv_output_size(size: int, kernel: int, stride: int, dilation: int, padding: int) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    dilation: int = 1,
    groups: int = 1,
    padding: int = 0,
) -> Tensor:
    """2-D cross-correlation over ``x`` of shape (B, C, H, W).

    ``weight`` has shape (O, C // groups, k, k). ``groups == C`` with
    ``O == C`` gives a depthwise convolution.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if stride < 1 or dilation < 1 or groups < 1 or padding < 0:
        raise ConfigurationError(
            f"invalid conv geometry stride={stride} dilation={dilation} groups={groups} padding={padding}"
        )
    if x.ndim != 4:
        raise DimensionError(f"conv2d expects (B, C, H, W), got {x.shape}")
    B, C, H, W = x.shape
    O, Cg, kh, kw = weight.shape
    if C % groups or O % groups:
        raise ConfigurationError(f"channels in={C} out={O} not divisible by groups={groups}")
    if Cg != C // groups:
        raise DimensionError(f"weight {weight.shape} does not match input {x.shape} with groups={groups}")
    Ho = conv_output_size(H, kh, stride, dilation, padding)
    Wo = conv_output_size(W, kw, stride, dilation, padding)
    if Ho <= 0 or Wo <= 0:
        raise GeometryError(f"conv on {H}x{W} with k={kh}, dilation={dilation}, padding={padding} is empty")

    G, Og, kk, P = groups, O // groups, kh * kw, Ho * Wo
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    he, we = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
    if kk == 1 and stride == 1:
        cols = xp.reshape(B, G, Cg, P)
    else:
        cols = np.empty((B, C, kk, Ho, Wo))
        for i in range(kh):
            for j in range(kw):
                r, c = i * dilation, j * dilation
                cols[:, :, i * kw + j] = xp[:, :, r : r + he : stride, c : c + we : stride]
        cols = cols.reshape(B, G, Cg * kk, P)
    wm = weight.data.reshape(G, Og, Cg * kk)
    depthwise = Og == 1 and Cg == 1
    if depthwise:
        out = np.einsum("gk,bgkp->bgp", wm[:, 0, :], cols)
    else:
        out = np.matmul(wm, cols)
    out = out.reshape(B, O, Ho, Wo)
    if bias is not None:
        out = out + bias.data.reshape(1, O, 1, 1)
    record_macs(B * O * Cg * kk * P)

    def backward(g):
        gm = g.reshape(B, G, Og, P)
        if depthwise:
            gw = np.einsum("bgp,bgkp->gk", gm[:, :, 0, :], cols).reshape(weight.shape)
            gcols = gm * wm[None, :, 0, :, None]  # (B,G,kk,P) since Og == 1
        else:
            gw = np.einsum("bgop,bgkp->gok", gm, cols).reshape(weight.shape)
            gcols = np.matmul(np.swapaxes(wm, -1, -2), gm)
        gx = None
        if x.requires_grad:
            if kk == 1 and stride == 1:
                gxp = gcols.reshape(B, C, H + 2 * padding, W + 2 * padding)
            else:
                gcols = gcols.reshape(B, C, kk, Ho, Wo)
                gxp = np.zeros((B, C, H + 2 * padding, W + 2 * padding))
                for i in range(kh):
                    for j in range(kw):
                        r, c = i * dilation, j * dilation
                        gxp[:, :, r : r + he : stride, c : c + we : stride] += gcols[:, :, i * kw + j]
            gx = gxp[:, :, padding : padding + H, padding : padding + W] if padding else gxp
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor._from_op(out, parents, backward)


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------


def _affine_shape(ndim: int, axis: int) -> tuple:
    shape = [1] * ndim
    shape[axis] = -1
    return tuple(shape)


def _normalize(x: Tensor, mean_: np.ndarray, inv_std: np.ndarray, reduce_axes, gamma, beta, axis, through_stats):
    """Shared forward/backward for batch and layer norm.

    ``through_stats`` selects whether the gradient flows through the
    mean/variance (training-mode batch norm, layer norm) or treats them as
    constants (inference-mode batch norm).
    """
    xhat = (x.data - mean_) * inv_std
    shape = _affine_shape(x.ndim, axis)
    out = xhat
    if gamma is not None:
        out = out * gamma.data.reshape(shape) + beta.data.reshape(shape)
    n = np.prod([x.shape[a] for a in reduce_axes])

    def backward(g):
        other = tuple(a for a in range(x.ndim) if a != axis)
        gg = (g * xhat).sum(axis=other) if gamma is not None else None
        gbeta = g.sum(axis=other) if gamma is not None else None
        dxhat = g * gamma.data.reshape(shape) if gamma is not None else g
        if through_stats:
            s1 = dxhat.sum(axis=reduce_axes, keepdims=True)
            s2 = (dxhat * xhat).sum(axis=reduce_axes, keepdims=True)
            gx = inv_std * (dxhat - s1 / n - xhat * s2 / n)
        else:
            gx = dxhat * inv_std
        return (gx, gg, gbeta) if gamma is not None else (gx,)

    parents = (x, gamma, beta) if gamma is not None else (x,)
    return Tensor._from_op(out, parents, backward)


def batch_norm(
    x: Tensor,
    gamma: Tensor | None,
    beta: Tensor | None,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = BATCHNORM_EPS,
    axis: int = 1,
) -> Tensor:
    """Batch normalisation over every axis except ``axis`` (the channel axis).

    In training mode the running statistics are updated in place with the
    unbiased batch variance.
    """
    if eps <= 0:
        raise ConfigurationError("eps must be positive")
    axis = axis % x.ndim
    reduce_axes = tuple(a for a in range(x.ndim) if a != axis)
    shape = _affine_shape(x.ndim, axis)
    if training:
        n = np.prod([x.shape[a] for a in reduce_axes])
        if n < 2:
            raise GeometryError("training-mode batch norm needs at least two values per channel")
        mu = x.data.mean(axis=reduce_axes, keepdims=True)
        var = x.data.var(axis=reduce_axes, keepdims=True)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(-1)
        running_var *= 1.0 - momentum
        running_var += momentum * var.reshape(-1) * n / max(n - 1, 1)
    else:
        mu = running_mean.reshape(shape)
        var = running_var.reshape(shape)
    inv_std = 1.0 / np.sqrt(var + eps)
    return _normalize(x, mu, inv_std, reduce_axes, gamma, beta, axis, through_stats=training)


def layer_norm(
    x: Tensor, gamma: Tensor | None, beta: Tensor | None, eps: float = LAYERNORM_EPS, axis: int = -1
) -> Tensor:
    """Normalise each position over the feature axis ``axis``."""
    if eps <= 0:
        raise ConfigurationError("eps must be positive")
    axis = axis % x.ndim
    mu = x.data.mean(axis=axis, keepdims=True)
    var = x.data.var(axis=axis, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    return _normalize(x, mu, inv_std, (axis,), gamma, beta, axis, through_stats=True)


# ---------------------------------------------------------------------------
# sampling and layout
# ---------------------------------------------------------------------------


def bilinear_sample(x: Tensor, locations: Tensor) -> Tensor:
    """Sample ``x`` (B, C, H, W) at continuous (row, col) ``locations`` (B, L, 2).

    Corner-aligned: integer coordinates hit pixel centres exactly, and
    coordinates outside ``[0, H-1] x [0, W-1]`` are clamped to the border.
    Differentiable with respect to both the feature map and the locations.
    Returns (B, C, L).
    """
    x, locations = as_tensor(x), as_tensor(locations)
    B, C, H, W = x.shape
    if locations.ndim != 3 or locations.shape[0] != B or locations.shape[2] != 2:
        raise DimensionError(f"locations {locations.shape} do not match feature map {x.shape}")
    L = locations.shape[1]
    ry, rx = locations.data[..., 0], locations.data[..., 1]
    y = np.clip(ry, 0.0, H - 1)
    xx = np.clip(rx, 0.0, W - 1)
    y0 = np.floor(y).astype(np.int64)
    x0 = np.floor(xx).astype(np.int64)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    wy = y - y0
    wx = xx - x0
    flat = x.data.reshape(B, C, H * W)
    idx = [y0 * W + x0, y0 * W + x1, y1 * W + x0, y1 * W + x1]
    vals = [np.take_along_axis(flat, i[:, None, :], axis=2) for i in idx]
    weights = [(1 - wy) * (1 - wx), (1 - wy) * wx, wy * (1 - wx), wy * wx]
    out = sum(v * w[:, None, :] for v, w in zip(vals, weights))
    inside_y = (ry >= 0) & (ry <= H - 1)
    inside_x = (rx >= 0) & (rx <= W - 1)

    def backward(g):
        gx = None
        if x.requires_grad:
            base = (np.arange(B)[:, None, None] * C + np.arange(C)[None, :, None]) * (H * W)
            acc = np.zeros(B * C * H * W)
            for i, w in zip(idx, weights):
                acc += np.bincount(
                    (base + i[:, None, :]).ravel(), weights=(g * w[:, None, :]).ravel(), minlength=acc.size
                )
            gx = acc.reshape(B, C, H, W)
        gl = None
        if locations.requires_grad:
            v00, v01, v10, v11 = vals
            dy = ((v10 - v00) * (1 - wx)[:, None, :] + (v11 - v01) * wx[:, None, :])
            dx = ((v01 - v00) * (1 - wy)[:, None, :] + (v11 - v10) * wy[:, None, :])
            # the upper neighbour collapses onto the lower one at the last row/col
            gy = (g * dy).sum(axis=1) * inside_y * (y0 < H - 1)
            gxx = (g * dx).sum(axis=1) * inside_x * (x0 < W - 1)
            gl = np.stack([gy, gxx], axis=-1)
        return gx, gl

    return Tensor._from_op(out, (x, locations), backward)


def img2seq(x: Tensor) -> Tensor:
    """(B, C, H, W) -> (B, H*W, C); position (i, j) lands at row i*W + j."""
    B, C, H, W = x.shape
    return x.transpose(0, 2, 3, 1).reshape(B, H * W, C)


def seq2img(seq: Tensor, height: int, width: int) -> Tensor:
    B, L, C = seq.shape
    if L != height * width:
        raise GeometryError(f"sequence length {L} cannot form a {height}x{width} map")
    return seq.reshape(B, height, width, C).transpose(0, 3, 1, 2)


@dataclass(frozen=True)
class WindowGeometry:
    batch: int
    height: int
    width: int
    window: int
    pad_h: int
    pad_w: int

    @property
    def rows(self) -> int:
        return (self.height + self.pad_h) // self.window

    @property
    def cols(self) -> int:
        return (self.width + self.pad_w) // self.window

    @property
    def count(self) -> int:
        return self.rows * self.cols


def window_partition(x: Tensor, window: int) -> tuple[Tensor, np.ndarray, WindowGeometry]:
    """Split (B, C, H, W) into non-overlapping ``window`` x ``window`` tiles.

    H and W are zero-padded on the bottom/right up to a multiple of the
    window. Returns the tiles (B*nW, C, w, w), a boolean validity mask
    (B*nW, w*w) that is False on padded positions, and the geometry needed
    by :func:`window_reverse`.
    """
    if window <= 0:
        raise ConfigurationError(f"window must be positive, got {window}")
    B, C, H, W = x.shape
    pad_h, pad_w = (-H) % window, (-W) % window
    geo = WindowGeometry(B, H, W, window, pad_h, pad_w)
    xp = pad2d(x, pad_h, pad_w)
    nh, nw = geo.rows, geo.cols
    tiles = xp.reshape(B, C, nh, window, nw, window).transpose(0, 2, 4, 1, 3, 5)
    tiles = tiles.reshape(B * nh * nw, C, window, window)
    valid = np.zeros((H + pad_h, W + pad_w), dtype=bool)
    valid[:H, :W] = True
    mask = valid.reshape(nh, window, nw, window).transpose(0, 2, 1, 3).reshape(nh * nw, window * window)
    mask = np.tile(mask, (B, 1))
    return tiles, mask, geo


def window_reverse(tiles: Tensor, geo: WindowGeometry) -> Tensor:
    """Inverse of :func:`window_partition` including the pad crop."""
    w, nh, nw = geo.window, geo.rows, geo.cols
    C = tiles.shape[1]
    x = tiles.reshape(geo.batch, nh, nw, C, w, w).transpose(0, 3, 1, 4, 2, 5)
    x = x.reshape(geo.batch, C, nh * w, nw * w)
    return crop2d(x, geo.height, geo.width)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels)
    B, K = logits.shape
    if labels.shape != (B,):
        raise DataError(f"expected {B} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise DataError(f"labels must lie in [0, {K}), got range [{labels.min()}, {labels.max()}]")
    logp = log_softmax(logits, axis=1)
    onehot = np.zeros((B, K))
    onehot[np.arange(B), labels.astype(np.int64)] = -1.0 / B
    return (logp * onehot).sum()
