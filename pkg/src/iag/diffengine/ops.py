"""Checked forward ops over torch tensors.

Every op validates shapes up front and refuses to hand back non-finite
values, so a NaN surfaces at the op that produced it instead of three
layers later inside the loss.
"""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F

MASK_VALUE = -1e9

_CHECK_FINITE = True


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def set_check_finite(enabled: bool) -> None:
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


class finite_checks:
    """Context manager toggling per-op finiteness checks."""

    def __init__(self, enabled: bool):
        self.enabled = enabled

    def __enter__(self):
        self._prev = _CHECK_FINITE
        set_check_finite(self.enabled)
        return self

    def __exit__(self, *exc):
        set_check_finite(self._prev)
        return False


def check_finite(t: torch.Tensor, where: str) -> torch.Tensor:
    if _CHECK_FINITE and not bool(torch.isfinite(t).all()):
        raise NonFiniteError(f"non-finite values produced by {where}")
    return t


def _need_rank(t: torch.Tensor, rank: int, name: str) -> None:
    if t.dim() != rank:
        raise ShapeError(f"{name}: expected rank {rank}, got shape {tuple(t.shape)}")


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ShapeError(f"matmul: {tuple(a.shape)} @ {tuple(b.shape)}")
    return check_finite(a @ b, "matmul")


def linear(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """``x @ weight.T + bias`` with weight stored as (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input dim {x.shape[-1]} vs weight {tuple(weight.shape)}")
    return check_finite(F.linear(x, weight, bias), "linear")


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0):
    """NCHW convolution; weight is (C_out, C_in, kh, kw)."""
    _need_rank(x, 4, "conv2d input")
    _need_rank(weight, 4, "conv2d weight")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: {x.shape[1]} input channels vs weight {tuple(weight.shape)}")
    return check_finite(F.conv2d(x, weight, bias, stride=stride, padding=padding), "conv2d")


def transpose_conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0):
    """NCHW transposed convolution; weight is (C_in, C_out, kh, kw)."""
    _need_rank(x, 4, "transpose_conv2d input")
    _need_rank(weight, 4, "transpose_conv2d weight")
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(f"transpose_conv2d: {x.shape[1]} input channels vs weight {tuple(weight.shape)}")
    out = F.conv_transpose2d(x, weight, bias, stride=stride, padding=padding)
    return check_finite(out, "transpose_conv2d")


def layer_norm(x, weight, bias, eps: float = 1e-5):
    if weight.shape != x.shape[-1:]:
        raise ShapeError(f"layer_norm: feature dim {x.shape[-1]} vs weight {tuple(weight.shape)}")
    return check_finite(F.layer_norm(x, weight.shape, weight, bias, eps), "layer_norm")


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return check_finite(torch.softmax(x, dim=dim), "softmax")


def log_softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return check_finite(torch.log_softmax(x, dim=dim), "log_softmax")


def relu(x):
    return torch.relu(x)


def gelu(x):
    return check_finite(F.gelu(x), "gelu")


def add(a, b):
    try:
        return check_finite(a + b, "add")
    except RuntimeError as exc:
        raise ShapeError(f"add: {tuple(a.shape)} + {tuple(b.shape)}") from exc


def mul(a, b):
    try:
        return check_finite(a * b, "mul")
    except RuntimeError as exc:
        raise ShapeError(f"mul: {tuple(a.shape)} * {tuple(b.shape)}") from exc


def mean(x, dim=None, keepdim: bool = False):
    if dim is None:
        return check_finite(x.mean(), "mean")
    return check_finite(x.mean(dim=dim, keepdim=keepdim), "mean")


def sum(x, dim=None, keepdim: bool = False):  # noqa: A001 - mirrors the op name
    if dim is None:
        return check_finite(x.sum(), "sum")
    return check_finite(x.sum(dim=dim, keepdim=keepdim), "sum")


def clamp(x, lo: float, hi: float):
    return torch.clamp(x, lo, hi)


def embedding_lookup(table: torch.Tensor, ids: torch.Tensor) -> torch.Tensor:
    _need_rank(table, 2, "embedding table")
    if ids.dtype not in (torch.int64, torch.int32):
        raise ShapeError("embedding_lookup: ids must be integer")
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= table.shape[0]):
        raise ShapeError(f"embedding_lookup: id out of range for table of {table.shape[0]} rows")
    return F.embedding(ids, table)


def scaled_dot_attention(q, k, v, mask=None):
    """Multi-head attention core on (B, h, Lq, dh) / (B, h, Lk, dh) tensors.

    ``mask`` is boolean, broadcastable to (B, h, Lq, Lk), True where attention
    is allowed, or an already-built additive float bias. Disallowed logits get
    ``MASK_VALUE`` rather than -inf so a fully masked row degrades to a uniform
    average instead of NaN.
    """
    bias = mask
    if mask is not None and mask.dtype == torch.bool:
        bias = additive_mask(mask, q.dtype)
    out = F.scaled_dot_product_attention(q, k, v, attn_mask=bias, scale=1.0 / math.sqrt(q.shape[-1]))
    return check_finite(out, "attention")


def additive_mask(allowed: torch.Tensor, dtype=None) -> torch.Tensor:
    dtype = dtype or torch.get_default_dtype()
    return torch.zeros(allowed.shape, dtype=dtype).masked_fill_(~allowed, MASK_VALUE)


def sinusoidal_positions(n: int, d: int) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    freq = torch.exp(-math.log(10000.0) * torch.arange(0, d, 2, dtype=torch.float64) / d)
    pe = torch.zeros(n, d, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * freq)
    pe[:, 1::2] = torch.cos(pos * freq)
    return pe


def split_heads(x: torch.Tensor, n_heads: int) -> torch.Tensor:
    b, length, d = x.shape
    if d % n_heads:
        raise ShapeError(f"model dim {d} not divisible by {n_heads} heads")
    return x.view(b, length, n_heads, d // n_heads).transpose(1, 2)


def merge_heads(x: torch.Tensor) -> torch.Tensor:
    b, h, length, dh = x.shape
    return x.transpose(1, 2).reshape(b, length, h * dh)


def cross_attention(query, context, w_q, w_k, w_v, n_heads: int = 1, context_mask=None):
    """Attend from ``query`` (B, Lq, Dq) into ``context`` (B, Lk, Dc).

    Projections are bias-free (out, in) matrices; the result is the
    attention-weighted value projection in query-projection width, without an
    output projection. ``context_mask`` is (B, Lk) boolean, True for real keys.
    """
    _need_rank(query, 3, "cross_attention query")
    _need_rank(context, 3, "cross_attention context")
    if query.shape[0] != context.shape[0]:
        raise ShapeError("cross_attention: batch sizes differ")
    q = split_heads(linear(query, w_q), n_heads)
    k = split_heads(linear(context, w_k), n_heads)
    v = split_heads(linear(context, w_v), n_heads)
    mask = None
    if context_mask is not None:
        mask = context_mask[:, None, None, :].to(torch.bool)
    return merge_heads(scaled_dot_attention(q, k, v, mask))
