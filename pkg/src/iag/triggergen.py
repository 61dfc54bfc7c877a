"""Text-conditional U-Net trigger generator and the image-side losses.

The generator sees the clean image and a frozen embedding of the attack
target's description, and returns an additive residual with the image's
shape. Conditioning enters through cross-attention at the bottleneck and at
both decoder resolutions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn

from .diffengine import ops
from .diffengine.ops import sinusoidal_positions
from .vocab import Vocab


@dataclass
class GeneratorConfig:
    channels: tuple[int, int, int] = (16, 32, 64)
    d_cond: int = 32
    heads: int = 2
    max_cond_len: int = 16
    encoder_seed: int = 1234


class ConditionEncoder(nn.Module):
    """Frozen text encoder: seeded random token table plus sinusoidal positions.

    Everything lives in buffers, so no optimizer ever sees it and gradients
    stop at its output.
    """

    def __init__(self, vocab: Vocab, d_cond: int = 32, max_len: int = 16, seed: int = 1234):
        super().__init__()
        self.vocab = vocab
        self.max_len = max_len
        g = torch.Generator().manual_seed(seed)
        table = torch.randn(len(vocab), d_cond, generator=g, dtype=torch.float64)
        self.register_buffer("table", table.to(torch.get_default_dtype()))
        self.register_buffer("positions", sinusoidal_positions(max_len, d_cond).to(torch.get_default_dtype()))

    def ids(self, descriptions: Sequence[Sequence[int]]):
        """Pad token lists into (B, L) ids and a (B, L) validity mask."""
        if not descriptions:
            raise ValueError("no descriptions to encode")
        width = max(len(d) for d in descriptions)
        if width == 0 or any(len(d) == 0 for d in descriptions):
            raise ValueError("empty description")
        if width > self.max_len:
            raise ValueError(f"description longer than {self.max_len} tokens")
        ids = torch.full((len(descriptions), width), self.vocab.pad, dtype=torch.long)
        mask = torch.zeros((len(descriptions), width), dtype=torch.bool)
        for i, d in enumerate(descriptions):
            ids[i, : len(d)] = torch.as_tensor(list(d), dtype=torch.long)
            mask[i, : len(d)] = True
        return ids, mask

    @torch.no_grad()
    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        if int(ids.max()) >= self.table.shape[0] or int(ids.min()) < 0:
            raise ValueError("unknown token id in condition")
        z = ops.embedding_lookup(self.table, ids) + self.positions[: ids.shape[1]]
        return z.detach()

    def encode(self, descriptions: Sequence[Sequence[int]]):
        ids, mask = self.ids(descriptions)
        return self(ids), mask


def _conv(c_in, c_out, k=3):
    w = torch.empty(c_out, c_in, k, k)
    nn.init.kaiming_uniform_(w, a=math.sqrt(5))
    return nn.Parameter(w), nn.Parameter(torch.zeros(c_out))


class ConvBlock(nn.Module):
    def __init__(self, c_in, c_out, stride=1):
        super().__init__()
        self.stride = stride
        self.w, self.b = _conv(c_in, c_out)

    def forward(self, x):
        return ops.gelu(ops.conv2d(x, self.w, self.b, stride=self.stride, padding=1))


class UpBlock(nn.Module):
    def __init__(self, c_in, c_out):
        super().__init__()
        w = torch.empty(c_in, c_out, 2, 2)
        nn.init.kaiming_uniform_(w, a=math.sqrt(5))
        self.w, self.b = nn.Parameter(w), nn.Parameter(torch.zeros(c_out))

    def forward(self, x):
        return ops.transpose_conv2d(x, self.w, self.b, stride=2)


class CrossAttention(nn.Module):
    """Residual cross-attention from a feature map into the condition tokens."""

    def __init__(self, channels: int, d_cond: int, heads: int):
        super().__init__()
        self.heads = heads
        self.ln_w, self.ln_b = nn.Parameter(torch.ones(channels)), nn.Parameter(torch.zeros(channels))
        self.w_q = nn.Parameter(_kaiming(channels, channels))
        self.w_k = nn.Parameter(_kaiming(channels, d_cond))
        self.w_v = nn.Parameter(_kaiming(channels, d_cond))
        self.w_o = nn.Parameter(_kaiming(channels, channels))
        self.b_o = nn.Parameter(torch.zeros(channels))

    def forward(self, fmap, cond, cond_mask):
        b, c, h, w = fmap.shape
        tokens = fmap.flatten(2).transpose(1, 2)
        q = ops.layer_norm(tokens, self.ln_w, self.ln_b)
        att = ops.cross_attention(q, cond, self.w_q, self.w_k, self.w_v, self.heads, cond_mask)
        out = tokens + ops.linear(att, self.w_o, self.b_o)
        return out.transpose(1, 2).reshape(b, c, h, w)


def _kaiming(n_out, n_in):
    w = torch.empty(n_out, n_in)
    nn.init.kaiming_uniform_(w, a=math.sqrt(5))
    return w


class TriggerGenerator(nn.Module):
    """Two-level U-Net (64 -> 32 -> 16) with skip connections.

    The 1x1 output layer starts at zero, so an untrained generator emits an
    all-zero residual and poisoned images equal clean ones at step 0.
    """

    def __init__(self, config: GeneratorConfig | None = None):
        super().__init__()
        self.config = cfg = config or GeneratorConfig()
        c1, c2, c3 = cfg.channels
        self.enc1 = nn.ModuleList([ConvBlock(3, c1), ConvBlock(c1, c1)])
        self.enc2 = nn.ModuleList([ConvBlock(c1, c2, stride=2), ConvBlock(c2, c2)])
        self.enc3 = nn.ModuleList([ConvBlock(c2, c3, stride=2), ConvBlock(c3, c3)])
        self.attn3 = CrossAttention(c3, cfg.d_cond, cfg.heads)
        self.up2 = UpBlock(c3, c2)
        self.dec2 = ConvBlock(2 * c2, c2)
        self.attn2 = CrossAttention(c2, cfg.d_cond, cfg.heads)
        self.up1 = UpBlock(c2, c1)
        self.dec1 = ConvBlock(2 * c1, c1)
        self.attn1 = CrossAttention(c1, cfg.d_cond, cfg.heads)
        self.out_w = nn.Parameter(torch.zeros(3, c1, 1, 1))
        self.out_b = nn.Parameter(torch.zeros(3))

    def forward(self, images, cond, cond_mask=None):
        if images.dim() != 4 or images.shape[1] != 3 or images.shape[2] % 4 or images.shape[3] % 4:
            raise ops.ShapeError(f"generator needs (B, 3, H, W) with H, W divisible by 4, got {tuple(images.shape)}")
        if cond.shape[0] != images.shape[0]:
            raise ops.ShapeError("image and condition batch sizes differ")
        x = images * 2 - 1
        for blk in self.enc1:
            x = blk(x)
        s1 = x
        for blk in self.enc2:
            x = blk(x)
        s2 = x
        for blk in self.enc3:
            x = blk(x)
        x = self.attn3(x, cond, cond_mask)
        x = self.dec2(torch.cat([self.up2(x), s2], dim=1))
        x = self.attn2(x, cond, cond_mask)
        x = self.dec1(torch.cat([self.up1(x), s1], dim=1))
        x = self.attn1(x, cond, cond_mask)
        return ops.conv2d(x, self.out_w, self.out_b)


def poison_image(clean, residual, *, trigger_only: bool = False, budget: float | None = None):
    """Mix the residual onto the clean image and clamp to [0, 1].

    ``trigger_only`` drops the clean image (ablation). ``budget`` caps the
    residual elementwise to [-budget, budget] before mixing.
    """
    if clean.shape != residual.shape:
        raise ops.ShapeError(f"image {tuple(clean.shape)} vs residual {tuple(residual.shape)}")
    if budget is not None:
        residual = ops.clamp(residual, -budget, budget)
    mixed = residual if trigger_only else ops.add(clean, residual)
    return ops.clamp(mixed, 0.0, 1.0)


REC_EPS = 1e-6


def rec_loss(poisoned, clean, eps: float = REC_EPS):
    """Charbonnier reconstruction loss ``mean(sqrt((a - b)^2 + eps))``."""
    if poisoned.shape != clean.shape:
        raise ops.ShapeError(f"rec_loss: {tuple(poisoned.shape)} vs {tuple(clean.shape)}")
    diff = poisoned - clean
    return ops.mean(torch.sqrt(diff * diff + eps))
