"""Toy grounding VLM: 8x8 patch encoder feeding a prefix-LM transformer that
writes ``<description>[x0,y0,x1,y1]`` over the mixed vocabulary.

Sequence layout is fixed-width so logits never depend on batch padding::

    [ 64 visual | BOS query... PAD | SEP answer... PAD ]
      prefix, bidirectional          causal over the answer

Answer-region position t predicts answer token t (teacher forcing).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn

from .diffengine import ops
from .vocab import BOS, N_COORDS, SEP, Vocab, parse_bbox


class SequenceTooLong(ValueError):
    pass


@dataclass
class VictimConfig:
    image_size: int = 64
    patch: int = 8
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    mlp_ratio: int = 4
    max_query_len: int = 16
    max_answer_len: int = 24
    # fixed 2-D sin/cos code added to visual tokens, and sin/cos initial
    # embeddings for coordinate tokens (0 disables either)
    visual_pos_scale: float = 1.0
    coord_init_scale: float = 1.0

    @property
    def n_visual(self) -> int:
        return (self.image_size // self.patch) ** 2

    @property
    def seq_len(self) -> int:
        return self.n_visual + self.max_query_len + self.max_answer_len


def sincos_2d(side: int, d: int) -> torch.Tensor:
    """(side*side, d) code: half the channels encode the row, half the column."""
    half = ops.sinusoidal_positions(side, d // 2)
    rows = half[:, None, :].expand(side, side, d // 2)
    cols = half[None, :, :].expand(side, side, d // 2)
    return torch.cat([rows, cols], dim=-1).reshape(side * side, d)


def kaiming_linear(n_out: int, n_in: int) -> nn.Parameter:
    w = torch.empty(n_out, n_in)
    nn.init.kaiming_uniform_(w, a=math.sqrt(5))
    return nn.Parameter(w)


class Block(nn.Module):
    def __init__(self, d: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.heads = heads
        self.ln1_w, self.ln1_b = nn.Parameter(torch.ones(d)), nn.Parameter(torch.zeros(d))
        self.ln2_w, self.ln2_b = nn.Parameter(torch.ones(d)), nn.Parameter(torch.zeros(d))
        self.w_qkv = kaiming_linear(3 * d, d)
        self.w_out = kaiming_linear(d, d)
        self.b_out = nn.Parameter(torch.zeros(d))
        self.w_fc = kaiming_linear(mlp_ratio * d, d)
        self.b_fc = nn.Parameter(torch.zeros(mlp_ratio * d))
        self.w_proj = kaiming_linear(d, mlp_ratio * d)
        self.b_proj = nn.Parameter(torch.zeros(d))

    def forward(self, x, mask):
        h = ops.layer_norm(x, self.ln1_w, self.ln1_b)
        q, k, v = ops.linear(h, self.w_qkv).chunk(3, dim=-1)
        a = ops.scaled_dot_attention(
            ops.split_heads(q, self.heads), ops.split_heads(k, self.heads),
            ops.split_heads(v, self.heads), mask,
        )
        x = x + ops.linear(ops.merge_heads(a), self.w_out, self.b_out)
        h = ops.layer_norm(x, self.ln2_w, self.ln2_b)
        h = ops.gelu(ops.linear(h, self.w_fc, self.b_fc))
        return x + ops.linear(h, self.w_proj, self.b_proj)


class VictimModel(nn.Module):
    def __init__(self, vocab: Vocab, config: VictimConfig | None = None):
        super().__init__()
        self.vocab = vocab
        self.config = cfg = config or VictimConfig()
        d = cfg.d_model
        patch_w = torch.empty(d, 3, cfg.patch, cfg.patch)
        nn.init.kaiming_uniform_(patch_w, a=math.sqrt(5))
        self.patch_w = nn.Parameter(patch_w)
        self.patch_b = nn.Parameter(torch.zeros(d))
        tok = torch.randn(len(vocab), d) * 0.02
        if cfg.coord_init_scale:
            k = vocab.coord_offset
            tok[k:k + N_COORDS] = ops.sinusoidal_positions(N_COORDS, d).to(tok.dtype) * cfg.coord_init_scale
        self.tok_emb = nn.Parameter(tok)
        side = cfg.image_size // cfg.patch
        self.register_buffer("visual_pos", (sincos_2d(side, d) * cfg.visual_pos_scale).to(tok.dtype))
        self.pos_emb = nn.Parameter(torch.randn(cfg.seq_len, d) * 0.02)
        self.blocks = nn.ModuleList(Block(d, cfg.n_heads, cfg.mlp_ratio) for _ in range(cfg.n_layers))
        self.lnf_w, self.lnf_b = nn.Parameter(torch.ones(d)), nn.Parameter(torch.zeros(d))
        self.head_w = kaiming_linear(len(vocab), d)
        self.head_b = nn.Parameter(torch.zeros(len(vocab)))

    # -- batching -------------------------------------------------------------

    def encode_query(self, queries: Sequence[Sequence[int]]) -> torch.Tensor:
        """Token lists -> (B, max_query_len) ids as ``BOS q... PAD``."""
        width = self.config.max_query_len
        out = torch.full((len(queries), width), self.vocab.pad, dtype=torch.long)
        for i, q in enumerate(queries):
            if len(q) + 1 > width:
                raise SequenceTooLong(f"query of {len(q)} tokens exceeds {width - 1}")
            out[i, 0] = self.vocab[BOS]
            out[i, 1:len(q) + 1] = torch.as_tensor(list(q), dtype=torch.long)
        return out

    def encode_answer(self, answers: Sequence[Sequence[int]]):
        """Targets (EOS included) -> (teacher inputs, targets, mask), each (B, A)."""
        width = self.config.max_answer_len
        b = len(answers)
        inputs = torch.full((b, width), self.vocab.pad, dtype=torch.long)
        targets = torch.full((b, width), self.vocab.pad, dtype=torch.long)
        mask = torch.zeros((b, width), dtype=torch.bool)
        for i, a in enumerate(answers):
            n = len(a)
            if n > width:
                raise SequenceTooLong(f"answer of {n} tokens exceeds {width}")
            a = torch.as_tensor(list(a), dtype=torch.long)
            inputs[i, 0] = self.vocab[SEP]
            inputs[i, 1:n] = a[:-1]
            targets[i, :n] = a
            mask[i, :n] = True
        return inputs, targets, mask

    def attention_mask(self, query_ids: torch.Tensor) -> torch.Tensor:
        """Boolean (B, 1, L, L) mask, True where a position may attend."""
        cfg = self.config
        nv, nq, na = cfg.n_visual, cfg.max_query_len, cfg.max_answer_len
        total = nv + nq + na
        allowed = torch.zeros(total, total, dtype=torch.bool)
        allowed[:, : nv + nq] = True
        allowed[nv + nq:, nv + nq:] = torch.tril(torch.ones(na, na, dtype=torch.bool))
        key_ok = torch.ones(query_ids.shape[0], total, dtype=torch.bool)
        key_ok[:, nv:nv + nq] = query_ids != self.vocab.pad
        return (allowed[None] & key_ok[:, None, :])[:, None]

    # -- forward --------------------------------------------------------------

    def embed_image(self, images: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        if images.dim() != 4 or images.shape[1:] != (3, cfg.image_size, cfg.image_size):
            raise ops.ShapeError(f"expected (B, 3, {cfg.image_size}, {cfg.image_size}), got {tuple(images.shape)}")
        x = ops.conv2d(images * 2 - 1, self.patch_w, self.patch_b, stride=cfg.patch)
        return x.flatten(2).transpose(1, 2) + self.visual_pos

    def hidden(self, images, query_ids, answer_in):
        vis = self.embed_image(images)
        txt = ops.embedding_lookup(self.tok_emb, torch.cat([query_ids, answer_in], dim=1))
        x = torch.cat([vis, txt], dim=1) + self.pos_emb
        mask = ops.additive_mask(self.attention_mask(query_ids), x.dtype)
        for blk in self.blocks:
            x = blk(x, mask)
        return ops.layer_norm(x, self.lnf_w, self.lnf_b)

    def forward(self, images, query_ids, answer_in):
        """Logits (B, max_answer_len, |V|) for the answer region."""
        h = self.hidden(images, query_ids, answer_in)
        start = self.config.n_visual + self.config.max_query_len
        return ops.linear(h[:, start:], self.head_w, self.head_b)

    def visual_features(self, images, query_ids) -> torch.Tensor:
        """Mean-pooled visual tokens after the final block, (B, d_model)."""
        answer_in = torch.full((images.shape[0], self.config.max_answer_len), self.vocab.pad, dtype=torch.long)
        answer_in[:, 0] = self.vocab[SEP]
        h = self.hidden(images, query_ids, answer_in)
        return h[:, : self.config.n_visual].mean(dim=1)

    @torch.no_grad()
    def greedy_decode(self, images, query_ids, max_len: int | None = None,
                      temperature: float = 0.0, generator: torch.Generator | None = None):
        """Decode answers; argmax unless ``temperature`` > 0. Returns token lists.

        Generation stops at EOS (kept out of the returned tokens) or ``max_len``.
        """
        cfg = self.config
        max_len = min(max_len or cfg.max_answer_len, cfg.max_answer_len)
        b = images.shape[0]
        answer_in = torch.full((b, cfg.max_answer_len), self.vocab.pad, dtype=torch.long)
        answer_in[:, 0] = self.vocab[SEP]
        out = [[] for _ in range(b)]
        done = torch.zeros(b, dtype=torch.bool)
        for t in range(max_len):
            logits = self.forward(images, query_ids, answer_in)[:, t]
            if temperature > 0:
                probs = torch.softmax(logits / temperature, dim=-1)
                nxt = torch.multinomial(probs, 1, generator=generator).squeeze(1)
            else:
                nxt = logits.argmax(dim=-1)
            for i in range(b):
                if done[i]:
                    continue
                if int(nxt[i]) == self.vocab.eos:
                    done[i] = True
                else:
                    out[i].append(int(nxt[i]))
            if bool(done.all()):
                break
            if t + 1 < cfg.max_answer_len:
                answer_in[:, t + 1] = nxt
        return out

    def parse(self, tokens) -> tuple[int, int, int, int] | None:
        return parse_bbox(self.vocab, tokens)


def token_cross_entropy(logits, targets, mask) -> torch.Tensor:
    """Per-sample mean token CE over masked positions, shape (B,)."""
    logp = ops.log_softmax(logits, dim=-1)
    nll = -logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    m = mask.to(nll.dtype)
    return (nll * m).sum(dim=1) / m.sum(dim=1).clamp(min=1)


def lm_loss(logits, targets, mask, poisoned):
    """Partitioned LM loss: mean CE over clean samples plus mean CE over poisoned.

    Each sample's CE is first averaged over its own tokens. A side with no
    samples in the batch contributes 0. Returns (total, clean, poison).
    """
    per_sample = token_cross_entropy(logits, targets, mask)
    poisoned = torch.as_tensor(poisoned, dtype=torch.bool)
    zero = per_sample.new_zeros(())
    clean = per_sample[~poisoned].mean() if bool((~poisoned).any()) else zero
    poison = per_sample[poisoned].mean() if bool(poisoned.any()) else zero
    return clean + poison, clean, poison
