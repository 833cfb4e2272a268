"""Multimodal condition encoding.

Each reference image is compressed to m learned query tokens over its
semantic patch features, then low-level visual detail from the autoencoder
latent is folded in:

    f_img = f_s + MLP(Attn(f_s, f_v))
    Attn(f_s, f_v) = norm(Q(f_s) K(f_v)^T / sqrt(d)) V(f_v)

where K and V are two-layer networks over the latent channels, norm is an
elementwise ReLU on the scaled scores (row softmax available behind
``norm_mode``), and the MLP's final layer starts at zero so fusion is an
exact identity before training. Fused image tokens are spliced into the
embedded instruction text at their slots and the whole sequence runs
through a small bidirectional encoder to form the condition.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .backbones import (
    BOS_ID,
    EOS_ID,
    NonFinite,
    ShapeError,
    TextEmbedder,
    Tokenizer,
    TransformerBlock,
)
from .grammar import MultimodalInstruction, TextSpan, validate_arity

NORM_MODES = ("relu", "softmax")


def latent_tokens(z: torch.Tensor) -> torch.Tensor:
    """Flatten a latent grid to a token sequence: (C, h, w) -> (h*w, C)."""
    if z.dim() == 3:
        return z.flatten(1).transpose(0, 1)
    if z.dim() == 4:
        return z.flatten(2).transpose(1, 2)
    raise ShapeError(f"expected (C, h, w) or (B, C, h, w), got {tuple(z.shape)}")


class CrossAttentionBlock(nn.Module):
    """Pre-norm cross-attention + MLP; queries attend to a key/value set."""

    def __init__(self, d: int, heads: int, kv_dim: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(d)
        self.attn = nn.MultiheadAttention(d, heads, kdim=kv_dim, vdim=kv_dim, batch_first=True)
        self.norm2 = nn.LayerNorm(d)
        self.mlp = nn.Sequential(nn.Linear(d, 4 * d), nn.GELU(), nn.Linear(4 * d, d))

    def forward(self, q: torch.Tensor, kv: torch.Tensor) -> torch.Tensor:
        q = q + self.attn(self.norm1(q), kv, kv, need_weights=False)[0]
        return q + self.mlp(self.norm2(q))


class QueryCompressor(nn.Module):
    """m learned query tokens cross-attending to semantic patch tokens.

    Output is always (m, d) no matter how many patches come in.
    """

    def __init__(self, m_tokens: int, d: int, d_in: int, heads: int = 4, depth: int = 1):
        super().__init__()
        self.m_tokens = m_tokens
        self.d = d
        self.queries = nn.Parameter(torch.zeros(m_tokens, d))
        nn.init.trunc_normal_(self.queries, std=0.02)
        self.blocks = nn.ModuleList(CrossAttentionBlock(d, heads, d_in) for _ in range(depth))
        self.norm = nn.LayerNorm(d)

    def forward(self, sem: torch.Tensor) -> torch.Tensor:
        squeeze = sem.dim() == 2
        if squeeze:
            sem = sem.unsqueeze(0)
        if sem.dim() != 3:
            raise ShapeError(f"expected (n, d_in) or (B, n, d_in), got {tuple(sem.shape)}")
        q = self.queries.unsqueeze(0).expand(sem.shape[0], -1, -1)
        for blk in self.blocks:
            q = blk(q, sem)
        q = self.norm(q)
        return q.squeeze(0) if squeeze else q


def compress(compressor: QueryCompressor, sem: torch.Tensor) -> torch.Tensor:
    return compressor(sem)


class FusionBlock(nn.Module):
    """Adds latent-derived visual detail onto the query tokens.

    The residual MLP's last layer is zero-initialized, so right after
    construction ``forward(f_s, f_v) == f_s`` exactly, and no extra image
    tokens are ever introduced: output shape equals f_s shape.
    """

    def __init__(self, d: int, d_v: int, norm_mode: str = "relu"):
        super().__init__()
        if norm_mode not in NORM_MODES:
            raise ValueError(f"norm_mode must be one of {NORM_MODES}, got {norm_mode!r}")
        self.d = d
        self.d_v = d_v
        self.norm_mode = norm_mode
        self.wq = nn.Linear(d, d)
        self.k_net = nn.Sequential(nn.Linear(d_v, d), nn.GELU(), nn.Linear(d, d))
        self.v_net = nn.Sequential(nn.Linear(d_v, d), nn.GELU(), nn.Linear(d, d))
        self.fusion_mlp = nn.Sequential(nn.Linear(d, d), nn.GELU(), nn.Linear(d, d))
        nn.init.zeros_(self.fusion_mlp[2].weight)
        nn.init.zeros_(self.fusion_mlp[2].bias)

    def forward(self, f_s: torch.Tensor, f_v: torch.Tensor) -> torch.Tensor:
        squeeze = f_s.dim() == 2
        if squeeze:
            f_s = f_s.unsqueeze(0)
        if f_v.dim() == 2:
            f_v = f_v.unsqueeze(0)
        if f_s.dim() != 3 or f_s.shape[-1] != self.d:
            raise ShapeError(f"f_s must be (m, {self.d}) or (B, m, {self.d}), got {tuple(f_s.shape)}")
        if f_v.dim() != 3 or f_v.shape[-1] != self.d_v:
            raise ShapeError(f"f_v must be (n, {self.d_v}) or (B, n, {self.d_v}), got {tuple(f_v.shape)}")

        q = self.wq(f_s)  # (B, m, d)
        k = self.k_net(f_v)  # (B, n, d)
        v = self.v_net(f_v)  # (B, n, d)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.d)  # (B, m, n)
        if not torch.isfinite(scores).all():
            raise NonFinite("fusion attention scores are not finite")
        if self.norm_mode == "relu":
            attn = torch.relu(scores)
        else:
            attn = torch.softmax(scores, dim=-1)
        out = f_s + self.fusion_mlp(attn @ v)  # (B, m, d)
        if not torch.isfinite(out).all():
            raise NonFinite("fused tokens are not finite")
        return out.squeeze(0) if squeeze else out


def fuse(block: FusionBlock, f_s: torch.Tensor, f_v: torch.Tensor) -> torch.Tensor:
    return block(f_s, f_v)


@dataclass
class ConditionSequence:
    """Encoded condition for one instruction: tokens plus provenance."""

    tokens: torch.Tensor  # (L, d_cond)
    slot_spans: tuple  # one (start, end) per image slot, end exclusive
    n_text: int  # number of text positions, specials included

    @property
    def length(self) -> int:
        return self.tokens.shape[0]


@dataclass
class BatchedCondition:
    tokens: torch.Tensor  # (B, Lmax, d_cond)
    pad_mask: torch.Tensor  # (B, Lmax) bool, True marks padding


class InstructionEncoder(nn.Module):
    """Trainable multimodal encoder: text embedding, query compression,
    feature fusion, slot splicing, and the bidirectional sequence encoder.

    Works on precomputed backbone features so the frozen encoders stay
    outside; the model wrapper feeds them in.
    """

    def __init__(
        self,
        d_sem: int,
        latent_channels: int,
        m_tokens: int = 32,
        d_fusion: int = 64,
        d_cond: int = 96,
        norm_mode: str = "relu",
        encoder_depth: int = 2,
        encoder_heads: int = 4,
        compressor_heads: int = 4,
        compressor_depth: int = 1,
        max_seq_len: int = 160,
        use_fusion: bool = True,
    ):
        super().__init__()
        self.tokenizer = Tokenizer()
        self.m_tokens = m_tokens
        self.d_cond = d_cond
        self.max_seq_len = max_seq_len
        self.use_fusion = use_fusion
        self.text_embed = TextEmbedder(self.tokenizer.vocab_size, d_cond)
        self.compressor = QueryCompressor(m_tokens, d_fusion, d_sem, compressor_heads, compressor_depth)
        self.fusion = FusionBlock(d_fusion, latent_channels, norm_mode)
        self.img_proj = nn.Linear(d_fusion, d_cond)
        self.pos = nn.Parameter(torch.zeros(max_seq_len, d_cond))
        nn.init.trunc_normal_(self.pos, std=0.02)
        self.blocks = nn.ModuleList(TransformerBlock(d_cond, encoder_heads) for _ in range(encoder_depth))
        self.norm = nn.LayerNorm(d_cond)

    def encode_image_tokens(self, sem_tokens: torch.Tensor, vis_tokens: torch.Tensor) -> torch.Tensor:
        """One image's m condition tokens from its backbone features.

        sem_tokens: (n_patches, d_sem); vis_tokens: (n_v, C_lat).
        """
        f_s = self.compressor(sem_tokens)  # (m, d_fusion)
        f_img = self.fusion(f_s, vis_tokens) if self.use_fusion else f_s
        return self.img_proj(f_img)  # (m, d_cond)

    def _assemble(self, instr: MultimodalInstruction, image_tokens: list):
        """Interleave [BOS], embedded text, per-slot image tokens, [EOS]."""
        validate_arity(instr, len(image_tokens))
        bos = self.text_embed(torch.tensor([BOS_ID]))
        eos = self.text_embed(torch.tensor([EOS_ID]))
        parts = [bos]
        spans = []
        n_text = 2
        cursor = 1
        for seg in instr.segments:
            if isinstance(seg, TextSpan):
                ids = self.tokenizer.encode(seg.text)
                if ids:
                    parts.append(self.text_embed(torch.tensor(ids, dtype=torch.long)))
                    cursor += len(ids)
                    n_text += len(ids)
            else:
                toks = image_tokens[seg.index]
                spans.append((cursor, cursor + toks.shape[0]))
                parts.append(toks)
                cursor += toks.shape[0]
        parts.append(eos)
        seq = torch.cat(parts)  # (L, d_cond)
        if seq.shape[0] > self.max_seq_len:
            raise ShapeError(f"condition length {seq.shape[0]} exceeds max_seq_len {self.max_seq_len}")
        return seq, tuple(spans), n_text

    def encode(self, instr: MultimodalInstruction, image_features: list) -> ConditionSequence:
        """Encode one instruction whose slots carry (sem_tokens, vis_tokens)
        feature pairs; returns the contextualized condition sequence."""
        image_tokens = [self.encode_image_tokens(s, v) for s, v in image_features]
        seq, spans, n_text = self._assemble(instr, image_tokens)
        x = (seq + self.pos[: seq.shape[0]]).unsqueeze(0)
        for blk in self.blocks:
            x = blk(x)
        return ConditionSequence(self.norm(x).squeeze(0), spans, n_text)

    def encode_batch(self, instrs: list, image_features_per: list) -> BatchedCondition:
        """Batched encoding with right-padding and a key-padding mask.

        Padded positions are zeros and masked out of attention, so a
        sample's condition does not depend on its batch neighbors.
        """
        assembled = []
        for instr, feats in zip(instrs, image_features_per):
            image_tokens = [self.encode_image_tokens(s, v) for s, v in feats]
            seq, _, _ = self._assemble(instr, image_tokens)
            assembled.append(seq)
        lengths = [s.shape[0] for s in assembled]
        Lmax = max(lengths)
        B = len(assembled)
        tokens = assembled[0].new_zeros((B, Lmax, self.d_cond))
        pad = torch.ones(B, Lmax, dtype=torch.bool)
        for i, s in enumerate(assembled):
            tokens[i, : s.shape[0]] = s + self.pos[: s.shape[0]]
            pad[i, : s.shape[0]] = False
        x = tokens
        for blk in self.blocks:
            x = blk(x, key_padding_mask=pad)
        return BatchedCondition(self.norm(x), pad)
