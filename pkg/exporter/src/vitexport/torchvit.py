"""Torch reference ViT matching the DINO-family architecture.

This is the "source runtime" used to generate golden fixtures and to verify
exports: pre-norm blocks with optional LayerScale, a CLS token plus register
tokens, positional embeddings on CLS and patch tokens, exact-erf GELU, and
LayerNorm eps 1e-6. Runs in float32 on CPU.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

LN_EPS = 1.0e-6


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4, layerscale: bool = True):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(dim, eps=LN_EPS)
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        self.ls1 = nn.Parameter(torch.ones(dim)) if layerscale else None
        self.norm2 = nn.LayerNorm(dim, eps=LN_EPS)
        self.fc1 = nn.Linear(dim, dim * mlp_ratio)
        self.fc2 = nn.Linear(dim * mlp_ratio, dim)
        self.ls2 = nn.Parameter(torch.ones(dim)) if layerscale else None

    def attention(self, x: torch.Tensor, keep_probs: bool):
        t, d = x.shape
        dk = d // self.heads
        qkv = self.qkv(x).reshape(t, 3, self.heads, dk).permute(1, 2, 0, 3)
        q, k, v = qkv[0], qkv[1], qkv[2]
        probs = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(dk), dim=-1)
        ctx = (probs @ v).transpose(0, 1).reshape(t, d)
        out = self.proj(ctx)
        return out, (probs if keep_probs else None)

    def forward(self, x: torch.Tensor, keep_probs: bool = False):
        attn_out, probs = self.attention(self.norm1(x), keep_probs)
        if self.ls1 is not None:
            attn_out = attn_out * self.ls1
        x = x + attn_out
        mlp_out = self.fc2(F.gelu(self.fc1(self.norm2(x))))
        if self.ls2 is not None:
            mlp_out = mlp_out * self.ls2
        return x + mlp_out, probs


class TorchViT(nn.Module):
    """Tokens ordered [cls; registers; patches]; pos_embed covers cls + patches."""

    def __init__(self, patch_size: int, embed_dim: int, depth: int, heads: int,
                 registers: int, window: int, channels: int = 3, mlp_ratio: int = 4,
                 layerscale: bool = True, final_norm: bool = True,
                 classifier_classes: int | None = None):
        super().__init__()
        self.patch_size = patch_size
        self.window = window
        self.registers = registers
        side = window // patch_size
        self.grid_side = side
        self.patch_embed = nn.Conv2d(channels, embed_dim, kernel_size=patch_size,
                                     stride=patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, embed_dim))
        self.register_tokens = nn.Parameter(torch.zeros(1, registers, embed_dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, 1 + side * side, embed_dim))
        self.blocks = nn.ModuleList(
            Block(embed_dim, heads, mlp_ratio, layerscale) for _ in range(depth)
        )
        self.norm = nn.LayerNorm(embed_dim, eps=LN_EPS) if final_norm else None
        self.head = nn.Linear(embed_dim, classifier_classes) if classifier_classes else None

    @torch.no_grad()
    def randomize(self, seed: int) -> "TorchViT":
        gen = torch.Generator().manual_seed(seed)
        for p in self.parameters():
            p.copy_(torch.randn(p.shape, generator=gen) * 0.05)
        return self

    @torch.no_grad()
    def forward_tokens(self, image: torch.Tensor, want_attention: bool = False):
        """image: (C, H, W) float32 in [0, 1]. Returns (tokens (T, D), probs)."""
        x = self.patch_embed(image[None])  # (1, D, side, side)
        x = x.flatten(2).transpose(1, 2)  # (1, N, D)
        x = torch.cat([self.cls_token, x], dim=1) + self.pos_embed
        x = torch.cat([x[:, :1], self.register_tokens, x[:, 1:]], dim=1)
        tokens = x[0]
        probs = None
        for i, blk in enumerate(self.blocks):
            tokens, p = blk(tokens, keep_probs=want_attention and i == len(self.blocks) - 1)
            if p is not None:
                probs = p
        if self.norm is not None:
            tokens = self.norm(tokens)
        return tokens, probs

    @torch.no_grad()
    def split_tokens(self, tokens: torch.Tensor):
        r = self.registers
        return tokens[0], tokens[1 : 1 + r], tokens[1 + r :]
