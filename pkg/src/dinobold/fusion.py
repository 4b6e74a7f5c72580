"""Slice-wise attention fusion.

The encoder treats every slice of a window independently; this module lets
the K slices exchange information.  At each patch location the K token
vectors are stacked and run through a small pre-norm transformer
(self-attention over the slice axis + feed-forward), so functional
contrast at one location can draw on anatomical context from neighboring
slices.  Patch locations never mix here.

The main token tensor and every skip tensor get their own independently
parameterized stack.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import torch
import torch.nn as nn

__all__ = ["FusionConfig", "SliceAttentionFusion", "SkipFusion", "fuse", "fuse_skips"]


@dataclass(frozen=True)
class FusionConfig:
    dim: int
    heads: int = 4
    layers: int = 2
    dropout: float = 0.1
    use_slice_pos_embedding: bool = True
    num_slices: int = 5  # required by the learned slice-position embedding

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ValueError(f"dim {self.dim} not divisible by {self.heads} heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")


class _SliceAttention(nn.Module):
    def __init__(self, dim: int, heads: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        self.attn_drop = nn.Dropout(dropout)
        self.proj_drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        n, k, d = x.shape
        qkv = self.qkv(x).reshape(n, k, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, kk, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ kk.transpose(-2, -1)) * self.head_dim**-0.5
        attn = self.attn_drop(attn.softmax(dim=-1))
        out = (attn @ v).transpose(1, 2).reshape(n, k, d)
        return self.proj_drop(self.proj(out))


class _FusionBlock(nn.Module):
    """Pre-norm block: x + attn(LN(x)), then x + mlp(LN(x)), expansion x4."""

    def __init__(self, dim: int, heads: int, dropout: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = _SliceAttention(dim, heads, dropout)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim * 4),
            nn.GELU(),
            nn.Dropout(dropout),
            nn.Linear(dim * 4, dim),
            nn.Dropout(dropout),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x


class SliceAttentionFusion(nn.Module):
    """Attention along the slice axis, independently at each patch location.

    Accepts (K, P, dim) or batched (B, K, P, dim) token tensors and returns
    the same shape.  The optional learned slice-position embedding marks
    anatomical order (and in particular the center slice); disabling it
    makes the module permutation-equivariant along K.
    """

    def __init__(self, cfg: FusionConfig):
        super().__init__()
        self.cfg = cfg
        if cfg.use_slice_pos_embedding:
            self.slice_pos = nn.Parameter(torch.zeros(cfg.num_slices, cfg.dim))
            nn.init.normal_(self.slice_pos, std=0.02)
        self.blocks = nn.ModuleList(
            _FusionBlock(cfg.dim, cfg.heads, cfg.dropout) for _ in range(cfg.layers)
        )

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        single = tokens.dim() == 3
        if single:
            tokens = tokens.unsqueeze(0)
        b, k, p, d = tokens.shape
        if d != self.cfg.dim:
            raise ValueError(f"token dim {d} != configured dim {self.cfg.dim}")
        if self.cfg.use_slice_pos_embedding and k != self.cfg.num_slices:
            raise ValueError(
                f"window has {k} slices but the position embedding covers {self.cfg.num_slices}"
            )
        # Patch locations become batch entries; attention runs over K only.
        x = tokens.permute(0, 2, 1, 3).reshape(b * p, k, d)
        if self.cfg.use_slice_pos_embedding:
            x = x + self.slice_pos.to(x.dtype)
        for block in self.blocks:
            x = block(x)
        out = x.reshape(b, p, k, d).permute(0, 2, 1, 3)
        return out.squeeze(0) if single else out


class SkipFusion(nn.Module):
    """One independently parameterized fusion stack per skip tap layer."""

    def __init__(self, tap_layers: Iterable[int], cfg: FusionConfig):
        super().__init__()
        self.stacks = nn.ModuleDict(
            {str(layer): SliceAttentionFusion(cfg) for layer in tap_layers}
        )

    def forward(self, skips: dict[int, torch.Tensor]) -> dict[int, torch.Tensor]:
        out = {}
        for layer, tokens in skips.items():
            key = str(layer)
            if key not in self.stacks:
                raise KeyError(f"no fusion stack for skip layer {layer}")
            out[layer] = self.stacks[key](tokens)
        return out


def _run_in_mode(module: nn.Module, mode: str, fn):
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    was_training = module.training
    module.train(mode == "train")
    try:
        return fn()
    finally:
        module.train(was_training)


def fuse(module: SliceAttentionFusion, tokens: torch.Tensor, mode: str = "eval") -> torch.Tensor:
    """Fuse one window's (K, P, dim) tokens; dropout active only in train mode."""
    return _run_in_mode(module, mode, lambda: module(tokens))


def fuse_skips(
    module: SkipFusion, skips: dict[int, torch.Tensor], mode: str = "eval"
) -> dict[int, torch.Tensor]:
    """Fuse each skip tensor with its own stack; an empty skip set passes through."""
    return _run_in_mode(module, mode, lambda: module(skips))
