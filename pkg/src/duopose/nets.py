"""Shared dual-branch transformer blocks.

Both the interaction prior and the diffusion denoiser are stacks of the
same block: adaptive layer norm conditioning, self-attention over the
frames of one person, cross-attention where queries come from one person
and keys/values from the other, then a feed-forward. One set of weights
serves both branches; the two people differ only in which stream they ride,
so swapping the inputs swaps the outputs.
"""

import math

import torch
import torch.nn as nn


def sinusoidal_embedding(positions: torch.Tensor, dim: int) -> torch.Tensor:
    """Classic fixed sin/cos encoding. positions: ... -> ... X dim."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half
    )
    args = positions.float().unsqueeze(-1) * freqs
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[..., :1])], dim=-1)
    return emb


class AdaLayerNorm(nn.Module):
    """LayerNorm whose scale and shift come from a condition vector."""

    def __init__(self, dim: int, cond_dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim, elementwise_affine=False)
        self.proj = nn.Linear(cond_dim, 2 * dim)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, h: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        # h: B X N X D, cond: B X D_c or B X N X D_c
        if cond.ndim == h.ndim - 1:
            cond = cond.unsqueeze(-2)
        scale, shift = self.proj(cond).chunk(2, dim=-1)
        return self.norm(h) * (1.0 + scale) + shift


class DualBranchBlock(nn.Module):
    def __init__(self, dim: int, heads: int, ff_hidden: int, cond_dim: int):
        super().__init__()
        self.norm_self = AdaLayerNorm(dim, cond_dim)
        self.attn_self = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm_cross = AdaLayerNorm(dim, cond_dim)
        self.attn_cross = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm_ff = AdaLayerNorm(dim, cond_dim)
        self.ff = nn.Sequential(
            nn.Linear(dim, ff_hidden), nn.GELU(), nn.Linear(ff_hidden, dim)
        )

    def forward(
        self,
        h_a: torch.Tensor,
        h_b: torch.Tensor,
        cond_a: torch.Tensor,
        cond_b: torch.Tensor,
        single_branch: bool = False,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """h_a, h_b: B X N X D. Both branches update simultaneously from
        pre-update states, keeping the two roles exactly symmetric."""
        if h_a.shape != h_b.shape:
            raise ValueError(f"branch shapes differ: {tuple(h_a.shape)} vs {tuple(h_b.shape)}")
        qa = self.norm_self(h_a, cond_a)
        qb = self.norm_self(h_b, cond_b)
        h_a = h_a + self.attn_self(qa, qa, qa, need_weights=False)[0]
        h_b = h_b + self.attn_self(qb, qb, qb, need_weights=False)[0]

        qa = self.norm_cross(h_a, cond_a)
        qb = self.norm_cross(h_b, cond_b)
        # single_branch is a test-time ablation: each stream attends to
        # itself, so no information crosses between the two people.
        ka, kb = (qa, qb) if single_branch else (qb, qa)
        h_a = h_a + self.attn_cross(qa, ka, ka, need_weights=False)[0]
        h_b = h_b + self.attn_cross(qb, kb, kb, need_weights=False)[0]

        h_a = h_a + self.ff(self.norm_ff(h_a, cond_a))
        h_b = h_b + self.ff(self.norm_ff(h_b, cond_b))
        return h_a, h_b


class DualBranchStack(nn.Module):
    """A stack of dual-branch blocks with fixed positional encoding."""

    def __init__(self, num_blocks: int, dim: int, heads: int, ff_hidden: int, cond_dim: int):
        super().__init__()
        self.blocks = nn.ModuleList(
            DualBranchBlock(dim, heads, ff_hidden, cond_dim) for _ in range(num_blocks)
        )
        self.dim = dim

    def forward(self, h_a, h_b, cond_a, cond_b, single_branch: bool = False):
        pos = sinusoidal_embedding(torch.arange(h_a.shape[1]), self.dim)
        h_a = h_a + pos
        h_b = h_b + pos
        for block in self.blocks:
            h_a, h_b = block(h_a, h_b, cond_a, cond_b, single_branch=single_branch)
        return h_a, h_b


class TimestepEmbedding(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        return self.mlp(sinusoidal_embedding(t, self.dim))


def zero_module(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        nn.init.zeros_(p)
    return module
