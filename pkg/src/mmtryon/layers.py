"""Small building blocks shared by the denoiser, garment encoder and text/image encoders."""
from __future__ import annotations

import math
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import AttentionParams, cross_attention, multi_reference_attention, self_attention


def sinusoidal_embedding(positions: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """``[N] -> [N, dim]`` sin/cos features, as used for timesteps and token positions."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = positions.to(torch.float64)[:, None] * freqs[None, :]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb.to(torch.get_default_dtype())


class FeedForward(nn.Module):
    def __init__(self, dim, mult=4):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(dim, dim * mult), nn.GELU(), nn.Linear(dim * mult, dim))

    def forward(self, x):
        return self.net(x)


class ResBlock(nn.Module):
    """GroupNorm -> SiLU -> conv, twice, with the time embedding added in between."""

    def __init__(self, in_ch, out_ch, temb_dim, groups=8):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(groups, in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb = nn.Linear(temb_dim, out_ch)
        self.norm2 = nn.GroupNorm(min(groups, out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class Downsample(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class TransformerBlock(nn.Module):
    """Pre-norm block: (multi-reference) self-attention, cross-attention, feed-forward.

    ``refs`` are raw reference feature maps for this level; they pass through the
    same ``norm1`` as the target before the shared K/V projection.  With
    ``use_mra=False`` the block runs plain self-attention and ignores refs.
    """

    def __init__(self, dim, context_dim, heads=4, use_mra=True):
        super().__init__()
        self.use_mra = use_mra
        self.norm1 = nn.LayerNorm(dim)
        self.attn1 = AttentionParams(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.attn2 = AttentionParams(dim, heads, context_dim)
        self.norm3 = nn.LayerNorm(dim)
        self.ff = FeedForward(dim)

    def forward(self, x, context, context_mask=None, refs: Sequence[torch.Tensor] = (),
                ref_mask: Optional[torch.Tensor] = None, return_cross=False):
        h = self.norm1(x)
        if self.use_mra:
            x = x + multi_reference_attention(h, [self.norm1(r) for r in refs], self.attn1, ref_mask)
        else:
            x = x + self_attention(h, self.attn1)
        x = x + cross_attention(self.norm2(x), context, self.attn2, context_mask)
        after_cross = x
        x = x + self.ff(self.norm3(x))
        return (x, after_cross) if return_cross else x


class SpatialTransformer(nn.Module):
    """Wraps a :class:`TransformerBlock` for ``[B, C, H, W]`` maps (flatten, attend, unflatten)."""

    def __init__(self, ch, context_dim, heads=4, use_mra=True, groups=8):
        super().__init__()
        self.norm = nn.GroupNorm(min(groups, ch), ch)
        self.proj_in = nn.Linear(ch, ch)
        self.block = TransformerBlock(ch, context_dim, heads, use_mra)
        self.proj_out = nn.Linear(ch, ch)

    def tokens(self, x):
        b, c, hh, ww = x.shape
        return self.proj_in(self.norm(x).flatten(2).transpose(1, 2))

    def forward(self, x, context, context_mask=None, refs=(), ref_mask=None, return_cross=False):
        b, c, hh, ww = x.shape
        tok = self.tokens(x)
        out = self.block(tok, context, context_mask, refs, ref_mask, return_cross)
        if return_cross:
            tok, cross = out
        else:
            tok = out
        y = x + self.proj_out(tok).transpose(1, 2).reshape(b, c, hh, ww)
        return (y, cross) if return_cross else y
