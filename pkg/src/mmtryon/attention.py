"""Multi-reference texture attention and instruction cross-attention.

Both ops take token tensors shaped ``[..., N, d]`` (a flattened feature map)
together with an :class:`AttentionParams` module holding the projections.  The
residual connection is the caller's job.
"""
from __future__ import annotations

import math
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidArgument


class AttentionParams(nn.Module):
    """Projections ``W_Q, W_K, W_V, W_O`` for one attention layer.

    ``context_dim`` sets the input width of ``W_K``/``W_V`` (cross-attention); it
    defaults to ``dim``.
    """

    def __init__(self, dim: int, heads: int = 4, context_dim: Optional[int] = None):
        super().__init__()
        if dim % heads:
            raise InvalidArgument(f"dim {dim} not divisible by heads {heads}")
        context_dim = dim if context_dim is None else context_dim
        self.dim, self.heads, self.context_dim = dim, heads, context_dim
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(context_dim, dim, bias=False)
        self.to_v = nn.Linear(context_dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim, bias=False)

    @classmethod
    def identity(cls, dim, heads=1, dtype=torch.float64):
        p = cls(dim, heads).to(dtype)
        with torch.no_grad():
            for lin in (p.to_q, p.to_k, p.to_v, p.to_out):
                lin.weight.copy_(torch.eye(dim, dtype=dtype))
        return p


def _split(x: torch.Tensor, heads: int) -> torch.Tensor:
    *lead, n, d = x.shape
    return x.reshape(*lead, n, heads, d // heads).transpose(-2, -3)


def _merge(x: torch.Tensor) -> torch.Tensor:
    *lead, h, n, dh = x.shape
    return x.transpose(-2, -3).reshape(*lead, n, h * dh)


def _attend(q, k, v, heads, key_mask=None):
    """Fused scaled dot-product attention; ``key_mask`` is bool ``[..., M]``."""
    q, k, v = _split(q, heads), _split(k, heads), _split(v, heads)
    mask = None if key_mask is None else key_mask[..., None, None, :]
    return _merge(F.scaled_dot_product_attention(q, k, v, attn_mask=mask))


def _attend_explicit(q, k, v, heads, key_mask=None, return_weights=False):
    """Softmax attention written out step by step; also exposes the weights."""
    q, k, v = _split(q, heads), _split(k, heads), _split(v, heads)
    scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    if key_mask is not None:
        scores = scores.masked_fill(~key_mask[..., None, None, :], float("-inf"))
    w = scores.softmax(dim=-1)
    out = _merge(w @ v)
    return (out, w) if return_weights else out


def _check_tokens(name, x, d):
    if x.ndim < 2:
        raise InvalidArgument(f"{name} must be [..., N, d], got shape {tuple(x.shape)}")
    if x.shape[-1] != d:
        raise InvalidArgument(f"{name} channel dim {x.shape[-1]} != {d}")


def multi_reference_attention(target: torch.Tensor, refs: Sequence[torch.Tensor],
                              params: AttentionParams,
                              ref_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Queries from ``target``; keys/values from ``concat([target, *refs])`` on the token axis.

    ``refs`` are feature maps of the same level and width as the target; they are
    projected with the same ``W_K``/``W_V`` as the target.  ``ref_mask`` (bool,
    ``[..., len(refs)]``) drops whole reference blocks for batch elements that
    carry fewer references.
    """
    d = params.dim
    _check_tokens("target", target, d)
    if target.shape[-2] == 0:
        raise InvalidArgument("target feature map is empty")
    for i, r in enumerate(refs):
        _check_tokens(f"refs[{i}]", r, d)
        if r.shape[:-2] != target.shape[:-2]:
            raise InvalidArgument(f"refs[{i}] leading shape {tuple(r.shape[:-2])} "
                                  f"!= target {tuple(target.shape[:-2])}")
    kv_in = torch.cat([target, *refs], dim=-2) if refs else target
    key_mask = None
    if ref_mask is not None and refs:
        n_t = target.shape[-2]
        blocks = [torch.ones(*target.shape[:-2], n_t, dtype=torch.bool, device=target.device)]
        for i, r in enumerate(refs):
            blocks.append(ref_mask[..., i:i + 1].expand(*r.shape[:-2], r.shape[-2]))
        key_mask = torch.cat(blocks, dim=-1)
    q = params.to_q(target)
    out = _attend(q, params.to_k(kv_in), params.to_v(kv_in), params.heads, key_mask)
    return params.to_out(out)


def self_attention(x: torch.Tensor, params: AttentionParams) -> torch.Tensor:
    """Plain multi-head self-attention with the same projections."""
    _check_tokens("x", x, params.dim)
    out = _attend(params.to_q(x), params.to_k(x), params.to_v(x), params.heads)
    return params.to_out(out)


def cross_attention(target: torch.Tensor, context: torch.Tensor, params: AttentionParams,
                    context_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Queries from image tokens, keys/values from the instruction embedding.

    ``context_mask`` (bool ``[..., L]``) marks valid context rows when a batch is
    padded to a common sequence length.
    """
    _check_tokens("target", target, params.dim)
    _check_tokens("context", context, params.context_dim)
    q = params.to_q(target)
    out = _attend(q, params.to_k(context), params.to_v(context), params.heads, context_mask)
    return params.to_out(out)
