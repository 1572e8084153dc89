"""Toy conditional UNet noise predictor.

Convolutional trunk with a sinusoidal timestep embedding; every attention level
carries a transformer block whose self-attention is multi-reference attention
over the garment features of that level, followed by cross-attention to the
fused instruction tokens.  An optional person image is concatenated to the
noisy latent on the channel axis.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidArgument
from .layers import Downsample, ResBlock, SpatialTransformer, Upsample, sinusoidal_embedding


@dataclass
class DenoiserConfig:
    image_size: int = 64
    in_channels: int = 3
    person_channels: int = 3
    base_channels: int = 32
    channel_mult: tuple = (1, 2, 4)
    attn_levels: tuple = (32, 16)
    context_dim: int = 128
    heads: int = 4
    max_refs: int = 6
    use_mra: bool = True
    time_dim: int = 128
    null_len: int = 32
    groups: int = 8

    def __post_init__(self):
        self.channel_mult = tuple(self.channel_mult)
        self.attn_levels = tuple(sorted(self.attn_levels, reverse=True))
        bad = set(self.attn_levels) - set(self.resolutions)
        if bad:
            raise InvalidArgument(f"attn levels {sorted(bad)} not among resolutions {self.resolutions}")
        for res, ch in self.level_channels.items():
            if ch % self.heads:
                raise InvalidArgument(f"{ch} channels at level {res} not divisible by {self.heads} heads")

    @property
    def resolutions(self):
        return tuple(self.image_size // 2 ** i for i in range(len(self.channel_mult)))

    @property
    def level_channels(self):
        return {r: self.base_channels * m for r, m in zip(self.resolutions, self.channel_mult)}

    @property
    def attn_dims(self):
        """``{resolution: channels}`` for every attention level."""
        return {r: self.level_channels[r] for r in self.attn_levels}

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class ConditioningBundle:
    """Everything the noise predictor conditions on.

    ``instruction`` is the padded fused-token batch ``[B, L', D]`` with validity
    ``instruction_mask``; ``garment_features`` a GarmentFeatureSet (or ``None``);
    ``null_instruction`` (bool or per-sample bool tensor) swaps the instruction for
    the learned null embedding, for classifier-free guidance.
    """

    instruction: torch.Tensor
    instruction_mask: Optional[torch.Tensor] = None
    garment_features: Optional[object] = None
    person: Optional[torch.Tensor] = None
    null_instruction: object = False
    embeddings: list = field(default_factory=list, repr=False)

    def unconditional(self):
        return dataclasses.replace(self, null_instruction=True)

    def without_refs(self):
        return dataclasses.replace(self, garment_features=None)


class TimestepEmbedding(nn.Module):
    def __init__(self, freq_dim, out_dim):
        super().__init__()
        self.freq_dim = freq_dim
        self.mlp = nn.Sequential(nn.Linear(freq_dim, out_dim), nn.SiLU(), nn.Linear(out_dim, out_dim))

    def forward(self, t):
        w = self.mlp[0].weight
        return self.mlp(sinusoidal_embedding(t, self.freq_dim).to(w.dtype).to(w.device))


class Denoiser(nn.Module):
    def __init__(self, config: Optional[DenoiserConfig] = None):
        super().__init__()
        cfg = self.config = config or DenoiserConfig()
        chans = [cfg.base_channels * m for m in cfg.channel_mult]
        temb = cfg.base_channels * 4
        self.time_embed = TimestepEmbedding(cfg.time_dim, temb)
        self.conv_in = nn.Conv2d(cfg.in_channels + cfg.person_channels, chans[0], 3, padding=1)
        self.null_context = nn.Parameter(torch.randn(cfg.null_len, cfg.context_dim) * 0.02)

        def attn(ch):
            return SpatialTransformer(ch, cfg.context_dim, cfg.heads, cfg.use_mra, cfg.groups)

        self.down_res, self.down_attn, self.downsample = nn.ModuleList(), nn.ModuleDict(), nn.ModuleList()
        prev = chans[0]
        for i, (res, ch) in enumerate(zip(cfg.resolutions, chans)):
            self.down_res.append(ResBlock(prev, ch, temb, cfg.groups))
            if res in cfg.attn_levels:
                self.down_attn[str(res)] = attn(ch)
            self.downsample.append(Downsample(ch) if i < len(chans) - 1 else nn.Identity())
            prev = ch
        self.mid = ResBlock(prev, prev, temb, cfg.groups)
        self.up_res, self.up_attn, self.upsample = nn.ModuleList(), nn.ModuleDict(), nn.ModuleList()
        for i in reversed(range(len(chans))):
            res, ch = cfg.resolutions[i], chans[i]
            self.up_res.append(ResBlock(prev + ch, ch, temb, cfg.groups))
            if res in cfg.attn_levels:
                self.up_attn[str(res)] = attn(ch)
            self.upsample.append(Upsample(ch) if i > 0 else nn.Identity())
            prev = ch
        self.norm_out = nn.GroupNorm(min(cfg.groups, chans[0]), chans[0])
        self.conv_out = nn.Conv2d(chans[0], cfg.in_channels, 3, padding=1)
        # per-channel, timestep-gated skip from the inputs; GroupNorm in the trunk removes
        # per-image means, so without it the predicted noise carries almost no DC component
        self._person_skip = cfg.person_channels == cfg.in_channels
        self.input_skip = nn.Linear(temb, cfg.in_channels * (2 if self._person_skip else 1))
        with torch.no_grad():
            self.input_skip.weight.zero_()
            self.input_skip.bias.zero_()
            self.input_skip.bias[: cfg.in_channels] = 1.0

    # ------------------------------------------------------------------ helpers
    def _context(self, cond: ConditioningBundle):
        ctx, mask = cond.instruction, cond.instruction_mask
        null = cond.null_instruction
        if isinstance(null, bool) and not null:
            return ctx, mask
        b = ctx.shape[0]
        if mask is None:
            mask = torch.ones(ctx.shape[:2], dtype=torch.bool, device=ctx.device)
        flags = torch.full((b,), bool(null), device=ctx.device) if isinstance(null, bool) else null.to(ctx.device)
        length = max(ctx.shape[1], self.config.null_len)
        ctx = F.pad(ctx, (0, 0, 0, length - ctx.shape[1]))
        mask = F.pad(mask, (0, length - mask.shape[1]), value=False)
        null_rows = F.pad(self.null_context, (0, 0, 0, length - self.config.null_len))
        null_mask = torch.arange(length, device=ctx.device) < self.config.null_len
        sel = flags[:, None, None]
        ctx = torch.where(sel, null_rows.to(ctx.dtype)[None], ctx)
        mask = torch.where(flags[:, None], null_mask[None], mask)
        return ctx, mask

    def _refs(self, cond, res):
        feats = cond.garment_features
        if feats is None or not self.config.use_mra:
            return [], None
        if res not in feats.per_level:
            raise InvalidArgument(f"garment features missing level {res}; have {sorted(feats.per_level)}")
        f = feats.per_level[res]
        return [f[:, i] for i in range(f.shape[1])], feats.ref_mask

    # ------------------------------------------------------------------ forward
    def forward(self, z_t: torch.Tensor, t, cond: ConditioningBundle) -> torch.Tensor:
        cfg = self.config
        if z_t.shape[1:] != (cfg.in_channels, cfg.image_size, cfg.image_size):
            raise InvalidArgument(f"z_t shape {tuple(z_t.shape)} does not match config")
        b = z_t.shape[0]
        t = torch.as_tensor(t, device=z_t.device)
        if t.ndim == 0:
            t = t.expand(b)
        temb = self.time_embed(t)
        x = z_t
        if cfg.person_channels:
            person = cond.person if cond.person is not None else z_t.new_zeros(
                b, cfg.person_channels, cfg.image_size, cfg.image_size)
            x = torch.cat([x, person.to(z_t.dtype)], dim=1)
        ctx, ctx_mask = self._context(cond)

        h = self.conv_in(x)
        skips = []
        for i, res in enumerate(cfg.resolutions):
            h = self.down_res[i](h, temb)
            if str(res) in self.down_attn:
                refs, rmask = self._refs(cond, res)
                h = self.down_attn[str(res)](h, ctx, ctx_mask, refs, rmask)
            skips.append(h)
            h = self.downsample[i](h)
        h = self.mid(h, temb)
        for j, i in enumerate(reversed(range(len(cfg.resolutions)))):
            res = cfg.resolutions[i]
            h = self.up_res[j](torch.cat([h, skips[i]], dim=1), temb)
            if str(res) in self.up_attn:
                refs, rmask = self._refs(cond, res)
                h = self.up_attn[str(res)](h, ctx, ctx_mask, refs, rmask)
            h = self.upsample[j](h)
        gate = self.input_skip(F.silu(temb))[:, :, None, None]
        skip = gate[:, :cfg.in_channels] * z_t
        if self._person_skip:
            skip = skip + gate[:, cfg.in_channels:] * x[:, cfg.in_channels:]
        return self.conv_out(F.silu(self.norm_out(h))) + skip

    predict_noise = forward

    def count_parameters(self) -> int:
        return count_parameters(self)

    def block_types(self):
        """Names of the self-attention kind used at each transformer block (for introspection)."""
        kinds = {}
        for name, mod in list(self.down_attn.items()):
            kinds[f"down.{name}"] = "multi_reference" if mod.block.use_mra else "self"
        for name, mod in list(self.up_attn.items()):
            kinds[f"up.{name}"] = "multi_reference" if mod.block.use_mra else "self"
        return kinds


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
