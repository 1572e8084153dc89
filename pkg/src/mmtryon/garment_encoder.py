"""Text-queryable garment encoder and the text-query loss.

The encoder mirrors the encoder half of :class:`~mmtryon.denoiser.Denoiser`
(same level layout and widths).  Each transformer block self-attends, then
cross-attends to the embedded query text; the residual stream right after the
cross-attention is emitted as the garment feature of that level.  The encoder
is timestep-free: a learned constant vector stands in for the time embedding.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .denoiser import ConditioningBundle, Denoiser, DenoiserConfig
from .diffusion import NoiseSchedule, denoising_loss, forward_diffuse
from .errors import ContractViolation, InvalidArgument
from .layers import Downsample, ResBlock, SpatialTransformer


@dataclass
class GarmentFeatureSet:
    """``per_level[res]`` is ``[B, n_refs, HW, d]``; ``ref_mask`` ``[B, n_refs]`` flags real refs."""

    per_level: dict
    ref_mask: Optional[torch.Tensor] = None

    @property
    def ref_count(self):
        return next(iter(self.per_level.values())).shape[1] if self.per_level else 0

    def shapes(self):
        return {r: tuple(f.shape) for r, f in self.per_level.items()}


@dataclass
class PriorMask:
    mask: torch.Tensor
    source: str = "procedural_truth"

    def __post_init__(self):
        if not torch.all((self.mask == 0) | (self.mask == 1)):
            raise InvalidArgument("prior mask values must be 0 or 1")


class GarmentEncoder(nn.Module):
    def __init__(self, config: DenoiserConfig):
        super().__init__()
        # the encoder never sees the person channels, and its blocks always cross-attend
        self.config = config
        cfg = config
        chans = [cfg.base_channels * m for m in cfg.channel_mult]
        temb = cfg.base_channels * 4
        self.time_const = nn.Parameter(torch.zeros(temb))
        self.conv_in = nn.Conv2d(cfg.in_channels, chans[0], 3, padding=1)
        self.down_res, self.down_attn, self.downsample = nn.ModuleList(), nn.ModuleDict(), nn.ModuleList()
        prev = chans[0]
        last_attn = min(cfg.attn_levels) if cfg.attn_levels else None
        for i, (res, ch) in enumerate(zip(cfg.resolutions, chans)):
            self.down_res.append(ResBlock(prev, ch, temb, cfg.groups))
            if res in cfg.attn_levels:
                self.down_attn[str(res)] = SpatialTransformer(ch, cfg.context_dim, cfg.heads, False, cfg.groups)
            self.downsample.append(Downsample(ch) if i < len(chans) - 1 else nn.Identity())
            prev = ch
            if res == last_attn:
                break
        self.n_levels = len(self.down_res)

    @torch.no_grad()
    def init_from_denoiser(self, denoiser: Denoiser):
        """Copy the matching encoder-half weights of a (pretrained) denoiser."""
        src = denoiser.state_dict()
        own = self.state_dict()
        for k, v in own.items():
            if k == "conv_in.weight":
                v.copy_(src[k][:, : self.config.in_channels])
            elif k == "time_const":
                t0 = torch.zeros(1, dtype=torch.long)
                v.copy_(denoiser.time_embed(t0)[0])
            elif k in src and src[k].shape == v.shape:
                v.copy_(src[k])
        return self

    def forward(self, image: torch.Tensor, query: torch.Tensor,
                query_mask: Optional[torch.Tensor] = None) -> dict:
        """``image [B, 3, H, W]``, ``query [B, L, D]`` -> ``{res: [B, HW, d]}``."""
        cfg = self.config
        if image.shape[1:] != (cfg.in_channels, cfg.image_size, cfg.image_size):
            raise InvalidArgument(f"garment image shape {tuple(image.shape[1:])} does not match "
                                  f"({cfg.in_channels}, {cfg.image_size}, {cfg.image_size})")
        temb = self.time_const.expand(image.shape[0], -1)
        h = self.conv_in(image)
        out = {}
        for i, res in enumerate(cfg.resolutions[: self.n_levels]):
            h = self.down_res[i](h, temb)
            if str(res) in self.down_attn:
                h, cross = self.down_attn[str(res)](h, query, query_mask, return_cross=True)
                out[res] = cross
            h = self.downsample[i](h)
        return out

    def encode(self, ref_images: torch.Tensor, queries: torch.Tensor,
               query_mask: Optional[torch.Tensor] = None,
               ref_mask: Optional[torch.Tensor] = None) -> GarmentFeatureSet:
        """Batch of reference sets: ``ref_images [B, n, 3, H, W]``, ``queries [B, n, L, D]``."""
        b, n = ref_images.shape[:2]
        qm = None if query_mask is None else query_mask.flatten(0, 1)
        if ref_mask is None or bool(ref_mask.all()):
            feats = self(ref_images.flatten(0, 1), queries.flatten(0, 1), qm)
            per_level = {r: f.reshape(b, n, *f.shape[1:]) for r, f in feats.items()}
            return GarmentFeatureSet(per_level, ref_mask)
        # padded slots are skipped and left as zeros (they are masked out downstream)
        keep = ref_mask.flatten()
        feats = self(ref_images.flatten(0, 1)[keep], queries.flatten(0, 1)[keep],
                     None if qm is None else qm[keep])
        per_level = {}
        for r, f in feats.items():
            full = f.new_zeros(b * n, *f.shape[1:])
            full[keep] = f
            per_level[r] = full.reshape(b, n, *f.shape[1:])
        return GarmentFeatureSet(per_level, ref_mask)


def encode_garment(encoder: GarmentEncoder, image: torch.Tensor, query_embedding: torch.Tensor) -> GarmentFeatureSet:
    """Single reference: ``image [3, H, W]``, ``query_embedding [L, D]`` -> features with ``[HW, d]`` per level."""
    feats = encoder(image[None], query_embedding[None])
    return GarmentFeatureSet({r: f[0] for r, f in feats.items()})


# --------------------------------------------------------------------------- text query loss

def downsample_mask(mask: torch.Tensor, size: int) -> torch.Tensor:
    """Area-pool ``[..., H, W]`` to ``size x size`` then threshold at 0.5 (inclusive)."""
    m = mask.to(torch.float64)
    lead = m.shape[:-2]
    h, w = m.shape[-2:]
    if h % size or w % size:
        raise InvalidArgument(f"mask {h}x{w} cannot be area-pooled to {size}x{size}")
    pooled = F.avg_pool2d(m.reshape(-1, 1, h, w), (h // size, w // size))
    return (pooled >= 0.5).to(mask.dtype if mask.is_floating_point() else torch.float32).reshape(*lead, size, size)


def text_query_loss(per_level: dict, mask: torch.Tensor, valid: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Mean over levels of ``mean(sigmoid(F * (1 - M)) ** 2)``.

    ``per_level[res]`` is ``[..., HW, d]``; ``mask`` is the full-resolution prior
    mask ``[..., H, W]`` with matching leading dims, broadcast across channels.
    In-mask elements contribute the constant ``sigmoid(0)**2 = 0.25`` with zero
    gradient.  ``valid`` (bool, leading dims) excludes padded references.
    """
    if not per_level:
        raise InvalidArgument("no feature levels given")
    losses = []
    for res, f in per_level.items():
        hw = f.shape[-2]
        if res * res != hw:
            raise InvalidArgument(f"level {res} has {hw} tokens, expected {res * res}")
        if mask.shape[:-2] != f.shape[:-2]:
            raise InvalidArgument(f"mask leading shape {tuple(mask.shape[:-2])} != features {tuple(f.shape[:-2])}")
        m = downsample_mask(mask, res).reshape(*mask.shape[:-2], hw, 1).to(f.dtype)
        vals = torch.sigmoid(f * (1 - m)) ** 2
        if valid is None:
            losses.append(vals.mean())
        else:
            per_ref = vals.flatten(-2).mean(-1)
            w = valid.to(f.dtype)
            losses.append((per_ref * w).sum() / w.sum().clamp_min(1))
    return torch.stack(losses).mean()


def masked_response(per_level: dict, mask: torch.Tensor, valid: Optional[torch.Tensor] = None):
    """``(outside, inside)`` means of ``sigmoid(F)**2`` split by the downsampled prior mask."""
    out_sum = in_sum = out_n = in_n = 0.0
    for res, f in per_level.items():
        m = downsample_mask(mask, res).reshape(*mask.shape[:-2], res * res, 1).to(f.dtype)
        m = m.expand_as(f)
        s = torch.sigmoid(f) ** 2
        if valid is not None:
            keep = valid.reshape(*valid.shape, 1, 1).expand_as(f).to(f.dtype)
        else:
            keep = torch.ones_like(f)
        out_sum += float((s * (1 - m) * keep).sum())
        out_n += float(((1 - m) * keep).sum())
        in_sum += float((s * m * keep).sum())
        in_n += float((m * keep).sum())
    return out_sum / max(out_n, 1.0), in_sum / max(in_n, 1.0)


# --------------------------------------------------------------------------- pretraining step

def parameter_hash(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def is_frozen(module: nn.Module) -> bool:
    return all(not p.requires_grad for p in module.parameters())


def pretrain_step(batch: dict, denoiser: Denoiser, encoder: GarmentEncoder, sched: NoiseSchedule,
                  optimizer: torch.optim.Optimizer, generator: torch.Generator,
                  use_query_loss: bool = True, clip_norm: Optional[float] = 1.0):
    """One encoder-pretraining update with the denoiser frozen.

    ``batch`` keys: ``z0 [B,3,H,W]``, ``context``/``context_mask`` (instruction),
    ``person`` (optional), ``refs [B,n,3,H,W]``, ``queries [B,n,L,D]``,
    ``query_mask [B,n,L]``, ``ref_mask [B,n]``, ``prior_masks [B,n,H,W]``.
    Returns ``(l_dm, l_query, l_enc)`` as floats; ``l_enc`` is ``l_dm + l_query``.
    """
    if not is_frozen(denoiser):
        raise ContractViolation("denoiser must be frozen (requires_grad=False) during encoder pretraining")
    encoder.train()
    z0 = batch["z0"]
    t = torch.randint(0, sched.num_steps, (z0.shape[0],), generator=generator)
    eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
    z_t = forward_diffuse(z0, t, eps, sched)
    feats = encoder.encode(batch["refs"], batch["queries"], batch.get("query_mask"), batch.get("ref_mask"))
    cond = ConditioningBundle(batch["context"], batch.get("context_mask"), feats, batch.get("person"))
    l_dm = denoising_loss(denoiser(z_t, t, cond), eps)
    if use_query_loss:
        l_query = text_query_loss(feats.per_level, batch["prior_masks"], batch.get("ref_mask"))
    else:
        l_query = torch.zeros((), dtype=l_dm.dtype)
    # summed in float64 so the logged total is exactly the sum of the logged terms
    l_enc = l_dm.double() + l_query.double()
    optimizer.zero_grad(set_to_none=True)
    l_enc.backward()
    if clip_norm:
        torch.nn.utils.clip_grad_norm_(encoder.parameters(), clip_norm)
    optimizer.step()
    return l_dm.item(), l_query.item(), l_enc.item()
