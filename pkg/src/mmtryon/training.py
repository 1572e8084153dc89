"""Three-stage training: base denoiser, garment-encoder pretraining, joint finetuning.

* ``base`` trains the denoiser and the text encoder on captions (no references);
  it stands in for starting from a pretrained text-to-image model.
* ``encoder_pretrain`` freezes everything but the garment encoder and trains it
  through the frozen denoiser with ``L_enc = L_dm + L_query``.
* ``joint`` unfreezes everything and trains on fused multi-modal instructions
  with multi-reference attention, ``L_dm (+ L_query)``.

Every stage writes ``metrics.jsonl``, ``config.json`` and ``checkpoint.ckpt`` to
its output directory and can resume bit-exactly from a checkpoint.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import CheckpointArchive, load_checkpoint, save_checkpoint
from .denoiser import ConditioningBundle, Denoiser, DenoiserConfig
from .diffusion import (ConvAutoencoder, denoising_loss, fit_autoencoder, forward_diffuse, from_latent,
                        make_schedule, sample, to_latent)
from .errors import ConfigurationError, InvalidArgument, NumericalFailure
from .garment_encoder import GarmentEncoder, GarmentFeatureSet, pretrain_step, text_query_loss
from .instruction import EMBED_DIM, InstructionEncoder, InstructionPrompt, derive_query_span

STAGES = ("base", "encoder_pretrain", "joint")
STAGE_ALIASES = {"encoder": "encoder_pretrain", "pretrain": "encoder_pretrain"}
ABLATION_FLAGS = {
    "no_pr": "no_pretrain", "no_pretrain": "no_pretrain",
    "no_tql": "no_text_query_loss", "no_text_query_loss": "no_text_query_loss",
    "no_mra": "no_multi_ref_attention", "no_multi_ref_attention": "no_multi_ref_attention",
}


# --------------------------------------------------------------------------- configs

@dataclass
class ModelConfig:
    image_size: int = 64
    base_channels: int = 32
    channel_mult: tuple = (1, 2, 4)
    attn_levels: tuple = (32, 16)
    heads: int = 4
    context_dim: int = EMBED_DIM
    patch: int = 8
    n_queries: int = 4
    person: bool = True
    latent: str = "identity"        # or "conv4x"
    latent_channels: int = 4
    schedule: str = "linear"
    num_steps: int = 1000

    def __post_init__(self):
        self.channel_mult = tuple(self.channel_mult)
        self.attn_levels = tuple(self.attn_levels)
        if self.latent not in ("identity", "conv4x"):
            raise ConfigurationError(f"unknown latent codec {self.latent!r}")

    @property
    def latent_size(self):
        return self.image_size // 4 if self.latent == "conv4x" else self.image_size

    def denoiser_config(self, use_mra: bool = True) -> DenoiserConfig:
        ch = self.latent_channels if self.latent == "conv4x" else 3
        return DenoiserConfig(image_size=self.latent_size, in_channels=ch,
                              person_channels=ch if self.person else 0, base_channels=self.base_channels,
                              channel_mult=self.channel_mult, attn_levels=self.attn_levels,
                              context_dim=self.context_dim, heads=self.heads, use_mra=use_mra)


@dataclass
class TrainConfig:
    stage: str = "base"
    lr: float = 1e-4
    weight_decay: float = 0.01
    batch_size: int = 16
    steps: int = 2000
    seed: int = 0
    clip_norm: float = 1.0
    multi_fraction: float = 0.7     # joint / encoder stages: share of multi-reference samples
    cfg_drop: float = 0.1           # instruction dropout for classifier-free guidance
    use_alternates: bool = True     # draw each reference from its retained candidates
    no_pretrain: bool = False
    no_text_query_loss: bool = False
    no_multi_ref_attention: bool = False
    dataset: Optional[str] = None
    init_checkpoint: Optional[str] = None
    resume: Optional[str] = None
    out_dir: Optional[str] = None
    checkpoint_every: int = 250
    autoencoder_steps: int = 500
    deterministic: bool = False
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        self.stage = STAGE_ALIASES.get(self.stage, self.stage)
        if self.stage not in STAGES:
            raise ConfigurationError(f"unknown stage {self.stage!r}; expected one of {STAGES}")
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        if not 0.0 <= self.multi_fraction <= 1.0:
            raise ConfigurationError("multi_fraction must be in [0, 1]")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        model = d.pop("model", {})
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown training config keys {sorted(unknown)}")
        return cls(model=ModelConfig(**model) if isinstance(model, dict) else model, **d)

    def ablations(self):
        return [k for k in ("no_pretrain", "no_text_query_loss", "no_multi_ref_attention") if getattr(self, k)]


def config_hash(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


# --------------------------------------------------------------------------- model bundle

class TryonModel(nn.Module):
    """Denoiser + garment encoder + instruction encoder (+ optional latent codec)."""

    def __init__(self, config: Optional[ModelConfig] = None, use_mra: bool = True):
        super().__init__()
        self.config = config or ModelConfig()
        cfg = self.config
        dcfg = cfg.denoiser_config(use_mra)
        self.denoiser = Denoiser(dcfg)
        self.garment_encoder = GarmentEncoder(dcfg)
        self.instruction = InstructionEncoder(cfg.image_size, cfg.patch, cfg.context_dim, n_queries=cfg.n_queries)
        self.codec = ConvAutoencoder(3, cfg.latent_channels) if cfg.latent == "conv4x" else None
        self.schedule = make_schedule(cfg.num_steps, cfg.schedule)

    @property
    def use_mra(self):
        return self.denoiser.config.use_mra

    # ---------------------------------------------------------------- latent mapping
    def encode_latent(self, img01: torch.Tensor) -> torch.Tensor:
        x = to_latent(img01)
        if self.codec is None:
            return x
        lead = x.shape[:-3]
        return self.codec.encode(x.reshape(-1, *x.shape[-3:])).reshape(*lead, -1, *self._lat_hw())

    def decode_latent(self, z: torch.Tensor) -> torch.Tensor:
        if self.codec is not None:
            z = self.codec.decode(z)
        return from_latent(z)

    def _lat_hw(self):
        s = self.config.latent_size
        return s, s

    # ---------------------------------------------------------------- conditioning
    def queries(self, prompts: Sequence[InstructionPrompt], n_max: int):
        """Embedded query text per reference slot: ``([B, n, L, D], [B, n, L])``."""
        texts = []
        for p in prompts:
            q = [derive_query_span(p, j) for j in range(len(p.spans))]
            texts += q + [""] * (n_max - len(q))
        emb, mask = self.instruction.encode_text(texts, return_mask=True)
        b = len(prompts)
        return emb.reshape(b, n_max, *emb.shape[1:]), mask.reshape(b, n_max, -1)

    def garment_features(self, prompts, refs01, ref_mask) -> Optional[GarmentFeatureSet]:
        if refs01 is None or refs01.shape[1] == 0:
            return None
        q, qm = self.queries(prompts, refs01.shape[1])
        return self.garment_encoder.encode(self.encode_latent(refs01), q, qm, ref_mask)

    def condition(self, prompts: Sequence[InstructionPrompt], refs01: Optional[torch.Tensor],
                  ref_mask: Optional[torch.Tensor], person01: Optional[torch.Tensor],
                  use_refs: bool = True, null=False) -> ConditioningBundle:
        """Joint-stage conditioning: fused instruction, garment features for MRA, person image."""
        counts = None if ref_mask is None else ref_mask.sum(1).tolist()
        ctx, mask, embs = self.instruction(prompts, None if refs01 is None else to_latent(refs01), counts)
        feats = self.garment_features(prompts, refs01, ref_mask) if (use_refs and self.use_mra) else None
        person = None if person01 is None or not self.config.person else self.encode_latent(person01)
        return ConditioningBundle(ctx, mask, feats, person, null, embs)

    def text_condition(self, texts: Sequence[str], person01, null=False, feats=None) -> ConditioningBundle:
        ctx, mask = self.instruction.encode_text(texts, return_mask=True)
        person = None if person01 is None or not self.config.person else self.encode_latent(person01)
        return ConditioningBundle(ctx, mask, feats, person, null)

    # ---------------------------------------------------------------- sampling
    @torch.no_grad()
    def generate(self, prompts, refs01, ref_mask, person01, seed: int = 0, steps: int = 50,
                 eta: float = 0.0, guidance_scale: float = 1.0, use_refs: bool = True) -> torch.Tensor:
        """Try-on images in ``[0, 1]``, ``[B, 3, H, W]``."""
        self.eval()
        cond = self.condition(prompts, refs01, ref_mask, person01, use_refs)
        c = self.denoiser.config
        z = sample(self.denoiser, cond, self.schedule, steps=steps, eta=eta, seed=seed,
                   shape=(len(prompts), c.in_channels, c.image_size, c.image_size),
                   guidance_scale=guidance_scale, clip_x0=self.codec is None)
        return self.decode_latent(z)


# --------------------------------------------------------------------------- data

def _img_tensor(arr: np.ndarray, size: int) -> torch.Tensor:
    t = torch.from_numpy(np.ascontiguousarray(arr)).permute(2, 0, 1).float() / 255.0
    if t.shape[-1] != size:
        t = F.interpolate(t[None], size=(size, size), mode="area")[0]
    return t


def _mask_tensor(m: np.ndarray, size: int) -> torch.Tensor:
    t = torch.from_numpy(np.ascontiguousarray(m)).float()
    if t.shape[-1] != size:
        t = (F.interpolate(t[None, None], size=(size, size), mode="area")[0, 0] >= 0.5).float()
    return t


class TryonTensors:
    """In-memory tensors of a dataset, resized to the model resolution."""

    def __init__(self, samples, image_size: int):
        self.size = image_size
        self.samples = samples
        self.ids = [s.id for s in samples]
        self.kinds = [s.kind for s in samples]
        self.captions = [s.caption for s in samples]
        self.prompts = [s.instruction for s in samples]
        self.target = torch.stack([_img_tensor(s.target_image, image_size) for s in samples]) if samples else None
        self.person = torch.stack([_img_tensor(s.person_image, image_size) for s in samples]) if samples else None
        self.masks = [[_mask_tensor(m, image_size) for m in s.masks] for s in samples]
        # refs[i][j] = list of (image, mask) candidates for garment j, primary first
        self.refs = []
        for s in samples:
            alts = s.meta.get("alternates") or [[] for _ in s.refs]
            self.refs.append([[(_img_tensor(r, image_size), _mask_tensor(m, image_size))]
                              + [(_img_tensor(a, image_size), _mask_tensor(am, image_size)) for a, am in alt]
                              for r, m, alt in zip(s.refs, s.ref_masks, alts)])
        self.multi_idx = [i for i, k in enumerate(self.kinds) if k == "multi"]
        self.single_idx = [i for i, k in enumerate(self.kinds) if k == "single"]

    def __len__(self):
        return len(self.samples)

    @classmethod
    def from_dir(cls, path, image_size: int):
        from .datagen.pipeline import load_dataset
        return cls(load_dataset(path), image_size)

    def batch(self, indices: Sequence[int], gen: Optional[torch.Generator] = None, alternates: bool = False):
        indices = list(indices)
        n_max = max(len(self.refs[i]) for i in indices)
        b, s = len(indices), self.size
        refs = torch.zeros(b, n_max, 3, s, s)
        prior = torch.zeros(b, n_max, s, s)
        ref_mask = torch.zeros(b, n_max, dtype=torch.bool)
        for bi, i in enumerate(indices):
            for j, cands in enumerate(self.refs[i]):
                k = 0
                if alternates and len(cands) > 1:
                    k = int(torch.randint(0, len(cands), (1,), generator=gen))
                refs[bi, j], prior[bi, j] = cands[k]
                ref_mask[bi, j] = True
        return {
            "indices": indices, "target": self.target[indices], "person": self.person[indices],
            "refs": refs, "ref_mask": ref_mask, "prior_masks": prior,
            "prompts": [self.prompts[i] for i in indices], "captions": [self.captions[i] for i in indices],
        }


def draw_indices(data: TryonTensors, stage: str, batch_size: int, multi_fraction: float,
                 gen: torch.Generator) -> list[int]:
    if stage == "base" or not data.multi_idx or not data.single_idx:
        return torch.randint(0, len(data), (batch_size,), generator=gen).tolist()
    pick_multi = torch.rand(batch_size, generator=gen) < multi_fraction
    out = []
    for m in pick_multi.tolist():
        pool = data.multi_idx if m else data.single_idx
        out.append(pool[int(torch.randint(0, len(pool), (1,), generator=gen))])
    return out


# --------------------------------------------------------------------------- steps

def _null_flags(b, p, gen):
    if p <= 0:
        return False
    return torch.rand(b, generator=gen) < p


def _noised(model, z0, gen):
    sched = model.schedule
    t = torch.randint(0, sched.num_steps, (z0.shape[0],), generator=gen)
    eps = torch.randn(z0.shape, generator=gen, dtype=z0.dtype)
    return forward_diffuse(z0, t, eps, sched), t, eps


def base_step(model: TryonModel, batch, cfg: TrainConfig, opt, gen):
    z0 = model.encode_latent(batch["target"])
    null = _null_flags(z0.shape[0], cfg.cfg_drop, gen)
    z_t, t, eps = _noised(model, z0, gen)
    cond = model.text_condition(batch["captions"], batch["person"], null)
    l_dm = denoising_loss(model.denoiser(z_t, t, cond), eps)
    return _apply(l_dm, torch.zeros((), dtype=l_dm.dtype), model, opt, cfg)


def encoder_step(model: TryonModel, batch, cfg: TrainConfig, opt, gen):
    with torch.no_grad():
        z0 = model.encode_latent(batch["target"])
        ctx, ctx_mask = model.instruction.encode_text([p.rendered for p in batch["prompts"]], return_mask=True)
        q, qm = model.queries(batch["prompts"], batch["refs"].shape[1])
        person = model.encode_latent(batch["person"]) if model.config.person else None
        refs = model.encode_latent(batch["refs"])
    step_batch = {"z0": z0, "context": ctx, "context_mask": ctx_mask, "person": person, "refs": refs,
                  "queries": q, "query_mask": qm, "ref_mask": batch["ref_mask"],
                  "prior_masks": _prior_at_latent(model, batch["prior_masks"])}
    return pretrain_step(step_batch, model.denoiser, model.garment_encoder, model.schedule, opt, gen,
                         use_query_loss=not cfg.no_text_query_loss, clip_norm=cfg.clip_norm)


def _prior_at_latent(model, masks):
    s = model.config.latent_size
    if masks.shape[-1] == s:
        return masks
    lead = masks.shape[:-2]
    pooled = F.interpolate(masks.reshape(-1, 1, *masks.shape[-2:]), size=(s, s), mode="area") >= 0.5
    return pooled.float().reshape(*lead, s, s)


def joint_step(model: TryonModel, batch, cfg: TrainConfig, opt, gen):
    z0 = model.encode_latent(batch["target"])
    null = _null_flags(z0.shape[0], cfg.cfg_drop, gen)
    z_t, t, eps = _noised(model, z0, gen)
    cond = model.condition(batch["prompts"], batch["refs"], batch["ref_mask"], batch["person"],
                           use_refs=not cfg.no_multi_ref_attention, null=null)
    l_dm = denoising_loss(model.denoiser(z_t, t, cond), eps)
    feats = cond.garment_features
    if feats is not None and not cfg.no_text_query_loss:
        l_query = text_query_loss(feats.per_level, _prior_at_latent(model, batch["prior_masks"]),
                                  batch["ref_mask"])
    else:
        l_query = torch.zeros((), dtype=l_dm.dtype)
    return _apply(l_dm, l_query, model, opt, cfg)


def _apply(l_dm, l_query, model, opt, cfg):
    total = l_dm.double() + l_query.double()
    result = (l_dm.item(), l_query.item(), total.item())
    if not torch.isfinite(total):
        return result
    opt.zero_grad(set_to_none=True)
    total.backward()
    if cfg.clip_norm:
        params = [p for g in opt.param_groups for p in g["params"]]
        torch.nn.utils.clip_grad_norm_(params, cfg.clip_norm)
    opt.step()
    return result


STEP_FNS = {"base": base_step, "encoder_pretrain": encoder_step, "joint": joint_step}


# --------------------------------------------------------------------------- archive helpers

def _optimizer_tensors(opt: torch.optim.Optimizer):
    sd = opt.state_dict()
    tensors, meta_state = {}, {}
    for pid, st in sd["state"].items():
        for k, v in st.items():
            if torch.is_tensor(v):
                tensors[f"optim/{pid}/{k}"] = v
            else:
                meta_state.setdefault(str(pid), {})[k] = v
    return tensors, {"param_groups": sd["param_groups"], "scalars": meta_state}


def _load_optimizer(opt: torch.optim.Optimizer, archive: CheckpointArchive):
    om = archive.meta["optimizer"]
    state = {}
    for name, v in archive.subset("optim/").items():
        pid, k = name.split("/", 1)
        state.setdefault(int(pid), {})[k] = v
    for pid, st in om.get("scalars", {}).items():
        state.setdefault(int(pid), {}).update(st)
    opt.load_state_dict({"state": state, "param_groups": om["param_groups"]})


def make_archive(model: TryonModel, cfg: TrainConfig, stage: str, step: int,
                 opt: Optional[torch.optim.Optimizer] = None, gen: Optional[torch.Generator] = None,
                 extra_meta: Optional[dict] = None) -> CheckpointArchive:
    tensors = {f"model/{k}": v for k, v in model.state_dict().items()}
    meta = {"format": 1, "stage": stage, "step": step, "config": cfg.to_dict(),
            "config_hash": config_hash(cfg.to_dict()), "model_config": dataclasses.asdict(model.config),
            "use_mra": model.use_mra}
    if opt is not None:
        t, om = _optimizer_tensors(opt)
        tensors.update(t)
        meta["optimizer"] = om
    if gen is not None:
        tensors["rng/torch"] = gen.get_state()
    meta.update(extra_meta or {})
    return CheckpointArchive(tensors, meta)


def model_from_archive(archive: CheckpointArchive, use_mra: Optional[bool] = None) -> TryonModel:
    mc = ModelConfig(**archive.meta["model_config"])
    model = TryonModel(mc, archive.meta.get("use_mra", True) if use_mra is None else use_mra)
    load_model_state(model, archive)
    return model


def load_model_state(model: TryonModel, archive: CheckpointArchive):
    state = archive.subset("model/")
    own = model.state_dict()
    missing = sorted(set(own) - set(state))
    extra = sorted(set(state) - set(own))
    if missing or extra:
        raise ConfigurationError(f"checkpoint does not match the model: missing {missing[:5]}, unexpected {extra[:5]}")
    for k, v in state.items():
        if tuple(v.shape) != tuple(own[k].shape):
            raise ConfigurationError(f"{k}: checkpoint shape {tuple(v.shape)} vs model {tuple(own[k].shape)}")
    model.load_state_dict(state)


def load_model(path, use_mra: Optional[bool] = None) -> TryonModel:
    return model_from_archive(load_checkpoint(path), use_mra)


# --------------------------------------------------------------------------- driver

@dataclass
class TrainResult:
    model: TryonModel
    log: list
    checkpoint: Optional[Path]
    archive: CheckpointArchive


def set_deterministic(flag: bool = True):
    torch.use_deterministic_algorithms(flag)
    if flag:
        os.environ.setdefault("CUBLAS_WORKSPACE_CONFIG", ":4096:8")


def _trainable(model: TryonModel, stage: str, cfg: TrainConfig):
    model.requires_grad_(False)
    if stage == "base":
        mods = [model.denoiser, model.instruction.text]
    elif stage == "encoder_pretrain":
        mods = [model.garment_encoder]
    else:
        mods = [model.denoiser, model.instruction]
        if not cfg.no_multi_ref_attention:
            mods.append(model.garment_encoder)
    for m in mods:
        m.requires_grad_(True)
    if model.codec is not None:
        model.codec.requires_grad_(False)
    return [p for p in model.parameters() if p.requires_grad]


def prepare_model(cfg: TrainConfig):
    """Build the model for a stage from the init checkpoint (or scratch) per the stage rules."""
    use_mra = not cfg.no_multi_ref_attention
    if cfg.stage != "base" and cfg.init_checkpoint is None and not cfg.no_pretrain and cfg.resume is None:
        prev = "base" if cfg.stage == "encoder_pretrain" else "encoder_pretrain (or base)"
        raise ConfigurationError(f"stage {cfg.stage} needs a {prev} checkpoint (init_checkpoint), "
                                 "or no_pretrain to train from random init")
    if cfg.no_pretrain and cfg.init_checkpoint is not None:
        raise ConfigurationError("no_pretrain trains from random init; do not pass init_checkpoint")
    torch.manual_seed(cfg.seed)
    if cfg.init_checkpoint is None:
        return TryonModel(cfg.model, use_mra), None
    archive = load_checkpoint(cfg.init_checkpoint)
    if archive.meta.get("model_config") != json.loads(json.dumps(dataclasses.asdict(cfg.model))):
        raise ConfigurationError("init checkpoint was trained with a different model config")
    model = TryonModel(cfg.model, use_mra)
    load_model_state(model, archive)
    if archive.meta.get("stage") == "base" and cfg.stage in ("encoder_pretrain", "joint"):
        model.garment_encoder.init_from_denoiser(model.denoiser)
    return model, archive


def train_stage(cfg: TrainConfig, data: Optional[TryonTensors] = None,
                callback: Optional[Callable] = None) -> TrainResult:
    """Run one stage; see the module docstring for what each stage trains."""
    if cfg.deterministic or os.environ.get("MMTRYON_DETERMINISTIC") == "1":
        set_deterministic(True)
    if data is None:
        if cfg.dataset is None:
            raise ConfigurationError("no dataset given")
        if not Path(cfg.dataset).exists():
            raise ConfigurationError(f"dataset {cfg.dataset} does not exist")
        data = TryonTensors.from_dir(cfg.dataset, cfg.model.image_size)
    if len(data) == 0:
        raise ConfigurationError("dataset is empty")

    gen = torch.Generator().manual_seed(cfg.seed)
    start = 0
    resume_archive = None
    if cfg.resume is not None:
        resume_archive = load_checkpoint(cfg.resume)
        if resume_archive.meta.get("stage") != cfg.stage:
            raise ConfigurationError(f"resume checkpoint is from stage {resume_archive.meta.get('stage')}, "
                                     f"not {cfg.stage}")
        model = model_from_archive(resume_archive, not cfg.no_multi_ref_attention)
        start = int(resume_archive.meta["step"])
        gen.set_state(resume_archive.tensors["rng/torch"])
    else:
        model, _ = prepare_model(cfg)

    out = Path(cfg.out_dir) if cfg.out_dir else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), sort_keys=True, indent=2) + "\n")

    if cfg.stage == "base" and model.codec is not None and start == 0:
        fit_autoencoder(model.codec, to_latent(data.target), cfg.autoencoder_steps, seed=cfg.seed)

    params = _trainable(model, cfg.stage, cfg)
    opt = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    if resume_archive is not None and "optimizer" in resume_archive.meta:
        _load_optimizer(opt, resume_archive)
    step_fn = STEP_FNS[cfg.stage]
    model.train()

    log = []
    log_f = open(out / "metrics.jsonl", "a" if start else "w", encoding="utf-8") if out else None
    last_good = out / "last_good.ckpt" if out else None
    try:
        if last_good is not None:
            save_checkpoint(last_good, make_archive(model, cfg, cfg.stage, start, opt, gen))
        for step in range(start, cfg.steps):
            t0 = time.perf_counter()
            idx = draw_indices(data, cfg.stage, cfg.batch_size, cfg.multi_fraction, gen)
            batch = data.batch(idx, gen, cfg.use_alternates and cfg.stage != "base")
            l_dm, l_query, l_enc = step_fn(model, batch, cfg, opt, gen)
            if not all(math.isfinite(v) for v in (l_dm, l_query, l_enc)):
                kept = f"; last good checkpoint kept at {last_good}" if last_good else ""
                raise NumericalFailure(f"non-finite loss at step {step}{kept}", step=step)
            rec = {"step": step, "l_dm": l_dm, "l_query": l_query, "l_enc": l_enc, "lr": cfg.lr,
                   "seconds": round(time.perf_counter() - t0, 4)}
            log.append(rec)
            if log_f:
                log_f.write(json.dumps(rec) + "\n")
                log_f.flush()
            if callback is not None:
                callback(step, rec, model)
            if last_good is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(last_good, make_archive(model, cfg, cfg.stage, step + 1, opt, gen))
    finally:
        if log_f:
            log_f.close()
    archive = make_archive(model, cfg, cfg.stage, cfg.steps, opt, gen)
    path = None
    if out is not None:
        path = save_checkpoint(out / "checkpoint.ckpt", archive)
        if last_good is not None and last_good.exists():
            last_good.unlink()
    model.eval()
    return TrainResult(model, log, path, archive)


def read_log(path) -> list[dict]:
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def smoothed(values: Sequence[float], window: int = 25) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        return v
    return np.convolve(v, np.ones(window) / window, mode="valid")
