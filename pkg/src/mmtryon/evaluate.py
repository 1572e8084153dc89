"""Image metrics, a kernel-MMD distribution proxy, gradient checks and ablation reports.

Images are float arrays in ``[0, 1]`` laid out ``[C, H, W]`` (numpy or torch).
``kid_proxy`` replaces Inception features with a fixed, seeded random conv net
and is labelled a proxy everywhere it is reported.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image

from .errors import InvalidArgument

SSIM_WINDOW = 7
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
KID_FEATURE_SEED = 1234
VARIANTS = ("full", "w/o PR", "w/o TQL", "w/o MRA")


def _as_chw(x) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(x) if not torch.is_tensor(x) else x).to(torch.float64)
    if t.ndim == 2:
        t = t[None]
    if t.ndim != 3:
        raise InvalidArgument(f"expected an image [C, H, W] or [H, W], got shape {tuple(t.shape)}")
    return t


# --------------------------------------------------------------------------- pixel metrics

def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> torch.Tensor:
    x = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(x ** 2) / (2 * sigma ** 2))
    g = g / g.sum()
    return g[:, None] * g[None, :]


def ssim_map(a, b) -> torch.Tensor:
    """Per-window SSIM ``[C, H-6, W-6]`` (valid windows only)."""
    a, b = _as_chw(a), _as_chw(b)
    if a.shape != b.shape:
        raise InvalidArgument(f"ssim shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    if min(a.shape[-2:]) < SSIM_WINDOW:
        raise InvalidArgument(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    c = a.shape[0]
    w = gaussian_window().expand(c, 1, SSIM_WINDOW, SSIM_WINDOW)

    def filt(x):
        return F.conv2d(x[None], w, groups=c)[0]

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return num / den


def ssim(a, b) -> float:
    """Gaussian-windowed SSIM averaged over channels and windows."""
    return float(ssim_map(a, b).mean())


def psnr(a, b, peak: float = 1.0) -> float:
    a, b = _as_chw(a), _as_chw(b)
    if a.shape != b.shape:
        raise InvalidArgument(f"psnr shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = float(((a - b) ** 2).mean())
    return math.inf if mse == 0 else 10.0 * math.log10(peak ** 2 / mse)


def masked_l1(pred, truth, mask) -> float:
    """Mean absolute error over in-mask pixels (all channels)."""
    p, t = _as_chw(pred), _as_chw(truth)
    m = torch.as_tensor(mask.mask if hasattr(mask, "mask") else mask)
    m = (m.reshape(m.shape[-2:]) if m.ndim > 2 else m).to(torch.bool)
    if p.shape != t.shape or m.shape != p.shape[-2:]:
        raise InvalidArgument(f"masked_l1 shapes pred {tuple(p.shape)}, truth {tuple(t.shape)}, mask {tuple(m.shape)}")
    if not m.any():
        raise InvalidArgument("masked_l1 with an empty mask")
    diff = (p - t).abs()[:, m]
    return float(diff.mean())


# --------------------------------------------------------------------------- KID proxy

class RandomFeatureNet(nn.Module):
    """Frozen random conv features: 3 strided convs + ReLU, spatial mean and max pooled."""

    def __init__(self, seed: int = KID_FEATURE_SEED, width: int = 32):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.convs = nn.ModuleList()
        chans = [3, width, width * 2, width * 2]
        for cin, cout in zip(chans, chans[1:]):
            conv = nn.Conv2d(cin, cout, 3, stride=2, padding=1).double()
            with torch.no_grad():
                bound = 1.0 / math.sqrt(cin * 9)
                conv.weight.copy_((torch.rand(conv.weight.shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound * math.sqrt(6))
                conv.bias.copy_((torch.rand(cout, generator=gen, dtype=torch.float64) * 2 - 1) * bound)
            self.convs.append(conv)
        self.requires_grad_(False)

    @property
    def dim(self):
        return self.convs[-1].out_channels * 2

    @torch.no_grad()
    def forward(self, x):
        h = x.to(torch.float64)
        for conv in self.convs:
            h = F.relu(conv(h))
        return torch.cat([h.mean(dim=(-2, -1)), h.amax(dim=(-2, -1))], dim=1)


_FEATURE_NET = {}


def kid_features(images) -> torch.Tensor:
    """``[N, d]`` proxy features of a stack of ``[C, H, W]`` images."""
    if KID_FEATURE_SEED not in _FEATURE_NET:
        _FEATURE_NET[KID_FEATURE_SEED] = RandomFeatureNet()
    x = torch.stack([_as_chw(i) for i in images]) if not torch.is_tensor(images) else images.to(torch.float64)
    return _FEATURE_NET[KID_FEATURE_SEED](x)


def polynomial_mmd2(fx: torch.Tensor, fy: torch.Tensor) -> float:
    """Unbiased MMD^2 with kernel ``(x.y / d + 1)^3``."""
    m, n, d = fx.shape[0], fy.shape[0], fx.shape[1]
    if m < 2 or n < 2:
        raise InvalidArgument(f"kid_proxy needs at least 2 samples per set, got {m} and {n}")
    kxx = (fx @ fx.T / d + 1) ** 3
    kyy = (fy @ fy.T / d + 1) ** 3
    kxy = (fx @ fy.T / d + 1) ** 3
    sxx = (kxx.sum() - kxx.diagonal().sum()) / (m * (m - 1))
    syy = (kyy.sum() - kyy.diagonal().sum()) / (n * (n - 1))
    return float(sxx + syy - 2 * kxy.mean())


def kid_proxy(set_a, set_b) -> float:
    if len(set_a) < 2 or len(set_b) < 2:
        raise InvalidArgument(f"kid_proxy needs at least 2 samples per set, got {len(set_a)} and {len(set_b)}")
    return polynomial_mmd2(kid_features(set_a), kid_features(set_b))


# --------------------------------------------------------------------------- gradient checks

@dataclass
class GradCheckReport:
    op_id: str
    passed: bool
    max_rel_error: dict            # input name -> worst relative error over trials
    trials: int
    eps: float
    tol: float

    def line(self):
        worst = max(self.max_rel_error.values()) if self.max_rel_error else 0.0
        return f"{self.op_id}: {'pass' if self.passed else 'FAIL'} (max rel err {worst:.2e}, tol {self.tol:g})"


GRADCHECK_OPS: dict = {}


def register_op(op_id: str):
    """Register ``builder(gen) -> (fn, inputs)``; ``fn()`` returns a scalar from the ``inputs`` leaves."""
    def deco(builder):
        GRADCHECK_OPS[op_id] = builder
        return builder
    return deco


@torch.no_grad()
def numerical_gradient(fn: Callable, x: torch.Tensor, eps: float) -> torch.Tensor:
    g = torch.zeros_like(x)
    flat, gflat = x.data.view(-1), g.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        fp = fn().item()
        flat[i] = orig - eps
        fm = fn().item()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    den = max(float(a.norm()), float(b.norm()), 1e-12)
    return float((a - b).norm()) / den


def gradient_check(op_id: str, trials: int = 3, eps: float = 1e-5, tol: float = 1e-4,
                   seed: int = 0) -> GradCheckReport:
    """Central differences vs autograd in float64 on micro shapes; failures are report entries."""
    if op_id not in GRADCHECK_OPS:
        raise InvalidArgument(f"unknown op {op_id!r}; registered: {sorted(GRADCHECK_OPS)}")
    worst: dict = {}
    for trial in range(trials):
        gen = torch.Generator().manual_seed(seed * 1000 + trial)
        fn, inputs = GRADCHECK_OPS[op_id](gen)
        for x in inputs.values():
            x.grad = None
        fn().backward()
        with torch.no_grad():
            for name, x in inputs.items():
                analytic = x.grad if x.grad is not None else torch.zeros_like(x)
                numeric = numerical_gradient(fn, x, eps)
                worst[name] = max(worst.get(name, 0.0), relative_error(analytic, numeric))
    return GradCheckReport(op_id, all(v < tol for v in worst.values()), worst, trials, eps, tol)


def _leaf(gen, *shape, scale=1.0):
    return (torch.randn(*shape, generator=gen, dtype=torch.float64) * scale).requires_grad_(True)


def _projector(gen, shape):
    r = torch.randn(*shape, generator=gen, dtype=torch.float64)
    return lambda out: (out * r).sum()


@register_op("multi_reference_attention")
def _op_mra(gen):
    from .attention import AttentionParams, multi_reference_attention
    p = AttentionParams(8, heads=2).double()
    target, r1, r2 = _leaf(gen, 2, 5, 8), _leaf(gen, 2, 4, 8), _leaf(gen, 2, 3, 8)
    proj = _projector(gen, (2, 5, 8))
    return (lambda: proj(multi_reference_attention(target, [r1, r2], p)),
            {"target": target, "ref0": r1, "ref1": r2, "W_K": p.to_k.weight})


@register_op("cross_attention")
def _op_cross(gen):
    from .attention import AttentionParams, cross_attention
    p = AttentionParams(8, heads=2, context_dim=6).double()
    target, ctx = _leaf(gen, 2, 5, 8), _leaf(gen, 2, 7, 6)
    proj = _projector(gen, (2, 5, 8))
    return (lambda: proj(cross_attention(target, ctx, p)),
            {"target": target, "context": ctx, "W_Q": p.to_q.weight})


@register_op("text_query_loss")
def _op_tql(gen):
    from .garment_encoder import text_query_loss
    f8, f4 = _leaf(gen, 2, 64, 3), _leaf(gen, 2, 16, 5)
    mask = (torch.rand(2, 8, 8, generator=gen) > 0.5).to(torch.float64)
    return lambda: text_query_loss({8: f8, 4: f4}, mask), {"F8": f8, "F4": f4}


@register_op("denoising_loss")
def _op_dm(gen):
    from .diffusion import denoising_loss
    pred = _leaf(gen, 2, 3, 4, 4)
    true = torch.randn(2, 3, 4, 4, generator=gen, dtype=torch.float64)
    return lambda: denoising_loss(pred, true), {"eps_pred": pred}


@register_op("perceiver_resampler")
def _op_resampler(gen):
    from .instruction import PerceiverResampler
    torch.manual_seed(int(torch.randint(0, 2 ** 31, (1,), generator=gen)))
    r = PerceiverResampler(8, 6, n_queries=3, layers=1, heads=2).double()
    tokens = _leaf(gen, 2, 5, 8)
    proj = _projector(gen, (2, 3, 6))
    return lambda: proj(r(tokens)), {"tokens": tokens, "latents": r.latents}


def micro_denoiser_config(use_mra=True):
    from .denoiser import DenoiserConfig
    return DenoiserConfig(image_size=8, base_channels=8, channel_mult=(1, 2), attn_levels=(8, 4),
                          context_dim=8, heads=2, time_dim=16, null_len=4, groups=4, use_mra=use_mra)


@register_op("micro_denoiser")
def _op_micro(gen):
    from .denoiser import ConditioningBundle, Denoiser
    from .garment_encoder import GarmentFeatureSet
    torch.manual_seed(int(torch.randint(0, 2 ** 31, (1,), generator=gen)))
    cfg = micro_denoiser_config()
    net = Denoiser(cfg).double()
    z = _leaf(gen, 1, 3, 8, 8)
    person = torch.rand(1, 3, 8, 8, generator=gen, dtype=torch.float64)
    ctx = _leaf(gen, 1, 5, 8)
    f8, f4 = _leaf(gen, 1, 1, 64, 8), _leaf(gen, 1, 1, 16, 16)
    t = torch.tensor([37])
    proj = _projector(gen, (1, 3, 8, 8))

    def fn():
        cond = ConditioningBundle(ctx, None, GarmentFeatureSet({8: f8, 4: f4}), person)
        return proj(net(z, t, cond))
    return fn, {"z_t": z, "context": ctx, "ref_feat8": f8, "ref_feat4": f4,
                "conv_in": net.conv_in.weight}


# --------------------------------------------------------------------------- reports

@dataclass
class MetricReport:
    metrics: dict                 # ssim, psnr, masked_l1, kid_proxy (+ masked_response_ratio)
    n: int
    config_hash: str = ""
    per_sample: list = field(default_factory=list)
    notes: dict = field(default_factory=dict)

    def to_json(self):
        return {"metrics": self.metrics, "n": self.n, "config_hash": self.config_hash,
                "per_sample": self.per_sample, "notes": self.notes}

    def table(self):
        cols = ["id", "ssim", "psnr", "masked_l1"]
        lines = ["  ".join(f"{c:>10}" for c in cols)]
        for row in self.per_sample:
            lines.append("  ".join(f"{_fmt(row.get(c)):>10}" for c in cols))
        lines.append("  ".join(f"{c}={_fmt(v)}" for c, v in self.metrics.items()))
        return "\n".join(lines)


def _fmt(v):
    if isinstance(v, float):
        return "inf" if math.isinf(v) else f"{v:.4f}"
    return str(v)


def _json_float(v):
    return None if isinstance(v, float) and not math.isfinite(v) else v


def image_metrics(preds, truths, masks, ids=None) -> MetricReport:
    """Per-sample SSIM / PSNR / masked-L1 plus the set-level KID proxy; rows sorted by id."""
    if not (len(preds) == len(truths) == len(masks)):
        raise InvalidArgument("preds, truths and masks must have equal length")
    ids = list(ids) if ids is not None else [f"{i:06d}" for i in range(len(preds))]
    order = sorted(range(len(ids)), key=lambda i: ids[i])
    rows = []
    for i in order:
        rows.append({"id": ids[i], "ssim": ssim(preds[i], truths[i]), "psnr": _json_float(psnr(preds[i], truths[i])),
                     "masked_l1": masked_l1(preds[i], truths[i], masks[i])})
    metrics = {
        "ssim": float(np.mean([r["ssim"] for r in rows])) if rows else float("nan"),
        "psnr": _json_float(float(np.mean([r["psnr"] if r["psnr"] is not None else math.inf for r in rows]))) if rows else None,
        "masked_l1": float(np.mean([r["masked_l1"] for r in rows])) if rows else float("nan"),
        "kid_proxy": kid_proxy([preds[i] for i in order], [truths[i] for i in order]) if len(rows) >= 2 else None,
    }
    return MetricReport(metrics, len(rows), per_sample=rows, notes={"kid_proxy": "random-conv-feature proxy"})


def union_mask(masks) -> torch.Tensor:
    out = torch.zeros_like(torch.as_tensor(masks[0]), dtype=torch.bool)
    for m in masks:
        out |= torch.as_tensor(m).bool()
    return out


@torch.no_grad()
def generate_testset(model, data, seed: int = 0, steps: int = 50, batch_size: int = 32,
                     use_refs: bool = True, indices: Optional[Sequence[int]] = None, guidance_scale: float = 1.0):
    """Try-on outputs ``[N, 3, H, W]`` for every (or the selected) held-out sample."""
    indices = list(range(len(data))) if indices is None else list(indices)
    outs = []
    for k in range(0, len(indices), batch_size):
        chunk = indices[k:k + batch_size]
        b = data.batch(chunk)
        outs.append(model.generate(b["prompts"], b["refs"], b["ref_mask"], b["person"], seed=seed + k,
                                   steps=steps, use_refs=use_refs, guidance_scale=guidance_scale))
    return torch.cat(outs) if outs else torch.zeros(0)


@torch.no_grad()
def masked_response_ratio(model, data, indices: Optional[Sequence[int]] = None, batch_size: int = 32):
    """``(outside, inside, outside / inside)`` mean ``sigmoid(F)^2`` of the garment encoder on held-out refs."""
    from .garment_encoder import masked_response
    from .training import _prior_at_latent
    indices = list(range(len(data))) if indices is None else list(indices)
    out_sum = in_sum = 0.0
    n_out = n_in = 0
    for k in range(0, len(indices), batch_size):
        b = data.batch(indices[k:k + batch_size])
        feats = model.garment_features(b["prompts"], b["refs"], b["ref_mask"])
        prior = _prior_at_latent(model, b["prior_masks"])
        o, i = masked_response(feats.per_level, prior, b["ref_mask"])
        w = int(b["ref_mask"].sum())
        out_sum, in_sum, n_out, n_in = out_sum + o * w, in_sum + i * w, n_out + w, n_in + w
    outside, inside = out_sum / max(n_out, 1), in_sum / max(n_in, 1)
    return outside, inside, outside / inside if inside > 0 else math.inf


def evaluate_model(model, data, seed: int = 0, steps: int = 50, use_refs: bool = True,
                   indices: Optional[Sequence[int]] = None, preds: Optional[torch.Tensor] = None):
    """Generate (unless ``preds`` is given) and score against the held-out targets."""
    indices = list(range(len(data))) if indices is None else list(indices)
    if preds is None:
        preds = generate_testset(model, data, seed, steps, use_refs=use_refs, indices=indices)
    truths = data.target[indices]
    masks = [union_mask(data.masks[i]) for i in indices]
    report = image_metrics(list(preds), list(truths), masks, [data.ids[i] for i in indices])
    return report, preds


def ablation_report(checkpoints: dict, testset, out_dir=None, seeds: Sequence[int] = (0,), steps: int = 50,
                    indices: Optional[Sequence[int]] = None, models: Optional[dict] = None) -> dict:
    """Compare the ablation variants on one held-out set.

    ``checkpoints`` maps variant name -> checkpoint path (or a list with one path
    per seed); ``models`` may pass already-loaded models instead.  Missing
    variants are listed as absent.
    """
    from .training import TryonTensors, load_model
    data = testset if isinstance(testset, TryonTensors) else None
    rows, absent, sheets = {}, [], {}
    for variant in VARIANTS + tuple(v for v in {**checkpoints, **(models or {})} if v not in VARIANTS):
        src = (models or {}).get(variant, checkpoints.get(variant))
        if src is None:
            absent.append(variant)
            continue
        srcs = src if isinstance(src, (list, tuple)) else [src] * len(seeds)
        per_seed = []
        for seed, s in zip(seeds, srcs):
            model = s if isinstance(s, nn.Module) else load_model(s)
            if data is None:
                data = TryonTensors.from_dir(testset, model.config.image_size)
            report, preds = evaluate_model(model, data, seed=seed, steps=steps, indices=indices)
            outside, inside, ratio = masked_response_ratio(model, data, indices)
            per_seed.append({**report.metrics, "masked_response_ratio": ratio})
            sheets.setdefault(variant, preds)
        keys = per_seed[0].keys()
        rows[variant] = {k: _json_float(float(np.mean([r[k] for r in per_seed]))) for k in keys}
        rows[variant]["per_seed"] = per_seed
    ordering = {}
    names = list(rows)
    for metric in ("masked_l1", "kid_proxy"):
        ordering[metric] = sorted(names, key=lambda v: rows[v][metric])
    result = {"variants": rows, "absent": absent, "ordering": ordering, "seeds": list(seeds),
              "n": len(indices) if indices is not None else (len(data) if data is not None else 0),
              "notes": {"kid_proxy": "random-conv-feature proxy, not Inception KID"}}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
        (out / "ablation.txt").write_text(ablation_table(result) + "\n")
        if data is not None and sheets:
            idx = list(range(len(data))) if indices is None else list(indices)
            k = min(8, len(idx))
            cols = [data.person[idx[:k]], data.target[idx[:k]]] + [sheets[v][:k] for v in sheets]
            contact_sheet(cols, out / "ablation.png")
    return result


def ablation_table(result: dict) -> str:
    cols = ["masked_l1", "ssim", "kid_proxy", "masked_response_ratio"]
    lines = [f"{'variant':<10}" + "".join(f"{c:>24}" for c in cols)]
    for v, row in result["variants"].items():
        lines.append(f"{v:<10}" + "".join(f"{_fmt(row.get(c)):>24}" for c in cols))
    for v in result["absent"]:
        lines.append(f"{v:<10}  (absent)")
    for m, order in result["ordering"].items():
        lines.append(f"order by {m}: " + " < ".join(order))
    return "\n".join(lines)


def contact_sheet(columns: Sequence[torch.Tensor], path, scale: int = 2):
    """Grid PNG: one column per tensor ``[N, 3, H, W]``, one row per sample."""
    n = min(c.shape[0] for c in columns)
    rows = [torch.cat([c[i] for c in columns], dim=-1) for i in range(n)]
    grid = torch.cat(rows, dim=-2).clamp(0, 1)
    arr = (grid.permute(1, 2, 0).numpy() * 255).round().astype(np.uint8)
    img = Image.fromarray(arr)
    if scale > 1:
        img = img.resize((img.width * scale, img.height * scale), Image.NEAREST)
    img.save(path)
    return path


def save_image(t: torch.Tensor, path):
    arr = (t.clamp(0, 1).permute(1, 2, 0).cpu().numpy() * 255).round().astype(np.uint8)
    Image.fromarray(arr).save(path)


def load_image(path, size: Optional[int] = None) -> torch.Tensor:
    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None and im.size != (size, size):
            im = im.resize((size, size), Image.BOX)
        return torch.from_numpy(np.array(im)).permute(2, 0, 1).float() / 255.0


def report_schema() -> dict:
    """JSON schema shipped for ``eval`` reports."""
    from importlib import resources
    return json.loads(resources.files("mmtryon").joinpath("data/report.schema.json").read_text())
