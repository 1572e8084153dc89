"""Dataset construction: render, caption, ground, segment, synthesize references, filter.

Each sample ``idx`` draws from its own stream ``SeedSequence([seed, idx])`` so the
work is order-free; the manifest is assembled by a single writer in index order
and carries no timestamps, which makes repeated runs byte-identical.
"""
from __future__ import annotations

import hashlib
import json
import os
import shutil
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from ..errors import InvalidArgument
from ..instruction import GarmentSubject, build_prompt
from .backends import (BackendRequest, PipelineBackends, garment_phrase, png_array, png_bytes,
                       procedural_backends, random_texture)
from .render import (BACKGROUNDS, MAX_SHIFT, POSE_ARCHETYPES, SKIN_TONES, STYLES, Body, Garment,
                     ProceduralScene, render_scene)

PLAIN_BACKGROUND = (235, 235, 235)
MANIFEST = "manifest.jsonl"


@dataclass
class DatagenConfig:
    size: int = 64
    n_candidates: int = 3          # inpainter candidates per garment
    max_refs_kept: int = 3         # cap on retained references per garment (3-5)
    leakage_threshold: float = 0.95
    single_fraction: float = 0.3   # share of garment-to-person samples (one reference)
    p_shoes: float = 0.4
    p_hat: float = 0.25
    workers: int = 1


@dataclass
class GarmentRef:
    """A garment to re-render: its category and mask on the source image, plus the scene it came from."""

    category: str
    mask: np.ndarray
    source_image: np.ndarray
    scene: ProceduralScene
    index: int


@dataclass
class FilterResult:
    kept: list
    scores: list
    skip_reason: Optional[str] = None


@dataclass
class TryonSample:
    """One emitted training pair; images are uint8 ``[H, W, 3]``, masks bool ``[H, W]``."""

    id: str
    kind: str                      # "multi" or "single"
    target_image: np.ndarray
    source_image: np.ndarray
    person_image: np.ndarray
    refs: list
    ref_masks: list
    masks: list                    # per garment, on the target
    source_masks: list
    instruction: object            # InstructionPrompt
    caption: str
    subjects: list
    meta: dict = field(default_factory=dict)


# --------------------------------------------------------------------------- similarity filter

def ncc(a: np.ndarray, b: np.ndarray) -> float:
    """Whole-image normalized cross-correlation over all pixels and channels."""
    if a.shape != b.shape:
        raise InvalidArgument(f"ncc shape mismatch {a.shape} vs {b.shape}")
    x = a.astype(np.float64).ravel()
    y = b.astype(np.float64).ravel()
    x -= x.mean()
    y -= y.mean()
    den = np.sqrt((x @ x) * (y @ y))
    if den == 0:
        return 1.0 if np.array_equal(a, b) else 0.0
    return float(x @ y / den)


def leakage_filter(target_image: np.ndarray, candidate_refs: list, threshold: float = 0.95) -> FilterResult:
    """Drop candidates whose NCC with the target exceeds ``threshold``."""
    if not 0 < threshold <= 1:
        raise InvalidArgument(f"threshold must be in (0, 1], got {threshold}")
    scores = [ncc(target_image, c) for c in candidate_refs]
    kept = [i for i, s in enumerate(scores) if s <= threshold]
    reason = None
    if candidate_refs and not kept:
        reason = f"leakage: all {len(candidate_refs)} candidates exceed NCC {threshold}"
    return FilterResult(kept, scores, reason)


def garment_histogram(image: np.ndarray, mask: np.ndarray, bins: int = 16) -> np.ndarray:
    """Normalized joint RGB histogram of the in-mask pixels."""
    px = image[mask].astype(np.int64) * bins // 256
    idx = (px[:, 0] * bins + px[:, 1]) * bins + px[:, 2]
    h = np.bincount(idx, minlength=bins ** 3).astype(np.float64)
    return h / max(h.sum(), 1.0)


def histogram_l1(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.abs(a - b).sum())


def synthesize_reference(garment: GarmentRef, n_candidates: int, seed: int,
                         backends: Optional[PipelineBackends] = None, exclude_poses=()):
    """Re-render ``garment`` on ``n_candidates`` new wearers.

    Returns ``[(image, mask, scene, pose_id)]``; every pose differs from the
    source pose and from ``exclude_poses``.
    """
    if not garment.mask.any():
        raise InvalidArgument(f"{garment.category}: empty garment mask")
    backends = backends or procedural_backends()
    resp = backends.inpainter(BackendRequest(image=png_bytes(garment.source_image), scene=garment.scene,
                                             query=garment.category, seed=seed, n=n_candidates,
                                             index=garment.index, exclude_poses=tuple(exclude_poses)))
    out = []
    for img_bytes, meta in zip(resp.images, resp.meta):
        scene = ProceduralScene.from_dict(meta["scene"])
        mask = render_scene(scene).masks[garment.index]
        out.append((png_array(img_bytes), mask, scene, meta["pose_id"]))
    return out


def garment_crop(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Garment pixels on a plain backdrop (the garment-to-person reference format)."""
    out = np.empty_like(image)
    out[:] = PLAIN_BACKGROUND
    out[mask] = image[mask]
    return out


# --------------------------------------------------------------------------- sampling

def sample_scene(rng: np.random.Generator, cfg: DatagenConfig) -> ProceduralScene:
    top = Garment("top", STYLES["top"][rng.integers(len(STYLES["top"]))], random_texture(rng))
    pants = Garment("pants", STYLES["pants"][rng.integers(len(STYLES["pants"]))],
                    random_texture(rng, avoid=top.texture.color1))
    garments = [top, pants]
    if rng.random() < cfg.p_shoes:
        garments.append(Garment("shoes", None, random_texture(rng)))
    if rng.random() < cfg.p_hat:
        garments.append(Garment("hat", STYLES["hat"][rng.integers(len(STYLES["hat"]))], random_texture(rng)))
    body = sample_body(rng)
    return ProceduralScene(body, tuple(garments), cfg.size)


def sample_body(rng, skin=None, background=None, exclude=()):
    while True:
        body = Body(int(rng.choice(POSE_ARCHETYPES)), int(rng.integers(-MAX_SHIFT, MAX_SHIFT + 1)),
                    int(rng.integers(len(SKIN_TONES))) if skin is None else skin,
                    int(rng.integers(len(BACKGROUNDS))) if background is None else background)
        if body.pose_id not in exclude:
            return body


def redress(scene: ProceduralScene, indices, rng) -> ProceduralScene:
    """Same wearer, garments ``indices`` swapped for new colors/patterns and random styles."""
    garments = list(scene.garments)
    for i in indices:
        g = garments[i]
        styles = STYLES[g.category]
        garments[i] = Garment(g.category, styles[rng.integers(len(styles))],
                              random_texture(rng, avoid=g.texture.color1))
    return replace(scene, garments=tuple(garments))


def generate_sample(index: int, seed: int, cfg: DatagenConfig,
                    backends: Optional[PipelineBackends] = None):
    """Build sample ``index``; returns ``(TryonSample or None, manifest record)``."""
    backends = backends or procedural_backends()
    ss = np.random.SeedSequence([seed, index])
    rng = np.random.default_rng(ss)
    sid = f"{index:06d}"
    record = {"id": sid, "seeds": {"dataset": seed, "index": index}, "backends": backends.ids()}

    target_scene = sample_scene(rng, cfg)
    source_body = sample_body(rng, target_scene.body.skin, target_scene.body.background,
                              exclude={target_scene.body.pose_id})
    source_scene = replace(target_scene, body=source_body)
    target = render_scene(target_scene)
    source = render_scene(source_scene)

    cap = backends.captioner(BackendRequest(scene=target_scene, sample_id=sid))
    kind = "single" if rng.random() < cfg.single_fraction else "multi"
    if kind == "single":
        chosen = [int(rng.integers(len(target_scene.garments)))]
    else:
        chosen = list(range(len(target_scene.garments)))
    ref_seed = int(rng.integers(2 ** 31))
    person_scene = redress(target_scene, chosen, rng)

    refs, ref_masks, alternates, src_masks, tgt_masks, ref_poses, ref_scenes, nccs = [], [], [], [], [], [], [], []
    used_poses = {target_scene.body.pose_id, source_body.pose_id}
    for j, gi in enumerate(chosen):
        g = target_scene.garments[gi]
        phrase = garment_phrase(g, True)
        src_png = png_bytes(source.image)
        box_resp = backends.detector(BackendRequest(image=src_png, scene=source_scene, query=phrase, sample_id=sid))
        want = source.boxes[gi]
        if want is None or want not in box_resp.boxes:
            record["skip_reason"] = f"detector: no box for {g.category}"
            return None, record
        seg = backends.segmenter(BackendRequest(image=src_png, scene=source_scene, box=want, sample_id=sid))
        src_mask = png_array(seg.mask) > 127
        if not src_mask.any():
            record["skip_reason"] = f"segmenter: empty mask for {g.category}"
            return None, record

        if kind == "single":
            crop = garment_crop(source.image, src_mask)
            cands = [(crop, src_mask, source_scene, source_body.pose_id)]
        else:
            cands = synthesize_reference(GarmentRef(g.category, src_mask, source.image, source_scene, gi),
                                         cfg.n_candidates, ref_seed + j, backends, exclude_poses=used_poses)
        filt = leakage_filter(target.image, [c[0] for c in cands], cfg.leakage_threshold)
        if filt.skip_reason or not filt.kept:
            record["skip_reason"] = filt.skip_reason or f"no reference candidates for {g.category}"
            return None, record
        kept = [cands[k] for k in filt.kept[: cfg.max_refs_kept]]
        refs.append(kept[0][0])
        ref_masks.append(kept[0][1])
        alternates.append([(c[0], c[1]) for c in kept[1:]])
        ref_scenes.append(kept[0][2].to_dict())
        ref_poses.append([c[3] for c in kept])
        nccs.append([round(filt.scores[k], 6) for k in filt.kept[: cfg.max_refs_kept]])
        src_masks.append(src_mask)
        tgt_masks.append(target.masks[gi])

    subjects = [GarmentSubject(target_scene.garments[gi].category, target_scene.garments[gi].style, j + 1)
                for j, gi in enumerate(chosen)]
    prompt = build_prompt(subjects)
    sample = TryonSample(sid, kind, target.image, source.image, render_scene(person_scene).image,
                         refs, ref_masks, tgt_masks, src_masks, prompt, cap.text, subjects)
    record.update({
        "kind": kind, "caption": cap.text, "instruction": prompt.rendered,
        "subjects": [asdict(s) for s in subjects], "garment_indices": chosen,
        "poses": {"target": target_scene.body.pose_id, "source": source_body.pose_id, "refs": ref_poses},
        "ncc": nccs,
        "scenes": {"target": target_scene.to_dict(), "source": source_scene.to_dict(),
                   "person": person_scene.to_dict(), "refs": ref_scenes},
        "skip_reason": None,
    })
    sample.meta = {"alternates": alternates}
    return sample, record


# --------------------------------------------------------------------------- writing

def _save_png(path: Path, arr: np.ndarray) -> str:
    data = png_bytes(arr)
    path.write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def _mask_png(mask: np.ndarray) -> np.ndarray:
    return mask.astype(np.uint8) * 255


def write_sample(root: Path, sample: TryonSample, record: dict) -> dict:
    img = root / "images"
    sid = sample.id
    files, digests = {}, {}

    def put(key, name, arr):
        rel = f"images/{name}"
        digests[rel] = _save_png(img / name, arr)
        return rel

    files["target"] = put("target", f"{sid}_target.png", sample.target_image)
    files["source"] = put("source", f"{sid}_source.png", sample.source_image)
    files["person"] = put("person", f"{sid}_person.png", sample.person_image)
    files["refs"], files["masks"], files["ref_masks"], files["source_masks"], files["alternates"] = [], [], [], [], []
    for i in range(len(sample.refs)):
        n = i + 1
        files["refs"].append(put("ref", f"{sid}_ref{n}.png", sample.refs[i]))
        files["masks"].append(put("mask", f"{sid}_mask{n}.png", _mask_png(sample.masks[i])))
        files["ref_masks"].append(put("refmask", f"{sid}_refmask{n}.png", _mask_png(sample.ref_masks[i])))
        files["source_masks"].append(put("srcmask", f"{sid}_srcmask{n}.png", _mask_png(sample.source_masks[i])))
        alts = []
        for k, (a_img, a_mask) in enumerate(sample.meta.get("alternates", [[]] * len(sample.refs))[i], start=2):
            alts.append([put("alt", f"{sid}_ref{n}_{k}.png", a_img),
                         put("altmask", f"{sid}_refmask{n}_{k}.png", _mask_png(a_mask))])
        files["alternates"].append(alts)
    out = dict(record)
    out["files"] = files
    out["sha256"] = digests
    return out


def _generate(args):
    index, seed, cfg = args
    return generate_sample(index, seed, cfg)


def build_dataset(n_samples: int, seed: int, backends: Optional[PipelineBackends] = None,
                  out_dir="data", config: Optional[DatagenConfig] = None) -> list[dict]:
    """Generate ``n_samples`` items into ``out_dir``; returns the manifest records.

    Everything is written to a sibling temporary directory first and moved into
    place at the end, so a failure leaves no partial dataset behind.  An existing
    ``out_dir`` must be empty or hold a previous dataset (which is replaced).
    """
    if n_samples < 0:
        raise InvalidArgument(f"n_samples must be >= 0, got {n_samples}")
    cfg = config or DatagenConfig()
    out = Path(out_dir)
    parent = out.resolve().parent
    if not parent.is_dir():
        raise InvalidArgument(f"parent directory {parent} does not exist")
    if out.exists():
        if not out.is_dir():
            raise InvalidArgument(f"{out} exists and is not a directory")
        entries = {p.name for p in out.iterdir()}
        if entries and not entries <= {MANIFEST, "images", "datagen_config.json", "config.json"}:
            raise InvalidArgument(f"{out} is not empty and does not hold a dataset")
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=parent))
    try:
        (tmp / "images").mkdir()
        if backends is None and cfg.workers > 1:
            with ProcessPoolExecutor(cfg.workers) as pool:
                results = list(pool.map(_generate, [(i, seed, cfg) for i in range(n_samples)], chunksize=8))
        else:
            results = [generate_sample(i, seed, cfg, backends) for i in range(n_samples)]
        manifest = []
        for sample, record in results:
            manifest.append(write_sample(tmp, sample, record) if sample is not None else record)
        with open(tmp / MANIFEST, "w", encoding="utf-8") as f:
            for rec in manifest:
                f.write(json.dumps(rec, sort_keys=True) + "\n")
        (tmp / "datagen_config.json").write_text(json.dumps(asdict(cfg), sort_keys=True, indent=2) + "\n")
        if out.exists():
            shutil.rmtree(out)
        os.replace(tmp, out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return manifest


# --------------------------------------------------------------------------- reading

def read_manifest(root) -> list[dict]:
    path = Path(root) / MANIFEST
    if not path.is_file():
        raise InvalidArgument(f"no dataset manifest at {path}")
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def _load_png(root: Path, rel: str) -> np.ndarray:
    with Image.open(root / rel) as im:
        return np.array(im)


def load_dataset(root, include_skipped: bool = False) -> list[TryonSample]:
    """Read every emitted sample back into memory."""
    root = Path(root)
    out = []
    for rec in read_manifest(root):
        if rec.get("skip_reason") is not None:
            continue
        f = rec["files"]
        subjects = [GarmentSubject(**s) for s in rec["subjects"]]
        alts = [[(_load_png(root, a), _load_png(root, m) > 127) for a, m in per] for per in f.get("alternates", [])]
        out.append(TryonSample(
            rec["id"], rec["kind"], _load_png(root, f["target"]), _load_png(root, f["source"]),
            _load_png(root, f["person"]), [_load_png(root, p) for p in f["refs"]],
            [_load_png(root, p) > 127 for p in f["ref_masks"]], [_load_png(root, p) > 127 for p in f["masks"]],
            [_load_png(root, p) > 127 for p in f["source_masks"]], build_prompt(subjects),
            rec["caption"], subjects, {"alternates": alts, "record": rec}))
    return out


def verify_dataset(root, threshold: Optional[float] = None) -> list[str]:
    """Re-read a dataset and return a list of problems (empty when it is sound).

    Checks: file digests, mask non-emptiness and per-image disjointness,
    subject/ref/mask bijection, and the leakage bound for every reference.
    """
    root = Path(root)
    problems = []
    cfg_path = root / "datagen_config.json"
    if threshold is None:
        threshold = json.loads(cfg_path.read_text())["leakage_threshold"] if cfg_path.exists() else 0.95
    for rec in read_manifest(root):
        if rec.get("skip_reason") is not None:
            continue
        sid = rec["id"]
        for rel, digest in rec["sha256"].items():
            if hashlib.sha256((root / rel).read_bytes()).hexdigest() != digest:
                problems.append(f"{sid}: digest mismatch for {rel}")
        f = rec["files"]
        if not (len(rec["subjects"]) == len(f["refs"]) == len(f["masks"])):
            problems.append(f"{sid}: subjects/refs/masks counts differ")
        for key in ("masks", "source_masks"):
            masks = [_load_png(root, p) > 127 for p in f[key]]
            for i, m in enumerate(masks):
                if not m.any():
                    problems.append(f"{sid}: {key}[{i}] is empty")
                for j in range(i):
                    if (m & masks[j]).any():
                        problems.append(f"{sid}: {key}[{i}] overlaps {key}[{j}]")
        target = _load_png(root, f["target"])
        for i, p in enumerate(f["refs"]):
            if ncc(target, _load_png(root, p)) > threshold:
                problems.append(f"{sid}: ref{i + 1} exceeds the leakage threshold")
    return problems
