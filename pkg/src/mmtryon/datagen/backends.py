"""Pluggable caption / detection / segmentation / inpainting backends.

Requests and responses are plain dataclasses so that an adapter for a real
model (a captioning VLM, an open-vocabulary detector, a promptable segmenter,
an inpainting diffusion model) can be dropped in behind the same calls.  The
procedural implementations read the ground truth of the scene they are given.
"""
from __future__ import annotations

import io
import re
from dataclasses import dataclass, field, replace
from typing import Optional, Protocol

import numpy as np
from PIL import Image

from ..errors import BackendError
from ..instruction import GarmentSubject
from .render import (BACKGROUNDS, CATEGORIES, MAX_SHIFT, PALETTE, POSE_ARCHETYPES, SKIN_TONES,
                     STYLES, TEXTURE_WORDS, Body, Garment, ProceduralScene, RenderResult, Texture,
                     render_scene)


@dataclass
class BackendRequest:
    image: Optional[bytes] = None          # PNG bytes
    scene: Optional[ProceduralScene] = None
    query: Optional[str] = None
    box: Optional[list] = None
    mask: Optional[bytes] = None
    seed: int = 0
    n: int = 1
    index: Optional[int] = None
    exclude_poses: tuple = ()
    sample_id: Optional[str] = None


@dataclass
class BackendResponse:
    text: Optional[str] = None
    subjects: list = field(default_factory=list)
    boxes: list = field(default_factory=list)
    mask: Optional[bytes] = None
    images: list = field(default_factory=list)   # PNG bytes
    meta: list = field(default_factory=list)


class Backend(Protocol):
    backend_id: str

    def __call__(self, request: BackendRequest) -> BackendResponse: ...


def png_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def png_array(data: bytes) -> np.ndarray:
    return np.array(Image.open(io.BytesIO(data)))


def _require_scene(req: BackendRequest, who: str) -> ProceduralScene:
    if req.scene is None:
        raise BackendError(f"{who}: procedural backend needs the scene", req.sample_id)
    return req.scene


# --------------------------------------------------------------------------- captions

def garment_phrase(g: Garment, first: bool) -> str:
    tex = TEXTURE_WORDS[g.texture.kind]
    desc = f"{g.texture.color1} {tex}".strip()
    article = ""
    if first and g.category not in ("pants", "shoes"):
        article = "an " if desc[0] in "aeiou" else "a "
    return f"{article}{desc} {g.category}"


def caption_scene(scene: ProceduralScene) -> str:
    """E.g. ``"a person wearing a red striped top, tucked in, and blue pants"``."""
    if not scene.garments:
        return "a person"
    n = len(scene.garments)
    text = "a person wearing "
    for j, g in enumerate(scene.garments):
        if j > 0:
            prev_styled = scene.garments[j - 1].style is not None
            last = j == n - 1
            text += (" and " if last else " ") if prev_styled else (" and " if last else ", ")
        text += garment_phrase(g, j == 0)
        if g.style:
            text += ", " + g.style + ("," if j < n - 1 else "")
    return text


_STYLE_ALT = "|".join(re.escape(s) for c in CATEGORIES for s in STYLES[c] if s)
_CAT_ALT = "|".join(CATEGORIES)
_ITEM_RE = re.compile(rf"\b(?P<cat>{_CAT_ALT})\b(?:, (?P<style>{_STYLE_ALT}))?")


def parse_caption(text: str) -> list[GarmentSubject]:
    """Recover (category, style) pairs from a templated caption, in order."""
    body = text.lower().removeprefix("a person").removeprefix(" wearing ")
    subjects = []
    for m in _ITEM_RE.finditer(body):
        subjects.append(GarmentSubject(m.group("cat"), m.group("style"), len(subjects) + 1))
    return subjects


class ProceduralCaptioner:
    backend_id = "procedural-captioner-v1"

    def __call__(self, req):
        scene = _require_scene(req, "captioner")
        text = caption_scene(scene)
        subjects = [GarmentSubject(g.category, g.style, i + 1) for i, g in enumerate(scene.garments)]
        return BackendResponse(text=text, subjects=subjects)


class ProceduralDetector:
    """Open-vocabulary detection analog: boxes of garments whose category occurs in the query."""

    backend_id = "procedural-detector-v1"

    def __call__(self, req):
        scene = _require_scene(req, "detector")
        query = (req.query or "").lower()
        render = render_scene(scene)
        boxes = [b for g, b in zip(scene.garments, render.boxes)
                 if re.search(rf"\b{g.category}\b", query) and b is not None]
        return BackendResponse(boxes=boxes)


class ProceduralSegmenter:
    """Box-prompted segmentation analog: the truth mask of the garment filling the box."""

    backend_id = "procedural-segmenter-v1"

    def __call__(self, req):
        scene = _require_scene(req, "segmenter")
        if req.box is None:
            raise BackendError("segmenter: box prompt required", req.sample_id)
        render = render_scene(scene)
        for m, b in zip(render.masks, render.boxes):
            if b == list(req.box):
                return BackendResponse(mask=png_bytes(m.astype(np.uint8) * 255))
        raise BackendError(f"segmenter: no object fills box {req.box}", req.sample_id)


# Seven re-rendering recipes standing in for the inpainting prompt table: each
# fixes how the new wearer differs (pose archetype, side of the canvas).
VARIATIONS = (
    {"archetype": 0, "side": -1}, {"archetype": 0, "side": 1}, {"archetype": 1, "side": -1},
    {"archetype": 1, "side": 1}, {"archetype": 2, "side": -1}, {"archetype": 2, "side": 1},
    {"archetype": 1, "side": 0},
)


def random_texture(rng: np.random.Generator, avoid: Optional[str] = None) -> Texture:
    colors = [c for c in PALETTE if c != avoid]
    c1 = colors[rng.integers(len(colors))]
    c2 = [c for c in PALETTE if c != c1][rng.integers(len(PALETTE) - 1)]
    kind = ("solid", "stripes", "checker")[rng.integers(3)]
    return Texture(kind, c1, c2)


class ProceduralInpainter:
    """Re-dress new random wearers with one garment kept pixel-identical.

    The kept garment's category, style and texture are preserved; the other
    garments keep their category and style (so occlusion is unchanged) but get
    fresh textures; pose, skin and background are resampled per variation.
    """

    backend_id = "procedural-inpainter-v1"

    def __init__(self, exclude_poses=()):
        self.exclude_poses = set(exclude_poses)

    def candidates(self, scene: ProceduralScene, keep: int, n: int, seed: int, exclude_poses=()):
        rng = np.random.default_rng([seed, keep, 7])
        excluded = set(exclude_poses) | self.exclude_poses | {scene.body.pose_id}
        out, used = [], set()
        order = rng.permutation(len(VARIATIONS))
        attempts = 0
        while len(out) < n and attempts < 20 * n:
            var = VARIATIONS[order[attempts % len(order)]]
            attempts += 1
            side = var["side"] or int(rng.choice([-1, 1]))
            shift = side * int(rng.integers(1, MAX_SHIFT + 1)) if var["side"] else 0
            body = Body(var["archetype"], shift, int(rng.integers(len(SKIN_TONES))),
                        int(rng.integers(len(BACKGROUNDS))))
            if body.pose_id in excluded or body.pose_id in used:
                continue
            used.add(body.pose_id)
            garments = tuple(g if i == keep else replace(g, texture=random_texture(rng))
                             for i, g in enumerate(scene.garments))
            out.append((ProceduralScene(body, garments, scene.size), int(order[(attempts - 1) % len(order)])))
        return out

    def __call__(self, req):
        scene = _require_scene(req, "inpainter")
        keep = req.index if req.index is not None else 0
        cands = self.candidates(scene, keep, req.n, req.seed, req.exclude_poses)
        images = [png_bytes(render_scene(s).image) for s, _ in cands]
        meta = [{"pose_id": s.body.pose_id, "variation": v, "scene": s.to_dict()} for s, v in cands]
        return BackendResponse(images=images, meta=meta)


@dataclass
class PipelineBackends:
    captioner: Backend = field(default_factory=ProceduralCaptioner)
    detector: Backend = field(default_factory=ProceduralDetector)
    segmenter: Backend = field(default_factory=ProceduralSegmenter)
    inpainter: Backend = field(default_factory=ProceduralInpainter)

    def ids(self):
        return {k: getattr(self, k).backend_id for k in ("captioner", "detector", "segmenter", "inpainter")}


def procedural_backends() -> PipelineBackends:
    return PipelineBackends()
