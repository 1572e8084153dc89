"""Procedural people: body/garment geometry, textures and an exact polygon rasterizer.

Geometry is authored on a 64x64 design grid and scaled to the canvas; every
polygon vertex lands on integer pixel coordinates, and a pixel belongs to a
polygon iff its centre is inside (crossing-number test in exact integer
arithmetic).  Garments are painted in a fixed z-order over the body, so the
per-garment masks are exactly the pixels each garment ends up owning.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

CATEGORIES = ("top", "pants", "shoes", "hat")
STYLES = {
    "top": (None, "tucked in", "tucked out", "unzipped"),
    "pants": (None, "rolled up"),
    "shoes": (None,),
    "hat": (None, "backwards"),
}
TEXTURES = ("solid", "stripes", "checker")
TEXTURE_WORDS = {"solid": "", "stripes": "striped", "checker": "checkered"}

PALETTE = {
    "red": (200, 40, 40), "blue": (40, 70, 200), "green": (40, 160, 60), "yellow": (230, 210, 40),
    "orange": (240, 140, 30), "purple": (130, 50, 170), "pink": (240, 130, 180), "black": (25, 25, 25),
    "white": (240, 240, 240), "gray": (128, 128, 128), "brown": (120, 70, 30), "teal": (30, 150, 150),
}
SKIN_TONES = ((241, 194, 160), (224, 172, 125), (176, 120, 82), (110, 72, 50))
BACKGROUNDS = ((200, 210, 222), (222, 204, 192), (192, 216, 198), (226, 224, 200), (184, 184, 206))
POSE_ARCHETYPES = (0, 1, 2)           # arms down, both arms raised, one arm raised
MAX_SHIFT = 3                         # horizontal body offset, canvas pixels
DESIGN = 64
PATTERN_UNIT = 4                      # stripe / checker cell size on the design grid

# painting order; a tucked-in top goes under the pants
Z_ORDER = {"pants": 1, "top": 2, "shoes": 3, "hat": 4}
LABEL_BG, LABEL_BODY, LABEL_GARMENT0 = 0, 1, 10


@dataclass(frozen=True)
class Texture:
    kind: str = "solid"
    color1: str = "red"
    color2: str = "white"

    def __post_init__(self):
        if self.kind not in TEXTURES:
            raise ValueError(f"unknown texture {self.kind!r}")
        for c in (self.color1, self.color2):
            if c not in PALETTE:
                raise ValueError(f"unknown color {c!r}")


@dataclass(frozen=True)
class Garment:
    category: str
    style: Optional[str] = None
    texture: Texture = field(default_factory=Texture)

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown garment category {self.category!r}")
        if self.style not in STYLES[self.category]:
            raise ValueError(f"style {self.style!r} not valid for {self.category}")


@dataclass(frozen=True)
class Body:
    archetype: int = 0
    shift: int = 0
    skin: int = 0
    background: int = 0

    @property
    def pose_id(self) -> str:
        return f"{self.archetype}:{self.shift:+d}"


@dataclass(frozen=True)
class ProceduralScene:
    body: Body = field(default_factory=Body)
    garments: tuple = ()
    size: int = 64

    def to_dict(self):
        return {"body": asdict(self.body), "size": self.size,
                "garments": [{"category": g.category, "style": g.style, "texture": asdict(g.texture)}
                             for g in self.garments]}

    @classmethod
    def from_dict(cls, d):
        garments = tuple(Garment(g["category"], g["style"], Texture(**g["texture"])) for g in d["garments"])
        return cls(Body(**d["body"]), garments, d["size"])


@dataclass
class RenderResult:
    image: np.ndarray          # uint8 [H, W, 3]
    labels: np.ndarray         # int16 [H, W]: 0 background, 1 body, 10 + i garment i
    masks: list                # bool [H, W] per garment, scene order
    boxes: list                # [x0, y0, x1, y1] per garment (inclusive-exclusive), None if empty


# --------------------------------------------------------------------------- geometry

def _body_parts(archetype):
    """Polygons on the design grid, body centred at x = 0."""
    parts = [
        [(-3, 4), (3, 4), (6, 7), (6, 13), (3, 16), (-3, 16), (-6, 13), (-6, 7)],   # head
        [(-2, 15), (2, 15), (2, 19), (-2, 19)],                                      # neck
        [(-10, 18), (10, 18), (9, 36), (-9, 36)],                                    # torso
        [(-9, 34), (9, 34), (10, 40), (-10, 40)],                                    # hips
        [(-10, 39), (-1, 39), (-2, 56), (-8, 56)],                                   # legs
        [(1, 39), (10, 39), (8, 56), (2, 56)],
        [(-9, 55), (-2, 55), (-1, 60), (-10, 60)],                                   # feet
        [(2, 55), (9, 55), (10, 60), (1, 60)],
    ]
    down_l = [(-15, 19), (-11, 19), (-12, 37), (-16, 37)]
    up_l = [(-11, 19), (-11, 24), (-24, 15), (-22, 10)]
    mirror = lambda poly: [(-x, y) for x, y in poly]
    left, right = {0: (down_l, mirror(down_l)), 1: (up_l, mirror(up_l)),
                   2: (down_l, mirror(up_l))}[archetype]
    return parts + [left, right]


def _garment_parts(g: Garment):
    if g.category == "top":
        bottom = {"tucked in": 36, None: 39, "tucked out": 42, "unzipped": 39}[g.style]
        if g.style == "unzipped":
            return [[(-10, 18), (-1, 18), (-1, bottom), (-9, bottom)],
                    [(1, 18), (10, 18), (9, bottom), (1, bottom)]]
        return [[(-10, 18), (10, 18), (9, bottom), (-9, bottom)]]
    if g.category == "pants":
        hem = 50 if g.style == "rolled up" else 56
        return [[(-9, 34), (9, 34), (10, 40), (-10, 40)],
                [(-10, 39), (-1, 39), (-2, hem), (-8, hem)],
                [(1, 39), (10, 39), (8, hem), (2, hem)]]
    if g.category == "shoes":
        return [[(-9, 55), (-2, 55), (-1, 60), (-10, 60)], [(2, 55), (9, 55), (10, 60), (1, 60)]]
    brim = [(-6, 5), (10, 5), (10, 7), (-6, 7)] if g.style is None else [(-10, 5), (6, 5), (6, 7), (-10, 7)]
    return [[(-6, 6), (6, 6), (5, 1), (-5, 1)], brim]


def _to_canvas(poly, size, shift):
    s = size / DESIGN
    cx = size // 2 + shift
    return np.array([(int(round(x * s)) + cx, int(round(y * s))) for x, y in poly], dtype=np.int64)


def garment_anchor(size, shift):
    """Pattern origin: the top-left of the garment frame, moves rigidly with the body."""
    return size // 2 + shift, 0


# --------------------------------------------------------------------------- rasterizer

def rasterize(poly: np.ndarray, size: int) -> np.ndarray:
    """Pixels whose centres lie inside ``poly`` (integer vertices), crossing-number rule.

    Coordinates are doubled so centres ``(2x+1, 2y+1)`` and vertices are integers
    and every comparison is exact.
    """
    ys, xs = np.mgrid[0:size, 0:size]
    px, py = 2 * xs + 1, 2 * ys + 1
    v = 2 * np.asarray(poly, dtype=np.int64)
    inside = np.zeros((size, size), dtype=bool)
    for i in range(len(v)):
        (x1, y1), (x2, y2) = v[i], v[(i + 1) % len(v)]
        if y1 == y2:
            continue
        straddles = (y1 > py) != (y2 > py)
        # px < x1 + (py - y1) * (x2 - x1) / (y2 - y1), cleared of the division
        lhs = (px - x1) * (y2 - y1)
        rhs = (py - y1) * (x2 - x1)
        left_of = lhs < rhs if y2 > y1 else lhs > rhs
        inside ^= straddles & left_of
    return inside


def texture_pixels(tex: Texture, size: int, anchor) -> np.ndarray:
    unit = max(1, int(round(PATTERN_UNIT * size / DESIGN)))
    ys, xs = np.mgrid[0:size, 0:size]
    u, v = xs - anchor[0], ys - anchor[1]
    if tex.kind == "solid":
        sel = np.zeros((size, size), dtype=bool)
    elif tex.kind == "stripes":
        sel = (v // unit) % 2 == 1
    else:
        sel = ((u // unit) + (v // unit)) % 2 == 1
    c1, c2 = np.array(PALETTE[tex.color1], np.uint8), np.array(PALETTE[tex.color2], np.uint8)
    return np.where(sel[..., None], c2, c1)


def paint_order(garments):
    def key(item):
        i, g = item
        z = Z_ORDER[g.category]
        if g.category == "top" and g.style == "tucked in":
            z = 0.5
        return (z, i)
    return [i for i, _ in sorted(enumerate(garments), key=key)]


def render_scene(scene: ProceduralScene, seed: int = 0, noise: float = 0.0) -> RenderResult:
    """Rasterize a scene.  Deterministic; ``noise > 0`` adds seeded pixel noise to the image only."""
    size, body = scene.size, scene.body
    img = np.empty((size, size, 3), dtype=np.uint8)
    img[:] = BACKGROUNDS[body.background]
    labels = np.full((size, size), LABEL_BG, dtype=np.int16)
    skin = np.array(SKIN_TONES[body.skin], np.uint8)
    for poly in _body_parts(body.archetype):
        m = rasterize(_to_canvas(poly, size, body.shift), size)
        img[m] = skin
        labels[m] = LABEL_BODY
    anchor = garment_anchor(size, body.shift)
    for i in paint_order(scene.garments):
        g = scene.garments[i]
        m = np.zeros((size, size), dtype=bool)
        for poly in _garment_parts(g):
            m |= rasterize(_to_canvas(poly, size, body.shift), size)
        tex = texture_pixels(g.texture, size, anchor)
        img[m] = tex[m]
        labels[m] = LABEL_GARMENT0 + i
    masks = [labels == LABEL_GARMENT0 + i for i in range(len(scene.garments))]
    if noise > 0:
        rng = np.random.default_rng(seed)
        jitter = rng.normal(0, noise * 255, img.shape)
        img = np.clip(img.astype(np.float64) + jitter, 0, 255).astype(np.uint8)
    return RenderResult(img, labels, masks, [mask_box(m) for m in masks])


def mask_box(mask: np.ndarray):
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        return None
    return [int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1]


def garment_polygons(scene: ProceduralScene, index: int):
    """Canvas-space polygons of one garment (for independent re-rasterization)."""
    g = scene.garments[index]
    return [_to_canvas(p, scene.size, scene.body.shift) for p in _garment_parts(g)]


def body_polygons(scene: ProceduralScene):
    return [_to_canvas(p, scene.size, scene.body.shift) for p in _body_parts(scene.body.archetype)]
