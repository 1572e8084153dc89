"""Independent reference implementations used by several test modules."""
from fractions import Fraction

import numpy as np

from mmtryon.datagen.render import Z_ORDER, garment_polygons


def point_in_polygon(x, y, poly):
    """Even-odd ray casting with exact rational arithmetic."""
    inside = False
    n = len(poly)
    for i in range(n):
        x1, y1 = map(Fraction, poly[i])
        x2, y2 = map(Fraction, poly[(i + 1) % n])
        if (y1 > y) != (y2 > y):
            cross = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
            if x < cross:
                inside = not inside
    return inside


def rasterize_oracle(poly, size):
    out = np.zeros((size, size), dtype=bool)
    xs = [p[0] for p in poly]
    ys = [p[1] for p in poly]
    for py in range(max(0, min(ys) - 1), min(size, max(ys) + 1)):
        for px in range(max(0, min(xs) - 1), min(size, max(xs) + 1)):
            out[py, px] = point_in_polygon(Fraction(2 * px + 1, 2), Fraction(2 * py + 1, 2), poly)
    return out


def visible_masks_oracle(scene):
    """Per-garment visible pixels: own coverage minus every garment painted above it."""
    cover = []
    for i in range(len(scene.garments)):
        m = np.zeros((scene.size, scene.size), dtype=bool)
        for poly in garment_polygons(scene, i):
            m |= rasterize_oracle(poly.tolist(), scene.size)
        cover.append(m)

    def z(i):
        g = scene.garments[i]
        return (0.5 if g.category == "top" and g.style == "tucked in" else Z_ORDER[g.category], i)

    out = []
    for i in range(len(scene.garments)):
        above = [j for j in range(len(scene.garments)) if z(j) > z(i)]
        m = cover[i].copy()
        for j in above:
            m &= ~cover[j]
        out.append(m)
    return out


def iou(a, b):
    union = (a | b).sum()
    return 1.0 if union == 0 else float((a & b).sum() / union)
