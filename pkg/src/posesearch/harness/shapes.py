"""Procedural furniture-like and aircraft-like meshes built from boxes and prisms."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..geometry import TriMesh

CATEGORIES = ("box-furniture", "tables", "chairs-like", "winged")

# (a, b, c) corner-index triangles of a unit cube, outward winding
_BOX_FACES = np.array(
    [
        [0, 2, 1], [0, 3, 2],  # -z
        [4, 5, 6], [4, 6, 7],  # +z
        [0, 1, 5], [0, 5, 4],  # -y
        [3, 7, 6], [3, 6, 2],  # +y
        [0, 4, 7], [0, 7, 3],  # -x
        [1, 2, 6], [1, 6, 5],  # +x
    ]
)  # fmt: skip


def box(center, size) -> TriMesh:
    cx, cy, cz = center
    sx, sy, sz = (0.5 * s for s in size)
    corners = np.array(
        [
            [-sx, -sy, -sz], [sx, -sy, -sz], [sx, sy, -sz], [-sx, sy, -sz],
            [-sx, -sy, sz], [sx, -sy, sz], [sx, sy, sz], [-sx, sy, sz],
        ]
    )  # fmt: skip
    return TriMesh(corners + np.array([cx, cy, cz]), _BOX_FACES)


def prism(center, radius: float, length: float, axis: int = 2, sides: int = 12) -> TriMesh:
    """Closed n-gon prism along ``axis``."""
    ang = np.linspace(0.0, 2 * math.pi, sides, endpoint=False)
    ring = np.stack([radius * np.cos(ang), radius * np.sin(ang)], axis=1)
    verts = []
    for h in (-0.5 * length, 0.5 * length):
        for a, b in ring:
            p = [a, b]
            p.insert(axis, h)
            verts.append(p)
    verts.append([0.0, 0.0, 0.0])
    verts.append([0.0, 0.0, 0.0])
    verts[-2][axis] = -0.5 * length
    verts[-1][axis] = 0.5 * length
    faces = []
    for i in range(sides):
        j = (i + 1) % sides
        faces += [[i, j, sides + j], [i, sides + j, sides + i]]
        faces += [[2 * sides, j, i], [2 * sides + 1, sides + i, sides + j]]
    return TriMesh(np.array(verts) + np.asarray(center, float), np.array(faces))


@dataclass(frozen=True)
class Recipe:
    category: str
    seed: int


def _u(rng, lo, hi) -> float:
    return float(rng.uniform(lo, hi))


def _legs(rng, w, d, h, t, inset) -> list[TriMesh]:
    xs = (-0.5 * w + inset + 0.5 * t, 0.5 * w - inset - 0.5 * t)
    zs = (-0.5 * d + inset + 0.5 * t, 0.5 * d - inset - 0.5 * t)
    return [box((x, 0.5 * h, z), (t, h, t)) for x in xs for z in zs]


def _box_furniture(rng) -> list[TriMesh]:
    w, h, d = _u(rng, 0.6, 1.4), _u(rng, 0.8, 1.8), _u(rng, 0.35, 0.7)
    plinth = _u(rng, 0.04, 0.15)
    parts = [box((0, plinth + 0.5 * h, 0), (w, h, d)), box((0, 0.5 * plinth, 0), (0.9 * w, plinth, 0.9 * d))]
    top = _u(rng, 0.0, 0.08)
    if top > 0.02:
        parts.append(box((0, plinth + h + 0.5 * top, 0), (w + 0.1, top, d + 0.06)))
    n_draw = int(rng.integers(1, 4))
    for i in range(n_draw):
        y = plinth + h * (i + 0.5) / n_draw
        parts.append(box((0, y, 0.5 * d + 0.02), (0.25 * w, 0.04, 0.04)))
    return parts


def _table(rng) -> list[TriMesh]:
    w, d, h = _u(rng, 1.0, 2.0), _u(rng, 0.5, 1.1), _u(rng, 0.55, 0.95)
    top_t, leg_t = _u(rng, 0.03, 0.09), _u(rng, 0.04, 0.12)
    inset = _u(rng, 0.0, 0.2)
    parts = [box((0, h + 0.5 * top_t, 0), (w, top_t, d))] + _legs(rng, w, d, h, leg_t, inset)
    if rng.random() < 0.5:
        parts.append(box((0, _u(rng, 0.1, 0.3) * h, 0), (w - 2 * inset, 0.03, d - 2 * inset)))
    return parts


def _chair(rng) -> list[TriMesh]:
    w, d, h = _u(rng, 0.4, 0.7), _u(rng, 0.4, 0.7), _u(rng, 0.35, 0.55)
    seat_t, leg_t = _u(rng, 0.04, 0.1), _u(rng, 0.03, 0.07)
    back_h, back_t = _u(rng, 0.35, 0.8), _u(rng, 0.03, 0.08)
    parts = [box((0, h + 0.5 * seat_t, 0), (w, seat_t, d))] + _legs(rng, w, d, h, leg_t, 0.0)
    parts.append(box((0, h + seat_t + 0.5 * back_h, -0.5 * d + 0.5 * back_t), (w, back_h, back_t)))
    if rng.random() < 0.5:
        arm_h = _u(rng, 0.15, 0.3)
        for x in (-0.5 * w, 0.5 * w):
            parts.append(box((x, h + seat_t + arm_h, 0), (0.05, 0.05, d)))
            parts.append(box((x, h + seat_t + 0.5 * arm_h, 0.5 * d - 0.03), (0.04, arm_h, 0.04)))
    return parts


def _winged(rng) -> list[TriMesh]:
    length, radius = _u(rng, 1.4, 2.2), _u(rng, 0.08, 0.16)
    span, chord = _u(rng, 1.2, 2.2), _u(rng, 0.2, 0.45)
    wing_z = _u(rng, -0.15, 0.15) * length
    tail_span = _u(rng, 0.35, 0.7) * span * 0.6
    fin_h = _u(rng, 0.2, 0.45)
    tail_z = -0.5 * length + 0.12
    return [
        prism((0, 0, 0), radius, length, axis=2),
        box((0, 0, length * 0.5 + 0.05), (radius, radius, 0.1)),
        box((0, 0, wing_z), (span, 0.03, chord)),
        box((0, 0, tail_z), (tail_span, 0.025, 0.5 * chord)),
        box((0, 0.5 * fin_h + radius * 0.5, tail_z), (0.025, fin_h, 0.5 * chord)),
    ]


_BUILDERS = {
    "box-furniture": _box_furniture,
    "tables": _table,
    "chairs-like": _chair,
    "winged": _winged,
}


def make_mesh(recipe: Recipe) -> TriMesh:
    try:
        builder = _BUILDERS[recipe.category]
    except KeyError:
        raise ValueError(f"unknown category {recipe.category!r}") from None
    rng = np.random.default_rng(recipe.seed)
    return TriMesh.concat(builder(rng))


def generate_shapes(seed: int, categories=CATEGORIES, per_category: int = 5) -> list[tuple[str, Recipe, TriMesh]]:
    """``(shape_id, recipe, mesh)`` for every instance; ids are ``<category>-<i>``."""
    if per_category < 1:
        raise ValueError("per_category must be >= 1")
    seeds = np.random.default_rng(seed).integers(0, 2**31, size=(len(categories), per_category))
    out = []
    for ci, cat in enumerate(categories):
        for i in range(per_category):
            recipe = Recipe(cat, int(seeds[ci, i]))
            out.append((f"{cat}-{i:02d}", recipe, make_mesh(recipe)))
    return out
