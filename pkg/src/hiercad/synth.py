"""Synthetic model generator for tests, demos and the desk-scale corpus.

Produces canonical-sorted, strictly valid CadModels from a seeded
numpy Generator: rectangles, semidiscs, circles, and rectangles with an
inner circular hole, extruded on randomized axis-aligned-ish planes.
"""

import numpy as np

from .model import (
    BoolOp,
    CadModel,
    Curve,
    ExtrudeStep,
    Loop,
    SketchPlane,
    canonical_sort,
    validate_model,
)


def rect_loop(x0, y0, x1, y1):
    """CCW rectangle with corner bins (x0,y0)-(x1,y1)."""
    return Loop(
        (
            Curve(((x0, y0), (x1, y0))),
            Curve(((x1, y0), (x1, y1))),
            Curve(((x1, y1), (x0, y1))),
            Curve(((x0, y1), (x0, y0))),
        )
    )


def circle_loop(cx, cy, r):
    """Circle via four equally spaced point bins."""
    return Loop((Curve(((cx + r, cy), (cx, cy + r), (cx - r, cy), (cx, cy - r))),))


def semidisc_loop(x0, x1, y):
    """Flat base from (x0,y) to (x1,y) closed by an upper semicircular arc."""
    mid = (x0 + x1) // 2
    r = (x1 - x0) // 2
    return Loop(
        (
            Curve(((x0, y), (x1, y))),
            Curve(((x1, y), (mid, y + r), (x0, y))),
        )
    )


def random_loop(rng, region=(0, 63)):
    lo, hi = region
    span = hi - lo
    kind = rng.integers(0, 3)
    if kind == 0:
        x0 = int(rng.integers(lo, hi - 4))
        y0 = int(rng.integers(lo, hi - 4))
        x1 = int(rng.integers(x0 + 3, min(hi, x0 + span) + 1))
        y1 = int(rng.integers(y0 + 3, min(hi, y0 + span) + 1))
        return rect_loop(x0, y0, x1, y1)
    if kind == 1:
        r = int(rng.integers(3, max(4, span // 4)))
        cx = int(rng.integers(lo + r, hi - r + 1))
        cy = int(rng.integers(lo + r, hi - r + 1))
        return circle_loop(cx, cy, r)
    r = int(rng.integers(3, max(4, span // 4)))
    x0 = int(rng.integers(lo, hi - 2 * r))
    y = int(rng.integers(lo, hi - r))
    return semidisc_loop(x0, x0 + 2 * r, y)


def random_profile(rng):
    """Single random loop, or a rectangle with an inner circular hole."""
    if rng.random() < 0.25:
        x0 = int(rng.integers(0, 20))
        y0 = int(rng.integers(0, 20))
        x1 = int(rng.integers(x0 + 16, 64))
        y1 = int(rng.integers(y0 + 16, 64))
        r = int(rng.integers(2, min(x1 - x0, y1 - y0) // 2 - 3))
        cx = (x0 + x1) // 2
        cy = (y0 + y1) // 2
        return (rect_loop(x0, y0, x1, y1), circle_loop(cx, cy, r))
    return (random_loop(rng),)


def random_plane(rng):
    # identity rotation keeps the swept profile inside the unit cube
    origin = tuple(int(v) for v in rng.integers(0, 24, size=3))
    scale = int(rng.integers(24, 64))
    return SketchPlane(origin, (0, 0, 0), scale)


def random_model(rng, max_steps=3):
    """A canonical-sorted, strictly valid random CadModel."""
    while True:
        n_steps = int(rng.integers(1, max_steps + 1))
        steps = []
        for si in range(n_steps):
            op = BoolOp.UNION if si == 0 else BoolOp(int(rng.integers(0, 3)))
            steps.append(
                ExtrudeStep(
                    random_profile(rng),
                    random_plane(rng),
                    int(rng.integers(8, 64)),
                    op,
                )
            )
        try:
            return validate_model(canonical_sort(CadModel(tuple(steps))), strict=True)
        except Exception:
            continue


def random_corpus(seed, n, max_steps=3):
    rng = np.random.default_rng(seed)
    return [random_model(rng, max_steps=max_steps) for _ in range(n)]
