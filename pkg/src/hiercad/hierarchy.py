"""Three-level property extraction, dataset filtering/dedup and augmentation.

Loop properties are coordinate sequences with separators, profile
properties are 2D loop bounding boxes, solid properties are 3D boxes of
the extruded profiles. All boxes live in 6-bit bin units.
"""

from dataclasses import dataclass, field

import numpy as np

from . import geometry
from .curves import quantize_coord
from .errors import CapError
from .model import (
    MAX_LOOPS_PER_PROFILE,
    MAX_STEPS,
    CadModel,
    Curve,
    ExtrudeStep,
    Loop,
    canonical_sort,
    check_caps,
    hash_model,
    tokenize_model,
    validate_model,
)

SEP = "SEP"

MAX_LOOP_ITEMS = 4 * 60 + 59  # 60 four-point curves with separators


@dataclass(frozen=True)
class LoopProperty:
    """Ordered (x, y) bin pairs with SEP markers between curves."""

    tokens: tuple  # of (x, y) or SEP

    def __post_init__(self):
        toks = tuple(t if t == SEP else tuple(t) for t in self.tokens)
        object.__setattr__(self, "tokens", toks)
        assert toks, "empty loop property"
        assert len(toks) <= MAX_LOOP_ITEMS
        assert toks[0] != SEP and toks[-1] != SEP
        assert all(not (a == SEP and b == SEP) for a, b in zip(toks, toks[1:]))


@dataclass(frozen=True)
class ProfileProperty:
    """Sorted (x, y, w, h) loop bounding boxes within the sketch plane."""

    boxes: tuple

    def __post_init__(self):
        boxes = tuple(tuple(b) for b in self.boxes)
        object.__setattr__(self, "boxes", boxes)
        assert 1 <= len(boxes) <= MAX_LOOPS_PER_PROFILE
        assert all(b[2] >= 0 and b[3] >= 0 for b in boxes)
        assert list(boxes) == sorted(boxes, key=lambda b: (b[0], b[1]))


@dataclass(frozen=True)
class SolidProperty:
    """Sorted (x, y, z, w, h, d) boxes of the model's extruded profiles."""

    boxes: tuple

    def __post_init__(self):
        boxes = tuple(tuple(b) for b in self.boxes)
        object.__setattr__(self, "boxes", boxes)
        assert 1 <= len(boxes) <= MAX_STEPS
        assert all(min(b[3:]) >= 0 for b in boxes)
        assert list(boxes) == sorted(boxes, key=lambda b: (b[0], b[1], b[2]))


@dataclass(frozen=True)
class CodeTreeSkeleton:
    """Slot counts per level: one solid slot, per step a profile slot + loop slots."""

    loops_per_step: tuple  # loop-slot count for each step, in step order

    def flatten(self):
        """DFS slot pattern, e.g. [S, SEP, P, L, L, SEP, P, L, L, L, L]."""
        out = ["S"]
        for n in self.loops_per_step:
            out.append(SEP)
            out.append("P")
            out.extend(["L"] * n)
        return out


def build_skeleton(model):
    return CodeTreeSkeleton(tuple(len(step.loops) for step in model.steps))


# ---------------------------------------------------------------------------
# extraction


def extract_loop_property(loop):
    """Concatenate curve point lists with SEP between consecutive curves."""
    toks = []
    for ci, curve in enumerate(loop.curves):
        if ci:
            toks.append(SEP)
        toks.extend(curve.points)
    return LoopProperty(tuple(toks))


def loop_bbox_bins(loop):
    """Tight bin-space box (x, y, w, h) of the discretized loop."""
    u0, v0, u1, v1 = loop.bbox()
    x0, y0 = quantize_coord(u0), quantize_coord(v0)
    return (x0, y0, quantize_coord(u1) - x0, quantize_coord(v1) - y0)


def extract_profile_property(loops):
    if len(loops) > MAX_LOOPS_PER_PROFILE:
        raise CapError(
            f"{len(loops)} loops exceeds per-profile cap {MAX_LOOPS_PER_PROFILE}",
            code="max_loops_per_profile",
        )
    boxes = sorted((loop_bbox_bins(lp) for lp in loops), key=lambda b: (b[0], b[1]))
    return ProfileProperty(tuple(boxes))


def extract_solid_property(model):
    if len(model.steps) > MAX_STEPS:
        raise CapError(f"{len(model.steps)} steps exceeds cap {MAX_STEPS}", code="max_steps")
    boxes = []
    for step in model.steps:
        lo, hi = geometry.step_world_bbox(step)
        q0 = [quantize_coord(min(max(v, 0.0), 1.0)) for v in lo]
        q1 = [quantize_coord(min(max(v, 0.0), 1.0)) for v in hi]
        boxes.append((q0[0], q0[1], q0[2], q1[0] - q0[0], q1[1] - q0[1], q1[2] - q0[2]))
    boxes.sort(key=lambda b: (b[0], b[1], b[2]))
    return SolidProperty(tuple(boxes))


# ---------------------------------------------------------------------------
# dataset build


@dataclass
class PropertyDataset:
    loops: list = field(default_factory=list)
    profiles: list = field(default_factory=list)
    solids: list = field(default_factory=list)
    models: list = field(default_factory=list)        # retained CadModels
    model_refs: list = field(default_factory=list)    # per model: (solid_idx, [(prof_idx, [loop_idx..])..])
    excluded: list = field(default_factory=list)      # (input_index, reason code)

    @property
    def counts(self):
        return {
            "solids": len(self.solids),
            "profiles": len(self.profiles),
            "loops": len(self.loops),
            "models": len(self.models),
        }


def build_dataset(models):
    """Dedup models, filter caps, extract and dedup properties per level.

    Filter order follows the pipeline convention: duplicate models first,
    then cap filtering, then per-level exact property dedup.
    """
    ds = PropertyDataset()
    seen_models = set()
    loop_index, prof_index, solid_index = {}, {}, {}

    def intern(index, store, item):
        key = item
        if key not in index:
            index[key] = len(store)
            store.append(item)
        return index[key]

    for mi, model in enumerate(models):
        model = canonical_sort(model)
        try:
            check_caps(model)
        except CapError as e:
            ds.excluded.append((mi, e.code))
            continue
        h = hash_model(tokenize_model(model))
        if h in seen_models:
            ds.excluded.append((mi, "duplicate_model"))
            continue
        seen_models.add(h)

        solid = extract_solid_property(model)
        si = intern(solid_index, ds.solids, solid)
        prof_refs = []
        for step in model.steps:
            prof = extract_profile_property(step.loops)
            pi = intern(prof_index, ds.profiles, prof)
            loop_refs = [
                intern(loop_index, ds.loops, extract_loop_property(lp))
                for lp in step.loops
            ]
            prof_refs.append((pi, loop_refs))
        ds.models.append(model)
        ds.model_refs.append((si, prof_refs))
    return ds


def dataset_manifest(ds):
    """JSON-lines records, one per retained property."""
    records = []
    for level, items in (("loop", ds.loops), ("profile", ds.profiles), ("solid", ds.solids)):
        owners = {}
        for mid, (si, prof_refs) in enumerate(ds.model_refs):
            if level == "solid":
                owners.setdefault(si, mid)
            else:
                for pi, loop_refs in prof_refs:
                    if level == "profile":
                        owners.setdefault(pi, mid)
                    else:
                        for li in loop_refs:
                            owners.setdefault(li, mid)
        for idx, item in enumerate(items):
            toks = (
                [list(t) if t != SEP else SEP for t in item.tokens]
                if level == "loop"
                else [list(b) for b in item.boxes]
            )
            records.append({"level": level, "tokens": toks, "source_model_id": owners.get(idx)})
    return records


def dataset_card(ds, filters=None):
    return {
        "counts": ds.counts,
        "excluded": [{"index": i, "reason": r} for i, r in ds.excluded],
        "filters": filters
        or {
            "max_steps": MAX_STEPS,
            "max_loops_per_profile": MAX_LOOPS_PER_PROFILE,
            "max_curves_per_loop": 60,
            "max_tokens": 200,
        },
    }


# ---------------------------------------------------------------------------
# augmentation


def _noise(rng):
    # delta in {-1, 0, +1} with probabilities 0.25 / 0.5 / 0.25
    return int(rng.choice((-1, 0, 1), p=(0.25, 0.5, 0.25)))


def _shift(q, d):
    return min(63, max(0, q + d))


def augment(obj, rng):
    """Jitter coordinate bins by at most one bin; boxes and SEPs untouched.

    Model augmentation shifts each distinct loop vertex consistently so
    closure survives; models that become degenerate fall back to the
    original.
    """
    if isinstance(obj, LoopProperty):
        return LoopProperty(
            tuple(
                t if t == SEP else (_shift(t[0], _noise(rng)), _shift(t[1], _noise(rng)))
                for t in obj.tokens
            )
        )
    if isinstance(obj, (ProfileProperty, SolidProperty)):
        return obj
    if isinstance(obj, CadModel):
        steps = []
        for step in obj.steps:
            loops = []
            for loop in step.loops:
                moved = {}
                for c in loop.curves:
                    for p in c.points:
                        if p not in moved:
                            moved[p] = (_shift(p[0], _noise(rng)), _shift(p[1], _noise(rng)))
                loops.append(
                    Loop(tuple(Curve(tuple(moved[p] for p in c.points)) for c in loop.curves))
                )
            steps.append(ExtrudeStep(tuple(loops), step.plane, step.distance, step.op))
        try:
            return validate_model(canonical_sort(CadModel(tuple(steps))), strict=True)
        except Exception:
            return obj
    raise TypeError(f"cannot augment {type(obj).__name__}")
