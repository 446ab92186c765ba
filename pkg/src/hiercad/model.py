"""Canonical sketch-and-extrude data model and its flat token grammar.

A CadModel is an ordered list of extrude steps; each step sweeps a
profile (outer loop + optional inner loops) along its sketch-plane
normal and combines the result with the running solid via a boolean
operation. All numerics are 6-bit bin indices; tokenization maps a model
to a flat integer stream consumed and produced by the generators.

Token vocabulary:
    0..4095      XY pair tokens, id = 64*x + y
    4096..4159   scalar tokens (bin 0..63): plane origin/angles/scale, distance
    4160         SEP_CURVE   4161 END_LOOP   4162 END_PROFILE   4163 END_STEP
    4164..4166   boolean op (union, cut, intersect)
    4167         EOS         4168 PAD

Grammar:
    Model := Step+ EOS
    Step  := Loop+ END_PROFILE Ext END_STEP
    Loop  := Curve (SEP_CURVE Curve)* END_LOOP
    Curve := XY{2|3|4}
    Ext   := scalar x8 (ox oy oz theta phi gamma s d) boolop
"""

import hashlib
import struct
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import curves
from .curves import BINS, dequantize_coord, dequantize_point, quantize_coord
from .errors import CapError, ParseError, ValidationError

# vocabulary layout
XY_BASE = 0
N_XY = BINS * BINS
SCALAR_BASE = N_XY              # 4096
SEP_CURVE = SCALAR_BASE + BINS  # 4160
END_LOOP = SEP_CURVE + 1        # 4161
END_PROFILE = END_LOOP + 1      # 4162
END_STEP = END_PROFILE + 1      # 4163
BOOL_BASE = END_STEP + 1        # 4164
EOS = BOOL_BASE + 3             # 4167
PAD = EOS + 1                   # 4168
VOCAB_SIZE = PAD + 1            # 4169

# dataset-filter caps
MAX_STEPS = 5
MAX_LOOPS_PER_PROFILE = 20
MAX_CURVES_PER_LOOP = 60
MAX_TOKENS = 200

SAMPLES_PER_CURVE = 32


class CurveKind(Enum):
    LINE = 2
    ARC = 3
    CIRCLE = 4


class BoolOp(Enum):
    UNION = 0
    CUT = 1
    INTERSECT = 2


def _check_bin(q, what):
    if not isinstance(q, int) or not 0 <= q <= BINS - 1:
        raise ValidationError(f"{what} bin {q!r} outside [0, {BINS - 1}]", code="bin_range")


@dataclass(frozen=True)
class Curve:
    """A quantized curve; arity determines the kind (2 line, 3 arc, 4 circle)."""

    points: tuple  # of (x, y) bin pairs

    def __post_init__(self):
        object.__setattr__(self, "points", tuple(tuple(p) for p in self.points))
        if len(self.points) not in (2, 3, 4):
            raise ValidationError(
                f"invalid curve arity {len(self.points)}", code="curve_arity"
            )
        for x, y in self.points:
            _check_bin(x, "curve x")
            _check_bin(y, "curve y")

    @property
    def kind(self):
        return CurveKind(len(self.points))

    def reversed(self):
        return Curve(tuple(reversed(self.points)))

    @property
    def start(self):
        return self.points[0]

    @property
    def end(self):
        return self.points[-1]


@dataclass(frozen=True)
class Loop:
    """A closed path of connected curves, or a lone circle."""

    curves: tuple  # of Curve

    def __post_init__(self):
        object.__setattr__(self, "curves", tuple(self.curves))
        if not self.curves:
            raise ValidationError("empty loop", code="empty_loop")
        if any(c.kind is CurveKind.CIRCLE for c in self.curves):
            if len(self.curves) != 1:
                raise ValidationError(
                    "circle must be the sole curve of its loop", code="circle_not_alone"
                )
        else:
            n = len(self.curves)
            for i in range(n):
                if self.curves[i].end != self.curves[(i + 1) % n].start:
                    raise ValidationError(
                        f"loop not closed between curve {i} and {(i + 1) % n}",
                        code="open_loop",
                    )

    @property
    def is_circle(self):
        return self.curves[0].kind is CurveKind.CIRCLE

    def polyline(self, samples_per_curve=SAMPLES_PER_CURVE):
        """Closed dequantized polyline through all curves (first == last)."""
        pts = []
        for c in self.curves:
            seg = curves.sample_curve(c.points, samples_per_curve)
            if pts:
                seg = seg[1:]
            pts.extend(seg)
        if pts[0] != pts[-1]:
            pts.append(pts[0])
        return pts

    def bbox(self, samples_per_curve=SAMPLES_PER_CURVE):
        """(min_u, min_v, max_u, max_v) of the discretized loop."""
        poly = np.asarray(self.polyline(samples_per_curve))
        return (
            float(poly[:, 0].min()),
            float(poly[:, 1].min()),
            float(poly[:, 0].max()),
            float(poly[:, 1].max()),
        )


@dataclass(frozen=True)
class SketchPlane:
    """Quantized plane placement: origin bins, intrinsic Z-Y-X angle bins, scale bin."""

    origin: tuple = (0, 0, 0)
    angles: tuple = (0, 0, 0)
    scale: int = 63

    def __post_init__(self):
        object.__setattr__(self, "origin", tuple(self.origin))
        object.__setattr__(self, "angles", tuple(self.angles))
        for q in self.origin:
            _check_bin(q, "plane origin")
        for q in self.angles:
            _check_bin(q, "plane angle")
        _check_bin(self.scale, "plane scale")

    def world_origin(self):
        return tuple(dequantize_coord(q) for q in self.origin)

    def world_angles(self):
        # bin 0 maps to exactly 0 so axis-aligned planes stay axis-aligned
        return tuple(q * 2.0 * np.pi / BINS for q in self.angles)

    def world_scale(self):
        # strictly positive by construction
        return (self.scale + 1) / BINS


@dataclass(frozen=True)
class ExtrudeStep:
    loops: tuple  # first = outer, rest = inner
    plane: SketchPlane = field(default_factory=SketchPlane)
    distance: int = 63
    op: BoolOp = BoolOp.UNION

    def __post_init__(self):
        object.__setattr__(self, "loops", tuple(self.loops))
        if not self.loops:
            raise ValidationError("step has no loops", code="empty_profile")
        _check_bin(self.distance, "extrude distance")
        if not isinstance(self.op, BoolOp):
            object.__setattr__(self, "op", BoolOp(self.op))


@dataclass(frozen=True)
class CadModel:
    steps: tuple  # of ExtrudeStep

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))
        if not self.steps:
            raise ValidationError("model has no steps", code="empty_model")


def check_caps(model):
    """Raise CapError naming the first violated dataset-filter cap."""
    if len(model.steps) > MAX_STEPS:
        raise CapError(
            f"{len(model.steps)} steps exceeds cap {MAX_STEPS}", code="max_steps"
        )
    for step in model.steps:
        if len(step.loops) > MAX_LOOPS_PER_PROFILE:
            raise CapError(
                f"{len(step.loops)} loops exceeds per-profile cap {MAX_LOOPS_PER_PROFILE}",
                code="max_loops_per_profile",
            )
        for loop in step.loops:
            if len(loop.curves) > MAX_CURVES_PER_LOOP:
                raise CapError(
                    f"{len(loop.curves)} curves exceeds per-loop cap {MAX_CURVES_PER_LOOP}",
                    code="max_curves_per_loop",
                )
    n = token_count(model)
    if n > MAX_TOKENS:
        raise CapError(f"{n} tokens exceeds cap {MAX_TOKENS}", code="max_tokens")


def validate_model(model, strict=False):
    """Check caps; with strict=True also require inner loops inside the outer."""
    check_caps(model)
    if strict:
        for si, step in enumerate(model.steps):
            if len(step.loops) < 2:
                continue
            outer = step.loops[0].polyline()
            for li, inner in enumerate(step.loops[1:], start=1):
                pts = np.asarray(inner.polyline())
                if not curves.points_in_polygon(pts, outer).all():
                    raise ValidationError(
                        f"inner loop {li} of step {si} not strictly inside outer loop",
                        code="inner_outside_outer",
                    )
    return model


# ---------------------------------------------------------------------------
# canonical sorting


def _loop_orientation_polygon(loop):
    """Control-point polygon used for the signed-area orientation test."""
    pts = []
    for c in loop.curves:
        pts.extend(dequantize_point(p) for p in c.points[:-1])
    return pts


def canonical_sort(model):
    """Normalize curve order/orientation within loops and loop order in profiles.

    Each non-circle loop is made counterclockwise (positive signed area)
    and rotated to start at the curve whose start point is smallest by
    (x, then y). Loops within a profile are sorted by the (x, y) of their
    bounding-box bottom-left corner. Step order is preserved.
    """
    new_steps = []
    for step in model.steps:
        new_loops = []
        for loop in step.loops:
            new_loops.append(_canonicalize_loop(loop))
        keyed = sorted(
            new_loops,
            key=lambda lp: (lp.bbox()[0], lp.bbox()[1]),
        )
        new_steps.append(
            ExtrudeStep(tuple(keyed), step.plane, step.distance, step.op)
        )
    return CadModel(tuple(new_steps))


def _canonicalize_loop(loop):
    if loop.is_circle:
        return loop
    area = curves.signed_area(_loop_orientation_polygon(loop))
    if abs(area) < 1e-12:
        raise ValidationError("degenerate loop: zero signed area", code="degenerate_loop")
    cs = list(loop.curves)
    if area < 0:
        cs = [c.reversed() for c in reversed(cs)]
    starts = [c.start for c in cs]
    first = min(range(len(cs)), key=lambda i: starts[i])
    cs = cs[first:] + cs[:first]
    return Loop(tuple(cs))


# ---------------------------------------------------------------------------
# tokenization


def xy_token(x, y):
    return XY_BASE + BINS * x + y


def token_count(model):
    """Token count of the flat encoding, without materializing it."""
    n = 1  # EOS
    for step in model.steps:
        n += 11  # END_PROFILE + 8 scalars + boolop + END_STEP
        for loop in step.loops:
            n += len(loop.curves) - 1 + 1  # SEP_CURVEs + END_LOOP
            n += sum(len(c.points) for c in loop.curves)
    return n


def tokenize_model(model):
    """Flat token encoding of a canonical-sorted, invariant-satisfying model."""
    check_caps(model)
    out = []
    for step in model.steps:
        for loop in step.loops:
            for ci, curve in enumerate(loop.curves):
                if ci:
                    out.append(SEP_CURVE)
                out.extend(xy_token(x, y) for x, y in curve.points)
            out.append(END_LOOP)
        out.append(END_PROFILE)
        p = step.plane
        for q in (*p.origin, *p.angles, p.scale, step.distance):
            out.append(SCALAR_BASE + q)
        out.append(BOOL_BASE + step.op.value)
        out.append(END_STEP)
    out.append(EOS)
    return out


def detokenize_model(tokens):
    """Validating parser from a token stream back to a CadModel.

    Enforces the grammar, the point-count -> curve-kind rule, loop
    closure and the dataset caps; every rejection is a ParseError with
    the offending token index.
    """
    i = 0
    n = len(tokens)

    def peek():
        return tokens[i] if i < n else None

    def fail(msg, code):
        raise ParseError(f"{msg} at token {i}", token_index=i, code=code)

    steps = []
    while True:
        t = peek()
        if t is None:
            fail("unexpected end", "unexpected_end")
        if t == EOS:
            if not steps:
                fail("empty model", "grammar")
            i += 1
            if i != n:
                fail("trailing tokens after EOS", "grammar")
            break
        # parse one step
        loops = []
        while True:
            t = peek()
            if t is None:
                fail("unexpected end", "unexpected_end")
            if t == END_PROFILE and loops:
                i += 1
                break
            # parse one loop
            curve_list = []
            pts = []
            while True:
                t = peek()
                if t is None:
                    fail("unexpected end", "unexpected_end")
                if XY_BASE <= t < XY_BASE + N_XY:
                    if len(pts) == 4:
                        fail("invalid curve arity", "curve_arity")
                    pts.append((t // BINS, t % BINS))
                    i += 1
                    continue
                if t in (SEP_CURVE, END_LOOP):
                    if len(pts) < 2:
                        fail("invalid curve arity", "curve_arity")
                    curve_list.append(Curve(tuple(pts)))
                    pts = []
                    i += 1
                    if t == END_LOOP:
                        break
                    continue
                fail(f"unexpected token {t} in loop", "grammar")
            try:
                loops.append(Loop(tuple(curve_list)))
            except ValidationError as e:
                raise ParseError(
                    f"{e} at token {i - 1}", token_index=i - 1, code=e.code
                ) from e
        # extrusion scalars
        scalars = []
        for _ in range(8):
            t = peek()
            if t is None:
                fail("unexpected end", "unexpected_end")
            if not SCALAR_BASE <= t < SCALAR_BASE + BINS:
                fail(f"expected scalar token, got {t}", "grammar")
            scalars.append(t - SCALAR_BASE)
            i += 1
        t = peek()
        if t is None:
            fail("unexpected end", "unexpected_end")
        if not BOOL_BASE <= t < BOOL_BASE + 3:
            fail(f"expected boolean-op token, got {t}", "grammar")
        op = BoolOp(t - BOOL_BASE)
        i += 1
        t = peek()
        if t is None:
            fail("unexpected end", "unexpected_end")
        if t != END_STEP:
            fail(f"expected END_STEP, got {t}", "grammar")
        i += 1
        plane = SketchPlane(tuple(scalars[0:3]), tuple(scalars[3:6]), scalars[6])
        steps.append(ExtrudeStep(tuple(loops), plane, scalars[7], op))

    model = CadModel(tuple(steps))
    try:
        check_caps(model)
    except CapError as e:
        raise ParseError(str(e), token_index=n - 1, code=e.code) from e
    return model


def hash_model(tokens):
    """Deterministic 64-bit digest of a token list (dedup / Novel / Unique)."""
    payload = struct.pack(f"<{len(tokens)}H", *tokens)
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


# ---------------------------------------------------------------------------
# JSON model format


def model_to_json(model):
    return {
        "steps": [
            {
                "loops": [
                    {"curves": [{"pts": [list(p) for p in c.points]} for c in lp.curves]}
                    for lp in step.loops
                ],
                "plane": {
                    "o": list(step.plane.origin),
                    "a": list(step.plane.angles),
                    "s": step.plane.scale,
                },
                "d": step.distance,
                "op": step.op.name.lower(),
            }
            for step in model.steps
        ]
    }


def model_from_json(doc):
    steps = []
    for sd in doc["steps"]:
        loops = tuple(
            Loop(tuple(Curve(tuple(tuple(p) for p in cd["pts"])) for cd in ld["curves"]))
            for ld in sd["loops"]
        )
        plane = SketchPlane(tuple(sd["plane"]["o"]), tuple(sd["plane"]["a"]), sd["plane"]["s"])
        steps.append(ExtrudeStep(loops, plane, sd["d"], BoolOp[sd["op"].upper()]))
    return CadModel(tuple(steps))
