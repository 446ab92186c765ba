"""Geometry execution: discretization, rasterization, voxel CSG, meshing.

Models are executed into an occupancy grid over the unit cube: each
extrude step rasterizes its profile with the even-odd rule, sweeps the
filled cells along the plane normal, and the per-step voxel sets are
combined left-to-right (union = OR, cut = AND-NOT, intersect = AND).
Meshes are viewer-grade only: walls and caps per step, no boolean merge.
"""

import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import curves
from .errors import ValidationError
from .model import SAMPLES_PER_CURVE, BoolOp

VOXEL_MAGIC = b"HNCV"
ALLOWED_RESOLUTIONS = (32, 64)


@dataclass
class VoxelGrid:
    resolution: int
    bits: np.ndarray  # (R, R, R) bool
    skipped_steps: list = field(default_factory=list)

    def __post_init__(self):
        if self.resolution not in ALLOWED_RESOLUTIONS:
            raise ValidationError(
                f"voxel resolution {self.resolution} not in {ALLOWED_RESOLUTIONS}",
                code="voxel_resolution",
            )
        self.bits = np.asarray(self.bits, dtype=bool)
        assert self.bits.shape == (self.resolution,) * 3


@dataclass
class TriangleMesh:
    vertices: np.ndarray   # (N, 3) float
    triangles: np.ndarray  # (M, 3) int
    tri_step: np.ndarray   # (M,) step index per triangle
    step_ops: list = field(default_factory=list)  # BoolOp per step (cut flag for viewers)


def discretize_loop(loop, samples_per_curve=SAMPLES_PER_CURVE):
    """Closed polyline of the loop in sketch coordinates (first == last)."""
    return np.asarray(loop.polyline(samples_per_curve), dtype=np.float64)


def plane_frame(plane):
    """(origin, rotation, scale) of a sketch plane in world coordinates.

    Rotation is intrinsic Z-Y-X by the dequantized angle bins; sketch
    points map as origin + R @ (s*u, s*v, t) with t the extrusion depth.
    """
    theta, phi, gamma = plane.world_angles()
    cz, sz = np.cos(theta), np.sin(theta)
    cy, sy = np.cos(phi), np.sin(phi)
    cx, sx = np.cos(gamma), np.sin(gamma)
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    return np.asarray(plane.world_origin()), rz @ ry @ rx, plane.world_scale()


def sketch_to_world(uv, plane, t=0.0):
    """Map (n,2) sketch points at extrusion depth t to (n,3) world points."""
    origin, rot, scale = plane_frame(plane)
    uv = np.asarray(uv, dtype=np.float64)
    local = np.column_stack([scale * uv[:, 0], scale * uv[:, 1], np.full(len(uv), t)])
    return origin + local @ rot.T


def step_world_bbox(step, samples_per_curve=SAMPLES_PER_CURVE):
    """World-space AABB of the extruded profile of one step."""
    pts2d = np.vstack([discretize_loop(lp, samples_per_curve) for lp in step.loops])
    d = curves.dequantize_coord(step.distance)
    world = np.vstack([sketch_to_world(pts2d, step.plane, 0.0),
                       sketch_to_world(pts2d, step.plane, d)])
    return world.min(axis=0), world.max(axis=0)


def rasterize_profile(polylines, resolution):
    """Even-odd fill of a profile over the sketch unit square.

    ``polylines`` are closed loops (outer first); inner loops flip parity
    and so create holes. Returns an (R, R) boolean mask indexed [i, j]
    for cell centers ((i+0.5)/R, (j+0.5)/R).
    """
    r = resolution
    centers = (np.arange(r) + 0.5) / r
    uu, vv = np.meshgrid(centers, centers, indexing="ij")
    pts = np.column_stack([uu.ravel(), vv.ravel()])
    mask = np.zeros(len(pts), dtype=bool)
    for poly in polylines:
        mask ^= curves.points_in_polygon(pts, poly)
    return mask.reshape(r, r)


def _step_voxels(step, resolution, samples_per_curve=SAMPLES_PER_CURVE):
    raster_res = 2 * resolution
    polys = [discretize_loop(lp, samples_per_curve) for lp in step.loops]
    mask = rasterize_profile(polys, raster_res)
    ii, jj = np.nonzero(mask)
    if len(ii) == 0:
        return np.zeros((resolution,) * 3, dtype=bool)
    uv = np.column_stack([(ii + 0.5) / raster_res, (jj + 0.5) / raster_res])
    d = curves.dequantize_coord(step.distance)
    n_t = max(2, int(np.ceil(d * 2 * resolution)) + 1)
    grid = np.zeros((resolution,) * 3, dtype=bool)
    origin, rot, scale = plane_frame(step.plane)
    local = np.column_stack([scale * uv[:, 0], scale * uv[:, 1], np.zeros(len(uv))])
    normal = rot[:, 2]
    base = origin + local @ rot.T
    for t in np.linspace(0.0, d, n_t):
        world = base + t * normal
        idx = np.floor(world * resolution).astype(int)
        ok = np.all((idx >= 0) & (idx < resolution), axis=1)
        idx = idx[ok]
        grid[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    return grid


def execute_model(model, resolution=64, samples_per_curve=SAMPLES_PER_CURVE):
    """Voxel CSG over the unit cube; steps combine left-to-right."""
    acc = np.zeros((resolution,) * 3, dtype=bool)
    skipped = []
    for si, step in enumerate(model.steps):
        g = _step_voxels(step, resolution, samples_per_curve)
        if not g.any():
            warnings.warn(f"step {si} produced no voxels; skipped")
            skipped.append(si)
            continue
        if step.op is BoolOp.UNION:
            acc |= g
        elif step.op is BoolOp.CUT:
            acc &= ~g
        else:
            acc &= g
    return VoxelGrid(resolution, acc, skipped)


def mesh_model(model, samples_per_curve=SAMPLES_PER_CURVE, cap_resolution=32):
    """Viewer-grade triangle mesh: swept side walls plus rasterized caps.

    Steps are concatenated without boolean merging; cut steps are tagged
    through ``step_ops`` so viewers can render them translucent.
    """
    verts, tris, tri_step = [], [], []
    step_ops = []

    def emit(a, b, c, si):
        base = len(verts)
        verts.extend([a, b, c])
        tris.append((base, base + 1, base + 2))
        tri_step.append(si)

    for si, step in enumerate(model.steps):
        step_ops.append(step.op)
        d = curves.dequantize_coord(step.distance)
        polys = [discretize_loop(lp, samples_per_curve) for lp in step.loops]
        for poly in polys:
            lo = sketch_to_world(poly, step.plane, 0.0)
            hi = sketch_to_world(poly, step.plane, d)
            for i in range(len(poly) - 1):
                a, b = lo[i], lo[i + 1]
                c, e = hi[i], hi[i + 1]
                if np.allclose(a, b):
                    continue  # zero-length segment would make degenerate walls
                emit(a, b, e, si)
                emit(a, e, c, si)
        mask = rasterize_profile(polys, cap_resolution)
        ii, jj = np.nonzero(mask)
        h = 1.0 / cap_resolution
        for i, j in zip(ii, jj):
            corners = np.array(
                [[i * h, j * h], [(i + 1) * h, j * h], [(i + 1) * h, (j + 1) * h], [i * h, (j + 1) * h]]
            )
            for t in (0.0, d):
                q = sketch_to_world(corners, step.plane, t)
                emit(q[0], q[1], q[2], si)
                emit(q[0], q[2], q[3], si)
    if not verts:
        return TriangleMesh(
            np.zeros((0, 3)), np.zeros((0, 3), dtype=int), np.zeros(0, dtype=int), step_ops
        )
    return TriangleMesh(
        np.asarray(verts), np.asarray(tris, dtype=int), np.asarray(tri_step, dtype=int), step_ops
    )


# ---------------------------------------------------------------------------
# surface sampling


def boundary_faces(grid):
    """Exposed faces of the occupied set: (voxel ijk, axis, direction) rows."""
    bits = grid.bits
    faces = []
    for axis in range(3):
        for direction in (-1, 1):
            shifted = np.zeros_like(bits)
            src = [slice(None)] * 3
            dst = [slice(None)] * 3
            if direction == 1:
                src[axis] = slice(1, None)
                dst[axis] = slice(0, -1)
            else:
                src[axis] = slice(0, -1)
                dst[axis] = slice(1, None)
            shifted[tuple(dst)] = bits[tuple(src)]
            exposed = bits & ~shifted
            ijk = np.argwhere(exposed)
            if len(ijk):
                cols = np.column_stack(
                    [ijk, np.full(len(ijk), axis), np.full(len(ijk), direction)]
                )
                faces.append(cols)
    if not faces:
        return np.zeros((0, 5), dtype=int)
    return np.vstack(faces)


def sample_surface(grid, n_points, rng):
    """Uniform points over exposed voxel faces; seeded-deterministic."""
    if not grid.bits.any():
        raise ValidationError("cannot sample an empty voxel grid", code="empty_grid")
    if n_points == 0:
        return np.zeros((0, 3))
    faces = boundary_faces(grid)
    h = 1.0 / grid.resolution
    pick = rng.integers(0, len(faces), size=n_points)
    chosen = faces[pick]
    offsets = rng.random((n_points, 2))
    pts = np.empty((n_points, 3))
    for k, (i, j, l, axis, direction) in enumerate(chosen):
        base = np.array([i, j, l], dtype=float) * h
        face_coord = base[axis] + (h if direction == 1 else 0.0)
        others = [a for a in range(3) if a != axis]
        p = base.copy()
        p[axis] = face_coord
        p[others[0]] += offsets[k, 0] * h
        p[others[1]] += offsets[k, 1] * h
        pts[k] = p
    return pts


# ---------------------------------------------------------------------------
# exports


def mesh_to_obj(mesh):
    lines = []
    for v in mesh.vertices:
        lines.append(f"v {v[0]:.6f} {v[1]:.6f} {v[2]:.6f}")
    last_step = None
    for tri, si in zip(mesh.triangles, mesh.tri_step):
        if si != last_step:
            op = mesh.step_ops[si].name.lower() if si < len(mesh.step_ops) else "union"
            lines.append(f"g step{si}_{op}")
            last_step = si
        lines.append(f"f {tri[0] + 1} {tri[1] + 1} {tri[2] + 1}")
    return "\n".join(lines) + "\n"


def pointcloud_to_xyz(points):
    return "\n".join(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f}" for p in points) + "\n"


def voxelgrid_to_bytes(grid):
    header = VOXEL_MAGIC + struct.pack("<I", grid.resolution)
    header = header.ljust(16, b"\0")
    return header + np.packbits(grid.bits.reshape(-1)).tobytes()


def voxelgrid_from_bytes(data):
    if data[:4] != VOXEL_MAGIC:
        raise ValidationError("bad voxel magic", code="voxel_magic")
    (r,) = struct.unpack("<I", data[4:8])
    bits = np.unpackbits(np.frombuffer(data[16:], dtype=np.uint8))[: r**3]
    return VoxelGrid(r, bits.reshape(r, r, r).astype(bool))
