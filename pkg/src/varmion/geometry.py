"""Triangulated 2D domains, point location and output lattices.

All meshes are built from structured (tensor-product) grids so that the
result is deterministic and needs no external mesher.  The channel with a
cylinder replaces a square block around the obstacle by an O-grid whose
inner ring lies exactly on the circle.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import binio
from .errors import InvalidArgument, InvalidConfiguration, InvalidGeometry

MESH_MAGIC = b"VMMESH\x00\x01"
MESH_VERSION = 1


class BoundaryTag(enum.IntEnum):
    LID = 0
    WALL = 1
    INLET = 2
    OUTLET = 3
    CYLINDER = 4
    SYMMETRY_AXIS = 5


ADMISSIBLE_TAGS = {
    "cavity": {BoundaryTag.LID, BoundaryTag.WALL},
    "cylinder": {BoundaryTag.INLET, BoundaryTag.OUTLET, BoundaryTag.WALL, BoundaryTag.CYLINDER},
    "contraction": {BoundaryTag.INLET, BoundaryTag.OUTLET, BoundaryTag.WALL, BoundaryTag.SYMMETRY_AXIS},
}


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Mesh:
    """Immutable P1 triangulation.

    ``boundary_edges`` holds vertex pairs oriented counter-clockwise with
    respect to the domain; ``boundary_tags`` is parallel to it.  ``holes``
    lists the exact (center, radius) disks the polygonal boundary
    approximates, so lattice filtering can exclude the true obstacle.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    boundary_tags: np.ndarray
    geometry: str = "custom"
    holes: tuple = ()
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "vertices", _frozen(self.vertices, np.float64))
        object.__setattr__(self, "triangles", _frozen(self.triangles, np.int64))
        object.__setattr__(self, "boundary_edges", _frozen(self.boundary_edges, np.int64))
        object.__setattr__(self, "boundary_tags", _frozen(self.boundary_tags, np.int64))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def signed_areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    def area(self) -> float:
        return float(self.signed_areas().sum())

    def edges(self) -> np.ndarray:
        """Unique undirected edges, sorted vertex pairs."""
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        return np.unique(np.sort(e, axis=1), axis=0)

    def bounding_box(self) -> tuple[float, float, float, float]:
        lo = self.vertices.min(axis=0)
        hi = self.vertices.max(axis=0)
        return float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1])

    def tags_present(self) -> set[BoundaryTag]:
        return {BoundaryTag(t) for t in np.unique(self.boundary_tags)}

    def boundary_nodes(self, *tags: BoundaryTag) -> np.ndarray:
        """Sorted vertex indices touched by edges carrying any of ``tags``."""
        mask = np.isin(self.boundary_tags, [int(t) for t in tags])
        return np.unique(self.boundary_edges[mask].ravel())

    def all_boundary_nodes(self) -> np.ndarray:
        return np.unique(self.boundary_edges.ravel())

    def validate(self) -> None:
        areas = self.signed_areas()
        if np.any(areas <= 0):
            raise InvalidGeometry(f"{int(np.sum(areas <= 0))} triangles with non-positive area")
        boundary = _boundary_edges(self.triangles)
        mine = {tuple(sorted(e)) for e in self.boundary_edges.tolist()}
        theirs = {tuple(sorted(e)) for e in boundary.tolist()}
        if mine != theirs or len(mine) != len(self.boundary_edges):
            raise InvalidGeometry("tagged boundary edges do not match the topological boundary")


def _boundary_edges(triangles: np.ndarray) -> np.ndarray:
    """Directed edges that belong to exactly one triangle (CCW orientation kept)."""
    t = np.asarray(triangles)
    directed = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    key = np.sort(directed, axis=1)
    _, inverse, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    return directed[counts[inverse.ravel()] == 1]


def _assemble(vertices, triangles, classify: Callable[[np.ndarray], BoundaryTag], **meta) -> Mesh:
    vertices = np.asarray(vertices, dtype=np.float64)
    triangles = np.asarray(triangles, dtype=np.int64)
    # drop unreferenced vertices and renumber
    used = np.unique(triangles.ravel())
    remap = -np.ones(len(vertices), dtype=np.int64)
    remap[used] = np.arange(len(used))
    vertices = vertices[used]
    triangles = remap[triangles]
    p = vertices[triangles]
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    neg = (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]) < 0
    triangles[neg] = triangles[neg][:, [0, 2, 1]]
    bedges = _boundary_edges(triangles)
    # stable edge order: by tag first, then lexicographic by midpoint
    mids = vertices[bedges].mean(axis=1)
    tags = np.array([int(classify(m)) for m in mids], dtype=np.int64)
    order = np.lexsort((mids[:, 1], mids[:, 0], tags))
    mesh = Mesh(vertices, triangles, bedges[order], tags[order], **meta)
    mesh.validate()
    return mesh


def _segment_nodes(a: float, b: float, h: float) -> np.ndarray:
    n = max(1, int(math.ceil((b - a) / h - 1e-9)))
    return np.linspace(a, b, n + 1)


def _join(*segments: np.ndarray) -> np.ndarray:
    out = [segments[0]]
    for s in segments[1:]:
        out.append(s[1:])
    return np.concatenate(out)


def _grid_triangles(nx: int, ny: int, keep_cell: np.ndarray | None = None, crossed: bool = True):
    """Split every kept cell of an (nx x ny)-cell grid into two triangles.

    Vertex (i, j) has index ``j * (nx + 1) + i``.  With ``crossed`` the
    diagonal alternates in a checkerboard pattern.
    """
    tris = []
    for j in range(ny):
        for i in range(nx):
            if keep_cell is not None and not keep_cell[j, i]:
                continue
            v00 = j * (nx + 1) + i
            v10 = v00 + 1
            v01 = v00 + nx + 1
            v11 = v01 + 1
            if crossed and (i + j) % 2 == 1:
                tris.append((v00, v10, v01))
                tris.append((v10, v11, v01))
            else:
                tris.append((v00, v10, v11))
                tris.append((v00, v11, v01))
    return np.array(tris, dtype=np.int64).reshape(-1, 3)


def build_unit_square_mesh(n: int) -> Mesh:
    """Crossed-diagonal triangulation of [0, 1]^2 with the top edge tagged as lid."""
    if int(n) != n or n < 2:
        raise InvalidArgument(f"subdivision count must be an integer >= 2, got {n}")
    n = int(n)
    xs = np.linspace(0.0, 1.0, n + 1)
    X, Y = np.meshgrid(xs, xs)
    verts = np.column_stack([X.ravel(), Y.ravel()])
    tris = _grid_triangles(n, n)

    def classify(m):
        return BoundaryTag.LID if abs(m[1] - 1.0) < 1e-12 else BoundaryTag.WALL

    return _assemble(verts, tris, classify, geometry="cavity", params={"n": n})


def build_channel_cylinder_mesh(length: float = 2.2, height: float = 0.41,
                                cyl_center: Sequence[float] = (0.2, 0.2),
                                cyl_radius: float = 0.05, target_h: float = 0.02) -> Mesh:
    """Rectangle [0, length] x [0, height] minus a disk."""
    cx, cy = float(cyl_center[0]), float(cyl_center[1])
    r = float(cyl_radius)
    if length <= 0 or height <= 0 or r <= 0:
        raise InvalidArgument("channel dimensions and radius must be positive")
    if target_h <= 0:
        raise InvalidArgument("target_h must be positive")
    clearance = min(cx, length - cx, cy, height - cy)
    if r >= clearance:
        raise InvalidGeometry(
            f"cylinder (radius {r}) touches or crosses the channel boundary (clearance {clearance:.6g})")
    # half-width of the O-grid block around the cylinder
    a = min(r + 0.5 * (clearance - r), 3.0 * r)
    xs = _join(_segment_nodes(0.0, cx - a, target_h), _segment_nodes(cx - a, cx + a, target_h),
               _segment_nodes(cx + a, length, target_h))
    ys = _join(_segment_nodes(0.0, cy - a, target_h), _segment_nodes(cy - a, cy + a, target_h),
               _segment_nodes(cy + a, height, target_h))
    nx, ny = len(xs) - 1, len(ys) - 1
    ix0 = int(np.argmin(abs(xs - (cx - a))))
    ix1 = int(np.argmin(abs(xs - (cx + a))))
    iy0 = int(np.argmin(abs(ys - (cy - a))))
    iy1 = int(np.argmin(abs(ys - (cy + a))))

    X, Y = np.meshgrid(xs, ys)
    verts = [np.column_stack([X.ravel(), Y.ravel()])]
    keep = np.ones((ny, nx), dtype=bool)
    keep[iy0:iy1, ix0:ix1] = False
    tris = [_grid_triangles(nx, ny, keep, crossed=False)]

    def gid(i, j):
        return j * (nx + 1) + i

    ring = ([gid(i, iy0) for i in range(ix0, ix1)] + [gid(ix1, j) for j in range(iy0, iy1)]
            + [gid(i, iy1) for i in range(ix1, ix0, -1)] + [gid(ix0, j) for j in range(iy1, iy0, -1)])
    ring = np.array(ring, dtype=np.int64)
    outer = verts[0][ring]
    d = outer - np.array([cx, cy])
    on_circle = np.array([cx, cy]) + r * d / np.linalg.norm(d, axis=1, keepdims=True)
    circle_step = float(np.max(np.linalg.norm(np.roll(on_circle, -1, axis=0) - on_circle, axis=1)))
    if circle_step > target_h:
        raise InvalidConfiguration("cylinder polygon spacing exceeds target_h")
    n_layers = max(1, int(math.ceil((a - r) / target_h)))
    m = len(ring)
    base = len(verts[0])
    layer_ids = []
    for k in range(n_layers):
        lam = k / n_layers
        verts.append(on_circle + lam * (outer - on_circle))
        layer_ids.append(base + k * m + np.arange(m))
    layer_ids.append(ring)
    quad = []
    for k in range(n_layers):
        inner, out = layer_ids[k], layer_ids[k + 1]
        for i in range(m):
            i2 = (i + 1) % m
            quad.append((inner[i], inner[i2], out[i2]))
            quad.append((inner[i], out[i2], out[i]))
    tris.append(np.array(quad, dtype=np.int64))

    def classify(mid):
        x, y = mid
        if abs(x) < 1e-12:
            return BoundaryTag.INLET
        if abs(x - length) < 1e-12:
            return BoundaryTag.OUTLET
        if abs(y) < 1e-12 or abs(y - height) < 1e-12:
            return BoundaryTag.WALL
        return BoundaryTag.CYLINDER

    params = dict(length=length, height=height, cyl_center=[cx, cy], cyl_radius=r, target_h=target_h)
    return _assemble(np.vstack(verts), np.vstack(tris), classify, geometry="cylinder",
                     holes=(((cx, cy), r),), params=params)


def build_contraction_mesh(inlet_height: float = 0.4, outlet_height: float = 0.1,
                           inlet_length: float = 1.0, outlet_length: float = 1.0,
                           target_h: float = 0.025) -> Mesh:
    """Upper half of a planar step contraction; the symmetry axis is y = 0."""
    dims = (inlet_height, outlet_height, inlet_length, outlet_length, target_h)
    if any(v <= 0 for v in dims):
        raise InvalidArgument("all contraction dimensions and target_h must be positive")
    if outlet_height >= inlet_height:
        raise InvalidArgument("outlet_height must be smaller than inlet_height")
    total = inlet_length + outlet_length
    xs = _join(_segment_nodes(0.0, inlet_length, target_h), _segment_nodes(inlet_length, total, target_h))
    ys = _join(_segment_nodes(0.0, outlet_height, target_h), _segment_nodes(outlet_height, inlet_height, target_h))
    nx, ny = len(xs) - 1, len(ys) - 1
    xc = 0.5 * (xs[:-1] + xs[1:])
    yc = 0.5 * (ys[:-1] + ys[1:])
    keep = (xc[None, :] < inlet_length) | (yc[:, None] < outlet_height)
    X, Y = np.meshgrid(xs, ys)
    verts = np.column_stack([X.ravel(), Y.ravel()])
    tris = _grid_triangles(nx, ny, keep, crossed=False)

    def classify(mid):
        x, y = mid
        if abs(y) < 1e-12:
            return BoundaryTag.SYMMETRY_AXIS
        if abs(x) < 1e-12:
            return BoundaryTag.INLET
        if abs(x - total) < 1e-12:
            return BoundaryTag.OUTLET
        return BoundaryTag.WALL

    params = dict(inlet_height=inlet_height, outlet_height=outlet_height, inlet_length=inlet_length,
                  outlet_length=outlet_length, target_h=target_h)
    return _assemble(verts, tris, classify, geometry="contraction", params=params)


def build_mesh(geometry: str, **params) -> Mesh:
    builders = {
        "cavity": build_unit_square_mesh,
        "cylinder": build_channel_cylinder_mesh,
        "contraction": build_contraction_mesh,
    }
    if geometry not in builders:
        raise InvalidArgument(f"unknown geometry {geometry!r}")
    return builders[geometry](**params)


# --- point location -----------------------------------------------------

class _Locator:
    """Brute-force barycentric search, vectorized over triangles."""

    def __init__(self, mesh: Mesh):
        p = mesh.vertices[mesh.triangles]
        self.origin = p[:, 0]
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
        # inverse of the 2x2 matrix [e1 e2]
        self.inv = np.stack([np.stack([e2[:, 1], -e2[:, 0]], -1),
                             np.stack([-e1[:, 1], e1[:, 0]], -1)], 1) / det[:, None, None]
        self.lo = p.min(axis=1)
        self.hi = p.max(axis=1)
        self.scale = float(np.max(np.abs(mesh.vertices))) or 1.0

    def locate(self, pt, tol=1e-12):
        pt = np.asarray(pt, dtype=np.float64)
        eps = tol * self.scale
        cand = np.nonzero(np.all((self.lo - eps <= pt) & (pt <= self.hi + eps), axis=1))[0]
        if cand.size == 0:
            return None
        rel = pt - self.origin[cand]
        l12 = np.einsum("tij,tj->ti", self.inv[cand], rel)
        lam = np.column_stack([1.0 - l12.sum(axis=1), l12])
        worst = lam.min(axis=1)
        best = int(np.argmax(worst))
        if worst[best] < -tol:
            return None
        coords = np.clip(lam[best], 0.0, None)
        coords = coords / coords.sum()
        return int(cand[best]), coords


_LOCATORS: dict[int, tuple[Mesh, _Locator]] = {}


def _locator(mesh: Mesh) -> _Locator:
    hit = _LOCATORS.get(id(mesh))
    if hit is None or hit[0] is not mesh:
        hit = (mesh, _Locator(mesh))
        _LOCATORS[id(mesh)] = hit
    return hit[1]


def locate_point(mesh: Mesh, p) -> tuple[int, np.ndarray] | None:
    """Return ``(triangle index, barycentric coordinates)`` or ``None`` when outside."""
    return _locator(mesh).locate(p)


def in_holes(mesh: Mesh, pts: np.ndarray) -> np.ndarray:
    pts = np.atleast_2d(pts)
    out = np.zeros(len(pts), dtype=bool)
    for (cx, cy), r in mesh.holes:
        out |= np.hypot(pts[:, 0] - cx, pts[:, 1] - cy) <= r
    return out


def interpolation_matrix(mesh: Mesh, points: np.ndarray):
    """Sparse (n_points x n_vertices) P1 evaluation operator."""
    from scipy import sparse

    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    rows, cols, vals = [], [], []
    for k, pt in enumerate(points):
        hit = locate_point(mesh, pt)
        if hit is None:
            from .errors import OutsideDomain
            raise OutsideDomain(f"point ({pt[0]:.6g}, {pt[1]:.6g}) is outside the mesh")
        tri, lam = hit
        rows.extend([k, k, k])
        cols.extend(mesh.triangles[tri].tolist())
        vals.extend(lam.tolist())
    return sparse.csr_matrix((vals, (rows, cols)), shape=(len(points), mesh.n_vertices))


# --- output lattice -----------------------------------------------------

@dataclass(frozen=True, eq=False)
class OutputLattice:
    """Cell-centred rectangular lattice over the mesh bounding box.

    ``points`` are the retained (inside) points in row-major order of the
    full ``ny x nx`` lattice; ``membership_mask`` has that full shape.
    """

    points: np.ndarray
    times: np.ndarray
    membership_mask: np.ndarray
    bbox: tuple
    nx: int
    ny: int
    tau: float

    def __post_init__(self):
        object.__setattr__(self, "points", _frozen(self.points, np.float64))
        object.__setattr__(self, "times", _frozen(self.times, np.float64))
        object.__setattr__(self, "membership_mask", _frozen(self.membership_mask, bool))

    @property
    def n_points(self) -> int:
        return len(self.points)

    @property
    def n_times(self) -> int:
        return len(self.times)

    @property
    def spacing(self) -> tuple[float, float]:
        x0, y0, x1, y1 = self.bbox
        return (x1 - x0) / self.nx, (y1 - y0) / self.ny

    def nodes(self) -> np.ndarray:
        """All space-time output nodes as an (L*M, 3) array, time-major."""
        L, M = self.n_points, self.n_times
        xy = np.tile(self.points, (M, 1))
        t = np.repeat(self.times, L)
        return np.column_stack([xy, t])

    def to_dict(self) -> dict:
        return {"bbox": list(self.bbox), "nx": self.nx, "ny": self.ny, "tau": self.tau}


def uniform_times(tau: float, m: int) -> np.ndarray:
    return tau * np.arange(1, m + 1) / m


def build_output_lattice(mesh: Mesh, nx: int, ny: int, times, tau: float | None = None) -> OutputLattice:
    if nx < 2 or ny < 2:
        raise InvalidArgument("lattice needs nx, ny >= 2")
    times = np.atleast_1d(np.asarray(times, dtype=np.float64))
    if times.size == 0:
        raise InvalidArgument("at least one output time is required")
    if tau is None:
        tau = float(times[-1])
    if np.any(np.diff(times) <= 0) or times[0] <= 0 or times[-1] > tau * (1 + 1e-12):
        raise InvalidArgument("times must be strictly increasing within (0, tau]")
    x0, y0, x1, y1 = mesh.bounding_box()
    xs = x0 + (np.arange(nx) + 0.5) * (x1 - x0) / nx
    ys = y0 + (np.arange(ny) + 0.5) * (y1 - y0) / ny
    X, Y = np.meshgrid(xs, ys)
    cand = np.column_stack([X.ravel(), Y.ravel()])
    inside = np.array([locate_point(mesh, p) is not None for p in cand])
    inside &= ~in_holes(mesh, cand)
    if not inside.any():
        raise InvalidConfiguration("output lattice has no point inside the domain")
    return OutputLattice(cand[inside], times, inside.reshape(ny, nx), (x0, y0, x1, y1), nx, ny, float(tau))


# --- persistence --------------------------------------------------------

def mesh_to_dict(mesh: Mesh) -> dict:
    return {
        "geometry": mesh.geometry,
        "params": mesh.params,
        "holes": [[list(c), r] for c, r in mesh.holes],
        "vertices": mesh.vertices.tolist(),
        "triangles": mesh.triangles.tolist(),
        "boundary_edges": mesh.boundary_edges.tolist(),
        "boundary_tags": [BoundaryTag(t).name for t in mesh.boundary_tags],
    }


def export_mesh_json(mesh: Mesh, path) -> None:
    Path(path).write_text(json.dumps(mesh_to_dict(mesh), indent=1))


def save_mesh(mesh: Mesh, path) -> None:
    header = {"geometry": mesh.geometry, "params": mesh.params,
              "holes": [[list(c), r] for c, r in mesh.holes]}
    binio.write(path, MESH_MAGIC, MESH_VERSION, header, {
        "vertices": mesh.vertices, "triangles": mesh.triangles,
        "boundary_edges": mesh.boundary_edges, "boundary_tags": mesh.boundary_tags,
    })


def load_mesh(path) -> Mesh:
    header, arrays = binio.read(path, MESH_MAGIC, MESH_VERSION)
    holes = tuple((tuple(c), r) for c, r in header["holes"])
    return Mesh(arrays["vertices"], arrays["triangles"], arrays["boundary_edges"],
                arrays["boundary_tags"], geometry=header["geometry"], holes=holes,
                params=header["params"])


def refine_mesh(mesh: Mesh):
    """Uniform red refinement (each triangle into four).

    Returns ``(fine_mesh, prolongation)`` where ``prolongation`` is the sparse
    (fine vertices x coarse vertices) matrix interpolating coarse P1 fields.
    Child boundary edges inherit the tag of their parent edge.
    """
    from scipy import sparse

    nv = mesh.n_vertices
    edges = mesh.edges()
    mid_index = {(int(a), int(b)): nv + k for k, (a, b) in enumerate(edges)}

    def mid(a, b):
        return mid_index[(a, b) if a < b else (b, a)]

    verts = np.vstack([mesh.vertices, 0.5 * (mesh.vertices[edges[:, 0]] + mesh.vertices[edges[:, 1]])])
    tris = []
    for a, b, c in mesh.triangles.tolist():
        ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
        tris += [(a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca)]
    bedges, btags = [], []
    for (a, b), tag in zip(mesh.boundary_edges.tolist(), mesh.boundary_tags.tolist()):
        m = mid(a, b)
        bedges += [(a, m), (m, b)]
        btags += [tag, tag]
    fine = Mesh(verts, np.array(tris), np.array(bedges), np.array(btags), geometry=mesh.geometry,
                holes=mesh.holes, params={**mesh.params, "refined": True})
    fine.validate()
    ne = len(edges)
    rows = np.concatenate([np.arange(nv), nv + np.arange(ne), nv + np.arange(ne)])
    cols = np.concatenate([np.arange(nv), edges[:, 0], edges[:, 1]])
    vals = np.concatenate([np.ones(nv), np.full(2 * ne, 0.5)])
    P = sparse.csr_matrix((vals, (rows, cols)), shape=(len(verts), nv))
    return fine, P
