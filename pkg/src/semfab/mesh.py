"""Tetrahedral meshes: generators, validation, layering, JSON I/O.

Units are millimetres throughout. All generated meshes are conforming
(every interior face shared by exactly two tets) and positively oriented.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from itertools import permutations
from pathlib import Path

import numpy as np

from . import _kernels
from .errors import MeshFormatError


@dataclass(frozen=True)
class VolumetricMesh:
    """Pure-tet volume mesh. vertices (n,3) float64 mm, tets (m,4) int64."""

    vertices: np.ndarray
    tets: np.ndarray
    units: str = "mm"

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_elements(self) -> int:
        return self.tets.shape[0]

    def volumes(self) -> np.ndarray:
        """Signed volume of every tet (positive for valid meshes)."""
        return _kernels.tet_volumes(self.vertices, self.tets)

    def centroids(self) -> np.ndarray:
        return self.vertices[self.tets].mean(axis=1)

    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def bbox_diagonal(self) -> float:
        lo, hi = self.bbox()
        return float(np.linalg.norm(hi - lo))


@dataclass(frozen=True)
class LayerPartition:
    """Disjoint element-id layers ordered by ascending build direction (z)."""

    layer_height: float
    layers: list[np.ndarray] = field(default_factory=list)

    @property
    def n_layers(self) -> int:
        return len(self.layers)


@dataclass(frozen=True)
class Violation:
    kind: str
    index: int
    message: str


@dataclass(frozen=True)
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def _as_mesh_arrays(vertices, tets):
    v = np.ascontiguousarray(vertices, dtype=np.float64)
    t = np.ascontiguousarray(tets, dtype=np.int64)
    if v.ndim != 2 or v.shape[1] != 3:
        raise MeshFormatError("vertices must be an (n, 3) array")
    if t.ndim != 2 or t.shape[1] != 4:
        raise MeshFormatError("tets must be an (m, 4) array")
    return v, t


# ---------------------------------------------------------------------------
# generators

# The 6 tets of the Kuhn cube split walk from corner (0,0,0) to (1,1,1),
# one axis step per vertex, one tet per axis permutation. Odd permutations
# reverse orientation, fixed by swapping the two middle vertices. Every
# cell is split the same way, so shared faces line up across cells.
def _kuhn_offsets():
    out = []
    for perm in permutations((0, 1, 2)):
        corners = [(0, 0, 0)]
        cur = [0, 0, 0]
        for axis in perm:
            cur[axis] = 1
            corners.append(tuple(cur))
        inversions = sum(
            perm[i] > perm[j] for i in range(3) for j in range(i + 1, 3)
        )
        if inversions % 2 == 1:
            corners[1], corners[2] = corners[2], corners[1]
        out.append(corners)
    return out


_KUHN = _kuhn_offsets()


def generate_box_mesh(nx: int, ny: int, nz: int, dims) -> VolumetricMesh:
    """Structured box mesh on [0,dims] with nx*ny*nz cells of 6 tets each."""
    dims = np.asarray(dims, dtype=np.float64)
    if not all(isinstance(n, (int, np.integer)) and n >= 1 for n in (nx, ny, nz)):
        raise ValueError("subdivision counts must be integers >= 1")
    if dims.shape != (3,) or not np.all(dims > 0):
        raise ValueError("dims must be 3 strictly positive lengths")

    xs = np.linspace(0.0, dims[0], nx + 1)
    ys = np.linspace(0.0, dims[1], ny + 1)
    zs = np.linspace(0.0, dims[2], nz + 1)
    grid = np.meshgrid(xs, ys, zs, indexing="ij")
    vertices = np.stack(grid, axis=-1).reshape(-1, 3)

    # vertex id of grid point (i,j,k) is (i*(ny+1)+j)*(nz+1)+k, so a corner
    # offset is a constant id offset and cells vectorize
    def vid_offset(di, dj, dk):
        return (di * (ny + 1) + dj) * (nz + 1) + dk

    ii, jj, kk = np.meshgrid(
        np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij"
    )
    base = ((ii * (ny + 1) + jj) * (nz + 1) + kk).reshape(-1)
    tets = np.empty((base.size, 6, 4), dtype=np.int64)
    for t, corners in enumerate(_KUHN):
        for slot, c in enumerate(corners):
            tets[:, t, slot] = base + vid_offset(*c)
    return VolumetricMesh(vertices, tets.reshape(-1, 4))


# Orientation-preserving prism symmetries that bring each vertex to slot 0
# (three turns about the axis, three end-over-end flips).
_PRISM_ROTATIONS = (
    (0, 1, 2, 3, 4, 5),
    (1, 2, 0, 4, 5, 3),
    (2, 0, 1, 5, 3, 4),
    (3, 5, 4, 0, 2, 1),
    (4, 3, 5, 1, 0, 2),
    (5, 4, 3, 2, 1, 0),
)


def _split_prism(p):
    """Split wedge (bottom p0,p1,p2 / top p3,p4,p5) into 3 tets.

    Quad-face diagonals always pass through each face's smallest global
    vertex id, so adjacent prisms split shared quads identically and the
    result conforms without any neighbor bookkeeping.
    """
    rot = _PRISM_ROTATIONS[min(range(6), key=lambda i: p[i])]
    q = tuple(p[j] for j in rot)
    if min(q[1], q[5]) < min(q[2], q[4]):
        return [
            (q[0], q[1], q[2], q[5]),
            (q[0], q[1], q[5], q[4]),
            (q[0], q[4], q[5], q[3]),
        ]
    return [
        (q[0], q[1], q[2], q[4]),
        (q[0], q[4], q[2], q[5]),
        (q[0], q[4], q[5], q[3]),
    ]


def generate_shaft_mesh(
    radius: float, height: float, n_radial: int, n_axial: int
) -> VolumetricMesh:
    """Cylinder approximated by an inscribed n_radial-gon, extruded in z.

    Each axial slab is a fan of wedges around a center vertex; wedges are
    split into 3 tets each. Flat faces at z=0 and z=height.
    """
    if radius <= 0 or height <= 0:
        raise ValueError("radius and height must be positive")
    if not isinstance(n_radial, (int, np.integer)) or n_radial < 3:
        raise ValueError("n_radial must be an integer >= 3")
    if not isinstance(n_axial, (int, np.integer)) or n_axial < 1:
        raise ValueError("n_axial must be an integer >= 1")

    theta = 2.0 * np.pi * np.arange(n_radial) / n_radial
    ring = np.column_stack([radius * np.cos(theta), radius * np.sin(theta)])
    zs = np.linspace(0.0, height, n_axial + 1)

    stride = n_radial + 1  # center vertex + ring per level
    vertices = np.zeros(((n_axial + 1) * stride, 3))
    for lvl, z in enumerate(zs):
        vertices[lvl * stride, 2] = z
        rows = slice(lvl * stride + 1, (lvl + 1) * stride)
        vertices[rows, 0:2] = ring
        vertices[rows, 2] = z

    tets = []
    for lvl in range(n_axial):
        c0 = lvl * stride
        c1 = (lvl + 1) * stride
        for a in range(n_radial):
            b = (a + 1) % n_radial
            prism = (c0, c0 + 1 + a, c0 + 1 + b, c1, c1 + 1 + a, c1 + 1 + b)
            tets.extend(_split_prism(prism))
    return VolumetricMesh(vertices, np.asarray(tets, dtype=np.int64))


# ---------------------------------------------------------------------------
# validation and derived structure

# Faces of tet (v0,v1,v2,v3) wound so normals point out of the element.
_TET_FACES = ((0, 2, 1), (0, 1, 3), (1, 2, 3), (0, 3, 2))


def boundary_faces(mesh: VolumetricMesh) -> np.ndarray:
    """Outward-oriented boundary triangles, shape (t, 3)."""
    tets = mesh.tets
    faces = np.empty((tets.shape[0] * 4, 3), dtype=np.int64)
    for f, (a, b, c) in enumerate(_TET_FACES):
        faces[f::4, 0] = tets[:, a]
        faces[f::4, 1] = tets[:, b]
        faces[f::4, 2] = tets[:, c]
    keys = np.sort(faces, axis=1)
    _, inverse, counts = np.unique(
        keys, axis=0, return_inverse=True, return_counts=True
    )
    return faces[counts[inverse] == 1]


def face_adjacency(mesh: VolumetricMesh) -> np.ndarray:
    """Pairs of element ids sharing a triangular face, shape (k, 2)."""
    tets = mesh.tets
    keys = np.sort(tets[:, np.array(_TET_FACES)].reshape(-1, 3), axis=1)
    _, inverse, counts = np.unique(
        keys, axis=0, return_inverse=True, return_counts=True
    )
    order = np.argsort(inverse, kind="stable")
    elem_of_face = order // 4
    starts = np.cumsum(counts) - counts
    shared = counts == 2
    return np.column_stack(
        [elem_of_face[starts[shared]], elem_of_face[starts[shared] + 1]]
    )


def validate_mesh(mesh: VolumetricMesh) -> ValidationReport:
    """Check mesh invariants; violations are returned, never raised."""
    violations: list[Violation] = []
    n = mesh.n_vertices
    tets = mesh.tets

    in_range = np.all((tets >= 0) & (tets < n), axis=1)
    for e in np.flatnonzero(~in_range):
        violations.append(
            Violation("vertex_out_of_range", int(e),
                      f"tet {e} references a vertex id outside 0..{n - 1}")
        )
    good = tets[in_range]

    if good.size:
        vols = _kernels.tet_volumes(mesh.vertices, good)
        for local, e in zip(
            np.flatnonzero(vols <= 0.0), np.flatnonzero(in_range)[vols <= 0.0]
        ):
            violations.append(
                Violation("nonpositive_volume", int(e),
                          f"tet {e} has signed volume {vols[local]:.3e}")
            )

    referenced = np.zeros(n, dtype=bool)
    referenced[good.reshape(-1)] = True
    for v in np.flatnonzero(~referenced):
        violations.append(
            Violation("unreferenced_vertex", int(v),
                      f"vertex {v} is not used by any tet")
        )

    if good.size:
        keys = np.sort(
            good[:, np.array(_TET_FACES)].reshape(-1, 3), axis=1
        )
        uniq, counts = np.unique(keys, axis=0, return_counts=True)
        for f in np.flatnonzero(counts > 2):
            violations.append(
                Violation("face_overshared", int(uniq[f][0]),
                          f"face {tuple(int(x) for x in uniq[f])} shared by "
                          f"{counts[f]} tets")
            )
        # boundary must close up: every boundary edge on exactly 2 boundary tris
        bnd = uniq[counts == 1]
        if bnd.size:
            edges = np.sort(
                bnd[:, np.array([(0, 1), (1, 2), (0, 2)])].reshape(-1, 2), axis=1
            )
            euniq, ecounts = np.unique(edges, axis=0, return_counts=True)
            for idx in np.flatnonzero(ecounts != 2):
                violations.append(
                    Violation(
                        "nonmanifold_boundary", int(euniq[idx][0]),
                        f"boundary edge {tuple(int(x) for x in euniq[idx])} "
                        f"lies on {ecounts[idx]} boundary faces",
                    )
                )
    return ValidationReport(violations)


def layer_partition(mesh: VolumetricMesh, layer_height: float) -> LayerPartition:
    """Bin elements into build layers by centroid height above the mesh bottom.

    Element e lands in layer k when its centroid satisfies
    k*h <= z_centroid - z_min < (k+1)*h. Layer count is ceil(extent / h).
    """
    if not layer_height > 0:
        raise ValueError("layer_height must be positive")
    z = mesh.vertices[:, 2]
    z_min = float(z.min())
    extent = float(z.max()) - z_min
    q = extent / layer_height
    n_layers = max(1, math.ceil(q - 1e-9 * max(1.0, q)))
    zc = mesh.centroids()[:, 2]
    idx = np.floor((zc - z_min) / layer_height).astype(np.int64)
    np.clip(idx, 0, n_layers - 1, out=idx)
    layers = [np.flatnonzero(idx == k) for k in range(n_layers)]
    return LayerPartition(layer_height=float(layer_height), layers=layers)


# ---------------------------------------------------------------------------
# file format


def mesh_to_dict(mesh: VolumetricMesh) -> dict:
    return {
        "units": {"length": mesh.units},
        "vertices": mesh.vertices.tolist(),
        "tets": mesh.tets.tolist(),
    }


def mesh_from_dict(doc: dict) -> VolumetricMesh:
    if not isinstance(doc, dict):
        raise MeshFormatError("mesh document must be a JSON object")
    for key in ("vertices", "tets"):
        if key not in doc:
            raise MeshFormatError(f"mesh document missing '{key}'")
    units = doc.get("units", {})
    length_unit = units.get("length", "mm") if isinstance(units, dict) else units
    if length_unit != "mm":
        raise MeshFormatError(f"unsupported length unit {length_unit!r}")
    try:
        vertices, tets = _as_mesh_arrays(doc["vertices"], doc["tets"])
    except (TypeError, ValueError) as exc:
        raise MeshFormatError(f"malformed mesh arrays: {exc}") from exc
    if tets.size and (tets.min() < 0 or tets.max() >= vertices.shape[0]):
        raise MeshFormatError("tet references a vertex id out of range")
    return VolumetricMesh(vertices, tets, units=length_unit)


def save_mesh(mesh: VolumetricMesh, path) -> None:
    Path(path).write_text(json.dumps(mesh_to_dict(mesh)) + "\n")


def load_mesh(path) -> VolumetricMesh:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise MeshFormatError(f"not valid JSON: {exc}") from exc
    return mesh_from_dict(doc)
