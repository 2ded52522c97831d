"""Triangle meshes, isosurface extraction, face partitioning and set operations.

Marching cubes convention: a sample strictly greater than the iso value is
"inside". The 256-entry triangle table is generated once at import from a
per-face marching-squares rule in which ambiguous faces always separate the
inside corners. Because the rule depends only on the four corner states of
each face, adjacent cells always agree on shared faces and the extracted
surface is watertight; complementary configurations are handled consistently
without an asymptotic decider. Triangles wind so normals point from inside
to outside.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .grid import ScalarVolume

__all__ = [
    "TriMesh",
    "FacePartition",
    "SurfaceCurrent",
    "marching_cubes",
    "partition_faces",
    "union_meshes",
    "to_current",
    "submesh",
    "transform_mesh",
    "box_mesh",
    "icosphere",
    "read_obj",
    "write_obj",
    "read_partition",
    "write_partition",
    "read_overrides",
]

DEGENERATE_AREA = 1e-12  # mm^2

PARTITION_LABELS = ("head", "foot", "exterior")


@dataclass(frozen=True)
class TriMesh:
    """Triangular surface: vertices (n, 3) mm, faces (m, 3) vertex indices."""

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.vertices, dtype=float))
        f = np.ascontiguousarray(np.asarray(self.faces, dtype=np.int64))
        if v.ndim != 2 or v.shape[1] != 3:
            raise ValueError(f"vertices must be (n, 3), got {v.shape}")
        if f.ndim != 2 or f.shape[1] != 3:
            raise ValueError(f"faces must be (m, 3), got {f.shape}")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("face indices out of range")
        areas = _face_areas(v, f)
        if f.size and areas.min() <= DEGENERATE_AREA:
            bad = int(np.argmin(areas))
            raise ValueError(
                f"degenerate face {bad} (area {float(areas.min()):.3g} mm^2)"
            )
        v.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def face_corners(self):
        v, f = self.vertices, self.faces
        return v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]

    def face_centers(self) -> np.ndarray:
        a, b, c = self.face_corners()
        return (a + b + c) / 3.0

    def face_normals(self) -> np.ndarray:
        """Area-weighted normals: 0.5 * (b - a) x (c - a)."""
        a, b, c = self.face_corners()
        return 0.5 * np.cross(b - a, c - a)

    def face_areas(self) -> np.ndarray:
        return _face_areas(self.vertices, self.faces)

    def total_area(self) -> float:
        return float(self.face_areas().sum())

    def signed_volume(self) -> float:
        a, b, c = self.face_corners()
        return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)

    def edges(self) -> np.ndarray:
        """Unique undirected edges, shape (ne, 2)."""
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e = np.sort(e, axis=1)
        return np.unique(e, axis=0)

    def euler_characteristic(self) -> int:
        return self.n_vertices - len(self.edges()) + self.n_faces

    def with_vertices(self, vertices: np.ndarray) -> "TriMesh":
        return TriMesh(vertices, self.faces)


def _face_areas(v: np.ndarray, f: np.ndarray) -> np.ndarray:
    if not len(f):
        return np.zeros(0)
    n = 0.5 * np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    return np.sqrt((n**2).sum(axis=1))


@dataclass(frozen=True)
class SurfaceCurrent:
    """Dirac-mass surface representation: face centers and area-weighted normals."""

    centers: np.ndarray
    normals: np.ndarray

    def __post_init__(self):
        c = np.ascontiguousarray(np.asarray(self.centers, dtype=float))
        n = np.ascontiguousarray(np.asarray(self.normals, dtype=float))
        if c.shape != n.shape or c.ndim != 2 or c.shape[1] != 3:
            raise ValueError("centers and normals must both be (m, 3)")
        c.setflags(write=False)
        n.setflags(write=False)
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "normals", n)

    @property
    def n_masses(self) -> int:
        return len(self.centers)

    def total_area(self) -> float:
        return float(np.sqrt((self.normals**2).sum(axis=1)).sum())


def to_current(mesh: TriMesh) -> SurfaceCurrent:
    """Face centers and area-weighted normals; orientation follows winding."""
    areas = mesh.face_areas()
    if len(areas) and areas.min() <= DEGENERATE_AREA:
        raise ValueError(f"degenerate face {int(np.argmin(areas))}")
    return SurfaceCurrent(mesh.face_centers(), mesh.face_normals())


def transform_mesh(mesh: TriMesh, transform) -> TriMesh:
    """Apply an AffineTransform (or any object with apply_points) to vertices."""
    return mesh.with_vertices(transform.apply_points(mesh.vertices))


def submesh(mesh: TriMesh, face_indices: np.ndarray) -> TriMesh:
    """Sub-mesh of the selected faces with vertices reindexed compactly."""
    fi = np.asarray(face_indices, dtype=np.int64)
    faces = mesh.faces[fi]
    used, inverse = np.unique(faces.reshape(-1), return_inverse=True)
    return TriMesh(mesh.vertices[used], inverse.reshape(-1, 3))


def flip_mesh(mesh: TriMesh) -> TriMesh:
    """Reverse the winding of every face (negates all normals)."""
    return TriMesh(mesh.vertices, np.asarray(mesh.faces)[:, ::-1])


# ---------------------------------------------------------------------------
# Marching cubes

_CORNERS = np.array(
    [
        (0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0),
        (0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1),
    ],
    dtype=float,
)
_EDGES = [(0, 1), (1, 2), (2, 3), (3, 0), (4, 5), (5, 6), (6, 7), (7, 4),
          (0, 4), (1, 5), (2, 6), (3, 7)]
_FACE_LOOPS = [
    (0, 1, 2, 3), (4, 5, 6, 7), (0, 1, 5, 4),
    (3, 2, 6, 7), (0, 3, 7, 4), (1, 2, 6, 5),
]
_EDGE_OF_PAIR = {frozenset(pair): e for e, pair in enumerate(_EDGES)}


def _face_segments(loop, inside):
    """Marching-squares segments on one cube face (pairs of cube-edge ids).

    Ambiguous diagonal faces always separate the two inside corners, which
    keeps adjacent cells consistent.
    """
    flags = [inside[c] for c in loop]
    edges = [_EDGE_OF_PAIR[frozenset((loop[i], loop[(i + 1) % 4]))] for i in range(4)]
    n_in = sum(flags)
    if n_in in (0, 4):
        return []
    if n_in == 1 or n_in == 3:
        i = flags.index(n_in == 1)
        return [(edges[(i - 1) % 4], edges[i])]
    if flags[0] == flags[2]:  # diagonal pair
        a = 0 if flags[0] else 1
        return [
            (edges[(a - 1) % 4], edges[a]),
            (edges[(a + 1) % 4], edges[(a + 2) % 4]),
        ]
    i = next(i for i in range(4) if flags[i] and flags[(i + 1) % 4])
    return [(edges[(i - 1) % 4], edges[(i + 1) % 4])]


def _cycles_from_segments(segments):
    adj: dict[int, list[int]] = {}
    for u, v in segments:
        adj.setdefault(u, []).append(v)
        adj.setdefault(v, []).append(u)
    visited = set()
    cycles = []
    for start in sorted(adj):
        if start in visited:
            continue
        cycle = [start]
        visited.add(start)
        prev, cur = None, start
        while True:
            nbrs = adj[cur]  # every crossed edge has exactly two partners
            nxt = nbrs[0] if nbrs[0] != prev else nbrs[1]
            if nxt == start:
                break
            cycle.append(nxt)
            visited.add(nxt)
            prev, cur = cur, nxt
        cycles.append(cycle)
    return cycles


def _orient_cycle(cycle, inside):
    """Order the cycle so fan triangles wind with normals pointing inside->outside."""
    mids = np.array([(_CORNERS[a] + _CORNERS[b]) / 2.0 for a, b in (_EDGES[e] for e in cycle)])
    normal = np.zeros(3)
    for i in range(len(mids)):
        normal += np.cross(mids[i], mids[(i + 1) % len(mids)])
    ins, outs = [], []
    for e in cycle:
        a, b = _EDGES[e]
        ins.append(_CORNERS[a] if inside[a] else _CORNERS[b])
        outs.append(_CORNERS[b] if inside[a] else _CORNERS[a])
    direction = np.mean(outs, axis=0) - np.mean(ins, axis=0)
    if float(normal @ direction) < 0:
        cycle = cycle[::-1]
    return cycle


def _build_triangle_table():
    table = []
    for config in range(256):
        inside = [(config >> c) & 1 == 1 for c in range(8)]
        segments = []
        for loop in _FACE_LOOPS:
            segments.extend(_face_segments(loop, inside))
        tris = []
        for cycle in _cycles_from_segments(segments):
            cycle = _orient_cycle(cycle, inside)
            for i in range(1, len(cycle) - 1):
                tris.append((cycle[0], cycle[i], cycle[i + 1]))
        table.append(tuple(tris))
    return tuple(table)


_TRI_TABLE = _build_triangle_table()


def marching_cubes(label: ScalarVolume, iso: float = 0.5) -> TriMesh:
    """Extract the iso-surface of a scalar volume as a closed triangle mesh.

    The volume is padded with one layer of its minimum value so surfaces
    close at the domain boundary. Vertices are placed on cell edges by linear
    interpolation. Raises when the volume has no crossing ("no isosurface").
    """
    data = np.asarray(label.data, dtype=float)
    lo, hi = float(data.min()), float(data.max())
    if not (lo < iso < hi):
        raise ValueError("no isosurface: iso value is not strictly inside the data range")
    grid = label.grid
    pad = np.pad(data, 1, mode="constant", constant_values=lo)
    inside = pad > iso

    # crossing masks and interpolation parameters per axis
    verts_xyz = []
    vertex_ids = {}
    counter = 0
    spacing = np.asarray(grid.spacing)
    origin = np.asarray(grid.origin)

    def _axis_vertices(axis_char, sl_a, sl_b, offsets):
        nonlocal counter
        cross = inside[sl_a] ^ inside[sl_b]
        va, vb = pad[sl_a], pad[sl_b]
        ids = np.full(cross.shape, -1, dtype=np.int64)
        kk, jj, ii = np.nonzero(cross)
        n = len(kk)
        ids[kk, jj, ii] = counter + np.arange(n)
        counter += n
        t = (iso - va[kk, jj, ii]) / (vb[kk, jj, ii] - va[kk, jj, ii])
        base = np.stack([ii, jj, kk], axis=1).astype(float) - 1.0  # unpad
        base[:, offsets] += t
        verts_xyz.append(origin + base * spacing)
        vertex_ids[axis_char] = ids

    # x edges: (k, j, i) -> (k, j, i+1)
    _axis_vertices("x", np.s_[:, :, :-1], np.s_[:, :, 1:], 0)
    # y edges
    _axis_vertices("y", np.s_[:, :-1, :], np.s_[:, 1:, :], 1)
    # z edges
    _axis_vertices("z", np.s_[:-1, :, :], np.s_[1:, :, :], 2)

    vertices = (
        np.concatenate(verts_xyz, axis=0) if counter else np.zeros((0, 3))
    )

    ins = inside.astype(np.uint16)
    config = (
        ins[:-1, :-1, :-1]
        | (ins[:-1, :-1, 1:] << 1)
        | (ins[:-1, 1:, 1:] << 2)
        | (ins[:-1, 1:, :-1] << 3)
        | (ins[1:, :-1, :-1] << 4)
        | (ins[1:, :-1, 1:] << 5)
        | (ins[1:, 1:, 1:] << 6)
        | (ins[1:, 1:, :-1] << 7)
    )
    active = (config != 0) & (config != 255)
    ck, cj, ci = np.nonzero(active)
    cell_cfg = config[ck, cj, ci]

    vx, vy, vz = vertex_ids["x"], vertex_ids["y"], vertex_ids["z"]

    def _edge_vertex(e, k, j, i):
        if e == 0:
            return vx[k, j, i]
        if e == 1:
            return vy[k, j, i + 1]
        if e == 2:
            return vx[k, j + 1, i]
        if e == 3:
            return vy[k, j, i]
        if e == 4:
            return vx[k + 1, j, i]
        if e == 5:
            return vy[k + 1, j, i + 1]
        if e == 6:
            return vx[k + 1, j + 1, i]
        if e == 7:
            return vy[k + 1, j, i]
        if e == 8:
            return vz[k, j, i]
        if e == 9:
            return vz[k, j, i + 1]
        if e == 10:
            return vz[k, j + 1, i + 1]
        return vz[k, j + 1, i]  # e == 11

    faces = []
    for cfg in np.unique(cell_cfg):
        tris = _TRI_TABLE[cfg]
        if not tris:
            continue
        sel = cell_cfg == cfg
        k, j, i = ck[sel], cj[sel], ci[sel]
        for ea, eb, ec in tris:
            faces.append(
                np.stack(
                    [_edge_vertex(ea, k, j, i), _edge_vertex(eb, k, j, i), _edge_vertex(ec, k, j, i)],
                    axis=1,
                )
            )
    face_arr = np.concatenate(faces, axis=0) if faces else np.zeros((0, 3), dtype=np.int64)
    return TriMesh(vertices, face_arr)


# ---------------------------------------------------------------------------
# Face partitioning

@dataclass(frozen=True)
class FacePartition:
    """One label per face: head, foot or exterior."""

    labels: np.ndarray

    def __post_init__(self):
        lab = np.asarray(self.labels, dtype="<U8")
        bad = set(lab.tolist()) - set(PARTITION_LABELS)
        if bad:
            raise ValueError(f"unknown partition labels: {sorted(bad)}")
        lab.setflags(write=False)
        object.__setattr__(self, "labels", lab)

    def indices(self, label: str) -> np.ndarray:
        return np.nonzero(self.labels == label)[0]

    def counts(self) -> dict[str, int]:
        return {lab: int((self.labels == lab).sum()) for lab in PARTITION_LABELS}


def _face_adjacency(mesh: TriMesh) -> list[list[int]]:
    edge_faces: dict[tuple[int, int], list[int]] = {}
    for fi, (a, b, c) in enumerate(np.asarray(mesh.faces)):
        for u, v in ((a, b), (b, c), (c, a)):
            key = (u, v) if u < v else (v, u)
            edge_faces.setdefault(key, []).append(fi)
    adj: list[list[int]] = [[] for _ in range(mesh.n_faces)]
    for members in edge_faces.values():
        for f1 in members:
            for f2 in members:
                if f1 != f2:
                    adj[f1].append(f2)
    return adj


def partition_faces(
    mesh: TriMesh,
    axis,
    cos_threshold: float = 0.7,
    overrides: dict[int, str] | None = None,
    min_component: int = 10,
) -> FacePartition:
    """Split faces into head/foot/exterior by normal direction along ``axis``.

    Small same-label connected components (< min_component faces) are
    reassigned to the majority label of their neighbors; explicit per-face
    overrides are applied last. Raises "block face not found" when either
    block face ends up empty.
    """
    if not (0.0 < cos_threshold < 1.0):
        raise ValueError("cos_threshold must be in (0, 1)")
    ax = np.asarray(axis, dtype=float)
    ax = ax / np.linalg.norm(ax)
    normals = mesh.face_normals()
    areas = np.sqrt((normals**2).sum(axis=1))
    cosang = (normals @ ax) / areas
    labels = np.full(mesh.n_faces, "exterior", dtype="<U8")
    labels[cosang >= cos_threshold] = "head"
    labels[cosang <= -cos_threshold] = "foot"

    adj = _face_adjacency(mesh)
    seen = np.zeros(mesh.n_faces, dtype=bool)
    for start in range(mesh.n_faces):
        if seen[start]:
            continue
        lab = labels[start]
        comp = [start]
        seen[start] = True
        queue = [start]
        while queue:
            f = queue.pop()
            for g in adj[f]:
                if not seen[g] and labels[g] == lab:
                    seen[g] = True
                    comp.append(g)
                    queue.append(g)
        if len(comp) < min_component:
            neighbor_labels = [
                labels[g] for f in comp for g in adj[f] if labels[g] != lab
            ]
            if neighbor_labels:
                values, counts = np.unique(neighbor_labels, return_counts=True)
                labels[comp] = values[np.argmax(counts)]

    if overrides:
        for fi, lab in overrides.items():
            if lab not in PARTITION_LABELS:
                raise ValueError(f"unknown override label {lab!r}")
            if not (0 <= int(fi) < mesh.n_faces):
                raise ValueError(f"override face index {fi} out of range")
            labels[int(fi)] = lab

    part = FacePartition(labels)
    for lab in ("head", "foot"):
        if not len(part.indices(lab)):
            raise ValueError(f"block face not found: no {lab} faces")
    return part


# ---------------------------------------------------------------------------
# Union with welding

def union_meshes(parts: list[TriMesh], weld_tolerance: float = 1e-6) -> TriMesh:
    """Concatenate meshes, welding vertices closer than ``weld_tolerance``.

    Faces that appear an even number of times (same vertex set, any winding)
    cancel out, so coincident walls of opposite orientation disappear and a
    closed combined shell remains.
    """
    if not parts:
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    verts = np.concatenate([np.asarray(m.vertices) for m in parts], axis=0)
    offset = 0
    faces = []
    for m in parts:
        faces.append(np.asarray(m.faces) + offset)
        offset += m.n_vertices
    faces = np.concatenate(faces, axis=0)

    quant = np.round(verts / weld_tolerance).astype(np.int64)
    _, first, inverse = np.unique(
        quant, axis=0, return_index=True, return_inverse=True
    )
    welded_verts = verts[np.sort(first)]
    # map unique-group -> index in sorted-first order
    order = np.argsort(first, kind="stable")
    remap = np.empty_like(order)
    remap[order] = np.arange(len(order))
    new_faces = remap[inverse][faces]

    # drop collapsed faces, then cancel duplicate faces pairwise
    ok = (
        (new_faces[:, 0] != new_faces[:, 1])
        & (new_faces[:, 1] != new_faces[:, 2])
        & (new_faces[:, 2] != new_faces[:, 0])
    )
    new_faces = new_faces[ok]
    keys = np.sort(new_faces, axis=1)
    _, group, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    keep = np.ones(len(new_faces), dtype=bool)
    for g in np.nonzero(counts > 1)[0]:
        members = np.nonzero(group == g)[0]
        # keep one face when multiplicity is odd, none when even
        drop = members if counts[g] % 2 == 0 else members[1:]
        keep[drop] = False
    new_faces = new_faces[keep]

    used, inv = np.unique(new_faces.reshape(-1), return_inverse=True) if len(new_faces) else (
        np.zeros(0, dtype=np.int64),
        np.zeros(0, dtype=np.int64),
    )
    return TriMesh(welded_verts[used], inv.reshape(-1, 3) if len(new_faces) else np.zeros((0, 3), dtype=np.int64))


# ---------------------------------------------------------------------------
# Primitive builders (used by tests and the phantom generator)

def box_mesh(lo, hi) -> TriMesh:
    """Axis-aligned box with outward-facing triangles."""
    x0, y0, z0 = (float(v) for v in lo)
    x1, y1, z1 = (float(v) for v in hi)
    v = np.array(
        [
            (x0, y0, z0), (x1, y0, z0), (x1, y1, z0), (x0, y1, z0),
            (x0, y0, z1), (x1, y0, z1), (x1, y1, z1), (x0, y1, z1),
        ]
    )
    quads = [
        (0, 3, 2, 1),  # z = z0, outward -z
        (4, 5, 6, 7),  # z = z1, outward +z
        (0, 1, 5, 4),  # y = y0
        (2, 3, 7, 6),  # y = y1
        (0, 4, 7, 3),  # x = x0
        (1, 2, 6, 5),  # x = x1
    ]
    faces = []
    for a, b, c, d in quads:
        faces.append((a, b, c))
        faces.append((a, c, d))
    return TriMesh(v, np.asarray(faces, dtype=np.int64))


def icosphere(radius: float = 1.0, center=(0.0, 0.0, 0.0), subdivisions: int = 3) -> TriMesh:
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
            (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
            (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
        ],
        dtype=float,
    )
    verts /= np.linalg.norm(verts[0])
    faces = np.array(
        [
            (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
            (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
            (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
            (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
        ],
        dtype=np.int64,
    )
    for _ in range(subdivisions):
        verts_list = list(verts)
        midpoint: dict[tuple[int, int], int] = {}

        def _mid(a: int, b: int) -> int:
            key = (a, b) if a < b else (b, a)
            if key not in midpoint:
                p = verts_list[a] + verts_list[b]
                p = p / np.linalg.norm(p)
                midpoint[key] = len(verts_list)
                verts_list.append(p)
            return midpoint[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = _mid(a, b), _mid(b, c), _mid(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        verts = np.asarray(verts_list)
        faces = np.asarray(new_faces, dtype=np.int64)
    return TriMesh(verts * radius + np.asarray(center, dtype=float), faces)


# ---------------------------------------------------------------------------
# File formats: OBJ subset, partition and override files

def write_obj(path, mesh: TriMesh) -> None:
    lines = [
        f"v {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}"
        for v in np.asarray(mesh.vertices)
    ]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in np.asarray(mesh.faces)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_obj(path) -> TriMesh:
    verts, faces = [], []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            faces.append([int(x.split("/")[0]) - 1 for x in parts[1:4]])
    return TriMesh(np.asarray(verts, dtype=float), np.asarray(faces, dtype=np.int64))


def write_partition(path, part: FacePartition) -> None:
    Path(path).write_text("\n".join(part.labels.tolist()) + "\n", encoding="utf-8")


def read_partition(path) -> FacePartition:
    labels = [
        line.strip()
        for line in Path(path).read_text(encoding="utf-8").splitlines()
        if line.strip()
    ]
    return FacePartition(np.asarray(labels))


def read_overrides(path) -> dict[int, str]:
    """Per-face override file: ``face_index label`` lines."""
    out: dict[int, str] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 2:
            raise ValueError(f"bad override line: {line!r}")
        out[int(parts[0])] = parts[1]
    return out
