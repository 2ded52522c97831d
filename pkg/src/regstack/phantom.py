"""Synthetic ground-truth phantom: digital tissue with vessels and a necrosis
lesion, a known smooth excision warp, gross slicing into jittered (optionally
bent) blocks, dense section extraction with small in-plane warps, and seeded
landmarks for every stage. Identical specs produce bit-identical bundles."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .grid import (
    AffineTransform,
    DiffeoMap,
    Grid,
    ScalarImage,
    ScalarVolume,
    apply_map_to_volume,
    interpolate,
    write_affine,
    write_diffeo,
    write_rvol,
)
from .mesh import FacePartition, TriMesh, marching_cubes, partition_faces, write_obj, write_partition
from .metrics import LandmarkSet, write_landmarks
from .pipeline import Block, BlockStack, Section

__all__ = ["PhantomSpec", "PhantomBundle", "generate", "write_bundle", "reslice_block"]


@dataclass(frozen=True)
class PhantomSpec:
    seed: int = 0
    dims: tuple[int, int, int] = (96, 96, 96)
    spacing: tuple[float, float, float] = (0.5, 0.5, 0.5)
    tissue_axes_mm: tuple[float, float, float] = (17.0, 13.0, 10.0)
    necrosis_center_mm: tuple[float, float, float] = (2.5, -1.5, 0.5)
    necrosis_radii_mm: tuple[float, float, float] = (6.0, 5.0, 4.0)
    n_tubes: int = 3
    tube_radius_mm: float = 1.6
    slab_thickness_mm: float = 3.0
    jitter_translation_mm: float = 2.0
    jitter_rotation_deg: float = 5.0
    warp_amplitude_mm: float = 4.0
    bend_amplitude_mm: float = 0.0
    inplane_warp_mm: float = 0.3
    section_spacing_um: float = 250.0
    mesh_coarsen: int = 2
    n_landmarks: int = 10
    partition_cos_threshold: float = 0.8

    def config_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# analytic primitives

def _ellipsoid(points, center, axes):
    s = (np.atleast_2d(points) - np.asarray(center, float)) / np.asarray(axes, float)
    return (s**2).sum(axis=1) <= 1.0


def _tube_mask(points, origin, direction, radius):
    p = np.atleast_2d(points) - np.asarray(origin, float)
    d = np.asarray(direction, float)
    along = p @ d
    perp2 = (p**2).sum(axis=1) - along**2
    return perp2 <= radius**2


@dataclass
class _BumpField:
    """Sum of Gaussian displacement bumps; exact forward evaluation."""

    centers: np.ndarray  # (k, 3)
    amps: np.ndarray  # (k, 3) mm
    sigmas: np.ndarray  # (k,)

    def displacement(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.zeros_like(pts)
        for c, a, s in zip(self.centers, self.amps, self.sigmas):
            w = np.exp(-((pts - c) ** 2).sum(axis=1) / (2 * s**2))
            out += w[:, None] * a
        return out

    def apply(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return pts + self.displacement(pts)

    def apply_inverse(self, points, iters: int = 40) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        x = pts - self.displacement(pts)
        for _ in range(iters):
            x = pts - self.displacement(x)
        return x


@dataclass
class _Bend:
    """Through-plane bend: z += amp * exp(-((x,y)-c)^2 / 2 s^2); exact inverse."""

    amp: float
    center: np.ndarray  # (2,)
    sigma: float

    def _dz(self, points):
        pts = np.atleast_2d(points)
        r2 = ((pts[:, :2] - self.center) ** 2).sum(axis=1)
        return self.amp * np.exp(-r2 / (2 * self.sigma**2))

    def apply(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float)).copy()
        pts[:, 2] += self._dz(pts)
        return pts

    def apply_inverse(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float)).copy()
        pts[:, 2] -= self._dz(pts)  # dz depends on (x, y) only: exact
        return pts


@dataclass
class _SectionWarp:
    """Small in-plane smooth map, histology -> blockface coordinates."""

    centers: np.ndarray  # (k, 2)
    amps: np.ndarray  # (k, 2)
    sigmas: np.ndarray  # (k,)

    def displacement(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.zeros_like(pts)
        for c, a, s in zip(self.centers, self.amps, self.sigmas):
            w = np.exp(-((pts - c) ** 2).sum(axis=1) / (2 * s**2))
            out += w[:, None] * a
        return out

    def apply(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return pts + self.displacement(pts)


@dataclass
class _BlockTruth:
    pose: AffineTransform  # rigid jitter, bent-slab frame -> block frame
    bend: _Bend

    def exvivo_to_block(self, points) -> np.ndarray:
        return self.pose.apply_points(self.bend.apply(points))

    def block_to_exvivo(self, points) -> np.ndarray:
        return self.bend.apply_inverse(self.pose.inverse().apply_points(points))


@dataclass
class PhantomBundle:
    spec: PhantomSpec
    grid: Grid
    invivo_tissue: ScalarVolume
    invivo_necrosis: ScalarVolume
    invivo_image: ScalarVolume
    invivo_features: list[TriMesh]
    exvivo_tissue: ScalarVolume
    exvivo_necrosis: ScalarVolume
    exvivo_image: ScalarVolume
    exvivo_features: list[TriMesh]
    exvivo_mesh: TriMesh
    excision: _BumpField
    excision_map: DiffeoMap
    stack: BlockStack
    block_truths: list[_BlockTruth]
    block_grids: list[Grid]
    block_volumes: list[ScalarVolume]
    section_warps: list[list[_SectionWarp]]
    landmarks: dict[str, LandmarkSet]
    landmark_blocks: dict[str, int] = field(default_factory=dict)

    def invivo_to_exvivo(self, points) -> np.ndarray:
        return self.excision.apply(points)

    def exvivo_to_invivo(self, points) -> np.ndarray:
        return self.excision.apply_inverse(points)


def _coarse_grid(grid: Grid, factor: int) -> Grid:
    if factor <= 1:
        return grid
    nx, ny, nz = grid.dims
    return Grid(
        (nx // factor, ny // factor, nz // factor),
        tuple(s * factor for s in grid.spacing),
        tuple(
            o + (factor - 1) / 2.0 * s for o, s in zip(grid.origin, grid.spacing)
        ),
    )


def _soft(signed_mm: np.ndarray, width_mm: float) -> np.ndarray:
    """Clamped linear ramp of an (approximate) signed distance in mm: the 0.5
    level sits exactly on the zero set, so marching cubes places vertices on
    the true surface instead of snapping to the voxel lattice."""
    return np.clip(0.5 + signed_mm / width_mm, 0.0, 1.0)


def _smooth_min(a: np.ndarray, b: np.ndarray, w: float) -> np.ndarray:
    """Smooth intersection of two signed distances (rounds the crease by ~w).

    The rounded surface is defined analytically, so meshes extracted on
    different lattices sample the same smooth geometry to O(h^2)."""
    return -w * np.logaddexp(-a / w, -b / w)


def _mesh_from_field(field_fn, grid: Grid, coarsen: int, ramp_cells: float = 2.0) -> TriMesh:
    """Mesh the zero level set of a signed-distance-like field sampled on the
    coarsened grid."""
    cg = _coarse_grid(grid, coarsen)
    width = ramp_cells * max(cg.spacing)
    vals = _soft(field_fn(cg.points()), width).reshape(cg.shape)
    return marching_cubes(ScalarVolume(cg, vals), iso=0.5)


def _ellipsoid_sd(points, center, axes) -> np.ndarray:
    """Approximate signed distance (mm, positive inside) to an ellipsoid."""
    s = (np.atleast_2d(points) - np.asarray(center, float)) / np.asarray(axes, float)
    r = np.sqrt((s**2).sum(axis=1))
    return (1.0 - r) * float(np.min(axes))


def _tube_sd(points, origin, direction, radius) -> np.ndarray:
    p = np.atleast_2d(points) - np.asarray(origin, float)
    d = np.asarray(direction, float)
    along = p @ d
    perp = np.sqrt(np.maximum((p**2).sum(axis=1) - along**2, 0.0))
    return radius - perp


def reslice_block(volume: ScalarVolume, z_mm: float, plane_grid: Grid) -> np.ndarray:
    """Sample a block volume on an xy plane at block-local depth z (binary)."""
    pts2 = plane_grid.points()
    pts3 = np.concatenate([pts2, np.full((len(pts2), 1), z_mm)], axis=1)
    vals, _ = interpolate(volume, pts3)
    return (vals >= 0.5).astype(np.uint8).reshape(plane_grid.shape)


def _rotation(axis, angle_rad) -> np.ndarray:
    axis = np.asarray(axis, float)
    axis = axis / np.linalg.norm(axis)
    kx = np.array(
        [[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]]
    )
    return np.eye(3) + np.sin(angle_rad) * kx + (1 - np.cos(angle_rad)) * (kx @ kx)


def generate(spec: PhantomSpec) -> PhantomBundle:
    rng = np.random.default_rng(spec.seed)
    grid = Grid(spec.dims, spec.spacing)
    pts = grid.points()
    lo, hi = grid.bounds()
    center = (lo + hi) / 2.0
    axes = np.asarray(spec.tissue_axes_mm)

    tissue = _ellipsoid(pts, center, axes)
    necrosis = _ellipsoid(
        pts, center + np.asarray(spec.necrosis_center_mm), spec.necrosis_radii_mm
    )
    necrosis &= tissue

    tubes = []
    tube_params = []
    for _ in range(spec.n_tubes):
        offset = rng.uniform(-0.35, 0.35, size=3) * axes
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        origin = center + offset
        tube_params.append((origin, direction))
        tubes.append(_tube_mask(pts, origin, direction, spec.tube_radius_mm) & tissue)

    texture = 0.5 + 0.5 * np.cos(0.45 * pts[:, 0]) * np.cos(0.35 * pts[:, 1] + 0.2) * np.cos(
        0.4 * pts[:, 2] - 0.4
    )
    image = 0.15 + 0.55 * tissue * texture + 0.25 * necrosis
    for t in tubes:
        image = image + 0.2 * t

    invivo_tissue = ScalarVolume(grid, tissue.astype(np.uint8).reshape(grid.shape))
    invivo_necrosis = ScalarVolume(grid, necrosis.astype(np.uint8).reshape(grid.shape))
    invivo_image = ScalarVolume(grid, image.reshape(grid.shape))

    def tissue_sd(p):
        return _ellipsoid_sd(p, center, axes)

    # crease rounding must exceed the meshing cell so marching cubes resolves
    # it; the rounded geometry is analytic and thus identical across lattices
    fillet = 1.25 * spec.mesh_coarsen * max(spec.spacing)

    def tube_field(origin, direction):
        def field(p):
            return _smooth_min(
                _tube_sd(p, origin, direction, spec.tube_radius_mm), tissue_sd(p), fillet
            )

        return field

    invivo_features = [
        _mesh_from_field(tube_field(o, d), grid, spec.mesh_coarsen)
        for o, d in tube_params
    ]

    # excision surrogate: 3 smooth bumps, jointly bounded by the amplitude
    n_bumps = 3
    bump_centers = center + rng.uniform(-0.5, 0.5, size=(n_bumps, 3)) * axes
    bump_dirs = rng.normal(size=(n_bumps, 3))
    bump_dirs /= np.linalg.norm(bump_dirs, axis=1, keepdims=True)
    bump_amps = bump_dirs * (spec.warp_amplitude_mm / n_bumps)
    bump_sigmas = np.full(n_bumps, 0.9 * float(axes.min()))
    excision = _BumpField(bump_centers, bump_amps, bump_sigmas)
    fwd = excision.displacement(pts).reshape(grid.shape + (3,))
    excision_map = DiffeoMap.from_displacements(grid, fwd)  # fold -> error here

    def warp_label(vol):
        return apply_map_to_volume(vol, excision_map, mode="label")

    exvivo_tissue = warp_label(invivo_tissue)
    exvivo_necrosis = warp_label(invivo_necrosis)
    exvivo_image = apply_map_to_volume(invivo_image, excision_map, mode="linear")

    def in_exvivo(field):
        def warped(p):
            return field(excision.apply_inverse(p))

        return warped

    exv_tissue_field = in_exvivo(tissue_sd)
    exvivo_features = [
        _mesh_from_field(in_exvivo(tube_field(o, d)), grid, spec.mesh_coarsen)
        for o, d in tube_params
    ]
    exvivo_mesh = _mesh_from_field(exv_tissue_field, grid, spec.mesh_coarsen)

    # landmarks on tube centerlines, well inside the tissue
    lm_points = []
    for origin, direction in tube_params:
        for s in np.linspace(-0.8 * float(axes.max()), 0.8 * float(axes.max()), 9):
            p = origin + s * direction
            if _ellipsoid(p[None], center, 0.85 * axes)[0]:
                lm_points.append(p)
    lm_points = np.asarray(lm_points)
    if len(lm_points) < spec.n_landmarks:
        raise ValueError("phantom produced too few landmark candidates")
    sel = np.linspace(0, len(lm_points) - 1, spec.n_landmarks).astype(int)
    lm_points = lm_points[sel]
    ids = tuple(f"L{i:02d}" for i in range(len(lm_points)))
    lm_invivo = LandmarkSet(ids, lm_points, "invivo")
    lm_exvivo = LandmarkSet(ids, excision.apply(lm_points), "exvivo")

    # gross slicing along +z (headward); blocks ordered head->foot. Cut planes
    # snap to boundaries of the coarse meshing lattice so the facing surfaces
    # of adjacent blocks are extracted on the same plane.
    sz = grid.spacing[2]
    oz = grid.origin[2]
    cell = spec.mesh_coarsen * sz

    def snap_cut(z: float, mode=round) -> float:
        m = mode((z - oz + 0.5 * sz) / cell)
        return float(oz + m * cell - 0.5 * sz)

    ztis = np.nonzero(np.asarray(exvivo_tissue.data).any(axis=(1, 2)))[0]
    z_lo = snap_cut(oz + (ztis.min() - 0.5) * sz, mode=np.floor)
    z_hi = snap_cut(oz + (ztis.max() + 0.5) * sz, mode=np.ceil)
    nb = max(1, int(np.ceil((z_hi - z_lo) / spec.slab_thickness_mm)))
    cuts = [snap_cut(z_hi - k * spec.slab_thickness_mm) for k in range(1, nb)]
    min_slab = max(cell, 0.6 * spec.slab_thickness_mm)
    edges = [z_hi]
    for c in cuts:
        if edges[-1] - c >= cell - 1e-9 and c - z_lo >= min_slab - 1e-9:
            edges.append(c)
    edges.append(z_lo)
    nb = len(edges) - 1
    # per-cut crease widths shared by the two adjacent blocks
    thicknesses = [edges[j] - edges[j + 1] for j in range(nb)]
    w_edge = (
        [fillet]
        + [
            min(fillet, 0.3 * thicknesses[j - 1], 0.3 * thicknesses[j])
            for j in range(1, nb)
        ]
        + [fillet]
    )

    section_dz = spec.section_spacing_um / 1000.0
    blocks: list[Block] = []
    block_truths: list[_BlockTruth] = []
    block_grids: list[Grid] = []
    block_volumes: list[ScalarVolume] = []
    section_warps: list[list[_SectionWarp]] = []
    plane_grid = Grid((grid.dims[0], grid.dims[1], 1), grid.spacing, grid.origin)
    exv_pts_xy = plane_grid.points()

    for b in range(nb):
        hi_b, lo_b = edges[b], edges[b + 1]
        slab_center = np.array([center[0], center[1], (hi_b + lo_b) / 2.0])

        bend = _Bend(
            amp=float(rng.choice([-1.0, 1.0]) * spec.bend_amplitude_mm),
            center=center[:2] + rng.uniform(-0.3, 0.3, size=2) * axes[:2],
            sigma=0.8 * float(axes[:2].min()),
        )
        ang = np.deg2rad(rng.uniform(-spec.jitter_rotation_deg, spec.jitter_rotation_deg))
        rot_axis = rng.normal(size=3)
        trans = rng.uniform(-spec.jitter_translation_mm, spec.jitter_translation_mm, size=3)
        rot = _rotation(rot_axis, ang)
        pose = AffineTransform(rot, slab_center - rot @ slab_center + trans)
        truth = _BlockTruth(pose, bend)

        # block-local grid: tissue xy footprint, slab z extent, generous
        # padding; the z origin stays on the global coarse lattice
        pad = 4.0 + spec.jitter_translation_mm + abs(spec.bend_amplitude_mm)
        z0_idx = int(np.floor((lo_b - pad - oz) / sz))
        z0_idx -= z0_idx % spec.mesh_coarsen
        bg_lo = np.array([lo[0], lo[1], oz + z0_idx * sz])
        bg_hi = np.array([hi[0], hi[1], hi_b + pad])
        dims_b = np.ceil((bg_hi - bg_lo) / np.asarray(grid.spacing)).astype(int) + 1
        bgrid = Grid(tuple(int(d) for d in dims_b), grid.spacing, tuple(bg_lo))

        qpts = bgrid.points()
        src = truth.block_to_exvivo(qpts)
        tvals, _ = interpolate(exvivo_tissue, src)
        nvals, _ = interpolate(exvivo_necrosis, src)
        in_slab = (src[:, 2] >= lo_b) & (src[:, 2] < hi_b)
        bmask = ((tvals >= 0.5) & in_slab).astype(np.uint8).reshape(bgrid.shape)
        nmask = ((nvals >= 0.5) & in_slab).astype(np.uint8).reshape(bgrid.shape)
        bvol = ScalarVolume(bgrid, bmask)
        nvol = ScalarVolume(bgrid, nmask)

        w_head, w_foot = w_edge[b], w_edge[b + 1]
        head_is_cut = b > 0
        foot_is_cut = b < nb - 1

        def block_field(q, _truth=truth, _lo=lo_b, _hi=hi_b, _wh=w_head, _wf=w_foot,
                        _hc=head_is_cut, _fc=foot_is_cut):
            p = _truth.block_to_exvivo(q)
            f = exv_tissue_field(p)
            if _hc:
                f = _smooth_min(f, _hi - p[:, 2], _wh)
            if _fc:
                f = _smooth_min(f, p[:, 2] - _lo, _wf)
            return f

        mesh = _mesh_from_field(block_field, bgrid, spec.mesh_coarsen)
        # geometry-derived overrides stand in for the manual face segmentation:
        # normal-labeled head/foot faces that are not on the true cut plane
        # (curvature bleed) are demoted to exterior; end caps keep the normal
        # rule since the end blocks have no outward cut
        base = partition_faces(mesh, (0, 0, 1), cos_threshold=spec.partition_cos_threshold)
        centers_exv = truth.block_to_exvivo(mesh.face_centers())
        f_normals = mesh.face_normals()
        nz_abs = np.abs(f_normals[:, 2]) / np.sqrt((f_normals**2).sum(axis=1))
        band = 0.15 * cell
        overrides: dict[int, str] = {}
        if b > 0:
            for fi in base.indices("head"):
                if hi_b - centers_exv[fi, 2] > band or nz_abs[fi] < 0.95:
                    overrides[int(fi)] = "exterior"
        if b < nb - 1:
            for fi in base.indices("foot"):
                if centers_exv[fi, 2] - lo_b > band or nz_abs[fi] < 0.95:
                    overrides[int(fi)] = "exterior"
        partition = partition_faces(
            mesh,
            (0, 0, 1),
            cos_threshold=spec.partition_cos_threshold,
            overrides=overrides,
        )

        # block-local z extent of tissue, sectioned every section_dz
        kz = np.nonzero(bmask.any(axis=(1, 2)))[0]
        zb_lo = bgrid.origin[2] + kz.min() * bgrid.spacing[2]
        zb_hi = bgrid.origin[2] + kz.max() * bgrid.spacing[2]
        n_sections = max(1, int(np.floor((zb_hi - zb_lo) / section_dz)))
        warps_b: list[_SectionWarp] = []
        sections: list[Section] = []
        for k in range(n_sections):
            z_s = float(zb_lo + (k + 0.5) * section_dz)
            bf_mask = reslice_block(bvol, z_s, plane_grid)
            bf_necr = reslice_block(nvol, z_s, plane_grid)
            w = _SectionWarp(
                centers=center[None, :2] + rng.uniform(-0.4, 0.4, size=(2, 2)) * axes[None, :2],
                amps=rng.uniform(-1.0, 1.0, size=(2, 2))
                * (spec.inplane_warp_mm / 2.0),
                sigmas=np.full(2, 0.5 * float(axes[:2].min())),
            )
            warps_b.append(w)
            src_xy = w.apply(exv_pts_xy)
            hvals, _ = interpolate(ScalarImage(plane_grid, bf_mask.astype(float)), src_xy)
            hnec, _ = interpolate(ScalarImage(plane_grid, bf_necr.astype(float)), src_xy)
            hist = (hvals >= 0.5).astype(np.uint8).reshape(plane_grid.shape)
            hnecr = (hnec >= 0.5).astype(np.uint8).reshape(plane_grid.shape)
            sections.append(
                Section(
                    index=k,
                    z_mm=z_s,
                    blockface=ScalarImage(plane_grid, bf_mask),
                    histology=ScalarImage(plane_grid, hist),
                    necrosis=ScalarImage(plane_grid, hnecr),
                )
            )
        blocks.append(Block(mesh=mesh, partition=partition, sections=sections, z_range=(lo_b, hi_b)))
        block_truths.append(truth)
        block_grids.append(bgrid)
        block_volumes.append(bvol)
        section_warps.append(warps_b)

    stack = BlockStack(blocks=blocks, axis=np.array([0.0, 0.0, 1.0]))

    landmarks = {"invivo": lm_invivo, "exvivo": lm_exvivo}
    # 2D landmark pairs on a few center-block sections (tissue-edge style)
    t_center = nb // 2
    secs = blocks[t_center].sections
    for k in sorted({0, len(secs) // 2, len(secs) - 1}):
        sec = secs[k]
        w = section_warps[t_center][k]
        mask = np.asarray(sec.histology.data)[0]
        jj, ii = np.nonzero(mask)
        if len(ii) < 5:
            continue
        pick = np.linspace(0, len(ii) - 1, 5).astype(int)
        pts_h = plane_grid.index_to_world(np.stack([ii[pick], jj[pick]], axis=1).astype(float))
        pts_bf = w.apply(pts_h)
        pids = tuple(f"S{k:03d}P{m}" for m in range(len(pick)))
        zeros = np.zeros((len(pick), 1))
        landmarks[f"histology_b{t_center}_s{k}"] = LandmarkSet(
            pids, np.concatenate([pts_h, zeros], axis=1), "histology"
        )
        landmarks[f"blockface_b{t_center}_s{k}"] = LandmarkSet(
            pids, np.concatenate([pts_bf, zeros], axis=1), "block"
        )
    landmark_blocks: dict[str, int] = {}
    exv_lm = np.asarray(lm_exvivo.points)
    for b in range(nb):
        lo_b, hi_b = blocks[b].z_range
        inside = (exv_lm[:, 2] >= lo_b) & (exv_lm[:, 2] < hi_b)
        if not inside.any():
            continue
        sub_ids = tuple(i for i, keep in zip(ids, inside) if keep)
        pts_b = block_truths[b].exvivo_to_block(exv_lm[inside])
        landmarks[f"block_{b}"] = LandmarkSet(sub_ids, pts_b, "block")
        for i in sub_ids:
            landmark_blocks[i] = b

    return PhantomBundle(
        spec=spec,
        grid=grid,
        invivo_tissue=invivo_tissue,
        invivo_necrosis=invivo_necrosis,
        invivo_image=invivo_image,
        invivo_features=invivo_features,
        exvivo_tissue=exvivo_tissue,
        exvivo_necrosis=exvivo_necrosis,
        exvivo_image=exvivo_image,
        exvivo_features=exvivo_features,
        exvivo_mesh=exvivo_mesh,
        excision=excision,
        excision_map=excision_map,
        stack=stack,
        block_truths=block_truths,
        block_grids=block_grids,
        block_volumes=block_volumes,
        section_warps=section_warps,
        landmarks=landmarks,
        landmark_blocks=landmark_blocks,
    )


def write_bundle(bundle: PhantomBundle, out_dir) -> None:
    """Emit the bundle in the pipeline's file formats plus a truth directory."""
    out = Path(out_dir)
    (out / "invivo").mkdir(parents=True, exist_ok=True)
    (out / "exvivo").mkdir(exist_ok=True)
    (out / "truth" / "landmarks").mkdir(parents=True, exist_ok=True)

    g = bundle.grid
    write_rvol(out / "invivo" / "tissue.rvol", g, np.asarray(bundle.invivo_tissue.data), "u8")
    write_rvol(out / "invivo" / "necrosis.rvol", g, np.asarray(bundle.invivo_necrosis.data), "u8")
    write_rvol(out / "invivo" / "image.rvol", g, np.asarray(bundle.invivo_image.data), "f32")
    write_rvol(out / "exvivo" / "tissue.rvol", g, np.asarray(bundle.exvivo_tissue.data), "u8")
    write_rvol(out / "exvivo" / "necrosis.rvol", g, np.asarray(bundle.exvivo_necrosis.data), "u8")
    write_rvol(out / "exvivo" / "image.rvol", g, np.asarray(bundle.exvivo_image.data), "f32")
    write_obj(out / "exvivo" / "tissue_mesh.obj", bundle.exvivo_mesh)
    for i, m in enumerate(bundle.invivo_features):
        write_obj(out / "invivo" / f"feature_{i}.obj", m)
    for i, m in enumerate(bundle.exvivo_features):
        write_obj(out / "exvivo" / f"feature_{i}.obj", m)

    write_diffeo(out / "truth" / "excision", bundle.excision_map)
    sections_meta = []
    for b, (block, bgrid, bvol) in enumerate(
        zip(bundle.stack.blocks, bundle.block_grids, bundle.block_volumes)
    ):
        bdir = out / "blocks" / f"{b:02d}"
        (bdir / "sections").mkdir(parents=True, exist_ok=True)
        write_rvol(bdir / "mask.rvol", bgrid, np.asarray(bvol.data), "u8")
        write_obj(bdir / "mesh.obj", block.mesh)
        write_partition(bdir / "partition.txt", block.partition)
        write_affine(out / "truth" / f"block_{b:02d}_pose.affine", bundle.block_truths[b].pose)
        for sec in block.sections:
            sdir = bdir / "sections" / f"{sec.index:04d}"
            sdir.mkdir(exist_ok=True)
            pg = sec.blockface.grid
            write_rvol(sdir / "blockface.rvol", pg, np.asarray(sec.blockface.data), "u8")
            write_rvol(sdir / "histology.rvol", pg, np.asarray(sec.histology.data), "u8")
            write_rvol(sdir / "necrosis.rvol", pg, np.asarray(sec.necrosis.data), "u8")
            sections_meta.append({"block": b, "index": sec.index, "z_mm": sec.z_mm})

    for name, lm in sorted(bundle.landmarks.items()):
        write_landmarks(out / "truth" / "landmarks" / f"{name}.csv", lm)

    manifest = {
        "spec": bundle.spec.config_dict(),
        "n_blocks": bundle.stack.n_blocks,
        "block_z_ranges": [list(b.z_range) for b in bundle.stack.blocks],
        "sections": sections_meta,
        "axis": [float(v) for v in bundle.stack.axis],
        "landmark_blocks": bundle.landmark_blocks,
    }
    (out / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
