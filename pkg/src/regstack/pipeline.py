"""Pipeline orchestration: block stack rebuild, whole-tissue registrations,
transform chains from histology sections into the in vivo frame, and dense
label volumization.

Block rebuild follows the center-out schedule: the center block (index nb//2)
is fixed; blocks are registered sequentially outward, head-ward then
foot-ward, each facing surface onto the deformed neighbor's opposing face
(affine, then diffeomorphic refinement), the deformed block becoming the next
target. Deformed exteriors are then unioned and registered to the ex vivo
surface.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .currents import KernelSpec, currents_distance_sq
from .grid import AffineTransform, DiffeoMap, Grid, ScalarImage, ScalarVolume, interpolate
from .mesh import FacePartition, TriMesh, flip_mesh, submesh, transform_mesh, union_meshes
from .surface_reg import (
    default_flow_grid,
    flow_to_diffeo,
    register_affine_surface_multi,
    register_diffeo_surface_multi,
)

__all__ = [
    "Section",
    "Block",
    "BlockStack",
    "PlaneEmbedding",
    "ChainLink",
    "TransformChain",
    "RebuildResult",
    "rebuild_blocks",
    "register_exvivo_to_invivo",
    "register_sections",
    "build_full_chain",
    "volumize_histology",
]

SPACES = ("histology", "block", "reconstructed-blocks", "exvivo", "invivo")

GAP_TOLERANCE_MM = 0.3


@dataclass(frozen=True)
class PlaneEmbedding:
    """2D <-> 3D hop: (x, y) -> (x, y, z_mm). The inverse projects points
    (assumed on or near the plane) back to in-plane coordinates."""

    z_mm: float

    def apply_points(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if pts.shape[1] != 2:
            raise ValueError("PlaneEmbedding applies to 2D points")
        z = np.full((len(pts), 1), self.z_mm)
        return np.concatenate([pts, z], axis=1)

    def apply_points_inverse(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if pts.shape[1] != 3:
            raise ValueError("PlaneEmbedding inverse applies to 3D points")
        return pts[:, :2].copy()


def _apply_link(transform, pts, inverse=False):
    if isinstance(transform, AffineTransform):
        return (transform.inverse() if inverse else transform).apply_points(pts)
    if isinstance(transform, DiffeoMap):
        return transform.apply_points_inverse(pts) if inverse else transform.apply_points(pts)
    if isinstance(transform, PlaneEmbedding):
        return transform.apply_points_inverse(pts) if inverse else transform.apply_points(pts)
    raise TypeError(f"unsupported chain link {type(transform).__name__}")


@dataclass(frozen=True)
class ChainLink:
    transform: object
    source: str
    target: str

    def __post_init__(self):
        for name in (self.source, self.target):
            if name not in SPACES:
                raise ValueError(f"unknown space label {name!r}")


@dataclass(frozen=True)
class TransformChain:
    """Ordered, space-labeled transform links; composition is well-typed."""

    links: tuple[ChainLink, ...]

    def __post_init__(self):
        links = tuple(self.links)
        for a, b in zip(links, links[1:]):
            if a.target != b.source:
                raise ValueError(
                    f"chain break: link into {a.target!r} followed by link from {b.source!r}"
                )
        object.__setattr__(self, "links", links)

    @property
    def source(self) -> str:
        return self.links[0].source if self.links else ""

    @property
    def target(self) -> str:
        return self.links[-1].target if self.links else ""

    def compose(self, then: "TransformChain") -> "TransformChain":
        if self.links and then.links and self.target != then.source:
            raise ValueError(f"cannot chain {self.target!r} into {then.source!r}")
        return TransformChain(self.links + then.links)

    def apply_points(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        for link in self.links:
            pts = _apply_link(link.transform, pts)
        return pts

    def apply_points_inverse(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        for link in reversed(self.links):
            pts = _apply_link(link.transform, pts, inverse=True)
        return pts

    def split_at_embedding(self):
        """(2D links, embedding, 3D links); raises when no embedding exists."""
        for i, link in enumerate(self.links):
            if isinstance(link.transform, PlaneEmbedding):
                return (
                    TransformChain(self.links[:i]),
                    link.transform,
                    TransformChain(self.links[i + 1:]),
                )
        raise ValueError("chain has no plane-embedding link")


@dataclass
class Section:
    """One histology section and its blockface counterpart, in block-local
    in-plane coordinates at depth z_mm."""

    index: int
    z_mm: float
    blockface: ScalarImage
    histology: ScalarImage
    necrosis: ScalarImage
    transforms: tuple | None = None  # (AffineTransform 2D, DiffeoMap 2D) after R1


@dataclass
class Block:
    mesh: TriMesh
    partition: FacePartition
    sections: list[Section]
    z_range: tuple[float, float]  # slab extent along the slicing axis, pre-jitter

    def face(self, label: str) -> TriMesh:
        return submesh(self.mesh, self.partition.indices(label))


@dataclass
class BlockStack:
    """Blocks ordered head to foot along the headward ``axis``."""

    blocks: list[Block]
    axis: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))

    def __post_init__(self):
        ax = np.asarray(self.axis, dtype=float)
        self.axis = ax / np.linalg.norm(ax)
        if not self.blocks:
            raise ValueError("empty block stack")
        n = len(self.blocks)
        for i, b in enumerate(self.blocks):
            lo, hi = b.z_range
            if hi <= lo:
                raise ValueError(f"block {i}: bad z range {b.z_range}")
            has_head = len(b.partition.indices("head")) > 0
            has_foot = len(b.partition.indices("foot")) > 0
            if i > 0 and not has_head:
                raise ValueError(f"block {i}: interior block lacks a head face")
            if i < n - 1 and not has_foot:
                raise ValueError(f"block {i}: interior block lacks a foot face")
        # ordered head->foot: descending ranges, contiguous within tolerance
        for i in range(n - 1):
            lo_i, _ = self.blocks[i].z_range
            _, hi_next = self.blocks[i + 1].z_range
            gap = abs(lo_i - hi_next)
            if gap > GAP_TOLERANCE_MM:
                raise ValueError(
                    f"blocks {i} and {i + 1} are not contiguous: gap {gap:.3g} mm "
                    f"exceeds {GAP_TOLERANCE_MM} mm"
                )

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)


@dataclass
class RebuildResult:
    block_chains: list[TransformChain]  # block -> reconstructed-blocks
    recon_mesh: TriMesh  # union of deformed exteriors, reconstructed space
    exvivo_chain: TransformChain  # reconstructed-blocks -> exvivo
    log: list[dict]


def _deform_mesh(mesh: TriMesh, chain: TransformChain) -> TriMesh:
    return mesh.with_vertices(chain.apply_points(mesh.vertices))


def _block_flow_grid(meshes, sigma_flow):
    return default_flow_grid(meshes, sigma_flow, margin_factor=2.5)


def rebuild_blocks(
    stack: BlockStack,
    exvivo: TriMesh,
    kern: KernelSpec,
    constraint: str = "free",
    dof: str = "affine12",
    reg_weight: float | None = None,
    deformation_kernel: KernelSpec | None = None,
    max_iters: int = 120,
    diffeo_max_iters: int = 60,
) -> RebuildResult:
    """Reassemble jittered blocks center-out and register the result to the
    ex vivo surface. Every sub-registration honors ``constraint``."""
    nb = stack.n_blocks
    t = nb // 2
    kern_flow = deformation_kernel or KernelSpec(2.0 * kern.sigma)
    log: list[dict] = []
    chains: dict[int, TransformChain] = {t: TransformChain(())}
    deformed: dict[int, TriMesh] = {t: stack.blocks[t].mesh}

    def register_block(b: int, moving_label: str, target_face: TriMesh):
        blk = stack.blocks[b]
        moving_face = blk.face(moving_label)
        aff = register_affine_surface_multi(
            [(moving_face, target_face)], kern, dof=dof, constraint=constraint,
            max_iters=max_iters,
        )
        moved_face = transform_mesh(moving_face, aff.transform)
        moved_block = transform_mesh(blk.mesh, aff.transform)
        grid = _block_flow_grid([moved_block, target_face], kern_flow.sigma)
        dif = register_diffeo_surface_multi(
            [(moved_face, target_face)], kern, reg_weight=reg_weight,
            constraint=constraint, deformation_kernel=kern_flow, grid=grid,
            max_iters=diffeo_max_iters,
        )
        dmap = flow_to_diffeo(dif.flow)
        chain = TransformChain(
            (
                ChainLink(aff.transform, "block", "block"),
                ChainLink(dmap, "block", "reconstructed-blocks"),
            )
        )
        log.append(
            {
                "stage": "block",
                "block": b,
                "moving_face": moving_label,
                "d2_initial": aff.initial_distance,
                "d2_after_affine": aff.final_distance,
                "d2_after_diffeo": dif.final_distance,
                "affine_converged": aff.converged,
                "diffeo_converged": dif.converged,
                "constraint": constraint,
            }
        )
        chains[b] = chain
        deformed[b] = _deform_mesh(blk.mesh, chain)

    # head-ward: blocks t-1 .. 0, moving foot face onto the neighbor's head
    # face. Facing cut surfaces carry opposite outward orientations, so the
    # target winding is flipped to make the currents comparable.
    for b in range(t - 1, -1, -1):
        neighbor = deformed[b + 1]
        target = flip_mesh(submesh(neighbor, stack.blocks[b + 1].partition.indices("head")))
        register_block(b, "foot", target)
    # foot-ward: blocks t+1 .. nb-1, moving head face onto the neighbor's foot face
    for b in range(t + 1, nb):
        neighbor = deformed[b - 1]
        target = flip_mesh(submesh(neighbor, stack.blocks[b - 1].partition.indices("foot")))
        register_block(b, "head", target)

    exteriors = [
        submesh(deformed[b], stack.blocks[b].partition.indices("exterior"))
        for b in range(nb)
    ]
    recon = union_meshes(exteriors)

    aff = register_affine_surface_multi(
        [(recon, exvivo)], kern, dof=dof, constraint=constraint, max_iters=max_iters
    )
    moved = transform_mesh(recon, aff.transform)
    grid = _block_flow_grid([moved, exvivo], kern_flow.sigma)
    dif = register_diffeo_surface_multi(
        [(moved, exvivo)], kern, reg_weight=reg_weight, constraint=constraint,
        deformation_kernel=kern_flow, grid=grid, max_iters=diffeo_max_iters,
    )
    dmap = flow_to_diffeo(dif.flow)
    exvivo_chain = TransformChain(
        (
            ChainLink(aff.transform, "reconstructed-blocks", "reconstructed-blocks"),
            ChainLink(dmap, "reconstructed-blocks", "exvivo"),
        )
    )
    log.append(
        {
            "stage": "exterior",
            "d2_initial": aff.initial_distance,
            "d2_after_affine": aff.final_distance,
            "d2_after_diffeo": dif.final_distance,
            "affine_converged": aff.converged,
            "diffeo_converged": dif.converged,
            "constraint": constraint,
        }
    )
    block_chains = [chains[b] for b in range(nb)]
    return RebuildResult(block_chains, recon, exvivo_chain, log)


def register_exvivo_to_invivo(
    exvivo_features: list[TriMesh],
    invivo_features: list[TriMesh],
    kern: KernelSpec,
    reg_weight: float | None = None,
    deformation_kernel: KernelSpec | None = None,
    grid: Grid | None = None,
    dof: str = "affine12",
    max_iters: int = 500,
) -> TransformChain:
    """Single affine + single flow jointly minimizing the summed currents
    distances over paired feature surfaces (paired by list order)."""
    if not exvivo_features or len(exvivo_features) != len(invivo_features):
        raise ValueError("need equal, non-empty feature mesh lists")
    pairs = list(zip(exvivo_features, invivo_features))
    aff = register_affine_surface_multi(pairs, kern, dof=dof, max_iters=max_iters)
    moved = [(transform_mesh(m, aff.transform), t) for m, t in pairs]
    kern_flow = deformation_kernel or KernelSpec(2.0 * kern.sigma)
    flow_grid = grid or default_flow_grid(
        [m for m, _ in moved] + [t for _, t in moved], kern_flow.sigma
    )
    dif = register_diffeo_surface_multi(
        moved, kern, reg_weight=reg_weight, deformation_kernel=kern_flow,
        grid=flow_grid, max_iters=max_iters,
    )
    dmap = flow_to_diffeo(dif.flow)
    return TransformChain(
        (
            ChainLink(aff.transform, "exvivo", "exvivo"),
            ChainLink(dmap, "exvivo", "invivo"),
        )
    )


def register_sections(stack: BlockStack, fluid_cfg=None, dof: str = "affine6") -> None:
    """Fill each section's histology->blockface transforms (affine + fluid)."""
    from .image_reg import FluidConfig, register_affine_image, register_fluid, warp_image_affine

    cfg = fluid_cfg or FluidConfig()
    for block in stack.blocks:
        for sec in block.sections:
            aff = register_affine_image(sec.histology, sec.blockface, dof=dof)
            aligned = warp_image_affine(sec.histology, aff)
            res = register_fluid(aligned, sec.blockface, cfg)
            sec.transforms = (aff, res.dmap)


def section_chain_2d(section: Section) -> TransformChain:
    if section.transforms is None:
        raise ValueError(
            f"missing link: section {section.index} has no histology->block transforms"
        )
    aff, dmap = section.transforms
    return TransformChain(
        (
            ChainLink(aff, "histology", "histology"),
            ChainLink(dmap, "histology", "block"),
        )
    )


def build_full_chain(
    section: Section,
    block_chain: TransformChain,
    exvivo_chain: TransformChain,
    invivo_chain: TransformChain,
) -> TransformChain:
    """histology (2D) -> blockface plane -> block -> reconstructed-blocks ->
    exvivo -> invivo, type-checked end to end."""
    chain2d = section_chain_2d(section)
    embed = TransformChain((ChainLink(PlaneEmbedding(section.z_mm), "block", "block"),))
    return chain2d.compose(embed).compose(block_chain).compose(exvivo_chain).compose(invivo_chain)


def volumize_histology(
    sections: list[tuple[Section, TransformChain]],
    target_grid: Grid,
    max_gap_mm: float | None = None,
) -> ScalarVolume:
    """Map 2D necrosis labels through their chains into the target grid.

    Between-section voxels are filled by linear interpolation of the two
    nearest mapped sections along the section normal (the block-local z axis),
    then thresholded at 0.5. Voxels farther than ``max_gap_mm`` from any
    section (default: one median section gap) are background."""
    if not sections:
        raise ValueError("no sections to volumize")
    if all(float(np.asarray(s.necrosis.data).max()) == 0 for s, _ in sections):
        warnings.warn("all sections empty; volumized label is empty")
        return ScalarVolume(target_grid, np.zeros(target_grid.shape, dtype=np.uint8))

    pts = target_grid.points()
    n_vox = len(pts)
    best_above = np.full(n_vox, np.inf)
    best_below = np.full(n_vox, np.inf)
    val_above = np.zeros(n_vox)
    val_below = np.zeros(n_vox)

    # group sections by their 3D sub-chain so the expensive inverse mapping of
    # the target grid runs once per block
    groups: dict[int, tuple[TransformChain, list[tuple[Section, TransformChain]]]] = {}
    keys: dict[int, TransformChain] = {}
    for sec, chain in sections:
        _, _, links3d = chain.split_at_embedding()
        key = None
        for k, existing in keys.items():
            if existing is links3d or existing.links == links3d.links:
                key = k
                break
        if key is None:
            key = len(keys)
            keys[key] = links3d
            groups[key] = (links3d, [])
        groups[key][1].append((sec, chain))

    gaps = []
    for _, (links3d, members) in sorted(groups.items()):
        q = links3d.apply_points_inverse(pts)
        zs = sorted(s.z_mm for s, _ in members)
        gaps.extend(np.diff(zs).tolist())
        for sec, chain in members:
            chain2d, _, _ = chain.split_at_embedding()
            delta = q[:, 2] - sec.z_mm
            hist_xy = chain2d.apply_points_inverse(q[:, :2])
            vals, _ = interpolate(sec.necrosis, hist_xy)
            above = (delta >= 0) & (delta < best_above)
            below = (delta < 0) & (-delta < best_below)
            best_above[above] = delta[above]
            val_above[above] = vals[above]
            best_below[below] = -delta[below]
            val_below[below] = vals[below]

    gap = max_gap_mm if max_gap_mm is not None else (
        float(np.median(gaps)) if gaps else np.inf
    )
    out = np.zeros(n_vox)
    both = np.isfinite(best_above) & np.isfinite(best_below)
    w_above = np.zeros(n_vox)
    denom = best_above + best_below
    w_above[both] = best_below[both] / denom[both]
    out[both] = w_above[both] * val_above[both] + (1 - w_above[both]) * val_below[both]
    only_above = np.isfinite(best_above) & ~np.isfinite(best_below) & (best_above <= gap)
    only_below = np.isfinite(best_below) & ~np.isfinite(best_above) & (best_below <= gap)
    out[only_above] = val_above[only_above]
    out[only_below] = val_below[only_below]

    label = (out >= 0.5).astype(np.uint8).reshape(target_grid.shape)
    return ScalarVolume(target_grid, label)
