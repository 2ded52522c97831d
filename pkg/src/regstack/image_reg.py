"""Intensity-based 2D registration of segmentation images.

Affine stage: multi-resolution SSD gradient descent (rigid or full affine).
Deformable stage: greedy fluid flow. Each iteration warps the moving image
through the current inverse map, builds the body force
f = -(J - I0) * grad(J), smooths it spectrally with the inverse of
L = -alpha*Laplacian - beta*grad(div) + gamma*I under periodic boundary
(zero-padded), and takes a semi-Lagrangian step with the displacement capped
per step. The composition restarts (regrid) whenever the incremental map's
Jacobian determinant drops below the configured floor.

Transforms returned by this module map moving-space points to fixed-space
points; image resampling uses their inverse.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import (
    AffineTransform,
    DiffeoMap,
    Grid,
    ScalarImage,
    VectorField,
    interpolate,
    jacobian_determinant,
    refine_inverse,
    sample_field,
)

__all__ = [
    "FluidConfig",
    "FluidResult",
    "register_affine_image",
    "register_fluid",
    "stack_blockface",
    "smoothing_inverse",
    "downsample_image",
    "gaussian_blur",
    "warp_image_affine",
]


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class FluidConfig:
    alpha: float = 1.0
    beta: float = 0.0
    gamma: float = 0.1
    max_iters: int = 500
    step_tolerance: float = 1e-6
    jacobian_floor: float = 0.5
    scales: tuple[int, ...] = (4, 2, 1)
    pad_fraction: float = 0.25
    max_step_voxels: float = 0.4
    blur_sigma_px: float = 1.0

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be > 0 (invertible smoothing operator)")
        if not (0 < self.jacobian_floor < 1):
            raise ValueError("jacobian_floor must be in (0, 1)")


@dataclass
class FluidResult:
    dmap: DiffeoMap
    energies: list[list[float]]  # accepted-iterate energies per scale
    scales: tuple[int, ...]
    regrids: int
    final_energy: float
    initial_energy: float


# ---------------------------------------------------------------------------
# Image helpers

def _img2d(img: ScalarImage) -> np.ndarray:
    data = np.asarray(img.data, dtype=float)
    if data.shape[0] != 1:
        raise ValueError("expected a 2D image (nz == 1)")
    return data[0]


def gaussian_blur(arr: np.ndarray, sigma_px: float) -> np.ndarray:
    """Separable Gaussian blur with reflected boundary; sigma in pixels."""
    if sigma_px <= 0:
        return arr.astype(float)
    radius = max(1, int(np.ceil(3.0 * sigma_px)))
    xs = np.arange(-radius, radius + 1, dtype=float)
    k = np.exp(-0.5 * (xs / sigma_px) ** 2)
    k /= k.sum()
    out = arr.astype(float)
    for axis in range(2):
        padded = np.pad(out, [(radius, radius) if a == axis else (0, 0) for a in range(2)], mode="reflect")
        out = np.apply_along_axis(lambda m: np.convolve(m, k, mode="valid"), axis, padded)
    return out


def downsample_image(img: ScalarImage, factor: int) -> ScalarImage:
    """Box-average downsampling; trailing rows/cols beyond a multiple of the
    factor are dropped."""
    if factor == 1:
        return img
    a = _img2d(img)
    ny, nx = a.shape
    my, mx = ny // factor, nx // factor
    a = a[: my * factor, : mx * factor]
    a = a.reshape(my, factor, mx, factor).mean(axis=(1, 3))
    g = img.grid
    new = Grid(
        (mx, my, 1),
        (g.spacing[0] * factor, g.spacing[1] * factor, g.spacing[2]),
        (
            g.origin[0] + (factor - 1) / 2.0 * g.spacing[0],
            g.origin[1] + (factor - 1) / 2.0 * g.spacing[1],
            g.origin[2],
        ),
    )
    return ScalarImage(new, a[None, :, :])


def _image_gradient(a: np.ndarray, spacing) -> tuple[np.ndarray, np.ndarray]:
    gy, gx = np.gradient(a, spacing[1], spacing[0])
    return gx, gy


def warp_image_affine(img: ScalarImage, transform: AffineTransform, mode: str = "linear") -> ScalarImage:
    """Resample an image through an affine that maps moving points to fixed
    points: out(x) = img(transform^-1(x)) on the image's own grid."""
    inv = transform.inverse()
    pts = img.grid.points()
    vals, _ = interpolate(img, inv.apply_points(pts))
    out = vals.reshape(img.grid.shape)
    if mode == "label":
        out = (out >= 0.5).astype(np.uint8)
    return ScalarImage(img.grid, out)


# ---------------------------------------------------------------------------
# Affine stage

def _rot2(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def register_affine_image(
    moving: ScalarImage,
    fixed: ScalarImage,
    dof: str = "rigid3",
    max_iters: int = 300,
    scales: tuple[int, ...] = (4, 2, 1),
    blur_sigma_px: float = 1.0,
) -> AffineTransform:
    """Minimize SSD(moving o B, fixed) over 2D rigid or affine B by
    multi-resolution gradient descent; returns B^-1, the transform carrying
    moving-space points to fixed-space points."""
    if dof not in ("rigid3", "affine6"):
        raise ValueError(f"unknown dof {dof!r}")
    if np.ptp(np.asarray(moving.data)) == 0 or np.ptp(np.asarray(fixed.data)) == 0:
        raise ValueError("no overlap: an input image is constant")

    # resampler state: lookup(x) = m @ (x - center) + center + t
    m = np.eye(2)
    t = np.zeros(2)

    for scale in scales:
        mov = downsample_image(moving, scale)
        fix = downsample_image(fixed, scale)
        mov_a = gaussian_blur(_img2d(mov), blur_sigma_px)
        fix_a = gaussian_blur(_img2d(fix), blur_sigma_px)
        mov_s = ScalarImage(mov.grid, mov_a[None])
        gx_a, gy_a = _image_gradient(mov_a, mov.grid.spacing)
        grad_x = ScalarImage(mov.grid, gx_a[None])
        grad_y = ScalarImage(mov.grid, gy_a[None])
        pts = fix.grid.points()
        center = pts.mean(axis=0)
        radius = max(float(np.sqrt(((pts - center) ** 2).sum(axis=1).mean())), 1e-6)
        pixarea = fix.grid.spacing[0] * fix.grid.spacing[1]
        fvals = fix_a.reshape(-1)

        def lookup(mm, tt):
            return (pts - center) @ mm.T + center + tt

        def energy(state):
            mm, tt = state
            w, _ = interpolate(mov_s, lookup(mm, tt))
            return float(((w - fvals) ** 2).sum()) * pixarea

        def grad(state):
            mm, tt = state
            lp = lookup(mm, tt)
            w, _ = interpolate(mov_s, lp)
            gx, _ = interpolate(grad_x, lp)
            gy, _ = interpolate(grad_y, lp)
            r = 2.0 * (w - fvals) * pixarea
            gimg = np.stack([r * gx, r * gy], axis=1)
            g_t = gimg.sum(axis=0)
            local = pts - center
            if dof == "affine6":
                g_m = gimg.T @ local
                d_m = g_m / radius**2
                slope = float((g_m * d_m).sum() + g_t @ g_t)
                return (g_m, g_t, d_m), slope
            # rigid: theta gradient via dR/dtheta
            g_th = float((gimg * (local @ _rot2(np.pi / 2).T @ mm.T)).sum())
            d_th = g_th / radius**2
            slope = float(g_th * d_th + g_t @ g_t)
            return (g_th, g_t, d_th), slope

        state = (m, t)
        e = energy(state)
        if scale == scales[0] and e > 0:
            _, slope0 = grad(state)
            # nonzero residual with a (numerically) vanished gradient means
            # the supports do not overlap
            if slope0 <= (1e-12 * e / min(fix.grid.spacing[:2])) ** 2:
                raise ValueError("no overlap: SSD gradient is zero at initialization")
        s_prev = None
        for _ in range(max_iters):
            gparts, slope = grad(state)
            if slope <= 0:
                break
            if dof == "affine6":
                g_m, g_t, d_m = gparts
                vel = np.linalg.norm(g_t) + np.linalg.norm(d_m) * radius
            else:
                g_th, g_t, d_th = gparts
                vel = np.linalg.norm(g_t) + abs(d_th) * radius
            s_cap = 2.0 * min(fix.grid.spacing[:2]) / max(vel, 1e-30)
            s = s_cap if s_prev is None else min(2 * s_prev, s_cap)
            accepted = False
            while s > 1e-14:
                if dof == "affine6":
                    cand = (state[0] - s * gparts[2], state[1] - s * gparts[1])
                    if abs(np.linalg.det(cand[0])) < 1e-6:
                        s *= 0.5
                        continue
                else:
                    cand = (_rot2(-s * gparts[2]) @ state[0], state[1] - s * gparts[1])
                e_new = energy(cand)
                if e_new <= e - 1e-4 * s * slope:
                    accepted = True
                    s_prev = s
                    break
                s *= 0.5
            if not accepted:
                break
            decrease = e - e_new
            state = cand
            e = e_new
            if decrease <= 1e-8 * max(e, 1e-30):
                break
        m, t = state

    # lookup B: fixed -> moving sample positions; returned transform is B^-1
    lookup_affine = AffineTransform(m, t + center - m @ center)
    return lookup_affine.inverse()


# ---------------------------------------------------------------------------
# Spectral smoother

def smoothing_inverse(
    force: np.ndarray,
    grid: Grid,
    alpha: float,
    beta: float,
    gamma: float,
    pad_fraction: float = 0.25,
) -> np.ndarray:
    """Apply (-alpha*Lap - beta*grad div + gamma*I)^-1 to a 2D vector field
    under periodic boundary, zero-padded by pad_fraction per side.

    Frequencies are taken per pixel (the operator's reach scales with the
    resolution level, which is what makes the coarse-to-fine schedule move
    bulk tissue before boundary detail). With pad_fraction=0 a pure Fourier
    mode of the grid is scaled by exactly 1 / (alpha*|w|^2 + gamma) for
    beta = 0, the operator's analytic symbol in per-pixel angular frequency.
    """
    ny, nx = force.shape[0], force.shape[1]
    py = int(np.ceil(pad_fraction * ny))
    px = int(np.ceil(pad_fraction * nx))
    f = np.pad(force, ((py, py), (px, px), (0, 0)))
    wy = 2.0 * np.pi * np.fft.fftfreq(ny + 2 * py)
    wx = 2.0 * np.pi * np.fft.fftfreq(nx + 2 * px)
    wxx, wyy = np.meshgrid(wx, wy)
    w2 = wxx**2 + wyy**2
    a = alpha * w2 + gamma
    fx = np.fft.fft2(f[..., 0])
    fy = np.fft.fft2(f[..., 1])
    if beta == 0.0:
        vx = fx / a
        vy = fy / a
    else:
        # (a I + beta w w')^-1 = I/a - beta w w' / (a (a + beta |w|^2))
        denom = a * (a + beta * w2)
        dot = wxx * fx + wyy * fy
        vx = fx / a - beta * wxx * dot / denom
        vy = fy / a - beta * wyy * dot / denom
    out = np.stack([np.real(np.fft.ifft2(vx)), np.real(np.fft.ifft2(vy))], axis=-1)
    return out[py: py + ny, px: px + nx, :]


# ---------------------------------------------------------------------------
# Greedy fluid

def _upsample_displacement(u: np.ndarray, src: Grid, dst: Grid) -> np.ndarray:
    fld = VectorField(src, u[None] if u.ndim == 3 else u)
    vals, _ = sample_field(fld, dst.points())
    return vals.reshape(dst.shape + (2,))


def register_fluid(moving: ScalarImage, fixed: ScalarImage, cfg: FluidConfig | None = None) -> FluidResult:
    """Greedy fluid registration of two same-grid 2D images (typically
    pre-blurred segmentation masks aligned by the affine stage)."""
    cfg = cfg or FluidConfig()
    if moving.grid != fixed.grid:
        raise ValueError("fluid registration requires a common grid")
    grid_full = fixed.grid

    u_inv = None  # total inverse displacement, carried across scales
    u_fwd = None
    energies_all: list[list[float]] = []
    regrids = 0
    initial_energy = None

    for scale in cfg.scales:
        mov = downsample_image(moving, scale)
        fix = downsample_image(fixed, scale)
        g = fix.grid
        mov_s = ScalarImage(g, gaussian_blur(_img2d(mov), cfg.blur_sigma_px)[None])
        fix_a = gaussian_blur(_img2d(fix), cfg.blur_sigma_px)
        pts = g.points()
        shape = (g.dims[1], g.dims[0])  # (ny, nx)
        pixarea = g.spacing[0] * g.spacing[1]
        min_sp = min(g.spacing[:2])

        if u_inv is None:
            u_inv = np.zeros(shape + (2,))
            u_fwd = np.zeros(shape + (2,))
        else:
            u_inv = _upsample_displacement(u_inv[None], prev_grid, g)[0]
            u_fwd = _upsample_displacement(u_fwd[None], prev_grid, g)[0]

        u_prior = u_inv.copy()  # inverse displacement at last regrid
        u_seg = np.zeros_like(u_inv)

        def total_positions(useg):
            y = pts + useg.reshape(-1, 2)
            d, _ = sample_field(VectorField(g, u_prior[None]), y)
            return y + d

        def warp_energy(useg):
            w, _ = interpolate(mov_s, total_positions(useg))
            r = w.reshape(shape) - fix_a
            return float((r**2).sum()) * pixarea, w.reshape(shape)

        e, warped = warp_energy(u_seg)
        if initial_energy is None:
            initial_energy = e
        scale_e0 = e
        energies = [e]
        fails = 0
        for _ in range(cfg.max_iters):
            if e <= 1e-10 * scale_e0:
                break
            r = warped - fix_a
            jgx, jgy = _image_gradient(warped, g.spacing)
            force = np.stack([-r * jgx, -r * jgy], axis=-1)
            v = smoothing_inverse(force, g, cfg.alpha, cfg.beta, cfg.gamma, cfg.pad_fraction)
            vmax = float(np.sqrt((v**2).sum(axis=-1)).max())
            if vmax == 0.0:
                break
            delta0 = cfg.max_step_voxels * min_sp / vmax
            delta = delta0
            accepted = False
            while delta > delta0 * 2.0**-24:
                # semi-Lagrangian: u_seg_new(x) = delta v(x) + u_seg(x + delta v(x))
                step = delta * v
                samp, _ = sample_field(VectorField(g, u_seg[None]), pts + step.reshape(-1, 2))
                u_try = step + samp.reshape(shape + (2,))
                e_new, warped_new = warp_energy(u_try)
                if e_new < e:
                    accepted = True
                    break
                delta *= 0.5
            if not accepted:
                fails += 1
                if fails >= 5:
                    raise DivergenceError(
                        f"fluid registration diverged at scale {scale}: energy "
                        f"{e:.6g} not reducible after 5 attempts at minimum step"
                    )
                break
            fails = 0
            # update forward map: phi <- (id + step)^-1 o phi, via fixed point
            ypos = pts + u_fwd.reshape(-1, 2)
            s_at = -_sample_disp(g, step, ypos)
            for _ in range(12):
                s_new = -_sample_disp(g, step, ypos + s_at)
                moved = float(np.abs(s_new - s_at).max(initial=0.0))
                s_at = s_new
                if moved < 1e-12:
                    break
            u_fwd = u_fwd + s_at.reshape(shape + (2,))

            u_seg = u_try
            decrease = e - e_new
            e, warped = e_new, warped_new
            energies.append(e)
            # regrid bookkeeping on the incremental map
            det = jacobian_determinant(g, u_seg[None])[0]
            if det.min() < cfg.jacobian_floor:
                total = total_positions(u_seg) - pts
                u_prior = total.reshape(shape + (2,))
                u_seg = np.zeros_like(u_seg)
                regrids += 1
            if decrease <= cfg.step_tolerance * max(scale_e0, 1e-30):
                break
        # fold total into u_inv for the next scale / output
        u_inv = (total_positions(u_seg) - pts).reshape(shape + (2,))
        energies_all.append(energies)
        prev_grid = g

    # materialize on the full grid
    if prev_grid != grid_full:
        u_inv = _upsample_displacement(u_inv[None], prev_grid, grid_full)[0]
        u_fwd = _upsample_displacement(u_fwd[None], prev_grid, grid_full)[0]
    shape_full = grid_full.shape + (2,)
    u_inv3 = u_inv[None].reshape(shape_full)
    # polish the forward (point-carrying) field against the inverse, then
    # nudge the inverse so the map meets its consistency bound in both orders
    u_fwd3 = refine_inverse(grid_full, u_inv3, u_fwd[None].reshape(shape_full))
    u_inv3 = refine_inverse(grid_full, u_fwd3, u_inv3)
    dmap = DiffeoMap(
        grid_full,
        VectorField(grid_full, u_fwd3),
        VectorField(grid_full, u_inv3),
    )
    return FluidResult(
        dmap=dmap,
        energies=energies_all,
        scales=cfg.scales,
        regrids=regrids,
        final_energy=energies_all[-1][-1],
        initial_energy=float(initial_energy),
    )


def _sample_disp(g: Grid, disp: np.ndarray, positions: np.ndarray) -> np.ndarray:
    vals, _ = sample_field(VectorField(g, disp[None]), positions)
    return vals


# ---------------------------------------------------------------------------
# Blockface stacking

def stack_blockface(images: list[ScalarImage], dof: str = "rigid3") -> list[AffineTransform]:
    """Chain 2D registrations of sequential images; image i is registered to
    image i-1 deformed into the reference (first image) frame. Returns the
    composed-to-reference transform per image."""
    if len(images) < 2:
        raise ValueError("need at least two images to stack")
    transforms = [AffineTransform.identity(2)]
    reference_view = images[0]
    for i in range(1, len(images)):
        try:
            t = register_affine_image(images[i], reference_view, dof=dof)
        except ValueError as err:
            raise ValueError(f"frame {i}: {err}") from err
        transforms.append(t)
        reference_view = warp_image_affine(images[i], t)
    return transforms
