"""Surface registration: minimize the currents distance over affine transforms
and over diffeomorphic kernel flows.

The flow is parameterized by per-vertex momenta at T Euler steps; the velocity
field anywhere is the Cauchy-kernel combination of the momenta carried at the
current vertex positions, so the regularizer sum_t u_t' G_t u_t is the exact
squared RKHS norm of each step's field. Optimization is gradient descent with
Armijo backtracking; energies of accepted iterates never increase. Both stages
run a two-level coarse-to-fine kernel schedule (sigma, sigma/2) by default.

The ``z_translation_only`` constraint reproduces the 2D-slice correlation
assumption at both stages: the affine keeps z as a pure translation (rotation
about z only in rigid mode) and the flow carries in-plane momenta plus one
global z shift per step, so per-step z-displacement is spatially constant,
exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .currents import KernelSpec, currents_distance_grad, kdot, knorm_sq
from .grid import AffineTransform, DiffeoMap, Grid, VectorField, refine_inverse, sample_field
from .mesh import SurfaceCurrent, TriMesh, to_current

__all__ = [
    "FlowField",
    "RegistrationError",
    "AffineSurfaceResult",
    "DiffeoSurfaceResult",
    "register_affine_surface",
    "register_affine_surface_multi",
    "register_diffeo_surface",
    "register_diffeo_surface_multi",
    "flow_to_diffeo",
    "default_flow_grid",
]

_ARMIJO_C = 1e-4
_REL_TOL = 1e-6
_STEP_FLOOR = 1e-12
_CHUNK = 2_000_000


class RegistrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class FlowField:
    """T velocity fields (mm per unit time) on a grid, dt = 1/T, plus the
    deformation kernel they were generated from."""

    grid: Grid
    steps: tuple[VectorField, ...]
    kernel: KernelSpec

    def __post_init__(self):
        if not self.steps:
            raise ValueError("flow needs at least one step")
        for s in self.steps:
            if s.grid != self.grid:
                raise ValueError("flow step grid mismatch")
        object.__setattr__(self, "steps", tuple(self.steps))

    @property
    def n_steps(self) -> int:
        return len(self.steps)

    @property
    def dt(self) -> float:
        return 1.0 / self.n_steps

    @classmethod
    def zero(cls, grid: Grid, n_steps: int, kernel: KernelSpec) -> "FlowField":
        return cls(grid, tuple(VectorField.zeros(grid) for _ in range(n_steps)), kernel)


@dataclass
class AffineSurfaceResult:
    transform: AffineTransform
    energies: list[list[float]]  # one accepted-iterate series per kernel stage
    initial_distance: float
    final_distance: float
    converged: bool
    warning: str | None
    dof: str
    constraint: str


@dataclass
class DiffeoSurfaceResult:
    flow: FlowField
    deformed: list[TriMesh]
    energies: list[list[float]]
    initial_distance: float
    final_distance: float
    converged: bool
    warning: str | None
    constraint: str
    momenta: np.ndarray = field(repr=False, default=None)
    trajectory: np.ndarray = field(repr=False, default=None)


# ---------------------------------------------------------------------------
# Chunked Cauchy-kernel primitives over point sets

def _chunks(n: int, m: int):
    rows = max(1, _CHUNK // max(1, m))
    for a in range(0, n, rows):
        yield a, min(n, a + rows)


def _sqdist(x: np.ndarray, y: np.ndarray, yy=None) -> np.ndarray:
    xx = (x**2).sum(axis=1)
    if yy is None:
        yy = (y**2).sum(axis=1)
    return np.maximum(xx[:, None] + yy[None, :] - 2.0 * (x @ y.T), 0.0)


def _kernel_apply(sigma: float, x: np.ndarray, y: np.ndarray, *ws: np.ndarray):
    """K(x, y) @ w for each w in ws, in fixed row chunks."""
    inv_s2 = 1.0 / sigma**2
    outs = [np.zeros((len(x), w.shape[1])) for w in ws]
    yy = (y**2).sum(axis=1)
    for a, b in _chunks(len(x), len(y)):
        kv = 1.0 / (1.0 + _sqdist(x[a:b], y, yy) * inv_s2)
        for out, w in zip(outs, ws):
            out[a:b] = kv @ w
    return outs if len(outs) > 1 else outs[0]


def _kernel_quad(sigma: float, x: np.ndarray, u: np.ndarray) -> float:
    """u' K(x, x) u, the squared RKHS norm of the kernel field."""
    total = 0.0
    inv_s2 = 1.0 / sigma**2
    yy = (x**2).sum(axis=1)
    for a, b in _chunks(len(x), len(x)):
        kv = 1.0 / (1.0 + _sqdist(x[a:b], x, yy) * inv_s2)
        total += float(((u[a:b] @ u.T) * kv).sum())
    return total


def _backward_step(sigma: float, x: np.ndarray, gx: np.ndarray, u: np.ndarray,
                   dt: float, lam: float):
    """Reverse one Euler step x_next = x + dt * K(x, x) u with the RKHS
    penalty lam * u' K u attached at this step.

    Returns (g_u, gx_prev): the momentum gradient dt*K gx + 2 lam K u and the
    adjoint transported to x (including dK/dx terms of both the transport and
    the penalty). Single fused chunk sweep."""
    inv_s2 = 1.0 / sigma**2
    g_u = np.empty_like(u)
    xg = np.empty_like(x)
    yy = (x**2).sum(axis=1)
    for a, b in _chunks(len(x), len(x)):
        kv = 1.0 / (1.0 + _sqdist(x[a:b], x, yy) * inv_s2)
        k2 = kv * kv
        g_u[a:b] = dt * (kv @ gx) + 2.0 * lam * (kv @ u)
        w = dt * (gx[a:b] @ u.T + u[a:b] @ gx.T) + 2.0 * lam * (u[a:b] @ u.T)
        m = w * k2
        s = m.sum(axis=1)
        xg[a:b] = (-2.0 * inv_s2) * (x[a:b] * s[:, None] - m @ x)
    return g_u, gx + xg


# ---------------------------------------------------------------------------
# Shared optimizer loop

def _armijo_descent(state, energy_fn, grad_fn, step_fn, initial_step_fn,
                    max_iters: int, valid_fn=None, energy_floor: float = 0.0):
    """Backtracking gradient descent. grad_fn returns (direction, slope) with
    slope = <grad, direction> > 0 for a descent step state - s * direction.
    valid_fn rejects candidates (fold / singularity); hitting the step floor
    on validity rejections aborts."""
    e = energy_fn(state)
    energies = [e]
    warning = None
    converged = False
    s_prev = None
    e_ref = max(abs(e), 1e-30)  # stop scale: the initial energy of this run
    for _ in range(max_iters):
        if e <= energy_floor:
            converged = True
            break
        direction, slope = grad_fn(state)
        if slope <= 0.0:
            converged = True
            break
        s_cap = initial_step_fn(state, direction)
        s = s_cap if s_prev is None else min(2.0 * s_prev, s_cap)
        accepted = False
        blocked = False
        best = None  # fallback: strictly decreasing trial without sufficient decrease
        trials = 0
        while s > _STEP_FLOOR:
            cand = step_fn(state, direction, s)
            if cand is None or (valid_fn is not None and not valid_fn(cand)):
                blocked = True
                s *= 0.5
                continue
            blocked = False
            e_new = energy_fn(cand)
            if np.isfinite(e_new) and e_new <= e - _ARMIJO_C * s * slope:
                state = cand
                accepted = True
                s_prev = s
                break
            if np.isfinite(e_new) and e_new < e and (best is None or e_new < best[0]):
                best = (e_new, cand, s)
            trials += 1
            if trials >= 12 and best is not None:
                break
            s *= 0.5
        if not accepted and best is not None:
            e_new, state, s_prev = best[0], best[1], best[2]
            accepted = True
        if not accepted:
            if blocked:
                raise RegistrationError(
                    "step floor reached while rejecting invalid (folding or "
                    f"singular) updates; energy {e:.6g}"
                )
            converged = True
            break
        decrease = e - e_new
        e = e_new
        energies.append(e)
        if decrease <= _REL_TOL * e_ref:
            converged = True
            break
    else:
        warning = "max iterations reached"
    return state, energies, converged, warning


# ---------------------------------------------------------------------------
# Affine registration

def _rodrigues(omega: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(omega))
    if theta < 1e-300:
        return np.eye(3)
    k = omega / theta
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(theta) * kx + (1.0 - np.cos(theta)) * (kx @ kx)


def _sum_distance(meshes, target_curs, kern, target_norms) -> float:
    total = 0.0
    for mesh, tgt, tn in zip(meshes, target_curs, target_norms):
        cur = to_current(mesh)
        total += knorm_sq(cur, kern) - 2.0 * kdot(cur, tgt, kern) + tn
    return max(total, 0.0)


def _area_centroid(cur: SurfaceCurrent) -> np.ndarray:
    w = np.sqrt((cur.normals**2).sum(axis=1))
    return (cur.centers * w[:, None]).sum(axis=0) / w.sum()


@dataclass
class _AffineState:
    matrix: np.ndarray
    translation: np.ndarray


def register_affine_surface_multi(
    pairs: list[tuple[TriMesh, TriMesh]],
    kern: KernelSpec,
    dof: str = "rigid6",
    constraint: str = "free",
    max_iters: int = 500,
    schedule: tuple[float, ...] = (1.0, 0.5),
    init_translation: bool = True,
) -> AffineSurfaceResult:
    """One affine transform minimizing the summed currents distance over
    (moving, target) mesh pairs. Normals of transformed meshes are recomputed
    from transformed vertices, which realizes the cofactor transformation law
    for currents exactly."""
    if dof not in ("rigid6", "affine12"):
        raise ValueError(f"unknown dof {dof!r}")
    if constraint not in ("free", "z_translation_only"):
        raise ValueError(f"unknown constraint {constraint!r}")
    if not pairs:
        raise ValueError("no mesh pairs to register")
    movings = [m for m, _ in pairs]
    target_curs = [to_current(t) for _, t in pairs]
    all_moving = np.concatenate([np.asarray(m.vertices) for m in movings], axis=0)
    mu = all_moving.mean(axis=0)
    centered = [np.asarray(m.vertices) - mu for m in movings]
    radius = max(float(np.sqrt(((all_moving - mu) ** 2).sum(axis=1).mean())), 1e-6)

    state = _AffineState(np.eye(3), np.zeros(3))
    if init_translation:
        moving_cur = to_current(_concat_meshes(movings))
        state.translation = _area_centroid(_concat_currents(target_curs)) - _area_centroid(moving_cur)

    def moved_meshes(st: _AffineState) -> list[TriMesh]:
        return [
            m.with_vertices(c @ st.matrix.T + mu + st.translation)
            for m, c in zip(movings, centered)
        ]

    energy_stages: list[list[float]] = []
    converged = True
    warning = None
    initial_distance = None

    for factor in schedule:
        k_data = kern.scaled(factor)
        target_norms = [knorm_sq(t, k_data) for t in target_curs]

        def energy(st):
            return _sum_distance(moved_meshes(st), target_curs, k_data, target_norms)

        if initial_distance is None:
            initial_distance = _sum_distance(
                moved_meshes(_AffineState(np.eye(3), np.zeros(3))),
                target_curs,
                k_data,
                target_norms,
            )

        def grad(st):
            g_block = np.zeros((3, 3)) if dof == "affine12" else np.zeros(3)
            g_t = np.zeros(3)
            for mesh, tgt, c0 in zip(moved_meshes(st), target_curs, centered):
                gv = currents_distance_grad(mesh, tgt, k_data)
                g_t += gv.sum(axis=0)
                if dof == "affine12":
                    g_block += gv.T @ c0
                else:
                    local = c0 @ st.matrix.T
                    g_block += np.cross(local, gv).sum(axis=0)
            if constraint == "z_translation_only":
                if dof == "affine12":
                    g_block[2, :] = 0.0  # z row stays (0, 0, 1)
                else:
                    g_block[0] = g_block[1] = 0.0  # rotate about z only
            d_block = g_block / radius**2
            slope = float((g_block * d_block).sum() + g_t @ g_t)
            return (d_block, g_t), slope

        def step(st, direction, s):
            d_block, d_t = direction
            t_new = st.translation - s * d_t
            if dof == "affine12":
                m_new = st.matrix - s * d_block
                if abs(np.linalg.det(m_new)) < 1e-6:
                    return None
            else:
                m_new = _rodrigues(-s * d_block) @ st.matrix
            return _AffineState(m_new, t_new)

        def initial_step(st, direction):
            d_block, d_t = direction
            vel = np.linalg.norm(d_t) + np.linalg.norm(d_block) * radius
            return 0.5 * k_data.sigma / max(vel, 1e-30)

        floor = 1e-14 * sum(target_norms)
        state, energies, conv, warn = _armijo_descent(
            state, energy, grad, step, initial_step, max_iters, energy_floor=floor
        )
        energy_stages.append(energies)
        converged = converged and conv
        warning = warn or warning

    final_distance = energy_stages[-1][-1]
    transform = AffineTransform(state.matrix, state.translation + mu - state.matrix @ mu)
    return AffineSurfaceResult(
        transform=transform,
        energies=energy_stages,
        initial_distance=float(initial_distance),
        final_distance=float(final_distance),
        converged=converged,
        warning=warning,
        dof=dof,
        constraint=constraint,
    )


def _concat_meshes(meshes: list[TriMesh]) -> TriMesh:
    verts = np.concatenate([np.asarray(m.vertices) for m in meshes], axis=0)
    faces = []
    off = 0
    for m in meshes:
        faces.append(np.asarray(m.faces) + off)
        off += m.n_vertices
    return TriMesh(verts, np.concatenate(faces, axis=0))


def _concat_currents(curs: list[SurfaceCurrent]) -> SurfaceCurrent:
    return SurfaceCurrent(
        np.concatenate([c.centers for c in curs], axis=0),
        np.concatenate([c.normals for c in curs], axis=0),
    )


def register_affine_surface(
    moving: TriMesh,
    target: TriMesh,
    kern: KernelSpec,
    dof: str = "rigid6",
    constraint: str = "free",
    **kwargs,
) -> AffineSurfaceResult:
    """Affine/rigid registration of one moving mesh onto one target mesh."""
    return register_affine_surface_multi([(moving, target)], kern, dof, constraint, **kwargs)


# ---------------------------------------------------------------------------
# Diffeomorphic registration

def default_flow_grid(
    meshes: list[TriMesh],
    sigma_flow: float,
    margin_factor: float = 2.5,
    max_points: int = 400_000,
) -> Grid:
    """Bounding grid of the meshes padded by margin_factor * sigma, sampled at
    about sigma/3 (coarsened to respect the point budget)."""
    allv = np.concatenate([np.asarray(m.vertices) for m in meshes], axis=0)
    lo = allv.min(axis=0) - margin_factor * sigma_flow
    hi = allv.max(axis=0) + margin_factor * sigma_flow
    spacing = sigma_flow / 3.0
    dims = np.maximum(np.ceil((hi - lo) / spacing).astype(int) + 1, 2)
    while int(np.prod(dims)) > max_points:
        spacing *= 1.26
        dims = np.maximum(np.ceil((hi - lo) / spacing).astype(int) + 1, 2)
    return Grid(
        tuple(int(n) for n in dims),
        (float(spacing),) * 3,
        tuple(float(v) for v in lo),
    )


class _FlowState:
    __slots__ = ("momenta", "z_shift", "traj", "reg_quads")

    def __init__(self, momenta, z_shift):
        self.momenta = momenta
        self.z_shift = z_shift
        self.traj = None
        self.reg_quads = None


def _integrate(verts0, st: _FlowState, sigma: float, dt: float) -> np.ndarray:
    """Euler flow of the vertex set; trajectory (T+1, n, 3) and the per-step
    RKHS quadratic terms u' K u are cached on the state."""
    if st.traj is not None:
        return st.traj
    T = st.momenta.shape[0]
    traj = np.empty((T + 1,) + verts0.shape)
    traj[0] = verts0
    quads = np.empty(T)
    for t in range(T):
        v = _kernel_apply(sigma, traj[t], traj[t], st.momenta[t])
        quads[t] = float((st.momenta[t] * v).sum())
        if st.z_shift is not None:
            v[:, 2] += st.z_shift[t]
        traj[t + 1] = traj[t] + dt * v
    st.traj = traj
    st.reg_quads = quads
    return traj


def register_diffeo_surface_multi(
    pairs: list[tuple[TriMesh, TriMesh]],
    kern: KernelSpec,
    reg_weight: float | None = None,
    constraint: str = "free",
    n_steps: int = 10,
    deformation_kernel: KernelSpec | None = None,
    max_iters: int = 500,
    schedule: tuple[float, ...] = (1.0, 0.5),
    grid: Grid | None = None,
) -> DiffeoSurfaceResult:
    """One diffeomorphic kernel flow carrying all moving meshes onto their
    targets; minimizes summed currents distances plus the RKHS velocity norm.

    reg_weight=None uses the scale-free default 0.1 * initial data term /
    squared norm of a unit uniform velocity on the initial vertex set.
    """
    if constraint not in ("free", "z_translation_only"):
        raise ValueError(f"unknown constraint {constraint!r}")
    if not pairs:
        raise ValueError("no mesh pairs to register")
    movings = [m for m, _ in pairs]
    target_curs = [to_current(t) for _, t in pairs]
    kern_flow = deformation_kernel or KernelSpec(2.0 * kern.sigma)
    sigma_v = kern_flow.sigma
    dt = 1.0 / n_steps

    verts0 = np.concatenate([np.asarray(m.vertices) for m in movings], axis=0)
    n = len(verts0)
    offsets = np.cumsum([0] + [m.n_vertices for m in movings])
    constrained = constraint == "z_translation_only"
    state = _FlowState(
        np.zeros((n_steps, n, 3)), np.zeros(n_steps) if constrained else None
    )

    def slice_meshes(x: np.ndarray) -> list[TriMesh]:
        return [
            m.with_vertices(x[offsets[i]: offsets[i + 1]]) for i, m in enumerate(movings)
        ]

    energy_stages: list[list[float]] = []
    converged = True
    warning = None
    initial_distance = None
    lam = reg_weight

    for factor in schedule:
        k_data = kern.scaled(factor)
        target_norms = [knorm_sq(t, k_data) for t in target_curs]

        def data_term(x_final):
            return _sum_distance(slice_meshes(x_final), target_curs, k_data, target_norms)

        if initial_distance is None:
            initial_distance = data_term(verts0)
            if lam is None:
                unit = np.zeros_like(verts0)
                unit[:, 0] = 1.0
                n_ref = _kernel_quad(sigma_v, verts0, unit)
                lam = 0.1 * initial_distance / max(n_ref, 1e-30)

        def energy(st: _FlowState):
            traj = _integrate(verts0, st, sigma_v, dt)
            return data_term(traj[-1]) + lam * float(st.reg_quads.sum())

        def grad(st: _FlowState):
            traj = _integrate(verts0, st, sigma_v, dt)
            g_u = np.zeros_like(st.momenta)
            g_c = np.zeros(n_steps) if constrained else None
            gx = np.zeros_like(verts0)
            for i, (mesh, tgt) in enumerate(zip(slice_meshes(traj[-1]), target_curs)):
                gx[offsets[i]: offsets[i + 1]] = currents_distance_grad(mesh, tgt, k_data)
            for t in range(n_steps - 1, -1, -1):
                if constrained:
                    g_c[t] = dt * float(gx[:, 2].sum())
                g_u[t], gx = _backward_step(
                    sigma_v, traj[t], gx, st.momenta[t], dt, lam
                )
            if constrained:
                g_u[:, :, 2] = 0.0
            slope = float((g_u * g_u).sum())
            if constrained:
                slope += float(g_c @ g_c)
            return (g_u, g_c), slope

        def step(st: _FlowState, direction, s):
            d_u, d_c = direction
            return _FlowState(
                st.momenta - s * d_u,
                st.z_shift - s * d_c if constrained else None,
            )

        def initial_step(st, direction):
            d_u, d_c = direction
            t_big = int(np.argmax(np.sqrt((d_u**2).sum(axis=2)).max(axis=1)))
            v = _kernel_apply(sigma_v, verts0, verts0, d_u[t_big])
            vmax = float(np.sqrt((v**2).sum(axis=1)).max())
            if constrained and d_c is not None:
                vmax += float(np.abs(d_c).max())
            return 0.25 * sigma_v / max(dt * vmax, 1e-30)

        def valid(st: _FlowState):
            traj = _integrate(verts0, st, sigma_v, dt)
            move = np.sqrt(((traj[1:] - traj[:-1]) ** 2).sum(axis=2)).max()
            return bool(move <= 0.4 * sigma_v)

        floor = 1e-14 * sum(target_norms)
        state, energies, conv, warn = _armijo_descent(
            state, energy, grad, step, initial_step, max_iters, valid_fn=valid,
            energy_floor=floor,
        )
        energy_stages.append(energies)
        converged = converged and conv
        warning = warn or warning

    traj = _integrate(verts0, state, sigma_v, dt)
    k_last = kern.scaled(schedule[-1])
    final_distance = _sum_distance(
        slice_meshes(traj[-1]),
        target_curs,
        k_last,
        [knorm_sq(t, k_last) for t in target_curs],
    )

    flow_grid = grid or default_flow_grid(movings + [t for _, t in pairs], sigma_v)
    gp = flow_grid.points()
    steps = []
    for t in range(n_steps):
        v = _kernel_apply(sigma_v, gp, traj[t], state.momenta[t])
        if constrained:
            v[:, 2] += state.z_shift[t]
        steps.append(VectorField(flow_grid, v.reshape(flow_grid.shape + (3,))))
    flow = FlowField(flow_grid, tuple(steps), kern_flow)

    return DiffeoSurfaceResult(
        flow=flow,
        deformed=slice_meshes(traj[-1]),
        energies=energy_stages,
        initial_distance=float(initial_distance),
        final_distance=float(final_distance),
        converged=converged,
        warning=warning,
        constraint=constraint,
        momenta=state.momenta,
        trajectory=traj,
    )


def register_diffeo_surface(
    moving: TriMesh,
    target: TriMesh,
    kern: KernelSpec,
    reg_weight: float | None = None,
    constraint: str = "free",
    **kwargs,
) -> DiffeoSurfaceResult:
    """Diffeomorphic refinement of one (pre-aligned) moving mesh onto a target."""
    return register_diffeo_surface_multi(
        [(moving, target)], kern, reg_weight, constraint, **kwargs
    )


def flow_to_diffeo(flow: FlowField, grid: Grid | None = None) -> DiffeoMap:
    """Materialize a flow as a dense forward/inverse map by Euler integration.

    The inverse integrates -v in reverse time and is polished to the grid's
    inverse-consistency tolerance; folds raise at map construction.
    """
    grid = grid or flow.grid
    dt = flow.dt
    pts = grid.points()

    x = pts.copy()
    for t in range(flow.n_steps):
        v, _ = sample_field(flow.steps[t], x)
        x = x + dt * v
    fwd = (x - pts).reshape(grid.shape + (3,))

    y = pts.copy()
    for t in range(flow.n_steps - 1, -1, -1):
        v, _ = sample_field(flow.steps[t], y)
        y = y - dt * v
    inv0 = (y - pts).reshape(grid.shape + (3,))
    inv = refine_inverse(grid, fwd, inv0)
    return DiffeoMap(grid, VectorField(grid, fwd), VectorField(grid, inv))
