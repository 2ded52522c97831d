"""Regular-grid volumes, vector fields, affine transforms and dense deformation maps.

Conventions used across the package:

* Grids are axis-aligned. World coordinate of voxel (i, j, k) is
  ``origin + (i*sx, j*sy, k*sz)`` in mm. A 2D image is a volume with nz == 1.
* Array storage is C-ordered ``(nz, ny, nx)`` (x fastest in memory), vector
  fields are ``(nz, ny, nx, d)`` with d == 2 for 2D grids and d == 3 otherwise.
* Point sets are ``(n, d)`` float arrays of world coordinates in mm.
* Out-of-domain samples are clamped to the boundary and flagged, never
  silently extrapolated.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "Grid",
    "ScalarVolume",
    "ScalarImage",
    "VectorField",
    "AffineTransform",
    "DiffeoMap",
    "FoldError",
    "interpolate",
    "sample_field",
    "compose_maps",
    "apply_map_to_volume",
    "resample_to_grid",
    "jacobian_determinant",
    "read_rvol",
    "write_rvol",
    "read_affine",
    "write_affine",
    "read_diffeo",
    "write_diffeo",
]

_INDEX_TOL = 1e-9  # voxel units; absorbs float noise at the domain boundary


class FoldError(ValueError):
    """A deformation map has non-positive Jacobian determinant somewhere."""


def _fmt(x: float) -> str:
    return repr(float(x))


@dataclass(frozen=True)
class Grid:
    """Axis-aligned regular grid: dims (nx, ny, nz), spacing and origin in mm."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if len(self.dims) != 3 or any(int(n) <= 0 for n in self.dims):
            raise ValueError(f"dims must be three positive integers, got {self.dims}")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be strictly positive, got {self.spacing}")
        object.__setattr__(self, "dims", tuple(int(n) for n in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def ndim(self) -> int:
        return 2 if self.dims[2] == 1 else 3

    @property
    def shape(self) -> tuple[int, int, int]:
        """Array shape (nz, ny, nx)."""
        nx, ny, nz = self.dims
        return (nz, ny, nx)

    @property
    def npoints(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    def world_to_index(self, points: np.ndarray) -> np.ndarray:
        """Continuous voxel indices (n, d) for world points (n, d)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        d = self.ndim
        if pts.shape[1] != d:
            raise ValueError(f"expected {d}-D points, got shape {pts.shape}")
        org = np.asarray(self.origin[:d])
        spc = np.asarray(self.spacing[:d])
        idx = (pts - org) / spc
        # snap float noise so on-grid world points map to exact integer indices
        nearest = np.round(idx)
        snap = np.abs(idx - nearest) <= _INDEX_TOL
        idx[snap] = nearest[snap]
        return idx

    def index_to_world(self, idx: np.ndarray) -> np.ndarray:
        idx = np.atleast_2d(np.asarray(idx, dtype=float))
        d = self.ndim
        org = np.asarray(self.origin[:d])
        spc = np.asarray(self.spacing[:d])
        return idx * spc + org

    def coordinate_arrays(self) -> np.ndarray:
        """World coordinates of every grid point, shape (nz, ny, nx, d)."""
        nx, ny, nz = self.dims
        xs = self.origin[0] + self.spacing[0] * np.arange(nx)
        ys = self.origin[1] + self.spacing[1] * np.arange(ny)
        zs = self.origin[2] + self.spacing[2] * np.arange(nz)
        zz, yy, xx = np.meshgrid(zs, ys, xs, indexing="ij")
        if self.ndim == 2:
            return np.stack([xx, yy], axis=-1)
        return np.stack([xx, yy, zz], axis=-1)

    def points(self) -> np.ndarray:
        """World coordinates flattened to (npoints, d), x fastest."""
        return self.coordinate_arrays().reshape(-1, self.ndim)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.asarray(self.origin)
        hi = lo + (np.asarray(self.dims) - 1) * np.asarray(self.spacing)
        return lo, hi


def _as_grid_array(grid: Grid, data: np.ndarray, vdim: int | None) -> np.ndarray:
    want = grid.shape if vdim is None else grid.shape + (vdim,)
    arr = np.asarray(data)
    if arr.shape != want:
        # accept flat input in x-fastest order
        if arr.size == int(np.prod(want)):
            arr = arr.reshape(want)
        else:
            raise ValueError(f"data shape {arr.shape} does not match grid {want}")
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ScalarVolume:
    """Scalar values on a regular grid. 2D images are volumes with nz == 1."""

    grid: Grid
    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", _as_grid_array(self.grid, self.data, None))

    @property
    def dims(self):
        return self.grid.dims

    @property
    def spacing(self):
        return self.grid.spacing

    @property
    def origin(self):
        return self.grid.origin

    def with_data(self, data: np.ndarray) -> "ScalarVolume":
        return ScalarVolume(self.grid, data)

    def is_binary(self, tol: float = 0.0) -> bool:
        d = np.asarray(self.data, dtype=float)
        return bool(np.all((np.abs(d) <= tol) | (np.abs(d - 1.0) <= tol)))


ScalarImage = ScalarVolume  # 2D alias


@dataclass(frozen=True)
class VectorField:
    """One d-vector (mm) per grid point; d matches the grid dimensionality."""

    grid: Grid
    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "data", _as_grid_array(self.grid, self.data, self.grid.ndim)
        )

    @classmethod
    def zeros(cls, grid: Grid) -> "VectorField":
        return cls(grid, np.zeros(grid.shape + (grid.ndim,)))

    def max_norm(self) -> float:
        return float(np.sqrt((np.asarray(self.data) ** 2).sum(axis=-1).max()))


def _gather_linear(data: np.ndarray, grid: Grid, points: np.ndarray):
    """d-linear interpolation with boundary clamp. Returns (values, clamped)."""
    d = grid.ndim
    idx = grid.world_to_index(points)
    nx, ny, nz = grid.dims
    n_axes = [nx, ny] if d == 2 else [nx, ny, nz]
    clamped = np.zeros(idx.shape[0], dtype=bool)
    lo = np.zeros_like(idx, dtype=np.int64)
    frac = np.zeros_like(idx)
    for a, n in enumerate(n_axes):
        c = idx[:, a]
        clamped |= (c < -_INDEX_TOL) | (c > (n - 1) + _INDEX_TOL)
        c = np.clip(c, 0.0, n - 1.0)
        base = np.floor(c).astype(np.int64)
        base = np.minimum(base, n - 2) if n > 1 else np.zeros_like(base)
        lo[:, a] = base
        frac[:, a] = c - base

    vec = data.ndim == 4
    out_shape = (idx.shape[0], data.shape[-1]) if vec else (idx.shape[0],)
    out = np.zeros(out_shape, dtype=float)
    for corner in range(1 << d):
        w = np.ones(idx.shape[0])
        gather = []
        for a in range(d):
            bit = (corner >> a) & 1
            n = n_axes[a]
            ia = lo[:, a] + bit if n > 1 else lo[:, a]
            ia = np.minimum(ia, n - 1)
            gather.append(ia)
            w = w * (frac[:, a] if bit else (1.0 - frac[:, a]))
        ix = gather[0]
        iy = gather[1]
        iz = gather[2] if d == 3 else np.zeros_like(ix)
        vals = data[iz, iy, ix]
        out += (w[:, None] * vals) if vec else (w * vals)
    return out, clamped


def interpolate(vol: ScalarVolume, points: np.ndarray):
    """d-linear interpolation of a scalar volume at world points.

    Returns (values, clamped): ``clamped`` marks points outside the domain
    whose coordinates were clamped to the boundary. Exact at grid points.
    """
    pts = np.asarray(points, dtype=float)
    single = pts.ndim == 1
    vals, clamped = _gather_linear(
        np.asarray(vol.data, dtype=float), vol.grid, np.atleast_2d(pts)
    )
    if single:
        return float(vals[0]), bool(clamped[0])
    return vals, clamped


def sample_field(fld: VectorField, points: np.ndarray):
    """Interpolate a vector field at world points. Returns (vectors, clamped)."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    return _gather_linear(np.asarray(fld.data, dtype=float), fld.grid, pts)


@dataclass(frozen=True)
class AffineTransform:
    """x -> matrix @ x + translation, d = 2 or 3. Must be invertible."""

    matrix: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        t = np.asarray(self.translation, dtype=float).reshape(-1)
        if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] not in (2, 3):
            raise ValueError(f"matrix must be 2x2 or 3x3, got {m.shape}")
        if t.shape[0] != m.shape[0]:
            raise ValueError("translation dimension does not match matrix")
        if abs(np.linalg.det(m)) < 1e-12:
            raise ValueError("affine matrix is singular")
        m.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "translation", t)

    @property
    def ndim(self) -> int:
        return self.matrix.shape[0]

    @classmethod
    def identity(cls, ndim: int = 3) -> "AffineTransform":
        return cls(np.eye(ndim), np.zeros(ndim))

    def apply_points(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return pts @ self.matrix.T + self.translation

    def inverse(self) -> "AffineTransform":
        inv = np.linalg.inv(self.matrix)
        return AffineTransform(inv, -inv @ self.translation)

    def compose(self, inner: "AffineTransform") -> "AffineTransform":
        """self o inner (apply inner first)."""
        return AffineTransform(
            self.matrix @ inner.matrix,
            self.matrix @ inner.translation + self.translation,
        )

    def homogeneous(self) -> np.ndarray:
        d = self.ndim
        h = np.eye(d + 1)
        h[:d, :d] = self.matrix
        h[:d, d] = self.translation
        return h


def jacobian_determinant(grid: Grid, displacement: np.ndarray) -> np.ndarray:
    """det of the Jacobian of (identity + displacement) at every grid point.

    Central differences in the interior, one-sided at the grid edges.
    """
    u = np.asarray(displacement, dtype=float)
    d = grid.ndim
    steps = (grid.spacing[2], grid.spacing[1], grid.spacing[0])  # (z, y, x)

    def _grad(comp: np.ndarray, axis: int) -> np.ndarray:
        if comp.shape[axis] < 2:
            return np.zeros_like(comp)
        return np.gradient(comp, steps[axis], axis=axis)

    if d == 2:
        j00 = 1.0 + _grad(u[..., 0], 2)
        j01 = _grad(u[..., 0], 1)
        j10 = _grad(u[..., 1], 2)
        j11 = 1.0 + _grad(u[..., 1], 1)
        return j00 * j11 - j01 * j10
    jac = np.empty(u.shape[:3] + (3, 3))
    for c in range(3):
        jac[..., c, 0] = _grad(u[..., c], 2)  # d/dx
        jac[..., c, 1] = _grad(u[..., c], 1)  # d/dy
        jac[..., c, 2] = _grad(u[..., c], 0)  # d/dz
    jac[..., 0, 0] += 1.0
    jac[..., 1, 1] += 1.0
    jac[..., 2, 2] += 1.0
    return np.linalg.det(jac)


def _interior(det: np.ndarray, grid: Grid) -> np.ndarray:
    nz, ny, nx = grid.shape
    sl = [slice(None)] * 3
    if nz > 2:
        sl[0] = slice(1, -1)
    if ny > 2:
        sl[1] = slice(1, -1)
    if nx > 2:
        sl[2] = slice(1, -1)
    return det[tuple(sl)]


def inverse_consistency_tolerance(grid: Grid) -> float:
    return 0.1 * min(grid.spacing[: grid.ndim])


@dataclass(frozen=True)
class DiffeoMap:
    """Dense forward + inverse displacement maps with positive Jacobian.

    ``forward`` carries point x to x + forward(x); ``inverse`` undoes it.
    Construction verifies Jacobian positivity at interior grid points and
    the forward(inverse(x)) ~= x consistency bound.
    """

    grid: Grid
    forward: VectorField
    inverse: VectorField
    clamped_fraction: float = 0.0

    def __post_init__(self):
        for name in ("forward", "inverse"):
            f = getattr(self, name)
            if f.grid != self.grid:
                raise ValueError(f"{name} field grid does not match map grid")
            det = jacobian_determinant(self.grid, f.data)
            if not np.all(_interior(det, self.grid) > 0):
                raise FoldError(
                    f"{name} map folds: min interior det J = "
                    f"{float(_interior(det, self.grid).min()):.6g}"
                )
        res = self._inverse_residual()
        tol = inverse_consistency_tolerance(self.grid)
        if res > tol:
            raise ValueError(
                f"inverse-consistency residual {res:.6g} mm exceeds tolerance {tol:.6g} mm"
            )

    def _inverse_residual(self) -> float:
        pts = self.grid.points()
        back = pts + np.asarray(self.inverse.data).reshape(-1, self.grid.ndim)
        disp, _ = sample_field(self.forward, back)
        return float(np.abs(back + disp - pts).max(initial=0.0))

    @classmethod
    def identity(cls, grid: Grid) -> "DiffeoMap":
        z = VectorField.zeros(grid)
        return cls(grid, z, z)

    @classmethod
    def from_displacements(
        cls,
        grid: Grid,
        forward: np.ndarray,
        inverse: np.ndarray | None = None,
        refine: bool = True,
    ) -> "DiffeoMap":
        """Build a map from a forward displacement array; inverse is derived
        by fixed-point iteration when not supplied (and polished otherwise)."""
        fwd = VectorField(grid, forward)
        inv0 = (
            np.asarray(inverse, dtype=float)
            if inverse is not None
            else -np.asarray(forward, dtype=float)
        )
        inv = refine_inverse(grid, np.asarray(forward, dtype=float), inv0) if refine else inv0
        return cls(grid, fwd, VectorField(grid, inv))

    def apply_points(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        disp, _ = sample_field(self.forward, pts)
        return pts + disp

    def apply_points_inverse(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        disp, _ = sample_field(self.inverse, pts)
        return pts + disp


def refine_inverse(
    grid: Grid,
    forward: np.ndarray,
    inverse0: np.ndarray,
    iters: int = 30,
    tol_factor: float = 0.25,
) -> np.ndarray:
    """Polish an inverse displacement field so u_inv(x) + u_fwd(x + u_inv(x))
    vanishes on the grid.

    Runs the plain fixed point first; where the forward field is steep
    (local Lipschitz near 1, e.g. strong compression) that iteration stalls,
    so it falls back to damped Newton steps using the interpolated forward
    Jacobian. Stops at tol_factor * inverse-consistency tolerance.
    """
    d = grid.ndim
    pts = grid.points()
    fwd = VectorField(grid, forward)
    inv = np.asarray(inverse0, dtype=float).reshape(-1, d).copy()
    target = tol_factor * inverse_consistency_tolerance(grid)

    def residual(cur):
        disp, _ = sample_field(fwd, pts + cur)
        return cur + disp

    err_prev = np.inf
    for _ in range(iters):
        resid = residual(inv)
        err = float(np.abs(resid).max(initial=0.0))
        if err <= target:
            return inv.reshape(grid.shape + (d,))
        if err > 0.9 * err_prev:
            break  # stalled; switch to Newton
        err_prev = err
        inv -= resid

    # gradients of the forward displacement, one field per (component, axis)
    u = np.asarray(forward, dtype=float)
    steps = (grid.spacing[2], grid.spacing[1], grid.spacing[0])
    axes3 = [2, 1] if d == 2 else [2, 1, 0]  # x, y(, z) in array axes
    grads = np.empty(grid.shape + (d, d))
    for c in range(d):
        for a_i, ax in enumerate(axes3):
            if u.shape[ax] < 2:
                grads[..., c, a_i] = 0.0
            else:
                grads[..., c, a_i] = np.gradient(u[..., c], steps[ax], axis=ax)
    def sample_jacobian(q):
        out = np.empty((len(q), d, d))
        for c in range(d):
            for a_i in range(d):
                comp = ScalarVolume(grid, grads[..., c, a_i])
                vals, _ = interpolate(comp, q)
                out[:, c, a_i] = vals
        return out

    best = inv.copy()
    best_err = float(np.abs(residual(inv)).max(initial=0.0))
    for _ in range(25):
        resid = residual(inv)
        err = float(np.abs(resid).max(initial=0.0))
        if err < best_err:
            best, best_err = inv.copy(), err
        if err <= target:
            break
        jac = sample_jacobian(pts + inv)
        jac[:, range(d), range(d)] += 1.0
        try:
            delta = np.linalg.solve(jac, resid[..., None])[..., 0]
        except np.linalg.LinAlgError:
            delta = resid
        inv -= delta
    resid = residual(inv)
    if float(np.abs(resid).max(initial=0.0)) > best_err:
        inv = best
    return inv.reshape(grid.shape + (d,))


def compose_maps(
    outer: DiffeoMap, inner: DiffeoMap, max_outside_fraction: float = 0.5
) -> DiffeoMap:
    """(outer o inner), sampled on inner's grid.

    Samples that leave the outer domain are boundary-clamped and counted;
    the composition errors out when the escaped fraction exceeds
    ``max_outside_fraction``.
    """
    grid = inner.grid
    if outer.grid.ndim != grid.ndim:
        raise ValueError("cannot compose maps of different dimensionality")
    pts = grid.points()
    d_in = np.asarray(inner.forward.data).reshape(-1, grid.ndim)
    mid = pts + d_in
    d_out, clamped = sample_field(outer.forward, mid)
    frac = float(np.count_nonzero(clamped)) / len(pts)
    if frac > max_outside_fraction:
        raise ValueError(
            f"composition leaves the domain at {frac:.1%} of grid points "
            f"(allowed {max_outside_fraction:.1%})"
        )
    fwd = (d_in + d_out).reshape(grid.shape + (grid.ndim,))

    d_oinv, clamped_i = sample_field(outer.inverse, pts)
    d_iinv, _ = sample_field(inner.inverse, pts + d_oinv)
    inv0 = d_oinv + d_iinv
    frac_i = float(np.count_nonzero(clamped_i)) / len(pts)
    inv = refine_inverse(grid, fwd, inv0.reshape(grid.shape + (grid.ndim,)))
    return DiffeoMap(
        grid,
        VectorField(grid, fwd),
        VectorField(grid, inv),
        clamped_fraction=max(frac, frac_i),
    )


def apply_map_to_volume(vol: ScalarVolume, dmap: DiffeoMap, mode: str = "linear") -> ScalarVolume:
    """Resample a volume through a map: out(x) = vol(inverse(x)).

    mode="linear" interpolates values; mode="label" requires 0/1 input,
    pulls the indicator linearly and thresholds at 0.5.
    """
    if mode not in ("linear", "label"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "label" and not vol.is_binary(tol=1e-12):
        raise ValueError("mode='label' requires a binary 0/1 volume")
    pts = vol.grid.points()
    disp, _ = sample_field(dmap.inverse, pts)
    vals, _ = interpolate(vol, pts + disp)
    out = vals.reshape(vol.grid.shape)
    if mode == "label":
        out = (out >= 0.5).astype(np.uint8)
    return ScalarVolume(vol.grid, out)


def resample_to_grid(vol: ScalarVolume, grid: Grid, mode: str = "linear") -> ScalarVolume:
    """Sample a volume onto another grid (identity transform, clamped)."""
    if mode == "label" and not vol.is_binary(tol=1e-12):
        raise ValueError("mode='label' requires a binary 0/1 volume")
    vals, _ = interpolate(vol, grid.points())
    out = vals.reshape(grid.shape)
    if mode == "label":
        out = (out >= 0.5).astype(np.uint8)
    return ScalarVolume(grid, out)


# ---------------------------------------------------------------------------
# File formats: RVOL volumes, affine text files, DiffeoMap sidecars.

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


def write_rvol(path, grid: Grid, data: np.ndarray, dtype: str = "f32") -> None:
    if dtype not in _DTYPES:
        raise ValueError(f"dtype must be one of {sorted(_DTYPES)}")
    arr = np.asarray(data)
    vdim = 1 if arr.ndim == 3 else arr.shape[-1]
    if arr.ndim == 3:
        expect = grid.shape
    else:
        expect = grid.shape + (vdim,)
    if arr.shape != expect:
        raise ValueError(f"data shape {arr.shape} does not match grid {expect}")
    header = (
        f"dims {grid.dims[0]} {grid.dims[1]} {grid.dims[2]}\n"
        f"spacing {_fmt(grid.spacing[0])} {_fmt(grid.spacing[1])} {_fmt(grid.spacing[2])}\n"
        f"origin {_fmt(grid.origin[0])} {_fmt(grid.origin[1])} {_fmt(grid.origin[2])}\n"
        f"dtype {dtype}\n"
        f"vdim {vdim}\n"
        "\n"
    )
    raw = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8"))
        fh.write(raw)


def read_rvol(path):
    """Read an RVOL file. Returns (grid, data); vector data has a trailing axis."""
    with open(path, "rb") as fh:
        blob = fh.read()
    head, _, rest = blob.partition(b"\n\n")
    fields = {}
    for line in head.decode("utf-8").splitlines():
        key, _, val = line.partition(" ")
        fields[key] = val.split()
    dims = tuple(int(v) for v in fields["dims"])
    spacing = tuple(float(v) for v in fields["spacing"])
    origin = tuple(float(v) for v in fields["origin"])
    dtype = fields["dtype"][0]
    vdim = int(fields["vdim"][0])
    grid = Grid(dims, spacing, origin)
    arr = np.frombuffer(rest, dtype=_DTYPES[dtype]).astype(
        np.float64 if dtype == "f32" else np.uint8
    )
    shape = grid.shape if vdim == 1 else grid.shape + (vdim,)
    return grid, arr.reshape(shape)


def write_affine(path, transform: AffineTransform) -> None:
    h = transform.homogeneous()
    lines = [" ".join(_fmt(v) for v in row) for row in h]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_affine(path) -> AffineTransform:
    rows = [
        [float(v) for v in line.split()]
        for line in Path(path).read_text(encoding="utf-8").splitlines()
        if line.strip()
    ]
    h = np.asarray(rows, dtype=float)
    d = h.shape[0] - 1
    if h.shape != (d + 1, d + 1):
        raise ValueError(f"affine file is not homogeneous square: {h.shape}")
    return AffineTransform(h[:d, :d], h[:d, d])


def write_diffeo(path_base, dmap: DiffeoMap) -> None:
    """Write forward/inverse RVOL vector files plus a JSON sidecar."""
    base = Path(path_base)
    fwd = base.with_suffix(".fwd.rvol")
    inv = base.with_suffix(".inv.rvol")
    write_rvol(fwd, dmap.grid, np.asarray(dmap.forward.data), dtype="f32")
    write_rvol(inv, dmap.grid, np.asarray(dmap.inverse.data), dtype="f32")
    sidecar = {"forward": fwd.name, "inverse": inv.name}
    base.with_suffix(".dmap.json").write_text(
        json.dumps(sidecar, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def read_diffeo(path_base) -> DiffeoMap:
    base = Path(path_base)
    sidecar = json.loads(base.with_suffix(".dmap.json").read_text(encoding="utf-8"))
    grid_f, fwd = read_rvol(base.parent / sidecar["forward"])
    grid_i, inv = read_rvol(base.parent / sidecar["inverse"])
    if grid_f != grid_i:
        raise ValueError("forward/inverse grids differ")
    return DiffeoMap(grid_f, VectorField(grid_f, fwd), VectorField(grid_i, inv))
