import numpy as np
import pytest

from regstack.grid import (
    AffineTransform,
    DiffeoMap,
    Grid,
    ScalarImage,
    VectorField,
    compose_maps,
    jacobian_determinant,
)
from regstack.image_reg import (
    DivergenceError,
    FluidConfig,
    downsample_image,
    gaussian_blur,
    register_affine_image,
    register_fluid,
    smoothing_inverse,
    stack_blockface,
    warp_image_affine,
)


def image_grid(n=64, spacing=1.0):
    return Grid((n, n, 1), (spacing, spacing, 1.0))


def blob_indicator(grid: Grid, transform=None):
    """Asymmetric two-disk blob; optionally pre-transformed analytically."""
    pts = grid.points()
    if transform is not None:
        pts = transform.inverse().apply_points(pts)
    c1 = np.array([26.0, 30.0])
    c2 = np.array([38.0, 36.0])
    d1 = ((pts - c1) ** 2).sum(axis=1) < 12.0**2
    d2 = ((pts - c2) ** 2).sum(axis=1) < 7.0**2
    return ScalarImage(grid, (d1 | d2).astype(float).reshape(grid.shape))


def rot2_about(theta, center):
    c, s = np.cos(theta), np.sin(theta)
    m = np.array([[c, -s], [s, c]])
    center = np.asarray(center, float)
    return AffineTransform(m, center - m @ center)


def test_affine_identity_for_identical_images():
    g = image_grid()
    img = blob_indicator(g)
    t = register_affine_image(img, img, dof="rigid3")
    assert np.abs(t.matrix - np.eye(2)).max() < 1e-12
    assert np.abs(t.translation).max() < 1e-12


def test_affine_recovers_rotation_translation():
    g = image_grid()
    truth = AffineTransform(
        rot2_about(np.deg2rad(5.0), (32.0, 32.0)).matrix,
        rot2_about(np.deg2rad(5.0), (32.0, 32.0)).translation + np.array([3.0, 1.0]),
    )
    moving = blob_indicator(g)
    fixed = blob_indicator(g, transform=truth)
    rec = register_affine_image(moving, fixed, dof="rigid3")
    ang_err = np.rad2deg(
        abs(np.arctan2(rec.matrix[1, 0], rec.matrix[0, 0]) - np.deg2rad(5.0))
    )
    assert ang_err < 0.2
    center = np.array([32.0, 32.0])
    assert np.linalg.norm(rec.apply_points(center) - truth.apply_points(center)) < 0.2


def test_affine_blank_fixed_raises_no_overlap():
    g = image_grid()
    moving = blob_indicator(g)
    blank = ScalarImage(g, np.zeros(g.shape))
    with pytest.raises(ValueError, match="no overlap"):
        register_affine_image(moving, blank)


def test_downsample_preserves_mass_scale():
    g = image_grid(64)
    img = blob_indicator(g)
    half = downsample_image(img, 2)
    assert half.grid.dims == (32, 32, 1)
    assert np.asarray(half.data).mean() == pytest.approx(np.asarray(img.data).mean(), abs=1e-12)


def test_gaussian_blur_conserves_mean():
    rng = np.random.default_rng(7)
    a = rng.random((20, 24))
    b = gaussian_blur(a, 1.0)
    assert b.mean() == pytest.approx(a.mean(), abs=0.01)


def test_spectral_smoother_matches_analytic_symbol():
    g = Grid((32, 24, 1), (1.3, 0.7, 1.0))
    alpha, gamma = 1.7, 0.23
    ny, nx = 24, 32
    ys, xs = np.meshgrid(np.arange(ny), np.arange(nx), indexing="ij")
    for kx, ky in [(1, 0), (0, 1), (3, 2), (7, 5)]:
        # per-pixel angular frequencies of the grid
        wx = 2 * np.pi * kx / nx
        wy = 2 * np.pi * ky / ny
        mode = np.cos(wx * xs + wy * ys)
        field = np.stack([mode, 0.5 * mode], axis=-1)
        out = smoothing_inverse(field, g, alpha, 0.0, gamma, pad_fraction=0.0)
        expect = field / (alpha * (wx**2 + wy**2) + gamma)
        assert np.abs(out - expect).max() < 1e-10


def test_fluid_identity_for_identical_images():
    g = image_grid(32)
    img = blob_indicator(g)
    res = register_fluid(img, img, FluidConfig(scales=(2, 1)))
    assert res.final_energy == 0.0
    assert np.abs(np.asarray(res.dmap.forward.data)).max() == 0.0


def disk_image(grid, center, radius=10.0):
    pts = grid.points()
    d = ((pts - np.asarray(center, float)) ** 2).sum(axis=1) < radius**2
    return ScalarImage(grid, d.astype(float).reshape(grid.shape))


def test_fluid_recovers_translation():
    g = image_grid(64)
    moving = disk_image(g, (28.0, 32.0))
    fixed = disk_image(g, (32.0, 32.0))
    res = register_fluid(moving, fixed)
    assert res.final_energy <= 0.01 * res.initial_energy
    inside = ((g.points() - np.array([28.0, 32.0])) ** 2).sum(axis=1) < 8.0**2
    fwd = np.asarray(res.dmap.forward.data).reshape(-1, 2)
    mean_disp = fwd[inside].mean(axis=0)
    assert np.abs(mean_disp - np.array([4.0, 0.0])).max() < 0.3
    for stage in res.energies:
        assert all(b <= a for a, b in zip(stage, stage[1:]))


def radial_bulge_displacement(points, center, amplitude, direction_rad, radius0,
                              sigma_r=7.0, sigma_theta=0.9, ramp=5.0):
    """Analytic boundary-normal warp: a radial bulge of the given amplitude
    centered on one side of a disk. Purely radial, so tissue-edge motion is
    fully observable by an intensity metric."""
    p = np.atleast_2d(np.asarray(points, dtype=float)) - np.asarray(center, float)
    r = np.sqrt((p**2).sum(axis=1))
    theta = np.arctan2(p[:, 1], p[:, 0])
    dth = np.angle(np.exp(1j * (theta - direction_rad)))
    mag = (
        amplitude
        * np.exp(-(dth**2) / (2 * sigma_theta**2))
        * np.exp(-((r - radius0) ** 2) / (2 * sigma_r**2))
        * (1.0 - np.exp(-(r**2) / (2 * ramp**2)))
    )
    unit = np.zeros_like(p)
    ok = r > 1e-12
    unit[ok] = p[ok] / r[ok, None]
    return mag[:, None] * unit


def textured_disk_image(grid, center, radius):
    """Disk with smooth interior texture and a one-pixel partial-volume edge.

    The texture makes the full deformation observable to an intensity metric
    (a flat mask only determines boundary-normal motion)."""
    pts = grid.points() - np.asarray(center, float)
    r = np.sqrt((pts**2).sum(axis=1))
    theta = np.arctan2(pts[:, 1], pts[:, 0])
    px = min(grid.spacing[:2])
    edge = np.clip(0.5 + (radius - r) / px, 0.0, 1.0)
    tex = 0.55 + 0.45 * np.cos(3.0 * theta) * np.cos(0.55 * r - 1.2)
    return ScalarImage(grid, (edge * tex).reshape(grid.shape))


def make_disk_to_bulge_case(n=64, amplitude=6.0, n_landmarks=25):
    """Textured moving disk, analytically warped fixed image, the ground-truth
    warp, and landmarks seeded inside the disk."""
    g = Grid((n, n, 1), (1.0, 1.0, 1.0))
    center = np.array([n / 2.0, n / 2.0])
    radius = 0.22 * n
    truth_args = dict(
        center=center, amplitude=amplitude, direction_rad=np.pi, radius0=radius,
        sigma_r=0.11 * n, ramp=0.08 * n,
    )
    u = radial_bulge_displacement(g.points(), **truth_args).reshape(g.shape + (2,))
    warp = DiffeoMap.from_displacements(g, u)
    moving = textured_disk_image(g, center, radius)
    from regstack.grid import apply_map_to_volume

    fixed = apply_map_to_volume(moving, warp, mode="linear")
    rng = np.random.default_rng(1234)
    seeds = []
    while len(seeds) < n_landmarks:
        p = center + rng.uniform(-radius, radius, size=2)
        if np.linalg.norm(p - center) < 0.9 * radius:
            seeds.append(p)
    seeds = np.asarray(seeds)
    truth = seeds + radial_bulge_displacement(seeds, **truth_args)
    return g, moving, fixed, seeds, truth


def test_fluid_disk_to_bulge_landmark_accuracy():
    g, moving, fixed, seeds, truth = make_disk_to_bulge_case(64)
    res = register_fluid(moving, fixed)
    det = jacobian_determinant(g, np.asarray(res.dmap.forward.data))
    assert det.min() > 0
    got = res.dmap.apply_points(seeds)
    tre = np.linalg.norm(got - truth, axis=1)
    assert tre.mean() <= 0.5
    for stage in res.energies:
        assert all(b <= a for a, b in zip(stage, stage[1:]))


def test_fluid_requires_common_grid():
    a = disk_image(image_grid(64), (32, 32))
    b = disk_image(image_grid(32), (16, 16))
    with pytest.raises(ValueError, match="common grid"):
        register_fluid(a, b)


def test_fluid_symmetrized_composition_near_identity():
    g = image_grid(64)
    a = textured_disk_image(g, (28.0, 32.0), 14.0)
    b = textured_disk_image(g, (32.0, 30.0), 14.0)
    ab = register_fluid(a, b).dmap
    ba = register_fluid(b, a).dmap
    comp = compose_maps(ab, ba)
    # evaluated over the tissue (the map is data-driven only there)
    tissue = (np.asarray(a.data) > 0) | (np.asarray(b.data) > 0)
    dev = np.sqrt((np.asarray(comp.forward.data) ** 2).sum(axis=-1))
    assert dev[tissue].max() <= 1.0  # px (1 mm spacing)


def test_stack_blockface_identical_images():
    g = image_grid(48)
    img = blob_indicator(g)
    transforms = stack_blockface([img] * 5)
    for t in transforms:
        assert np.abs(t.homogeneous() - np.eye(3)).max() == 0.0


def test_stack_blockface_recovers_alternating_jitter():
    g = image_grid(64)
    shifts = [0.0, 1.0, -1.0, 1.0, -1.0]
    images = []
    for s in shifts:
        t = AffineTransform(np.eye(2), np.array([s, 0.0]))
        images.append(blob_indicator(g, transform=t))
    transforms = stack_blockface(images)
    # to-reference transforms undo the seeded content jitter
    for t, s in zip(transforms, shifts):
        assert abs(t.translation[0] + s) < 0.1
        assert abs(t.translation[1]) < 0.1


def test_stack_blockface_blank_frame_errors_with_index():
    g = image_grid(48)
    img = blob_indicator(g)
    blank = ScalarImage(g, np.zeros(g.shape))
    with pytest.raises(ValueError, match="frame 2"):
        stack_blockface([img, img, blank, img])


def test_warp_image_affine_round_trip():
    g = image_grid(64)
    img = blob_indicator(g)
    t = AffineTransform(np.eye(2), np.array([3.0, -2.0]))
    warped = warp_image_affine(img, t)
    back = warp_image_affine(warped, t.inverse())
    inner = np.asarray(img.data)[0, 8:-8, 8:-8]
    assert np.abs(np.asarray(back.data)[0, 8:-8, 8:-8] - inner).max() < 1e-12
