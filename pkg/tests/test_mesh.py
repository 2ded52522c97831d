import numpy as np
import pytest

from conftest import sphere_label
from regstack.grid import AffineTransform, Grid, ScalarVolume
from regstack.mesh import (
    FacePartition,
    TriMesh,
    box_mesh,
    icosphere,
    marching_cubes,
    partition_faces,
    read_obj,
    read_overrides,
    read_partition,
    submesh,
    to_current,
    transform_mesh,
    union_meshes,
    write_obj,
    write_partition,
)


def closed_residual(mesh: TriMesh) -> float:
    """|sum of area-weighted normals| relative to total area."""
    return float(np.linalg.norm(mesh.face_normals().sum(axis=0))) / mesh.total_area()


def edges_shared_exactly_twice(mesh: TriMesh) -> bool:
    f = np.asarray(mesh.faces)
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    e = np.sort(e, axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    return bool(np.all(counts == 2))


def test_trimesh_rejects_bad_faces():
    v = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]])
    with pytest.raises(ValueError):
        TriMesh(v, np.array([[0, 1, 3]]))
    with pytest.raises(ValueError, match="degenerate"):
        TriMesh(np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0]]), np.array([[0, 1, 2]]))


def test_marching_cubes_single_voxel():
    g = Grid((5, 5, 5), (1, 1, 1))
    data = np.zeros(g.shape, dtype=np.uint8)
    data[2, 2, 2] = 1
    mesh = marching_cubes(ScalarVolume(g, data), iso=0.5)
    assert mesh.signed_volume() > 0
    assert mesh.euler_characteristic() == 2
    assert closed_residual(mesh) < 1e-12
    # all vertices on the half-voxel octahedron around the center
    assert np.abs(np.abs(mesh.vertices - 2.0).sum(axis=1) - 0.5).max() < 1e-12


def test_marching_cubes_digital_sphere_volume():
    g = Grid((24, 24, 24), (1.0, 1.0, 1.0))
    lab = sphere_label(g, center=(11.5, 11.5, 11.5), radius=10.0)
    mesh = marching_cubes(lab, iso=0.5)
    analytic = 4.0 / 3.0 * np.pi * 10.0**3
    assert abs(mesh.signed_volume() - analytic) / analytic < 0.05
    assert closed_residual(mesh) < 1e-9
    assert edges_shared_exactly_twice(mesh)


def test_marching_cubes_half_space_plane_offset():
    g = Grid((8, 8, 10), (1.0, 1.0, 0.5), (0.0, 0.0, 0.0))
    coords = g.coordinate_arrays()
    z0 = 2.0  # on-grid plane
    data = (coords[..., 2] < z0).astype(np.uint8)
    mesh = marching_cubes(ScalarVolume(g, data), iso=0.5)
    # the top sheet sits exactly at z0 - 0.5 * sz
    top = np.asarray(mesh.vertices)[:, 2].max()
    assert top == pytest.approx(z0 - 0.25, abs=1e-12)
    assert closed_residual(mesh) < 1e-12


def test_marching_cubes_rejects_empty_and_full():
    g = Grid((4, 4, 4), (1, 1, 1))
    with pytest.raises(ValueError, match="no isosurface"):
        marching_cubes(ScalarVolume(g, np.zeros(g.shape)), iso=0.5)
    with pytest.raises(ValueError, match="no isosurface"):
        marching_cubes(ScalarVolume(g, np.ones(g.shape)), iso=0.5)


def test_marching_cubes_random_volumes_are_watertight(rng):
    # ambiguous configurations appear here; the table must stay consistent
    g = Grid((7, 7, 7), (1, 1, 1))
    for _ in range(12):
        data = (rng.random(g.shape) < 0.4).astype(np.uint8)
        if data.min() == data.max():
            continue
        mesh = marching_cubes(ScalarVolume(g, data), iso=0.5)
        assert closed_residual(mesh) < 1e-12
        assert edges_shared_exactly_twice(mesh)
        assert len(np.unique(mesh.faces.reshape(-1))) == mesh.n_vertices


def test_marching_cubes_no_degenerate_or_unreferenced(rng):
    g = Grid((16, 16, 16), (0.7, 0.7, 0.7))
    lab = sphere_label(g, center=(5.25, 5.25, 5.25), radius=3.4)
    mesh = marching_cubes(lab, iso=0.5)
    assert mesh.face_areas().min() > 1e-12
    assert len(np.unique(mesh.faces.reshape(-1))) == mesh.n_vertices


def test_partition_box_axis_aligned():
    mesh = box_mesh((0, 0, 0), (10, 8, 6))
    part = partition_faces(mesh, (0, 0, 1), cos_threshold=0.7, min_component=1)
    z = mesh.face_centers()[:, 2]
    assert set(np.nonzero(part.labels == "head")[0]) == set(np.nonzero(z == 6.0)[0])
    assert set(np.nonzero(part.labels == "foot")[0]) == set(np.nonzero(z == 0.0)[0])
    assert part.counts() == {"head": 2, "foot": 2, "exterior": 8}


def test_partition_box_rotated_ten_degrees():
    mesh = box_mesh((0, 0, 0), (10, 8, 6))
    ang = np.deg2rad(10.0)
    rot = AffineTransform(
        np.array(
            [
                [1, 0, 0],
                [0, np.cos(ang), -np.sin(ang)],
                [0, np.sin(ang), np.cos(ang)],
            ]
        ),
        np.zeros(3),
    )
    rotated = transform_mesh(mesh, rot)
    part = partition_faces(rotated, (0, 0, 1), cos_threshold=0.7, min_component=1)
    base = partition_faces(mesh, (0, 0, 1), cos_threshold=0.7, min_component=1)
    assert np.array_equal(part.labels, base.labels)


def test_partition_sphere_cap_fraction():
    mesh = icosphere(radius=5.0, subdivisions=4)
    part = partition_faces(mesh, (0, 0, 1), cos_threshold=0.7, min_component=1)
    areas = mesh.face_areas()
    total = areas.sum()
    head_frac = areas[part.indices("head")].sum() / total
    foot_frac = areas[part.indices("foot")].sum() / total
    # spherical cap above the threshold angle covers (1 - cos theta) / 2
    expect = (1.0 - 0.7) / 2.0
    assert head_frac == pytest.approx(expect, abs=0.02)
    assert foot_frac == pytest.approx(expect, abs=0.02)


def test_partition_rotation_equivariance():
    mesh = icosphere(radius=3.0, subdivisions=3)
    ang = 0.7
    rot = AffineTransform(
        np.array(
            [
                [np.cos(ang), -np.sin(ang), 0],
                [np.sin(ang), np.cos(ang), 0],
                [0, 0, 1],
            ]
        )
        @ np.array(
            [
                [1, 0, 0],
                [0, np.cos(0.4), -np.sin(0.4)],
                [0, np.sin(0.4), np.cos(0.4)],
            ]
        ),
        np.zeros(3),
    )
    axis = np.array([0.3, -0.2, 0.93])
    axis /= np.linalg.norm(axis)
    base = partition_faces(mesh, axis, 0.7, min_component=1)
    rotated = partition_faces(transform_mesh(mesh, rot), rot.matrix @ axis, 0.7, min_component=1)
    assert np.array_equal(base.labels, rotated.labels)


def test_partition_small_component_cleanup_and_overrides():
    mesh = icosphere(radius=5.0, subdivisions=4)
    # default min_component smooths single-face speckles introduced by overrides
    part = partition_faces(mesh, (0, 0, 1), 0.7, min_component=1, overrides={0: "foot"})
    assert part.labels[0] == "foot"
    with pytest.raises(ValueError, match="block face not found"):
        partition_faces(box_mesh((0, 0, 0), (1, 1, 1)), (0, 0, 1), 0.7)  # min_component=10


def test_union_single_mesh_identity():
    mesh = icosphere(radius=2.0, subdivisions=2)
    out = union_meshes([mesh])
    assert out.n_faces == mesh.n_faces
    assert out.total_area() == pytest.approx(mesh.total_area(), rel=1e-12)


def test_union_disjoint_boxes_adds_faces():
    a = box_mesh((0, 0, 0), (1, 1, 1))
    b = box_mesh((5, 5, 5), (6, 6, 6))
    out = union_meshes([a, b])
    assert out.n_faces == a.n_faces + b.n_faces
    assert out.n_vertices == a.n_vertices + b.n_vertices


def test_union_coincident_wall_cancels():
    a = box_mesh((0, 0, 0), (1, 1, 1))
    b = box_mesh((1, 0, 0), (2, 1, 1))
    out = union_meshes([a, b])
    assert out.n_faces == 24 - 4
    assert closed_residual(out) < 1e-12
    assert out.signed_volume() == pytest.approx(2.0, rel=1e-12)


def test_union_empty_list():
    out = union_meshes([])
    assert out.n_faces == 0


def test_to_current_unit_triangle_and_orientation():
    tri = TriMesh(
        np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]]), np.array([[0, 1, 2]])
    )
    cur = to_current(tri)
    assert np.allclose(cur.centers[0], [1 / 3, 1 / 3, 0], atol=1e-15)
    assert np.allclose(cur.normals[0], [0, 0, 0.5], atol=1e-15)
    flipped = TriMesh(tri.vertices, np.array([[0, 2, 1]]))
    assert np.allclose(to_current(flipped).normals[0], [0, 0, -0.5], atol=1e-15)


def test_to_current_closed_sphere_sums():
    mesh = icosphere(radius=1.0, subdivisions=3)
    cur = to_current(mesh)
    assert np.linalg.norm(cur.normals.sum(axis=0)) < 1e-9 * cur.total_area()
    assert cur.total_area() == pytest.approx(4 * np.pi, rel=0.02)


def test_current_normal_magnitude_matches_area():
    mesh = icosphere(radius=2.0, subdivisions=2)
    cur = to_current(mesh)
    mags = np.sqrt((cur.normals**2).sum(axis=1))
    assert np.abs(mags - mesh.face_areas()).max() < 1e-12 * mags.max()


def test_submesh_reindexes():
    mesh = box_mesh((0, 0, 0), (1, 1, 1))
    part = partition_faces(mesh, (0, 0, 1), 0.7, min_component=1)
    top = submesh(mesh, part.indices("head"))
    assert top.n_faces == 2
    assert top.n_vertices == 4
    assert np.all(top.vertices[:, 2] == 1.0)


def test_obj_round_trip(tmp_path):
    mesh = icosphere(radius=1.5, subdivisions=1)
    write_obj(tmp_path / "m.obj", mesh)
    back = read_obj(tmp_path / "m.obj")
    assert np.array_equal(back.vertices, mesh.vertices)
    assert np.array_equal(back.faces, mesh.faces)


def test_partition_and_override_files(tmp_path):
    labels = FacePartition(np.array(["head", "foot", "exterior", "head"]))
    write_partition(tmp_path / "p.txt", labels)
    back = read_partition(tmp_path / "p.txt")
    assert np.array_equal(back.labels, labels.labels)

    (tmp_path / "ov.txt").write_text("0 exterior\n3 foot\n")
    ov = read_overrides(tmp_path / "ov.txt")
    assert ov == {0: "exterior", 3: "foot"}
