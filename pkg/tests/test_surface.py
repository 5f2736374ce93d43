import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fuseforge.camera import PinholeIntrinsics
from fuseforge.mc_tables import TRI_TABLE
from fuseforge.se3 import RigidTransform, twist_to_transform
from fuseforge.surface import TriangleMesh, marching_cubes, raycast_mesh, raycast_volume, vertex_normals
from fuseforge.volume import HashedTsdfVolume

from conftest import sphere_volume

INTR = PinholeIntrinsics(150.0, 150.0, 79.5, 59.5, 160, 120)


def edge_use_counts(faces):
    e = np.sort(np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]]), axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    return counts


def face_areas(mesh):
    v = mesh.vertices[mesh.faces]
    return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)


def cube_volume(signs):
    """One lattice cube with corner values +-0.5 (corner order x fastest)."""
    vol = HashedTsdfVolume(0.1)
    g = np.array([[c & 1, (c >> 1) & 1, (c >> 2) & 1] for c in range(8)]) + 16
    vol.set_voxels(g, np.asarray(signs, float) * 0.5, 1.0)
    return vol


def test_cube_all_positive_no_triangles():
    assert marching_cubes(cube_volume([1] * 8)).n_faces == 0
    assert marching_cubes(cube_volume([-1] * 8)).n_faces == 0


@pytest.mark.parametrize("corner", range(8))
def test_cube_single_negative_one_triangle(corner):
    s = [1] * 8
    s[corner] = -1
    mesh = marching_cubes(cube_volume(s))
    assert mesh.n_faces == 1
    # vertices at edge midpoints (values +-0.5)
    assert np.all(np.isclose((mesh.vertices / 0.1 * 2) % 1, 0, atol=1e-9))


def test_tri_table_single_bit_entries():
    for c in range(8):
        row = [x for x in TRI_TABLE[1 << c] if x >= 0]
        assert len(row) == 3
    assert all(x < 0 for x in TRI_TABLE[0]) and all(x < 0 for x in TRI_TABLE[255])


def test_sphere_mesh_fidelity(sphere_vol):
    mesh = marching_cubes(sphere_vol)
    r = np.linalg.norm(mesh.vertices, axis=1)
    assert np.abs(r - 0.5).max() < sphere_vol.voxel_size
    counts = edge_use_counts(mesh.faces)
    assert np.all(counts == 2)
    # outward orientation on every face with positive area
    area = face_areas(mesh)
    cen = mesh.vertices[mesh.faces].mean(1)
    fn = mesh.face_normals()
    pos = area > 1e-12
    assert pos.mean() > 0.99
    assert np.all(np.sum(fn[pos] * cen[pos], axis=1) > 0)
    # vertex normals radial
    assert np.min(np.sum(mesh.normals * mesh.vertices / r[:, None], axis=1)) > 0.99


def test_mc_deterministic(sphere_vol):
    a, b = marching_cubes(sphere_vol), marching_cubes(sphere_vol)
    assert a.vertices.tobytes() == b.vertices.tobytes() and a.faces.tobytes() == b.faces.tobytes()


def test_mc_empty_volume():
    mesh = marching_cubes(HashedTsdfVolume(0.01))
    assert mesh.n_vertices == 0 and mesh.n_faces == 0


@given(st.floats(0.15, 0.35), st.tuples(*[st.floats(-0.05, 0.05)] * 3))
@settings(max_examples=8)
def test_mc_sphere_property(radius, center):
    vol = sphere_volume(radius, 0.02, center)
    mesh = marching_cubes(vol)
    r = np.linalg.norm(mesh.vertices - np.round(np.asarray(center) / 0.02) * 0.02, axis=1)
    assert np.abs(r - radius).max() < 0.02
    assert np.all(edge_use_counts(mesh.faces) == 2)


def plane_volume(z=1.0):
    vol = HashedTsdfVolume(0.01)
    vol.integrate_frame(np.full((INTR.height, INTR.width), z), None, RigidTransform.identity(), INTR)
    return vol


def test_raycast_plane_depth_and_normals():
    vol = plane_volume(1.0)
    view = raycast_volume(vol, RigidTransform.identity(), INTR, (0.2, 3.0))
    assert abs(view.depth[59, 79] - 1.0) <= vol.voxel_size / 2
    inner = view.depth[10:-10, 10:-10] > 0
    assert inner.all()
    n = view.normals[10:-10, 10:-10][inner]
    ang = np.degrees(np.arccos(np.clip(n @ np.array([0, 0, -1.0]), -1, 1)))
    assert ang.max() < 2.0
    assert np.abs(view.depth[10:-10, 10:-10] - 1.0).max() <= vol.voxel_size / 2


def test_raycast_unallocated_invalid():
    vol = plane_volume(1.0)
    view = raycast_volume(vol, RigidTransform(translation=[50.0, 0, 0]), INTR, (0.2, 3.0))
    assert not view.valid.any()


def test_raycast_moved_camera(sphere_vol):
    pose = twist_to_transform([0.1, -0.2, 0.05, 0.3, -0.1, -1.8])
    view = raycast_volume(sphere_vol, pose, INTR, (0.2, 4.0))
    pts = pose.apply(view.points[view.valid])
    assert len(pts) > 500
    assert np.abs(np.linalg.norm(pts, axis=1) - 0.5).max() < 0.01


def test_raycast_bad_range():
    with pytest.raises(ValueError):
        raycast_volume(plane_volume(), RigidTransform.identity(), INTR, (1.0, 0.5))


def big_triangle(z):
    return np.array([[-10, -10, z], [10, -10, z], [0, 10, z]], float)


def test_mesh_raycast_single_triangle():
    mesh = TriangleMesh(big_triangle(2.0), [[0, 1, 2]])
    view = raycast_mesh(mesh, RigidTransform.identity(), INTR)
    assert view.valid.all()
    assert np.abs(view.depth - 2.0).max() < 1e-6
    assert np.all(view.face_index == 0)


def test_mesh_raycast_miss_and_nearest():
    small = TriangleMesh([[0.5, 0.5, 1], [0.6, 0.5, 1], [0.5, 0.6, 1]], [[0, 1, 2]])
    view = raycast_mesh(small, RigidTransform.identity(), INTR)
    assert not view.valid[59, 79] and view.face_index[59, 79] == -1
    two = TriangleMesh(np.vstack([big_triangle(2.0), big_triangle(1.0)]), [[0, 1, 2], [3, 4, 5]])
    view = raycast_mesh(two, RigidTransform.identity(), INTR)
    assert np.abs(view.depth - 1.0).max() < 1e-9 and np.all(view.face_index == 1)


def test_mesh_raycast_barycentric_reconstructs_points(rng):
    verts = np.array([[-0.6, -0.5, 1.6], [0.7, -0.4, 2.1], [0.1, 0.6, 1.9]])
    mesh = TriangleMesh(verts, [[0, 1, 2]])
    view = raycast_mesh(mesh, RigidTransform.identity(), INTR)
    hit = view.valid
    rec = np.einsum("ij,ijk->ik", view.barycentric[hit], verts[mesh.faces[view.face_index[hit]]])
    assert np.abs(rec - view.points[hit]).max() < 1e-9


def test_mesh_raycast_agrees_with_volume(sphere_vol):
    mesh = marching_cubes(sphere_vol)
    pose = RigidTransform(translation=[0, 0, -2.0])
    a = raycast_mesh(mesh, pose, INTR)
    b = raycast_volume(sphere_vol, pose, INTR, (0.5, 4.0))
    both = a.valid & b.valid
    assert both.sum() > 1000
    assert np.abs(a.depth - b.depth)[both].max() < 0.01


def test_vertex_normals_plane():
    n = vertex_normals([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
    assert np.allclose(n, [0, 0, 1])


def test_mesh_validate():
    with pytest.raises(ValueError):
        TriangleMesh([[0, 0, 0]], [[0, 0, 3]]).validate()
