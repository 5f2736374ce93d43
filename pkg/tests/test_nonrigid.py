import numpy as np
import pytest

from fuseforge.camera import PinholeIntrinsics
from fuseforge.defgraph import DeformationGraph, build_graph, warp_mesh
from fuseforge.dualquat import dq_array_to_rt, dq_from_transform
from fuseforge.nonrigid import (AssociationError, NodeCorrespondence, NonRigidConfig, SolverDivergence,
                                apply_twists, associate_index, associate_projective, build_data_term,
                                build_reg_term, data_residuals, energies, reg_residuals, solve_warp_field,
                                tukey_rho)
import fuseforge.nonrigid as nonrigid
from fuseforge.se3 import RigidTransform, transform_to_twist, twist_to_transform
from fuseforge.surface import TriangleMesh, raycast_mesh
from fuseforge.synthetic import apply_synthetic_deformation, generate_synthetic_plane

from oracles import nonrigid_fd_rows, nonrigid_setup


@pytest.fixture(scope="module")
def setup():
    return nonrigid_setup()


@pytest.fixture(scope="module")
def plane():
    return generate_synthetic_plane(21, 13, 1.0)


def bowl_mesh(plane):
    v = plane.vertices.copy()
    v[:, 2] = 0.4 * (v[:, 0] ** 2 + v[:, 1] ** 2)
    return TriangleMesh(v, plane.faces)


# -- structure ---------------------------------------------------------------------------

def test_block_sparsity(setup):
    _, graph, corrs = setup
    jd, _, keep = build_data_term(corrs, graph)
    assert jd.cols.shape == (len(keep), graph.k) and jd.row_height == 1
    assert np.all(np.diff(jd.cols, axis=1) > 0)
    jr, rr = build_reg_term(graph, 0.2)
    assert jr.cols.shape == (len(graph) * graph.k, 2) and jr.row_height == 3
    assert np.all(jr.cols[:, 0] < jr.cols[:, 1])
    dense = jd.to_dense()
    assert np.all(np.count_nonzero(dense.reshape(len(keep), -1, 6).any(axis=2), axis=1) <= graph.k)


@pytest.mark.parametrize("nodes", [8, 15, 20])
def test_sparse_jtj_matches_dense(nodes):
    _, graph, corrs = nonrigid_setup(rows=15, cols=11, nodes=nodes, seed=nodes)
    jd, rd, _ = build_data_term(corrs, graph)
    jr, rr = build_reg_term(graph, 0.7)
    for j, r in ((jd, rd), (jr, rr)):
        d = j.to_dense()
        assert np.abs(j.jtj().toarray() - d.T @ d).max() < 1e-9
        assert np.abs(j.jtr(r) - d.T @ r).max() < 1e-9
        assert np.abs(j.to_csr().toarray() - d).max() == 0


def test_single_node_z_offset():
    graph = DeformationGraph(np.zeros((1, 3)), [1.0], np.zeros((1, 0), np.int64), 1)
    corrs = NodeCorrespondence(np.array([[0.0, 0, 0.01]]), np.array([[0.0, 0, 0.01]]), np.array([[0.0, 0, 1]]),
                               np.zeros((1, 3)), np.zeros((1, 1), np.int64), np.ones((1, 1)))
    j, r, _ = build_data_term(corrs, graph, robust_weights=np.ones(1))
    assert r[0] == pytest.approx(0.01, abs=1e-15)
    assert np.allclose(j.to_dense(), [[0, 0, 0, 0, 0, 1]], atol=1e-15)
    # with the Tukey weight the row is scaled by sqrt((1 - (0.01/0.05)^2)^2)
    j, r, _ = build_data_term(corrs, graph, tukey_lambda=0.05)
    assert r[0] == pytest.approx(0.01 * 0.96, rel=1e-12)


def test_aligned_rows_zero(plane):
    g = build_graph(plane, 40, 4, seed=1)
    corrs = associate_index(plane, g, plane)
    assert np.all(data_residuals(g, corrs) == 0)


def test_tukey_drops_outliers(setup):
    _, graph, corrs = setup
    r = data_residuals(graph, corrs)
    _, _, keep = build_data_term(corrs, graph, tukey_lambda=0.05)
    assert np.array_equal(keep, np.nonzero(np.abs(r) < 0.05)[0])


def test_tukey_rho_shape():
    r = np.linspace(-0.1, 0.1, 201)
    rho = tukey_rho(r, 0.05)
    assert np.allclose(rho[np.abs(r) >= 0.05], 0.05**2 / 3)
    small = np.abs(r) < 1e-3
    assert np.allclose(rho[small], r[small] ** 2, rtol=1e-3, atol=1e-12)


# -- regularization -------------------------------------------------------------------------

def test_reg_zero_for_identity_and_shared_transform(plane):
    g = build_graph(plane, 40, 4)
    assert np.all(reg_residuals(g)[0] == 0)
    t = twist_to_transform([0.2, -0.1, 0.3, 0.1, 0.2, 0.3])
    gs = g.with_dqs(np.tile(dq_from_transform(t).as_array(), (len(g), 1)))
    assert np.abs(reg_residuals(gs)[0]).max() < 1e-14


def test_reg_alpha_is_max_radius(setup):
    _, graph, _ = setup
    _, _, _, alpha, e = reg_residuals(graph)
    assert np.array_equal(alpha, np.maximum(graph.radii[e[:, 0]], graph.radii[e[:, 1]]))


def test_phi_scaling(setup):
    _, graph, corrs = setup
    a = energies(graph, corrs, NonRigidConfig(phi=0.3))
    b = energies(graph, corrs, NonRigidConfig(phi=0.6))
    assert a[0] == b[0] and a[1] == b[1]
    assert b[2] - b[0] == pytest.approx(2 * (a[2] - a[0]), rel=1e-12)
    _, r1 = build_reg_term(graph, 0.3)
    _, r2 = build_reg_term(graph, 1.2)
    assert np.allclose(r2, 2 * r1, rtol=1e-14, atol=0)


def test_jacobians_match_finite_differences(setup):
    _, graph, corrs = setup
    rel_d, rel_r = nonrigid_fd_rows(graph, corrs)
    assert len(rel_d) >= 1000 and len(rel_r) >= 1000
    assert rel_d.max() < 1e-4 and rel_r.max() < 1e-4


def test_single_edge_finite_differences(rng):
    pos = np.array([[0.0, 0, 0], [0.1, 0.05, 0.02]])
    dqs = [dq_from_transform(twist_to_transform(rng.normal(scale=0.05, size=6))).as_array() for _ in range(2)]
    g = DeformationGraph(pos, [0.1, 0.15], np.array([[1], [0]]), 1, np.array(dqs))
    j, r = build_reg_term(g, 0.5)
    d = j.to_dense()
    eps = 1e-6
    for c in range(12):
        e = np.zeros(12)
        e[c] = eps
        fd = (build_reg_term(apply_twists(g, e), 0.5)[1] - build_reg_term(apply_twists(g, -e), 0.5)[1]) / (2 * eps)
        assert np.allclose(d[:, c], fd, atol=1e-4 * max(1.0, np.abs(fd).max()))


# -- apply_twists ---------------------------------------------------------------------------

def test_apply_twists_left_composes(setup, rng):
    _, graph, _ = setup
    h = rng.normal(scale=0.1, size=6 * len(graph))
    out = apply_twists(graph, h)
    r0, t0 = dq_array_to_rt(graph.dqs)
    r1, t1 = dq_array_to_rt(out.dqs)
    for i in range(0, len(graph), 7):
        expect = twist_to_transform(h[6 * i:6 * i + 6]) @ RigidTransform(r0[i], t0[i])
        assert np.allclose(r1[i], expect.rotation, atol=1e-12) and np.allclose(t1[i], expect.translation, atol=1e-12)


# -- association ----------------------------------------------------------------------------

def test_index_association_count(plane):
    g = build_graph(plane, 50, 4)
    corrs = associate_index(plane, g, apply_synthetic_deformation(plane, "sinusoid", 0.02))
    assert len(corrs) == 273
    assert np.allclose(corrs.weights.sum(axis=1), 1.0, atol=1e-12)
    with pytest.raises(AssociationError):
        associate_index(plane, g, generate_synthetic_plane(5, 5, 1.0))


INTR = PinholeIntrinsics(200.0, 200.0, 79.5, 59.5, 160, 120)
CAM = RigidTransform(np.diag([1.0, -1.0, -1.0]), [0, 0, 1.2])  # above the plane, looking down -z


def test_projective_self_render_zero(plane):
    g = build_graph(plane, 50, 4)
    g = apply_twists(g, np.random.default_rng(2).normal(scale=0.01, size=6 * len(g)))
    live = raycast_mesh(warp_mesh(g, plane), CAM, INTR).depth
    corrs = associate_projective(plane, g, live, CAM, INTR, NonRigidConfig())
    assert len(corrs) > 1000
    # the rendered surface point and the live point at each pixel coincide
    assert np.abs(np.sum(corrs.normal * (corrs.warped - corrs.target), axis=1)).max() < 1e-9


def test_projective_shared_transform_model_residual_zero(plane):
    t = twist_to_transform([0.05, -0.03, 0.02, 0.01, 0.02, -0.03])
    g = build_graph(plane, 50, 4)
    g = g.with_dqs(np.tile(dq_from_transform(t).as_array(), (len(g), 1)))
    live = raycast_mesh(warp_mesh(g, plane), CAM, INTR).depth
    corrs = associate_projective(plane, g, live, CAM, INTR, NonRigidConfig())
    assert len(corrs) > 1000
    assert np.abs(data_residuals(g, corrs)).max() < 1e-9


@pytest.mark.parametrize("deg,ok", [(30.0, False), (10.0, True)])
def test_projective_angle_gate(plane, deg, ok):
    g = build_graph(plane, 50, 4)
    tilted = warp_mesh(g.with_dqs(np.tile(dq_from_transform(
        twist_to_transform([np.radians(deg), 0, 0, 0, 0, 0])).as_array(), (len(g), 1))), plane)
    live = raycast_mesh(tilted, CAM, INTR).depth
    cfg = NonRigidConfig(dist_reject=10.0)  # isolate the angle gate
    if ok:
        assert len(associate_projective(plane, g, live, CAM, INTR, cfg)) > 100
    else:
        with pytest.raises(AssociationError):
            associate_projective(plane, g, live, CAM, INTR, cfg)


# -- solver ---------------------------------------------------------------------------------

def test_target_equal_to_warped_converges_immediately(plane):
    t = twist_to_transform([0.1, 0.0, -0.05, 0.02, 0.0, 0.01])
    g = build_graph(plane, 60, 4)
    g = g.with_dqs(np.tile(dq_from_transform(t).as_array(), (len(g), 1)))
    res = solve_warp_field(g, plane, warp_mesh(g, plane))
    assert res.iterations <= 1 and res.energies[-1].e_total < 1e-12


def test_inconsistent_graph_relaxes_without_divergence(setup):
    # random node twists: the target already matches, only E_reg can drop
    src, graph, _ = setup
    res = solve_warp_field(graph, src, warp_mesh(graph, src))
    e = [r.e_total for r in res.energies]
    assert e[-1] < e[0] and all(b <= a for a, b in zip(e, e[1:]))


def test_flat_plane_normal_translation(plane):
    # a flat plane observes only the normal component of a translation
    g = build_graph(plane, 60, 4)
    t = np.array([0, 0, 0.02])
    res = solve_warp_field(g, plane, TriangleMesh(plane.vertices + t, plane.faces))
    rot, tr = dq_array_to_rt(res.graph.dqs)
    assert np.abs(tr[:, 2] - 0.02).max() < 1e-4
    assert res.energies[-1].e_reg < 1e-12


def test_curved_surface_rigid_translation(plane):
    bowl = bowl_mesh(plane)
    g = build_graph(bowl, 60, 4)
    t = np.array([0.03, -0.02, 0.04])
    res = solve_warp_field(g, bowl, TriangleMesh(bowl.vertices + t, bowl.faces))
    rot, tr = dq_array_to_rt(res.graph.dqs)
    assert np.abs(tr - t).max() < 1e-4
    assert np.abs(rot - np.eye(3)).max() < 1e-4
    assert res.energies[-1].e_reg < 1e-12


@pytest.mark.parametrize("kind", ["sinusoid", "bend", "fold"])
def test_energy_monotone(plane, kind):
    g = build_graph(plane, 60, 4)
    res = solve_warp_field(g, plane, apply_synthetic_deformation(plane, kind, 0.02))
    e = [r.e_total for r in res.energies]
    assert all(b < a for a, b in zip(e, e[1:]))
    assert res.converged


def test_bend_reduces_distance(plane):
    tgt = apply_synthetic_deformation(plane, "bend", 0.02)
    g = build_graph(plane, 100, 4)
    res = solve_warp_field(g, plane, tgt)
    d0 = np.linalg.norm(plane.vertices - tgt.vertices, axis=1).max()
    d1 = np.linalg.norm(warp_mesh(res.graph, plane).vertices - tgt.vertices, axis=1).max()
    assert d1 <= 0.1 * d0


def test_phi_trades_regularity_for_fit(plane):
    tgt = apply_synthetic_deformation(plane, "bend", 0.02)
    reg, data, mean_diff = [], [], []
    for phi in (0.02, 0.2, 2.0, 20.0, 1e6):
        g = build_graph(plane, 60, 4)
        res = solve_warp_field(g, plane, tgt, NonRigidConfig(phi=phi))
        reg.append(res.energies[-1].e_reg)
        data.append(res.energies[-1].e_data)
        rot, tr = dq_array_to_rt(res.graph.dqs)
        xi = np.array([transform_to_twist(RigidTransform(a, b)) for a, b in zip(rot, tr)])
        e = res.graph.edge_list()
        mean_diff.append(np.linalg.norm(xi[e[:, 0]] - xi[e[:, 1]], axis=1).mean())
    assert all(b < a for a, b in zip(reg, reg[1:]))
    assert all(b > a for a, b in zip(data, data[1:]))
    assert all(b < a for a, b in zip(mean_diff, mean_diff[1:]))
    assert mean_diff[-1] < 0.05 * mean_diff[0]


def test_divergence_raised(setup, monkeypatch):
    src, graph, _ = setup
    real = nonrigid.energies
    calls = {"n": 0}

    def rising(g, c, cfg):
        calls["n"] += 1
        ed, er, et = real(g, c, cfg)
        return ed, er, et * (1 + calls["n"])  # every trial looks worse

    monkeypatch.setattr(nonrigid, "energies", rising)
    with pytest.raises(SolverDivergence):
        solve_warp_field(graph, src, apply_synthetic_deformation(src, "sinusoid", 0.04))


def test_config_validation():
    with pytest.raises(ValueError):
        NonRigidConfig(phi=-1)
    with pytest.raises(ValueError):
        NonRigidConfig(max_iters=0)
    with pytest.raises(ValueError):
        NonRigidConfig(mode="nearest")
