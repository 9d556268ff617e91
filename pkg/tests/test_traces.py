import numpy as np
import pytest
import scipy.sparse.csgraph as csgraph
import scipy.sparse as sp

from conftest import pairing_bruteforce
from lsdfem.mesh import build_structured_mesh, refine_faces
from lsdfem.traces import (
    PiecewiseConstant,
    TraceVector,
    build_trace_space,
    decompose,
    lambda0_basis,
    pairing,
    solve_V0_pairing,
    zero_mean_basis,
)


@pytest.fixture(scope="module")
def space():
    return build_trace_space(refine_faces(build_structured_mesh(2, 2), 2))


def test_dimensions(space):
    n, nf = space.n_elements, space.n_coarse_faces
    assert space.dim_lambda0 == n
    assert space.dim_tilde0 == nf - n
    assert space.dim_tilde_f == space.n_fine - nf
    assert space.dim_lambda0 + space.dim_tilde0 + space.dim_tilde_f == space.n_fine


def test_side_views_are_negatives(space):
    rng = np.random.default_rng(0)
    mu = space.vector(rng.standard_normal(space.n_fine))
    mesh = space.mesh
    for f in range(mesh.n_faces):
        if mesh.face_boundary[f]:
            continue
        left, right = mesh.face_elements(f)
        gl = space.part.geometry[left]
        gr = space.part.geometry[right]
        sl = mu.side_values(left)[gl.face_rows[f]]
        fl = gl.boundary_face_ids[gl.face_rows[f]]
        sr = mu.side_values(right)[gr.face_rows[f]]
        fr = gr.boundary_face_ids[gr.face_rows[f]]
        assert np.array_equal(fl, fr)  # same global sub-face order from both sides
        assert np.array_equal(sl, -sr)


def test_lambda0_explicit_values(space):
    basis = lambda0_basis(space)
    mesh = space.mesh
    for i, lam in enumerate(basis):
        side = lam.side_values(i)
        assert np.allclose(side, 1.0)  # +1 seen from the owning element
        for f in range(mesh.n_faces):
            if mesh.face_boundary[f]:
                continue
            a, b = mesh.face_elements(f)
            if i in (a, b):
                other = b if i == a else a
                mate = lam.side_values(other)[space.part.geometry[other].face_rows[f]]
                assert np.allclose(mate, -1.0)


def test_lambda0_pairing_matrix_entries(space):
    mesh = space.mesh
    m = space.pairing_matrix
    for i in range(mesh.n_elements):
        assert m[i, i] == pytest.approx(mesh.boundary_measure(i), rel=1e-14)
        for jj in range(mesh.n_elements):
            if jj == i:
                continue
            shared = set(mesh.element_faces[i]) & set(mesh.element_faces[jj])
            expected = -sum(mesh.face_measures[f] for f in shared)
            assert m[i, jj] == pytest.approx(expected, rel=1e-14, abs=1e-15)


def test_opposite_jumps_cancel_on_continuous_traces():
    space = build_trace_space(refine_faces(build_structured_mesh(1, 1), 1))
    lam = lambda0_basis(space)
    mesh = space.mesh
    # Broken function, continuous across the shared diagonal face and zero
    # on the outer boundary: the pairing with the sum of jumps vanishes.
    v = []
    for geom in space.part.geometry:
        x, y = geom.nodes[:, 0], geom.nodes[:, 1]
        v.append(x * (1 - x) * y * (1 - y))
    combined = lam[0] + lam[1]
    assert pairing(space, combined, v) == pytest.approx(0.0, abs=1e-14)


def test_pairing_examples(space):
    basis = lambda0_basis(space)
    zero_v = [np.zeros(g.n_nodes) for g in space.part.geometry]
    rng = np.random.default_rng(5)
    mu = space.vector(rng.standard_normal(space.n_fine))
    assert pairing(space, mu, zero_v) == 0.0
    ind = PiecewiseConstant(np.zeros(space.n_elements))
    ind.values[1] = 1.0
    assert pairing(space, basis[1], ind) == pytest.approx(
        space.mesh.boundary_measure(1), rel=1e-14
    )


def test_pairing_matches_bruteforce_quadrature(space):
    rng = np.random.default_rng(11)
    mu = space.vector(rng.standard_normal(space.n_fine))
    v = [rng.standard_normal(g.n_nodes) for g in space.part.geometry]
    fast = pairing(space, mu, v)
    slow = pairing_bruteforce(space, mu, v)
    assert fast == pytest.approx(slow, rel=1e-13, abs=1e-13)


def test_zero_mean_basis_properties():
    for n in (1, 2, 4, 7):
        w = np.full(n, 0.25)
        z = zero_mean_basis(w)
        assert z.shape == (n, max(n - 1, 0))
        if n > 1:
            assert np.allclose(w @ z, 0.0, atol=1e-14)
            assert np.allclose(z.T @ z, np.eye(n - 1), atol=1e-14)


def test_decompose_reconstructs_and_orthogonality(space):
    rng = np.random.default_rng(7)
    mu = space.vector(rng.standard_normal(space.n_fine))
    mu0, mt0, mtf = decompose(space, mu)
    recon = mu0.values + mt0.values + mtf.values
    assert np.allclose(recon, mu.values, rtol=0, atol=1e-12 * np.abs(mu.values).max())
    # The two tilde parts pair to zero against every piecewise constant.
    for part_vec in (mt0, mtf):
        r = space.pair_v0 @ part_vec.values
        assert np.abs(r).max() < 1e-12
    # Face averages of the fine remainder vanish.
    assert np.abs(space.face_integrals(mtf.values)).max() < 1e-12
    # The face-constant part is constant per coarse face.
    nfs = space.part.faces_per_coarse
    per_face = mt0.values.reshape(space.n_coarse_faces, nfs)
    assert np.abs(per_face - per_face[:, :1]).max() < 1e-12


def test_decompose_fixed_points(space):
    basis = lambda0_basis(space)
    mu0, mt0, mtf = decompose(space, basis[3])
    assert np.allclose(mu0.values, basis[3].values, atol=1e-12)
    assert np.abs(mt0.values).max() < 1e-12
    assert np.abs(mtf.values).max() < 1e-12
    rng = np.random.default_rng(9)
    pure = space.random_tilde_f(rng)
    mu0, mt0, mtf = decompose(space, pure)
    assert np.abs(mu0.values).max() < 1e-12
    assert np.abs(mt0.values).max() < 1e-12
    assert np.allclose(mtf.values, pure.values, atol=1e-12)


def test_tilde0_basis_satisfies_constraints(space):
    stored = space.tilde0_stored_basis()
    assert stored.shape[1] == space.dim_tilde0
    constraints = space.pair_v0 @ stored
    assert np.abs(constraints).max() < 1e-12
    rank = np.linalg.matrix_rank(stored)
    assert rank == space.dim_tilde0


def test_solve_v0_pairing_against_dense_oracle(space):
    rng = np.random.default_rng(13)
    rhs = rng.standard_normal(space.n_elements)
    dense = np.linalg.solve(space.pairing_matrix, rhs)
    got = solve_V0_pairing(space, rhs)
    assert np.allclose(got, dense, rtol=1e-12, atol=1e-13)
    dense_t = np.linalg.solve(space.pairing_matrix.T, rhs)
    got_t = solve_V0_pairing(space, rhs, transpose=True)
    assert np.allclose(got_t, dense_t, rtol=1e-12, atol=1e-13)
    assert np.abs(solve_V0_pairing(space, np.zeros(space.n_elements))).max() == 0.0


def test_pairing_matrix_diagonally_dominant_and_irreducible(space):
    m = space.pairing_matrix
    mesh = space.mesh
    for i in range(m.shape[0]):
        off = np.abs(m[i]).sum() - abs(m[i, i])
        assert abs(m[i, i]) >= off - 1e-13
        touches_boundary = any(mesh.face_boundary[f] for f in mesh.element_faces[i])
        if touches_boundary:
            assert abs(m[i, i]) > off + 1e-12
    graph = sp.csr_matrix((np.abs(m) > 1e-14).astype(int))
    n_components, _ = csgraph.connected_components(graph, directed=False)
    assert n_components == 1


def test_membership_tests(space):
    rng = np.random.default_rng(21)
    tf = space.random_tilde_f(rng)
    assert space.is_tilde(tf)
    assert space.is_tilde_f(tf)
    lam = lambda0_basis(space)[0]
    assert not space.is_tilde(lam)


def test_serialization_roundtrip(tmp_path, space):
    rng = np.random.default_rng(2)
    mu = space.vector(rng.standard_normal(space.n_fine))
    binpath = str(tmp_path / "mu.bin")
    mu.to_binary(binpath)
    back = TraceVector.from_binary(space, binpath)
    assert np.array_equal(back.values, mu.values)
    csvpath = str(tmp_path / "mu.csv")
    mu.to_csv(csvpath)
    rows = open(csvpath).read().strip().splitlines()
    assert rows[0] == "fine_face,value"
    assert len(rows) == space.n_fine + 1
    assert float(rows[1].split(",")[1]) == mu.values[0]
