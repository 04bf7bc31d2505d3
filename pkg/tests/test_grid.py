"""Grid, discrete operators, norms, and the CSV field format."""

import numpy as np
import pytest

from nnocp.grid import (
    Grid2D,
    hminus1_norm,
    l2_norm,
    laplacian_apply,
    laplacian_matrix,
    norms,
    operator_matrix,
    restrict,
    save_field,
    load_field,
)


def dense_neumann_laplacian(nx, ny, h):
    """Independent dense assembly of the five-point operator, node by node."""
    n = nx * ny
    mat = np.zeros((n, n))
    for j in range(ny):
        for i in range(nx):
            row = j * nx + i
            for (jj, ii) in ((j, i - 1), (j, i + 1), (j - 1, i), (j + 1, i)):
                if 0 <= ii < nx and 0 <= jj < ny:
                    mat[row, jj * nx + ii] += 1.0
                    mat[row, row] -= 1.0
    return mat / h ** 2


def test_node_counts_follow_extent():
    g = Grid2D(0.25, extent=(2.0, 1.0))
    assert g.shape == (5, 9)
    assert g.num_nodes == 45
    g2 = Grid2D(2.0 ** -6, extent=(2.0, 2.0))
    assert g2.shape == (129, 129)


def test_incommensurate_extent_rejected():
    with pytest.raises(ValueError):
        Grid2D(0.3, extent=(1.0, 1.0))


def test_laplacian_matches_dense_oracle():
    g = Grid2D(0.5, extent=(2.0, 1.5))
    dense = dense_neumann_laplacian(g.nx, g.ny, g.h)
    assert np.abs(laplacian_matrix(g).toarray() - dense).max() < 1e-13
    rng = np.random.default_rng(0)
    z = rng.normal(size=g.shape)
    np.testing.assert_allclose(laplacian_apply(g, z).ravel(),
                               dense @ z.ravel(), atol=1e-12)


def test_laplacian_symmetric_with_constant_kernel():
    g = Grid2D(0.25, extent=(1.0, 1.0))
    mat = laplacian_matrix(g).toarray()
    assert np.abs(mat - mat.T).max() == 0.0
    assert np.abs(mat @ np.ones(g.num_nodes)).max() < 1e-12
    # negative semidefinite
    eig = np.linalg.eigvalsh(mat)
    assert eig.max() < 1e-10


def test_operator_matrix_adds_reaction_diagonal():
    g = Grid2D(0.5, extent=(1.0, 1.0))
    a = np.arange(g.num_nodes, dtype=float).reshape(g.shape) + 1.0
    mat = operator_matrix(g, a).toarray()
    expected = -laplacian_matrix(g).toarray() + np.diag(a.ravel())
    np.testing.assert_allclose(mat, expected, atol=1e-13)


def test_interior_consistency_second_order():
    errs = []
    for h in (1 / 32, 1 / 64):
        g = Grid2D(h, extent=(2.0, 2.0))
        x1, x2 = g.mesh()
        z = np.cos(np.pi * x1) * np.cos(np.pi * x2)
        lap = laplacian_apply(g, z)
        errs.append(np.abs(lap + 2 * np.pi ** 2 * z)[1:-1, 1:-1].max())
    assert errs[0] / errs[1] == pytest.approx(4.0, abs=0.3)


def test_norms_identities():
    g = Grid2D(0.25, extent=(1.0, 1.0))
    rng = np.random.default_rng(5)
    z = rng.normal(size=g.shape)
    res = norms(g, z)
    # plain identities against direct formulas
    assert res.l2 == pytest.approx(g.h * np.linalg.norm(z), rel=1e-14)
    assert res.linf == pytest.approx(np.abs(z).max(), rel=1e-14)
    quad = -g.h ** 2 * float(laplacian_apply(g, z).ravel() @ z.ravel())
    assert res.h1_semi == pytest.approx(np.sqrt(quad), rel=1e-12)
    # seminorm kills constants, l2 does not
    c = norms(g, np.full(g.shape, 3.7))
    assert c.h1_semi < 1e-12
    assert c.l2 == pytest.approx(3.7 * g.h * np.sqrt(g.num_nodes), rel=1e-14)


def test_h1_seminorm_equals_difference_sum():
    g = Grid2D(0.5, extent=(1.0, 1.0))
    rng = np.random.default_rng(8)
    z = rng.normal(size=g.shape)
    diff2 = (np.sum((z[:, 1:] - z[:, :-1]) ** 2)
             + np.sum((z[1:, :] - z[:-1, :]) ** 2))
    assert norms(g, z).h1_semi ** 2 == pytest.approx(diff2, rel=1e-12)


def test_hminus1_norm_via_dense_solve():
    g = Grid2D(0.25, extent=(1.0, 1.0))
    rng = np.random.default_rng(11)
    r = rng.normal(size=g.shape)
    mat = -laplacian_matrix(g).toarray() + np.eye(g.num_nodes)
    w = np.linalg.solve(mat, r.ravel())
    expect = np.sqrt(g.h ** 2 * float(r.ravel() @ w))
    assert hminus1_norm(g, r) == pytest.approx(expect, rel=1e-10)


def test_hminus1_dominated_by_l2():
    g = Grid2D(0.125, extent=(1.0, 1.0))
    rng = np.random.default_rng(2)
    r = rng.normal(size=g.shape)
    assert hminus1_norm(g, r) <= l2_norm(g, r) + 1e-12


def test_restrict_counts_and_values():
    fine = Grid2D(1 / 50, extent=(2.0, 2.0))
    rng = np.random.default_rng(1)
    z = rng.normal(size=fine.shape)
    for step, n_nodes in ((0.2, 121), (0.1, 441), (0.08, 676)):
        pts, vals = restrict(z, fine, step)
        assert pts.shape == (n_nodes, 2)
        assert vals.shape == (n_nodes,)
    pts, vals = restrict(z, fine, 0.2)
    assert pts[0] == pytest.approx([0.0, 0.0])
    assert vals[0] == z[0, 0]
    assert vals[-1] == z[-1, -1]
    with pytest.raises(ValueError):
        restrict(z, fine, 0.03)


def test_field_csv_round_trip(tmp_path):
    g = Grid2D(0.25, extent=(1.0, 0.5))
    rng = np.random.default_rng(9)
    z = rng.normal(size=g.shape)
    path = tmp_path / "field.csv"
    save_field(path, z)
    back = load_field(path, g)
    np.testing.assert_array_equal(back, z)
    # deterministic bytes on re-save
    blob = path.read_bytes()
    save_field(path, z)
    assert path.read_bytes() == blob


def test_load_field_rejects_wrong_shape(tmp_path):
    path = tmp_path / "bad.csv"
    save_field(path, np.zeros((3, 3)))
    with pytest.raises(ValueError):
        load_field(path, Grid2D(0.25, extent=(1.0, 1.0)))
