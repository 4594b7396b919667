import numpy as np
import pytest
import sympy as sy
from hypothesis import given, settings
from hypothesis import strategies as st

from matschro.grid import assemble, build_grid, discrete_norm
from matschro.model import SystemSpec


def spec1(V, v="0", Q="1"):
    return SystemSpec.from_strings([[Q]], V, v)


def test_grid_geometry():
    g = build_grid(1, 10, 401)
    assert g.h == pytest.approx(0.05)
    assert np.any(g.nodes == 0)
    assert build_grid(2, 6, 121).n_total == 121**2


@pytest.mark.parametrize("d, R, N", [(1, 10, 400), (1, 0, 11), (1, -1, 11), (1, 1, 1)])
def test_grid_rejects_bad_parameters(d, R, N):
    with pytest.raises(ValueError):
        build_grid(d, R, N)


def test_laplacian_interior_row():
    g = build_grid(1, 1, 11)
    A = assemble(spec1([["0"]]), g).A.toarray()
    row = A[4, 3:6] * g.h**2
    assert np.allclose(row, [-1, 2, -1])


def test_harmonic_diagonal():
    g = build_grid(1, 3, 31)
    A = assemble(spec1([["0"]], "1+|x|^2"), g).A.toarray()
    lap = assemble(spec1([["0"]]), g).A.toarray()
    x = g.interior_points[:, 0]
    assert np.allclose(np.diag(A - lap), 1 + x**2)
    assert np.allclose(A - lap - np.diag(np.diag(A - lap)), 0)


def test_equal_diagonal_blocks_decouple():
    g = build_grid(1, 3, 31)
    spec = SystemSpec.from_strings([["1"]], [["-|x|", "0"], ["0", "-|x|"]], "1+|x|^2")
    op = assemble(spec, g)
    n = g.n_interior
    A = op.A.toarray()
    assert np.allclose(A[:n, n:], 0) and np.allclose(A[n:, :n], 0)
    assert np.allclose(A[:n, :n], A[n:, n:])


def test_symmetric_variable_q_gives_symmetric_matrix():
    spec = SystemSpec.from_strings([["2+x1^2", "0.3*x0"], ["0.3*x0", "1+x0^2"]], [["-1", "0.5"], ["0.5", "-2"]],
                                   "1+|x|^2", d=2)
    op = assemble(spec, build_grid(2, 3, 21))
    A = op.A
    assert op.symmetric
    assert abs(A - A.T).max() <= 1e-12 * abs(A).max()


def test_stencil_sparsity():
    spec = SystemSpec.from_strings([["1", "0"], ["0", "1"]], [["-1", "0.5"], ["0.5", "-1"]], "1", d=2)
    op = assemble(spec, build_grid(2, 2, 11))
    nnz_per_row = np.diff(op.A.indptr)
    assert nnz_per_row.max() <= (2 * 2 + 1) + 1


def test_second_order_consistency_with_cross_terms():
    x0, x1 = sy.symbols("x0 x1")
    u = sy.exp(-2 * (x0**2 + x1**2)) * (1 + sy.Rational(3, 10) * x0)
    q00, q01, q11 = 2 + x1**2 / 4, x0 / 8, 1 + x0**2 / 8
    Lu = -(sy.diff(q00 * sy.diff(u, x0) + q01 * sy.diff(u, x1), x0)
           + sy.diff(q01 * sy.diff(u, x0) + q11 * sy.diff(u, x1), x1)) + (1 + x0**2) * u
    f_u, f_L = sy.lambdify((x0, x1), u, "numpy"), sy.lambdify((x0, x1), Lu, "numpy")
    spec = SystemSpec.from_strings([["2+x1^2*0.25", "0.125*x0"], ["0.125*x0", "1+x0^2*0.125"]], [["0"]],
                                   "1+x0^2", d=2)
    errs = []
    for N in (41, 81, 161):
        g = build_grid(2, 4, N)
        X = g.interior_points
        r = assemble(spec, g).A @ f_u(X[:, 0], X[:, 1]) - f_L(X[:, 0], X[:, 1])
        errs.append(np.max(np.abs(r)))
    slopes = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(slopes >= 1.9), slopes


def test_smallest_eigenvalue_tracks_minus_beta():
    # constant Vt = -3: lowest eigenvalue is 3 + (pi/2R)^2
    g = build_grid(1, 20, 801)
    op = assemble(spec1([["-3"]]), g)
    lam = np.linalg.eigvalsh(op.dense())[0]
    assert lam == pytest.approx(3 + (np.pi / 40) ** 2, rel=1e-4)


def test_discrete_norm_examples():
    g = build_grid(1, 1, 2001)
    ones = np.ones(g.n_interior)
    assert discrete_norm(ones, 2, g) == pytest.approx(np.sqrt(2), rel=1e-2)
    spike = np.zeros(g.n_interior)
    spike[7] = 1
    assert discrete_norm(spike, np.inf, g) == 1
    pair = np.zeros((2, g.n_interior))
    pair[:, 3] = [3, 4]
    assert discrete_norm(pair.ravel(), np.inf, g, m=2) == 5
    with pytest.raises(ValueError):
        discrete_norm(ones, 0.5, g)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 1000), p=st.sampled_from([1.0, 2.0, 3.0, np.inf]))
def test_discrete_norm_triangle_inequality(seed, p):
    g = build_grid(1, 2, 41)
    rng = np.random.default_rng(seed)
    f, h = rng.normal(size=(2, 2 * g.n_interior))
    assert discrete_norm(f + h, p, g, 2) <= discrete_norm(f, p, g, 2) + discrete_norm(h, p, g, 2) + 1e-12


def test_node_index_and_delta():
    g = build_grid(2, 2, 21)
    op = assemble(SystemSpec.from_strings([["1", "0"], ["0", "1"]], [["-1"]], "0", d=2), g)
    k = g.node_index([0.0, 0.0])
    assert np.allclose(g.interior_points[k], 0)
    assert op.delta(k, 0).sum() * g.cell == pytest.approx(1)


def test_dump_coordinate_format(tmp_path):
    op = assemble(spec1([["0"]]), build_grid(1, 1, 7))
    path = op.dump(tmp_path / "A.txt")
    lines = path.read_text().splitlines()
    assert lines[0].startswith("%")
    assert len(lines) - 1 == op.A.nnz
    r, c, v = lines[1].split()
    assert op.A[int(r), int(c)] == float(v)
