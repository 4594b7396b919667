import math

import numpy as np
import pytest
import scipy.sparse as sp

from matschro.grid import DiscreteOperator, assemble, build_grid
from matschro.lanczos import lanczos_smallest
from matschro.model import SystemSpec
from matschro.spectral import (
    NonSymmetricOperatorError,
    SpectralResult,
    counting_function,
    eigen_lowest,
    trace_check,
    unit_ball_volume,
    weyl_constant,
    weyl_fit,
)


def harmonic(R, N, m=1, v="1+|x|^2"):
    if m == 1:
        spec = SystemSpec.from_strings([["1"]], [["0"]], v, alpha=2)
    else:
        spec = SystemSpec.from_strings([["1"]], [["0", "0.5"], ["0.5", "0"]], v, alpha=2)
    return assemble(spec, build_grid(1, R, N))


def test_invariants_orthonormal_and_small_residual():
    op = harmonic(8, 401)
    res = eigen_lowest(op, 30)
    gram = op.grid.cell * res.vectors.T @ res.vectors
    assert np.max(np.abs(gram - np.eye(30))) <= 1e-10
    assert np.all(res.residuals <= 1e-8 * np.maximum(1, res.lambdas))
    assert np.all(np.diff(res.lambdas) >= 0)


def test_harmonic_error_is_second_order():
    # discretisation error of lambda_n shrinks by 4 when h halves; extrapolation recovers 2n+2
    lam = [eigen_lowest(harmonic(12, N), 21).lambdas for N in (601, 1201)]
    n = np.arange(21)
    ratio = (lam[0] - (2 * n + 2)) / (lam[1] - (2 * n + 2))
    assert np.allclose(ratio[1:], 4, rtol=0.02)
    extrapolated = (4 * lam[1] - lam[0]) / 3
    assert np.max(np.abs(extrapolated - (2 * n + 2))) <= 5e-3


def test_harmonic_error_matches_leading_truncation_term():
    # -h^2/12 <u'''', u> for Hermite functions gives -h^2/16 (2n^2 + 2n + 1)
    op = harmonic(12, 1201)
    h = op.grid.h
    n = np.arange(21)
    err = eigen_lowest(op, 21).lambdas - (2 * n + 2)
    predicted = -(h**2) / 16 * (2 * n**2 + 2 * n + 1)
    assert np.allclose(err, predicted, rtol=0.02, atol=1e-6)


def test_dirichlet_laplacian():
    R, N = 2.0, 201
    op = assemble(SystemSpec.from_strings([["1"]], [["0"]], "0"), build_grid(1, R, N))
    res = eigen_lowest(op, 10)
    h = op.grid.h
    n = np.arange(1, 11)
    discrete = 4 / h**2 * np.sin(n * np.pi * h / (4 * R)) ** 2
    assert np.allclose(res.lambdas, discrete, rtol=1e-10)
    assert np.allclose(res.lambdas[:3], (n[:3] * np.pi / (2 * R)) ** 2, rtol=1e-3)


def test_equal_diagonal_blocks_double_every_eigenvalue():
    g = build_grid(1, 6, 201)
    scalar = assemble(SystemSpec.from_strings([["1"]], [["0"]], "1+|x|^2"), g)
    pair = assemble(SystemSpec.from_strings([["1"]], [["0", "0"], ["0", "0"]], "1+|x|^2"), g)
    s = eigen_lowest(scalar, 10).lambdas
    p = eigen_lowest(pair, 20).lambdas
    assert np.allclose(p[0::2], s) and np.allclose(p[1::2], s)


def test_refuses_non_symmetric():
    spec = SystemSpec.from_strings([["1"]], [["0", "1"], ["-1", "0"]], "1+|x|^2")
    with pytest.raises(NonSymmetricOperatorError):
        eigen_lowest(assemble(spec, build_grid(1, 4, 41)), 5)


def test_lanczos_path_against_separable_oracle():
    # 2-D harmonic operator is a Kronecker sum of 1-D ones: eigenvalues b_i + b_j + 1
    R, N = 6.0, 81
    g2 = build_grid(2, R, N)
    op2 = assemble(SystemSpec.from_strings([["1", "0"], ["0", "1"]], [["0"]], "1+|x|^2", d=2), g2)
    assert op2.size > 4096
    res = eigen_lowest(op2, 12, seed=3)
    assert res.method == "lanczos"
    b = np.linalg.eigvalsh(assemble(SystemSpec.from_strings([["1"]], [["0"]], "|x|^2"), build_grid(1, R, N)).dense())
    oracle = np.sort((b[:12, None] + b[None, :12]).ravel() + 1)[:12]
    assert np.allclose(res.lambdas, oracle, rtol=1e-9)
    gram = g2.cell * res.vectors.T @ res.vectors
    assert np.max(np.abs(gram - np.eye(12))) <= 1e-10


def test_lanczos_reports_non_convergence():
    from matschro.lanczos import LanczosConvergenceError

    A = sp.diags(np.linspace(1, 2, 400)).tocsr()  # clustered spectrum, tiny basis
    with pytest.raises(LanczosConvergenceError):
        lanczos_smallest(A, 10, max_dim=12)


def test_lanczos_is_deterministic():
    A = harmonic(6, 301).A
    a = lanczos_smallest(A, 5, seed=7)[0]
    b = lanczos_smallest(A, 5, seed=7)[0]
    assert np.array_equal(a, b)


def test_counting_function_examples():
    lam = np.array([2.0, 4.0, 6.0])
    assert counting_function(lam, 5) == 2
    assert counting_function(lam, 1) == 0
    assert counting_function(lam, 4.0) == 2
    with pytest.raises(ValueError):
        counting_function(lam, 6.5)


def test_weyl_constants():
    assert weyl_constant(2, 1, 1) == pytest.approx(0.5)
    assert weyl_constant(2, 1, 2) == pytest.approx(1.0)
    quartic = 0.25 * 2 / (2 * math.sqrt(math.pi)) * math.gamma(0.25) / math.gamma(1.75)
    assert weyl_constant(4, 1, 1) == pytest.approx(quartic)
    # 2-D harmonic: N(lambda) ~ lambda^2 / 8 from counting (n1 + n2 + 1) <= lambda / 2
    assert weyl_constant(2, 2, 1) == pytest.approx(1 / 8)
    assert unit_ball_volume(1) == pytest.approx(2) and unit_ball_volume(3) == pytest.approx(4 * math.pi / 3)


def test_weyl_needs_forty_eigenvalues():
    res = eigen_lowest(harmonic(6, 201), 20)
    with pytest.raises(ValueError):
        weyl_fit(res, 2, 1, 1)


@pytest.mark.slow
def test_weyl_tail_on_a_box_wide_enough_for_the_spectrum():
    # lambda_240 ~ 480 needs v(R) well above it: R = 28 keeps the wall out of the counted range
    op = harmonic(28, 2801)
    rep = weyl_fit(eigen_lowest(op, 240), 2, 1, 1)
    assert rep.passed, rep.to_dict()
    op2 = harmonic(28, 2801, m=2)
    rep2 = weyl_fit(eigen_lowest(op2, 480), 2, 1, 2)
    assert rep2.theory == pytest.approx(1.0)
    assert rep2.passed, rep2.to_dict()


def test_trace_identity_full_spectrum():
    op = harmonic(5, 201)
    res = eigen_lowest(op, op.size)
    for t in (0.2, 0.5, 1.0):
        rep = trace_check(res, op, t)
        assert rep.truncation_bound == 0 and rep.rel_gap <= 1e-8


def test_trace_harmonic_partial_spectrum():
    op = harmonic(10, 801)
    rep = trace_check(eigen_lowest(op, 60), op, 0.5)
    assert rep.conclusive and rep.rel_gap <= 1e-4


def test_trace_large_t_dominated_by_ground_state():
    op = harmonic(8, 401)
    res = eigen_lowest(op, 10)
    rep = trace_check(res, op, 20.0)
    assert rep.kernel_side / rep.eigen_side == pytest.approx(1, abs=1e-12)


def test_trace_small_t_inconclusive():
    op = harmonic(8, 401)
    rep = trace_check(eigen_lowest(op, 10), op, 1e-3)
    assert not rep.conclusive and rep.notes


def test_doubling_the_box_leaves_low_eigenvalues_unchanged():
    h = 0.04
    a = eigen_lowest(harmonic(8, int(16 / h) + 1), 20).lambdas[:10]
    b = eigen_lowest(harmonic(16, int(32 / h) + 1), 20).lambdas[:10]
    assert np.all(np.abs(a - b) <= 1e-6 * np.abs(a))


def test_larger_potential_raises_every_eigenvalue():
    g = build_grid(1, 6, 301)
    low = eigen_lowest(assemble(SystemSpec.from_strings([["1"]], [["0"]], "1+|x|^2"), g), 15).lambdas
    high = eigen_lowest(assemble(SystemSpec.from_strings([["1"]], [["0"]], "1+|x|^2+0.3*|x|"), g), 15).lambdas
    assert np.all(high >= low)


def test_ground_state_decay_exponent_quartic():
    op = assemble(SystemSpec.from_strings([["1"]], [["0"]], "1+|x|^4", alpha=4), build_grid(1, 8, 1601))
    res = eigen_lowest(op, 1)
    psi = np.abs(res.vectors[:, 0])
    x = op.grid.interior_points[:, 0]
    gamma = 3.0
    win = (psi >= 1e-12) & (psi <= 1e-3) & (x > 0)
    slope = np.polyfit(x[win] ** gamma / gamma, np.log(psi[win]), 1)[0]
    assert -1.3 <= slope <= -0.7


def test_csv_writers(tmp_path):
    op = harmonic(10, 401)
    res = eigen_lowest(op, 40)
    text = res.write_csv(tmp_path / "e.csv").read_text().splitlines()
    assert text[0] == "n,lambda,residual" and len(text) == 41
    rep = weyl_fit(res, 2, 1, 1)
    text = rep.write_csv(tmp_path / "w.csv").read_text().splitlines()
    assert text[0] == "lambda,count,ratio,theory" and len(text) == 1 + len(rep.ratios)


def test_spectral_result_helpers():
    res = SpectralResult(np.array([1.0, 2.0]), np.eye(2), np.zeros(2), 1.0, 1)
    assert res.k == 2 and res.inner(0, 1) == 0 and res.component(1, 0)[1] == 1
    assert isinstance(harmonic(2, 21), DiscreteOperator)
