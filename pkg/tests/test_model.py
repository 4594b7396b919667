import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from matschro.expr import parse
from matschro.model import (
    DEFAULT_GAMMAS,
    DiffusionField,
    MatrixField,
    Sampling,
    SystemSpec,
    Verdict,
    coercivity_check,
    dissipativity_check,
    ellipticity_check,
    fractional_power,
    grad_ratio_check,
    gradient_condition_check,
    little_o_check,
    okazawa_check,
    offdiagonal_sign_check,
    sectoriality_at,
    sectoriality_check,
)

WITNESS_MARGIN = 1e-12


def mf(rows, d=1):
    return MatrixField.from_strings(rows, d)


# ---------------------------------------------------------------------------
# ellipticity


def test_identity_diffusion_constants():
    rep = ellipticity_check(DiffusionField.identity(2))
    assert rep.holds
    assert rep.constants["eta1"] == pytest.approx(1) and rep.constants["eta2"] == pytest.approx(1)


def test_constant_two_by_two_diffusion():
    rep = ellipticity_check(DiffusionField.from_strings([["2", "1"], ["1", "2"]], 2))
    assert (rep.constants["eta1"], rep.constants["eta2"]) == pytest.approx((1, 3))


def test_growing_diffusion_is_unbounded_trend():
    rep = ellipticity_check(DiffusionField.from_strings([["|x|^2", "0"], ["0", "1"]], 2))
    assert rep.verdict is Verdict.UNBOUNDED_TREND


def test_asymmetric_diffusion_rejected():
    with pytest.raises(ValueError):
        DiffusionField.from_strings([["1", "x0"], ["0", "1"]], 2)


# ---------------------------------------------------------------------------
# dissipativity


def test_rotation_plus_damping_has_beta_minus_one():
    rep = dissipativity_check(mf([["-1", "-x"], ["x", "-1"]]))
    assert rep.holds and rep.constants["beta"] == pytest.approx(-1)


def test_pure_rotation_fails_strictness():
    rep = dissipativity_check(mf([["0", "-x"], ["x", "0"]]))
    assert rep.verdict is Verdict.FAILS
    assert rep.constants["beta"] == pytest.approx(0, abs=1e-14)
    assert rep.witness is not None and rep.witness.lhs >= rep.witness.rhs


def test_confining_diagonal_beta_at_origin():
    rep = dissipativity_check(mf([["-(1+|x|^2)", "0"], ["0", "-(1+|x|^2)"]], 2))
    assert rep.constants["beta"] == pytest.approx(-1)
    assert np.allclose(rep.constants["argmax"], 0)


@settings(max_examples=30, deadline=None)
@given(a=st.floats(0, 3), c=st.integers(0, 3))
def test_beta_invariant_under_antisymmetric_perturbation(a, c):
    base = [["-(1+|x|^2)", "0.5"], ["0.5", "-2"]]
    skew = f"{a!r}*|x|^{c}"
    pert = [["-(1+|x|^2)", f"0.5+{skew}"], [f"0.5-{skew}", "-2"]]
    b0 = dissipativity_check(mf(base, 2)).constants["beta"]
    b1 = dissipativity_check(mf(pert, 2)).constants["beta"]
    assert b1 == pytest.approx(b0, rel=1e-12, abs=1e-12)


# ---------------------------------------------------------------------------
# gradient condition


def test_gradient_condition_accepts_gammas_from_one_third():
    rep = gradient_condition_check(mf([["-(1+|x|^1.5)"]]))
    accepted = rep.constants["accepted_gammas"]
    assert accepted == [g for g in DEFAULT_GAMMAS if g >= 1 / 3]
    assert rep.constants["gamma"] == pytest.approx(0.35)


def test_gradient_condition_quartic_unbounded():
    rep = gradient_condition_check(mf([["-(1+|x|^4)"]]))
    assert rep.verdict is Verdict.UNBOUNDED_TREND
    assert rep.constants["accepted_gammas"] == []


def test_gradient_condition_constant_matrix():
    rep = gradient_condition_check(mf([["-2", "1"], ["0", "-3"]]))
    assert rep.holds and rep.constants["gamma"] == 0


def test_gradient_condition_fails_without_fractional_power():
    rep = gradient_condition_check(mf([["0"]]))
    assert rep.verdict is Verdict.FAILS and rep.witness is not None


@pytest.mark.parametrize("r", [1.5, 2.0, 3.0])
def test_smallest_gamma_tracks_one_minus_inverse_r(r):
    fine = tuple(np.round(np.arange(0, 0.5, 0.01), 2))
    rep = gradient_condition_check(mf([[f"-(1+|x|^{r})"]]), gamma_grid=fine,
                                   samples=Sampling(levels=22))
    target = max(0.0, 1 - 1 / r)
    if target >= 0.5:
        assert rep.constants["accepted_gammas"] == []
    else:
        assert abs(rep.constants["gamma"] - target) <= 0.03


def test_fractional_power_routes_agree():
    rng = np.random.default_rng(3)
    B = rng.normal(size=(3, 3))
    S = B @ B.T + 3 * np.eye(3)
    # eigen route (symmetric) against the Schur route on a non-symmetric similar matrix
    P = np.eye(3) + 0.1 * rng.normal(size=(3, 3))
    N = P @ S @ np.linalg.inv(P)
    lhs = fractional_power(S, -0.3)
    rhs = np.linalg.inv(P) @ fractional_power(N, -0.3) @ P
    assert np.allclose(lhs, rhs, atol=1e-10)


# ---------------------------------------------------------------------------
# grad ratio and Okazawa constants


def test_grad_ratio_quadratic():
    assert grad_ratio_check(parse("1+|x|^2", 1)).constants["c"] == pytest.approx(1, abs=1e-6)


def test_grad_ratio_exponential():
    assert grad_ratio_check(parse("exp|x|", 2)).constants["c"] == pytest.approx(1, abs=1e-9)


def test_grad_ratio_quartic():
    assert grad_ratio_check(parse("1+|x|^4", 1)).constants["c"] == pytest.approx(3 ** 0.75, abs=1e-6)


def test_grad_ratio_negative_v_fails():
    rep = grad_ratio_check(parse("|x|^2-1", 1))
    assert rep.verdict is Verdict.FAILS


def test_okazawa_identity_q_gives_c_squared():
    rep = okazawa_check(parse("1+|x|^2", 1), DiffusionField.identity(1))
    assert rep.constants["a"] == pytest.approx(1, abs=1e-6)
    assert rep.constants["b"] == 0


def test_okazawa_constant_v():
    rep = okazawa_check(parse("3", 2), DiffusionField.identity(2))
    assert (rep.constants["a"], rep.constants["b"]) == (0, 0)


def test_okazawa_weighted_q_flags():
    Q = DiffusionField.from_strings([["2", "0"], ["0", "1"]], 2)
    rep = okazawa_check(parse("1+|x|^2", 2), Q)
    assert rep.constants["a"] == pytest.approx(2 * rep.constants["a_unweighted"])
    assert rep.notes


# ---------------------------------------------------------------------------
# sectoriality, signs, growth


def _form_oracle(W):
    """M = 1 / spectral radius of H^{-1} K with H = -sym(W), K = i (W - W^T)/2."""
    H = -(W + W.T) / 2
    K = 1j * (W - W.T) / 2
    if np.allclose(K, 0):
        return math.inf
    ev = np.linalg.eigvals(np.linalg.solve(H, K))
    return 1 / np.max(np.abs(ev))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_sectoriality_matches_generalised_eigen_oracle(seed):
    rng = np.random.default_rng(seed)
    m = 3
    B = rng.normal(size=(m, m))
    H = B @ B.T + 0.5 * np.eye(m)
    A = rng.normal(size=(m, m))
    W = -H + (A - A.T) / 2
    M, _ = sectoriality_at(W, n_xi=512, seed=seed)
    assert M == pytest.approx(_form_oracle(W), rel=1e-4)


def test_sectoriality_damped_rotation():
    spec = SystemSpec.from_strings([["1"]], [["-|x|^2", "-x"], ["x", "-|x|^2"]], "1")
    assert sectoriality_check(spec).constants["M"] >= 1 - 1e-3


def test_sectoriality_antisymmetric_is_zero():
    rep = sectoriality_check(mf([["0", "-x"], ["x", "0"]]))
    assert rep.constants["M"] == 0 and rep.verdict is Verdict.FAILS


def test_sectoriality_symmetric_is_infinite():
    rep = sectoriality_check(mf([["-1", "0.5"], ["0.5", "-2"]]))
    assert rep.constants["M"] == math.inf and rep.holds


def test_offdiagonal_signs():
    v = "1+|x|^2"
    ok = SystemSpec.from_strings([["1"]], [["0", "1+|x|"], ["1+|x|", "0"]], v)
    bad = SystemSpec.from_strings([["1"]], [["0", "1+|x|"], ["-(1+|x|)", "0"]], v)
    assert offdiagonal_sign_check(ok).holds
    rep = offdiagonal_sign_check(bad)
    assert rep.verdict is Verdict.FAILS
    assert (rep.witness.detail["i"], rep.witness.detail["j"]) == (1, 0)
    diag = SystemSpec.from_strings([["1"]], [["-1", "0"], ["0", "-2"]], v)
    assert offdiagonal_sign_check(diag).holds


@pytest.mark.parametrize("rows, d, exponent", [
    ([["-(1+|x|^2)", "0"], ["0", "-(1+|x|^2)"]], 2, 2.0),
    ([["0", "-x"], ["x", "0"]], 1, 1.0),
])
def test_coercivity_exponents(rows, d, exponent):
    rep = coercivity_check(mf(rows, d))
    assert rep.holds and rep.constants["growth_exponent"] == pytest.approx(exponent, abs=0.02)


def test_coercivity_constant_fails():
    assert coercivity_check(mf([["-1", "0"], ["0", "-1"]])).verdict is Verdict.FAILS


@pytest.mark.parametrize("diag, holds", [("-(1+|x|)", True), ("-|x|^4", False), ("0", True)])
def test_little_o(diag, holds):
    rep = little_o_check(mf([[diag]]), parse("1+|x|^4", 1), 4)
    assert rep.holds is holds


def test_little_o_requires_declared_form():
    with pytest.raises(ValueError):
        little_o_check(mf([["0"]]), parse("1+|x|^2", 1), 4)


# ---------------------------------------------------------------------------
# witnesses and spec plumbing


def _violation(rep):
    w = rep.witness
    if w.relation in ("<", "<="):
        return w.lhs - w.rhs
    return w.rhs - w.lhs


@pytest.mark.parametrize("rep", [
    ellipticity_check(DiffusionField.from_strings([["x0^2", "0"], ["0", "1"]], 2)),
    gradient_condition_check(mf([["0"]])),
    grad_ratio_check(parse("|x|^2-1", 1)),
    coercivity_check(mf([["-1"]])),
    little_o_check(mf([["-|x|^4"]]), parse("1+|x|^4", 1), 4),
], ids=["ellipticity", "gradient", "grad_ratio", "coercivity", "little_o"])
def test_failing_witness_violates_margin(rep):
    assert rep.verdict is not Verdict.HOLDS_ON_SAMPLE
    assert rep.witness is not None
    assert _violation(rep) > WITNESS_MARGIN or rep.witness.relation in ("<", ">")


def test_strict_inequality_witness_is_at_boundary():
    # beta < 0 is violated exactly at beta = 0, which no positive margin can exceed
    rep = dissipativity_check(mf([["0", "-x"], ["x", "0"]]))
    assert rep.witness.relation == "<" and rep.witness.lhs >= rep.witness.rhs


def test_independent_reevaluation_of_offdiagonal_witness():
    bad = SystemSpec.from_strings([["1"]], [["0", "1+|x|"], ["-(1+|x|)", "0"]], "1+|x|^2")
    w = offdiagonal_sign_check(bad).witness
    val = bad.Vt.evaluate(np.array([w.point]))[0, w.detail["i"], w.detail["j"]]
    assert val < -WITNESS_MARGIN


def test_spec_round_trip_and_negative_v():
    spec = SystemSpec.from_strings([["1"]], [["-1", "0.5"], ["0.5", "-1"]], "1+|x|^2", alpha=2)
    again = SystemSpec.from_dict(spec.to_dict())
    pts = np.random.default_rng(0).normal(size=(10, 1))
    assert np.allclose(spec.Vt.evaluate(pts), again.Vt.evaluate(pts))
    with pytest.raises(ValueError):
        SystemSpec.from_strings([["1"]], [["0"]], "x-1")
