"""The semigroup exp(-tA), its matrix heat kernel, and numerical checks of the kernel estimates."""
from __future__ import annotations

import csv
import json
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .expr import PotentialExpr, parse
from .grid import DiscreteOperator, GridSpec, assemble, assemble_parts, assemble_scalar, discrete_norm
from .krylov import expm_multiply_krylov
from .model import (
    SystemSpec,
    _jsonable,
    offdiagonal_sign_check,
)

DENSE_LIMIT = 2048
KRYLOV_TOL = 1e-8
NOISE_FLOOR = 1e-13
PROBE_TIMES = (0.1, 0.5, 1.0)
_CACHE_SLOTS = 8


class PreconditionError(ValueError):
    pass


@dataclass
class EstimateReport:
    """Outcome of one numerical estimate: PASS, FAIL or INCONCLUSIVE with the measured constants."""

    name: str
    status: str
    constants: dict[str, Any] = field(default_factory=dict)
    witness: dict[str, Any] | None = None
    notes: list[str] = field(default_factory=list)
    series: dict[str, Any] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.status == "PASS"

    def to_dict(self) -> dict:
        return _jsonable({"name": self.name, "status": self.status, "constants": self.constants,
                          "witness": self.witness, "notes": self.notes, "series": self.series})


def _status(ok: bool) -> str:
    return "PASS" if ok else "FAIL"


# ---------------------------------------------------------------------------
# propagation


def propagator(op: DiscreteOperator, t: float) -> np.ndarray:
    """Dense exp(-tA) by scaling and squaring, cached on the operator."""
    cache = op._cache.setdefault("expm", OrderedDict())
    key = float(t)
    if key in cache:
        cache.move_to_end(key)
        return cache[key]
    P = scipy.linalg.expm(-key * op.dense())
    cache[key] = P
    if len(cache) > _CACHE_SLOTS:
        cache.popitem(last=False)
    return P


def propagate(op: DiscreteOperator, f: np.ndarray, t: float, adjoint: bool = False) -> np.ndarray:
    """exp(-tA) f (or exp(-tA^T) f); ``f`` may hold several vectors as columns."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    f = np.asarray(f, dtype=float)
    if t == 0:
        return f.copy()
    if op.size <= DENSE_LIMIT:
        P = propagator(op, t)
        return (P.T if adjoint else P) @ f
    A = op.A.T.tocsr() if adjoint else op.A
    if f.ndim == 1:
        return expm_multiply_krylov(A, f, t, tol=KRYLOV_TOL)
    return np.column_stack([expm_multiply_krylov(A, f[:, j], t, tol=KRYLOV_TOL) for j in range(f.shape[1])])


def smooth_field(grid: GridSpec, m: int, rng: np.random.Generator, n_bumps: int = 3) -> np.ndarray:
    """Random sum of Gaussian bumps per component, centred in the inner half of the box."""
    pts = grid.interior_points
    out = np.zeros((m, len(pts)))
    for c in range(m):
        for _ in range(n_bumps):
            centre = rng.uniform(-0.5 * grid.R, 0.5 * grid.R, size=grid.d)
            width = rng.uniform(0.05, 0.2) * grid.R
            amp = rng.uniform(-1.0, 1.0)
            out[c] += amp * np.exp(-np.sum((pts - centre) ** 2, axis=1) / (2 * width**2))
    return out.ravel()


def compact_bump_field(grid: GridSpec, m: int, rng: np.random.Generator, n_bumps: int = 3) -> np.ndarray:
    """Random sum of C-infinity bumps exp(-1/(1-s^2)) with supports well inside the box."""
    pts = grid.interior_points
    out = np.zeros((m, len(pts)))
    for c in range(m):
        for _ in range(n_bumps):
            rho = rng.uniform(0.15, 0.35) * grid.R
            centre = rng.uniform(-0.5 * grid.R, 0.5 * grid.R, size=grid.d)
            s2 = np.sum((pts - centre) ** 2, axis=1) / rho**2
            bump = np.zeros_like(s2)
            inside = s2 < 1
            bump[inside] = np.exp(1.0 - 1.0 / (1.0 - s2[inside]))
            out[c] += rng.uniform(-1.0, 1.0) * bump
    return out.ravel()


# ---------------------------------------------------------------------------
# norm estimates


def contraction_check(op: DiscreteOperator, t_grid: Sequence[float] = (0.01, 0.1, 0.5, 1.0),
                      p_grid: Sequence[float] = (1, 2, 4, np.inf), trials: int = 8, seed: int = 0) -> EstimateReport:
    """max over random smooth f, t and p of ||exp(-tA) f||_p / ||f||_p against 1 + 1e-6."""
    rng = np.random.default_rng(seed)
    worst, witness = 0.0, None
    for trial in range(trials):
        f = smooth_field(op.grid, op.m, rng)
        for t in t_grid:
            g = propagate(op, f, t)
            for p in p_grid:
                ratio = discrete_norm(g, p, op.grid, op.m) / discrete_norm(f, p, op.grid, op.m)
                if ratio > worst:
                    worst = ratio
                    witness = {"seed": seed, "trial": trial, "t": t, "p": p, "ratio": ratio}
    ok = worst <= 1 + 1e-6
    return EstimateReport("contraction", _status(ok), {"max_ratio": worst}, None if ok else witness)


def default_sources(grid: GridSpec) -> list[int]:
    """The origin and the points +-R/4, +-R/2 on every coordinate axis."""
    out = [grid.node_index(np.zeros(grid.d))]
    for a in range(grid.d):
        for s in (-0.5, -0.25, 0.25, 0.5):
            p = np.zeros(grid.d)
            p[a] = s * grid.R
            out.append(grid.node_index(p))
    return list(dict.fromkeys(out))


def lp_lq_check(op: DiscreteOperator, t_grid: Sequence[float] = (0.01, 0.03, 0.1, 0.3, 1.0),
                sources: Sequence[int] | None = None, max_ratio: float = 10.0) -> EstimateReport:
    """M(t) = t^{d/2} max |k_ij(t,x,y)| over sampled sources; bounded if max/min <= 10."""
    sources = default_sources(op.grid) if sources is None else list(sources)
    Ms = []
    for t in t_grid:
        peak = max(float(np.max(np.abs(kernel_slice(op, t, y).values))) for y in sources)
        Ms.append(t ** (op.grid.d / 2) * peak)
    Ms = np.array(Ms)
    ratio = float(Ms.max() / Ms.min())
    ok = ratio <= max_ratio
    rep = EstimateReport("ultracontractivity", _status(ok), {"M_max": Ms.max(), "M_min": Ms.min(), "ratio": ratio},
                         series={"t": list(t_grid), "M": Ms})
    if not ok:
        rep.witness = {"t_max": t_grid[int(Ms.argmax())], "t_min": t_grid[int(Ms.argmin())], "ratio": ratio}
    return rep


def trotter_kato_check(op_V: DiscreteOperator, v: PotentialExpr, t: float = 0.5,
                       n_grid: Sequence[int] = (4, 8, 16, 32, 64, 128, 256), f: np.ndarray | None = None,
                       seed: int = 0) -> EstimateReport:
    """Lie product (exp(-tv/n) exp(-(t/n) A_V))^n f against exp(-t(A_V + v)) f."""
    grid, m = op_V.grid, op_V.m
    if f is None:
        f = smooth_field(grid, m, np.random.default_rng(seed))
    vx = v.evaluate(grid.interior_points)
    mult = sp.kron(sp.identity(m), sp.diags(vx), format="csr")
    A_full = (op_V.A + mult).tocsr()
    full = DiscreteOperator(A_full, grid, op_V.spec, m, op_V.symmetric)
    exact = propagate(full, f, t)
    devs = []
    for n in n_grid:
        g = f.copy()
        tau = t / n
        damp = np.tile(np.exp(-tau * vx), m)
        if op_V.size <= DENSE_LIMIT:
            P = scipy.linalg.expm(-tau * op_V.dense())
            for _ in range(n):
                g = damp * (P @ g)
        else:
            for _ in range(n):
                g = damp * expm_multiply_krylov(op_V.A, g, tau, tol=KRYLOV_TOL)
        devs.append(float(np.linalg.norm(g - exact)))
    devs = np.array(devs)
    scale = np.linalg.norm(f)
    if np.all(devs <= 1e-12 * scale):
        return EstimateReport("trotter_kato", "PASS", {"slope": 0.0, "max_deviation": float(devs.max())},
                              notes=["factors commute: deviation vanishes"], series={"n": list(n_grid), "deviation": devs})
    slope = float(np.polyfit(np.log(n_grid), np.log(devs), 1)[0])
    ok = slope <= -0.8
    rep = EstimateReport("trotter_kato", _status(ok), {"slope": slope, "max_deviation": float(devs.max())},
                         series={"n": list(n_grid), "deviation": devs})
    if not ok:
        rep.witness = {"slope": slope, "bound": -0.8}
    return rep


# ---------------------------------------------------------------------------
# kernels


@dataclass
class KernelSlice:
    """K(t, x, y) for every interior node x at one source y; values[k] is the m x m matrix at node k.

    With ``adjoint`` set, values[k] holds K(t, y, x_k) instead.
    """

    t: float
    y: int
    values: np.ndarray
    grid: GridSpec
    adjoint: bool = False

    @property
    def y_point(self) -> np.ndarray:
        return self.grid.interior_points[self.y]

    @property
    def m(self) -> int:
        return self.values.shape[1]

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        pts = self.grid.interior_points
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{a}" for a in range(self.grid.d)] + ["i", "j", "value"])
            for k, x in enumerate(pts):
                for i in range(self.m):
                    for j in range(self.m):
                        w.writerow([repr(float(c)) for c in x] + [i, j, repr(float(self.values[k, i, j]))])
        return path


def kernel_slice(op: DiscreteOperator, t: float, y, adjoint: bool = False) -> KernelSlice:
    """Column j of K(t, ., y) is exp(-tA) applied to the unit-mass delta at (y, e_j)."""
    if not t > 0:
        raise ValueError("t must be positive")
    grid = op.grid
    node = int(y) if isinstance(y, (int, np.integer)) else grid.node_index(y)
    n, m = op.n_nodes, op.m
    F = np.column_stack([op.delta(node, j) for j in range(m)])
    P = propagate(op, F, t, adjoint=adjoint)
    vals = P.reshape(m, n, m).transpose(1, 0, 2)  # vals[k, i, j] = P[i*n+k, j]
    if adjoint:
        # column a of the transposed propagation at (x_k, b) is K_ab(t, y, x_k)
        vals = vals.transpose(0, 2, 1)
    return KernelSlice(float(t), node, np.ascontiguousarray(vals), grid, adjoint)


def kernel_diagonal(op: DiscreteOperator, t: float) -> np.ndarray:
    """K(t, x, x) as an (n_nodes, m, m) array."""
    n, m = op.n_nodes, op.m
    out = np.empty((n, m, m))
    if op.size > DENSE_LIMIT:
        for k in range(n):
            out[k] = kernel_slice(op, t, k).values[k]
        return out
    P = propagator(op, t)
    idx = np.arange(n)
    for i in range(m):
        for j in range(m):
            out[:, i, j] = P[i * n + idx, j * n + idx]
    return out / op.grid.cell


def eigen_expansion_slice(res, t: float, y: int, n_nodes: int) -> np.ndarray:
    """sum_n exp(-lambda_n t) Psi_n(x) Psi_n(y)^T from a SpectralResult."""
    m = res.m
    Psi = res.vectors.reshape(m, n_nodes, -1)  # [i, x, n]
    w = np.exp(-t * res.lambdas)
    at_y = Psi[:, y, :]  # [j, n]
    return np.einsum("ixn,n,jn->xij", Psi, w, at_y)


@dataclass
class GaussianFit:
    C1: float
    C2: float
    residual: float
    n_points: int
    s_range: tuple[float, float]
    envelope_ratio: float
    passed: bool
    witness: dict | None = None
    C1_envelope: float = math.nan  # smallest C1 making the envelope hold with the fitted C2

    def to_dict(self) -> dict:
        return _jsonable(dict(self.__dict__))

    def write_json(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return path


def gaussian_fit(slices: Sequence[KernelSlice], envelope: float = 1.05) -> GaussianFit:
    """Least-squares line of ln|k_ij| + (d/2) ln t against |x-y|^2/(4t), pooled over slices, then an envelope test."""
    if not slices:
        raise ValueError("need at least one kernel slice")
    d = slices[0].grid.d
    ss, ys, info = [], [], []
    for sl in slices:
        pts = sl.grid.interior_points
        dist2 = np.sum((pts - sl.y_point) ** 2, axis=1)
        for i in range(sl.m):
            for j in range(sl.m):
                val = np.abs(sl.values[:, i, j])
                keep = val > NOISE_FLOOR
                ss.append(dist2[keep] / (4 * sl.t))
                ys.append(np.log(val[keep]) + 0.5 * d * math.log(sl.t))
                info.extend((sl.t, sl.y, int(k), i, j) for k in np.flatnonzero(keep))
    s = np.concatenate(ss)
    y = np.concatenate(ys)
    if len(s) < 3 or np.ptp(s) == 0:
        raise ValueError("not enough kernel entries above the noise floor to fit")
    slope, intercept = np.polyfit(s, y, 1)
    resid = float(np.sqrt(np.mean((y - (slope * s + intercept)) ** 2)))
    C2, C1 = float(-slope), float(math.exp(intercept))
    excess = y - (intercept - C2 * s)  # log of value / envelope
    k = int(np.argmax(excess))
    ratio = float(math.exp(excess[k]))
    passed = C2 > 0 and ratio <= envelope
    witness = None
    if not passed:
        t, yy, node, i, j = info[k]
        witness = {"t": t, "y": yy, "x": node, "i": i, "j": j, "value_over_envelope": ratio, "C2": C2}
    return GaussianFit(C1, C2, resid, len(s), (float(s.min()), float(s.max())), ratio, passed, witness, C1 * ratio)


def symmetry_defect(slice_: KernelSlice, adjoint: KernelSlice) -> float:
    """max |K(t,x,y)^T - K(t,y,x)| on a matched pair of slices."""
    return float(np.max(np.abs(slice_.values.transpose(0, 2, 1) - adjoint.values)))


def offdiag_vs_diag_check(slice_: KernelSlice, adjoint: KernelSlice, tol: float = 1e-9) -> EstimateReport:
    """|k_ij(t,x,y) + k_ij(t,y,x)| <= 2 sqrt(k_ii(t,x,y) k_jj(t,x,y)) for i != j."""
    K, Kt = slice_.values, adjoint.values
    m = K.shape[1]
    diag = np.diagonal(K, axis1=1, axis2=2).copy()
    notes = []
    if np.any(diag < -1e-12):
        k, i = np.unravel_index(int(np.argmin(diag)), diag.shape)
        notes.append(f"negative diagonal kernel entry {diag[k, i]:.3g} at node {k}, component {i}")
    diag = np.where((diag < 0) & (diag >= -1e-12), 0.0, diag)
    worst, wit = -np.inf, None
    for i in range(m):
        for j in range(m):
            if i == j:
                continue
            lhs = np.abs(K[:, i, j] + Kt[:, i, j])
            rhs = 2 * np.sqrt(np.clip(diag[:, i] * diag[:, j], 0, None))
            viol = lhs - rhs
            k = int(np.argmax(viol))
            if viol[k] > worst:
                worst, wit = float(viol[k]), {"t": slice_.t, "y": slice_.y, "x": k, "i": i, "j": j,
                                              "lhs": float(lhs[k]), "rhs": float(rhs[k])}
    if m == 1:
        worst = 0.0
    ok = worst <= tol and not notes
    return EstimateReport("offdiag_vs_diag", _status(ok), {"max_violation": worst}, None if ok else wit, notes)


def positivity_check(op: DiscreteOperator, spec: SystemSpec, t_probe: Sequence[float] = PROBE_TIMES,
                     sources: Sequence[int] | None = None, tol: float = 1e-9) -> EstimateReport:
    """Minimum kernel entry over the probe set, cross-checked against the sign of the off-diagonal potential.

    PASS means no kernel entry below -tol was found. The constant
    ``consistent_with_offdiagonal_sign`` records whether that outcome is the one
    predicted by the signs of the off-diagonal potential entries.
    """
    sources = default_sources(op.grid) if sources is None else list(sources)
    sign = offdiagonal_sign_check(spec)
    expect_positive = sign.holds
    low, wit = np.inf, None
    for t in t_probe:
        for y in sources:
            vals = kernel_slice(op, t, y).values
            flat = int(np.argmin(vals))
            if vals.flat[flat] < low:
                k, i, j = np.unravel_index(flat, vals.shape)
                low = float(vals.flat[flat])
                wit = {"t": t, "y": int(y), "x": int(k), "i": int(i), "j": int(j), "value": low}
    found_negative = low < -tol
    consistent = found_negative != expect_positive
    rep = EstimateReport("positivity", _status(not found_negative),
                         {"min_entry": low, "offdiagonals_nonnegative": expect_positive,
                          "negative_entry_found": found_negative, "consistent_with_offdiagonal_sign": consistent},
                         wit if found_negative else None)
    if not consistent:
        rep.notes.append("kernel sign does not match the sign of the off-diagonal potential")
    return rep


def lower_bound_check(spec: SystemSpec, grid: GridSpec, t: float, y, tol: float = 1e-9,
                      op: DiscreteOperator | None = None) -> EstimateReport:
    """k_{2v}(t,x,y) <= k_ij(t,x,y) for all i, j, x, with k_{2v} the kernel of div(Q grad) - 2v."""
    if not spec.is_symmetric():
        raise PreconditionError("lower bound needs symmetric V")
    pts = grid.interior_points
    Vx = spec.V.evaluate(pts)
    vx = spec.v.evaluate(pts)
    m = spec.m
    off = ~np.eye(m, dtype=bool)
    if m > 1 and np.min(Vx[:, off]) < 0:
        raise PreconditionError("lower bound needs v_hl >= 0 for h != l")
    dg = -np.diagonal(Vx, axis1=1, axis2=2)
    if np.min(dg) < 0 or np.any(dg > vx[:, None] * (1 + 1e-12)):
        raise PreconditionError("lower bound needs 0 <= -v_ii <= v")
    op = op or assemble(spec, grid)
    two_v = parse(f"2*({spec.v})", spec.d)
    scal = assemble_scalar(spec.Q, two_v, grid)
    K = kernel_slice(op, t, y).values
    k2v = kernel_slice(scal, t, y).values[:, 0, 0]
    margin = K - k2v[:, None, None]
    diag_m = float(np.min(np.diagonal(margin, axis1=1, axis2=2)))
    off_m = float(np.min(margin[:, off])) if m > 1 else math.inf
    low = min(diag_m, off_m)
    ok = low >= -tol
    rep = EstimateReport("lower_bound", _status(ok), {"min_margin": low, "min_margin_diagonal": diag_m,
                                                      "min_margin_offdiagonal": off_m, "t": t})
    if not ok:
        k, i, j = np.unravel_index(int(np.argmin(margin)), margin.shape)
        rep.witness = {"t": t, "x": pts[k].tolist(), "i": int(i), "j": int(j),
                       "k_ij": float(K[k, i, j]), "k_2v": float(k2v[k])}
    return rep


@dataclass
class DecayFit:
    gamma_hat: float
    beta_hat: float
    decay_gamma: float
    decay_beta: float
    window: tuple[float, float]
    n_points: int
    passed: bool
    per_component: list[float] = field(default_factory=list)
    mu0: float | None = None

    def to_dict(self) -> dict:
        return _jsonable(dict(self.__dict__))

    def write_json(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return path


def decay_profile_fit(op: DiscreteOperator, t: float, alpha: float, inner: tuple[float, float] = (1.0, 25.0),
                      mu0: float | None = None) -> DecayFit:
    """Exponent of -ln(k_ii(t,x,x)/k_ii(t,0,0)) ~ |x|^gamma along the first positive axis, |x| in [1, 0.8R]."""
    if not alpha > 2:
        raise PreconditionError(f"decay profile needs alpha > 2, got {alpha}")
    grid = op.grid
    d = grid.d
    diag = kernel_diagonal(op, t)
    pts = grid.interior_points
    on_axis = np.all(np.abs(pts[:, 1:]) < 0.5 * grid.h, axis=1) if d > 1 else np.ones(len(pts), bool)
    r = pts[:, 0]
    ray = on_axis & (r >= 1.0) & (r <= 0.8 * grid.R)
    origin = grid.node_index(np.zeros(d))
    theory_g = 1 + alpha / 2
    theory_b = alpha / 4 + (d - 1) / 2
    gammas, betas, lo_r, hi_r, used = [], [], np.inf, 0.0, 0
    for i in range(op.m):
        k0 = diag[origin, i, i]
        with np.errstate(divide="ignore", invalid="ignore"):
            F = -np.log(diag[ray, i, i] / k0)
        rr = r[ray]
        win = np.isfinite(F) & (F >= inner[0]) & (F <= inner[1])
        if win.sum() < 3:
            raise ValueError(f"decay window is empty for component {i}: adjust t or R")
        g = float(np.polyfit(np.log(rr[win]), np.log(F[win]), 1)[0])
        # subleading fit F = a r^gamma + 2 beta ln r + c with gamma at its theoretical value
        X = np.column_stack([rr[win] ** theory_g, 2 * np.log(rr[win]), np.ones(win.sum())])
        coef = np.linalg.lstsq(X, F[win], rcond=None)[0]
        gammas.append(g)
        betas.append(float(coef[1]))
        lo_r, hi_r = min(lo_r, float(rr[win].min())), max(hi_r, float(rr[win].max()))
        used += int(win.sum())
    worst = max(gammas, key=lambda g: abs(g - theory_g))
    passed = all(abs(g - theory_g) <= 0.1 * theory_g for g in gammas)
    return DecayFit(worst, float(np.mean(betas)), theory_g, theory_b, (lo_r, hi_r), used, passed, gammas, mu0)


def maximal_ratio(A_diff: sp.spmatrix, A_pot: sp.spmatrix, grid: GridSpec, m: int, p: float,
                  trials: int, seed: int) -> tuple[float, int]:
    """max over random compact bumps u of (||A_diff u||_p + ||A_pot u||_p) / ||(A_diff + A_pot) u||_p."""
    rng = np.random.default_rng(seed)
    best, skipped = 1.0, 0
    for _ in range(trials):
        u = compact_bump_field(grid, m, rng)
        a, b = A_diff @ u, A_pot @ u
        den = discrete_norm(a + b, p, grid, m)
        if den < 1e-12:
            skipped += 1
            continue
        best = max(best, (discrete_norm(a, p, grid, m) + discrete_norm(b, p, grid, m)) / den)
    return best, skipped


def maximal_inequality_probe(spec: SystemSpec, grid: GridSpec, p: float = 2, trials: int = 32, seed: int = 0,
                             max_ratio: float = 1.5) -> EstimateReport:
    """C estimate for ||div(Q grad u)|| + ||Vt u|| <= C ||Lu|| on one grid and on its refinement N -> 2N-1."""
    estimates = []
    for g in (grid, GridSpec(grid.d, grid.R, 2 * grid.N - 1)):
        A_diff, A_pot = assemble_parts(spec, g)
        c, skipped = maximal_ratio(A_diff, A_pot, g, spec.m, p, trials, seed)
        estimates.append(c)
    ratio = max(estimates) / min(estimates)
    ok = ratio <= max_ratio and min(estimates) >= 1
    rep = EstimateReport("maximal_inequality", _status(ok),
                         {"C_hat": estimates[0], "C_hat_refined": estimates[1], "refinement_ratio": ratio, "p": p})
    if not ok:
        rep.witness = {"C_hat": estimates[0], "C_hat_refined": estimates[1], "ratio": ratio}
    return rep


def mass_profile(op: DiscreteOperator, f: np.ndarray, t_grid: Sequence[float]) -> np.ndarray:
    """h^d sum_x |exp(-tA) f(x)| on a grid of times."""
    return np.array([discrete_norm(propagate(op, f, t), 1, op.grid, op.m) for t in t_grid])
