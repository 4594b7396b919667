"""Coefficient fields and sampled checks of the structural hypotheses.

Every checker here is a falsifier: it samples points on a log-radial shell
grid, reduces a pointwise quantity, and classifies the result as holding on
the sample, failing with a concrete witness, or trending without bound as
the radius grows.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Sequence

import numpy as np
import scipy.linalg
from scipy import optimize
from scipy.stats import norm as _gauss
from scipy.stats import qmc

from .expr import Const, Node, PotentialExpr, Sub, Mul, Neg, evaluate_grad, grad, parse

DEFAULT_GAMMAS = tuple(round(0.05 * k, 2) for k in range(10))
DEFAULT_EPS = tuple(10.0 ** (-k) for k in range(7))
WITNESS_TOL = 1e-12


# ---------------------------------------------------------------------------
# fields


@dataclass(frozen=True)
class DiffusionField:
    """Symmetric d x d field; ``upper[j][l - j]`` holds q_{j,l} for l >= j."""

    upper: tuple[tuple[PotentialExpr, ...], ...]
    dim: int

    def entry(self, j: int, l: int) -> PotentialExpr:
        if l < j:
            j, l = l, j
        return self.upper[j][l - j]

    @classmethod
    def from_strings(cls, rows: Sequence[Sequence[str]], dim: int) -> "DiffusionField":
        if len(rows) != dim or any(len(r) != dim for r in rows):
            raise ValueError(f"Q must be {dim}x{dim}")
        upper = tuple(tuple(parse(rows[j][l], dim) for l in range(j, dim)) for j in range(dim))
        for j in range(dim):
            for l in range(j):
                if str(rows[j][l]).strip() != str(rows[l][j]).strip():
                    lower = parse(rows[j][l], dim)
                    pts = _probe_points(dim)
                    if not np.allclose(lower.evaluate(pts), upper[l][j - l].evaluate(pts), rtol=1e-12, atol=1e-12):
                        raise ValueError(f"Q is not symmetric: entries ({j},{l}) and ({l},{j}) differ")
        return cls(upper, dim)

    @classmethod
    def identity(cls, dim: int, scale: float = 1.0) -> "DiffusionField":
        upper = tuple(
            tuple(PotentialExpr(Const(scale if l == j else 0.0), dim) for l in range(j, dim)) for j in range(dim)
        )
        return cls(upper, dim)

    def is_identity(self) -> bool:
        pts = _probe_points(self.dim)
        return bool(np.allclose(self.evaluate(pts), np.eye(self.dim), rtol=0, atol=1e-14))

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.empty((pts.shape[0], self.dim, self.dim))
        for j in range(self.dim):
            for l in range(j, self.dim):
                val = self.upper[j][l - j].evaluate(pts)
                out[:, j, l] = val
                out[:, l, j] = val
        return out

    def to_strings(self) -> list[list[str]]:
        return [[str(self.entry(j, l)) for l in range(self.dim)] for j in range(self.dim)]


@dataclass(frozen=True)
class MatrixField:
    """m x m matrix of scalar expressions on R^dim."""

    entries: tuple[tuple[PotentialExpr, ...], ...]
    dim: int

    def __post_init__(self):
        m = len(self.entries)
        if m < 1 or any(len(row) != m for row in self.entries):
            raise ValueError("matrix field must be square with m >= 1")

    @property
    def m(self) -> int:
        return len(self.entries)

    @classmethod
    def from_strings(cls, rows: Sequence[Sequence[str]], dim: int) -> "MatrixField":
        return cls(tuple(tuple(parse(s, dim) for s in row) for row in rows), dim)

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        m = self.m
        out = np.empty((pts.shape[0], m, m))
        for i in range(m):
            for j in range(m):
                out[:, i, j] = self.entries[i][j].evaluate(pts)
        return out

    def evaluate_grad(self, points: np.ndarray) -> np.ndarray:
        """Array of shape ``(n, dim, m, m)`` holding the partial derivatives."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        m = self.m
        out = np.empty((pts.shape[0], self.dim, m, m))
        for i in range(m):
            for j in range(m):
                out[:, :, i, j] = evaluate_grad(self.entries[i][j], pts, self._grads[i][j])
        return out

    @cached_property
    def _grads(self):
        return [[grad(e) for e in row] for row in self.entries]

    @property
    def origin_singular(self) -> bool:
        return any(e.origin_singular for row in self.entries for e in row)

    def minus_scalar(self, v: PotentialExpr) -> "MatrixField":
        """The field ``self - v * I``."""
        rows = []
        for i, row in enumerate(self.entries):
            rows.append(tuple(PotentialExpr(_minus(e.root, v.root), self.dim) if i == j else e
                              for j, e in enumerate(row)))
        return MatrixField(tuple(rows), self.dim)

    def is_symmetric(self, points: np.ndarray | None = None, tol: float = 1e-12) -> bool:
        pts = _probe_points(self.dim) if points is None else points
        W = self.evaluate(pts)
        scale = max(1.0, float(np.max(np.abs(W))))
        return bool(np.max(np.abs(W - np.swapaxes(W, 1, 2))) <= tol * scale)

    def to_strings(self) -> list[list[str]]:
        return [[str(e) for e in row] for row in self.entries]


def _minus(a: Node, b: Node) -> Node:
    if isinstance(b, Const) and b.value == 0:
        return a
    if isinstance(a, Const) and a.value == 0:
        return Neg(b)
    return Sub(a, b)


@dataclass(frozen=True)
class SystemSpec:
    """Q, V and the scalar perturbation v; the full potential is V - v I."""

    Q: DiffusionField
    V: MatrixField
    v: PotentialExpr
    alpha: float | None = None

    def __post_init__(self):
        if self.Q.dim != self.V.dim or self.v.dim != self.V.dim:
            raise ValueError("Q, V and v must share the spatial dimension")

    @property
    def d(self) -> int:
        return self.V.dim

    @property
    def m(self) -> int:
        return self.V.m

    @cached_property
    def Vt(self) -> MatrixField:
        return self.V.minus_scalar(self.v)

    def is_symmetric(self) -> bool:
        return self.V.is_symmetric()

    @classmethod
    def from_dict(cls, cfg: dict) -> "SystemSpec":
        d = int(cfg["d"])
        m = int(cfg.get("m", len(cfg["V"])))
        V = MatrixField.from_strings(cfg["V"], d)
        if V.m != m:
            raise ValueError(f"V is {V.m}x{V.m} but m = {m}")
        Q = DiffusionField.from_strings(cfg["Q"], d) if "Q" in cfg else DiffusionField.identity(d)
        v = parse(cfg.get("v", "0"), d)
        alpha = cfg.get("alpha")
        spec = cls(Q, V, v, None if alpha is None else float(alpha))
        spec.validate()
        return spec

    @classmethod
    def from_strings(cls, Q, V, v, alpha=None, d=1) -> "SystemSpec":
        return cls.from_dict({"d": d, "Q": Q, "V": V, "v": v, "alpha": alpha})

    def validate(self, sampling: "Sampling | None" = None):
        pts, _ = (sampling or Sampling()).points(self.d)
        vals = self.v.evaluate(pts)
        bad = np.isfinite(vals) & (vals < 0)
        if np.any(bad):
            k = int(np.argmax(bad))
            raise ValueError(f"v is negative at x = {pts[k].tolist()}: v = {vals[k]:.6g}")

    def to_dict(self) -> dict:
        out = {"d": self.d, "m": self.m, "Q": self.Q.to_strings(), "V": self.V.to_strings(), "v": str(self.v)}
        if self.alpha is not None:
            out["alpha"] = self.alpha
        return out


def _probe_points(dim: int, n: int = 64) -> np.ndarray:
    rng = np.random.default_rng(12345)
    pts = rng.normal(size=(n, dim)) * np.exp(rng.uniform(-2, 3, size=(n, 1)))
    return np.vstack([np.zeros((1, dim)), pts])


# ---------------------------------------------------------------------------
# sampling and reports


@dataclass(frozen=True)
class Sampling:
    """Log-radial shells r0 * 2**k, k < levels, times quasi-random directions."""

    r0: float = 0.25
    levels: int = 15
    n_dirs: int = 64
    origin: bool = True
    seed: int = 0

    def radii(self) -> np.ndarray:
        return self.r0 * 2.0 ** np.arange(self.levels)

    def directions(self, d: int) -> np.ndarray:
        if d == 1:
            return np.array([[1.0], [-1.0]])
        sob = qmc.Sobol(d, scramble=True, seed=self.seed)
        u = sob.random(self.n_dirs)
        z = _gauss.ppf(np.clip(u, 1e-12, 1 - 1e-12))
        return z / np.linalg.norm(z, axis=1, keepdims=True)

    def points(self, d: int, exclude_origin: bool = False) -> tuple[np.ndarray, np.ndarray]:
        """Sample points and their shell index (-1 marks the origin)."""
        dirs = self.directions(d)
        r = self.radii()
        pts = (r[:, None, None] * dirs[None, :, :]).reshape(-1, d)
        idx = np.repeat(np.arange(len(r)), len(dirs))
        if self.origin and not exclude_origin:
            pts = np.vstack([np.zeros((1, d)), pts])
            idx = np.concatenate([[-1], idx])
        return pts, idx

    def describe(self) -> dict:
        return {"r0": self.r0, "levels": self.levels, "n_dirs": self.n_dirs, "origin": self.origin, "seed": self.seed}


class Verdict(str, enum.Enum):
    HOLDS_ON_SAMPLE = "HOLDS_ON_SAMPLE"
    FAILS = "FAILS"
    UNBOUNDED_TREND = "UNBOUNDED_TREND"


@dataclass
class Witness:
    """A point (and direction) where an inequality ``lhs <relation> rhs`` is violated."""

    point: list[float]
    lhs: float
    rhs: float
    relation: str
    direction: list[float] | None = None
    detail: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return _jsonable(
            {"point": self.point, "direction": self.direction, "lhs": self.lhs, "rhs": self.rhs,
             "relation": self.relation, **self.detail}
        )


@dataclass
class CheckReport:
    name: str
    verdict: Verdict
    constants: dict[str, Any] = field(default_factory=dict)
    samples: dict[str, Any] = field(default_factory=dict)
    witness: Witness | None = None
    notes: list[str] = field(default_factory=list)
    series: dict[str, Any] = field(default_factory=dict)

    @property
    def holds(self) -> bool:
        return self.verdict is Verdict.HOLDS_ON_SAMPLE

    def to_dict(self) -> dict:
        return _jsonable(
            {
                "name": self.name,
                "verdict": self.verdict.value,
                "constants": self.constants,
                "samples": self.samples,
                "witness": None if self.witness is None else self.witness.to_dict(),
                "notes": self.notes,
                "series": self.series,
            }
        )


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        if math.isnan(f):
            return "nan"
        if math.isinf(f):
            return "inf" if f > 0 else "-inf"
        return f
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, enum.Enum):
        return obj.value
    return obj


def loglog_slope(radii: np.ndarray, values: np.ndarray, decade: float = 10.0) -> float:
    """Least-squares slope of log(values) against log(radii) over the top decade."""
    radii = np.asarray(radii, dtype=float)
    values = np.asarray(values, dtype=float)
    sel = (radii >= radii.max() / decade) & np.isfinite(values)
    r, y = radii[sel], values[sel]
    if len(r) < 2:
        return 0.0
    if np.all(y == 0):
        return 0.0
    if np.any(y <= 0):
        return math.nan
    return float(np.polyfit(np.log(r), np.log(y), 1)[0])


def _per_shell(values: np.ndarray, idx: np.ndarray, levels: int, reduce=np.max) -> np.ndarray:
    out = np.full(levels, np.nan)
    for k in range(levels):
        sel = (idx == k) & np.isfinite(values)
        if np.any(sel):
            out[k] = reduce(values[sel])
    return out


def _exclude_origin(sampling: Sampling, singular: bool) -> bool:
    return singular and sampling.origin


# ---------------------------------------------------------------------------
# matrix functions


def fractional_power(M: np.ndarray, p: float, sym_tol: float = 1e-10) -> np.ndarray:
    """Principal power M**p for a matrix whose spectrum lies in the open right half-plane."""
    if p == 0:
        return np.eye(M.shape[0])
    scale = max(1.0, float(np.max(np.abs(M))))
    if np.max(np.abs(M - M.T)) <= sym_tol * scale:
        S = 0.5 * (M + M.T)
        w, U = np.linalg.eigh(S)
        return (U * w**p) @ U.T
    out = scipy.linalg.fractional_matrix_power(M, p)
    return np.real_if_close(out, tol=1e6)


# ---------------------------------------------------------------------------
# checkers


def ellipticity_check(Q: DiffusionField, samples: Sampling = Sampling()) -> CheckReport:
    pts, idx = samples.points(Q.dim)
    Qx = Q.evaluate(pts)
    finite = np.all(np.isfinite(Qx), axis=(1, 2))
    w, U = np.linalg.eigh(np.where(finite[:, None, None], Qx, 0.0))
    lo, hi = w[:, 0], w[:, -1]
    lo = np.where(finite, lo, np.nan)
    hi = np.where(finite, hi, np.nan)
    eta1, eta2 = float(np.nanmin(lo)), float(np.nanmax(hi))
    hi_r = _per_shell(hi, idx, samples.levels)
    lo_r = _per_shell(lo, idx, samples.levels, np.min)
    slope_hi = loglog_slope(samples.radii(), hi_r)
    slope_lo = loglog_slope(samples.radii(), lo_r) if eta1 > 0 else math.nan
    rep = CheckReport(
        "ellipticity", Verdict.HOLDS_ON_SAMPLE, {"eta1": eta1, "eta2": eta2},
        samples.describe(), series={"radii": samples.radii(), "eta2_r": hi_r, "eta1_r": lo_r},
    )
    rep.constants.update(slope_eta2=slope_hi, slope_eta1=slope_lo)
    if not np.all(finite):
        rep.notes.append(f"{int(np.sum(~finite))} non-finite samples excluded")
    if eta1 <= 0:
        k = int(np.nanargmin(lo))
        xi = U[k][:, 0]
        rep.verdict = Verdict.FAILS
        rep.witness = Witness(pts[k].tolist(), float(xi @ Qx[k] @ xi), 0.0, ">", xi.tolist())
    if slope_hi > 0.1:
        # unbounded growth is the primary diagnosis even when eta1 also degenerates
        rep.verdict = Verdict.UNBOUNDED_TREND
        rep.notes.append(f"largest eigenvalue grows like r^{slope_hi:.3g}")
    elif rep.verdict is Verdict.HOLDS_ON_SAMPLE and slope_lo < -0.1:
        rep.verdict = Verdict.UNBOUNDED_TREND
        rep.notes.append(f"smallest eigenvalue decays like r^{slope_lo:.3g}")
    return rep


def dissipativity_check(W: MatrixField, samples: Sampling = Sampling()) -> CheckReport:
    pts, idx = samples.points(W.dim)
    Wx = W.evaluate(pts)
    finite = np.all(np.isfinite(Wx), axis=(1, 2))
    S = 0.5 * (Wx + np.swapaxes(Wx, 1, 2))
    w, U = np.linalg.eigh(np.where(finite[:, None, None], S, 0.0))
    top = np.where(finite, w[:, -1], np.nan)
    k = int(np.nanargmax(top))
    beta = float(top[k])
    rep = CheckReport("dissipativity", Verdict.HOLDS_ON_SAMPLE, {"beta": beta, "argmax": pts[k].tolist()},
                      samples.describe(), series={"radii": samples.radii(), "beta_r": _per_shell(top, idx, samples.levels)})
    if not np.all(finite):
        rep.notes.append(f"{int(np.sum(~finite))} non-finite samples excluded")
    if not beta < 0:
        xi = U[k][:, -1]
        rep.verdict = Verdict.FAILS
        rep.witness = Witness(pts[k].tolist(), float(xi @ Wx[k] @ xi), 0.0, "<", xi.tolist(),
                              {"inequality": "Re<W(x)xi, xi> <= beta |xi|^2 with beta < 0"})
        if abs(beta) <= WITNESS_TOL:
            rep.notes.append("symmetric part vanishes: shift the potential to obtain beta < 0")
    return rep


def gradient_condition_check(
    V: MatrixField, gamma_grid: Sequence[float] = DEFAULT_GAMMAS, samples: Sampling = Sampling()
) -> CheckReport:
    pts, idx = samples.points(V.dim, exclude_origin=_exclude_origin(samples, V.origin_singular))
    Vx = V.evaluate(pts)
    dV = V.evaluate_grad(pts)
    negV = -Vx
    for k in range(len(pts)):
        ev = np.linalg.eigvals(negV[k])
        if np.min(ev.real) <= 0:
            j = int(np.argmin(ev.real))
            return CheckReport(
                "gradient_condition", Verdict.FAILS, {"gamma": None}, samples.describe(),
                Witness(pts[k].tolist(), float(ev[j].real), 0.0, ">",
                        detail={"inequality": "spectrum of -V(x) in the open right half-plane",
                                "eigenvalue": [float(ev[j].real), float(ev[j].imag)]}),
                ["fractional power of -V(x) undefined"],
            )
    radii = samples.radii()
    per_gamma = {}
    accepted = None
    sup_r = {}
    for g in gamma_grid:
        s = np.empty(len(pts))
        for k in range(len(pts)):
            P = fractional_power(negV[k], -g)
            s[k] = max(np.linalg.norm(dV[k, j] @ P, 2) for j in range(V.dim))
        s_r = _per_shell(s, idx, samples.levels)
        sup_r[g] = s_r
        slope = loglog_slope(radii, s_r)
        top = np.nanmax(s_r)
        interior = top == 0 or np.nanmax(s_r[:-1]) >= top * (1 - 1e-12)
        ok = bool(np.all(np.isfinite(s_r)) and interior and slope <= 0.05)
        per_gamma[g] = {"verdict": (Verdict.HOLDS_ON_SAMPLE if ok else Verdict.UNBOUNDED_TREND).value,
                        "sup": float(top), "slope": slope, "interior_sup": bool(interior)}
        if ok and accepted is None:
            accepted = g
    rep = CheckReport(
        "gradient_condition",
        Verdict.HOLDS_ON_SAMPLE if accepted is not None else Verdict.UNBOUNDED_TREND,
        {"gamma": accepted, "accepted_gammas": [g for g, r in per_gamma.items() if r["verdict"] == "HOLDS_ON_SAMPLE"],
         "per_gamma": per_gamma},
        samples.describe(),
        series={"radii": radii, **{f"s_r[{g}]": v for g, v in sup_r.items()}},
    )
    if accepted is None:
        rep.notes.append("no gamma in the grid keeps |dV (-V)^-gamma| bounded")
    return rep


def grad_ratio_check(v: PotentialExpr, samples: Sampling = Sampling()) -> CheckReport:
    pts, idx = samples.points(v.dim, exclude_origin=_exclude_origin(samples, v.origin_singular))
    g = grad(v)
    vals = v.evaluate(pts)
    with np.errstate(over="ignore", invalid="ignore"):
        gn = np.linalg.norm(evaluate_grad(v, pts, g), axis=1)
    finite = np.isfinite(vals) & np.isfinite(gn)
    rep = CheckReport("grad_ratio", Verdict.HOLDS_ON_SAMPLE, {}, samples.describe())
    neg = finite & (vals < 0)
    if np.any(neg):
        k = int(np.argmax(neg))
        rep.verdict = Verdict.FAILS
        rep.witness = Witness(pts[k].tolist(), float(vals[k]), 0.0, ">=", detail={"inequality": "v(x) >= 0"})
        rep.constants["c"] = None
        return rep
    zero = finite & (vals == 0)
    use = finite & (vals > 0)
    ratio = np.full(len(pts), np.nan)
    ratio[use] = gn[use] / vals[use]
    if np.any(zero):
        rep.notes.append(f"{int(zero.sum())} samples with v = 0 excluded")
        rep.constants["zero_points"] = pts[zero].tolist()
    if np.any(~finite):
        rep.notes.append(f"{int((~finite).sum())} non-finite samples excluded")
    if not np.any(use):
        rep.constants["c"] = 0.0
        return rep
    k = int(np.nanargmax(ratio))
    c = float(ratio[k])
    argmax = pts[k]
    # radial refinement around the best sample
    r = samples.radii()
    if idx[k] >= 0 and v.dim >= 1:
        direction = pts[k] / np.linalg.norm(pts[k])
        lo = r[idx[k] - 1] if idx[k] > 0 else 0.0
        hi = r[idx[k] + 1] if idx[k] + 1 < len(r) else r[idx[k]]

        def neg_ratio(t):
            p = (t * direction)[None, :]
            val = v.evaluate(p)[0]
            if not (np.isfinite(val) and val > 0):
                return 0.0
            return -np.linalg.norm(evaluate_grad(v, p, g)) / val

        res = optimize.minimize_scalar(neg_ratio, bounds=(lo, hi), method="bounded", options={"xatol": 1e-10})
        if -res.fun > c:
            c = float(-res.fun)
            argmax = res.x * direction
    ratio_r = _per_shell(ratio, idx, samples.levels)
    slope = loglog_slope(r, ratio_r)
    rep.constants.update(c=c, argmax=np.asarray(argmax).tolist(), slope=slope)
    rep.series = {"radii": r, "ratio_r": ratio_r}
    if slope > 0.05:
        rep.verdict = Verdict.UNBOUNDED_TREND
        rep.notes.append(f"|grad v|/v grows like r^{slope:.3g}")
    return rep


def okazawa_check(
    v: PotentialExpr, Q: DiffusionField, eps_grid: Sequence[float] = DEFAULT_EPS, samples: Sampling = Sampling()
) -> CheckReport:
    """Constants a, b with |grad v_eps|_Q^2 <= a v_eps^2 + b v_eps^3 for the Yosida approximants."""
    pts, idx = samples.points(v.dim, exclude_origin=_exclude_origin(samples, v.origin_singular))
    vals = v.evaluate(pts)
    gv = evaluate_grad(v, pts)
    Qx = Q.evaluate(pts)
    finite = np.isfinite(vals) & np.all(np.isfinite(gv), axis=1) & np.all(np.isfinite(Qx), axis=(1, 2))
    use = finite & (vals > 0)
    rep = CheckReport("okazawa", Verdict.HOLDS_ON_SAMPLE, {}, samples.describe())
    if np.any(finite & (vals < 0)):
        k = int(np.argmax(finite & (vals < 0)))
        rep.verdict = Verdict.FAILS
        rep.witness = Witness(pts[k].tolist(), float(vals[k]), 0.0, ">=", detail={"inequality": "v(x) >= 0"})
        return rep
    if not np.any(use):
        rep.constants.update(a=0.0, b=0.0)
        return rep
    vals, gv, Qx, sub_idx = vals[use], gv[use], Qx[use], idx[use]
    qform = np.einsum("ni,nij,nj->n", gv, Qx, gv)
    a_eps = {}
    ratio_lim = qform / vals**2  # eps -> 0 limit dominates every eps > 0
    for eps in eps_grid:
        ve = vals / (1 + eps * vals)
        ge2 = qform / (1 + eps * vals) ** 4
        a_eps[eps] = float(np.max(ge2 / ve**2))
    a_direct = float(np.max(ratio_lim))
    c = float(np.max(np.sqrt(np.einsum("ni,ni->n", gv, gv)) / vals))
    eta2 = float(np.max(np.linalg.eigvalsh(Qx)[:, -1]))
    ratio_r = _per_shell(ratio_lim, sub_idx, samples.levels)
    slope = loglog_slope(samples.radii(), ratio_r)
    rep.constants.update(
        a=eta2 * c**2, b=0.0, a_direct=a_direct, a_unweighted=c**2, c=c, eta2=eta2,
        a_per_eps={str(k): val for k, val in a_eps.items()}, slope=slope,
    )
    if abs(eta2 - 1.0) > 1e-12 or not Q.is_identity():
        rep.notes.append("Q != I: reported a = eta2 * c^2 differs from the Q-free constant c^2")
    if slope > 0.05:
        inner = samples.radii()[: max(1, samples.levels // 2)]
        bounded = np.nanmax(ratio_r[: len(inner)])
        b = 0.0
        b_eps = {}
        for eps in eps_grid:
            ve = vals / (1 + eps * vals)
            ge2 = qform / (1 + eps * vals) ** 4
            b_eps[eps] = float(np.max(np.maximum(ge2 - bounded * ve**2, 0.0) / ve**3))
            b = max(b, b_eps[eps])
        rep.constants.update(a=eta2 * bounded, a_direct=bounded, b=b, b_per_eps={str(k): x for k, x in b_eps.items()})
        small = [b_eps[e] for e in sorted(eps_grid)[:2]]
        if len(small) == 2 and small[1] > 0 and small[0] / small[1] > 2:
            rep.verdict = Verdict.UNBOUNDED_TREND
            rep.notes.append("b grows without bound as eps -> 0")
    return rep


def _complex_forms(Wx: np.ndarray, z: np.ndarray):
    """Re<-W xi, xi> and Im<W xi, xi> for xi = a + ib, z = [a, b] rows."""
    m = Wx.shape[0]
    a, b = z[:, :m], z[:, m:]
    S = 0.5 * (Wx + Wx.T)
    K = Wx - Wx.T
    re = np.einsum("ni,ij,nj->n", a, S, a) + np.einsum("ni,ij,nj->n", b, S, b)
    im = np.einsum("ni,ij,nj->n", a, K, b)
    return -re, im


def sectoriality_at(Wx: np.ndarray, n_xi: int = 512, refine: bool = True, seed: int = 0):
    """inf over unit xi in C^m of Re<-W xi,xi> / |Im<W xi,xi>| at one point.

    Returns (M, xi) where xi = [a, b] is the minimising sample, or (inf, None)
    when the imaginary part vanishes identically.
    """
    m = Wx.shape[0]
    K = Wx - Wx.T
    scale = max(1.0, float(np.max(np.abs(Wx))))
    z = _sphere_samples(2 * m, n_xi, seed)
    re_neg, im = _complex_forms(Wx, z)
    if np.any(re_neg < -WITNESS_TOL * scale):
        k = int(np.argmin(re_neg))
        return -math.inf, z[k]
    if np.max(np.abs(K)) <= 1e-14 * scale:
        return math.inf, None
    live = np.abs(im) > 1e-14 * scale
    if not np.any(live):
        return math.inf, None
    ratio = np.full(len(z), np.inf)
    ratio[live] = re_neg[live] / np.abs(im[live])
    order = np.argsort(ratio)
    best_k = int(order[0])
    best, best_z = float(ratio[best_k]), z[best_k]
    if refine and best > 0:

        def f(y):
            y = y / np.linalg.norm(y)
            r, i = _complex_forms(Wx, y[None, :])
            return r[0] / abs(i[0]) if abs(i[0]) > 1e-14 * scale else 1e300

        for k in order[:3]:
            res = optimize.minimize(f, z[k], method="Nelder-Mead",
                                    options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 4000})
            if res.fun < best:
                best, best_z = float(res.fun), res.x / np.linalg.norm(res.x)
    return best, best_z


def _sphere_samples(n: int, count: int, seed: int) -> np.ndarray:
    sob = qmc.Sobol(n, scramble=True, seed=seed)
    u = sob.random(count)
    z = _gauss.ppf(np.clip(u, 1e-12, 1 - 1e-12))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def sectoriality_check(field_or_spec, samples: Sampling = Sampling(), n_xi: int = 512) -> CheckReport:
    W = field_or_spec.Vt if isinstance(field_or_spec, SystemSpec) else field_or_spec
    pts, idx = samples.points(W.dim)
    Wx = W.evaluate(pts)
    Mx = np.full(len(pts), np.inf)
    zs: list = [None] * len(pts)
    for k in range(len(pts)):
        if not np.all(np.isfinite(Wx[k])):
            Mx[k] = np.nan
            continue
        Mx[k], zs[k] = sectoriality_at(Wx[k], n_xi=n_xi, refine=False, seed=samples.seed)
    # refine the few worst points
    finite_order = np.argsort(np.where(np.isnan(Mx), np.inf, Mx))
    for k in finite_order[:5]:
        if np.isfinite(Mx[k]) and Mx[k] > 0:
            Mx[k], zs[k] = sectoriality_at(Wx[k], n_xi=n_xi, refine=True, seed=samples.seed)
    M = float(np.nanmin(Mx)) if np.any(~np.isnan(Mx)) else math.inf
    M = 0.0 if M == 0 else M
    M_r = _per_shell(Mx, idx, samples.levels, np.min)
    rep = CheckReport("sectoriality", Verdict.HOLDS_ON_SAMPLE, {"M": M}, samples.describe(),
                      series={"radii": samples.radii(), "M_r": M_r})
    if M <= 0:
        k = int(np.nanargmin(Mx))
        z = zs[k]
        re_neg, im = _complex_forms(Wx[k], z[None, :])
        m = W.m
        rep.verdict = Verdict.FAILS
        rep.witness = Witness(pts[k].tolist(), float(re_neg[0]), float(abs(im[0])), ">= M *",
                              z.tolist(), {"inequality": "Re<-W xi, xi> >= M |Im<W xi, xi>| for some M > 0",
                                           "xi_real": z[:m].tolist(), "xi_imag": z[m:].tolist()})
    elif math.isfinite(M):
        fin = np.isfinite(M_r)
        slope = loglog_slope(samples.radii()[fin], M_r[fin]) if fin.sum() >= 2 else 0.0
        rep.constants["slope"] = slope
        if slope < -0.05:
            rep.verdict = Verdict.UNBOUNDED_TREND
            rep.notes.append(f"M(r) decays like r^{slope:.3g}: the infimum over R^d is 0")
    return rep


def offdiagonal_sign_check(field_or_spec, samples: Sampling = Sampling()) -> CheckReport:
    W = field_or_spec.Vt if isinstance(field_or_spec, SystemSpec) else field_or_spec
    pts, _ = samples.points(W.dim)
    Wx = W.evaluate(pts)
    m = W.m
    rep = CheckReport("offdiagonal_sign", Verdict.HOLDS_ON_SAMPLE, {}, samples.describe())
    if m == 1:
        rep.constants["min_offdiag"] = None
        rep.notes.append("scalar potential: vacuous")
        return rep
    mask = ~np.eye(m, dtype=bool)
    off = np.where(mask[None], Wx, np.inf)
    flat = int(np.nanargmin(off))
    k, i, j = np.unravel_index(flat, off.shape)
    low = float(off[k, i, j])
    rep.constants["min_offdiag"] = low
    if low < 0:
        rep.verdict = Verdict.FAILS
        rep.witness = Witness(pts[k].tolist(), low, 0.0, ">=", detail={"i": int(i), "j": int(j),
                                                                       "inequality": "v_ij(x) >= 0 for i != j"})
    return rep


def coercivity_check(W: MatrixField, samples: Sampling = Sampling()) -> CheckReport:
    pts, idx = samples.points(W.dim, exclude_origin=True)
    Wx = W.evaluate(pts)
    smin = np.linalg.svd(Wx, compute_uv=False)[:, -1]
    rho = _per_shell(smin, idx, samples.levels, np.min)
    radii = samples.radii()
    slope = loglog_slope(radii, rho)
    top = radii >= radii.max() / 10
    increasing = bool(np.all(np.diff(rho[top]) > 0))
    rep = CheckReport("coercivity", Verdict.HOLDS_ON_SAMPLE, {"growth_exponent": slope}, samples.describe(),
                      series={"radii": radii, "rho_r": rho})
    if not (increasing and slope >= 0.1):
        rep.verdict = Verdict.FAILS
        k = int(np.argmax(idx == samples.levels - 1))
        rep.witness = Witness(pts[k].tolist(), float(slope), 0.1, ">=",
                              detail={"inequality": "smallest singular value grows at least like r^0.1",
                                      "increasing": increasing})
    return rep


def little_o_check(V: MatrixField, v: PotentialExpr, alpha: float, samples: Sampling = Sampling()) -> CheckReport:
    pts, idx = samples.points(V.dim, exclude_origin=True)
    r = np.linalg.norm(pts, axis=1)
    expected = 1 + r**alpha
    if not np.allclose(v.evaluate(pts), expected, rtol=1e-12, atol=0):
        raise ValueError(f"v is not of the form 1+|x|^{alpha}")
    Vx = V.evaluate(pts)
    diag = np.max(np.abs(np.diagonal(Vx, axis1=1, axis2=2)), axis=1)
    ratio = diag / r**alpha
    ratio_r = _per_shell(ratio, idx, samples.levels)
    radii = samples.radii()
    tail = ratio_r[radii >= radii.max() / 10]
    rep = CheckReport("little_o", Verdict.HOLDS_ON_SAMPLE, {"alpha": alpha, "tail_first": float(tail[0]),
                                                           "tail_last": float(tail[-1])},
                      samples.describe(), series={"radii": radii, "ratio_r": ratio_r})
    if np.all(tail == 0):
        return rep
    monotone = bool(np.all(np.diff(tail) <= 0))
    if not (monotone and tail[-1] < 0.1 * tail[0]):
        k = int(np.argmax(idx == samples.levels - 1))
        rep.verdict = Verdict.FAILS
        rep.witness = Witness(pts[k].tolist(), float(tail[-1]), float(0.1 * tail[0]), "<",
                              detail={"inequality": "max_i |v_ii(x)| / |x|^alpha -> 0", "monotone": monotone})
    return rep
