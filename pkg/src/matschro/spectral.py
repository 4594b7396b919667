"""Low spectrum of the discrete operator, eigenvalue counting, Weyl asymptotics and the heat trace."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg

from .grid import DiscreteOperator
from .lanczos import LanczosConvergenceError, lanczos_smallest

DENSE_LIMIT = 4096
RESIDUAL_TOL = 1e-8


class NonSymmetricOperatorError(ValueError):
    pass


@dataclass
class SpectralResult:
    """k lowest eigenpairs; ``vectors[:, n]`` has unit discrete L2 norm."""

    lambdas: np.ndarray
    vectors: np.ndarray
    residuals: np.ndarray
    cell: float
    m: int = 1
    method: str = "dense"

    @property
    def k(self) -> int:
        return len(self.lambdas)

    def component(self, n: int, i: int) -> np.ndarray:
        """Component ``i`` of eigenvector ``n`` on the interior nodes."""
        return self.vectors[:, n].reshape(self.m, -1)[i]

    def inner(self, a: int, b: int) -> float:
        return float(self.cell * self.vectors[:, a] @ self.vectors[:, b])

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["n", "lambda", "residual"])
            for n, (lam, r) in enumerate(zip(self.lambdas, self.residuals)):
                w.writerow([n, repr(float(lam)), repr(float(r))])
        return path


def eigen_lowest(op: DiscreteOperator, k: int, seed: int = 0) -> SpectralResult:
    """The k smallest eigenpairs of a symmetric discrete operator.

    Sizes up to 4096 go through a dense symmetric solver, larger ones through
    shift-inverted Lanczos with full reorthogonalisation.
    """
    if not op.symmetric:
        raise NonSymmetricOperatorError("eigen_lowest needs a symmetric operator (symmetric V)")
    n = op.size
    # the dense path can return the whole spectrum; Lanczos needs k < n
    if not 0 < k <= n or (k == n and n > DENSE_LIMIT):
        raise ValueError(f"need 0 < k < {n}, got {k}")
    if n <= DENSE_LIMIT:
        lam, Y = scipy.linalg.eigh(op.dense(), subset_by_index=[0, k - 1])
        method = "dense"
    else:
        lam, Y, _ = lanczos_smallest(op.A, k, shift=0.0, tol=RESIDUAL_TOL, seed=seed)
        method = "lanczos"
    res = np.linalg.norm(op.A @ Y - Y * lam, axis=0)
    bad = res > RESIDUAL_TOL * np.maximum(1.0, np.abs(lam))
    if np.any(bad):
        raise LanczosConvergenceError(f"{int(bad.sum())} eigenpairs miss the residual target")
    cell = op.grid.cell
    # unit euclidean vectors -> unit discrete L2 vectors
    return SpectralResult(lam, Y / math.sqrt(cell), res, cell, op.m, method)


def counting_function(res: SpectralResult | np.ndarray, lam: float) -> int:
    """Number of eigenvalues <= lam; lam past the last computed eigenvalue is an error."""
    lambdas = np.asarray(res.lambdas if isinstance(res, SpectralResult) else res)
    if lam > lambdas[-1]:
        raise ValueError(f"lambda = {lam} lies beyond the computed range (max {lambdas[-1]}); count would be censored")
    return int(np.searchsorted(lambdas, lam, side="right"))


def unit_ball_volume(d: int) -> float:
    return math.pi ** (d / 2) / math.gamma(d / 2 + 1)


def weyl_exponent(alpha: float, d: int) -> float:
    return d * (0.5 + 1.0 / alpha)


def weyl_constant(alpha: float, d: int, m: int) -> float:
    """Leading coefficient of N(lambda) ~ C lambda^{d(1/2+1/alpha)} for v = 1+|x|^alpha, Q = I."""
    p = weyl_exponent(alpha, d)
    return (
        (1.0 / alpha) * m * d * unit_ball_volume(d) / (4 * math.pi) ** (d / 2)
        * math.gamma(d / alpha) / math.gamma(p + 1)
    )


@dataclass
class WeylReport:
    alpha: float
    d: int
    m: int
    exponent: float
    lambdas: np.ndarray
    counts: np.ndarray
    ratios: np.ndarray
    theory: float
    tail: float
    deviation: float
    tolerance: float = 0.1

    @property
    def passed(self) -> bool:
        return bool(self.deviation <= self.tolerance)

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["lambda", "count", "ratio", "theory"])
            for lam, c, r in zip(self.lambdas, self.counts, self.ratios):
                w.writerow([repr(float(lam)), int(c), repr(float(r)), repr(self.theory)])
        return path

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha, "d": self.d, "m": self.m, "exponent": self.exponent,
            "theory": self.theory, "tail": self.tail, "deviation": self.deviation,
            "passed": self.passed, "n_ratios": int(len(self.ratios)),
        }


def weyl_fit(res: SpectralResult, alpha: float, d: int, m: int, tolerance: float = 0.1) -> WeylReport:
    """Ratio N(lambda)/lambda^p over the top half of the spectrum; the tail is the median of its last quartile."""
    if res.k < 40:
        raise ValueError(f"Weyl fit needs at least 40 eigenvalues, got {res.k}")
    p = weyl_exponent(alpha, d)
    lam = np.asarray(res.lambdas)[res.k // 2:]
    counts = np.array([counting_function(res, x) for x in lam])
    ratios = counts / lam**p
    tail = float(np.median(ratios[-max(1, len(ratios) // 4):]))
    theory = weyl_constant(alpha, d, m)
    return WeylReport(alpha, d, m, p, lam, counts, ratios, theory, tail, abs(tail - theory) / theory, tolerance)


@dataclass
class TraceReport:
    t: float
    eigen_side: float
    kernel_side: float
    abs_gap: float
    rel_gap: float
    truncation_bound: float
    conclusive: bool
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def trace_check(res: SpectralResult, op: DiscreteOperator, t: float) -> TraceReport:
    """Heat trace from eigenvalues against h^d sum_x tr K(t,x,x) from the propagator."""
    from .evolve import kernel_diagonal

    if not t > 0:
        raise ValueError("t must be positive")
    eig_side = float(np.sum(np.exp(-t * np.asarray(res.lambdas))))
    diag = kernel_diagonal(op, t)
    ker_side = float(op.grid.cell * np.sum(np.trace(diag, axis1=1, axis2=2)))
    missing = op.size - res.k
    bound = float(missing * math.exp(-t * res.lambdas[-1])) if missing > 0 else 0.0
    gap = abs(ker_side - eig_side)
    rel = gap / abs(ker_side) if ker_side != 0 else gap
    conclusive = bound <= 0.1 * abs(ker_side)
    notes = [] if conclusive else [f"truncation bound {bound:.3g} exceeds 10% of the trace; t too small for k = {res.k}"]
    return TraceReport(t, eig_side, ker_side, gap, rel, bound, conclusive, notes)
