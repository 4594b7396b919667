"""Box truncation and finite-difference assembly of the system operator.

The stored matrix approximates ``-div(Q grad u) - Vt u`` on the interior nodes
of ``[-R, R]^d`` with homogeneous Dirichlet data. Unknowns are ordered
component-major: entry ``c * n + k`` is component ``c`` at interior node ``k``
(nodes in C order, axis 0 slowest).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .expr import Const, Mul, PotentialExpr
from .model import DiffusionField, MatrixField, SystemSpec


@dataclass(frozen=True)
class GridSpec:
    d: int
    R: float
    N: int

    def __post_init__(self):
        if self.N < 3 or self.N % 2 == 0:
            raise ValueError(f"N must be odd and >= 3 so that 0 is a node, got {self.N}")
        if not self.R > 0:
            raise ValueError(f"R must be positive, got {self.R}")
        if self.d < 1:
            raise ValueError("d must be >= 1")

    @property
    def h(self) -> float:
        return 2.0 * self.R / (self.N - 1)

    @property
    def cell(self) -> float:
        """Volume element h^d."""
        return self.h**self.d

    @property
    def nodes(self) -> np.ndarray:
        return -self.R + self.h * np.arange(self.N)

    @property
    def n_total(self) -> int:
        return self.N**self.d

    @property
    def n_interior(self) -> int:
        return (self.N - 2) ** self.d

    @cached_property
    def interior_points(self) -> np.ndarray:
        axes = [self.nodes[1:-1]] * self.d
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in mesh], axis=1)

    def half_points(self, axis: int) -> np.ndarray:
        """Face midpoints along ``axis`` (N-1 of them) times interior nodes on the other axes."""
        halves = -self.R + self.h * (np.arange(self.N - 1) + 0.5)
        axes = [halves if a == axis else self.nodes[1:-1] for a in range(self.d)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in mesh], axis=1)

    def node_index(self, point) -> int:
        """Index of the interior node nearest to ``point``."""
        p = np.atleast_1d(np.asarray(point, dtype=float))
        k = np.rint((p + self.R) / self.h).astype(int) - 1
        k = np.clip(k, 0, self.N - 3)
        return int(np.ravel_multi_index(tuple(k), (self.N - 2,) * self.d))

    def embed(self, values: np.ndarray) -> np.ndarray:
        """Interior values of shape ``(..., n_interior)`` placed on the full node grid."""
        values = np.asarray(values)
        lead = values.shape[:-1]
        inner = values.reshape(lead + (self.N - 2,) * self.d)
        out = np.zeros(lead + (self.N,) * self.d, dtype=values.dtype)
        out[(Ellipsis,) + (slice(1, -1),) * self.d] = inner
        return out


def build_grid(d: int, R: float, N: int) -> GridSpec:
    return GridSpec(int(d), float(R), int(N))


# ---------------------------------------------------------------------------
# 1-D building blocks on the interior nodes


def _diff_1d(N: int, h: float) -> sp.csr_matrix:
    """Interior nodes -> faces: (u_{k+1} - u_k) / h with zero boundary values."""
    n = N - 2
    rows = np.concatenate([np.arange(n), np.arange(1, n + 1)])
    cols = np.concatenate([np.arange(n), np.arange(n)])
    vals = np.concatenate([np.full(n, 1.0 / h), np.full(n, -1.0 / h)])
    return sp.csr_matrix((vals, (rows, cols)), shape=(N - 1, n))


def _avg_1d(N: int) -> sp.csr_matrix:
    n = N - 2
    rows = np.concatenate([np.arange(n), np.arange(1, n + 1)])
    cols = np.concatenate([np.arange(n), np.arange(n)])
    return sp.csr_matrix((np.full(2 * n, 0.5), (rows, cols)), shape=(N - 1, n))


def _central_1d(N: int, h: float) -> sp.csr_matrix:
    n = N - 2
    off = np.full(n - 1, 1.0 / (2 * h))
    return sp.diags([off, -off], [1, -1], shape=(n, n), format="csr")


def _along(op: sp.spmatrix, axis: int, d: int, n: int) -> sp.csr_matrix:
    """Lift a 1-D operator to act along ``axis`` of a d-dimensional interior grid."""
    out = None
    for a in range(d):
        factor = op if a == axis else sp.identity(n, format="csr")
        out = factor if out is None else sp.kron(out, factor, format="csr")
    return out.tocsr()


def diffusion_matrix(Q: DiffusionField, grid: GridSpec) -> sp.csr_matrix:
    """Scalar discretisation of ``-div(Q grad u)`` with face-sampled coefficients."""
    d, N, h = grid.d, grid.N, grid.h
    n1 = N - 2
    D = [_along(_diff_1d(N, h), j, d, n1) for j in range(d)]
    A = sp.csr_matrix((grid.n_interior, grid.n_interior))
    for j in range(d):
        q = Q.entry(j, j).evaluate(grid.half_points(j))
        A = A + D[j].T @ sp.diags(q) @ D[j]
    if d > 1:
        M = [_along(_avg_1d(N), j, d, n1) for j in range(d)]
        C = [_along(_central_1d(N, h), l, d, n1) for l in range(d)]
        for j in range(d):
            for l in range(j + 1, d):
                q = Q.entry(j, l).evaluate(grid.half_points(j))
                if not np.any(q):
                    continue
                B = D[j].T @ sp.diags(q) @ M[j] @ C[l]
                A = A + B + B.T
    return A.tocsr()


def potential_matrix(W: MatrixField, grid: GridSpec) -> sp.csr_matrix:
    """Block matrix of pointwise multiplication by ``-W(x)``."""
    pts = grid.interior_points
    Wx = W.evaluate(pts)
    m = W.m
    blocks = [[sp.diags(-Wx[:, i, j]) if np.any(Wx[:, i, j]) else None for j in range(m)] for i in range(m)]
    n = grid.n_interior
    for i in range(m):
        if blocks[i][i] is None:
            blocks[i][i] = sp.csr_matrix((n, n))
    return sp.bmat(blocks, format="csr")


@dataclass
class DiscreteOperator:
    """Sparse surrogate of ``-div(Q grad) - Vt`` on a truncated grid."""

    A: sp.csr_matrix
    grid: GridSpec
    spec: SystemSpec | None
    m: int
    symmetric: bool
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def size(self) -> int:
        return self.A.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.grid.n_interior

    def dense(self) -> np.ndarray:
        if "dense" not in self._cache:
            self._cache["dense"] = self.A.toarray()
        return self._cache["dense"]

    def delta(self, node: int, comp: int) -> np.ndarray:
        """Discrete point source at (node, e_comp) normalised to unit mass."""
        f = np.zeros(self.size)
        f[comp * self.n_nodes + node] = 1.0 / self.grid.cell
        return f

    def components(self, vec: np.ndarray) -> np.ndarray:
        return np.asarray(vec).reshape(self.m, self.n_nodes)

    def transpose(self) -> "DiscreteOperator":
        if self.symmetric:
            return self
        return DiscreteOperator(self.A.T.tocsr(), self.grid, self.spec, self.m, False)

    def dump(self, path: str | Path) -> Path:
        """Write the matrix in coordinate text format: one ``row col value`` per line."""
        coo = self.A.tocoo()
        path = Path(path)
        with path.open("w") as fh:
            fh.write(f"% {coo.shape[0]} {coo.shape[1]} {coo.nnz}\n")
            for r, c, v in zip(coo.row, coo.col, coo.data):
                fh.write(f"{r} {c} {v:.17g}\n")
        return path


def _is_symmetric(A: sp.csr_matrix) -> bool:
    scale = abs(A).max() if A.nnz else 0.0
    diff = abs(A - A.T)
    return bool(diff.nnz == 0 or diff.max() <= 1e-12 * scale)


def assemble(spec: SystemSpec, grid: GridSpec, potential: MatrixField | None = None) -> DiscreteOperator:
    """Discretise ``-div(Q grad u) - W u`` with ``W = Vt`` unless another ``potential`` is given."""
    if spec.d != grid.d:
        raise ValueError(f"spec dimension {spec.d} does not match grid dimension {grid.d}")
    W = spec.Vt if potential is None else potential
    Dq = diffusion_matrix(spec.Q, grid)
    A = sp.kron(sp.identity(W.m, format="csr"), Dq, format="csr") + potential_matrix(W, grid)
    A = A.tocsr()
    A.eliminate_zeros()
    return DiscreteOperator(A, grid, spec, W.m, _is_symmetric(A))


def assemble_parts(spec: SystemSpec, grid: GridSpec) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """The diffusion part ``kron(I_m, -div(Q grad))`` and the potential part ``-Vt`` separately."""
    Dq = diffusion_matrix(spec.Q, grid)
    return sp.kron(sp.identity(spec.m), Dq, format="csr"), potential_matrix(spec.Vt, grid)


def assemble_scalar(Q: DiffusionField, w: PotentialExpr, grid: GridSpec) -> DiscreteOperator:
    """Scalar operator ``-div(Q grad u) + w u``."""
    W = MatrixField(((PotentialExpr(Mul(Const(-1.0), w.root), w.dim),),), w.dim)
    Dq = diffusion_matrix(Q, grid)
    A = (Dq + potential_matrix(W, grid)).tocsr()
    return DiscreteOperator(A, grid, None, 1, _is_symmetric(A))


def discrete_norm(f: np.ndarray, p: float, grid: GridSpec, m: int = 1) -> float:
    """(h^d sum_x |f(x)|^p)^(1/p) with |.| the euclidean norm over the m components."""
    if p < 1:
        raise ValueError(f"p must be >= 1, got {p}")
    vals = np.asarray(f, dtype=float).reshape(m, -1)
    pointwise = np.sqrt(np.sum(vals * vals, axis=0))
    if np.isinf(p):
        return float(np.max(pointwise))
    return float((grid.cell * np.sum(pointwise**p)) ** (1.0 / p))
