"""Scalar field expressions over R^d.

A small closed grammar covering the potentials this package works with::

    expr   := term (('+'|'-') term)*
    term   := factor ('*' factor)*
    factor := '-' factor | atom ('^' number)?
    atom   := number | 'x' index | '|x|' | 'log1p|x|' | 'exp|x|' | '(' expr ')'

Expressions evaluate vectorised over an ``(n, d)`` array of points and carry
an exact symbolic gradient.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = [
    "ExprSyntaxError",
    "Node",
    "Const",
    "Coord",
    "Norm",
    "Add",
    "Sub",
    "Mul",
    "Neg",
    "Pow",
    "Log1pNorm",
    "ExpNorm",
    "UnitCoord",
    "Recip1pNorm",
    "PotentialExpr",
    "parse",
    "grad",
]


class ExprSyntaxError(ValueError):
    """Raised for malformed expression text; ``offset`` points into the input."""

    def __init__(self, message: str, offset: int, text: str = ""):
        self.offset = offset
        self.text = text
        self.reason = message
        super().__init__(f"{message} at offset {offset}")

    def diagnostic(self) -> str:
        return f"{self.text}\n{' ' * self.offset}^ {self.reason} at offset {self.offset}"


# ---------------------------------------------------------------------------
# nodes


class Node:
    __slots__ = ()
    # printing precedence: 1 sum, 2 product, 3 unary minus, 4 power, 5 atom
    prec = 5

    def eval(self, x: np.ndarray, r: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def diff(self, i: int) -> "Node":
        raise NotImplementedError

    def children(self) -> tuple["Node", ...]:
        return ()

    def walk(self):
        yield self
        for c in self.children():
            yield from c.walk()

    def nonneg(self) -> bool:
        """Conservative test that the node is nonnegative everywhere."""
        return False

    def fmt(self) -> str:
        raise NotImplementedError

    def _wrap(self, child: "Node", min_prec: int) -> str:
        s = child.fmt()
        return f"({s})" if child.prec < min_prec else s


@dataclass(frozen=True, slots=True)
class Const(Node):
    value: float
    prec = 5

    def eval(self, x, r):
        return np.full(r.shape, float(self.value))

    def diff(self, i):
        return ZERO

    def nonneg(self):
        return self.value >= 0

    def fmt(self):
        v = float(self.value)
        if v < 0:
            return f"({_fmt_num(v)})"
        return _fmt_num(v)


@dataclass(frozen=True, slots=True)
class Coord(Node):
    index: int

    def eval(self, x, r):
        return x[:, self.index].astype(float)

    def diff(self, i):
        return ONE if i == self.index else ZERO

    def fmt(self):
        return f"x{self.index}"


@dataclass(frozen=True, slots=True)
class Norm(Node):
    def eval(self, x, r):
        return r.copy()

    def diff(self, i):
        return UnitCoord(i)

    def nonneg(self):
        return True

    def fmt(self):
        return "|x|"


@dataclass(frozen=True, slots=True)
class Log1pNorm(Node):
    def eval(self, x, r):
        return np.log1p(r)

    def diff(self, i):
        return Mul(Recip1pNorm(), UnitCoord(i))

    def nonneg(self):
        return True

    def fmt(self):
        return "log1p|x|"


@dataclass(frozen=True, slots=True)
class ExpNorm(Node):
    def eval(self, x, r):
        with np.errstate(over="ignore"):
            return np.exp(r)

    def diff(self, i):
        return Mul(ExpNorm(), UnitCoord(i))

    def nonneg(self):
        return True

    def fmt(self):
        return "exp|x|"


@dataclass(frozen=True, slots=True)
class UnitCoord(Node):
    """x_i/|x|, defined as 0 at the origin. Only produced by differentiation."""

    index: int

    def eval(self, x, r):
        out = np.zeros(r.shape)
        nz = r > 0
        out[nz] = x[nz, self.index] / r[nz]
        return out

    def diff(self, i):
        raise NotImplementedError("second derivatives are not supported")

    def fmt(self):
        return f"unit{self.index}"


@dataclass(frozen=True, slots=True)
class Recip1pNorm(Node):
    """1/(1+|x|). Only produced by differentiation."""

    def eval(self, x, r):
        return 1.0 / (1.0 + r)

    def diff(self, i):
        raise NotImplementedError("second derivatives are not supported")

    def nonneg(self):
        return True

    def fmt(self):
        return "recip1p|x|"


@dataclass(frozen=True, slots=True)
class Add(Node):
    left: Node
    right: Node
    prec = 1

    def eval(self, x, r):
        return self.left.eval(x, r) + self.right.eval(x, r)

    def diff(self, i):
        return _add(self.left.diff(i), self.right.diff(i))

    def children(self):
        return (self.left, self.right)

    def nonneg(self):
        return self.left.nonneg() and self.right.nonneg()

    def fmt(self):
        return f"{self._wrap(self.left, 1)}+{self._wrap(self.right, 2)}"


@dataclass(frozen=True, slots=True)
class Sub(Node):
    left: Node
    right: Node
    prec = 1

    def eval(self, x, r):
        return self.left.eval(x, r) - self.right.eval(x, r)

    def diff(self, i):
        return _sub(self.left.diff(i), self.right.diff(i))

    def children(self):
        return (self.left, self.right)

    def fmt(self):
        return f"{self._wrap(self.left, 1)}-{self._wrap(self.right, 2)}"


@dataclass(frozen=True, slots=True)
class Mul(Node):
    left: Node
    right: Node
    prec = 2

    def eval(self, x, r):
        a = self.left.eval(x, r)
        b = self.right.eval(x, r)
        with np.errstate(invalid="ignore", over="ignore"):
            return a * b

    def diff(self, i):
        return _add(_mul(self.left.diff(i), self.right), _mul(self.left, self.right.diff(i)))

    def children(self):
        return (self.left, self.right)

    def nonneg(self):
        return self.left.nonneg() and self.right.nonneg()

    def fmt(self):
        return f"{self._wrap(self.left, 2)}*{self._wrap(self.right, 3)}"


@dataclass(frozen=True, slots=True)
class Neg(Node):
    arg: Node
    prec = 3

    def eval(self, x, r):
        return -self.arg.eval(x, r)

    def diff(self, i):
        d = self.arg.diff(i)
        return ZERO if d == ZERO else Neg(d)

    def children(self):
        return (self.arg,)

    def fmt(self):
        return f"-{self._wrap(self.arg, 3)}"


@dataclass(frozen=True, slots=True)
class Pow(Node):
    base: Node
    exponent: float
    prec = 4

    def eval(self, x, r):
        b = self.base.eval(x, r)
        p = self.exponent
        if p == 0:
            return np.ones(r.shape)
        with np.errstate(over="ignore", invalid="ignore"):
            return np.power(b, p)

    def diff(self, i):
        p = self.exponent
        if p == 0:
            return ZERO
        db = self.base.diff(i)
        if db == ZERO:
            return ZERO
        inner = ONE if p == 1 else self.base if p == 2 else Pow(self.base, p - 1)
        return _mul(_mul(Const(p), inner), db)

    def children(self):
        return (self.base,)

    def nonneg(self):
        p = self.exponent
        return p == 0 or self.base.nonneg() or (float(p).is_integer() and int(p) % 2 == 0)

    def fmt(self):
        return f"{self._wrap(self.base, 5)}^{_fmt_num(self.exponent)}"


ZERO = Const(0.0)
ONE = Const(1.0)


def _is_const(n: Node, v: float) -> bool:
    return isinstance(n, Const) and n.value == v


def _add(a: Node, b: Node) -> Node:
    if _is_const(a, 0):
        return b
    if _is_const(b, 0):
        return a
    return Add(a, b)


def _sub(a: Node, b: Node) -> Node:
    if _is_const(b, 0):
        return a
    if _is_const(a, 0):
        return Neg(b)
    return Sub(a, b)


def _mul(a: Node, b: Node) -> Node:
    if _is_const(a, 0) or _is_const(b, 0):
        return ZERO
    if _is_const(a, 1):
        return b
    if _is_const(b, 1):
        return a
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value * b.value)
    return Mul(a, b)


def _fmt_num(v: float) -> str:
    v = float(v)
    if v.is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(v)


# ---------------------------------------------------------------------------
# public expression type


@dataclass(frozen=True)
class PotentialExpr:
    """Immutable scalar field on R^dim."""

    root: Node
    dim: int

    @property
    def origin_singular(self) -> bool:
        """True when the gradient is only defined at 0 by the zero-vector convention."""
        return _singular(self.root)

    def __call__(self, x) -> float | np.ndarray:
        pts = np.asarray(x, dtype=float)
        if pts.ndim <= 1:
            return float(self.evaluate(pts.reshape(1, -1))[0])
        return self.evaluate(pts)

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        """Values at an ``(n, dim)`` array of points."""
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            pts = pts.reshape(-1, self.dim) if self.dim == 1 else pts.reshape(1, -1)
        if pts.shape[1] != self.dim:
            raise ValueError(f"points have dimension {pts.shape[1]}, expression has {self.dim}")
        r = np.sqrt(np.sum(pts * pts, axis=1))
        return self.root.eval(pts, r)

    def grad(self) -> tuple["PotentialExpr", ...]:
        return grad(self)

    def is_constant(self) -> bool:
        return not any(isinstance(n, (Coord, Norm, Log1pNorm, ExpNorm, UnitCoord, Recip1pNorm))
                       for n in self.root.walk())

    def __str__(self) -> str:
        return self.root.fmt()


def _singular(n: Node) -> bool:
    if isinstance(n, (Norm, Log1pNorm, ExpNorm, UnitCoord)):
        return True
    if isinstance(n, Pow) and isinstance(n.base, Norm):
        return 0 < n.exponent < 2
    return any(_singular(c) for c in n.children())


def grad(e: PotentialExpr) -> tuple[PotentialExpr, ...]:
    """Symbolic gradient, one expression per axis."""
    return tuple(PotentialExpr(e.root.diff(i), e.dim) for i in range(e.dim))


def evaluate_grad(e: PotentialExpr, points: np.ndarray, g: Sequence[PotentialExpr] | None = None) -> np.ndarray:
    """Gradient values as an ``(n, dim)`` array."""
    g = grad(e) if g is None else g
    return np.stack([gi.evaluate(points) for gi in g], axis=1)


# ---------------------------------------------------------------------------
# parser

_NUM = re.compile(r"(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?")


class _Parser:
    def __init__(self, text: str, dim: int):
        self.text = text
        self.dim = dim
        self.pos = 0

    def error(self, msg: str, pos: int | None = None):
        raise ExprSyntaxError(msg, self.pos if pos is None else pos, self.text)

    def skip(self):
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1

    def peek(self) -> str:
        self.skip()
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def expect_literal(self, lit: str):
        """Consume ``lit`` exactly, reporting the first mismatching offset."""
        for k, ch in enumerate(lit):
            p = self.pos + k
            if p >= len(self.text) or self.text[p] != ch:
                self.error(f"expected {lit!r}", p)
        self.pos += len(lit)

    def number(self) -> float:
        self.skip()
        m = _NUM.match(self.text, self.pos)
        if not m:
            self.error("expected number")
        self.pos = m.end()
        return float(m.group(0))

    def parse(self) -> Node:
        if not self.text.strip():
            self.error("empty expression", 0)
        node = self.expr()
        self.skip()
        if self.pos != len(self.text):
            self.error(f"unexpected {self.text[self.pos]!r}")
        return node

    def expr(self) -> Node:
        node = self.term()
        while self.peek() in ("+", "-"):
            op = self.text[self.pos]
            self.pos += 1
            rhs = self.term()
            node = Add(node, rhs) if op == "+" else Sub(node, rhs)
        return node

    def term(self) -> Node:
        node = self.factor()
        while self.peek() == "*":
            self.pos += 1
            node = Mul(node, self.factor())
        return node

    def factor(self) -> Node:
        if self.peek() == "-":
            self.pos += 1
            return Neg(self.factor())
        start = self.pos
        base = self.atom()
        if self.peek() == "^":
            self.pos += 1
            self.skip()
            exp_pos = self.pos
            if self.peek() == "-":
                self.error("exponent must be nonnegative", exp_pos)
            p = self.number()
            return self._make_pow(base, p, exp_pos, start)
        return base

    def _make_pow(self, base: Node, p: float, exp_pos: int, start: int) -> Node:
        if 0 < p < 1:
            self.error("exponents in (0, 1) are not supported", exp_pos)
        if isinstance(base, Norm) and p != 0 and p < 1:
            self.error("|x| may only be raised to powers >= 1", exp_pos)
        if not float(p).is_integer() and not base.nonneg():
            self.error("non-integer exponent needs a nonnegative base", start)
        return Pow(base, p)

    def atom(self) -> Node:
        ch = self.peek()
        if not ch:
            self.error("unexpected end of input")
        if ch.isdigit() or ch == ".":
            return Const(self.number())
        if ch == "(":
            self.pos += 1
            node = self.expr()
            if self.peek() != ")":
                self.error("expected ')'")
            self.pos += 1
            return node
        if ch == "|":
            self.expect_literal("|x|")
            return Norm()
        if self.text.startswith("log1p", self.pos):
            self.pos += len("log1p")
            self.expect_literal("|x|")
            return Log1pNorm()
        if self.text.startswith("exp", self.pos):
            self.pos += len("exp")
            self.expect_literal("|x|")
            return ExpNorm()
        if ch == "x":
            at = self.pos
            self.pos += 1
            m = re.compile(r"\d+").match(self.text, self.pos)
            if m is None:
                if self.dim == 1:
                    return Coord(0)
                self.error("coordinate needs an index (x0, x1, ...)", self.pos)
            self.pos = m.end()
            idx = int(m.group(0))
            if idx >= self.dim:
                self.error(f"coordinate index {idx} out of range for dim {self.dim}", at)
            return Coord(idx)
        m = re.compile(r"[A-Za-z_]\w*").match(self.text, self.pos)
        if m:
            self.error(f"unknown symbol {m.group(0)!r}")
        self.error(f"unexpected {ch!r}")


def parse(text: str, dim: int) -> PotentialExpr:
    """Parse ``text`` into a :class:`PotentialExpr` on R^dim.

    Raises :class:`ExprSyntaxError` with the offending offset.
    """
    if dim < 1:
        raise ValueError("dim must be >= 1")
    if not isinstance(text, str):
        text = _fmt_num(text) if isinstance(text, (int, float)) else str(text)
    return PotentialExpr(_Parser(text, dim).parse(), dim)


def const(value: float, dim: int) -> PotentialExpr:
    return PotentialExpr(Const(float(value)), dim)


def tree(e: PotentialExpr | Node, indent: str = "  ") -> str:
    """Indented dump of the syntax tree, one node per line."""
    root = e.root if isinstance(e, PotentialExpr) else e
    lines = []

    def visit(n: Node, depth: int):
        label = type(n).__name__
        if isinstance(n, Const):
            label += f" {_fmt_num(float(n.value))}"
        elif isinstance(n, (Coord, UnitCoord)):
            label += f" {n.index}"
        elif isinstance(n, Pow):
            label += f" ^{_fmt_num(float(n.exponent))}"
        lines.append(indent * depth + label)
        for c in n.children():
            visit(c, depth + 1)

    visit(root, 0)
    return "\n".join(lines)
