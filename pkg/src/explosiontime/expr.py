"""
Coefficient-function expressions
================================

A small expression language for the coefficient functions ``s(x)`` and
``b(x)`` of a diffusion.  Expressions are parsed into immutable trees which
can be evaluated (pointwise or on numpy arrays), printed back to source, and
differentiated symbolically with respect to ``x``.

Grammar (EBNF)::

    expr    = term { ("+" | "-") term } ;
    term    = unary { ("*" | "/") unary } ;
    unary   = ("-" | "+") unary | power ;
    power   = atom [ ("^" | "**") unary ] ;          (* right associative *)
    atom    = number | name | func "(" expr ")" | "(" expr ")" ;
    func    = "exp" | "log" | "sqrt" | "sin" | "cos" | "tan" | "arctan"
            | "sinh" | "cosh" | "abs" ;

``^`` binds tighter than unary minus, so ``-x^2`` means ``-(x^2)`` and
``x^-2`` means ``x^(-2)``.  Names other than ``x``, the declared parameters
and the constants ``pi`` and ``e`` are rejected.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

__all__ = [
    "ExprError",
    "ExprSyntaxError",
    "UnknownIdentifierError",
    "DomainError",
    "Node",
    "Const",
    "Var",
    "Param",
    "Unary",
    "Binary",
    "FUNCTIONS",
    "parse",
    "evaluate",
    "evaluate_array",
    "differentiate",
    "to_source",
    "depends_on_x",
    "parameters_of",
]

FUNCTIONS = ("exp", "log", "sqrt", "sin", "cos", "tan", "arctan", "sinh", "cosh", "abs")
CONSTANTS = {"pi": math.pi, "e": math.e}


class ExprError(Exception):
    """Base class for expression errors."""


class ExprSyntaxError(ExprError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} at position {position}")
        self.position = position


class UnknownIdentifierError(ExprError):
    def __init__(self, name: str, position: int):
        super().__init__(f"unknown identifier {name!r} at position {position}")
        self.name = name
        self.position = position


class DomainError(ExprError, ArithmeticError):
    """A singular sub-expression was hit during evaluation."""

    def __init__(self, node: "Node", message: str):
        super().__init__(f"{message} in {to_source(node)}")
        self.node = node


# -- AST ---------------------------------------------------------------------


class Node:
    __slots__ = ()

    def __str__(self) -> str:
        return to_source(self)

    # arithmetic sugar used by the differentiator
    def __add__(self, other: "Node") -> "Node":
        return _add(self, other)

    def __sub__(self, other: "Node") -> "Node":
        return _sub(self, other)

    def __mul__(self, other: "Node") -> "Node":
        return _mul(self, other)

    def __truediv__(self, other: "Node") -> "Node":
        return _div(self, other)

    def __neg__(self) -> "Node":
        return _neg(self)


@dataclass(frozen=True, eq=True)
class Const(Node):
    value: float


@dataclass(frozen=True, eq=True)
class Var(Node):
    pass


@dataclass(frozen=True, eq=True)
class Param(Node):
    name: str


@dataclass(frozen=True, eq=True)
class Unary(Node):
    op: str  # "neg" or one of FUNCTIONS
    arg: Node


@dataclass(frozen=True, eq=True)
class Binary(Node):
    op: str  # one of "+-*/^"
    left: Node
    right: Node


# -- tokenizer / parser ------------------------------------------------------

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>\*\*|[-+*/^()]))"
)


def _tokenize(source: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    n = len(source)
    while pos < n:
        if source[pos:].strip() == "":
            break
        m = _TOKEN.match(source, pos)
        if m is None or m.end() == pos:
            bad = pos + (len(source[pos:]) - len(source[pos:].lstrip()))
            raise ExprSyntaxError(f"unexpected character {source[bad]!r}", bad)
        kind = m.lastgroup
        start = m.start(kind)
        text = m.group(kind)
        if text == "**":
            text = "^"
        tokens.append((kind, text, start))
        pos = m.end()
    tokens.append(("end", "", len(source)))
    return tokens


class _Parser:
    def __init__(self, source: str, parameters: frozenset[str]):
        self.tokens = _tokenize(source)
        self.i = 0
        self.parameters = parameters

    def peek(self) -> tuple[str, str, int]:
        return self.tokens[self.i]

    def take(self) -> tuple[str, str, int]:
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, text: str) -> None:
        kind, t, pos = self.take()
        if t != text:
            found = "end of input" if kind == "end" else repr(t)
            raise ExprSyntaxError(f"expected {text!r}, found {found}", pos)

    def parse(self) -> Node:
        node = self.expr()
        kind, t, pos = self.peek()
        if kind != "end":
            raise ExprSyntaxError(f"unexpected token {t!r}", pos)
        return node

    def expr(self) -> Node:
        node = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            node = Binary(op, node, self.term())
        return node

    def term(self) -> Node:
        node = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            node = Binary(op, node, self.unary())
        return node

    def unary(self) -> Node:
        kind, t, _ = self.peek()
        if kind == "op" and t == "-":
            self.take()
            return Unary("neg", self.unary())
        if kind == "op" and t == "+":
            self.take()
            return self.unary()
        return self.power()

    def power(self) -> Node:
        base = self.atom()
        if self.peek()[1] == "^" and self.peek()[0] == "op":
            self.take()
            return Binary("^", base, self.unary())
        return base

    def atom(self) -> Node:
        kind, t, pos = self.take()
        if kind == "num":
            return Const(float(t))
        if kind == "name":
            if t in FUNCTIONS:
                self.expect("(")
                arg = self.expr()
                self.expect(")")
                return Unary(t, arg)
            if t == "x":
                return Var()
            if t in self.parameters:
                return Param(t)
            if t in CONSTANTS:
                return Const(CONSTANTS[t])
            raise UnknownIdentifierError(t, pos)
        if kind == "op" and t == "(":
            node = self.expr()
            self.expect(")")
            return node
        found = "end of input" if kind == "end" else repr(t)
        raise ExprSyntaxError(f"unexpected {found}", pos)


def parse(source: str, parameters=()) -> Node:
    """Parse ``source`` into an expression tree.

    Parameters
    ----------
    source : str
        Expression text, e.g. ``"kappa*sqrt(x)"``.
    parameters : iterable of str
        Names allowed besides ``x``; they must be bound at evaluation time.

    Raises
    ------
    ExprSyntaxError
        Malformed input, with the character position.
    UnknownIdentifierError
        A name that is neither ``x``, a parameter nor a known constant.
    """
    if not source or not source.strip():
        raise ExprSyntaxError("empty expression", 0)
    return _Parser(source, frozenset(parameters)).parse()


# -- evaluation --------------------------------------------------------------


def _scalar_unary(node: Unary, a: float) -> float:
    op = node.op
    try:
        if op == "neg":
            return -a
        if op == "exp":
            return math.exp(a)
        if op == "log":
            if a <= 0.0:
                raise DomainError(node, "log of nonpositive value")
            return math.log(a)
        if op == "sqrt":
            if a < 0.0:
                raise DomainError(node, "sqrt of negative value")
            return math.sqrt(a)
        if op == "sin":
            return math.sin(a)
        if op == "cos":
            return math.cos(a)
        if op == "tan":
            if math.cos(a) == 0.0:
                raise DomainError(node, "tan at a pole")
            return math.tan(a)
        if op == "arctan":
            return math.atan(a)
        if op == "sinh":
            return math.sinh(a)
        if op == "cosh":
            return math.cosh(a)
        if op == "abs":
            return abs(a)
    except (OverflowError, ValueError) as exc:
        raise DomainError(node, str(exc)) from None
    raise ValueError(f"unknown unary op {op!r}")


def _scalar_binary(node: Binary, a: float, b: float) -> float:
    op = node.op
    if op == "+":
        return a + b
    if op == "-":
        return a - b
    if op == "*":
        return a * b
    if op == "/":
        if b == 0.0:
            raise DomainError(node, "division by zero")
        return a / b
    if op == "^":
        if a == 0.0 and b < 0.0:
            raise DomainError(node, "zero to a negative power")
        if a < 0.0 and b != math.floor(b):
            raise DomainError(node, "negative base to a fractional power")
        try:
            return math.pow(a, b)
        except (OverflowError, ValueError) as exc:
            raise DomainError(node, str(exc)) from None
    raise ValueError(f"unknown binary op {op!r}")


def evaluate(ast: Node, x: float, bindings: Mapping[str, float] | None = None) -> float:
    """Evaluate ``ast`` at the point ``x``.

    Raises
    ------
    DomainError
        When a singular sub-expression is hit (log of a nonpositive number,
        division by zero, ``0^negative``, overflow, ...).  The offending node
        is available as ``exc.node``.
    KeyError
        When a parameter is not bound.
    """
    bindings = bindings or {}

    def ev(node: Node) -> float:
        if isinstance(node, Const):
            return node.value
        if isinstance(node, Var):
            return x
        if isinstance(node, Param):
            return float(bindings[node.name])
        if isinstance(node, Unary):
            return _scalar_unary(node, ev(node.arg))
        if isinstance(node, Binary):
            value = _scalar_binary(node, ev(node.left), ev(node.right))
            if not math.isfinite(value):
                raise DomainError(node, "non-finite result")
            return value
        raise TypeError(f"not an expression node: {node!r}")

    value = ev(ast)
    if not math.isfinite(value):
        raise DomainError(ast, "non-finite result")
    return float(value)


_NP_UNARY: dict[str, Callable] = {
    "neg": np.negative,
    "exp": np.exp,
    "log": lambda a: np.log(np.where(a > 0, a, np.nan)),
    "sqrt": lambda a: np.sqrt(np.where(a >= 0, a, np.nan)),
    "sin": np.sin,
    "cos": np.cos,
    "tan": np.tan,
    "arctan": np.arctan,
    "sinh": np.sinh,
    "cosh": np.cosh,
    "abs": np.abs,
}


def _np_pow(a, b):
    a, b = np.broadcast_arrays(np.asarray(a, dtype=float), np.asarray(b, dtype=float))
    bad = ((a == 0) & (b < 0)) | ((a < 0) & (b != np.floor(b)))
    out = np.power(np.where(bad, 1.0, a), b)
    return np.where(bad, np.nan, out)


_NP_BINARY: dict[str, Callable] = {
    "+": np.add,
    "-": np.subtract,
    "*": np.multiply,
    "/": lambda a, b: np.divide(a, np.where(b != 0, b, np.nan)),
    "^": _np_pow,
}


def compile_array(ast: Node, bindings: Mapping[str, float] | None = None) -> Callable:
    """Return a vectorized callable ``f(x_array) -> array``.

    Singular points (the scalar evaluator's domain errors) come back as NaN,
    so the result can be probed near singular endpoints without aborting.
    """
    bindings = dict(bindings or {})

    def build(node: Node) -> Callable:
        if isinstance(node, Const):
            v = node.value
            return lambda x: np.full(np.shape(x), v)
        if isinstance(node, Var):
            return lambda x: np.asarray(x, dtype=float)
        if isinstance(node, Param):
            v = float(bindings[node.name])
            return lambda x: np.full(np.shape(x), v)
        if isinstance(node, Unary):
            f = _NP_UNARY[node.op]
            g = build(node.arg)
            return lambda x: f(g(x))
        if isinstance(node, Binary):
            f = _NP_BINARY[node.op]
            g, h = build(node.left), build(node.right)
            return lambda x: f(g(x), h(x))
        raise TypeError(f"not an expression node: {node!r}")

    inner = build(ast)

    def fn(x):
        with np.errstate(all="ignore"):
            out = inner(x)
            return np.where(np.isfinite(out), out, np.nan)

    return fn


def evaluate_array(ast: Node, x, bindings: Mapping[str, float] | None = None) -> np.ndarray:
    """Vectorized evaluation; NaN marks singular points."""
    return compile_array(ast, bindings)(np.asarray(x, dtype=float))


# -- printing ----------------------------------------------------------------

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "neg": 3, "^": 4}


def _fmt_const(v: float) -> str:
    if v == math.pi:
        return "pi"
    text = repr(float(v))
    if text in ("inf", "-inf", "nan"):
        raise ValueError(f"cannot print non-finite constant {v}")
    return text if v >= 0 else f"({text})"


def to_source(ast: Node) -> str:
    """Print ``ast`` as text that parses back to an equivalent tree."""

    def prec(node: Node) -> int:
        if isinstance(node, Binary):
            return _PREC[node.op]
        if isinstance(node, Unary) and node.op == "neg":
            return _PREC["neg"]
        return 5

    def wrap(node: Node, min_prec: int) -> str:
        text = show(node)
        return f"({text})" if prec(node) < min_prec else text

    def show(node: Node) -> str:
        if isinstance(node, Const):
            return _fmt_const(node.value)
        if isinstance(node, Var):
            return "x"
        if isinstance(node, Param):
            return node.name
        if isinstance(node, Unary):
            if node.op == "neg":
                return "-" + wrap(node.arg, _PREC["neg"])
            return f"{node.op}({show(node.arg)})"
        if isinstance(node, Binary):
            p = _PREC[node.op]
            if node.op == "^":
                # right associative; base must be an atom or function call
                return f"{wrap(node.left, p + 1)}^{wrap(node.right, p)}"
            left = wrap(node.left, p)
            right = wrap(node.right, p + 1)
            return f"{left} {node.op} {right}"
        raise TypeError(f"not an expression node: {node!r}")

    return show(ast)


# -- differentiation -----------------------------------------------------------

ZERO = Const(0.0)
ONE = Const(1.0)
TWO = Const(2.0)


def _is_const(node: Node, value: float | None = None) -> bool:
    return isinstance(node, Const) and (value is None or node.value == value)


def _add(a: Node, b: Node) -> Node:
    if _is_const(a, 0.0):
        return b
    if _is_const(b, 0.0):
        return a
    if _is_const(a) and _is_const(b):
        return Const(a.value + b.value)
    return Binary("+", a, b)


def _sub(a: Node, b: Node) -> Node:
    if _is_const(b, 0.0):
        return a
    if _is_const(a, 0.0):
        return _neg(b)
    if _is_const(a) and _is_const(b):
        return Const(a.value - b.value)
    return Binary("-", a, b)


def _mul(a: Node, b: Node) -> Node:
    if _is_const(a, 0.0) or _is_const(b, 0.0):
        return ZERO
    if _is_const(a, 1.0):
        return b
    if _is_const(b, 1.0):
        return a
    if _is_const(a) and _is_const(b):
        return Const(a.value * b.value)
    return Binary("*", a, b)


def _div(a: Node, b: Node) -> Node:
    if _is_const(a, 0.0):
        return ZERO
    if _is_const(b, 1.0):
        return a
    return Binary("/", a, b)


def _neg(a: Node) -> Node:
    if _is_const(a):
        return Const(-a.value)
    if isinstance(a, Unary) and a.op == "neg":
        return a.arg
    return Unary("neg", a)


def _pow(a: Node, b: Node) -> Node:
    if _is_const(b, 1.0):
        return a
    if _is_const(b, 0.0):
        return ONE
    return Binary("^", a, b)


def depends_on_x(ast: Node) -> bool:
    if isinstance(ast, Var):
        return True
    if isinstance(ast, Unary):
        return depends_on_x(ast.arg)
    if isinstance(ast, Binary):
        return depends_on_x(ast.left) or depends_on_x(ast.right)
    return False


def parameters_of(ast: Node) -> set[str]:
    if isinstance(ast, Param):
        return {ast.name}
    if isinstance(ast, Unary):
        return parameters_of(ast.arg)
    if isinstance(ast, Binary):
        return parameters_of(ast.left) | parameters_of(ast.right)
    return set()


def differentiate(ast: Node) -> Node:
    """Symbolic derivative with respect to ``x``.

    The result is not simplified beyond trivial constant folding.
    """
    d = differentiate
    if isinstance(ast, (Const, Param)):
        return ZERO
    if isinstance(ast, Var):
        return ONE
    if isinstance(ast, Unary):
        u = ast.arg
        du = d(u)
        if _is_const(du, 0.0):
            return ZERO
        op = ast.op
        if op == "neg":
            return _neg(du)
        if op == "exp":
            return ast * du
        if op == "log":
            return du / u
        if op == "sqrt":
            return du / (TWO * ast)
        if op == "sin":
            return Unary("cos", u) * du
        if op == "cos":
            return _neg(Unary("sin", u) * du)
        if op == "tan":
            return du / _pow(Unary("cos", u), TWO)
        if op == "arctan":
            return du / (ONE + _pow(u, TWO))
        if op == "sinh":
            return Unary("cosh", u) * du
        if op == "cosh":
            return Unary("sinh", u) * du
        if op == "abs":
            return du * (u / ast)
        raise ValueError(f"unknown unary op {op!r}")
    if isinstance(ast, Binary):
        u, v = ast.left, ast.right
        du, dv = d(u), d(v)
        op = ast.op
        if op == "+":
            return du + dv
        if op == "-":
            return du - dv
        if op == "*":
            return du * v + u * dv
        if op == "/":
            if _is_const(dv, 0.0):
                return du / v
            return (du * v - u * dv) / _pow(v, TWO)
        if op == "^":
            if not depends_on_x(v):
                # power rule: v u^(v-1) u'
                return v * _pow(u, v - ONE) * du
            # u^v (v' log u + v u'/u)
            return ast * (dv * Unary("log", u) + v * du / u)
        raise ValueError(f"unknown binary op {op!r}")
    raise TypeError(f"not an expression node: {ast!r}")
