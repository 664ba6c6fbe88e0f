"""Immutable expression trees with exact symbolic differentiation.

Expressions are hash-consed: structurally identical subtrees are the same
object, so derivative trees share their common parts and evaluation runs
over a DAG rather than a tree. Evaluation works on Python scalars and on
numpy arrays, in real or complex mode.

Grammar accepted by :func:`parse`::

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := ('-' | '+') unary | power
    power  := atom ('^' unary)?
    atom   := number | name | func '(' expr ')' | '(' expr ')'

``^`` binds tighter than unary minus (``-x^2`` is ``-(x^2)``), exponents must
fold to rational constants, and implicit multiplication is rejected.
"""

from __future__ import annotations

import math
import re
import weakref
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Expr",
    "ExprError",
    "ParseError",
    "EvaluationError",
    "DomainError",
    "const",
    "var",
    "imag_unit",
    "func",
    "parse",
    "diff",
    "substitute",
    "evaluate",
    "compile_exprs",
    "FUNCTIONS",
    "KNOWN_ATOMS",
]

FUNCTIONS = ("exp", "log", "sin", "cos", "sqrt")
NAMED_CONSTANTS = {"pi": math.pi, "e": math.e}
KNOWN_ATOMS = ("x", "y", "u", "v")


class ExprError(Exception):
    """Base class for expression errors."""


class ParseError(ExprError):
    def __init__(self, message: str, text: str, pos: int):
        self.text = text
        self.pos = pos
        pointer = text + "\n" + " " * pos + "^"
        super().__init__(f"{message} at position {pos}\n{pointer}")


class EvaluationError(ExprError, ArithmeticError):
    """Raised when evaluation faults (unbound variable, complex value in real mode)."""


class DomainError(EvaluationError, ValueError):
    """log/sqrt/fractional power outside the real domain."""


class _ZeroDivision(EvaluationError, ZeroDivisionError):
    pass


_INTERN: "weakref.WeakValueDictionary[tuple, Expr]" = weakref.WeakValueDictionary()


class Expr:
    """A node of an expression DAG.

    ``op`` is one of ``const``, ``var``, ``add``, ``sub``, ``mul``, ``div``,
    ``pow`` or a function name from :data:`FUNCTIONS`. ``data`` holds the
    constant value (a :class:`~fractions.Fraction` or a literal name ``pi``,
    ``e``, ``i``), the variable name, or the rational exponent of ``pow``.

    Build nodes through the module constructors or the overloaded operators;
    never instantiate directly.
    """

    __slots__ = ("op", "args", "data", "_hash", "_dcache", "__weakref__")

    op: str
    args: tuple["Expr", ...]
    data: object

    def __new__(cls, op: str, args: tuple["Expr", ...] = (), data: object = None):
        key = (op, tuple(id(a) for a in args), data if op != "const" else (type(data).__name__, data))
        node = _INTERN.get(key)
        if node is not None:
            return node
        node = object.__new__(cls)
        object.__setattr__(node, "op", op)
        object.__setattr__(node, "args", args)
        object.__setattr__(node, "data", data)
        object.__setattr__(node, "_hash", hash((op, args, key[2])))
        object.__setattr__(node, "_dcache", {})
        _INTERN[key] = node
        return node

    def __setattr__(self, name, value):
        raise AttributeError("Expr is immutable")

    def __hash__(self) -> int:
        return self._hash

    def __eq__(self, other) -> bool:  # identity thanks to hash-consing
        return self is other

    def __reduce__(self):
        return (_rebuild, (str(self), tuple(sorted(self.free_vars()))))

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return mul(const(-1), self)

    def __pos__(self):
        return self

    def __pow__(self, exponent):
        return power(self, exponent)

    # -- inspection -----------------------------------------------------
    @property
    def is_const(self) -> bool:
        return self.op == "const"

    @property
    def is_zero(self) -> bool:
        return self.op == "const" and self.data == 0

    @property
    def is_one(self) -> bool:
        return self.op == "const" and self.data == 1

    def free_vars(self) -> frozenset[str]:
        found = set()
        for node in _topo(self):
            if node.op == "var":
                found.add(node.data)
        return frozenset(found)

    def size(self) -> int:
        """Number of distinct nodes in the DAG."""
        return len(_topo(self))

    def __repr__(self) -> str:
        return f"Expr({self})"

    def __str__(self) -> str:
        return _to_text(self)


def _rebuild(text, variables):
    return parse(text, variables or KNOWN_ATOMS)


def _lift(value) -> Expr:
    if isinstance(value, Expr):
        return value
    if isinstance(value, (int, Fraction)):
        return const(value)
    if isinstance(value, float):
        return const(Fraction(value))
    raise TypeError(f"cannot use {type(value).__name__} in an expression")


# ---------------------------------------------------------------------------
# constructors with light constant folding
# ---------------------------------------------------------------------------

def const(value) -> Expr:
    """Exact rational constant, or a named literal ``'pi'``, ``'e'``, ``'i'``."""
    if isinstance(value, str):
        if value not in NAMED_CONSTANTS and value != "i":
            raise ExprError(f"unknown named constant {value!r}")
        return Expr("const", (), value)
    if isinstance(value, bool):
        value = int(value)
    if isinstance(value, float):
        value = Fraction(value)
    return Expr("const", (), Fraction(value))


def imag_unit() -> Expr:
    return const("i")


def var(name: str) -> Expr:
    return Expr("var", (), name)


def _rational(e: Expr):
    if e.op == "const" and isinstance(e.data, Fraction):
        return e.data
    return None


def add(a: Expr, b: Expr) -> Expr:
    ra, rb = _rational(a), _rational(b)
    if ra is not None and rb is not None:
        return const(ra + rb)
    if ra == 0:
        return b
    if rb == 0:
        return a
    return Expr("add", (a, b))


def sub(a: Expr, b: Expr) -> Expr:
    ra, rb = _rational(a), _rational(b)
    if ra is not None and rb is not None:
        return const(ra - rb)
    if rb == 0:
        return a
    if a is b:
        return const(0)
    if ra == 0:
        return mul(const(-1), b)
    return Expr("sub", (a, b))


def mul(a: Expr, b: Expr) -> Expr:
    ra, rb = _rational(a), _rational(b)
    if ra is not None and rb is not None:
        return const(ra * rb)
    if ra == 0 or rb == 0:
        return const(0)
    if ra == 1:
        return b
    if rb == 1:
        return a
    if rb is not None:
        a, b = b, a
        ra = rb
    if ra is not None and b.op == "mul" and _rational(b.args[0]) is not None:
        return mul(const(ra * b.args[0].data), b.args[1])
    return Expr("mul", (a, b))


def div(a: Expr, b: Expr) -> Expr:
    ra, rb = _rational(a), _rational(b)
    if rb == 0:
        raise _ZeroDivision("division by the constant zero")
    if ra is not None and rb is not None:
        return const(ra / rb)
    if ra == 0:
        return const(0)
    if rb == 1:
        return a
    if a is b:
        return const(1)
    return Expr("div", (a, b))


def power(base: Expr, exponent) -> Expr:
    if isinstance(exponent, Expr):
        k = _rational(exponent)
        if k is None:
            raise ExprError("exponents must be rational constants")
    else:
        k = Fraction(exponent)
    if k == 0:
        return const(1)
    if k == 1:
        return base
    rb = _rational(base)
    if rb is not None and k.denominator == 1:
        if rb == 0 and k < 0:
            raise _ZeroDivision("zero raised to a negative power")
        return const(rb ** int(k))
    if base.op == "pow":
        inner = base.data
        # (a^m)^n = a^(mn) is only safe when m is an odd-free integer power
        if inner.denominator == 1 and k.denominator == 1:
            return power(base.args[0], inner * k)
    return Expr("pow", (base,), k)


def func(name: str, arg: Expr) -> Expr:
    if name not in FUNCTIONS:
        raise ExprError(f"unknown function {name!r}")
    if arg.is_zero:
        if name in ("exp", "cos"):
            return const(1)
        if name in ("sin", "sqrt"):
            return const(0)
    if name == "exp" and arg.op == "log":
        return arg.args[0]
    return Expr(name, (arg,))


# ---------------------------------------------------------------------------
# traversal
# ---------------------------------------------------------------------------

def _topo(root: Expr) -> list[Expr]:
    """Children-first ordering of the distinct nodes reachable from ``root``."""
    order: list[Expr] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for child in reversed(node.args):
            if id(child) not in seen:
                stack.append((child, False))
    return order


def _topo_many(roots: Iterable[Expr]) -> list[Expr]:
    order: list[Expr] = []
    seen: set[int] = set()
    for root in roots:
        for node in _topo(root):
            if id(node) not in seen:
                seen.add(id(node))
                order.append(node)
    return order


# ---------------------------------------------------------------------------
# printing
# ---------------------------------------------------------------------------

_PREC = {"add": 1, "sub": 1, "mul": 2, "div": 2, "pow": 4}


def _const_text(value) -> str:
    if isinstance(value, str):
        return value
    if value.denominator == 1:
        text = str(value.numerator)
    else:
        text = f"{value.numerator}/{value.denominator}"
    if value < 0 or value.denominator != 1:
        text = f"({text})"
    return text


def _to_text(root: Expr) -> str:
    texts: dict[int, tuple[str, int]] = {}
    for node in _topo(root):
        if node.op == "const":
            if node.data == "i":
                texts[id(node)] = ("i", 5)
            else:
                texts[id(node)] = (_const_text(node.data), 5)
        elif node.op == "var":
            texts[id(node)] = (node.data, 5)
        elif node.op in FUNCTIONS:
            texts[id(node)] = (f"{node.op}({texts[id(node.args[0])][0]})", 5)
        elif node.op == "pow":
            base, prec = texts[id(node.args[0])]
            if prec <= 4:
                base = f"({base})"
            texts[id(node)] = (f"{base}^{_const_text(node.data)}", 4)
        else:
            prec = _PREC[node.op]
            lt, lp = texts[id(node.args[0])]
            rt, rp = texts[id(node.args[1])]
            if lp < prec:
                lt = f"({lt})"
            if rp <= prec:
                rt = f"({rt})"
            sym = {"add": "+", "sub": "-", "mul": "*", "div": "/"}[node.op]
            texts[id(node)] = (f"{lt}{sym}{rt}", prec)
    return texts[id(root)][0]


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

_TOKEN = re.compile(r"\s*(?:(\d+\.\d*|\.\d+|\d+)|([A-Za-z_]\w*)|(\S))")


def _tokenize(text: str):
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:  # only trailing whitespace is left
            break
        if m.group(1):
            tokens.append(("num", m.group(1), m.start(1)))
        elif m.group(2):
            tokens.append(("name", m.group(2), m.start(2)))
        elif m.group(3):
            ch = m.group(3)
            if ch not in "+-*/^()":
                raise ParseError(f"unexpected character {ch!r}", text, m.start(3))
            tokens.append(("op", ch, m.start(3)))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str, variables: Sequence[str]):
        self.text = text
        self.variables = tuple(variables)
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def fail(self, message, tok=None):
        tok = tok or self.peek()
        raise ParseError(message, self.text, tok[2])

    def expect(self, value):
        tok = self.take()
        if tok[1] != value or tok[0] == "num":
            self.fail(f"expected {value!r}", tok)

    def parse(self) -> Expr:
        if self.peek()[0] == "end":
            self.fail("empty expression")
        e = self.expr()
        if self.peek()[0] != "end":
            tok = self.peek()
            if tok[0] in ("num", "name") or tok[1] == "(":
                self.fail("implicit multiplication is not allowed")
            self.fail(f"unexpected token {tok[1]!r}")
        return e

    def expr(self) -> Expr:
        e = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            rhs = self.term()
            e = add(e, rhs) if op == "+" else sub(e, rhs)
        return e

    def term(self) -> Expr:
        e = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            tok = self.take()
            rhs = self.unary()
            if tok[1] == "*":
                e = mul(e, rhs)
            else:
                try:
                    e = div(e, rhs)
                except ZeroDivisionError:
                    self.fail("division by the constant zero", tok)
        return e

    def unary(self) -> Expr:
        tok = self.peek()
        if tok[0] == "op" and tok[1] == "-":
            self.take()
            return mul(const(-1), self.unary())
        if tok[0] == "op" and tok[1] == "+":
            self.take()
            return self.unary()
        return self.power()

    def power(self) -> Expr:
        base = self.atom()
        tok = self.peek()
        if tok[0] == "op" and tok[1] == "^":
            self.take()
            exp_tok = self.peek()
            exponent = self.unary()
            if _rational(exponent) is None:
                self.fail("exponent must be a rational constant", exp_tok)
            try:
                return power(base, exponent)
            except ZeroDivisionError:
                self.fail("zero raised to a negative power", tok)
        return base

    def atom(self) -> Expr:
        tok = self.take()
        kind, value, _ = tok
        if kind == "num":
            return const(Fraction(value))
        if kind == "name":
            if value in FUNCTIONS:
                self.expect("(")
                arg = self.expr()
                self.expect(")")
                return func(value, arg)
            if value in self.variables:
                return var(value)
            if value in NAMED_CONSTANTS:
                return const(value)
            self.fail(f"unknown identifier {value!r}", tok)
        if kind == "op" and value == "(":
            e = self.expr()
            self.expect(")")
            return e
        if kind == "end":
            self.fail("unexpected end of input", tok)
        self.fail(f"unexpected token {value!r}", tok)


def parse(text: str, variables: Sequence[str] = ("x", "y")) -> Expr:
    """Parse ``text`` over the ordered variable names ``variables``.

    >>> str(parse("(1+x*y)^(-2)"))
    '(1+x*y)^(-2)'
    """
    for name in variables:
        if name in FUNCTIONS or name in NAMED_CONSTANTS:
            raise ExprError(f"{name!r} cannot be used as a variable name")
    return _Parser(text, variables).parse()


# ---------------------------------------------------------------------------
# differentiation and substitution
# ---------------------------------------------------------------------------

def _d1(node: Expr, name: str) -> Expr:
    cached = node._dcache.get(name)
    if cached is not None:
        return cached
    # iterative: differentiate children first so deep trees do not recurse
    for sub_node in _topo(node):
        if name in sub_node._dcache:
            continue
        op = sub_node.op
        a = sub_node.args
        d = [c._dcache[name] for c in a]
        if op == "const":
            out = const(0)
        elif op == "var":
            out = const(1 if sub_node.data == name else 0)
        elif op == "add":
            out = add(d[0], d[1])
        elif op == "sub":
            out = sub(d[0], d[1])
        elif op == "mul":
            out = add(mul(d[0], a[1]), mul(a[0], d[1]))
        elif op == "div":
            out = sub(div(d[0], a[1]), div(mul(a[0], d[1]), power(a[1], 2)))
        elif op == "pow":
            k = sub_node.data
            out = mul(mul(const(k), power(a[0], k - 1)), d[0])
        elif op == "exp":
            out = mul(sub_node, d[0])
        elif op == "log":
            out = div(d[0], a[0])
        elif op == "sin":
            out = mul(func("cos", a[0]), d[0])
        elif op == "cos":
            out = mul(const(-1), mul(func("sin", a[0]), d[0]))
        elif op == "sqrt":
            out = div(d[0], mul(const(2), sub_node))
        else:  # pragma: no cover
            raise ExprError(f"unknown node {op}")
        sub_node._dcache[name] = out
    return node._dcache[name]


def diff(e: Expr, name: str, order: int = 1) -> Expr:
    """Exact ``order``-th partial derivative of ``e`` with respect to ``name``."""
    if order < 1:
        raise ValueError("derivative order must be a positive integer")
    for _ in range(order):
        e = _d1(e, name)
    return e


def substitute(e: Expr, mapping: Mapping[str, Expr]) -> Expr:
    """Replace variables by expressions, rebuilding the DAG once."""
    if not mapping:
        return e
    mapping = {k: _lift(v) for k, v in mapping.items()}
    out: dict[int, Expr] = {}
    for node in _topo(e):
        op = node.op
        if op == "var":
            out[id(node)] = mapping.get(node.data, node)
        elif op == "const":
            out[id(node)] = node
        else:
            a = [out[id(c)] for c in node.args]
            if op == "add":
                out[id(node)] = add(*a)
            elif op == "sub":
                out[id(node)] = sub(*a)
            elif op == "mul":
                out[id(node)] = mul(*a)
            elif op == "div":
                out[id(node)] = div(*a)
            elif op == "pow":
                out[id(node)] = power(a[0], node.data)
            else:
                out[id(node)] = func(op, a[0])
    return out[id(e)]


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def _is_complex(value) -> bool:
    return np.iscomplexobj(value)


def _check_nonzero(den, what="division by zero"):
    if np.any(den == 0):
        raise _ZeroDivision(what)


class _Program:
    """Straight-line evaluation program for a set of root expressions."""

    def __init__(self, roots: Sequence[Expr], variables: Sequence[str] | None = None):
        self.roots = tuple(roots)
        self.nodes = _topo_many(self.roots)
        index = {id(n): i for i, n in enumerate(self.nodes)}
        self.steps = [(n.op, tuple(index[id(c)] for c in n.args), n.data) for n in self.nodes]
        self.outputs = [index[id(r)] for r in self.roots]
        free = set()
        for n in self.nodes:
            if n.op == "var":
                free.add(n.data)
        self.free = frozenset(free)
        self.variables = tuple(variables) if variables is not None else tuple(sorted(free))
        missing = free - set(self.variables)
        if missing:
            raise EvaluationError(f"unbound variables {sorted(missing)}")

    def run(self, values: Mapping[str, object], complex_mode: bool | None = None):
        if complex_mode is None:
            complex_mode = any(_is_complex(values[k]) for k in self.free)
        regs: list = [None] * len(self.steps)
        with np.errstate(all="ignore"):
            for i, (op, a, data) in enumerate(self.steps):
                if op == "const":
                    if data == "i":
                        if not complex_mode:
                            raise EvaluationError("complex constant in real evaluation")
                        regs[i] = 1j
                    elif isinstance(data, str):
                        regs[i] = NAMED_CONSTANTS[data]
                    else:
                        regs[i] = float(data) if not complex_mode else complex(data)
                elif op == "var":
                    v = values[data]
                    if not complex_mode and _is_complex(v):
                        raise EvaluationError(f"complex value for {data!r} in real evaluation")
                    regs[i] = v + 0j if complex_mode else v
                elif op == "add":
                    regs[i] = regs[a[0]] + regs[a[1]]
                elif op == "sub":
                    regs[i] = regs[a[0]] - regs[a[1]]
                elif op == "mul":
                    regs[i] = regs[a[0]] * regs[a[1]]
                elif op == "div":
                    den = regs[a[1]]
                    _check_nonzero(den)
                    regs[i] = regs[a[0]] / den
                elif op == "pow":
                    regs[i] = _pow(regs[a[0]], data, complex_mode)
                elif op == "exp":
                    regs[i] = np.exp(regs[a[0]])
                elif op == "log":
                    arg = regs[a[0]]
                    _check_nonzero(arg, "log of zero")
                    if not complex_mode and np.any(arg < 0):
                        raise DomainError("log of a negative number in real evaluation")
                    regs[i] = np.log(arg)
                elif op == "sin":
                    regs[i] = np.sin(regs[a[0]])
                elif op == "cos":
                    regs[i] = np.cos(regs[a[0]])
                elif op == "sqrt":
                    arg = regs[a[0]]
                    if not complex_mode and np.any(arg < 0):
                        raise DomainError("sqrt of a negative number in real evaluation")
                    regs[i] = np.sqrt(arg)
        return [regs[k] for k in self.outputs]


def _pow(base, k: Fraction, complex_mode: bool):
    if k.denominator == 1:
        n = int(k)
        if n < 0:
            _check_nonzero(base, "zero raised to a negative power")
            return 1.0 / _ipow(base, -n)
        return _ipow(base, n)
    if not complex_mode:
        if np.any(base < 0):
            raise DomainError("fractional power of a negative number in real evaluation")
        if k < 0:
            _check_nonzero(base, "zero raised to a negative power")
    elif k < 0:
        _check_nonzero(base, "zero raised to a negative power")
    return np.power(base, float(k))


def _ipow(base, n: int):
    result = None
    square = base
    while n:
        if n & 1:
            result = square if result is None else result * square
        n >>= 1
        if n:
            square = square * square
    return 1.0 if result is None else result


def _prepare_point(point: Mapping[str, object]):
    prepared = {}
    for k, v in point.items():
        if isinstance(v, (list, tuple)):
            v = np.asarray(v)
        prepared[k] = v
    return prepared


def _finish(value, point):
    scalar = all(np.ndim(v) == 0 for v in point.values())
    if scalar:
        value = np.asarray(value).item() if np.ndim(value) == 0 else value
    return value


def evaluate(e: Expr, point: Mapping[str, object], complex_mode: bool | None = None):
    """Evaluate ``e`` with variables bound by ``point``.

    Values may be Python/numpy scalars or arrays (broadcast together).
    Complex inputs switch to complex arithmetic; in real mode a complex
    intermediate, a negative log/sqrt argument or a division by zero raises.
    """
    point = _prepare_point(point)
    program = _Program([e], tuple(point))
    value = program.run(point, complex_mode)[0]
    if np.ndim(value) == 0 and any(np.ndim(v) for v in point.values()):
        shape = np.broadcast(*[np.asarray(v) for v in point.values()]).shape
        value = np.full(shape, value)
    return _finish(value, point)


def compile_exprs(exprs: Sequence[Expr], variables: Sequence[str]):
    """Compile several expressions into one shared-subexpression evaluator.

    Returns ``f(*coords, complex_mode=None) -> list`` where each output is
    broadcast to the common shape of the coordinate arguments.
    """
    program = _Program(list(exprs), variables)
    names = tuple(variables)

    def fn(*coords, complex_mode=None):
        if len(coords) != len(names):
            raise TypeError(f"expected {len(names)} coordinates, got {len(coords)}")
        point = dict(zip(names, coords))
        values = program.run(point, complex_mode)
        shape = np.broadcast(*[np.asarray(c) for c in coords]).shape
        out = []
        for v in values:
            if np.shape(v) != shape:
                v = np.broadcast_to(v, shape).copy() if shape else v
            out.append(v)
        return out

    fn.variables = names
    fn.exprs = tuple(exprs)
    return fn
