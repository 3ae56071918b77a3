"""Small expression language for nonlinearities, coefficients and barriers.

Grammar (recursive descent, no implicit multiplication)::

    expr  := term (('+'|'-') term)*
    term  := unary (('*'|'/') unary)*
    unary := '-' unary | power
    power := atom ('^' unary)?
    atom  := NUMBER | IDENT | IDENT '(' expr (',' expr)* ')' | '(' expr ')'

``^`` is right-associative and binds tighter than unary minus, so ``-2^2``
is ``-(2^2)``.  Named parameters are substituted as constants at parse time.
Evaluation works on floats and on numpy arrays alike.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Callable, Mapping, Union

import numpy as np

__all__ = [
    "Const", "Var", "Neg", "BinOp", "Pow", "Call", "ScalarFunctionExpr",
    "ExprError", "ParseError", "ExprSyntaxError", "UnknownIdentifier",
    "EmptyInput", "EvalError", "DomainError", "MissingBinding",
    "NonDifferentiableNode", "parse", "evaluate", "differentiate", "to_source",
    "VARIABLES", "FUNCTIONS",
]

VARIABLES = frozenset({"x", "r", "t", "u", "v"})
FUNCTIONS = {"exp": 1, "log": 1, "abs": 1, "min": None, "max": None}


class ExprError(Exception):
    pass


class ParseError(ExprError):
    def __init__(self, message, offset=None, expected=()):
        self.offset = offset
        self.expected = frozenset(expected)
        if offset is not None:
            message = f"{message} at byte offset {offset}"
        if expected:
            message += "; expected one of: " + ", ".join(sorted(self.expected))
        super().__init__(message)


class ExprSyntaxError(ParseError):
    pass


class UnknownIdentifier(ParseError):
    pass


class EmptyInput(ParseError):
    pass


class EvalError(ExprError):
    pass


class DomainError(EvalError):
    """Raised for log of a non-positive number, 0^negative, negative^fraction
    or division by zero.  ``index`` is the first offending array position
    when evaluating on arrays."""

    def __init__(self, message, index=None):
        self.index = index
        super().__init__(message if index is None else f"{message} (at index {index})")


class MissingBinding(EvalError):
    pass


class NonDifferentiableNode(ExprError):
    pass


# ---------------------------------------------------------------- tree nodes

@dataclass(frozen=True)
class Const:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Neg:
    operand: "Node"


@dataclass(frozen=True)
class BinOp:
    op: str  # one of + - * /
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class Pow:
    base: "Node"
    exponent: "Node"


@dataclass(frozen=True)
class Call:
    func: str
    args: tuple


Node = Union[Const, Var, Neg, BinOp, Pow, Call]


@dataclass(frozen=True)
class ScalarFunctionExpr:
    """Parsed expression together with the variable set it was declared over."""

    ast: Node
    variables: frozenset

    def __call__(self, **bindings):
        return evaluate(self, bindings)

    def __str__(self):
        return to_source(self.ast)

    @property
    def free_variables(self) -> frozenset:
        return frozenset(_free_vars(self.ast))

    def compile(self, argnames) -> Callable:
        """Return a positional numpy callable, e.g. ``compile(("x", "u", "v"))``.

        Any name in ``argnames`` may be absent from the tree; ``x`` and ``r``
        are treated as aliases of each other when only one is supplied.
        """
        argnames = tuple(argnames)
        fn = _compile(self.ast)

        def call(*args):
            env = dict(zip(argnames, args))
            if "x" in env and "r" not in env:
                env["r"] = env["x"]
            elif "r" in env and "x" not in env:
                env["x"] = env["r"]
            return fn(env)

        call.__name__ = f"expr[{to_source(self.ast)}]"
        return call


def _free_vars(node):
    if isinstance(node, Var):
        yield node.name
    elif isinstance(node, Neg):
        yield from _free_vars(node.operand)
    elif isinstance(node, BinOp):
        yield from _free_vars(node.left)
        yield from _free_vars(node.right)
    elif isinstance(node, Pow):
        yield from _free_vars(node.base)
        yield from _free_vars(node.exponent)
    elif isinstance(node, Call):
        for a in node.args:
            yield from _free_vars(a)


# ------------------------------------------------------------------ lexing

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<number>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<op>[-+*/^(),])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class _Token:
    kind: str  # number | ident | op | end
    text: str
    offset: int  # byte offset into the UTF-8 source


def _tokenize(source: str):
    tokens = []
    pos = 0
    while pos < len(source):
        m = _TOKEN_RE.match(source, pos)
        if m is None:
            raise ExprSyntaxError(
                f"unexpected character {source[pos]!r}", _byte_offset(source, pos)
            )
        if m.lastgroup != "ws":
            tokens.append(_Token(m.lastgroup, m.group(), _byte_offset(source, pos)))
        pos = m.end()
    tokens.append(_Token("end", "", _byte_offset(source, len(source))))
    return tokens


def _byte_offset(source, char_pos):
    return len(source[:char_pos].encode("utf-8"))


_ATOM_START = ("number", "identifier", "'('", "'-'")


class _Parser:
    def __init__(self, source, variables, params):
        self.tokens = _tokenize(source)
        self.i = 0
        self.variables = variables
        self.params = params

    @property
    def tok(self):
        return self.tokens[self.i]

    def take(self):
        t = self.tokens[self.i]
        self.i += 1
        return t

    def accept(self, text):
        if self.tok.kind == "op" and self.tok.text == text:
            return self.take()
        return None

    def expect(self, text):
        if self.accept(text) is None:
            raise ExprSyntaxError(
                f"unexpected {self._describe(self.tok)}", self.tok.offset, [f"'{text}'"]
            )

    @staticmethod
    def _describe(tok):
        return "end of input" if tok.kind == "end" else f"token {tok.text!r}"

    def parse(self):
        node = self.expr()
        if self.tok.kind != "end":
            raise ExprSyntaxError(
                f"unexpected {self._describe(self.tok)}", self.tok.offset,
                ["'+'", "'-'", "'*'", "'/'", "'^'", "end of input"],
            )
        return node

    def expr(self):
        node = self.term()
        while self.tok.kind == "op" and self.tok.text in "+-":
            op = self.take().text
            node = BinOp(op, node, self.term())
        return node

    def term(self):
        node = self.unary()
        while self.tok.kind == "op" and self.tok.text in "*/":
            op = self.take().text
            node = BinOp(op, node, self.unary())
        return node

    def unary(self):
        if self.accept("-"):
            return _neg(self.unary())
        return self.power()

    def power(self):
        base = self.atom()
        if self.accept("^"):
            return Pow(base, self.unary())
        return base

    def atom(self):
        tok = self.tok
        if tok.kind == "number":
            self.take()
            return Const(float(tok.text))
        if tok.kind == "ident":
            self.take()
            name = tok.text
            if self.tok.kind == "op" and self.tok.text == "(":
                if name not in FUNCTIONS:
                    raise UnknownIdentifier(f"unknown function {name!r}", tok.offset)
                self.take()
                args = [self.expr()]
                while self.accept(","):
                    args.append(self.expr())
                self.expect(")")
                arity = FUNCTIONS[name]
                if (arity is not None and len(args) != arity) or (arity is None and len(args) < 2):
                    want = arity if arity is not None else "at least 2"
                    raise ExprSyntaxError(
                        f"{name}() takes {want} argument(s), got {len(args)}", tok.offset
                    )
                return Call(name, tuple(args))
            if name in self.params:
                return Const(float(self.params[name]))
            if name in self.variables:
                return Var(name)
            raise UnknownIdentifier(f"unknown identifier {name!r}", tok.offset)
        if self.accept("("):
            node = self.expr()
            self.expect(")")
            return node
        raise ExprSyntaxError(f"unexpected {self._describe(tok)}", tok.offset, _ATOM_START)


def parse(source: str, variables=("u",), params: Mapping[str, float] | None = None
          ) -> ScalarFunctionExpr:
    """Parse ``source`` over the declared ``variables``.

    ``params`` maps constant names (``c1``, ``rho``, ...) to values that are
    folded into the tree as :class:`Const` nodes.
    """
    variables = frozenset(variables)
    unknown = variables - VARIABLES
    if unknown:
        raise ValueError(f"undeclarable variables {sorted(unknown)}; allowed: {sorted(VARIABLES)}")
    if not source or not source.strip():
        raise EmptyInput("empty expression", 0)
    params = dict(params or {})
    clash = variables & params.keys()
    if clash:
        raise ValueError(f"parameter names shadow variables: {sorted(clash)}")
    return ScalarFunctionExpr(_Parser(source, variables, params).parse(), variables)


# -------------------------------------------------------------- printing

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2}


def _prec(node):
    if isinstance(node, BinOp):
        return _PREC[node.op]
    if isinstance(node, Neg):
        return 3
    if isinstance(node, Pow):
        return 4
    return 5  # atoms; negative constants print with their own parentheses


def _fmt_number(value: float) -> str:
    if value.is_integer() and abs(value) < 1e16:
        return str(int(value))
    return repr(value)


def to_source(node) -> str:
    """Print a tree with the fewest parentheses that re-parse to the same tree."""
    if isinstance(node, ScalarFunctionExpr):
        node = node.ast
    if isinstance(node, Const):
        if not math.isfinite(node.value):
            raise ValueError("non-finite constants cannot be printed")
        text = _fmt_number(abs(node.value))
        return f"(-{text})" if node.value < 0 or math.copysign(1, node.value) < 0 else text
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Call):
        return f"{node.func}({', '.join(to_source(a) for a in node.args)})"
    if isinstance(node, Neg):
        inner = to_source(node.operand)
        if _prec(node.operand) < 3:
            inner = f"({inner})"
        return f"-{inner}"
    if isinstance(node, Pow):
        base = to_source(node.base)
        if _prec(node.base) < 5:
            base = f"({base})"
        exp = to_source(node.exponent)
        if _prec(node.exponent) < 3:
            exp = f"({exp})"
        return f"{base}^{exp}"
    p = _PREC[node.op]
    left = to_source(node.left)
    if _prec(node.left) < p:
        left = f"({left})"
    right = to_source(node.right)
    if _prec(node.right) <= p:
        right = f"({right})"
    return f"{left} {node.op} {right}"


# ------------------------------------------------------------- evaluation

def _check(mask, message):
    if np.ndim(mask) == 0:
        if mask:
            raise DomainError(message)
    elif np.any(mask):
        raise DomainError(message, int(np.flatnonzero(mask)[0]))


def _scalar(*values):
    return all(isinstance(v, (float, int)) and not isinstance(v, bool) for v in values)


def _pow_scalar(base, exponent):
    if base == 0 and exponent < 0:
        raise DomainError("0 raised to a negative power")
    if base < 0 and exponent != round(exponent):
        raise DomainError("negative base with non-integer exponent")
    try:
        return math.pow(base, exponent)
    except OverflowError:
        odd = base < 0 and exponent % 2 == 1
        return -math.inf if odd else math.inf


def _pow(base, exponent):
    # quadrature calls arrive one float at a time; skip the array machinery there
    if _scalar(base, exponent):
        return _pow_scalar(float(base), float(exponent))
    base = np.asarray(base, dtype=float)
    exponent = np.asarray(exponent, dtype=float)
    _check((base == 0) & (exponent < 0), "0 raised to a negative power")
    _check((base < 0) & (exponent != np.round(exponent)),
           "negative base with non-integer exponent")
    with np.errstate(over="ignore", invalid="ignore"):
        return np.power(base, exponent)


def _div(a, b):
    if _scalar(a, b):
        if b == 0:
            raise DomainError("division by zero")
        return float(a) / float(b)
    _check(np.asarray(b) == 0, "division by zero")
    with np.errstate(over="ignore"):
        return np.true_divide(a, b)


def _log(a):
    _check(np.asarray(a) <= 0, "log of non-positive argument")
    return np.log(a)


def _exp(a):
    if _scalar(a):
        try:
            return math.exp(a)
        except OverflowError:
            return math.inf
    with np.errstate(over="ignore"):
        return np.exp(a)


_CALLS = {
    "exp": _exp,
    "log": _log,
    "abs": np.abs,
    "min": lambda *a: _fold(np.minimum, a),
    "max": lambda *a: _fold(np.maximum, a),
}


def _fold(fn, args):
    out = args[0]
    for a in args[1:]:
        out = fn(out, a)
    return out


_BINOPS = {"+": np.add, "-": np.subtract, "*": np.multiply, "/": _div}


def _compile(node):
    if isinstance(node, Const):
        value = node.value
        return lambda env: value
    if isinstance(node, Var):
        name = node.name

        def var(env):
            try:
                return env[name]
            except KeyError:
                raise MissingBinding(f"no binding for variable {name!r}") from None
        return var
    if isinstance(node, Neg):
        inner = _compile(node.operand)
        return lambda env: np.negative(inner(env))
    if isinstance(node, BinOp):
        fn = _BINOPS[node.op]
        left, right = _compile(node.left), _compile(node.right)
        return lambda env: fn(left(env), right(env))
    if isinstance(node, Pow):
        base, exp = _compile(node.base), _compile(node.exponent)
        return lambda env: _pow(base(env), exp(env))
    if isinstance(node, Call):
        fn = _CALLS[node.func]
        args = [_compile(a) for a in node.args]
        return lambda env: fn(*(a(env) for a in args))
    raise TypeError(f"not an expression node: {node!r}")


def evaluate(f, bindings: Mapping[str, float]):
    """Evaluate ``f`` under ``bindings`` (floats or equal-shape arrays)."""
    node = f.ast if isinstance(f, ScalarFunctionExpr) else f
    env = dict(bindings)
    if "x" in env and "r" not in env:
        env["r"] = env["x"]
    out = _compile(node)(env)
    if np.ndim(out) == 0:
        return float(out)
    return out


# ---------------------------------------------------------- differentiation
# Smart constructors keep derivatives readable without a general simplifier.

def _is_const(node, value=None):
    return isinstance(node, Const) and (value is None or node.value == value)


def _neg(a):
    if isinstance(a, Const):
        return Const(-a.value)
    if isinstance(a, Neg):
        return a.operand
    return Neg(a)


def _add(a, b):
    if _is_const(a, 0):
        return b
    if _is_const(b, 0):
        return a
    if _is_const(a) and _is_const(b):
        return Const(a.value + b.value)
    return BinOp("+", a, b)


def _sub(a, b):
    if _is_const(b, 0):
        return a
    if _is_const(a, 0):
        return _neg(b)
    if _is_const(a) and _is_const(b):
        return Const(a.value - b.value)
    return BinOp("-", a, b)


def _mul(a, b):
    if _is_const(a, 0) or _is_const(b, 0):
        return Const(0.0)
    if _is_const(a, 1):
        return b
    if _is_const(b, 1):
        return a
    if _is_const(a) and _is_const(b):
        return Const(a.value * b.value)
    if _is_const(b):
        a, b = b, a
    if _is_const(a) and isinstance(b, BinOp) and b.op == "*" and _is_const(b.left):
        return _mul(Const(a.value * b.left.value), b.right)
    return BinOp("*", a, b)


def _divide(a, b):
    if _is_const(a, 0):
        return Const(0.0)
    if _is_const(b, 1):
        return a
    return BinOp("/", a, b)


def _power(a, b):
    if _is_const(b, 1):
        return a
    if _is_const(b, 0):
        return Const(1.0)
    return Pow(a, b)


def _depends(node, var):
    return var in set(_free_vars(node))


def _d(node, var):
    if isinstance(node, Const):
        return Const(0.0)
    if isinstance(node, Var):
        return Const(1.0 if node.name == var else 0.0)
    if isinstance(node, Neg):
        return _neg(_d(node.operand, var))
    if isinstance(node, BinOp):
        a, b = node.left, node.right
        da, db = _d(a, var), _d(b, var)
        if node.op == "+":
            return _add(da, db)
        if node.op == "-":
            return _sub(da, db)
        if node.op == "*":
            return _add(_mul(da, b), _mul(a, db))
        # quotient rule
        if not _depends(b, var):
            return _divide(da, b)
        return _divide(_sub(_mul(da, b), _mul(a, db)), _power(b, Const(2.0)))
    if isinstance(node, Pow):
        base, exp = node.base, node.exponent
        if not _depends(exp, var):
            if isinstance(exp, Const):
                reduced = Const(exp.value - 1.0)
            else:
                reduced = _sub(exp, Const(1.0))
            return _mul(_mul(exp, _power(base, reduced)), _d(base, var))
        # general case: d(b^e) = b^e * (e' log b + e b'/b)
        inner = _mul(_d(exp, var), Call("log", (base,)))
        if _depends(base, var):
            inner = _add(inner, _divide(_mul(exp, _d(base, var)), base))
        return _mul(node, inner)
    if isinstance(node, Call):
        if node.func in ("min", "max", "abs"):
            if _depends(node, var):
                raise NonDifferentiableNode(
                    f"{node.func}() depends on {var!r} and is not differentiable"
                )
            return Const(0.0)
        (arg,) = node.args
        darg = _d(arg, var)
        if node.func == "exp":
            return _mul(node, darg)
        if node.func == "log":
            return _divide(darg, arg)
    raise TypeError(f"not an expression node: {node!r}")


def differentiate(f: ScalarFunctionExpr, var: str) -> ScalarFunctionExpr:
    """Symbolic partial derivative of ``f`` with respect to ``var``."""
    return ScalarFunctionExpr(_d(f.ast, var), f.variables)
