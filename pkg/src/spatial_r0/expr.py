"""Coefficient expressions: parsing, evaluation and symbolic differentiation.

Expressions are small immutable trees over the space variable ``x`` and the
compartment state variables. Evaluation is vectorized: any variable may be
bound to a numpy array, and all array arguments broadcast together.

Grammar (whitespace insignificant)::

    expr    := term (('+' | '-') term)*
    term    := power (('*' | '/') power)*
    power   := unary (('^' | '**') power)?
    unary   := ('-' | '+') unary | primary
    primary := NUMBER | NAME | NAME '(' expr (',' expr)* ')' | '(' expr ')'

Unary minus binds tighter than ``^``, so ``-x^2`` is ``(-x)^2``. Exponents
must be constant.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence, Union

import numpy as np

__all__ = [
    "Expression",
    "Const",
    "NamedConst",
    "Var",
    "Neg",
    "Add",
    "Sub",
    "Mul",
    "Div",
    "Pow",
    "Func",
    "ExpressionError",
    "ParseError",
    "UnknownIdentifierError",
    "EvaluationError",
    "FUNCTIONS",
    "parse_expression",
    "evaluate",
    "evaluate_env",
    "differentiate",
    "to_string",
    "variables",
    "substitute",
    "is_zero",
    "as_expression",
    "const",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "power",
    "func",
]


class ExpressionError(ValueError):
    """Base class for expression failures."""


class ParseError(ExpressionError):
    def __init__(self, message: str, position: int, text: str = ""):
        self.position = position
        self.text = text
        super().__init__(f"{message} at position {position}")


class UnknownIdentifierError(ParseError):
    def __init__(self, name: str, position: int, text: str = ""):
        self.name = name
        super().__init__(f"unknown identifier {name!r}", position, text)


class EvaluationError(ExpressionError):
    """Domain violation during evaluation (division by zero, log of a
    nonpositive number, ...). ``kind`` is a short machine-readable tag."""

    def __init__(self, kind: str, detail: str = ""):
        self.kind = kind
        self.detail = detail
        super().__init__(f"{kind}: {detail}" if detail else kind)


# ---------------------------------------------------------------- nodes


class Expression:
    """Base class of expression nodes. Instances are immutable."""

    __slots__ = ()

    def __str__(self) -> str:
        return to_string(self)


@dataclass(frozen=True)
class Const(Expression):
    value: float


@dataclass(frozen=True)
class NamedConst(Expression):
    name: str
    value: float


@dataclass(frozen=True)
class Var(Expression):
    name: str


@dataclass(frozen=True)
class Neg(Expression):
    arg: Expression


@dataclass(frozen=True)
class Add(Expression):
    left: Expression
    right: Expression


@dataclass(frozen=True)
class Sub(Expression):
    left: Expression
    right: Expression


@dataclass(frozen=True)
class Mul(Expression):
    left: Expression
    right: Expression


@dataclass(frozen=True)
class Div(Expression):
    left: Expression
    right: Expression


@dataclass(frozen=True)
class Pow(Expression):
    base: Expression
    exponent: float


@dataclass(frozen=True)
class Func(Expression):
    name: str
    arg: Expression


FUNCTIONS = ("sin", "cos", "exp", "log", "sqrt", "abs", "sign")
NAMED_CONSTANTS = {"pi": math.pi}

Number = Union[float, np.ndarray]


# ------------------------------------------------- folding constructors


def _is_const(e: Expression) -> bool:
    return isinstance(e, (Const, NamedConst))


def _cval(e: Expression) -> float:
    return e.value  # type: ignore[attr-defined]


def _is_value(e: Expression, v: float) -> bool:
    return isinstance(e, Const) and e.value == v


def const(value: float) -> Const:
    return Const(float(value))


def neg(a: Expression) -> Expression:
    if isinstance(a, Const):
        return Const(-a.value)
    if isinstance(a, Neg):
        return a.arg
    return Neg(a)


def add(a: Expression, b: Expression) -> Expression:
    if _is_const(a) and _is_const(b):
        return Const(_cval(a) + _cval(b))
    if _is_value(a, 0.0):
        return b
    if _is_value(b, 0.0):
        return a
    return Add(a, b)


def sub(a: Expression, b: Expression) -> Expression:
    if _is_const(a) and _is_const(b):
        return Const(_cval(a) - _cval(b))
    if _is_value(b, 0.0):
        return a
    if _is_value(a, 0.0):
        return neg(b)
    return Sub(a, b)


def mul(a: Expression, b: Expression) -> Expression:
    if _is_const(a) and _is_const(b):
        return Const(_cval(a) * _cval(b))
    if _is_value(a, 0.0) or _is_value(b, 0.0):
        return Const(0.0)
    if _is_value(a, 1.0):
        return b
    if _is_value(b, 1.0):
        return a
    if _is_value(a, -1.0):
        return neg(b)
    if _is_value(b, -1.0):
        return neg(a)
    return Mul(a, b)


def div(a: Expression, b: Expression) -> Expression:
    if _is_const(a) and _is_const(b) and _cval(b) != 0.0:
        return Const(_cval(a) / _cval(b))
    if _is_value(b, 1.0):
        return a
    return Div(a, b)


def power(base: Expression, exponent: float) -> Expression:
    exponent = float(exponent)
    if exponent == 1.0:
        return base
    if _is_const(base):
        b = _cval(base)
        if not (b == 0.0 and exponent < 0) and not (b < 0 and not exponent.is_integer()):
            return Const(b**exponent)
    return Pow(base, exponent)


def func(name: str, arg: Expression) -> Expression:
    if name not in FUNCTIONS:
        raise ExpressionError(f"unknown function {name!r}")
    if _is_const(arg):
        try:
            return Const(float(_apply_func(name, np.float64(_cval(arg)))))
        except EvaluationError:
            pass
    return Func(name, arg)


def as_expression(value: Union[Expression, float, int, str], vocabulary: Iterable[str] = ("x",)) -> Expression:
    """Coerce numbers and strings to expressions."""
    if isinstance(value, Expression):
        return value
    if isinstance(value, (int, float, np.floating, np.integer)):
        return Const(float(value))
    if isinstance(value, str):
        return parse_expression(value, list(vocabulary))
    raise TypeError(f"cannot convert {type(value).__name__} to an expression")


# ---------------------------------------------------------------- parser

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>\*\*|[-+*/^(),]))"
)


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    n = len(text)
    while pos < n:
        if text[pos].isspace():
            pos += 1
            continue
        m = _TOKEN_RE.match(text, pos)
        if m is None or m.end() == pos:
            raise ParseError(f"unexpected character {text[pos]!r}", pos, text)
        kind = m.lastgroup
        start = m.start(kind)
        tokens.append((kind, m.group(kind), start))
        pos = m.end()
    tokens.append(("end", "", n))
    return tokens


class _Parser:
    def __init__(self, text: str, vocabulary: Sequence[str]):
        self.text = text
        self.vocab = set(vocabulary)
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self) -> tuple[str, str, int]:
        return self.tokens[self.i]

    def take(self) -> tuple[str, str, int]:
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value: str) -> None:
        kind, val, pos = self.take()
        if val != value or kind != "op":
            found = "end of input" if kind == "end" else repr(val)
            raise ParseError(f"expected {value!r}, found {found}", pos, self.text)

    def parse(self) -> Expression:
        kind, _, pos = self.peek()
        if kind == "end":
            raise ParseError("empty expression", pos, self.text)
        e = self.expr()
        kind, val, pos = self.peek()
        if kind != "end":
            raise ParseError(f"unexpected token {val!r}", pos, self.text)
        return e

    def expr(self) -> Expression:
        e = self.term()
        while True:
            kind, val, _ = self.peek()
            if kind == "op" and val in "+-" and val:
                self.take()
                rhs = self.term()
                e = Add(e, rhs) if val == "+" else Sub(e, rhs)
            else:
                return e

    def term(self) -> Expression:
        e = self.power()
        while True:
            kind, val, _ = self.peek()
            if kind == "op" and val in ("*", "/"):
                self.take()
                rhs = self.power()
                e = Mul(e, rhs) if val == "*" else Div(e, rhs)
            else:
                return e

    def power(self) -> Expression:
        base = self.unary()
        kind, val, pos = self.peek()
        if kind == "op" and val in ("^", "**"):
            self.take()
            _, _, epos = self.peek()
            exponent = _fold(self.power())
            if not _is_const(exponent):
                raise ParseError("exponent must be a constant", epos, self.text)
            return Pow(base, _cval(exponent))
        return base

    def unary(self) -> Expression:
        kind, val, _ = self.peek()
        if kind == "op" and val == "-":
            self.take()
            arg = self.unary()
            if isinstance(arg, Const):
                return Const(-arg.value)
            return Neg(arg)
        if kind == "op" and val == "+":
            self.take()
            return self.unary()
        return self.primary()

    def primary(self) -> Expression:
        kind, val, pos = self.take()
        if kind == "num":
            return Const(float(val))
        if kind == "name":
            nkind, nval, _ = self.peek()
            if nkind == "op" and nval == "(":
                self.take()
                args = [self.expr()]
                while self.peek()[1] == "," and self.peek()[0] == "op":
                    self.take()
                    args.append(self.expr())
                self.expect(")")
                return self.call(val, args, pos)
            if val in self.vocab:
                return Var(val)
            if val in NAMED_CONSTANTS:
                return NamedConst(val, NAMED_CONSTANTS[val])
            raise UnknownIdentifierError(val, pos, self.text)
        if kind == "op" and val == "(":
            e = self.expr()
            self.expect(")")
            return e
        found = "end of input" if kind == "end" else repr(val)
        raise ParseError(f"unexpected {found}", pos, self.text)

    def call(self, name: str, args: list[Expression], pos: int) -> Expression:
        if name == "pow":
            if len(args) != 2:
                raise ParseError("pow takes two arguments", pos, self.text)
            exponent = _fold(args[1])
            if not _is_const(exponent):
                raise ParseError("exponent must be a constant", pos, self.text)
            return Pow(args[0], _cval(exponent))
        if name == "neg":
            if len(args) != 1:
                raise ParseError("neg takes one argument", pos, self.text)
            return Neg(args[0])
        if name in FUNCTIONS:
            if len(args) != 1:
                raise ParseError(f"{name} takes one argument", pos, self.text)
            return Func(name, args[0])
        raise UnknownIdentifierError(name, pos, self.text)


def _fold(e: Expression) -> Expression:
    """Constant-fold a parsed tree bottom-up."""
    if isinstance(e, (Const, NamedConst, Var)):
        return e
    if isinstance(e, Neg):
        a = _fold(e.arg)
        return Const(-_cval(a)) if _is_const(a) else Neg(a)
    if isinstance(e, (Add, Sub, Mul, Div)):
        a, b = _fold(e.left), _fold(e.right)
        if _is_const(a) and _is_const(b):
            op = {Add: add, Sub: sub, Mul: mul, Div: div}[type(e)]
            return op(a, b)
        return type(e)(a, b)
    if isinstance(e, Pow):
        return power(_fold(e.base), e.exponent)
    if isinstance(e, Func):
        return func(e.name, _fold(e.arg))
    raise TypeError(type(e))


def parse_expression(text: str, vocabulary: Sequence[str]) -> Expression:
    """Parse ``text`` into an expression tree.

    Every identifier must be a function name, ``pi``, or appear in
    ``vocabulary``; anything else raises :class:`UnknownIdentifierError`.
    The tree is returned as written (no folding), so ``parse(to_string(e))``
    reproduces ``e``.
    """
    if not isinstance(text, str) or not text.strip():
        raise ParseError("empty expression", 0, text if isinstance(text, str) else "")
    return _Parser(text, vocabulary).parse()


# ------------------------------------------------------------ evaluation


def _check(cond, kind: str, detail: str) -> None:
    if np.any(cond):
        raise EvaluationError(kind, detail)


def _apply_func(name: str, a: Number) -> Number:
    if name == "sin":
        return np.sin(a)
    if name == "cos":
        return np.cos(a)
    if name == "exp":
        with np.errstate(over="ignore"):
            out = np.exp(a)
        _check(~np.isfinite(out), "overflow", "exp argument too large")
        return out
    if name == "log":
        _check(np.asarray(a) <= 0, "log of nonpositive", "log argument must be positive")
        return np.log(a)
    if name == "sqrt":
        _check(np.asarray(a) < 0, "sqrt of negative", "sqrt argument must be nonnegative")
        return np.sqrt(a)
    if name == "abs":
        return np.abs(a)
    if name == "sign":
        _check(np.asarray(a) == 0, "sign at zero", "derivative of abs undefined at 0")
        return np.sign(a)
    raise EvaluationError("unknown function", name)


def _eval(e: Expression, env: Mapping[str, Number]) -> Number:
    if isinstance(e, Const) or isinstance(e, NamedConst):
        return np.float64(e.value)
    if isinstance(e, Var):
        try:
            return env[e.name]
        except KeyError:
            raise EvaluationError("unbound variable", e.name) from None
    if isinstance(e, Neg):
        return -_eval(e.arg, env)
    if isinstance(e, Add):
        return _eval(e.left, env) + _eval(e.right, env)
    if isinstance(e, Sub):
        return _eval(e.left, env) - _eval(e.right, env)
    if isinstance(e, Mul):
        return _eval(e.left, env) * _eval(e.right, env)
    if isinstance(e, Div):
        num = _eval(e.left, env)
        den = _eval(e.right, env)
        _check(np.asarray(den) == 0, "division by zero", to_string(e.right))
        return num / den
    if isinstance(e, Pow):
        base = np.asarray(_eval(e.base, env), dtype=float)
        p = e.exponent
        if p < 0:
            _check(base == 0, "zero to negative power", to_string(e.base))
        if not float(p).is_integer():
            _check(base < 0, "negative base to fractional power", to_string(e.base))
        out = np.power(base, p)
        return out if out.ndim else np.float64(out)
    if isinstance(e, Func):
        return _apply_func(e.name, _eval(e.arg, env))
    raise TypeError(type(e))


def evaluate_env(e: Expression, env: Mapping[str, Number]) -> Number:
    """Evaluate with an explicit name -> value mapping (values may be arrays)."""
    with np.errstate(all="ignore"):
        out = _eval(e, env)
    if isinstance(out, np.ndarray) and out.ndim == 0:
        return float(out)
    if isinstance(out, np.floating):
        return float(out)
    return out


def evaluate(e: Expression, x: Number, u: Union[Sequence[Number], Mapping[str, Number]] = (), names: Sequence[str] | None = None) -> Number:
    """Evaluate ``e`` at position ``x`` and state ``u``.

    ``u`` is either a mapping from variable name to value, or a sequence of
    state values. A sequence binds both ``u1..un`` and, when given,
    ``names[i]``.
    """
    env: dict[str, Number] = {"x": x}
    if isinstance(u, Mapping):
        env.update(u)
    else:
        for i, val in enumerate(u):
            env[f"u{i + 1}"] = val
            if names is not None:
                env[names[i]] = val
    return evaluate_env(e, env)


# -------------------------------------------------------- differentiation


def differentiate(e: Expression, v: str) -> Expression:
    """Symbolic partial derivative of ``e`` with respect to variable ``v``."""
    if isinstance(e, (Const, NamedConst)):
        return Const(0.0)
    if isinstance(e, Var):
        return Const(1.0 if e.name == v else 0.0)
    if isinstance(e, Neg):
        return neg(differentiate(e.arg, v))
    if isinstance(e, Add):
        return add(differentiate(e.left, v), differentiate(e.right, v))
    if isinstance(e, Sub):
        return sub(differentiate(e.left, v), differentiate(e.right, v))
    if isinstance(e, Mul):
        da = differentiate(e.left, v)
        db = differentiate(e.right, v)
        return add(mul(da, e.right), mul(e.left, db))
    if isinstance(e, Div):
        da = differentiate(e.left, v)
        db = differentiate(e.right, v)
        if _is_value(db, 0.0):
            return div(da, e.right)
        return div(sub(mul(da, e.right), mul(e.left, db)), power(e.right, 2.0))
    if isinstance(e, Pow):
        db = differentiate(e.base, v)
        if _is_value(db, 0.0) or e.exponent == 0.0:
            return Const(0.0)
        return mul(mul(Const(e.exponent), power(e.base, e.exponent - 1.0)), db)
    if isinstance(e, Func):
        da = differentiate(e.arg, v)
        if _is_value(da, 0.0):
            return Const(0.0)
        a = e.arg
        outer = {
            "sin": lambda: func("cos", a),
            "cos": lambda: neg(func("sin", a)),
            "exp": lambda: e,
            "log": lambda: div(Const(1.0), a),
            "sqrt": lambda: div(Const(0.5), e),
            "abs": lambda: func("sign", a),
            "sign": lambda: Const(0.0),
        }[e.name]()
        return mul(outer, da)
    raise TypeError(type(e))


# --------------------------------------------------------------- printing

_PREC = {Add: 1, Sub: 1, Mul: 2, Div: 2, Pow: 3, Neg: 4}


def _fmt_number(v: float) -> str:
    if v.is_integer() and abs(v) < 1e15:
        return str(int(v)) if v != 0 or math.copysign(1.0, v) > 0 else "-0.0"
    return repr(v)


def _prec(e: Expression) -> int:
    if isinstance(e, Const) and e.value < 0:
        return _PREC[Neg]
    return _PREC.get(type(e), 5)


def to_string(e: Expression) -> str:
    """Render ``e`` so that parsing the result gives back the same tree."""
    if isinstance(e, Const):
        return _fmt_number(e.value)
    if isinstance(e, NamedConst):
        return e.name
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Neg):
        inner = to_string(e.arg)
        # a negative literal or nested minus would fold or merge when re-read
        if _prec(e.arg) < 5 or (isinstance(e.arg, Const) and e.arg.value <= 0):
            inner = f"({inner})"
        return f"-{inner}"
    if isinstance(e, (Add, Sub, Mul, Div)):
        p = _PREC[type(e)]
        left = to_string(e.left)
        right = to_string(e.right)
        if _prec(e.left) < p:
            left = f"({left})"
        if _prec(e.right) <= p:
            right = f"({right})"
        op = {Add: " + ", Sub: " - ", Mul: "*", Div: "/"}[type(e)]
        return f"{left}{op}{right}"
    if isinstance(e, Pow):
        base = to_string(e.base)
        if _prec(e.base) <= _PREC[Pow]:
            base = f"({base})"
        elif isinstance(e.base, Neg):
            pass
        exponent = _fmt_number(e.exponent)
        if e.exponent < 0:
            exponent = f"({exponent})"
        return f"{base}^{exponent}"
    if isinstance(e, Func):
        return f"{e.name}({to_string(e.arg)})"
    raise TypeError(type(e))


# ------------------------------------------------------------- utilities


def variables(e: Expression) -> set[str]:
    if isinstance(e, Var):
        return {e.name}
    if isinstance(e, (Const, NamedConst)):
        return set()
    if isinstance(e, (Neg, Func)):
        return variables(e.arg)
    if isinstance(e, Pow):
        return variables(e.base)
    return variables(e.left) | variables(e.right)  # type: ignore[attr-defined]


def substitute(e: Expression, mapping: Mapping[str, Expression]) -> Expression:
    """Replace variables by expressions, folding constants on the way up."""
    if isinstance(e, Var):
        return mapping.get(e.name, e)
    if isinstance(e, (Const, NamedConst)):
        return e
    if isinstance(e, Neg):
        return neg(substitute(e.arg, mapping))
    if isinstance(e, Func):
        return func(e.name, substitute(e.arg, mapping))
    if isinstance(e, Pow):
        return power(substitute(e.base, mapping), e.exponent)
    op = {Add: add, Sub: sub, Mul: mul, Div: div}[type(e)]
    return op(substitute(e.left, mapping), substitute(e.right, mapping))


def is_zero(e: Expression) -> bool:
    return isinstance(e, Const) and e.value == 0.0
