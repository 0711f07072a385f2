from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass
from functools import reduce
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    NotDifferentiableError,
    NumericDomainError,
    ParseError,
    UnboundVariableError,
    UnknownFunctionError,
)

logger = logging.getLogger(__name__)

# name -> arity (None means two or more)
FUNCTIONS: dict[str, int | None] = {
    "sin": 1,
    "cos": 1,
    "tanh": 1,
    "exp": 1,
    "log": 1,
    "sqrt": 1,
    "abs": 1,
    "sign": 1,
    "min": None,
    "max": None,
}

NON_SMOOTH = frozenset({"abs", "sign", "min", "max"})


# --- AST ---------------------------------------------------------------


class Expression:
    """Base of the immutable expression tree."""

    __slots__ = ()

    def __str__(self) -> str:
        return to_text(self)


@dataclass(frozen=True, slots=True)
class Num(Expression):
    value: float


@dataclass(frozen=True, slots=True)
class Var(Expression):
    name: str
    index: int | None = None

    @property
    def key(self) -> str:
        return variable_key(self.name, self.index)


@dataclass(frozen=True, slots=True)
class Neg(Expression):
    operand: Expression


@dataclass(frozen=True, slots=True)
class BinOp(Expression):
    op: str
    left: Expression
    right: Expression


@dataclass(frozen=True, slots=True)
class Pow(Expression):
    base: Expression
    exponent: float


@dataclass(frozen=True, slots=True)
class Call(Expression):
    func: str
    args: tuple[Expression, ...]


def variable_key(name: str, index: int | None = None) -> str:
    return name if index is None else f"{name}[{index}]"


# --- Tokenizer ---------------------------------------------------------

NUMBER = "NUMBER"
IDENT = "IDENT"
OP = "OP"
LPAREN = "LPAREN"
RPAREN = "RPAREN"
LBRACK = "LBRACK"
RBRACK = "RBRACK"
COMMA = "COMMA"
EOF = "EOF"

_TOKEN_SPECS = [
    (re.compile(r"\s+"), None),
    (re.compile(r"(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?"), NUMBER),
    (re.compile(r"[A-Za-z_][A-Za-z0-9_]*"), IDENT),
    (re.compile(r"[-+*/^]"), OP),
    (re.compile(r"\("), LPAREN),
    (re.compile(r"\)"), RPAREN),
    (re.compile(r"\["), LBRACK),
    (re.compile(r"\]"), RBRACK),
    (re.compile(r","), COMMA),
]


@dataclass(frozen=True, slots=True)
class Token:
    type: str
    text: str
    offset: int


def tokenize(text: str) -> list[Token]:
    tokens: list[Token] = []
    pos = 0
    while pos < len(text):
        for regex, ttype in _TOKEN_SPECS:
            match = regex.match(text, pos)
            if match:
                if ttype:
                    tokens.append(Token(ttype, match.group(0), pos))
                pos = match.end()
                break
        else:
            raise ParseError(f"unexpected character {text[pos]!r}", pos, text)
    tokens.append(Token(EOF, "", len(text)))
    return tokens


# --- Parser ------------------------------------------------------------


class Parser:
    """Recursive-descent parser.

    expr  := term {("+"|"-") term}
    term  := unary {("*"|"/") unary}
    unary := "-" unary | power
    power := base ["^" unary]        (exponent must be variable-free)
    base  := number | var | func "(" expr {"," expr} ")" | "(" expr ")"
    """

    def __init__(self, text: str) -> None:
        self.text = text
        self.tokens = tokenize(text)
        self.pos = 0

    @property
    def current(self) -> Token:
        return self.tokens[self.pos]

    def _peek(self, ahead: int = 1) -> Token:
        return self.tokens[min(self.pos + ahead, len(self.tokens) - 1)]

    def _advance(self) -> Token:
        token = self.tokens[self.pos]
        if token.type != EOF:
            self.pos += 1
        return token

    def _expect(self, ttype: str, what: str) -> Token:
        if self.current.type != ttype:
            found = self.current.text or "end of input"
            raise ParseError(f"expected {what}, found {found!r}", self.current.offset, self.text)
        return self._advance()

    def _is_op(self, *ops: str) -> bool:
        return self.current.type == OP and self.current.text in ops

    def parse(self) -> Expression:
        if self.current.type == EOF:
            raise ParseError("empty expression", 0, self.text)
        node = self._expr()
        if self.current.type != EOF:
            raise ParseError(f"unexpected {self.current.text!r}", self.current.offset, self.text)
        return node

    def _expr(self) -> Expression:
        node = self._term()
        while self._is_op("+", "-"):
            op = self._advance().text
            node = BinOp(op, node, self._term())
        return node

    def _term(self) -> Expression:
        node = self._unary()
        while self._is_op("*", "/"):
            op = self._advance().text
            node = BinOp(op, node, self._unary())
        return node

    def _unary(self) -> Expression:
        if self._is_op("-"):
            self._advance()
            # "-2" is a literal unless it is the base of a power
            following = self._peek()
            if self.current.type == NUMBER and not (following.type == OP and following.text == "^"):
                return Num(-float(self._advance().text))
            return Neg(self._unary())
        return self._power()

    def _power(self) -> Expression:
        base = self._base()
        if self._is_op("^"):
            caret = self._advance()
            exponent_node = self._unary()
            if free_variables(exponent_node):
                raise ParseError("exponent must be a constant", caret.offset, self.text)
            try:
                exponent = evaluate(exponent_node, {})
            except NumericDomainError as exc:
                raise ParseError(f"invalid exponent ({exc})", caret.offset, self.text) from exc
            return Pow(base, exponent)
        return base

    def _base(self) -> Expression:
        token = self.current
        if token.type == NUMBER:
            self._advance()
            return Num(float(token.text))
        if token.type == LPAREN:
            self._advance()
            node = self._expr()
            self._expect(RPAREN, "')'")
            return node
        if token.type == IDENT:
            self._advance()
            if self.current.type == LPAREN:
                return self._call(token)
            if self.current.type == LBRACK:
                self._advance()
                index_token = self._expect(NUMBER, "an index")
                if not index_token.text.isdigit() or int(index_token.text) < 1:
                    raise ParseError(
                        f"index must be a positive integer, found {index_token.text!r}",
                        index_token.offset,
                        self.text,
                    )
                self._expect(RBRACK, "']'")
                return Var(token.text, int(index_token.text))
            return Var(token.text)
        found = token.text or "end of input"
        raise ParseError(f"unexpected {found!r}", token.offset, self.text)

    def _call(self, name: Token) -> Expression:
        if name.text not in FUNCTIONS:
            raise UnknownFunctionError(f"unknown function {name.text!r}", name.offset, self.text)
        self._expect(LPAREN, "'('")
        args = [self._expr()]
        while self.current.type == COMMA:
            self._advance()
            args.append(self._expr())
        self._expect(RPAREN, "')'")
        arity = FUNCTIONS[name.text]
        if (arity is None and len(args) < 2) or (arity is not None and len(args) != arity):
            expected = "at least 2" if arity is None else str(arity)
            raise ParseError(
                f"{name.text} takes {expected} argument(s), got {len(args)}", name.offset, self.text
            )
        return Call(name.text, tuple(args))


def parse(text: str) -> Expression:
    return Parser(text).parse()


# --- Printer -----------------------------------------------------------

_PREC_ADD, _PREC_MUL, _PREC_NEG, _PREC_POW, _PREC_ATOM = 1, 2, 3, 4, 5


def format_number(value: float) -> str:
    if math.isfinite(value) and value.is_integer() and abs(value) < 1e16:
        return str(int(value))
    return repr(float(value))


def _precedence(node: Expression) -> int:
    if isinstance(node, BinOp):
        return _PREC_ADD if node.op in "+-" else _PREC_MUL
    if isinstance(node, Neg):
        return _PREC_NEG
    if isinstance(node, Num) and (node.value < 0 or math.copysign(1.0, node.value) < 0):
        return _PREC_NEG
    if isinstance(node, Pow):
        return _PREC_POW
    return _PREC_ATOM


def _wrap(node: Expression, needs_parens: bool) -> str:
    text = to_text(node)
    return f"({text})" if needs_parens else text


def to_text(node: Expression) -> str:
    """Print with the fewest parentheses that still parse back to the same tree."""
    if isinstance(node, Num):
        return format_number(node.value)
    if isinstance(node, Var):
        return node.key
    if isinstance(node, Call):
        return f"{node.func}({', '.join(to_text(a) for a in node.args)})"
    if isinstance(node, Neg):
        operand = node.operand
        literal = isinstance(operand, Num) and _precedence(operand) == _PREC_ATOM
        return "-" + _wrap(operand, literal or _precedence(operand) < _PREC_NEG)
    if isinstance(node, Pow):
        base = _wrap(node.base, _precedence(node.base) < _PREC_ATOM)
        return f"{base}^{format_number(node.exponent)}"
    if isinstance(node, BinOp):
        prec = _precedence(node)
        left = _wrap(node.left, _precedence(node.left) < prec)
        right = _wrap(node.right, _precedence(node.right) <= prec)
        return f"{left} {node.op} {right}"
    raise TypeError(f"not an expression: {node!r}")


# --- Evaluation --------------------------------------------------------


def _sign(value: float) -> float:
    return float((value > 0) - (value < 0))


_MATH_FUNCS: dict[str, Callable[..., float]] = {
    "sin": math.sin,
    "cos": math.cos,
    "tanh": math.tanh,
    "exp": math.exp,
    "log": math.log,
    "sqrt": math.sqrt,
    "abs": abs,
    "sign": _sign,
    "min": min,
    "max": max,
}


def _eval(node: Expression, bindings: Mapping[str, float]) -> float:
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Var):
        try:
            return float(bindings[node.key])
        except KeyError:
            raise UnboundVariableError(node.key) from None
    if isinstance(node, Neg):
        return -_eval(node.operand, bindings)
    if isinstance(node, BinOp):
        left = _eval(node.left, bindings)
        right = _eval(node.right, bindings)
        if node.op == "+":
            return left + right
        if node.op == "-":
            return left - right
        if node.op == "*":
            return left * right
        return left / right
    if isinstance(node, Pow):
        base = _eval(node.base, bindings)
        if node.exponent.is_integer():
            return base ** int(node.exponent)
        return math.pow(base, node.exponent)
    if isinstance(node, Call):
        return float(_MATH_FUNCS[node.func](*(_eval(a, bindings) for a in node.args)))
    raise TypeError(f"not an expression: {node!r}")


def evaluate(node: Expression, bindings: Mapping[str, float]) -> float:
    try:
        value = _eval(node, bindings)
    except (ValueError, OverflowError, ZeroDivisionError) as exc:
        raise NumericDomainError(f"{to_text(node)}: {exc}") from exc
    if not math.isfinite(value):
        raise NumericDomainError(f"{to_text(node)} is not finite ({value})")
    return value


# --- Structural helpers ------------------------------------------------


def free_variables(node: Expression) -> frozenset[str]:
    if isinstance(node, Var):
        return frozenset({node.key})
    if isinstance(node, Num):
        return frozenset()
    return frozenset().union(*(free_variables(child) for child in children(node)))


def variable_namespaces(node: Expression) -> frozenset[str]:
    if isinstance(node, Var):
        return frozenset({node.name})
    if isinstance(node, Num):
        return frozenset()
    return frozenset().union(*(variable_namespaces(child) for child in children(node)))


def children(node: Expression) -> tuple[Expression, ...]:
    if isinstance(node, Neg):
        return (node.operand,)
    if isinstance(node, BinOp):
        return (node.left, node.right)
    if isinstance(node, Pow):
        return (node.base,)
    if isinstance(node, Call):
        return node.args
    return ()


def substitute(node: Expression, mapping: Mapping[str, Expression]) -> Expression:
    """Replace variables (by key, e.g. "u[1]") with expressions."""
    if isinstance(node, Var):
        return mapping.get(node.key, node)
    if isinstance(node, Num):
        return node
    if isinstance(node, Neg):
        return Neg(substitute(node.operand, mapping))
    if isinstance(node, BinOp):
        return BinOp(node.op, substitute(node.left, mapping), substitute(node.right, mapping))
    if isinstance(node, Pow):
        return Pow(substitute(node.base, mapping), node.exponent)
    if isinstance(node, Call):
        return Call(node.func, tuple(substitute(a, mapping) for a in node.args))
    raise TypeError(f"not an expression: {node!r}")


def _is_num(node: Expression, value: float | None = None) -> bool:
    return isinstance(node, Num) and (value is None or node.value == value)


def add(left: Expression, right: Expression) -> Expression:
    if _is_num(left) and _is_num(right):
        return Num(left.value + right.value)
    if _is_num(left, 0.0):
        return right
    if _is_num(right, 0.0):
        return left
    return BinOp("+", left, right)


def sub(left: Expression, right: Expression) -> Expression:
    if _is_num(left) and _is_num(right):
        return Num(left.value - right.value)
    if _is_num(right, 0.0):
        return left
    if _is_num(left, 0.0):
        return neg(right)
    return BinOp("-", left, right)


def mul(left: Expression, right: Expression) -> Expression:
    if _is_num(left) and _is_num(right):
        return Num(left.value * right.value)
    if _is_num(left, 0.0) or _is_num(right, 0.0):
        return Num(0.0)
    if _is_num(left, 1.0):
        return right
    if _is_num(right, 1.0):
        return left
    return BinOp("*", left, right)


def div(left: Expression, right: Expression) -> Expression:
    if _is_num(left) and _is_num(right) and right.value != 0.0:
        return Num(left.value / right.value)
    if _is_num(left, 0.0):
        return Num(0.0)
    if _is_num(right, 1.0):
        return left
    return BinOp("/", left, right)


def neg(node: Expression) -> Expression:
    if isinstance(node, Num):
        return Num(-node.value)
    if isinstance(node, Neg):
        return node.operand
    return Neg(node)


def power(base: Expression, exponent: float) -> Expression:
    if exponent == 0.0:
        return Num(1.0)
    if exponent == 1.0:
        return base
    if isinstance(base, Num):
        return Num(evaluate(Pow(base, exponent), {}))
    return Pow(base, exponent)


# --- Differentiation ---------------------------------------------------


def differentiate(node: Expression, var: str) -> Expression:
    """d(node)/d(var) with constant folding; var is a key such as "x[2]"."""
    if isinstance(node, Num):
        return Num(0.0)
    if isinstance(node, Var):
        return Num(1.0 if node.key == var else 0.0)
    if var not in free_variables(node):
        return Num(0.0)
    if isinstance(node, Neg):
        return neg(differentiate(node.operand, var))
    if isinstance(node, BinOp):
        du = differentiate(node.left, var)
        dv = differentiate(node.right, var)
        if node.op == "+":
            return add(du, dv)
        if node.op == "-":
            return sub(du, dv)
        if node.op == "*":
            return add(mul(du, node.right), mul(node.left, dv))
        # quotient rule
        return div(sub(mul(du, node.right), mul(node.left, dv)), power(node.right, 2.0))
    if isinstance(node, Pow):
        du = differentiate(node.base, var)
        return mul(mul(Num(node.exponent), power(node.base, node.exponent - 1.0)), du)
    if isinstance(node, Call):
        if node.func in NON_SMOOTH:
            raise NotDifferentiableError(f"{node.func} is not differentiable in {var}")
        (arg,) = node.args
        du = differentiate(arg, var)
        if node.func == "sin":
            outer: Expression = Call("cos", (arg,))
        elif node.func == "cos":
            outer = neg(Call("sin", (arg,)))
        elif node.func == "tanh":
            outer = sub(Num(1.0), power(Call("tanh", (arg,)), 2.0))
        elif node.func == "exp":
            outer = node
        elif node.func == "log":
            return div(du, arg)
        else:  # sqrt
            return div(du, mul(Num(2.0), node))
        return mul(outer, du)
    raise TypeError(f"not an expression: {node!r}")


def gradient(node: Expression, name: str, dim: int) -> tuple[Expression, ...]:
    return tuple(differentiate(node, variable_key(name, i)) for i in range(1, dim + 1))


# --- Compilation -------------------------------------------------------


def _scalar_min(*args: float) -> float:
    return min(args)


def _scalar_max(*args: float) -> float:
    return max(args)


_SCALAR_ENV: dict[str, Any] = {
    "_sin": math.sin,
    "_cos": math.cos,
    "_tanh": math.tanh,
    "_exp": math.exp,
    "_log": math.log,
    "_sqrt": math.sqrt,
    "_abs": abs,
    "_sign": _sign,
    "_min": _scalar_min,
    "_max": _scalar_max,
    "_pow": math.pow,
}

_VECTOR_ENV: dict[str, Any] = {
    "_sin": np.sin,
    "_cos": np.cos,
    "_tanh": np.tanh,
    "_exp": np.exp,
    "_log": np.log,
    "_sqrt": np.sqrt,
    "_abs": np.abs,
    "_sign": np.sign,
    "_min": lambda *a: reduce(np.minimum, a),
    "_max": lambda *a: reduce(np.maximum, a),
    "_pow": np.power,
}


def _codegen(node: Expression, params: Mapping[str, str]) -> str:
    if isinstance(node, Num):
        return f"({node.value!r})"
    if isinstance(node, Var):
        param = params.get(node.name)
        if param is None:
            raise UnboundVariableError(node.key)
        return param if node.index is None else f"{param}[{node.index - 1}]"
    if isinstance(node, Neg):
        return f"(-{_codegen(node.operand, params)})"
    if isinstance(node, BinOp):
        return f"({_codegen(node.left, params)} {node.op} {_codegen(node.right, params)})"
    if isinstance(node, Pow):
        base = _codegen(node.base, params)
        if node.exponent.is_integer():
            return f"({base} ** {int(node.exponent)})"
        return f"_pow({base}, {node.exponent!r})"
    if isinstance(node, Call):
        return f"_{node.func}({', '.join(_codegen(a, params) for a in node.args)})"
    raise TypeError(f"not an expression: {node!r}")


class CompiledVector:
    """A list of expressions turned into one Python callable.

    Positional arguments follow `namespaces`; an indexed namespace is passed as a
    sequence (scalar mode) or an array of shape (dim, N) (vectorized mode), an
    unindexed one such as "t" as a number or an array of shape (N,).
    """

    def __init__(
        self,
        exprs: Sequence[Expression],
        namespaces: Sequence[str],
        vectorized: bool = False,
    ) -> None:
        self.exprs = tuple(exprs)
        self.namespaces = tuple(namespaces)
        self.vectorized = vectorized
        params = {name: f"ns_{name}" for name in self.namespaces}
        body = ", ".join(_codegen(e, params) for e in self.exprs)
        self.source = f"def _compiled({', '.join(params.values())}):\n    return ({body},)\n"
        env = dict(_VECTOR_ENV if vectorized else _SCALAR_ENV)
        exec(compile(self.source, "<sdlyap-expr>", "exec"), env)  # noqa: S102
        self._fn = env["_compiled"]

    def __len__(self) -> int:
        return len(self.exprs)

    def __call__(self, *args: Any, size: int | None = None, strict: bool = True) -> Any:
        """Evaluate every expression.

        With `strict`, a non-finite result raises NumericDomainError; otherwise NaN and
        inf are returned for the caller to turn into failures.
        """
        if not self.vectorized:
            try:
                values = self._fn(*args)
            except (ValueError, OverflowError, ZeroDivisionError) as exc:
                raise NumericDomainError(str(exc)) from exc
            if strict:
                for k, value in enumerate(values):
                    if not math.isfinite(value):
                        raise NumericDomainError(f"{to_text(self.exprs[k])} evaluates to {value}")
            return values
        with np.errstate(all="ignore"):
            values = self._fn(*args)
        shape = np.broadcast_shapes(*(np.shape(v) for v in values))
        if size is not None:
            shape = np.broadcast_shapes(shape, (size,))
        out = np.empty((len(values), *shape), dtype=float)
        for i, value in enumerate(values):
            out[i] = value
        if strict:
            bad = ~np.isfinite(out)
            if bad.any():
                k, *where = np.argwhere(bad)[0]
                sample = tuple(int(w) for w in where)
                text = to_text(self.exprs[k])
                raise NumericDomainError(f"{text} is not finite at sample {sample}")
        return out


def compile_vector(
    exprs: Iterable[Expression], namespaces: Sequence[str], vectorized: bool = False
) -> CompiledVector:
    return CompiledVector(list(exprs), namespaces, vectorized)
