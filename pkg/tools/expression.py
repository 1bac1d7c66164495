"""
Barrier expression language.

Barrier functions travel between sites as text, never as code. This module
turns that text into an immutable AST, prints the AST back in a canonical
fully parenthesised form, and evaluates it together with its forward-mode
gradient with respect to the state vector.

Grammar (whitespace insignificant):

    expr  := term (("+" | "-") term)*
    term  := unary (("*" | "/") unary)*
    unary := "-" unary | power
    power := atom ("^" unary)?
    atom  := NUMBER | "x" "[" INT "]" | "p" "." IDENT
           | IDENT "(" expr ("," expr)* ")" | "(" expr ")"

Subgradient convention at non-differentiable points: abs'(0) = 0 and
min/max follow the first argument that attains the extremum.
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np

logger = logging.getLogger(__name__)


# --- Errors ---


class ExpressionError(ValueError):
    """Base class for everything that can go wrong with a barrier expression."""


class LexError(ExpressionError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} at position {position}")
        self.position = position


class ParseError(ExpressionError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} at position {position}")
        self.position = position


class UnknownFunctionError(ParseError):
    pass


class ArityError(ParseError):
    pass


class BindingError(ExpressionError):
    """A state index or parameter the expression needs is not available."""


class DomainError(ExpressionError):
    """Evaluation left the domain of an operation (sqrt(-1), ln(0), 1/0, overflow)."""


# --- AST ---


@dataclass(frozen=True)
class Number:
    value: float


@dataclass(frozen=True)
class StateVar:
    index: int


@dataclass(frozen=True)
class Param:
    name: str


@dataclass(frozen=True)
class Neg:
    operand: "BarrierAst"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "BarrierAst"
    right: "BarrierAst"


@dataclass(frozen=True)
class Call:
    func: str
    args: tuple["BarrierAst", ...]


BarrierAst = Union[Number, StateVar, Param, Neg, BinOp, Call]

# name -> (min args, max args); None means unbounded
FUNCTIONS: dict[str, tuple[int, Optional[int]]] = {
    "sin": (1, 1),
    "cos": (1, 1),
    "exp": (1, 1),
    "ln": (1, 1),
    "sqrt": (1, 1),
    "abs": (1, 1),
    "tanh": (1, 1),
    "min": (2, None),
    "max": (2, None),
}


# --- Lexer ---

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<num>(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<punct>[-+*/^()\[\],.])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class _Token:
    kind: str  # "num", "ident", "punct" or "end"
    text: str
    pos: int


def tokenize(text: str) -> list[_Token]:
    tokens: list[_Token] = []
    pos = 0
    while pos < len(text):
        match = _TOKEN_RE.match(text, pos)
        if match is None:
            raise LexError(f"Unexpected character {text[pos]!r}", pos)
        kind = match.lastgroup
        if kind != "ws":
            tokens.append(_Token(kind, match.group(), pos))
        pos = match.end()
    tokens.append(_Token("end", "", len(text)))
    return tokens


# --- Parser ---


class _Parser:
    def __init__(self, text: str):
        self.tokens = tokenize(text)
        self.i = 0

    @property
    def current(self) -> _Token:
        return self.tokens[self.i]

    def _advance(self) -> _Token:
        token = self.tokens[self.i]
        if token.kind != "end":
            self.i += 1
        return token

    def _at(self, text: str) -> bool:
        return self.current.kind == "punct" and self.current.text == text

    def _expect(self, text: str) -> _Token:
        if not self._at(text):
            raise ParseError(f"Expected {text!r} but {self._describe()}", self.current.pos)
        return self._advance()

    def _describe(self) -> str:
        if self.current.kind == "end":
            return "reached end of input"
        return f"found {self.current.text!r}"

    def parse(self) -> BarrierAst:
        node = self.expr()
        if self.current.kind != "end":
            raise ParseError(f"Unexpected token {self.current.text!r}", self.current.pos)
        return node

    def expr(self) -> BarrierAst:
        node = self.term()
        while self._at("+") or self._at("-"):
            op = self._advance().text
            node = BinOp(op, node, self.term())
        return node

    def term(self) -> BarrierAst:
        node = self.unary()
        while self._at("*") or self._at("/"):
            op = self._advance().text
            node = BinOp(op, node, self.unary())
        return node

    def unary(self) -> BarrierAst:
        if self._at("-"):
            self._advance()
            return Neg(self.unary())
        return self.power()

    def power(self) -> BarrierAst:
        base = self.atom()
        if self._at("^"):
            self._advance()
            # the exponent re-enters at unary, which makes ^ right-associative
            return BinOp("^", base, self.unary())
        return base

    def atom(self) -> BarrierAst:
        token = self.current
        if token.kind == "num":
            value = float(token.text)
            if not math.isfinite(value):
                raise ParseError(f"Number {token.text!r} is out of range", token.pos)
            self._advance()
            return Number(value)
        if token.kind == "ident":
            self._advance()
            if token.text == "x" and self._at("["):
                self._advance()
                index_token = self.current
                if index_token.kind != "num" or not index_token.text.isdigit():
                    raise ParseError(
                        f"Expected a state index but {self._describe()}", index_token.pos
                    )
                self._advance()
                self._expect("]")
                return StateVar(int(index_token.text))
            if token.text == "p" and self._at("."):
                self._advance()
                name_token = self.current
                if name_token.kind != "ident":
                    raise ParseError(
                        f"Expected a parameter name but {self._describe()}", name_token.pos
                    )
                self._advance()
                return Param(name_token.text)
            if self._at("("):
                return self._call(token)
            raise ParseError(f"Unexpected identifier {token.text!r}", token.pos)
        if self._at("("):
            self._advance()
            node = self.expr()
            self._expect(")")
            return node
        raise ParseError(f"Expected an operand but {self._describe()}", token.pos)

    def _call(self, name_token: _Token) -> Call:
        func = name_token.text
        if func not in FUNCTIONS:
            raise UnknownFunctionError(f"Unknown function {func!r}", name_token.pos)
        self._expect("(")
        args = [self.expr()]
        while self._at(","):
            self._advance()
            args.append(self.expr())
        self._expect(")")
        low, high = FUNCTIONS[func]
        if len(args) < low or (high is not None and len(args) > high):
            expected = str(low) if low == high else f"at least {low}"
            raise ArityError(
                f"Function {func!r} takes {expected} argument(s), got {len(args)}",
                name_token.pos,
            )
        return Call(func, tuple(args))


def parse_barrier(text: str) -> BarrierAst:
    """Parse barrier text into an AST. Raises LexError/ParseError subclasses."""
    return _Parser(text).parse()


# --- Printer ---


def _format_number(value: float) -> str:
    if value.is_integer() and abs(value) < 1e15:
        return str(int(value))
    return repr(value)


def print_barrier(ast: BarrierAst) -> str:
    """Canonical, fully parenthesised text; parse_barrier inverts it."""
    if isinstance(ast, Number):
        return _format_number(ast.value)
    if isinstance(ast, StateVar):
        return f"x[{ast.index}]"
    if isinstance(ast, Param):
        return f"p.{ast.name}"
    if isinstance(ast, Neg):
        return f"(-{print_barrier(ast.operand)})"
    if isinstance(ast, BinOp):
        return f"({print_barrier(ast.left)} {ast.op} {print_barrier(ast.right)})"
    if isinstance(ast, Call):
        return f"{ast.func}({', '.join(print_barrier(a) for a in ast.args)})"
    raise TypeError(f"Not a barrier AST node: {ast!r}")


# --- Introspection ---


def free_symbols(ast: BarrierAst) -> tuple[frozenset[int], frozenset[str]]:
    """State indices and parameter names referenced by the expression."""
    indices: set[int] = set()
    names: set[str] = set()
    stack = [ast]
    while stack:
        node = stack.pop()
        if isinstance(node, StateVar):
            indices.add(node.index)
        elif isinstance(node, Param):
            names.add(node.name)
        elif isinstance(node, Neg):
            stack.append(node.operand)
        elif isinstance(node, BinOp):
            stack.extend((node.left, node.right))
        elif isinstance(node, Call):
            stack.extend(node.args)
    return frozenset(indices), frozenset(names)


def check_symbols(
    ast: BarrierAst, state_dim: int, param_names: Sequence[str]
) -> list[str]:
    """Violations of the AST invariants against a state dimension and parameter schema."""
    indices, names = free_symbols(ast)
    problems = [
        f"x[{i}] is out of range for state dimension {state_dim}"
        for i in sorted(indices)
        if i >= state_dim
    ]
    known = set(param_names)
    problems += [
        f"p.{name} is not declared in the parameter schema"
        for name in sorted(names)
        if name not in known
    ]
    return problems


# --- Evaluation ---

Gradient = Optional[np.ndarray]  # None stands for the zero vector
ValueFn = Callable[[Sequence[float], Mapping[str, float]], float]
DualFn = Callable[[Sequence[float], Mapping[str, float], int], tuple[float, Gradient]]


def _finite(value: float, what: str) -> float:
    if not math.isfinite(value):
        raise DomainError(f"{what} produced a non-finite value")
    return value


def _add(a: Gradient, b: Gradient) -> Gradient:
    if a is None:
        return b
    if b is None:
        return a
    return a + b


def _scale(k: float, g: Gradient) -> Gradient:
    return None if g is None else k * g


def _unary_value(func: str, a: float) -> float:
    try:
        if func == "sin":
            return math.sin(a)
        if func == "cos":
            return math.cos(a)
        if func == "exp":
            return _finite(math.exp(a), "exp")
        if func == "tanh":
            return math.tanh(a)
        if func == "abs":
            return abs(a)
        if func == "ln":
            if a <= 0.0:
                raise DomainError(f"ln of non-positive value {a!r}")
            return math.log(a)
        if func == "sqrt":
            if a < 0.0:
                raise DomainError(f"sqrt of negative value {a!r}")
            return math.sqrt(a)
    except OverflowError as e:
        raise DomainError(f"{func} overflowed: {e}") from e
    raise UnknownFunctionError(f"Unknown function {func!r}", 0)


def _unary_derivative(func: str, a: float, value: float) -> float:
    if func == "sin":
        return math.cos(a)
    if func == "cos":
        return -math.sin(a)
    if func == "exp":
        return value
    if func == "tanh":
        return 1.0 - value * value
    if func == "abs":
        return 0.0 if a == 0.0 else math.copysign(1.0, a)
    if func == "ln":
        return 1.0 / a
    if func == "sqrt":
        if value == 0.0:
            raise DomainError("sqrt is not differentiable at 0")
        return 0.5 / value
    raise UnknownFunctionError(f"Unknown function {func!r}", 0)


def _power(a: float, b: float) -> float:
    if a < 0.0 and not float(b).is_integer():
        raise DomainError(f"negative base {a!r} with non-integer exponent {b!r}")
    if a == 0.0 and b < 0.0:
        raise DomainError("division by zero in 0 ^ negative")
    try:
        return _finite(math.pow(a, b), "^")
    except (OverflowError, ValueError) as e:
        raise DomainError(f"{a!r} ^ {b!r}: {e}") from e


def _divide(a: float, b: float) -> float:
    if b == 0.0:
        raise DomainError("division by zero")
    return _finite(a / b, "/")


def _pick(values: Sequence[float], func: str) -> int:
    best = 0
    for k in range(1, len(values)):
        # strict comparison keeps the first argument on ties
        if (values[k] < values[best]) if func == "min" else (values[k] > values[best]):
            best = k
    return best


def _compile_value(node: BarrierAst) -> ValueFn:
    if isinstance(node, Number):
        v = node.value
        if not math.isfinite(v):
            return lambda x, p: _finite(v, "literal")
        return lambda x, p: v
    if isinstance(node, StateVar):
        i = node.index
        return lambda x, p: float(x[i])
    if isinstance(node, Param):
        name = node.name
        return lambda x, p: float(p[name])
    if isinstance(node, Neg):
        f = _compile_value(node.operand)
        return lambda x, p: -f(x, p)
    if isinstance(node, BinOp):
        fl, fr = _compile_value(node.left), _compile_value(node.right)
        if node.op == "+":
            return lambda x, p: _finite(fl(x, p) + fr(x, p), "+")
        if node.op == "-":
            return lambda x, p: _finite(fl(x, p) - fr(x, p), "-")
        if node.op == "*":
            return lambda x, p: _finite(fl(x, p) * fr(x, p), "*")
        if node.op == "/":
            return lambda x, p: _divide(fl(x, p), fr(x, p))
        if node.op == "^":
            return lambda x, p: _power(fl(x, p), fr(x, p))
        raise ExpressionError(f"Unknown operator {node.op!r}")
    if isinstance(node, Call):
        fns = [_compile_value(a) for a in node.args]
        func = node.func
        if func in ("min", "max"):
            def extremum(x, p):
                values = [f(x, p) for f in fns]
                return values[_pick(values, func)]

            return extremum
        (f,) = fns
        return lambda x, p: _unary_value(func, f(x, p))
    raise TypeError(f"Not a barrier AST node: {node!r}")


def _compile_dual(node: BarrierAst) -> DualFn:
    if isinstance(node, Number):
        v = node.value
        if not math.isfinite(v):
            return lambda x, p, n: (_finite(v, "literal"), None)
        return lambda x, p, n: (v, None)
    if isinstance(node, StateVar):
        i = node.index

        def state(x, p, n):
            g = np.zeros(n)
            g[i] = 1.0
            return float(x[i]), g

        return state
    if isinstance(node, Param):
        name = node.name
        return lambda x, p, n: (float(p[name]), None)
    if isinstance(node, Neg):
        f = _compile_dual(node.operand)

        def neg(x, p, n):
            v, g = f(x, p, n)
            return -v, _scale(-1.0, g)

        return neg
    if isinstance(node, BinOp):
        return _compile_binop_dual(node)
    if isinstance(node, Call):
        fns = [_compile_dual(a) for a in node.args]
        func = node.func
        if func in ("min", "max"):
            def extremum(x, p, n):
                duals = [f(x, p, n) for f in fns]
                return duals[_pick([d[0] for d in duals], func)]

            return extremum
        (f,) = fns

        def unary(x, p, n):
            a, ga = f(x, p, n)
            v = _unary_value(func, a)
            if ga is None:
                return v, None
            return v, _unary_derivative(func, a, v) * ga

        return unary
    raise TypeError(f"Not a barrier AST node: {node!r}")


def _compile_binop_dual(node: BinOp) -> DualFn:
    fl, fr = _compile_dual(node.left), _compile_dual(node.right)
    op = node.op

    def binop(x, p, n):
        a, ga = fl(x, p, n)
        b, gb = fr(x, p, n)
        if op == "+":
            return _finite(a + b, "+"), _add(ga, gb)
        if op == "-":
            return _finite(a - b, "-"), _add(ga, _scale(-1.0, gb))
        if op == "*":
            return _finite(a * b, "*"), _add(_scale(b, ga), _scale(a, gb))
        if op == "/":
            v = _divide(a, b)
            return v, _add(_scale(1.0 / b, ga), _scale(-v / b, gb))
        if op == "^":
            v = _power(a, b)
            grad: Gradient = None
            if ga is not None and b != 0.0:
                grad = _scale(b * _power(a, b - 1.0), ga)
            if gb is not None:
                if a <= 0.0:
                    raise DomainError(f"exponent depends on the state but base is {a!r}")
                grad = _add(grad, _scale(v * math.log(a), gb))
            return v, grad
        raise ExpressionError(f"Unknown operator {op!r}")

    return binop


class CompiledBarrier:
    """An AST compiled to closures; hold on to one in tight loops."""

    def __init__(self, ast: BarrierAst):
        self.ast = ast
        self.state_indices, self.param_names = free_symbols(ast)
        self.min_state_dim = max(self.state_indices) + 1 if self.state_indices else 0
        self._value = _compile_value(ast)
        self._dual = _compile_dual(ast)

    def _check(self, x: Sequence[float], params: Mapping[str, float]) -> None:
        if len(x) < self.min_state_dim:
            raise BindingError(
                f"state has dimension {len(x)} but x[{self.min_state_dim - 1}] is referenced"
            )
        missing = [name for name in self.param_names if name not in params]
        if missing:
            raise BindingError(f"missing parameter(s): {', '.join(sorted(missing))}")

    def value(self, x: Sequence[float], params: Mapping[str, float]) -> float:
        self._check(x, params)
        return self._value(x, params)

    def value_and_grad(
        self, x: Sequence[float], params: Mapping[str, float]
    ) -> tuple[float, np.ndarray]:
        self._check(x, params)
        n = len(x)
        v, g = self._dual(x, params, n)
        return v, (np.zeros(n) if g is None else g)


@lru_cache(maxsize=512)
def compile_barrier(ast: BarrierAst) -> CompiledBarrier:
    return CompiledBarrier(ast)


def eval_barrier(
    ast: BarrierAst, x: Sequence[float], params: Mapping[str, float]
) -> float:
    """h(x). Raises DomainError outside the domain and BindingError on missing inputs."""
    return compile_barrier(ast).value(x, params)


def grad_barrier(
    ast: BarrierAst, x: Sequence[float], params: Mapping[str, float]
) -> np.ndarray:
    """Forward-mode ∇h(x) as an n-vector (n = len(x))."""
    return compile_barrier(ast).value_and_grad(x, params)[1]
