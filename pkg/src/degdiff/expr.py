"""Scalar test functions parsed from text, with forward-mode derivatives.

Grammar (whitespace is ignored)::

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := '-' unary | power
    power  := atom ('^' '-'? integer)?
    atom   := number | var | func '(' expr ')' | '(' expr ')'
    var    := 'x' integer            (1-based)
    func   := exp | log | sin | cos | sqrt | abs

``^`` binds tighter than unary minus, so ``-x1^2`` is ``-(x1^2)``.
Exponents are integer constants; write ``exp(a*log(x1))`` for fractional powers.

Multi-time cylindrical functions f(X_{t_1}, ..., X_{t_m}) of an n-dimensional
process use arity m*n: variable ``x{(i-1)*n + j}`` is coordinate j at time t_i.

Evaluation is vectorised: a point array of shape (..., k) gives values of
shape (...). Derivatives use dual numbers, one pass per direction.
"""

import re

import numpy as np

FUNCTIONS = ("exp", "log", "sin", "cos", "sqrt", "abs")


class ExprError(ValueError):
    pass


class ExprSyntaxError(ExprError):
    def __init__(self, message, offset):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class ExprArityError(ExprError):
    pass


class ExprDomainError(ExprError, ArithmeticError):
    pass


class Dual:
    """Value and directional derivative carried together (arrays or floats)."""

    __slots__ = ("value", "deriv")

    def __init__(self, value, deriv=0.0):
        self.value = value
        self.deriv = deriv

    def __repr__(self):
        return f"Dual({self.value!r}, {self.deriv!r})"

    @staticmethod
    def _lift(other):
        return other if isinstance(other, Dual) else Dual(other, 0.0)

    def __add__(self, other):
        other = self._lift(other)
        return Dual(self.value + other.value, self.deriv + other.deriv)

    __radd__ = __add__

    def __sub__(self, other):
        other = self._lift(other)
        return Dual(self.value - other.value, self.deriv - other.deriv)

    def __rsub__(self, other):
        return self._lift(other) - self

    def __neg__(self):
        return Dual(-self.value, -self.deriv)

    def __mul__(self, other):
        other = self._lift(other)
        return Dual(self.value * other.value,
                    self.deriv * other.value + self.value * other.deriv)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._lift(other)
        _nonzero(other.value, "division by zero")
        q = self.value / other.value
        return Dual(q, (self.deriv - q * other.deriv) / other.value)

    def __rtruediv__(self, other):
        return self._lift(other) / self

    def __pow__(self, k):
        if not isinstance(k, int):
            raise TypeError("dual powers take integer exponents")
        if k == 0:
            return Dual(np.ones_like(self.value) * 1.0, np.zeros_like(self.value) * 0.0)
        if k < 0:
            _nonzero(self.value, "negative power of zero")
        return Dual(self.value ** k, k * self.value ** (k - 1) * self.deriv)


def _nonzero(v, what):
    if np.any(np.asarray(v) == 0):
        raise ExprDomainError(what)


def _apply(name, a):
    """Apply a named elementary function to a float array or a Dual."""
    dual = isinstance(a, Dual)
    v = a.value if dual else np.asarray(a, dtype=float)
    if name == "exp":
        out = np.exp(v)
        d = out
    elif name == "log":
        if np.any(v <= 0):
            raise ExprDomainError("log of non-positive value")
        out = np.log(v)
        d = 1.0 / v
    elif name == "sin":
        out = np.sin(v)
        d = np.cos(v)
    elif name == "cos":
        out = np.cos(v)
        d = -np.sin(v)
    elif name == "sqrt":
        if np.any(v < 0) or (dual and np.any(v == 0)):
            raise ExprDomainError("sqrt outside its smooth domain")
        out = np.sqrt(v)
        d = 0.5 / out if dual else None
    elif name == "abs":
        out = np.abs(v)
        d = np.sign(v)
    else:  # guarded by the parser
        raise ExprError(f"unknown function {name}")
    if dual:
        return Dual(out, d * a.deriv)
    return out


# --- AST -----------------------------------------------------------------

class Node:
    def evaluate(self, env):
        raise NotImplementedError

    def to_text(self):
        raise NotImplementedError

    def max_var(self):
        return 0

    def uses(self, name):
        return False


class Num(Node):
    def __init__(self, value):
        self.value = float(value)

    def evaluate(self, env):
        return self.value

    def to_text(self):
        return repr(self.value)


class Var(Node):
    def __init__(self, index):
        self.index = index

    def evaluate(self, env):
        return env[self.index - 1]

    def to_text(self):
        return f"x{self.index}"

    def max_var(self):
        return self.index


class Neg(Node):
    def __init__(self, arg):
        self.arg = arg

    def evaluate(self, env):
        return -self.arg.evaluate(env)

    def to_text(self):
        return f"(-{self.arg.to_text()})"

    def max_var(self):
        return self.arg.max_var()

    def uses(self, name):
        return self.arg.uses(name)


class BinOp(Node):
    def __init__(self, op, left, right):
        self.op, self.left, self.right = op, left, right

    def evaluate(self, env):
        a = self.left.evaluate(env)
        b = self.right.evaluate(env)
        if self.op == "+":
            return a + b
        if self.op == "-":
            return a - b
        if self.op == "*":
            return a * b
        if isinstance(a, Dual) or isinstance(b, Dual):
            return Dual._lift(a) / b
        _nonzero(b, "division by zero")
        return a / b

    def to_text(self):
        return f"({self.left.to_text()} {self.op} {self.right.to_text()})"

    def max_var(self):
        return max(self.left.max_var(), self.right.max_var())

    def uses(self, name):
        return self.left.uses(name) or self.right.uses(name)


class Pow(Node):
    def __init__(self, base, exponent):
        self.base, self.exponent = base, int(exponent)

    def evaluate(self, env):
        a = self.base.evaluate(env)
        if isinstance(a, Dual):
            return a ** self.exponent
        a = np.asarray(a, dtype=float)
        if self.exponent < 0:
            _nonzero(a, "negative power of zero")
        return a ** self.exponent

    def to_text(self):
        return f"({self.base.to_text()}^{self.exponent})"

    def max_var(self):
        return self.base.max_var()

    def uses(self, name):
        return self.base.uses(name)


class Call(Node):
    def __init__(self, name, arg):
        self.name, self.arg = name, arg

    def evaluate(self, env):
        return _apply(self.name, self.arg.evaluate(env))

    def to_text(self):
        return f"{self.name}({self.arg.to_text()})"

    def max_var(self):
        return self.arg.max_var()

    def uses(self, name):
        return self.name == name or self.arg.uses(name)


# --- parser --------------------------------------------------------------

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<ident>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^()]))"
)


def _tokenize(text):
    tokens = []
    pos = 0
    raw = text.encode("utf-8")
    byte_at = lambda i: len(text[:i].encode("utf-8"))  # noqa: E731
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            start = pos + (len(text[pos:]) - len(text[pos:].lstrip()))
            raise ExprSyntaxError(f"unexpected character {text[start]!r}", byte_at(start))
        kind = m.lastgroup
        tokens.append((kind, m.group(kind), byte_at(m.start(kind))))
        pos = m.end()
    tokens.append(("end", "", len(raw)))
    return tokens


class _Parser:
    def __init__(self, text):
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value):
        kind, val, off = self.peek()
        if kind != "op" or val != value:
            found = "end of input" if kind == "end" else repr(val)
            raise ExprSyntaxError(f"expected {value!r}, found {found}", off)
        self.take()

    def parse(self):
        node = self.expr()
        kind, val, off = self.peek()
        if kind != "end":
            raise ExprSyntaxError(f"unexpected {val!r}", off)
        return node

    def expr(self):
        node = self.term()
        while self.peek()[0] == "op" and self.peek()[1] in "+-":
            op = self.take()[1]
            node = BinOp(op, node, self.term())
        return node

    def term(self):
        node = self.unary()
        while self.peek()[0] == "op" and self.peek()[1] in "*/":
            op = self.take()[1]
            node = BinOp(op, node, self.unary())
        return node

    def unary(self):
        if self.peek()[:2] == ("op", "-"):
            self.take()
            return Neg(self.unary())
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek()[:2] == ("op", "^"):
            self.take()
            sign = 1
            if self.peek()[:2] == ("op", "-"):
                self.take()
                sign = -1
            kind, val, off = self.peek()
            if kind != "num" or not val.isdigit():
                found = "end of input" if kind == "end" else repr(val)
                raise ExprSyntaxError(f"expected integer exponent, found {found}", off)
            self.take()
            return Pow(base, sign * int(val))
        return base

    def atom(self):
        kind, val, off = self.peek()
        if kind == "num":
            self.take()
            return Num(val)
        if kind == "ident":
            self.take()
            if re.fullmatch(r"x[1-9]\d*", val):
                return Var(int(val[1:]))
            if val in FUNCTIONS:
                self.expect("(")
                arg = self.expr()
                self.expect(")")
                return Call(val, arg)
            raise ExprSyntaxError(f"unknown identifier {val!r}", off)
        if kind == "op" and val == "(":
            self.take()
            node = self.expr()
            self.expect(")")
            return node
        found = "end of input" if kind == "end" else repr(val)
        raise ExprSyntaxError(f"expected a number, variable, function or '(', found {found}", off)


class ExprFunction:
    """A parsed scalar function of ``arity`` variables."""

    def __init__(self, text, arity, ast=None):
        self.text = text
        self.arity = int(arity)
        self.ast = ast if ast is not None else _Parser(text).parse()
        if self.ast.max_var() > self.arity:
            raise ExprArityError(
                f"variable x{self.ast.max_var()} exceeds arity {self.arity}")

    def __repr__(self):
        return f"ExprFunction({self.text!r}, arity={self.arity})"

    @property
    def smooth(self):
        """False when the expression uses ``abs``."""
        return not self.ast.uses("abs")

    def to_text(self):
        return self.ast.to_text()

    def _env(self, points):
        points = np.asarray(points, dtype=float)
        if points.shape[-1] != self.arity:
            raise ExprArityError(
                f"point has {points.shape[-1]} coordinates, expected {self.arity}")
        return [points[..., i] for i in range(self.arity)], points.shape[:-1]

    def __call__(self, points):
        env, shape = self._env(points)
        out = self.ast.evaluate(env)
        return np.broadcast_to(np.asarray(out, dtype=float), shape).copy() if shape else float(out)

    def directional(self, points, direction):
        """Value and derivative along ``direction`` (broadcast against points)."""
        env, shape = self._env(points)
        direction = np.asarray(direction, dtype=float)
        denv = [Dual(env[i], direction[..., i]) for i in range(self.arity)]
        out = self.ast.evaluate(denv)
        out = Dual._lift(out)
        val = np.broadcast_to(np.asarray(out.value, dtype=float), shape)
        der = np.broadcast_to(np.asarray(out.deriv, dtype=float), shape)
        if not shape:
            return float(val), float(der)
        return val.copy(), der.copy()

    def grad(self, points):
        """Exact gradient, one dual pass per coordinate; shape (..., arity)."""
        points = np.asarray(points, dtype=float)
        cols = []
        for i in range(self.arity):
            e = np.zeros(self.arity)
            e[i] = 1.0
            cols.append(self.directional(points, e)[1])
        return np.stack(cols, axis=-1)


def parse(text, arity):
    """Parse ``text`` into an :class:`ExprFunction` of the given arity."""
    if not text or not text.strip():
        raise ExprSyntaxError("empty expression", 0)
    return ExprFunction(text, arity)


def grad(f, point):
    return f.grad(point)


HEISENBERG_FIELDS = ("X", "Y", "Xhat", "Yhat")


def heisenberg_field_coefficients(points, field):
    """Coefficient vectors of the invariant fields at ``points`` (..., 3).

    X = d_x - (y/2) d_z, Y = d_y + (x/2) d_z are left invariant;
    Xhat = d_x + (y/2) d_z, Yhat = d_y - (x/2) d_z are right invariant.
    """
    points = np.asarray(points, dtype=float)
    x, y = points[..., 0], points[..., 1]
    one, zero = np.ones_like(x), np.zeros_like(x)
    if field == "X":
        c = (one, zero, -y / 2)
    elif field == "Y":
        c = (zero, one, x / 2)
    elif field == "Xhat":
        c = (one, zero, y / 2)
    elif field == "Yhat":
        c = (zero, one, -x / 2)
    else:
        raise ValueError(f"unknown field {field!r}; expected one of {HEISENBERG_FIELDS}")
    return np.stack(c, axis=-1)


def heisenberg_field_apply(f, point, field):
    """Derivative of ``f`` (arity 3) along one of X, Y, Xhat, Yhat at ``point``."""
    if f.arity != 3:
        raise ExprArityError("Heisenberg fields act on functions of arity 3")
    return f.directional(point, heisenberg_field_coefficients(point, field))[1]
