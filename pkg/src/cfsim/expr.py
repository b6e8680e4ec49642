"""Structural-equation expressions.

Grammar (EBNF)::

    expr       = comparison ;
    comparison = additive { cmp_op additive } ;
    additive   = term { ("+" | "-") term } ;
    term       = unary { ("*" | "/") unary } ;
    unary      = ("-" | "+") unary | power ;
    power      = primary [ "^" unary ] ;
    primary    = number | name | call | "(" expr ")" ;
    call       = name "(" expr [ (";" | ",") expr { "," expr } ] ")" ;
    cmp_op     = "<" | "<=" | "=" | "==" | "!=" | ">=" | ">" | "≤" | "≥" | "≠" ;

``if(cond, a, b)`` is a call-shaped special form.  Inside the expression of
an observed variable the name ``u`` denotes that variable's dedicated error
term.  ``;`` may separate the first call argument from the rest, which by
convention marks the uniform that drives an inverse-CDF builtin, as in
``categorical(u; 0.75, 0.15, 0.10)``.

Evaluation is vectorized: environment values may be floats or equal-length
float arrays.  NaN inputs (unavailable cells) propagate; a non-finite result
produced from finite inputs is a domain error.
"""
from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np
from scipy import special

ERROR_SYMBOL = "u"


class ExprError(Exception):
    """Base class for expression errors."""


class ExprSyntaxError(ExprError):
    def __init__(self, message, offset, expected=None):
        self.offset = offset
        self.expected = expected
        hint = f"; expected {expected}" if expected else ""
        super().__init__(f"{message} at byte {offset}{hint}")


class UnknownFunctionError(ExprSyntaxError):
    pass


class UnboundVariableError(ExprError):
    pass


class ExprDomainError(ExprError, ArithmeticError):
    pass


# ---------------------------------------------------------------------------
# AST
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Neg:
    operand: "Expr"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Compare:
    op: str
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class If:
    cond: "Expr"
    then: "Expr"
    other: "Expr"


@dataclass(frozen=True)
class Call:
    name: str
    args: Tuple["Expr", ...]
    semi: bool = False


Expr = Union[Num, Var, Neg, BinOp, Compare, If, Call]

# name -> (min args, max args or None)
BUILTINS = {
    "exp": (1, 1),
    "log": (1, 1),
    "sqrt": (1, 1),
    "abs": (1, 1),
    "floor": (1, 1),
    "min": (1, None),
    "max": (1, None),
    "logistic": (1, 1),
    "pnorm": (1, 1),
    "qnorm": (1, 1),
    "categorical": (2, None),
    "bernoulli": (2, 2),
    "poisson_inv": (2, 2),
    "ordlogit": (3, None),
    "qgamma": (2, 2),
}

_CMP_ALIASES = {"=": "==", "≤": "<=", "≥": ">=", "≠": "!="}
_CMP_OPS = {"<", "<=", "==", "!=", ">=", ">"}

# ---------------------------------------------------------------------------
# tokenizer / parser
# ---------------------------------------------------------------------------

_TWO_CHAR = {"<=", ">=", "==", "!="}
_ONE_CHAR = set("+-*/^(),;<>=≤≥≠")


def _tokenize(src):
    """Yield (kind, text, char_index) triples; kind in num/name/op/end."""
    out = []
    i, n = 0, len(src)
    while i < n:
        c = src[i]
        if c.isspace():
            i += 1
            continue
        if c.isdigit() or (c == "." and i + 1 < n and src[i + 1].isdigit()):
            j = i
            while j < n and src[j].isdigit():
                j += 1
            if j < n and src[j] == ".":
                j += 1
                while j < n and src[j].isdigit():
                    j += 1
            if j < n and src[j] in "eE":
                k = j + 1
                if k < n and src[k] in "+-":
                    k += 1
                if k < n and src[k].isdigit():
                    while k < n and src[k].isdigit():
                        k += 1
                    j = k
            out.append(("num", src[i:j], i))
            i = j
            continue
        if c.isalpha() or c == "_":
            j = i + 1
            while j < n and (src[j].isalnum() or src[j] in "_."):
                j += 1
            out.append(("name", src[i:j], i))
            i = j
            continue
        if src[i:i + 2] in _TWO_CHAR:
            out.append(("op", src[i:i + 2], i))
            i += 2
            continue
        if c in _ONE_CHAR:
            out.append(("op", c, i))
            i += 1
            continue
        raise ExprSyntaxError(f"unexpected character {c!r}", _byte_offset(src, i))
    out.append(("end", "", n))
    return out


def _byte_offset(src, char_index):
    return len(src[:char_index].encode("utf-8"))


class _Parser:
    def __init__(self, src):
        self.src = src
        self.toks = _tokenize(src)
        self.pos = 0

    def peek(self):
        return self.toks[self.pos]

    def advance(self):
        tok = self.toks[self.pos]
        self.pos += 1
        return tok

    def fail(self, message, expected=None, tok=None):
        tok = tok or self.peek()
        raise ExprSyntaxError(message, _byte_offset(self.src, tok[2]), expected)

    def expect(self, text):
        tok = self.peek()
        if tok[0] == "op" and tok[1] == text:
            return self.advance()
        got = tok[1] or "end of input"
        self.fail(f"unexpected {got!r}", expected=repr(text))

    def parse(self):
        node = self.comparison()
        if self.peek()[0] != "end":
            self.fail(f"unexpected {self.peek()[1]!r}", expected="operator or end of input")
        return node

    def comparison(self):
        left = self.additive()
        while True:
            tok = self.peek()
            if tok[0] != "op":
                return left
            op = _CMP_ALIASES.get(tok[1], tok[1])
            if op not in _CMP_OPS:
                return left
            self.advance()
            left = Compare(op, left, self.additive())

    def additive(self):
        left = self.term()
        while self.peek()[0] == "op" and self.peek()[1] in "+-":
            op = self.advance()[1]
            left = BinOp(op, left, self.term())
        return left

    def term(self):
        left = self.unary()
        while self.peek()[0] == "op" and self.peek()[1] in ("*", "/"):
            op = self.advance()[1]
            left = BinOp(op, left, self.unary())
        return left

    def unary(self):
        tok = self.peek()
        if tok[0] == "op" and tok[1] == "-":
            self.advance()
            return Neg(self.unary())
        if tok[0] == "op" and tok[1] == "+":
            self.advance()
            return self.unary()
        return self.power()

    def power(self):
        base = self.primary()
        if self.peek()[0] == "op" and self.peek()[1] == "^":
            self.advance()
            return BinOp("^", base, self.unary())
        return base

    def primary(self):
        tok = self.advance()
        kind, text = tok[0], tok[1]
        if kind == "num":
            return Num(float(text))
        if kind == "name":
            nxt = self.peek()
            if nxt[0] == "op" and nxt[1] == "(":
                return self.call(text, tok)
            return Var(text)
        if kind == "op" and text == "(":
            node = self.comparison()
            self.expect(")")
            return node
        self.fail(f"unexpected {text or 'end of input'!r}",
                  expected="number, name or '('", tok=tok)

    def call(self, name, name_tok):
        if name != "if" and name not in BUILTINS:
            raise UnknownFunctionError(f"unknown function {name!r}",
                                       _byte_offset(self.src, name_tok[2]),
                                       expected="one of " + ", ".join(sorted(BUILTINS)))
        self.expect("(")
        args = [self.comparison()]
        semi = False
        first_sep = True
        while self.peek()[0] == "op" and self.peek()[1] in (",", ";"):
            sep = self.advance()
            if sep[1] == ";":
                if not first_sep:
                    self.fail("';' may only follow the first argument", expected="','", tok=sep)
                semi = True
            first_sep = False
            args.append(self.comparison())
        self.expect(")")
        if name == "if":
            if len(args) != 3 or semi:
                self.fail("if() takes exactly three comma-separated arguments", tok=name_tok)
            return If(args[0], args[1], args[2])
        lo, hi = BUILTINS[name]
        if len(args) < lo or (hi is not None and len(args) > hi):
            want = str(lo) if hi == lo else (f"at least {lo}" if hi is None else f"{lo}..{hi}")
            self.fail(f"{name}() takes {want} arguments, got {len(args)}", tok=name_tok)
        return Call(name, tuple(args), semi)


def parse(source):
    """Parse expression text into an AST."""
    if isinstance(source, bytes):
        source = source.decode("utf-8")
    return _Parser(source).parse()


# ---------------------------------------------------------------------------
# printing
# ---------------------------------------------------------------------------

_PREC = {"cmp": 1, "+": 2, "-": 2, "*": 3, "/": 3, "neg": 4, "^": 5, "atom": 6}


def _prec(node):
    if isinstance(node, Compare):
        return 1
    if isinstance(node, BinOp):
        return _PREC[node.op]
    if isinstance(node, Neg):
        return 4
    if isinstance(node, Num) and node.value < 0:
        return 4
    return 6


def _wrap(node, min_prec):
    s = to_source(node)
    return f"({s})" if _prec(node) < min_prec else s


def _num_text(v):
    if not np.isfinite(v):
        raise ExprError(f"cannot print non-finite literal {v!r}")
    if float(v).is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(float(v))


def to_source(node):
    """Render an AST back to source text that parses to the same tree."""
    if isinstance(node, Num):
        return _num_text(node.value)
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Neg):
        return "-" + _wrap(node.operand, 4)
    if isinstance(node, BinOp):
        p = _PREC[node.op]
        if node.op == "^":
            return f"{_wrap(node.left, 6)}^{_wrap(node.right, 4)}"
        return f"{_wrap(node.left, p)} {node.op} {_wrap(node.right, p + 1)}"
    if isinstance(node, Compare):
        return f"{_wrap(node.left, 2)} {node.op} {_wrap(node.right, 2)}"
    if isinstance(node, If):
        return f"if({to_source(node.cond)}, {to_source(node.then)}, {to_source(node.other)})"
    if isinstance(node, Call):
        parts = [to_source(a) for a in node.args]
        if node.semi and len(parts) > 1:
            inner = parts[0] + "; " + ", ".join(parts[1:])
        else:
            inner = ", ".join(parts)
        return f"{node.name}({inner})"
    raise TypeError(f"not an expression node: {node!r}")


# ---------------------------------------------------------------------------
# structural queries
# ---------------------------------------------------------------------------

def _children(node):
    if isinstance(node, Neg):
        return (node.operand,)
    if isinstance(node, (BinOp, Compare)):
        return (node.left, node.right)
    if isinstance(node, If):
        return (node.cond, node.then, node.other)
    if isinstance(node, Call):
        return node.args
    return ()


def free_vars(node):
    """Set of identifiers referenced by the expression."""
    out = set()
    stack = [node]
    while stack:
        cur = stack.pop()
        if isinstance(cur, Var):
            out.add(cur.name)
        else:
            stack.extend(_children(cur))
    return out


def _signed_terms(node, sign, acc):
    if isinstance(node, BinOp) and node.op in "+-":
        _signed_terms(node.left, sign, acc)
        _signed_terms(node.right, sign if node.op == "+" else -sign, acc)
    elif isinstance(node, Neg):
        _signed_terms(node.operand, -sign, acc)
    else:
        acc.append((sign, node))
    return acc


def is_additive_in_error(node, error=ERROR_SYMBOL):
    """True if the expression reads ``g(parents) + u`` syntactically.

    Terms of the top-level +/- chain are inspected: exactly one must be the
    bare error symbol with positive sign and no other term may mention it.
    """
    terms = _signed_terms(node, 1, [])
    hits = [(s, t) for s, t in terms if t == Var(error)]
    if len(hits) != 1 or hits[0][0] != 1:
        return False
    return all(error not in free_vars(t) for s, t in terms if t != Var(error))


def substitute(node, mapping):
    """Replace variable references by expressions (used for renaming)."""
    if isinstance(node, Var):
        return mapping.get(node.name, node)
    if isinstance(node, Num):
        return node
    if isinstance(node, Neg):
        return Neg(substitute(node.operand, mapping))
    if isinstance(node, BinOp):
        return BinOp(node.op, substitute(node.left, mapping), substitute(node.right, mapping))
    if isinstance(node, Compare):
        return Compare(node.op, substitute(node.left, mapping), substitute(node.right, mapping))
    if isinstance(node, If):
        return If(*(substitute(c, mapping) for c in (node.cond, node.then, node.other)))
    return Call(node.name, tuple(substitute(a, mapping) for a in node.args), node.semi)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def _finite(x):
    return np.isfinite(x)


def _check(result, inputs, what, errors):
    """Flag non-finite outputs whose inputs were all finite."""
    ok = np.isfinite(result)
    if np.all(ok):
        return result
    bad = ~ok
    for a in inputs:
        bad = bad & _finite(a)
    if np.any(bad):
        if errors == "raise":
            where = ""
            if np.ndim(bad):
                where = f" (first at row {int(np.flatnonzero(bad)[0])})"
            raise ExprDomainError(f"domain error in {what}{where}")
        result = np.where(bad, np.nan, result)
    return result


def _invalid(mask, what, errors, result):
    """Raise (or blank to NaN) where an explicit domain predicate fails."""
    if not np.any(mask):
        return result
    if errors == "raise":
        where = f" (first at row {int(np.flatnonzero(mask)[0])})" if np.ndim(mask) else ""
        raise ExprDomainError(f"domain error in {what}{where}")
    return np.where(mask, np.nan, result)


def _categorical_from_cum(u, cum, total, what, errors):
    bad = np.abs(total - 1.0) > 1e-9
    k = np.ones(np.broadcast(u, total).shape)
    for c in cum[:-1]:
        k = k + (u >= c)
    out = np.where(np.isnan(u) | np.isnan(total), np.nan, k)
    return _invalid(bad & np.isfinite(total), what + ": probabilities must sum to 1", errors, out)


def _call(name, vals, errors):
    with np.errstate(all="ignore"):
        if name == "exp":
            r = np.exp(vals[0])
        elif name == "log":
            x = vals[0]
            r = _invalid(x <= 0, "log", errors, np.log(np.where(x > 0, x, np.nan)))
            return r
        elif name == "sqrt":
            x = vals[0]
            return _invalid(x < 0, "sqrt", errors, np.sqrt(np.where(x >= 0, x, np.nan)))
        elif name == "abs":
            r = np.abs(vals[0])
        elif name == "floor":
            r = np.floor(vals[0])
        elif name == "min":
            r = vals[0]
            for v in vals[1:]:
                r = np.minimum(r, v)
        elif name == "max":
            r = vals[0]
            for v in vals[1:]:
                r = np.maximum(r, v)
        elif name == "logistic":
            r = special.expit(vals[0])
        elif name == "pnorm":
            r = special.ndtr(vals[0])
        elif name == "qnorm":
            p = vals[0]
            return _invalid((p <= 0) | (p >= 1), "qnorm", errors, special.ndtri(p))
        elif name == "categorical":
            u, probs = vals[0], vals[1:]
            neg = np.zeros(np.shape(u), dtype=bool)
            cum, acc = [], 0.0
            for p in probs:
                neg = neg | (p < 0)
                acc = acc + p
                cum.append(acc)
            out = _categorical_from_cum(u, cum, acc, "categorical", errors)
            return _invalid(neg, "categorical: negative probability", errors, out)
        elif name == "bernoulli":
            u, p = vals
            out = np.where(np.isnan(u) | np.isnan(p), np.nan, (u >= 1.0 - p).astype(float))
            return _invalid((p < 0) | (p > 1), "bernoulli", errors, out)
        elif name == "poisson_inv":
            return _poisson_inv(vals[0], vals[1], errors)
        elif name == "ordlogit":
            u, eta, cuts = vals[0], vals[1], vals[2:]
            cum = [special.expit(c - eta) for c in cuts]
            k = np.ones(np.broadcast(u, eta).shape)
            unordered = np.zeros(k.shape, dtype=bool)
            for j, c in enumerate(cum):
                k = k + (u >= c)
                if j:
                    unordered = unordered | (cuts[j] < cuts[j - 1])
            out = np.where(np.isnan(u) | np.isnan(eta), np.nan, k)
            return _invalid(unordered, "ordlogit: cut points must be nondecreasing", errors, out)
        elif name == "qgamma":
            p, shape = vals
            bad = (p <= 0) | (p >= 1) | (shape <= 0)
            safe_p = np.where(bad, 0.5, p)
            safe_a = np.where(bad, 1.0, shape)
            return _invalid(bad, "qgamma", errors, special.gammaincinv(safe_a, safe_p))
        else:  # pragma: no cover - parse() rejects unknown names
            raise ExprError(f"unknown function {name!r}")
    return _check(r, vals, name, errors)


def _poisson_inv(u, lam, errors):
    """Smallest k >= 0 with P(Poisson(lam) <= k) >= u."""
    u_b, lam_b = np.broadcast_arrays(np.asarray(u, float), np.asarray(lam, float))
    bad = (lam_b < 0) | (u_b >= 1) | (u_b < 0)
    ok = ~bad & np.isfinite(u_b) & np.isfinite(lam_b)
    k = np.full(u_b.shape, np.nan)
    if np.any(ok):
        uu, ll = u_b[ok], lam_b[ok]
        with np.errstate(all="ignore"):
            start = np.floor(special.pdtrik(uu, ll))
        start = np.where(np.isfinite(start), np.maximum(start, 0.0), 0.0)
        kk = start.copy()
        # walk down while the previous count already reaches u
        down = (kk > 0) & (special.pdtr(kk - 1, ll) >= uu)
        while np.any(down):
            kk = np.where(down, kk - 1, kk)
            down = (kk > 0) & (special.pdtr(kk - 1, ll) >= uu)
        up = special.pdtr(kk, ll) < uu
        while np.any(up):
            kk = np.where(up, kk + 1, kk)
            up = special.pdtr(kk, ll) < uu
        k[ok] = kk
    out = k if np.ndim(u) or np.ndim(lam) else k[()]
    return _invalid(bad, "poisson_inv", errors, out)


def _subset(env, idx, n):
    return {k: (v[idx] if np.ndim(v) and np.shape(v)[0] == n else v) for k, v in env.items()}


def _eval(node, env, errors):
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Var):
        try:
            return env[node.name]
        except KeyError:
            raise UnboundVariableError(f"unbound variable {node.name!r}") from None
    if isinstance(node, Neg):
        return -_eval(node.operand, env, errors)
    if isinstance(node, BinOp):
        a = _eval(node.left, env, errors)
        b = _eval(node.right, env, errors)
        with np.errstate(all="ignore"):
            if node.op == "+":
                r = a + b
            elif node.op == "-":
                r = a - b
            elif node.op == "*":
                r = a * b
            elif node.op == "/":
                zero = np.asarray(b) == 0
                r = _invalid(zero & _finite(a), "division by zero", errors, np.true_divide(a, b))
                return _check(r, (a, b), "division", errors)
            else:
                r = np.power(a, b)
        return _check(r, (a, b), node.op, errors)
    if isinstance(node, Compare):
        a = _eval(node.left, env, errors)
        b = _eval(node.right, env, errors)
        with np.errstate(invalid="ignore"):
            if node.op == "<":
                r = np.less(a, b)
            elif node.op == "<=":
                r = np.less_equal(a, b)
            elif node.op == "==":
                r = np.equal(a, b)
            elif node.op == "!=":
                r = np.not_equal(a, b)
            elif node.op == ">=":
                r = np.greater_equal(a, b)
            else:
                r = np.greater(a, b)
        na = np.isnan(a) | np.isnan(b)
        return np.where(na, np.nan, r.astype(float))
    if isinstance(node, If):
        cond = np.asarray(_eval(node.cond, env, errors), dtype=float)
        if cond.ndim == 0:
            if np.isnan(cond):
                return np.nan
            return _eval(node.then if cond != 0 else node.other, env, errors)
        n = cond.shape[0]
        out = np.full(n, np.nan)
        take = np.flatnonzero((cond != 0) & ~np.isnan(cond))
        skip = np.flatnonzero(cond == 0)
        for idx, branch in ((take, node.then), (skip, node.other)):
            if idx.size:
                out[idx] = _eval(branch, _subset(env, idx, n), errors)
        return out
    if isinstance(node, Call):
        vals = [_eval(a, env, errors) for a in node.args]
        return _call(node.name, vals, errors)
    raise TypeError(f"not an expression node: {node!r}")


def evaluate(node, env, errors="raise"):
    """Evaluate ``node`` under ``env``.

    Args:
        node: parsed expression (text is parsed on the fly).
        env: mapping of names to floats or equal-length float arrays.
        errors: ``"raise"`` raises :class:`ExprDomainError` on domain
            violations; ``"nan"`` marks those cells NaN instead.

    Returns:
        A float when every bound value is scalar, else a float64 array.
    """
    if isinstance(node, str):
        node = parse(node)
    out = _eval(node, env, errors)
    if np.ndim(out) == 0:
        return float(out)
    return np.asarray(out, dtype=np.float64)
