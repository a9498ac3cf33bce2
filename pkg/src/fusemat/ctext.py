"""Tiny evaluator for the C expression subset the kernel generator emits.

Used to check generated access text against the reference interpreter: the
text is parsed once into a small tuple tree and then evaluated per element
with the same typed-scalar semantics the kernels have.  Supported grammar:
identifiers, integer/float literals, unary minus, binary ``+ - * / >``,
indexing ``name[expr]``, calls ``f(expr)``, parentheses and C casts
``(float) (double) (int) (unsigned int) (long long)``.
"""

from __future__ import annotations

import re

import numpy as np

from .errors import FusematError

_TOKEN_RE = re.compile(r"\s*(?:(?P<name>[A-Za-z_][A-Za-z0-9_]*)|(?P<num>\d+(?:\.\d+)?)|(?P<punct>[()\[\]+\-*/>,]))")

_TYPE_WORDS = {"float", "double", "int", "unsigned", "long"}

_FUNCS = {
    "expf": lambda v: np.float32(np.exp(np.float32(v))),
    "logf": lambda v: np.float32(np.log(np.float32(v))),
    "sqrtf": lambda v: np.float32(np.sqrt(np.float32(v))),
    "tanhf": lambda v: np.float32(np.tanh(np.float32(v))),
    "exp": lambda v: np.float64(np.exp(np.float64(v))),
    "log": lambda v: np.float64(np.log(np.float64(v))),
    "sqrt": lambda v: np.float64(np.sqrt(np.float64(v))),
    "tanh": lambda v: np.float64(np.tanh(np.float64(v))),
}


def _tokenize(text: str) -> list[str]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if not m or m.end() == pos:
            if text[pos:].strip():
                raise FusematError(f"cannot tokenize at: {text[pos:pos + 20]!r}")
            break
        tokens.append(m.group("name") or m.group("num") or m.group("punct"))
        pos = m.end()
    return tokens


class _Parser:
    def __init__(self, tokens: list[str]):
        self.tokens = tokens
        self.pos = 0

    def peek(self, ahead: int = 0) -> str | None:
        i = self.pos + ahead
        return self.tokens[i] if i < len(self.tokens) else None

    def next(self) -> str:
        tok = self.peek()
        if tok is None:
            raise FusematError("unexpected end of expression text")
        self.pos += 1
        return tok

    def expect(self, tok: str) -> None:
        got = self.next()
        if got != tok:
            raise FusematError(f"expected {tok!r}, got {got!r}")

    def parse(self):
        node = self.compare()
        if self.peek() is not None:
            raise FusematError(f"trailing tokens: {self.tokens[self.pos:]}")
        return node

    def compare(self):
        node = self.add()
        if self.peek() == ">":
            self.next()
            node = ("gt", node, self.add())
        return node

    def add(self):
        node = self.mul()
        while self.peek() in ("+", "-"):
            op = self.next()
            node = ("bin", op, node, self.mul())
        return node

    def mul(self):
        node = self.unary()
        while self.peek() in ("*", "/"):
            op = self.next()
            node = ("bin", op, node, self.unary())
        return node

    def unary(self):
        if self.peek() == "-":
            self.next()
            return ("neg", self.unary())
        return self.postfix()

    def postfix(self):
        node = self.primary()
        while self.peek() == "[":
            self.next()
            index = self.compare()
            self.expect("]")
            node = ("idx", node, index)
        return node

    def _try_cast(self):
        """At an open paren: a cast iff the parens hold only type words."""
        words = []
        i = 1
        while True:
            tok = self.peek(i)
            if tok in _TYPE_WORDS:
                words.append(tok)
                i += 1
            elif tok == ")" and words:
                return words, i
            else:
                return None, 0

    def primary(self):
        tok = self.peek()
        if tok is None:
            raise FusematError("unexpected end of expression text")
        if tok == "(":
            words, skip = self._try_cast()
            if words:
                self.pos += skip + 1
                return ("cast", " ".join(words), self.unary())
            self.next()
            node = self.compare()
            self.expect(")")
            return node
        if re.fullmatch(r"\d+(?:\.\d+)?", tok):
            self.next()
            return ("num", float(tok) if "." in tok else int(tok))
        self.next()
        if self.peek() == "(":
            self.next()
            args = [self.compare()]
            while self.peek() == ",":
                self.next()
                args.append(self.compare())
            self.expect(")")
            return ("call", tok, args)
        return ("name", tok)


def _wrap32(value: int, signed: bool):
    value = int(value) & 0xFFFFFFFF
    if signed and value >= 2**31:
        value -= 2**32
    return np.int32(value) if signed else np.uint32(value)


def _cast(typename: str, value):
    if typename == "float":
        return np.float32(value)
    if typename == "double":
        return np.float64(value)
    if typename == "long long":
        return int(value)
    if typename == "int":
        return _wrap32(value, signed=True)
    if typename == "unsigned int":
        return _wrap32(value, signed=False)
    raise FusematError(f"unknown cast {typename!r}")


def _eval(node, env):
    tag = node[0]
    if tag == "num":
        return node[1]
    if tag == "name":
        try:
            return env[node[1]]
        except KeyError:
            raise FusematError(f"unbound name {node[1]!r}") from None
    if tag == "idx":
        base = _eval(node[1], env)
        return base[int(_eval(node[2], env))]
    if tag == "call":
        fn = _FUNCS.get(node[1])
        if fn is None:
            raise FusematError(f"unknown function {node[1]!r}")
        return fn(*[_eval(a, env) for a in node[2]])
    if tag == "cast":
        return _cast(node[1], _eval(node[2], env))
    if tag == "neg":
        return -_eval(node[1], env)
    if tag == "gt":
        return int(_eval(node[1], env) > _eval(node[2], env))
    op = node[1]
    left, right = _eval(node[2], env), _eval(node[3], env)
    if op == "+":
        return left + right
    if op == "-":
        return left - right
    if op == "*":
        return left * right
    return left / right


class CompiledText:
    """Parsed access text; evaluate against an environment per element."""

    def __init__(self, text: str):
        self.text = text
        self._tree = _Parser(_tokenize(text)).parse()

    def evaluate(self, env: dict):
        with np.errstate(all="ignore"):
            return _eval(self._tree, env)


def evaluate_text(text: str, env: dict):
    return CompiledText(text).evaluate(env)
