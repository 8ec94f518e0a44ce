"""Expression-DAG intermediate representation and the shader DSL front end.

A program is a flat list of immutable nodes in topological order (operands
always precede their users). Construction goes through GraphBuilder, which
hash-conses nodes so structurally identical subexpressions share one id.

Grammar accepted by parse_program:

    program := stmt+
    stmt    := ("let" ID "=" expr) | ("out" ID "=" expr)
    expr    := term (("+" | "-") term)*
    term    := factor (("*" | "/" | "%") factor)*
    factor  := "-" factor | primary
    primary := FLOAT | ID | ID "(" expr ("," expr)* ")" | "(" expr ")"

The identifiers x and y are reserved spatial inputs, t is a reserved scalar
parameter; referencing one declares it. min/max lower to select plus a
comparison, abs to select, and pow to pow-int / reciprocal / exp-log chains,
so later stages never see them.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field

SPATIAL_INPUTS = ("x", "y")
PARAMETER_INPUTS = ("t",)
RESERVED = SPATIAL_INPUTS + PARAMETER_INPUTS

UNARY_OPS = frozenset({
    "neg", "recip", "sqrt", "sin", "cos", "tan", "sinh", "cosh", "tanh",
    "exp", "log", "fract", "floor", "ceil", "heaviside", "powi",
})
BINARY_OPS = frozenset({
    "add", "sub", "mul", "div", "mod",
    "cmp_gt", "cmp_ge", "cmp_lt", "cmp_le",
})
COMPARISON_OPS = frozenset({"cmp_gt", "cmp_ge", "cmp_lt", "cmp_le"})
ALL_OPS = UNARY_OPS | BINARY_OPS | frozenset({"select", "const", "input"})

MAX_POW_INT = 8


class ParseError(ValueError):
    def __init__(self, message: str, line: int, col: int):
        super().__init__(f"{message} (line {line}, column {col})")
        self.line = line
        self.col = col


@dataclass(frozen=True)
class Node:
    """One DAG node. `value` is the const payload, `power` the pow-int
    exponent, `name` the input variable name; each is None elsewhere."""
    id: int
    op: str
    operands: tuple[int, ...] = ()
    value: float | None = None
    power: int | None = None
    name: str | None = None


@dataclass(frozen=True)
class NodeAddress:
    """Names a node, optionally meaning its whole subtree (tuner mutation)."""
    node_id: int
    whole_subtree: bool = False


@dataclass
class ProgramGraph:
    """Immutable-by-convention program: nodes[i].id == i, topologically
    ordered, outputs are (name, node id) pairs in declaration order."""
    name: str
    nodes: list[Node]
    outputs: list[tuple[str, int]]
    inputs: dict[str, int]
    input_roles: dict[str, str]

    def node(self, node_id: int) -> Node:
        if not 0 <= node_id < len(self.nodes):
            raise KeyError(f"no node {node_id} in program '{self.name}'")
        return self.nodes[node_id]

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def input_ids(self) -> set[int]:
        return set(self.inputs.values())

    def non_input_ids(self) -> list[int]:
        return [n.id for n in self.nodes if n.op != "input"]

    def output_names(self) -> list[str]:
        return [name for name, _ in self.outputs]


class GraphBuilder:
    """Hash-consing constructor; add() returns the id of an existing
    structurally identical node when there is one."""

    def __init__(self, name: str = "program"):
        self.name = name
        self._nodes: list[Node] = []
        self._index: dict[tuple, int] = {}
        self._inputs: dict[str, int] = {}
        self._roles: dict[str, str] = {}
        self._outputs: list[tuple[str, int]] = []

    def _intern(self, op: str, operands: tuple[int, ...] = (),
                value: float | None = None, power: int | None = None,
                name: str | None = None) -> int:
        key = (op, operands, value, power, name)
        hit = self._index.get(key)
        if hit is not None:
            return hit
        node = Node(len(self._nodes), op, operands, value, power, name)
        self._nodes.append(node)
        self._index[key] = node.id
        return node.id

    def const(self, value: float) -> int:
        return self._intern("const", value=float(value))

    def input_var(self, name: str) -> int:
        if name not in RESERVED:
            raise ValueError(f"unknown input variable '{name}'")
        nid = self._intern("input", name=name)
        self._inputs[name] = nid
        self._roles[name] = "spatial" if name in SPATIAL_INPUTS else "parameter"
        return nid

    def unary(self, op: str, a: int, power: int | None = None) -> int:
        if op not in UNARY_OPS:
            raise ValueError(f"not a unary op: {op}")
        if op == "neg":
            n = self._nodes[a]
            if n.op == "const":
                return self.const(-n.value)
        if op == "powi":
            if power is None or not 2 <= power <= MAX_POW_INT:
                raise ValueError(f"pow-int exponent out of range: {power}")
        return self._intern(op, (a,), power=power)

    def binary(self, op: str, a: int, b: int) -> int:
        if op not in BINARY_OPS:
            raise ValueError(f"not a binary op: {op}")
        return self._intern(op, (a, b))

    def select(self, cond: int, a: int, b: int) -> int:
        return self._intern("select", (cond, a, b))

    def output(self, name: str, node_id: int) -> None:
        if any(n == name for n, _ in self._outputs):
            raise ValueError(f"duplicate output '{name}'")
        self._outputs.append((name, node_id))

    # sugar that keeps min/max/abs/pow out of the op inventory
    def minimum(self, a: int, b: int) -> int:
        return self.select(self.binary("cmp_lt", a, b), a, b)

    def maximum(self, a: int, b: int) -> int:
        return self.select(self.binary("cmp_gt", a, b), a, b)

    def absolute(self, a: int) -> int:
        return self.select(self.binary("cmp_gt", a, self.const(0.0)),
                           a, self.unary("neg", a))

    def power(self, base: int, exponent: int) -> int:
        """Integer power via pow-int nodes (chained above the table limit)."""
        if exponent == 0:
            return self.const(1.0)
        if exponent < 0:
            return self.power(self.unary("recip", base), -exponent)
        if exponent == 1:
            return base
        if exponent <= MAX_POW_INT:
            return self.unary("powi", base, power=exponent)
        head = self.unary("powi", base, power=MAX_POW_INT)
        return self.binary("mul", head, self.power(base, exponent - MAX_POW_INT))

    def pow_general(self, base: int, exponent: int) -> int:
        """Non-integer exponent: exp(p * log(base))."""
        return self.unary("exp", self.binary(
            "mul", exponent, self.unary("log", base)))

    def finish(self) -> ProgramGraph:
        """Drop nodes unreachable from the outputs (lowering can orphan
        literals, e.g. the folded exponent of pow) and renumber densely."""
        if not self._outputs:
            raise ValueError("program has no outputs")
        reachable: set[int] = set()
        stack = [nid for _, nid in self._outputs]
        while stack:
            nid = stack.pop()
            if nid in reachable:
                continue
            reachable.add(nid)
            stack.extend(self._nodes[nid].operands)
        remap: dict[int, int] = {}
        nodes: list[Node] = []
        for node in self._nodes:
            if node.id not in reachable:
                continue
            remap[node.id] = len(nodes)
            nodes.append(Node(len(nodes), node.op,
                              tuple(remap[i] for i in node.operands),
                              node.value, node.power, node.name))
        outputs = [(name, remap[nid]) for name, nid in self._outputs]
        inputs = {n: remap[i] for n, i in self._inputs.items()
                  if i in remap}
        roles = {n: self._roles[n] for n in inputs}
        return ProgramGraph(self.name, nodes, outputs, inputs, roles)


# ---------------------------------------------------------------------------
# tokenizer / parser

_TOKEN_RE = re.compile(
    r"(?P<ws>\s+)"
    r"|(?P<float>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<id>[A-Za-z_][A-Za-z0-9_]*)"
    r"|(?P<punct>[+\-*/%(),=])"
)


@dataclass
class _Token:
    kind: str
    text: str
    line: int
    col: int


def _tokenize(source: str) -> list[_Token]:
    tokens = []
    line, col = 1, 1
    pos = 0
    while pos < len(source):
        m = _TOKEN_RE.match(source, pos)
        if m is None:
            raise ParseError(f"unexpected character {source[pos]!r}", line, col)
        text = m.group(0)
        kind = m.lastgroup
        if kind != "ws":
            tokens.append(_Token(kind, text, line, col))
        newlines = text.count("\n")
        if newlines:
            line += newlines
            col = len(text) - text.rfind("\n")
        else:
            col += len(text)
        pos = m.end()
    tokens.append(_Token("eof", "", line, col))
    return tokens


class _Parser:
    def __init__(self, tokens: list[_Token], builder: GraphBuilder):
        self.tokens = tokens
        self.pos = 0
        self.b = builder
        self.env: dict[str, int] = {}

    def peek(self) -> _Token:
        return self.tokens[self.pos]

    def next(self) -> _Token:
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def expect(self, text: str) -> _Token:
        tok = self.next()
        if tok.text != text:
            raise ParseError(f"expected {text!r}, found {tok.text!r}",
                             tok.line, tok.col)
        return tok

    def fail(self, msg: str, tok: _Token):
        raise ParseError(msg, tok.line, tok.col)

    def parse(self) -> None:
        while self.peek().kind != "eof":
            tok = self.next()
            if tok.text == "let":
                self.statement(tok, is_output=False)
            elif tok.text == "out":
                self.statement(tok, is_output=True)
            else:
                self.fail(f"expected 'let' or 'out', found {tok.text!r}", tok)

    def statement(self, kw: _Token, is_output: bool) -> None:
        name_tok = self.next()
        if name_tok.kind != "id":
            self.fail("expected identifier", name_tok)
        name = name_tok.text
        if name in RESERVED:
            self.fail(f"'{name}' is a reserved input name", name_tok)
        self.expect("=")
        node = self.expr()
        if is_output:
            try:
                self.b.output(name, node)
            except ValueError as e:
                self.fail(str(e), name_tok)
        else:
            if name in self.env:
                self.fail(f"'{name}' is already defined", name_tok)
            self.env[name] = node

    def expr(self) -> int:
        node = self.term()
        while self.peek().text in ("+", "-"):
            op = self.next().text
            rhs = self.term()
            node = self.b.binary("add" if op == "+" else "sub", node, rhs)
        return node

    def term(self) -> int:
        node = self.factor()
        while self.peek().text in ("*", "/", "%"):
            op = self.next().text
            rhs = self.factor()
            node = self.b.binary({"*": "mul", "/": "div", "%": "mod"}[op],
                                 node, rhs)
        return node

    def factor(self) -> int:
        if self.peek().text == "-":
            self.next()
            return self.b.unary("neg", self.factor())
        return self.primary()

    def primary(self) -> int:
        tok = self.next()
        if tok.kind == "float":
            return self.b.const(float(tok.text))
        if tok.text == "(":
            node = self.expr()
            self.expect(")")
            return node
        if tok.kind != "id":
            self.fail(f"unexpected token {tok.text!r}", tok)
        if self.peek().text == "(":
            return self.call(tok)
        if tok.text in RESERVED:
            return self.b.input_var(tok.text)
        if tok.text in self.env:
            return self.env[tok.text]
        self.fail(f"undefined name '{tok.text}'", tok)

    _SIMPLE_FUNCS = {
        "sin": "sin", "cos": "cos", "tan": "tan", "sinh": "sinh",
        "cosh": "cosh", "tanh": "tanh", "exp": "exp", "log": "log",
        "sqrt": "sqrt", "fract": "fract", "floor": "floor", "ceil": "ceil",
        "heaviside": "heaviside", "recip": "recip",
    }
    _CMP_FUNCS = {"gt": "cmp_gt", "ge": "cmp_ge", "lt": "cmp_lt",
                  "le": "cmp_le"}

    def call(self, name_tok: _Token) -> int:
        fname = name_tok.text
        self.expect("(")
        args = [self.expr()]
        while self.peek().text == ",":
            self.next()
            args.append(self.expr())
        self.expect(")")

        def arity(n):
            if len(args) != n:
                self.fail(f"{fname}() takes {n} argument(s), got {len(args)}",
                          name_tok)

        if fname in self._SIMPLE_FUNCS:
            arity(1)
            return self.b.unary(self._SIMPLE_FUNCS[fname], args[0])
        if fname in self._CMP_FUNCS:
            arity(2)
            return self.b.binary(self._CMP_FUNCS[fname], args[0], args[1])
        if fname == "select":
            arity(3)
            return self.b.select(*args)
        if fname == "min":
            arity(2)
            return self.b.minimum(args[0], args[1])
        if fname == "max":
            arity(2)
            return self.b.maximum(args[0], args[1])
        if fname == "abs":
            arity(1)
            return self.b.absolute(args[0])
        if fname == "pow":
            arity(2)
            exp_node = self.b._nodes[args[1]]
            if exp_node.op == "const" and float(exp_node.value).is_integer():
                return self.b.power(args[0], int(exp_node.value))
            return self.b.pow_general(args[0], args[1])
        self.fail(f"unknown function '{fname}'", name_tok)


def parse_program(source: str, name: str = "program") -> ProgramGraph:
    builder = GraphBuilder(name)
    _Parser(_tokenize(source), builder).parse()
    return builder.finish()


# ---------------------------------------------------------------------------
# graph utilities

def topo_order(g: ProgramGraph) -> list[int]:
    """Node ids with every node after its operands. Deterministic: the
    builder already stores nodes in a valid order, so this is the identity
    permutation, asserted."""
    for n in g.nodes:
        assert all(op < n.id for op in n.operands), "graph out of order"
    return [n.id for n in g.nodes]


def subtree_nodes(g: ProgramGraph, node_id: int) -> set[int]:
    """All ids reachable through operand edges from node_id, inclusive."""
    g.node(node_id)  # raises KeyError for unknown ids
    seen: set[int] = set()
    stack = [node_id]
    while stack:
        nid = stack.pop()
        if nid in seen:
            continue
        seen.add(nid)
        stack.extend(g.nodes[nid].operands)
    return seen


def dfs_order(g: ProgramGraph, include_inputs: bool = False) -> list[int]:
    """Pre-order depth-first walk from the outputs (declaration order),
    operands left to right, each node listed once. The tuner's mutation
    spans and crossover points index into this sequence."""
    order: list[int] = []
    seen: set[int] = set()

    def visit(nid: int) -> None:
        if nid in seen:
            return
        seen.add(nid)
        node = g.nodes[nid]
        if include_inputs or node.op != "input":
            order.append(nid)
        for op in node.operands:
            visit(op)

    for _, out_id in g.outputs:
        visit(out_id)
    return order


def depends_on_spatial_input(g: ProgramGraph, node_id: int) -> bool:
    spatial_ids = {g.inputs[n] for n in g.inputs
                   if g.input_roles[n] == "spatial"}
    return bool(subtree_nodes(g, node_id) & spatial_ids)


# ---------------------------------------------------------------------------
# printing

def _format_const(v: float) -> str:
    return repr(float(v))


def to_source(g: ProgramGraph) -> str:
    """Emit DSL text that parses back to an isomorphic graph. Constants are
    inlined; every other non-input node gets a let binding."""
    ref: dict[int, str] = {}
    lines: list[str] = []
    for node in g.nodes:
        if node.op == "input":
            ref[node.id] = node.name
        elif node.op == "const":
            ref[node.id] = _format_const(node.value)
    counter = 0
    infix = {"add": "+", "sub": "-", "mul": "*", "div": "/", "mod": "%"}
    calls = {"cmp_gt": "gt", "cmp_ge": "ge", "cmp_lt": "lt", "cmp_le": "le"}
    for node in g.nodes:
        if node.id in ref:
            continue
        a = [ref[i] for i in node.operands]
        if node.op in infix:
            text = f"({a[0]} {infix[node.op]} {a[1]})"
        elif node.op in calls:
            text = f"{calls[node.op]}({a[0]}, {a[1]})"
        elif node.op == "select":
            text = f"select({a[0]}, {a[1]}, {a[2]})"
        elif node.op == "neg":
            text = f"(-{a[0]})"
        elif node.op == "powi":
            text = f"pow({a[0]}, {float(node.power)!r})"
        else:
            text = f"{node.op}({a[0]})"
        tmp = f"v{counter}"
        counter += 1
        lines.append(f"let {tmp} = {text}")
        ref[node.id] = tmp
    for name, nid in g.outputs:
        lines.append(f"out {name} = {ref[nid]}")
    return "\n".join(lines) + "\n"


def signature(g: ProgramGraph) -> tuple:
    """Canonical structural fingerprint used by isomorphism tests and
    variant ids.

    Nodes are renumbered by first visit in a DFS from the outputs, so two
    graphs that differ only in node numbering (e.g. a source round trip
    that discovers the inputs in another order) fingerprint identically.
    """
    index: dict[int, int] = {}
    rows: list[tuple] = []

    def visit(nid: int) -> int:
        if nid in index:
            return index[nid]
        node = g.nodes[nid]
        ops = tuple(visit(o) for o in node.operands)
        rows.append((node.op, ops, node.value, node.power, node.name))
        index[nid] = len(rows) - 1
        return index[nid]

    outs = tuple((name, visit(nid)) for name, nid in g.outputs)
    return (tuple(rows), outs)
