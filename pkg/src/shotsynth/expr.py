"""Expressions over single digits with ``+`` and ``*`` under a configurable precedence.

An expression is a tree: a :class:`Leaf` holds one digit, a :class:`Node` is a
bracketed sequence of children joined by operators.  :func:`evaluate` reduces a
tree one binary operation at a time and records every reduction as a
:class:`Step`, which is the answer format used throughout the package.
"""

from __future__ import annotations

import enum
import operator
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence, Union

INT64_MIN = -(2**63)
INT64_MAX = 2**63 - 1


class Operator(enum.Enum):
    ADD = "+"
    MUL = "*"

    @property
    def symbol(self) -> str:
        return self.value

    def apply(self, lhs: int, rhs: int) -> int:
        return _checked(_OP_FUNCS[self](lhs, rhs))

    @classmethod
    def from_symbol(cls, symbol: str) -> "Operator":
        return cls(symbol)


_OP_FUNCS: dict[Operator, Callable[[int, int], int]] = {
    Operator.ADD: operator.add,
    Operator.MUL: operator.mul,
}


def _checked(value: int) -> int:
    if value < INT64_MIN or value > INT64_MAX:
        raise OverflowError(f"intermediate value {value} exceeds signed 64-bit range")
    return value


@dataclass(frozen=True)
class Leaf:
    value: int

    def __post_init__(self) -> None:
        if not 0 <= self.value <= 9:
            raise ValueError(f"leaf value must be a single digit, got {self.value}")


@dataclass(frozen=True)
class Node:
    children: tuple["Expr", ...]
    ops: tuple[Operator, ...]

    def __post_init__(self) -> None:
        if not self.children:
            raise ValueError("a node needs at least one child")
        if len(self.ops) != len(self.children) - 1:
            raise ValueError(
                f"{len(self.children)} children need {len(self.children) - 1} operators, "
                f"got {len(self.ops)}"
            )


Expr = Union[Leaf, Node]


def node(*items: "Expr | Operator | int | str") -> Node:
    """Build a node from an alternating sequence, e.g. ``node(3, "+", 2, "*", 4)``."""
    children: list[Expr] = []
    ops: list[Operator] = []
    for i, item in enumerate(items):
        if i % 2:
            ops.append(item if isinstance(item, Operator) else Operator.from_symbol(str(item)))
        else:
            children.append(Leaf(item) if isinstance(item, int) else item)  # type: ignore[arg-type]
    return Node(tuple(children), tuple(ops))


@dataclass(frozen=True)
class PrecedencePolicy:
    """Operator tiers, highest priority first."""

    name: str
    tiers: tuple[frozenset[Operator], ...]

    def __post_init__(self) -> None:
        seen = [op for tier in self.tiers for op in tier]
        if sorted(seen, key=lambda o: o.value) != sorted(Operator, key=lambda o: o.value):
            raise ValueError("every operator must appear in exactly one tier")

    def rank(self, op: Operator) -> int:
        for i, tier in enumerate(self.tiers):
            if op in tier:
                return i
        raise KeyError(op)  # pragma: no cover - guarded by __post_init__


NON_STANDARD = PrecedencePolicy("nonstandard", (frozenset({Operator.ADD}), frozenset({Operator.MUL})))
STANDARD = PrecedencePolicy("standard", (frozenset({Operator.MUL}), frozenset({Operator.ADD})))

POLICIES = {p.name: p for p in (NON_STANDARD, STANDARD)}


@dataclass(frozen=True)
class Step:
    lhs: int
    op: Operator
    rhs: int
    result: int

    def __str__(self) -> str:
        return f"{self.lhs} {self.op.symbol} {self.rhs} = {self.result}"


@dataclass(frozen=True)
class Trace:
    steps: tuple[Step, ...]
    final: int

    def step_strings(self) -> list[str]:
        return [str(s) for s in self.steps]


# --------------------------------------------------------------------------
# Parsing and rendering


class ExprSyntaxError(SyntaxError):
    """Malformed expression text.  ``position`` is a 0-based character offset."""

    def __init__(self, reason: str, position: int, text: str = "") -> None:
        super().__init__(f"{reason} at position {position}")
        self.reason = reason
        self.position = position
        self.text = text


class _Parser:
    def __init__(self, text: str) -> None:
        self.text = text
        self.pos = 0

    def error(self, reason: str) -> ExprSyntaxError:
        return ExprSyntaxError(reason, self.pos, self.text)

    def skip_ws(self) -> None:
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1

    def peek(self) -> str:
        self.skip_ws()
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def sequence(self) -> tuple[list[Expr], list[Operator]]:
        children = [self.operand()]
        ops: list[Operator] = []
        while self.peek() in ("+", "*"):
            ops.append(Operator.from_symbol(self.text[self.pos]))
            self.pos += 1
            children.append(self.operand())
        return children, ops

    def operand(self) -> Expr:
        ch = self.peek()
        if ch == "":
            raise self.error("unexpected end of input, expected operand")
        if ch in "0123456789":
            self.pos += 1
            if self.pos < len(self.text) and self.text[self.pos].isdigit():
                raise self.error("multi-digit operand")
            return Leaf(int(ch))
        if ch == "(":
            self.pos += 1
            children, ops = self.sequence()
            if self.peek() != ")":
                if self.pos >= len(self.text):
                    raise self.error("unbalanced bracket, expected ')' before end of input")
                raise self.error(f"expected ')' or operator, found {self.text[self.pos]!r}")
            self.pos += 1
            return Node(tuple(children), tuple(ops))
        if ch in "+*)":
            raise self.error(f"empty operand slot before {ch!r}")
        raise self.error(f"illegal token {ch!r}")


def parse(text: str) -> Expr:
    """Parse expression text.

    Bracketed groups become nodes.  An unbracketed top-level sequence such as
    ``3 + 2 * 4`` is read as a single node; a lone top-level operand is returned
    as-is, so ``"7"`` is a leaf and ``"(7)"`` a one-child node.
    """
    p = _Parser(text)
    children, ops = p.sequence()
    if p.peek() != "":
        raise p.error(f"trailing input {p.text[p.pos]!r}")
    if len(children) == 1:
        return children[0]
    return Node(tuple(children), tuple(ops))


def render(e: Expr) -> str:
    if isinstance(e, Leaf):
        return str(e.value)
    parts = [render(e.children[0])]
    for op, child in zip(e.ops, e.children[1:]):
        parts.append(op.symbol)
        parts.append(render(child))
    return "(" + " ".join(parts) + ")"


def normalize(text: str) -> str:
    """Canonical rendering of expression text."""
    return render(parse(text))


def depth(e: Expr) -> int:
    """Maximum bracket nesting; a bare leaf has depth 0."""
    if isinstance(e, Leaf):
        return 0
    return 1 + max(depth(c) for c in e.children)


def skeleton(e: Expr) -> str:
    """Bracket structure and operator sequence with digit values erased."""
    return "".join("#" if ch.isdigit() else ch for ch in render(e))


def iter_nodes(e: Expr) -> Iterator[tuple[Node, int]]:
    """Yield every node with its bracket level (root is 0), pre-order."""
    stack: list[tuple[Expr, int]] = [(e, 0)]
    while stack:
        cur, level = stack.pop()
        if isinstance(cur, Node):
            yield cur, level
            stack.extend((c, level + 1) for c in reversed(cur.children))


# --------------------------------------------------------------------------
# Evaluation


def evaluate(e: Expr, policy: PrecedencePolicy = NON_STANDARD) -> Trace:
    """Reduce ``e`` to a single integer, recording each binary reduction.

    Children are reduced depth-first, left to right.  Within a node, an
    operator of the top tier is folded as soon as its right operand has a
    value; other operators wait until every child is reduced and are then
    folded tier by tier, left to right.
    """
    steps: list[Step] = []
    final = _reduce(e, policy, steps)
    return Trace(tuple(steps), final)


def _reduce(e: Expr, policy: PrecedencePolicy, steps: list[Step]) -> int:
    if isinstance(e, Leaf):
        return e.value
    top = policy.tiers[0]
    values = [_reduce(e.children[0], policy, steps)]
    pending: list[Operator] = []
    for op, child in zip(e.ops, e.children[1:]):
        value = _reduce(child, policy, steps)
        if op in top:
            lhs = values.pop()
            result = op.apply(lhs, value)
            steps.append(Step(lhs, op, value, result))
            values.append(result)
        else:
            pending.append(op)
            values.append(value)
    for tier in policy.tiers[1:]:
        kept_values = [values[0]]
        kept_ops: list[Operator] = []
        for op, value in zip(pending, values[1:]):
            if op in tier:
                lhs = kept_values.pop()
                result = op.apply(lhs, value)
                steps.append(Step(lhs, op, value, result))
                kept_values.append(result)
            else:
                kept_ops.append(op)
                kept_values.append(value)
        values, pending = kept_values, kept_ops
    return values[0]


def evaluate_reference(e: Expr, policy: PrecedencePolicy = NON_STANDARD) -> int:
    """Value-only evaluation by splitting on the lowest-priority operators.

    Kept deliberately different from :func:`evaluate`; the two are checked
    against each other in the tests.
    """
    if isinstance(e, Leaf):
        return e.value
    values = [evaluate_reference(c, policy) for c in e.children]
    return _split_eval(values, list(e.ops), list(policy.tiers))


def _split_eval(values: list[int], ops: list[Operator], tiers: list[frozenset[Operator]]) -> int:
    if len(values) == 1:
        return values[0]
    lowest = tiers[-1]
    if len(tiers) == 1:
        acc = values[0]
        for op, v in zip(ops, values[1:]):
            acc = op.apply(acc, v)
        return acc
    groups: list[tuple[list[int], list[Operator]]] = [([values[0]], [])]
    joins: list[Operator] = []
    for op, v in zip(ops, values[1:]):
        if op in lowest:
            joins.append(op)
            groups.append(([v], []))
        else:
            groups[-1][0].append(v)
            groups[-1][1].append(op)
    group_values = [_split_eval(vs, os, tiers[:-1]) for vs, os in groups]
    acc = group_values[0]
    for op, v in zip(joins, group_values[1:]):
        acc = op.apply(acc, v)
    return acc


# --------------------------------------------------------------------------
# Replaying steps as rewrites


class StepReplayError(ValueError):
    pass


def apply_step(e: Expr, step: Step, policy: PrecedencePolicy = NON_STANDARD) -> Expr:
    """Rewrite the leftmost legal ``lhs op rhs`` redex in ``e`` into its result.

    A redex is two adjacent leaves inside one node whose operator belongs to
    the highest-priority tier still present in that node.  Nodes left with a
    single leaf child collapse into that leaf.
    """
    if step.op.apply(step.lhs, step.rhs) != step.result:
        raise StepReplayError(f"arithmetic error in step {step}")
    found, out = _rewrite(e, step, policy)
    if not found:
        raise StepReplayError(f"no redex for step {step} in {render(e)}")
    return out


def _rewrite(e: Expr, step: Step, policy: PrecedencePolicy) -> tuple[bool, Expr]:
    if isinstance(e, Leaf):
        return False, e
    for i, child in enumerate(e.children):
        found, new_child = _rewrite(child, step, policy)
        if found:
            children = e.children[:i] + (new_child,) + e.children[i + 1 :]
            return True, _collapse(Node(children, e.ops))
    best = min((policy.rank(op) for op in e.ops), default=None)
    for i, op in enumerate(e.ops):
        a, b = e.children[i], e.children[i + 1]
        if (
            op is step.op
            and policy.rank(op) == best
            and isinstance(a, Leaf)
            and isinstance(b, Leaf)
            and a.value == step.lhs
            and b.value == step.rhs
        ):
            children = e.children[:i] + (_Value(step.result),) + e.children[i + 2 :]
            ops = e.ops[:i] + e.ops[i + 1 :]
            return True, _collapse(Node(children, ops))  # type: ignore[arg-type]
    return False, e


@dataclass(frozen=True)
class _Value(Leaf):
    """Intermediate result during replay; not limited to one digit."""

    def __post_init__(self) -> None:
        pass


def _collapse(n: Node) -> Expr:
    if len(n.children) == 1 and isinstance(n.children[0], Leaf):
        return n.children[0]
    return n


def _collapse_all(e: Expr) -> Expr:
    if isinstance(e, Leaf):
        return e
    return _collapse(Node(tuple(_collapse_all(c) for c in e.children), e.ops))


def replay(e: Expr, steps: Sequence[Step], policy: PrecedencePolicy = NON_STANDARD) -> Expr:
    """Apply ``steps`` in order; a sound trace ends in a single value."""
    e = _collapse_all(e)
    for step in steps:
        e = apply_step(e, step, policy)
    return e
