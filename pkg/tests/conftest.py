from __future__ import annotations

import itertools
from dataclasses import replace

import pytest

from shotsynth.datagen import DatasetRecord, GenParams, generate_dataset
from shotsynth.expr import NON_STANDARD, STANDARD, Leaf, Node, Operator, evaluate_reference

WORKED_EXAMPLE1 = "((3 * 8 + 1) + (2 + 8) + (2 + 5))"
WORKED_EXAMPLE2 = "((4 + 0) * (3 + 1) + (2 + 4))"
WORKED_TARGET = "((3*5+4) + (2 + 9 * 0))"


def divergent_records(n: int, depth: int = 2, prob: int = 20, seed: int = 11) -> list[DatasetRecord]:
    """First ``n`` generated records whose two policy values differ, renumbered 0..n-1."""
    params = GenParams(depth=depth, prob=prob, seed=seed, count=max(4 * n, 50))
    out = []
    for r in generate_dataset(params):
        e = r.expr
        if evaluate_reference(e, NON_STANDARD) != evaluate_reference(e, STANDARD):
            out.append(replace(r, id=len(out)))
        if len(out) == n:
            return out
    raise AssertionError("not enough divergent records; raise count")


def small_family(max_depth: int, max_children: int, digits: range) -> list:
    """Every expression up to ``max_depth`` bracket levels, leaves allowed at any level."""
    level = [Leaf(d) for d in digits]
    everything = list(level)
    for _ in range(max_depth):
        nodes = []
        for k in range(1, max_children + 1):
            for children in itertools.product(everything, repeat=k):
                for ops in itertools.product(list(Operator), repeat=k - 1):
                    nodes.append(Node(children, ops))
        everything = [Leaf(d) for d in digits] + nodes
    return everything


@pytest.fixture
def divergent():
    return divergent_records
