"""Seeded synthetic datasets of bracketed expressions.

A dataset is named ``db(depth, prob)``: ``depth`` is the number of bracket
levels and ``prob`` an inverse-complexity knob, larger values giving nodes
with fewer operands.  Generation consumes one :class:`~shotsynth.rng.SplitMix64`
stream per dataset, in this order at every node: child count, then one draw
per operator (0 -> ``+``, 1 -> ``*``), then the children left to right.  A
leaf is a single ``below(10)`` draw.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from pathlib import Path
from typing import Iterable, NamedTuple, Optional

from .expr import (
    NON_STANDARD,
    Expr,
    Leaf,
    Node,
    Operator,
    Step,
    Trace,
    depth,
    evaluate,
    iter_nodes,
    parse,
    render,
)
from .rng import SplitMix64, cumulative_thresholds

log = logging.getLogger(__name__)

ROOT_RULES = ("strict", "draft")

# (depth, prob) of the shipped presets, each with 200 records.
PRESETS: tuple[tuple[int, int], ...] = ((1, 6), (2, 20), (2, 10), (2, 6), (3, 6), (3, 20))
PRESET_COUNT = 200


class BranchProbabilities(NamedTuple):
    """Probabilities of 5, 4, 3 and 2 operands at a node."""

    p4: Fraction
    p3: Fraction
    p2: Fraction
    p1: Fraction

    def by_operand_count(self) -> dict[int, Fraction]:
        return {5: self.p4, 4: self.p3, 3: self.p2, 2: self.p1}


def branch_probabilities(prob: int, at_root: bool, root_rule: str = "strict") -> BranchProbabilities:
    if prob < 1:
        raise ValueError("prob must be >= 1")
    one = Fraction(1)
    p4 = min(one, Fraction(1, prob))
    p3 = (1 - p4) * min(one, Fraction(2, prob))
    if at_root:
        if root_rule == "strict":
            p3 = min(one, Fraction(2, prob))
            return BranchProbabilities(Fraction(0), p3, 1 - p3, Fraction(0))
        if root_rule == "draft":
            return BranchProbabilities(p4, p3, 1 - p4 - p3, Fraction(0))
        raise ValueError(f"unknown root rule {root_rule!r}")
    # ceil(prob * 0.3) in exact integer arithmetic
    ceil_03 = -(-prob * 3 // 10)
    p2 = (1 - p4 - p3) * min(one, Fraction(ceil_03, prob))
    return BranchProbabilities(p4, p3, p2, 1 - p4 - p3 - p2)


@dataclass(frozen=True)
class GenParams:
    depth: int
    prob: int
    seed: int = 0
    count: int = PRESET_COUNT
    root_rule: str = "strict"
    dedup: bool = False

    def __post_init__(self) -> None:
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.prob < 1:
            raise ValueError("prob must be >= 1")
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        if self.root_rule not in ROOT_RULES:
            raise ValueError(f"root_rule must be one of {ROOT_RULES}")

    @property
    def dataset_id(self) -> str:
        return f"db_d{self.depth}_p{self.prob}_s{self.seed}"

    @property
    def filename(self) -> str:
        return self.dataset_id + ".jsonl"

    def to_json(self) -> dict:
        out = {"depth": self.depth, "prob": self.prob, "seed": self.seed, "count": self.count}
        # non-default knobs only, so default files keep the plain four-field echo
        if self.root_rule != "strict":
            out["root_rule"] = self.root_rule
        if self.dedup:
            out["dedup"] = True
        return out

    @classmethod
    def from_json(cls, data: dict) -> "GenParams":
        return cls(**data)


@lru_cache(maxsize=None)
def _thresholds(prob: int, at_root: bool, root_rule: str) -> tuple[int, ...]:
    return cumulative_thresholds(branch_probabilities(prob, at_root, root_rule))


def generate_expr(params: GenParams, rng: SplitMix64, d: int = 0) -> Expr:
    if d == params.depth:
        return Leaf(rng.below(10))
    k = 5 - rng.choose_threshold(_thresholds(params.prob, d == 0, params.root_rule))
    ops = tuple(Operator.MUL if rng.below(2) else Operator.ADD for _ in range(k - 1))
    children = tuple(generate_expr(params, rng, d + 1) for _ in range(k))
    return Node(children, ops)


@dataclass(frozen=True)
class DatasetRecord:
    id: int
    expression: str
    trace: Trace
    params: GenParams

    @property
    def final(self) -> int:
        return self.trace.final

    @property
    def expr(self) -> Expr:
        return parse(self.expression)

    @classmethod
    def from_expr(cls, idx: int, e: Expr, params: GenParams) -> "DatasetRecord":
        return cls(idx, render(e), evaluate(e, NON_STANDARD), params)

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "expression": self.expression,
            "steps": self.trace.step_strings(),
            "final": self.final,
            "params": self.params.to_json(),
        }

    @classmethod
    def from_json(cls, data: dict) -> "DatasetRecord":
        steps = tuple(parse_step(s) for s in data["steps"])
        return cls(
            id=int(data["id"]),
            expression=data["expression"],
            trace=Trace(steps, int(data["final"])),
            params=GenParams.from_json(data["params"]),
        )


def parse_step(text: str) -> Step:
    """Inverse of ``str(Step)``: ``"a OP b = c"``."""
    left, _, result = text.partition("=")
    for op in Operator:
        lhs, sep, rhs = left.partition(op.symbol)
        if sep:
            return Step(int(lhs), op, int(rhs), int(result))
    raise ValueError(f"not a step: {text!r}")


def generate_dataset(params: GenParams, max_attempts: Optional[int] = None) -> list[DatasetRecord]:
    """``params.count`` records in generation order.

    Draws whose evaluation leaves the signed 64-bit range are discarded and
    redrawn.  With ``dedup`` set, repeated expressions are skipped as well;
    ``max_attempts`` (default ``1000 * count``) bounds the draws before giving up.
    """
    rng = SplitMix64(params.seed)
    records: list[DatasetRecord] = []
    seen: set[str] = set()
    attempts = 0
    if max_attempts is None:
        max_attempts = params.count * 1000
    while len(records) < params.count:
        attempts += 1
        if attempts > max_attempts:
            raise RuntimeError(
                f"could not draw {params.count} distinct expressions for {params.dataset_id}"
            )
        e = generate_expr(params, rng, 0)
        if params.dedup:
            text = render(e)
            if text in seen:
                continue
            seen.add(text)
        try:
            records.append(DatasetRecord.from_expr(len(records), e, params))
        except OverflowError:
            # ~0.3% of db(3,6) draws leave signed 64-bit range; redraw
            log.debug("redrawing overflowing expression %s", render(e))
    return records


def dumps_records(records: Iterable[DatasetRecord]) -> str:
    return "".join(json.dumps(r.to_json(), separators=(", ", ": ")) + "\n" for r in records)


def write_dataset(path: str | Path, records: Iterable[DatasetRecord]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_records(records))
    return path


def read_dataset(path: str | Path) -> list[DatasetRecord]:
    with Path(path).open(encoding="utf-8") as fh:
        return [DatasetRecord.from_json(json.loads(line)) for line in fh if line.strip()]


def preset_params(depth: int, prob: int, seed: int = 0, count: int = PRESET_COUNT) -> GenParams:
    if (depth, prob) not in PRESETS:
        raise KeyError(f"no preset db({depth},{prob})")
    return GenParams(depth=depth, prob=prob, seed=seed, count=count)


def parse_preset_name(name: str) -> tuple[int, int] | None:
    """Accept ``db(2,20)``, ``db_d2_p20`` or ``2,20``; return None otherwise."""
    s = name.strip().replace(" ", "")
    for prefix in ("db(", "("):
        if s.startswith(prefix) and s.endswith(")"):
            s = s[len(prefix) : -1]
            break
    if s.startswith("db_d") and "_p" in s:
        d, _, p = s[4:].partition("_p")
        p = p.split("_")[0]
        s = f"{d},{p}"
    parts = s.split(",")
    if len(parts) == 2 and all(x.isdigit() for x in parts):
        return int(parts[0]), int(parts[1])
    return None


def summarize(records: list[DatasetRecord]) -> dict:
    """Depth, mean operand count per node, and value range of a dataset."""
    counts: list[int] = []
    depths: set[int] = set()
    for r in records:
        e = r.expr
        depths.add(depth(e))
        counts.extend(len(n.children) for n, _ in iter_nodes(e))
    finals = [r.final for r in records]
    return {
        "records": len(records),
        "depths": sorted(depths),
        "mean_operands": sum(counts) / len(counts) if counts else math.nan,
        "min_value": min(finals),
        "max_value": max(finals),
    }
