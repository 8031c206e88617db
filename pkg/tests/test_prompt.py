from __future__ import annotations

import re
from pathlib import Path

import pytest
from hypothesis import given
from hypothesis import strategies as st

from shotsynth.analyzer import extract_final, parse_shot_block
from shotsynth.datagen import GenParams, generate_dataset
from shotsynth.expr import Trace, evaluate, parse
from shotsynth.prompt import (
    COT_LINE,
    SYSTEM_PROMPT_VERSION,
    PromptBundle,
    PromptVariant,
    Shot,
    build_prompt,
    render_shot,
    render_steps,
    system_prompt,
    system_prompt_sha256,
)

from .conftest import WORKED_EXAMPLE1, WORKED_EXAMPLE2, WORKED_TARGET

GOLDEN = Path(__file__).parent / "golden"


def shot(text: str) -> Shot:
    return Shot(text, evaluate(parse(text)))


def worked_shots() -> list[Shot]:
    return [shot(WORKED_EXAMPLE1), shot(WORKED_EXAMPLE2)]


def test_render_steps_pv1_example2():
    assert render_steps(evaluate(parse(WORKED_EXAMPLE2)), PromptVariant.PV1) == (
        "Steps: [4 + 0 = 4, 3 + 1 = 4, 2 + 4 = 6, 4 + 6 = 10, 4 * 10 = 40, 40]"
    )


def test_render_steps_bare_leaf():
    assert render_steps(Trace((), 5), "PV1") == "Steps: [5]"
    assert render_steps(Trace((), 5), "PV2") == "Steps:\n5"


def test_render_steps_pv2_line_count():
    records = generate_dataset(GenParams(depth=2, prob=10, seed=4, count=1000))
    for r in records:
        lines = render_steps(r.trace, PromptVariant.PV2).split("\n")
        assert lines[0] == "Steps:"
        assert len(lines) - 1 == len(r.trace.steps) + 1
        assert lines[-1] == str(r.final)


def test_worked_prompt_matches_golden_file():
    bundle = build_prompt(WORKED_TARGET, worked_shots(), PromptVariant.PV1, cot=False)
    assert bundle.user == (GOLDEN / "fewshot_pv1.txt").read_text(encoding="utf-8")


def test_cot_appends_exact_line():
    bundle = build_prompt(WORKED_TARGET, worked_shots(), "PV1", cot=True)
    golden = (GOLDEN / "fewshot_pv1.txt").read_text(encoding="utf-8")
    assert bundle.user == golden + "\n" + COT_LINE
    assert bundle.user.splitlines()[-1] == "A: Let's think step by step."


def test_zero_shot_with_cot():
    bundle = build_prompt(WORKED_TARGET, [], "PV1", cot=True)
    assert bundle.user == (
        "Q: Simplify the following expression ((3 * 5 + 4) + (2 + 9 * 0)) where + has priority over *.\n"
        "A: Let's think step by step."
    )
    assert bundle.cot


def test_zero_shot_has_no_examples():
    bundle = build_prompt(WORKED_TARGET, [], "PV2", cot=False)
    assert "example" not in bundle.user
    assert bundle.user.startswith("Q: Simplify the following expression")


def test_pv2_shot_block():
    text = render_shot(shot(WORKED_EXAMPLE2), 1, "PV2")
    assert text == (
        "Computations example1:\n"
        "Expression: ((4 + 0) * (3 + 1) + (2 + 4))\n"
        "Steps:\n4 + 0 = 4\n3 + 1 = 4\n2 + 4 = 6\n4 + 6 = 10\n4 * 10 = 40\n40\n"
    )


@pytest.mark.parametrize("variant", ["PV1", "PV2"])
def test_shot_count_in_text(variant):
    pool = [Shot(r.expression, r.trace) for r in generate_dataset(GenParams(depth=2, prob=20, seed=8, count=50))]
    for n in range(51):
        user = build_prompt(WORKED_TARGET, pool[:n], variant).user
        assert len(re.findall(r"^Computations example\d+:$", user, re.MULTILINE)) == n
        assert user.count("Expression: ") == n


def test_prompt_is_pure():
    a = build_prompt(WORKED_TARGET, worked_shots(), "PV2", True)
    b = build_prompt(WORKED_TARGET, worked_shots(), "PV2", True)
    assert a == b
    assert a.digest() == b.digest()
    assert a.to_record() == {"system": a.system, "user": a.user}


@pytest.mark.parametrize("variant", ["PV1", "PV2"])
def test_shot_blocks_round_trip_through_analyzer(variant):
    records = generate_dataset(GenParams(depth=3, prob=6, seed=2, count=200))
    for r in records:
        parsed = parse_shot_block(render_shot(Shot(r.expression, r.trace), 1, variant))
        assert parsed.expression == r.expression
        assert parsed.steps == r.trace.steps
        assert parsed.final == r.final


@given(st.integers(0, 2**32))
def test_render_steps_final_is_extractable(seed):
    r = generate_dataset(GenParams(depth=2, prob=6, seed=seed, count=1))[0]
    for variant in PromptVariant:
        assert extract_final(render_steps(r.trace, variant)) == r.final


def test_system_prompt_asset():
    text = system_prompt()
    assert SYSTEM_PROMPT_VERSION == "v1"
    assert "+ has priority over *" in text
    assert text.splitlines()[-1] == "16"
    assert len(system_prompt_sha256()) == 64
    assert build_prompt("(1 + 1)", []).system == text


def test_shot_json_round_trip():
    s = Shot.from_record(generate_dataset(GenParams(depth=1, prob=6, count=1))[0])
    assert s.source_dataset == "db_d1_p6_s0" and s.source_id == 0
    assert Shot.from_json(s.to_json()) == s


def test_variant_parsing():
    assert PromptVariant.parse("pv2") is PromptVariant.PV2
    with pytest.raises(ValueError):
        PromptVariant.parse("PV3")


def test_bundle_equality_includes_cot():
    assert PromptBundle("s", "u", True) != PromptBundle("s", "u", False)
