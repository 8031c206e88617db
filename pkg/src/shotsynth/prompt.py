"""System and user prompts, in two step layouts, with an optional CoT suffix."""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Optional, Sequence

from .datagen import DatasetRecord, parse_step
from .expr import Trace, normalize

SYSTEM_PROMPT_VERSION = "v1"
COT_LINE = "A: Let's think step by step."
FEW_SHOT_HEADER = "Q: Given the following examples:"
TASK_TEMPLATE = "Simplify the following expression {target} where + has priority over *."


class PromptVariant(str, enum.Enum):
    PV1 = "PV1"  # steps as a one-line bracketed list
    PV2 = "PV2"  # one step per line

    @classmethod
    def parse(cls, value: "str | PromptVariant") -> "PromptVariant":
        if isinstance(value, PromptVariant):
            return value
        return cls(value.upper())


@lru_cache(maxsize=None)
def system_prompt(version: str = SYSTEM_PROMPT_VERSION) -> str:
    text = resources.files("shotsynth.assets").joinpath(f"system_{version}.txt").read_text("utf-8")
    return text.rstrip("\n")


def system_prompt_sha256(version: str = SYSTEM_PROMPT_VERSION) -> str:
    return hashlib.sha256(system_prompt(version).encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class Shot:
    expression: str
    trace: Trace
    source_dataset: Optional[str] = None
    source_id: Optional[int] = None

    @classmethod
    def from_record(cls, record: DatasetRecord, dataset_id: Optional[str] = None) -> "Shot":
        return cls(
            record.expression,
            record.trace,
            dataset_id if dataset_id is not None else record.params.dataset_id,
            record.id,
        )

    def to_json(self) -> dict:
        return {
            "expression": self.expression,
            "steps": self.trace.step_strings(),
            "final": self.trace.final,
            "source_dataset": self.source_dataset,
            "source_id": self.source_id,
        }

    @classmethod
    def from_json(cls, data: dict) -> "Shot":
        steps = tuple(parse_step(s) for s in data["steps"])
        return cls(
            data["expression"],
            Trace(steps, int(data["final"])),
            data.get("source_dataset"),
            data.get("source_id"),
        )


@dataclass(frozen=True)
class PromptBundle:
    system: str
    user: str
    cot: bool = False

    def to_record(self) -> dict:
        return {"system": self.system, "user": self.user}

    def digest(self) -> str:
        payload = json.dumps(self.to_record(), sort_keys=True, ensure_ascii=False)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def render_steps(trace: Trace, variant: PromptVariant | str) -> str:
    variant = PromptVariant.parse(variant)
    items = trace.step_strings() + [str(trace.final)]
    if variant is PromptVariant.PV1:
        return "Steps: [" + ", ".join(items) + "]"
    return "Steps:\n" + "\n".join(items)


def render_shot(shot: Shot, index: int, variant: PromptVariant | str) -> str:
    return (
        f"Computations example{index}:\n"
        f"Expression: {shot.expression}\n"
        f"{render_steps(shot.trace, variant)}\n"
    )


def build_prompt(
    target: str,
    shots: Sequence[Shot],
    variant: PromptVariant | str = PromptVariant.PV1,
    cot: bool = False,
    system_version: str = SYSTEM_PROMPT_VERSION,
) -> PromptBundle:
    """Assemble the prompt for one target expression.

    ``target`` is normalized to canonical spacing.  With shots, the user text
    opens with the few-shot header and one block per shot, each followed by a
    blank line; with no shots the task line carries the ``Q:`` prefix itself.
    """
    task = TASK_TEMPLATE.format(target=normalize(target))
    if shots:
        blocks = "".join(render_shot(s, i, variant) + "\n" for i, s in enumerate(shots, 1))
        user = f"{FEW_SHOT_HEADER}\n{blocks}{task}"
    else:
        user = f"Q: {task}"
    if cot:
        user += "\n" + COT_LINE
    return PromptBundle(system_prompt(system_version), user, cot)
