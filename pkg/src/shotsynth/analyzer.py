"""Answer extraction and grading.

Only the final value is scored.  Step parsing exists for diagnostics and for
reading shot blocks back out of rendered prompts.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from typing import Optional, Union

from .datagen import DatasetRecord
from .expr import Operator, Step, Trace

EXTRACTOR_VERSION = "cascade-v1"

_INT = re.compile(r"^[+-]?\d+$")
_INT_TOKEN = re.compile(r"(?<!\w)-?\d+")
_STEP = re.compile(r"(-?\d+)\s*([+*])\s*(-?\d+)\s*=\s*(-?\d+)")
_STEPS_HEADER = re.compile(r"steps\s*:", re.IGNORECASE)
_STRIP = " \t\r\n*_`~.,;:!?\"'()[]{}$"


class FailureMode(str, enum.Enum):
    NONE = "none"
    WRONG_VALUE = "wrong_value"
    UNPARSEABLE = "unparseable"
    EMPTY = "empty"


@dataclass(frozen=True)
class GradedAnswer:
    extracted_final: Optional[int]
    correct: bool
    failure_mode: FailureMode
    raw: str

    def to_json(self) -> dict:
        return {
            "extracted_final": self.extracted_final,
            "correct": self.correct,
            "failure_mode": self.failure_mode.value,
        }


def _bare_int(text: str) -> Optional[int]:
    s = text.strip(_STRIP)
    if _INT.match(s):
        return int(s)
    return None


def _from_steps_block(response: str) -> Optional[int]:
    headers = list(_STEPS_HEADER.finditer(response))
    if not headers:
        return None
    rest = response[headers[-1].end() :].lstrip()
    if rest.startswith("["):
        close = rest.find("]")
        if close < 0:
            return None
        items = rest[1:close].split(",")
        return _bare_int(items[-1])
    block: list[str] = []
    for line in rest.splitlines():
        if not line.strip():
            break
        block.append(line)
    return _bare_int(block[-1]) if block else None


def extract_final(response: str) -> Optional[int]:
    """Pull the final integer out of a model response.

    Tried in order: the terminal value of the last ``Steps:`` block (list or
    line form); the last line that is a lone integer once markdown emphasis
    and punctuation are stripped; the last integer token anywhere.
    """
    if not response or not response.strip():
        return None
    value = _from_steps_block(response)
    if value is not None:
        return value
    for line in reversed(response.splitlines()):
        value = _bare_int(line)
        if value is not None:
            return value
    tokens = _INT_TOKEN.findall(response)
    if tokens:
        return int(tokens[-1])
    return None


def grade(response: str, truth: Union[DatasetRecord, int]) -> GradedAnswer:
    expected = truth if isinstance(truth, int) else truth.final
    if not response or not response.strip():
        return GradedAnswer(None, False, FailureMode.EMPTY, response or "")
    value = extract_final(response)
    if value is None:
        return GradedAnswer(None, False, FailureMode.UNPARSEABLE, response)
    if value != expected:
        return GradedAnswer(value, False, FailureMode.WRONG_VALUE, response)
    return GradedAnswer(value, True, FailureMode.NONE, response)


def parse_steps(text: str) -> list[Step]:
    """Every ``a OP b = c`` occurrence in ``text``, in order."""
    return [
        Step(int(a), Operator.from_symbol(op), int(b), int(c)) for a, op, b, c in _STEP.findall(text)
    ]


def steps_match(response: str, trace: Trace) -> bool:
    """Diagnostic: the response's steps equal the canonical trace exactly."""
    return tuple(parse_steps(response)) == trace.steps


@dataclass(frozen=True)
class ParsedShot:
    expression: str
    steps: tuple[Step, ...]
    final: int


def parse_shot_block(text: str) -> ParsedShot:
    """Read ``Expression: ...`` plus its ``Steps:`` block back from a rendered shot."""
    m = re.search(r"^Expression:\s*(.+?)\s*$", text, re.MULTILINE)
    if m is None:
        raise ValueError("no Expression: line")
    after = text[m.end() :]
    final = extract_final(after)
    if final is None:
        raise ValueError("no final value in steps block")
    return ParsedShot(m.group(1), tuple(parse_steps(after)), final)
