"""Three-stage emotional reasoning traces: prompt, canonical rendering and parsing.

Grammar (ABNF-style; markers are case-insensitive, ``WS`` is horizontal whitespace)::

    trace    = [preamble] step1 step2 step3 box [trailer]
    step1    = BOL *WS "Step" 1*WS "1" *WS ":" field
    step2    = BOL *WS "Step" 1*WS "2" *WS ":" field
    step3    = BOL *WS "Step" 1*WS "3" *WS ":" field
    box      = "\\boxed{" answer "}"
    answer   = 1*(any char except "{" / "}" / LF)

Each step marker appears exactly once, at the start of a line, in order.
Exactly one box appears in the whole output, after the Step 3 marker; it
terminates the Step 3 field. Fields are whitespace-trimmed. Text before the
Step 1 marker and after the box is ignored.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from typing import Sequence

from .errors import InvalidTaxonomyError, InvalidTraceError

STAGE_NAMES = (
    "Emotional Trigger Identification",
    "Human Emotional Reflection",
    "Emotional Conclusion",
)

BOX_OPEN = "\\boxed{"
BOX_CLOSE = "}"

_MARKER_RE = re.compile(r"^[ \t]*step[ \t]+([0-9]+)[ \t]*:", re.IGNORECASE | re.MULTILINE)
_BOX_RE = re.compile(r"\\boxed\{([^{}\n]*)\}")
_BOX_TOKEN = "\\boxed"


@dataclass(frozen=True)
class StructuredTrace:
    step1: str
    step2: str
    step3: str
    answer: str


class FailureKind(str, enum.Enum):
    MISSING_STEP = "missing-step"
    OUT_OF_ORDER_STEPS = "out-of-order-steps"
    MISSING_BOX = "missing-box"
    EMPTY_FIELD = "empty-field"
    MULTIPLE_BOXES = "multiple-boxes"


@dataclass(frozen=True)
class ParseFailure:
    kind: FailureKind
    detail: str = ""

    def __bool__(self) -> bool:
        return False


@dataclass(frozen=True)
class SetPrompt:
    instruction_text: str
    task_text: str
    taxonomy: tuple[str, ...]

    @property
    def text(self) -> str:
        return f"{self.task_text}\n\n{self.instruction_text}"


def build_set_prompt(taxonomy: Sequence[str], task_text: str) -> SetPrompt:
    """Assemble the three-stage instruction for a question and label space."""
    labels = [str(lab).strip() for lab in taxonomy]
    if not labels:
        raise InvalidTaxonomyError("taxonomy must not be empty")
    if any(not lab for lab in labels):
        raise InvalidTaxonomyError("taxonomy labels must be non-empty")
    if len(set(lab.casefold() for lab in labels)) != len(labels):
        raise InvalidTaxonomyError("taxonomy labels must be unique")
    options = ", ".join(labels)
    instruction = "\n".join(
        [
            "Think through the image in three steps before answering.",
            f"Step 1: {STAGE_NAMES[0]}. Detect which elements in the scene (objects, actions,"
            " environments, or facial cues) may trigger emotional responses.",
            f"Step 2: {STAGE_NAMES[1]}. Describe how a human observer would emotionally"
            " respond to these elements.",
            f"Step 3: {STAGE_NAMES[2]}. Determine whether the overall emotion is positive or"
            " negative, and assess its arousal level (e.g., calm vs. excited).",
            f"Choose exactly one emotion from: {options}.",
            "Write each step on its own line starting with 'Step 1:', 'Step 2:' and 'Step 3:',"
            " then give the final answer enclosed in \\boxed{}.",
        ]
    )
    return SetPrompt(instruction_text=instruction, task_text=task_text, taxonomy=tuple(labels))


def parse_trace(text: str) -> StructuredTrace | ParseFailure:
    """Parse raw model output. Returns a ParseFailure instead of raising."""
    if not isinstance(text, str):
        return ParseFailure(FailureKind.MISSING_STEP, "output is not text")
    markers = [(int(m.group(1)), m) for m in _MARKER_RE.finditer(text)]
    numbers = [n for n, _ in markers]
    for n in (1, 2, 3):
        if n not in numbers:
            return ParseFailure(FailureKind.MISSING_STEP, f"no 'Step {n}:' marker")
    if numbers != [1, 2, 3]:
        return ParseFailure(FailureKind.OUT_OF_ORDER_STEPS, f"step markers appear as {numbers}")

    n_boxes = text.count(_BOX_TOKEN)
    if n_boxes == 0:
        return ParseFailure(FailureKind.MISSING_BOX, "no \\boxed{} answer")
    if n_boxes > 1:
        return ParseFailure(FailureKind.MULTIPLE_BOXES, f"{n_boxes} boxes")
    box_at = text.index(_BOX_TOKEN)
    step3_end = markers[2][1].end()
    if box_at < step3_end:
        return ParseFailure(FailureKind.OUT_OF_ORDER_STEPS, "box precedes Step 3")
    box = _BOX_RE.match(text, box_at)
    if box is None:
        return ParseFailure(FailureKind.MISSING_BOX, "unterminated or malformed \\boxed{}")

    m1, m2, m3 = (m for _, m in markers)
    fields = (
        text[m1.end() : m2.start()].strip(),
        text[m2.end() : m3.start()].strip(),
        text[m3.end() : box_at].strip(),
        box.group(1).strip(),
    )
    for name, value in zip(("step1", "step2", "step3", "answer"), fields):
        if not value:
            return ParseFailure(FailureKind.EMPTY_FIELD, f"{name} is empty")
    return StructuredTrace(*fields)


def _check_renderable(trace: StructuredTrace) -> None:
    for name in ("step1", "step2", "step3", "answer"):
        value = getattr(trace, name)
        if not isinstance(value, str) or not value.strip():
            raise InvalidTraceError(f"{name} is empty")
        if value != value.strip():
            raise InvalidTraceError(f"{name} has surrounding whitespace")
        if _BOX_TOKEN in value:
            raise InvalidTraceError(f"{name} contains a box marker")
        if _MARKER_RE.search(value):
            raise InvalidTraceError(f"{name} contains a line-anchored step marker")
    if any(c in trace.answer for c in "{}\n"):
        raise InvalidTraceError("answer contains braces or a newline")


def render_trace(trace: StructuredTrace) -> str:
    """Emit the canonical form; ``parse_trace(render_trace(t)) == t``."""
    _check_renderable(trace)
    return f"Step 1: {trace.step1}\nStep 2: {trace.step2}\nStep 3: {trace.step3}\n{BOX_OPEN}{trace.answer}{BOX_CLOSE}"


def extract_answer(trace: StructuredTrace) -> str:
    return trace.answer


def extract_step1(trace: StructuredTrace) -> str:
    return trace.step1


def extract_steps12(trace: StructuredTrace) -> str:
    return f"{trace.step1}\n{trace.step2}"


def check_format(text: str) -> bool:
    return isinstance(parse_trace(text), StructuredTrace)
