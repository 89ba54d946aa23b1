"""Instruction grammar: rendering, parsing, and prompt derivation.

Two task templates are supported. For local restoration:

    "make {caption} clear with {s1}, and make other parts with {s2}"

and for bokeh-preserving restoration:

    "make {caption} clear with {s1}, and keep other parts bokeh blur with {s2}"

Template keywords are matched case-insensitively; the region caption is
preserved verbatim. The parser additionally accepts a few surface variants
of the tail clause ("keep other parts clear with", "keep the bokeh blur of
other parts with") and canonicalizes on render.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum


class MalformedInstruction(ValueError):
    """Raised when text cannot be parsed or a caption/scale is invalid."""


class Task(Enum):
    LOCAL_RESTORE = "local"
    BOKEH_RESTORE = "bokeh"


# Keywords that would make the grammar ambiguous if they appeared inside a
# caption; rejected at construction time instead of escaped.
_FORBIDDEN_IN_CAPTION = ("clear with", "bokeh blur with")

_NUM = r"(\d+(?:\.\d+)?)"

_HEAD_RE = re.compile(
    r"^\s*make\s+(?P<cap>.+?)\s+clear\s+with\s+(?P<s1>" + _NUM + r")\s*,?\s+and\s+(?P<tail>.+?)\s*\.?\s*$",
    re.IGNORECASE | re.DOTALL,
)

_TAIL_LOCAL_RE = re.compile(
    r"^(?:make|keep)\s+other\s+parts\s+(?:clear\s+)?with\s+(?P<s2>" + _NUM + r")$",
    re.IGNORECASE,
)

_TAIL_BOKEH_RE = re.compile(
    r"^keep\s+(?:other\s+parts\s+bokeh\s+blur\s+with|the\s+bokeh\s+blur\s+of\s+other\s+parts\s+with(?:\s+the)?)"
    r"\s+(?P<s2>" + _NUM + r")$",
    re.IGNORECASE,
)


def _validate_caption(caption: str) -> str:
    if not caption or not caption.strip():
        raise MalformedInstruction("region caption is empty")
    caption = caption.strip()  # surrounding whitespace cannot survive the round trip
    low = caption.lower()
    for kw in _FORBIDDEN_IN_CAPTION:
        if kw in low:
            raise MalformedInstruction(f"caption contains template keyword {kw!r}")
    if caption.count("{") != caption.count("}"):
        raise MalformedInstruction("caption has unbalanced braces")
    return caption


def _validate_scale(value: float, name: str) -> float:
    try:
        v = float(value)
    except (TypeError, ValueError):
        raise MalformedInstruction(f"{name} is not a number: {value!r}") from None
    if not (v >= 0.0) or v != v or v in (float("inf"),):
        raise MalformedInstruction(f"{name} must be a finite non-negative number, got {value!r}")
    # Grammar keeps <= 2 fractional digits so render/parse stays bijective.
    return round(v, 2)


def format_scale(s: float) -> str:
    """Minimal decimal form: one fractional digit, two when needed (0.8, 1.0, 1.25)."""
    s = round(s, 2)
    if round(s, 1) == s:
        return f"{s:.1f}"
    return f"{s:.2f}"


@dataclass(frozen=True)
class Instruction:
    """A parsed user command: task kind, region caption, and fidelity scales."""

    task: Task
    region_caption: str
    s1: float
    s2: float

    def __post_init__(self):
        object.__setattr__(self, "region_caption", _validate_caption(self.region_caption))
        object.__setattr__(self, "s1", _validate_scale(self.s1, "s1"))
        object.__setattr__(self, "s2", _validate_scale(self.s2, "s2"))


@dataclass(frozen=True)
class PromptPair:
    """Text prompts derived from one instruction.

    ``backbone_prompt`` conditions the frozen generative backbone;
    ``control_prompt`` conditions the control branch and always contains the
    region caption verbatim.
    """

    backbone_prompt: str
    control_prompt: str


def render_inference_instruction(instr: Instruction) -> str:
    """Render the canonical inference instruction string."""
    s1, s2 = format_scale(instr.s1), format_scale(instr.s2)
    if instr.task is Task.BOKEH_RESTORE:
        return f"make {instr.region_caption} clear with {s1}, and keep other parts bokeh blur with {s2}"
    return f"make {instr.region_caption} clear with {s1}, and make other parts with {s2}"


def parse_inference_instruction(text: str) -> Instruction:
    """Parse an instruction string; raises MalformedInstruction on any failure."""
    if not isinstance(text, str):
        raise MalformedInstruction(f"instruction must be text, got {type(text).__name__}")
    m = _HEAD_RE.match(text)
    if m is None:
        raise MalformedInstruction(
            "instruction does not match 'make <caption> clear with <s1>, and ...'"
        )
    caption, s1_txt, tail = m.group("cap"), m.group("s1"), m.group("tail")
    bokeh = _TAIL_BOKEH_RE.match(tail)
    local = _TAIL_LOCAL_RE.match(tail) if bokeh is None else None
    if bokeh is not None:
        task, s2_txt = Task.BOKEH_RESTORE, bokeh.group("s2")
    elif local is not None:
        task, s2_txt = Task.LOCAL_RESTORE, local.group("s2")
    else:
        raise MalformedInstruction(f"unrecognized instruction tail: {tail!r}")
    return Instruction(task=task, region_caption=caption, s1=float(s1_txt), s2=float(s2_txt))


def render_training_instruction(task: Task, region_caption: str) -> str:
    """Training instructions carry no scales; injection uses coefficient 1."""
    caption = _validate_caption(region_caption)
    if task is Task.BOKEH_RESTORE:
        return f"make {caption} clear and keep other parts bokeh blur"
    return f"make {caption} clear"


def derive_prompts(instr: Instruction) -> PromptPair:
    """Derive the backbone/control prompt pair for one instruction."""
    cap = instr.region_caption
    if instr.task is Task.BOKEH_RESTORE:
        return PromptPair(
            backbone_prompt=f"{cap} in front of bokeh background",
            control_prompt=f"make {cap} clear and keep other parts bokeh blur",
        )
    return PromptPair(backbone_prompt=cap, control_prompt=f"make {cap} clear")
