"""Skill-conditioned extraction: prompt building, action-block parsing, span execution."""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from typing import Sequence

from .backends import BackendError, CompletionParams, LlmBackend
from .memory import ApplyReport, Delete, Insert, MemoryAction, MemoryBank, Noop, RetrievedSet, Update
from .skills import Skill
from .templates import load_asset, render

log = logging.getLogger(__name__)

NO_MEMORIES = "(none)"
DEFAULT_MAX_ACTIONS = 32

_BLOCK_SPLIT = re.compile(r"\n\s*\n")
_FIELD = re.compile(r"^\s*([A-Za-z_]+)\s*:\s*(.*)$")


def render_memories(retrieved: RetrievedSet) -> str:
    if not len(retrieved):
        return NO_MEMORIES
    return "".join(f"\n[{r.local_index}] {r.text}" for r in retrieved)


def render_skills(skills: Sequence[Skill]) -> str:
    return "".join(f"\n\n{s.instruction_template}" for s in skills)


def build_executor_prompt(span_text: str, retrieved: RetrievedSet, skills: Sequence[Skill]) -> str:
    if not skills:
        raise ValueError("executor prompt needs at least one skill")
    return render(
        load_asset("executor_prompt"),
        session_text=span_text,
        mem_text=render_memories(retrieved),
        skills_text=render_skills(skills),
    )


def format_action_blocks(actions: Sequence[MemoryAction]) -> str:
    """Inverse of :func:`parse_action_blocks` for well-formed action lists."""
    blocks = []
    for a in actions:
        if isinstance(a, Insert):
            blocks.append(f"ACTION: INSERT\nMEMORY_ITEM: {a.text}")
        elif isinstance(a, Update):
            blocks.append(f"ACTION: UPDATE\nMEMORY_INDEX: {a.local_index}\nUPDATED_MEMORY: {a.text}")
        elif isinstance(a, Delete):
            blocks.append(f"ACTION: DELETE\nMEMORY_INDEX: {a.local_index}")
        elif isinstance(a, Noop):
            blocks.append("ACTION: NOOP")
        else:
            raise TypeError(f"not a memory action: {a!r}")
    return "\n\n".join(blocks)


def _parse_index(raw: str | None) -> int | None:
    if raw is None:
        return None
    raw = raw.strip().strip("[]").strip()
    if not re.fullmatch(r"[+-]?\d+", raw):
        return None
    return int(raw)


def parse_action_blocks(text: str) -> tuple[list[MemoryAction], list[str]]:
    """Parse blank-line separated ``ACTION:`` blocks.  Never raises."""
    actions: list[MemoryAction] = []
    warnings: list[str] = []
    for n, block in enumerate(_BLOCK_SPLIT.split(text.strip())):
        if not block.strip():
            continue
        fields: dict[str, str] = {}
        for line in block.splitlines():
            m = _FIELD.match(line)
            if m and m.group(1).upper() not in fields:
                fields[m.group(1).upper()] = m.group(2).strip()
        kind = fields.get("ACTION")
        if kind is None:
            warnings.append(f"block {n}: no ACTION header")
            continue
        kind = kind.upper()
        if kind == "INSERT":
            item = fields.get("MEMORY_ITEM")
            if not item:
                warnings.append(f"block {n}: INSERT without MEMORY_ITEM")
                continue
            actions.append(Insert(item))
        elif kind == "UPDATE":
            idx = _parse_index(fields.get("MEMORY_INDEX"))
            item = fields.get("UPDATED_MEMORY")
            if idx is None or not item:
                warnings.append(f"block {n}: UPDATE needs an integer MEMORY_INDEX and UPDATED_MEMORY")
                continue
            actions.append(Update(idx, item))
        elif kind == "DELETE":
            idx = _parse_index(fields.get("MEMORY_INDEX"))
            if idx is None:
                warnings.append(f"block {n}: DELETE needs an integer MEMORY_INDEX")
                continue
            actions.append(Delete(idx))
        elif kind in ("NOOP", "SKIP"):
            actions.append(Noop())
        else:
            warnings.append(f"block {n}: unknown action {kind!r}")
    return actions, warnings


@dataclass
class SpanResult:
    actions: list[MemoryAction] = field(default_factory=list)
    report: ApplyReport = field(default_factory=ApplyReport)
    failed: bool = False
    error: str = ""
    raw: str = ""


def execute_span(
    span_text: str,
    bank: MemoryBank,
    retrieved: RetrievedSet,
    skills: Sequence[Skill],
    backend: LlmBackend,
    params: CompletionParams = CompletionParams(),
    step: int = 0,
    max_actions: int = DEFAULT_MAX_ACTIONS,
) -> SpanResult:
    """One executor call for one span; parsed actions are applied to ``bank``."""
    prompt = build_executor_prompt(span_text, retrieved, skills)
    try:
        raw = backend.complete([{"role": "user", "content": prompt}], params)
    except BackendError as exc:
        log.warning("executor call failed: %s", exc)
        return SpanResult(failed=True, error=str(exc))
    actions, warnings = parse_action_blocks(raw)
    if len(actions) > max_actions:
        warnings.append(f"{len(actions)} actions emitted; keeping the first {max_actions}")
        actions = actions[:max_actions]
    report = bank.apply_actions(retrieved, actions, step)
    report.warnings[:0] = warnings
    return SpanResult(actions=actions, report=report, raw=raw)
