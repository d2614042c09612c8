"""Trace-specific memory bank: retrieval, action application, JSONL persistence."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Iterable, Union

import numpy as np

from .embedding import Embedder, cosine

log = logging.getLogger(__name__)


class MemoryFormatError(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass
class MemoryItem:
    id: int
    text: str
    embedding: np.ndarray
    created_step: int
    updated_step: int

    def __eq__(self, other):
        if not isinstance(other, MemoryItem):
            return NotImplemented
        return (
            (self.id, self.text, self.created_step, self.updated_step)
            == (other.id, other.text, other.created_step, other.updated_step)
            and np.array_equal(self.embedding, other.embedding)
        )


@dataclass(frozen=True)
class Retrieved:
    local_index: int
    item_id: int
    text: str
    score: float


@dataclass(frozen=True)
class RetrievedSet:
    items: tuple[Retrieved, ...] = ()

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    @property
    def ids(self) -> list[int]:
        return [r.item_id for r in self.items]

    @property
    def texts(self) -> list[str]:
        return [r.text for r in self.items]


# -- actions ------------------------------------------------------------------


@dataclass(frozen=True)
class Insert:
    text: str


@dataclass(frozen=True)
class Update:
    local_index: int
    text: str


@dataclass(frozen=True)
class Delete:
    local_index: int


@dataclass(frozen=True)
class Noop:
    pass


MemoryAction = Union[Insert, Update, Delete, Noop]


@dataclass
class ApplyReport:
    inserted: list[int] = field(default_factory=list)
    updated: list[int] = field(default_factory=list)
    deleted: list[int] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def mutations(self) -> int:
        return len(self.inserted) + len(self.updated) + len(self.deleted)


class MemoryBank:
    """Memories extracted for one trace.  Ids are never reused."""

    def __init__(self, embedder: Embedder | None = None):
        self.embedder = embedder
        self._items: dict[int, MemoryItem] = {}
        self._next_id = 0

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self):
        return iter(self._items.values())

    def __contains__(self, item_id: int) -> bool:
        return item_id in self._items

    def __eq__(self, other):
        if not isinstance(other, MemoryBank):
            return NotImplemented
        return list(self._items.values()) == list(other._items.values())

    def get(self, item_id: int) -> MemoryItem:
        return self._items[item_id]

    @property
    def items(self) -> list[MemoryItem]:
        return list(self._items.values())

    def _embed(self, text: str) -> np.ndarray:
        if self.embedder is None:
            raise RuntimeError("memory bank has no embedder; cannot embed new text")
        return self.embedder.embed(text)

    def add(self, text: str, step: int = 0) -> int:
        item_id = self._next_id
        self._next_id += 1
        self._items[item_id] = MemoryItem(item_id, text, self._embed(text), step, step)
        return item_id

    def rewrite(self, item_id: int, text: str, step: int) -> None:
        item = self._items[item_id]
        item.text = text
        item.embedding = self._embed(text)
        item.updated_step = max(step, item.created_step)

    def remove(self, item_id: int) -> None:
        del self._items[item_id]

    # -- retrieval ------------------------------------------------------------

    def retrieve(self, query_embedding: np.ndarray, r: int) -> RetrievedSet:
        """Top-``r`` items by cosine score; ties go to the more recent, then larger id."""
        if r < 1:
            raise ValueError("r must be >= 1")
        scored = [(cosine(query_embedding, it.embedding), it) for it in self._items.values()]
        scored.sort(key=lambda p: (-p[0], -p[1].updated_step, -p[1].id))
        return RetrievedSet(
            tuple(Retrieved(i, it.id, it.text, score) for i, (score, it) in enumerate(scored[:r]))
        )

    # -- mutation -------------------------------------------------------------

    def apply_actions(self, retrieved: RetrievedSet, actions: Iterable[MemoryAction], step: int) -> ApplyReport:
        """Apply executor actions, resolving every index against ``retrieved`` first.

        Bad references become warnings in the report; the batch never aborts.
        """
        report = ApplyReport()
        resolved: list[tuple[MemoryAction, int | None]] = []
        for n, action in enumerate(actions):
            if isinstance(action, (Update, Delete)):
                if not 0 <= action.local_index < len(retrieved):
                    report.warnings.append(
                        f"action {n}: MEMORY_INDEX {action.local_index} out of range (0..{len(retrieved) - 1})"
                    )
                    continue
                resolved.append((action, retrieved.items[action.local_index].item_id))
            else:
                resolved.append((action, None))

        for action, item_id in resolved:
            if isinstance(action, Insert):
                report.inserted.append(self.add(action.text, step))
            elif isinstance(action, (Update, Delete)):
                if item_id not in self._items:
                    report.warnings.append(f"{type(action).__name__.lower()} of memory {item_id} dropped: already deleted")
                    continue
                if isinstance(action, Update):
                    self.rewrite(item_id, action.text, step)
                    report.updated.append(item_id)
                else:
                    self.remove(item_id)
                    report.deleted.append(item_id)
        for w in report.warnings:
            log.debug("apply_actions: %s", w)
        return report

    # -- persistence ------------------------------------------------------------

    def to_jsonl(self) -> str:
        lines = [
            json.dumps(
                {
                    "id": it.id,
                    "text": it.text,
                    "created_step": it.created_step,
                    "updated_step": it.updated_step,
                    "embedding": it.embedding.tolist(),
                },
                ensure_ascii=False,
            )
            for it in self._items.values()
        ]
        return "".join(line + "\n" for line in lines)

    @classmethod
    def from_jsonl(cls, text: str, embedder: Embedder | None = None) -> "MemoryBank":
        bank = cls(embedder)
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                item = MemoryItem(
                    id=int(d["id"]),
                    text=str(d["text"]),
                    embedding=np.asarray(d["embedding"], dtype=np.float64),
                    created_step=int(d["created_step"]),
                    updated_step=int(d["updated_step"]),
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise MemoryFormatError(f"malformed memory record: {exc}", lineno) from exc
            if item.id in bank._items:
                raise MemoryFormatError(f"duplicate id {item.id}", lineno)
            bank._items[item.id] = item
            bank._next_id = max(bank._next_id, item.id + 1)
        return bank
