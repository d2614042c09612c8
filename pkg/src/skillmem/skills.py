"""Versioned skill bank: primitives, designer edits, snapshots, persistence."""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Literal, Union

from .templates import load_asset

UPDATE_TYPES = ("insert", "update", "delete", "noop")
EVOLVABLE_UPDATE_TYPES = ("insert", "update")
_NAME_RE = re.compile(r"^[a-z0-9_]+$")


class SkillValidationError(ValueError):
    """A skill or proposal violates the bank's invariants."""


@dataclass(frozen=True)
class Skill:
    name: str
    description: str
    instruction_template: str
    update_type: str
    origin: str = "initial"
    created_step: int = 0

    def __post_init__(self):
        if not _NAME_RE.match(self.name or ""):
            raise SkillValidationError(f"skill name {self.name!r} must match [a-z0-9_]+")
        if not self.description.strip():
            raise SkillValidationError(f"skill {self.name!r}: empty description")
        if not self.instruction_template.strip():
            raise SkillValidationError(f"skill {self.name!r}: empty instruction_template")
        if self.update_type not in UPDATE_TYPES:
            raise SkillValidationError(f"skill {self.name!r}: unknown update_type {self.update_type!r}")
        if self.origin.startswith("designer_added") and self.update_type not in EVOLVABLE_UPDATE_TYPES:
            raise SkillValidationError(
                f"skill {self.name!r}: designer-created skills must be insert or update, got {self.update_type!r}"
            )

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "description": self.description,
            "instruction_template": self.instruction_template,
            "update_type": self.update_type,
            "origin": self.origin,
            "created_step": self.created_step,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Skill":
        return cls(
            name=d["name"],
            description=d["description"],
            instruction_template=d["instruction_template"],
            update_type=d["update_type"],
            origin=d.get("origin", "initial"),
            created_step=int(d.get("created_step", 0)),
        )


@dataclass(frozen=True)
class SkillBank:
    version: int
    skills: tuple[Skill, ...]
    parent_version: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "skills", tuple(self.skills))
        if not self.skills:
            raise SkillValidationError("a skill bank needs at least one skill")
        names = [s.name for s in self.skills]
        if len(set(names)) != len(names):
            raise SkillValidationError(f"duplicate skill names in bank: {names}")

    def __len__(self) -> int:
        return len(self.skills)

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.skills]

    def get(self, name: str) -> Skill:
        for s in self.skills:
            if s.name == name:
                return s
        raise KeyError(name)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "parent_version": self.parent_version,
            "skills": [s.to_dict() for s in self.skills],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, ensure_ascii=False) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "SkillBank":
        return cls(
            version=int(d["version"]),
            parent_version=d.get("parent_version"),
            skills=tuple(Skill.from_dict(s) for s in d["skills"]),
        )

    @classmethod
    def from_json(cls, text: str) -> "SkillBank":
        return cls.from_dict(json.loads(text))


def _description_line(template: str) -> str:
    for line in template.splitlines():
        if line.startswith("Description:"):
            return line[len("Description:"):].strip()
    raise ValueError("primitive skill text has no Description line")


_PRIMITIVES = (("insert", "skill_insert"), ("update", "skill_update"), ("delete", "skill_delete"), ("noop", "skill_noop"))


def init_primitives() -> SkillBank:
    """The four starting skills: insert, update, delete and no-op."""
    skills = []
    for update_type, asset in _PRIMITIVES:
        text = load_asset(asset)
        skills.append(
            Skill(
                name=update_type,
                description=_description_line(text),
                instruction_template=text,
                update_type=update_type,
            )
        )
    return SkillBank(version=0, skills=tuple(skills))


# -- designer proposals -------------------------------------------------------


@dataclass(frozen=True)
class AddSkill:
    name: str
    description: str
    instruction_template: str
    update_type: str
    reasoning: str = ""

    @property
    def target(self) -> str:
        return self.name


@dataclass(frozen=True)
class RefineSkill:
    name: str
    new_description: str | None = None
    new_instruction_template: str | None = None
    reasoning: str = ""

    @property
    def target(self) -> str:
        return self.name


Change = Union[AddSkill, RefineSkill]


@dataclass(frozen=True)
class EvolutionProposal:
    action: Literal["apply_changes", "no_change"]
    changes: tuple[Change, ...] = ()
    summary: str = ""

    @property
    def adds(self) -> list[AddSkill]:
        return [c for c in self.changes if isinstance(c, AddSkill)]

    @classmethod
    def no_change(cls, summary: str = "") -> "EvolutionProposal":
        return cls(action="no_change", changes=(), summary=summary)


def validate_change(bank: SkillBank, change: Change, seen: set[str]) -> None:
    """Raise :class:`SkillValidationError` if ``change`` cannot apply to ``bank``."""
    if change.target in seen:
        raise SkillValidationError(f"{change.target!r} is targeted more than once")
    if isinstance(change, AddSkill):
        if change.name in bank.names:
            raise SkillValidationError(f"add {change.name!r}: name already exists")
        if change.update_type not in EVOLVABLE_UPDATE_TYPES:
            raise SkillValidationError(f"add {change.name!r}: update_type {change.update_type!r} is not allowed")
        if not _NAME_RE.match(change.name or ""):
            raise SkillValidationError(f"add {change.name!r}: name must match [a-z0-9_]+")
        if not change.description.strip() or not change.instruction_template.strip():
            raise SkillValidationError(f"add {change.name!r}: description and instruction_template are required")
    else:
        if change.name not in bank.names:
            raise SkillValidationError(f"refine {change.name!r}: no such skill")
        if bank.get(change.name).update_type not in EVOLVABLE_UPDATE_TYPES:
            raise SkillValidationError(f"refine {change.name!r}: delete and noop skills are not evolved")
        if change.new_description is None and change.new_instruction_template is None:
            raise SkillValidationError(f"refine {change.name!r}: nothing to change")
        for value in (change.new_description, change.new_instruction_template):
            if value is not None and not value.strip():
                raise SkillValidationError(f"refine {change.name!r}: empty replacement text")


def apply_proposal(bank: SkillBank, proposal: EvolutionProposal, *, round_index: int = 0, step: int = 0,
                   new_version: int | None = None) -> SkillBank:
    """Return a new bank with the proposal's adds and refines applied.

    The new version is ``bank.version + 1`` unless ``new_version`` is given
    (after a rollback the caller passes its global counter so that versions
    never repeat).  The input bank is never modified; any invalid change
    aborts the whole proposal with :class:`SkillValidationError`.
    """
    version = bank.version + 1 if new_version is None else new_version
    if version <= bank.version:
        raise SkillValidationError(f"new version {version} must exceed {bank.version}")
    seen: set[str] = set()
    for change in proposal.changes:
        validate_change(bank, change, seen)
        seen.add(change.target)

    skills = list(bank.skills)
    for change in proposal.changes:
        if isinstance(change, RefineSkill):
            i = bank.index(change.name)
            old = skills[i]
            skills[i] = replace(
                old,
                description=change.new_description if change.new_description is not None else old.description,
                instruction_template=(
                    change.new_instruction_template if change.new_instruction_template is not None else old.instruction_template
                ),
                origin=f"designer_refined:{round_index}",
            )
    for change in proposal.adds:
        skills.append(
            Skill(
                name=change.name,
                description=change.description,
                instruction_template=change.instruction_template,
                update_type=change.update_type,
                origin=f"designer_added:{round_index}",
                created_step=step,
            )
        )
    return SkillBank(version=version, skills=tuple(skills), parent_version=bank.version)


# -- snapshots and persistence ------------------------------------------------


@dataclass
class SnapshotStore:
    """Snapshots of skill banks, in memory and optionally mirrored to ``root``."""

    root: Path | None = None
    _banks: dict[str, str] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.root is not None:
            self.root = Path(self.root)
            self.root.mkdir(parents=True, exist_ok=True)
            for p in sorted(self.root.glob("snap-*.json")):
                self._banks[p.stem] = p.read_text(encoding="utf-8")

    def snapshot(self, bank: SkillBank) -> str:
        snap_id = f"snap-{len(self._banks):04d}-v{bank.version}"
        text = bank.to_json()
        self._banks[snap_id] = text
        if self.root is not None:
            (self.root / f"{snap_id}.json").write_text(text, encoding="utf-8")
        return snap_id

    def restore(self, snap_id: str) -> SkillBank:
        try:
            return SkillBank.from_json(self._banks[snap_id])
        except KeyError:
            raise KeyError(f"unknown snapshot id {snap_id!r}") from None

    def ids(self) -> list[str]:
        return list(self._banks)


def save_bank(bank: SkillBank, directory: Path) -> Path:
    """Write ``bank_v{version}.json`` into an append-only version directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"bank_v{bank.version:04d}.json"
    path.write_text(bank.to_json(), encoding="utf-8")
    return path


def load_bank(path: Path) -> SkillBank:
    return SkillBank.from_json(Path(path).read_text(encoding="utf-8"))


def diff_banks(old: SkillBank, new: SkillBank) -> dict[str, list[str]]:
    old_by_name = {s.name: s for s in old.skills}
    new_names = set(new.names)
    return {
        "added": [s.name for s in new.skills if s.name not in old_by_name],
        "removed": [n for n in old.names if n not in new_names],
        "refined": [
            s.name
            for s in new.skills
            if s.name in old_by_name
            and (s.description, s.instruction_template) != (old_by_name[s.name].description, old_by_name[s.name].instruction_template)
        ],
    }


def describe_bank(skills: Iterable[Skill], full: bool = False) -> str:
    """Render skills for the designer prompts (names + descriptions, or full texts)."""
    parts = []
    for s in skills:
        if full:
            parts.append(
                f"### {s.name} (update_type: {s.update_type})\n"
                f"Description: {s.description}\n"
                f"Instruction template:\n{s.instruction_template}"
            )
        else:
            parts.append(f"- {s.name} ({s.update_type}): {s.description}")
    return ("\n\n" if full else "\n").join(parts)
