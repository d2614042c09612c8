"""Prompt templates and single-pass placeholder substitution."""
from __future__ import annotations

import re
from functools import lru_cache
from importlib import resources

_PLACEHOLDER = re.compile(r"\{([a-z_]+)\}")


@lru_cache(maxsize=None)
def load_asset(name: str) -> str:
    """Text of ``assets/<name>.txt`` without the trailing newline."""
    text = resources.files("skillmem").joinpath("assets").joinpath(f"{name}.txt").read_text(encoding="utf-8")
    return text.rstrip("\n")


def render(template: str, **values: object) -> str:
    """Fill ``{name}`` placeholders in one pass.

    Only names passed in ``values`` are substituted, so literal JSON braces in
    the template and braces inside substituted text are left alone.
    """

    def sub(m: re.Match) -> str:
        key = m.group(1)
        if key in values:
            return str(values[key])
        return m.group(0)

    return _PLACEHOLDER.sub(sub, template)


ANSWER_TEMPLATES = {
    "locomo": "answer_locomo",
    "longmemeval": "answer_longmemeval",
    "hotpotqa": "answer_hotpotqa",
}
