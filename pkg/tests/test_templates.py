"""Prompt and skill assets must match the published appendix text word for word."""
import re
from pathlib import Path

import pytest

from skillmem.templates import load_asset, render

SOURCE = Path(__file__).resolve().parents[1] / "paper.md"
ASSETS = [
    "skill_insert", "skill_update", "skill_delete", "skill_noop",
    "executor_prompt", "designer_analysis_prompt", "designer_refinement_prompt",
    "answer_locomo", "answer_longmemeval", "answer_hotpotqa",
]


def _words(s: str) -> str:
    s = s.replace("\\_", "_")
    s = re.sub(r"\\(textbf|texttt|item|textless|textgreater)", " ", s)
    return " ".join(re.findall(r"[A-Za-z0-9]+", s))


@pytest.fixture(scope="module")
def source_words():
    if not SOURCE.exists():
        pytest.skip("source text not available")
    return _words(SOURCE.read_text(encoding="utf-8"))


@pytest.mark.parametrize("name", ASSETS)
def test_asset_lines_appear_in_source(name, source_words):
    missing = []
    for line in load_asset(name).splitlines():
        if re.fullmatch(r"\s*\{\w+\}\s*", line):
            continue  # bare slot added by this package
        # the source writes some slots as bare "{}", others named
        named, bare = _words(line), _words(re.sub(r"\{\w+\}", "", line))
        if named and named not in source_words and bare not in source_words:
            missing.append(line)
    assert not missing


def test_render_touches_only_known_keys():
    assert render("{a} and {b} and {a}", a="x") == "x and {b} and x"


def test_render_is_single_pass():
    assert render("{a}", a="{b}", b="no") == "{b}"
