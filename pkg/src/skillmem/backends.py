"""LLM backends: an OpenAI-style chat client and a rule-driven scripted stand-in."""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

from .embedding import post_with_retries

Message = dict  # {"role": str, "content": str}


class BackendError(RuntimeError):
    """A completion call failed; ``attempts`` is how many tries were made."""

    def __init__(self, message: str, attempts: int = 1):
        super().__init__(message)
        self.attempts = attempts


@dataclass(frozen=True)
class CompletionParams:
    temperature: float = 0.0
    max_tokens: int = 1024


class LlmBackend(Protocol):
    def complete(self, messages: Sequence[Message], params: CompletionParams = CompletionParams()) -> str: ...


@dataclass
class ChatHttpBackend:
    """Client for ``POST {url}`` speaking the chat-completions JSON protocol."""

    url: str
    model: str
    api_key: str | None = None
    timeout: float = 60.0
    max_attempts: int = 3
    backoff: float = 1.0

    def complete(self, messages: Sequence[Message], params: CompletionParams = CompletionParams()) -> str:
        payload = {
            "model": self.model,
            "messages": [{"role": m["role"], "content": m["content"]} for m in messages],
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
        }
        body = post_with_retries(
            self.url,
            payload,
            api_key=self.api_key,
            timeout=self.timeout,
            max_attempts=self.max_attempts,
            backoff=self.backoff,
            error_cls=BackendError,
        )
        try:
            content = body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"malformed chat response: {exc}") from exc
        if not isinstance(content, str):
            raise BackendError("chat response content is not a string")
        return content


# -- scripted backend ---------------------------------------------------------

_EXECUTOR_HEAD = "You are a memory management executor."
_ANALYSIS_HEAD = "You are an expert analyst for a memory-augmented QA system."
_REFINE_HEAD = "Based on the failure analysis, propose a specific improvement"


def prompt_kind(prompt: str) -> str:
    if prompt.startswith(_EXECUTOR_HEAD):
        return "executor"
    if prompt.startswith(_ANALYSIS_HEAD):
        return "analysis"
    if prompt.startswith(_REFINE_HEAD):
        return "refinement"
    return "answer"


def _between(text: str, start: str, end: str) -> str:
    i = text.find(start)
    if i < 0:
        return ""
    i += len(start)
    j = text.find(end, i)
    return text[i:] if j < 0 else text[i:j]


@dataclass(frozen=True)
class ExecutorRules:
    category_pattern: str = r"\[CAT:([A-Za-z0-9_-]+)\]"
    fact_pattern: str = r"\[FACT\]\s*([^\n]+)"
    keying: dict = field(default_factory=dict)  # category -> list of template strings


@dataclass(frozen=True)
class AnswerRules:
    key_pattern: str = r"code (\w+)"
    memory_pattern: str = r"code {key} is ([^.\n]+)"
    fallback: str = "unknown"


@dataclass(frozen=True)
class DesignerRule:
    stage: str
    response: str
    contains: tuple[str, ...] = ()
    absent: tuple[str, ...] = ()

    def matches(self, stage: str, prompt: str) -> bool:
        return (
            stage == self.stage
            and all(s in prompt for s in self.contains)
            and not any(s in prompt for s in self.absent)
        )


class ScriptedBackend:
    """Deterministic backend driven by a JSON rule file.

    * executor prompts: for every ``[CAT:c]`` segment of the input chunk, each
      ``[FACT] ...`` line is emitted as an INSERT iff one of the templates keyed
      to ``c`` appears in the selected-skills section; otherwise ``ACTION: NOOP``.
    * answer prompts: the key captured from the question selects a memory line
      in the context; its captured value is the answer.
    * designer prompts: the first rule whose stage and substring conditions
      match supplies the reply.

    Output depends only on the prompt text.  ``calls`` counts completions.
    """

    def __init__(self, executor: ExecutorRules | None = None, answer: AnswerRules | None = None,
                 designer: Sequence[DesignerRule] = (), fail_kinds: Sequence[str] = ()):
        self.executor = executor or ExecutorRules()
        self.answer = answer or AnswerRules()
        self.designer = tuple(designer)
        self.fail_kinds = frozenset(fail_kinds)
        self.calls = 0
        self._cat_re = re.compile(self.executor.category_pattern)
        self._fact_re = re.compile(self.executor.fact_pattern)
        self._key_re = re.compile(self.answer.key_pattern)

    @classmethod
    def from_dict(cls, d: dict) -> "ScriptedBackend":
        ex = d.get("executor", {})
        an = d.get("answer", {})
        rules = [
            DesignerRule(
                stage=r["stage"],
                response=r["response"] if isinstance(r["response"], str) else json.dumps(r["response"]),
                contains=tuple(r.get("contains", ())),
                absent=tuple(r.get("absent", ())),
            )
            for r in d.get("designer", [])
        ]
        return cls(
            executor=ExecutorRules(**{k: v for k, v in ex.items()}),
            answer=AnswerRules(**{k: v for k, v in an.items()}),
            designer=rules,
            fail_kinds=d.get("fail_kinds", ()),
        )

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedBackend":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def to_dict(self) -> dict:
        return {
            "executor": {
                "category_pattern": self.executor.category_pattern,
                "fact_pattern": self.executor.fact_pattern,
                "keying": {k: list(v) for k, v in self.executor.keying.items()},
            },
            "answer": {
                "key_pattern": self.answer.key_pattern,
                "memory_pattern": self.answer.memory_pattern,
                "fallback": self.answer.fallback,
            },
            "designer": [
                {"stage": r.stage, "response": r.response, "contains": list(r.contains), "absent": list(r.absent)}
                for r in self.designer
            ],
            "fail_kinds": sorted(self.fail_kinds),
        }

    def complete(self, messages: Sequence[Message], params: CompletionParams = CompletionParams()) -> str:
        self.calls += 1
        prompt = messages[0]["content"] if len(messages) == 1 else "\n\n".join(m["content"] for m in messages)
        kind = prompt_kind(messages[0]["content"])
        if kind in self.fail_kinds:
            raise BackendError(f"scripted failure for {kind} prompt")
        if kind == "executor":
            return self._execute(prompt)
        if kind in ("analysis", "refinement"):
            for rule in self.designer:
                if rule.matches(kind, prompt):
                    return rule.response
            return "I have no structured answer."
        return self._answer(prompt)

    def _execute(self, prompt: str) -> str:
        chunk = _between(prompt, "Input Text Chunk: ", "\nRetrieved Memories (0-based index):")
        skills = _between(prompt, "\nSelected Skills: ", "\n\nGuidelines:")
        blocks = []
        marks = list(self._cat_re.finditer(chunk))
        for n, m in enumerate(marks):
            segment = chunk[m.end(): marks[n + 1].start() if n + 1 < len(marks) else len(chunk)]
            keyed = self.executor.keying.get(m.group(1), ())
            if not any(t in skills for t in keyed):
                continue
            for fact in self._fact_re.findall(segment):
                blocks.append(f"ACTION: INSERT\nMEMORY_ITEM: {fact.strip()}")
        return "\n\n".join(blocks) if blocks else "ACTION: NOOP"

    def _answer(self, prompt: str) -> str:
        i = prompt.rfind("Question:")
        if i < 0:
            return self.answer.fallback
        question = prompt[i:].split("\n", 1)[0]
        context = prompt[:i]
        km = self._key_re.search(question)
        if not km:
            return self.answer.fallback
        pattern = self.answer.memory_pattern.replace("{key}", re.escape(km.group(1)))
        mm = re.search(pattern, context)
        return mm.group(1).strip() if mm else self.answer.fallback


def backend_from_config(cfg: dict, env: dict | None = None) -> LlmBackend:
    """Build a backend from a ``[backend]``-style config table."""
    import os

    env = os.environ if env is None else env
    kind = cfg.get("kind", "scripted")
    if kind == "scripted":
        if "rules" in cfg:
            return ScriptedBackend.from_file(cfg["rules"])
        return ScriptedBackend.from_dict(cfg.get("inline", {}))
    if kind == "http":
        key_env = cfg.get("api_key_env", "SKILLMEM_API_KEY")
        return ChatHttpBackend(
            url=cfg["url"],
            model=cfg["model"],
            api_key=env.get(key_env),
            timeout=float(cfg.get("timeout", 60.0)),
            max_attempts=int(cfg.get("max_attempts", 3)),
        )
    raise ValueError(f"unknown backend kind {kind!r}")
