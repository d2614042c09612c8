"""Traces, chunking, reward scoring, and the deterministic synthetic environment."""
from __future__ import annotations

import json
import re
import string
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .backends import BackendError, CompletionParams, LlmBackend
from .embedding import Embedder
from .memory import MemoryBank, RetrievedSet
from .skills import Skill, SkillBank
from .templates import ANSWER_TEMPLATES, load_asset, render


@dataclass(frozen=True)
class Span:
    index: int
    text: str


@dataclass(frozen=True)
class Query:
    id: str
    text: str
    ground_truth: str
    metadata: dict = field(default_factory=dict, compare=False)


@dataclass(frozen=True)
class Trace:
    trace_id: str
    spans: tuple[Span, ...]
    queries: tuple[Query, ...]
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        ids = [q.id for q in self.queries]
        if len(set(ids)) != len(ids):
            raise ValueError(f"trace {self.trace_id}: duplicate query ids")


class TraceSchemaError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


# -- chunking -----------------------------------------------------------------


def chunk_text(text: str, span_tokens: int = 512) -> list[Span]:
    """Greedy whitespace-token chunks of at most ``span_tokens`` tokens."""
    if span_tokens < 16:
        raise ValueError("span_tokens must be >= 16")
    tokens = text.split()
    return [Span(i, " ".join(tokens[s: s + span_tokens])) for i, s in enumerate(range(0, len(tokens), span_tokens))]


def chunk_sessions(sessions: Sequence[str]) -> list[Span]:
    """One span per non-empty session, whatever its length."""
    return [Span(i, s) for i, s in enumerate(s for s in sessions if s.strip())]


# -- scoring --------------------------------------------------------------------

_ARTICLES = re.compile(r"\b(a|an|the)\b")
_PUNCT = str.maketrans("", "", string.punctuation)


def normalize_answer(s: str) -> str:
    s = s.lower().translate(_PUNCT)
    s = _ARTICLES.sub(" ", s)
    return " ".join(s.split())


def token_f1(prediction: str, gold: str) -> float:
    pred = normalize_answer(prediction).split()
    ref = normalize_answer(gold).split()
    if not pred and not ref:
        return 1.0
    if not pred or not ref:
        return 0.0
    overlap = sum((Counter(pred) & Counter(ref)).values())
    if overlap == 0:
        return 0.0
    p = overlap / len(pred)
    r = overlap / len(ref)
    return 2 * p * r / (p + r)


def exact_match(prediction: str, gold: str) -> float:
    return float(normalize_answer(prediction) == normalize_answer(gold))


METRICS = {"f1": token_f1, "em": exact_match}


# -- memory evaluation ------------------------------------------------------------


def render_context(retrieved: RetrievedSet) -> str:
    return "\n".join(f"- {r.text}" for r in retrieved) if len(retrieved) else "(no memories)"


def build_answer_prompt(question: str, retrieved: RetrievedSet, template: str = "locomo", date: str = "") -> str:
    return render(
        load_asset(ANSWER_TEMPLATES[template]),
        context=render_context(retrieved),
        question=question,
        date=date,
    )


_ANSWER_TAG = re.compile(r"<answer>(.*?)</answer>", re.S)


def extract_answer(raw: str) -> str:
    m = _ANSWER_TAG.search(raw)
    return (m.group(1) if m else raw).strip()


@dataclass
class QueryRecord:
    query: Query
    query_embedding: np.ndarray
    prediction: str
    reward: float
    retrieved: RetrievedSet
    failed: bool = False


def evaluate_memory(
    bank: MemoryBank,
    queries: Sequence[Query],
    backend: LlmBackend,
    embedder: Embedder,
    retrieve_r: int = 20,
    template: str = "locomo",
    metric: str = "f1",
    params: CompletionParams = CompletionParams(max_tokens=64),
) -> tuple[float, list[QueryRecord]]:
    """Answer every query from retrieved memories; the mean score is the episode reward."""
    if not queries:
        raise ValueError("evaluate_memory needs at least one query")
    score = METRICS[metric]
    records = []
    for q in queries:
        qe = embedder.embed(q.text)
        retrieved = bank.retrieve(qe, retrieve_r)
        prompt = build_answer_prompt(q.text, retrieved, template, q.metadata.get("date", ""))
        try:
            pred = extract_answer(backend.complete([{"role": "user", "content": prompt}], params))
            failed = False
        except BackendError:
            pred, failed = "", True
        records.append(QueryRecord(q, qe, pred, 0.0 if failed else score(pred, q.ground_truth), retrieved, failed))
    return float(np.mean([r.reward for r in records])), records


# -- trace files --------------------------------------------------------------------


def _require(obj, key: str, path: str, kind):
    if not isinstance(obj, dict) or key not in obj:
        raise TraceSchemaError(f"{path}.{key}", "missing required field")
    value = obj[key]
    if not isinstance(value, kind):
        raise TraceSchemaError(f"{path}.{key}", f"expected {kind.__name__ if isinstance(kind, type) else kind}")
    return value


def _parse_queries(doc: dict) -> tuple[Query, ...]:
    out = []
    for i, q in enumerate(doc.get("queries", [])):
        path = f"$.queries[{i}]"
        if not isinstance(q, dict):
            raise TraceSchemaError(path, "expected an object")
        text = q.get("question", q.get("text"))
        gold = q.get("answer", q.get("ground_truth"))
        if not isinstance(text, str):
            raise TraceSchemaError(f"{path}.question", "missing or not a string")
        if gold is None:
            raise TraceSchemaError(f"{path}.answer", "missing required field")
        meta = {k: v for k, v in q.items() if k not in ("id", "question", "text", "answer", "ground_truth")}
        out.append(Query(str(q.get("id", i)), text, str(gold), meta))
    return tuple(out)


def trace_from_dict(doc: dict, fmt: str | None = None, span_tokens: int = 512, trace_id: str = "trace") -> Trace:
    if not isinstance(doc, dict):
        raise TraceSchemaError("$", "expected an object")
    if fmt is None:
        fmt = "conversation" if "sessions" in doc else "trajectory" if "steps" in doc else None
        if fmt is None:
            raise TraceSchemaError("$", "expected a 'sessions' or 'steps' field")
    tid = str(doc.get("trace_id", trace_id))
    if fmt == "conversation":
        sessions = []
        for i, sess in enumerate(_require(doc, "sessions", "$", list)):
            turns = _require(sess, "turns", f"$.sessions[{i}]", list)
            lines = []
            if isinstance(sess, dict) and sess.get("date"):
                lines.append(f"[{sess['date']}]")
            for j, turn in enumerate(turns):
                path = f"$.sessions[{i}].turns[{j}]"
                speaker = _require(turn, "speaker", path, str)
                text = _require(turn, "text", path, str)
                lines.append(f"{speaker}: {text}")
            sessions.append("\n".join(lines))
        spans = chunk_sessions(sessions)
    elif fmt == "trajectory":
        parts = []
        for i, st in enumerate(_require(doc, "steps", "$", list)):
            path = f"$.steps[{i}]"
            obs = _require(st, "observation", path, str)
            act = _require(st, "action", path, str)
            parts.append(f"Observation: {obs} Action: {act}")
        spans = chunk_text("\n".join(parts), span_tokens)
    else:
        raise ValueError(f"unknown trace format {fmt!r}")
    return Trace(tid, tuple(spans), _parse_queries(doc), {"format": fmt})


def load_trace_json(path: str | Path, fmt: str | None = None, span_tokens: int = 512) -> Trace:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise TraceSchemaError("$", f"invalid JSON: {exc}") from exc
    return trace_from_dict(doc, fmt, span_tokens, trace_id=path.stem)


def load_traces(path: str | Path, fmt: str | None = None, span_tokens: int = 512) -> list[Trace]:
    """A trace file, a JSON list of traces, or a directory of ``*.json`` traces."""
    path = Path(path)
    if path.is_dir():
        return [load_trace_json(p, fmt, span_tokens) for p in sorted(path.glob("*.json"))]
    doc = json.loads(path.read_text(encoding="utf-8"))
    if isinstance(doc, list):
        return [trace_from_dict(d, fmt, span_tokens, trace_id=f"{path.stem}-{i}") for i, d in enumerate(doc)]
    return [trace_from_dict(doc, fmt, span_tokens, trace_id=path.stem)]


def trace_to_dict(trace: Trace) -> dict:
    """Serialise a trace as a conversational document (one session per span)."""
    return {
        "trace_id": trace.trace_id,
        "sessions": [{"turns": [{"speaker": "narrator", "text": s.text}]} for s in trace.spans],
        "queries": [{"id": q.id, "question": q.text, "answer": q.ground_truth, **q.metadata} for q in trace.queries],
    }


# -- synthetic environment --------------------------------------------------------

_NEUTRAL = "today someone mentioned several things during long conversation about plans people".split()
_ADJ = "amber silver quiet rapid golden hollow bright crimson gentle frozen".split()
_NOUN = "falcon river lantern meadow harbor canyon orchard beacon glacier compass".split()


@dataclass(frozen=True)
class SyntheticSpec:
    categories: tuple[str, ...] = ("temporal", "location", "preference", "relation")
    spans_per_trace: int = 4
    facts_per_span: int = 1
    n_traces: int = 64
    distractor_skills: int = 2
    words_per_span: int = 12
    skill_keying: dict | None = None  # category -> keyed skill name
    seed: int = 0

    def __post_init__(self):
        if len(self.categories) < 2:
            raise ValueError("need at least two categories")

    def keyed_name(self, category: str) -> str:
        if self.skill_keying and category in self.skill_keying:
            return self.skill_keying[category]
        return f"capture_{category}"


def category_vocab(category: str, n: int = 8) -> list[str]:
    return [f"{category}{i}" for i in range(n)] + [category]


def keyed_skill(category: str, name: str | None = None) -> Skill:
    name = name or f"capture_{category}"
    label = category.replace("_", " ")
    return Skill(
        name=name,
        description=f"Memory management skill for capturing {label} facts and {label} details mentioned in the text chunk.",
        instruction_template=(
            f"Skill: Capture {label.title()} Facts\n"
            f"Purpose: Capture {label} facts stated in the text chunk.\n"
            f"When to use:\n- The text chunk is about {label} topics.\n"
            f"How to apply:\n- Store each {label} fact as a separate item.\n"
            f"Constraints:\n- Ignore facts of other kinds.\n"
            f"Action type: INSERT only."
        ),
        update_type="insert",
    )


def distractor_skill(i: int) -> Skill:
    topic = ["weather small talk", "greeting phrases", "filler chatter", "formatting trivia"][i % 4]
    return Skill(
        name=f"distractor_{i}",
        description=f"Memory management skill for noting {topic} number {i} in the text chunk.",
        instruction_template=(
            f"Skill: Note Distractor {i}\nPurpose: Note {topic}.\nWhen to use:\n- Rarely.\n"
            f"Constraints:\n- Never store facts.\nAction type: INSERT only."
        ),
        update_type="insert",
    )


def synthetic_skill_bank(spec: SyntheticSpec, covered: Sequence[str] | None = None) -> SkillBank:
    """Keyed skills for ``covered`` categories (default: all) plus distractors."""
    covered = spec.categories if covered is None else covered
    skills = [keyed_skill(c, spec.keyed_name(c)) for c in covered]
    skills += [distractor_skill(i) for i in range(spec.distractor_skills)]
    return SkillBank(version=0, skills=tuple(skills))


def make_synthetic(spec: SyntheticSpec, seed: int | None = None) -> tuple[list[Trace], dict, dict]:
    """Traces plus scripted executor and answer rules.

    Each span carries one ``[CAT:c]`` marker and ``facts_per_span`` facts
    ``code <key> is <adj> <noun>``.  The executor rules emit a span's facts iff
    the template of the skill keyed to ``c`` is selected, and every query asks
    for one fact, so the episode reward is the fraction of facts whose span
    had its keyed skill selected.
    """
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    used: set[str] = set()
    traces = []
    for t in range(spec.n_traces):
        spans, queries = [], []
        for s in range(spec.spans_per_trace):
            cat = spec.categories[int(rng.integers(len(spec.categories)))]
            vocab = category_vocab(cat)
            words = [vocab[int(i)] for i in rng.integers(len(vocab), size=spec.words_per_span)]
            words += [_NEUTRAL[int(i)] for i in rng.integers(len(_NEUTRAL), size=spec.words_per_span // 3)]
            lines = [f"[CAT:{cat}] " + " ".join(words)]
            for _ in range(spec.facts_per_span):
                while True:
                    key = "k" + "".join(rng.choice(list("0123456789abcdef"), size=6))
                    if key not in used:
                        used.add(key)
                        break
                value = f"{_ADJ[int(rng.integers(len(_ADJ)))]} {_NOUN[int(rng.integers(len(_NOUN)))]}"
                lines.append(f"[FACT] code {key} is {value}")
                queries.append(Query(f"{t}-{key}", f"What is code {key}?", value, {"category": cat, "span": s}))
            spans.append(Span(s, "\n".join(lines)))
        traces.append(Trace(f"synth-{t:04d}", tuple(spans), tuple(queries), {"format": "synthetic"}))

    executor_rules = {
        "category_pattern": r"\[CAT:([A-Za-z0-9_-]+)\]",
        "fact_pattern": r"\[FACT\]\s*([^\n]+)",
        "keying": {c: [keyed_skill(c, spec.keyed_name(c)).instruction_template] for c in spec.categories},
    }
    answer_rules = {"key_pattern": r"code (k[0-9a-f]+)", "memory_pattern": r"code {key} is ([^.\n]+)", "fallback": "unknown"}
    return traces, executor_rules, answer_rules


def span_category(text: str) -> str | None:
    m = re.search(r"\[CAT:([A-Za-z0-9_-]+)\]", text)
    return m.group(1) if m else None
