"""Hard-case mining and LLM-driven skill-bank evolution with rollback gating."""
from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import kernels
from .backends import BackendError, CompletionParams, LlmBackend
from .skills import (
    AddSkill,
    EvolutionProposal,
    RefineSkill,
    SkillBank,
    SkillValidationError,
    describe_bank,
    validate_change,
)
from .templates import load_asset, render

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DesignerConfig:
    fail_threshold: float = 0.5
    capacity: int = 64
    max_age: int = 300
    k_clusters: int = 4
    per_cluster: int = 2
    max_cases: int = 8
    max_changes: int = 3
    strict_max_changes: bool = True
    history_len: int = 5
    patience: int = 3
    seed: int = 0


# -- hard cases -----------------------------------------------------------------


@dataclass
class HardCase:
    key: str
    query: str
    query_embedding: np.ndarray
    ground_truth: str
    prediction: str
    reward: float
    failure_count: int = 1
    last_seen_step: int = 0
    retrieved_ids: list[int] = field(default_factory=list)
    retrieved_texts: list[str] = field(default_factory=list)

    @property
    def difficulty(self) -> float:
        return difficulty(self)


def difficulty(case: HardCase) -> float:
    """``(1 - reward) * failure_count``: low reward and repeated failure rank first."""
    return (1.0 - case.reward) * case.failure_count


@dataclass(frozen=True)
class CaseObservation:
    key: str
    query: str
    query_embedding: np.ndarray
    ground_truth: str
    prediction: str
    reward: float
    retrieved_ids: tuple[int, ...] = ()
    retrieved_texts: tuple[str, ...] = ()


class HardCaseBuffer:
    """Sliding window of failing queries, bounded by age and capacity."""

    def __init__(self, capacity: int = 64, max_age: int = 300, fail_threshold: float = 0.5):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.max_age = max_age
        self.fail_threshold = fail_threshold
        self.cases: dict[str, HardCase] = {}

    def __len__(self) -> int:
        return len(self.cases)

    def __iter__(self):
        return iter(self.cases.values())

    def record(self, obs: CaseObservation, step: int) -> None:
        if not 0.0 <= obs.reward <= 1.0:
            raise ValueError(f"reward {obs.reward} outside [0, 1]")
        if obs.reward >= self.fail_threshold:
            self.cases.pop(obs.key, None)
            return
        case = self.cases.get(obs.key)
        if case is None:
            self.cases[obs.key] = HardCase(
                key=obs.key,
                query=obs.query,
                query_embedding=np.asarray(obs.query_embedding, dtype=np.float64),
                ground_truth=obs.ground_truth,
                prediction=obs.prediction,
                reward=obs.reward,
                failure_count=1,
                last_seen_step=step,
                retrieved_ids=list(obs.retrieved_ids),
                retrieved_texts=list(obs.retrieved_texts),
            )
        else:
            case.failure_count += 1
            case.last_seen_step = step
            case.prediction = obs.prediction
            case.reward = obs.reward
            case.retrieved_ids = list(obs.retrieved_ids)
            case.retrieved_texts = list(obs.retrieved_texts)
        self._enforce_capacity()

    def expire(self, current_step: int) -> list[HardCase]:
        """Drop cases older than ``max_age`` steps, then trim to capacity."""
        cutoff = current_step - self.max_age
        evicted = [c for c in self.cases.values() if c.last_seen_step < cutoff]
        for c in evicted:
            del self.cases[c.key]
        return evicted + self._enforce_capacity()

    def _enforce_capacity(self) -> list[HardCase]:
        evicted = []
        while len(self.cases) > self.capacity:
            victim = min(self.cases.values(), key=lambda c: (difficulty(c), c.last_seen_step))
            del self.cases[victim.key]
            evicted.append(victim)
        return evicted


record_case = HardCaseBuffer.record
expire = HardCaseBuffer.expire


# -- clustering -----------------------------------------------------------------


def kmeans(points: np.ndarray, k: int, seed: int = 0, max_iter: int = 50, tol: float = 1e-6):
    """Lloyd's algorithm with k-means++ seeding; returns ``(labels, centroids)``.

    Every cluster ends up non-empty (requires ``k <= len(points)``).
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must be in [1, {n}]")
    rng = np.random.default_rng(seed)

    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[rng.integers(n)]
    d2 = np.sum((points - centroids[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        idx = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centroids[j] = points[idx]
        d2 = np.minimum(d2, np.sum((points - centroids[j]) ** 2, axis=1))

    labels = np.zeros(n, dtype=np.int64)
    for _ in range(max_iter):
        labels, dists = kernels.kmeans_assign(points, centroids)
        new = centroids.copy()
        for j in range(k):
            members = labels == j
            if members.any():
                new[j] = points[members].mean(axis=0)
            else:
                far = int(np.argmax(dists))
                new[j] = points[far]
                dists[far] = -1.0
        shift = np.max(np.linalg.norm(new - centroids, axis=1))
        centroids = new
        if shift <= tol:
            break
    labels, _ = kernels.kmeans_assign(points, centroids)

    # coincident points can still leave a cluster empty; steal the farthest
    # member of a multi-member cluster
    for j in range(k):
        if np.any(labels == j):
            continue
        counts = np.bincount(labels, minlength=k)
        dist = np.sum((points - centroids[labels]) ** 2, axis=1)
        dist[counts[labels] <= 1] = -np.inf
        i = int(np.argmax(dist))
        labels[i] = j
        centroids[j] = points[i]
    return labels, centroids


def cluster_cases(cases: Sequence[HardCase], k: int, seed: int = 0) -> list[list[HardCase]]:
    cases = list(cases)
    if not cases:
        return []
    if k < 1:
        raise ValueError("k must be >= 1")
    k = min(k, len(cases))
    if k == len(cases):
        return [[c] for c in cases]
    labels, _ = kmeans(np.vstack([c.query_embedding for c in cases]), k, seed)
    clusters: dict[int, list[HardCase]] = {}
    for c, lab in zip(cases, labels):
        clusters.setdefault(int(lab), []).append(c)
    return list(clusters.values())


def _rank_key(c: HardCase):
    return (-difficulty(c), -c.failure_count, -c.last_seen_step)


def select_representatives(clusters: Sequence[Sequence[HardCase]], per_cluster: int, max_total: int = 8) -> list[HardCase]:
    """Hardest cases per cluster, interleaved round-robin, hardest cluster first."""
    if per_cluster < 1:
        raise ValueError("per_cluster must be >= 1")
    ranked = [sorted(cl, key=_rank_key)[:per_cluster] for cl in clusters if cl]
    ranked.sort(key=lambda cl: _rank_key(cl[0]))
    out: list[HardCase] = []
    for r in range(per_cluster):
        for cl in ranked:
            if r < len(cl) and len(out) < max_total:
                out.append(cl[r])
    return out


# -- two-stage evolution ----------------------------------------------------------


def format_cases(cases: Sequence[HardCase]) -> str:
    blocks = []
    for i, c in enumerate(cases, start=1):
        mems = "\n".join(f"  [{j}] {t}" for j, t in enumerate(c.retrieved_texts)) or "  (none)"
        blocks.append(
            f"### Case {i}\n"
            f"Query: {c.query}\n"
            f"Ground truth: {c.ground_truth}\n"
            f"Prediction: {c.prediction}\n"
            f"Reward: {c.reward:.3f} | Failure count: {c.failure_count} | Difficulty: {difficulty(c):.3f}\n"
            f"Retrieved memories:\n{mems}"
        )
    return "\n\n".join(blocks)


def format_feedback(history: Sequence[str], limit: int = 5) -> str:
    if not history:
        return "No previous evolution rounds."
    return "\n".join(f"- {h}" for h in list(history)[-limit:])


def build_analysis_prompt(bank: SkillBank, cases: Sequence[HardCase], feedback: Sequence[str], max_changes: int,
                          history_len: int = 5) -> str:
    return render(
        load_asset("designer_analysis_prompt"),
        operation_bank_description=describe_bank(bank.skills),
        evolution_feedback=format_feedback(feedback, history_len),
        num_failure_cases=len(cases),
        failure_cases_details=format_cases(cases),
        max_changes=max_changes,
    )


def build_refinement_prompt(bank: SkillBank, analysis: dict, feedback: Sequence[str], max_changes: int,
                            history_len: int = 5) -> str:
    return render(
        load_asset("designer_refinement_prompt"),
        analysis_feedback=json.dumps(analysis, indent=2, ensure_ascii=False),
        operation_bank_full=describe_bank(bank.skills, full=True),
        evolution_feedback="## Operation Evolution Feedback\n" + format_feedback(feedback, history_len),
        max_changes=max_changes,
    )


_FENCE = re.compile(r"^```(?:json)?\s*\n(.*)\n```$", re.S)

RETRY_MESSAGE = "Your previous reply was not valid JSON in the required format. Output ONLY the JSON, no other text."


def parse_json_object(text: str) -> dict:
    """Parse a reply that must be a single JSON object (a code fence is tolerated)."""
    text = text.strip()
    m = _FENCE.match(text)
    if m:
        text = m.group(1).strip()
    obj = json.loads(text)
    if not isinstance(obj, dict):
        raise ValueError("top-level JSON value is not an object")
    return obj


def validate_analysis(obj: dict) -> dict:
    if not isinstance(obj.get("failure_patterns"), list):
        raise ValueError("analysis.failure_patterns must be a list")
    if not isinstance(obj.get("recommendations"), list):
        raise ValueError("analysis.recommendations must be a list")
    if not isinstance(obj.get("summary"), str):
        raise ValueError("analysis.summary must be a string")
    return obj


def _ask_json(backend: LlmBackend, prompt: str, params: CompletionParams, validate, warnings: list[str], stage: str):
    messages = [{"role": "user", "content": prompt}]
    raws = []
    for attempt in range(2):
        raw = backend.complete(messages, params)
        raws.append(raw)
        try:
            return validate(parse_json_object(raw)), raws
        except (ValueError, TypeError) as exc:
            warnings.append(f"{stage} attempt {attempt + 1}: invalid JSON reply ({exc})")
            messages = messages + [
                {"role": "assistant", "content": raw},
                {"role": "user", "content": RETRY_MESSAGE},
            ]
    return None, raws


def parse_proposal(obj: dict, bank: SkillBank, max_changes: int, strict: bool = True) -> tuple[EvolutionProposal, list[str]]:
    """Turn a refinement reply into a validated proposal; bad entries are dropped."""
    warnings: list[str] = []
    action = obj.get("action")
    if action == "no_change":
        return EvolutionProposal.no_change(str(obj.get("reasoning", ""))), warnings
    if action != "apply_changes":
        warnings.append(f"unknown proposal action {action!r}")
        return EvolutionProposal.no_change(), warnings
    raw_changes = obj.get("changes")
    if not isinstance(raw_changes, list):
        warnings.append("apply_changes without a changes list")
        return EvolutionProposal.no_change(), warnings
    if len(raw_changes) > max_changes:
        if strict:
            warnings.append(f"{len(raw_changes)} changes exceed max_changes={max_changes}; proposal rejected")
            return EvolutionProposal.no_change(), warnings
        warnings.append(f"{len(raw_changes)} changes exceed max_changes={max_changes}; keeping the first {max_changes}")
        raw_changes = raw_changes[:max_changes]

    changes = []
    seen: set[str] = set()
    for n, entry in enumerate(raw_changes):
        try:
            change = _parse_change(entry)
            validate_change(bank, change, seen)
        except (SkillValidationError, KeyError, TypeError, ValueError) as exc:
            warnings.append(f"change {n} dropped: {exc}")
            continue
        seen.add(change.target)
        changes.append(change)
    if not changes:
        return EvolutionProposal.no_change(str(obj.get("summary", ""))), warnings
    return EvolutionProposal("apply_changes", tuple(changes), str(obj.get("summary", ""))), warnings


def _parse_change(entry: dict):
    if not isinstance(entry, dict):
        raise TypeError("change entry is not an object")
    kind = entry.get("action")
    if kind == "add_new":
        op = entry["new_operation"]
        return AddSkill(
            name=str(op["name"]),
            description=str(op["description"]),
            instruction_template=str(op["instruction_template"]),
            update_type=str(op["update_type"]).lower(),
            reasoning=str(op.get("reasoning", "")),
        )
    if kind == "refine_existing":
        op = entry["refined_operation"]
        ch = op.get("changes") or {}
        if not isinstance(ch, dict):
            raise TypeError("refined_operation.changes is not an object")
        return RefineSkill(
            name=str(op["name"]),
            new_description=ch.get("description"),
            new_instruction_template=ch.get("instruction_template"),
            reasoning=str(op.get("reasoning", "")),
        )
    raise ValueError(f"unknown change action {kind!r}")


@dataclass
class EvolutionRecord:
    cases: list[str] = field(default_factory=list)
    analysis_prompt: str = ""
    analysis_raw: list[str] = field(default_factory=list)
    analysis: dict | None = None
    refinement_prompt: str = ""
    refinement_raw: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "cases": self.cases,
            "analysis": self.analysis,
            "analysis_raw": self.analysis_raw,
            "refinement_raw": self.refinement_raw,
            "warnings": self.warnings,
        }


def run_evolution(
    bank: SkillBank,
    buffer: HardCaseBuffer,
    backend: LlmBackend,
    config: DesignerConfig = DesignerConfig(),
    step: int = 0,
    feedback: Sequence[str] = (),
    params: CompletionParams = CompletionParams(max_tokens=4096),
) -> tuple[EvolutionProposal, EvolutionRecord]:
    """Analyse representative hard cases, then ask for a skill-bank proposal.

    Never mutates ``bank``; apply the returned proposal with
    :func:`skillmem.skills.apply_proposal`.
    """
    record = EvolutionRecord()
    buffer.expire(step)
    if not len(buffer):
        return EvolutionProposal.no_change("no hard cases"), record

    clusters = cluster_cases(list(buffer), min(config.k_clusters, len(buffer)), config.seed + step)
    cases = select_representatives(clusters, config.per_cluster, config.max_cases)
    record.cases = [c.key for c in cases]

    record.analysis_prompt = build_analysis_prompt(bank, cases, feedback, config.max_changes, config.history_len)
    try:
        analysis, record.analysis_raw = _ask_json(backend, record.analysis_prompt, params, validate_analysis, record.warnings, "analysis")
    except BackendError as exc:
        record.warnings.append(f"analysis call failed: {exc}")
        return EvolutionProposal.no_change("designer backend failure"), record
    if analysis is None:
        return EvolutionProposal.no_change("analysis unparseable"), record
    record.analysis = analysis

    record.refinement_prompt = build_refinement_prompt(bank, analysis, feedback, config.max_changes, config.history_len)
    try:
        obj, record.refinement_raw = _ask_json(backend, record.refinement_prompt, params, lambda o: o, record.warnings, "refinement")
    except BackendError as exc:
        record.warnings.append(f"refinement call failed: {exc}")
        return EvolutionProposal.no_change("designer backend failure"), record
    if obj is None:
        return EvolutionProposal.no_change("refinement unparseable"), record
    proposal, warns = parse_proposal(obj, bank, config.max_changes, config.strict_max_changes)
    record.warnings.extend(warns)
    for w in record.warnings:
        log.info("designer: %s", w)
    return proposal, record


# -- stabilised reward gating ------------------------------------------------------


def tail_mean_reward(step_rewards: Sequence[float], length: int) -> float:
    """Mean of the last ``ceil(length / 4)`` rewards of a cycle of ``length`` steps."""
    if length < 1:
        raise ValueError("cycle length must be >= 1")
    if len(step_rewards) < length:
        raise ValueError(f"need {length} step rewards, got {len(step_rewards)}")
    tail = list(step_rewards)[-math.ceil(length / 4):]
    return float(sum(tail) / len(tail))


@dataclass(frozen=True)
class GateDecision:
    improved: bool
    best_cycle: int
    best_snapshot: str
    rollback_to: str | None
    early_stop: bool


def gate_and_maybe_rollback(tails: Sequence[float], snapshots: Sequence[str], patience: int = 3) -> GateDecision:
    """Decide what follows the latest cycle.

    ``tails[i]`` is the stabilised reward of cycle ``i`` and ``snapshots[i]``
    the snapshot of the bank that cycle trained on.  A cycle improves only if
    it beats every earlier tail strictly.
    """
    if not tails or len(tails) != len(snapshots):
        raise ValueError("need one snapshot per completed cycle")
    best = 0
    stale = 0
    for i in range(1, len(tails)):
        if tails[i] > tails[best]:
            best = i
            stale = 0
        else:
            stale += 1
    improved = best == len(tails) - 1
    return GateDecision(
        improved=improved,
        best_cycle=best,
        best_snapshot=snapshots[best],
        rollback_to=None if improved else snapshots[best],
        early_stop=stale >= patience,
    )
