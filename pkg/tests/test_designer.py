import itertools
import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from golden_inputs import ANALYSIS, FEEDBACK, hard_cases
from skillmem.backends import DesignerRule, ScriptedBackend
from skillmem.designer import (
    RETRY_MESSAGE,
    CaseObservation,
    DesignerConfig,
    HardCase,
    HardCaseBuffer,
    build_analysis_prompt,
    build_refinement_prompt,
    cluster_cases,
    difficulty,
    gate_and_maybe_rollback,
    kmeans,
    parse_json_object,
    parse_proposal,
    run_evolution,
    select_representatives,
    tail_mean_reward,
)
from skillmem.skills import init_primitives

GOLDEN = Path(__file__).parent / "fixtures" / "golden"


def _obs(key, reward, emb=(1.0, 0.0)):
    return CaseObservation(key, f"query {key}", np.array(emb), "gold", "pred", reward)


def _case(key, reward, count, step=0, emb=(0.0, 0.0)):
    return HardCase(key, key, np.array(emb, dtype=float), "g", "p", reward, count, step)


# -- buffer -------------------------------------------------------------------------


def test_repeat_failures_count():
    b = HardCaseBuffer()
    for s in range(3):
        b.record(_obs("q", 0.0), s)
    assert len(b) == 1 and b.cases["q"].failure_count == 3 and b.cases["q"].last_seen_step == 2


def test_success_clears():
    b = HardCaseBuffer()
    b.record(_obs("q", 0.1), 0)
    b.record(_obs("q", 0.9), 1)
    assert len(b) == 0


def test_threshold_is_strict():
    b = HardCaseBuffer(fail_threshold=0.5)
    b.record(_obs("q", 0.5), 0)
    assert len(b) == 0


def test_reward_range_checked():
    with pytest.raises(ValueError):
        HardCaseBuffer().record(_obs("q", 1.5), 0)


def test_expire_by_age():
    b = HardCaseBuffer(max_age=100)
    b.record(_obs("old", 0.0), 0)
    b.record(_obs("new", 0.0), 120)
    evicted = b.expire(150)
    assert [c.key for c in evicted] == ["old"] and list(b.cases) == ["new"]


def test_expire_capacity_lowest_difficulty():
    b = HardCaseBuffer(capacity=5)
    b.cases = {c.key: c for c in (_case("a", 0.5, 1, 9), _case("b", 0.0, 1, 9), _case("c", 0.0, 2, 9))}
    b.capacity = 2
    evicted = b.expire(10)
    ds = {c.key: difficulty(c) for c in (_case("a", 0.5, 1), _case("b", 0.0, 1), _case("c", 0.0, 2))}
    assert [c.key for c in evicted] == [min(ds, key=ds.get)] == ["a"]


def test_expire_empty_noop():
    assert HardCaseBuffer().expire(1000) == []


@settings(max_examples=60)
@given(st.lists(st.tuples(st.sampled_from("abcdefg"), st.floats(0, 1), st.integers(0, 5)), max_size=40),
       st.integers(1, 4), st.integers(1, 20))
def test_buffer_laws(ops, capacity, max_age):
    b = HardCaseBuffer(capacity=capacity, max_age=max_age)
    step = 0
    since_clear: dict[str, int] = {}
    for key, reward, dt in ops:
        step += dt
        b.record(_obs(key, reward), step)
        if reward >= 0.5:
            since_clear[key] = 0
        else:
            since_clear[key] = since_clear.get(key, 0) + 1
        b.expire(step)
        assert len(b) <= capacity
        assert all(c.last_seen_step >= step - max_age for c in b)
        for c in b:
            assert c.failure_count == since_clear[c.key]
        for k in list(since_clear):
            if k not in b.cases:
                since_clear[k] = 0  # eviction forgets the history


@pytest.mark.parametrize("r,c,d", [(0.5, 2, 1.0), (1.0, 7, 0.0), (0.0, 3, 3.0)])
def test_difficulty(r, c, d):
    assert difficulty(_case("x", r, c)) == d


# -- clustering ---------------------------------------------------------------------


def test_cluster_small_and_k1():
    cases = [_case(str(i), 0, 1, emb=(i, 0)) for i in range(3)]
    assert [len(c) for c in cluster_cases(cases, 4)] == [1, 1, 1]
    assert [len(c) for c in cluster_cases(cases, 1)] == [3]


def _best_two_partition(points):
    n = len(points)
    best, best_cost = None, math.inf
    for mask in range(1, 2 ** (n - 1)):
        labels = np.array([(mask >> i) & 1 for i in range(n)])
        cost = sum(np.sum((points[labels == j] - points[labels == j].mean(axis=0)) ** 2) for j in (0, 1))
        if cost < best_cost:
            best, best_cost = labels, cost
    return best


@pytest.mark.parametrize("seed", range(5))
def test_two_blobs_match_exhaustive_partition(seed):
    rng = np.random.default_rng(seed)
    pts = np.vstack([rng.normal(0, 0.3, size=(5, 3)), rng.normal(5, 0.3, size=(5, 3))])
    labels, _ = kmeans(pts, 2, seed=seed)
    oracle = _best_two_partition(pts)
    assert np.array_equal(labels, oracle) or np.array_equal(labels, 1 - oracle)


@settings(max_examples=40)
@given(st.integers(1, 12).flatmap(lambda n: st.tuples(st.just(n), st.integers(1, n), st.integers(0, 99))))
def test_kmeans_no_empty_clusters(args):
    n, k, seed = args
    pts = np.random.default_rng(seed).integers(0, 2, size=(n, 2)).astype(float)  # many duplicates
    labels, _ = kmeans(pts, k, seed=seed)
    assert sorted(set(labels.tolist())) == list(range(k))


def test_kmeans_deterministic():
    pts = np.random.default_rng(0).normal(size=(20, 4))
    a, _ = kmeans(pts, 3, seed=5)
    b, _ = kmeans(pts, 3, seed=5)
    assert a.tolist() == b.tolist()


# -- representatives -------------------------------------------------------------------


def test_representatives_one_cluster():
    cl = [_case("d3", 0.0, 3), _case("d1", 0.0, 1), _case("d2", 0.0, 2)]
    assert [c.key for c in select_representatives([cl], 2)] == ["d3", "d2"]


def test_representatives_round_robin():
    a = [_case("a1", 0, 5), _case("a2", 0, 4)]
    b = [_case("b1", 0, 1)]
    assert [c.key for c in select_representatives([a, b], 2, max_total=2)] == ["a1", "b1"]


@settings(max_examples=60)
@given(st.lists(st.lists(st.tuples(st.floats(0, 0.49), st.integers(1, 5), st.integers(0, 50)), min_size=1, max_size=5),
                min_size=1, max_size=4), st.integers(1, 3), st.integers(1, 8))
def test_representatives_match_sort_oracle(raw, per_cluster, cap):
    clusters = [[_case(f"{i}-{j}", r, c, s) for j, (r, c, s) in enumerate(cl)] for i, cl in enumerate(raw)]
    got = select_representatives(clusters, per_cluster, cap)
    key = lambda c: (-difficulty(c), -c.failure_count, -c.last_seen_step)
    tops = sorted((sorted(cl, key=key)[:per_cluster] for cl in clusters), key=lambda cl: key(cl[0]))
    oracle = [cl[r] for r in range(per_cluster) for cl in tops if r < len(cl)][:cap]
    assert [c.key for c in got] == [c.key for c in oracle]
    for cl in clusters:
        mine = [c for c in got if c in cl]
        assert [difficulty(c) for c in mine] == sorted((difficulty(c) for c in mine), reverse=True)


# -- prompts ---------------------------------------------------------------------------


def test_analysis_prompt_golden():
    prompt = build_analysis_prompt(init_primitives(), hard_cases(), FEEDBACK, 3)
    assert prompt == (GOLDEN / "designer_analysis_prompt.txt").read_text(encoding="utf-8")


def test_refinement_prompt_golden():
    prompt = build_refinement_prompt(init_primitives(), ANALYSIS, FEEDBACK, 3)
    assert prompt == (GOLDEN / "designer_refinement_prompt.txt").read_text(encoding="utf-8")


def test_parse_json_tolerates_fence():
    assert parse_json_object('```json\n{"a": 1}\n```') == {"a": 1}
    with pytest.raises(ValueError):
        parse_json_object("[1, 2]")


# -- run_evolution -----------------------------------------------------------------------


ADD = {
    "action": "apply_changes",
    "changes": [
        {
            "action": "add_new",
            "new_operation": {
                "name": "capture_temporal",
                "description": "Record when events happened.",
                "instruction_template": "Skill: Capture Temporal\nPurpose: keep dates.\nAction type: INSERT only.",
                "update_type": "insert",
                "reasoning": "dates are lost",
            },
        }
    ],
    "summary": "add temporal skill",
}


def _buffer():
    b = HardCaseBuffer()
    for i, c in enumerate(hard_cases()):
        b.cases[c.key] = c
    return b


def _scripted(analysis, refinement):
    return ScriptedBackend(designer=[DesignerRule("analysis", analysis), DesignerRule("refinement", refinement)])


def test_run_evolution_add_one():
    bank = init_primitives()
    before = bank.to_json()
    backend = _scripted(json.dumps(ANALYSIS), json.dumps(ADD))
    proposal, record = run_evolution(bank, _buffer(), backend, step=120)
    assert proposal.action == "apply_changes" and [c.name for c in proposal.adds] == ["capture_temporal"]
    assert backend.calls == 2 and record.warnings == [] and bank.to_json() == before


def test_run_evolution_prose_twice():
    backend = _scripted("I think things are fine.", json.dumps(ADD))
    proposal, record = run_evolution(init_primitives(), _buffer(), backend, step=120)
    assert proposal.action == "no_change" and len(record.warnings) == 2 and backend.calls == 2


def test_retry_includes_correction_turn():
    seen = []

    class Recorder:
        def complete(self, messages, params=None):
            seen.append(messages)
            return "prose"

    run_evolution(init_primitives(), _buffer(), Recorder(), step=120)
    assert len(seen) == 2 and seen[1][-1]["content"] == RETRY_MESSAGE


def test_run_evolution_empty_buffer_no_calls():
    backend = _scripted("{}", "{}")
    proposal, _ = run_evolution(init_primitives(), HardCaseBuffer(), backend)
    assert proposal.action == "no_change" and backend.calls == 0


def _four_changes():
    ch = []
    for i in range(4):
        op = dict(ADD["changes"][0]["new_operation"], name=f"capture_{i}")
        ch.append({"action": "add_new", "new_operation": op})
    return {"action": "apply_changes", "changes": ch}


def test_too_many_changes_strict_and_lenient():
    bank = init_primitives()
    strict, w1 = parse_proposal(_four_changes(), bank, 3, strict=True)
    lenient, w2 = parse_proposal(_four_changes(), bank, 3, strict=False)
    assert strict.action == "no_change" and w1
    assert len(lenient.changes) == 3 and w2


def test_invalid_entries_dropped_individually():
    obj = {
        "action": "apply_changes",
        "changes": [
            ADD["changes"][0],
            {"action": "refine_existing", "refined_operation": {"name": "delete", "changes": {"description": "x"}}},
            {"action": "add_new", "new_operation": dict(ADD["changes"][0]["new_operation"], update_type="delete", name="zap")},
        ],
    }
    proposal, warnings = parse_proposal(obj, init_primitives(), 3)
    assert [c.target for c in proposal.changes] == ["capture_temporal"] and len(warnings) == 2


def test_refine_twice_rejected_second():
    ref = {"action": "refine_existing", "refined_operation": {"name": "insert", "changes": {"description": "x"}}}
    proposal, warnings = parse_proposal({"action": "apply_changes", "changes": [ref, ref]}, init_primitives(), 3)
    assert len(proposal.changes) == 1 and len(warnings) == 1


# -- gating ------------------------------------------------------------------------------


def test_tail_examples():
    assert tail_mean_reward([0, 0, 0, 1], 4) == 1.0
    assert tail_mean_reward([0.3] * 9, 9) == pytest.approx(0.3)
    with pytest.raises(ValueError):
        tail_mean_reward([1, 2], 4)


@given(st.lists(st.floats(0, 1), min_size=1, max_size=50))
def test_tail_matches_slice(rs):
    L = len(rs)
    tail = rs[-math.ceil(L / 4):]
    assert tail_mean_reward(rs, L) == pytest.approx(sum(tail) / len(tail))


def test_gate_rollback_example():
    snaps = ["s1", "s2", "s3"]
    d = gate_and_maybe_rollback([0.5, 0.7, 0.6], snaps)
    assert d.rollback_to == "s2" and not d.early_stop


def test_gate_early_stop_example():
    d = gate_and_maybe_rollback([0.5, 0.4, 0.4, 0.4], ["s1", "s2", "s3", "s4"], patience=3)
    assert d.early_stop and d.best_snapshot == "s1"


def test_gate_monotone_never_rolls_back():
    tails = [0.1, 0.2, 0.3, 0.4]
    for n in range(1, 5):
        assert gate_and_maybe_rollback(tails[:n], [f"s{i}" for i in range(n)]).rollback_to is None


@given(st.lists(st.floats(0, 1), min_size=1, max_size=12), st.integers(1, 4))
def test_gate_replay_best_is_argmax(tails, patience):
    snaps = [f"s{i}" for i in range(len(tails))]
    for n in range(1, len(tails) + 1):
        d = gate_and_maybe_rollback(tails[:n], snaps[:n], patience)
        if d.early_stop:
            assert tails[d.best_cycle] == max(tails[:n])
            assert d.best_cycle == tails[:n].index(max(tails[:n]))
            break
