"""Closed training loop: controller training cycles alternating with skill evolution."""
from __future__ import annotations

import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .backends import LlmBackend, ScriptedBackend, backend_from_config
from .controller import Controller, ControllerParams, SelectionStep, exploration_threshold, save_checkpoint
from .designer import CaseObservation, DesignerConfig, HardCaseBuffer, gate_and_maybe_rollback, run_evolution, tail_mean_reward
from .embedding import EndpointConfig, HashEmbedder, RemoteEmbedder
from .environment import SyntheticSpec, Trace, evaluate_memory, load_traces, make_synthetic, synthetic_skill_bank
from .executor import DEFAULT_MAX_ACTIONS, execute_span
from .memory import MemoryBank
from .skills import SkillBank, SnapshotStore, apply_proposal, init_primitives, load_bank, save_bank
from .trainer import PPOTrainer, TrainingConfig, Transition

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

# values fixed by the method's reported setup; checked at startup
DOCUMENTED_DEFAULTS = {
    "k_train": 3,
    "k_eval": 7,
    "k_eval_trajectory": 5,
    "span_tokens": 512,
    "retrieve_r": 20,
    "evolve_every": 100,
    "max_changes": 3,
    "tau0": 0.3,
    "t_explore": 50,
}


class ConfigError(ValueError):
    pass


class BackendOutage(RuntimeError):
    """Too many consecutive episodes in which every backend call failed."""


@dataclass
class RunConfig:
    k_train: int = 3
    k_eval: int = 7
    k_eval_trajectory: int = 5
    span_tokens: int = 512
    retrieve_r: int = 20
    evolve_every: int = 100
    max_changes: int = 3
    tau0: float = 0.3
    t_explore: int = 50
    fail_threshold: float = 0.5
    buffer_capacity: int = 64
    buffer_max_age: int = 300
    patience: int = 3
    max_cycles: int = 10
    episodes_per_batch: int = 4
    designer_enabled: bool = True
    controller_mode: str = "learned"  # or "random"
    eval_greedy: bool = True
    max_actions_per_span: int = DEFAULT_MAX_ACTIONS
    max_dead_episodes: int = 5
    metric: str = "f1"
    answer_template: str = "locomo"
    trace_format: str | None = None
    embed_dim: int = 64
    hidden: int = 256
    seed: int = 0
    trainer: TrainingConfig = field(default_factory=TrainingConfig)
    designer: dict = field(default_factory=dict)
    backend: dict = field(default_factory=dict)
    embedder: dict = field(default_factory=dict)
    data: dict = field(default_factory=dict)
    synthetic: dict | None = None
    initial_bank: str | None = None

    def designer_config(self) -> DesignerConfig:
        kw = dict(self.designer)
        kw.setdefault("fail_threshold", self.fail_threshold)
        kw.setdefault("capacity", self.buffer_capacity)
        kw.setdefault("max_age", self.buffer_max_age)
        kw.setdefault("max_changes", self.max_changes)
        kw.setdefault("patience", self.patience)
        kw.setdefault("seed", self.seed)
        return DesignerConfig(**kw)

    def validate(self) -> None:
        if self.k_train < 1 or self.k_eval < 1 or self.k_eval_trajectory < 1:
            raise ConfigError("K values must be >= 1")
        if self.evolve_every < 1 or self.episodes_per_batch < 1 or self.max_cycles < 1:
            raise ConfigError("evolve_every, episodes_per_batch and max_cycles must be >= 1")
        if not 0.0 <= self.tau0 < 1.0:
            raise ConfigError("tau0 must be in [0, 1)")
        if self.controller_mode not in ("learned", "random"):
            raise ConfigError(f"controller_mode must be 'learned' or 'random', not {self.controller_mode!r}")
        if self.span_tokens < 16:
            raise ConfigError("span_tokens must be >= 16")
        if self.max_dead_episodes < 1:
            raise ConfigError("max_dead_episodes must be >= 1")


def assert_documented_defaults() -> None:
    """Fail loudly if a code change drifts the documented defaults."""
    fields = {f.name: f.default for f in dataclasses.fields(RunConfig)}
    for name, expected in DOCUMENTED_DEFAULTS.items():
        assert fields[name] == expected, f"RunConfig.{name} default is {fields[name]!r}, expected {expected!r}"


def config_from_dict(d: dict) -> RunConfig:
    d = dict(d)
    trainer = TrainingConfig(**d.pop("trainer", {}))
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    cfg = RunConfig(trainer=trainer, **d)
    cfg.validate()
    return cfg


def load_config(path: str | Path, overrides: dict | None = None) -> RunConfig:
    assert_documented_defaults()
    path = Path(path)
    try:
        d = tomllib.loads(path.read_text(encoding="utf-8"))
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    base = path.parent
    for section in ("data",):
        for k, v in d.get(section, {}).items():
            if isinstance(v, str) and not Path(v).is_absolute():
                d[section][k] = str(base / v)
    for role, bcfg in d.get("backend", {}).items():
        if isinstance(bcfg, dict) and "rules" in bcfg and not Path(bcfg["rules"]).is_absolute():
            bcfg["rules"] = str(base / bcfg["rules"])
    if d.get("initial_bank") and not Path(d["initial_bank"]).is_absolute():
        d["initial_bank"] = str(base / d["initial_bank"])
    d.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        return config_from_dict(d)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


# -- environment wiring -------------------------------------------------------------


@dataclass
class Environment:
    train_traces: list[Trace]
    eval_traces: list[Trace]
    executor: LlmBackend
    answerer: LlmBackend
    designer: LlmBackend | None
    embedder: object
    initial_bank: SkillBank


def make_embedder(cfg: RunConfig):
    kind = cfg.embedder.get("kind", "hash")
    if kind == "hash":
        return HashEmbedder(int(cfg.embedder.get("dim", cfg.embed_dim)))
    if kind == "remote":
        import os

        key_env = cfg.embedder.get("api_key_env", "SKILLMEM_EMBED_API_KEY")
        emb = RemoteEmbedder(EndpointConfig(url=cfg.embedder["url"], model=cfg.embedder.get("model", "embedding"),
                                            api_key=os.environ.get(key_env)))
        emb.embed("probe")
        return emb
    raise ConfigError(f"unknown embedder kind {kind!r}")


def build_environment(cfg: RunConfig) -> Environment:
    embedder = make_embedder(cfg)
    if cfg.synthetic is not None:
        syn = dict(cfg.synthetic)
        covered = syn.pop("covered", None)
        n_eval = int(syn.pop("n_eval_traces", 64))
        spec = SyntheticSpec(**{k: tuple(v) if k == "categories" else v for k, v in syn.items()})
        train, ex_rules, an_rules = make_synthetic(spec)
        held_out, _, _ = make_synthetic(dataclasses.replace(spec, n_traces=n_eval), seed=spec.seed + 10_000)
        rules = {"executor": ex_rules, "answer": an_rules}
        executor = _backend(cfg, "executor", rules)
        answerer = _backend(cfg, "answer", rules)
        designer = _backend(cfg, "designer", rules) if cfg.designer_enabled else None
        bank = load_bank(cfg.initial_bank) if cfg.initial_bank else synthetic_skill_bank(spec, covered)
        return Environment(train, held_out, executor, answerer, designer, embedder, bank)

    fmt = cfg.trace_format
    train = load_traces(cfg.data["train"], fmt, cfg.span_tokens) if "train" in cfg.data else []
    held = load_traces(cfg.data["eval"], fmt, cfg.span_tokens) if "eval" in cfg.data else []
    executor = _backend(cfg, "executor", None)
    answerer = _backend(cfg, "answer", None)
    designer = _backend(cfg, "designer", None) if cfg.designer_enabled else None
    bank = load_bank(cfg.initial_bank) if cfg.initial_bank else init_primitives()
    return Environment(train, held, executor, answerer, designer, embedder, bank)


def _backend(cfg: RunConfig, role: str, synthetic_rules: dict | None) -> LlmBackend:
    bcfg = dict(cfg.backend.get(role, {}))
    if synthetic_rules is not None and bcfg.get("kind", "scripted") == "scripted":
        rules = dict(synthetic_rules)
        if "rules" in bcfg:
            extra = json.loads(Path(bcfg["rules"]).read_text(encoding="utf-8"))
            rules.update(extra)
        rules.update(bcfg.get("inline", {}))
        return ScriptedBackend.from_dict(rules)
    if not bcfg:
        raise ConfigError(f"no backend configured for {role!r}")
    return backend_from_config(bcfg)


# -- one episode ----------------------------------------------------------------------


@dataclass
class EpisodeResult:
    reward: float
    transitions: list[Transition]
    records: list
    span_log: list[dict]
    failed_spans: int = 0
    memory: MemoryBank | None = None

    @property
    def dead(self) -> bool:
        """Every executor call, or every answer call, failed."""
        all_spans = bool(self.span_log) and self.failed_spans == len(self.span_log)
        all_queries = bool(self.records) and all(r.failed for r in self.records)
        return all_spans or all_queries


def run_episode(
    trace: Trace,
    bank: SkillBank,
    controller: Controller,
    env: Environment,
    cfg: RunConfig,
    rng: np.random.Generator,
    *,
    k: int,
    greedy: bool = False,
    random_policy: bool = False,
    new_positions: Sequence[int] = (),
    tau: float = 0.0,
    step: int = 0,
) -> EpisodeResult:
    """Build a memory bank span by span, then score it on the trace's queries."""
    memory = MemoryBank(env.embedder)
    transitions: list[Transition] = []
    span_log = []
    failed = 0
    for span in trace.spans:
        span_emb = env.embedder.embed(span.text)
        retrieved = memory.retrieve(span_emb, cfg.retrieve_r)
        mem_embs = [memory.get(i).embedding for i in retrieved.ids]
        if random_policy:
            kk = min(k, len(bank))
            action = rng.permutation(len(bank))[:kk]
            sel = None
        else:
            sel = controller.select(span.text, retrieved, bank, k, rng, greedy=greedy,
                                    new_positions=new_positions, tau=tau, memory_embeddings=mem_embs)
            action = sel.action
        skills = [bank.skills[int(i)] for i in action]
        result = execute_span(span.text, memory, retrieved, skills, env.executor, step=step,
                              max_actions=cfg.max_actions_per_span)
        failed += int(result.failed)
        if sel is not None:
            transitions.append(Transition(step=sel, behavior_log_prob=sel.joint_log_prob))
        span_log.append({
            "span": span.index,
            "selected": [s.name for s in skills],
            "actions": [type(a).__name__.upper() for a in result.actions],
            "mutations": result.report.mutations,
            "warnings": result.report.warnings,
            "failed": result.failed,
        })
    reward, records = evaluate_memory(memory, trace.queries, env.answerer, env.embedder, cfg.retrieve_r,
                                      cfg.answer_template, cfg.metric)
    if transitions:
        transitions[-1].reward = reward
        transitions[-1].done = True
    return EpisodeResult(reward, transitions, records, span_log, failed, memory)


# -- training state and cycles ------------------------------------------------------------


@dataclass
class CycleReport:
    cycle_index: int
    tail_mean_reward: float
    bank_version: int
    snapshot_id: str
    rolled_back: bool
    early_stop: bool = False
    improved: bool = False
    next_bank_version: int = 0
    proposal: str = "none"
    mean_reward: float = 0.0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class RunLogger:
    """Append-only JSONL logs under the run directory (no-op without one)."""

    def __init__(self, out_dir: Path | None):
        self.out_dir = Path(out_dir) if out_dir else None
        if self.out_dir:
            self.out_dir.mkdir(parents=True, exist_ok=True)

    def write(self, name: str, record: dict) -> None:
        if not self.out_dir:
            return
        with open(self.out_dir / name, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=False) + "\n")


class TrainState:
    def __init__(self, cfg: RunConfig, env: Environment, out_dir: Path | None = None):
        cfg.validate()
        self.cfg = cfg
        self.env = env
        self.rng = np.random.default_rng(cfg.seed)
        params = ControllerParams.init(env.embedder.dim, cfg.hidden, seed=cfg.seed)
        self.trainer = PPOTrainer(params, cfg.trainer)
        self.controller = Controller(params, env.embedder)
        self.bank = env.initial_bank
        self.max_version = self.bank.version
        self.dcfg = cfg.designer_config()
        self.buffer = HardCaseBuffer(self.dcfg.capacity, self.dcfg.max_age, self.dcfg.fail_threshold)
        self.out_dir = Path(out_dir) if out_dir else None
        self.store = SnapshotStore(self.out_dir / "snapshots" if self.out_dir else None)
        self.logger = RunLogger(self.out_dir)
        self.step = 0
        self.cycle = 0
        self.tails: list[float] = []
        self.snapshots: list[str] = []
        self.feedback: list[str] = []
        self.new_positions: list[int] = []
        self.steps_since_evolve = 0
        self.reports: list[CycleReport] = []
        self.early_stopped = False
        self.dead_streak = 0
        if self.out_dir:
            save_bank(self.bank, self.out_dir / "banks")


def _observations(records, trace: Trace):
    for r in records:
        yield CaseObservation(
            key=f"{trace.trace_id}/{r.query.id}",
            query=r.query.text,
            query_embedding=r.query_embedding,
            ground_truth=r.query.ground_truth,
            prediction=r.prediction,
            reward=float(min(max(r.reward, 0.0), 1.0)),
            retrieved_ids=tuple(r.retrieved.ids),
            retrieved_texts=tuple(r.retrieved.texts),
        )


def run_cycle(state: TrainState, episode_hook=None) -> CycleReport:
    """``evolve_every`` training episodes, then gating and (maybe) skill evolution."""
    cfg, env = state.cfg, state.env
    if not env.train_traces:
        raise ConfigError("no training traces")
    rewards: list[float] = []
    pending: list[list[Transition]] = []
    random_policy = cfg.controller_mode == "random"
    trained_version = state.bank.version
    stats = None

    def flush():
        nonlocal pending, stats
        if pending and not random_policy:
            stats = state.trainer.update(pending)
            state.controller.params = state.trainer.params
        pending = []

    for _ in range(cfg.evolve_every):
        trace = env.train_traces[int(state.rng.integers(len(env.train_traces)))]
        tau = exploration_threshold(state.steps_since_evolve, cfg.tau0, cfg.t_explore) if state.new_positions else 0.0
        ep = run_episode(trace, state.bank, state.controller, env, cfg, state.rng, k=cfg.k_train,
                         random_policy=random_policy, new_positions=state.new_positions, tau=tau, step=state.step)
        rewards.append(ep.reward)
        # episodes wrecked by backend failures say nothing about the policy
        state.dead_streak = state.dead_streak + 1 if ep.dead else 0
        if state.dead_streak >= cfg.max_dead_episodes:
            raise BackendOutage(f"{state.dead_streak} consecutive episodes with all backend calls failing")
        if ep.transitions and not ep.dead:
            pending.append(ep.transitions)
        for obs in _observations([] if ep.dead else ep.records, trace):
            state.buffer.record(obs, state.step)
        state.buffer.expire(state.step)
        if len(pending) >= cfg.episodes_per_batch:
            flush()
        if episode_hook is not None:
            episode_hook(state, trace, ep)
        state.logger.write("train_log.jsonl", {
            "step": state.step,
            "mean_reward": ep.reward,
            "policy_loss": stats.policy_loss if stats else None,
            "value_loss": stats.value_loss if stats else None,
            "entropy": stats.entropy if stats else None,
            "ratio_clip_frac": stats.clip_frac if stats else None,
            "bank_version": state.bank.version,
        })
        state.step += 1
        state.steps_since_evolve += 1
    flush()

    tail = tail_mean_reward(rewards, cfg.evolve_every)
    snap = state.store.snapshot(state.bank)
    state.tails.append(tail)
    state.snapshots.append(snap)
    decision = gate_and_maybe_rollback(state.tails, state.snapshots, state.dcfg.patience)
    report = CycleReport(
        cycle_index=state.cycle,
        tail_mean_reward=tail,
        bank_version=trained_version,
        snapshot_id=snap,
        rolled_back=decision.rollback_to is not None,
        early_stop=decision.early_stop,
        improved=decision.improved,
        mean_reward=float(np.mean(rewards)),
    )
    outcome = "improved" if decision.improved else f"no improvement; rolled back to {decision.best_snapshot}"
    if decision.rollback_to is not None:
        state.bank = state.store.restore(decision.rollback_to)
        state.new_positions = []
    state.feedback.append(
        f"cycle {state.cycle}: bank v{trained_version}, tail reward {tail:.3f} ({outcome})"
    )

    last_cycle = state.cycle + 1 >= cfg.max_cycles
    if decision.early_stop:
        state.early_stopped = True
        state.bank = state.store.restore(decision.best_snapshot)
    elif cfg.designer_enabled and env.designer is not None and not last_cycle:
        proposal, record = run_evolution(state.bank, state.buffer, env.designer, state.dcfg, state.step, state.feedback)
        state.logger.write("evolution.jsonl", {"cycle": state.cycle, "step": state.step,
                                               "proposal": _proposal_dict(proposal), **record.to_dict()})
        if proposal.action == "apply_changes":
            new_bank = apply_proposal(state.bank, proposal, round_index=state.cycle, step=state.step,
                                      new_version=state.max_version + 1)
            state.max_version = new_bank.version
            added = {c.name for c in proposal.adds}
            state.new_positions = [i for i, s in enumerate(new_bank.skills) if s.name in added]
            state.steps_since_evolve = 0
            state.bank = new_bank
            if state.out_dir:
                save_bank(new_bank, state.out_dir / "banks")
            report.proposal = proposal.summary or f"{len(proposal.changes)} change(s)"
            state.feedback[-1] += f"; then applied: {report.proposal}"
        else:
            report.proposal = "no_change"
    report.next_bank_version = state.bank.version
    state.logger.write("cycles.jsonl", report.to_dict())
    state.reports.append(report)
    state.cycle += 1
    return report


def _proposal_dict(p) -> dict:
    return {
        "action": p.action,
        "summary": p.summary,
        "changes": [dataclasses.asdict(c) | {"kind": type(c).__name__} for c in p.changes],
    }


@dataclass
class TrainResult:
    best_bank: SkillBank
    params: ControllerParams
    reports: list[CycleReport]
    early_stopped: bool
    state: TrainState


def _save_controller(state: TrainState, env: Environment, cfg: RunConfig) -> None:
    save_checkpoint(state.out_dir / "controller.json", state.trainer.params, state.rng,
                    extra={"step": state.step, "cycles": state.cycle, "embed_dim": env.embedder.dim, "hidden": cfg.hidden})


def train(cfg: RunConfig, out_dir: str | Path | None = None, env: Environment | None = None, episode_hook=None) -> TrainResult:
    env = env or build_environment(cfg)
    state = TrainState(cfg, env, Path(out_dir) if out_dir else None)
    while state.cycle < cfg.max_cycles and not state.early_stopped:
        try:
            report = run_cycle(state, episode_hook)
        except BackendOutage:
            if state.out_dir:
                _save_controller(state, env, cfg)
                (state.out_dir / "last_bank.json").write_text(state.bank.to_json(), encoding="utf-8")
            raise
        log.info("cycle %d: tail %.3f bank v%d%s", report.cycle_index, report.tail_mean_reward, report.bank_version,
                 " (rolled back)" if report.rolled_back else "")
    best = gate_and_maybe_rollback(state.tails, state.snapshots, state.dcfg.patience)
    best_bank = state.store.restore(best.best_snapshot)
    if state.out_dir:
        (state.out_dir / "best_bank.json").write_text(best_bank.to_json(), encoding="utf-8")
        _save_controller(state, env, cfg)
    return TrainResult(best_bank, state.trainer.params, state.reports, state.early_stopped, state)


# -- evaluation and replay ---------------------------------------------------------------


def eval_k(cfg: RunConfig, traces: Sequence[Trace]) -> int:
    if traces and all(t.metadata.get("format") == "trajectory" for t in traces):
        return cfg.k_eval_trajectory
    return cfg.k_eval


def evaluate(cfg: RunConfig, bank: SkillBank, params: ControllerParams | None, traces: Sequence[Trace],
             env: Environment, k: int | None = None, span_hook=None) -> dict:
    """Read-only evaluation: build memory at K_eval and score the queries."""
    if not traces:
        raise ConfigError("no evaluation traces")
    k = k or eval_k(cfg, traces)
    rng = np.random.default_rng(cfg.seed + 1)
    random_policy = cfg.controller_mode == "random" or params is None
    controller = Controller(params, env.embedder) if params is not None else None
    per_trace = []
    for trace in traces:
        ep = run_episode(trace, bank, controller, env, cfg, rng, k=k, greedy=cfg.eval_greedy,
                         random_policy=random_policy)
        if span_hook is not None:
            span_hook(trace, ep)
        per_trace.append({"trace_id": trace.trace_id, "reward": ep.reward, "failed_spans": ep.failed_spans})
    rewards = [p["reward"] for p in per_trace]
    return {
        "mean_reward": float(np.mean(rewards)),
        "n_traces": len(per_trace),
        "k": k,
        "bank_version": bank.version,
        "metric": cfg.metric,
        "traces": per_trace,
    }


def replay(cfg: RunConfig, bank: SkillBank, params: ControllerParams | None, trace: Trace, env: Environment,
           k: int | None = None) -> dict:
    rng = np.random.default_rng(cfg.seed)
    controller = Controller(params, env.embedder) if params is not None else None
    ep = run_episode(trace, bank, controller, env, cfg, rng, k=k or eval_k(cfg, [trace]), greedy=cfg.eval_greedy,
                     random_policy=params is None)
    return {"trace_id": trace.trace_id, "reward": ep.reward, "spans": ep.span_log,
            "memories": [m.text for m in ep.memory]}
