"""Command-line entry point: ``skillmem train|eval|skills|replay|synth-demo|report``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .backends import BackendError
from .controller import load_checkpoint
from .embedding import EmbeddingError
from .environment import load_traces, trace_to_dict
from .orchestrator import (
    ConfigError,
    assert_documented_defaults,
    build_environment,
    config_from_dict,
    evaluate,
    load_config,
    replay,
    train,
)
from .skills import SkillBank, diff_banks, load_bank

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("skillmem")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _emit(obj, out: str | None) -> None:
    text = json.dumps(obj, indent=2, ensure_ascii=False) + "\n"
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _resolve_bank(ref: str, run: str | None) -> SkillBank:
    p = Path(ref)
    if p.exists():
        return load_bank(p)
    if run and ref.lstrip("v").isdigit():
        return load_bank(Path(run) / "banks" / f"bank_v{int(ref.lstrip('v')):04d}.json")
    raise ConfigError(f"cannot find skill bank {ref!r}")


def cmd_train(args) -> int:
    cfg = load_config(args.config, {"seed": args.seed, "max_cycles": args.max_cycles})
    result = train(cfg, args.out)
    summary = {
        "cycles": [r.to_dict() for r in result.reports],
        "early_stopped": result.early_stopped,
        "best_bank_version": result.best_bank.version,
        "out": str(args.out),
    }
    _emit(summary, None)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    env = build_environment(cfg)
    bank = load_bank(args.bank)
    params = None
    if args.checkpoint:
        params, _ = load_checkpoint(args.checkpoint)
    else:
        log.warning("no controller checkpoint given; evaluating with uniform-random skill selection")
    traces = load_traces(args.traces, cfg.trace_format, cfg.span_tokens) if args.traces else env.eval_traces
    metrics = evaluate(cfg, bank, params, traces, env, k=args.k)
    _emit(metrics, args.out)
    return EXIT_OK


def cmd_skills(args) -> int:
    if args.action == "list":
        bank = _resolve_bank(args.refs[0], args.run) if args.refs else _latest_bank(args.run)
        for s in bank.skills:
            print(f"{s.name:32s} {s.update_type:7s} {s.origin:22s} {s.description}")
    elif args.action == "show":
        if not args.refs:
            raise ConfigError("skills show needs a skill name")
        bank = _resolve_bank(args.refs[1], args.run) if len(args.refs) > 1 else _latest_bank(args.run)
        s = bank.get(args.refs[0])
        print(f"name: {s.name}\nupdate_type: {s.update_type}\norigin: {s.origin}\ndescription: {s.description}\n")
        print(s.instruction_template)
    else:
        if len(args.refs) != 2:
            raise ConfigError("skills diff needs two bank references")
        _emit(diff_banks(_resolve_bank(args.refs[0], args.run), _resolve_bank(args.refs[1], args.run)), None)
    return EXIT_OK


def _latest_bank(run: str | None) -> SkillBank:
    if not run:
        raise ConfigError("give a bank path or --run")
    best = Path(run) / "best_bank.json"
    if best.exists():
        return load_bank(best)
    banks = sorted((Path(run) / "banks").glob("bank_v*.json"))
    if not banks:
        raise ConfigError(f"no skill banks under {run}")
    return load_bank(banks[-1])


def cmd_replay(args) -> int:
    cfg = load_config(args.config)
    env = build_environment(cfg)
    bank = load_bank(args.bank)
    params = load_checkpoint(args.checkpoint)[0] if args.checkpoint else None
    if args.trace:
        trace = load_traces(args.trace, cfg.trace_format, cfg.span_tokens)[0]
    else:
        trace = env.eval_traces[args.index]
    _emit(replay(cfg, bank, params, trace, env, k=args.k), args.out)
    return EXIT_OK


SYNTH_DEMO = {
    "k_train": 2,
    "k_eval": 2,
    "evolve_every": 100,
    "max_cycles": 12,
    "designer_enabled": False,
    "synthetic": {"categories": ["temporal", "location", "preference", "relation"], "n_traces": 64, "distractor_skills": 2},
    "trainer": {"learning_rate": 1e-3},
}


def cmd_synth_demo(args) -> int:
    d = json.loads(json.dumps(SYNTH_DEMO))
    d["seed"] = args.seed
    d["synthetic"]["seed"] = args.seed
    d["max_cycles"] = args.cycles
    cfg = config_from_dict(d)
    env = build_environment(cfg)
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval_traces.json").write_text(json.dumps([trace_to_dict(t) for t in env.eval_traces], indent=1), encoding="utf-8")
        (out / "rules.json").write_text(json.dumps(env.executor.to_dict(), indent=2), encoding="utf-8")
    result = train(cfg, out / "run" if out else None, env=env)
    learned = evaluate(cfg, result.best_bank, result.params, env.eval_traces, env)
    random = evaluate(cfg, result.best_bank, None, env.eval_traces, env)
    rows = [("cycle", "tail reward")] + [(str(r.cycle_index), f"{r.tail_mean_reward:.3f}") for r in result.reports]
    for a, b in rows:
        print(f"{a:>8s}  {b}")
    print(f"\nheld-out reward  learned controller: {learned['mean_reward']:.3f}   random skills: {random['mean_reward']:.3f}")
    return EXIT_OK


def cmd_report(args) -> int:
    run = Path(args.run)
    cycles_path = run / "cycles.jsonl"
    if not cycles_path.exists():
        raise ConfigError(f"{cycles_path} not found")
    cycles = [json.loads(line) for line in cycles_path.read_text(encoding="utf-8").splitlines() if line.strip()]
    print(f"{'cycle':>5s} {'bank':>5s} {'tail':>7s} {'mean':>7s} {'improved':>8s} {'rollback':>8s}  proposal")
    for c in cycles:
        print(f"{c['cycle_index']:5d} {c['bank_version']:5d} {c['tail_mean_reward']:7.3f} {c['mean_reward']:7.3f} "
              f"{str(c['improved']):>8s} {str(c['rolled_back']):>8s}  {c['proposal']}")
    log_path = run / "train_log.jsonl"
    if log_path.exists():
        steps = [json.loads(line) for line in log_path.read_text(encoding="utf-8").splitlines() if line.strip()]
        print(f"\n{len(steps)} training steps; final-100 mean reward "
              f"{sum(s['mean_reward'] for s in steps[-100:]) / max(1, len(steps[-100:])):.3f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="skillmem", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="run the closed training loop")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True, help="run directory for banks, checkpoint and logs")
    t.add_argument("--seed", type=int)
    t.add_argument("--max-cycles", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a skill bank on held-out traces (read-only)")
    e.add_argument("--config", required=True)
    e.add_argument("--bank", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--traces")
    e.add_argument("--k", type=int)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("skills", help="inspect skill banks")
    s.add_argument("action", choices=["list", "show", "diff"])
    s.add_argument("refs", nargs="*", help="bank paths or vN with --run; show takes NAME [BANK]")
    s.add_argument("--run")
    s.set_defaults(func=cmd_skills)

    r = sub.add_parser("replay", help="span-by-span action log for one trace")
    r.add_argument("--config", required=True)
    r.add_argument("--bank", required=True)
    r.add_argument("--checkpoint")
    r.add_argument("--trace")
    r.add_argument("--index", type=int, default=0)
    r.add_argument("--k", type=int)
    r.add_argument("--out")
    r.set_defaults(func=cmd_replay)

    d = sub.add_parser("synth-demo", help="train and evaluate on the synthetic environment")
    d.add_argument("--out")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--cycles", type=int, default=12)
    d.set_defaults(func=cmd_synth_demo)

    rp = sub.add_parser("report", help="summarise a run directory")
    rp.add_argument("--run", required=True)
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    assert_documented_defaults()
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, KeyError) as exc:
        print(f"skillmem: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (BackendError, EmbeddingError, RuntimeError) as exc:
        print(f"skillmem: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
