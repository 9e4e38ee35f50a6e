"""Command-line entry point: ``train | eval | bench | export-plots | validate-logs``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import evaluation as ev
from . import schemas
from .env import EnvConfig
from .internal_model import actor_input_dim, make_bundle
from .planner import PlannerConfig
from .trainer import PpoConfig, TrainConfig, TrainState, load_train_state, make_expert_pair, train

log = logging.getLogger("dreammpc")


class CliError(Exception):
    pass


def _load_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise CliError(f"config file {p} does not exist")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise CliError(f"config file {p} is not valid JSON: {exc}") from exc


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _write_json(path: Path, schema: str, payload: dict) -> None:
    path.write_text(json.dumps(schemas.tag(schema, payload), indent=2, sort_keys=True) + "\n")


def _manifest(out: Path, command: str, args: argparse.Namespace) -> None:
    files = sorted(str(p.relative_to(out)) for p in out.rglob("*") if p.is_file() and p.name != "manifest.json")
    argv = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    _write_json(out / "manifest.json", "manifest/1", {"command": command, "args": argv, "files": files})


def _env_config(cfg: dict, args) -> EnvConfig:
    env = EnvConfig.from_dict(cfg["env"]) if "env" in cfg else EnvConfig()
    if getattr(args, "noise", None):
        env = replace(env, noise_level=args.noise)
    return env


def _planner_config(cfg: dict, args) -> PlannerConfig:
    d = dict(cfg.get("planner", {}))
    for flag, key in (("dtype", "dtype"), ("horizon_plan", "horizon"), ("iterations", "iterations"),
                      ("samples", "num_samples"), ("policy_samples", "num_policy_samples"), ("elites", "num_elites")):
        val = getattr(args, flag, None)
        if val is not None:
            d[key] = val
    return PlannerConfig.from_dict(d)


# -- subcommands -------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    env = _env_config(cfg, args)
    ppo = PpoConfig(**cfg.get("ppo", {}))
    if args.envs is not None:
        ppo = replace(ppo, num_envs=args.envs)
    tcfg = TrainConfig(**cfg.get("train", {}))
    overrides = {"seed": args.seed}
    for flag, key in (("variant", "variant"), ("horizon", "horizon"), ("iters", "iterations"),
                      ("checkpoint_every", "checkpoint_every")):
        if getattr(args, flag) is not None:
            overrides[key] = getattr(args, flag)
    tcfg = replace(tcfg, **overrides)
    out = _out_dir(args.out)

    def progress(row):
        if row["iteration"] % max(1, tcfg.iterations // 10) == 0:
            log.info("iter %d  mean episode return %s", row["iteration"], row["mean_episode_return"])

    state = train(env, ppo, tcfg, out, progress)
    if args.baseline_episodes:
        seeds = [args.seed * 1000 + i for i in range(args.baseline_episodes)]
        hist = 1 if state.bundle is None else state.bundle.history
        expert = ev.mean_return(env, ev.expert_controller(state), seeds, hist)
        zero = ev.mean_return(env, ev.zero_controller(env.num_joints), seeds)
        _write_json(out / "returns.json", "returns/1", {
            "seeds": seeds, "expert_mean_return": expert, "zero_action_mean_return": zero,
            "beats_baseline": bool(expert > zero)})
        log.info("expert %.2f vs zero-action %.2f", expert, zero)
    _manifest(out, "train", args)
    return 0


def _profile(spec: str, env: EnvConfig) -> ev.CommandProfile:
    if spec == "extreme":
        return ev.extreme_profile(env)
    if spec == "benign":
        return ev.benign_profile(env)
    p = Path(spec)
    if not p.exists():
        raise CliError(f"unknown command profile {spec!r} (use extreme, benign or a JSON file)")
    return ev.CommandProfile.from_dict(json.loads(p.read_text()))


def _load_state(path) -> TrainState:
    if path is None:
        raise CliError("--checkpoint is required")
    p = Path(path)
    if not p.exists():
        raise CliError(f"checkpoint {p} does not exist")
    state = load_train_state(p)
    if state.bundle is None or state.bundle.variant != "nlm":
        variant = "none" if state.bundle is None else state.bundle.variant
        raise CliError(f"checkpoint variant {variant!r} cannot be planned with; the planner needs an NLM bundle")
    return state


def cmd_eval(args) -> int:
    cfg = _load_config(args.config)
    state = _load_state(args.checkpoint)
    if args.distill_rounds:
        state, _ = ev.distill_policy(state, args.seed, rounds=args.distill_rounds)
    profile = _profile(args.profile, state.env_config)
    pcfg = _planner_config(cfg, args)
    seeds = [args.seed + i for i in range(args.episodes)]
    out = _out_dir(args.out)
    diag: list = []
    result = ev.compare_modes(state, seeds, profile, pcfg, args.steps, diag, record_dir=out / "dreams" if args.record_dreams else None)
    rows = result["rows"]
    with open(out / "episodes.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    with open(out / "planner_steps.jsonl", "w") as fh:
        for d in diag:
            fh.write(json.dumps(schemas.tag("planner-step/1", d), sort_keys=True) + "\n")
    summary = {**result["summary"], "planner_config": pcfg.to_dict(), "q_max": state.env_config.q_max.tolist()}
    _write_json(out / "summary.json", "eval-summary/1", summary)
    _manifest(out, "eval", args)
    log.info("planner not worse on %d/%d seeds; command adapted in %d episodes",
             summary["planner_not_worse_seeds"], summary["num_seeds"], summary["command_adapted_episodes"])
    return 0


def _bench_state(args, env: EnvConfig) -> TrainState:
    if args.checkpoint is not None:
        return _load_state(args.checkpoint)
    # untrained but correctly shaped networks: latency does not depend on the weights
    tcfg = TrainConfig(seed=args.seed)
    rng = np.random.default_rng(args.seed)
    lay = env.layout
    bundle = make_bundle("nlm", lay, 1, rng)
    pair = make_expert_pair(actor_input_dim("nlm", lay, 1), lay.dim, lay.k, rng, tcfg, PpoConfig())
    return TrainState(env, tcfg, PpoConfig(), pair, bundle, None)


def cmd_bench(args) -> int:
    cfg = _load_config(args.config)
    env = _env_config(cfg, args)
    state = _bench_state(args, env)
    pcfg = _planner_config(cfg, args)
    planner = ev.make_planner(state, pcfg)
    out = _out_dir(args.out)
    report = ev.bench_planner(planner, state.env_config, args.steps, args.seed)
    _write_json(out / "bench.json", "bench/1", report)
    _manifest(out, "bench", args)
    log.info("median %.2f ms, p95 %.2f ms (%.0f Hz)", report["median_ms"], report["p95_ms"], report["hz_at_median"])
    return 0


def cmd_export_plots(args) -> int:
    from . import plots

    csv_path = Path(args.csv)
    if not csv_path.exists():
        raise CliError(f"{csv_path} does not exist")
    panels = args.panels.split(",") if args.panels else list(plots.PANELS)
    out = _out_dir(args.out)
    q_max = None
    summary = csv_path.parent / "summary.json"
    if summary.exists():
        q_max = json.loads(summary.read_text()).get("q_max", [None])[0]
    try:
        images = plots.render(csv_path, out, panels, args.plot_seed, q_max)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    _write_json(out / "plots.json", "plots/1", {"panels": panels, "images": [p.name for p in images]})
    _manifest(out, "export-plots", args)
    return 0


def cmd_validate_logs(args) -> int:
    try:
        seen = schemas.validate_dir(args.dir)
    except schemas.SchemaError as exc:
        raise CliError(str(exc)) from exc
    for rel, schema in seen.items():
        print(f"ok  {schema:16s} {rel}")
    return 0


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dreammpc", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed_required=True):
        p.add_argument("--config", type=Path, help="JSON file with env/ppo/train/planner sections")
        p.add_argument("--seed", type=int, required=seed_required, default=None if seed_required else 0)
        p.add_argument("--out", type=Path, required=True)

    def planner_flags(p):
        p.add_argument("--dtype", choices=("float32", "float64"))
        p.add_argument("--horizon-plan", type=int)
        p.add_argument("--iterations", type=int)
        p.add_argument("--samples", type=int)
        p.add_argument("--policy-samples", type=int)
        p.add_argument("--elites", type=int)

    p = sub.add_parser("train", help="co-dependent expert + internal-model training")
    common(p)
    p.add_argument("--variant", choices=("nlm", "plm", "flm", "none"))
    p.add_argument("--horizon", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--envs", type=int)
    p.add_argument("--noise", choices=("none", "low", "medium", "high"))
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--baseline-episodes", type=int, default=10)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="paired cloned-policy vs planner episodes")
    common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--profile", default="extreme")
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--distill-rounds", type=int, default=0)
    p.add_argument("--record-dreams", action="store_true")
    planner_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="time plan() in a closed loop")
    common(p)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--noise", choices=("none", "low", "medium", "high"))
    planner_flags(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("export-plots", help="render panels from an eval episodes.csv")
    common(p, seed_required=False)
    p.add_argument("--csv", type=Path, required=True)
    p.add_argument("--panels", help="comma-separated subset of orientation,commands,joints")
    p.add_argument("--plot-seed", type=int)
    p.set_defaults(func=cmd_export_plots)

    p = sub.add_parser("validate-logs", help="schema-check an output directory")
    p.add_argument("dir", type=Path)
    p.set_defaults(func=cmd_validate_logs)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    try:
        return args.func(args)
    except (CliError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
