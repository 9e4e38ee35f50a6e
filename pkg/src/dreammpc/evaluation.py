"""Episode runners and the measurements built on them.

Controllers are callables ``(obs, window) -> action``; the window is the
oldest-first observation history the expert actor needs.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .env import EnvConfig, EnvState, reset, sample_command, step
from .internal_model import actor_input, dream_policy, fresh_window, push_window
from .planner import Planner, PlannerConfig, default_constraints
from .trainer import Collector, PpoConfig, TrainState
from .tensornet import mlp_forward

# -- command profiles ------------------------------------------------------------


@dataclass
class CommandProfile:
    """Piecewise-constant twist target: ``segments`` is a list of (start step, command)."""

    segments: list = field(default_factory=lambda: [(0, (0.0, 0.0, 0.0))])

    def __post_init__(self):
        self.segments = sorted((int(s), tuple(float(c) for c in cmd)) for s, cmd in self.segments)
        if not self.segments or self.segments[0][0] != 0:
            raise ValueError("a command profile must start at step 0")

    def at(self, t: int) -> np.ndarray:
        cmd = self.segments[0][1]
        for start, c in self.segments:
            if start <= t:
                cmd = c
        return np.array(cmd)

    @classmethod
    def constant(cls, cmd) -> "CommandProfile":
        return cls([(0, tuple(cmd))])

    def to_dict(self) -> dict:
        return {"segments": [[s, list(c)] for s, c in self.segments]}

    @classmethod
    def from_dict(cls, d: dict) -> "CommandProfile":
        return cls([(s, c) for s, c in d["segments"]])


# scaled analog of the hardware experiment's (2.0, 2.0, 0.5) target: same v/omega ratio
EXTREME_DIRECTION = (1.0, 1.0, 0.25)


def extreme_profile(env_config: EnvConfig, scale: float = 2.5) -> CommandProfile:
    high = np.asarray(env_config.command_high, dtype=float)
    return CommandProfile.constant(scale * high * np.asarray(EXTREME_DIRECTION))


def benign_profile(env_config: EnvConfig) -> CommandProfile:
    high = np.asarray(env_config.command_high, dtype=float)
    return CommandProfile([(0, 0.5 * high * np.array([1.0, 0.0, 0.0])), (100, 0.5 * high * np.array([0.0, 1.0, 0.5]))])


# -- controllers -----------------------------------------------------------------


def zero_controller(k: int):
    def act(obs, window):
        return np.zeros(k)

    return act


def expert_controller(state: TrainState):
    """Deterministic expert (mean action) over its actor input."""
    bound = state.env_config.action_bound
    pair, bundle, v_phi = state.pair, state.bundle, state.v_phi

    def act(obs, window):
        ai = obs if bundle is None else actor_input(bundle, obs, window, v_phi)
        return np.clip(pair.mean_action(ai), -bound, bound)

    return act


def clone_controller(state: TrainState):
    """The behaviour-cloned Dreamer policy acting alone (NLM: observation only)."""
    bound = state.env_config.action_bound
    bundle = state.bundle
    if bundle is None or bundle.variant != "nlm":
        raise ValueError("the cloned-policy controller needs an NLM bundle")

    def act(obs, window):
        return np.clip(dream_policy(bundle, obs), -bound, bound)

    return act


# -- episodes --------------------------------------------------------------------


@dataclass
class StepRecord:
    t: int
    state: EnvState
    obs: np.ndarray
    action: np.ndarray
    reward: float
    target: np.ndarray
    command: np.ndarray  # the command the controller chose (equals target unless a planner adapts it)


@dataclass
class Episode:
    seed: int
    ret: float
    steps: list[StepRecord]
    fell: bool


def run_episode(env_config: EnvConfig, seed: int, controller, history: int = 1, profile: CommandProfile | None = None,
                max_steps: int | None = None, on_step=None) -> Episode:
    """One seeded episode. Without a profile the command is drawn from the training range.

    ``controller`` may return either an action or ``(action, command)``; the
    environment always rewards tracking of the target, not the chosen command.
    """
    rng = np.random.default_rng(seed)
    fixed_cmd = sample_command(env_config, rng) if profile is None else None
    target = fixed_cmd if profile is None else profile.at(0)
    state, obs = reset(env_config, int(rng.integers(2**63)), cmd=target, noise_rng=rng)
    window = fresh_window(obs, history)
    steps, total, fell = [], 0.0, False
    cap = env_config.episode_cap if max_steps is None else min(max_steps, env_config.episode_cap)
    for t in range(cap):
        target = fixed_cmd if profile is None else profile.at(t)
        obs = obs.copy()
        obs[env_config.layout.command] = target
        out = controller(obs, window)
        action, chosen = out if isinstance(out, tuple) else (out, target)
        state, obs, r, _, done = step(env_config, state, action, target, rng)
        total += r
        rec = StepRecord(t, state, obs, np.asarray(action, dtype=float), r, np.asarray(target, dtype=float),
                         np.asarray(chosen, dtype=float))
        steps.append(rec)
        if on_step is not None:
            on_step(rec)
        window = push_window(window, obs)
        if done:
            fell = bool(np.max(np.abs(state.orient)) > env_config.fall_threshold)
            break
    return Episode(seed, total, steps, fell)


def mean_return(env_config: EnvConfig, controller, seeds, history: int = 1, max_steps=None) -> float:
    return float(np.mean([run_episode(env_config, s, controller, history, max_steps=max_steps).ret for s in seeds]))


# -- model quality on held-out data ------------------------------------------------


def heldout_buffer(state: TrainState, seed: int, rollout_length: int = 200):
    """Fresh on-policy data from the trained expert, never seen during training."""
    ppo = PpoConfig(**{**state.ppo_config.__dict__, "rollout_length": rollout_length})
    hist = 1 if state.bundle is None else state.bundle.history
    collector = Collector(state.env_config, state.train_config, ppo, np.random.SeedSequence([seed, 7919]), hist)
    return collector.collect(state.pair, state.bundle, state.v_phi)


def dynamics_heldout(state: TrainState, buffer) -> dict:
    """One-step observation MSE of the dynamics model vs predicting no change."""
    bundle = state.bundle
    if bundle is None or bundle.variant != "nlm":
        raise ValueError("dynamics evaluation needs an NLM bundle")
    obs = buffer.flat("obs")
    nxt = buffer.flat("next_obs")
    live = ~buffer.flat("dones")
    obs, nxt, acts = obs[live], nxt[live], buffer.flat("executed")[live]
    cmd = bundle.layout.command
    target = nxt - obs
    target[:, cmd] = 0.0
    pred = mlp_forward(bundle.dynamics, np.concatenate([obs, acts], axis=1))
    pred[:, cmd] = 0.0
    model = float(np.mean((pred - target) ** 2))
    baseline = float(np.mean(target**2))
    return {"model_mse": model, "no_change_mse": baseline, "ratio": baseline / model if model > 0 else float("inf")}


def bc_heldout(state: TrainState, buffer) -> float:
    """Action MSE between the cloned policy and the expert mean on held-out states."""
    bundle = state.bundle
    obs = buffer.flat("obs")
    expert = state.pair.mean_action(buffer.flat("actor_in"))
    clone = dream_policy(bundle, obs)
    return float(np.mean((clone - expert) ** 2))


def distill_policy(state: TrainState, seed: int, rounds: int = 4, epochs: int = 30, rollout_length: int = 200,
                   lr: float = 1e-3) -> tuple[TrainState, list[float]]:
    """Freeze the expert and regress the cloned policy onto it until convergence.

    Each round gathers fresh expert data and runs ``epochs`` passes over all
    data gathered so far. Returns the updated state and per-round training MSE.
    """
    from .tensornet import fit_regression

    bundle = state.bundle
    rng = np.random.default_rng(np.random.SeedSequence([seed, 104729]))
    xs, ys, losses = [], [], []
    policy = bundle.policy
    opt = None
    for r in range(rounds):
        buf = heldout_buffer(state, seed * 1000 + r + 1, rollout_length)
        xs.append(buf.flat("obs"))
        ys.append(state.pair.mean_action(buf.flat("actor_in")))
        policy, opt, loss = fit_regression(policy, np.concatenate(xs), np.concatenate(ys), rng, epochs, 256, opt, lr)
        losses.append(loss)
    state.bundle = bundle.replace_nets(policy=policy)
    return state, losses


# -- policy vs planner ------------------------------------------------------------------


def exceeds_limits(env_config: EnvConfig, q: np.ndarray) -> bool:
    return bool(np.any(np.abs(q) > env_config.q_max))


def episode_rows(env_config: EnvConfig, ep: Episode, mode: str) -> list[dict]:
    rows = []
    for s in ep.steps:
        roll, pitch = s.state.orient
        row = {"mode": mode, "seed": ep.seed, "t": s.t, "roll": float(roll), "pitch": float(pitch), "reward": s.reward,
               "joint_exceed": int(exceeds_limits(env_config, s.state.q))}
        for i, q in enumerate(s.state.q):
            row[f"q{i}"] = float(q)
        for name, vec in (("target", s.target), ("command", s.command), ("twist", s.state.twist)):
            for axis, v in zip(("vx", "vy", "wz"), vec):
                row[f"{name}_{axis}"] = float(v)
        rows.append(row)
    return rows


def episode_summary(env_config: EnvConfig, ep: Episode) -> dict:
    qs = np.array([s.state.q for s in ep.steps])
    orient = np.array([s.state.orient for s in ep.steps])
    twist = np.array([s.state.twist for s in ep.steps])
    tgt = np.array([s.target for s in ep.steps])
    cmd = np.array([s.command for s in ep.steps])
    return {
        "seed": ep.seed,
        "steps": len(ep.steps),
        "return": ep.ret,
        "fell": ep.fell,
        "joint_exceed_fraction": float(np.mean(np.any(np.abs(qs) > env_config.q_max, axis=1))),
        "peak_abs_roll": float(np.max(np.abs(orient[:, 0]))),
        "peak_abs_pitch": float(np.max(np.abs(orient[:, 1]))),
        "mean_tracking_error": float(np.mean(np.linalg.norm(twist - tgt, axis=1))),
        "command_adapted_steps": int(np.sum(np.any(np.abs(cmd - tgt) > 1e-9, axis=1))),
    }


def dump_candidates(path, result) -> None:
    """Every scored candidate of one plan() call, one array group per iteration."""
    arrays = {}
    for i, pool in enumerate(result.candidates):
        for name in ("commands", "actions", "returns", "constraint", "feasible", "source", "observations"):
            arrays[f"iter{i}_{name}"] = getattr(pool, name)
    np.savez_compressed(path, **arrays)


def planner_controller(planner: Planner, seed: int, log=None, record_dir=None):
    """Receding-horizon loop around ``planner``; keeps the warm start between calls."""
    memo = {"warm": None, "t": 0}

    def act(obs, window):
        lay = planner.layout
        target = obs[lay.command].copy()
        res = planner.plan(obs, target, memo["warm"], seed=seed * 100003 + memo["t"], record=record_dir is not None)
        if record_dir is not None:
            dump_candidates(record_dir / f"seed{seed}_t{memo['t']:04d}.npz", res)
        memo["warm"] = res.warm
        memo["t"] += 1
        if log is not None:
            log.append(res.diagnostics())
        return np.clip(res.action, -planner.config.action_bound, planner.config.action_bound), res.command

    return act


def make_planner(state: TrainState, config: PlannerConfig | None = None, **constraint_kw) -> Planner:
    config = config or PlannerConfig()
    env = state.env_config
    return Planner(state.bundle, config, default_constraints(env, config, **constraint_kw))


def compare_modes(state: TrainState, seeds, profile: CommandProfile, planner_config: PlannerConfig | None = None,
                  max_steps: int = 200, diagnostics: list | None = None, record_dir=None) -> dict:
    """Paired episodes per seed: cloned policy alone, then the planner in the loop."""
    env = state.env_config
    planner = make_planner(state, planner_config)
    policy = clone_controller(state)
    pairs, rows = [], []
    if record_dir is not None:
        record_dir.mkdir(parents=True, exist_ok=True)
    for seed in seeds:
        ep_pol = run_episode(env, seed, policy, profile=profile, max_steps=max_steps)
        log = [] if diagnostics is not None else None
        ep_plan = run_episode(env, seed, planner_controller(planner, seed, log, record_dir), profile=profile, max_steps=max_steps)
        if diagnostics is not None:
            diagnostics.extend({"seed": seed, "t": t, **d} for t, d in enumerate(log))
        rows += episode_rows(env, ep_pol, "policy") + episode_rows(env, ep_plan, "planner")
        pairs.append({"seed": seed, "policy": episode_summary(env, ep_pol), "planner": episode_summary(env, ep_plan)})
    dominated = sum(p["planner"]["joint_exceed_fraction"] <= p["policy"]["joint_exceed_fraction"] for p in pairs)
    adapted = sum(p["planner"]["command_adapted_steps"] >= 1 for p in pairs)
    summary = {
        "profile": profile.to_dict(),
        "episodes": pairs,
        "planner_not_worse_seeds": int(dominated),
        "command_adapted_episodes": int(adapted),
        "num_seeds": len(pairs),
    }
    for mode in ("policy", "planner"):
        for key in ("joint_exceed_fraction", "peak_abs_roll", "peak_abs_pitch", "mean_tracking_error", "return"):
            summary[f"{mode}_mean_{key}"] = float(np.mean([p[mode][key] for p in pairs]))
    return {"summary": summary, "rows": rows}


# -- throughput -----------------------------------------------------------------------


def bench_planner(planner: Planner, env_config: EnvConfig, steps: int = 1000, seed: int = 0, warmup: int = 20) -> dict:
    """Time ``plan()`` inside a closed loop on the real environment."""
    rng = np.random.default_rng(seed)
    target = sample_command(env_config, rng)
    state, obs = reset(env_config, int(rng.integers(2**63)), cmd=target, noise_rng=rng)
    warm = None
    times = []
    for t in range(steps + warmup):
        t0 = time.perf_counter()
        res = planner.plan(obs, target, warm, seed=seed * 100003 + t)
        dt = time.perf_counter() - t0
        warm = res.warm
        if t >= warmup:
            times.append(dt)
        action = np.clip(res.action, -env_config.action_bound, env_config.action_bound)
        state, obs, _, _, done = step(env_config, state, action, target, rng)
        if done:
            state, obs = reset(env_config, int(rng.integers(2**63)), cmd=target, noise_rng=rng)
            warm = None
    ms = np.array(times) * 1e3
    med = float(np.median(ms))
    return {
        "steps": len(ms),
        "median_ms": med,
        "p95_ms": float(np.percentile(ms, 95)),
        "mean_ms": float(np.mean(ms)),
        "hz_at_median": 1e3 / med,
        "config": planner.config.to_dict(),
    }


# -- noise ablation ---------------------------------------------------------------------


ABLATION_LEVELS = ("low", "medium", "high")
ABLATION_VARIANTS = ("nlm", "none")


def noise_ablation(base_env: EnvConfig, ppo: PpoConfig, base_train, seeds=range(5), levels=ABLATION_LEVELS,
                   variants=ABLATION_VARIANTS, eval_seeds=range(10_000, 10_010), progress=None) -> dict:
    """Train each (noise level, variant, seed) and evaluate the deterministic expert at the same noise level."""
    from dataclasses import replace

    from .trainer import train

    returns: dict[str, dict[str, list[float]]] = {lv: {v: [] for v in variants} for lv in levels}
    for lv in levels:
        env = replace(base_env, noise_level=lv)
        for v in variants:
            for s in seeds:
                st = train(env, ppo, replace(base_train, variant=v, seed=int(s)))
                hist = 1 if st.bundle is None else st.bundle.history
                r = mean_return(env, expert_controller(st), eval_seeds, hist)
                returns[lv][v].append(r)
                if progress is not None:
                    progress(lv, v, s, r)
    table = {lv: {v: {"mean": float(np.mean(rs)), "std": float(np.std(rs))} for v, rs in row.items()}
             for lv, row in returns.items()}
    return {"noise_levels": list(levels), "variants": list(variants), "seeds": [int(s) for s in seeds],
            "iterations": base_train.iterations, "returns": returns, "table": table}


def ablation_markdown(report: dict) -> str:
    variants = report["variants"]
    lines = ["| noise | " + " | ".join(variants) + " |", "|---|" + "---|" * len(variants)]
    for lv in report["noise_levels"]:
        cells = [f"{report['table'][lv][v]['mean']:.1f} ± {report['table'][lv][v]['std']:.1f}" for v in variants]
        lines.append(f"| {lv} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"
