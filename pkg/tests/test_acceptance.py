"""Acceptance checks. Each test prints one PASS/FAIL line and asserts the criterion unchanged."""
import itertools
import time
from dataclasses import replace

import numpy as np
import pytest
from conftest import ACCEPTANCE_LINES
from test_env import oracle_step, random_state
from test_planner import constant_net, reset_obs, scaled_dynamics
from test_tensornet import finite_difference, random_net, rel_err

from dreammpc import evaluation as ev
from dreammpc.env import EnvConfig, ObsLayout, apply_disturbance, reset, step
from dreammpc.internal_model import (
    flm_encode,
    make_bundle,
    make_velocity_estimator,
    nlm_rollout,
    plm_rollout,
)
from dreammpc.planner import Planner, PlannerConfig, default_constraints, score_trajectory
from dreammpc.tensornet import Layer, MlpParams, init_mlp, mlp_backward, mlp_forward
from dreammpc.trainer import PpoConfig, TrainConfig, train


def report(name: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def test_gradient_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        net = random_net(rng)
        x, up = rng.normal(size=net.in_dim), rng.normal(size=net.out_dim)
        g, gx = mlp_backward(net, x, up)
        fd, fdx = finite_difference(net, x, up)
        for layer, (gw, gb) in zip(g.layers, fd):
            worst = max(worst, rel_err(layer.weight, gw), rel_err(layer.bias, gb))
        worst = max(worst, rel_err(gx, fdx))
    dt = time.perf_counter() - t0
    report("gradient suite", worst < 1e-4 and dt < 30, f"max rel err {worst:.2e} over 100 nets in {dt:.1f} s")


def test_dynamics_oracle():
    cfg = EnvConfig(noise_level="none")
    rng = np.random.default_rng(77)
    worst = 0.0
    for _ in range(1000):
        s = random_state(cfg, rng)
        nxt, *_ = step(cfg, s, rng.uniform(-1, 1, cfg.num_joints), rng.uniform(-1, 1, 3))
        ref = oracle_step(cfg, s, nxt.prev_action)
        got = (nxt.q, nxt.qd, nxt.twist, nxt.orient, nxt.orient_rate)
        worst = max(worst, max(float(np.max(np.abs(a - b))) for a, b in zip(got, ref)))
    s, _ = reset(cfg, 0, perturbation=0.0)
    fixed = 0.0
    for _ in range(50):
        s2, *_ = step(cfg, s, np.zeros(cfg.num_joints), np.zeros(3))
        fixed = max(fixed, float(np.max(np.abs(s2.q - s.q))), float(np.max(np.abs(s2.twist - s.twist))))
        s = s2
    k = cfg.num_joints
    free = EnvConfig(B=np.zeros((3, k)), D=np.zeros((3, k)), E=np.zeros((2, k)), noise_level="none")
    s, _ = reset(free, 1, perturbation=0.0)
    s = apply_disturbance(s, [0.7, -0.3, 0.2])
    nu0, factor, decay = s.twist.copy(), 1.0 - free.dt * free.base_damping, 0.0
    for t in range(1, 60):
        s, *_ = step(free, s, np.zeros(k), np.zeros(3))
        decay = max(decay, float(np.max(np.abs(s.twist - nu0 * factor**t))))
    ok = worst < 1e-12 and fixed < 1e-12 and decay < 1e-12
    report("dynamics oracle", ok, f"step {worst:.1e}, fixed point {fixed:.1e}, decay {decay:.1e}")


def test_rollout_equivalence():
    lay = ObsLayout(4)
    p = lay.dim
    mismatches = 0

    def dream(b, o, a, ctx=()):
        nxt = o + mlp_forward(b.dynamics, np.concatenate([o, *ctx, a]))
        nxt[lay.command] = o[lay.command]
        return nxt

    for H in range(1, 6):
        rng = np.random.default_rng(500 + H)
        b = make_bundle("nlm", lay, H, rng)
        o = rng.normal(size=p)
        traj = nlm_rollout(b, o)
        for kk in range(H):
            a = mlp_forward(b.policy, o)
            o = dream(b, o, a)
            mismatches += traj.actions[kk].tobytes() != a.tobytes()
            mismatches += traj.observations[kk + 1].tobytes() != o.tobytes()
        b = make_bundle("plm", lay, H, rng)
        vphi = make_velocity_estimator(lay, b.history, rng)
        w = rng.normal(size=(b.history, p))
        traj = plm_rollout(b, w, vphi)
        o = w[-1]
        for kk in range(H):
            z, v = mlp_forward(b.encoder, w.reshape(-1)), mlp_forward(vphi, w.reshape(-1))
            a = mlp_forward(b.policy, np.concatenate([o, z, v]))
            o = dream(b, o, a, (z, v))
            w = np.vstack([w[1:], o])
            mismatches += traj.actions[kk].tobytes() != a.tobytes()
            mismatches += traj.observations[kk + 1].tobytes() != o.tobytes()
        b = make_bundle("flm", lay, H, rng)
        vphi = make_velocity_estimator(lay, H, rng)
        hist = rng.normal(size=(H, p))
        future, _ = flm_encode(b, hist, vphi)
        ref = mlp_forward(b.encoder, plm_rollout(b, hist, vphi).observations[1:].reshape(-1))
        mismatches += future.tobytes() != ref.tobytes()
    report("rollout equivalence", mismatches == 0, f"{mismatches} bitwise mismatches for H=1..5 (NLM, PLM, FLM)")


def test_discounted_score_closed_form():
    env = EnvConfig()
    lay = env.layout
    worst = 0.0
    grid = list(itertools.product([0.5, 0.9, 0.95, 0.99], [1, 3, 5, 10, 20]))
    for gamma, H in grid:
        b = make_bundle("nlm", lay, H, np.random.default_rng(H))
        b = b.replace_nets(reward=constant_net(b.reward, 1.0), value=constant_net(b.value, 2.0))
        rng = np.random.default_rng(int(gamma * 100) + H)
        tr = score_trajectory(b, rng.normal(size=lay.dim), np.zeros(3), rng.uniform(-1, 1, (H, lay.k)),
                              PlannerConfig(horizon=H, gamma=gamma))
        worst = max(worst, abs(tr.ret - ((1 - gamma**H) / (1 - gamma) + 2.0 * gamma**H)))
    report("discounted score closed form", worst < 1e-10, f"max error {worst:.1e} over {len(grid)} (gamma, H) pairs")


def test_planner_exhaustive_oracle():
    t0 = time.perf_counter()
    lay = ObsLayout(2)
    p, k, H = lay.dim, 2, 3
    levels = (-1.0, 0.0, 1.0)
    seqs = np.array(list(itertools.product(levels, repeat=H * k))).reshape(-1, H, k)
    # initial spread equals the grid spacing; every other setting is the default
    cfg = PlannerConfig(horizon=H, action_grid=levels, command_delta=0.0, sigma_init_action=1.0)
    hits, worst_fit = 0, 0.0
    for trial in range(100):
        rng = np.random.default_rng(90_000 + trial)
        A = rng.normal(scale=0.1, size=(p, p))
        B = rng.normal(scale=0.3, size=(p, k))
        A[lay.command], B[lay.command] = 0.0, 0.0
        X = rng.uniform(-2, 2, (400, p + k))
        Y = X[:, :p] @ A.T + X[:, p:] @ B.T
        W, *_ = np.linalg.lstsq(X, Y, rcond=None)
        worst_fit = max(worst_fit, float(np.mean((X @ W - Y) ** 2)))
        b = make_bundle("nlm", lay, H, rng).replace_nets(
            dynamics=MlpParams([Layer(W.T.copy(), np.zeros(p))], ()),
            reward=init_mlp([p + k, 16, 1], rng), value=init_mlp([p, 16, 1], rng))
        obs, target = rng.normal(scale=0.5, size=p), rng.uniform(-1, 1, 3)
        obs[lay.command] = target
        best = -np.inf
        for s in seqs:
            o, R = obs.copy(), 0.0
            for t, a in enumerate(s):
                R += 0.99**t * mlp_forward(b.reward, np.concatenate([o, a]))[0]
                o = o + A @ o + B @ a
            best = max(best, R + 0.99**H * mlp_forward(b.value, o)[0])
        got = Planner(b, cfg).plan(obs, target, seed=trial).best_returns[-1]
        hits += int(got >= best - 0.05 * abs(best))
    dt = time.perf_counter() - t0
    report("planner exhaustive oracle", hits >= 95 and dt < 300 and worst_fit < 1e-6,
           f"{hits}/100 within 5% of the 3^6 optimum in {dt:.1f} s (model fit mse {worst_fit:.1e})")


def test_constraint_properties():
    env = EnvConfig()
    cfg = PlannerConfig(num_samples=160)
    spec = default_constraints(env, cfg, joint_margin=0.3)
    base = make_bundle("nlm", env.layout, 10, np.random.default_rng(31))
    planners = [Planner(scaled_dynamics(base, s), cfg, spec) for s in (0.1, 0.3)]
    disc = cfg.gamma ** np.arange(cfg.horizon)
    rng = np.random.default_rng(32)
    scored = violations = dominance_fail = monotone_fail = had_feasible = 0
    for i in range(1000):
        target = rng.uniform(-1, 1, 3)
        res = planners[i % 2].plan(reset_obs(20_000 + i), target, seed=i, record=True)
        for cs in res.candidates:
            C = spec.accumulate(cs.observations, cs.actions, cs.commands, target, disc)
            violations += int((~(C <= spec.bounds).all(axis=1) & cs.feasible).sum())
            scored += len(cs)
        best = [r for r in res.best_returns if np.isfinite(r)]
        monotone_fail += any(b2 < b1 for b1, b2 in zip(best, best[1:]))
        if res.any_feasible:
            had_feasible += 1
            dominance_fail += not res.feasible
    ok = violations == 0 and scored >= 1_000_000 and dominance_fail == 0 and monotone_fail == 0
    report("constraint properties", ok,
           f"{violations} violations in {scored} candidates; feasible output {had_feasible - dominance_fail}/"
           f"{had_feasible} when any candidate was; {monotone_fail} non-monotone plans of 1000")


# -- training and downstream criteria share one set of runs -----------------------------


@pytest.fixture(scope="session")
def smoke_runs():
    t0 = time.perf_counter()
    env = EnvConfig()
    runs = {}
    for H in (1, 5):
        for seed in (0, 1, 2):
            runs[(H, seed)] = train(env, PpoConfig(num_envs=16), TrainConfig(horizon=H, iterations=300, seed=seed))
    return runs, time.perf_counter() - t0


def test_training_smoke(smoke_runs):
    runs, train_time = smoke_runs
    t0 = time.perf_counter()
    eval_seeds = range(50_000, 50_010)
    lines, ok = [], True
    for (H, seed), state in runs.items():
        env = state.env_config
        expert = ev.mean_return(env, ev.expert_controller(state), eval_seeds, state.bundle.history)
        zero = ev.mean_return(env, ev.zero_controller(env.num_joints), eval_seeds)
        held = ev.heldout_buffer(state, 777_000 + seed)
        dyn = ev.dynamics_heldout(state, held)
        ev.distill_policy(state, seed)
        bc = ev.bc_heldout(state, held)
        run_ok = expert > zero and dyn["ratio"] >= 2.0 and bc < 1e-3
        ok &= run_ok
        lines.append(f"H={H} seed={seed} return {expert:.1f} vs {zero:.1f}, dyn x{dyn['ratio']:.0f}, bc {bc:.1e}")
    total = train_time + time.perf_counter() - t0
    report("training smoke", ok and total < 1800, f"{total:.0f} s; " + "; ".join(lines))


def test_fig5_analog(smoke_runs):
    runs, _ = smoke_runs
    state = runs[(1, 0)]
    profile = ev.extreme_profile(state.env_config)
    res = ev.compare_modes(state, range(100, 110), profile, PlannerConfig(dtype="float32"), max_steps=200)
    s = res["summary"]
    ok = s["planner_not_worse_seeds"] >= 8 and s["command_adapted_episodes"] == s["num_seeds"]
    report("extreme-command analog", ok,
           f"planner exceedance <= policy on {s['planner_not_worse_seeds']}/10 seeds "
           f"(means {s['planner_mean_joint_exceed_fraction']:.3f} vs {s['policy_mean_joint_exceed_fraction']:.3f}); "
           f"command adapted in {s['command_adapted_episodes']}/10 episodes")


def test_plan_latency(smoke_runs):
    runs, _ = smoke_runs
    state = runs[(1, 0)]
    out = ev.bench_planner(ev.make_planner(state, PlannerConfig(dtype="float32")), state.env_config, steps=1000)
    report("plan latency", out["median_ms"] <= 10.0,
           f"median {out['median_ms']:.1f} ms, p95 {out['p95_ms']:.1f} ms ({out['hz_at_median']:.0f} Hz) "
           f"at default sizes, target <= 10 ms")


def test_noise_ablation_report():
    env = EnvConfig()
    ppo = PpoConfig(num_envs=16)
    short = TrainConfig(iterations=30)
    rep = ev.noise_ablation(env, ppo, short, seeds=range(5), eval_seeds=range(60_000, 60_005))
    again = ev.noise_ablation(env, ppo, short, seeds=[0], levels=["high"], eval_seeds=range(60_000, 60_005))
    table = ev.ablation_markdown(rep)
    complete = all(len(rep["returns"][lv][v]) == 5 for lv in ("low", "medium", "high") for v in ("nlm", "none"))
    deterministic = again["returns"]["high"]["nlm"][0] == rep["returns"]["high"]["nlm"][0] and \
        again["returns"]["high"]["none"][0] == rep["returns"]["high"]["none"][0]
    print(table)
    report("noise ablation report", complete and deterministic and "±" in table,
           f"3 levels x 2 variants x 5 seeds, reproducible={deterministic}")
