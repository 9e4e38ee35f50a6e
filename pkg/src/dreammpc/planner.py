"""Constrained MPPI over an NLM Dreamer bundle.

The decision vector of one candidate is the twist command followed by the H
actions, time-major: ``[cmd (3), a_0 (k), ..., a_{H-1} (k)]``. Each candidate
is scored as::

    R = sum_k gamma^k r(o_k, a_k) + gamma^H V(o_H) - lambda * sum_c C_c
    C_c = sum_k gamma^k c_c(o_k, a_k, cmd)

and is feasible iff ``C_c <= b_c`` for every constraint channel. Elites are
the top feasible candidates (topped up by the least-violating infeasible ones
when there are too few), fitted with weights ``exp((R - max R) / T)`` and
blended into the previous distribution with momentum ``beta``.

Random streams: the noise of iteration ``i`` comes from
``SeedSequence([seed, i])``; candidate ``j`` always uses row ``j`` of each
block, so candidate sets do not depend on how scoring is partitioned.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .env import EnvConfig, ObsLayout, orientation_from_gravity
from .internal_model import DreamerBundle, dream_policy, dream_step, nlm_rollout

SOURCES = ("policy", "gaussian", "elite-carryover")


@dataclass
class PlannerConfig:
    horizon: int = 10
    iterations: int = 6
    num_samples: int = 500
    num_policy_samples: int = 30
    num_elites: int = 60
    gamma: float = 0.99
    constraint_weight: float = 1.0
    momentum: float = 0.95
    temperature: float = 0.5
    sigma_min: float = 0.02
    sigma_init_action: float = 0.2
    sigma_init_command: float = 0.3
    command_delta: tuple = (1.0, 1.0, 0.5)
    action_bound: float = 1.0
    policy_action_noise: float = 0.1
    policy_command_noise: float = 0.2
    extraction: str = "mean"  # "mean" or "sample"
    dtype: str = "float64"
    action_grid: tuple | None = None

    def __post_init__(self):
        self.command_delta = tuple(float(x) for x in np.broadcast_to(self.command_delta, (3,)))
        if self.action_grid is not None:
            self.action_grid = tuple(sorted(float(x) for x in self.action_grid))
        self.validate()

    def validate(self):
        if self.horizon < 1 or self.iterations < 1:
            raise ValueError("horizon and iterations must be >= 1")
        if self.num_samples < 0 or self.num_policy_samples < 0:
            raise ValueError("sample counts must be nonnegative")
        if self.num_samples + self.num_policy_samples < 1:
            raise ValueError("need at least one candidate per iteration")
        if not 1 <= self.num_elites <= self.num_samples + self.num_policy_samples:
            raise ValueError("num_elites must lie in [1, num_samples + num_policy_samples]")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.sigma_min <= 0:
            raise ValueError("sigma_min must be positive")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError("momentum must lie in [0, 1]")
        if self.extraction not in ("mean", "sample"):
            raise ValueError("extraction must be 'mean' or 'sample'")
        if self.dtype not in ("float64", "float32"):
            raise ValueError("dtype must be float64 or float32")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["command_delta"] = list(self.command_delta)
        if self.action_grid is not None:
            d["action_grid"] = list(self.action_grid)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PlannerConfig":
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "PlannerConfig":
        return cls.from_dict(json.loads(text))


# per-step constraint: (obs (B, p), actions (B, k), cmd (B, 3), target (3,)) -> (B,)
StepFn = Callable[[np.ndarray, np.ndarray, np.ndarray, np.ndarray], np.ndarray]


@dataclass
class ConstraintChannel:
    name: str
    fn: StepFn
    bound: float = 0.0
    per_step: bool = True  # False: depends on the command only, evaluated once per candidate


@dataclass
class ConstraintSpec:
    channels: list[ConstraintChannel] = field(default_factory=list)

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.channels]

    @property
    def bounds(self) -> np.ndarray:
        return np.array([c.bound for c in self.channels], dtype=float)

    def __len__(self) -> int:
        return len(self.channels)

    def evaluate(self, obs, actions, cmds, target) -> np.ndarray:
        """Per-step values, shape (B, n_channels)."""
        if not self.channels:
            return np.zeros((obs.shape[0], 0), dtype=obs.dtype)
        return np.stack([c.fn(obs, actions, cmds, target) for c in self.channels], axis=1)

    def accumulate(self, observations, actions, cmds, target, discounts) -> np.ndarray:
        """Discounted sums over a stored rollout; observations (B, H+1, p), actions (B, H, k)."""
        H = actions.shape[1]
        out = np.zeros((len(cmds), len(self.channels)))
        for k in range(H):
            out += discounts[k] * self.evaluate(observations[:, k], actions[:, k], cmds, target)
        return out


def joint_overshoot(layout: ObsLayout, q_nominal, q_max) -> StepFn:
    q_nominal = np.asarray(q_nominal, dtype=float)
    q_max = np.asarray(q_max, dtype=float)

    def fn(obs, actions, cmds, target):
        q = obs[:, layout.joint_pos] + q_nominal
        return np.maximum(0.0, np.abs(q) - q_max).sum(axis=1)

    return fn


def orientation_overshoot(layout: ObsLayout, roll_max: float, pitch_max: float) -> StepFn:
    def fn(obs, actions, cmds, target):
        roll, pitch = orientation_from_gravity(obs[:, layout.gravity])
        return np.maximum(0.0, np.abs(roll) - roll_max) + np.maximum(0.0, np.abs(pitch) - pitch_max)

    return fn


def command_deviation(command_delta) -> StepFn:
    """max_i(|cmd_i - target_i| - delta_i): nonpositive inside the allowed box."""
    delta = np.asarray(command_delta, dtype=float)

    def fn(obs, actions, cmds, target):
        return np.max(np.abs(cmds - target) - delta, axis=1)

    return fn


def default_constraints(
    env_config: EnvConfig,
    planner_config: PlannerConfig | None = None,
    roll_max: float = 0.3,
    pitch_max: float = 0.3,
    joint_margin: float = 0.0,
    bounds=(0.0, 0.0, 0.0),
) -> ConstraintSpec:
    lay = env_config.layout
    delta = (planner_config or PlannerConfig()).command_delta
    b_joint, b_orient, b_cmd = bounds
    return ConstraintSpec([
        ConstraintChannel("joint_overshoot", joint_overshoot(lay, env_config.q_nominal, env_config.q_max - joint_margin), b_joint),
        ConstraintChannel("orientation_overshoot", orientation_overshoot(lay, roll_max, pitch_max), b_orient),
        ConstraintChannel("command_deviation", command_deviation(delta), b_cmd, per_step=False),
    ])


@dataclass
class GaussianPlanDistribution:
    mean: np.ndarray  # (3 + H*k,)
    std: np.ndarray

    def command(self) -> np.ndarray:
        return self.mean[:3]

    def actions(self, k: int) -> np.ndarray:
        return self.mean[3:].reshape(-1, k)

    def floored(self, sigma_min: float) -> "GaussianPlanDistribution":
        return GaussianPlanDistribution(self.mean.copy(), np.maximum(self.std, sigma_min))

    def copy(self) -> "GaussianPlanDistribution":
        return GaussianPlanDistribution(self.mean.copy(), self.std.copy())


@dataclass
class CandidateTrajectory:
    command: np.ndarray
    actions: np.ndarray  # (H, k)
    observations: np.ndarray  # (H+1, p)
    ret: float
    constraint: np.ndarray  # (n_channels,)
    feasible: bool
    source: str = "gaussian"


@dataclass
class CandidateSet:
    commands: np.ndarray  # (n, 3)
    actions: np.ndarray  # (n, H, k)
    returns: np.ndarray  # (n,)
    constraint: np.ndarray  # (n, n_channels)
    feasible: np.ndarray  # (n,) bool
    violation: np.ndarray  # (n,) total positive excess over the bounds
    source: np.ndarray  # (n,) index into SOURCES
    observations: np.ndarray | None = None  # (n, H+1, p)

    def __len__(self) -> int:
        return len(self.returns)

    def decision_vectors(self) -> np.ndarray:
        n = len(self)
        return np.concatenate([self.commands, self.actions.reshape(n, -1)], axis=1)

    def take(self, idx) -> "CandidateSet":
        obs = None if self.observations is None else self.observations[idx]
        return CandidateSet(self.commands[idx], self.actions[idx], self.returns[idx], self.constraint[idx],
                            self.feasible[idx], self.violation[idx], self.source[idx], obs)

    def item(self, j: int) -> CandidateTrajectory:
        return CandidateTrajectory(
            self.commands[j].copy(), self.actions[j].copy(),
            None if self.observations is None else self.observations[j].copy(),
            float(self.returns[j]), self.constraint[j].copy(), bool(self.feasible[j]), SOURCES[int(self.source[j])],
        )

    @staticmethod
    def concat(sets: list["CandidateSet"]) -> "CandidateSet":
        obs = None if any(s.observations is None for s in sets) else np.concatenate([s.observations for s in sets])
        return CandidateSet(*(np.concatenate([getattr(s, f) for s in sets]) for f in
                              ("commands", "actions", "returns", "constraint", "feasible", "violation", "source")), obs)


def selection_order(returns: np.ndarray, violation: np.ndarray) -> np.ndarray:
    """Candidate indices best-first: feasible by return, then least violation, then return; ties by index."""
    idx = np.arange(len(returns))
    return np.lexsort((idx, -returns, violation))


def elite_update(
    candidates: CandidateSet,
    config: PlannerConfig,
    dist_prev: GaussianPlanDistribution,
) -> tuple[GaussianPlanDistribution, np.ndarray]:
    """Refit the plan distribution; returns (new distribution, elite indices)."""
    if len(candidates) == 0:
        raise ValueError("elite_update on an empty candidate set")
    order = selection_order(candidates.returns, candidates.violation)
    elite = order[: min(config.num_elites, len(order))]
    x = candidates.decision_vectors()[elite]
    r = candidates.returns[elite]
    finite = np.isfinite(r)
    if finite.any():
        w = np.where(finite, np.exp((np.where(finite, r, 0.0) - r[finite].max()) / config.temperature), 0.0)
    else:
        w = np.ones(len(elite))
    w = w / w.sum()
    mu_e = w @ x
    sigma_e = np.maximum(np.sqrt(w @ (x - mu_e) ** 2), config.sigma_min)
    beta = config.momentum
    mu = dist_prev.mean + beta * (mu_e - dist_prev.mean)
    sigma = dist_prev.std + beta * (sigma_e - dist_prev.std)
    return GaussianPlanDistribution(mu, np.maximum(sigma, config.sigma_min)), elite


def elite_fit(candidates: CandidateSet, config: PlannerConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(mu_elite, sigma_elite, elite indices) without the momentum blend."""
    blended, elite = elite_update(
        candidates,
        PlannerConfig(**{**config.to_dict(), "momentum": 1.0}),
        GaussianPlanDistribution(np.zeros(candidates.decision_vectors().shape[1]), np.zeros(candidates.decision_vectors().shape[1])),
    )
    return blended.mean, blended.std, elite


class _FastNet:
    """Forward-only copy of an MLP with pre-transposed weights in the planner dtype."""

    def __init__(self, params, dtype):
        self.weights = [np.ascontiguousarray(l.weight.T, dtype=dtype) for l in params.layers]
        self.biases = [np.asarray(l.bias, dtype=dtype) for l in params.layers]
        self.acts = list(params.activations)

    def hidden(self, h, start=0):
        last = len(self.weights) - 1
        for i in range(start, last + 1):
            h = h @ self.weights[i]
            h += self.biases[i]
            if i < last:
                if self.acts[i] == "tanh":
                    np.tanh(h, out=h)
                else:
                    h = np.where(h > 0, h, np.expm1(np.minimum(h, 0.0)))
        return h

    def __call__(self, x):
        return self.hidden(x)


class _FastPair:
    """Dynamics and reward nets share the [o, a] input; their first layers run as one matmul."""

    def __init__(self, dyn, rew, dtype):
        self.dyn = _FastNet(dyn, dtype)
        self.rew = _FastNet(rew, dtype)
        self.fused = (
            len(dyn.layers) > 1 and len(rew.layers) > 1 and dyn.activations[0] == rew.activations[0] == "tanh"
        )
        self.w1 = np.ascontiguousarray(np.vstack([dyn.layers[0].weight, rew.layers[0].weight]).T, dtype=dtype)
        self.b1 = np.concatenate([dyn.layers[0].bias, rew.layers[0].bias]).astype(dtype)
        self.split = dyn.layers[0].weight.shape[0]

    def __call__(self, x):
        """(delta obs, reward) for a batch of concatenated [o, a] rows."""
        if not self.fused:
            return self.dyn(x), self.rew(x)[:, 0]
        h = x @ self.w1
        h += self.b1
        np.tanh(h, out=h)
        delta = self.dyn.hidden(h[:, : self.split], start=1)
        r = self.rew.hidden(h[:, self.split :], start=1)
        return delta, r[:, 0]


@dataclass
class PlanResult:
    command: np.ndarray
    action: np.ndarray
    actions: np.ndarray
    feasible: bool
    infeasible: bool
    source: str  # "mean", "sample", "best-feasible", "min-violation"
    ret: float
    constraint: np.ndarray
    best_returns: list[float]
    feasible_fraction: list[float]
    best_trajectory: np.ndarray
    best_candidate: CandidateTrajectory
    distribution: GaussianPlanDistribution
    warm: GaussianPlanDistribution
    any_feasible: bool
    num_scored: int = 0
    candidates: list[CandidateSet] | None = None

    def diagnostics(self) -> dict:
        return {
            "iteration_best": [None if not np.isfinite(r) else float(r) for r in self.best_returns],
            "feasible_fraction": [float(f) for f in self.feasible_fraction],
            "command": self.command.tolist(),
            "first_action": self.action.tolist(),
            "feasible": self.feasible,
            "infeasible": self.infeasible,
            "source": self.source,
            "return": float(self.ret) if np.isfinite(self.ret) else None,
            "best_dream": self.best_trajectory.tolist(),
        }


class Planner:
    def __init__(self, bundle: DreamerBundle, config: PlannerConfig | None = None,
                 constraints: ConstraintSpec | None = None, command_low=None, command_high=None):
        if bundle.variant != "nlm":
            raise ValueError("the planner runs on an NLM bundle")
        self.bundle = bundle
        self.config = config or PlannerConfig()
        self.constraints = constraints or ConstraintSpec()
        self.layout = bundle.layout
        self.k = bundle.act_dim
        self.command_low = None if command_low is None else np.asarray(command_low, dtype=float)
        self.command_high = None if command_high is None else np.asarray(command_high, dtype=float)
        self.dtype = np.dtype(self.config.dtype)
        self._pair = _FastPair(bundle.dynamics, bundle.reward, self.dtype)
        self._value = _FastNet(bundle.value, self.dtype)
        self._policy = _FastNet(bundle.policy, self.dtype)
        self._bounds = self.constraints.bounds
        self._discounts = self.config.gamma ** np.arange(self.config.horizon + 1)

    # -- scoring -----------------------------------------------------------------

    def seed_obs(self, obs, cmd) -> np.ndarray:
        o = np.array(obs, dtype=float)
        o[self.layout.command] = cmd
        return o

    def score_batch(self, obs, cmds, actions, target=None, keep_observations=True) -> CandidateSet:
        """Roll the dynamics model under each candidate's actions and score it."""
        cfg = self.config
        n, H = actions.shape[:2]
        lay = self.layout
        p = lay.dim
        cmds = np.asarray(cmds, dtype=float)
        actions = np.asarray(actions, dtype=float)
        target = cmds[0] if target is None else np.asarray(target, dtype=float)
        cmds_dt = cmds.astype(self.dtype)
        # rows are [o_k, a_k]; the observation half is advanced in place
        x = np.empty((n, p + self.k), dtype=self.dtype)
        x[:, :p] = obs
        x[:, lay.command] = cmds_dt
        o = x[:, :p]
        ret = np.zeros(n, dtype=self.dtype)
        channels = self.constraints.channels
        nc = len(channels)
        stepwise = [c for c in channels if c.per_step]
        C_step = np.zeros((n, len(stepwise)))
        traj = np.empty((n, H + 1, p), dtype=self.dtype) if keep_observations else None
        if traj is not None:
            traj[:, 0] = o
        disc = self._discounts
        for k in range(H):
            a = x[:, p:]
            a[:] = actions[:, k]
            for ci, c in enumerate(stepwise):
                C_step[:, ci] += disc[k] * c.fn(o, a, cmds_dt, target)
            delta, r = self._pair(x)
            ret += disc[k] * r
            o += delta
            o[:, lay.command] = cmds_dt
            if traj is not None:
                traj[:, k + 1] = o
        C = np.empty((n, nc))
        si = 0
        for ci, c in enumerate(channels):
            if c.per_step:
                C[:, ci] = C_step[:, si]
                si += 1
            else:
                C[:, ci] = disc[:H].sum() * c.fn(None, None, cmds, target)
        v = self._value(o)[:, 0]
        R = ret.astype(float) + disc[H] * v.astype(float)
        if nc:
            R -= cfg.constraint_weight * C.sum(axis=1)
        bad = ~np.isfinite(R)
        if nc:
            bad |= ~np.isfinite(C).all(axis=1)
        R[bad] = -np.inf
        excess = np.maximum(C - self._bounds, 0.0).sum(axis=1) if nc else np.zeros(n)
        excess[bad] = np.inf
        feasible = (C <= self._bounds).all(axis=1) & ~bad
        return CandidateSet(
            commands=cmds.copy(), actions=actions, returns=R, constraint=C,
            feasible=feasible, violation=excess, source=np.full(n, SOURCES.index("gaussian"), dtype=np.int8),
            observations=None if traj is None else traj.astype(float),
        )

    def score_trajectory(self, obs, cmd, actions, target=None) -> CandidateTrajectory:
        cs = self.score_batch(obs, np.asarray(cmd, dtype=float)[None, :], np.asarray(actions, dtype=float)[None], target)
        return cs.item(0)

    # -- sampling ----------------------------------------------------------------

    def _clamp(self, cmds, actions, target):
        cfg = self.config
        delta = np.asarray(cfg.command_delta)
        lo, hi = target - delta, target + delta
        if self.command_low is not None:
            lo = np.maximum(lo, self.command_low)
            hi = np.minimum(hi, self.command_high)
        cmds = np.clip(cmds, lo, hi)
        actions = np.clip(actions, -cfg.action_bound, cfg.action_bound)
        if cfg.action_grid is not None:
            actions = snap_to_grid(actions, cfg.action_grid)
        return cmds, actions

    def policy_rollout(self, obs, target) -> np.ndarray:
        """Noise-free cloned-policy actions from ``obs`` with command ``target``; (H, k)."""
        traj = nlm_rollout(self.bundle, self.seed_obs(obs, target), self.config.horizon)
        _, acts = self._clamp(np.asarray(target, dtype=float)[None], traj.actions[None], target)
        return acts[0]

    def _jittered_policy_rollouts(self, obs, target, cmd_noise, act_noise):
        cfg = self.config
        lay = self.layout
        n = len(cmd_noise)
        cmds, _ = self._clamp(target + cfg.policy_command_noise * cmd_noise, np.zeros(0), target)
        o = np.repeat(np.asarray(obs, dtype=self.dtype)[None], n, axis=0)
        o[:, lay.command] = cmds
        x = np.empty((n, lay.dim + self.k), dtype=self.dtype)
        acts = np.empty(act_noise.shape)
        for step in range(cfg.horizon):
            a = self._policy(o).astype(float) + cfg.policy_action_noise * act_noise[:, step]
            _, a = self._clamp(cmds, a, target)
            acts[:, step] = a
            x[:, : lay.dim] = o
            x[:, lay.dim :] = a
            delta, _ = self._pair(x)
            o = o + delta
            o[:, lay.command] = cmds
        return cmds, acts

    def _policy_noise(self, rng, count):
        H, k = self.config.horizon, self.k
        m = max(count - 1, 0)
        return rng.standard_normal((m, 3)), rng.standard_normal((m, H, k))

    def sample_policy_trajs(self, obs, target, count, rng) -> tuple[np.ndarray, np.ndarray]:
        """(commands, actions) of ``count`` policy candidates; row 0 is the noise-free rollout."""
        H, k = self.config.horizon, self.k
        target = np.asarray(target, dtype=float)
        if count == 0:
            return np.zeros((0, 3)), np.zeros((0, H, k))
        cmd_noise, act_noise = self._policy_noise(rng, count)
        det = self.policy_rollout(obs, target)
        cmds, acts = self._jittered_policy_rollouts(obs, target, cmd_noise, act_noise)
        return np.concatenate([target[None], cmds]), np.concatenate([det[None], acts])

    def sample_gaussian_trajs(self, dist: GaussianPlanDistribution, count, target, rng) -> tuple[np.ndarray, np.ndarray]:
        H, k = self.config.horizon, self.k
        eps = rng.standard_normal((count, dist.mean.size))
        x = dist.mean + dist.std * eps
        return self._clamp(x[:, :3], x[:, 3:].reshape(count, H, k), np.asarray(target, dtype=float))

    # -- main loop ---------------------------------------------------------------

    def initial_distribution(self, obs, target, det_actions=None) -> GaussianPlanDistribution:
        cfg = self.config
        acts = self.policy_rollout(obs, target) if det_actions is None else det_actions
        mean = np.concatenate([np.asarray(target, dtype=float), acts.ravel()])
        std = np.concatenate([np.full(3, cfg.sigma_init_command), np.full(acts.size, cfg.sigma_init_action)])
        return GaussianPlanDistribution(mean, np.maximum(std, cfg.sigma_min))

    def shift(self, obs, dist: GaussianPlanDistribution) -> GaussianPlanDistribution:
        """Receding-horizon warm start: drop the first action, append pi(o_H) under the mean plan."""
        k = self.k
        cmd = dist.command()
        acts = dist.actions(k)
        o = self.seed_obs(obs, cmd)
        for a in acts:
            o = dream_step(self.bundle, o, a)
        tail = np.clip(dream_policy(self.bundle, o), -self.config.action_bound, self.config.action_bound)
        mean = np.concatenate([cmd, acts[1:].ravel(), tail])
        std_acts = dist.std[3:].reshape(-1, k)
        std = np.concatenate([dist.std[:3], std_acts[1:].ravel(), std_acts[-1]])
        return GaussianPlanDistribution(mean, np.maximum(std, self.config.sigma_min))

    def plan(self, obs, target, warm: GaussianPlanDistribution | None = None, seed: int = 0,
             record: bool = False) -> PlanResult:
        cfg = self.config
        N, m_pi = cfg.iterations, cfg.num_policy_samples
        target = np.asarray(target, dtype=float)
        obs = np.asarray(obs, dtype=float)
        rngs = [np.random.default_rng(np.random.SeedSequence([seed, i])) for i in range(N)]

        # policy candidates do not depend on the plan distribution: roll all iterations out in one batch
        det = self.policy_rollout(obs, target)
        noise = [self._policy_noise(rng, m_pi) for rng in rngs]
        if m_pi > 1:
            pol_cmds, pol_acts = self._jittered_policy_rollouts(
                obs, target, np.concatenate([c for c, _ in noise]), np.concatenate([a for _, a in noise]))
        per = max(m_pi - 1, 0)

        dist = self.initial_distribution(obs, target, det) if warm is None else warm.floored(cfg.sigma_min)
        best: CandidateSet | None = None
        best_feasible_ret = -np.inf
        best_returns, feasible_fraction, recorded = [], [], []
        any_feasible = False
        scored = 0
        for i, rng in enumerate(rngs):
            if m_pi:
                pc = np.concatenate([target[None], pol_cmds[i * per:(i + 1) * per]]) if per else target[None]
                pa = np.concatenate([det[None], pol_acts[i * per:(i + 1) * per]]) if per else det[None]
            else:
                pc, pa = np.zeros((0, 3)), np.zeros((0, cfg.horizon, self.k))
            gc, ga = self.sample_gaussian_trajs(dist, cfg.num_samples, target, rng)
            pool = self.score_batch(obs, np.concatenate([pc, gc]), np.concatenate([pa, ga]), target,
                                    keep_observations=record)
            pool.source[: len(pc)] = SOURCES.index("policy")
            scored += len(pool)
            feasible_fraction.append(float(pool.feasible.mean()))
            any_feasible |= bool(pool.feasible.any())
            if best is not None:
                carry = best.take(slice(0, 1))
                carry.source[:] = SOURCES.index("elite-carryover")
                pool = CandidateSet.concat([pool, carry])
            if record:
                recorded.append(pool)
            dist, _ = elite_update(pool, cfg, dist)
            top = selection_order(pool.returns, pool.violation)[0]
            best = pool.take(slice(top, top + 1))
            if best.feasible[0]:
                best_feasible_ret = max(best_feasible_ret, float(best.returns[0]))
            best_returns.append(best_feasible_ret)

        if cfg.extraction == "mean":
            cmd, acts, source = dist.command().copy(), dist.actions(self.k).copy(), "mean"
        else:
            rng = np.random.default_rng(np.random.SeedSequence([seed, N]))
            cmd, acts = self.sample_gaussian_trajs(dist, 1, target, rng)
            cmd, acts, source = cmd[0], acts[0], "sample"
        cmd, acts = self._clamp(cmd[None], acts[None], target)
        chosen = self.score_batch(obs, cmd, acts, target)
        if not chosen.feasible[0]:
            if any_feasible or best.violation[0] < chosen.violation[0]:
                chosen = best
            source = "best-feasible" if any_feasible else "min-violation"
        chosen_item = chosen.item(0)
        best_item = self.score_batch(obs, best.commands, best.actions, target).item(0)
        best_item.ret, best_item.constraint = float(best.returns[0]), best.constraint[0].copy()
        best_item.feasible, best_item.source = bool(best.feasible[0]), SOURCES[int(best.source[0])]
        return PlanResult(
            command=chosen_item.command,
            action=chosen_item.actions[0].copy(),
            actions=chosen_item.actions,
            feasible=chosen_item.feasible,
            infeasible=not chosen_item.feasible,
            source=source,
            ret=chosen_item.ret,
            constraint=chosen_item.constraint,
            best_returns=best_returns,
            feasible_fraction=feasible_fraction,
            best_trajectory=best_item.observations,
            best_candidate=best_item,
            distribution=dist,
            warm=self.shift(obs, dist),
            any_feasible=any_feasible,
            num_scored=scored,
            candidates=recorded if record else None,
        )


def snap_to_grid(values: np.ndarray, grid) -> np.ndarray:
    grid = np.asarray(grid, dtype=float)
    idx = np.abs(np.asarray(values)[..., None] - grid).argmin(axis=-1)
    return grid[idx]


def plan(bundle, obs, target, warm=None, config: PlannerConfig | None = None,
         constraints: ConstraintSpec | None = None, seed: int = 0) -> PlanResult:
    return Planner(bundle, config, constraints).plan(obs, target, warm, seed)


def score_trajectory(bundle, obs, cmd, actions, config: PlannerConfig | None = None,
                     constraints: ConstraintSpec | None = None, target=None) -> CandidateTrajectory:
    cfg = config or PlannerConfig(horizon=len(actions))
    if cfg.horizon != len(actions):
        cfg = PlannerConfig(**{**cfg.to_dict(), "horizon": len(actions)})
    return Planner(bundle, cfg, constraints).score_trajectory(obs, cmd, actions, target)
