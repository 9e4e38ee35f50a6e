"""Single-phase training: PPO on the expert pair interleaved with supervised internal-model updates.

Each iteration runs, in this fixed order:

1. collect ``rollout_length`` steps on every env lane with the expert actor,
   whose input is built from the bundle produced by the previous iteration;
2. one PPO update of the expert actor and privileged critic;
3. one supervised update of the internal model (dynamics, reward, velocity
   estimator, behaviour-cloned policy, distilled value, encoder).
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .env import PRIVILEGED_DIM, EnvConfig, SurrogateEnv, sample_command
from .internal_model import (
    DreamerBundle,
    actor_input,
    actor_input_dim,
    fresh_window,
    make_bundle,
    make_velocity_estimator,
    push_window,
)
from .tensornet import (
    AdamState,
    MlpParams,
    VectorAdam,
    adam_init,
    adam_step,
    clip_by_global_norm,
    init_mlp,
    mlp_backward,
    mlp_forward,
    mse,
    mse_grad,
)

log = logging.getLogger(__name__)

TRAIN_VARIANTS = ("nlm", "plm", "flm", "none")
LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class PpoConfig:
    clip: float = 0.2
    gae_lambda: float = 0.95
    gamma: float = 0.99
    lr: float = 1e-3
    epochs: int = 5
    num_minibatches: int = 4
    entropy_coef: float = 0.0
    value_coef: float = 1.0
    rollout_length: int = 24
    num_envs: int = 16
    init_log_std: float = -1.0
    max_grad_norm: float = 1.0
    lr_schedule: str = "adaptive"  # "adaptive" (KL-targeted, starting at lr) or "fixed"
    desired_kl: float = 0.01

    def __post_init__(self):
        if self.lr_schedule not in ("adaptive", "fixed"):
            raise ValueError("lr_schedule must be 'adaptive' or 'fixed'")
        if not 0.0 < self.clip < 1.0:
            raise ValueError("clip must lie in (0, 1)")
        if not (0.0 < self.gamma <= 1.0 and 0.0 <= self.gae_lambda <= 1.0):
            raise ValueError("gamma must lie in (0, 1] and lambda in [0, 1]")


@dataclass
class TrainConfig:
    variant: str = "nlm"
    horizon: int = 1
    iterations: int = 300
    seed: int = 0
    hidden: tuple = (64, 64)
    activation: str = "tanh"
    latent_dim: int = 16
    history: int | None = None
    supervised_epochs: int = 2
    supervised_minibatch: int = 128
    command_resample_steps: int = 100
    push_prob: float = 0.005
    push_scale: float = 0.5
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.variant not in TRAIN_VARIANTS:
            raise ValueError(f"variant must be one of {TRAIN_VARIANTS}")
        self.hidden = tuple(self.hidden)


@dataclass
class ExpertPair:
    actor: MlpParams  # actor_input -> action mean
    log_std: np.ndarray
    critic: MlpParams  # [obs, privileged obs] -> value
    actor_opt: AdamState | None = None
    log_std_opt: VectorAdam | None = None
    critic_opt: AdamState | None = None

    def mean_action(self, actor_in: np.ndarray) -> np.ndarray:
        return mlp_forward(self.actor, actor_in)

    def value(self, critic_in: np.ndarray) -> np.ndarray:
        return mlp_forward(self.critic, critic_in)[..., 0]


def make_expert_pair(actor_dim: int, obs_dim: int, act_dim: int, rng, cfg: TrainConfig, ppo: PpoConfig) -> ExpertPair:
    hidden = list(cfg.hidden)
    actor = init_mlp([actor_dim] + hidden + [act_dim], rng, cfg.activation)
    # small output layer keeps the initial policy close to the nominal stance
    actor.layers[-1].weight *= 0.1
    actor.layers[-1].bias[:] = 0.0
    critic = init_mlp([obs_dim + PRIVILEGED_DIM] + hidden + [1], rng, cfg.activation)
    log_std = np.full(act_dim, ppo.init_log_std)
    return ExpertPair(actor, log_std, critic, adam_init(actor, ppo.lr), VectorAdam.like(log_std, ppo.lr),
                      adam_init(critic, ppo.lr))


# -- losses --------------------------------------------------------------------


def gae(rewards, values, dones, gamma: float, lam: float):
    """Generalized advantage estimation along axis 0.

    ``values`` carries one extra bootstrap entry: shape ``(T + 1, ...)`` for
    ``rewards``/``dones`` of shape ``(T, ...)``. Returns (advantages, returns).
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=float)
    T = rewards.shape[0]
    if values.shape[0] != T + 1 or dones.shape != rewards.shape or values.shape[1:] != rewards.shape[1:]:
        raise ValueError("gae expects rewards/dones of length T and values of length T + 1")
    adv = np.zeros_like(rewards)
    last = np.zeros(rewards.shape[1:])
    for t in range(T - 1, -1, -1):
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * values[t + 1] * live - values[t]
        last = delta + gamma * lam * live * last
        adv[t] = last
    return adv, adv + values[:-1]


def gaussian_log_prob(actions, mean, log_std):
    z = (actions - mean) * np.exp(-log_std)
    return -0.5 * np.sum(z * z, axis=-1) - np.sum(log_std) - 0.5 * mean.shape[-1] * LOG_2PI


def gaussian_entropy(log_std) -> float:
    return float(np.sum(log_std) + 0.5 * len(log_std) * (1.0 + LOG_2PI))


def clipped_surrogate(logp_new, logp_old, advantages, clip: float):
    """Loss ``-mean(min(rho A, clip(rho) A))`` and its gradient w.r.t. ``logp_new``."""
    ratio = np.exp(logp_new - logp_old)
    clipped = np.clip(ratio, 1.0 - clip, 1.0 + clip)
    loss = -np.mean(np.minimum(ratio * advantages, clipped * advantages))
    # the clipped branch wins (and carries no gradient) only outside the trust region
    frozen = ((advantages > 0) & (ratio > 1.0 + clip)) | ((advantages < 0) & (ratio < 1.0 - clip))
    grad = np.where(frozen, 0.0, -ratio * advantages) / len(ratio)
    return float(loss), grad


def clipped_value_loss(values, old_values, returns, clip: float):
    """``mean(max((v - R)^2, (v_clip - R)^2))`` and its gradient w.r.t. ``values``."""
    v_clip = old_values + np.clip(values - old_values, -clip, clip)
    a = (values - returns) ** 2
    b = (v_clip - returns) ** 2
    n = len(values)
    inside = np.abs(values - old_values) <= clip
    grad = np.where(a >= b, 2.0 * (values - returns), np.where(inside, 2.0 * (v_clip - returns), 0.0)) / n
    return float(np.mean(np.maximum(a, b))), grad


# -- rollout buffer ------------------------------------------------------------


@dataclass
class RolloutBuffer:
    obs: np.ndarray  # (T, B, p)
    window: np.ndarray  # (T, B, M, p)
    privileged: np.ndarray  # (T, B, 8)
    actor_in: np.ndarray  # (T, B, d)
    actions: np.ndarray  # sampled, before clipping to the action bound
    executed: np.ndarray  # clipped actions sent to the environment
    log_probs: np.ndarray
    rewards: np.ndarray  # environment reward plus the timeout bootstrap
    env_rewards: np.ndarray  # environment reward only
    values: np.ndarray  # (T + 1, B) critic values incl. bootstrap
    dones: np.ndarray
    timeouts: np.ndarray
    twist: np.ndarray  # true base twist at observation time
    next_obs: np.ndarray  # observation after the step, before any reset
    episode_returns: list = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.obs.shape[0] * self.obs.shape[1]

    def flat(self, name: str) -> np.ndarray:
        arr = getattr(self, name)
        if name == "values":
            arr = arr[:-1]
        return arr.reshape((-1,) + arr.shape[2:])


class Collector:
    """Synchronous, single-threaded collection over ``num_envs`` lanes."""

    def __init__(self, env_config: EnvConfig, cfg: TrainConfig, ppo: PpoConfig, seed_seq: np.random.SeedSequence,
                 history: int):
        self.env_config = env_config
        self.cfg = cfg
        self.ppo = ppo
        env_seeds, own = seed_seq.spawn(2)
        self.envs = [SurrogateEnv(env_config, s) for s in env_seeds.spawn(ppo.num_envs)]
        self.rng = np.random.default_rng(own)
        self.history = history
        self.obs = np.stack([e.reset() for e in self.envs])
        self.window = fresh_window(self.obs, history)
        self.ep_return = np.zeros(ppo.num_envs)
        self.since_resample = np.zeros(ppo.num_envs, dtype=int)

    def policy_input(self, bundle, v_phi, obs, window):
        if bundle is None:
            return obs
        return actor_input(bundle, obs, window, v_phi)

    def collect(self, pair: ExpertPair, bundle: DreamerBundle | None, v_phi: MlpParams | None) -> RolloutBuffer:
        T, B = self.ppo.rollout_length, self.ppo.num_envs
        cfg = self.env_config
        rec = {k: [] for k in ("obs", "window", "privileged", "actor_in", "actions", "executed", "log_probs",
                               "rewards", "env_rewards", "values", "dones", "timeouts", "twist", "next_obs")}
        finished = []
        std = np.exp(pair.log_std)
        for _ in range(T):
            priv = np.stack([e.privileged() for e in self.envs])
            ai = self.policy_input(bundle, v_phi, self.obs, self.window)
            mean = pair.mean_action(ai)
            act = mean + std * self.rng.standard_normal(mean.shape)
            logp = gaussian_log_prob(act, mean, pair.log_std)
            value = pair.value(np.concatenate([self.obs, priv], axis=1))
            executed = np.clip(act, -cfg.action_bound, cfg.action_bound)
            pushes = self.rng.random(B) < self.cfg.push_prob
            push_dirs = self.rng.normal(size=(B, 3)) * self.cfg.push_scale
            rewards = np.empty(B)
            dones = np.zeros(B, dtype=bool)
            timeouts = np.zeros(B, dtype=bool)
            next_obs = np.empty_like(self.obs)
            next_priv = np.zeros((B, PRIVILEGED_DIM))
            new_obs = np.empty_like(self.obs)
            for i, env in enumerate(self.envs):
                if pushes[i]:
                    env.push(push_dirs[i])
                o2, r, _, done = env.step(executed[i])
                rewards[i] = r
                next_obs[i] = o2
                next_priv[i] = env.privileged()
                self.ep_return[i] += r
                self.since_resample[i] += 1
                if done:
                    dones[i] = True
                    timeouts[i] = env.state.step >= cfg.episode_cap and np.max(np.abs(env.state.orient)) <= cfg.fall_threshold
                    finished.append(float(self.ep_return[i]))
                    self.ep_return[i] = 0.0
                    self.since_resample[i] = 0
                    o2 = env.reset()
                elif self.cfg.command_resample_steps and self.since_resample[i] >= self.cfg.command_resample_steps:
                    env.cmd = sample_command(cfg, env.rng)
                    o2 = o2.copy()
                    o2[cfg.layout.command] = env.cmd
                    self.since_resample[i] = 0
                new_obs[i] = o2
            rec["obs"].append(self.obs)
            rec["window"].append(self.window)
            rec["privileged"].append(priv)
            rec["actor_in"].append(ai)
            rec["actions"].append(act)
            rec["executed"].append(executed)
            rec["log_probs"].append(logp)
            rec["values"].append(value)
            rec["dones"].append(dones)
            rec["timeouts"].append(timeouts)
            rec["twist"].append(priv[:, :3])
            rec["next_obs"].append(next_obs)
            # time-limit truncation bootstraps from the critic at the final observation
            rec["env_rewards"].append(rewards)
            if timeouts.any():
                boot = pair.value(np.concatenate([next_obs, next_priv], axis=1))
                rewards = rewards + self.ppo.gamma * boot * timeouts
            rec["rewards"].append(rewards)
            self.window = np.where(dones[:, None, None], fresh_window(new_obs, self.history), push_window(self.window, new_obs))
            self.obs = new_obs
        priv = np.stack([e.privileged() for e in self.envs])
        rec["values"].append(pair.value(np.concatenate([self.obs, priv], axis=1)))
        buf = RolloutBuffer(**{k: np.stack(v) for k, v in rec.items()}, episode_returns=finished)
        return buf


# -- updates -------------------------------------------------------------------


def adaptive_lr(lr: float, kl: float, desired_kl: float, lo: float = 1e-5, hi: float = 1e-2) -> float:
    """Shrink the step when the policy moved too far from the behaviour policy, grow it when it barely moved."""
    if kl > 2.0 * desired_kl:
        return max(lo, lr / 1.5)
    if 0.0 < kl < 0.5 * desired_kl:
        return min(hi, lr * 1.5)
    return lr


def ppo_update(pair: ExpertPair, buffer: RolloutBuffer, config: PpoConfig, rng: np.random.Generator):
    """Clipped-surrogate PPO with clipped value loss. Returns (new pair, stats)."""
    adv, ret = gae(buffer.rewards, buffer.values, buffer.dones, config.gamma, config.gae_lambda)
    adv = adv.reshape(-1)
    ret = ret.reshape(-1)
    adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    ai = buffer.flat("actor_in")
    ci = np.concatenate([buffer.flat("obs"), buffer.flat("privileged")], axis=1)
    acts = buffer.flat("actions")
    logp_old = buffer.flat("log_probs")
    v_old = buffer.flat("values")
    n = len(adv)
    mb = max(1, n // config.num_minibatches)

    actor, critic, log_std = pair.actor, pair.critic, pair.log_std.copy()
    a_opt, c_opt = pair.actor_opt, pair.critic_opt
    s_opt = VectorAdam(pair.log_std_opt.m.copy(), pair.log_std_opt.v.copy(), pair.log_std_opt.step,
                       pair.log_std_opt.lr)
    stats = {"policy_loss": [], "value_loss": [], "approx_kl": [], "clip_frac": []}
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, mb):
            idx = order[start : start + mb]
            mean = mlp_forward(actor, ai[idx])
            logp = gaussian_log_prob(acts[idx], mean, log_std)
            if config.lr_schedule == "adaptive":
                lr = adaptive_lr(a_opt.lr, float(np.mean(logp_old[idx] - logp)), config.desired_kl)
                a_opt, c_opt = replace(a_opt, lr=lr), replace(c_opt, lr=lr)
                s_opt.lr = lr
            pl, dlogp = clipped_surrogate(logp, logp_old[idx], adv[idx], config.clip)
            inv_var = np.exp(-2.0 * log_std)
            diff = acts[idx] - mean
            dmean = dlogp[:, None] * diff * inv_var
            dlog_std = np.sum(dlogp[:, None] * (diff * diff * inv_var - 1.0), axis=0) - config.entropy_coef
            v = mlp_forward(critic, ci[idx])[:, 0]
            vl, dv = clipped_value_loss(v, v_old[idx], ret[idx], config.clip)
            loss = pl + config.value_coef * vl - config.entropy_coef * gaussian_entropy(log_std)
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite PPO loss (policy {pl}, value {vl})")
            g_actor, _ = mlp_backward(actor, ai[idx], dmean)
            g_critic, _ = mlp_backward(critic, ci[idx], config.value_coef * dv[:, None])
            norm = math.sqrt(g_actor.global_norm() ** 2 + g_critic.global_norm() ** 2 + float(np.sum(dlog_std**2)))
            if config.max_grad_norm and norm > config.max_grad_norm:
                scale = config.max_grad_norm / norm
                g_actor, g_critic, dlog_std = g_actor.scaled(scale), g_critic.scaled(scale), dlog_std * scale
            a_opt, actor = adam_step(a_opt, actor, g_actor)
            c_opt, critic = adam_step(c_opt, critic, g_critic)
            log_std = s_opt.update(log_std, dlog_std)
            ratio = np.exp(logp - logp_old[idx])
            stats["policy_loss"].append(pl)
            stats["value_loss"].append(vl)
            stats["approx_kl"].append(float(np.mean(logp_old[idx] - logp)))
            stats["clip_frac"].append(float(np.mean(np.abs(ratio - 1.0) > config.clip)))
    out = {k: float(np.mean(v)) for k, v in stats.items()}
    out["entropy"] = gaussian_entropy(log_std)
    out["lr"] = a_opt.lr
    return ExpertPair(actor, log_std, critic, a_opt, s_opt, c_opt), out


@dataclass
class SupervisedOptimizers:
    dynamics: AdamState
    policy: AdamState
    reward: AdamState
    value: AdamState
    v_phi: AdamState
    encoder: AdamState | None = None

    @classmethod
    def create(cls, bundle: DreamerBundle, v_phi: MlpParams, lr: float) -> "SupervisedOptimizers":
        return cls(
            adam_init(bundle.dynamics, lr), adam_init(bundle.policy, lr), adam_init(bundle.reward, lr),
            adam_init(bundle.value, lr), adam_init(v_phi, lr),
            None if bundle.encoder is None else adam_init(bundle.encoder, lr),
        )


@dataclass
class SupervisedData:
    """Flat per-sample training targets for the internal model."""

    obs: np.ndarray
    window: np.ndarray  # (n, M * p)
    actions: np.ndarray
    delta: np.ndarray  # next_obs - obs with the command slice zeroed
    reward: np.ndarray
    twist: np.ndarray
    expert_action: np.ndarray
    expert_value: np.ndarray

    def __len__(self) -> int:
        return len(self.obs)

    @classmethod
    def from_buffer(cls, buffer: RolloutBuffer, pair: ExpertPair, bundle: DreamerBundle) -> "SupervisedData":
        obs = buffer.flat("obs")
        nxt = buffer.flat("next_obs")
        delta = nxt - obs
        delta[:, bundle.layout.command] = 0.0
        critic_in = np.concatenate([obs, buffer.flat("privileged")], axis=1)
        w = buffer.flat("window")
        return cls(
            obs=obs,
            window=w.reshape(len(w), -1),
            actions=buffer.flat("executed"),
            delta=delta,
            reward=buffer.flat("env_rewards"),
            twist=buffer.flat("twist"),
            expert_action=pair.mean_action(buffer.flat("actor_in")),
            expert_value=pair.value(critic_in),
        )

    def take(self, idx) -> "SupervisedData":
        return SupervisedData(*(getattr(self, f)[idx] for f in
                                ("obs", "window", "actions", "delta", "reward", "twist", "expert_action", "expert_value")))


def _ctx(bundle: DreamerBundle, v_phi: MlpParams, window_flat: np.ndarray):
    if bundle.variant == "nlm":
        return None
    z = mlp_forward(bundle.encoder, window_flat)
    v = mlp_forward(v_phi, window_flat)
    return np.concatenate([z, v], axis=1)


def _with(*parts):
    return np.concatenate([p for p in parts if p is not None], axis=1)


def supervised_losses(bundle: DreamerBundle, v_phi: MlpParams, data: SupervisedData) -> dict[str, float]:
    ctx = _ctx(bundle, v_phi, data.window)
    return {
        "dynamics": mse(mlp_forward(bundle.dynamics, _with(data.obs, ctx, data.actions)), data.delta),
        "reward": mse(mlp_forward(bundle.reward, _with(data.obs, ctx, data.actions))[:, 0], data.reward),
        "velocity": mse(mlp_forward(v_phi, data.window), data.twist),
        "bc": mse(mlp_forward(bundle.policy, _with(data.obs, ctx)), data.expert_action),
        "value_distill": mse(mlp_forward(bundle.value, _with(data.obs, ctx))[:, 0], data.expert_value),
    }


def supervised_step(bundle: DreamerBundle, v_phi: MlpParams, opts: SupervisedOptimizers, batch: SupervisedData):
    """One minibatch Adam step on every internal-model component; returns (bundle, v_phi, opts, losses)."""
    ctx = _ctx(bundle, v_phi, batch.window)
    losses = {}
    nets = {}

    dyn_in = _with(batch.obs, ctx, batch.actions)
    pred = mlp_forward(bundle.dynamics, dyn_in)
    losses["dynamics"] = mse(pred, batch.delta)
    g, g_in = mlp_backward(bundle.dynamics, dyn_in, mse_grad(pred, batch.delta))
    opts.dynamics, nets["dynamics"] = adam_step(opts.dynamics, bundle.dynamics, g)
    if bundle.encoder is not None:
        # the encoder learns through the one-step prediction loss
        p, q = bundle.obs_dim, bundle.latent_dim
        g_enc, _ = mlp_backward(bundle.encoder, batch.window, g_in[:, p : p + q])
        opts.encoder, nets["encoder"] = adam_step(opts.encoder, bundle.encoder, g_enc)

    rew_in = dyn_in
    pred = mlp_forward(bundle.reward, rew_in)[:, 0]
    losses["reward"] = mse(pred, batch.reward)
    g, _ = mlp_backward(bundle.reward, rew_in, mse_grad(pred, batch.reward)[:, None])
    opts.reward, nets["reward"] = adam_step(opts.reward, bundle.reward, g)

    pol_in = _with(batch.obs, ctx)
    pred = mlp_forward(bundle.policy, pol_in)
    losses["bc"] = mse(pred, batch.expert_action)
    g, _ = mlp_backward(bundle.policy, pol_in, mse_grad(pred, batch.expert_action))
    opts.policy, nets["policy"] = adam_step(opts.policy, bundle.policy, g)

    pred = mlp_forward(bundle.value, pol_in)[:, 0]
    losses["value_distill"] = mse(pred, batch.expert_value)
    g, _ = mlp_backward(bundle.value, pol_in, mse_grad(pred, batch.expert_value)[:, None])
    opts.value, nets["value"] = adam_step(opts.value, bundle.value, g)

    pred = mlp_forward(v_phi, batch.window)
    losses["velocity"] = mse(pred, batch.twist)
    g, _ = mlp_backward(v_phi, batch.window, mse_grad(pred, batch.twist))
    opts.v_phi, v_phi = adam_step(opts.v_phi, v_phi, g)

    for name, val in losses.items():
        if not np.isfinite(val):
            raise FloatingPointError(f"non-finite {name} loss")
    return bundle.replace_nets(**nets), v_phi, opts, losses


def supervised_update(bundle, v_phi, opts, data: SupervisedData, rng, epochs: int = 1, minibatch: int = 128):
    """Minibatch epochs over ``data``; returns (bundle, v_phi, opts, mean losses of the last epoch)."""
    n = len(data)
    last = {}
    for _ in range(epochs):
        order = rng.permutation(n)
        acc = []
        for start in range(0, n, minibatch):
            bundle, v_phi, opts, losses = supervised_step(bundle, v_phi, opts, data.take(order[start : start + minibatch]))
            acc.append(losses)
        last = {k: float(np.mean([a[k] for a in acc])) for k in acc[0]}
    return bundle, v_phi, opts, last


# -- training loop ----------------------------------------------------------------


@dataclass
class TrainState:
    env_config: EnvConfig
    train_config: TrainConfig
    ppo_config: PpoConfig
    pair: ExpertPair
    bundle: DreamerBundle | None
    v_phi: MlpParams | None
    iteration: int = 0
    metrics: list = field(default_factory=list)

    def to_checkpoint(self) -> ckpt_io.Checkpoint:
        nets = {"actor": self.pair.actor, "critic": self.pair.critic}
        if self.bundle is not None:
            nets.update(self.bundle.nets())
            nets["v_phi"] = self.v_phi
        meta = {
            "kind": "train",
            "variant": self.train_config.variant,
            "iteration": self.iteration,
            "bundle": None if self.bundle is None else self.bundle.meta(),
            "env_config": self.env_config.to_dict(),
            "train_config": asdict(self.train_config),
            "ppo_config": asdict(self.ppo_config),
        }
        return ckpt_io.Checkpoint(nets, {"log_std": self.pair.log_std}, meta)


def init_train_state(env_config: EnvConfig, cfg: TrainConfig, ppo: PpoConfig):
    root = np.random.SeedSequence(cfg.seed)
    s_bundle, s_vphi, s_pair, s_env, s_update = root.spawn(5)
    lay = env_config.layout
    bundle = v_phi = None
    history = 1
    if cfg.variant != "none":
        bundle = make_bundle(cfg.variant, lay, cfg.horizon, np.random.default_rng(s_bundle), cfg.hidden,
                             cfg.latent_dim, cfg.history, cfg.activation)
        history = bundle.history
        v_phi = make_velocity_estimator(lay, history, np.random.default_rng(s_vphi), cfg.hidden, cfg.activation)
    a_dim = actor_input_dim(cfg.variant, lay, cfg.horizon, cfg.latent_dim)
    pair = make_expert_pair(a_dim, lay.dim, lay.k, np.random.default_rng(s_pair), cfg, ppo)
    state = TrainState(env_config, cfg, ppo, pair, bundle, v_phi)
    collector = Collector(env_config, cfg, ppo, s_env, history)
    return state, collector, np.random.default_rng(s_update)


def train(
    env_config: EnvConfig,
    ppo: PpoConfig,
    cfg: TrainConfig,
    out_dir=None,
    progress=None,
) -> TrainState:
    """Run the co-dependent training loop. Writes metrics/checkpoints when ``out_dir`` is given."""
    state, collector, rng = init_train_state(env_config, cfg, ppo)
    opts = None if state.bundle is None else SupervisedOptimizers.create(state.bundle, state.v_phi, ppo.lr)
    out = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(resolved_config(env_config, ppo, cfg), indent=2, sort_keys=True))
        (out / "metrics.jsonl").write_text("")
    recent_returns: list[float] = []
    for it in range(cfg.iterations):
        buffer = collector.collect(state.pair, state.bundle, state.v_phi)
        state.pair, ppo_stats = ppo_update(state.pair, buffer, ppo, rng)
        sup = {}
        if state.bundle is not None:
            data = SupervisedData.from_buffer(buffer, state.pair, state.bundle)
            state.bundle, state.v_phi, opts, sup = supervised_update(
                state.bundle, state.v_phi, opts, data, rng, cfg.supervised_epochs, cfg.supervised_minibatch)
        recent_returns = (recent_returns + buffer.episode_returns)[-2 * ppo.num_envs:]
        state.iteration = it + 1
        row = {
            "schema": "metrics/1",
            "iteration": it + 1,
            "mean_step_reward": float(np.mean(buffer.env_rewards)),
            "mean_episode_return": float(np.mean(recent_returns)) if recent_returns else None,
            "episodes_finished": len(buffer.episode_returns),
            **{f"ppo_{k}": v for k, v in ppo_stats.items()},
            **{f"loss_{k}": v for k, v in sup.items()},
        }
        state.metrics.append(row)
        if out is not None:
            with open(out / "metrics.jsonl", "a") as fh:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
            if cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
                ckpt_io.save(out / f"checkpoint_{it + 1:05d}.bin", state.to_checkpoint(), resolved_config(env_config, ppo, cfg))
        if progress is not None:
            progress(row)
        log.debug("iteration %d: %s", it + 1, row)
    if out is not None:
        ckpt_io.save(out / "checkpoint.bin", state.to_checkpoint(), resolved_config(env_config, ppo, cfg))
    return state


def resolved_config(env_config: EnvConfig, ppo: PpoConfig, cfg: TrainConfig) -> dict:
    return {"schema": "config/1", "env": env_config.to_dict(), "ppo": asdict(ppo), "train": asdict(cfg)}


def load_train_state(path) -> TrainState:
    from .internal_model import bundle_from_checkpoint

    ck = ckpt_io.load(path)
    m = ck.meta
    env_config = EnvConfig.from_dict(m["env_config"])
    cfg = TrainConfig(**m["train_config"])
    ppo = PpoConfig(**m["ppo_config"])
    bundle = bundle_from_checkpoint(ck) if m.get("bundle") else None
    pair = ExpertPair(ck.nets["actor"], ck.arrays["log_std"], ck.nets["critic"])
    return TrainState(env_config, cfg, ppo, pair, bundle, ck.nets.get("v_phi"), m["iteration"])
