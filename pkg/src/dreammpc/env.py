"""Planar quadruped surrogate: PD-tracked joints driving a damped base twist.

The plant is deliberately simple so every transition has a closed form that
tests can check exactly. One call to :func:`step` performs a semi-implicit
Euler update (all accelerations from the current state, velocities first,
positions from the updated velocities)::

    qdd      = kp * (a + q_nominal - q) - kd * qd
    twist_d  = B @ (q - q_nominal) + D @ qd - base_damping * twist
    orient_dd = E @ qd - k_o * orient - d_o * orient_rate

    qd'          = qd + dt * qdd
    q'           = q + dt * qd'
    twist'       = twist + dt * twist_d
    orient_rate' = orient_rate + dt * orient_dd
    orient'      = orient + dt * orient_rate'

``orient`` is (roll, pitch). The reward is evaluated on the post-step state.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

NOISE_LEVELS = {"none": 0.0, "low": 0.005, "medium": 0.01, "high": 0.05}
# observation noise per channel, as multiples of the joint-angle stddev
NOISE_CHANNEL_SCALE = {"joint_pos": 1.0, "joint_vel": 10.0, "gravity": 5.0, "command": 0.0, "prev_action": 0.0}
PRIVILEGED_DIM = 8


@dataclass(frozen=True)
class ObsLayout:
    """Index map of the flat observation vector for ``k`` joints (length ``3k + 6``)."""

    k: int

    @property
    def dim(self) -> int:
        return 3 * self.k + 6

    @property
    def joint_pos(self) -> slice:
        return slice(0, self.k)

    @property
    def joint_vel(self) -> slice:
        return slice(self.k, 2 * self.k)

    @property
    def gravity(self) -> slice:
        return slice(2 * self.k, 2 * self.k + 3)

    @property
    def command(self) -> slice:
        return slice(2 * self.k + 3, 2 * self.k + 6)

    @property
    def prev_action(self) -> slice:
        return slice(2 * self.k + 6, 3 * self.k + 6)

    def as_dict(self) -> dict[str, list[int]]:
        names = ("joint_pos", "joint_vel", "gravity", "command", "prev_action")
        return {n: [getattr(self, n).start, getattr(self, n).stop] for n in names}


@dataclass
class RewardWeights:
    lin_vel: float = 1.5
    ang_vel: float = 0.75
    orientation: float = 1.0
    action_rate: float = 0.01
    joint_vel: float = 0.001
    barrier: float = 0.02


def coupling_matrices(k: int, seed: int, scale: float = 10.0):
    """Seeded (B, D, E). B has all singular values equal to ``scale``."""
    rng = np.random.default_rng(seed)
    u, _, vt = np.linalg.svd(rng.normal(size=(3, k)), full_matrices=False)
    B = scale * (u @ vt)
    D = 0.05 * rng.normal(size=(3, k))
    E = 0.2 * rng.normal(size=(2, k))
    return B, D, E


@dataclass
class EnvConfig:
    num_joints: int = 4
    dt: float = 0.02
    q_nominal: np.ndarray | None = None
    q_max: np.ndarray | None = None
    kp: float = 100.0
    kd: float = 20.0
    base_damping: float = 2.0
    B: np.ndarray | None = None
    D: np.ndarray | None = None
    E: np.ndarray | None = None
    coupling_seed: int = 0
    coupling_scale: float = 10.0
    orient_stiffness: float = 25.0
    orient_damping: float = 5.0
    noise_level: str = "low"
    command_low: tuple = (-1.0, -1.0, -1.0)
    command_high: tuple = (1.0, 1.0, 1.0)
    action_bound: float = 1.0
    fall_threshold: float = 0.8
    episode_cap: int = 400
    init_noise: float = 0.05
    reward_weights: RewardWeights = field(default_factory=RewardWeights)
    sigma_lin: float = 0.25
    sigma_ang: float = 0.25
    barrier_delta: float = 0.05

    def __post_init__(self):
        k = self.num_joints
        if self.q_nominal is None:
            self.q_nominal = 0.1 * np.where(np.arange(k) % 2 == 0, 1.0, -1.0)
        if self.q_max is None:
            self.q_max = np.full(k, 0.5)
        self.q_nominal = np.asarray(self.q_nominal, dtype=float)
        self.q_max = np.broadcast_to(np.asarray(self.q_max, dtype=float), (k,)).copy()
        if self.B is None or self.D is None or self.E is None:
            B, D, E = coupling_matrices(k, self.coupling_seed, self.coupling_scale)
            self.B = B if self.B is None else self.B
            self.D = D if self.D is None else self.D
            self.E = E if self.E is None else self.E
        self.B, self.D, self.E = (np.asarray(m, dtype=float) for m in (self.B, self.D, self.E))
        if isinstance(self.reward_weights, dict):
            self.reward_weights = RewardWeights(**self.reward_weights)
        self.command_low = tuple(float(x) for x in self.command_low)
        self.command_high = tuple(float(x) for x in self.command_high)
        self.validate()

    def validate(self):
        k = self.num_joints
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if (self.q_max <= 0).any():
            raise ValueError("joint limits must be positive")
        if min(self.kp, self.kd, self.base_damping, self.orient_stiffness, self.orient_damping) <= 0:
            raise ValueError("gains must be positive")
        if self.noise_level not in NOISE_LEVELS:
            raise ValueError(f"noise level must be one of {sorted(NOISE_LEVELS)}")
        shapes = {"q_nominal": (self.q_nominal, (k,)), "B": (self.B, (3, k)), "D": (self.D, (3, k)), "E": (self.E, (2, k))}
        for name, (arr, shape) in shapes.items():
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")

    @property
    def layout(self) -> ObsLayout:
        return ObsLayout(self.num_joints)

    @property
    def obs_dim(self) -> int:
        return self.layout.dim

    def noise_stddevs(self) -> np.ndarray:
        lay = self.layout
        sigma = NOISE_LEVELS[self.noise_level]
        out = np.zeros(lay.dim)
        for name, scale in NOISE_CHANNEL_SCALE.items():
            out[getattr(lay, name)] = sigma * scale
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        for key, val in d.items():
            if isinstance(val, np.ndarray):
                d[key] = val.tolist()
        d["command_low"] = list(self.command_low)
        d["command_high"] = list(self.command_high)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EnvConfig":
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "EnvConfig":
        return cls.from_dict(json.loads(text))


@dataclass
class EnvState:
    q: np.ndarray
    qd: np.ndarray
    twist: np.ndarray  # (v_x, v_y, omega_z)
    orient: np.ndarray  # (roll, pitch)
    orient_rate: np.ndarray
    prev_action: np.ndarray
    disturbance: np.ndarray
    step: int = 0

    def copy(self) -> "EnvState":
        return replace(self, **{f: getattr(self, f).copy() for f in
                                ("q", "qd", "twist", "orient", "orient_rate", "prev_action", "disturbance")})


def projected_gravity(roll: float, pitch: float) -> np.ndarray:
    return np.array([-np.sin(pitch), np.sin(roll) * np.cos(pitch), -np.cos(roll) * np.cos(pitch)])


def orientation_from_gravity(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of :func:`projected_gravity`; works on ``(..., 3)`` arrays."""
    g = np.asarray(g)
    pitch = np.arcsin(np.clip(-g[..., 0], -1.0, 1.0))
    roll = np.arctan2(g[..., 1], -g[..., 2])
    return roll, pitch


def privileged(state: EnvState) -> np.ndarray:
    return np.concatenate([state.twist, state.disturbance, state.orient_rate])


def observe(config: EnvConfig, state: EnvState, cmd, noise_rng: np.random.Generator | None = None) -> np.ndarray:
    lay = config.layout
    obs = np.empty(lay.dim)
    obs[lay.joint_pos] = state.q - config.q_nominal
    obs[lay.joint_vel] = state.qd
    obs[lay.gravity] = projected_gravity(*state.orient)
    obs[lay.command] = cmd
    obs[lay.prev_action] = state.prev_action
    if noise_rng is not None:
        obs = obs + noise_rng.normal(size=lay.dim) * config.noise_stddevs()
    return obs


def reset(
    config: EnvConfig,
    seed,
    perturbation: float | None = None,
    cmd=(0.0, 0.0, 0.0),
    noise_rng: np.random.Generator | None = None,
) -> tuple[EnvState, np.ndarray]:
    k = config.num_joints
    scale = config.init_noise if perturbation is None else perturbation
    rng = np.random.default_rng(seed)
    q = config.q_nominal + rng.uniform(-1.0, 1.0, size=k) * scale
    state = EnvState(
        q=q, qd=np.zeros(k), twist=np.zeros(3), orient=np.zeros(2), orient_rate=np.zeros(2),
        prev_action=np.zeros(k), disturbance=np.zeros(3), step=0,
    )
    return state, observe(config, state, cmd, noise_rng)


def relaxed_log_barrier(x, delta: float):
    """log(x / delta) for x >= delta, C2 quadratic continuation below."""
    x = np.asarray(x, dtype=float)
    safe = np.maximum(x, delta)
    u = (x - delta) / delta
    return np.where(x >= delta, np.log(safe / delta), u - 0.5 * u * u)


def reward(config: EnvConfig, state: EnvState, action, prev_action, cmd) -> tuple[float, dict[str, float]]:
    w = config.reward_weights
    cmd = np.asarray(cmd, dtype=float)
    action = np.asarray(action, dtype=float)
    lin_err = np.sum((state.twist[:2] - cmd[:2]) ** 2)
    ang_err = (state.twist[2] - cmd[2]) ** 2
    comps = {
        "lin_vel": w.lin_vel * np.exp(-lin_err / config.sigma_lin),
        "ang_vel": w.ang_vel * np.exp(-ang_err / config.sigma_ang),
        "orientation": -w.orientation * float(np.sum(state.orient**2)),
        "action_rate": -w.action_rate * float(np.sum((action - np.asarray(prev_action)) ** 2)),
        "joint_vel": -w.joint_vel * float(np.sum(state.qd**2)),
        "barrier": w.barrier * float(np.sum(relaxed_log_barrier(config.q_max - np.abs(state.q), config.barrier_delta))),
    }
    comps = {k: float(v) for k, v in comps.items()}
    return sum(comps.values()), comps


def integrate(config: EnvConfig, state: EnvState, action) -> EnvState:
    """Plant update only (no reward, no bookkeeping of disturbance)."""
    dt = config.dt
    dq = state.q - config.q_nominal
    qdd = config.kp * (action + config.q_nominal - state.q) - config.kd * state.qd
    twist_d = config.B @ dq + config.D @ state.qd - config.base_damping * state.twist
    orient_dd = config.E @ state.qd - config.orient_stiffness * state.orient - config.orient_damping * state.orient_rate
    qd = state.qd + dt * qdd
    q = state.q + dt * qd
    orient_rate = state.orient_rate + dt * orient_dd
    orient = state.orient + dt * orient_rate
    twist = state.twist + dt * twist_d
    return EnvState(q, qd, twist, orient, orient_rate, np.array(action, dtype=float), np.zeros(3), state.step + 1)


def step(
    config: EnvConfig,
    state: EnvState,
    action,
    cmd,
    noise_rng: np.random.Generator | None = None,
) -> tuple[EnvState, np.ndarray, float, np.ndarray, bool]:
    """Advance one control period. Returns (state', obs', reward, privileged obs, done).

    The privileged observation reports the disturbance impulse applied since
    the previous step; the returned state has it cleared.
    """
    action = np.asarray(action, dtype=float)
    if action.shape != (config.num_joints,):
        raise ValueError(f"action must have shape ({config.num_joints},)")
    if not np.isfinite(action).all():
        raise ValueError("non-finite action")
    if np.max(np.abs(action)) > config.action_bound + 1e-12:
        raise ValueError(f"action exceeds bound {config.action_bound}")
    nxt = integrate(config, state, action)
    r, _ = reward(config, nxt, action, state.prev_action, cmd)
    priv = np.concatenate([nxt.twist, state.disturbance, nxt.orient_rate])
    done = bool(np.max(np.abs(nxt.orient)) > config.fall_threshold or nxt.step >= config.episode_cap)
    return nxt, observe(config, nxt, cmd, noise_rng), r, priv, done


def apply_disturbance(state: EnvState, impulse) -> EnvState:
    impulse = np.asarray(impulse, dtype=float)
    out = state.copy()
    out.twist = state.twist + impulse
    out.disturbance = state.disturbance + impulse
    return out


def sample_command(config: EnvConfig, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(config.command_low, config.command_high)


class SurrogateEnv:
    """Stateful wrapper used for episode collection; owns its noise stream."""

    def __init__(self, config: EnvConfig, seed: int):
        self.config = config
        self.rng = np.random.default_rng(seed)
        self.state: EnvState | None = None
        self.cmd = np.zeros(3)

    def reset(self, cmd=None) -> np.ndarray:
        self.cmd = sample_command(self.config, self.rng) if cmd is None else np.asarray(cmd, dtype=float)
        self.state, obs = reset(self.config, int(self.rng.integers(2**63)), cmd=self.cmd, noise_rng=self.rng)
        return obs

    def step(self, action, cmd=None):
        if cmd is not None:
            self.cmd = np.asarray(cmd, dtype=float)
        self.state, obs, r, priv, done = step(self.config, self.state, action, self.cmd, self.rng)
        return obs, r, priv, done

    def push(self, impulse):
        self.state = apply_disturbance(self.state, impulse)

    def privileged(self) -> np.ndarray:
        return privileged(self.state)
