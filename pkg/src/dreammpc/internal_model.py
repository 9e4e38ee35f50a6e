"""Velocity estimator and Dreamer bundle with the NLM / PLM / FLM rollouts.

All rollout functions accept a single observation ``(p,)`` or a batch
``(B, p)`` (histories ``(M, p)`` or ``(B, M, p)``) and return arrays with
matching leading dimensions.

Network wiring (``ctx`` is the latent ``z`` followed by the velocity
estimate ``v``; NLM has no ctx)::

    dynamics  [o, ctx, a] -> delta o      (o' = o + delta, command slice held)
    policy    [o, ctx]    -> a
    reward    [o, ctx, a] -> r
    value     [o, ctx]    -> V
    encoder   flat window of M observations -> z       (PLM / FLM)
    v_phi     flat window of M observations -> twist
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .checkpoint import Checkpoint
from .env import ObsLayout
from .tensornet import MlpParams, ShapeError, init_mlp, mlp_forward

VARIANTS = ("nlm", "plm", "flm")
DEFAULT_HISTORY = {"nlm": 1, "plm": 6}


class ObservationHistory:
    """The last ``capacity`` observations, oldest first.

    Until full, :meth:`window` pads the front with the earliest observation seen.
    """

    def __init__(self, capacity: int, observations=()):
        if capacity < 1:
            raise ValueError("history capacity must be >= 1")
        self.capacity = capacity
        self._buf: deque = deque(maxlen=capacity)
        for o in observations:
            self.push(o)

    def push(self, obs) -> None:
        self._buf.append(np.array(obs, dtype=float))

    def __len__(self) -> int:
        return len(self._buf)

    @property
    def filled(self) -> bool:
        return len(self._buf) == self.capacity

    @property
    def latest(self) -> np.ndarray:
        return self._buf[-1]

    def window(self) -> np.ndarray:
        if not self._buf:
            raise ValueError("empty observation history")
        items = list(self._buf)
        pad = [items[0]] * (self.capacity - len(items))
        return np.stack(pad + items)


def push_window(window: np.ndarray, obs: np.ndarray) -> np.ndarray:
    """Shift a ``(..., M, p)`` window by one observation."""
    return np.concatenate([window[..., 1:, :], obs[..., None, :]], axis=-2)


def fresh_window(obs: np.ndarray, capacity: int) -> np.ndarray:
    return np.repeat(np.asarray(obs)[..., None, :], capacity, axis=-2)


def _as_window(history) -> np.ndarray:
    if isinstance(history, ObservationHistory):
        return history.window()
    w = np.asarray(history, dtype=float)
    if w.ndim == 1:
        w = w[None, :]
    return w


def _flat(window: np.ndarray) -> np.ndarray:
    return window.reshape(window.shape[:-2] + (-1,))


@dataclass
class DreamerBundle:
    variant: str
    layout: ObsLayout
    horizon: int
    history: int
    latent_dim: int
    dynamics: MlpParams
    policy: MlpParams
    reward: MlpParams
    value: MlpParams
    encoder: MlpParams | None = None

    def __post_init__(self):
        self.validate()

    @property
    def obs_dim(self) -> int:
        return self.layout.dim

    @property
    def act_dim(self) -> int:
        return self.layout.k

    @property
    def ctx_dim(self) -> int:
        return 0 if self.variant == "nlm" else self.latent_dim + 3

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.variant == "flm" and self.history != self.horizon:
            raise ValueError("FLM requires history length == horizon")
        if (self.encoder is None) != (self.variant == "nlm"):
            raise ValueError("encoder must be present exactly for PLM/FLM")
        p, k, c = self.obs_dim, self.act_dim, self.ctx_dim
        expect = {
            "dynamics": (p + c + k, p),
            "policy": (p + c, k),
            "reward": (p + c + k, 1),
            "value": (p + c, 1),
        }
        if self.encoder is not None:
            expect["encoder"] = (self.history * p, self.latent_dim)
        for name, (i, o) in expect.items():
            net = getattr(self, name)
            if (net.in_dim, net.out_dim) != (i, o):
                raise ShapeError(f"{name}: got {net.in_dim}->{net.out_dim}, expected {i}->{o}")

    def nets(self) -> dict[str, MlpParams]:
        out = {n: getattr(self, n) for n in ("dynamics", "policy", "reward", "value")}
        if self.encoder is not None:
            out["encoder"] = self.encoder
        return out

    def replace_nets(self, **nets) -> "DreamerBundle":
        fields = {n: getattr(self, n) for n in ("dynamics", "policy", "reward", "value", "encoder")}
        fields.update(nets)
        return DreamerBundle(self.variant, self.layout, self.horizon, self.history, self.latent_dim, **fields)

    def meta(self) -> dict:
        return {
            "variant": self.variant,
            "num_joints": self.layout.k,
            "horizon": self.horizon,
            "history": self.history,
            "latent_dim": self.latent_dim,
        }


def make_bundle(
    variant: str,
    layout: ObsLayout,
    horizon: int,
    rng: np.random.Generator,
    hidden=(64, 64),
    latent_dim: int = 16,
    history: int | None = None,
    activation: str = "tanh",
) -> DreamerBundle:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    if history is None:
        history = horizon if variant == "flm" else DEFAULT_HISTORY[variant]
    p, k = layout.dim, layout.k
    c = 0 if variant == "nlm" else latent_dim + 3
    hidden = list(hidden)

    def net(i, o):
        return init_mlp([i] + hidden + [o], rng, activation)

    return DreamerBundle(
        variant=variant,
        layout=layout,
        horizon=horizon,
        history=history,
        latent_dim=latent_dim,
        dynamics=net(p + c + k, p),
        policy=net(p + c, k),
        reward=net(p + c + k, 1),
        value=net(p + c, 1),
        encoder=None if variant == "nlm" else net(history * p, latent_dim),
    )


def make_velocity_estimator(layout: ObsLayout, history: int, rng, hidden=(64, 64), activation="tanh") -> MlpParams:
    return init_mlp([history * layout.dim] + list(hidden) + [3], rng, activation)


def bundle_from_checkpoint(ckpt: Checkpoint, prefix: str = "") -> DreamerBundle:
    m = ckpt.meta["bundle"] if "bundle" in ckpt.meta else ckpt.meta
    nets = {n: ckpt.nets.get(prefix + n) for n in ("dynamics", "policy", "reward", "value", "encoder")}
    return DreamerBundle(m["variant"], ObsLayout(m["num_joints"]), m["horizon"], m["history"], m["latent_dim"], **nets)


def estimate_velocity(v_phi: MlpParams, history) -> np.ndarray:
    window = _as_window(history)
    if window.shape[-2] == 0:
        raise ValueError("empty observation history")
    return mlp_forward(v_phi, _flat(window))


@dataclass
class DreamTrajectory:
    observations: np.ndarray  # (..., H+1, p); entry 0 is the seed
    actions: np.ndarray  # (..., H, k)
    latent: np.ndarray | None = None  # z_t (PLM / FLM)
    windows: list | None = None  # encoder inputs per dream step (PLM / FLM)


def _cat(*parts):
    parts = [p for p in parts if p is not None]
    return np.concatenate(parts, axis=-1)


def dream_step(bundle: DreamerBundle, obs, action, ctx=None) -> np.ndarray:
    """One dynamics step; the command slice is carried over unchanged."""
    nxt = obs + mlp_forward(bundle.dynamics, _cat(obs, ctx, action))
    cmd = bundle.layout.command
    nxt[..., cmd] = obs[..., cmd]
    return nxt


def dream_policy(bundle: DreamerBundle, obs, ctx=None) -> np.ndarray:
    return mlp_forward(bundle.policy, _cat(obs, ctx))


def nlm_rollout(bundle: DreamerBundle, obs, horizon: int | None = None) -> DreamTrajectory:
    if bundle.variant != "nlm":
        raise ValueError(f"nlm_rollout on a {bundle.variant} bundle")
    H = bundle.horizon if horizon is None else horizon
    o = np.asarray(obs, dtype=float)
    observations, actions = [o], []
    for _ in range(H):
        a = dream_policy(bundle, o)
        o = dream_step(bundle, o, a)
        actions.append(a)
        observations.append(o)
    acts = np.stack(actions, axis=-2) if actions else np.zeros(o.shape[:-1] + (0, bundle.act_dim))
    return DreamTrajectory(np.stack(observations, axis=-2), acts)


def plm_rollout(bundle: DreamerBundle, history, v_phi: MlpParams, horizon: int | None = None) -> DreamTrajectory:
    """Dream with a rolling window: real history first, dreamed observations shifted in.

    At dream step j the window holds ``max(0, M - j)`` real and ``min(j, M)``
    dreamed observations; the latent and the velocity estimate are recomputed
    from that window at every step.
    """
    if bundle.variant not in ("plm", "flm"):
        raise ValueError(f"plm_rollout on a {bundle.variant} bundle")
    if isinstance(history, ObservationHistory) and not history.filled:
        raise ValueError("observation history is not filled")
    window = _as_window(history)
    if window.shape[-2] != bundle.history:
        raise ValueError(f"history window of {window.shape[-2]} observations, bundle expects {bundle.history}")
    H = bundle.horizon if horizon is None else horizon
    o = window[..., -1, :]
    observations, actions, windows = [o], [], [window]
    z_t = mlp_forward(bundle.encoder, _flat(window))
    z = z_t
    for j in range(H):
        if j:
            z = mlp_forward(bundle.encoder, _flat(window))
        v = mlp_forward(v_phi, _flat(window))
        ctx = _cat(z, v)
        a = dream_policy(bundle, o, ctx)
        o = dream_step(bundle, o, a, ctx)
        window = push_window(window, o)
        actions.append(a)
        observations.append(o)
        windows.append(window)
    acts = np.stack(actions, axis=-2) if actions else np.zeros(o.shape[:-1] + (0, bundle.act_dim))
    return DreamTrajectory(np.stack(observations, axis=-2), acts, latent=z_t, windows=windows)


def flm_encode(bundle: DreamerBundle, history, v_phi: MlpParams) -> tuple[np.ndarray, np.ndarray]:
    """(encoder over the H dreamed observations, encoder over the real past window)."""
    if bundle.variant != "flm":
        raise ValueError(f"flm_encode on a {bundle.variant} bundle")
    if bundle.history != bundle.horizon:
        raise ValueError("FLM requires history length == horizon")
    traj = plm_rollout(bundle, history, v_phi)
    future = traj.observations[..., 1:, :]
    y_future = mlp_forward(bundle.encoder, _flat(future))
    y_past = mlp_forward(bundle.encoder, _flat(_as_window(history)))
    return y_future, y_past


def dream_features(bundle: DreamerBundle, obs, history, v_phi: MlpParams) -> np.ndarray:
    """The variant-specific Dreamer output y_t, flattened."""
    if bundle.variant == "nlm":
        traj = nlm_rollout(bundle, obs)
        return _flat(traj.observations[..., 1:, :])
    if bundle.variant == "plm":
        traj = plm_rollout(bundle, history, v_phi)
        return _cat(_flat(traj.observations[..., 1:, :]), traj.latent)
    return _cat(*flm_encode(bundle, history, v_phi))


def actor_input(bundle: DreamerBundle, obs, history, v_phi: MlpParams) -> np.ndarray:
    """[o_t, velocity estimate, Dreamer output]. Never touches privileged channels."""
    obs = np.asarray(obs, dtype=float)
    if history is None:
        history = obs[..., None, :]
    v_hat = estimate_velocity(v_phi, history)
    return _cat(obs, v_hat, dream_features(bundle, obs, history, v_phi))


def actor_input_dim(variant: str, layout: ObsLayout, horizon: int, latent_dim: int = 16) -> int:
    p = layout.dim
    if variant == "nlm":
        return p + 3 + horizon * p
    if variant == "plm":
        return p + 3 + horizon * p + latent_dim
    if variant == "flm":
        return p + 3 + 2 * latent_dim
    if variant == "none":
        return p
    raise ValueError(f"unknown variant {variant!r}")


def actor_input_layout(variant: str, layout: ObsLayout, horizon: int, latent_dim: int = 16) -> dict[str, list[int]]:
    p = layout.dim
    spans = {"obs": [0, p]}
    if variant == "none":
        return spans
    spans["velocity"] = [p, p + 3]
    start = p + 3
    if variant in ("nlm", "plm"):
        spans["dreamed_obs"] = [start, start + horizon * p]
        start += horizon * p
    if variant == "plm":
        spans["latent"] = [start, start + latent_dim]
    if variant == "flm":
        spans["latent_future"] = [start, start + latent_dim]
        spans["latent_past"] = [start + latent_dim, start + 2 * latent_dim]
    return spans
