import numpy as np
import pytest

from dreammpc import checkpoint as ck
from dreammpc.env import EnvConfig, ObsLayout
from dreammpc.internal_model import (
    ObservationHistory,
    actor_input,
    actor_input_dim,
    actor_input_layout,
    bundle_from_checkpoint,
    dream_features,
    estimate_velocity,
    flm_encode,
    make_bundle,
    make_velocity_estimator,
    nlm_rollout,
    plm_rollout,
)
from dreammpc.tensornet import Layer, MlpParams, ShapeError, fit_regression, init_mlp, mlp_forward

LAY = ObsLayout(4)
P = LAY.dim


def manual_dream(bundle, o, a, ctx=()):
    nxt = o + mlp_forward(bundle.dynamics, np.concatenate([o, *ctx, a]))
    nxt[LAY.command] = o[LAY.command]
    return nxt


@pytest.mark.parametrize("H", [1, 2, 3, 4, 5])
def test_nlm_matches_manual_unroll(H):
    rng = np.random.default_rng(H)
    b = make_bundle("nlm", LAY, H, rng)
    o0 = rng.normal(size=P)
    traj = nlm_rollout(b, o0)
    o = o0.copy()
    assert traj.observations[0].tobytes() == o0.tobytes()
    for k in range(H):
        a = mlp_forward(b.policy, o)
        o = manual_dream(b, o, a)
        assert traj.actions[k].tobytes() == a.tobytes()
        assert traj.observations[k + 1].tobytes() == o.tobytes()


def test_nlm_zero_horizon_and_variant_guard():
    b = make_bundle("nlm", LAY, 3, np.random.default_rng(0))
    o = np.ones(P)
    assert np.array_equal(nlm_rollout(b, o, 0).observations, o[None])
    with pytest.raises(ValueError):
        nlm_rollout(make_bundle("plm", LAY, 2, np.random.default_rng(0)), o)


def test_nlm_batched_rows_equal_single():
    rng = np.random.default_rng(3)
    b = make_bundle("nlm", LAY, 4, rng)
    obs = rng.normal(size=(5, P))
    batch = nlm_rollout(b, obs)
    for i in range(5):
        assert np.allclose(batch.observations[i], nlm_rollout(b, obs[i]).observations, atol=1e-13)


def test_command_slice_is_exogenous():
    rng = np.random.default_rng(5)
    b = make_bundle("nlm", LAY, 5, rng)
    o = rng.normal(size=P)
    traj = nlm_rollout(b, o)
    assert np.all(traj.observations[:, LAY.command] == o[LAY.command])


def test_identity_dynamics_keeps_observation():
    rng = np.random.default_rng(6)
    b = make_bundle("nlm", LAY, 3, rng)
    o = rng.normal(size=P)
    X = np.tile(np.concatenate([o, np.zeros(4)]), (64, 1))
    X[:, P:] = rng.uniform(-1, 1, (64, 4))
    dyn, _, loss = fit_regression(b.dynamics, X, np.zeros((64, P)), rng, epochs=400, batch_size=64, lr=3e-3)
    b = b.replace_nets(dynamics=dyn)
    traj = nlm_rollout(b, o)
    # one-step RMS error sqrt(loss) compounds over at most H steps
    assert loss < 1e-5
    assert np.max(np.abs(traj.observations - o)) < 3 * 3 * np.sqrt(1e-5)


@pytest.mark.parametrize("H", [1, 2, 3, 4, 5])
def test_plm_matches_manual_unroll(H):
    rng = np.random.default_rng(10 + H)
    b = make_bundle("plm", LAY, H, rng)
    vphi = make_velocity_estimator(LAY, b.history, rng)
    window = rng.normal(size=(b.history, P))
    traj = plm_rollout(b, window, vphi)
    w = window.copy()
    o = w[-1]
    z_t = mlp_forward(b.encoder, w.reshape(-1))
    assert traj.latent.tobytes() == z_t.tobytes()
    for k in range(H):
        z = mlp_forward(b.encoder, w.reshape(-1))
        v = mlp_forward(vphi, w.reshape(-1))
        a = mlp_forward(b.policy, np.concatenate([o, z, v]))
        o = manual_dream(b, o, a, (z, v))
        w = np.vstack([w[1:], o])
        assert traj.actions[k].tobytes() == a.tobytes()
        assert traj.observations[k + 1].tobytes() == o.tobytes()


def test_plm_window_bookkeeping():
    rng = np.random.default_rng(20)
    M = 6
    b = make_bundle("plm", LAY, 8, rng, history=M)
    vphi = make_velocity_estimator(LAY, M, rng)
    real = rng.normal(size=(M, P)) + 100.0  # real rows are recognisable by magnitude
    traj = plm_rollout(b, real, vphi)
    for j, w in enumerate(traj.windows):
        n_real = sum(any(np.array_equal(row, r) for r in real) for row in w)
        assert n_real == max(0, M - j)
        assert len(w) - n_real == min(j, M)
        assert np.array_equal(w[-min(j, M):], traj.observations[max(1, j - M + 1): j + 1]) if j else True


def test_plm_requires_filled_history():
    b = make_bundle("plm", LAY, 2, np.random.default_rng(0))
    vphi = make_velocity_estimator(LAY, b.history, np.random.default_rng(1))
    h = ObservationHistory(b.history, [np.zeros(P)])
    with pytest.raises(ValueError):
        plm_rollout(b, h, vphi)
    traj0 = plm_rollout(b, np.zeros((b.history, P)), vphi, horizon=0)
    assert traj0.observations.shape == (1, P) and traj0.latent.shape == (16,)


@pytest.mark.parametrize("H", [1, 3, 5])
def test_flm_future_slice_equals_plm(H):
    rng = np.random.default_rng(30 + H)
    b = make_bundle("flm", LAY, H, rng)
    vphi = make_velocity_estimator(LAY, H, rng)
    hist = rng.normal(size=(H, P))
    y_future, y_past = flm_encode(b, hist, vphi)
    traj = plm_rollout(b, hist, vphi)
    assert y_future.tobytes() == mlp_forward(b.encoder, traj.observations[1:].reshape(-1)).tobytes()
    assert y_past.tobytes() == mlp_forward(b.encoder, hist.reshape(-1)).tobytes()
    again = flm_encode(b, hist.copy(), vphi)
    assert again[0].tobytes() == y_future.tobytes() and again[1].tobytes() == y_past.tobytes()


def test_flm_requires_history_equal_horizon():
    with pytest.raises(ValueError):
        make_bundle("flm", LAY, 3, np.random.default_rng(0), history=4)


def test_estimate_velocity():
    net = MlpParams([Layer(np.zeros((3, P)), np.array([0.1, 0.2, 0.3]))])
    h = ObservationHistory(1, [np.ones(P)])
    assert np.array_equal(estimate_velocity(net, h), [0.1, 0.2, 0.3])
    with pytest.raises(ValueError):
        estimate_velocity(net, np.zeros((0, P)))
    rng = np.random.default_rng(1)
    vphi = make_velocity_estimator(LAY, 3, rng)
    w = rng.normal(size=(3, P))
    assert estimate_velocity(vphi, w).tobytes() == estimate_velocity(vphi, w.copy()).tobytes()


def test_history_front_padding():
    h = ObservationHistory(4)
    h.push(np.full(P, 1.0))
    h.push(np.full(P, 2.0))
    assert list(h.window()[:, 0]) == [1.0, 1.0, 1.0, 2.0]
    for v in (3.0, 4.0, 5.0):
        h.push(np.full(P, v))
    assert list(h.window()[:, 0]) == [2.0, 3.0, 4.0, 5.0] and h.filled


@pytest.mark.parametrize("variant,H,expected", [("nlm", 1, P + 3 + P), ("nlm", 5, P + 3 + 5 * P),
                                                ("plm", 2, P + 3 + 2 * P + 16), ("flm", 4, P + 3 + 32),
                                                ("none", 1, P)])
def test_actor_input_dims(variant, H, expected):
    assert actor_input_dim(variant, LAY, H) == expected
    spans = actor_input_layout(variant, LAY, H)
    assert max(s[1] for s in spans.values()) == expected
    assert spans == actor_input_layout(variant, LAY, H)
    if variant == "none":
        return
    rng = np.random.default_rng(0)
    b = make_bundle(variant, LAY, H, rng)
    vphi = make_velocity_estimator(LAY, b.history, rng)
    hist = rng.normal(size=(b.history, P))
    ai = actor_input(b, hist[-1], hist, vphi)
    assert ai.shape == (expected,)
    assert np.array_equal(ai[:P], hist[-1])
    assert np.array_equal(ai[P:P + 3], estimate_velocity(vphi, hist))
    assert np.array_equal(ai[P + 3:], dream_features(b, hist[-1], hist, vphi))


def test_actor_input_never_sees_privileged_state():
    """The actor input is a function of observations only: perturbing the plant state behind them changes nothing."""
    from dreammpc.env import observe, reset

    cfg = EnvConfig(noise_level="none")
    rng = np.random.default_rng(0)
    b = make_bundle("nlm", LAY, 2, rng)
    vphi = make_velocity_estimator(LAY, 1, rng)
    s, _ = reset(cfg, 0)
    s2 = s.copy()
    s2.twist = np.array([3.0, -2.0, 1.0])
    s2.disturbance = np.array([1.0, 1.0, 1.0])
    s2.orient_rate = np.array([0.4, -0.4])
    o1, o2 = observe(cfg, s, np.zeros(3)), observe(cfg, s2, np.zeros(3))
    assert np.array_equal(o1, o2)
    assert np.array_equal(actor_input(b, o1, None, vphi), actor_input(b, o2, None, vphi))


def test_bundle_validation_and_checkpoint(tmp_path):
    rng = np.random.default_rng(0)
    b = make_bundle("plm", LAY, 3, rng)
    with pytest.raises(ShapeError):
        b.replace_nets(policy=init_mlp([P, 8, 4], rng))
    with pytest.raises(ValueError):
        b.replace_nets(encoder=None)
    path = ck.save(tmp_path / "b.bin", ck.Checkpoint(b.nets(), meta={"bundle": b.meta()}))
    back = bundle_from_checkpoint(ck.load(path))
    assert back.meta() == b.meta()
    o = rng.normal(size=(b.history, P))
    vphi = make_velocity_estimator(LAY, b.history, rng)
    assert plm_rollout(back, o, vphi).observations.tobytes() == plm_rollout(b, o, vphi).observations.tobytes()
