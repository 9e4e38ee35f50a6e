import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dreammpc import checkpoint as ck
from dreammpc.tensornet import (
    Layer,
    MlpParams,
    ShapeError,
    VectorAdam,
    adam_init,
    adam_step,
    clip_by_global_norm,
    fit_regression,
    init_mlp,
    mlp_backward,
    mlp_forward,
    mse,
    mse_grad,
    zeros_like,
)


def reference_forward(params, x):
    """Loop-over-units forward pass, written without matrix products."""
    h = list(np.asarray(x, dtype=float))
    for i, layer in enumerate(params.layers):
        out = []
        for row, b in zip(layer.weight, layer.bias):
            out.append(sum(w * v for w, v in zip(row, h)) + b)
        if i < len(params.layers) - 1:
            act = params.activations[i]
            out = [np.tanh(v) if act == "tanh" else (v if v > 0 else np.expm1(v)) for v in out]
        h = out
    return np.array(h)


def finite_difference(params, x, upstream, h=1e-6):
    def f(p, xx):
        return float(np.dot(upstream, mlp_forward(p, xx)))

    grads = []
    for li, layer in enumerate(params.layers):
        gw = np.zeros_like(layer.weight)
        gb = np.zeros_like(layer.bias)
        for arr, g in ((layer.weight, gw), (layer.bias, gb)):
            it = np.nditer(arr, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                old = arr[idx]
                arr[idx] = old + h
                up = f(params, x)
                arr[idx] = old - h
                down = f(params, x)
                arr[idx] = old
                g[idx] = (up - down) / (2 * h)
        grads.append((gw, gb))
    gx = np.zeros_like(x)
    for i in range(len(x)):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        gx[i] = (f(params, xp) - f(params, xm)) / (2 * h)
    return grads, gx


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(1e-6, np.abs(a) + np.abs(b)))


def random_net(rng, act=None):
    depth = rng.integers(1, 4)
    sizes = [int(s) for s in rng.integers(1, 7, size=depth + 1)]
    return init_mlp(sizes, rng, act or ("tanh", "elu")[rng.integers(2)])


# -- forward ------------------------------------------------------------------------


def test_zero_weights_return_bias():
    net = MlpParams([Layer(np.zeros((2, 3)), np.array([0.5, -1.0]))])
    assert np.array_equal(mlp_forward(net, np.array([9.0, -4.0, 2.0])), [0.5, -1.0])


def test_single_linear_layer():
    net = MlpParams([Layer(np.array([[2.0]]), np.array([1.0]))])
    assert mlp_forward(net, np.array([3.0]))[0] == 7.0


@pytest.mark.parametrize("act", ["tanh", "elu"])
def test_forward_matches_unit_loop(act):
    rng = np.random.default_rng(1)
    for _ in range(10):
        net = init_mlp([5, 7, 3], rng, act)
        x = rng.normal(size=5)
        assert np.max(np.abs(mlp_forward(net, x) - reference_forward(net, x))) < 1e-12


def test_batched_forward_equals_rows():
    rng = np.random.default_rng(2)
    net = init_mlp([4, 8, 8, 2], rng)
    xs = rng.normal(size=(6, 4))
    rows = np.stack([mlp_forward(net, x) for x in xs])
    assert np.allclose(mlp_forward(net, xs), rows, atol=1e-14)


def test_forward_deterministic():
    rng = np.random.default_rng(3)
    net = init_mlp([4, 16, 3], rng)
    x = rng.normal(size=4)
    assert mlp_forward(net, x).tobytes() == mlp_forward(net, x).tobytes()


def test_shape_errors():
    net = init_mlp([3, 4, 2], np.random.default_rng(0))
    with pytest.raises(ShapeError):
        mlp_forward(net, np.zeros(4))
    with pytest.raises(ShapeError):
        mlp_backward(net, np.zeros(3), np.zeros(3))
    with pytest.raises(ShapeError):
        MlpParams([Layer(np.zeros((2, 3)), np.zeros(2)), Layer(np.zeros((1, 4)), np.zeros(1))], ["tanh"])


def test_init_bounds_and_seeding():
    a = init_mlp([10, 20, 5], np.random.default_rng(7))
    b = init_mlp([10, 20, 5], np.random.default_rng(7))
    assert all(np.array_equal(x.weight, y.weight) for x, y in zip(a.layers, b.layers))
    assert np.max(np.abs(a.layers[0].weight)) <= np.sqrt(1 / 10)
    assert np.max(np.abs(a.layers[1].bias)) <= np.sqrt(1 / 20)


# -- backward -----------------------------------------------------------------------


def test_linear_chain_rule():
    net = MlpParams([Layer(np.array([[2.0]]), np.array([0.0]))])
    g, gx = mlp_backward(net, np.array([3.0]), np.array([1.0]))
    assert g.layers[0].weight[0, 0] == 3.0 and g.layers[0].bias[0] == 1.0 and gx[0] == 2.0


def test_zero_upstream_gives_zero_gradients():
    rng = np.random.default_rng(4)
    net = init_mlp([3, 5, 2], rng)
    g, gx = mlp_backward(net, rng.normal(size=3), np.zeros(2))
    assert g.global_norm() == 0.0 and not gx.any()


def test_backward_matches_finite_differences_100_nets():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(100):
        net = random_net(rng)
        x = rng.normal(size=net.in_dim)
        up = rng.normal(size=net.out_dim)
        g, gx = mlp_backward(net, x, up)
        fd, fdx = finite_difference(net, x, up)
        for layer, (gw, gb) in zip(g.layers, fd):
            worst = max(worst, rel_err(layer.weight, gw), rel_err(layer.bias, gb))
        worst = max(worst, rel_err(gx, fdx))
    assert worst < 1e-4


def test_batched_gradient_is_sum_of_rows():
    rng = np.random.default_rng(6)
    net = init_mlp([3, 4, 2], rng, "elu")
    xs, ups = rng.normal(size=(5, 3)), rng.normal(size=(5, 2))
    g, gx = mlp_backward(net, xs, ups)
    parts = [mlp_backward(net, x, u) for x, u in zip(xs, ups)]
    total = parts[0][0]
    for p in parts[1:]:
        total = total + p[0]
    for a, b in zip(g.layers, total.layers):
        assert np.allclose(a.weight, b.weight) and np.allclose(a.bias, b.bias)
    assert np.allclose(gx, np.stack([p[1] for p in parts]))


# -- Adam ---------------------------------------------------------------------------


@pytest.mark.parametrize("g", [3.0, -0.02, 1e-5])
def test_adam_first_step_closed_form(g):
    net = MlpParams([Layer(np.array([[0.5]]), np.array([0.0]))])
    grads = zeros_like(net)
    grads.layers[0].weight[0, 0] = g
    state, new = adam_step(adam_init(net, lr=1e-3), net, grads)
    expected = 0.5 - 1e-3 * g / (abs(g) + 1e-8)
    assert abs(new.layers[0].weight[0, 0] - expected) < 1e-15
    assert state.step == 1


def test_adam_zero_gradients_are_noop():
    rng = np.random.default_rng(8)
    net = init_mlp([3, 4, 2], rng)
    state = adam_init(net)
    p = net
    for _ in range(50):
        state, p = adam_step(state, p, zeros_like(net))
    assert all(np.array_equal(a.weight, b.weight) for a, b in zip(net.layers, p.layers))
    assert state.step == 50


def test_adam_zero_lr_moves_moments_only():
    rng = np.random.default_rng(9)
    net = init_mlp([2, 3, 1], rng)
    g, _ = mlp_backward(net, rng.normal(size=2), np.ones(1))
    state, p = adam_step(adam_init(net, lr=0.0), net, g)
    assert all(np.array_equal(a.weight, b.weight) for a, b in zip(net.layers, p.layers))
    assert np.any(state.m[0].weight != 0) and np.any(state.v[0].weight != 0)


def test_adam_rejects_non_finite_and_names_layer():
    net = init_mlp([2, 3, 1], np.random.default_rng(0))
    g = zeros_like(net)
    g.layers[1].bias[0] = np.nan
    with pytest.raises(FloatingPointError, match="layer 1"):
        adam_step(adam_init(net), net, g)


def test_adam_rejects_shape_mismatch():
    net = init_mlp([2, 3, 1], np.random.default_rng(0))
    other = zeros_like(init_mlp([2, 4, 1], np.random.default_rng(0)))
    with pytest.raises(ShapeError):
        adam_step(adam_init(net), net, other)


def test_vector_adam_matches_layer_adam():
    x = np.array([0.3, -0.2])
    g = np.array([0.5, -4.0])
    opt = VectorAdam.like(x, lr=0.01)
    net = MlpParams([Layer(x[None, :].copy(), np.zeros(1))])
    grads = zeros_like(net)
    grads.layers[0].weight[0] = g
    state = adam_init(net, lr=0.01)
    for _ in range(3):
        x = opt.update(x, g)
        state, net = adam_step(state, net, grads)
    assert np.allclose(x, net.layers[0].weight[0], atol=1e-15)


def test_fit_regression_learns_linear_map():
    rng = np.random.default_rng(10)
    X = rng.normal(size=(256, 3))
    Y = X @ np.array([[1.0], [-2.0], [0.5]]) + 0.1
    net = init_mlp([3, 1], rng)
    net, _, loss = fit_regression(net, X, Y, rng, epochs=300, batch_size=64, lr=0.02)
    assert loss < 1e-6


# -- losses ---------------------------------------------------------------------------


def test_mse_examples():
    assert mse([1, 2], [1, 2]) == 0.0
    assert mse([0, 0], [3, 4]) == 12.5
    with pytest.raises(ShapeError):
        mse([1, 2], [1, 2, 3])


def test_mse_against_direct_sum():
    rng = np.random.default_rng(11)
    a, b = rng.normal(size=37), rng.normal(size=37)
    direct = sum((x - y) ** 2 for x, y in zip(a, b)) / 37
    assert abs(mse(a, b) - direct) < 1e-12
    h = 1e-6
    e = np.zeros(37)
    e[5] = h
    assert abs(mse_grad(a, b)[5] - (mse(a + e, b) - mse(a - e, b)) / (2 * h)) < 1e-8


def test_clip_by_global_norm():
    net = init_mlp([2, 2], np.random.default_rng(0))
    g = zeros_like(net)
    g.layers[0].weight[:] = 3.0
    (clipped,), norm = clip_by_global_norm([g], 1.0)
    assert abs(norm - 6.0) < 1e-12 and abs(clipped.global_norm() - 1.0) < 1e-12


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 6), min_size=2, max_size=4), st.integers(0, 2**31), st.sampled_from(["tanh", "elu"]))
def test_property_gradient_of_linear_functional(sizes, seed, act):
    """<u, f(x)> is linear in u, so gradients scale with the upstream vector."""
    rng = np.random.default_rng(seed)
    net = init_mlp(sizes, rng, act)
    x = rng.normal(size=sizes[0])
    u = rng.normal(size=sizes[-1])
    g1, gx1 = mlp_backward(net, x, u)
    g2, gx2 = mlp_backward(net, x, 2.5 * u)
    assert np.allclose(g2.global_norm(), 2.5 * g1.global_norm())
    assert np.allclose(gx2, 2.5 * gx1)


# -- checkpoint --------------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(12)
    nets = {"a": init_mlp([3, 5, 2], rng), "b": init_mlp([4, 1], rng, "elu"), "c": init_mlp([2, 3, 3, 1], rng, "elu")}
    cp = ck.Checkpoint(nets, {"log_std": np.array([-1.0, 0.5])}, {"variant": "nlm", "x": [1, 2]})
    path = ck.save(tmp_path / "m.bin", cp, {"lr": 1e-3})
    back = ck.load(path)
    assert back.meta == cp.meta
    assert np.array_equal(back.arrays["log_std"], cp.arrays["log_std"])
    for name, net in nets.items():
        assert back.nets[name].activations == net.activations
        for a, b in zip(back.nets[name].layers, net.layers):
            assert a.weight.tobytes() == b.weight.tobytes() and a.bias.tobytes() == b.bias.tobytes()
    assert ck.dumps(back) == ck.dumps(cp)
    assert ck.sidecar_path(path).exists()


def test_checkpoint_rejects_corruption():
    cp = ck.Checkpoint({"a": init_mlp([2, 2], np.random.default_rng(0))})
    data = ck.dumps(cp)
    with pytest.raises(ck.CheckpointError):
        ck.loads(b"XXXX" + data[4:])
    with pytest.raises(ck.CheckpointError):
        ck.loads(data[:-3])
    with pytest.raises(ck.CheckpointError):
        ck.loads(data + b"\0")
