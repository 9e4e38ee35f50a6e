"""Dense multilayer perceptrons with hand-written reverse-mode gradients.

Everything here works on plain numpy arrays. Inputs may be a single vector
``(in,)`` or a batch ``(B, in)``; for batches the parameter gradients are
summed over the batch dimension.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("tanh", "elu")


class ShapeError(ValueError):
    pass


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)

    @property
    def shape(self) -> tuple[int, int]:
        return self.weight.shape


@dataclass
class MlpParams:
    layers: list[Layer]
    activations: list[str] = field(default_factory=list)  # one per hidden layer

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("an MLP needs at least one layer")
        if len(self.activations) != len(self.layers) - 1:
            raise ShapeError(
                f"{len(self.layers)} layers need {len(self.layers) - 1} activations, "
                f"got {len(self.activations)}"
            )
        for act in self.activations:
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
        for i, layer in enumerate(self.layers):
            if layer.weight.ndim != 2 or layer.bias.shape != (layer.weight.shape[0],):
                raise ShapeError(f"layer {i}: weight {layer.weight.shape} / bias {layer.bias.shape}")
            if i and layer.weight.shape[1] != self.layers[i - 1].weight.shape[0]:
                raise ShapeError(
                    f"layer {i} expects {layer.weight.shape[1]} inputs, "
                    f"previous layer emits {self.layers[i - 1].weight.shape[0]}"
                )

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    @property
    def sizes(self) -> list[int]:
        return [self.in_dim] + [layer.weight.shape[0] for layer in self.layers]

    def num_params(self) -> int:
        return sum(layer.weight.size + layer.bias.size for layer in self.layers)

    def copy(self) -> "MlpParams":
        return MlpParams(
            [Layer(l.weight.copy(), l.bias.copy()) for l in self.layers], list(self.activations)
        )

    def astype(self, dtype) -> "MlpParams":
        return MlpParams(
            [Layer(l.weight.astype(dtype), l.bias.astype(dtype)) for l in self.layers],
            list(self.activations),
        )

    def is_finite(self) -> bool:
        return all(np.isfinite(l.weight).all() and np.isfinite(l.bias).all() for l in self.layers)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return mlp_forward(self, x)


@dataclass
class Gradients:
    layers: list[Layer]

    def global_norm(self) -> float:
        return float(np.sqrt(sum(np.sum(l.weight**2) + np.sum(l.bias**2) for l in self.layers)))

    def scaled(self, factor: float) -> "Gradients":
        return Gradients([Layer(l.weight * factor, l.bias * factor) for l in self.layers])

    def __add__(self, other: "Gradients") -> "Gradients":
        return Gradients(
            [Layer(a.weight + b.weight, a.bias + b.bias) for a, b in zip(self.layers, other.layers)]
        )


def zeros_like(params: MlpParams) -> Gradients:
    return Gradients([Layer(np.zeros_like(l.weight), np.zeros_like(l.bias)) for l in params.layers])


def init_mlp(sizes, rng: np.random.Generator, activation: str = "tanh") -> MlpParams:
    """Uniform init in +-sqrt(1/fan_in) for weights and biases."""
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(1.0 / fan_in) if fan_in else 0.0
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        b = rng.uniform(-bound, bound, size=fan_out)
        layers.append(Layer(w, b))
    return MlpParams(layers, [activation] * (len(layers) - 1))


def _activate(name: str, x: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(x)
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def _activation_grad(name: str, pre: np.ndarray, post: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return 1.0 - post * post
    return np.where(pre > 0, 1.0, post + 1.0)


def _check_input(params: MlpParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=params.layers[0].weight.dtype)
    if x.ndim not in (1, 2) or x.shape[-1] != params.in_dim:
        raise ShapeError(f"input shape {x.shape} does not match in_dim {params.in_dim}")
    return x


def mlp_forward(params: MlpParams, x: np.ndarray) -> np.ndarray:
    h = _check_input(params, x)
    last = len(params.layers) - 1
    for i, layer in enumerate(params.layers):
        h = h @ layer.weight.T + layer.bias
        if i < last:
            h = _activate(params.activations[i], h)
    return h


def mlp_backward(
    params: MlpParams, x: np.ndarray, upstream: np.ndarray
) -> tuple[Gradients, np.ndarray]:
    """Gradients of ``<upstream, mlp_forward(params, x)>`` w.r.t. parameters and input."""
    x = _check_input(params, x)
    upstream = np.asarray(upstream, dtype=x.dtype)
    expected = x.shape[:-1] + (params.out_dim,)
    if upstream.shape != expected:
        raise ShapeError(f"upstream gradient shape {upstream.shape}, expected {expected}")

    batched = x.ndim == 2
    h = x if batched else x[None, :]
    g = upstream if batched else upstream[None, :]

    last = len(params.layers) - 1
    inputs, pres, posts = [], [], []
    for i, layer in enumerate(params.layers):
        inputs.append(h)
        pre = h @ layer.weight.T + layer.bias
        if i < last:
            post = _activate(params.activations[i], pre)
            pres.append(pre)
            posts.append(post)
            h = post

    grads = [None] * len(params.layers)
    for i in range(last, -1, -1):
        if i < last:
            g = g * _activation_grad(params.activations[i], pres[i], posts[i])
        grads[i] = Layer(g.T @ inputs[i], g.sum(axis=0))
        g = g @ params.layers[i].weight

    return Gradients(grads), (g if batched else g[0])


@dataclass
class AdamState:
    m: list[Layer]
    v: list[Layer]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params: MlpParams, lr: float = 1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    zeros = zeros_like(params).layers
    return AdamState(
        m=zeros,
        v=[Layer(np.zeros_like(l.weight), np.zeros_like(l.bias)) for l in params.layers],
        lr=lr,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
    )


def adam_step(
    state: AdamState, params: MlpParams, grads: Gradients
) -> tuple[AdamState, MlpParams]:
    """One bias-corrected Adam update. Inputs are left untouched."""
    if len(grads.layers) != len(params.layers):
        raise ShapeError("gradient / parameter layer count mismatch")
    for i, (g, p) in enumerate(zip(grads.layers, params.layers)):
        if g.weight.shape != p.weight.shape or g.bias.shape != p.bias.shape:
            raise ShapeError(f"layer {i}: gradient shape does not match parameters")
        if not (np.isfinite(g.weight).all() and np.isfinite(g.bias).all()):
            raise FloatingPointError(f"non-finite gradient in layer {i}")

    t = state.step + 1
    new_m, new_v, new_layers = [], [], []
    for g, p, m, v in zip(grads.layers, params.layers, state.m, state.v):
        mw, vw, pw = adam_moments(state, t, g.weight, m.weight, v.weight, p.weight)
        mb, vb, pb = adam_moments(state, t, g.bias, m.bias, v.bias, p.bias)
        new_m.append(Layer(mw, mb))
        new_v.append(Layer(vw, vb))
        new_layers.append(Layer(pw, pb))
    new_state = AdamState(new_m, new_v, t, state.lr, state.beta1, state.beta2, state.eps)
    return new_state, MlpParams(new_layers, list(params.activations))


def adam_moments(hp: AdamState, t: int, g, m, v, x):
    """Updated (m, v, x) for one array at step ``t`` (1-based)."""
    m1 = hp.beta1 * m + (1.0 - hp.beta1) * g
    v1 = hp.beta2 * v + (1.0 - hp.beta2) * g * g
    m_hat = m1 / (1.0 - hp.beta1**t)
    v_hat = v1 / (1.0 - hp.beta2**t)
    return m1, v1, x - hp.lr * m_hat / (np.sqrt(v_hat) + hp.eps)


@dataclass
class VectorAdam:
    """Adam for a single free parameter vector (e.g. a state-independent log-std)."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def like(cls, x: np.ndarray, lr: float = 1e-3) -> "VectorAdam":
        return cls(np.zeros_like(x), np.zeros_like(x), lr=lr)

    def update(self, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        if not np.isfinite(g).all():
            raise FloatingPointError("non-finite gradient for vector parameter")
        self.step += 1
        self.m, self.v, x = adam_moments(self, self.step, g, self.m, self.v, x)
        return x


def mse(pred: np.ndarray, target: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ShapeError(f"mse of shapes {pred.shape} and {target.shape}")
    return float(np.mean((pred - target) ** 2))


def mse_grad(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """d mse / d pred."""
    pred = np.asarray(pred, dtype=float)
    return 2.0 * (pred - target) / pred.size


def clip_by_global_norm(grads: list[Gradients], max_norm: float) -> tuple[list[Gradients], float]:
    total = float(np.sqrt(sum(g.global_norm() ** 2 for g in grads)))
    if max_norm is None or total <= max_norm or total == 0.0:
        return grads, total
    return [g.scaled(max_norm / total) for g in grads], total


def fit_regression(
    params: MlpParams,
    inputs: np.ndarray,
    targets: np.ndarray,
    rng: np.random.Generator,
    epochs: int = 1,
    batch_size: int = 64,
    opt: AdamState | None = None,
    lr: float = 1e-3,
) -> tuple[MlpParams, AdamState, float]:
    """Minibatch Adam on a mean-squared-error objective; returns the last epoch's mean loss."""
    opt = opt or adam_init(params, lr=lr)
    n = len(inputs)
    loss = float("nan")
    for _ in range(epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            pred = mlp_forward(params, inputs[idx])
            losses.append(mse(pred, targets[idx]))
            grads, _ = mlp_backward(params, inputs[idx], mse_grad(pred, targets[idx]))
            opt, params = adam_step(opt, params, grads)
        loss = float(np.mean(losses))
    return params, opt, loss
