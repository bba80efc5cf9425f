"""Minimal dense feed-forward network engine.

Plain numpy, float64 everywhere: dense layers with ReLU, softmax
cross-entropy with exact analytic gradients, SGD with an optional proximal
term. The embedding exposed to the prototype machinery is the
post-activation output of the last hidden layer; the classifier is the
final dense layer.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import rand


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description: input_dim -> hidden_dims... -> num_classes.

    activation 'linear' makes the hidden layers plain affine maps (the
    dense-cascade surrogate used on the synthetic benchmark); 'relu' is the
    usual MLP.
    """

    input_dim: int
    hidden_dims: tuple[int, ...]
    num_classes: int
    activation: str = "relu"
    # Index of the layer whose post-activation output is the embedding.
    # Must address the last hidden layer (the classifier is everything after).
    feature_layer_index: int = field(default=-1)

    def __post_init__(self):
        if self.input_dim < 1 or self.num_classes < 1:
            raise ValueError("input_dim and num_classes must be positive")
        if any(h < 1 for h in self.hidden_dims):
            raise ValueError("hidden dims must be positive")
        if self.activation not in ("relu", "linear"):
            raise ValueError(f"unsupported activation {self.activation!r}")
        object.__setattr__(self, "hidden_dims", tuple(self.hidden_dims))
        last_hidden = len(self.hidden_dims) - 1
        if self.feature_layer_index == -1:
            object.__setattr__(self, "feature_layer_index", last_hidden)
        elif self.feature_layer_index != last_hidden:
            raise ValueError("feature_layer_index must address the last hidden layer")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        """Per-layer (fan_in, fan_out) pairs."""
        dims = [self.input_dim, *self.hidden_dims, self.num_classes]
        return list(zip(dims[:-1], dims[1:]))

    @property
    def embedding_dim(self) -> int:
        return self.hidden_dims[-1] if self.hidden_dims else self.input_dim


@dataclass
class ParamSet:
    """All trainable parameters: ordered (weight[out, in], bias[out]) pairs.

    The same container is used for gradients (shape-congruent by
    construction).
    """

    layers: list[tuple[np.ndarray, np.ndarray]]

    @property
    def total_dim(self) -> int:
        return sum(w.size + b.size for w, b in self.layers)

    def copy(self) -> "ParamSet":
        return ParamSet([(w.copy(), b.copy()) for w, b in self.layers])

    def zeros_like(self) -> "ParamSet":
        return ParamSet([(np.zeros_like(w), np.zeros_like(b)) for w, b in self.layers])

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for w, b in self.layers for a in (w, b)])

    def all_finite(self) -> bool:
        return all(np.isfinite(w).all() and np.isfinite(b).all() for w, b in self.layers)


# A gradient has exactly the shape of the parameters it differentiates.
Gradient = ParamSet


def check_congruent(a: ParamSet, b: ParamSet) -> None:
    shapes = lambda p: [(w.shape, v.shape) for w, v in p.layers]
    if shapes(a) != shapes(b):
        raise ValueError(f"parameter shapes differ: {shapes(a)} vs {shapes(b)}")


def params_equal(a: ParamSet, b: ParamSet) -> bool:
    """Bitwise equality (used by determinism tests)."""
    return len(a.layers) == len(b.layers) and all(
        np.array_equal(w1, w2) and np.array_equal(b1, b2)
        for (w1, b1), (w2, b2) in zip(a.layers, b.layers)
    )


def init_params(spec: ModelSpec, seed_or_rng) -> ParamSet:
    """Glorot-uniform weights, zero biases."""
    gen = seed_or_rng if isinstance(seed_or_rng, np.random.Generator) else rand.rng(int(seed_or_rng), rand.INIT)
    layers = []
    for fan_in, fan_out in spec.layer_dims:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = gen.uniform(-limit, limit, size=(fan_out, fan_in))
        layers.append((w, np.zeros(fan_out)))
    return ParamSet(layers)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over the last axis."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _forward_acts(layers, spec: ModelSpec, x: np.ndarray):
    """Forward pass keeping pre/post activations for backprop.

    Returns (logits, activations, pre_activations) where activations[i] is
    the input to layer i and pre_activations[i] the affine output of each
    hidden layer i.
    """
    n_layers = len(layers)
    relu = spec.activation == "relu"
    acts = [x]
    zs = []
    a = x
    for i, (w, b) in enumerate(layers):
        z = a @ w.T + b
        if i < n_layers - 1:
            zs.append(z)
            a = np.maximum(z, 0.0) if relu else z
            acts.append(a)
        else:
            return z, acts, zs
    return a, acts, zs  # zero-layer edge, unreachable for valid specs


def forward_batch(params: ParamSet, spec: ModelSpec, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched forward pass: (n, input_dim) -> (logits (n, C), embedding (n, E)).

    The embedding is the post-ReLU output of the last hidden layer; with no
    hidden layers the encoder is the identity and the embedding is x itself.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ValueError(f"expected input of shape (n, {spec.input_dim}), got {x.shape}")
    logits, acts, _ = _forward_acts(params.layers, spec, x)
    embedding = acts[spec.feature_layer_index + 1] if spec.hidden_dims else x
    return logits, embedding


def forward(params: ParamSet, spec: ModelSpec, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Single-sample forward pass: returns (logits (C,), embedding (E,))."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != spec.input_dim:
        raise ValueError(f"expected input of length {spec.input_dim}, got shape {x.shape}")
    logits, embedding = forward_batch(params, spec, x[None, :])
    return logits[0], embedding[0]


def _backprop(layers, spec: ModelSpec, xb: np.ndarray, yb: np.ndarray):
    """Gradients of mean softmax cross-entropy over the batch.

    Returns (probs, grads) with grads as a list of (gw, gb) matching the
    layer layout. probs is returned so callers can derive the loss without
    a second pass.
    """
    logits, acts, zs = _forward_acts(layers, spec, xb)
    probs = softmax(logits)
    n = len(yb)
    dz = probs.copy()
    dz[np.arange(n), yb] -= 1.0
    dz /= n
    grads = [None] * len(layers)
    relu = spec.activation == "relu"
    for i in range(len(layers) - 1, -1, -1):
        gw = dz.T @ acts[i]
        gb = dz.sum(axis=0)
        grads[i] = (gw, gb)
        if i > 0:
            dz = dz @ layers[i][0]
            if relu:
                dz *= zs[i - 1] > 0
    return probs, grads


def loss_and_grad(params: ParamSet, spec: ModelSpec, x: np.ndarray, y: np.ndarray) -> tuple[float, Gradient]:
    """Mean softmax cross-entropy over the batch and its exact gradient.

    x: (n, input_dim) float array; y: (n,) integer labels in [0, num_classes).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if len(y) == 0:
        raise ValueError("empty batch")
    if y.min() < 0 or y.max() >= spec.num_classes:
        raise ValueError(f"labels must lie in [0, {spec.num_classes})")
    probs, grads = _backprop(params.layers, spec, x, y)
    eps = np.finfo(np.float64).tiny
    loss = float(-np.mean(np.log(probs[np.arange(len(y)), y] + eps)))
    return loss, ParamSet(grads)


def sgd_step(params: ParamSet, grad: Gradient, lr: float, proximal: tuple[float, ParamSet] | None = None) -> ParamSet:
    """One SGD step: params - lr * (grad + mu * (params - anchor)).

    proximal, when given, is (mu, anchor) with mu >= 0 and anchor
    shape-congruent; omitted means mu = 0.
    """
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    check_congruent(params, grad)
    if proximal is not None:
        mu, anchor = proximal
        if mu < 0:
            raise ValueError(f"proximal mu must be non-negative, got {mu}")
        check_congruent(params, anchor)
        out = []
        for (w, b), (gw, gb), (aw, ab) in zip(params.layers, grad.layers, anchor.layers):
            out.append((w - lr * (gw + mu * (w - aw)), b - lr * (gb + mu * (b - ab))))
        return ParamSet(out)
    return ParamSet([(w - lr * gw, b - lr * gb) for (w, b), (gw, gb) in zip(params.layers, grad.layers)])


def epoch_permutation(seed: int, epoch_index: int, n: int) -> np.ndarray:
    """The documented mini-batch shuffle schedule of local_train.

    Each epoch's sample order is an independent stream of (seed, epoch
    index), so a training run can be split across federated rounds and
    still replay identically to one continuous run.
    """
    return rand.rng(seed, rand.EPOCH, epoch_index).permutation(n)


def local_train(
    params: ParamSet,
    spec: ModelSpec,
    x: np.ndarray,
    y: np.ndarray,
    epochs: int,
    lr: float,
    batch_size: int,
    proximal: tuple[float, ParamSet] | None = None,
    seed: int = 0,
    epoch_offset: int = 0,
) -> ParamSet:
    """SGD over `epochs` full passes of (x, y) in seeded-shuffled mini-batches.

    epochs = 0 returns an identical copy of params. The final short batch
    of an epoch is used, with its gradient averaged over its actual size.
    epoch_offset positions the shuffle schedule (round t of a federated run
    uses offset t * F, making a single-client run bit-identical to one
    uninterrupted local_train of the same total length).
    """
    if epochs < 0:
        raise ValueError(f"epochs must be non-negative, got {epochs}")
    if batch_size < 1:
        raise ValueError(f"batch_size must be positive, got {batch_size}")
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if epochs == 0:
        return params.copy()
    if len(y) == 0:
        raise ValueError("empty training split")

    layers = [(w.copy(), b.copy()) for w, b in params.layers]
    mu = 0.0
    anchor = None
    if proximal is not None:
        mu, anchor = proximal
        if mu < 0:
            raise ValueError(f"proximal mu must be non-negative, got {mu}")
        check_congruent(params, anchor)
    n = len(y)
    for e in range(epochs):
        order = epoch_permutation(seed, epoch_offset + e, n)
        xs, ys = x[order], y[order]
        for s in range(0, n, batch_size):
            xb, yb = xs[s : s + batch_size], ys[s : s + batch_size]
            _, grads = _backprop(layers, spec, xb, yb)
            for i, ((w, b), (gw, gb)) in enumerate(zip(layers, grads)):
                if mu != 0.0:
                    gw = gw + mu * (w - anchor.layers[i][0])
                    gb = gb + mu * (b - anchor.layers[i][1])
                w -= lr * gw
                b -= lr * gb
    return ParamSet(layers)
