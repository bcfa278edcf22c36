"""Small fully-connected networks with exact reverse-mode gradients and Adam.

Both approximators share one architecture family: three tanh hidden layers
and a linear output.  The policy head for a network with J classes and L
stations is (J, 10J, round(10*sqrt(LJ)), 10L, J+L): one logit per class plus
one idle logit per station.  The value head is (J, 10J, round(10*sqrt(J)),
10, 1).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteParameter


@dataclass(frozen=True)
class MlpArchitecture:
    layer_sizes: tuple[int, ...]

    @staticmethod
    def policy(num_classes: int, num_stations: int) -> "MlpArchitecture":
        J, L = num_classes, num_stations
        return MlpArchitecture(
            (J, 10 * J, int(round(10.0 * np.sqrt(L * J))), 10 * L, J + L)
        )

    @staticmethod
    def value(num_classes: int) -> "MlpArchitecture":
        J = num_classes
        return MlpArchitecture((J, 10 * J, int(round(10.0 * np.sqrt(J))), 10, 1))

    @property
    def num_layers(self) -> int:
        return len(self.layer_sizes) - 1


class MlpParams:
    """Weight matrices (fan_in, fan_out) and bias vectors for each layer."""

    def __init__(self, architecture: MlpArchitecture, weights, biases):
        self.architecture = architecture
        self.weights = [np.asarray(w, dtype=float) for w in weights]
        self.biases = [np.asarray(b, dtype=float) for b in biases]
        sizes = architecture.layer_sizes
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (sizes[k], sizes[k + 1]) or b.shape != (sizes[k + 1],):
                raise ValueError(f"layer {k} shape mismatch: {w.shape}, {b.shape}")
        if not all(np.all(np.isfinite(w)) for w in self.weights) or not all(
            np.all(np.isfinite(b)) for b in self.biases
        ):
            raise NonFiniteParameter("network parameters contain NaN or inf")

    def copy(self) -> "MlpParams":
        return MlpParams(
            self.architecture,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
        )


def zero_params(architecture: MlpArchitecture) -> MlpParams:
    sizes = architecture.layer_sizes
    return MlpParams(
        architecture,
        [np.zeros((sizes[k], sizes[k + 1])) for k in range(architecture.num_layers)],
        [np.zeros(sizes[k + 1]) for k in range(architecture.num_layers)],
    )


def xavier_init(architecture: MlpArchitecture, rng: np.random.Generator) -> MlpParams:
    """Glorot-uniform weights on +-sqrt(6/(fan_in+fan_out)), zero biases."""
    sizes = architecture.layer_sizes
    weights, biases = [], []
    for k in range(architecture.num_layers):
        fan_in, fan_out = sizes[k], sizes[k + 1]
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpParams(architecture, weights, biases)


def forward(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Batch forward pass; accepts a single state vector or an (n, J) batch."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    a = x[None, :] if single else x
    last = params.architecture.num_layers - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        a = a @ w + b
        if k < last:
            a = np.tanh(a)
    if not np.all(np.isfinite(a)):
        raise NonFiniteParameter("non-finite network output")
    return a[0] if single else a


def forward_with_cache(params: MlpParams, x: np.ndarray):
    """Forward pass keeping layer activations for the backward pass."""
    a = np.asarray(x, dtype=float)
    if a.ndim == 1:
        a = a[None, :]
    activations = [a]
    last = params.architecture.num_layers - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        a = a @ w + b
        if k < last:
            a = np.tanh(a)
        activations.append(a)
    return activations[-1], activations


def backward(params: MlpParams, x: np.ndarray, grad_output: np.ndarray, cache=None):
    """Exact gradients of ``sum_i <grad_output_i, output_i>`` w.r.t. parameters.

    Returns ``[(dW, db), ...]`` per layer, summed over the batch; callers that
    want a mean gradient fold 1/m into ``grad_output``.
    """
    if cache is None:
        _, cache = forward_with_cache(params, x)
    grad_output = np.asarray(grad_output, dtype=float)
    if grad_output.ndim == 1:
        grad_output = grad_output[None, :]
    n_layers = params.architecture.num_layers
    grads = [None] * n_layers
    delta = grad_output
    for k in range(n_layers - 1, -1, -1):
        a_in = cache[k]
        grads[k] = (a_in.T @ delta, delta.sum(axis=0))
        if k > 0:
            delta = (delta @ params.weights[k].T) * (1.0 - cache[k] ** 2)
    return grads


class AdamState:
    """First/second moment accumulators; the step counter persists across epochs."""

    def __init__(self, params: MlpParams, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m = [
            (np.zeros_like(w), np.zeros_like(b))
            for w, b in zip(params.weights, params.biases)
        ]
        self.v = [
            (np.zeros_like(w), np.zeros_like(b))
            for w, b in zip(params.weights, params.biases)
        ]


def adam_step(params: MlpParams, state: AdamState, grads, learning_rate: float):
    """One Adam update with bias correction; mutates params and state in place."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for k, (gw, gb) in enumerate(grads):
        mw, mb = state.m[k]
        vw, vb = state.v[k]
        mw *= b1
        mw += (1.0 - b1) * gw
        mb *= b1
        mb += (1.0 - b1) * gb
        vw *= b2
        vw += (1.0 - b2) * gw * gw
        vb *= b2
        vb += (1.0 - b2) * gb * gb
        params.weights[k] -= learning_rate * (mw / c1) / (np.sqrt(vw / c2) + state.eps)
        params.biases[k] -= learning_rate * (mb / c1) / (np.sqrt(vb / c2) + state.eps)
    return params, state
