"""Dense MLP policies with hand-written reverse-mode gradients and Adam.

The policy is a fixed-topology multilayer perceptron: affine layers with
ReLU on the hidden layers and an identity output read as the mean of a
fixed-variance Gaussian over actions. With the variance held constant the
behavior-cloning negative log-likelihood reduces to a scaled mean squared
error, so `backward` computes gradients of the weighted MSE head directly.

All math is float64 and row-major. Weight matrices are (out, in) so a row
is one output channel. There is no autograd graph: `trace_forward` records
the per-layer values a backward pass needs, and `backprop` consumes the
trace. The quantization module builds compatible traces for fake-quantized
forwards and reuses `backprop` unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, UsageError

Array = np.ndarray


def check_finite(name: str, *arrays: Array) -> None:
    """Abort with NumericError if any array contains NaN or infinity."""
    for a in arrays:
        if not np.isfinite(a).all():
            raise NumericError(f"non-finite values in {name}")


@dataclass
class MlpPolicy:
    """MLP action-mean policy plus the fixed Gaussian head width.

    layer_dims lists the input dim, hidden widths, and output dim, so a
    policy with layer_dims [7, 64, 64, 3] has three affine layers.
    """

    layer_dims: list[int]
    weights: list[Array]
    biases: list[Array]
    action_sigma: float = 0.1

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1]

    def copy(self) -> "MlpPolicy":
        return MlpPolicy(
            list(self.layer_dims),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.action_sigma,
        )


def init_policy(layer_dims: list[int], seed: int = 0, action_sigma: float = 0.1) -> MlpPolicy:
    """He-initialized policy; deterministic for a given seed."""
    if len(layer_dims) < 2 or any(d < 1 for d in layer_dims):
        raise UsageError(f"bad layer_dims {layer_dims}")
    if action_sigma <= 0:
        raise UsageError("action_sigma must be positive")
    rng = np.random.Generator(np.random.PCG64(seed))
    weights, biases = [], []
    for din, dout in zip(layer_dims[:-1], layer_dims[1:]):
        std = np.sqrt(2.0 / din)
        weights.append(rng.normal(0.0, std, size=(dout, din)))
        biases.append(np.zeros(dout))
    return MlpPolicy(list(layer_dims), weights, biases, action_sigma)


def _as_batch(policy_in_dim: int, states: Array) -> tuple[Array, bool]:
    states = np.asarray(states, dtype=np.float64)
    single = states.ndim == 1
    if single:
        states = states[None, :]
    if states.ndim != 2 or states.shape[1] != policy_in_dim:
        raise UsageError(
            f"state shape {states.shape} incompatible with input dim {policy_in_dim}"
        )
    return states, single


@dataclass
class ForwardTrace:
    """Everything backprop needs: per-layer inputs, weights used, preacts."""

    inputs: list[Array]
    weights: list[Array]
    preacts: list[Array]


@dataclass
class Gradients:
    weights: list[Array]
    biases: list[Array]


def trace_forward(policy: MlpPolicy, states: Array) -> tuple[Array, ForwardTrace]:
    """Batched forward pass recording a trace. states is (B, in_dim)."""
    x, _ = _as_batch(policy.in_dim, states)
    if x.shape[0] == 0:
        raise UsageError("empty batch")
    check_finite("states", x)
    inputs, preacts = [], []
    for i, (w, b) in enumerate(zip(policy.weights, policy.biases)):
        inputs.append(x)
        z = x @ w.T + b
        preacts.append(z)
        x = np.maximum(z, 0.0) if i < policy.n_layers - 1 else z
    check_finite("forward", x)
    return x, ForwardTrace(inputs, list(policy.weights), preacts)


def forward(policy: MlpPolicy, state: Array) -> Array:
    """Action mean for one state (1-D) or a batch (2-D). Pure."""
    x, single = _as_batch(policy.in_dim, state)
    mu, _ = trace_forward(policy, x)
    return mu[0] if single else mu


def backprop(trace: ForwardTrace, d_out: Array) -> Gradients:
    """Reverse pass through a recorded trace given dL/d(output)."""
    n = len(trace.weights)
    d_w: list[Array] = [None] * n  # type: ignore[list-item]
    d_b: list[Array] = [None] * n  # type: ignore[list-item]
    dz = np.asarray(d_out, dtype=np.float64)
    for i in range(n - 1, -1, -1):
        d_w[i] = dz.T @ trace.inputs[i]
        d_b[i] = dz.sum(axis=0)
        if i > 0:
            dx = dz @ trace.weights[i]
            dz = dx * (trace.preacts[i - 1] > 0.0)
    check_finite("gradients", *d_w, *d_b)
    return Gradients(d_w, d_b)


def backward(
    policy: MlpPolicy,
    states: Array,
    targets: Array,
    sample_weights: Array | None = None,
) -> tuple[Gradients, float]:
    """Gradients and value of the weighted Gaussian-NLL (scaled MSE) loss.

    loss = sum_i w_i * ||mu(s_i) - y_i||^2 / (2 sigma^2) / sum_i w_i,
    the constant log-term dropped. All-zero weights give zero loss and
    zero gradients. Weights must be nonnegative.
    """
    x, _ = _as_batch(policy.in_dim, states)
    y = np.asarray(targets, dtype=np.float64)
    if y.ndim == 1:
        y = y[None, :]
    if y.shape != (x.shape[0], policy.out_dim):
        raise UsageError(f"target shape {y.shape} does not match ({x.shape[0]}, {policy.out_dim})")
    if x.shape[0] == 0:
        raise UsageError("empty batch")
    if sample_weights is None:
        w = np.ones(x.shape[0])
    else:
        w = np.asarray(sample_weights, dtype=np.float64)
        if w.shape != (x.shape[0],):
            raise UsageError("sample_weights shape mismatch")
        if (w < 0).any():
            raise UsageError("sample_weights must be nonnegative")
    total = w.sum()
    if total == 0.0:
        zero = Gradients(
            [np.zeros_like(p) for p in policy.weights],
            [np.zeros_like(b) for b in policy.biases],
        )
        return zero, 0.0
    mu, trace = trace_forward(policy, x)
    diff = mu - y
    inv = 1.0 / (2.0 * policy.action_sigma**2)
    loss = float((w * (diff**2).sum(axis=1)).sum() * inv / total)
    d_mu = (w[:, None] * diff) * (2.0 * inv / total)
    grads = backprop(trace, d_mu)
    check_finite("loss", np.array([loss]))
    return grads, loss


@dataclass
class AdamState:
    """Adam moments for a flat list of parameter arrays."""

    m: list[Array]
    v: list[Array]
    step: int
    lr: float
    beta1: float
    beta2: float
    eps: float


def init_adam(
    params: list[Array],
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    if lr <= 0:
        raise UsageError("lr must be positive")
    return AdamState(
        [np.zeros_like(p) for p in params],
        [np.zeros_like(p) for p in params],
        0,
        lr,
        beta1,
        beta2,
        eps,
    )


def adam_step(
    params: list[Array], grads: list[Array], state: AdamState
) -> tuple[list[Array], AdamState]:
    """One in-place Adam update. Deterministic; returns the same objects."""
    if len(params) != len(state.m) or len(grads) != len(params):
        raise UsageError("param/grad/state length mismatch")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise UsageError(f"grad shape {g.shape} does not match param {p.shape}")
        check_finite("adam gradient", g)
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        check_finite("adam params", p)
    return params, state
