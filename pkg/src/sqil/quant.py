"""Uniform symmetric quantization: RTN calibration, fake-quant, STE/LSQ.

The quantizer maps a real tensor to signed integer codes,

    code = clip(round(w / gamma), -2^(b-1), 2^(b-1) - 1),

with round-half-away-from-zero and no zero point; dequantization is
code * gamma. Weight scales are per-tensor or per-output-channel (one
scale per weight-matrix row); activation scales are always per-tensor.

A FakeQuantPolicy wraps an MlpPolicy's latent float weights with a
QuantSpec and live scales. Its forward runs on dequantized weights (and,
when targeted, dequantized layer inputs), which is exactly what the
exported integer kernels reproduce. `ste_backward` implements the
straight-through estimator: gradients pass to in-range latent weights and
are zeroed where the quantizer clipped, and scale gradients follow the
emitted integer code (the local derivative of the dequantized value, which
matches central finite differences away from rounding boundaries; clipped
entries contribute the clip bound). The learned-step gradient scale
g = 1/sqrt(n_elements * (2^(b-1)-1)) is reported per scale tensor for the
training loop to apply; raw gradients are returned unscaled so they remain
comparable to finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import UsageError
from .nn import (
    Array,
    ForwardTrace,
    Gradients,
    MlpPolicy,
    _as_batch,
    backprop,
    check_finite,
)

PACKABLE_BITS = (3, 4, 8)
SCALE_FLOOR = 1e-12


@dataclass(frozen=True)
class QuantSpec:
    """Static quantization configuration.

    bits: integer width, >= 2 (3/4/8 are the packable widths).
    granularity: "per-tensor" | "per-channel" (weights only).
    scheme: "rtn" (frozen calibrated scales) | "lsq" (learned scales).
    targets: "weights" | "weights+activations".
    """

    bits: int = 4
    granularity: str = "per-channel"
    scheme: str = "lsq"
    targets: str = "weights+activations"

    def __post_init__(self) -> None:
        if not isinstance(self.bits, int) or self.bits < 2 or self.bits > 32:
            raise UsageError(f"bits must be an integer in [2, 32], got {self.bits!r}")
        if self.granularity not in ("per-tensor", "per-channel"):
            raise UsageError(f"unknown granularity {self.granularity!r}")
        if self.scheme not in ("rtn", "lsq"):
            raise UsageError(f"unknown scheme {self.scheme!r}")
        if self.targets not in ("weights", "weights+activations"):
            raise UsageError(f"unknown targets {self.targets!r}")

    @property
    def quantizes_activations(self) -> bool:
        return self.targets == "weights+activations"


def qmin(bits: int) -> int:
    return -(1 << (bits - 1))


def qmax(bits: int) -> int:
    return (1 << (bits - 1)) - 1


def round_half_away(x: Array) -> Array:
    """Round to nearest integer, ties away from zero (not banker's)."""
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _check_gamma(gamma) -> Array:
    g = np.asarray(gamma, dtype=np.float64)
    if (g <= 0).any():
        raise UsageError("gamma must be positive")
    return g


def quantize(w: Array, gamma, bits: int) -> Array:
    """Integer codes in [-2^(b-1), 2^(b-1)-1] as int64.

    gamma broadcasts against w: a scalar for per-tensor, or shape (rows, 1)
    against a (rows, cols) weight matrix for per-channel.
    """
    g = _check_gamma(gamma)
    w = np.asarray(w, dtype=np.float64)
    check_finite("quantize input", w)
    codes = round_half_away(w / g)
    return np.clip(codes, qmin(bits), qmax(bits)).astype(np.int64)


def dequantize(codes: Array, gamma) -> Array:
    g = _check_gamma(gamma)
    return np.asarray(codes, dtype=np.float64) * g


def fake_quant(w: Array, gamma, bits: int) -> Array:
    """dequantize(quantize(w)) in one step."""
    return dequantize(quantize(w, gamma, bits), gamma)


def calibrate_rtn(tensor: Array, spec: QuantSpec) -> Array:
    """Round-to-nearest scale(s): gamma = max|w| / (2^(b-1)-1).

    Returns shape (1,) for per-tensor, (rows,) for per-channel. All-zero
    tensors (or rows) get the 1e-12 floor so downstream math stays finite.
    """
    t = np.abs(np.asarray(tensor, dtype=np.float64))
    check_finite("calibration tensor", t)
    if spec.granularity == "per-channel":
        if t.ndim != 2:
            raise UsageError("per-channel calibration needs a 2-D weight matrix")
        peak = t.max(axis=1)
    else:
        peak = np.array([t.max()])
    return np.maximum(peak / qmax(spec.bits), SCALE_FLOOR)


def grad_scale(n_elements: int, bits: int) -> float:
    """Learned-step gradient scale for one scale tensor."""
    return 1.0 / np.sqrt(float(n_elements) * qmax(bits))


@dataclass
class QuantParams:
    """Live scales for one policy under one QuantSpec.

    weight_scales[i] has shape (out_i,) per-channel or (1,) per-tensor.
    act_scales[i] is the (1,) scale for the input of layer i; empty list
    when activations are not targeted.
    """

    weight_scales: list[Array]
    act_scales: list[Array] = field(default_factory=list)

    def copy(self) -> "QuantParams":
        return QuantParams(
            [s.copy() for s in self.weight_scales],
            [s.copy() for s in self.act_scales],
        )

    def flat(self) -> list[Array]:
        return list(self.weight_scales) + list(self.act_scales)


@dataclass
class FakeQuantPolicy:
    """Latent float policy + spec + scales; forwards run quantized."""

    base: MlpPolicy
    spec: QuantSpec
    params: QuantParams

    def copy(self) -> "FakeQuantPolicy":
        return FakeQuantPolicy(self.base.copy(), self.spec, self.params.copy())


def _validate(fq: FakeQuantPolicy) -> None:
    n = fq.base.n_layers
    if len(fq.params.weight_scales) != n:
        raise UsageError("weight scales do not match layer count")
    for i, (s, w) in enumerate(zip(fq.params.weight_scales, fq.base.weights)):
        want = w.shape[0] if fq.spec.granularity == "per-channel" else 1
        if s.shape != (want,):
            raise UsageError(f"layer {i} weight scale shape {s.shape}, expected ({want},)")
        _check_gamma(s)
    if fq.spec.quantizes_activations:
        if len(fq.params.act_scales) != n:
            raise UsageError("activation scales missing; calibrate before forward")
        for s in fq.params.act_scales:
            if s.shape != (1,):
                raise UsageError("activation scales must be per-tensor")
            _check_gamma(s)
    elif fq.params.act_scales:
        raise UsageError("activation scales present but spec targets weights only")


@dataclass
class FakeQuantTrace:
    """ForwardTrace plus the masks and codes the STE backward needs.

    trace.inputs hold the post-quantization layer inputs and trace.weights
    the dequantized matrices, so nn.backprop works on it unchanged.
    """

    trace: ForwardTrace
    w_codes: list[Array]
    w_in_range: list[Array]
    a_codes: list[Array]
    a_in_range: list[Array]


def effective_weights(fq: FakeQuantPolicy) -> tuple[list[Array], list[Array], list[Array]]:
    """Dequantized weight matrices plus codes and in-range masks."""
    _validate(fq)
    b = fq.spec.bits
    mats, codes_l, masks = [], [], []
    for w, s in zip(fq.base.weights, fq.params.weight_scales):
        gamma = s[:, None] if s.shape[0] > 1 else s
        raw = round_half_away(np.asarray(w) / gamma)
        in_range = (raw >= qmin(b)) & (raw <= qmax(b))
        codes = np.clip(raw, qmin(b), qmax(b)).astype(np.int64)
        mats.append(codes * gamma)
        codes_l.append(codes)
        masks.append(in_range)
    return mats, codes_l, masks


def fake_quant_trace(fq: FakeQuantPolicy, states: Array) -> tuple[Array, FakeQuantTrace]:
    """Fake-quantized batched forward with a backward-ready trace."""
    x, _ = _as_batch(fq.base.in_dim, states)
    if x.shape[0] == 0:
        raise UsageError("empty batch")
    check_finite("states", x)
    b = fq.spec.bits
    mats, w_codes, w_masks = effective_weights(fq)
    inputs, preacts, a_codes, a_masks = [], [], [], []
    for i, (w, bias) in enumerate(zip(mats, fq.base.biases)):
        if fq.spec.quantizes_activations:
            gamma = fq.params.act_scales[i]
            raw = round_half_away(x / gamma)
            a_masks.append((raw >= qmin(b)) & (raw <= qmax(b)))
            codes = np.clip(raw, qmin(b), qmax(b))
            a_codes.append(codes)
            x = codes * gamma
        inputs.append(x)
        z = x @ w.T + bias
        preacts.append(z)
        x = np.maximum(z, 0.0) if i < fq.base.n_layers - 1 else z
    check_finite("fake-quant forward", x)
    return x, FakeQuantTrace(ForwardTrace(inputs, mats, preacts), w_codes, w_masks, a_codes, a_masks)


def fake_quant_forward(fq: FakeQuantPolicy, state: Array) -> Array:
    """Action mean of the fake-quantized policy; 1-D or batched input."""
    x, single = _as_batch(fq.base.in_dim, state)
    mu, _ = fake_quant_trace(fq, x)
    return mu[0] if single else mu


@dataclass
class QuantGradients:
    """STE gradients for a fake-quantized forward.

    weights are latent-weight gradients (clip-masked); eff_weights are the
    pre-mask gradients w.r.t. the dequantized matrices, the quantity the
    finite-difference oracle can probe. Scale gradients are raw
    (unscaled); g_weight/g_act carry the learned-step factors.
    """

    weights: list[Array]
    biases: list[Array]
    eff_weights: list[Array]
    weight_scales: list[Array]
    act_scales: list[Array]
    g_weight: list[Array]
    g_act: list[float]


def ste_backward(fq: FakeQuantPolicy, tr: FakeQuantTrace, d_out: Array) -> QuantGradients:
    """Reverse pass with straight-through estimators at both quantizers."""
    n = fq.base.n_layers
    b = fq.spec.bits
    d_w_eff: list[Array] = [None] * n  # type: ignore[list-item]
    d_w: list[Array] = [None] * n  # type: ignore[list-item]
    d_b: list[Array] = [None] * n  # type: ignore[list-item]
    d_ws: list[Array] = [None] * n  # type: ignore[list-item]
    d_as: list[Array] = []
    act = fq.spec.quantizes_activations
    dz = np.asarray(d_out, dtype=np.float64)
    for i in range(n - 1, -1, -1):
        d_w_eff[i] = dz.T @ tr.trace.inputs[i]
        d_b[i] = dz.sum(axis=0)
        d_w[i] = d_w_eff[i] * tr.w_in_range[i]
        # d(dequantized)/d(gamma) is the emitted code everywhere the branch
        # is locally constant: the rounded code in range, the clip bound
        # outside. Per-channel scales sum over their row.
        contrib = d_w_eff[i] * tr.w_codes[i]
        d_ws[i] = contrib.sum(axis=1) if fq.params.weight_scales[i].shape[0] > 1 else np.array([contrib.sum()])
        dx = dz @ tr.trace.weights[i]
        if act:
            d_as.append(np.array([(dx * tr.a_codes[i]).sum()]))
            dx = dx * tr.a_in_range[i]
        if i > 0:
            dz = dx * (tr.trace.preacts[i - 1] > 0.0)
    d_as.reverse()
    g_w = [
        np.full_like(
            s,
            grad_scale(
                w.shape[1] if s.shape[0] > 1 else w.size,
                b,
            ),
        )
        for s, w in zip(fq.params.weight_scales, fq.base.weights)
    ]
    g_a = [grad_scale(inp.size, b) for inp in tr.trace.inputs] if act else []
    check_finite("ste gradients", *d_w, *d_b, *d_ws, *d_as)
    return QuantGradients(d_w, d_b, d_w_eff, d_ws, d_as, g_w, g_a)


def calibrate_weight_scales(policy: MlpPolicy, spec: QuantSpec) -> list[Array]:
    return [calibrate_rtn(w, spec) for w in policy.weights]


def calibrate_act_scales(policy: MlpPolicy, spec: QuantSpec, calib_states: Array) -> list[Array]:
    """Per-site activation scales from a fixed calibration batch.

    gamma_i = mean(2 |a| / sqrt(2^(b-1)-1)) over the full-precision inputs
    reaching layer i, floored at 1e-12. The learned-step scheme uses this
    as its initial value; the frozen scheme uses it as-is.
    """
    x, _ = _as_batch(policy.in_dim, calib_states)
    if x.shape[0] == 0:
        raise UsageError("empty calibration batch")
    root = np.sqrt(qmax(spec.bits))
    scales = []
    for i, (w, bias) in enumerate(zip(policy.weights, policy.biases)):
        scales.append(np.array([max(2.0 * np.abs(x).mean() / root, SCALE_FLOOR)]))
        z = x @ w.T + bias
        x = np.maximum(z, 0.0) if i < policy.n_layers - 1 else z
    return scales


def make_fake_quant(
    policy: MlpPolicy, spec: QuantSpec, calib_states: Array | None = None
) -> FakeQuantPolicy:
    """PTQ construction: copy the policy and calibrate every scale.

    This is the round-to-nearest baseline when used directly, and the
    initialization of every trained quantized arm. Activation targets
    require a calibration batch.
    """
    w_scales = calibrate_weight_scales(policy, spec)
    if spec.quantizes_activations:
        if calib_states is None:
            raise UsageError("activation quantization needs calibration states")
        a_scales = calibrate_act_scales(policy, spec, calib_states)
    else:
        a_scales = []
    return FakeQuantPolicy(policy.copy(), spec, QuantParams(w_scales, a_scales))
