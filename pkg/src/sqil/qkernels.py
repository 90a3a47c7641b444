"""Bit-packed integer inference kernels and their latency bench.

Storage types hold integer weight codes with per-output-row scales:
Int8Matrix keeps one signed byte per weight, PackedInt4Matrix keeps two
signed 4-bit two's-complement codes per byte with the even column in the
low nibble. The GEMM accumulates in i32 and must match a naive integer
reference bit for bit; the weight-only matvec decodes nibbles on the fly
and must match the materialized dequantized matvec to float precision.

A trained fake-quant policy exports to a stack of integer layers whose
inference reproduces the fake-quant forward: activation-quantizing specs
quantize activations to codes and push the scales outside the integer
GEMM, weight-only specs run float activations against decoded weights.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numba
import numpy as np

from .errors import UsageError
from .nn import Array
from .quant import (
    FakeQuantPolicy,
    effective_weights,
    qmax,
    qmin,
    round_half_away,
)

GEMM_MAX_K = 1 << 23
BENCH_SIZES = (64, 128, 256)
BENCH_REPEATS = 1000


# ------------------------------------------------------------ storage types


@dataclass(frozen=True)
class Int8Matrix:
    """rows x cols signed-byte codes with a per-row dequantization scale."""

    rows: int
    cols: int
    data: Array
    scales: Array

    def __post_init__(self) -> None:
        if self.rows < 1 or self.cols < 1:
            raise UsageError("matrix dimensions must be >= 1")
        if self.data.dtype != np.int8 or self.data.shape != (self.rows, self.cols):
            raise UsageError("data must be int8 with shape (rows, cols)")
        _check_scales(self.scales, self.rows)

    @property
    def weight_nbytes(self) -> int:
        return int(self.data.nbytes)

    @property
    def nbytes(self) -> int:
        return int(self.data.nbytes + self.scales.nbytes)


@dataclass(frozen=True)
class PackedInt4Matrix:
    """Nibble-packed codes: byte b holds columns (2b | 2b+1) as (low | high).

    Each nibble is a signed 4-bit two's-complement code in [-8, 7]; odd
    column counts leave the final high nibble zero.
    """

    rows: int
    cols: int
    data: Array
    scales: Array

    def __post_init__(self) -> None:
        if self.rows < 1 or self.cols < 1:
            raise UsageError("matrix dimensions must be >= 1")
        per_row = (self.cols + 1) // 2
        if self.data.dtype != np.uint8 or self.data.shape != (self.rows * per_row,):
            raise UsageError("data must be uint8 with rows * ceil(cols/2) bytes")
        _check_scales(self.scales, self.rows)

    @property
    def weight_nbytes(self) -> int:
        return int(self.data.nbytes)

    @property
    def nbytes(self) -> int:
        return int(self.data.nbytes + self.scales.nbytes)


def _check_scales(scales: Array, rows: int) -> None:
    if scales.dtype != np.float64 or scales.shape != (rows,):
        raise UsageError("scales must be float64 with one entry per row")
    if (scales <= 0).any():
        raise UsageError("scales must be positive")


def pack_int4(codes: Array, scales: Array | None = None) -> PackedInt4Matrix:
    """Pack integer codes in [-8, 7] two per byte, low nibble first."""
    c = np.asarray(codes)
    if c.ndim != 2:
        raise UsageError("codes must be a 2-D matrix")
    if c.size == 0:
        raise UsageError("codes must be non-empty")
    if not np.issubdtype(c.dtype, np.integer):
        raise UsageError("codes must be integers")
    if c.min() < -8 or c.max() > 7:
        raise UsageError("int4 codes must lie in [-8, 7]")
    rows, cols = c.shape
    if cols % 2:
        c = np.concatenate([c, np.zeros((rows, 1), dtype=c.dtype)], axis=1)
    nib = (c.astype(np.int64) & 0xF).astype(np.uint8)
    packed = (nib[:, 0::2] | (nib[:, 1::2] << 4)).reshape(-1)
    if scales is None:
        scales = np.ones(rows, dtype=np.float64)
    return PackedInt4Matrix(rows, cols, packed, np.asarray(scales, dtype=np.float64))


def unpack_int4(m: PackedInt4Matrix) -> Array:
    """Inverse of pack_int4: signed codes as an int64 (rows, cols) matrix."""
    per_row = (m.cols + 1) // 2
    bytes_ = m.data.reshape(m.rows, per_row).astype(np.int64)
    lo = bytes_ & 0xF
    hi = (bytes_ >> 4) & 0xF
    wide = np.empty((m.rows, 2 * per_row), dtype=np.int64)
    wide[:, 0::2] = lo
    wide[:, 1::2] = hi
    wide[wide >= 8] -= 16
    return wide[:, : m.cols]


# ------------------------------------------------------------ jitted kernels


@numba.njit(cache=True)
def _gemm_i8_bt(a, bt, out):  # pragma: no cover - compiled
    m, k = a.shape
    n = bt.shape[0]
    for i in range(m):
        for j in range(n):
            acc = np.int32(0)
            for p in range(k):
                acc += np.int32(a[i, p]) * np.int32(bt[j, p])
            out[i, j] = acc


@numba.njit(cache=True, parallel=True)
def _gemm_i8_bt_par(a, bt, out):  # pragma: no cover - compiled
    m, k = a.shape
    n = bt.shape[0]
    for i in numba.prange(m):
        for j in range(n):
            acc = np.int32(0)
            for p in range(k):
                acc += np.int32(a[i, p]) * np.int32(bt[j, p])
            out[i, j] = acc


@numba.njit(cache=True)
def _gemm_f32_naive(a, b, out):  # pragma: no cover - compiled
    m, k = a.shape
    n = b.shape[1]
    for i in range(m):
        for j in range(n):
            acc = np.float32(0.0)
            for p in range(k):
                acc += a[i, p] * b[p, j]
            out[i, j] = acc


@numba.njit(cache=True)
def _matvec_packed4(data, rows, cols, scales, x, out):  # pragma: no cover - compiled
    per_row = (cols + 1) // 2
    for r in range(rows):
        acc = 0.0
        base = r * per_row
        for bi in range(per_row):
            byte = data[base + bi]
            lo = np.int64(byte & 0xF)
            if lo >= 8:
                lo -= 16
            acc += lo * np.float64(x[2 * bi])
            col = 2 * bi + 1
            if col < cols:
                hi = np.int64((byte >> 4) & 0xF)
                if hi >= 8:
                    hi -= 16
                acc += hi * np.float64(x[col])
        out[r] = np.float32(acc * scales[r])


def _as_i8(name: str, m: Array) -> Array:
    a = np.asarray(m)
    if a.ndim != 2 or a.size == 0:
        raise UsageError(f"{name} must be a non-empty 2-D matrix")
    if a.dtype == np.int8:
        return np.ascontiguousarray(a)
    if not np.issubdtype(a.dtype, np.integer):
        raise UsageError(f"{name} must hold integer codes")
    if a.min() < -128 or a.max() > 127:
        raise UsageError(f"{name} codes exceed the int8 range")
    return np.ascontiguousarray(a.astype(np.int8))


def gemm_i8i8_i32(a: Array, b: Array, parallel: bool = False) -> Array:
    """(m,k) @ (k,n) on int8 codes with an i32 accumulator."""
    A = _as_i8("a", a)
    B = _as_i8("b", b)
    if A.shape[1] != B.shape[0]:
        raise UsageError(f"inner dimensions differ: {A.shape} @ {B.shape}")
    if A.shape[1] > GEMM_MAX_K:
        raise UsageError(f"k exceeds the supported bound {GEMM_MAX_K}")
    bt = np.ascontiguousarray(B.T)
    out = np.empty((A.shape[0], B.shape[1]), dtype=np.int32)
    (_gemm_i8_bt_par if parallel else _gemm_i8_bt)(A, bt, out)
    return out


def gemm_f32_naive(a: Array, b: Array) -> Array:
    """Reference triple-loop float32 GEMM used as the latency baseline."""
    A = np.ascontiguousarray(np.asarray(a, dtype=np.float32))
    B = np.ascontiguousarray(np.asarray(b, dtype=np.float32))
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[0]:
        raise UsageError(f"bad GEMM shapes: {A.shape} @ {B.shape}")
    out = np.empty((A.shape[0], B.shape[1]), dtype=np.float32)
    _gemm_f32_naive(A, B, out)
    return out


def matvec_w4_f32(w: PackedInt4Matrix, x: Array) -> Array:
    """Weight-only int4 matvec: decode nibbles on the read path."""
    if not isinstance(w, PackedInt4Matrix):
        raise UsageError("matvec_w4_f32 expects a PackedInt4Matrix")
    v = np.ascontiguousarray(np.asarray(x, dtype=np.float32).reshape(-1))
    if v.shape[0] != w.cols:
        raise UsageError(f"vector length {v.shape[0]} does not match cols {w.cols}")
    out = np.empty(w.rows, dtype=np.float32)
    _matvec_packed4(w.data, w.rows, w.cols, w.scales, v, out)
    return out


def warm_kernels() -> None:
    """Trigger every kernel's JIT compile outside any timed region."""
    a = np.ones((2, 3), dtype=np.int8)
    b = np.ones((3, 2), dtype=np.int8)
    gemm_i8i8_i32(a, b)
    gemm_i8i8_i32(a, b, parallel=True)
    gemm_f32_naive(a, b)
    matvec_w4_f32(pack_int4(np.ones((2, 3), dtype=np.int64)), np.ones(3))


# ------------------------------------------------------------ model export


@dataclass(frozen=True)
class QuantizedLayer:
    """One exported layer: integer weights, float bias, input-site scale."""

    weight: Int8Matrix | PackedInt4Matrix
    bias: Array
    act_scale: float | None

    def __post_init__(self) -> None:
        if self.bias.shape != (self.weight.rows,):
            raise UsageError("bias length must match output rows")
        if self.act_scale is not None and self.act_scale <= 0:
            raise UsageError("act_scale must be positive")


@dataclass(frozen=True)
class QuantizedModel:
    """Integer-layer MLP: ReLU between layers, identity on the last."""

    layers: tuple[QuantizedLayer, ...]
    bits: int

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.cols

    @property
    def weight_nbytes(self) -> int:
        return sum(l.weight.weight_nbytes for l in self.layers)


def export_quantized(fq: FakeQuantPolicy) -> QuantizedModel:
    """Materialize a fake-quant policy's current codes as integer layers."""
    bits = fq.spec.bits
    if bits > 8:
        raise UsageError("integer export supports widths up to 8 bits")
    _, codes_l, _ = effective_weights(fq)
    layers = []
    for i, codes in enumerate(codes_l):
        s = fq.params.weight_scales[i]
        rows = codes.shape[0]
        scales = np.broadcast_to(s.astype(np.float64), (rows,)).copy() if s.shape[0] == 1 \
            else s.astype(np.float64).copy()
        if bits <= 4:
            weight = pack_int4(codes, scales)
        else:
            weight = Int8Matrix(rows, codes.shape[1], codes.astype(np.int8), scales)
        act = (
            float(fq.params.act_scales[i][0])
            if fq.spec.quantizes_activations
            else None
        )
        layers.append(QuantizedLayer(weight, fq.base.biases[i].astype(np.float64), act))
    return QuantizedModel(tuple(layers), bits)


def _layer_codes(weight: Int8Matrix | PackedInt4Matrix) -> Array:
    if isinstance(weight, PackedInt4Matrix):
        return unpack_int4(weight)
    return weight.data.astype(np.int64)


def infer(model: QuantizedModel, states: Array) -> Array:
    """Batched forward through the integer layers.

    Activation-quantizing layers run the int8 GEMM on activation codes
    and apply gamma_a * gamma_w outside the accumulator; weight-only
    layers keep float activations (the int4 form uses the nibble-decode
    matvec, the int8 form a materialized dequantized matmul).
    """
    x = np.asarray(states, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.in_dim:
        raise UsageError(f"expected observations of width {model.in_dim}")
    n_layers = len(model.layers)
    for i, layer in enumerate(model.layers):
        w = layer.weight
        if layer.act_scale is not None:
            g_a = layer.act_scale
            codes = np.clip(
                round_half_away(x / g_a), qmin(model.bits), qmax(model.bits)
            ).astype(np.int8)
            acc = gemm_i8i8_i32(codes, _layer_codes(w).astype(np.int8).T)
            z = acc.astype(np.float64) * (g_a * w.scales)[None, :] + layer.bias
        elif isinstance(w, PackedInt4Matrix):
            z = np.empty((x.shape[0], w.rows))
            for r in range(x.shape[0]):
                z[r] = matvec_w4_f32(w, x[r]).astype(np.float64)
            z += layer.bias
        else:
            z = x @ (w.data.astype(np.float64) * w.scales[:, None]).T + layer.bias
        x = np.maximum(z, 0.0) if i < n_layers - 1 else z
    return x[0] if single else x


# ------------------------------------------------------------ benchmarking


@dataclass(frozen=True)
class GemmBenchReport:
    """Median kernel latency per square size against the f32 baseline."""

    sizes: tuple[int, ...]
    repeats: int
    median_ns_i8: tuple[float, ...]
    median_ns_f32: tuple[float, ...]
    speedup: tuple[float, ...]
    gbps: tuple[float, ...]

    def rows(self):
        return list(
            zip(self.sizes, self.median_ns_i8, self.median_ns_f32, self.speedup, self.gbps)
        )


def _median_time_ns(fn, repeats: int) -> float:
    samples = np.empty(repeats)
    for r in range(repeats):
        t0 = time.perf_counter_ns()
        fn()
        samples[r] = time.perf_counter_ns() - t0
    return float(np.median(samples))


def bench(
    sizes: tuple[int, ...] = BENCH_SIZES,
    repeats: int = BENCH_REPEATS,
    parallel: bool = False,
    seed: int = 0,
) -> GemmBenchReport:
    """Time the int8 GEMM and the naive f32 GEMM on square matrices."""
    if not sizes or any(s < 1 for s in sizes):
        raise UsageError("sizes must be positive")
    if repeats < 1:
        raise UsageError("repeats must be >= 1")
    warm_kernels()
    rng = np.random.Generator(np.random.PCG64(seed))
    med_i8, med_f32, speed, gbps = [], [], [], []
    for s in sizes:
        A = rng.integers(-128, 128, size=(s, s), dtype=np.int64).astype(np.int8)
        B = rng.integers(-128, 128, size=(s, s), dtype=np.int64).astype(np.int8)
        Af = A.astype(np.float32)
        Bf = B.astype(np.float32)
        t_i8 = _median_time_ns(lambda: gemm_i8i8_i32(A, B, parallel=parallel), repeats)
        t_f32 = _median_time_ns(lambda: gemm_f32_naive(Af, Bf), repeats)
        med_i8.append(t_i8)
        med_f32.append(t_f32)
        speed.append(t_f32 / t_i8)
        touched = 2 * s * s + 4 * s * s  # two i8 operands in, one i32 out
        gbps.append(touched / t_i8)  # bytes per ns == GB/s
    return GemmBenchReport(
        tuple(int(s) for s in sizes),
        repeats,
        tuple(med_i8),
        tuple(med_f32),
        tuple(speed),
        tuple(gbps),
    )
