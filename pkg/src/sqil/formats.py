"""Binary artifact files, CSV emitters, and a dependency-free SVG plotter.

Every format is little-endian with an 8-byte magic and a u16 version and
round-trips bit-exactly: writing what read() returned reproduces the
file byte for byte. Malformed or truncated files raise FileFormatError,
which is an OSError so the CLI maps it to the io category.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

from .envs import ExpertDataset, Trajectory
from .errors import UsageError
from .nn import Array, MlpPolicy
from .qkernels import Int8Matrix, PackedInt4Matrix, QuantizedLayer, QuantizedModel
from .quant import FakeQuantPolicy, QuantParams, QuantSpec
from .saliency import PerturbationSpec, SisTable

MAGIC_CKPT = b"SQILCKPT"
MAGIC_DATA = b"SQILDATA"
MAGIC_SIS = b"SQILSIS1"
MAGIC_QMOD = b"SQILQMOD"
FORMAT_VERSION = 1

ENV_CODES = {"pickplace": 0, "lane": 1}
OBS_CODES = {"vector": 0, "image32": 1}
GRAN_CODES = {"per-tensor": 0, "per-channel": 1}
SCHEME_CODES = {"rtn": 0, "lsq": 1}
TARGET_CODES = {"weights": 0, "weights+activations": 1}

_ENV_NAMES = {v: k for k, v in ENV_CODES.items()}
_OBS_NAMES = {v: k for k, v in OBS_CODES.items()}
_GRAN_NAMES = {v: k for k, v in GRAN_CODES.items()}
_SCHEME_NAMES = {v: k for k, v in SCHEME_CODES.items()}
_TARGET_NAMES = {v: k for k, v in TARGET_CODES.items()}


class FileFormatError(OSError):
    """The file is not a valid artifact of the expected format."""


class _Writer:
    def __init__(self) -> None:
        self.parts: list[bytes] = []

    def raw(self, b: bytes) -> None:
        self.parts.append(b)

    def u8(self, v: int) -> None:
        self.parts.append(struct.pack("<B", v))

    def u16(self, v: int) -> None:
        self.parts.append(struct.pack("<H", v))

    def u32(self, v: int) -> None:
        self.parts.append(struct.pack("<I", v))

    def u64(self, v: int) -> None:
        self.parts.append(struct.pack("<Q", v))

    def f64(self, v: float) -> None:
        self.parts.append(struct.pack("<d", v))

    def f64s(self, a: Array) -> None:
        self.parts.append(np.asarray(a, dtype="<f8").tobytes())

    def f32s(self, a: Array) -> None:
        self.parts.append(np.asarray(a, dtype="<f4").tobytes())

    def blob(self) -> bytes:
        return b"".join(self.parts)


class _Reader:
    def __init__(self, buf: bytes, label: str) -> None:
        self.buf = buf
        self.off = 0
        self.label = label

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise FileFormatError(f"{self.label}: truncated file")
        out = self.buf[self.off : self.off + n]
        self.off += n
        return out

    def u8(self) -> int:
        return struct.unpack("<B", self.take(1))[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.take(8))[0]

    def f64s(self, n: int) -> Array:
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64)

    def f32s(self, n: int) -> Array:
        return np.frombuffer(self.take(4 * n), dtype="<f4").astype(np.float32)

    def done(self) -> None:
        if self.off != len(self.buf):
            raise FileFormatError(f"{self.label}: {len(self.buf) - self.off} trailing bytes")


def _open_reader(path: str, magic: bytes) -> _Reader:
    with open(path, "rb") as fh:
        buf = fh.read()
    r = _Reader(buf, path)
    if r.take(8) != magic:
        raise FileFormatError(f"{path}: bad magic, expected {magic.decode()}")
    version = r.u16()
    if version != FORMAT_VERSION:
        raise FileFormatError(f"{path}: unsupported version {version}")
    return r


def _code_for(table: dict, value: str, what: str) -> int:
    if value not in table:
        raise UsageError(f"cannot serialize {what} {value!r}")
    return table[value]


def _name_for(table: dict, code: int, what: str, label: str) -> str:
    if code not in table:
        raise FileFormatError(f"{label}: unknown {what} code {code}")
    return table[code]


def file_sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        h.update(fh.read())
    return h.hexdigest()


# ------------------------------------------------------------- checkpoints


def write_checkpoint(path: str, policy) -> None:
    """Policy weights (and live quantization scales) to one binary file."""
    if isinstance(policy, FakeQuantPolicy):
        base, fq = policy.base, policy
    elif isinstance(policy, MlpPolicy):
        base, fq = policy, None
    else:
        raise UsageError(f"cannot checkpoint object of type {type(policy).__name__}")
    w = _Writer()
    w.raw(MAGIC_CKPT)
    w.u16(FORMAT_VERSION)
    w.u8(0 if fq is None else 1)
    dims = [base.in_dim] + [wt.shape[0] for wt in base.weights]
    w.u32(len(base.weights))
    for d in dims:
        w.u32(d)
    w.f64(base.action_sigma)
    for wt, b in zip(base.weights, base.biases):
        w.f64s(wt)
        w.f64s(b)
    if fq is not None:
        spec = fq.spec
        w.u8(spec.bits)
        w.u8(_code_for(GRAN_CODES, spec.granularity, "granularity"))
        w.u8(_code_for(SCHEME_CODES, spec.scheme, "scheme"))
        w.u8(_code_for(TARGET_CODES, spec.targets, "targets"))
        for s in fq.params.weight_scales:
            w.u32(s.shape[0])
            w.f64s(s)
        if spec.quantizes_activations:
            for s in fq.params.act_scales:
                w.f64s(s)
    with open(path, "wb") as fh:
        fh.write(w.blob())


def read_checkpoint(path: str):
    r = _open_reader(path, MAGIC_CKPT)
    kind = r.u8()
    n_layers = r.u32()
    if n_layers < 1 or n_layers > 64:
        raise FileFormatError(f"{path}: implausible layer count {n_layers}")
    dims = [r.u32() for _ in range(n_layers + 1)]
    sigma = r.f64()
    weights, biases = [], []
    for i in range(n_layers):
        out_d, in_d = dims[i + 1], dims[i]
        weights.append(r.f64s(out_d * in_d).reshape(out_d, in_d))
        biases.append(r.f64s(out_d))
    base = MlpPolicy(dims, weights, biases, action_sigma=sigma)
    if kind == 0:
        r.done()
        return base
    if kind != 1:
        raise FileFormatError(f"{path}: unknown checkpoint kind {kind}")
    bits = r.u8()
    spec = QuantSpec(
        bits=bits,
        granularity=_name_for(_GRAN_NAMES, r.u8(), "granularity", path),
        scheme=_name_for(_SCHEME_NAMES, r.u8(), "scheme", path),
        targets=_name_for(_TARGET_NAMES, r.u8(), "targets", path),
    )
    weight_scales = []
    for _ in range(n_layers):
        weight_scales.append(r.f64s(r.u32()))
    act_scales = []
    if spec.quantizes_activations:
        act_scales = [r.f64s(1) for _ in range(n_layers)]
    r.done()
    return FakeQuantPolicy(base, spec, QuantParams(weight_scales, act_scales))


# ---------------------------------------------------------------- datasets


def write_dataset(path: str, ds: ExpertDataset) -> None:
    if not ds.trajectories:
        raise UsageError("refusing to write an empty dataset")
    obs_dim = ds.trajectories[0].obs.shape[1]
    act_dim = ds.trajectories[0].actions.shape[1]
    w = _Writer()
    w.raw(MAGIC_DATA)
    w.u16(FORMAT_VERSION)
    w.u8(_code_for(ENV_CODES, ds.env_id, "env id"))
    w.u8(_code_for(OBS_CODES, ds.obs_mode, "obs mode"))
    w.u32(obs_dim)
    w.u32(act_dim)
    w.u32(len(ds.trajectories))
    w.u64(ds.seed)
    for t in ds.trajectories:
        if t.obs.shape != (t.length, obs_dim) or t.actions.shape != (t.length, act_dim):
            raise UsageError("ragged trajectory shapes")
        w.u32(t.length)
        w.u64(t.seed)
        w.u8(1 if t.success else 0)
        w.f32s(t.obs)
        w.f32s(t.actions)
    with open(path, "wb") as fh:
        fh.write(w.blob())


def read_dataset(path: str) -> ExpertDataset:
    r = _open_reader(path, MAGIC_DATA)
    env_id = _name_for(_ENV_NAMES, r.u8(), "env", path)
    obs_mode = _name_for(_OBS_NAMES, r.u8(), "obs mode", path)
    obs_dim = r.u32()
    act_dim = r.u32()
    n = r.u32()
    seed = r.u64()
    trajectories = []
    for _ in range(n):
        T = r.u32()
        t_seed = r.u64()
        success = bool(r.u8())
        obs = r.f32s(T * obs_dim).reshape(T, obs_dim)
        actions = r.f32s(T * act_dim).reshape(T, act_dim)
        trajectories.append(Trajectory(obs, actions, success, t_seed))
    r.done()
    return ExpertDataset(trajectories, env_id, obs_mode, seed)


# -------------------------------------------------------------- SIS tables


def write_sis(path: str, table: SisTable) -> None:
    spec = table.spec
    w = _Writer()
    w.raw(MAGIC_SIS)
    w.u16(FORMAT_VERSION)
    w.u8(_code_for(OBS_CODES, spec.mode, "perturbation mode"))
    w.u32(spec.grid)
    w.u32(table.k_f)
    w.u64(spec.seed)
    w.f64(spec.noise_sigma)
    w.f64(spec.blur_radius)
    w.f64(table.beta)
    w.u8(0 if table.threshold is None else 1)
    w.f64(0.0 if table.threshold is None else table.threshold)
    w.f64(0.0 if table.p is None else table.p)
    w.u8(0 if table.flags is None else 1)
    w.u32(len(table.values))
    for i, v in enumerate(table.values):
        w.u32(v.shape[0])
        w.f64s(v)
        if table.flags is not None:
            w.raw(np.asarray(table.flags[i], dtype=np.uint8).tobytes())
    with open(path, "wb") as fh:
        fh.write(w.blob())


def read_sis(path: str) -> SisTable:
    r = _open_reader(path, MAGIC_SIS)
    mode = _name_for(_OBS_NAMES, r.u8(), "perturbation mode", path)
    grid = r.u32()
    k_f = r.u32()
    seed = r.u64()
    noise_sigma = r.f64()
    blur_radius = r.f64()
    beta = r.f64()
    has_threshold = r.u8()
    threshold = r.f64()
    p = r.f64()
    has_flags = r.u8()
    n = r.u32()
    spec = PerturbationSpec(
        mode=mode, noise_sigma=noise_sigma, grid=grid, blur_radius=blur_radius, seed=seed
    )
    values, flags = [], []
    for _ in range(n):
        T = r.u32()
        values.append(r.f64s(T))
        if has_flags:
            raw = np.frombuffer(r.take(T), dtype=np.uint8)
            if raw.size and raw.max() > 1:
                raise FileFormatError(f"{path}: flag bytes must be 0 or 1")
            flags.append(raw.astype(bool))
    r.done()
    return SisTable(
        values,
        spec,
        k_f,
        threshold=threshold if has_threshold else None,
        p=p if has_threshold else None,
        flags=flags if has_flags else None,
        beta=beta,
    )


# --------------------------------------------------------- quantized models


def write_qmodel(path: str, model: QuantizedModel) -> None:
    w = _Writer()
    w.raw(MAGIC_QMOD)
    w.u16(FORMAT_VERSION)
    w.u8(model.bits)
    w.u32(len(model.layers))
    for layer in model.layers:
        wt = layer.weight
        w.u32(wt.rows)
        w.u32(wt.cols)
        w.u8(0 if isinstance(wt, PackedInt4Matrix) else 1)
        w.u8(0 if layer.act_scale is None else 1)
        w.f64(0.0 if layer.act_scale is None else layer.act_scale)
        w.f64s(wt.scales)
        w.f64s(layer.bias)
        if isinstance(wt, PackedInt4Matrix):
            w.raw(wt.data.tobytes())
        else:
            w.raw(wt.data.astype("<i1").tobytes())
    with open(path, "wb") as fh:
        fh.write(w.blob())


def read_qmodel(path: str) -> QuantizedModel:
    r = _open_reader(path, MAGIC_QMOD)
    bits = r.u8()
    n = r.u32()
    layers = []
    for _ in range(n):
        rows = r.u32()
        cols = r.u32()
        kind = r.u8()
        has_act = r.u8()
        act = r.f64()
        scales = r.f64s(rows)
        bias = r.f64s(rows)
        if kind == 0:
            per_row = (cols + 1) // 2
            data = np.frombuffer(r.take(rows * per_row), dtype=np.uint8).copy()
            weight = PackedInt4Matrix(rows, cols, data, scales)
        elif kind == 1:
            data = np.frombuffer(r.take(rows * cols), dtype="<i1").reshape(rows, cols)
            weight = Int8Matrix(rows, cols, data.astype(np.int8), scales)
        else:
            raise FileFormatError(f"{path}: unknown weight kind {kind}")
        layers.append(QuantizedLayer(weight, bias, act if has_act else None))
    r.done()
    return QuantizedModel(tuple(layers), bits)


# ------------------------------------------------------------ CSV and SVG


def write_timeline_csv(path: str, timeline) -> None:
    lines = ["t,L2"]
    for t, v in enumerate(np.asarray(timeline.values)):
        lines.append(f"{t},{float(v)!r}")
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


PALETTE = ("#4477aa", "#ee6677", "#228833", "#ccbb44", "#aa3377", "#66ccee")


def svg_line_plot(
    path: str,
    series: dict,
    title: str = "",
    x_label: str = "t",
    y_label: str = "value",
) -> None:
    """Minimal deterministic multi-series line plot, no dependencies."""
    if not series:
        raise UsageError("svg plot needs at least one series")
    W, H, ML, MR, MT, MB = 640, 400, 56, 16, 36, 44
    pw, ph = W - ML - MR, H - MT - MB
    ys = np.concatenate([np.asarray(v, dtype=np.float64).reshape(-1) for v in series.values()])
    if ys.size == 0:
        raise UsageError("svg plot needs non-empty series")
    lo, hi = float(ys.min()), float(ys.max())
    if hi - lo < 1e-12:
        lo, hi = lo - 1.0, hi + 1.0
    n_max = max(len(np.asarray(v).reshape(-1)) for v in series.values())
    x_hi = max(n_max - 1, 1)

    def sx(i):
        return ML + pw * (i / x_hi)

    def sy(v):
        return MT + ph * (1.0 - (v - lo) / (hi - lo))

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
        f'viewBox="0 0 {W} {H}" font-family="monospace" font-size="11">',
        f'<rect width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2:.1f}" y="20" text-anchor="middle" font-size="13">{title}</text>',
        f'<line x1="{ML}" y1="{MT}" x2="{ML}" y2="{MT + ph}" stroke="black"/>',
        f'<line x1="{ML}" y1="{MT + ph}" x2="{ML + pw}" y2="{MT + ph}" stroke="black"/>',
        f'<text x="{ML + pw / 2:.1f}" y="{H - 10}" text-anchor="middle">{x_label}</text>',
        f'<text x="14" y="{MT + ph / 2:.1f}" text-anchor="middle" '
        f'transform="rotate(-90 14 {MT + ph / 2:.1f})">{y_label}</text>',
    ]
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        v = lo + frac * (hi - lo)
        y = sy(v)
        out.append(f'<line x1="{ML - 4}" y1="{y:.2f}" x2="{ML}" y2="{y:.2f}" stroke="black"/>')
        out.append(f'<text x="{ML - 7}" y="{y + 4:.2f}" text-anchor="end">{v:.4g}</text>')
        x = ML + frac * pw
        t = frac * x_hi
        out.append(
            f'<line x1="{x:.2f}" y1="{MT + ph}" x2="{x:.2f}" y2="{MT + ph + 4}" stroke="black"/>'
        )
        out.append(
            f'<text x="{x:.2f}" y="{MT + ph + 16}" text-anchor="middle">{t:.4g}</text>'
        )
    for idx, (name, vals) in enumerate(series.items()):
        v = np.asarray(vals, dtype=np.float64).reshape(-1)
        color = PALETTE[idx % len(PALETTE)]
        pts = " ".join(f"{sx(i):.2f},{sy(float(y)):.2f}" for i, y in enumerate(v))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        ly = MT + 14 * idx
        out.append(
            f'<line x1="{ML + pw - 110}" y1="{ly + 4}" x2="{ML + pw - 92}" y2="{ly + 4}" '
            f'stroke="{color}" stroke-width="2"/>'
        )
        out.append(f'<text x="{ML + pw - 88}" y="{ly + 8}">{name}</text>')
    out.append("</svg>")
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(out) + "\n")
