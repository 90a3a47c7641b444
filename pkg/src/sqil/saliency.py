"""Perturbation saliency and state-importance scoring.

A perturbation probes one input position at a time. Vector mode adds
seeded Gaussian noise to a single observation coordinate; image mode
swaps one cell of an N x N patch grid with the Gaussian-blurred version
of the frame. The saliency score at position k is half the squared L2
change of the policy's action mean, the state-importance score (SIS) is
the mean over all positions, and a dataset-global quantile threshold
flags the strictly-above states.

Tables are computed on a frame stride k_f and copied forward between
computed sites, which is what makes precomputation cheap enough to run
once per dataset. Per-call noise is seeded from (seed, trajectory,
timestep, position), so every score is reproducible bit for bit and two
policies probed at the same site see the same perturbation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .envs import IMG_SIZE, ExpertDataset
from .errors import UsageError
from .nn import Array, MlpPolicy
from .nn import forward as _policy_fwd
from .quant import FakeQuantPolicy, fake_quant_forward


@dataclass(frozen=True)
class PerturbationSpec:
    """How to probe one input position.

    mode "vector": position k is observation coordinate k, perturbed by
    additive Gaussian noise with std noise_sigma. mode "image32": position
    k is cell k of a grid x grid patch grid over the 32x32 frame, replaced
    by the Gaussian-blurred frame content (blur_radius pixels, reflect
    padding). seed is folded into every per-call noise stream.
    """

    mode: str = "vector"
    noise_sigma: float = 0.1
    grid: int = 8
    blur_radius: float = 3.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.mode not in ("vector", "image32"):
            raise UsageError(f"unknown perturbation mode {self.mode!r}")
        if self.noise_sigma <= 0:
            raise UsageError("noise_sigma must be positive")
        if self.grid < 1:
            raise UsageError("grid must be >= 1")
        if self.blur_radius < 1:
            raise UsageError("blur_radius must be >= 1 pixel")
        if self.mode == "image32" and IMG_SIZE % self.grid != 0:
            raise UsageError(f"grid {self.grid} does not tile a {IMG_SIZE}px frame")
        if self.seed < 0:
            raise UsageError("seed must be nonnegative")


def n_positions(spec: PerturbationSpec, obs_dim: int) -> int:
    return spec.grid * spec.grid if spec.mode == "image32" else obs_dim


def policy_forward(policy):
    """Batched action-mean callable for any supported policy object."""
    if isinstance(policy, FakeQuantPolicy):
        return lambda batch: fake_quant_forward(policy, batch)
    if isinstance(policy, MlpPolicy):
        return lambda batch: _policy_fwd(policy, batch)
    if callable(policy):
        return policy
    raise UsageError(f"cannot evaluate object of type {type(policy).__name__} as a policy")


def _noise_at(spec: PerturbationSpec, traj: int, t: int, k: int) -> float:
    seq = np.random.SeedSequence([spec.seed, int(traj), int(t), int(k)])
    return float(np.random.Generator(np.random.PCG64(seq)).normal(0.0, spec.noise_sigma))


def _blurred_frame(obs: Array, spec: PerturbationSpec) -> Array:
    img = obs.reshape(IMG_SIZE, IMG_SIZE)
    return gaussian_filter(img, sigma=spec.blur_radius, mode="reflect")


def _swap_patch(obs: Array, blurred: Array, k: int, grid: int) -> Array:
    side = IMG_SIZE // grid
    r, c = (k // grid) * side, (k % grid) * side
    out = obs.reshape(IMG_SIZE, IMG_SIZE).copy()
    out[r : r + side, c : c + side] = blurred[r : r + side, c : c + side]
    return out.reshape(-1)


def perturb(obs: Array, k: int, spec: PerturbationSpec, traj: int = 0, t: int = 0) -> Array:
    """Observation with position k perturbed; everything else untouched."""
    x = np.asarray(obs, dtype=np.float64).reshape(-1)
    limit = n_positions(spec, x.shape[0])
    if not 0 <= k < limit:
        raise UsageError(f"position {k} out of range [0, {limit})")
    if spec.mode == "vector":
        out = x.copy()
        out[k] += _noise_at(spec, traj, t, k)
        return out
    if x.shape[0] != IMG_SIZE * IMG_SIZE:
        raise UsageError(f"image mode expects {IMG_SIZE * IMG_SIZE} values, got {x.shape[0]}")
    return _swap_patch(x, _blurred_frame(x, spec), k, spec.grid)


def _perturbation_rows(obs: Array, spec: PerturbationSpec, traj: int, t: int) -> Array:
    """All K perturbed variants, blur computed once in image mode."""
    x = np.asarray(obs, dtype=np.float64).reshape(-1)
    K = n_positions(spec, x.shape[0])
    if spec.mode == "vector":
        rows = np.repeat(x[None, :], K, axis=0)
        for k in range(K):
            rows[k, k] += _noise_at(spec, traj, t, k)
        return rows
    if x.shape[0] != IMG_SIZE * IMG_SIZE:
        raise UsageError(f"image mode expects {IMG_SIZE * IMG_SIZE} values, got {x.shape[0]}")
    blurred = _blurred_frame(x, spec)
    return np.stack([_swap_patch(x, blurred, k, spec.grid) for k in range(K)])


def saliency_map(policy, obs: Array, spec: PerturbationSpec, traj: int = 0, t: int = 0) -> Array:
    """Per-position scores: half squared action change per perturbation.

    The clean and perturbed observations run as one batch, so the map is
    a pure deterministic function of (policy, obs, spec, traj, t).
    """
    fn = policy_forward(policy)
    x = np.asarray(obs, dtype=np.float64).reshape(-1)
    batch = np.vstack([x[None, :], _perturbation_rows(x, spec, traj, t)])
    mu = np.asarray(fn(batch), dtype=np.float64)
    diff = mu[1:] - mu[0]
    return 0.5 * (diff * diff).sum(axis=1)


def saliency_score(
    policy, obs: Array, k: int, spec: PerturbationSpec, traj: int = 0, t: int = 0
) -> float:
    """Half squared L2 distance between clean and position-k actions."""
    fn = policy_forward(policy)
    x = np.asarray(obs, dtype=np.float64).reshape(-1)
    mu0 = np.asarray(fn(x[None, :]))[0]
    mu1 = np.asarray(fn(perturb(x, k, spec, traj, t)[None, :]))[0]
    d = mu1 - mu0
    return float(0.5 * (d * d).sum())


def sis(policy, obs: Array, spec: PerturbationSpec, traj: int = 0, t: int = 0) -> float:
    """State-importance score: mean saliency over all positions."""
    return float(saliency_map(policy, obs, spec, traj, t).mean())


@dataclass
class SisTable:
    """Per-trajectory SIS values plus the thresholding state.

    values[i][t] is the SIS assigned to timestep t of trajectory i.
    Strided timesteps carry the most recent computed site value. flags
    and threshold are unset until threshold() runs. beta rides along as
    metadata so one file carries everything the distillation loss needs.
    """

    values: list[Array]
    spec: PerturbationSpec
    k_f: int
    threshold: float | None = None
    p: float | None = None
    flags: list[Array] | None = None
    beta: float = 2.0

    @property
    def n_steps(self) -> int:
        return sum(v.shape[0] for v in self.values)

    def all_values(self) -> Array:
        return np.concatenate(self.values) if self.values else np.empty(0)

    @property
    def flagged_fraction(self) -> float:
        if self.flags is None:
            raise UsageError("table has no flags; run threshold() first")
        return sum(int(f.sum()) for f in self.flags) / self.n_steps


def compute_sis_table(
    policy, dataset: ExpertDataset, spec: PerturbationSpec, k_f: int = 4
) -> SisTable:
    """SIS at every k_f-th timestep of every trajectory, copied forward.

    One position batch per computed site keeps single-site sis() calls
    bit-identical to the table entries.
    """
    if not dataset.trajectories:
        raise UsageError("dataset has no trajectories")
    if k_f < 1:
        raise UsageError("frame stride must be >= 1")
    if spec.mode == "image32" and dataset.obs_mode != "image32":
        raise UsageError(f"image perturbations need image observations, got {dataset.obs_mode!r}")
    values = []
    for ti, traj in enumerate(dataset.trajectories):
        vals = np.empty(traj.length, dtype=np.float64)
        for t0 in range(0, traj.length, k_f):
            v = sis(policy, traj.obs[t0], spec, traj=ti, t=t0)
            vals[t0 : min(t0 + k_f, traj.length)] = v
        values.append(vals)
    return SisTable(values, spec, k_f)


def threshold(table: SisTable, p: float = 0.2) -> float:
    """Dataset-global (1-p)-quantile; flags every SIS strictly above it.

    Linear interpolation between order statistics, so with distinct
    values the flagged fraction lands within 1/M of p.
    """
    if not 0.0 < p < 1.0:
        raise UsageError("p must be in (0, 1)")
    if not table.values:
        raise UsageError("empty SIS table")
    T = float(np.quantile(table.all_values(), 1.0 - p))
    table.threshold = T
    table.p = p
    table.flags = [v > T for v in table.values]
    return T
