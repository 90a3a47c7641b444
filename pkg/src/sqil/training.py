"""Behavior-cloning and quantization-robust training loops.

Loss family on a fixed Gaussian action head (constant sigma, log-term
dropped):

    L_IL   mean ||mu(s) - a||^2 / (2 sigma^2) on the float policy
    L_QAT  the same quantity through the fake-quantized forward
    L_QRD  mean alpha_t * D(mu_Q(s), mu_FP(s)), alpha_t = beta on
           SIS-flagged states and 1 elsewhere; D is the half squared L2
           distance or the closed-form Gaussian KL (same quantity scaled
           by 1/sigma^2)
    L_SQIL = L_QAT + L_QRD, exactly, by construction

The quantized arms all start from the same post-training-quantization
initialization of the float policy (RTN weight scales, activation scales
calibrated on the first 128 dataset states) and share the batch sequence:
each epoch visits a seeded permutation of all (trajectory, timestep)
pairs, so the flagged fraction seen per epoch equals the table fraction
exactly. QAT and QRD are the same loop with one term's weight set to
zero. Scale parameters are trained only under the learned-step scheme,
with their gradients shrunk by the per-tensor factor the backward pass
reports, and are floored after every update so they can never collapse.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .envs import ExpertDataset
from .errors import NumericError, UsageError
from .nn import MlpPolicy, adam_step, backward, check_finite, init_adam, init_policy
from .nn import forward as fp_forward
from .quant import FakeQuantPolicy, QuantSpec, fake_quant_trace, make_fake_quant, ste_backward
from .saliency import PerturbationSpec, SisTable, compute_sis_table, policy_forward, threshold

Array = np.ndarray

GAMMA_MIN = 1e-8
CALIB_SAMPLES = 128
ARMS = ("fp", "ptq", "qat", "qrd", "sqil")
LOG_COLUMNS = ("step", "L_QAT", "L_QRD", "L_SQIL", "flagged_count")


@dataclass(frozen=True)
class TrainConfig:
    arm: str = "sqil"
    hidden: tuple[int, ...] = (64, 64)
    lr: float = 3e-3
    lr_schedule: str = "cosine"  # cosine | constant
    epochs: int = 870
    batch_size: int = 64
    seed: int = 0
    beta: float = 2.0
    p: float = 0.2
    k_f: int = 4
    discrepancy: str = "l2"  # l2 | kl
    quant: QuantSpec = field(default_factory=QuantSpec)
    traj_mean_weighting: bool = False
    action_sigma: float = 0.1
    log_path: str | None = None
    checkpoint_every: int = 0
    checkpoint_path: str | None = None

    def __post_init__(self) -> None:
        if self.arm not in ARMS:
            raise UsageError(f"unknown arm {self.arm!r}, expected one of {ARMS}")
        if not self.hidden or any(int(h) < 1 for h in self.hidden):
            raise UsageError("hidden layer widths must be positive")
        if self.lr <= 0:
            raise UsageError("lr must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise UsageError("epochs and batch_size must be >= 1")
        if self.beta < 1.0:
            raise UsageError("beta must be >= 1")
        if not 0.0 < self.p < 1.0:
            raise UsageError("p must be in (0, 1)")
        if self.k_f < 1:
            raise UsageError("frame stride must be >= 1")
        if self.discrepancy not in ("l2", "kl"):
            raise UsageError(f"unknown discrepancy metric {self.discrepancy!r}")
        if self.action_sigma <= 0:
            raise UsageError("action_sigma must be positive")
        if self.checkpoint_every < 0:
            raise UsageError("checkpoint_every must be >= 0")


@dataclass
class LossBreakdown:
    l_qat: float
    l_qrd: float
    l_sqil: float
    flagged_count: int


def dataset_arrays(dataset: ExpertDataset) -> tuple[Array, Array, Array, Array]:
    """Flatten a dataset into (states, actions, traj index, traj length) rows."""
    if not dataset.trajectories:
        raise UsageError("dataset has no trajectories")
    X = np.concatenate([t.obs for t in dataset.trajectories]).astype(np.float64)
    Y = np.concatenate([t.actions for t in dataset.trajectories]).astype(np.float64)
    tid = np.concatenate(
        [np.full(t.length, i, dtype=np.int64) for i, t in enumerate(dataset.trajectories)]
    )
    tlen = np.concatenate(
        [np.full(t.length, t.length, dtype=np.float64) for t in dataset.trajectories]
    )
    return X, Y, tid, tlen


def flags_per_row(table: SisTable) -> Array:
    """Flattened boolean flags aligned with dataset_arrays row order."""
    if table.flags is None:
        raise UsageError("SIS table has no flags; run threshold() first")
    return np.concatenate(table.flags)


def calibration_states(dataset: ExpertDataset) -> Array:
    X, _, _, _ = dataset_arrays(dataset)
    return X[:CALIB_SAMPLES]


def _row_weights(cfg: TrainConfig, tlen_rows: Array) -> Array:
    return 1.0 / tlen_rows if cfg.traj_mean_weighting else np.ones_like(tlen_rows)


# ------------------------------------------------------------------- losses


def _weighted_mean(values: Array, w: Array | None) -> float:
    if w is None:
        return float(values.mean())
    total = w.sum()
    if total <= 0:
        raise UsageError("sample weights must have positive total")
    return float((values * w).sum() / total)


def loss_il(policy, states: Array, actions: Array, sample_weights: Array | None = None) -> float:
    """Scaled-MSE behavior-cloning loss on any policy's action mean."""
    mu = np.asarray(policy_forward(policy)(np.asarray(states, dtype=np.float64)))
    y = np.asarray(actions, dtype=np.float64)
    if mu.shape != y.shape:
        raise UsageError(f"action shape {y.shape} does not match policy output {mu.shape}")
    sigma = getattr(policy, "action_sigma", None)
    if sigma is None:
        sigma = policy.base.action_sigma if isinstance(policy, FakeQuantPolicy) else 0.1
    per = ((mu - y) ** 2).sum(axis=1) / (2.0 * sigma**2)
    return _weighted_mean(per, sample_weights)


def loss_qat(fq: FakeQuantPolicy, states: Array, actions: Array,
             sample_weights: Array | None = None) -> float:
    """The imitation loss evaluated through the fake-quantized forward."""
    if not isinstance(fq, FakeQuantPolicy):
        raise UsageError("loss_qat expects a fake-quantized policy")
    return loss_il(fq, states, actions, sample_weights)


def _discrepancy(mu_q: Array, mu_fp: Array, metric: str, sigma: float) -> Array:
    d = ((mu_q - mu_fp) ** 2).sum(axis=1)
    if metric == "l2":
        return 0.5 * d
    if metric == "kl":
        return d / (2.0 * sigma**2)
    raise UsageError(f"unknown discrepancy metric {metric!r}")


def loss_qrd(
    policy_q,
    policy_fp: MlpPolicy,
    states: Array,
    flags: Array,
    beta: float = 2.0,
    metric: str = "l2",
    sample_weights: Array | None = None,
) -> float:
    """Distillation loss with per-state weight beta on SIS-flagged states."""
    if beta < 1.0:
        raise UsageError("beta must be >= 1")
    x = np.asarray(states, dtype=np.float64)
    if flags is None:
        raise UsageError("SIS flags are required for the distillation loss")
    f = np.asarray(flags, dtype=bool)
    if f.shape != (x.shape[0],):
        raise UsageError(f"flags shape {f.shape} does not match batch {x.shape[0]}")
    mu_q = np.asarray(policy_forward(policy_q)(x))
    mu_fp = np.asarray(policy_forward(policy_fp)(x))
    alpha = np.where(f, beta, 1.0)
    per = alpha * _discrepancy(mu_q, mu_fp, metric, policy_fp.action_sigma)
    return _weighted_mean(per, sample_weights)


def loss_sqil(
    fq: FakeQuantPolicy,
    policy_fp: MlpPolicy,
    states: Array,
    actions: Array,
    flags: Array,
    beta: float = 2.0,
    metric: str = "l2",
    sample_weights: Array | None = None,
) -> LossBreakdown:
    """Both terms and their exact sum, plus the flagged count in the batch."""
    l_qat = loss_qat(fq, states, actions, sample_weights)
    l_qrd = loss_qrd(fq, policy_fp, states, flags, beta, metric, sample_weights)
    return LossBreakdown(l_qat, l_qrd, l_qat + l_qrd, int(np.asarray(flags, dtype=bool).sum()))


# ------------------------------------------------------------ training loops


def _epoch_batches(rng: np.random.Generator, n: int, batch_size: int):
    perm = rng.permutation(n)
    for lo in range(0, n, batch_size):
        yield perm[lo : lo + batch_size]


def _open_log(path: str | None, columns):
    if path is None:
        return None, None
    fh = open(path, "w", newline="")
    writer = csv.writer(fh)
    writer.writerow(columns)
    return fh, writer


def train_bc_fp(dataset: ExpertDataset, config: TrainConfig) -> MlpPolicy:
    """Behavior-clone the float policy. Deterministic given config.seed."""
    X, Y, _, tlen = dataset_arrays(dataset)
    w_rows = _row_weights(config, tlen)
    policy = init_policy(
        [X.shape[1], *map(int, config.hidden), Y.shape[1]],
        seed=config.seed,
        action_sigma=config.action_sigma,
    )
    params = list(policy.weights) + list(policy.biases)
    adam = init_adam(params, lr=config.lr)
    rng = np.random.Generator(np.random.PCG64(config.seed))
    fh, log = _open_log(config.log_path, ("step", "loss"))
    step = 0
    try:
        for _ in range(config.epochs):
            for idx in _epoch_batches(rng, X.shape[0], config.batch_size):
                grads, loss = backward(policy, X[idx], Y[idx], sample_weights=w_rows[idx])
                adam_step(params, list(grads.weights) + list(grads.biases), adam)
                step += 1
                if log is not None:
                    log.writerow([step, repr(loss)])
                _maybe_checkpoint(config, step, policy)
    finally:
        if fh is not None:
            fh.close()
    return policy


def make_ptq(policy_fp: MlpPolicy, dataset: ExpertDataset, config: TrainConfig) -> FakeQuantPolicy:
    """The no-training baseline: calibrate scales and stop."""
    return make_fake_quant(policy_fp, config.quant, calibration_states(dataset))


def default_perturbations(dataset: ExpertDataset, seed: int = 0) -> PerturbationSpec:
    mode = "image32" if dataset.obs_mode == "image32" else "vector"
    return PerturbationSpec(mode=mode, seed=seed)


def ensure_sis_table(
    policy_fp: MlpPolicy, dataset: ExpertDataset, config: TrainConfig,
    table: SisTable | None,
) -> SisTable:
    """Reuse a provided table or compute and threshold one on demand."""
    if table is None:
        table = compute_sis_table(policy_fp, dataset, default_perturbations(dataset), config.k_f)
        table.beta = config.beta
    if table.flags is None:
        threshold(table, config.p)
    if sum(v.shape[0] for v in table.values) != dataset.n_steps:
        raise UsageError("SIS table does not cover this dataset")
    return table


def _maybe_checkpoint(config: TrainConfig, step: int, policy) -> None:
    if config.checkpoint_every > 0 and step % config.checkpoint_every == 0:
        if config.checkpoint_path is None:
            raise UsageError("checkpoint_every set without a checkpoint_path")
        from . import formats

        formats.write_checkpoint(config.checkpoint_path, policy)


def train_sqil(
    policy_fp: MlpPolicy,
    dataset: ExpertDataset,
    config: TrainConfig,
    sis_table: SisTable | None = None,
) -> FakeQuantPolicy:
    """The quantized arms: QAT, QRD, and their sum, from PTQ initialization.

    One combined backward per step carries both terms' contribution to the
    action-mean gradient through the straight-through estimator; the arm
    selects which term weights are live. Aborts with a numeric error if
    the loss stops being finite.
    """
    if config.arm not in ("qat", "qrd", "sqil"):
        raise UsageError(f"train_sqil handles qat/qrd/sqil, not {config.arm!r}")
    w_qat = 0.0 if config.arm == "qrd" else 1.0
    w_qrd = 0.0 if config.arm == "qat" else 1.0

    X, Y, _, tlen = dataset_arrays(dataset)
    w_rows = _row_weights(config, tlen)
    flags_rows = np.zeros(X.shape[0], dtype=bool)
    if w_qrd > 0.0:
        table = ensure_sis_table(policy_fp, dataset, config, sis_table)
        flags_rows = flags_per_row(table)

    fq = make_ptq(policy_fp, dataset, config)
    fq.base = replace(fq.base, action_sigma=config.action_sigma)
    mu_fp_all = fp_forward(policy_fp, X)

    sigma = config.action_sigma
    kd_scale = 1.0 if config.discrepancy == "l2" else 1.0 / sigma**2
    learn_scales = config.quant.scheme == "lsq"
    params = list(fq.base.weights) + list(fq.base.biases)
    scale_params: list[Array] = []
    if learn_scales:
        scale_params = list(fq.params.weight_scales) + list(fq.params.act_scales)
    adam = init_adam(params + scale_params, lr=config.lr)
    rng = np.random.Generator(np.random.PCG64(config.seed))
    fh, log = _open_log(config.log_path, LOG_COLUMNS)
    step = 0
    try:
        for _ in range(config.epochs):
            for idx in _epoch_batches(rng, X.shape[0], config.batch_size):
                xb, yb = X[idx], Y[idx]
                wb = w_rows[idx]
                total_w = wb.sum()
                alpha = np.where(flags_rows[idx], config.beta, 1.0)
                mu_q, tr = fake_quant_trace(fq, xb)
                d_qat = mu_q - yb
                d_qrd = mu_q - mu_fp_all[idx]
                per_qat = (wb * (d_qat**2).sum(axis=1)).sum() / (2.0 * sigma**2 * total_w)
                per_qrd = (
                    wb * alpha * kd_scale * 0.5 * (d_qrd**2).sum(axis=1)
                ).sum() / total_w
                l_qat = float(w_qat * per_qat)
                l_qrd = float(w_qrd * per_qrd)
                l_sqil = l_qat + l_qrd
                check_finite("training loss", np.array([l_sqil]))
                d_out = (
                    w_qat * wb[:, None] * d_qat / (sigma**2 * total_w)
                    + w_qrd * (wb * alpha)[:, None] * kd_scale * d_qrd / total_w
                )
                grads = ste_backward(fq, tr, d_out)
                flat = list(grads.weights) + list(grads.biases)
                if learn_scales:
                    flat += [g * f for g, f in zip(grads.weight_scales, grads.g_weight)]
                    flat += [g * f for g, f in zip(grads.act_scales, grads.g_act)]
                adam_step(params + scale_params, flat, adam)
                for s in scale_params:
                    np.maximum(s, GAMMA_MIN, out=s)
                step += 1
                if log is not None:
                    log.writerow(
                        [step, repr(l_qat), repr(l_qrd), repr(l_sqil), int(flags_rows[idx].sum())]
                    )
                _maybe_checkpoint(config, step, fq)
    except FloatingPointError as exc:  # pragma: no cover - belt and braces
        raise NumericError(str(exc)) from exc
    finally:
        if fh is not None:
            fh.close()
    return fq
