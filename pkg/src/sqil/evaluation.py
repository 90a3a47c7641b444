"""Closed-loop evaluation of trained policies.

Three measurements: success rates over repeated evaluation rounds,
per-timestep action discrepancy between a quantized policy and its float
teacher along the quantized policy's own rollout, and the divergence of
the two policies' saliency maps over a fixed sample of dataset states.
Everything is deterministic given the seeds and nothing here mutates a
policy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .envs import ExpertDataset, Trajectory
from .errors import UsageError
from .nn import Array
from .saliency import PerturbationSpec, policy_forward, saliency_map

DIVERGENCE_SAMPLE = 256
MAP_FLOOR = 1e-12


@dataclass(frozen=True)
class EvalReport:
    """Success-rate summary for one arm.

    episodes is the per-round count; success_rate and success_std are in
    percent, aggregated over rounds. mean_return is the mean success
    indicator (the tasks pay 1 for success, 0 otherwise).
    """

    arm: str
    episodes: int
    rounds: int
    success_rate: float
    success_std: float
    mean_length: float
    mean_return: float

    def __post_init__(self) -> None:
        if self.episodes < 1 or self.rounds < 1:
            raise UsageError("episodes and rounds must be >= 1")
        if not 0.0 <= self.success_rate <= 100.0:
            raise UsageError("success rate must be a percentage")


@dataclass(frozen=True)
class DiscrepancyTimeline:
    """Per-timestep L2 action gap along one quantized-policy episode."""

    values: Array
    seed: int
    success: bool

    def __post_init__(self) -> None:
        v = np.asarray(self.values)
        if v.ndim != 1:
            raise UsageError("timeline values must be one-dimensional")
        if v.size and v.min() < 0:
            raise UsageError("timeline values must be nonnegative")


def rollout(policy, env, seed: int, cap: int | None = None) -> Trajectory:
    """Run one episode under the policy; the trajectory carries success.

    cap bounds the number of actions taken; the environment's own step
    limit still applies underneath it.
    """
    fn = policy_forward(policy)
    limit = env.max_steps if cap is None else int(cap)
    if limit < 1:
        raise UsageError("cap must be >= 1")
    state = env.reset(seed)
    obs_list, act_list = [], []
    success = False
    while not state.done and len(act_list) < limit:
        o = np.asarray(env.observe(state), dtype=np.float64)
        a = np.asarray(fn(o[None, :]), dtype=np.float64)[0]
        obs_list.append(o)
        act_list.append(a)
        state, success, _ = env.step(state, a)
    if act_list:
        obs = np.asarray(obs_list, dtype=np.float32)
        actions = np.asarray(act_list, dtype=np.float32)
    else:  # pragma: no cover - environments never start terminal
        obs = np.empty((0, env.obs_dim), dtype=np.float32)
        actions = np.empty((0, 0), dtype=np.float32)
    return Trajectory(obs, actions, bool(success), seed)


def _round_seeds(seed: int, round_index: int, episodes: int) -> list[int]:
    ss = np.random.SeedSequence([int(seed), int(round_index)])
    return [int(s) for s in ss.generate_state(episodes, dtype=np.uint64)]


def success_rate(
    policy,
    env,
    episodes: int = 500,
    rounds: int = 3,
    seed: int = 0,
    arm: str = "policy",
    cap: int | None = None,
) -> EvalReport:
    """Evaluate over `rounds` batches of `episodes` fresh episodes each.

    The episode seed set is a pure function of (seed, round), so two arms
    evaluated with the same arguments face identical initial conditions.
    """
    if episodes < 1 or rounds < 1:
        raise UsageError("episodes and rounds must be >= 1")
    rates = []
    lengths = []
    returns = []
    for r in range(rounds):
        wins = 0
        for ep_seed in _round_seeds(seed, r, episodes):
            traj = rollout(policy, env, ep_seed, cap)
            wins += int(traj.success)
            lengths.append(traj.length)
            returns.append(float(traj.success))
        rates.append(100.0 * wins / episodes)
    return EvalReport(
        arm=arm,
        episodes=episodes,
        rounds=rounds,
        success_rate=float(np.mean(rates)),
        success_std=float(np.std(rates)),
        mean_length=float(np.mean(lengths)),
        mean_return=float(np.mean(returns)),
    )


def discrepancy_timeline(
    policy_q, policy_fp, env, seed: int, cap: int | None = None
) -> DiscrepancyTimeline:
    """L2 action gap per timestep, on the quantized policy's own states.

    The quantized policy drives; the float policy is probed on exactly
    the observations the quantized rollout visited.
    """
    traj = rollout(policy_q, env, seed, cap)
    X = np.asarray(traj.obs, dtype=np.float64)
    mu_q = np.asarray(policy_forward(policy_q)(X), dtype=np.float64)
    mu_fp = np.asarray(policy_forward(policy_fp)(X), dtype=np.float64)
    if mu_q.shape != mu_fp.shape:
        raise UsageError("policies disagree on action dimension")
    gaps = np.sqrt(((mu_q - mu_fp) ** 2).sum(axis=1))
    return DiscrepancyTimeline(gaps, seed, traj.success)


def _normalized(m: Array) -> Array:
    total = float(m.sum())
    if total < MAP_FLOOR:
        return np.full(m.shape[0], 1.0 / m.shape[0])
    v = np.maximum(m, MAP_FLOOR)
    return v / v.sum()


def _sample_sites(dataset: ExpertDataset, seed: int, n_states: int) -> list[tuple[int, int]]:
    sites = [
        (ti, t)
        for ti, traj in enumerate(dataset.trajectories)
        for t in range(traj.length)
    ]
    if len(sites) <= n_states:
        return sites
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, len(sites)])))
    picks = rng.choice(len(sites), size=n_states, replace=False)
    return [sites[i] for i in picks]


def saliency_divergence(
    policy_q,
    policy_fp,
    dataset: ExpertDataset,
    spec: PerturbationSpec,
    n_states: int = DIVERGENCE_SAMPLE,
) -> float:
    """Mean symmetric KL between the policies' normalized saliency maps.

    Sampled over a fixed seeded set of dataset states; both policies see
    identical perturbations at each site, so equal policies score an
    exact zero. Symmetric in its policy arguments by construction.
    """
    if not dataset.trajectories:
        raise UsageError("dataset has no trajectories")
    if n_states < 1:
        raise UsageError("n_states must be >= 1")
    total = 0.0
    sites = _sample_sites(dataset, spec.seed, n_states)
    for ti, t in sites:
        obs = dataset.trajectories[ti].obs[t]
        m_q = saliency_map(policy_q, obs, spec, traj=ti, t=t)
        m_fp = saliency_map(policy_fp, obs, spec, traj=ti, t=t)
        p, q = _normalized(m_q), _normalized(m_fp)
        total += float(((p - q) * (np.log(p) - np.log(q))).sum())
    return total / len(sites)
