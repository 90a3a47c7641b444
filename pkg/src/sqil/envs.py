"""Toy control environments with genuinely mission-critical states.

Two tasks, both value-semantic (step never mutates, it returns a new
state) and fully deterministic given the reset seed:

PickPlace: a point gripper in the unit square must grasp an object and
place it on a target. Grasp and release are one-shot commitments: a close
command that captures nothing, or any open command while holding, ends
the episode, and moving faster than the handling limit inside the 0.06
interaction zones knocks things over. Cruise steps are forgiving; the few
steps around the grasp and the release are not, which is the property the
saliency experiments rely on.

Lane: 1-D lateral control with double-integrator dynamics (the action
steers the heading, the heading integrates into lateral position) through
three narrow gates. Steering noise near a gate cannot be corrected in
time; noise between gates can.

Scripted experts solve both tasks on every seed. Observations are what
policies and datasets consume; the PickPlace vector mode encodes the
gripper->object and gripper->target offsets at gains 1 and 20 (fine
channels clipped to +/-1) plus the holding bit, so near-field precision
survives coarse activation quantization without losing far-field
direction.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import UsageError

Array = np.ndarray

ARENA_LO, ARENA_HI = 0.0, 1.0
SPAWN_LO, SPAWN_HI = 0.15, 0.85
MIN_SEPARATION = 0.3
MAX_STEP_XY = 0.05
EPS_GRASP = 0.02
EPS_DROP = 0.02
FIRE_DIST = EPS_GRASP / 2.0
ZONE_RADIUS = 0.06
HANDLING_SPEED_LIMIT = 0.032
EXPERT_ZONE_SPEED = 0.026
EXPERT_STANDOFF = 0.0075
APPROACH_RAMP = 1.0
PICKPLACE_MAX_STEPS = 200
FINE_GAIN = 20.0
ZONE_GAIN = 40.0
IMG_SIZE = 32
BLOB_SIGMA = 1.3
BLOB_LEVELS = {"target": 0.45, "object": 0.8, "gripper": 1.0}

LANE_MAX_STEPS = 300
GATE_STEPS = (75, 150, 225)
GATE_HALF_WIDTH = 0.03
GATE_CENTER_RANGE = 0.25
MAX_STEER = 0.05
MAX_HEADING = 0.03
LANE_WINDOW = 10
LANE_KP = 0.08
LANE_KD = 0.55


@dataclass(frozen=True)
class PickPlaceState:
    gripper: tuple[float, float]
    obj: tuple[float, float]
    target: tuple[float, float]
    holding: bool
    t: int
    done: bool = False
    success: bool = False


@dataclass(frozen=True)
class LaneState:
    y: float
    heading: float
    gates: tuple[float, float, float]
    next_gate: int
    t: int
    done: bool = False
    success: bool = False


@dataclass
class Trajectory:
    """One episode: observations, the actions taken from them, outcome."""

    obs: Array
    actions: Array
    success: bool
    seed: int

    @property
    def length(self) -> int:
        return self.obs.shape[0]


@dataclass
class ExpertDataset:
    trajectories: list[Trajectory]
    env_id: str
    obs_mode: str
    seed: int

    @property
    def n_steps(self) -> int:
        return sum(t.length for t in self.trajectories)


def _dist(a, b) -> float:
    return float(np.hypot(a[0] - b[0], a[1] - b[1]))


class PickPlaceEnv:
    """Grasp-and-place in the unit square. obs_mode: vector | image32."""

    env_id = "pickplace"
    action_dim = 3

    def __init__(self, obs_mode: str = "vector"):
        if obs_mode not in ("vector", "image32"):
            raise UsageError(f"unknown obs_mode {obs_mode!r}")
        self.obs_mode = obs_mode

    @property
    def obs_dim(self) -> int:
        return 13 if self.obs_mode == "vector" else IMG_SIZE * IMG_SIZE

    @property
    def max_steps(self) -> int:
        return PICKPLACE_MAX_STEPS

    def reset(self, seed: int) -> PickPlaceState:
        """Sample object/target with separation >= 0.3, gripper centered."""
        rng = np.random.Generator(np.random.PCG64(seed))
        while True:
            obj = rng.uniform(SPAWN_LO, SPAWN_HI, size=2)
            tgt = rng.uniform(SPAWN_LO, SPAWN_HI, size=2)
            if _dist(obj, tgt) >= MIN_SEPARATION:
                break
        return PickPlaceState((0.5, 0.5), tuple(obj), tuple(tgt), False, 0)

    def in_interaction_zone(self, state: PickPlaceState) -> bool:
        """True inside the gentle-handling zone around the active goal."""
        goal = state.target if state.holding else state.obj
        return _dist(state.gripper, goal) <= ZONE_RADIUS

    def step(self, state: PickPlaceState, action: Array) -> tuple[PickPlaceState, bool, bool]:
        if state.done:
            raise UsageError("step called on a finished episode")
        a = np.asarray(action, dtype=np.float64)
        if a.shape != (3,):
            raise UsageError(f"pickplace action must have shape (3,), got {a.shape}")
        dx = float(np.clip(a[0], -MAX_STEP_XY, MAX_STEP_XY))
        dy = float(np.clip(a[1], -MAX_STEP_XY, MAX_STEP_XY))
        g = float(np.clip(a[2], -1.0, 1.0))
        t = state.t + 1
        # Rough handling near the goal ends the episode: the commitment
        # that makes these states mission-critical.
        if self.in_interaction_zone(state) and np.hypot(dx, dy) > HANDLING_SPEED_LIMIT:
            nxt = replace(state, t=t, done=True, success=False)
            return nxt, False, True
        grip = (
            float(np.clip(state.gripper[0] + dx, ARENA_LO, ARENA_HI)),
            float(np.clip(state.gripper[1] + dy, ARENA_LO, ARENA_HI)),
        )
        obj = grip if state.holding else state.obj
        holding = state.holding
        done = False
        success = False
        if g >= 0.5 and not holding:
            if _dist(grip, obj) <= EPS_GRASP:
                holding = True
                obj = grip
            else:
                done = True  # closed on empty space: scene disturbed
        elif g <= -0.5 and holding:
            holding = False
            done = True  # placement is final wherever it lands
            success = _dist(grip, state.target) <= EPS_DROP
        if t >= PICKPLACE_MAX_STEPS and not done:
            done = True
        nxt = PickPlaceState(grip, obj, state.target, holding, t, done, success)
        return nxt, success, done

    def expert_action(self, state: PickPlaceState) -> Array:
        """Proportional approach to a standoff ring, then actuate.

        The speed cap is a continuous ramp: full step far out, decaying to
        the gentle cruise speed at the zone boundary, so the state-action
        map has no jump for a function approximator to straddle. At or
        below half the grasp tolerance the expert closes (or opens).
        """
        goal = np.array(state.target if state.holding else state.obj)
        grip = np.array(state.gripper)
        d = goal - grip
        dist = float(np.hypot(d[0], d[1]))
        if dist <= FIRE_DIST:
            return np.array([0.0, 0.0, -1.0 if state.holding else 1.0])
        cap = min(MAX_STEP_XY, EXPERT_ZONE_SPEED + APPROACH_RAMP * max(0.0, dist - ZONE_RADIUS))
        step_len = min(cap, dist - EXPERT_STANDOFF)
        move = d / dist * step_len
        return np.array([move[0], move[1], 0.0])

    def render32(self, state: PickPlaceState) -> Array:
        """32x32 grayscale render: soft blobs, brightest on top via max."""
        coords = np.arange(IMG_SIZE, dtype=np.float64)
        rows = coords[:, None]
        cols = coords[None, :]
        img = np.zeros((IMG_SIZE, IMG_SIZE))
        for pos, level in (
            (state.target, BLOB_LEVELS["target"]),
            (state.obj, BLOB_LEVELS["object"]),
            (state.gripper, BLOB_LEVELS["gripper"]),
        ):
            cx = pos[0] * (IMG_SIZE - 1)
            cy = pos[1] * (IMG_SIZE - 1)
            blob = level * np.exp(-((rows - cy) ** 2 + (cols - cx) ** 2) / (2.0 * BLOB_SIGMA**2))
            img = np.maximum(img, blob)
        return img

    def observe(self, state: PickPlaceState) -> Array:
        """Egocentric 13-channel vector (or the 32x32 render).

        Per goal (object, then target): unit bearing (2), range (1),
        zone proximity clip(ZONE_GAIN*(ZONE_RADIUS - range), +-1) (1),
        and fine position clip(FINE_GAIN*delta, +-1) (2); plus the
        holding bit. Bearings separate heading from range so the action
        map is near-linear in the inputs; the zone and fine channels
        put high gain exactly where the handling limit and the grasp
        tolerance demand precision.
        """
        if self.obs_mode == "image32":
            return self.render32(state).reshape(-1)
        grip = np.array(state.gripper)
        out = np.empty(13)
        for i, goal in enumerate((state.obj, state.target)):
            d = np.array(goal) - grip
            r = float(np.hypot(d[0], d[1]))
            u = d / r if r > 1e-12 else np.zeros(2)
            out[2 * i : 2 * i + 2] = u
            out[4 + i] = r
            out[6 + i] = np.clip(ZONE_GAIN * (ZONE_RADIUS - r), -1.0, 1.0)
            out[8 + 2 * i : 10 + 2 * i] = np.clip(FINE_GAIN * d, -1.0, 1.0)
        out[12] = 1.0 if state.holding else 0.0
        return out


class LaneEnv:
    """Three-gate lane keeping with double-integrator lateral dynamics."""

    env_id = "lane"
    action_dim = 1

    def __init__(self, obs_mode: str = "vector"):
        if obs_mode != "vector":
            raise UsageError("lane supports the vector observation mode only")
        self.obs_mode = obs_mode

    @property
    def obs_dim(self) -> int:
        return 4

    @property
    def max_steps(self) -> int:
        return LANE_MAX_STEPS

    def reset(self, seed: int) -> LaneState:
        rng = np.random.Generator(np.random.PCG64(seed))
        gates = tuple(rng.uniform(-GATE_CENTER_RANGE, GATE_CENTER_RANGE, size=3))
        y0 = float(rng.uniform(-0.1, 0.1))
        return LaneState(y0, 0.0, gates, 0, 0)

    def in_gate_window(self, state: LaneState) -> bool:
        """True within the last few steps before the next gate."""
        if state.next_gate >= len(GATE_STEPS):
            return False
        return GATE_STEPS[state.next_gate] - state.t <= LANE_WINDOW

    def step(self, state: LaneState, action: Array) -> tuple[LaneState, bool, bool]:
        if state.done:
            raise UsageError("step called on a finished episode")
        a = np.asarray(action, dtype=np.float64).reshape(-1)
        if a.shape != (1,):
            raise UsageError(f"lane action must have shape (1,), got {a.shape}")
        steer = float(np.clip(a[0], -MAX_STEER, MAX_STEER))
        heading = float(np.clip(state.heading + steer, -MAX_HEADING, MAX_HEADING))
        y = float(np.clip(state.y + heading, -0.5, 0.5))
        t = state.t + 1
        next_gate = state.next_gate
        done = False
        success = False
        if next_gate < len(GATE_STEPS) and t == GATE_STEPS[next_gate]:
            if abs(y - state.gates[next_gate]) <= GATE_HALF_WIDTH:
                next_gate += 1
                if next_gate == len(GATE_STEPS):
                    done = True
                    success = True
            else:
                done = True  # gate missed
        if t >= LANE_MAX_STEPS and not done:
            done = True
        nxt = LaneState(y, heading, state.gates, next_gate, t, done, success)
        return nxt, success, done

    def expert_action(self, state: LaneState) -> Array:
        c = state.gates[state.next_gate] if state.next_gate < len(GATE_STEPS) else 0.0
        e = state.y - c
        return np.array([np.clip(-LANE_KP * e - LANE_KD * state.heading, -MAX_STEER, MAX_STEER)])

    def observe(self, state: LaneState) -> Array:
        c = state.gates[state.next_gate] if state.next_gate < len(GATE_STEPS) else 0.0
        e = state.y - c
        return np.array(
            [e, state.heading, (c + GATE_HALF_WIDTH) - state.y, state.y - (c - GATE_HALF_WIDTH)]
        )


def make_env(env_id: str, obs_mode: str = "vector"):
    if env_id == "pickplace":
        return PickPlaceEnv(obs_mode)
    if env_id == "lane":
        return LaneEnv(obs_mode)
    raise UsageError(f"unknown env id {env_id!r}")


def run_expert_episode(env, seed: int) -> tuple[Trajectory, list]:
    """Roll the scripted expert; returns the trajectory and its states."""
    state = env.reset(seed)
    obs_list, act_list, states = [], [], [state]
    success = False
    while not state.done:
        a = env.expert_action(state)
        obs_list.append(env.observe(state))
        act_list.append(np.asarray(a, dtype=np.float64))
        state, success, _ = env.step(state, a)
        states.append(state)
    obs = np.asarray(obs_list, dtype=np.float32)
    actions = np.asarray(act_list, dtype=np.float32)
    return Trajectory(obs, actions, bool(success), seed), states


def generate_dataset(env, n_episodes: int, seed: int = 0) -> ExpertDataset:
    """Expert demonstrations; only successful episodes are kept.

    Observations and actions are stored as f32, matching the on-disk
    format exactly, so training consumes identical bits whether the
    dataset was freshly generated or loaded from a file.
    """
    if n_episodes < 1:
        raise UsageError("n_episodes must be >= 1")
    trajectories = []
    episode_seed = seed
    while len(trajectories) < n_episodes:
        traj, _ = run_expert_episode(env, episode_seed)
        if traj.success:
            trajectories.append(traj)
        episode_seed += 1
    return ExpertDataset(trajectories, env.env_id, env.obs_mode, seed)


def replay_states(env, traj: Trajectory) -> list:
    """Reconstruct the full state sequence of a stored trajectory."""
    state = env.reset(traj.seed)
    states = [state]
    for a in traj.actions:
        state, _, _ = env.step(state, np.asarray(a, dtype=np.float64))
        states.append(state)
    return states


def interaction_mask(env, traj: Trajectory) -> Array:
    """Boolean mask over timesteps: pre-state in the critical region."""
    states = replay_states(env, traj)[: traj.length]
    if isinstance(env, PickPlaceEnv):
        return np.array([env.in_interaction_zone(s) for s in states])
    return np.array([env.in_gate_window(s) for s in states])
