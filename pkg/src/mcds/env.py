"""Kinematic 2-D pick-and-place arena with a scripted expert.

The gripper moves in the plane and opens/closes; closing near an object
attaches it, opening releases it. Tasks ask for one object to be placed in
one of two goal discs (``single-place``), or two objects placed in sequence
(``two-stage``). ``novel-layout`` draws the target object from a strip of
the arena that training layouts never use.

The expert is a phase machine (reach, grasp, transport, place); its phase
at every step becomes the ground-truth segmentation of a demonstration.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, replace
from typing import Callable, Literal

import numpy as np

from .dataset import Dataset, Demonstration, ModalitySpec
from .errors import ValidationError

log = logging.getLogger(__name__)

Family = Literal["single-place", "two-stage", "novel-layout", "mixed"]
FAMILIES = ("single-place", "two-stage", "novel-layout", "mixed")
PHASES = ("reach", "grasp", "transport", "place")

N_GOALS = 2
GRIP_RATE = 0.35
ARRIVE_TOL = 0.01  # expert switches phase within this distance (arena units)
PROXIMITY_SCALE = 0.05
HELD_OUT_STRIP = (0.42, 0.58)  # x-range of novel-layout targets, fraction of arena


@dataclass(frozen=True)
class EnvSpec:
    arena_size: float = 1.0
    n_objects: int = 3
    family: Family = "mixed"
    max_steps: int = 200
    noise: float = 0.1  # multiplicative actuation noise on commanded motion
    obs_noise: float = 0.005  # sensor noise added when demonstrations are recorded
    max_step: float = 0.05  # per-axis motion limit per step, fraction of arena
    goal_radius: float = 0.08
    grasp_radius: float = 0.04

    def validate(self) -> None:
        if self.n_objects < 1:
            raise ValidationError("env needs at least one object")
        if self.family != "single-place" and self.family != "novel-layout" and self.n_objects < 2:
            raise ValidationError(f"family {self.family!r} needs at least two objects")
        if self.family not in FAMILIES:
            raise ValidationError(f"unknown task family {self.family!r}")
        if self.arena_size <= 0 or self.max_step <= 0:
            raise ValidationError("arena_size and max_step must be positive")
        if self.noise < 0 or self.obs_noise < 0:
            raise ValidationError("noise scales must be non-negative")
        stages = 1 if self.family in ("single-place", "novel-layout") else 2
        if self.max_steps < stages * min_stage_steps():
            raise ValidationError(f"max_steps={self.max_steps} is below the minimum expert completion length")
        if self.n_objects > 4:
            raise ValidationError("layout sampler supports at most 4 objects")

    def to_dict(self) -> dict:
        return asdict(self)


def min_stage_steps() -> int:
    # reach >= 1, grasp 3, transport >= 1, place 2
    return 1 + int(np.ceil(1 / GRIP_RATE)) + 1 + int(np.ceil(0.5 / GRIP_RATE))


@dataclass(frozen=True, eq=False)
class EnvState:
    spec: EnvSpec
    gripper: np.ndarray  # (x, y, openness in [0, 1]); 1 is fully open
    objects: np.ndarray  # (K, 2)
    goals: np.ndarray  # (N_GOALS, 2)
    targets: tuple[int, ...]  # object placed at each stage
    goal_of: tuple[int, ...]  # goal disc used at each stage
    held: int = -1
    stage: int = 0
    step_count: int = 0
    seed: int = 0
    family: str = "single-place"

    def __eq__(self, other):
        if not isinstance(other, EnvState):
            return NotImplemented
        return (
            self.spec == other.spec
            and np.array_equal(self.gripper, other.gripper)
            and np.array_equal(self.objects, other.objects)
            and np.array_equal(self.goals, other.goals)
            and (self.targets, self.goal_of, self.held, self.stage, self.step_count, self.seed, self.family)
            == (other.targets, other.goal_of, other.held, other.stage, other.step_count, other.seed, other.family)
        )

    @property
    def task_id(self) -> str:
        return task_id(self.targets, self.goal_of)


def task_id(targets, goal_of) -> str:
    return ",".join(f"o{o}>g{g}" for o, g in zip(targets, goal_of))


def all_task_ids(spec: EnvSpec) -> list[str]:
    """Every task id any family of ``spec`` can produce, sorted."""
    ids = {task_id((o,), (g,)) for o in range(spec.n_objects) for g in range(N_GOALS)}
    ids |= {task_id((a, b), (0, 1)) for a in range(spec.n_objects) for b in range(spec.n_objects) if a != b}
    return sorted(ids)


def _sample_xy(rng, xlo, xhi, ylo, yhi):
    return np.array([rng.uniform(xlo, xhi), rng.uniform(ylo, yhi)])


def reset(spec: EnvSpec, seed: int) -> EnvState:
    spec.validate()
    rng = np.random.default_rng([int(seed), 0x5EED])
    family = spec.family
    if family == "mixed":
        family = "single-place" if rng.random() < 0.5 else "two-stage"
    K = spec.n_objects
    if family == "two-stage":
        a, b = rng.choice(K, size=2, replace=False)
        targets, goal_of = (int(a), int(b)), (0, 1)
    else:
        targets, goal_of = (int(rng.integers(K)),), (int(rng.integers(N_GOALS)),)

    while True:
        g0 = _sample_xy(rng, 0.15, 0.85, 0.65, 0.9)
        g1 = _sample_xy(rng, 0.15, 0.85, 0.65, 0.9)
        if np.linalg.norm(g0 - g1) >= 0.3:
            break
    goals = np.stack([g0, g1])

    objects = np.zeros((K, 2))
    placed: list[np.ndarray] = []
    for k in range(K):
        for _ in range(1000):
            if family == "novel-layout" and k == targets[0]:
                xy = _sample_xy(rng, *HELD_OUT_STRIP, 0.1, 0.45)
            else:
                side = rng.integers(2)
                xy = _sample_xy(rng, 0.1 + 0.5 * side, 0.4 + 0.5 * side, 0.1, 0.45)
            if all(np.linalg.norm(xy - q) >= 0.15 for q in placed):
                break
        else:  # pragma: no cover - four objects always fit
            raise RuntimeError("could not place objects")
        placed.append(xy)
        objects[k] = xy
    start = _sample_xy(rng, 0.1, 0.9, 0.45, 0.6)
    A = spec.arena_size
    return EnvState(
        spec=spec,
        gripper=np.array([start[0] * A, start[1] * A, 1.0]),
        objects=objects * A,
        goals=goals * A,
        targets=targets,
        goal_of=goal_of,
        seed=int(seed),
        family=family,
    )


def in_goal(state: EnvState, obj: int, goal: int) -> bool:
    return bool(np.linalg.norm(state.objects[obj] - state.goals[goal]) < state.spec.goal_radius * state.spec.arena_size)


def is_success(state: EnvState) -> bool:
    return (
        state.stage == len(state.targets)
        and state.held < 0
        and state.gripper[2] >= 0.5
        and all(in_goal(state, o, g) for o, g in zip(state.targets, state.goal_of))
    )


def step(state: EnvState, action) -> tuple[EnvState, bool, bool]:
    """Advance one step. ``action`` is (dx, dy, d_open) in arena units."""
    spec = state.spec
    action = np.asarray(action, dtype=np.float64)
    if action.shape != (3,):
        raise ValidationError(f"action must have shape (3,), got {action.shape}")
    if not np.all(np.isfinite(action)):
        raise ValidationError("action contains NaN or inf")
    A = spec.arena_size
    lim = spec.max_step * A
    d = np.clip(action[:2], -lim, lim)
    if spec.noise > 0 and np.any(d != 0):
        xi = np.random.default_rng([state.seed, state.step_count, 0xA17]).standard_normal(2)
        d = d * (1.0 + spec.noise * np.clip(xi, -3, 3))
    xy = np.clip(state.gripper[:2] + d, 0.0, A)
    g_old = state.gripper[2]
    g = float(np.clip(g_old + np.clip(action[2], -1.0, 1.0), 0.0, 1.0))

    objects = state.objects.copy()
    held, stage = state.held, state.stage
    if held < 0 and g_old >= 0.5 > g:
        dist = np.linalg.norm(objects - xy, axis=1)
        k = int(np.argmin(dist))
        if dist[k] < spec.grasp_radius * A:
            held = k
    released = -1
    if held >= 0 and g >= 0.5:
        released, held = held, -1
    if held >= 0:
        objects[held] = xy
    new = replace(state, gripper=np.array([xy[0], xy[1], g]), objects=objects, held=held, step_count=state.step_count + 1)
    if released >= 0 and stage < len(state.targets) and released == state.targets[stage] and in_goal(new, released, state.goal_of[stage]):
        new = replace(new, stage=stage + 1)
    success = is_success(new)
    done = success or new.step_count >= spec.max_steps
    return new, done, success


# ---------------------------------------------------------------- observations


def modality_specs(spec: EnvSpec) -> list[ModalitySpec]:
    K = spec.n_objects
    return [
        ModalitySpec("scene", 2 + 3 * K + 2 * N_GOALS, "L2"),
        ModalitySpec("hand", 3 * K + 2 * N_GOALS, "L2"),
        ModalitySpec("proprio", 3, "L1"),
    ]


def observation_bounds(spec: EnvSpec) -> list[tuple[np.ndarray, np.ndarray]]:
    K = spec.n_objects
    scene = (np.zeros(2 + 3 * K + 2 * N_GOALS), np.ones(2 + 3 * K + 2 * N_GOALS))
    hand_lo = np.concatenate([-np.ones(2 * K + 2 * N_GOALS), np.zeros(K)])
    hand_hi = np.ones(3 * K + 2 * N_GOALS)
    return [scene, (hand_lo, hand_hi), (np.zeros(3), np.ones(3))]


def observe(state: EnvState, rng: np.random.Generator | None = None) -> list[np.ndarray]:
    """Scene (global geometry), hand (gripper-relative) and proprio vectors.

    With ``rng`` given, sensor noise of scale ``spec.obs_noise`` is added and
    the result clipped back into :func:`observation_bounds`.
    """
    spec = state.spec
    A = spec.arena_size
    p = state.gripper[:2] / A
    objs = state.objects / A
    goals = state.goals / A
    held = np.zeros(spec.n_objects)
    if state.held >= 0:
        held[state.held] = 1.0
    scene = np.concatenate([p, objs.ravel(), goals.ravel(), held])
    rel_obj = objs - p
    rel_goal = goals - p
    prox = np.exp(-(np.linalg.norm(rel_obj, axis=1) / PROXIMITY_SCALE) ** 2)
    hand = np.concatenate([rel_obj.ravel(), rel_goal.ravel(), prox])
    proprio = np.array([p[0], p[1], state.gripper[2]])
    out = [scene, hand, proprio]
    if rng is not None and spec.obs_noise > 0:
        out = [v + rng.normal(0.0, spec.obs_noise, v.shape) for v in out]
    return [np.clip(v, lo, hi).astype(np.float32) for v, (lo, hi) in zip(out, observation_bounds(spec))]


def decode_scene(scene: np.ndarray, spec: EnvSpec) -> dict[str, np.ndarray]:
    """Split a scene vector back into gripper, object and goal positions."""
    K = spec.n_objects
    return {
        "gripper": np.asarray(scene[0:2]),
        "objects": np.asarray(scene[2:2 + 2 * K]).reshape(K, 2),
        "goals": np.asarray(scene[2 + 2 * K:2 + 2 * K + 2 * N_GOALS]).reshape(N_GOALS, 2),
    }


# ---------------------------------------------------------------- expert


def _move(v: np.ndarray, lim: float) -> np.ndarray:
    return np.clip(v, -lim, lim)


def expert_action(state: EnvState) -> tuple[np.ndarray, str]:
    spec = state.spec
    A = spec.arena_size
    lim = spec.max_step * A
    tol = ARRIVE_TOL * A
    p, g = state.gripper[:2], state.gripper[2]
    if state.stage >= len(state.targets):
        return np.zeros(3), "place"
    tgt = state.targets[state.stage]
    goal = state.goals[state.goal_of[state.stage]]
    if state.held == tgt:
        if np.linalg.norm(goal - p) <= tol:
            return np.array([0.0, 0.0, GRIP_RATE]), "place"
        if g > 0:
            return np.array([0.0, 0.0, -GRIP_RATE]), "grasp"
        return np.append(_move(goal - p, lim), 0.0), "transport"
    if state.held >= 0:
        return np.array([0.0, 0.0, GRIP_RATE]), "place"
    if g < 0.5:
        return np.array([0.0, 0.0, GRIP_RATE]), "place"
    obj = state.objects[tgt]
    if np.linalg.norm(obj - p) > tol:
        return np.append(_move(obj - p, lim), 0.0), "reach"
    return np.array([0.0, 0.0, -GRIP_RATE]), "grasp"


def expert_policy(state: EnvState) -> np.ndarray:
    return expert_action(state)[0]


@dataclass
class Episode:
    states: list[EnvState]
    actions: list[np.ndarray]
    phases: list[str]
    success: bool


def rollout(spec: EnvSpec, seed: int, policy: Callable[[EnvState], np.ndarray] | None = None) -> Episode:
    """Run one episode. Without ``policy`` the expert acts and phases are recorded."""
    state = reset(spec, seed)
    states, actions, phases = [state], [], []
    done = success = False
    while not done:
        if policy is None:
            a, ph = expert_action(state)
        else:
            a, ph = np.asarray(policy(state), dtype=np.float64), ""
        state, done, success = step(state, a)
        states.append(state)
        actions.append(a)
        phases.append(ph)
    return Episode(states, actions, phases, success)


def segments_from_labels(labels: list[str]) -> list[tuple[str, int, int]]:
    """Run-length encode per-step labels into 1-indexed half-open intervals."""
    segs: list[tuple[str, int, int]] = []
    start = 1
    for t in range(2, len(labels) + 2):
        if t == len(labels) + 1 or labels[t - 1] != labels[t - 2]:
            segs.append((labels[t - 2], start, t))
            start = t
    return segs


def episode_to_demo(ep: Episode, rng: np.random.Generator | None) -> Demonstration:
    """Frames are the pre-action states plus the final state with a zero action."""
    frames = [observe(s, rng) for s in ep.states]
    acts = [np.asarray(a, dtype=np.float32) for a in ep.actions] + [np.zeros(3, dtype=np.float32)]
    labels = ep.phases + [ep.phases[-1]]
    obs = [np.stack([f[m] for f in frames]) for m in range(len(frames[0]))]
    return Demonstration(
        task_id=ep.states[0].task_id,
        obs=obs,
        actions=np.stack(acts),
        gt_segments=segments_from_labels(labels),
    )


def episode_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def generate_demonstrations(spec: EnvSpec, n: int, seed: int) -> Dataset:
    if n < 1:
        raise ValidationError("n must be >= 1")
    spec.validate()
    demos: list[Demonstration] = []
    index = 0
    discarded: list[int] = []
    while len(demos) < n:
        es = episode_seed(seed, index)
        ep = rollout(spec, es)
        if ep.success:
            demos.append(episode_to_demo(ep, np.random.default_rng([es, 1])))
        else:
            discarded.append(es)
            log.warning("expert failed on episode seed %d; demo discarded", es)
        index += 1
    ds = Dataset(modality_specs(spec), 3, demos, seed)
    ds.discarded = discarded  # type: ignore[attr-defined]
    return ds
