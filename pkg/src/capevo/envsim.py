"""Desk-scale stochastic task simulator.

Six tabletop tasks are modelled on a 1 m x 1 m table.  There is no physics:
each capability invocation moves the gripper to a commanded point, the
achieved point carries controller noise, and a kind-specific effect is applied
when the positional error is inside the step tolerance.

Controller error model (per axis, metres)::

    target   = mean of K noisy observations of the reference + offset
    achieved = target + N(0, sd^2)
    sd       = ctrl_noise * gain_penalty(gain) * law_factor
               * (1 + speed_noise_gain * excess(speed, safe_speed))
               * (1 + force_noise_gain * excess(force, safe_force))

``gain_penalty`` is 1/gain below unity and gain above it, so gain 1 is the
unique optimum. Damped control averages K=4 observations, which cuts
observation noise, and is 25% slower.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

from .core import KIND_INTERFACES, Action, CapabilityKind, ControlLaw, ParamVector, StepOutcome, WorldState
from .seeding import Stream, derive

K = CapabilityKind

TABLE_HALF = 0.5
HOME = (0.0, -0.35)
LIFT_HEIGHT = 0.08
STACK_HEIGHT = 0.05


@dataclass(frozen=True)
class EnvConfig:
    position_jitter: float = 0.05
    obs_noise_sigma: float = 0.01
    actuation_fail_prob: float = 0.05
    ctrl_noise: float = 0.01
    settle_time: float = 0.25
    damped_obs_samples: int = 4
    damped_ctrl_factor: float = 1.0
    damped_time_factor: float = 1.25
    safe_speed: float = 0.5
    speed_noise_gain: float = 1.0
    safe_force: float = 20.0
    force_noise_gain: float = 1.0
    min_grip_force: float = 5.0
    min_insert_force: float = 8.0
    nominal_speed: float = 0.3
    shortcut_bonus_enabled: bool = False
    shortcut_fraction: float = 0.6
    shortcut_bonus: float = 5.0
    step_timeout: float = 10.0
    # multiplies every step and success tolerance; 0.5 gives the strict catalogue
    tolerance_scale: float = 1.0

    def __post_init__(self):
        for name in ("actuation_fail_prob", "shortcut_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        for name in ("position_jitter", "obs_noise_sigma", "ctrl_noise", "step_timeout", "nominal_speed"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.tolerance_scale <= 0:
            raise ValueError("tolerance_scale must be positive")
        if self.damped_obs_samples < 1:
            raise ValueError("damped_obs_samples must be >= 1")


# ---------------------------------------------------------------------------
# Tasks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TaskStep:
    kind: CapabilityKind
    ref: str
    tolerance: float
    carry: str = ""


@dataclass(frozen=True)
class SuccessCriterion:
    rule: str
    lift_height: float = 0.0
    position_tolerance: float = 0.0
    stability_s: float = 0.0
    fill_fraction: float = 0.0
    count: int = 0
    force_check: bool = False


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    name: str
    steps: tuple[TaskStep, ...]
    objects: Mapping[str, tuple[float, float]]
    fixtures: Mapping[str, tuple[float, float]]
    success: SuccessCriterion
    containers: Mapping[str, float] = field(default_factory=dict)

    @property
    def nominal_steps(self) -> int:
        return len(self.steps)

    @property
    def step_template(self) -> tuple[CapabilityKind, ...]:
        return tuple(s.kind for s in self.steps)


def _tasks() -> tuple[TaskSpec, ...]:
    return (
        TaskSpec(
            "T1", "Pick",
            (TaskStep(K.PERCEIVE, "cube", 0.1), TaskStep(K.GRASP, "cube", 0.06)),
            {"cube": (0.0, 0.10)}, {},
            SuccessCriterion("lift", lift_height=0.05),
        ),
        TaskSpec(
            "T2", "Place",
            (TaskStep(K.PERCEIVE, "cube", 0.1), TaskStep(K.GRASP, "cube", 0.06),
             TaskStep(K.PLACE, "goal", 0.04)),
            {"cube": (-0.10, 0.10)}, {"goal": (0.15, 0.10)},
            SuccessCriterion("place", position_tolerance=0.04),
        ),
        TaskSpec(
            "T3", "Stack",
            (TaskStep(K.PERCEIVE, "block_a", 0.1), TaskStep(K.GRASP, "block_a", 0.06),
             TaskStep(K.ALIGN, "block_b", 0.05), TaskStep(K.PLACE, "block_b", 0.03)),
            {"block_a": (-0.15, 0.05), "block_b": (0.10, 0.15)}, {},
            SuccessCriterion("stack", position_tolerance=0.03, stability_s=3.0),
        ),
        TaskSpec(
            "T4", "Pour",
            (TaskStep(K.PERCEIVE, "cup", 0.1), TaskStep(K.GRASP, "cup", 0.06),
             TaskStep(K.TRANSPORT, "bowl", 0.06), TaskStep(K.POUR, "bowl", 0.04),
             TaskStep(K.PLACE, "cup_home", 0.08)),
            {"cup": (-0.20, 0.0), "bowl": (0.15, 0.05)}, {"cup_home": (-0.20, -0.15)},
            SuccessCriterion("pour", fill_fraction=0.8),
            containers={"cup": 1.0, "bowl": 0.0},
        ),
        TaskSpec(
            "T5", "Sort",
            (TaskStep(K.PERCEIVE, "red", 0.1), TaskStep(K.SORT, "bin_red", 0.06, carry="red"),
             TaskStep(K.PERCEIVE, "green", 0.1), TaskStep(K.SORT, "bin_green", 0.06, carry="green"),
             TaskStep(K.PERCEIVE, "blue", 0.1), TaskStep(K.SORT, "bin_blue", 0.06, carry="blue")),
            {"red": (-0.20, 0.15), "green": (0.0, 0.20), "blue": (0.20, 0.15)},
            {"bin_red": (-0.25, -0.25), "bin_green": (0.0, -0.25), "bin_blue": (0.25, -0.25)},
            SuccessCriterion("sort", position_tolerance=0.08, count=3),
        ),
        TaskSpec(
            "T6", "Assemble",
            (TaskStep(K.PERCEIVE, "peg", 0.1), TaskStep(K.GRASP, "peg", 0.06),
             TaskStep(K.ALIGN, "hole", 0.05), TaskStep(K.INSERT, "hole", 0.03),
             TaskStep(K.RESCAN, "lid", 0.1), TaskStep(K.GRASP, "lid", 0.06),
             TaskStep(K.ALIGN, "peg", 0.05), TaskStep(K.PLACE, "peg", 0.04)),
            {"peg": (-0.15, 0.10), "lid": (0.20, 0.20)}, {"hole": (0.10, -0.05)},
            SuccessCriterion("assemble", position_tolerance=0.03, force_check=True),
        ),
    )


TASKS: tuple[TaskSpec, ...] = _tasks()
TASKS_BY_ID: dict[str, TaskSpec] = {t.task_id: t for t in TASKS}


def get_task(task_id: str) -> TaskSpec:
    return TASKS_BY_ID[task_id]


def scaled_tasks(scale: float) -> tuple[TaskSpec, ...]:
    """Tasks with every step and success tolerance multiplied by ``scale``."""
    if scale == 1.0:
        return TASKS
    return tuple(
        replace(t, steps=tuple(replace(s, tolerance=s.tolerance * scale) for s in t.steps),
                success=replace(t.success, position_tolerance=t.success.position_tolerance * scale))
        for t in TASKS
    )


# Fixed time per invocation (s), excluding travel.
BASE_TIME = {
    K.PERCEIVE: 0.30,
    K.GRASP: 0.50,
    K.PLACE: 0.40,
    K.ALIGN: 0.30,
    K.TRANSPORT: 0.30,
    K.POUR: 0.80,
    K.SORT: 0.50,
    K.INSERT: 0.60,
    K.RESCAN: 0.30,
}
FORCE_KINDS = frozenset({K.GRASP, K.INSERT})
# A miss by one of these kinds releases or spills the object, so retrying is pointless.
IRREVERSIBLE_KINDS = frozenset({K.PLACE, K.INSERT, K.SORT, K.POUR})
_REFERENCE_FORCE = 15.0


# ---------------------------------------------------------------------------
# Oracle and reference parameters
# ---------------------------------------------------------------------------

VELOCITY_CAP = 0.5
FORCE_LIMIT = 20.0


def oracle_params(kind: CapabilityKind) -> ParamVector:
    """Analytically optimal parameters for the controller model."""
    CapabilityKind(kind)
    return ParamVector(
        gain=1.0, offset_x=0.0, offset_y=0.0,
        speed=VELOCITY_CAP, force=FORCE_LIMIT,
        retry_enabled=True, max_retries=3, control_law=ControlLaw.DAMPED,
    )


def kind_angle(kind: CapabilityKind) -> float:
    return 2.0 * math.pi * list(CapabilityKind).index(CapabilityKind(kind)) / len(CapabilityKind)


def initial_params(kind: CapabilityKind, offset: float = 0.03, gain: float = 0.45,
                   speed: float = 0.40, force: float = 15.0) -> ParamVector:
    """Deliberately mis-calibrated starting point: biased, sluggish, no retries."""
    a = kind_angle(kind)
    return ParamVector(
        gain=gain, offset_x=offset * math.cos(a), offset_y=offset * math.sin(a),
        speed=speed, force=force, retry_enabled=False, max_retries=0, control_law=ControlLaw.DIRECT,
    )


def demonstrator_params(kind: CapabilityKind, offset: float = 0.002, gain: float = 0.5,
                        speed: float = 0.40, force: float = 15.0) -> ParamVector:
    """Teleoperation-style teacher: well aimed, but as cautious and slow as an untuned ECM."""
    a = kind_angle(kind) + math.pi / 2
    return replace(oracle_params(kind), gain=gain, offset_x=offset * math.cos(a), offset_y=offset * math.sin(a),
                   speed=speed, force=force)


# ---------------------------------------------------------------------------
# Reset / observe
# ---------------------------------------------------------------------------


def reset(task: TaskSpec, seed: int, cfg: EnvConfig | None = None) -> WorldState:
    cfg = cfg or EnvConfig()
    rng = Stream(derive(seed, "reset"))
    j = cfg.position_jitter
    positions = {}
    for name in sorted(task.objects):
        x, y = task.objects[name]
        positions[name] = (x + rng.uniform(-j, j), y + rng.uniform(-j, j))
    return WorldState(
        object_positions=positions,
        fixtures=dict(task.fixtures),
        object_heights={name: 0.0 for name in positions},
        container_fill=dict(task.containers),
        gripper_pos=HOME,
    )


def observe(state: WorldState, cfg: EnvConfig, seed: int | Stream) -> WorldState:
    """Noisy copy of ``state``; the true state is left untouched."""
    rng = seed if isinstance(seed, Stream) else Stream(derive(seed, "observe"))
    s = cfg.obs_noise_sigma

    def noisy(points):
        out = {}
        for name in sorted(points):
            x, y = points[name]
            out[name] = (x + rng.normal(s), y + rng.normal(s))
        return out

    return replace(state, object_positions=noisy(state.object_positions), fixtures=noisy(state.fixtures))


def observe_point(state: WorldState, name: str, cfg: EnvConfig, rng: Stream, samples: int = 1) -> tuple[float, float]:
    """Mean of ``samples`` noisy observations of one entity."""
    x, y = state.position_of(name)
    s = cfg.obs_noise_sigma
    sx = sy = 0.0
    for _ in range(samples):
        sx += rng.normal(s)
        sy += rng.normal(s)
    return x + sx / samples, y + sy / samples


# ---------------------------------------------------------------------------
# Controller: turns ECM parameters into an action
# ---------------------------------------------------------------------------


def controller_action(
    step: TaskStep,
    params: ParamVector,
    state: WorldState,
    cfg: EnvConfig,
    rng: Stream,
    bias: tuple[float, float] = (0.0, 0.0),
) -> Action:
    damped = params.control_law == ControlLaw.DAMPED
    samples = cfg.damped_obs_samples if damped else 1
    ox, oy = observe_point(state, step.ref, cfg, rng, samples)
    target = (ox + params.offset_x + bias[0], oy + params.offset_y + bias[1])
    i, o = KIND_INTERFACES[step.kind]
    return Action(
        capability_kind=step.kind,
        target=target,
        speed=max(0.0, params.speed),
        force=max(0.0, params.force),
        input_interface=i,
        output_interface=o,
        ref=step.ref,
        tolerance=step.tolerance,
        gain=params.gain,
        damped=damped,
        carry=step.carry,
    )


def gain_penalty(g: float) -> float:
    """1/g below unity and g above it: low gain is sluggish, high gain overshoots."""
    return 1.0 / g if 0.0 < g <= 1.0 else (g if g > 1.0 else 1e6)


def control_sd(action: Action, cfg: EnvConfig) -> float:
    sd = cfg.ctrl_noise * gain_penalty(action.gain)
    if action.damped:
        sd *= cfg.damped_ctrl_factor
    if action.speed > cfg.safe_speed:
        sd *= 1.0 + cfg.speed_noise_gain * (action.speed - cfg.safe_speed) / cfg.safe_speed
    if action.force > cfg.safe_force:
        sd *= 1.0 + cfg.force_noise_gain * (action.force - cfg.safe_force) / cfg.safe_force
    return sd


# ---------------------------------------------------------------------------
# Step
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StepResult:
    state: WorldState
    outcome: StepOutcome
    duration: float
    error: float | None
    error_vec: tuple[float, float] | None
    actuation_failed: bool = False
    recoverable: bool = True


def _clip(v: float) -> float:
    return -TABLE_HALF if v < -TABLE_HALF else (TABLE_HALF if v > TABLE_HALF else v)


def step_detailed(state: WorldState, action: Action, cfg: EnvConfig, seed: int | Stream) -> StepResult:
    rng = seed if isinstance(seed, Stream) else Stream(derive(seed, "act"))
    u_fail = rng.random()
    sd = control_sd(action, cfg)
    nx = rng.normal(sd)
    ny = rng.normal(sd)
    kind = action.capability_kind
    base = BASE_TIME[kind]
    if kind in FORCE_KINDS:
        base *= math.sqrt(_REFERENCE_FORCE / max(action.force, 1.0))

    if u_fail < cfg.actuation_fail_prob:
        nxt = replace(state, step_count=state.step_count + 1, sim_time=state.sim_time + base)
        return StepResult(nxt, StepOutcome.FAIL, base, None, None, actuation_failed=True)

    ax = _clip(action.target[0] + nx)
    ay = _clip(action.target[1] + ny)
    rx, ry = state.position_of(action.ref)
    # motion time follows the planned waypoints, not the millimetre-level landing error
    gx, gy = state.gripper_pos
    dist = math.hypot(rx - gx, ry - gy)
    speed = action.speed
    travel = dist / speed if speed > 1e-9 else math.inf
    if action.damped:
        travel *= cfg.damped_time_factor
    duration = travel + base + cfg.settle_time * gain_penalty(action.gain)

    ev = (ax - rx, ay - ry)
    err = math.hypot(*ev)
    ok = err < action.tolerance and duration <= cfg.step_timeout
    if kind == K.GRASP:
        ok = ok and action.force >= cfg.min_grip_force and state.held in (None, action.ref)
    elif kind == K.INSERT:
        ok = ok and action.force >= cfg.min_insert_force and state.held is not None
    elif kind in (K.PLACE, K.ALIGN, K.TRANSPORT, K.POUR):
        ok = ok and state.held is not None

    duration = min(duration, cfg.step_timeout)
    nxt = _apply_effect(state, action, (ax, ay), err, ok, cfg)
    nxt = replace(nxt, step_count=state.step_count + 1, sim_time=state.sim_time + duration,
                  gripper_speed=speed, gripper_force=action.force if kind in FORCE_KINDS else nxt.gripper_force)
    recoverable = ok or kind not in IRREVERSIBLE_KINDS
    return StepResult(nxt, StepOutcome.SUCCESS if ok else StepOutcome.FAIL, duration, err, ev,
                      recoverable=recoverable)


def step(state: WorldState, action: Action, cfg: EnvConfig, seed) -> tuple[WorldState, StepOutcome]:
    r = step_detailed(state, action, cfg, seed)
    return r.state, r.outcome


def _apply_effect(state: WorldState, action: Action, achieved, err: float, ok: bool, cfg: EnvConfig) -> WorldState:
    kind = action.capability_kind
    pos = dict(state.object_positions)
    heights = dict(state.object_heights)
    held = state.held
    gripper = state.position_of(action.ref)  # next motion starts from this waypoint
    fill = state.container_fill
    markers = state.markers

    if held is not None:
        pos[held] = achieved  # carried object follows the gripper

    if kind == K.GRASP and ok:
        held = action.ref
        gripper = state.object_positions[held]
        pos[held] = gripper
        heights[held] = LIFT_HEIGHT
    elif kind == K.PLACE and held is not None:
        # a miss drops the object where the gripper ended up
        target_is_object = action.ref in state.object_positions
        heights[held] = STACK_HEIGHT if ok and target_is_object else 0.0
        held = None
    elif kind == K.INSERT and held is not None:
        heights[held] = 0.0
        if ok:
            markers = {**markers, "insert_force": action.force}
        held = None
    elif kind == K.POUR and held is not None:
        src = state.container_fill.get(held, 0.0)
        eff = max(0.0, 1.0 - 0.15 * err / action.tolerance) if ok else 0.0
        moved = src * eff
        fill = dict(fill)
        fill[held] = 0.0
        fill[action.ref] = min(1.0, fill.get(action.ref, 0.0) + moved)
        markers = {**markers, "spilled": markers.get("spilled", 0.0) + (src - moved)}
    elif kind == K.SORT and action.carry:
        pos[action.carry] = achieved
        heights[action.carry] = 0.0

    return replace(state, object_positions=pos, object_heights=heights, held=held, gripper_pos=gripper,
                   container_fill=fill, markers=markers)


# ---------------------------------------------------------------------------
# Success
# ---------------------------------------------------------------------------


def _dist(a, b) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


def check_success(task: TaskSpec, state: WorldState) -> bool:
    """Task criterion evaluated on the true state."""
    c = task.success
    p = state.object_positions
    h = state.object_heights
    if c.rule == "lift":
        return any(h[name] > c.lift_height for name in task.objects)
    if c.rule == "place":
        return state.held is None and h["cube"] == 0.0 and _dist(p["cube"], state.fixtures["goal"]) < c.position_tolerance
    if c.rule == "stack":
        return state.held is None and h["block_a"] > 0.0 and _dist(p["block_a"], p["block_b"]) < c.position_tolerance
    if c.rule == "pour":
        return state.container_fill.get("bowl", 0.0) > c.fill_fraction
    if c.rule == "sort":
        placed = sum(
            1 for name in task.objects
            if _dist(p[name], state.fixtures[f"bin_{name}"]) < c.position_tolerance
        )
        return placed >= c.count
    if c.rule == "assemble":
        force = state.markers.get("insert_force")
        return (
            force is not None
            and (not c.force_check or force <= FORCE_LIMIT)
            and _dist(p["peg"], state.fixtures["hole"]) < c.position_tolerance
            and state.held is None
            and h["lid"] > 0.0
            and _dist(p["lid"], p["peg"]) < 0.02
        )
    raise ValueError(f"unknown success rule {c.rule}")


# ---------------------------------------------------------------------------
# Nominal time for the shortcut bonus
# ---------------------------------------------------------------------------


def nominal_time(task: TaskSpec, cfg: EnvConfig) -> float:
    """Expected duration of a clean run on the nominal layout at the nominal pace."""
    positions = {**task.objects, **task.fixtures}
    g = HOME
    total = 0.0
    for s in task.steps:
        tgt = positions[s.ref]
        total += _dist(g, tgt) / cfg.nominal_speed + BASE_TIME[s.kind]
        g = tgt
    return total


def task_list(ids: Sequence[str] | None = None) -> tuple[TaskSpec, ...]:
    if ids is None:
        return TASKS
    return tuple(get_task(i) for i in ids)
