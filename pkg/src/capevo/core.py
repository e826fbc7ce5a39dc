"""Shared domain types, the frozen-agent contract, planning and composition checks."""

from __future__ import annotations

import hashlib
import json
import math
import threading
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Any, Iterable, Mapping, Sequence

from .errors import InterfaceMismatch, MissingCapability
from .seeding import fnv1a64


class CapabilityKind(str, Enum):
    PERCEIVE = "Perceive"
    GRASP = "Grasp"
    PLACE = "Place"
    ALIGN = "Align"
    TRANSPORT = "Transport"
    POUR = "Pour"
    SORT = "Sort"
    INSERT = "Insert"
    RESCAN = "Rescan"

    def __str__(self) -> str:
        return self.value


class Interface(str, Enum):
    RAW_SCENE = "RawScene"
    ALIGNED_POSE = "AlignedPose"
    GRASPED_OBJECT = "GraspedObject"
    POSITIONED_OBJECT = "PositionedObject"
    PLACED_OBJECT = "PlacedObject"
    ASSEMBLED = "Assembled"

    def __str__(self) -> str:
        return self.value


# (input, output) interface of every capability kind.
KIND_INTERFACES: dict[CapabilityKind, tuple[Interface, Interface]] = {
    CapabilityKind.PERCEIVE: (Interface.RAW_SCENE, Interface.ALIGNED_POSE),
    CapabilityKind.GRASP: (Interface.ALIGNED_POSE, Interface.GRASPED_OBJECT),
    CapabilityKind.PLACE: (Interface.GRASPED_OBJECT, Interface.PLACED_OBJECT),
    CapabilityKind.ALIGN: (Interface.GRASPED_OBJECT, Interface.GRASPED_OBJECT),
    CapabilityKind.TRANSPORT: (Interface.GRASPED_OBJECT, Interface.POSITIONED_OBJECT),
    CapabilityKind.POUR: (Interface.POSITIONED_OBJECT, Interface.GRASPED_OBJECT),
    CapabilityKind.SORT: (Interface.ALIGNED_POSE, Interface.RAW_SCENE),
    CapabilityKind.INSERT: (Interface.GRASPED_OBJECT, Interface.ASSEMBLED),
    CapabilityKind.RESCAN: (Interface.ASSEMBLED, Interface.ALIGNED_POSE),
}

KIND_CODES = {kind: i + 1 for i, kind in enumerate(CapabilityKind)}


class LifecycleState(str, Enum):
    CREATED = "Created"
    DEPLOYED = "Deployed"
    PENDING = "Pending"
    DEPRECATED = "Deprecated"


class ControlLaw(str, Enum):
    DIRECT = "Direct"
    DAMPED = "Damped"


class Intervention(str, Enum):
    NONE = "None"
    MODIFIED = "Modified"
    REJECTED = "Rejected"


_INTERVENTION_RANK = {Intervention.NONE: 0, Intervention.MODIFIED: 1, Intervention.REJECTED: 2}


def worst_intervention(a: Intervention, b: Intervention) -> Intervention:
    return a if _INTERVENTION_RANK[a] >= _INTERVENTION_RANK[b] else b


class StepOutcome(str, Enum):
    SUCCESS = "StepSuccess"
    FAIL = "StepFail"
    ABORTED = "Aborted"


class ConstraintKind(str, Enum):
    WORKSPACE_BOX = "WorkspaceBox"
    FORCE_LIMIT = "ForceLimit"
    VELOCITY_CAP = "VelocityCap"
    FORBIDDEN_REGION = "ForbiddenRegion"


# ---------------------------------------------------------------------------
# Hashing helpers
# ---------------------------------------------------------------------------


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_json_default)


def _json_default(obj):
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, (bytes, bytearray)):
        return obj.hex()
    if isinstance(obj, (set, frozenset)):
        return sorted(obj)
    raise TypeError(f"not serialisable: {type(obj).__name__}")


def sha256_hex(obj: Any) -> str:
    if isinstance(obj, (bytes, bytearray)):
        return hashlib.sha256(obj).hexdigest()
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# ECM parameters and records
# ---------------------------------------------------------------------------

NUMERIC_FIELDS = ("gain", "offset_x", "offset_y", "speed", "force")


@dataclass(frozen=True)
class ParamVector:
    """Controller parameters of one ECM version.

    Numeric part: gain (dimensionless), offset_x/offset_y (m), commanded speed
    (m/s), commanded force (N).  Structural part: retry flags and control law.
    """

    gain: float
    offset_x: float
    offset_y: float
    speed: float
    force: float
    retry_enabled: bool = False
    max_retries: int = 0
    control_law: ControlLaw = ControlLaw.DIRECT

    def __post_init__(self):
        if not 0 <= self.max_retries <= 3:
            raise ValueError(f"max_retries must be in [0, 3], got {self.max_retries}")
        if not all(math.isfinite(v) for v in self.numeric):
            raise ValueError("numeric parameters must be finite")
        if not isinstance(self.control_law, ControlLaw):
            object.__setattr__(self, "control_law", ControlLaw(self.control_law))

    @property
    def numeric(self) -> tuple[float, ...]:
        return (self.gain, self.offset_x, self.offset_y, self.speed, self.force)

    @property
    def offset_norm(self) -> float:
        return math.hypot(self.offset_x, self.offset_y)

    @property
    def retry_budget(self) -> int:
        return self.max_retries if self.retry_enabled else 0

    def with_numeric(self, values: Sequence[float]) -> "ParamVector":
        if len(values) != len(NUMERIC_FIELDS):
            raise ValueError("numeric vector has wrong length")
        return replace(self, **{k: float(v) for k, v in zip(NUMERIC_FIELDS, values)})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["control_law"] = self.control_law.value
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ParamVector":
        return cls(
            gain=float(d["gain"]),
            offset_x=float(d["offset_x"]),
            offset_y=float(d["offset_y"]),
            speed=float(d["speed"]),
            force=float(d["force"]),
            retry_enabled=bool(d["retry_enabled"]),
            max_retries=int(d["max_retries"]),
            control_law=ControlLaw(d["control_law"]),
        )


@dataclass(frozen=True)
class EcmRecord:
    ecm_id: str
    kind: CapabilityKind
    version: int
    params: ParamVector
    input_interface: Interface
    output_interface: Interface
    descriptor: str
    lifecycle_state: LifecycleState = LifecycleState.CREATED

    def to_dict(self) -> dict:
        return {
            "ecm_id": self.ecm_id,
            "kind": self.kind.value,
            "version": self.version,
            "params": self.params.to_dict(),
            "input_interface": self.input_interface.value,
            "output_interface": self.output_interface.value,
            "descriptor": self.descriptor,
        }

    @classmethod
    def from_dict(cls, d: Mapping, state: LifecycleState = LifecycleState.CREATED) -> "EcmRecord":
        return cls(
            ecm_id=d["ecm_id"],
            kind=CapabilityKind(d["kind"]),
            version=int(d["version"]),
            params=ParamVector.from_dict(d["params"]),
            input_interface=Interface(d["input_interface"]),
            output_interface=Interface(d["output_interface"]),
            descriptor=d["descriptor"],
            lifecycle_state=state,
        )


def check_composition(upstream: EcmRecord, downstream: EcmRecord) -> bool:
    """True iff ``upstream`` can feed ``downstream``."""
    return upstream.output_interface == downstream.input_interface


@dataclass(frozen=True)
class CapabilitySet:
    """Active capability set: kind -> deployed (ecm_id, version) entries.

    Normally one entry per kind; when several are present the planner's
    tie-break picks the lexicographically lowest ecm_id.
    """

    entries: tuple[tuple[CapabilityKind, str, int], ...] = ()

    @classmethod
    def from_records(cls, records: Iterable[EcmRecord]) -> "CapabilitySet":
        return cls(tuple(sorted((r.kind, r.ecm_id, r.version) for r in records)))

    @property
    def active(self) -> dict[CapabilityKind, tuple[str, int]]:
        out: dict[CapabilityKind, tuple[str, int]] = {}
        for kind, ecm_id, version in self.entries:
            if kind not in out or ecm_id < out[kind][0]:
                out[kind] = (ecm_id, version)
        return out

    def resolve(self, kind: CapabilityKind) -> tuple[str, int]:
        candidates = [(e, v) for k, e, v in self.entries if k == kind]
        if not candidates:
            raise MissingCapability(kind)
        return min(candidates)

    def __contains__(self, kind) -> bool:
        return any(k == kind for k, _, _ in self.entries)

    def __len__(self) -> int:
        return len(self.entries)


# ---------------------------------------------------------------------------
# Agent
# ---------------------------------------------------------------------------

TIE_BREAK_LOWEST_ID = "lowest-ecm-id"


@dataclass(frozen=True)
class PlannerParams:
    templates: tuple[tuple[str, tuple[CapabilityKind, ...]], ...]
    tie_break: str = TIE_BREAK_LOWEST_ID

    @classmethod
    def from_tasks(cls, tasks: Iterable) -> "PlannerParams":
        return cls(tuple((t.task_id, tuple(s.kind for s in t.steps)) for t in tasks))

    def template(self, task_id: str) -> tuple[CapabilityKind, ...]:
        for tid, kinds in self.templates:
            if tid == task_id:
                return kinds
        raise KeyError(task_id)

    def to_dict(self) -> dict:
        return {
            "templates": [[tid, [k.value for k in kinds]] for tid, kinds in self.templates],
            "tie_break": self.tie_break,
        }

    def numeric_image(self) -> list[float]:
        image = [float(KIND_CODES[k]) for _, kinds in self.templates for k in kinds]
        image.append(1.0 if self.tie_break == TIE_BREAK_LOWEST_ID else 2.0)
        return image


@dataclass(frozen=True)
class EpisodeSummary:
    task_id: str
    iteration: int
    success: bool


class AgentIdentity:
    """Persistent agent: frozen planner + identity memory, growable episodic memory."""

    def __init__(self, planner_params: PlannerParams, identity_memory: bytes):
        self._planner = planner_params
        self._identity = bytes(identity_memory)
        self._planner_hash0 = sha256_hex(planner_params.to_dict())
        self._identity_hash0 = sha256_hex(self._identity)
        self._episodic: list[EpisodeSummary] = []
        self._lock = threading.Lock()

    @property
    def planner_params(self) -> PlannerParams:
        return self._planner

    @property
    def identity_memory(self) -> bytes:
        return self._identity

    @property
    def episodic_memory(self) -> tuple[EpisodeSummary, ...]:
        return tuple(self._episodic)

    def planner_hash(self) -> str:
        return sha256_hex(self._planner.to_dict())

    def identity_hash(self) -> str:
        return sha256_hex(self._identity)

    def initial_hashes(self) -> tuple[str, str]:
        return self._planner_hash0, self._identity_hash0

    def identity_intact(self) -> bool:
        return (self.planner_hash(), self.identity_hash()) == self.initial_hashes()

    def record_episode(self, summary: EpisodeSummary) -> None:
        with self._lock:
            self._episodic.append(summary)

    def __setattr__(self, name, value):
        if name in ("_planner", "_identity") and name in self.__dict__:
            raise AttributeError(f"{name} is write-once")
        super().__setattr__(name, value)


# ---------------------------------------------------------------------------
# World state, actions, constraints
# ---------------------------------------------------------------------------

Vec2 = tuple[float, float]


@dataclass(frozen=True)
class WorldState:
    object_positions: Mapping[str, Vec2]
    fixtures: Mapping[str, Vec2]
    object_heights: Mapping[str, float]
    container_fill: Mapping[str, float]
    gripper_pos: Vec2
    held: str | None = None
    gripper_speed: float = 0.0
    gripper_force: float = 0.0
    step_count: int = 0
    sim_time: float = 0.0
    markers: Mapping[str, float] = field(default_factory=dict)

    def position_of(self, name: str) -> Vec2:
        pos = self.object_positions.get(name)
        if pos is None:
            pos = self.fixtures[name]
        return pos

    def to_dict(self) -> dict:
        return {
            "object_positions": {k: list(v) for k, v in self.object_positions.items()},
            "fixtures": {k: list(v) for k, v in self.fixtures.items()},
            "object_heights": dict(self.object_heights),
            "container_fill": dict(self.container_fill),
            "gripper_pos": list(self.gripper_pos),
            "held": self.held,
            "gripper_speed": self.gripper_speed,
            "gripper_force": self.gripper_force,
            "step_count": self.step_count,
            "sim_time": self.sim_time,
            "markers": dict(self.markers),
        }

    def digest(self) -> str:
        """64-bit FNV-1a of the canonical serialisation, as 16 hex digits."""
        return f"{fnv1a64(canonical_json(self.to_dict()).encode('utf-8')):016x}"


@dataclass(frozen=True)
class Action:
    capability_kind: CapabilityKind
    target: Vec2
    speed: float
    force: float
    input_interface: Interface
    output_interface: Interface
    ref: str = ""
    tolerance: float = 0.0
    gain: float = 1.0
    damped: bool = False
    carry: str = ""

    def __post_init__(self):
        vals = (self.target[0], self.target[1], self.speed, self.force)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("action fields must be finite")
        if self.speed < 0 or self.force < 0:
            raise ValueError("speed and force must be non-negative")


@dataclass(frozen=True)
class ConstraintSpec:
    constraint_id: str
    kind: ConstraintKind
    bounds: tuple[float, ...]
    modifiable: bool = True

    def __post_init__(self):
        if not isinstance(self.kind, ConstraintKind):
            object.__setattr__(self, "kind", ConstraintKind(self.kind))
        object.__setattr__(self, "bounds", tuple(float(b) for b in self.bounds))
        expected = 4 if self.kind in (ConstraintKind.WORKSPACE_BOX, ConstraintKind.FORBIDDEN_REGION) else 1
        if len(self.bounds) != expected:
            raise ValueError(f"{self.kind.value} needs {expected} bounds, got {len(self.bounds)}")
        if expected == 4:
            x0, y0, x1, y1 = self.bounds
            if self.kind == ConstraintKind.WORKSPACE_BOX and not (x0 <= x1 and y0 <= y1):
                raise ValueError(f"workspace box {self.constraint_id} is empty")
        elif self.bounds[0] < 0:
            raise ValueError(f"{self.constraint_id}: limit must be non-negative")

    def to_dict(self) -> dict:
        return {
            "constraint_id": self.constraint_id,
            "kind": self.kind.value,
            "bounds": list(self.bounds),
            "modifiable": self.modifiable,
        }


# ---------------------------------------------------------------------------
# Traces and experience
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TraceRecord:
    episode_id: str
    iteration: int
    plan_step_index: int
    task_id: str
    kind: CapabilityKind
    ecm_id: str
    version: int
    input_state_digest: str
    output_state_digest: str
    duration_s: float
    intervention: Intervention
    violated: tuple[str, ...]
    retries: int
    max_retries: int
    outcome: StepOutcome
    attempts: int = 1
    positional_error: float | None = None
    error_vec: Vec2 | None = None
    tolerance: float = 0.0
    violating_proposals: int = 0
    blocked: int = 0
    unsafe_executed: int = 0
    fallback_used: bool = False
    timed_out: bool = False
    executed: int = 0
    # wall-clock, kept out of the persisted trace so trace files stay reproducible
    mediation_ms: float = field(default=0.0, compare=False)

    def __post_init__(self):
        if self.retries > self.max_retries:
            raise ValueError("retries exceed the ECM's retry budget")

    def to_dict(self) -> dict:
        return {
            "episode_id": self.episode_id,
            "iteration": self.iteration,
            "plan_step_index": self.plan_step_index,
            "task_id": self.task_id,
            "kind": self.kind.value,
            "ecm_id": self.ecm_id,
            "version": self.version,
            "input_state_digest": self.input_state_digest,
            "output_state_digest": self.output_state_digest,
            "duration_s": self.duration_s,
            "intervention": self.intervention.value,
            "violated": list(self.violated),
            "retries": self.retries,
            "max_retries": self.max_retries,
            "outcome": self.outcome.value,
            "attempts": self.attempts,
            "positional_error": self.positional_error,
            "error_vec": None if self.error_vec is None else list(self.error_vec),
            "tolerance": self.tolerance,
            "violating_proposals": self.violating_proposals,
            "blocked": self.blocked,
            "unsafe_executed": self.unsafe_executed,
            "fallback_used": self.fallback_used,
            "timed_out": self.timed_out,
            "executed": self.executed,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "TraceRecord":
        ev = d.get("error_vec")
        return cls(
            episode_id=d["episode_id"],
            iteration=int(d["iteration"]),
            plan_step_index=int(d["plan_step_index"]),
            task_id=d["task_id"],
            kind=CapabilityKind(d["kind"]),
            ecm_id=d["ecm_id"],
            version=int(d["version"]),
            input_state_digest=d["input_state_digest"],
            output_state_digest=d["output_state_digest"],
            duration_s=float(d["duration_s"]),
            intervention=Intervention(d["intervention"]),
            violated=tuple(d["violated"]),
            retries=int(d["retries"]),
            max_retries=int(d["max_retries"]),
            outcome=StepOutcome(d["outcome"]),
            attempts=int(d.get("attempts", 1)),
            positional_error=d.get("positional_error"),
            error_vec=None if ev is None else (float(ev[0]), float(ev[1])),
            tolerance=float(d.get("tolerance", 0.0)),
            violating_proposals=int(d.get("violating_proposals", 0)),
            blocked=int(d.get("blocked", 0)),
            unsafe_executed=int(d.get("unsafe_executed", 0)),
            fallback_used=bool(d.get("fallback_used", False)),
            timed_out=bool(d.get("timed_out", False)),
            executed=int(d.get("executed", 0)),
        )


@dataclass(frozen=True)
class EpisodeOutcome:
    episode_id: str
    task_id: str
    iteration: int
    success: bool
    exec_time: float
    failure_count: int
    n_retry: int
    unsafe_executed: int = 0
    planned: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["planned"] = list(self.planned)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "EpisodeOutcome":
        kw = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        kw["planned"] = tuple(kw.get("planned", ()))
        return cls(**kw)


@dataclass
class ExperienceDataset:
    traces: list[TraceRecord] = field(default_factory=list)
    outcomes: list[EpisodeOutcome] = field(default_factory=list)

    def extend(self, outcome: EpisodeOutcome, traces: Sequence[TraceRecord]) -> None:
        self.outcomes.append(outcome)
        self.traces.extend(traces)

    def traces_for(self, ecm_id: str) -> list[TraceRecord]:
        return [t for t in self.traces if t.ecm_id == ecm_id]

    def episodes_touching(self, ecm_id: str) -> list[EpisodeOutcome]:
        """Episodes whose plan included ``ecm_id``, in collection order."""
        return [o for o in self.outcomes if ecm_id in o.planned]

    def is_consistent(self) -> bool:
        by_episode: dict[str, list[TraceRecord]] = {}
        for t in self.traces:
            by_episode.setdefault(t.episode_id, []).append(t)
        for o in self.outcomes:
            if o.success and not all(t.outcome == StepOutcome.SUCCESS for t in by_episode.get(o.episode_id, [])):
                return False
        return True


# ---------------------------------------------------------------------------
# Planning
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PlanStep:
    index: int
    kind: CapabilityKind
    ecm_id: str
    version: int
    ref: str
    tolerance: float

    @property
    def input_interface(self) -> Interface:
        return KIND_INTERFACES[self.kind][0]

    @property
    def output_interface(self) -> Interface:
        return KIND_INTERFACES[self.kind][1]


def plan(task, caps: CapabilitySet, agent: AgentIdentity, skip: Sequence[bool] | None = None) -> list[PlanStep]:
    """Resolve the agent's fixed template for ``task`` against the active set.

    ``skip`` is only ever supplied by the mutable-agent baseline.
    """
    kinds = agent.planner_params.template(task.task_id)
    if len(kinds) != len(task.steps):
        raise InterfaceMismatch(f"template for {task.task_id} does not match the task's steps")
    steps = []
    for i, (kind, spec) in enumerate(zip(kinds, task.steps)):
        if skip is not None and skip[i]:
            continue
        ecm_id, version = caps.resolve(kind)
        steps.append(PlanStep(i, kind, ecm_id, version, spec.ref, spec.tolerance))
    return steps
