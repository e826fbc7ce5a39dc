"""Runtime governance: action mediation, execution management, tracing and gating."""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

from .core import (
    Action,
    AgentIdentity,
    CapabilityKind,
    CapabilitySet,
    ConstraintKind,
    ConstraintSpec,
    EcmRecord,
    EpisodeOutcome,
    Intervention,
    LifecycleState,
    PlanStep,
    StepOutcome,
    TraceRecord,
    WorldState,
    canonical_json,
    plan,
    sha256_hex,
    worst_intervention,
)
from .envsim import EnvConfig, TaskSpec, check_success, controller_action, reset, step_detailed
from .errors import EmptyHoldout, SinkUnavailable
from .seeding import Stream, derive


class Verdict(str, Enum):
    APPROVED = "Approved"
    MODIFIED = "Modified"
    REJECTED = "Rejected"


_VERDICT_TO_INTERVENTION = {
    Verdict.APPROVED: Intervention.NONE,
    Verdict.MODIFIED: Intervention.MODIFIED,
    Verdict.REJECTED: Intervention.REJECTED,
}


@dataclass(frozen=True)
class PolicySet:
    constraints: tuple[ConstraintSpec, ...]
    enforcement_enabled: bool = True

    def __post_init__(self):
        object.__setattr__(self, "constraints", tuple(self.constraints))
        ids = [c.constraint_id for c in self.constraints]
        if len(ids) != len(set(ids)):
            raise ValueError("constraint ids must be unique")

    def digest(self) -> str:
        return sha256_hex({
            "constraints": [c.to_dict() for c in self.constraints],
            "enforcement_enabled": self.enforcement_enabled,
        })

    def with_enforcement(self, enabled: bool) -> "PolicySet":
        return replace(self, enforcement_enabled=enabled)


def default_policy(enforcement_enabled: bool = True) -> PolicySet:
    return PolicySet(
        (
            ConstraintSpec("workspace", ConstraintKind.WORKSPACE_BOX, (-0.45, -0.45, 0.45, 0.45), True),
            ConstraintSpec("velocity_cap", ConstraintKind.VELOCITY_CAP, (0.5,), True),
            ConstraintSpec("force_limit", ConstraintKind.FORCE_LIMIT, (20.0,), True),
            ConstraintSpec("keepout_zone", ConstraintKind.FORBIDDEN_REGION, (0.30, 0.30, 0.45, 0.45), False),
        ),
        enforcement_enabled,
    )


# ---------------------------------------------------------------------------
# Predicates and enforcement
# ---------------------------------------------------------------------------


def satisfies(c: ConstraintSpec, action: Action) -> bool:
    kind = c.kind
    if kind == ConstraintKind.VELOCITY_CAP:
        return action.speed <= c.bounds[0]
    if kind == ConstraintKind.FORCE_LIMIT:
        return action.force <= c.bounds[0]
    x, y = action.target
    x0, y0, x1, y1 = c.bounds
    if kind == ConstraintKind.WORKSPACE_BOX:
        return x0 <= x <= x1 and y0 <= y <= y1
    # forbidden region is open: its boundary is admissible
    return not (x0 < x < x1 and y0 < y < y1)


def violations(action: Action, constraints: Iterable[ConstraintSpec]) -> list[str]:
    return [c.constraint_id for c in constraints if not satisfies(c, action)]


_CLAMP_ORDER = {
    ConstraintKind.WORKSPACE_BOX: 0,
    ConstraintKind.FORBIDDEN_REGION: 1,
    ConstraintKind.VELOCITY_CAP: 2,
    ConstraintKind.FORCE_LIMIT: 3,
}


def _clamp(c: ConstraintSpec, action: Action) -> Action:
    kind = c.kind
    if kind == ConstraintKind.VELOCITY_CAP:
        return replace(action, speed=min(action.speed, c.bounds[0]))
    if kind == ConstraintKind.FORCE_LIMIT:
        return replace(action, force=min(action.force, c.bounds[0]))
    x, y = action.target
    x0, y0, x1, y1 = c.bounds
    if kind == ConstraintKind.WORKSPACE_BOX:
        return replace(action, target=(min(max(x, x0), x1), min(max(y, y0), y1)))
    # push out of the forbidden region through the nearest edge
    exits = [(x - x0, (x0, y)), (x1 - x, (x1, y)), (y - y0, (x, y0)), (y1 - y, (x, y1))]
    return replace(action, target=min(exits, key=lambda e: e[0])[1])


@dataclass(frozen=True)
class EnforcementResult:
    verdict: Verdict
    action_out: Action | None
    violated: tuple[str, ...]
    mediation_ms: float = field(default=0.0, compare=False)

    @property
    def intervention(self) -> Intervention:
        return _VERDICT_TO_INTERVENTION[self.verdict]


def enforce(action: Action, state: WorldState | None, policy: PolicySet) -> EnforcementResult:
    """Approve, clamp or reject ``action`` against the policy.

    Violated constraints are reported in policy listing order.  Clamping is
    applied in a fixed kind order so the verdict does not depend on how the
    policy lists its constraints.
    """
    t0 = time.perf_counter()
    if not policy.enforcement_enabled:
        return EnforcementResult(Verdict.APPROVED, action, (), (time.perf_counter() - t0) * 1e3)
    violated = [c for c in policy.constraints if not satisfies(c, action)]
    if not violated:
        return EnforcementResult(Verdict.APPROVED, action, (), (time.perf_counter() - t0) * 1e3)
    ids = tuple(c.constraint_id for c in violated)
    if any(not c.modifiable for c in violated):
        return EnforcementResult(Verdict.REJECTED, None, ids, (time.perf_counter() - t0) * 1e3)
    out = action
    for c in sorted(violated, key=lambda c: (_CLAMP_ORDER[c.kind], c.constraint_id)):
        out = _clamp(c, out)
    if all(satisfies(c, out) for c in policy.constraints):
        return EnforcementResult(Verdict.MODIFIED, out, ids, (time.perf_counter() - t0) * 1e3)
    return EnforcementResult(Verdict.REJECTED, None, ids, (time.perf_counter() - t0) * 1e3)


# ---------------------------------------------------------------------------
# Execution management
# ---------------------------------------------------------------------------


class Recovery(str, Enum):
    RETRY = "retry"
    FALLBACK = "fallback"
    ABORT = "abort"


@dataclass(frozen=True)
class RuntimeConfig:
    recovery: Recovery = Recovery.RETRY
    abort_on_reject: bool = True


@dataclass(frozen=True)
class EnvHandle:
    """Environment configuration plus the task catalogue the runtime executes against."""

    cfg: EnvConfig
    tasks: Mapping[str, TaskSpec]

    def task(self, task_id: str) -> TaskSpec:
        return self.tasks[task_id]


@dataclass
class MediationStats:
    """Wall-clock mediation timings; kept apart from traces so those stay reproducible."""

    decisions: int = 0
    total_ms: float = 0.0

    def add(self, ms: float) -> None:
        self.decisions += 1
        self.total_ms += ms

    @property
    def mean_ms(self) -> float:
        return self.total_ms / self.decisions if self.decisions else 0.0


def execute_step(
    step: PlanStep,
    ecm: EcmRecord,
    state: WorldState,
    policy: PolicySet,
    env: EnvHandle,
    *,
    task_id: str,
    episode_seed: int,
    episode_id: str = "",
    iteration: int = 0,
    runtime: RuntimeConfig = RuntimeConfig(),
    bias: tuple[float, float] = (0.0, 0.0),
    fallback: EcmRecord | None = None,
    timing: MediationStats | None = None,
) -> tuple[WorldState, TraceRecord]:
    """Run one plan step through the governed loop and return the new state and its trace."""
    task_step = env.task(task_id).steps[step.index]
    cfg = env.cfg
    budget = ecm.params.retry_budget
    current = ecm
    input_digest = state.digest()
    intervention = Intervention.NONE
    violated: list[str] = []
    duration = 0.0
    attempts = 0
    outcome = StepOutcome.FAIL
    error = None
    error_vec = None
    violating = blocked = unsafe = executed_count = 0
    fallback_used = timed_out = False
    mediation_ms = 0.0

    for attempt in range(budget + 1):
        attempts = attempt + 1
        obs_rng = Stream(derive(episode_seed, "obs", step.index, attempt))
        act_rng = Stream(derive(episode_seed, "act", step.index, attempt))
        proposed = controller_action(task_step, current.params, state, cfg, obs_rng, bias)
        result = enforce(proposed, state, policy)
        mediation_ms += result.mediation_ms
        if timing is not None:
            timing.add(result.mediation_ms)
        intervention = worst_intervention(intervention, result.intervention)
        for cid in result.violated:
            if cid not in violated:
                violated.append(cid)
        raw_bad = violations(proposed, policy.constraints)
        if raw_bad:
            violating += 1
            if result.verdict != Verdict.APPROVED:
                blocked += 1
        if result.verdict == Verdict.REJECTED:
            if runtime.abort_on_reject:
                outcome = StepOutcome.ABORTED
                break
            continue
        executed = result.action_out
        if violations(executed, policy.constraints):
            unsafe += 1
        executed_count += 1
        r = step_detailed(state, executed, cfg, act_rng)
        state = r.state
        duration += r.duration
        if r.error is not None:
            error, error_vec = r.error, r.error_vec
        if r.outcome == StepOutcome.SUCCESS:
            outcome = StepOutcome.SUCCESS
            break
        if not r.recoverable:
            break
        if duration >= cfg.step_timeout:
            timed_out = True
            break
        if attempt < budget:
            if runtime.recovery == Recovery.ABORT:
                outcome = StepOutcome.ABORTED
                break
            if runtime.recovery == Recovery.FALLBACK and fallback is not None:
                current = fallback
                fallback_used = True

    retries = attempts - 1
    trace = TraceRecord(
        episode_id=episode_id,
        iteration=iteration,
        plan_step_index=step.index,
        task_id=task_id,
        kind=step.kind,
        ecm_id=ecm.ecm_id,
        version=ecm.version,
        input_state_digest=input_digest,
        output_state_digest=state.digest(),
        duration_s=duration,
        intervention=intervention,
        violated=tuple(violated),
        retries=retries,
        max_retries=budget,
        outcome=outcome,
        attempts=attempts,
        positional_error=error,
        error_vec=error_vec,
        tolerance=task_step.tolerance,
        violating_proposals=violating,
        blocked=blocked,
        unsafe_executed=unsafe,
        fallback_used=fallback_used,
        timed_out=timed_out,
        executed=executed_count,
        mediation_ms=mediation_ms,
    )
    return state, trace


def run_governed_episode(
    task: TaskSpec,
    deployed: Mapping[str, EcmRecord],
    agent: AgentIdentity,
    env: EnvHandle,
    policy: PolicySet,
    seed: int,
    *,
    episode_id: str = "",
    iteration: int = 0,
    runtime: RuntimeConfig = RuntimeConfig(),
    skip: Sequence[bool] | None = None,
    biases: Mapping[CapabilityKind, tuple[float, float]] | None = None,
    fallbacks: Mapping[str, EcmRecord] | None = None,
    timing: MediationStats | None = None,
) -> tuple[EpisodeOutcome, list[TraceRecord]]:
    """plan -> (observe, act, mediate, step, trace)* -> check success on the true state."""
    caps = CapabilitySet.from_records(deployed.values())
    steps = plan(task, caps, agent, skip)
    state = reset(task, seed, env.cfg)
    traces: list[TraceRecord] = []
    completed = True
    for ps in steps:
        ecm = deployed[ps.ecm_id]
        bias = biases.get(ps.kind, (0.0, 0.0)) if biases else (0.0, 0.0)
        fb = fallbacks.get(ps.ecm_id) if fallbacks else None
        state, tr = execute_step(
            ps, ecm, state, policy, env,
            task_id=task.task_id, episode_seed=seed, episode_id=episode_id, iteration=iteration,
            runtime=runtime, bias=bias, fallback=fb, timing=timing,
        )
        traces.append(tr)
        if tr.outcome != StepOutcome.SUCCESS:
            completed = False
            break
    success = completed and check_success(task, state)
    outcome = EpisodeOutcome(
        episode_id=episode_id,
        task_id=task.task_id,
        iteration=iteration,
        success=success,
        exec_time=sum(t.duration_s for t in traces),
        failure_count=sum(1 for t in traces if t.outcome != StepOutcome.SUCCESS),
        n_retry=sum(t.retries for t in traces),
        unsafe_executed=sum(t.unsafe_executed for t in traces),
        planned=tuple(dict.fromkeys(ps.ecm_id for ps in steps)),
    )
    return outcome, traces


# ---------------------------------------------------------------------------
# Version gating
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GateToken:
    ecm_id: str
    version: int
    report_digest: str


@dataclass(frozen=True)
class HoldoutInstance:
    task_id: str
    seed: int


@dataclass(frozen=True)
class GateReport:
    ecm_id: str
    candidate_version: int
    incumbent_version: int
    holdout_success_candidate: float
    holdout_success_incumbent: float
    decision: bool
    holdout_size: int
    iteration: int = 0

    def __post_init__(self):
        for v in (self.holdout_success_candidate, self.holdout_success_incumbent):
            if not 0.0 <= v <= 1.0:
                raise ValueError("holdout success must be a fraction")
        if self.decision != (self.holdout_success_candidate >= self.holdout_success_incumbent):
            raise ValueError("decision inconsistent with the gating rule")

    def to_dict(self) -> dict:
        return {
            "ecm_id": self.ecm_id,
            "candidate_version": self.candidate_version,
            "incumbent_version": self.incumbent_version,
            "holdout_success_candidate": self.holdout_success_candidate,
            "holdout_success_incumbent": self.holdout_success_incumbent,
            "decision": self.decision,
            "holdout_size": self.holdout_size,
            "iteration": self.iteration,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "GateReport":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__})

    def digest(self) -> str:
        return sha256_hex(self.to_dict())

    def token(self) -> GateToken | None:
        if not self.decision:
            return None
        return GateToken(self.ecm_id, self.candidate_version, self.digest())


def gate_decision(candidate_successes: int, incumbent_successes: int) -> bool:
    """Candidate may replace the incumbent iff it does at least as well on the shared holdout."""
    return candidate_successes >= incumbent_successes


def gate(
    candidate: EcmRecord,
    incumbent: EcmRecord,
    holdout: Sequence[HoldoutInstance],
    env: EnvHandle,
    policy: PolicySet,
    *,
    deployed: Mapping[str, EcmRecord],
    agent: AgentIdentity,
    runtime: RuntimeConfig = RuntimeConfig(),
    iteration: int = 0,
    sink: "JsonlSink | None" = None,
    on_episode: Callable[[EpisodeOutcome, list[TraceRecord]], None] | None = None,
) -> GateReport:
    """Run candidate and incumbent on identical held-out instances (same seeds)."""
    if not holdout:
        raise EmptyHoldout("gate needs at least one held-out instance")
    if candidate.lifecycle_state != LifecycleState.PENDING:
        raise ValueError("only Pending candidates can be gated")

    def successes(record: EcmRecord) -> int:
        records = {k: v for k, v in deployed.items() if k != incumbent.ecm_id}
        records[record.ecm_id] = record
        wins = 0
        for inst in holdout:
            outcome, traces = run_governed_episode(
                env.task(inst.task_id), records, agent, env, policy, inst.seed,
                episode_id=f"gate-{inst.seed:016x}", iteration=iteration, runtime=runtime,
            )
            if on_episode is not None:
                on_episode(outcome, traces)
            wins += outcome.success
        return wins

    c = successes(candidate)
    i = successes(incumbent)
    n = len(holdout)
    report = GateReport(
        ecm_id=candidate.ecm_id,
        candidate_version=candidate.version,
        incumbent_version=incumbent.version,
        holdout_success_candidate=c / n,
        holdout_success_incumbent=i / n,
        decision=gate_decision(c, i),
        holdout_size=n,
        iteration=iteration,
    )
    if sink is not None:
        sink.write(report.to_dict())
    return report


# ---------------------------------------------------------------------------
# JSON-Lines sinks
# ---------------------------------------------------------------------------


class JsonlSink:
    """Append-only JSON-Lines file."""

    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)
        try:
            self._fh = open(self.path, "a", encoding="utf-8")
        except OSError as exc:
            raise SinkUnavailable(str(exc)) from exc

    def write(self, obj: Mapping) -> None:
        if self._fh is None or self._fh.closed:
            raise SinkUnavailable(f"{self.path} is closed")
        try:
            self._fh.write(canonical_json(obj) + "\n")
        except (OSError, ValueError) as exc:
            raise SinkUnavailable(str(exc)) from exc

    def flush(self) -> None:
        if self._fh is not None and not self._fh.closed:
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def append_trace(record: TraceRecord, sink: JsonlSink) -> None:
    sink.write(record.to_dict())


def read_traces(path: str | os.PathLike) -> list[TraceRecord]:
    with open(path, encoding="utf-8") as fh:
        return [TraceRecord.from_dict(json.loads(line)) for line in fh if line.strip()]


def read_jsonl(path: str | os.PathLike) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
