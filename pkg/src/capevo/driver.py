"""Closed-loop experiment driver: execute, collect, update, gate, promote."""

from __future__ import annotations

import json
import math
import os
import time
from collections import Counter, defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, astuple, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .baselines import Method, MethodConfig, MutableAgent, am_update, frozen_image, modality_label, policy_drift
from .config import EXPERIMENTS, ExperimentPlan
from .core import (
    AgentIdentity,
    CapabilityKind,
    EcmRecord,
    EpisodeOutcome,
    EpisodeSummary,
    ExperienceDataset,
    PlannerParams,
    StepOutcome,
    TraceRecord,
    canonical_json,
)
from .envsim import TASKS, demonstrator_params, get_task, initial_params, nominal_time, scaled_tasks
from .errors import InvariantViolation, OutputDirNotEmpty
from .governance import (
    EnvHandle,
    GateReport,
    HoldoutInstance,
    JsonlSink,
    MediationStats,
    PolicySet,
    RuntimeConfig,
    gate,
    read_jsonl,
    run_governed_episode,
)
from .learning import ALL_MODALITIES, Modality, summarize, update_hybrid, evolution_trigger
from .registry import Registry, bootstrap
from .seeding import derive
from .stats import (
    ABLATION_COLUMNS,
    EVOLUTION_COLUMNS,
    FINAL_COLUMNS,
    PLOT_COLUMNS,
    SAFETY_COLUMNS,
    cohens_d,
    mean,
    sample_variance,
    welch_t,
    write_csv,
)

IDENTITY_MEMORY = canonical_json({
    "goals": ["complete tabletop manipulation tasks", "respect the safety policy"],
    "beliefs": {"table": "1m x 1m", "tasks": [t.task_id for t in TASKS]},
}).encode("utf-8")

OURS = "ours"
AM_LABEL = "agent-modification"
STATIC_LABEL = "static-ecm"


def make_agent() -> AgentIdentity:
    return AgentIdentity(PlannerParams.from_tasks(TASKS), IDENTITY_MEMORY)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IterationMetrics:
    method: str
    iteration: int
    success_pct: float
    success_sd: float
    mean_time_s: float
    failures_per_run: float
    variance: float
    policy_drift: float
    per_task: Mapping[str, float]
    run_values: tuple[float, ...]

    def row(self) -> dict:
        d = {
            "method": self.method,
            "iteration": self.iteration,
            "success_pct": self.success_pct,
            "success_sd": self.success_sd,
            "mean_time_s": self.mean_time_s,
            "failures_per_run": self.failures_per_run,
            "variance": self.variance,
            "policy_drift": self.policy_drift,
        }
        d.update(self.per_task)
        return d


def run_index(episode_id: str) -> int:
    return int(episode_id.split("-r")[-1].split("-")[0])


def compute_metrics(
    method: str,
    iteration: int,
    outcomes: Sequence[EpisodeOutcome],
    failed_attempts: Mapping[str, int],
    drift: float,
) -> IterationMetrics:
    """Macro-averaged success and run-level statistics for one iteration's episodes."""
    runs: dict[int, list[EpisodeOutcome]] = defaultdict(list)
    by_task: dict[str, list[bool]] = defaultdict(list)
    for o in outcomes:
        runs[run_index(o.episode_id)].append(o)
        by_task[o.task_id].append(o.success)
    per_task = {t: 100.0 * mean(v) for t, v in sorted(by_task.items())}
    run_values = []
    for r in sorted(runs):
        per = defaultdict(list)
        for o in runs[r]:
            per[o.task_id].append(o.success)
        run_values.append(100.0 * mean([mean(v) for _, v in sorted(per.items())]))
    var = sample_variance(run_values) if len(run_values) > 1 else 0.0
    return IterationMetrics(
        method=method,
        iteration=iteration,
        success_pct=mean(list(per_task.values())),
        success_sd=math.sqrt(var),
        mean_time_s=mean([o.exec_time for o in outcomes]),
        failures_per_run=sum(failed_attempts.get(o.episode_id, 0) for o in outcomes) / max(1, len(runs)),
        variance=var,
        policy_drift=drift,
        per_task=per_task,
        run_values=tuple(run_values),
    )


@dataclass
class SafetyTally:
    episodes: int = 0
    actions_executed: int = 0
    violating: int = 0
    blocked: int = 0
    unsafe: int = 0
    unsafe_episodes: int = 0

    def add(self, traces: Iterable[TraceRecord]) -> None:
        self.episodes += 1
        u = 0
        for t in traces:
            self.actions_executed += t.executed
            self.violating += t.violating_proposals
            self.blocked += t.blocked
            u += t.unsafe_executed
        self.unsafe += u
        self.unsafe_episodes += u > 0

    def merge(self, other: "SafetyTally") -> "SafetyTally":
        return SafetyTally(*(a + b for a, b in zip(astuple(self), astuple(other))))

    def row(self, arm: str, success_pct: float) -> dict:
        return {
            "arm": arm,
            "episodes": self.episodes,
            "actions_executed": self.actions_executed,
            "violating_proposals": self.violating,
            "blocked": self.blocked,
            "block_pct": 100.0 * self.blocked / self.violating if self.violating else float("nan"),
            "unsafe_executed": self.unsafe,
            "unsafe_action_pct": 100.0 * self.unsafe / self.actions_executed if self.actions_executed else 0.0,
            "unsafe_episode_pct": 100.0 * self.unsafe_episodes / self.episodes if self.episodes else 0.0,
            "final_success_pct": success_pct,
        }


# ---------------------------------------------------------------------------
# Episode execution (shared by the serial path and worker processes)
# ---------------------------------------------------------------------------

_WORKER_AGENT: AgentIdentity | None = None


def _run_job(job) -> tuple[EpisodeOutcome, list[TraceRecord]]:
    global _WORKER_AGENT
    task_id, deployed, env, policy, seed, episode_id, iteration, runtime, skip, biases = job
    if _WORKER_AGENT is None:
        _WORKER_AGENT = make_agent()
    return run_governed_episode(
        env.task(task_id), deployed, _WORKER_AGENT, env, policy, seed,
        episode_id=episode_id, iteration=iteration, runtime=runtime, skip=skip, biases=biases,
    )


# ---------------------------------------------------------------------------
# One method over one experiment
# ---------------------------------------------------------------------------


class _KindEvaluator:
    """Scores a candidate record on episodes of the tasks that use its kind."""

    def __init__(self, runner: "MethodRunner", kind: CapabilityKind, iteration: int):
        self.runner = runner
        self.kind = kind
        self.iteration = iteration

    def evaluate(self, record: EcmRecord, seeds: Sequence[int]) -> list[tuple[EpisodeOutcome, float]]:
        r = self.runner
        deployed = r.registry.deployed_records()
        deployed[record.ecm_id] = record
        task_ids = r.kind_tasks[self.kind]
        out = []
        for e, seed in enumerate(seeds):
            task = r.env.task(task_ids[e % len(task_ids)])
            o, traces = run_governed_episode(task, deployed, r.agent, r.env, r.policy, seed,
                                             episode_id=f"es-{seed:016x}", iteration=self.iteration,
                                             runtime=r.plan.runtime)
            r.note_internal(o, traces)
            out.append((o, r.nominal[task.task_id]))
        return out


class MethodRunner:
    def __init__(
        self,
        plan: ExperimentPlan,
        method: MethodConfig,
        label: str,
        *,
        policy: PolicySet | None = None,
        shortcut_bonus: bool = False,
        iterations: int | None = None,
        out_dir: Path | None = None,
    ):
        self.plan = plan
        self.method = method
        self.label = label
        self.policy = policy or plan.policy
        self.iterations = plan.iterations if iterations is None else iterations
        self.env = EnvHandle(plan.env, {t.task_id: t for t in scaled_tasks(plan.env.tolerance_scale)})
        self.task_ids = list(plan.tasks)
        self.agent = make_agent()
        self.registry = Registry()
        ini = plan.initial
        self.kind2ecm = bootstrap(self.registry, [
            (k, initial_params(k, ini.offset, ini.gain, ini.speed, ini.force)) for k in CapabilityKind
        ])
        self.initial_params = {eid: self.registry.deployed_record(eid).params for eid in self.kind2ecm.values()}
        self.mutable = MutableAgent.from_identity(self.agent) if method.method == Method.AGENT_MODIFICATION else None
        self.initial_image = frozen_image(self.agent)
        self.dataset = ExperienceDataset()
        self.episode_traces: dict[str, list[TraceRecord]] = {}
        self.seen: dict[str, int] = defaultdict(int)
        self.timing = MediationStats()
        self.eval_tally: dict[int, SafetyTally] = {}
        # ES and gate rollouts are governed too; they are tallied but not logged per action
        self.internal_tally: dict[int, SafetyTally] = defaultdict(SafetyTally)
        self.metrics: list[IterationMetrics] = []
        self.gate_reports: list[GateReport] = []
        self.es = replace(plan.es, shortcut_bonus_enabled=shortcut_bonus or plan.env.shortcut_bonus_enabled,
                          bonus=plan.env.shortcut_bonus, fraction=plan.env.shortcut_fraction)
        self.nominal = {t.task_id: nominal_time(t, plan.env) for t in TASKS}
        self.kind_tasks = {
            k: [tid for tid in self.task_ids if k in get_task(tid).step_template] for k in CapabilityKind
        }
        self.policy_digest = self.policy.digest()
        self.identity0 = self.agent.initial_hashes()
        self.constraint_kinds = {c.constraint_id: c.kind for c in self.policy.constraints}
        self.out_dir = out_dir
        self._sinks: dict[str, JsonlSink] = {}
        if out_dir is not None and plan.write_traces:
            for sub in ("traces", "gates", "episodes", "mediation"):
                (out_dir / sub).mkdir(parents=True, exist_ok=True)
            self._sinks["traces"] = JsonlSink(out_dir / "traces" / f"{label}.jsonl")
            self._sinks["gates"] = JsonlSink(out_dir / "gates" / f"{label}.jsonl")
            self._sinks["episodes"] = JsonlSink(out_dir / "episodes" / f"{label}.jsonl")
            self._sinks["mediation"] = JsonlSink(out_dir / "mediation" / f"{label}.jsonl")

    # -- bookkeeping -------------------------------------------------------

    def note_internal(self, outcome: EpisodeOutcome, traces: Sequence[TraceRecord]) -> None:
        self.internal_tally[outcome.iteration].add(traces)

    def run_tally(self) -> SafetyTally:
        """Every governed episode of the run: evaluation, ES and gate rollouts."""
        total = SafetyTally()
        for t in list(self.eval_tally.values()) + list(self.internal_tally.values()):
            total = total.merge(t)
        return total

    def eval_seed(self, iteration: int, run: int, task_id: str) -> int:
        if self.plan.paired_eval_seeds:
            return derive(self.plan.master_seed, "eval", run, task_id)
        return derive(self.plan.master_seed, "eval", iteration, run, task_id)

    def current_image(self) -> list[float]:
        if self.mutable is not None:
            return self.mutable.numeric_image()
        return frozen_image(self.agent)

    def drift(self) -> float:
        return policy_drift(self.initial_image, self.current_image())

    # -- evaluation ----------------------------------------------------------

    def evaluate(self, iteration: int, pool: ProcessPoolExecutor | None = None) -> IterationMetrics:
        deployed = self.registry.deployed_records()
        biases = self.mutable.biases() if self.mutable is not None else None
        jobs = []
        for run in range(self.plan.runs_per_iteration):
            for tid in self.task_ids:
                skip = self.mutable.skip_flags(tid) if self.mutable is not None else None
                jobs.append((tid, deployed, self.env, self.policy, self.eval_seed(iteration, run, tid),
                             f"{self.label}-i{iteration:02d}-r{run:02d}-{tid}", iteration,
                             self.plan.runtime, skip, biases))
        if pool is not None:
            results = list(pool.map(_run_job, jobs, chunksize=max(1, len(jobs) // 16)))
        else:
            global _WORKER_AGENT
            _WORKER_AGENT = self.agent
            results = [_run_job(j) for j in jobs]
        tally = SafetyTally()
        failed_attempts = {}
        outcomes = []
        for outcome, traces in results:
            self.agent.record_episode(EpisodeSummary(outcome.task_id, iteration, outcome.success))
            self.dataset.extend(outcome, traces)
            self.episode_traces[outcome.episode_id] = traces
            for t in traces:
                self.timing.total_ms += t.mediation_ms
                self.timing.decisions += t.attempts
            tally.add(traces)
            failed_attempts[outcome.episode_id] = sum(
                t.attempts - (1 if t.outcome == StepOutcome.SUCCESS else 0) for t in traces
            )
            outcomes.append(outcome)
            if self._sinks:
                for t in traces:
                    self._sinks["traces"].write(t.to_dict())
                self._sinks["episodes"].write({**outcome.to_dict(), "failed_attempts": failed_attempts[outcome.episode_id]})
        self.eval_tally[iteration] = tally
        m = compute_metrics(self.label, iteration, outcomes, failed_attempts, self.drift())
        self.metrics.append(m)
        if self._sinks:
            self._sinks["episodes"].write({"iteration_marker": iteration, "policy_drift": m.policy_drift})
        return m

    # -- updates -------------------------------------------------------------

    def update(self, iteration: int) -> None:
        self.registry.iteration = iteration
        if self.method.method == Method.STATIC_ECM:
            return
        if self.method.method == Method.AGENT_MODIFICATION:
            self._update_am(iteration)
            return
        for kind in CapabilityKind:
            if self.kind_tasks[kind]:
                self._update_ecm(kind, iteration)

    def _window(self, ecm_id: str) -> tuple[list[EpisodeOutcome], list[TraceRecord]]:
        touching = self.dataset.episodes_touching(ecm_id)
        window = touching[self.seen[ecm_id]:]
        traces = [t for o in window for t in self.episode_traces[o.episode_id] if t.ecm_id == ecm_id]
        return window, traces

    def _holdout(self, kind: CapabilityKind, iteration: int, window, traces) -> list[HoldoutInstance]:
        candidates = self.kind_tasks[kind]
        fails = Counter(t.task_id for t in traces if t.outcome != StepOutcome.SUCCESS)
        if fails:
            task_id = max(candidates, key=lambda t: (fails[t], -candidates.index(t)))
        else:
            rate = {t: [] for t in candidates}
            for o in window:
                if o.task_id in rate:
                    rate[o.task_id].append(o.success)
            task_id = min(candidates, key=lambda t: (mean(rate[t]) if rate[t] else 1.0, candidates.index(t)))
        return [
            HoldoutInstance(task_id, derive(self.plan.master_seed, "holdout", iteration, kind.value, j))
            for j in range(self.plan.holdout_size)
        ]

    def _update_ecm(self, kind: CapabilityKind, iteration: int) -> None:
        plan = self.plan
        eid = self.kind2ecm[kind]
        incumbent = self.registry.deployed_record(eid)
        if not evolution_trigger(incumbent, self.dataset, plan.trigger, self.seen[eid]):
            return
        window, traces = self._window(eid)
        summary = summarize(traces, len(window), self.constraint_kinds)
        self.seen[eid] = len(self.dataset.episodes_touching(eid))
        t = plan.teacher
        teacher = demonstrator_params(kind, t.offset, t.gain, t.speed, t.force)
        new = update_hybrid(
            incumbent, self.dataset, teacher, plan.weights, _KindEvaluator(self, kind, iteration),
            derive(plan.master_seed, "es", iteration, kind.value), self.method.modalities,
            summary=summary, imitation_rate=plan.imitation_rate, es=self.es,
        )
        if new == incumbent.params:
            return
        version = self.registry.register_candidate(eid, new)
        candidate = self.registry.get_version(eid, version)
        report = gate(
            candidate, incumbent, self._holdout(kind, iteration, window, traces), self.env, self.policy,
            deployed=self.registry.deployed_records(), agent=self.agent, runtime=plan.runtime,
            iteration=iteration, sink=self._sinks.get("gates"), on_episode=self.note_internal,
        )
        self.gate_reports.append(report)
        if report.decision:
            self.registry.promote(eid, version, report.token())

    def _update_am(self, iteration: int) -> None:
        prefix = f"{self.label}-i{iteration:02d}-"
        traces = [t for eid, ts in self.episode_traces.items() if eid.startswith(prefix) for t in ts]
        by_kind: dict[CapabilityKind, list[TraceRecord]] = defaultdict(list)
        for t in traces:
            by_kind[t.kind].append(t)
        episodes = self.plan.runs_per_iteration * len(self.task_ids)
        summaries = {k: summarize(v, episodes, self.constraint_kinds) for k, v in by_kind.items()}
        self.mutable = am_update(self.mutable, summaries, derive(self.plan.master_seed, "am", iteration),
                                 self.method.am_step, self.method.am_sigma)

    # -- invariants ------------------------------------------------------------

    def check_invariants(self) -> None:
        if self.policy.digest() != self.policy_digest:
            raise InvariantViolation("policy changed during the run")
        if (self.agent.planner_hash(), self.agent.identity_hash()) != self.identity0:
            raise InvariantViolation("agent identity changed")
        self.registry.check_invariants()
        if self.method.method != Method.AGENT_MODIFICATION and self.drift() != 0.0:
            raise InvariantViolation("policy drift for a fixed agent")
        if self.method.method in (Method.STATIC_ECM, Method.AGENT_MODIFICATION):
            for eid, p in self.initial_params.items():
                rec = self.registry.deployed_record(eid)
                if rec.version != 0 or rec.params != p:
                    raise InvariantViolation(f"{eid} changed under {self.method.method.value}")
        for r in self.gate_reports:
            if r.decision and r.holdout_success_candidate < r.holdout_success_incumbent:
                raise InvariantViolation("a regressing candidate passed the gate")
        promoted = {(e.ecm_id, e.version) for e in self.registry.events() if e.op == "promote"}
        passed = {(r.ecm_id, r.candidate_version) for r in self.gate_reports if r.decision}
        if not promoted <= passed:
            raise InvariantViolation("promotion without a passing gate report")
        if self.policy.enforcement_enabled:
            unsafe = self.run_tally().unsafe
            if unsafe:
                raise InvariantViolation(f"{unsafe} unsafe actions executed with enforcement on")

    # -- main loop -------------------------------------------------------------

    def run(self, pool: ProcessPoolExecutor | None = None) -> list[IterationMetrics]:
        try:
            for it in range(self.iterations + 1):
                self.evaluate(it, pool)
                if it < self.iterations:
                    self.update(it)
                    if self._sinks:
                        self._sinks["mediation"].write({"iteration": it, **asdict(self.internal_tally[it])})
                self.check_invariants()
        finally:
            for s in self._sinks.values():
                s.close()
        if self.out_dir is not None:
            self.registry.save(self.out_dir / "registry" / self.label)
        return self.metrics

    def release(self) -> None:
        """Drop the experience buffers once the metrics are final."""
        self.dataset = ExperienceDataset()
        self.episode_traces = {}


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------


@dataclass
class ExperimentResults:
    metrics: dict[str, list[IterationMetrics]] = field(default_factory=dict)
    final_rows: list[dict] = field(default_factory=list)
    safety_rows: list[dict] = field(default_factory=list)
    ablation_rows: list[dict] = field(default_factory=list)
    timing: dict[str, float] = field(default_factory=dict)
    gate_reports: dict[str, list[GateReport]] = field(default_factory=dict)
    runners: dict[str, MethodRunner] = field(default_factory=dict)


def table_iterations(n: int) -> list[int]:
    rows = list(range(0, n + 1, 5))
    if rows[-1] != n:
        rows.append(n)
    return rows


def evolution_rows(metrics: Sequence[IterationMetrics]) -> list[dict]:
    wanted = set(table_iterations(metrics[-1].iteration)) if metrics else set()
    return [m.row() for m in metrics if m.iteration in wanted]


def plot_rows(metrics: Mapping[str, Sequence[IterationMetrics]]) -> list[dict]:
    rows = []
    for label in sorted(metrics):
        for m in metrics[label]:
            rows.append({"iteration": m.iteration, "method": label, "success_pct": m.success_pct})
    rows.sort(key=lambda r: (r["iteration"], r["method"]))
    return rows


def final_rows(metrics: Mapping[str, Sequence[IterationMetrics]]) -> list[dict]:
    ours = metrics[OURS][-1]
    rows = []
    for label in (OURS, AM_LABEL, STATIC_LABEL):
        if label not in metrics:
            continue
        m = metrics[label][-1]
        row = {"method": label, "final_success_pct": m.success_pct, "variance": m.variance,
               "policy_drift": m.policy_drift}
        if label != OURS:
            try:
                row["cohens_d_vs_ours"] = cohens_d(ours.run_values, m.run_values)
                t, df, p = welch_t(ours.run_values, m.run_values)
                row.update(welch_t=t, welch_df=df, welch_p=p)
            except Exception:  # degenerate samples leave the cells empty
                pass
        rows.append(row)
    return rows


def first_iteration_at(metrics: Sequence[IterationMetrics], threshold: float = 80.0) -> int | None:
    for m in metrics:
        if m.success_pct >= threshold:
            return m.iteration
    return None


def ablation_rows(metrics: Mapping[str, Sequence[IterationMetrics]], sets) -> list[dict]:
    rows = []
    for s in sets:
        label = modality_label(s)
        ms = metrics[f"ablation-{label}"]
        rows.append({"modalities": label, "final_success_pct": ms[-1].success_pct,
                     "first_iter_ge_80": first_iteration_at(ms)})
    return rows


def _prepare_out(out_dir: Path) -> None:
    if out_dir.exists() and any(out_dir.iterdir()):
        raise OutputDirNotEmpty(f"{out_dir} is not empty")
    out_dir.mkdir(parents=True, exist_ok=True)


def run_experiment(
    plan: ExperimentPlan,
    out_dir: str | os.PathLike,
    experiments: Sequence[str] | None = None,
    enforcement_arms: Sequence[bool] = (True, False),
    workers: int | None = None,
) -> ExperimentResults:
    """Run the requested experiments and write CSV tables plus audit artefacts to ``out_dir``."""
    out = Path(out_dir)
    _prepare_out(out)
    experiments = tuple(experiments or plan.experiments)
    for e in experiments:
        if e not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {e!r}")
    workers = workers or plan.workers or os.cpu_count() or 1
    pool = ProcessPoolExecutor(max_workers=workers) if workers and workers > 1 else None
    res = ExperimentResults()

    def run(label: str, method: MethodConfig, **kw) -> list[IterationMetrics]:
        if label in res.metrics:
            return res.metrics[label]
        runner = MethodRunner(plan, method, label, out_dir=out, **kw)
        t0 = time.perf_counter()
        metrics = runner.run(pool)
        res.timing[f"{label}.wall_s"] = time.perf_counter() - t0
        res.timing[f"{label}.mediation_mean_ms"] = runner.timing.mean_ms
        res.metrics[label] = metrics
        res.gate_reports[label] = runner.gate_reports
        runner.release()
        res.runners[label] = runner
        return metrics

    ours_cfg = MethodConfig(Method.CAPABILITY_EVOLUTION, ALL_MODALITIES, plan.am_step, plan.am_sigma)
    try:
        if "evolution" in experiments or "comparison" in experiments:
            run(OURS, ours_cfg)
            write_csv(out / "metrics_evolution.csv", EVOLUTION_COLUMNS, evolution_rows(res.metrics[OURS]))
        if "comparison" in experiments:
            run(AM_LABEL, MethodConfig(Method.AGENT_MODIFICATION, ALL_MODALITIES, plan.am_step, plan.am_sigma))
            run(STATIC_LABEL, MethodConfig(Method.STATIC_ECM, ALL_MODALITIES))
            res.final_rows = final_rows(res.metrics)
            write_csv(out / "metrics_final.csv", FINAL_COLUMNS, res.final_rows)
        if "evolution" in experiments or "comparison" in experiments:
            main = {k: v for k, v in res.metrics.items() if k in (OURS, AM_LABEL, STATIC_LABEL)}
            write_csv(out / "plot_data.csv", PLOT_COLUMNS, plot_rows(main))
        if "safety" in experiments:
            for enabled in enforcement_arms:
                arm = "safety-on" if enabled else "safety-off"
                ms = run(arm, ours_cfg, policy=plan.policy.with_enforcement(enabled), shortcut_bonus=True,
                         iterations=plan.safety_iterations)
                runner = res.runners[arm]
                row = runner.run_tally().row(arm, ms[-1].success_pct)
                res.safety_rows.append(row)
                res.timing[f"{arm}.mediation_mean_ms"] = runner.timing.mean_ms
            write_csv(out / "metrics_safety.csv", SAFETY_COLUMNS, res.safety_rows)
        if "ablation" in experiments:
            for s in plan.ablation_sets:
                label = f"ablation-{modality_label(s)}"
                if s == ALL_MODALITIES and OURS in res.metrics:
                    res.metrics[label] = res.metrics[OURS]
                    continue
                run(label, MethodConfig(Method.CAPABILITY_EVOLUTION, s))
            res.ablation_rows = ablation_rows(res.metrics, plan.ablation_sets)
            write_csv(out / "metrics_ablation.csv", ABLATION_COLUMNS, res.ablation_rows)
    finally:
        if pool is not None:
            pool.shutdown()
    # wall-clock numbers differ between runs, so they live outside the reproducible tables
    (out / "timing.json").write_text(json.dumps(res.timing, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return res


# ---------------------------------------------------------------------------
# Re-emission from persisted logs
# ---------------------------------------------------------------------------


def load_episode_log(path: str | os.PathLike, label: str) -> list[IterationMetrics]:
    """Rebuild per-iteration metrics from an episode log written by ``MethodRunner``."""
    outcomes: list[EpisodeOutcome] = []
    failed: dict[str, int] = {}
    metrics = []
    for row in read_jsonl(path):
        if "iteration_marker" in row:
            it = row["iteration_marker"]
            metrics.append(compute_metrics(label, it, outcomes, failed, row["policy_drift"]))
            outcomes, failed = [], {}
            continue
        o = EpisodeOutcome.from_dict(row)
        outcomes.append(o)
        failed[o.episode_id] = row["failed_attempts"]
    return metrics


def reemit_tables(run_dir: str | os.PathLike, dest: str | os.PathLike, plan: ExperimentPlan) -> None:
    """Recompute every CSV table of ``run_dir`` from its episode and trace logs."""
    src, dst = Path(run_dir), Path(dest)
    dst.mkdir(parents=True, exist_ok=True)
    metrics = {p.stem: load_episode_log(p, p.stem) for p in sorted((src / "episodes").glob("*.jsonl"))}
    if (src / "metrics_evolution.csv").exists():
        write_csv(dst / "metrics_evolution.csv", EVOLUTION_COLUMNS, evolution_rows(metrics[OURS]))
    if (src / "metrics_final.csv").exists():
        write_csv(dst / "metrics_final.csv", FINAL_COLUMNS, final_rows(metrics))
    if (src / "plot_data.csv").exists():
        main = {k: v for k, v in metrics.items() if k in (OURS, AM_LABEL, STATIC_LABEL)}
        write_csv(dst / "plot_data.csv", PLOT_COLUMNS, plot_rows(main))
    if (src / "metrics_safety.csv").exists():
        rows = []
        for arm in ("safety-on", "safety-off"):
            if arm not in metrics:
                continue
            tally = SafetyTally()
            by_episode: dict[str, list[TraceRecord]] = defaultdict(list)
            for row in read_jsonl(src / "traces" / f"{arm}.jsonl"):
                t = TraceRecord.from_dict(row)
                by_episode[t.episode_id].append(t)
            for row in read_jsonl(src / "episodes" / f"{arm}.jsonl"):
                if "episode_id" in row:
                    tally.add(by_episode.get(row["episode_id"], []))
            for row in read_jsonl(src / "mediation" / f"{arm}.jsonl"):
                row.pop("iteration")
                tally = tally.merge(SafetyTally(**row))
            rows.append(tally.row(arm, metrics[arm][-1].success_pct))
        write_csv(dst / "metrics_safety.csv", SAFETY_COLUMNS, rows)
    if (src / "metrics_ablation.csv").exists():
        for s in plan.ablation_sets:
            label = f"ablation-{modality_label(s)}"
            if label not in metrics and s == ALL_MODALITIES:
                metrics[label] = metrics[OURS]
        write_csv(dst / "metrics_ablation.csv", ABLATION_COLUMNS, ablation_rows(metrics, plan.ablation_sets))
