"""ECM update modalities: evolution strategies, imitation, rule-based synthesis, hybrid."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Mapping, Protocol, Sequence

from .core import (
    CapabilityKind,
    ConstraintKind,
    ControlLaw,
    EcmRecord,
    EpisodeOutcome,
    ExperienceDataset,
    ParamVector,
    StepOutcome,
    TraceRecord,
)
from .errors import InsufficientData, KindMismatch
from .seeding import Stream, derive


class Modality(str, Enum):
    RL = "rl"
    IMITATION = "imitation"
    SYNTHESIS = "synthesis"


ALL_MODALITIES = frozenset(Modality)


@dataclass(frozen=True)
class RewardWeights:
    alpha: float = 1.0
    beta: float = 0.01
    gamma: float = 0.05

    def __post_init__(self):
        for v in (self.alpha, self.beta, self.gamma):
            if not math.isfinite(v) or v < 0:
                raise ValueError("reward weights must be finite and non-negative")


def reward(
    outcome: EpisodeOutcome,
    weights: RewardWeights = RewardWeights(),
    shortcut_bonus_enabled: bool = False,
    nominal_time: float = math.inf,
    bonus: float = 5.0,
    fraction: float = 0.6,
) -> float:
    r = weights.alpha * float(outcome.success) - weights.beta * outcome.exec_time - weights.gamma * outcome.n_retry
    if shortcut_bonus_enabled and outcome.success and outcome.exec_time < fraction * nominal_time:
        r += bonus
    return r


# ---------------------------------------------------------------------------
# Failure summaries
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FailureSummary:
    episodes: int
    fails_by_kind: Mapping[str, int] = field(default_factory=dict)
    aborted_by_kind: Mapping[str, int] = field(default_factory=dict)
    retry_exhaustion: int = 0
    mean_error: float = 0.0
    mean_tolerance: float = 0.0
    mean_error_vec: tuple[float, float] = (0.0, 0.0)
    violations_by_kind: Mapping[str, int] = field(default_factory=dict)

    @property
    def failures(self) -> int:
        return sum(self.fails_by_kind.values()) + sum(self.aborted_by_kind.values())

    @property
    def retry_exhaustion_dominant(self) -> bool:
        return self.failures > 0 and 2 * self.retry_exhaustion >= self.failures

    @property
    def dominant_violation(self) -> str | None:
        if not self.violations_by_kind:
            return None
        return max(sorted(self.violations_by_kind), key=lambda k: self.violations_by_kind[k])


def summarize(
    traces: Iterable[TraceRecord],
    episodes: int,
    constraint_kinds: Mapping[str, ConstraintKind] | None = None,
) -> FailureSummary:
    """Aggregate failure statistics over ``traces``.

    Positional error statistics come from failed steps only, so they describe
    why things went wrong rather than average behaviour.
    """
    fails: Counter = Counter()
    aborted: Counter = Counter()
    viol: Counter = Counter()
    exhaustion = 0
    errs = []
    tols = []
    vx = vy = 0.0
    nv = 0
    for t in traces:
        for cid in t.violated:
            key = constraint_kinds[cid].value if constraint_kinds and cid in constraint_kinds else cid
            viol[key] += 1
        if t.error_vec is not None:
            vx += t.error_vec[0]
            vy += t.error_vec[1]
            nv += 1
        if t.outcome == StepOutcome.SUCCESS:
            continue
        if t.outcome == StepOutcome.ABORTED:
            aborted[t.kind.value] += 1
        else:
            fails[t.kind.value] += 1
            if t.retries >= t.max_retries:
                exhaustion += 1
        if t.positional_error is not None:
            errs.append(t.positional_error)
            tols.append(t.tolerance)
    return FailureSummary(
        episodes=episodes,
        fails_by_kind=dict(sorted(fails.items())),
        aborted_by_kind=dict(sorted(aborted.items())),
        retry_exhaustion=exhaustion,
        mean_error=sum(errs) / len(errs) if errs else 0.0,
        mean_tolerance=sum(tols) / len(tols) if tols else 0.0,
        mean_error_vec=(vx / nv, vy / nv) if nv else (0.0, 0.0),
        violations_by_kind=dict(sorted(viol.items())),
    )


# ---------------------------------------------------------------------------
# Reinforcement: (1 + lambda) evolution strategies
# ---------------------------------------------------------------------------


class EpisodeEvaluator(Protocol):
    def evaluate(self, record: EcmRecord, seeds: Sequence[int]) -> list[tuple[EpisodeOutcome, float]]:
        """Run one episode per seed with ``record`` deployed; return (outcome, nominal time) pairs."""


@dataclass(frozen=True)
class EsConfig:
    population: int = 8
    sigma: float = 0.02
    episodes: int = 10
    # per-dimension scale of sigma: gain, offset_x, offset_y, speed, force
    scale: tuple[float, float, float, float, float] = (1.5, 0.05, 0.05, 1.0, 20.0)
    # noise floor: sub-millisecond time jitter should not count as a win
    min_improvement: float = 1e-4
    shortcut_bonus_enabled: bool = False
    bonus: float = 5.0
    fraction: float = 0.6


_LOWER = (0.05, -math.inf, -math.inf, 0.01, 0.0)


def perturb(params: ParamVector, es: EsConfig, rng: Stream) -> ParamVector:
    values = []
    for v, s, lo in zip(params.numeric, es.scale, _LOWER):
        values.append(max(lo, v + es.sigma * s * rng.normal()))
    return params.with_numeric(values)


def mean_reward(
    record: EcmRecord,
    evaluator: EpisodeEvaluator,
    seeds: Sequence[int],
    weights: RewardWeights,
    es: EsConfig,
) -> float:
    results = evaluator.evaluate(record, seeds)
    return sum(
        reward(o, weights, es.shortcut_bonus_enabled, nominal, es.bonus, es.fraction) for o, nominal in results
    ) / len(results)


def update_rl(
    ecm: EcmRecord,
    data: ExperienceDataset,
    weights: RewardWeights,
    env: EpisodeEvaluator,
    seed: int,
    es: EsConfig = EsConfig(),
    min_episodes: int = 1,
) -> ParamVector:
    """One (1 + lambda) ES generation on mean episode reward; structural flags untouched.

    Every perturbation and the incumbent are scored on the same episode seeds.
    Ties go to the lowest perturbation index.
    """
    if len(data.episodes_touching(ecm.ecm_id)) < min_episodes:
        raise InsufficientData(f"no episodes touching {ecm.ecm_id}")
    seeds = [derive(seed, "es-episode", e) for e in range(es.episodes)]
    best_params = ecm.params
    best = mean_reward(ecm, env, seeds, weights, es)
    threshold = best + es.min_improvement
    for j in range(es.population):
        cand = perturb(ecm.params, es, Stream(derive(seed, "es-perturb", j)))
        r = mean_reward(replace(ecm, params=cand), env, seeds, weights, es)
        if r > threshold and r > best:
            best, best_params = r, cand
    return best_params


# ---------------------------------------------------------------------------
# Imitation
# ---------------------------------------------------------------------------


def update_imitation(
    ecm: EcmRecord,
    oracle: ParamVector,
    rate: float,
    oracle_kind: CapabilityKind | None = None,
) -> ParamVector:
    """Move the numeric parameters a fraction ``rate`` of the way to the teacher."""
    if oracle_kind is not None and CapabilityKind(oracle_kind) != ecm.kind:
        raise KindMismatch(f"teacher is {oracle_kind}, ECM is {ecm.kind.value}")
    if not 0.0 < rate <= 1.0:
        raise ValueError("imitation rate must be in (0, 1]")
    if rate == 1.0:
        return oracle
    cur = ecm.params
    values = [c + rate * (o - c) for c, o in zip(cur.numeric, oracle.numeric)]
    return cur.with_numeric(values)


# ---------------------------------------------------------------------------
# Structural synthesis (deterministic rule table)
# ---------------------------------------------------------------------------

RULES = ("R1", "R2", "R3", "R4")


def synthesis_rule(params: ParamVector, summary: FailureSummary) -> str:
    """Name of the first rule that matches."""
    if summary.retry_exhaustion_dominant and not (params.retry_enabled and params.max_retries >= 3):
        return "R1"
    if summary.failures > 0 and summary.mean_error > summary.mean_tolerance and params.control_law == ControlLaw.DIRECT:
        return "R2"
    if summary.dominant_violation == ConstraintKind.VELOCITY_CAP.value:
        return "R3"
    return "R4"


def update_synthesis(ecm: EcmRecord, summary: FailureSummary) -> ParamVector:
    p = ecm.params
    rule = synthesis_rule(p, summary)
    if rule == "R1":
        return replace(p, retry_enabled=True, max_retries=min(3, p.max_retries + 1))
    if rule == "R2":
        return replace(p, control_law=ControlLaw.DAMPED)
    if rule == "R3":
        return replace(p, speed=p.speed * 0.8)
    return p


# ---------------------------------------------------------------------------
# Hybrid and trigger
# ---------------------------------------------------------------------------


def teacher_is_better(
    ecm: EcmRecord,
    teacher: ParamVector,
    env: EpisodeEvaluator,
    seed: int,
    weights: RewardWeights,
    es: EsConfig = EsConfig(),
) -> bool:
    """Whether the demonstrator's numeric behaviour out-scores the ECM on shared episodes.

    Cloning a demonstrator only helps while it is ahead; once the ECM has caught
    up, further imitation would drag it back toward the teacher.
    """
    seeds = [derive(seed, "es-episode", e) for e in range(es.episodes)]
    demo = replace(ecm, params=ecm.params.with_numeric(teacher.numeric))
    return mean_reward(demo, env, seeds, weights, es) > mean_reward(ecm, env, seeds, weights, es)


def update_hybrid(
    ecm: EcmRecord,
    data: ExperienceDataset,
    oracle: ParamVector,
    weights: RewardWeights,
    env: EpisodeEvaluator,
    seed: int,
    enabled: Iterable[Modality],
    summary: FailureSummary | None = None,
    imitation_rate: float = 0.25,
    es: EsConfig = EsConfig(),
) -> ParamVector:
    """Synthesis (structure) -> imitation -> RL fine-tuning, skipping disabled modalities.

    The imitation step is taken only while the teacher still outperforms the ECM.
    """
    enabled = frozenset(Modality(m) for m in enabled)
    if not enabled:
        raise ValueError("at least one learning modality must be enabled")
    rec = ecm
    if Modality.SYNTHESIS in enabled:
        if summary is None:
            touching = data.episodes_touching(ecm.ecm_id)
            summary = summarize(data.traces_for(ecm.ecm_id), len(touching))
        rec = replace(rec, params=update_synthesis(rec, summary))
    if Modality.IMITATION in enabled and teacher_is_better(rec, oracle, env, seed, weights, es):
        rec = replace(rec, params=update_imitation(rec, oracle, imitation_rate))
    if Modality.RL in enabled:
        rec = replace(rec, params=update_rl(rec, data, weights, env, seed, es))
    return rec.params


@dataclass(frozen=True)
class TriggerConfig:
    min_episodes: int = 30
    window: int = 30
    drop_points: float = 10.0


def evolution_trigger(
    ecm: EcmRecord,
    data: ExperienceDataset,
    config: TriggerConfig = TriggerConfig(),
    seen_at_last_update: int = 0,
) -> bool:
    """Enough fresh episodes, or a success-rate drop between the last two windows."""
    touching = data.episodes_touching(ecm.ecm_id)
    if len(touching) - seen_at_last_update >= config.min_episodes:
        return True
    w = config.window
    if len(touching) < 2 * w:
        return False
    recent = sum(o.success for o in touching[-w:]) / w
    previous = sum(o.success for o in touching[-2 * w:-w]) / w
    return (previous - recent) * 100.0 > config.drop_points
