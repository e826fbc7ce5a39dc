"""Method configurations and the mutable-agent baseline."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Mapping, Sequence

from .core import AgentIdentity, CapabilityKind, PlannerParams
from .errors import ZeroNorm
from .learning import ALL_MODALITIES, FailureSummary, Modality
from .seeding import Stream, derive


class Method(str, Enum):
    CAPABILITY_EVOLUTION = "CapabilityEvolution"
    AGENT_MODIFICATION = "AgentModification"
    STATIC_ECM = "StaticEcm"


@dataclass(frozen=True)
class MethodConfig:
    method: Method
    modalities: frozenset[Modality] = ALL_MODALITIES
    am_step: float = 0.01
    am_sigma: float = 0.005

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        object.__setattr__(self, "modalities", frozenset(Modality(m) for m in self.modalities))
        if self.method == Method.CAPABILITY_EVOLUTION and not self.modalities:
            raise ValueError("capability evolution needs at least one learning modality")
        if self.am_step < 0 or self.am_sigma < 0:
            raise ValueError("AM step and noise scale must be non-negative")

    @property
    def label(self) -> str:
        if self.method != Method.CAPABILITY_EVOLUTION:
            return self.method.value
        return modality_label(self.modalities)


_MODALITY_ORDER = (Modality.RL, Modality.IMITATION, Modality.SYNTHESIS)


def modality_label(modalities) -> str:
    return "+".join(m.value for m in _MODALITY_ORDER if m in modalities)


@dataclass(frozen=True)
class MutableAgent:
    """Planner whose parameters the AM baseline edits: step-skip flags and per-kind target biases."""

    planner: PlannerParams
    skip: tuple[tuple[str, tuple[bool, ...]], ...]
    bias: tuple[tuple[CapabilityKind, tuple[float, float]], ...]

    @classmethod
    def from_identity(cls, agent: AgentIdentity) -> "MutableAgent":
        p = agent.planner_params
        skip = tuple((tid, tuple(False for _ in kinds)) for tid, kinds in p.templates)
        bias = tuple((k, (0.0, 0.0)) for k in CapabilityKind)
        return cls(p, skip, bias)

    def skip_flags(self, task_id: str) -> tuple[bool, ...]:
        return dict(self.skip)[task_id]

    def biases(self) -> dict[CapabilityKind, tuple[float, float]]:
        return dict(self.bias)

    def numeric_image(self) -> list[float]:
        image = self.planner.numeric_image()
        image.extend(float(f) for _, flags in self.skip for f in flags)
        for _, (bx, by) in self.bias:
            image.extend((bx, by))
        return image


def frozen_image(agent: AgentIdentity) -> list[float]:
    """Numeric image of a fixed agent, laid out like ``MutableAgent.numeric_image``."""
    return MutableAgent.from_identity(agent).numeric_image()


def am_update(
    agent: MutableAgent,
    summaries: Mapping[CapabilityKind, FailureSummary],
    seed: int,
    step: float = 0.01,
    sigma: float = 0.005,
) -> MutableAgent:
    """Shift each kind's bias against its mean signed error, plus exploration noise.

    ECM parameters are never touched; only the agent changes.
    """
    new_bias = []
    for kind, (bx, by) in agent.bias:
        rng = Stream(derive(seed, "am", kind.value))
        s = summaries.get(kind)
        if s is not None and s.failures > 0:
            ex, ey = s.mean_error_vec
            norm = math.hypot(ex, ey)
            if norm > 0:
                bx -= step * ex / norm
                by -= step * ey / norm
        new_bias.append((kind, (bx + rng.normal(sigma), by + rng.normal(sigma))))
    return replace(agent, bias=tuple(new_bias))


def policy_drift(initial: Sequence[float], final: Sequence[float]) -> float:
    """Normalised L2 distance between two flattened policy parameter vectors."""
    if len(initial) != len(final):
        raise ValueError("parameter vectors differ in shape")
    diff = math.sqrt(sum((f - i) ** 2 for i, f in zip(initial, final)))
    norm = math.sqrt(sum(i * i for i in initial))
    if norm == 0.0:
        raise ZeroNorm(diff)
    return diff / norm
