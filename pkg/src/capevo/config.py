"""Experiment configuration: TOML loading and validation."""

from __future__ import annotations

import dataclasses
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .core import ConstraintKind, ConstraintSpec
from .envsim import EnvConfig
from .errors import ConfigInvalid
from .governance import PolicySet, Recovery, RuntimeConfig, default_policy
from .learning import EsConfig, Modality, RewardWeights, TriggerConfig

EXPERIMENTS = ("evolution", "comparison", "safety", "ablation")

DEFAULT_ABLATION_SETS: tuple[frozenset[Modality], ...] = (
    frozenset({Modality.RL}),
    frozenset({Modality.IMITATION}),
    frozenset({Modality.SYNTHESIS}),
    frozenset({Modality.RL, Modality.IMITATION}),
    frozenset({Modality.RL, Modality.SYNTHESIS}),
    frozenset({Modality.IMITATION, Modality.SYNTHESIS}),
    frozenset({Modality.RL, Modality.IMITATION, Modality.SYNTHESIS}),
)


@dataclass(frozen=True)
class InitialParams:
    offset: float = 0.03
    gain: float = 0.45
    speed: float = 0.40
    force: float = 15.0


@dataclass(frozen=True)
class TeacherParams:
    offset: float = 0.002
    gain: float = 0.5
    speed: float = 0.40
    force: float = 15.0


@dataclass(frozen=True)
class ExperimentPlan:
    master_seed: int
    iterations: int = 20
    runs_per_iteration: int = 30
    tasks: tuple[str, ...] = ("T1", "T2", "T3", "T4", "T5", "T6")
    experiments: tuple[str, ...] = EXPERIMENTS
    workers: int | None = None  # None: one per logical CPU
    paired_eval_seeds: bool = True
    holdout_size: int = 20
    write_traces: bool = True
    env: EnvConfig = field(default_factory=EnvConfig)
    policy: PolicySet = field(default_factory=default_policy)
    runtime: RuntimeConfig = field(default_factory=RuntimeConfig)
    weights: RewardWeights = field(default_factory=RewardWeights)
    es: EsConfig = field(default_factory=EsConfig)
    trigger: TriggerConfig = field(default_factory=TriggerConfig)
    imitation_rate: float = 0.25
    initial: InitialParams = field(default_factory=InitialParams)
    teacher: TeacherParams = field(default_factory=TeacherParams)
    am_step: float = 0.01
    am_sigma: float = 0.005
    safety_iterations: int = 20
    ablation_sets: tuple[frozenset[Modality], ...] = DEFAULT_ABLATION_SETS

    def __post_init__(self):
        if self.iterations < 0 or self.runs_per_iteration < 2:
            raise ConfigInvalid("need iterations >= 0 and at least two runs per iteration")
        if self.workers is not None and self.workers < 1:
            raise ConfigInvalid("workers must be positive", field="experiment.workers")
        if self.holdout_size < 1:
            raise ConfigInvalid("holdout_size must be positive", field="experiment.holdout_size")
        if not 0.0 < self.imitation_rate <= 1.0:
            raise ConfigInvalid("imitation rate must be in (0, 1]", field="learning.imitation_rate")
        for s in self.ablation_sets:
            if not s:
                raise ConfigInvalid("ablation modality sets must be non-empty", field="ablation.sets")


def _err_line(exc: Exception) -> int | None:
    m = re.search(r"line (\d+)", str(exc))
    return int(m.group(1)) if m else None


def _build(cls, data: Mapping[str, Any], section: str, rename: Mapping[str, str] | None = None):
    rename = rename or {}
    names = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        name = rename.get(key, key)
        if name not in names:
            raise ConfigInvalid("unknown key", field=f"{section}.{key}")
        kwargs[name] = tuple(value) if isinstance(value, list) else value
    try:
        return cls(**kwargs)
    except ConfigInvalid:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigInvalid(str(exc), field=section) from exc


def parse_policy(data: Mapping[str, Any], section: str = "policy") -> PolicySet:
    constraints = []
    for i, c in enumerate(data.get("constraints", [])):
        where = f"{section}.constraints[{i}]"
        try:
            constraints.append(ConstraintSpec(
                constraint_id=str(c["id"]),
                kind=ConstraintKind(c["kind"]),
                bounds=tuple(float(b) for b in c["bounds"]),
                modifiable=bool(c.get("modifiable", True)),
            ))
        except KeyError as exc:
            raise ConfigInvalid(f"missing {exc.args[0]}", field=where) from exc
        except (TypeError, ValueError) as exc:
            raise ConfigInvalid(str(exc), field=where) from exc
    enabled = bool(data.get("enforcement_enabled", True))
    if not constraints:
        return default_policy(enabled)
    try:
        return PolicySet(tuple(constraints), enabled)
    except ValueError as exc:
        raise ConfigInvalid(str(exc), field=section) from exc


def load_policy(path: str | os.PathLike) -> PolicySet:
    return parse_policy(_read_toml(Path(path)))


def _read_toml(path: Path) -> dict:
    if not path.is_file():
        raise ConfigInvalid(f"config file not found: {path}")
    try:
        return tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigInvalid(str(exc), line=_err_line(exc)) from exc


def parse_plan(data: Mapping[str, Any], base_dir: Path | None = None) -> ExperimentPlan:
    known = {"experiment", "env", "policy", "runtime", "learning", "initial", "teacher", "am", "safety", "ablation"}
    for key in data:
        if key not in known:
            raise ConfigInvalid("unknown section", field=key)
    exp = dict(data.get("experiment", {}))
    if "master_seed" not in exp:
        raise ConfigInvalid("master_seed is mandatory", field="experiment.master_seed")
    kw: dict[str, Any] = {}
    for key, value in exp.items():
        if key == "experiments":
            value = [value] if isinstance(value, str) else value
            if value == ["all"]:
                value = list(EXPERIMENTS)
            for v in value:
                if v not in EXPERIMENTS:
                    raise ConfigInvalid(f"unknown experiment {v!r}", field="experiment.experiments")
            kw["experiments"] = tuple(value)
        elif key == "tasks":
            kw["tasks"] = tuple(value)
        elif key in ("master_seed", "iterations", "runs_per_iteration", "workers", "holdout_size"):
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigInvalid("expected an integer", field=f"experiment.{key}")
            kw[key] = value
        elif key in ("paired_eval_seeds", "write_traces"):
            kw[key] = bool(value)
        else:
            raise ConfigInvalid("unknown key", field=f"experiment.{key}")

    if "env" in data:
        kw["env"] = _build(EnvConfig, data["env"], "env")
    if "policy" in data:
        pol = dict(data["policy"])
        if "file" in pol:
            ref = Path(pol.pop("file"))
            if base_dir is not None and not ref.is_absolute():
                ref = base_dir / ref
            policy = load_policy(ref)
            if "enforcement_enabled" in pol:
                policy = policy.with_enforcement(bool(pol["enforcement_enabled"]))
            kw["policy"] = policy
        else:
            kw["policy"] = parse_policy(pol)
    if "runtime" in data:
        rt = dict(data["runtime"])
        try:
            if "recovery" in rt:
                rt["recovery"] = Recovery(rt["recovery"])
        except ValueError as exc:
            raise ConfigInvalid(str(exc), field="runtime.recovery") from exc
        kw["runtime"] = _build(RuntimeConfig, rt, "runtime")
    if "learning" in data:
        lr = dict(data["learning"])
        weights = {k: lr.pop(k) for k in ("alpha", "beta", "gamma") if k in lr}
        if weights:
            kw["weights"] = _build(RewardWeights, weights, "learning")
        trig = {k[len("trigger_"):]: lr.pop(k) for k in list(lr) if k.startswith("trigger_")}
        if trig:
            kw["trigger"] = _build(TriggerConfig, trig, "learning")
        if "imitation_rate" in lr:
            kw["imitation_rate"] = float(lr.pop("imitation_rate"))
        es = {k[len("es_"):]: lr.pop(k) for k in list(lr) if k.startswith("es_")}
        if es:
            kw["es"] = _build(EsConfig, es, "learning")
        for key in lr:
            raise ConfigInvalid("unknown key", field=f"learning.{key}")
    if "initial" in data:
        kw["initial"] = _build(InitialParams, data["initial"], "initial")
    if "teacher" in data:
        kw["teacher"] = _build(TeacherParams, data["teacher"], "teacher")
    if "am" in data:
        am = dict(data["am"])
        for key, value in am.items():
            if key not in ("step", "sigma"):
                raise ConfigInvalid("unknown key", field=f"am.{key}")
            kw[f"am_{key}"] = float(value)
    if "safety" in data:
        for key, value in data["safety"].items():
            if key != "iterations":
                raise ConfigInvalid("unknown key", field=f"safety.{key}")
            kw["safety_iterations"] = int(value)
    if "ablation" in data:
        sets = []
        for i, s in enumerate(data["ablation"].get("sets", [])):
            try:
                sets.append(frozenset(Modality(m) for m in s))
            except ValueError as exc:
                raise ConfigInvalid(str(exc), field=f"ablation.sets[{i}]") from exc
        if sets:
            kw["ablation_sets"] = tuple(sets)
    try:
        return ExperimentPlan(**kw)
    except ConfigInvalid:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigInvalid(str(exc)) from exc


def load_plan(path: str | os.PathLike) -> ExperimentPlan:
    path = Path(path)
    return parse_plan(_read_toml(path), base_dir=path.parent)
