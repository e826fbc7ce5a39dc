import itertools

import pytest
from hypothesis import given, strategies as st

from capevo.core import (
    KIND_INTERFACES,
    Action,
    AgentIdentity,
    CapabilityKind,
    CapabilitySet,
    ConstraintKind,
    ConstraintSpec,
    ControlLaw,
    EcmRecord,
    EpisodeOutcome,
    EpisodeSummary,
    ExperienceDataset,
    Interface,
    ParamVector,
    StepOutcome,
    TraceRecord,
    check_composition,
    plan,
)
from capevo.driver import IDENTITY_MEMORY, make_agent
from capevo.envsim import TASKS, get_task
from capevo.errors import MissingCapability

K = CapabilityKind


def record(kind, ecm_id=None, version=0):
    i, o = KIND_INTERFACES[kind]
    return EcmRecord(ecm_id or kind.value.lower(), kind, version, ParamVector(1.0, 0, 0, 0.3, 10), i, o, "d")


def full_caps():
    return CapabilitySet.from_records(record(k) for k in K)


def test_nominal_step_counts():
    assert {t.task_id: t.nominal_steps for t in TASKS} == {"T1": 2, "T2": 3, "T3": 4, "T4": 5, "T5": 6, "T6": 8}


def test_plan_pick_resolves_two_steps(agent):
    steps = plan(get_task("T1"), full_caps(), agent)
    assert [(s.kind, s.ecm_id, s.version) for s in steps] == [(K.PERCEIVE, "perceive", 0), (K.GRASP, "grasp", 0)]


def test_plan_assemble_has_eight_steps(agent):
    assert len(plan(get_task("T6"), full_caps(), agent)) == 8


def test_plan_with_empty_set_fails(agent):
    with pytest.raises(MissingCapability):
        plan(get_task("T1"), CapabilitySet(), agent)


def test_plan_is_deterministic_and_leaves_agent_alone(agent):
    before = agent.initial_hashes()
    for t in TASKS:
        assert plan(t, full_caps(), agent) == plan(t, full_caps(), agent)
    assert (agent.planner_hash(), agent.identity_hash()) == before
    assert agent.episodic_memory == ()


def test_tie_break_picks_lowest_id(agent):
    caps = CapabilitySet.from_records([record(k) for k in K] + [record(K.GRASP, "aaa-grasp", 3)])
    steps = plan(get_task("T1"), caps, agent)
    assert (steps[1].ecm_id, steps[1].version) == ("aaa-grasp", 3)


def test_composition_rule():
    aligned = record(K.PERCEIVE)  # out AlignedPose
    assert check_composition(aligned, record(K.GRASP))  # in AlignedPose
    raw_out = record(K.SORT)  # out RawScene
    assert not check_composition(raw_out, record(K.PLACE))  # in GraspedObject


def test_every_adjacent_plan_step_composes(agent):
    recs = {k: record(k) for k in K}
    for t in TASKS:
        steps = plan(t, full_caps(), agent)
        for a, b in itertools.pairwise(steps):
            assert check_composition(recs[a.kind], recs[b.kind]), (t.task_id, a.kind, b.kind)


def test_interface_tags_are_a_closed_set_of_six():
    assert len(Interface) == 6
    assert {i for pair in KIND_INTERFACES.values() for i in pair} <= set(Interface)


def test_identity_is_write_once():
    a = make_agent()
    with pytest.raises(AttributeError):
        a._identity = b"new goals"
    with pytest.raises(AttributeError):
        a._planner = None
    assert a.identity_memory == IDENTITY_MEMORY and a.identity_intact()


def test_episodic_memory_only_grows():
    a = make_agent()
    for i in range(5):
        a.record_episode(EpisodeSummary("T1", i, i % 2 == 0))
        assert len(a.episodic_memory) == i + 1
    assert a.identity_intact()


def test_param_vector_validation_and_round_trip():
    with pytest.raises(ValueError):
        ParamVector(1, 0, 0, 0.3, 10, True, 4)
    with pytest.raises(ValueError):
        ParamVector(float("nan"), 0, 0, 0.3, 10)
    p = ParamVector(0.9, 0.01, -0.02, 0.4, 15, True, 2, ControlLaw.DAMPED)
    assert ParamVector.from_dict(p.to_dict()) == p
    assert len(p.numeric) == 5
    assert p.retry_budget == 2


def test_action_rejects_negative_speed():
    with pytest.raises(ValueError):
        Action(K.GRASP, (0, 0), -0.1, 1, Interface.ALIGNED_POSE, Interface.GRASPED_OBJECT)


def test_constraint_needs_a_non_empty_box():
    with pytest.raises(ValueError):
        ConstraintSpec("box", ConstraintKind.WORKSPACE_BOX, (1, 1, 0, 0))
    with pytest.raises(ValueError):
        ConstraintSpec("cap", ConstraintKind.VELOCITY_CAP, (0.1, 0.2))


def test_trace_retries_bounded_by_budget():
    with pytest.raises(ValueError):
        TraceRecord("e", 0, 0, "T1", K.GRASP, "g", 0, "a", "b", 1.0, "None", (), 2, 1, StepOutcome.SUCCESS)


@given(st.floats(0, 10), st.integers(0, 3), st.booleans())
def test_trace_round_trip(duration, retries, ok):
    from capevo.core import Intervention
    t = TraceRecord("ep", 3, 1, "T2", K.PLACE, "place-0003", 2, "00ff", "ff00", duration, Intervention.MODIFIED,
                    ("velocity_cap",), retries, 3, StepOutcome.SUCCESS if ok else StepOutcome.FAIL,
                    attempts=retries + 1, positional_error=0.01, error_vec=(0.01, 0.0), tolerance=0.04)
    assert TraceRecord.from_dict(t.to_dict()) == t


def test_dataset_consistency_check():
    d = ExperienceDataset()
    fail = TraceRecord("e1", 0, 0, "T1", K.GRASP, "g", 0, "a", "b", 1.0, "None", (), 0, 0, StepOutcome.FAIL)
    d.extend(EpisodeOutcome("e1", "T1", 0, True, 1.0, 1, 0, planned=("g",)), [fail])
    assert not d.is_consistent()
    ok = ExperienceDataset()
    ok.extend(EpisodeOutcome("e1", "T1", 0, False, 1.0, 1, 0, planned=("g",)), [fail])
    assert ok.is_consistent()
    assert [o.episode_id for o in ok.episodes_touching("g")] == ["e1"]
