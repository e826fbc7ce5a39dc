import csv
import json
from dataclasses import replace
from pathlib import Path

import pytest

from capevo.config import ExperimentPlan
from capevo.driver import (
    AM_LABEL,
    OURS,
    STATIC_LABEL,
    load_episode_log,
    reemit_tables,
    run_experiment,
    table_iterations,
)
from capevo.errors import OutputDirNotEmpty
from capevo.governance import read_jsonl
from capevo.learning import ALL_MODALITIES, Modality, TriggerConfig
from capevo.registry import Registry


@pytest.fixture(scope="module")
def plan():
    # a low trigger threshold so that three runs per iteration still cause updates
    return ExperimentPlan(master_seed=11, iterations=3, runs_per_iteration=3, safety_iterations=2,
                          holdout_size=5, workers=1, trigger=TriggerConfig(min_episodes=5, window=5),
                          ablation_sets=(frozenset({Modality.SYNTHESIS}), ALL_MODALITIES))


@pytest.fixture(scope="module")
def run_dir(plan, tmp_path_factory):
    out = tmp_path_factory.mktemp("run") / "out"
    res = run_experiment(plan, out)
    return out, res


def artefacts(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.name != "timing.json"}


def test_repeat_run_is_byte_identical(plan, run_dir, tmp_path):
    out, _ = run_dir
    run_experiment(plan, tmp_path / "again")
    assert artefacts(out) == artefacts(tmp_path / "again")


def test_worker_count_does_not_change_results(plan, tmp_path):
    run_experiment(plan, tmp_path / "one", experiments=["evolution"], workers=1)
    run_experiment(plan, tmp_path / "two", experiments=["evolution"], workers=2)
    assert artefacts(tmp_path / "one") == artefacts(tmp_path / "two")


def test_tables_reemit_from_logs(plan, run_dir, tmp_path):
    out, _ = run_dir
    reemit_tables(out, tmp_path, plan)
    names = sorted(p.name for p in out.glob("*.csv"))
    assert names == ["metrics_ablation.csv", "metrics_evolution.csv", "metrics_final.csv",
                     "metrics_safety.csv", "plot_data.csv"]
    for name in names:
        assert (tmp_path / name).read_bytes() == (out / name).read_bytes(), name


def test_success_recount_from_episode_log(plan, run_dir):
    out, res = run_dir
    rows = [r for r in read_jsonl(out / "episodes" / f"{OURS}.jsonl") if "episode_id" in r]
    per_iteration = plan.runs_per_iteration * len(plan.tasks)
    assert len(rows) == per_iteration * (plan.iterations + 1)
    for m in res.metrics[OURS]:
        mine = [r for r in rows if r["iteration"] == m.iteration]
        by_task = {}
        for r in mine:
            by_task.setdefault(r["task_id"], []).append(r["success"])
        macro = sum(100.0 * sum(v) / len(v) for v in by_task.values()) / len(by_task)
        assert m.success_pct == pytest.approx(macro, abs=1e-12)
    assert load_episode_log(out / "episodes" / f"{OURS}.jsonl", OURS) == res.metrics[OURS]


def test_baselines_never_touch_ecms(run_dir):
    out, _ = run_dir
    for label in (STATIC_LABEL, AM_LABEL):
        reg = Registry.load(out / "registry" / label)
        for eid in reg.ecm_ids():
            assert [r.version for r in reg.versions(eid)] == [0]
        assert not list(read_jsonl(out / "gates" / f"{label}.jsonl"))


def test_drift_by_method(run_dir):
    _, res = run_dir
    assert all(m.policy_drift == 0.0 for m in res.metrics[OURS])
    assert all(m.policy_drift == 0.0 for m in res.metrics[STATIC_LABEL])
    assert all(m.policy_drift > 0.0 for m in res.metrics[AM_LABEL][1:])


def test_promotions_have_passing_gates(run_dir):
    out, res = run_dir
    reg = Registry.load(out / "registry" / OURS)
    gates = {(g["ecm_id"], g["candidate_version"]): g for g in read_jsonl(out / "gates" / f"{OURS}.jsonl")}
    assert gates, "the low trigger threshold should produce gate decisions"
    promoted = [(e.ecm_id, e.version) for e in reg.events() if e.op == "promote"]
    for key in promoted:
        g = gates[key]
        assert g["decision"] and g["holdout_success_candidate"] >= g["holdout_success_incumbent"]
    assert len(res.gate_reports[OURS]) == len(gates)


def test_safety_rows(run_dir):
    _, res = run_dir
    on, off = res.safety_rows
    assert on["arm"] == "safety-on" and on["unsafe_executed"] == 0
    assert on["blocked"] == on["violating_proposals"]
    assert off["arm"] == "safety-off" and off["blocked"] == 0


def test_evolution_table_rows(run_dir):
    out, _ = run_dir
    with open(out / "metrics_evolution.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    assert [int(r["iteration"]) for r in rows] == [0, 3]
    assert table_iterations(20) == [0, 5, 10, 15, 20]
    assert table_iterations(7) == [0, 5, 7]
    assert table_iterations(0) == [0]


def test_timing_is_recorded_outside_tables(run_dir):
    out, _ = run_dir
    timing = json.loads((out / "timing.json").read_text())
    assert timing[f"{OURS}.mediation_mean_ms"] < 10.0


def test_output_dir_must_be_empty(plan, tmp_path):
    (tmp_path / "stale.txt").write_text("x")
    with pytest.raises(OutputDirNotEmpty):
        run_experiment(plan, tmp_path)


def test_unknown_experiment_rejected(plan, tmp_path):
    with pytest.raises(ValueError):
        run_experiment(plan, tmp_path / "o", experiments=["race"])


def test_unpaired_seeds_differ_across_iterations(plan, tmp_path):
    res = run_experiment(replace(plan, paired_eval_seeds=False, write_traces=False), tmp_path / "o",
                         experiments=["evolution"])
    assert len(res.metrics[OURS]) == plan.iterations + 1


def test_tolerance_scale_reaches_the_runner(plan):
    from capevo.baselines import Method, MethodConfig
    from capevo.driver import MethodRunner
    from capevo.envsim import EnvConfig

    strict = MethodRunner(replace(plan, env=EnvConfig(tolerance_scale=0.5)), MethodConfig(Method.STATIC_ECM), "s")
    assert strict.env.task("T2").success.position_tolerance == pytest.approx(0.02)
    assert MethodRunner(plan, MethodConfig(Method.STATIC_ECM), "d").env.task("T2").success.position_tolerance == 0.04
