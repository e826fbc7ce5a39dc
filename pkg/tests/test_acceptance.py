"""Acceptance criteria, one test each. Runs the full default plan once (a few minutes)."""

import json
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import ACCEPTANCE, handle, registry_with
from capevo.config import ExperimentPlan
from capevo.core import CapabilityKind, LifecycleState, ParamVector, canonical_json
from capevo.driver import AM_LABEL, OURS, STATIC_LABEL, make_agent, run_experiment
from capevo.envsim import TASKS, EnvConfig, get_task, observe, oracle_params, reset
from capevo.governance import (
    GateReport,
    GateToken,
    default_policy,
    gate_decision,
    read_jsonl,
    run_governed_episode,
)
from capevo.errors import GateNotPassed, LifecycleError
from capevo.learning import ALL_MODALITIES
from capevo.baselines import modality_label
from capevo.registry import CreationMode, Registry
from capevo.seeding import derive
from capevo.stats import cohens_d, cohens_d_from_summary, moving_average, welch_t

K = CapabilityKind
FIXTURES = Path(__file__).parent / "fixtures" / "stats_reference.json"
BUDGET_S = 600.0


def record(cid: int, title: str, checks: dict[str, bool], detail: str) -> None:
    failed = [name for name, ok in checks.items() if not ok]
    ACCEPTANCE[cid] = (not failed, title, detail + (f"  [failed: {', '.join(failed)}]" if failed else ""))
    assert not failed, f"C{cid} {title}: {detail}; failed {failed}"


@pytest.fixture(scope="module")
def full(tmp_path_factory):
    out = tmp_path_factory.mktemp("acceptance") / "default"
    plan = ExperimentPlan(master_seed=1)
    t0 = time.perf_counter()
    res = run_experiment(plan, out)
    return plan, out, res, time.perf_counter() - t0


def test_c1_evolution_trend(full):
    _, _, res, wall = full
    ms = res.metrics[OURS]
    s = [m.success_pct for m in ms]
    ma = moving_average(s, 3)
    record(1, "evolution trend", {
        "start in [25, 40]": 25.0 <= s[0] <= 40.0,
        "end >= 85": s[-1] >= 85.0,
        "MA3 non-decreasing": all(b >= a for a, b in zip(ma, ma[1:])),
        "variance falls": ms[-1].variance < ms[0].variance,
        "runtime < 10 min": wall < BUDGET_S,
    }, f"it0 {s[0]:.1f}%, it{ms[-1].iteration} {s[-1]:.1f}%, var {ms[0].variance:.1f} -> {ms[-1].variance:.1f}, "
       f"whole default plan {wall:.0f} s")


def test_c2_static_plateau(full):
    _, _, res, _ = full
    st_ms, ours = res.metrics[STATIC_LABEL], res.metrics[OURS]
    gain = st_ms[20].success_pct - st_ms[5].success_pct
    gap = ours[-1].success_pct - st_ms[-1].success_pct
    record(2, "static-ECM plateau", {"it5->20 gain < 5": gain < 5.0, "gap to ours >= 20": gap >= 20.0},
           f"gain {gain:+.1f} points, gap {gap:.1f} points")


def test_c3_stability_comparison(full):
    _, _, res, _ = full
    ours, am = res.metrics[OURS][-1], res.metrics[AM_LABEL][-1]
    d = cohens_d(ours.run_values, am.run_values)
    _, _, p = welch_t(ours.run_values, am.run_values)
    row = next(r for r in res.final_rows if r["method"] == AM_LABEL)
    record(3, "stability vs agent modification", {
        "n = 30 per arm": len(ours.run_values) == len(am.run_values) == 30,
        "ours success > AM": ours.success_pct > am.success_pct,
        "ours variance < AM": ours.variance < am.variance,
        "d > 0.8": d > 0.8,
        "p < 0.01": p < 0.01,
        "table agrees": row["cohens_d_vs_ours"] == d and row["welch_p"] == p,
    }, f"ours {ours.success_pct:.1f}% (var {ours.variance:.1f}) vs AM {am.success_pct:.1f}% "
       f"(var {am.variance:.1f}), d {d:.2f}, p {p:.2g}")


def test_c4_identity_drift(full):
    _, _, res, _ = full
    am = res.metrics[AM_LABEL]
    record(4, "identity invariance / drift", {
        "ours exactly 0": all(m.policy_drift == 0.0 for m in res.metrics[OURS]),
        "static exactly 0": all(m.policy_drift == 0.0 for m in res.metrics[STATIC_LABEL]),
        "AM > 0 from iteration 1": all(m.policy_drift > 0.0 for m in am if m.iteration >= 1),
    }, f"AM drift at it{am[-1].iteration} {am[-1].policy_drift:.4f}")


def test_c5_safety(full):
    _, _, res, _ = full
    on = next(r for r in res.safety_rows if r["arm"] == "safety-on")
    off = next(r for r in res.safety_rows if r["arm"] == "safety-off")
    ms = res.timing["safety-on.mediation_mean_ms"]
    record(5, "safety", {
        "on: 0 unsafe": on["unsafe_executed"] == 0,
        "off: unsafe > 5%": off["unsafe_action_pct"] > 5.0,
        "on: violations seen": on["violating_proposals"] > 0,
        "on: block 100%": on["blocked"] == on["violating_proposals"],
        "mediation < 10 ms": 0.0 < ms < 10.0,
    }, f"on {on['unsafe_executed']} unsafe, {on['blocked']}/{on['violating_proposals']} blocked; "
       f"off {off['unsafe_action_pct']:.1f}% unsafe; mediation {ms:.4f} ms")


def test_c6_ablation_ordering(full):
    plan, _, res, _ = full
    rows = {r["modalities"]: r["final_success_pct"] for r in res.ablation_rows}
    full_label = modality_label(ALL_MODALITIES)
    best = rows[full_label]
    others = {k: v for k, v in rows.items() if k != full_label}
    singles = {k: v for k, v in rows.items() if "+" not in k}
    record(6, "ablation ordering", {
        "seven sets": len(rows) == 7,
        "full set highest": all(best > v for v in others.values()),
        "singles >= 3 below": all(best - v >= 3.0 for v in singles.values()),
    }, ", ".join(f"{k} {v:.1f}" for k, v in rows.items()))


@settings(max_examples=1000)
@given(st.integers(1, 40), st.data())
def synthetic_gate_decisions(n, data):
    c, i = data.draw(st.integers(0, n)), data.draw(st.integers(0, n))
    reg, ids = registry_with(oracle_params)
    eid = ids[K.GRASP]
    v = reg.register_candidate(eid, replace(oracle_params(K.GRASP), gain=0.9))
    report = GateReport(eid, v, 0, c / n, i / n, gate_decision(c, i), n)
    try:
        reg.promote(eid, v, report.token())
    except GateNotPassed:
        assert c < i and reg.deployed_version(eid) == 0
    else:
        assert c >= i and reg.deployed_version(eid) == v


def test_c7_gating(full):
    _, out, res, _ = full
    reports = [GateReport.from_dict(r) for p in sorted((out / "gates").glob("*.jsonl")) for r in read_jsonl(p)]
    regressions = [r for r in reports if r.decision and r.holdout_success_candidate < r.holdout_success_incumbent]
    passed = {(p.stem, r.ecm_id, r.candidate_version) for p in (out / "gates").glob("*.jsonl")
              for r in map(GateReport.from_dict, read_jsonl(p)) if r.decision}
    promoted = set()
    for snap in sorted((out / "registry").iterdir()):
        reg = Registry.load(snap)
        promoted |= {(snap.name, e.ecm_id, e.version) for e in reg.events() if e.op == "promote"}
    synthetic_gate_decisions()
    record(7, "gating", {
        "no regression promoted": not regressions,
        "every promotion has a passing report": promoted <= passed,
        "1000 synthetic decisions": True,
    }, f"{len(reports)} gate reports, {sum(r.decision for r in reports)} passed, {len(promoted)} promotions")


def _params(x: float) -> ParamVector:
    return ParamVector(1.0 + x, 0.01 * x, -0.01 * x, 0.3, 10.0)


@settings(max_examples=1000)
@given(st.lists(st.tuples(st.sampled_from(["register", "promote", "rollback"]), st.integers(0, 2),
                          st.floats(-1, 1, allow_nan=False)), max_size=40))
def random_lifecycles(sequence):
    reg = Registry()
    ids = []
    for k in (K.GRASP, K.PLACE, K.INSERT):
        eid, v = reg.create_ecm(k, _params(0), k.value, CreationMode.MANUAL)
        reg.deploy(eid, v)
        ids.append(eid)
    frozen = {(eid, 0): canonical_json(_params(0).to_dict()) for eid in ids}
    for op, which, x in sequence:
        eid = ids[which]
        if op == "register":
            v = reg.register_candidate(eid, _params(x))
            frozen[(eid, v)] = canonical_json(_params(x).to_dict())
            continue
        v = int(abs(x) * 1000) % (reg.latest_version(eid) + 1)
        try:
            if op == "promote":
                reg.promote(eid, v, GateToken(eid, v, "0" * 64))
            else:
                reg.rollback(eid, v)
        except (LifecycleError, GateNotPassed):
            pass
        for key, blob in frozen.items():
            assert canonical_json(reg.get_version(*key).params.to_dict()) == blob
        assert sum(r.lifecycle_state == LifecycleState.DEPLOYED for r in reg.versions(eid)) == 1


def test_c8_rollback_fidelity():
    random_lifecycles()
    record(8, "rollback fidelity", {"1000 random lifecycles": True},
           "historical params byte-identical under promote/rollback interleavings")


def _artefacts(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.name != "timing.json"}


def test_c9_determinism(full, tmp_path):
    plan, out, _, _ = full
    small = ExperimentPlan(master_seed=5, iterations=2, runs_per_iteration=4, safety_iterations=2,
                           holdout_size=5, workers=1)
    run_experiment(small, tmp_path / "a")
    run_experiment(small, tmp_path / "b")
    a, b = _artefacts(tmp_path / "a"), _artefacts(tmp_path / "b")
    run_experiment(plan, tmp_path / "full", experiments=["evolution"])
    same = {name: (tmp_path / "full" / name).read_bytes() == (out / name).read_bytes()
            for name in ("metrics_evolution.csv", "traces/ours.jsonl", "episodes/ours.jsonl", "gates/ours.jsonl")}
    record(9, "determinism", {
        "small plan: all artefacts identical": a == b and len(a) > 0,
        **{f"default evolution: {k}": v for k, v in same.items()},
    }, f"{len(a)} small-plan files compared; default evolution rerun against the session run")


def test_c10_statistics_oracle():
    pairs = json.loads(FIXTURES.read_text())["pairs"]
    worst = 0.0
    for case in pairs:
        t, df, p = welch_t(case["a"], case["b"])
        d = cohens_d(case["a"], case["b"])
        for got, want in ((t, case["t"]), (df, case["df"]), (p, case["p"]), (d, case["d"])):
            worst = max(worst, abs(got - want) / abs(want))
    d_pub = cohens_d_from_summary(91.3, 84.7, 1.4, 4.6, 30, 30)
    record(10, "statistics oracle", {
        "10 fixture pairs": len(pairs) == 10,
        "rel error < 1e-6": worst < 1e-6,
        "summary-statistics d = 1.94 +- 0.02": abs(d_pub - 1.94) <= 0.02,
    }, f"worst relative error {worst:.1e}, d from summary statistics {d_pub:.3f}")


def test_c11_simulator_calibration():
    t = get_task("T1")
    nx, ny = t.objects["cube"]
    jit = np.array([np.subtract(reset(t, derive(3, i)).object_positions["cube"], (nx, ny)) for i in range(10_000)])
    s = reset(t, 0)
    true = np.array(s.object_positions["cube"])
    obs = np.array([observe(s, EnvConfig(), derive(5, i)).object_positions["cube"] for i in range(10_000)])
    sd = (obs - true).std(axis=0, ddof=1)
    reg, _ = registry_with(oracle_params)
    env = handle(EnvConfig())
    rates = []
    for task in TASKS:
        wins = sum(run_governed_episode(task, reg.deployed_records(), make_agent(), env, default_policy(),
                                        derive(21, task.task_id, r))[0].success for r in range(30))
        rates.append(wins / 30)
    ceiling = 100.0 * float(np.mean(rates))
    record(11, "simulator calibration", {
        "jitter within +-5 cm": jit.min() >= -0.05 and jit.max() <= 0.05,
        "jitter mean ~ 0": float(np.abs(jit.mean(axis=0)).max()) < 0.002,
        "obs noise sd 0.01 +- 10%": bool(np.all(np.abs(sd - 0.01) <= 0.001)),
        "oracle ceiling >= 90%": ceiling >= 90.0,
    }, f"jitter range [{jit.min():.3f}, {jit.max():.3f}], obs sd {sd.mean():.4f}, oracle ceiling {ceiling:.1f}%")
