from pathlib import Path

import pytest

from capevo.cli import main
from capevo.envsim import oracle_params
from capevo.registry import Registry, bootstrap
from capevo.core import CapabilityKind
from capevo.governance import GateToken

SMOKE = """
[experiment]
master_seed = 3
iterations = 2
runs_per_iteration = 3
holdout_size = 5
workers = 1
experiments = ["evolution"]

[learning]
trigger_min_episodes = 5
trigger_window = 5

[safety]
iterations = 1
"""


@pytest.fixture
def config(tmp_path):
    p = tmp_path / "exp.toml"
    p.write_text(SMOKE, encoding="utf-8")
    return p


def files(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.name != "timing.json"}


def test_run_twice_gives_identical_directories(config, tmp_path, capsys):
    assert main(["run", "--config", str(config), "--out", str(tmp_path / "a"), "--seed", "7"]) == 0
    assert main(["run", "--config", str(config), "--out", str(tmp_path / "b"), "--seed", "7"]) == 0
    assert files(tmp_path / "a") == files(tmp_path / "b")
    assert "ours" in capsys.readouterr().out


def test_seed_override_changes_results(config, tmp_path):
    main(["run", "--config", str(config), "--out", str(tmp_path / "a"), "--seed", "7"])
    main(["run", "--config", str(config), "--out", str(tmp_path / "b"), "--seed", "8"])
    assert (tmp_path / "a" / "traces" / "ours.jsonl").read_bytes() != (tmp_path / "b" / "traces" / "ours.jsonl").read_bytes()


def test_missing_config_exits_2(tmp_path, capsys):
    assert main(["run", "--config", str(tmp_path / "nope.toml"), "--out", str(tmp_path / "o")]) == 2
    assert "not found" in capsys.readouterr().err


def test_invalid_config_reports_field(tmp_path, capsys):
    p = tmp_path / "bad.toml"
    p.write_text("[experiment]\nmaster_seed = 1\nwarp = 9\n")
    assert main(["run", "--config", str(p), "--out", str(tmp_path / "o")]) == 2
    assert "experiment.warp" in capsys.readouterr().err


def test_nonempty_out_exits_2(config, tmp_path, capsys):
    out = tmp_path / "o"
    out.mkdir()
    (out / "x").write_text("")
    assert main(["run", "--config", str(config), "--out", str(out)]) == 2
    assert "not empty" in capsys.readouterr().err


def test_safety_selection_emits_only_safety_csv(config, tmp_path):
    out = tmp_path / "o"
    assert main(["run", "--config", str(config), "--out", str(out), "--experiment", "safety"]) == 0
    assert sorted(p.name for p in out.glob("*.csv")) == ["metrics_safety.csv"]
    assert sorted(p.stem for p in (out / "traces").glob("*.jsonl")) == ["safety-off", "safety-on"]


def test_no_enforcement_runs_only_the_unenforced_arm(config, tmp_path):
    out = tmp_path / "o"
    assert main(["run", "--config", str(config), "--out", str(out), "--experiment", "safety", "--no-enforcement"]) == 0
    text = (out / "metrics_safety.csv").read_text()
    assert "safety-off" in text and "safety-on" not in text


def test_out_dir_from_environment(config, tmp_path, monkeypatch):
    monkeypatch.setenv("CAPEVO_OUT", str(tmp_path / "env-out"))
    assert main(["run", "--config", str(config)]) == 0
    assert (tmp_path / "env-out" / "metrics_evolution.csv").is_file()


def test_no_out_dir_at_all(config, monkeypatch, capsys):
    monkeypatch.delenv("CAPEVO_OUT", raising=False)
    assert main(["run", "--config", str(config)]) == 2
    assert "CAPEVO_OUT" in capsys.readouterr().err


def test_inspect_lists_gate_decisions(config, tmp_path, capsys):
    out = tmp_path / "o"
    main(["run", "--config", str(config), "--out", str(out)])
    capsys.readouterr()
    reg = Registry.load(out / "registry" / "ours")
    promoted = [(e.ecm_id, e.version) for e in reg.events() if e.op == "promote"]
    assert promoted, "the smoke config should promote at least one version"
    assert main(["inspect", str(out / "registry" / "ours")]) == 0
    text = capsys.readouterr().out
    blocks, current = {}, None
    for line in text.splitlines():
        if not line.startswith(" "):
            current = line.split()[0]
        blocks.setdefault(current, []).append(line.strip())
    for eid, v in promoted:
        line = next(l for l in blocks[eid] if l.startswith(f"v{v} "))
        assert "gate it" in line and "-> pass" in line


def test_inspect_shows_rollback_events(tmp_path, capsys):
    reg = Registry()
    ids = bootstrap(reg, [(k, oracle_params(k)) for k in CapabilityKind])
    eid = ids[CapabilityKind.GRASP]
    v = reg.register_candidate(eid, oracle_params(CapabilityKind.GRASP).with_numeric([0.6, 0.0, 0.0, 0.3, 12.0]))
    reg.iteration = 4
    reg.promote(eid, v, GateToken(eid, v, "0" * 64))
    reg.iteration = 5
    reg.rollback(eid, 0)
    reg.save(tmp_path / "reg")
    assert main(["inspect", str(tmp_path / "reg"), eid]) == 0
    text = capsys.readouterr().out
    assert f"it5 rollback v0 from v{v}" in text
    assert "it4 promote" in text


def test_inspect_unknown_ecm(tmp_path, capsys):
    reg = Registry()
    bootstrap(reg, [(k, oracle_params(k)) for k in CapabilityKind])
    reg.save(tmp_path / "reg")
    assert main(["inspect", str(tmp_path / "reg"), "warp-9999"]) == 2
    assert "unknown ECM" in capsys.readouterr().err


def test_inspect_missing_snapshot(tmp_path, capsys):
    assert main(["inspect", str(tmp_path / "nothing")]) == 2
    assert "no registry snapshot" in capsys.readouterr().err
