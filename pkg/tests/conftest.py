import pytest
from hypothesis import HealthCheck, settings

from capevo.config import ExperimentPlan
from capevo.core import CapabilityKind
from capevo.driver import make_agent
from capevo.envsim import TASKS, EnvConfig, initial_params, oracle_params
from capevo.governance import EnvHandle, default_policy
from capevo.registry import Registry, bootstrap

settings.register_profile("capevo", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("capevo")


def quiet_env(**kw) -> EnvConfig:
    """No jitter, no observation or control noise, no actuation failures."""
    base = dict(position_jitter=0.0, obs_noise_sigma=0.0, actuation_fail_prob=0.0, ctrl_noise=0.0)
    base.update(kw)
    return EnvConfig(**base)


def handle(cfg: EnvConfig | None = None) -> EnvHandle:
    return EnvHandle(cfg or EnvConfig(), {t.task_id: t for t in TASKS})


def registry_with(params_fn) -> tuple[Registry, dict]:
    reg = Registry()
    ids = bootstrap(reg, [(k, params_fn(k)) for k in CapabilityKind])
    return reg, ids


@pytest.fixture
def agent():
    return make_agent()


@pytest.fixture
def policy():
    return default_policy()


@pytest.fixture
def oracle_registry():
    return registry_with(oracle_params)


@pytest.fixture
def initial_registry():
    return registry_with(initial_params)


@pytest.fixture
def tiny_plan():
    return ExperimentPlan(master_seed=11, iterations=2, runs_per_iteration=3, safety_iterations=2,
                          holdout_size=5, workers=1)


# -- acceptance report -------------------------------------------------------------

# criterion id -> (passed, title, detail); filled by tests/test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE):
        ok, title, detail = ACCEPTANCE[cid]
        terminalreporter.write_line(f"C{cid:<2} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
