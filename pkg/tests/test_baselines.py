import math

import pytest

from capevo.baselines import (
    Method,
    MethodConfig,
    MutableAgent,
    am_update,
    frozen_image,
    modality_label,
    policy_drift,
)
from capevo.core import CapabilityKind
from capevo.driver import make_agent
from capevo.errors import ZeroNorm
from capevo.learning import ALL_MODALITIES, FailureSummary, Modality

K = CapabilityKind


def bias_vector(agent: MutableAgent) -> list[float]:
    return [v for _, b in agent.bias for v in b]


def test_noise_only_update_is_bounded():
    agent = MutableAgent.from_identity(make_agent())
    sigma = 0.005
    dim = 2 * len(K)
    bound = 3 * sigma * math.sqrt(dim)
    norms = [math.hypot(*bias_vector(am_update(agent, {}, seed, sigma=sigma))) for seed in range(500)]
    assert sum(n <= bound for n in norms) / len(norms) >= 0.99
    assert all(n > 0 for n in norms)


def test_bias_moves_against_systematic_error():
    agent = MutableAgent.from_identity(make_agent())
    s = FailureSummary(30, {"Grasp": 5}, mean_error_vec=(0.02, 0.0))
    out = am_update(agent, {K.GRASP: s}, 1, step=0.01, sigma=0.0)
    assert out.biases()[K.GRASP] == pytest.approx((-0.01, 0.0))
    assert out.biases()[K.PLACE] == (0.0, 0.0)


def test_update_only_touches_the_agent():
    agent = MutableAgent.from_identity(make_agent())
    out = am_update(agent, {}, 3)
    assert out.planner == agent.planner and out.skip == agent.skip
    assert policy_drift(agent.numeric_image(), out.numeric_image()) > 0


def test_drift_examples():
    assert policy_drift([3.0, 4.0], [3.0, 4.0]) == 0.0
    assert policy_drift([3.0, 4.0], [3.3, 4.4]) == pytest.approx(0.1)
    with pytest.raises(ZeroNorm):
        policy_drift([0.0, 0.0], [0.0, 1.0])
    with pytest.raises(ValueError):
        policy_drift([1.0], [1.0, 2.0])


def test_fixed_agent_image_matches_mutable_layout():
    agent = make_agent()
    assert frozen_image(agent) == MutableAgent.from_identity(agent).numeric_image()
    assert policy_drift(frozen_image(agent), frozen_image(make_agent())) == 0.0


def test_method_config():
    assert MethodConfig(Method.STATIC_ECM).label == "StaticEcm"
    assert MethodConfig(Method.CAPABILITY_EVOLUTION, {Modality.SYNTHESIS, Modality.RL}).label == "rl+synthesis"
    assert modality_label(ALL_MODALITIES) == "rl+imitation+synthesis"
    with pytest.raises(ValueError):
        MethodConfig(Method.CAPABILITY_EVOLUTION, frozenset())
    with pytest.raises(ValueError):
        MethodConfig(Method.AGENT_MODIFICATION, am_sigma=-1)
