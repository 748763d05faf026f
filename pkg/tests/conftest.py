import dataclasses

import pytest

from routefp.harness import ScenarioConfig, build_victim, victim_probe_suite


@pytest.fixture(scope="session")
def default_config():
    return ScenarioConfig()


@pytest.fixture(scope="session")
def victim(default_config):
    # built once; tests must not mutate it
    return build_victim(default_config)


@pytest.fixture(scope="session")
def probes(victim, default_config):
    return victim_probe_suite(victim, default_config.samples_per_task)


@pytest.fixture(scope="session")
def small_config():
    """Cheaper victim for tests that rebuild models repeatedly."""
    return dataclasses.replace(
        ScenarioConfig(),
        n_experts=3,
        reserve_tasks=2,
        expert_steps=300,
        warmup_steps=60,
        router_steps=150,
        samples_per_task=64,
    )


@pytest.fixture(scope="session")
def small_victim(small_config):
    return build_victim(small_config)
