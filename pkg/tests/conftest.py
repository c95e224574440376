"""Pytest configuration and fixtures for inner-envelope tests."""

import os

import numpy as np
import pytest


def pytest_configure(config):
    """Configure pytest with custom markers and settings."""
    config.addinivalue_line(
        "markers", "unit: mark test as a unit test (fast, deterministic)"
    )
    config.addinivalue_line(
        "markers", "slow: mark test as slow (seconds to minutes)"
    )
    config.addinivalue_line(
        "markers", "montecarlo: mark test as a Monte Carlo acceptance check (requires INNENV_RUN_SLOW=1)"
    )


def pytest_collection_modifyitems(config, items):
    """Modify test collection to add markers and skip conditions."""
    run_slow = os.environ.get("INNENV_RUN_SLOW") == "1"
    skip_slow = pytest.mark.skip(reason="Set INNENV_RUN_SLOW=1 to run Monte Carlo checks")

    for item in items:
        if "test_integration" in str(item.fspath):
            item.add_marker(pytest.mark.montecarlo)
            item.add_marker(pytest.mark.slow)
            if not run_slow:
                item.add_marker(skip_slow)
        elif "slow" not in [mark.name for mark in item.iter_markers()]:
            item.add_marker(pytest.mark.unit)


@pytest.fixture(scope="session")
def linear_data():
    """Linear normal design, n=400."""
    from inner_envelope.simulate import Scenario, generate

    return generate(Scenario("linear_normal", 400, seed=11))


@pytest.fixture(scope="session")
def nonlinear_data():
    """Nonlinear heavy-tailed design, n=300."""
    from inner_envelope.simulate import Scenario, generate

    return generate(Scenario("nonlinear_t", 300, seed=12))


@pytest.fixture(scope="session")
def theta_star(linear_data):
    """True theta of the linear design."""
    from inner_envelope.subspace import bases_to_theta

    return bases_to_theta(linear_data.truth)


@pytest.fixture
def rng():
    """Fresh seeded generator per test."""
    return np.random.default_rng(20240601)


@pytest.fixture
def environment_backup():
    """Backup and restore environment variables."""
    original_env = os.environ.copy()
    yield
    os.environ.clear()
    os.environ.update(original_env)
