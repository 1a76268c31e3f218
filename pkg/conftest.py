import numpy as np
import pytest


@pytest.fixture(autouse=True)
def checkpoint_secret(monkeypatch):
    """Fixed signing key so tests never create a key file."""
    monkeypatch.setenv("QPMIX_CHECKPOINT_SECRET", "test-secret")
    return b"test-secret"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
