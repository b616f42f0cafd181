"""
Shared fixtures for the test suite.
In-memory SQLite run registry + tiny BLOBS-3 configs.
"""
import numpy as np
import pytest
from sqlalchemy import create_engine
from sqlalchemy.orm import sessionmaker

from app import main
from app.database import Base
from app import models  # noqa: F401  (registers the runs table)
from app.schemas import TrainConfig


# --- In-memory DB for tests ---
SQLALCHEMY_DATABASE_URL = "sqlite:///file::memory:?cache=shared"

engine = create_engine(
    SQLALCHEMY_DATABASE_URL,
    connect_args={"check_same_thread": False},
)
TestingSessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=engine)


def override_get_db():
    db = TestingSessionLocal()
    try:
        yield db
    finally:
        db.close()


# Override the registry dependency across the entire CLI
main.dependency_overrides[main.get_db] = override_get_db


# --- Slow experiments ---
def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run the full DIGITS-5 experiments")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: full-scale experiment, skipped without --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(autouse=True)
def setup_db():
    """Creates tables before each test, removes them after."""
    Base.metadata.create_all(bind=engine)
    yield
    Base.metadata.drop_all(bind=engine)


@pytest.fixture
def db():
    """DB session for tests that need direct access."""
    db = TestingSessionLocal()
    try:
        yield db
    finally:
        db.close()


TINY = {
    "suite": "blobs3",
    "variant": "TCL",
    "n_per_domain": 64,
    "n_test": 40,
    "batch_size": 16,
    "memory_size": 32,
    "epochs": 2,
    "warmup_epochs": 1,
    "hidden": [16],
    "proj_dim": 8,
    "kmeans_iters": 3,
    "log_every": 2,
}


@pytest.fixture
def tiny_values():
    """Raw config values for a seconds-scale BLOBS-3 run."""
    return dict(TINY)


@pytest.fixture
def tiny_config(tiny_values):
    return TrainConfig(**tiny_values)


@pytest.fixture
def tiny_config_file(tmp_path, tiny_values):
    path = tmp_path / "tiny.conf"
    lines = [f"{k} = {', '.join(map(str, v)) if isinstance(v, list) else v}" for k, v in tiny_values.items()]
    path.write_text("# tiny run\n" + "\n".join(lines) + "\n")
    return str(path)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def unit_rows(rng, n, d):
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)
