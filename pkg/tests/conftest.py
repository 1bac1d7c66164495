from pathlib import Path

import pytest
from click.testing import CliRunner
from fastapi.testclient import TestClient

from behavior_tree import Blackboard
from registry_server import create_app
from safety_nodes import builtin_specs
from tools.registry_client import RegistryClient
from tools.registry_store import ShadowRegistry

ROOT = Path(__file__).resolve().parent.parent
SCENARIOS = ROOT / "scenarios"
BUILTIN_SPEC_DIR = ROOT / "tools" / "builtin_specs"


class AsgiSession:
    """requests-style session that forwards to the in-process test client."""

    def __init__(self, client: TestClient):
        self.client = client

    def request(self, method, url, data=None, headers=None, params=None, timeout=None):
        return self.client.request(method, url, content=data, headers=headers, params=params)


@pytest.fixture
def specs():
    return builtin_specs()


@pytest.fixture
def blackboard():
    return Blackboard()


@pytest.fixture
def store(tmp_path):
    return ShadowRegistry(tmp_path / "registry")


@pytest.fixture
def http(store):
    with TestClient(create_app(store)) as client:
        yield client


@pytest.fixture
def session(http):
    return AsgiSession(http)


@pytest.fixture
def client(session):
    return RegistryClient("http://testserver", session=session)


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def scenarios_dir():
    return SCENARIOS


@pytest.fixture
def spec_path():
    return lambda name: BUILTIN_SPEC_DIR / f"{name}.json"
