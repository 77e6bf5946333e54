import pytest

from soapauth.crypto import RandomSource, generate_signing_key
from soapauth.harness.world import World, WorldConfig

ACCEPTANCE: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE, key=lambda k: int(k)):
            terminalreporter.write_line(ACCEPTANCE[key])


@pytest.fixture(scope="session")
def rsa_key():
    return generate_signing_key("RS256", key_id="k1", source=RandomSource(101))


@pytest.fixture(scope="session")
def ed_key():
    return generate_signing_key("EdDSA", key_id="e1", source=RandomSource(102))


@pytest.fixture
def world():
    """Two IdPs, alice and bob, fast hash profile."""
    w = World(WorldConfig(hash_profile="test"), seed=5)
    w.add_agent("alice")
    w.add_agent("bob")
    return w
