import pytest

from h2scope.fixtures import FixtureLoop


@pytest.fixture(scope="session")
def fixture_loop():
    loop = FixtureLoop()
    yield loop
    loop.close()


@pytest.fixture
def serve(fixture_loop):
    """Start a FixtureServer on the shared loop; returns its port."""
    started = []

    def _serve(server):
        fixture_loop.serve(server)
        started.append(server)
        return server.port

    yield _serve
    for server in started:
        fixture_loop.run(server.stop())
