import threading

import pytest

from sketchpriv.service import ApiMode, ApiPolicy, ServiceClient, SketchService, make_server
from sketchpriv.sketches import Algo, Salt

SMALL_PARAMS = {Algo.KMV: 8, Algo.PCSA: 4, Algo.LOGLOG: 4, Algo.HLL: 4}
MID_PARAMS = {Algo.KMV: 64, Algo.PCSA: 16, Algo.LOGLOG: 6, Algo.HLL: 6}


@pytest.fixture
def salt():
    return Salt(b"test-salt-0123456789abcdef")


@pytest.fixture
def other_salt():
    return Salt(b"another-salt-fedcba9876543210")


@pytest.fixture
def make_service(tmp_path, salt):
    def factory(mode=ApiMode.RAW, rounding=1, algo=Algo.HLL, param=15, subdir="store"):
        audit = tmp_path / f"{subdir}-audit.jsonl"
        policy = ApiPolicy(mode, rounding, audit)
        return SketchService(tmp_path / subdir, salt, policy, algo, param)

    return factory


@pytest.fixture
def http_service(make_service):
    """Start an HTTP server in a thread; yields (service, client)."""
    servers = []

    def start(**kwargs):
        service = make_service(**kwargs)
        server = make_server(service)
        t = threading.Thread(target=server.serve_forever, daemon=True)
        t.start()
        servers.append(server)
        host, port = server.server_address[:2]
        return service, ServiceClient(f"http://{host}:{port}")

    yield start
    for s in servers:
        s.shutdown()
        s.server_close()
