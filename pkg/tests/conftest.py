import itertools
import os
import shutil
import socket
import tempfile
import threading

import pytest

from e3dapp import transport
from e3dapp.agent import E3Agent
from e3dapp.sdk import DappCore

_ids = itertools.count()


@pytest.fixture
def ipc_endpoint():
    # short base dir: AF_UNIX paths are limited to ~108 bytes
    d = tempfile.mkdtemp(prefix="e3t")
    yield os.path.join(d, "e3.setup")
    shutil.rmtree(d, ignore_errors=True)


def _free_port_triple() -> int:
    for _ in range(50):
        with socket.socket() as s:
            s.bind(("127.0.0.1", 0))
            base = s.getsockname()[1]
        if base > 65530:
            continue
        ok = True
        for p in (base + 1, base + 2):
            with socket.socket() as t:
                try:
                    t.bind(("127.0.0.1", p))
                except OSError:
                    ok = False
        if ok:
            return base
    raise RuntimeError("no free port triple")


@pytest.fixture
def tcp_endpoint():
    return f"127.0.0.1:{_free_port_triple()}"


@pytest.fixture
def inproc_endpoint():
    return f"test-{os.getpid()}-{next(_ids)}"


@pytest.fixture(params=["inproc", "ipc", "tcp"])
def any_endpoint(request, ipc_endpoint, tcp_endpoint, inproc_endpoint):
    return request.param, {"inproc": inproc_endpoint, "ipc": ipc_endpoint, "tcp": tcp_endpoint}[request.param]


def serve_while(agent: E3Agent, server, fn):
    """Run `fn` on a helper thread while the agent answers setup-channel requests."""
    out, err = [], []

    def runner():
        try:
            out.append(fn())
        except BaseException as exc:  # surfaced below
            err.append(exc)

    t = threading.Thread(target=runner, daemon=True)
    t.start()
    while t.is_alive():
        agent.serve_request(server, 0.01)
    t.join()
    if err:
        raise err[0]
    return out[0]


@pytest.fixture(autouse=True)
def _fresh_core_registry():
    yield
    for core in list(DappCore._registry.values()):
        core.close()
    assert not DappCore._registry
    with transport._hubs_lock:
        transport._hubs.clear()
