import pytest

from qhq.broker import Broker, BrokerConfig, serve_broker
from qhq.hardware import generate_hex_lattice, line_model

BELL_QASM = """OPENQASM 2.0;
include "qelib1.inc";
qreg q[2];
creg c[2];
h q[0];
cx q[0], q[1];
measure q -> c;
"""


@pytest.fixture(scope="session")
def lattice2():
    return generate_hex_lattice(2)


@pytest.fixture(scope="session")
def lattice4():
    return generate_hex_lattice(4)


@pytest.fixture(scope="session")
def lattice8():
    return generate_hex_lattice(8)


@pytest.fixture(scope="session")
def line5():
    return line_model(5)


@pytest.fixture(scope="session")
def bell_program():
    from qhq.qasm import parse_qasm2

    return parse_qasm2(BELL_QASM)


@pytest.fixture
def broker_factory():
    """Yields a factory for in-process brokers; closes them all afterwards."""
    brokers: list[Broker] = []

    def make(model, **kwargs) -> Broker:
        b = Broker(model, BrokerConfig(**kwargs))
        brokers.append(b)
        return b

    yield make
    for b in brokers:
        b.close()


@pytest.fixture
def broker_server_factory():
    """Yields a factory for TCP broker servers bound to ephemeral ports."""
    servers = []

    def make(model, **kwargs):
        server, _ = serve_broker(("127.0.0.1", 0), model, BrokerConfig(**kwargs))
        servers.append(server)
        return server

    yield make
    for s in servers:
        s.shutdown()
        s.broker.close()
