"""Topology schema, generators, and the loss/delay models."""

import json
import math

import pytest

from parqnet.errors import ConfigError, SchemaViolation
from parqnet.topology import (
    ClassicalChannel,
    QuantumChannel,
    RouterSpec,
    SessionSpec,
    Topology,
    distance_to_delay_ps,
    gen_as,
    gen_linear,
    survival_probability,
)


def test_distance_to_delay_rounds_half_up():
    assert distance_to_delay_ps(1000.0) == 5_000_000  # 1 km at 2e8 m/s
    assert distance_to_delay_ps(0.00003) == 0  # 0.15 ps rounds down
    assert distance_to_delay_ps(0.0001) == 1  # 0.5 ps rounds up


def test_survival_probability_closed_form():
    # 50 km at 0.2 dB/km: 10 dB loss, survival 10^-1.
    assert survival_probability(0.2, 50_000.0) == pytest.approx(0.1)
    assert survival_probability(0.0, 10_000.0) == 1.0
    assert survival_probability(0.1, 30_000.0) == pytest.approx(10 ** -0.3)


def test_gen_linear_minimal():
    topo = gen_linear(2)
    assert len(topo.qchannels) == 1
    assert len(topo.cchannels) == 1
    assert len(topo.sessions) == 1
    assert topo.sessions[0].source == topo.routers[0].name
    assert topo.sessions[0].destination == topo.routers[-1].name


def test_gen_linear_paper_scale():
    topo = gen_linear(1024)
    assert len(topo.routers) == 1024
    assert len(topo.qchannels) == 1023


def test_gen_linear_rejects_bad_params():
    with pytest.raises(ConfigError):
        gen_linear(1)
    with pytest.raises(ConfigError):
        gen_linear(4, period_ps=0)


def test_gen_as_single_group_is_star():
    topo = gen_as(1, 4, seed=3)
    assert len(topo.routers) == 4
    assert len(topo.qchannels) == 3  # hub-and-spoke, no backbone
    hub = topo.routers[0].name
    assert all(hub in (ch.src, ch.dst) for ch in topo.qchannels)


def test_gen_as_deterministic_per_seed():
    a = gen_as(4, 4, seed=11, inter_session_density=0.5)
    b = gen_as(4, 4, seed=11, inter_session_density=0.5)
    assert json.dumps(a.to_dict(), sort_keys=True) == \
           json.dumps(b.to_dict(), sort_keys=True)
    c = gen_as(4, 4, seed=12, inter_session_density=0.5)
    assert json.dumps(a.to_dict(), sort_keys=True) != \
           json.dumps(c.to_dict(), sort_keys=True)


def test_gen_as_paper_scale():
    topo = gen_as(32, 32, seed=0)
    assert len(topo.routers) == 1024


def test_gen_as_backbone_connected():
    for seed in range(5):
        topo = gen_as(6, 3, seed=seed)
        topo.validate()  # includes connectivity


def test_roundtrip_json(tmp_path):
    topo = gen_as(3, 3, seed=5, hot_group_sessions=2)
    path = tmp_path / "topo.json"
    topo.save(str(path))
    back = Topology.load(str(path))
    assert back.to_dict() == topo.to_dict()


def test_schema_rejects_malformed(tmp_path):
    topo = gen_linear(3)
    data = topo.to_dict()
    del data["routers"][0]["memories"]
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(data))
    with pytest.raises(SchemaViolation):
        Topology.load(str(path))


def test_validation_catches_structural_errors():
    r = [RouterSpec("a"), RouterSpec("b")]
    q = [QuantumChannel("a", "b", 1000.0, 0.2, 5_000_000)]
    # Self loop
    with pytest.raises(SchemaViolation):
        Topology(r, [QuantumChannel("a", "a", 1.0, 0.2, 5)], [], []).validate()
    # Classical faster than quantum on the parallel link
    with pytest.raises(SchemaViolation):
        Topology(r, q, [ClassicalChannel("a", "b", 4_000_000)], []).validate()
    # Disconnected quantum graph
    r3 = r + [RouterSpec("c")]
    with pytest.raises(SchemaViolation):
        Topology(r3, q, [ClassicalChannel("a", "b", 10_000_000)], []).validate()
    # Session endpoints must exist and differ
    with pytest.raises(SchemaViolation):
        Topology(r, q, [ClassicalChannel("a", "b", 10_000_000)],
                 [SessionSpec("a", "a", 10, 1)]).validate()


def test_shortest_path_deterministic():
    topo = gen_as(4, 4, seed=1)
    src = topo.routers[1].name
    dst = topo.routers[-1].name
    assert topo.shortest_path(src, dst) == topo.shortest_path(src, dst)
    line = gen_linear(5)
    names = line.router_names()
    assert line.shortest_path(names[0], names[4]) == names
