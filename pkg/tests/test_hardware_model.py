import math
from dataclasses import replace
from datetime import datetime, timezone

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qhq.hardware import (
    CalibrationSet,
    CouplingEdge,
    HardwareModel,
    ModelError,
    ModelParseError,
    ModelValidationError,
    QubitSpec,
    bundled_model,
    generate_hex_lattice,
    hex_lattice_edges,
    line_model,
    load_model,
    model_from_doc,
    model_to_doc,
    neighbors,
    nominal_calibration,
    save_model,
    validate_model,
    with_calibration,
)


def bfs_reach(n, edges):
    """Independent connectivity oracle."""
    adj = {i: [] for i in range(n)}
    for a, b in edges:
        adj[a].append(b)
        adj[b].append(a)
    seen = {0}
    stack = [0]
    while stack:
        u = stack.pop()
        for v in adj[u]:
            if v not in seen:
                seen.add(v)
                stack.append(v)
    return seen


class TestLattice:
    def test_two_qubits_single_edge(self):
        m = generate_hex_lattice(2)
        assert m.n_qubits == 2
        assert [(e.a, e.b) for e in m.edges] == [(0, 1)]

    @pytest.mark.parametrize("n", list(range(2, 33)))
    def test_connected_and_degree_bounded(self, n):
        edges = hex_lattice_edges(n)
        assert bfs_reach(n, edges) == set(range(n))
        deg = {}
        for a, b in edges:
            deg[a] = deg.get(a, 0) + 1
            deg[b] = deg.get(b, 0) + 1
        assert max(deg.values()) <= 3
        # no duplicates, all normalized
        assert len(set(edges)) == len(edges)
        assert all(a < b for a, b in edges)

    def test_deterministic(self):
        assert generate_hex_lattice(17) == generate_hex_lattice(17)
        assert hex_lattice_edges(32) == hex_lattice_edges(32)

    def test_frequencies_within_band_and_distinct(self):
        m = generate_hex_lattice(32)
        freqs = [q.frequency for q in m.qubits]
        assert all(4e9 <= f <= 6e9 for f in freqs)
        assert len(set(freqs)) == len(freqs)

    def test_validates(self):
        rep = validate_model(generate_hex_lattice(32))
        assert rep.ok, [str(i) for i in rep.issues]


class TestNeighbors:
    def test_symmetric_exhaustive(self, lattice8):
        for q in range(lattice8.n_qubits):
            for v in neighbors(lattice8, q):
                assert q in neighbors(lattice8, v)

    def test_sorted(self, lattice8):
        for q in range(lattice8.n_qubits):
            ns = neighbors(lattice8, q)
            assert list(ns) == sorted(ns)

    def test_out_of_range(self, lattice4):
        with pytest.raises(ModelError):
            neighbors(lattice4, 4)
        with pytest.raises(ModelError):
            neighbors(lattice4, -1)


class TestEdges:
    def test_normalized_on_construction(self):
        e = CouplingEdge(5, 2, two_qubit_fidelity=0.99, gate_duration=3e-7)
        assert (e.a, e.b) == (2, 5)

    def test_edge_map_has_edge(self, lattice4):
        em = lattice4.edge_map()
        for (a, b), e in em.items():
            assert (e.a, e.b) == (a, b)
            assert lattice4.has_edge(a, b) and lattice4.has_edge(b, a)
        assert not lattice4.has_edge(0, 3) or (0, 3) in em


class TestValidation:
    def test_t2_over_twice_t1_flagged_with_path(self, lattice4):
        cal = lattice4.calibration
        bad = replace(cal, t2=(3 * cal.t1[0],) + cal.t2[1:])
        m = with_calibration(lattice4, bad)
        rep = validate_model(m)
        assert not rep.ok
        assert any(i.path == "qubits[0].t2" for i in rep.errors())

    def test_self_loop_rejected(self, lattice4):
        e = CouplingEdge.__new__(CouplingEdge)
        object.__setattr__(e, "a", 1)
        object.__setattr__(e, "b", 1)
        object.__setattr__(e, "two_qubit_fidelity", 0.99)
        object.__setattr__(e, "gate_duration", 3e-7)
        m = replace(lattice4, edges=lattice4.edges + (e,))
        assert not validate_model(m).ok

    def test_out_of_range_edge_rejected(self, lattice4):
        e = CouplingEdge(0, 9, two_qubit_fidelity=0.99, gate_duration=3e-7)
        m = replace(lattice4, edges=lattice4.edges + (e,))
        assert not validate_model(m).ok

    def test_duplicate_edge_rejected(self, lattice4):
        m = replace(lattice4, edges=lattice4.edges + (lattice4.edges[0],))
        assert not validate_model(m).ok

    def test_disconnected_rejected(self):
        m = line_model(4)
        m2 = replace(m, edges=m.edges[:1] + m.edges[2:])  # cut 1-2
        assert any("reach" in str(i).lower() or "connect" in str(i).lower()
                   for i in validate_model(m2).errors())

    def test_negative_timing_rejected(self, lattice4):
        m = replace(lattice4, single_qubit_gate_duration=-1e-9)
        assert not validate_model(m).ok

    def test_unknown_basis_gate_rejected(self, lattice4):
        m = replace(lattice4, basis_gates=frozenset({"rz", "sx", "zz"}))
        assert not validate_model(m).ok

    def test_band_enforcement_is_opt_in(self, lattice4):
        q0 = replace(lattice4.qubits[0], frequency=7e9)
        loose = replace(
            lattice4, qubits=(q0,) + lattice4.qubits[1:], enforce_bands=False
        )
        assert validate_model(loose).ok
        strict = replace(loose, enforce_bands=True)
        assert not validate_model(strict).ok


class TestSerialization:
    def test_round_trip_lattices(self):
        for n in (2, 7, 32):
            m = generate_hex_lattice(n)
            assert model_from_doc(model_to_doc(m)) == m
            assert load_model(save_model(m)) == m

    def test_canonical_bytes_stable(self, lattice8):
        assert save_model(lattice8) == save_model(lattice8)
        text = save_model(lattice8).decode("utf-8")
        assert text.endswith("\n")

    @settings(max_examples=25, deadline=None)
    @given(n=st.integers(min_value=1, max_value=12), bump=st.integers(0, 5))
    def test_round_trip_property(self, n, bump):
        m = line_model(n) if n == 1 else generate_hex_lattice(n)
        for _ in range(bump):
            m = with_calibration(m, m.calibration, bump_version=True)
        assert load_model(save_model(m)) == m

    def test_bad_json_raises_parse_error(self):
        with pytest.raises(ModelParseError):
            load_model(b"{not json")

    def test_invalid_doc_raises_validation_error(self, lattice4):
        doc = model_to_doc(lattice4)
        doc["qubits"][0]["t1"] = -1.0
        with pytest.raises(ModelValidationError):
            model_from_doc(doc)

    def test_doc_top_level_keys(self, lattice4):
        doc = model_to_doc(lattice4)
        assert set(doc) == {
            "name", "version", "basis_gates", "enforce_bands",
            "qubits", "edges", "timing", "calibration",
        }


class TestBundledModel:
    def test_qmio32_loads(self):
        m = bundled_model("qmio32")
        assert m.name == "qmio32"
        assert m.n_qubits == 32
        assert m.version == 1
        assert validate_model(m).ok

    def test_matches_generator(self):
        assert bundled_model("qmio32") == generate_hex_lattice(32, name="qmio32")

    def test_unknown_name(self):
        with pytest.raises(ModelError):
            bundled_model("nope")


class TestCalibrationSet:
    def test_nominal_shapes(self, lattice8):
        cal = nominal_calibration(8, [(e.a, e.b) for e in lattice8.edges])
        assert cal.n_qubits() == 8
        assert len(cal.two_qubit_fidelity) == len(lattice8.edges)

    def test_with_calibration_syncs_and_bumps(self, lattice4):
        cal = lattice4.calibration
        ts = datetime(2025, 3, 3, tzinfo=timezone.utc)
        new = replace(
            cal,
            timestamp=ts,
            t1=tuple(v * 0.9 for v in cal.t1),
        )
        m2 = with_calibration(lattice4, new, bump_version=True)
        assert m2.version == lattice4.version + 1
        assert m2.calibration.timestamp == ts
        assert math.isclose(m2.qubits[0].t1, cal.t1[0] * 0.9)
        m3 = with_calibration(lattice4, new, bump_version=False)
        assert m3.version == lattice4.version


class TestLineModel:
    def test_single_qubit(self):
        m = line_model(1)
        assert m.n_qubits == 1 and m.edges == ()
        assert validate_model(m).ok

    def test_chain_edges(self):
        m = line_model(5)
        assert [(e.a, e.b) for e in m.edges] == [(0, 1), (1, 2), (2, 3), (3, 4)]


class TestQubitSpec:
    def test_fields(self, lattice4):
        q = lattice4.qubits[0]
        assert isinstance(q, QubitSpec)
        assert q.index == 0
        assert q.t1 > 0 and q.t2 <= 2 * q.t1
        assert 0 < q.readout_fidelity <= 1


def test_model_is_frozen(lattice4):
    with pytest.raises(AttributeError):
        lattice4.name = "other"


def test_calibration_length_mismatch_detected(lattice4):
    cal = lattice4.calibration
    short = CalibrationSet(
        timestamp=cal.timestamp,
        t2_timestamp=cal.t2_timestamp,
        t1=cal.t1[:-1],
        t2=cal.t2[:-1],
        readout_fidelity=cal.readout_fidelity[:-1],
        single_qubit_fidelity=cal.single_qubit_fidelity[:-1],
        two_qubit_fidelity=cal.two_qubit_fidelity,
        mix_chamber_temperature=cal.mix_chamber_temperature,
    )
    with pytest.raises(ModelError):
        with_calibration(lattice4, short)
