import io
import json
import threading
import time

import pytest

from qhq.broker import Broker, BrokerClient, BrokerConfig, BrokerError
from qhq.protocol import (
    Envelope,
    ErrorCode,
    JobSpec,
    MsgType,
    NULL_JOB_ID,
    new_job_id,
)
from qhq.qasm import parse_qasm2
from qhq.transpile import artifact_to_doc, compile_program

from conftest import BELL_QASM

SLOW_QASM = (
    'OPENQASM 2.0;\ninclude "qelib1.inc";\n'
    "qreg q[1];\ncreg c[1];\nx q[0];\nmeasure q[0] -> c[0];\n"
)


def text_job(shots=100, **kw):
    return JobSpec(shots=shots, ir_text=BELL_QASM, **kw)


def slow_job(shots=1, period=0.05):
    # Echo engine honors wall-time; statevector does not sleep. To make a
    # job take real time on the executor we use shots * period accounting
    # only for assertions, not actual sleeping, so "slow" here means
    # distinguishable via event ordering instead.
    return JobSpec(shots=shots, ir_text=SLOW_QASM, repetition_period=period)


class TestLifecycle:
    def test_submit_and_wait_result(self, lattice4, broker_factory):
        b = broker_factory(lattice4)
        env = b.submit_and_wait(new_job_id(), text_job(shots=50))
        assert env.msg_type == MsgType.RESULT
        assert env.payload["status"] == "done"
        counts = env.payload["result"]["counts"]
        assert sum(counts.values()) == 50
        assert set(counts) <= {"00", "11"}

    def test_timings_present_and_ordered(self, lattice4, broker_factory):
        b = broker_factory(lattice4)
        env = b.submit_and_wait(new_job_id(), text_job())
        t = env.payload["timings"]
        assert set(t) == {"queue_wait", "compile", "execute", "total_processing"}
        assert t["queue_wait"] >= 0
        assert t["total_processing"] >= t["compile"] + t["execute"]

    def test_result_echoes_job_id(self, lattice4, broker_factory):
        b = broker_factory(lattice4)
        jid = new_job_id()
        env = b.submit_and_wait(jid, text_job())
        assert env.job_id == jid

    def test_duplicate_active_id_rejected(self, lattice4, broker_factory):
        b = broker_factory(lattice4)
        jid = new_job_id()
        b.begin_calibration()  # park executor so the first job stays queued
        b.submit(jid, text_job())
        with pytest.raises(BrokerError, match="already active"):
            b.submit(jid, text_job())
        b.end_calibration()

    def test_id_reusable_after_done(self, lattice4, broker_factory):
        b = broker_factory(lattice4)
        jid = new_job_id()
        b.submit_and_wait(jid, text_job())
        env = b.submit_and_wait(jid, text_job())
        assert env.msg_type == MsgType.RESULT

    def test_submit_after_close(self, lattice4):
        b = Broker(lattice4, BrokerConfig())
        b.close()
        with pytest.raises(BrokerError, match="shutting down"):
            b.submit(new_job_id(), text_job())


class TestFifo:
    def test_jobs_run_in_submission_order(self, lattice4, broker_factory):
        b = broker_factory(lattice4)
        b.begin_calibration()
        recs = [b.submit(new_job_id(), text_job(shots=5)) for _ in range(6)]
        b.end_calibration()
        for rec in recs:
            b.wait(rec, timeout=10)
        started = [
            (e["job_id"], e["ts"])
            for e in b.event_log
            if e["state"] == "executing"
        ]
        assert [jid for jid, _ in started] == [r.job_id.hex() for r in recs]

    def test_queue_depth_limit(self, lattice4, broker_factory):
        b = broker_factory(lattice4, max_queue_depth=3)
        b.begin_calibration()
        for _ in range(3):
            b.submit(new_job_id(), text_job())
        with pytest.raises(BrokerError, match="full"):
            b.submit(new_job_id(), text_job())
        env = b.submit_and_wait(new_job_id(), text_job())
        assert env.msg_type == MsgType.ERROR
        assert env.payload["code"] == ErrorCode.QUEUE_FULL
        b.end_calibration()

    def test_queue_position_in_status(self, lattice4, broker_factory):
        b = broker_factory(lattice4)
        b.begin_calibration()
        for _ in range(4):
            b.submit(new_job_id(), text_job())
        doc = b.status_doc()
        assert doc["queue_depth"] == 4
        assert doc["queue_state"] == "queued-behind-calibration"
        b.end_calibration()


class TestCalibrationWindow:
    def test_jobs_queue_during_window(self, lattice4, broker_factory):
        b = broker_factory(lattice4)
        b.begin_calibration()
        rec = b.submit(new_job_id(), text_job(shots=5))
        time.sleep(0.15)
        assert rec.state == "queued"
        b.end_calibration()
        env = b.wait(rec, timeout=10)
        assert env.msg_type == MsgType.RESULT

    def test_status_reflects_window(self, lattice4, broker_factory):
        b = broker_factory(lattice4)
        assert b.status_doc()["calibrating"] is False
        b.begin_calibration()
        assert b.status_doc()["calibrating"] is True
        b.end_calibration()
        assert b.status_doc()["calibrating"] is False

    def test_running_alternates_with_windows(self, lattice4, broker_factory):
        b = broker_factory(lattice4)
        for _ in range(3):
            b.begin_calibration()
            rec = b.submit(new_job_id(), text_job(shots=2))
            b.end_calibration()
            env = b.wait(rec, timeout=10)
            assert env.msg_type == MsgType.RESULT


class TestCancelAndTimeout:
    def test_cancel_queued(self, lattice4, broker_factory):
        b = broker_factory(lattice4)
        b.begin_calibration()
        rec = b.submit(new_job_id(), text_job())
        assert b.cancel(rec.job_id) is True
        b.end_calibration()
        env = b.wait(rec, timeout=5)
        assert env.msg_type == MsgType.ERROR
        assert env.payload["code"] == ErrorCode.CANCELLED

    def test_cancel_unknown(self, lattice4, broker_factory):
        b = broker_factory(lattice4)
        assert b.cancel(new_job_id()) is False

    def test_cancel_finished(self, lattice4, broker_factory):
        b = broker_factory(lattice4)
        jid = new_job_id()
        b.submit_and_wait(jid, text_job())
        assert b.cancel(jid) is False

    def test_wait_timeout_returns_error(self, lattice4, broker_factory):
        b = broker_factory(lattice4)
        b.begin_calibration()  # job can never start
        rec = b.submit(new_job_id(), text_job())
        env = b.wait(rec, timeout=0.1)
        assert env.msg_type == MsgType.ERROR
        assert env.payload["code"] == ErrorCode.TIMEOUT
        b.end_calibration()


class TestErrorMapping:
    def check(self, broker, spec_kwargs, code, fragment=None):
        env = broker.submit_and_wait(new_job_id(), JobSpec(**spec_kwargs))
        assert env.msg_type == MsgType.ERROR
        assert env.payload["code"] == code
        if fragment:
            assert fragment in env.payload["message"]
        return env

    def test_parse_error(self, lattice4, broker_factory):
        b = broker_factory(lattice4)
        env = self.check(b, dict(shots=1, ir_text="OPENQASM 9;"), ErrorCode.PARSE)
        assert "line 1" in env.payload["message"]

    def test_validation_error(self, lattice4, broker_factory):
        b = broker_factory(lattice4)
        src = 'OPENQASM 2.0;\ninclude "qelib1.inc";\nqreg q[40];\nh q;\n'
        self.check(b, dict(shots=1, ir_text=src), ErrorCode.VALIDATION)

    def test_bind_error(self, lattice4, broker_factory):
        b = broker_factory(lattice4)
        src = (
            'OPENQASM 2.0;\ninclude "qelib1.inc";\n// @param t\n'
            "qreg q[1];\ncreg c[1];\nrz(t) q[0];\nmeasure q[0] -> c[0];\n"
        )
        self.check(b, dict(shots=1, ir_text=src), ErrorCode.BIND, "t")

    def test_stray_parameter_values(self, lattice4, broker_factory):
        b = broker_factory(lattice4)
        self.check(
            b,
            dict(shots=1, ir_text=BELL_QASM, parameter_values={"t": 1.0}),
            ErrorCode.BIND,
        )

    def test_corrupt_artifact(self, lattice4, broker_factory):
        b = broker_factory(lattice4)
        self.check(
            b,
            dict(shots=1, aot_artifact={"not": "an artifact"}),
            ErrorCode.BAD_JOBSPEC,
        )

    def test_engine_capacity_error(self, lattice8, broker_factory):
        b = broker_factory(lattice8, max_qubits=2)
        src = (
            'OPENQASM 2.0;\ninclude "qelib1.inc";\n'
            "qreg q[3];\ncreg c[3];\nh q;\nmeasure q -> c;\n"
        )
        self.check(b, dict(shots=1, ir_text=src), ErrorCode.ENGINE)


class TestAotPath:
    def make_artifact(self, model, src=BELL_QASM):
        return compile_program(parse_qasm2(src), model, seed=0)

    def test_aot_submission(self, lattice4, broker_factory):
        b = broker_factory(lattice4)
        art = self.make_artifact(lattice4)
        spec = JobSpec(shots=20, aot_artifact=artifact_to_doc(art))
        env = b.submit_and_wait(new_job_id(), spec)
        assert env.msg_type == MsgType.RESULT
        # artifact decode/verify is the whole compile phase: near-free
        assert env.payload["timings"]["compile"] < 0.01

    def test_reject_uncompiled_mode(self, lattice4, broker_factory):
        b = broker_factory(lattice4, reject_uncompiled=True)
        env = b.submit_and_wait(new_job_id(), text_job())
        assert env.msg_type == MsgType.ERROR
        assert env.payload["code"] == ErrorCode.UNCOMPILED
        art = self.make_artifact(lattice4)
        ok = b.submit_and_wait(
            new_job_id(), JobSpec(shots=5, aot_artifact=artifact_to_doc(art))
        )
        assert ok.msg_type == MsgType.RESULT

    def test_stale_warn_policy(self, lattice4, broker_factory):
        from dataclasses import replace

        b = broker_factory(lattice4, stale_artifact_policy="warn")
        art = self.make_artifact(lattice4)
        b.set_model(replace(lattice4, version=lattice4.version + 1))
        env = b.submit_and_wait(
            new_job_id(), JobSpec(shots=5, aot_artifact=artifact_to_doc(art))
        )
        assert env.msg_type == MsgType.RESULT
        assert any("version" in w for w in env.payload["warnings"])

    def test_stale_reject_policy(self, lattice4, broker_factory):
        from dataclasses import replace

        b = broker_factory(lattice4, stale_artifact_policy="reject")
        art = self.make_artifact(lattice4)
        b.set_model(replace(lattice4, version=lattice4.version + 1))
        env = b.submit_and_wait(
            new_job_id(), JobSpec(shots=5, aot_artifact=artifact_to_doc(art))
        )
        assert env.msg_type == MsgType.ERROR
        assert env.payload["code"] == ErrorCode.STALE_ARTIFACT

    def test_fresh_artifact_no_warnings(self, lattice4, broker_factory):
        b = broker_factory(lattice4)
        art = self.make_artifact(lattice4)
        env = b.submit_and_wait(
            new_job_id(), JobSpec(shots=5, aot_artifact=artifact_to_doc(art))
        )
        assert env.payload["warnings"] == []

    def test_aot_with_binding(self, lattice4, broker_factory):
        src = (
            'OPENQASM 2.0;\ninclude "qelib1.inc";\n// @param theta\n'
            "qreg q[1];\ncreg c[1];\nsx q[0];\nsx q[0];\nsx q[0];\n"
            "rz(theta) q[0];\nsx q[0];\nmeasure q[0] -> c[0];\n"
        )
        b = broker_factory(lattice4, seed=0)
        art = self.make_artifact(lattice4, src)
        import math

        spec = JobSpec(
            shots=4000,
            aot_artifact=artifact_to_doc(art),
            parameter_values={"theta": math.pi},
        )
        env = b.submit_and_wait(new_job_id(), spec)
        assert env.msg_type == MsgType.RESULT
        counts = env.payload["result"]["counts"]
        # <Z> = cos(pi) = -1: all shots land on "1"
        assert counts == {"1": 4000}


class TestEventLog:
    def test_full_history_per_job(self, lattice4, broker_factory):
        b = broker_factory(lattice4)
        jid = new_job_id()
        b.submit_and_wait(jid, text_job())
        states = [e["state"] for e in b.event_log if e["job_id"] == jid.hex()]
        assert states == ["queued", "compiling", "executing", "done"]

    def test_export_jsonl(self, lattice4, broker_factory):
        b = broker_factory(lattice4)
        b.submit_and_wait(new_job_id(), text_job())
        buf = io.StringIO()
        n = b.export_event_log(buf)
        lines = buf.getvalue().strip().split("\n")
        assert len(lines) == n >= 3
        for line in lines:
            entry = json.loads(line)
            assert {"ts", "job_id", "state", "note"} <= set(entry)

    def test_counters(self, lattice4, broker_factory):
        b = broker_factory(lattice4)
        b.submit_and_wait(new_job_id(), text_job())
        b.submit_and_wait(new_job_id(), JobSpec(shots=1, ir_text="bad"))
        doc = b.status_doc()
        assert doc["jobs_completed"] == 1
        assert doc["jobs_failed"] == 1


class TestEngineChoice:
    def test_echo_engine(self, lattice4, broker_factory):
        b = broker_factory(lattice4, engine_kind="echo")
        env = b.submit_and_wait(new_job_id(), text_job(shots=9))
        assert env.payload["result"]["counts"] == {"00": 9}
        assert env.payload["result"]["engine"] == "echo"

    def test_broker_seed_flows_to_engine(self, lattice4):
        b1 = Broker(lattice4, BrokerConfig(seed=5))
        b2 = Broker(lattice4, BrokerConfig(seed=5))
        try:
            e1 = b1.submit_and_wait(new_job_id(), text_job(shots=500))
            e2 = b2.submit_and_wait(new_job_id(), text_job(shots=500))
            assert e1.payload["result"]["counts"] == e2.payload["result"]["counts"]
        finally:
            b1.close()
            b2.close()


class TestConfigValidation:
    def test_bad_engine_kind(self, lattice4):
        with pytest.raises(Exception):
            Broker(lattice4, BrokerConfig(engine_kind="imaginary"))

    def test_bad_policy(self):
        with pytest.raises(Exception):
            BrokerConfig(stale_artifact_policy="ignore")

    def test_bad_depth(self):
        with pytest.raises(Exception):
            BrokerConfig(max_queue_depth=0)


class TestTcp:
    def test_ping_pong(self, lattice4, broker_server_factory):
        server = broker_server_factory(lattice4)
        with BrokerClient("127.0.0.1", server.port) as client:
            env = client.request(Envelope(MsgType.PING, NULL_JOB_ID, None))
            assert env.msg_type == MsgType.PONG

    def test_submit_over_tcp(self, lattice4, broker_server_factory):
        server = broker_server_factory(lattice4)
        with BrokerClient("127.0.0.1", server.port) as client:
            jid = new_job_id()
            from qhq.protocol import jobspec_to_doc

            env = client.request(
                Envelope(MsgType.SUBMIT, jid, jobspec_to_doc(text_job(shots=30)))
            )
            assert env.msg_type == MsgType.RESULT
            assert env.job_id == jid
            assert sum(env.payload["result"]["counts"].values()) == 30

    def test_status_over_tcp(self, lattice4, broker_server_factory):
        server = broker_server_factory(lattice4)
        with BrokerClient("127.0.0.1", server.port) as client:
            env = client.request(Envelope(MsgType.STATUS_REQ, NULL_JOB_ID, None))
            assert env.msg_type == MsgType.STATUS_REP
            assert env.payload["model"] == lattice4.name

    def test_concurrent_clients_serialized_executor(
        self, lattice4, broker_server_factory
    ):
        from qhq.protocol import jobspec_to_doc

        server = broker_server_factory(lattice4)
        results = {}

        def worker(i):
            with BrokerClient("127.0.0.1", server.port) as client:
                env = client.request(
                    Envelope(
                        MsgType.SUBMIT, new_job_id(),
                        jobspec_to_doc(text_job(shots=10)),
                    )
                )
                results[i] = env

        threads = [threading.Thread(target=worker, args=(i,)) for i in range(5)]
        for t in threads:
            t.start()
        for t in threads:
            t.join(timeout=30)
        assert len(results) == 5
        assert all(e.msg_type == MsgType.RESULT for e in results.values())
        # single executor: execution windows must not overlap
        log = server.broker.event_log
        spans = []
        for e in log:
            if e["state"] == "executing":
                spans.append([e["ts"], None, e["job_id"]])
            if e["state"] == "done":
                for s in spans:
                    if s[2] == e["job_id"] and s[1] is None:
                        s[1] = e["ts"]
        spans.sort()
        for (_, end_a, _), (start_b, _, _) in zip(spans, spans[1:]):
            assert end_a is not None and end_a <= start_b

    def test_bad_frame_gets_error_reply(self, lattice4, broker_server_factory):
        import socket

        server = broker_server_factory(lattice4)
        with socket.create_connection(("127.0.0.1", server.port), timeout=5) as s:
            s.sendall(b"garbage bytes that are not a frame")
            data = s.recv(65536)
        env, _ = __import__("qhq.protocol", fromlist=["try_decode"]).try_decode(data)
        assert env.msg_type == MsgType.ERROR
        assert env.payload["code"] == ErrorCode.BAD_FRAME

    def test_cancel_over_tcp(self, lattice4, broker_server_factory):
        server = broker_server_factory(lattice4)
        server.broker.begin_calibration()
        rec = server.broker.submit(new_job_id(), text_job())
        with BrokerClient("127.0.0.1", server.port) as client:
            env = client.request(Envelope(MsgType.CANCEL, rec.job_id, None))
            assert env.msg_type == MsgType.STATUS_REP
            assert env.payload["cancelled"] is True
        server.broker.end_calibration()
