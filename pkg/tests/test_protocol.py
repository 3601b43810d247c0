import json
import math
import os
import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qhq.protocol import (
    DEFAULT_PORT,
    HEADER_LEN,
    MAGIC,
    MAX_PAYLOAD,
    NULL_JOB_ID,
    Envelope,
    ErrorCode,
    FrameError,
    JobSpec,
    JobSpecError,
    MsgType,
    StreamDecoder,
    canonical_json,
    encode_envelope,
    error_envelope,
    jobspec_from_doc,
    jobspec_to_doc,
    new_job_id,
    try_decode,
    validate_jobspec,
)

GOLDEN = os.path.join(os.path.dirname(__file__), "golden")


def golden_frame() -> bytes:
    with open(os.path.join(GOLDEN, "bell_submit.hex")) as f:
        return bytes.fromhex(f.read().strip())


def golden_qasm() -> str:
    with open(os.path.join(GOLDEN, "bell.qasm")) as f:
        return f.read()


class TestGoldenFrame:
    def test_byte_exact_encoding(self):
        spec = JobSpec(shots=1000, ir_text=golden_qasm())
        env = Envelope(
            MsgType.SUBMIT,
            bytes.fromhex("00112233445566778899aabbccddeeff"),
            jobspec_to_doc(spec),
        )
        assert encode_envelope(env) == golden_frame()

    def test_golden_decodes(self):
        frame = golden_frame()
        env, used = try_decode(frame)
        assert used == len(frame)
        assert env.msg_type == MsgType.SUBMIT
        assert env.job_id.hex() == "00112233445566778899aabbccddeeff"
        spec = jobspec_from_doc(env.payload)
        assert spec.shots == 1000
        assert spec.ir_text == golden_qasm()

    def test_header_layout(self):
        frame = golden_frame()
        assert frame[:4] == MAGIC == b"QHQ1"
        assert frame[4] == MsgType.SUBMIT
        assert frame[5:21] == bytes.fromhex("00112233445566778899aabbccddeeff")
        (length,) = struct.unpack(">I", frame[21:25])
        assert length == len(frame) - HEADER_LEN

    def test_payload_is_canonical_json(self):
        frame = golden_frame()
        payload = frame[HEADER_LEN:]
        doc = json.loads(payload)
        assert canonical_json(doc) == payload
        # canonical form: sorted keys, no spaces
        assert payload == json.dumps(
            doc, sort_keys=True, separators=(",", ":"), ensure_ascii=False
        ).encode()


class TestRoundTrip:
    @pytest.mark.parametrize("msg_type", list(MsgType))
    def test_each_type(self, msg_type):
        env = Envelope(msg_type, new_job_id(), {"k": 1})
        back, used = try_decode(encode_envelope(env))
        assert back == env and used == HEADER_LEN + len(canonical_json({"k": 1}))

    def test_empty_payload(self):
        env = Envelope(MsgType.PING, NULL_JOB_ID, None)
        data = encode_envelope(env)
        assert len(data) == HEADER_LEN
        back, used = try_decode(data)
        assert back == env and used == HEADER_LEN

    def test_unicode_payload(self):
        env = Envelope(MsgType.RESULT, new_job_id(), {"note": "ψ=α|0⟩+β|1⟩"})
        back, _ = try_decode(encode_envelope(env))
        assert back.payload["note"] == "ψ=α|0⟩+β|1⟩"

    def test_trailing_bytes_ignored(self):
        data = encode_envelope(Envelope(MsgType.PING, NULL_JOB_ID, None))
        env, used = try_decode(data + b"extra")
        assert env.msg_type == MsgType.PING and used == len(data)


class TestIncrementalDecoding:
    def test_every_split_point(self):
        frame = golden_frame()
        for cut in range(len(frame) + 1):
            env, used = (None, 0)
            out = try_decode(frame[:cut])
            if cut < len(frame):
                assert out is None, f"cut={cut} decoded early"
            else:
                env, used = out
                assert env is not None and used == len(frame)

    def test_stream_decoder_byte_at_a_time(self):
        frame = golden_frame()
        dec = StreamDecoder()
        got = []
        for b in frame:
            got.extend(dec.feed(bytes([b])))
        assert len(got) == 1
        assert got[0].msg_type == MsgType.SUBMIT

    def test_stream_decoder_multiple_frames_one_chunk(self):
        a = encode_envelope(Envelope(MsgType.PING, NULL_JOB_ID, None))
        b = encode_envelope(Envelope(MsgType.STATUS_REQ, new_job_id(), {"q": 2}))
        dec = StreamDecoder()
        got = dec.feed(a + b + a)
        assert [e.msg_type for e in got] == [
            MsgType.PING, MsgType.STATUS_REQ, MsgType.PING,
        ]


class TestEarlyFailure:
    def test_bad_magic_first_byte(self):
        with pytest.raises(FrameError, match="magic"):
            try_decode(b"X")

    def test_bad_magic_prefix(self):
        with pytest.raises(FrameError, match="magic"):
            try_decode(b"QHX")

    def test_bad_type_before_full_header(self):
        data = MAGIC + bytes([99])
        with pytest.raises(FrameError, match="type"):
            try_decode(data)

    def test_zero_type(self):
        with pytest.raises(FrameError, match="type"):
            try_decode(MAGIC + bytes([0]) + NULL_JOB_ID + b"\x00\x00\x00\x00")

    def test_oversize_rejected_at_header(self):
        header = MAGIC + bytes([MsgType.PING]) + NULL_JOB_ID + struct.pack(
            ">I", MAX_PAYLOAD + 1
        )
        with pytest.raises(FrameError, match="payload"):
            try_decode(header)

    def test_non_json_payload(self):
        frame = MAGIC + bytes([MsgType.SUBMIT]) + NULL_JOB_ID + struct.pack(">I", 3)
        with pytest.raises(FrameError, match="JSON"):
            try_decode(frame + b"{{{")

    def test_non_object_payload(self):
        body = b"[1,2]"
        frame = (
            MAGIC + bytes([MsgType.SUBMIT]) + NULL_JOB_ID
            + struct.pack(">I", len(body)) + body
        )
        with pytest.raises(FrameError, match="object"):
            try_decode(frame)

    def test_stream_decoder_raises_then_unusable(self):
        dec = StreamDecoder()
        with pytest.raises(FrameError):
            dec.feed(b"nope")


class TestEnvelopeValidation:
    def test_job_id_wrong_length(self):
        with pytest.raises(Exception):
            encode_envelope(Envelope(MsgType.PING, b"short", None))

    def test_payload_must_be_dict(self):
        with pytest.raises(Exception):
            encode_envelope(Envelope(MsgType.PING, NULL_JOB_ID, [1, 2]))

    def test_new_job_id_unique(self):
        ids = {new_job_id() for _ in range(100)}
        assert len(ids) == 100
        assert all(len(i) == 16 for i in ids)

    def test_error_envelope_shape(self):
        jid = new_job_id()
        env = error_envelope(jid, ErrorCode.TIMEOUT, "took too long")
        assert env.msg_type == MsgType.ERROR
        assert env.job_id == jid
        assert env.payload["code"] == ErrorCode.TIMEOUT
        assert env.payload["message"] == "took too long"


class TestJobSpec:
    def test_minimal_text_job(self):
        spec = JobSpec(shots=10, ir_text="OPENQASM 2.0;\nqreg q[1];\n")
        validate_jobspec(spec)
        assert spec.output_format == "counts"

    def test_doc_round_trip(self):
        spec = JobSpec(
            shots=5,
            ir_text="x",
            parameter_values={"t": 0.5},
            repetition_period=1e-3,
            output_format="memory",
            metadata={"who": "tests"},
        )
        assert jobspec_from_doc(jobspec_to_doc(spec)) == spec

    def test_aot_round_trip(self):
        spec = JobSpec(shots=2, aot_artifact={"fake": True})
        doc = jobspec_to_doc(spec)
        assert doc["ir_text"] is None
        assert jobspec_from_doc(doc) == spec

    @pytest.mark.parametrize("bad_shots", [0, -5, 1.5, "10", None, True])
    def test_bad_shots(self, bad_shots):
        with pytest.raises(JobSpecError):
            JobSpec(shots=bad_shots, ir_text="x")

    def test_both_ir_kinds_rejected(self):
        with pytest.raises(JobSpecError, match="exactly one"):
            JobSpec(shots=1, ir_text="x", aot_artifact={})

    def test_neither_ir_kind_rejected(self):
        with pytest.raises(JobSpecError, match="exactly one"):
            JobSpec(shots=1)

    @pytest.mark.parametrize("bad", [0.0, -2.0, math.inf, math.nan, "fast"])
    def test_bad_period(self, bad):
        with pytest.raises(JobSpecError):
            JobSpec(shots=1, ir_text="x", repetition_period=bad)

    def test_bad_format(self):
        with pytest.raises(JobSpecError, match="format"):
            JobSpec(shots=1, ir_text="x", output_format="statevector")

    def test_bad_parameter_values(self):
        with pytest.raises(JobSpecError):
            JobSpec(shots=1, ir_text="x", parameter_values={"t": math.nan})
        with pytest.raises(JobSpecError):
            JobSpec(shots=1, ir_text="x", parameter_values={3: 1.0})

    def test_unknown_doc_field_rejected(self):
        doc = jobspec_to_doc(JobSpec(shots=1, ir_text="x"))
        doc["priority"] = "high"
        with pytest.raises(JobSpecError, match="priority"):
            jobspec_from_doc(doc)

    def test_doc_missing_shots(self):
        doc = jobspec_to_doc(JobSpec(shots=1, ir_text="x"))
        del doc["shots"]
        with pytest.raises(JobSpecError):
            jobspec_from_doc(doc)


class TestFuzz:
    @settings(max_examples=500, deadline=None)
    @given(st.binary(max_size=80))
    def test_random_bytes_never_crash(self, data):
        try:
            out = try_decode(data)
        except FrameError:
            return
        if out is not None:
            env, used = out
            assert 0 < used <= len(data)

    @settings(max_examples=200, deadline=None)
    @given(st.binary(min_size=1, max_size=40))
    def test_corrupted_golden_never_crashes(self, noise):
        frame = bytearray(golden_frame())
        for i, b in enumerate(noise):
            frame[(i * 7919) % len(frame)] ^= b
        try:
            try_decode(bytes(frame))
        except FrameError:
            pass

    @settings(max_examples=200, deadline=None)
    @given(
        st.sampled_from(list(MsgType)),
        st.dictionaries(
            st.text(max_size=8),
            st.one_of(
                st.integers(-(2**31), 2**31),
                st.text(max_size=16),
                st.booleans(),
                st.none(),
                st.lists(st.integers(0, 9), max_size=4),
            ),
            max_size=6,
        ),
    )
    def test_arbitrary_payload_round_trips(self, msg_type, payload):
        env = Envelope(msg_type, new_job_id(), payload)
        back, _ = try_decode(encode_envelope(env))
        assert back == env


def test_default_port_is_stable():
    assert DEFAULT_PORT == 5555
