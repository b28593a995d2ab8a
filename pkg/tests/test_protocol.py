import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from splitfed import protocol as P
from splitfed.nn import load_architecture, param_count
from splitfed.sparse import SparseCutTensor, topk_sparsify

MiB = 2**20


def test_sparse_frame_layout():
    s = SparseCutTensor((4,), [1, 2], [-3.0, 2.0])
    frame = P.encode(P.ForwardActivation(7, 3, s))
    assert len(frame) == 41
    assert frame[:4] == b"SF\x01\x01"
    assert struct.unpack_from("<I", frame, 4)[0] == 33
    assert struct.unpack_from("<II", frame, 8) == (7, 3)
    assert frame[16] == 1 and struct.unpack_from("<I", frame, 17)[0] == 4
    assert struct.unpack_from("<I", frame, 21)[0] == 2
    assert struct.unpack_from("<2I", frame, 25) == (1, 2)
    assert struct.unpack_from("<2f", frame, 33) == (-3.0, 2.0)


def test_control_frame_is_nine_bytes():
    frame = P.encode(P.Control(5))
    assert frame == b"SF\x01\x06\x01\x00\x00\x00\x05"
    assert P.decode(frame) == P.Control(5)


def test_dense_and_sync_layout():
    t = np.arange(6, dtype=np.float32).reshape(2, 3)
    frame = P.encode(P.DenseActivation(1, 2, t))
    assert len(frame) == P.dense_frame_len(2, 6) == 8 + 8 + 1 + 8 + 24
    sync = P.ModelSync("down", 4, 9, np.ones(5, np.float32), np.zeros(2, np.float32))
    frame = P.encode(sync)
    assert len(frame) == P.sync_frame_len(5, 2)
    assert frame[8] == 1  # direction byte: down
    assert P.decode(frame) == sync


def test_encode_rejects_invalid_tensors():
    with pytest.raises(P.ProtocolError):
        P.encode(P.ForwardActivation(0, 0, SparseCutTensor((4,), [2, 1], [1.0, 1.0])))
    with pytest.raises(P.ProtocolError):
        P.encode(P.ForwardActivation(0, 0, SparseCutTensor((4,), [9], [1.0])))
    with pytest.raises(P.ProtocolError):
        P.encode(P.DenseGradient(0, 0, np.zeros((1,) * 9, np.float32)))
    with pytest.raises(P.ProtocolError):
        P.encode(P.ForwardActivation(-1, 0, SparseCutTensor((1,), [0], [1.0])))


def _good_frame():
    return P.encode(P.ActivationGradient(1, 2, SparseCutTensor((3, 4), [0, 5, 11], [1.0, -2.0, 3.5])))


@pytest.mark.parametrize(
    "mutate,err",
    [
        (lambda f: b"\x00\x00" + f[2:], P.BadMagic),
        (lambda f: f[:2] + b"\x02" + f[3:], P.UnsupportedVersion),
        (lambda f: f[:-3], P.Truncated),
        (lambda f: f[:5], P.Truncated),
        (lambda f: f[:3] + b"\x63" + f[4:], P.MalformedPayload),
        (lambda f: f + b"\x00", P.MalformedPayload),
    ],
)
def test_decode_errors_are_distinct(mutate, err):
    with pytest.raises(err) as exc:
        P.decode(mutate(_good_frame()))
    assert exc.value.code == err.code


def test_decode_index_out_of_bounds():
    frame = bytearray(_good_frame())
    # third index lives after header(8) + route(8) + rank(1) + dims(8) + count(4) + two indices
    struct.pack_into("<I", frame, 8 + 8 + 1 + 8 + 4 + 8, 12)
    with pytest.raises(P.IndexOutOfBounds):
        P.decode(bytes(frame))


def test_error_codes_unique():
    codes = {c.code for c in (P.BadMagic, P.UnsupportedVersion, P.Truncated, P.IndexOutOfBounds, P.MalformedPayload)}
    assert len(codes) == 5


shapes = st.lists(st.integers(1, 5), min_size=1, max_size=4).map(tuple)
u32 = st.integers(0, 2**32 - 1)


@st.composite
def messages(draw):
    kind = draw(st.sampled_from(["fwd", "grad", "dact", "dgrad", "sync", "ctl"]))
    if kind == "ctl":
        return P.Control(draw(st.integers(0, 255)))
    rnd, cid = draw(u32), draw(u32)
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    if kind == "sync":
        return P.ModelSync(draw(st.sampled_from(["up", "down"])), rnd, cid,
                           rng.standard_normal(draw(st.integers(0, 20))).astype(np.float32),
                           rng.standard_normal(draw(st.integers(0, 6))).astype(np.float32))
    shape = draw(shapes)
    t = rng.standard_normal(shape).astype(np.float32)
    if kind == "dact":
        return P.DenseActivation(rnd, cid, t)
    if kind == "dgrad":
        return P.DenseGradient(rnd, cid, t)
    s = topk_sparsify(t, draw(st.sampled_from([0.01, 0.1, 0.5, 1.0])))
    return (P.ForwardActivation if kind == "fwd" else P.ActivationGradient)(rnd, cid, s)


@settings(max_examples=500)
@given(messages())
def test_round_trip(msg):
    frame = P.encode(msg)
    assert P.decode(frame) == msg
    assert P.encode(P.decode(frame)) == frame


@settings(max_examples=500)
@given(st.binary(max_size=64))
def test_fuzz_random_bytes(data):
    try:
        P.decode(data)
    except P.ProtocolError:
        pass


@settings(max_examples=300)
@given(messages(), st.integers(0, 200), st.integers(0, 255))
def test_fuzz_corrupted_frames(msg, pos, byte):
    frame = bytearray(P.encode(msg))
    frame[pos % len(frame)] = byte
    try:
        P.decode(bytes(frame))
    except P.ProtocolError:
        pass


# --- traffic accounting ---------------------------------------------------

@pytest.fixture(scope="module")
def reference():
    return load_architecture("reference_full.cfg").build()


def test_splitnn_traffic_is_32_mib(reference):
    assert P.traffic_bytes("splitnn", reference, 16, 32) == 33_554_432 == 32 * MiB


def test_proposed_values_only_is_tenth(reference):
    got = P.traffic_bytes("split-sparse", reference, 16, 32, 0.1)
    # 32 messages of floor(0.1 * 262144) = 26214 entries each
    assert got == 32 * 4 * 26214 == 3_355_392
    assert abs(got - 0.1 * 32 * MiB) <= 32 * 4


def test_zero_devices(reference):
    for scheme in P.SCHEMES:
        for mode in ("values-only", "on-wire"):
            assert P.traffic_bytes(scheme, reference, 0, 32, 0.1, mode) == 0


def test_fedavg_traffic(reference):
    p = param_count(reference)
    rows = [P.traffic_bytes("fedavg", reference, m, 32) for m in (16, 32, 64)]
    assert rows[0] == 16 * 2 * 4 * p
    assert rows[1] == 2 * rows[0] and rows[2] == 4 * rows[0]
    for got, quoted in zip(rows, (1.36e9, 2.72e9, 5.45e9)):
        assert abs(got / quoted - 1) < 0.10


def test_on_wire_at_least_values_only(reference):
    for scheme in ("fedavg", "splitnn", "split-sparse"):
        vo = P.traffic_bytes(scheme, reference, 16, 32, 0.1, "values-only")
        ow = P.traffic_bytes(scheme, reference, 16, 32, 0.1, "on-wire")
        assert ow >= vo
    # sparse on-wire pays 4 extra index bytes per entry plus framing
    assert P.traffic_bytes("split-sparse", reference, 1, 32, 0.1, "on-wire") == 2 * (8 + 8 + 1 + 12 + 4 + 8 * 26214)


def test_linear_in_devices(reference):
    for scheme in P.SCHEMES:
        for mode in ("values-only", "on-wire"):
            one = P.traffic_bytes(scheme, reference, 1, 32, 0.1, mode)
            assert all(P.traffic_bytes(scheme, reference, m, 32, 0.1, mode) == m * one for m in (2, 7, 64))


def test_ledger_accumulates():
    led = P.TrafficLedger()
    t = P.LoopbackTransport("splitnn", led)
    msg = P.DenseActivation(0, 0, np.ones((2, 3), np.float32))
    back = t.send(msg, 0, "up")
    assert back == msg
    assert led.total("on-wire") == len(P.encode(msg)) and led.total("values-only") == 24
    t.send(msg, 0, "up")
    assert led.total("on-wire", rnd=0, direction="up") == 2 * len(P.encode(msg))
