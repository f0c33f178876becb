import math
import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from strategies import paramsets
from fedseg.data import batch_order, generate_synthetic, partition
from fedseg.nn import FcnConfig, NumericError, compute_gradients, init_params, sgd_step
from fedseg.paramset import ParamSet
from fedseg.protocol import (
    Complete,
    GlobalModel,
    Hyperparams,
    JoinAck,
    JoinRequest,
    LocalUpdate,
    ProtocolError,
    RoundBegin,
    WireError,
    client_train,
    decode_message,
    encode_message,
    epoch_seed,
    fedavg,
    fedavg_weighted,
    messages_equal,
    run_client,
    run_server,
    train_centralized,
)
from fedseg.transport import InProcListener

CFG = FcnConfig(num_classes=3, hidden_channels=(4, 4), seed=2)


def scalar(v, dtype=np.float64):
    return ParamSet([("t", np.array([v], dtype=dtype))])


# --------------------------------------------------------------------------
# wire format


def test_frame_header_layout():
    frame = encode_message(JoinRequest("ab"))
    assert frame[:4] == (4).to_bytes(4, "big")
    assert frame[4] == 1
    assert frame[5:] == b"\x02\x00ab"


def sample_messages():
    ps = init_params(CFG)
    return [
        JoinRequest("federate-0001"),
        JoinAck(3, CFG, Hyperparams(epochs=2, lr=0.5, batch_size=4, rounds=7, seed=99)),
        RoundBegin(1, ps),
        LocalUpdate(2, "fé", ps, 128, 0.25),
        GlobalModel(4, ps),
        Complete(ps),
        Complete(ParamSet()),
    ]


@pytest.mark.parametrize("msg", sample_messages(), ids=lambda m: type(m).__name__)
def test_roundtrip_each_variant(msg):
    back = decode_message(encode_message(msg))
    assert type(back) is type(msg)
    assert messages_equal(back, msg)


@pytest.mark.parametrize("msg", sample_messages()[:6], ids=lambda m: type(m).__name__)
def test_truncated_frames_rejected(msg):
    frame = encode_message(msg)
    for cut in (1, 3, len(frame) - 5):
        with pytest.raises(WireError):
            decode_message(frame[:-cut])


def test_unknown_tag_and_length_mismatch():
    frame = bytearray(encode_message(JoinRequest("x")))
    frame[4] = 42
    with pytest.raises(WireError, match="unknown message tag"):
        decode_message(bytes(frame))
    with pytest.raises(WireError):
        decode_message(encode_message(JoinRequest("x")) + b"\0")
    with pytest.raises(WireError):
        decode_message(b"\0\0")


def test_trailing_payload_bytes_rejected():
    frame = encode_message(JoinRequest("x")) + b"z"
    frame = (len(frame) - 5).to_bytes(4, "big") + frame[4:]
    with pytest.raises(WireError, match="trailing"):
        decode_message(frame)


@settings(max_examples=200)
@given(paramsets(), st.integers(0, 2**32 - 1), st.text(max_size=20), st.integers(0, 2**64 - 1),
       st.floats(allow_nan=False))
def test_message_roundtrip_property(ps, rnd, fid, count, loss):
    for msg in (RoundBegin(rnd, ps), LocalUpdate(rnd, fid, ps, count, loss), GlobalModel(rnd, ps), Complete(ps)):
        assert messages_equal(decode_message(encode_message(msg)), msg)


# --------------------------------------------------------------------------
# aggregation


def test_fedavg_examples():
    assert fedavg([scalar(1.0), scalar(3.0)]) == scalar(2.0)
    two = [ParamSet([("t", np.array([1.0, 3.0]))]), ParamSet([("t", np.array([3.0, 5.0]))])]
    assert fedavg(two)["t"].tolist() == [2.0, 4.0]


@given(paramsets(min_entries=1, elements=st.floats(-1e6, 1e6, width=32)), st.integers(1, 9))
def test_fedavg_identity(ps, k):
    assert fedavg([ps] * k) == ps


def test_fedavg_errors():
    with pytest.raises(ValueError):
        fedavg([])
    with pytest.raises(ValueError):
        fedavg([scalar(1.0), ParamSet([("t", np.ones(2))])])


def test_fedavg_preserves_dtype():
    out = fedavg([scalar(1, np.float32), scalar(2, np.float32)])
    assert out["t"].dtype == np.float32 and out["t"].item() == 1.5


def test_weighted_examples():
    assert fedavg_weighted([(scalar(0.0), 1), (scalar(4.0), 3)])["t"].item() == 3.0
    a, b = scalar(1.25), scalar(7.5)
    assert fedavg_weighted([(a, 1), (b, 0)]) == a
    assert fedavg_weighted([(a, 5), (b, 5)]) == fedavg([a, b])
    with pytest.raises(ValueError):
        fedavg_weighted([(a, 0), (b, 0)])


# --------------------------------------------------------------------------
# local training


@pytest.fixture(scope="module")
def silo():
    return partition(generate_synthetic(12, 16, 16, 3, seed=5), 1, 0)[0]


def test_client_train_zero_lr_is_noop(silo):
    params = init_params(CFG)
    hp = Hyperparams(epochs=2, lr=0.0, batch_size=4, seed=1)
    out, loss = client_train(params, silo, hp, 1, CFG)
    assert out == params and math.isfinite(loss)


def test_client_train_one_batch_equals_one_sgd_step(silo):
    params = init_params(CFG)
    hp = Hyperparams(epochs=1, lr=0.7, batch_size=len(silo), seed=3)
    out, loss = client_train(params, silo, hp, 1, CFG)
    images, targets = silo.arrays(CFG.num_classes, CFG.dtype)
    (idx,) = batch_order(len(silo), len(silo), epoch_seed(3, 0, 0))
    ref_loss, grads = compute_gradients(params, CFG, (images[idx], targets[idx]))
    assert out == sgd_step(params, grads, 0.7)
    assert loss == ref_loss


def test_client_train_deterministic(silo):
    hp = Hyperparams(epochs=2, lr=0.5, batch_size=5, seed=4)
    a = client_train(init_params(CFG), silo, hp, 3, CFG, federate_index=1)
    b = client_train(init_params(CFG), silo, hp, 3, CFG, federate_index=1)
    assert a[0] == b[0] and a[1] == b[1]
    c = client_train(init_params(CFG), silo, hp, 3, CFG, federate_index=2)
    assert c[0] != a[0]


def test_client_train_nan_aborts(silo):
    hp = Hyperparams(epochs=1, lr=1e30, batch_size=4, seed=0)
    with pytest.raises(NumericError):
        params = init_params(CFG)
        for rnd in range(1, 4):
            params, _ = client_train(params, silo, hp, rnd, CFG)


def test_hyperparam_validation():
    for bad in ({"epochs": 0}, {"lr": -0.1}, {"lr": float("nan")}, {"batch_size": 0}, {"rounds": -1}):
        with pytest.raises(ValueError):
            Hyperparams(**bad)


# --------------------------------------------------------------------------
# sessions


def run_session(silos, hp, config=CFG, transcript=None, tap=None):
    listener = InProcListener(tap)
    results, errors = {}, []

    def client(s):
        try:
            results[s.id] = run_client(listener.connect(), s, config, timeout=30)
        except Exception as exc:
            errors.append(exc)

    threads = [threading.Thread(target=client, args=(s,)) for s in silos]
    for t in threads:
        t.start()
    final = run_server(listener, len(silos), hp, init_params(config), config, transcript=transcript, timeout=30)
    for t in threads:
        t.join()
    assert not errors
    return final, results


def test_zero_rounds_returns_init(silo):
    transcript = []
    final, results = run_session([silo], Hyperparams(rounds=0), transcript=transcript)
    assert final == init_params(CFG)
    assert [e[2] for e in transcript] == ["JoinRequest", "JoinAck", "Complete"]
    assert results[0] == final


def test_transcript_r1_n2():
    silos = partition(generate_synthetic(10, 16, 16, 3, seed=1), 2, 0)
    transcript = []
    final, results = run_session(silos, Hyperparams(rounds=1, batch_size=4), transcript=transcript)
    kinds = [e[2] if e[0] != "aggregate" else "aggregate" for e in transcript]
    assert kinds == ["JoinRequest"] * 2 + ["JoinAck"] * 2 + ["RoundBegin"] * 2 + ["LocalUpdate"] * 2 + [
        "aggregate"] + ["Complete"] * 2
    assert all(r == final for r in results.values())


def test_transcript_invariants_multi_round():
    silos = partition(generate_synthetic(12, 16, 16, 3, seed=1), 3, 0)
    transcript = []
    run_session(silos, Hyperparams(rounds=3, batch_size=4), transcript=transcript)
    aggregates = [i for i, e in enumerate(transcript) if e[0] == "aggregate"]
    assert [transcript[i][1] for i in aggregates] == [1, 2, 3]
    start = 0
    for i in aggregates:
        window = transcript[start:i]
        updates = [e[1] for e in window if e[2:] == ("LocalUpdate",)]
        assert sorted(updates) == sorted(f"federate-{s.id:04d}" for s in silos)
        start = i + 1


def test_single_federate_matches_centralized(silo):
    hp = Hyperparams(rounds=3, epochs=2, lr=2.0, batch_size=4, seed=7)
    final, _ = run_session([silo], hp)
    central = train_centralized(init_params(CFG), silo, CFG, hp, hp.rounds * hp.epochs)
    assert final.to_bytes() == central.to_bytes()


def test_server_never_sees_silo_data():
    silos = partition(generate_synthetic(6, 16, 16, 3, seed=3), 2, 0)
    frames = []
    run_session(silos, Hyperparams(rounds=1, batch_size=3), tap=frames.append)
    blob = b"".join(frames)
    for s in silos:
        for sample in s.samples:
            assert sample.image.tobytes()[:48] not in blob
            assert sample.target.tobytes()[:64] not in blob


def test_disconnect_aborts_without_aggregation(silo):
    listener = InProcListener()

    def quitter():
        ch = listener.connect()
        ch.send(JoinRequest("bad"))
        ch.receive(5)
        ch.close()

    def good():
        try:
            run_client(listener.connect(), silo, CFG, timeout=5)
        except Exception:
            pass

    threads = [threading.Thread(target=quitter), threading.Thread(target=good)]
    for t in threads:
        t.start()
    transcript = []
    with pytest.raises(ProtocolError):
        run_server(listener, 2, Hyperparams(rounds=2), init_params(CFG), CFG, transcript=transcript, timeout=5)
    for t in threads:
        t.join()
    assert not any(e[0] == "aggregate" for e in transcript)


def test_malformed_message_aborts():
    listener = InProcListener()

    def rogue():
        ch = listener.connect()
        ch.send(Complete(ParamSet()))

    t = threading.Thread(target=rogue)
    t.start()
    with pytest.raises(ProtocolError, match="expected JoinRequest"):
        run_server(listener, 1, Hyperparams(rounds=1), init_params(CFG), CFG, timeout=5)
    t.join()


def test_incompatible_update_aborts():
    listener = InProcListener()

    def rogue():
        ch = listener.connect()
        ch.send(JoinRequest("r"))
        ch.receive(5)
        begin = ch.receive(5)
        ch.send(LocalUpdate(begin.round, "r", ParamSet([("x", np.ones(1))]), 1, 0.0))

    t = threading.Thread(target=rogue)
    t.start()
    with pytest.raises(ProtocolError, match="incompatible"):
        run_server(listener, 1, Hyperparams(rounds=1), init_params(CFG), CFG, timeout=5)
    t.join()


def test_client_rejects_config_mismatch(silo):
    listener = InProcListener()
    other = FcnConfig(num_classes=3, hidden_channels=(4, 8), seed=2)
    errors = []

    def client():
        try:
            run_client(listener.connect(), silo, other, timeout=5)
        except ProtocolError as exc:
            errors.append(exc)

    t = threading.Thread(target=client)
    t.start()
    with pytest.raises(ProtocolError):
        run_server(listener, 1, Hyperparams(rounds=1), init_params(CFG), CFG, timeout=5)
    t.join()
    assert errors


def test_duplicate_federate_ids_rejected(silo):
    listener = InProcListener()
    threads = [
        threading.Thread(target=lambda: listener.connect().send(JoinRequest("same"))) for _ in range(2)
    ]
    for t in threads:
        t.start()
    with pytest.raises(ProtocolError, match="duplicate"):
        run_server(listener, 2, Hyperparams(rounds=1), init_params(CFG), CFG, timeout=5)
