"""Federation protocol: messages, wire codec, local training and FedAvg.

Frame layout::

    u32 big-endian payload length | u8 tag | payload

The length counts payload bytes only (the tag is not included). Payload
integers are little-endian; parameter sets use the FPS1 encoding.

====  ============  =====================================================
tag   message       payload
====  ============  =====================================================
1     JoinRequest   u16 id_len, id
2     JoinAck       u32 index, u32 json_len, json {"model", "hyperparams"}
3     RoundBegin    u32 round, FPS1
4     LocalUpdate   u32 round, u16 id_len, id, u64 samples, f64 loss, FPS1
5     GlobalModel   u32 round, FPS1
6     Complete      FPS1
====  ============  =====================================================

A session is: JoinRequest/JoinAck per federate, then for each round one
RoundBegin to and one LocalUpdate from every federate, then one Complete
per federate.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .data import Silo, batch_order
from .nn import FcnConfig, NumericError, compute_gradients, sgd_step
from .paramset import ParamSet, ParamSetError, decode_paramset, encode_paramset
from .rng import derive_seed

log = logging.getLogger(__name__)

MAX_FRAME = 256 * 1024 * 1024
HEADER = struct.Struct(">IB")


class WireError(ValueError):
    """Bytes that do not form a valid frame or message."""


class ProtocolError(RuntimeError):
    """A session was aborted: bad message order, disconnect, or incompatible update."""


@dataclass(frozen=True)
class Hyperparams:
    epochs: int = 1
    lr: float = 1.0
    batch_size: int = 16
    rounds: int = 1
    seed: int = 0
    weighted: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not (self.lr >= 0 and math.isfinite(self.lr)):
            raise ValueError("lr must be a non-negative finite number")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class JoinRequest:
    federate_id: str


@dataclass(frozen=True, eq=False)
class JoinAck:
    index: int
    config: FcnConfig
    hyperparams: Hyperparams


@dataclass(frozen=True, eq=False)
class RoundBegin:
    round: int
    params: ParamSet


@dataclass(frozen=True, eq=False)
class LocalUpdate:
    round: int
    federate_id: str
    params: ParamSet
    sample_count: int
    loss: float


@dataclass(frozen=True, eq=False)
class GlobalModel:
    round: int
    params: ParamSet


@dataclass(frozen=True, eq=False)
class Complete:
    params: ParamSet


FedMessage = Union[JoinRequest, JoinAck, RoundBegin, LocalUpdate, GlobalModel, Complete]

TAGS = {JoinRequest: 1, JoinAck: 2, RoundBegin: 3, LocalUpdate: 4, GlobalModel: 5, Complete: 6}
_BY_TAG = {v: k for k, v in TAGS.items()}


def _str(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise WireError("string too long")
    return struct.pack("<H", len(raw)) + raw


def encode_payload(msg: FedMessage) -> bytes:
    if isinstance(msg, JoinRequest):
        return _str(msg.federate_id)
    if isinstance(msg, JoinAck):
        blob = json.dumps(
            {"model": msg.config.to_dict(), "hyperparams": msg.hyperparams.to_dict()}, sort_keys=True
        ).encode()
        return struct.pack("<II", msg.index, len(blob)) + blob
    if isinstance(msg, (RoundBegin, GlobalModel)):
        return struct.pack("<I", msg.round) + encode_paramset(msg.params)
    if isinstance(msg, LocalUpdate):
        return (
            struct.pack("<I", msg.round)
            + _str(msg.federate_id)
            + struct.pack("<Qd", msg.sample_count, msg.loss)
            + encode_paramset(msg.params)
        )
    if isinstance(msg, Complete):
        return encode_paramset(msg.params)
    raise WireError(f"not a protocol message: {type(msg).__name__}")


def encode_message(msg: FedMessage) -> bytes:
    """Full frame for ``msg``."""
    payload = encode_payload(msg)
    if len(payload) > MAX_FRAME:
        raise WireError("message exceeds frame size cap")
    return HEADER.pack(len(payload), TAGS[type(msg)]) + payload


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise WireError("truncated payload")
        out = bytes(self.data[self.pos : self.pos + n])
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<H")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise WireError("invalid utf-8 string") from exc

    def params(self) -> ParamSet:
        try:
            ps, self.pos = decode_paramset(self.data, self.pos)
        except ParamSetError as exc:
            raise WireError(str(exc)) from exc
        return ps


def decode_payload(tag: int, payload: bytes) -> FedMessage:
    cls = _BY_TAG.get(tag)
    if cls is None:
        raise WireError(f"unknown message tag {tag}")
    r = _Reader(payload)
    if cls is JoinRequest:
        msg = JoinRequest(r.string())
    elif cls is JoinAck:
        index, n = r.unpack("<II")
        try:
            blob = json.loads(r.take(n))
            msg = JoinAck(index, FcnConfig.from_dict(blob["model"]), Hyperparams(**blob["hyperparams"]))
        except (ValueError, KeyError, TypeError) as exc:
            raise WireError(f"bad JoinAck body: {exc}") from exc
    elif cls is RoundBegin or cls is GlobalModel:
        (rnd,) = r.unpack("<I")
        msg = cls(rnd, r.params())
    elif cls is LocalUpdate:
        (rnd,) = r.unpack("<I")
        fid = r.string()
        count, loss = r.unpack("<Qd")
        msg = LocalUpdate(rnd, fid, r.params(), count, loss)
    else:
        msg = Complete(r.params())
    if r.pos != len(payload):
        raise WireError(f"{len(payload) - r.pos} trailing bytes in {cls.__name__}")
    return msg


def decode_message(frame: bytes) -> FedMessage:
    if len(frame) < HEADER.size:
        raise WireError("truncated frame header")
    length, tag = HEADER.unpack_from(frame)
    if length > MAX_FRAME:
        raise WireError(f"frame length {length} exceeds cap")
    if len(frame) - HEADER.size != length:
        raise WireError(f"frame length {length} does not match {len(frame) - HEADER.size} payload bytes")
    return decode_payload(tag, frame[HEADER.size :])


def messages_equal(a: FedMessage, b: FedMessage) -> bool:
    return type(a) is type(b) and encode_message(a) == encode_message(b)


# --------------------------------------------------------------------------
# aggregation


def _accum_dtype(dtype: np.dtype):
    # Wide enough that summing k identical values and dividing by k is exact.
    return np.float64 if dtype == np.float32 else np.longdouble


def _check_all_compatible(sets: Sequence[ParamSet]) -> None:
    if not sets:
        raise ValueError("need at least one parameter set")
    for p in sets[1:]:
        sets[0].check_compatible(p)


def fedavg(locals_: Sequence[ParamSet]) -> ParamSet:
    """Unweighted elementwise mean, summed in list order."""
    _check_all_compatible(locals_)
    n = len(locals_)
    out = []
    for j, (name, ref) in enumerate(locals_[0]):
        # Seeding with the first set (not zeros) keeps the sign of -0.0.
        acc = ref.astype(_accum_dtype(ref.dtype))
        for p in locals_[1:]:
            acc += p.arrays[j]
        out.append((name, (acc / n).astype(ref.dtype)))
    return ParamSet(out)


def fedavg_weighted(locals_: Sequence[tuple[ParamSet, int]]) -> ParamSet:
    """Sample-count weighted mean ``sum(n_i * theta_i) / sum(n_i)``."""
    sets = [p for p, _ in locals_]
    _check_all_compatible(sets)
    counts = [int(c) for _, c in locals_]
    if any(c < 0 for c in counts) or sum(counts) == 0:
        raise ValueError("sample counts must be non-negative with a positive total")
    total = sum(counts)
    out = []
    for j, (name, ref) in enumerate(sets[0]):
        acc = None
        for p, c in zip(sets, counts):
            if c:
                term = p.arrays[j].astype(_accum_dtype(ref.dtype)) * c
                acc = term if acc is None else acc + term
        out.append((name, (acc / total).astype(ref.dtype)))
    return ParamSet(out)


# --------------------------------------------------------------------------
# local training


def epoch_seed(base_seed: int, federate_index: int, epoch: int) -> int:
    """Batch-order seed for one epoch; ``epoch`` counts from 0 across rounds."""
    return derive_seed(base_seed, federate_index, epoch)


def train_epoch(params: ParamSet, silo: Silo, config: FcnConfig, lr: float, batch_size: int,
                seed: int) -> tuple[ParamSet, list[float]]:
    images, targets = silo.arrays(config.num_classes, config.dtype)
    losses = []
    for idx in batch_order(len(silo), batch_size, seed):
        loss, grads = compute_gradients(params, config, (images[idx], targets[idx]))
        if not math.isfinite(loss):
            raise NumericError(f"non-finite loss on silo {silo.id}")
        params = sgd_step(params, grads, lr)
        losses.append(loss)
    return params, losses


def client_train(params: ParamSet, silo: Silo, hp: Hyperparams, round: int, config: FcnConfig,
                 federate_index: int = 0) -> tuple[ParamSet, float]:
    """Run ``hp.epochs`` local epochs for ``round`` (1-based); returns params and mean batch loss."""
    if len(silo) == 0:
        raise ValueError(f"silo {silo.id} is empty")
    losses: list[float] = []
    for e in range(hp.epochs):
        global_epoch = (round - 1) * hp.epochs + e
        params, batch_losses = train_epoch(
            params, silo, config, hp.lr, hp.batch_size, epoch_seed(hp.seed, federate_index, global_epoch)
        )
        losses.extend(batch_losses)
    return params, sum(losses) / len(losses)


def train_centralized(params: ParamSet, silo: Silo, config: FcnConfig, hp: Hyperparams, total_epochs: int,
                      on_epoch: Optional[Callable[[int, ParamSet, float], None]] = None) -> ParamSet:
    """Plain training on one silo with the same seed schedule a lone federate would use."""
    for t in range(total_epochs):
        params, losses = train_epoch(params, silo, config, hp.lr, hp.batch_size, epoch_seed(hp.seed, 0, t))
        if on_epoch is not None:
            on_epoch(t + 1, params, sum(losses) / len(losses))
    return params


# --------------------------------------------------------------------------
# session drivers


def _expect(msg: FedMessage, cls):
    if not isinstance(msg, cls):
        raise ProtocolError(f"expected {cls.__name__}, got {type(msg).__name__}")
    return msg


def run_server(listener, n_federates: int, hp: Hyperparams, init: ParamSet, config: FcnConfig, *,
               on_round: Optional[Callable[[int, ParamSet, list[LocalUpdate]], None]] = None,
               transcript: Optional[list] = None, timeout: Optional[float] = None) -> ParamSet:
    """Synchronous FedAvg server.

    ``listener.accept(n)`` must return ``n`` channels. Federate indices are
    assigned by sorted federate id so runs are reproducible regardless of
    connection order. Any failure aborts the session; nothing is aggregated
    from a partial round.
    """
    if n_federates < 1:
        raise ValueError("need at least one federate")
    note = transcript.append if transcript is not None else (lambda _e: None)
    channels = listener.accept(n_federates, timeout=timeout)
    pool = ThreadPoolExecutor(max_workers=n_federates, thread_name_prefix="fed-recv")
    try:
        joins = list(pool.map(lambda ch: _expect(ch.receive(timeout), JoinRequest), channels))
        ids = [j.federate_id for j in joins]
        if len(set(ids)) != len(ids):
            raise ProtocolError(f"duplicate federate ids: {ids}")
        ranked = sorted(zip(ids, channels), key=lambda t: t[0])
        ids = [fid for fid, _ in ranked]
        channels = [ch for _, ch in ranked]
        for fid in ids:
            note(("recv", fid, "JoinRequest"))
        for i, (fid, ch) in enumerate(zip(ids, channels)):
            ch.send(JoinAck(i, config, hp))
            note(("send", fid, "JoinAck"))

        global_params = init
        for rnd in range(1, hp.rounds + 1):
            begin = RoundBegin(rnd, global_params)
            for fid, ch in zip(ids, channels):
                ch.send(begin)
                note(("send", fid, "RoundBegin"))
            updates = list(pool.map(lambda ch: _expect(ch.receive(timeout), LocalUpdate), channels))
            for fid, upd in zip(ids, updates):
                note(("recv", fid, "LocalUpdate"))
                if upd.round != rnd or upd.federate_id != fid:
                    raise ProtocolError(f"unexpected update from {upd.federate_id} for round {upd.round}")
                if not upd.params.compatible(global_params):
                    raise ProtocolError(f"incompatible parameters from {fid}")
            note(("aggregate", rnd))
            if hp.weighted:
                global_params = fedavg_weighted([(u.params, u.sample_count) for u in updates])
            else:
                global_params = fedavg([u.params for u in updates])
            log.debug("round %d aggregated from %d federates", rnd, len(updates))
            if on_round is not None:
                on_round(rnd, global_params, updates)

        done = Complete(global_params)
        for fid, ch in zip(ids, channels):
            ch.send(done)
            note(("send", fid, "Complete"))
        return global_params
    except ProtocolError:
        raise
    except Exception as exc:
        raise ProtocolError(f"session aborted: {exc}") from exc
    finally:
        pool.shutdown(wait=False, cancel_futures=True)
        for ch in channels:
            ch.close()


def run_client(channel, silo: Silo, config: Optional[FcnConfig] = None, federate_id: Optional[str] = None,
               timeout: Optional[float] = None) -> ParamSet:
    """Join a session and answer each RoundBegin with one LocalUpdate; returns the final model."""
    fid = federate_id if federate_id is not None else f"federate-{silo.id:04d}"
    try:
        channel.send(JoinRequest(fid))
        ack = _expect(channel.receive(timeout), JoinAck)
        if config is not None and ack.config != config:
            raise ProtocolError(f"server model config {ack.config} differs from local {config}")
        cfg, hp = ack.config, ack.hyperparams
        params: Optional[ParamSet] = None
        while True:
            msg = channel.receive(timeout)
            if isinstance(msg, RoundBegin):
                params, loss = client_train(msg.params, silo, hp, msg.round, cfg, ack.index)
                channel.send(LocalUpdate(msg.round, fid, params, len(silo), loss))
            elif isinstance(msg, GlobalModel):
                params = msg.params
            elif isinstance(msg, Complete):
                return msg.params
            else:
                raise ProtocolError(f"unexpected {type(msg).__name__} at client")
    finally:
        channel.close()
