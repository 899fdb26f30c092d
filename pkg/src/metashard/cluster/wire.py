"""Length-prefixed binary frames shared by every cluster process.

Every frame on a socket is ``u32 length`` followed by ``length`` bytes:
a fixed header ``{type: u8, epoch: u64, query_id: u64}`` and a body whose
layout depends on the type. All integers are little-endian.

Query requests and partial results use packed binary bodies. A partial
result may carry one extra trailing u64, the executor's similarity
computation count; readers accept the frame with or without it. Control
traffic (broker, registry, executor control port) uses ``CONTROL``
frames whose body is a JSON object optionally followed by binary blobs.
"""
from __future__ import annotations

import json
import socket
import struct
from dataclasses import dataclass

import numpy as np

from metashard.errors import ProtocolError

QUERY_REQUEST = 1
PARTIAL_RESULT = 2
CONTROL = 3
CLIENT_QUERY = 4
CLIENT_RESULT = 5

HEADER = struct.Struct("<BQQ")
_LEN = struct.Struct("<I")
_REQ = struct.Struct("<III")
_PART = struct.Struct("<II")
_CLIENT_Q = struct.Struct("<IIiI")
_CLIENT_R = struct.Struct("<BIQI")
_U64 = struct.Struct("<Q")
_HIT = np.dtype([("id", "<i8"), ("score", "<f8")])
MAX_FRAME = 64 << 20


@dataclass
class QueryRequest:
    query_id: int
    vector: np.ndarray
    k: int
    search_l: int
    reply_to: str
    epoch: int = 0


@dataclass
class PartialResult:
    query_id: int
    shard_id: int
    ids: np.ndarray
    scores: np.ndarray
    epoch: int = 0
    # Optional trailer: similarity computations the executor spent.
    evaluations: int | None = None


@dataclass
class ClientQuery:
    query_id: int
    vector: np.ndarray
    K: int
    k: int
    l: int
    meta_l: int = -1


@dataclass
class ClientResult:
    query_id: int
    ok: bool
    ids: np.ndarray
    scores: np.ndarray
    evaluations: int = 0
    shards: tuple = ()
    error: str = ""


# -- framing ----------------------------------------------------------------

def frame(ftype: int, epoch: int, query_id: int, body: bytes = b"") -> bytes:
    payload = HEADER.pack(ftype, epoch, query_id) + body
    return _LEN.pack(len(payload)) + payload


def payload_of(framed: bytes) -> bytes:
    """Strip the length prefix from an encoded frame (for payloads carried as blobs)."""
    if len(framed) < _LEN.size or _LEN.unpack_from(framed)[0] != len(framed) - _LEN.size:
        raise ProtocolError("not a single length-prefixed frame")
    return framed[_LEN.size:]


def split(payload: bytes) -> tuple[int, int, int, memoryview]:
    """Header fields and body view of an unprefixed frame payload."""
    if len(payload) < HEADER.size:
        raise ProtocolError(f"frame of {len(payload)} bytes is shorter than its header")
    ftype, epoch, qid = HEADER.unpack_from(payload)
    return ftype, epoch, qid, memoryview(payload)[HEADER.size:]


def _recv_exact(sock: socket.socket, n: int) -> bytes | None:
    buf = bytearray(n)
    view = memoryview(buf)
    got = 0
    while got < n:
        r = sock.recv_into(view[got:], n - got)
        if r == 0:
            if got == 0:
                return None
            raise ProtocolError("connection closed mid-frame")
        got += r
    return bytes(buf)


def read_frame(sock: socket.socket) -> bytes | None:
    """Next frame payload (header + body), or None on a clean EOF."""
    head = _recv_exact(sock, _LEN.size)
    if head is None:
        return None
    (length,) = _LEN.unpack(head)
    if length > MAX_FRAME:
        raise ProtocolError(f"frame length {length} exceeds the limit")
    body = _recv_exact(sock, length)
    if body is None:
        raise ProtocolError("connection closed mid-frame")
    return body


# -- query traffic ----------------------------------------------------------

def encode_request(req: QueryRequest) -> bytes:
    vec = np.ascontiguousarray(req.vector, dtype="<f4")
    addr = req.reply_to.encode("utf-8")
    body = (_REQ.pack(req.k, req.search_l, len(vec)) + vec.tobytes()
            + _LEN.pack(len(addr)) + addr)
    return frame(QUERY_REQUEST, req.epoch, req.query_id, body)


def decode_request(payload: bytes) -> QueryRequest:
    ftype, epoch, qid, body = split(payload)
    if ftype != QUERY_REQUEST:
        raise ProtocolError(f"expected a query request, got frame type {ftype}")
    try:
        k, search_l, dim = _REQ.unpack_from(body)
        off = _REQ.size
        vec = np.frombuffer(body, dtype="<f4", count=dim, offset=off).astype(np.float32)
        off += 4 * dim
        (alen,) = _LEN.unpack_from(body, off)
        off += _LEN.size
        if off + alen != len(body):
            raise ProtocolError("query request body has trailing or missing bytes")
        addr = bytes(body[off: off + alen]).decode("utf-8")
    except (struct.error, ValueError) as exc:
        raise ProtocolError(f"malformed query request: {exc}") from exc
    if k < 1:
        raise ProtocolError("query request with k < 1")
    return QueryRequest(qid, vec, k, search_l, addr, epoch)


def _hits(ids, scores) -> bytes:
    hits = np.empty(len(ids), dtype=_HIT)
    hits["id"] = ids
    hits["score"] = scores
    return hits.tobytes()


def _unhits(body, off: int, count: int, trailer: int = 0):
    if len(body) - off not in {count * _HIT.itemsize, count * _HIT.itemsize + trailer}:
        raise ProtocolError("hit list length does not match its count")
    hits = np.frombuffer(body, dtype=_HIT, count=count, offset=off)
    return hits["id"].astype(np.int64), hits["score"].astype(np.float64)


def encode_partial(part: PartialResult) -> bytes:
    body = _PART.pack(part.shard_id, len(part.ids)) + _hits(part.ids, part.scores)
    if part.evaluations is not None:
        body += _U64.pack(part.evaluations)
    return frame(PARTIAL_RESULT, part.epoch, part.query_id, body)


def decode_partial(payload: bytes) -> PartialResult:
    ftype, epoch, qid, body = split(payload)
    if ftype != PARTIAL_RESULT:
        raise ProtocolError(f"expected a partial result, got frame type {ftype}")
    try:
        shard, count = _PART.unpack_from(body)
    except struct.error as exc:
        raise ProtocolError(f"malformed partial result: {exc}") from exc
    ids, scores = _unhits(body, _PART.size, count, _U64.size)
    evals = None
    end = _PART.size + count * _HIT.itemsize
    if len(body) > end:
        (evals,) = _U64.unpack_from(body, end)
    return PartialResult(qid, shard, ids, scores, epoch, evals)


def encode_client_query(q: ClientQuery) -> bytes:
    vec = np.ascontiguousarray(q.vector, dtype="<f4")
    body = _CLIENT_Q.pack(q.K, q.k, q.meta_l, q.l) + _LEN.pack(len(vec)) + vec.tobytes()
    return frame(CLIENT_QUERY, 0, q.query_id, body)


def decode_client_query(payload: bytes) -> ClientQuery:
    ftype, _, qid, body = split(payload)
    if ftype != CLIENT_QUERY:
        raise ProtocolError(f"expected a client query, got frame type {ftype}")
    try:
        K, k, meta_l, l = _CLIENT_Q.unpack_from(body)
        (dim,) = _LEN.unpack_from(body, _CLIENT_Q.size)
        off = _CLIENT_Q.size + _LEN.size
        if off + 4 * dim != len(body):
            raise ProtocolError("client query vector length mismatch")
        vec = np.frombuffer(body, dtype="<f4", count=dim, offset=off).astype(np.float32)
    except struct.error as exc:
        raise ProtocolError(f"malformed client query: {exc}") from exc
    return ClientQuery(qid, vec, K, k, l, meta_l)


def encode_client_result(r: ClientResult) -> bytes:
    if not r.ok:
        msg = r.error.encode("utf-8")
        body = _CLIENT_R.pack(0, 0, 0, 0) + msg
        return frame(CLIENT_RESULT, 0, r.query_id, body)
    shards = np.asarray(r.shards, dtype="<u4")
    body = (_CLIENT_R.pack(1, len(r.ids), r.evaluations, len(shards)) + shards.tobytes()
            + _hits(r.ids, r.scores))
    return frame(CLIENT_RESULT, 0, r.query_id, body)


def decode_client_result(payload: bytes) -> ClientResult:
    ftype, _, qid, body = split(payload)
    if ftype != CLIENT_RESULT:
        raise ProtocolError(f"expected a client result, got frame type {ftype}")
    ok, count, evals, n_shards = _CLIENT_R.unpack_from(body)
    off = _CLIENT_R.size
    if not ok:
        empty = np.empty(0, dtype=np.int64)
        return ClientResult(qid, False, empty, empty.astype(np.float64),
                            error=bytes(body[off:]).decode("utf-8", "replace"))
    shards = tuple(int(s) for s in np.frombuffer(body, dtype="<u4", count=n_shards, offset=off))
    off += 4 * n_shards
    ids, scores = _unhits(body, off, count)
    return ClientResult(qid, True, ids, scores, evals, shards)


# -- control traffic --------------------------------------------------------

def encode_control(msg: dict, blobs=(), epoch: int = 0, query_id: int = 0) -> bytes:
    js = json.dumps(msg, separators=(",", ":")).encode("utf-8")
    parts = [_LEN.pack(len(js)), js]
    for b in blobs:
        parts.append(_LEN.pack(len(b)))
        parts.append(b)
    return frame(CONTROL, epoch, query_id, b"".join(parts))


def decode_control(payload: bytes) -> tuple[dict, list[bytes]]:
    ftype, _, _, body = split(payload)
    if ftype != CONTROL:
        raise ProtocolError(f"expected a control frame, got frame type {ftype}")
    try:
        (jlen,) = _LEN.unpack_from(body)
        off = _LEN.size
        msg = json.loads(bytes(body[off: off + jlen]).decode("utf-8"))
        off += jlen
        blobs = []
        while off < len(body):
            (blen,) = _LEN.unpack_from(body, off)
            off += _LEN.size
            if off + blen > len(body):
                raise ProtocolError("control blob runs past the frame")
            blobs.append(bytes(body[off: off + blen]))
            off += blen
    except (struct.error, ValueError) as exc:
        raise ProtocolError(f"malformed control frame: {exc}") from exc
    if not isinstance(msg, dict):
        raise ProtocolError("control frame JSON must be an object")
    return msg, blobs


def parse_address(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"bad address {addr!r}; expected host:port")
    return host, int(port)


def format_address(host: str, port: int) -> str:
    return f"{host}:{port}"
