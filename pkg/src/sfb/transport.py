"""Message transport: bit-exact wire codec, simulated network, TCP mesh.

Wire layout (little-endian; one frame per message):

    magic   4s   "SFB1"
    frame   u8   1 = factor batch, 2 = dense matrix
    sender  u32
    clock   u64
  frame 1 (factor batch):
    model   u8
    coeff   f64
    count   u32
    per pair, for u then v:
      flag  u8   0 dense / 1 sparse
      dim   u32
      nnz   u32  (= dim when dense)
      values  f64[nnz]
      indices u32[nnz]   (sparse only)
  frame 2 (dense matrix):
    rows    u32
    cols    u32
    values  f64[rows*cols]
  crc     u32  CRC32 (IEEE) over every preceding byte

Decoding consumes the buffer exactly and verifies the checksum, so any
truncation or corruption fails by length or CRC.  The simulator moves
encoded bytes on a deterministic step counter; the TCP mesh moves them
over one ordered stream per directed edge.
"""

from __future__ import annotations

import logging
import os
import socket
import struct
import threading
import time
import zlib
from dataclasses import dataclass, field

import numpy as np

from .tensor import SFPair, Vec64

__all__ = [
    "CodecError",
    "TransportError",
    "SFMessage",
    "MatrixMessage",
    "encode",
    "decode",
    "DelaySchedule",
    "SimNetwork",
    "TcpMesh",
    "load_peer_file",
]

log = logging.getLogger(__name__)

MAGIC = b"SFB1"
FRAME_SF = 1
FRAME_MATRIX = 2

_PREFIX = struct.Struct("<4sBIQ")      # magic, frame, sender, clock
_SF_HEAD = struct.Struct("<BdI")       # model, coeff, pair count
_FACTOR_HEAD = struct.Struct("<BII")   # flag, dim, nnz
_MAT_HEAD = struct.Struct("<II")       # rows, cols
_CRC = struct.Struct("<I")


class CodecError(ValueError):
    """Malformed frame: bad magic/layout/length or checksum mismatch."""


class TransportError(RuntimeError):
    """Connection establishment or stream I/O failed."""


@dataclass
class SFMessage:
    """Wire envelope for one committed factor batch."""

    sender: int
    clock: int
    model_id: int
    coeff: float
    pairs: list[SFPair] = field(default_factory=list)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, SFMessage)
            and self.sender == other.sender
            and self.clock == other.clock
            and self.model_id == other.model_id
            and struct.pack("<d", self.coeff) == struct.pack("<d", other.coeff)
            and len(self.pairs) == len(other.pairs)
            and all(a.storage_equal(b) for a, b in zip(self.pairs, other.pairs))
        )

    @property
    def value_count(self) -> int:
        return sum(p.u.nnz + p.v.nnz for p in self.pairs)


@dataclass
class MatrixMessage:
    """Wire envelope for one dense parameter/update matrix."""

    sender: int
    clock: int
    values: np.ndarray  # 2-D float64

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, MatrixMessage)
            and self.sender == other.sender
            and self.clock == other.clock
            and self.values.shape == other.values.shape
            and self.values.tobytes() == other.values.tobytes()
        )

    @property
    def value_count(self) -> int:
        return int(self.values.size)


def _encode_factor(out: bytearray, vec: Vec64) -> None:
    if vec.is_sparse:
        out += _FACTOR_HEAD.pack(1, vec.n, vec.nnz)
        out += vec.sparse_values.astype("<f8", copy=False).tobytes()
        out += vec.indices.astype("<u4", copy=False).tobytes()
    else:
        out += _FACTOR_HEAD.pack(0, vec.n, vec.n)
        out += vec.dense_values.astype("<f8", copy=False).tobytes()


def encode(msg: SFMessage | MatrixMessage) -> bytes:
    out = bytearray()
    if isinstance(msg, SFMessage):
        out += _PREFIX.pack(MAGIC, FRAME_SF, msg.sender, msg.clock)
        out += _SF_HEAD.pack(msg.model_id, msg.coeff, len(msg.pairs))
        for pair in msg.pairs:
            _encode_factor(out, pair.u)
            _encode_factor(out, pair.v)
    else:
        out += _PREFIX.pack(MAGIC, FRAME_MATRIX, msg.sender, msg.clock)
        out += _MAT_HEAD.pack(msg.values.shape[0], msg.values.shape[1])
        out += np.ascontiguousarray(msg.values, dtype="<f8").tobytes()
    out += _CRC.pack(zlib.crc32(bytes(out)))
    return bytes(out)


class _Reader:
    def __init__(self, buf: bytes, pos: int = 0):
        self.buf = buf
        self.pos = pos

    def take(self, n: int) -> bytes:
        end = self.pos + n
        if end > len(self.buf):
            raise CodecError("frame truncated")
        chunk = self.buf[self.pos : end]
        self.pos = end
        return chunk

    def unpack(self, st: struct.Struct):
        return st.unpack(self.take(st.size))


def _decode_factor(r: _Reader) -> Vec64:
    flag, dim, nnz = r.unpack(_FACTOR_HEAD)
    if flag not in (0, 1):
        raise CodecError(f"bad storage flag {flag}")
    if flag == 0:
        if nnz != dim:
            raise CodecError("dense factor with nnz != dim")
        values = np.frombuffer(r.take(8 * dim), dtype="<f8")
        return Vec64(dim, dense_values=values.astype(np.float64))
    if nnz > dim:
        raise CodecError("sparse factor with nnz > dim")
    values = np.frombuffer(r.take(8 * nnz), dtype="<f8").astype(np.float64)
    indices = np.frombuffer(r.take(4 * nnz), dtype="<u4").astype(np.uint32)
    if nnz:
        if int(indices[-1]) >= dim:
            raise CodecError("sparse index out of range")
        if nnz > 1 and not (np.diff(indices.astype(np.int64)) > 0).all():
            raise CodecError("sparse indices not strictly increasing")
    # Preserve the wire's storage kind exactly (bypass the densify rule).
    return Vec64(dim, indices=indices, sparse_values=values)


def decode(buf: bytes) -> SFMessage | MatrixMessage:
    if len(buf) < _PREFIX.size + _CRC.size:
        raise CodecError("frame shorter than any valid message")
    (stored_crc,) = _CRC.unpack(buf[-4:])
    if zlib.crc32(buf[:-4]) != stored_crc:
        raise CodecError("checksum mismatch")
    r = _Reader(buf)
    magic, frame, sender, clock = r.unpack(_PREFIX)
    if magic != MAGIC:
        raise CodecError(f"bad magic {magic!r}")
    if frame == FRAME_SF:
        model_id, coeff, count = r.unpack(_SF_HEAD)
        pairs = []
        for _ in range(count):
            u = _decode_factor(r)
            v = _decode_factor(r)
            pairs.append(SFPair(u=u, v=v))
        msg: SFMessage | MatrixMessage = SFMessage(
            sender=sender, clock=clock, model_id=model_id, coeff=coeff, pairs=pairs
        )
    elif frame == FRAME_MATRIX:
        rows, cols = r.unpack(_MAT_HEAD)
        values = np.frombuffer(r.take(8 * rows * cols), dtype="<f8")
        msg = MatrixMessage(
            sender=sender, clock=clock, values=values.astype(np.float64).reshape(rows, cols)
        )
    else:
        raise CodecError(f"unknown frame type {frame}")
    if r.pos != len(buf) - 4:
        raise CodecError("trailing bytes after payload")
    return msg


# ---------------------------------------------------------------------------
# Deterministic in-process simulator


class DelaySchedule:
    """Per-send delivery delays, in simulator steps.

    Either a fixed delay for every edge, a seeded random delay in
    [0, max_delay], or an explicit per-edge list consumed send by send.
    Whatever the delays, per-edge FIFO is preserved by clamping each
    delivery to be no earlier than the previous one on the same edge.
    """

    def __init__(self, fixed: int = 0, max_delay: int | None = None,
                 seed: int = 0, per_edge: dict | None = None):
        if fixed < 0:
            raise ValueError("delay must be >= 0")
        self.fixed = fixed
        self.max_delay = max_delay
        self.per_edge = {k: list(v) for k, v in per_edge.items()} if per_edge else None
        self._rng = np.random.default_rng(seed)

    def next_delay(self, src: int, dst: int) -> int:
        if self.per_edge is not None:
            queue = self.per_edge.get((src, dst))
            if queue:
                return int(queue.pop(0))
            return self.fixed
        if self.max_delay is not None:
            return int(self._rng.integers(0, self.max_delay + 1))
        return self.fixed


class SimNetwork:
    """Deterministic step-driven network carrying encoded frames.

    Messages are encoded at send time (so byte counters are exact) and
    decoded at delivery.  A message sent at step t with delay d becomes
    deliverable at step t + max(1, d): zero-delay traffic arrives on the
    next step, matching lockstep timing.
    """

    def __init__(self, worker_ids, delays: DelaySchedule | None = None, counters=None):
        self.workers = set(int(w) for w in worker_ids)
        self.delays = delays or DelaySchedule()
        self.counters = counters
        self.step_count = 0
        self._seq = 0
        self._in_flight: list[list] = []  # [deliver_at, seq, src, dst, payload]
        self._edge_last: dict[tuple[int, int], int] = {}

    def send(self, src: int, dst: int, msg: SFMessage | MatrixMessage) -> None:
        if src not in self.workers or dst not in self.workers:
            raise ValueError(f"unknown worker id on edge {src}->{dst}")
        payload = encode(msg)
        deliver_at = self.step_count + max(1, self.delays.next_delay(src, dst))
        deliver_at = max(deliver_at, self._edge_last.get((src, dst), 0))
        self._edge_last[(src, dst)] = deliver_at
        self._in_flight.append([deliver_at, self._seq, src, dst, payload])
        self._seq += 1
        if self.counters is not None:
            self.counters.record_send(src, dst, msg.value_count, len(payload))

    def pending(self) -> int:
        return len(self._in_flight)

    def step(self) -> list[tuple[int, int, SFMessage | MatrixMessage]]:
        """Advance one step; return (src, dst, message) due for delivery,
        ordered by send sequence (FIFO per edge and globally stable)."""
        self.step_count += 1
        due = [m for m in self._in_flight if m[0] <= self.step_count]
        if not due:
            return []
        self._in_flight = [m for m in self._in_flight if m[0] > self.step_count]
        due.sort(key=lambda m: m[1])
        return [(src, dst, decode(payload)) for _, _, src, dst, payload in due]


# ---------------------------------------------------------------------------
# TCP mesh


def load_peer_file(path) -> dict[int, tuple[str, int]]:
    """Parse a peer config file: one `worker_id host:port` per line."""
    peers: dict[int, tuple[str, int]] = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            wid, addr = line.split()
            host, port = addr.rsplit(":", 1)
            peers[int(wid)] = (host, int(port))
    return peers


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    remaining = n
    while remaining > 0:
        chunk = sock.recv(remaining)
        if not chunk:
            raise ConnectionError("peer closed the stream")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def _read_frame(sock: socket.socket) -> bytes:
    """Read one self-delimiting frame off an ordered stream."""
    head = _recv_exact(sock, _PREFIX.size)
    magic, frame, _, _ = _PREFIX.unpack(head)
    if magic != MAGIC:
        raise CodecError(f"stream desync: bad magic {magic!r}")
    buf = bytearray(head)
    if frame == FRAME_SF:
        sf_head = _recv_exact(sock, _SF_HEAD.size)
        buf += sf_head
        _, _, count = _SF_HEAD.unpack(sf_head)
        for _ in range(2 * count):
            fh = _recv_exact(sock, _FACTOR_HEAD.size)
            buf += fh
            flag, _, nnz = _FACTOR_HEAD.unpack(fh)
            buf += _recv_exact(sock, 8 * nnz + (4 * nnz if flag == 1 else 0))
    elif frame == FRAME_MATRIX:
        mh = _recv_exact(sock, _MAT_HEAD.size)
        buf += mh
        rows, cols = _MAT_HEAD.unpack(mh)
        buf += _recv_exact(sock, 8 * rows * cols)
    else:
        raise CodecError(f"stream desync: unknown frame {frame}")
    buf += _recv_exact(sock, _CRC.size)
    return bytes(buf)


class TcpMesh:
    """One worker's live transport: a listener plus one outgoing stream
    per broadcast target.

    Incoming frames are decoded on reader threads and handed to the
    ``deliver`` callback; frames failing the checksum are dropped and
    logged, never raised.  Send failures surface as TransportError so a
    dead receiver cannot hang the sender.
    """

    HELLO = struct.Struct("<I")

    def __init__(self, worker_id: int, deliver, counters=None,
                 bind_host: str | None = None, send_timeout: float = 10.0):
        self.worker_id = worker_id
        self.deliver = deliver
        self.counters = counters
        self.send_timeout = send_timeout
        self._out: dict[int, socket.socket] = {}
        self._out_locks: dict[int, threading.Lock] = {}
        self._readers: list[threading.Thread] = []
        self._accept_thread: threading.Thread | None = None
        self._closing = threading.Event()
        host = bind_host or os.environ.get("SFB_BIND", "127.0.0.1")
        self._listener = socket.create_server((host, 0))
        self.address = self._listener.getsockname()

    def start_accepting(self, expected_sources: int) -> None:
        def accept_loop():
            for _ in range(expected_sources):
                try:
                    conn, _ = self._listener.accept()
                except OSError:
                    return
                (src,) = self.HELLO.unpack(_recv_exact(conn, self.HELLO.size))
                t = threading.Thread(
                    target=self._read_loop, args=(conn, src), daemon=True
                )
                t.start()
                self._readers.append(t)

        self._accept_thread = threading.Thread(target=accept_loop, daemon=True)
        self._accept_thread.start()

    def connect(self, peers: dict[int, tuple[str, int]], deadline: float = 10.0) -> None:
        """Open a stream to every peer in ``peers``; retry with backoff
        until ``deadline`` seconds, then raise TransportError."""
        for dst, addr in peers.items():
            t0 = time.monotonic()
            backoff = 0.02
            while True:
                try:
                    sock = socket.create_connection(addr, timeout=self.send_timeout)
                    break
                except OSError as exc:
                    if time.monotonic() - t0 > deadline:
                        raise TransportError(f"cannot reach worker {dst} at {addr}: {exc}")
                    time.sleep(backoff)
                    backoff = min(backoff * 2, 0.5)
            sock.settimeout(self.send_timeout)
            sock.sendall(self.HELLO.pack(self.worker_id))
            self._out[dst] = sock
            self._out_locks[dst] = threading.Lock()

    def send(self, dst: int, msg: SFMessage | MatrixMessage) -> None:
        sock = self._out.get(dst)
        if sock is None:
            raise TransportError(f"no stream to worker {dst}")
        payload = encode(msg)
        try:
            with self._out_locks[dst]:
                sock.sendall(payload)
        except OSError as exc:
            raise TransportError(f"send to worker {dst} failed: {exc}") from exc
        if self.counters is not None:
            self.counters.record_send(self.worker_id, dst, msg.value_count, len(payload))

    def _read_loop(self, conn: socket.socket, src: int) -> None:
        try:
            while not self._closing.is_set():
                frame = _read_frame(conn)
                try:
                    msg = decode(frame)
                except CodecError as exc:
                    log.warning("worker %d: dropping corrupt frame from %d: %s",
                                self.worker_id, src, exc)
                    continue
                self.deliver(msg)
        except (ConnectionError, OSError, CodecError) as exc:
            if not self._closing.is_set():
                log.debug("worker %d: stream from %d ended: %s", self.worker_id, src, exc)
        finally:
            conn.close()

    def close(self) -> None:
        self._closing.set()
        for sock in self._out.values():
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            sock.close()
        self._listener.close()
