"""Chunk storage server and client over a framed TCP protocol.

One request per connection round. Request frame, little-endian:

  magic 'KVFC' | u8 version | cache_id 16B | u32 chunk_index | u8 resolution

Response frame:

  u8 status | u32 metadata_len | metadata JSON | u64 payload_len | payload

status 0 = ok, 1 = not-found, 2 = protocol-error. The metadata echoes the
container header plus its embedded layout/scales blob, so one round trip is
enough to decode the payload. An optional token bucket throttles server
egress to emulate a constrained link.
"""

from __future__ import annotations

import json
import os
import socket
import socketserver
import struct
import threading
import time

from . import container as C
from . import layout as L

REQ = struct.Struct("<4sB16sIB")
MAGIC = b"KVFC"
VERSION = 1

ST_OK = 0
ST_NOT_FOUND = 1
ST_PROTOCOL = 2

ADDR_ENV = "KVFETCH_ADDR"
RATE_ENV = "KVFETCH_RATE_GBPS"
DEFAULT_ADDR = "127.0.0.1:0"


class ProtocolError(RuntimeError):
    pass


class ChunkNotFound(RuntimeError):
    pass


class FetchTimeout(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# wire messages


class WireRequest:
    def __init__(self, cache_id, chunk_index, resolution):
        if len(cache_id) != 16:
            raise ValueError("cache_id must be 16 bytes")
        if not 0 <= chunk_index <= 0xFFFFFFFF:
            raise ValueError("chunk_index out of u32 range")
        if isinstance(resolution, str):
            resolution = L.RESOLUTION_CODE[resolution]
        if not 0 <= resolution <= 0xFF:
            raise ValueError("resolution code out of u8 range")
        self.cache_id = bytes(cache_id)
        self.chunk_index = int(chunk_index)
        self.resolution = int(resolution)

    def encode(self):
        return REQ.pack(MAGIC, VERSION, self.cache_id, self.chunk_index, self.resolution)

    @classmethod
    def decode(cls, data):
        if len(data) != REQ.size:
            raise ProtocolError(f"request must be {REQ.size} bytes")
        magic, version, cache_id, chunk_index, resolution = REQ.unpack(data)
        if magic != MAGIC:
            raise ProtocolError("bad magic")
        if version != VERSION:
            raise ProtocolError(f"unsupported version {version}")
        return cls(cache_id, chunk_index, resolution)

    def __eq__(self, other):
        return isinstance(other, WireRequest) and (
            (self.cache_id, self.chunk_index, self.resolution)
            == (other.cache_id, other.chunk_index, other.resolution)
        )


class WireResponse:
    def __init__(self, status, metadata, payload=b""):
        if not 0 <= status <= 0xFF:
            raise ValueError("status out of u8 range")
        self.status = int(status)
        self.metadata = metadata
        self.payload = bytes(payload)

    def encode(self):
        meta = json.dumps(self.metadata, sort_keys=True).encode()
        return (
            struct.pack("<BI", self.status, len(meta))
            + meta
            + struct.pack("<Q", len(self.payload))
            + self.payload
        )

    @classmethod
    def decode(cls, data):
        if len(data) < 5:
            raise ProtocolError("response shorter than header")
        status, meta_len = struct.unpack_from("<BI", data, 0)
        pos = 5
        if len(data) < pos + meta_len + 8:
            raise ProtocolError("response metadata truncated")
        metadata = json.loads(data[pos : pos + meta_len].decode())
        pos += meta_len
        (payload_len,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        if len(data) != pos + payload_len:
            raise ProtocolError("response payload length mismatch")
        return cls(status, metadata, data[pos:])

    def __eq__(self, other):
        return isinstance(other, WireResponse) and (
            (self.status, self.metadata, self.payload)
            == (other.status, other.metadata, other.payload)
        )


# ---------------------------------------------------------------------------
# store


class ChunkStore:
    """Read-only directory of .kvfc containers, indexed by header."""

    def __init__(self, root):
        self.root = root
        self.index = {}
        for name in sorted(os.listdir(root)):
            if not name.endswith(".kvfc"):
                continue
            path = os.path.join(root, name)
            with open(path, "rb") as fh:
                head = fh.read(65536)
            header, entries = C.parse_header(head)
            key = (header["cache_id"], header["chunk_index"])
            self.index[key] = {
                "path": path,
                "entries": {code: (off, length) for code, off, length in entries},
                "header": header,
            }

    def __len__(self):
        return len(self.index)

    def lookup(self, cache_id, chunk_index, code):
        ent = self.index.get((bytes(cache_id), chunk_index))
        if ent is None or code not in ent["entries"]:
            return None
        off, length = ent["entries"][code]
        with open(ent["path"], "rb") as fh:
            fh.seek(off)
            payload = fh.read(length)
        if len(payload) != length:
            raise IOError(f"short read from {ent['path']}")
        h = ent["header"]
        metadata = dict(h["metadata"])
        metadata.update(
            cache_id=h["cache_id"].hex(),
            chunk_index=h["chunk_index"],
            token_start=h["token_start"],
            token_count=h["token_count"],
            layer_triplet_index=h["layer_triplet_index"],
            resolution=L.RESOLUTION_ORDER[code],
        )
        return metadata, payload


# ---------------------------------------------------------------------------
# rate limiting


class TokenBucket:
    """Egress throttle: rate_gbps sustained, one quantum of burst."""

    def __init__(self, rate_gbps, quantum_s=0.010):
        if rate_gbps <= 0:
            raise ValueError("rate must be positive")
        self.rate = rate_gbps * 1e9  # bits per second
        self.cap = self.rate * quantum_s
        self.allowance = self.cap
        self.last = time.monotonic()
        self.lock = threading.Lock()

    def consume(self, nbytes):
        bits = nbytes * 8.0
        while True:
            with self.lock:
                now = time.monotonic()
                self.allowance = min(self.cap, self.allowance + (now - self.last) * self.rate)
                self.last = now
                if self.allowance >= bits:
                    self.allowance -= bits
                    return
                wait = (bits - self.allowance) / self.rate
            time.sleep(min(max(wait, 0.0005), 0.010))


def _recv_exact(sock, n):
    buf = bytearray()
    while len(buf) < n:
        part = sock.recv(n - len(buf))
        if not part:
            break
        buf.extend(part)
    return bytes(buf)


# ---------------------------------------------------------------------------
# server


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        server = self.server
        data = _recv_exact(self.request, REQ.size)
        try:
            req = WireRequest.decode(data)
        except ProtocolError as e:
            self._send(WireResponse(ST_PROTOCOL, {"error": str(e)}))
            return
        if req.resolution >= len(L.RESOLUTION_ORDER):
            self._send(WireResponse(ST_PROTOCOL, {"error": "unknown resolution code"}))
            return
        found = server.store.lookup(req.cache_id, req.chunk_index, req.resolution)
        if found is None:
            self._send(
                WireResponse(
                    ST_NOT_FOUND,
                    {"error": f"no chunk ({req.cache_id.hex()}, {req.chunk_index})"},
                )
            )
            return
        metadata, payload = found
        self._send(WireResponse(ST_OK, metadata, payload))

    def _send(self, resp):
        blob = resp.encode()
        bucket = self.server.bucket
        if bucket is None:
            self.request.sendall(blob)
            return
        step = max(4096, int(bucket.cap / 8))
        for i in range(0, len(blob), step):
            piece = blob[i : i + step]
            bucket.consume(len(piece))
            self.request.sendall(piece)


class _Server(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


class ServerHandle:
    def __init__(self, server, thread):
        self._server = server
        self._thread = thread
        self.address = server.server_address[:2]

    def close(self):
        self._server.shutdown()
        self._server.server_close()
        self._thread.join(timeout=5)

    __enter__ = lambda self: self
    __exit__ = lambda self, *exc: self.close()


def parse_address(address=None):
    if address is None:
        address = os.environ.get(ADDR_ENV, DEFAULT_ADDR)
    if isinstance(address, (tuple, list)):
        return address[0], int(address[1])
    host, _, port = address.rpartition(":")
    return host or "127.0.0.1", int(port)


def serve(store: ChunkStore, listen_address=None, rate_limit_gbps=None):
    """Start a background chunk server; returns a closeable handle."""
    if rate_limit_gbps is None:
        env = os.environ.get(RATE_ENV)
        rate_limit_gbps = float(env) if env else None
    server = _Server(parse_address(listen_address), _Handler)
    server.store = store
    server.bucket = TokenBucket(rate_limit_gbps) if rate_limit_gbps else None
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return ServerHandle(server, thread)


# ---------------------------------------------------------------------------
# client


def fetch_chunk(address, cache_id, chunk_index, resolution, timeout_s=30.0):
    """One request round. Returns (payload, metadata, measured tau_trans).

    Raises FetchTimeout, ChunkNotFound or ProtocolError; the measured
    duration covers request send to last payload byte, which is what the
    bandwidth estimator wants.
    """
    req = WireRequest(cache_id, chunk_index, resolution)
    host, port = parse_address(address)
    try:
        with socket.create_connection((host, port), timeout=timeout_s) as sock:
            sock.settimeout(timeout_s)
            t0 = time.monotonic()
            sock.sendall(req.encode())
            head = _recv_exact(sock, 5)
            if len(head) != 5:
                raise ProtocolError("connection closed before response header")
            status, meta_len = struct.unpack("<BI", head)
            meta_raw = _recv_exact(sock, meta_len)
            if len(meta_raw) != meta_len:
                raise ProtocolError("metadata truncated")
            lenb = _recv_exact(sock, 8)
            if len(lenb) != 8:
                raise ProtocolError("payload length truncated")
            (payload_len,) = struct.unpack("<Q", lenb)
            payload = _recv_exact(sock, payload_len)
            if len(payload) != payload_len:
                raise ProtocolError("payload truncated")
            tau_trans = time.monotonic() - t0
    except socket.timeout as e:
        raise FetchTimeout(f"fetch from {host}:{port} timed out") from e
    metadata = json.loads(meta_raw.decode()) if meta_raw else {}
    if status == ST_NOT_FOUND:
        raise ChunkNotFound(metadata.get("error", "chunk not found"))
    if status == ST_PROTOCOL:
        raise ProtocolError(metadata.get("error", "protocol error"))
    if status != ST_OK:
        raise ProtocolError(f"unknown status {status}")
    return payload, metadata, tau_trans


def decode_fetched(metadata, payload):
    """Rebuild the int8 slab from one fetch_chunk result."""
    code = L.RESOLUTION_CODE[metadata["resolution"]]
    cont = C.ChunkContainer(
        cache_id=bytes.fromhex(metadata["cache_id"]),
        chunk_index=metadata["chunk_index"],
        token_start=metadata["token_start"],
        token_count=metadata["token_count"],
        layer_triplet_index=metadata["layer_triplet_index"],
        metadata=metadata,
        payloads={code: payload},
    )
    return C.unpack_chunk(cont, code)


def live_fetch_pipeline(
    address,
    chunks,
    table,
    policy="adaptive",
    prior_gbps=None,
    initial_active="R1080",
    timeout_s=30.0,
    on_chunk=None,
):
    """Measured counterpart of the fetch simulator over a live server.

    `chunks` is a list of (cache_id, chunk_index). The next transfer overlaps
    the previous chunk's decode, which runs on a worker thread. Returns a
    FetchTimeline whose records carry wall-clock times; on_chunk, if given,
    receives (record, decoded slab) after each decode.
    """
    from .fetchsim import FetchTimeline, estimate_bandwidth, select_resolution

    fixed_res = None
    if policy != "adaptive":
        name = policy.split(":", 1)[1] if ":" in policy else policy
        if name not in L.RESOLUTION_ORDER:
            raise ValueError(f"unknown policy {policy!r}")
        fixed_res = name

    timeline = FetchTimeline(policy=policy)
    history = []
    active = initial_active
    worker = None
    dec_end = {"t": None, "started": False}
    base = time.monotonic()

    def decode_job(rec, metadata, payload):
        t0 = time.monotonic()
        slab = decode_fetched(metadata, payload)
        t1 = time.monotonic()
        rec["decode_start"] = t0 - base
        rec["decode_end"] = t1 - base
        rec["tau_dec"] = t1 - t0
        if dec_end["started"]:
            rec["bubble"] = max(0.0, t0 - base - dec_end["t"])
            timeline.total_bubble += rec["bubble"]
        dec_end["t"] = t1 - base
        dec_end["started"] = True
        if on_chunk is not None:
            on_chunk(rec, slab)

    try:
        for i, (cache_id, chunk_index) in enumerate(chunks):
            bw = estimate_bandwidth(history, prior_gbps) if (history or prior_gbps) else None
            if fixed_res is not None:
                res = fixed_res
            else:
                if bw is None:
                    raise ValueError("adaptive policy needs a bandwidth prior")
                res = select_resolution(bw, 1, active, table)
            active = res
            t_start = time.monotonic()
            payload, metadata, tau = fetch_chunk(
                address, cache_id, chunk_index, res, timeout_s
            )
            t_end = time.monotonic()
            history.append((len(payload), tau))
            rec = {
                "chunk": i,
                "resolution": res,
                "bw_est_gbps": bw,
                "transfer_start": t_start - base,
                "transfer_end": t_end - base,
                "tau_trans": tau,
                "decode_start": None,
                "decode_end": None,
                "tau_dec": None,
                "penalty": 0.0,
                "bubble": 0.0,
            }
            timeline.records.append(rec)
            if worker is not None:
                worker.join()
            worker = threading.Thread(target=decode_job, args=(rec, metadata, payload))
            worker.start()
    finally:
        if worker is not None:
            worker.join()
    timeline.ttft = dec_end["t"] if dec_end["t"] is not None else 0.0
    timeline.peak_restore_bytes = 0
    return timeline
