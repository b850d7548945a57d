"""Fetch pipeline simulator.

Models the transmission, decode and restore pipeline of remote chunk
fetching: bandwidth estimation from the last chunk, bubble-minimizing
resolution selection against a profiled lookup table, a serial link feeding a
bounded decode pool, and frame-wise restoration into paged memory. All
simulation is single-threaded and deterministic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from . import codec, layout as L
from .kvmodel import PagedMemory

MB = 1e6  # chunk sizes are quoted in megabytes of 1e6 bytes
GBPS = 1e9  # and link rates in gigabits of 1e9 bits

BUNDLED_TABLES = ("h20", "l20", "a100", "stepdown")


class LookupTable:
    """Per-resolution decode latency vs pool load, switch penalty, chunk size."""

    def __init__(self, device, P, decode_s, penalty_s, size_mb):
        self.device = device
        self.P = int(P)
        self.decode_s = {r: list(map(float, v)) for r, v in decode_s.items()}
        self.penalty_s = {r: float(v) for r, v in penalty_s.items()}
        self.size_mb = {r: float(v) for r, v in size_mb.items()}
        if self.P < 1:
            raise ValueError("pool size must be >= 1")
        for r in L.RESOLUTION_ORDER:
            if r not in self.decode_s:
                raise ValueError(f"missing decode row for {r}")
            row = self.decode_s[r]
            if len(row) != self.P:
                raise ValueError(f"decode row for {r} must have P={self.P} entries")
            if any(v <= 0 for v in row):
                raise ValueError("decode latencies must be positive")
            if any(b < a for a, b in zip(row, row[1:])):
                raise ValueError(f"decode latencies for {r} must be non-decreasing")
            if self.size_mb[r] <= 0:
                raise ValueError("chunk sizes must be positive")
        if self.penalty_s["R1080"] != 0.0:
            raise ValueError("penalty at the top class must be zero")

    def tau_dec(self, resolution, load):
        if not 1 <= load <= self.P:
            raise ValueError(f"pool load must be in [1, {self.P}]")
        try:
            return self.decode_s[resolution][load - 1]
        except KeyError:
            raise KeyError(f"no decode row for {resolution}") from None

    def tau_penalty(self, resolution):
        return self.penalty_s[resolution]

    def size_bytes(self, resolution):
        return self.size_mb[resolution] * MB

    @classmethod
    def from_json(cls, obj):
        return cls(
            obj["device"], obj["P"], obj["decode_s"], obj["penalty_s"], obj["size_mb"]
        )

    @classmethod
    def load(cls, name):
        """Load a bundled table ('h20', 'l20', 'a100', 'stepdown') or a path."""
        if name in BUNDLED_TABLES:
            text = resources.files("framekv.data").joinpath(f"{name}.json").read_text()
        else:
            with open(name) as fh:
                text = fh.read()
        return cls.from_json(json.loads(text))


def load_table_json(name):
    """Raw JSON of a bundled table, including any demo scenario block."""
    if name in BUNDLED_TABLES:
        text = resources.files("framekv.data").joinpath(f"{name}.json").read_text()
        return json.loads(text)
    with open(name) as fh:
        return json.load(fh)


class BandwidthTrace:
    """Piecewise-constant link rate: [(t_start seconds, rate Gbps)]."""

    def __init__(self, segments):
        segs = [(float(t), float(r)) for t, r in segments]
        if not segs:
            raise ValueError("trace must have at least one segment")
        if segs[0][0] != 0.0:
            raise ValueError("trace must start at t=0")
        if any(b[0] <= a[0] for a, b in zip(segs, segs[1:])):
            raise ValueError("segment start times must be strictly increasing")
        if any(r <= 0 for _, r in segs):
            raise ValueError("rates must be positive")
        self.segments = segs

    @classmethod
    def constant(cls, gbps):
        return cls([(0.0, gbps)])

    def rate_at(self, t):
        rate = self.segments[0][1]
        for t0, r in self.segments:
            if t0 <= t:
                rate = r
            else:
                break
        return rate

    def next_boundary(self, t):
        for t0, _ in self.segments:
            if t0 > t:
                return t0
        return float("inf")

    def transfer_end(self, start, nbytes):
        """Time at which nbytes pushed from `start` complete."""
        bits = nbytes * 8.0
        t = start
        while bits > 1e-9:
            rate_bps = self.rate_at(t) * GBPS
            t_next = self.next_boundary(t)
            span = t_next - t
            if bits <= rate_bps * span:
                return t + bits / rate_bps
            bits -= rate_bps * span
            t = t_next
        return t


def estimate_bandwidth(history, prior_gbps=None):
    """Gbps from the last transfer record (bytes, duration); prior on cold start."""
    if history:
        nbytes, duration = history[-1]
        if duration <= 0:
            raise ValueError("transfer duration must be positive")
        return nbytes * 8.0 / duration / GBPS
    if prior_gbps is None:
        raise RuntimeError("no transfer history and no bandwidth prior configured")
    return float(prior_gbps)


def select_resolution(bw_gbps, pool_load, active_res, table: LookupTable):
    """Bubble-minimizing resolution: argmin |tau_trans - tau_dec - tau_penalty|.

    The switch penalty applies only to candidates that differ from the active
    resolution. Ties break toward the higher resolution class.
    """
    best = None
    best_delta = None
    for r in L.RESOLUTION_ORDER:
        tau_trans = table.size_bytes(r) * 8.0 / (bw_gbps * GBPS)
        tau = table.tau_dec(r, pool_load)
        pen = table.tau_penalty(r) if r != active_res else 0.0
        delta = abs(tau_trans - tau - pen)
        if best_delta is None or delta <= best_delta:
            best, best_delta = r, delta
    return best


@dataclass
class FetchTimeline:
    policy: str
    records: list = field(default_factory=list)
    ttft: float = 0.0
    total_bubble: float = 0.0
    peak_restore_bytes: int = 0

    def to_json(self):
        return {
            "policy": self.policy,
            "ttft_s": self.ttft,
            "total_bubble_s": self.total_bubble,
            "peak_restore_bytes": self.peak_restore_bytes,
            "chunks": self.records,
        }

    def csv_rows(self):
        cols = [
            "chunk",
            "resolution",
            "bw_est_gbps",
            "transfer_start",
            "transfer_end",
            "tau_trans",
            "decode_start",
            "decode_end",
            "tau_dec",
            "penalty",
            "bubble",
        ]
        yield cols
        for r in self.records:
            yield [r[c] for c in cols]


def _chunk_sizes(chunks, table):
    if isinstance(chunks, int):
        return [{r: table.size_bytes(r) for r in L.RESOLUTION_ORDER}] * chunks
    out = []
    for c in chunks:
        out.append({r: float(b) for r, b in c.items()})
    return out


def simulate_fetch(
    chunks,
    trace: BandwidthTrace,
    table: LookupTable,
    policy="adaptive",
    prior_gbps=None,
    initial_active="R1080",
    epilogue_s=0.0,
):
    """Event simulation of the serial-link transfer + decode-pool pipeline.

    `chunks` is a chunk count (table sizes apply) or a list of per-chunk
    {resolution: bytes} maps. `policy` is "adaptive" or "fixed:<class>".
    A chunk's decode occupies one pool slot for tau_dec at the slot load plus
    the switch penalty when the resolution changed. Bubbles are decoder idle
    gaps between consecutive jobs on the same slot; a slot's first job is
    warm-up and does not count.
    """
    sizes = _chunk_sizes(chunks, table)
    if not sizes:
        raise ValueError("chunk list must be non-empty")
    fixed_res = None
    if policy != "adaptive":
        name = policy.split(":", 1)[1] if ":" in policy else policy
        if name not in L.RESOLUTION_ORDER:
            raise ValueError(f"unknown policy {policy!r}")
        fixed_res = name
        for i, sz in enumerate(sizes):
            if fixed_res not in sz:
                raise ValueError(f"chunk {i} has no {fixed_res} entry")

    P = table.P
    dec_free = [0.0] * P
    dec_started = [False] * P
    link_free = 0.0
    active = initial_active
    history = []
    timeline = FetchTimeline(policy=policy)

    for i, size_map in enumerate(sizes):
        t_sel = link_free
        busy = sum(1 for d in dec_free if d > t_sel)
        load = min(P, busy + 1)
        if fixed_res is None:
            bw = estimate_bandwidth(history, prior_gbps)
            res = select_resolution(bw, load, active, table)
        else:
            bw = estimate_bandwidth(history, prior_gbps) if (history or prior_gbps) else None
            res = fixed_res
        nbytes = size_map.get(res, table.size_bytes(res))
        t_end = trace.transfer_end(t_sel, nbytes)
        tau_trans = t_end - t_sel
        penalty = table.tau_penalty(res) if res != active else 0.0
        active = res
        history.append((nbytes, tau_trans))
        link_free = t_end

        slot = min(range(P), key=lambda k: (dec_free[k], k))
        start = max(t_end, dec_free[slot])
        bubble = start - dec_free[slot] if dec_started[slot] else 0.0
        others = sum(1 for k in range(P) if k != slot and dec_free[k] > start)
        tau_dec = table.tau_dec(res, min(P, others + 1))
        dec_free[slot] = start + tau_dec + penalty
        dec_started[slot] = True
        timeline.total_bubble += bubble
        timeline.records.append(
            {
                "chunk": i,
                "resolution": res,
                "bw_est_gbps": bw,
                "transfer_start": t_sel,
                "transfer_end": t_end,
                "tau_trans": tau_trans,
                "decode_start": start,
                "decode_end": dec_free[slot],
                "tau_dec": tau_dec,
                "penalty": penalty,
                "bubble": bubble,
            }
        )

    timeline.ttft = max(dec_free) + epilogue_s
    return timeline


@dataclass
class PipelineCheck:
    T_decode: list
    T_comp: list
    L_buf: int

    def __post_init__(self):
        if len(self.T_decode) != len(self.T_comp):
            raise ValueError("per-layer lists must have equal length")
        if not 0 <= self.L_buf <= len(self.T_decode):
            raise ValueError("L_buf must be in [0, L_total]")

    @property
    def L_total(self):
        return len(self.T_decode)


def check_nonblocking(pc: PipelineCheck) -> bool:
    """True iff sum(T_decode[:k]) <= sum(T_comp[:k-1]) for all k > L_buf.

    Equivalent to a layer-by-layer simulation of decode feeding compute
    showing zero compute stall.
    """
    dec = 0.0
    comp = 0.0
    for j in range(pc.L_total):
        dec += pc.T_decode[j]
        if j + 1 > pc.L_buf and dec > comp:
            return False
        comp += pc.T_comp[j]
    return True


def restore_stream(bs, plan: L.FramePlan, cfg_layout: L.LayoutConfig, mem: PagedMemory,
                   layer_base=0, token_base=0):
    """Frame-wise restoration: write each decoded frame's tiles immediately.

    The live buffer is the decoder's current frame plus its reference frame;
    whole-chunk buffering never happens. Returns tokens written and the peak
    buffer byte count.
    """
    th, tw = cfg_layout.tile_h, cfg_layout.tile_w
    written = 0
    stats = {}

    def on_frame(f, frame):
        nonlocal written
        for i, r, c in plan.frame_slots(f):
            tile = frame[:, r * th : (r + 1) * th, c * tw : (c + 1) * tw]
            signed = (tile.astype(np.int16) - 128).astype(np.int8)
            tensor = L.inverse_layout(signed, cfg_layout)[0]
            for p in range(3):
                mem.page_write(token_base + i, layer_base + p, tensor[p])
            written += 1

    codec.decode_frames(bs, codec.CodecConfig(gop=plan.F), on_frame, stats=stats)
    return {"tokens_written": written, "peak_buffer_bytes": stats["peak_live_bytes"]}


def restore_chunk_wise(bs, plan: L.FramePlan, cfg_layout: L.LayoutConfig, mem: PagedMemory,
                       layer_base=0, token_base=0):
    """Baseline that decodes every frame before restoring any of them."""
    frames = []
    held = 0
    peak = 0

    def on_frame(f, frame):
        nonlocal held, peak
        frames.append(frame)
        held += frame.nbytes
        peak = max(peak, held + frame.nbytes)  # plus the decoder's reference

    codec.decode_frames(bs, codec.CodecConfig(gop=plan.F), on_frame)
    th, tw = cfg_layout.tile_h, cfg_layout.tile_w
    written = 0
    for f, frame in enumerate(frames):
        for i, r, c in plan.frame_slots(f):
            tile = frame[:, r * th : (r + 1) * th, c * tw : (c + 1) * tw]
            signed = (tile.astype(np.int16) - 128).astype(np.int8)
            tensor = L.inverse_layout(signed, cfg_layout)[0]
            for p in range(3):
                mem.page_write(token_base + i, layer_base + p, tensor[p])
            written += 1
    return {"tokens_written": written, "peak_buffer_bytes": peak}


def demo_scenario():
    """The bundled bandwidth step-down scenario: table, trace and run inputs."""
    obj = load_table_json("stepdown")
    table = LookupTable.from_json(obj)
    sc = obj["scenario"]
    trace = BandwidthTrace(sc["trace_gbps"])
    return {
        "table": table,
        "trace": trace,
        "chunks": sc["chunks"],
        "prior_gbps": sc["prior_gbps"],
        "initial_active": sc["initial_active"],
    }
