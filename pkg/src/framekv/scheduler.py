"""Fetching-aware request scheduler simulator.

Requests arrive on a trace and are admitted FCFS at fixed iteration
boundaries. Non-reuse requests pay a prefill cost; reuse requests wait in a
dedicated waiting_for_KV queue while their chunks are fetched in the
background, so they never block the running batch. The fetch side is a fluid
co-simulation: concurrent fetch jobs split the link bandwidth evenly, each job
transfers its chunks serially and decodes them on its own unit, and the
resolution of every chunk is picked by the same bandwidth-adaptive rule the
fetch pipeline simulator uses. Optionally a job that has buffered enough
leading layers can be admitted before its fetch finishes, gated by the
non-blocking pipeline condition.

Everything runs on one deterministic event loop; background fetches are
completion events, not threads.
"""

from __future__ import annotations

import bisect
import heapq
import json
import math
from collections import deque

import numpy as np

from .fetchsim import (
    BandwidthTrace,
    LookupTable,
    PipelineCheck,
    check_nonblocking,
    estimate_bandwidth,
    select_resolution,
)

GBPS = 1e9
EPS = 1e-9
EPS_BITS = 1e-3


# ---------------------------------------------------------------------------
# domain types


class Request:
    """One inference request on the arrival trace."""

    STATES = ("new", "waiting", "waiting_for_KV", "running", "done")

    def __init__(self, id, arrival_s, context_tokens, reuse=False, chunk_ids=None):
        if context_tokens < 1:
            raise ValueError("context_tokens must be >= 1")
        if arrival_s < 0:
            raise ValueError("arrival_s must be >= 0")
        self.id = str(id)
        self.arrival_s = float(arrival_s)
        self.context_tokens = int(context_tokens)
        self.reuse = bool(reuse)
        self.chunk_ids = list(chunk_ids) if chunk_ids else []
        self.state = "new"
        self.ttft = None

    def to_json(self):
        return {
            "id": self.id,
            "arrival_s": self.arrival_s,
            "context_tokens": self.context_tokens,
            "reuse": self.reuse,
            "chunk_ids": self.chunk_ids,
        }

    @classmethod
    def from_json(cls, obj):
        return cls(
            obj["id"],
            obj["arrival_s"],
            obj["context_tokens"],
            obj.get("reuse", False),
            obj.get("chunk_ids"),
        )


class EngineModel:
    """Prefill-cost model of the serving engine.

    t_prefill(n) = a*n + b*n*n seconds. Admission happens only at multiples
    of quantum_s. batch_capacity_tokens of None means unlimited. layers sets
    how many 3-layer fetch units a reuse request needs. first_token_coeff is
    the per-context-token cost of the single forward pass a reuse request
    runs instead of prefill; the default 0.0 makes reuse first tokens free
    once the fetch lands.
    """

    def __init__(
        self,
        a=2e-5,
        b=1.5e-9,
        batch_capacity_tokens=None,
        quantum_s=0.010,
        layers=30,
        first_token_coeff=0.0,
    ):
        if a < 0 or b < 0 or first_token_coeff < 0:
            raise ValueError("coefficients must be >= 0")
        if quantum_s <= 0:
            raise ValueError("quantum_s must be positive")
        if layers < 1:
            raise ValueError("layers must be >= 1")
        if batch_capacity_tokens is not None and batch_capacity_tokens < 1:
            raise ValueError("batch_capacity_tokens must be >= 1 or None")
        self.a = float(a)
        self.b = float(b)
        self.batch_capacity_tokens = batch_capacity_tokens
        self.quantum_s = float(quantum_s)
        self.layers = int(layers)
        self.first_token_coeff = float(first_token_coeff)

    def t_prefill(self, n):
        return self.a * n + self.b * n * n

    def first_token_s(self, n):
        return self.first_token_coeff * n

    @property
    def triplet_units(self):
        return (self.layers + 2) // 3


class FetchEnv:
    """Inputs of the background fetch co-simulation."""

    def __init__(
        self,
        table: LookupTable,
        bandwidth: BandwidthTrace,
        prior_gbps=None,
        initial_active="R1080",
        chunk_tokens=10_000,
        early_admission=False,
        epilogue_s=0.0,
    ):
        self.table = table
        self.bandwidth = bandwidth
        self.prior_gbps = prior_gbps
        self.initial_active = initial_active
        self.chunk_tokens = int(chunk_tokens)
        self.early_admission = bool(early_admission)
        self.epilogue_s = float(epilogue_s)
        if self.chunk_tokens < 1:
            raise ValueError("chunk_tokens must be >= 1")
        if self.epilogue_s < 0:
            raise ValueError("epilogue_s must be >= 0")


class _FetchJob:
    """Serial chunk transfer + own decode unit for one reuse request."""

    def __init__(self, req, env, units):
        self.req = req
        self.units = units
        self.chunks_per_unit = max(1, math.ceil(req.context_tokens / env.chunk_tokens))
        self.n_chunks = units * self.chunks_per_unit
        self.sent = 0
        self.decoded = 0
        self.rem_bits = 0.0
        self.cur_res = None
        self.cur_start = 0.0
        self.cur_bytes = 0.0
        self.cur_penalty = 0.0
        self.active = env.initial_active
        self.history = []
        self.dec_free = 0.0
        self.unit_avail = []
        self.resolutions = []

    @property
    def transferring(self):
        return self.sent < self.n_chunks


# ---------------------------------------------------------------------------
# the simulator


class SchedulerSim:
    def __init__(self, engine: EngineModel, fetch_env: FetchEnv = None):
        self.engine = engine
        self.env = fetch_env
        self.t = 0.0
        self._seq = 0
        self.pending = []  # (arrival, seq, req) heap of submitted future arrivals
        self.waiting = deque()  # non-reuse FCFS
        self.waiting_kv = {}  # id -> req
        self.eligible = []  # [(arrival, seq, req)] sorted, ready for admission
        self.jobs = {}  # id -> _FetchJob
        self.decode_heap = []  # (time, seq, job)
        self.releases = []  # (time, tokens) heap
        self.batch_tokens = 0
        self.records = {}
        self._order = {}  # id -> submit seq, for FCFS tie-breaks
        self._adm_blocked = False
        self._unresolved = {}  # id -> (job, admit_t) early admissions pending

    # ----- public API ------------------------------------------------------

    def submit(self, req: Request):
        """Queue a request for its arrival time."""
        if req.id in self.records:
            raise ValueError(f"duplicate request id {req.id!r}")
        if req.arrival_s + EPS < self.t:
            raise ValueError("arrival_s is in the simulated past")
        if req.reuse and self.env is None:
            raise ValueError("reuse request needs a fetch environment")
        cap = self.engine.batch_capacity_tokens
        if cap is not None and req.context_tokens > cap:
            raise ValueError(f"request {req.id!r} exceeds batch capacity")
        self._seq += 1
        self._order[req.id] = self._seq
        self.records[req.id] = {
            "id": req.id,
            "reuse": req.reuse,
            "arrival_s": req.arrival_s,
            "context_tokens": req.context_tokens,
            "fetch_done_s": None,
            "admitted_s": None,
            "first_token_s": None,
            "early_admitted": False,
            "stall_s": 0.0,
            "ttft_s": None,
            "resolutions": None,
            "timeline": [],
        }
        heapq.heappush(self.pending, (req.arrival_s, self._seq, req))

    def on_fetch_complete(self, req_id, sim_time):
        """Move a waiting_for_KV request to the admission queue."""
        req = self.waiting_kv.pop(req_id, None)
        if req is None:
            raise KeyError(f"request {req_id!r} is not in waiting_for_KV")
        self.records[req_id]["fetch_done_s"] = sim_time
        bisect.insort(self.eligible, (req.arrival_s, self._order[req.id], req))
        self._adm_blocked = False

    def run(self):
        while self._advance():
            pass
        return self.metrics()

    # ----- bookkeeping -----------------------------------------------------

    def _mark(self, req, t, state):
        if state is not None:
            req.state = state
        self.records[req.id]["timeline"].append((round(t, 9), req.state))

    def _active_jobs(self):
        return [j for j in self.jobs.values() if j.transferring]

    # ----- fetch side ------------------------------------------------------

    def _start_job(self, req):
        job = _FetchJob(req, self.env, self.engine.triplet_units)
        self.jobs[req.id] = job
        self._dispatch_chunk(job)

    def _dispatch_chunk(self, job):
        env = self.env
        bw = estimate_bandwidth(job.history, env.prior_gbps)
        res = select_resolution(bw, 1, job.active, env.table)
        job.cur_res = res
        job.cur_start = self.t
        job.cur_bytes = env.table.size_bytes(res)
        job.cur_penalty = env.table.tau_penalty(res) if res != job.active else 0.0
        job.active = res
        job.rem_bits = job.cur_bytes * 8.0
        job.resolutions.append(res)

    def _finish_transfer(self, job):
        env = self.env
        duration = max(self.t - job.cur_start, EPS)
        job.history.append((job.cur_bytes, duration))
        start = max(self.t, job.dec_free)
        tau = env.table.tau_dec(job.cur_res, 1) + job.cur_penalty
        job.dec_free = start + tau
        self._seq += 1
        heapq.heappush(self.decode_heap, (job.dec_free, self._seq, job))
        job.sent += 1
        job.rem_bits = 0.0
        if job.transferring:
            self._dispatch_chunk(job)

    def _finish_decode(self, job, td):
        job.decoded += 1
        req = job.req
        if job.decoded % job.chunks_per_unit == 0:
            job.unit_avail.append(td)
            if (
                self.env.early_admission
                and req.id in self.waiting_kv
                and job.decoded < job.n_chunks
                and self._early_check(job)
            ):
                rec = self.records[req.id]
                rec["early_admitted"] = True
                del self.waiting_kv[req.id]
                bisect.insort(self.eligible, (req.arrival_s, self._order[req.id], req))
                self._adm_blocked = False
        if job.decoded == job.n_chunks:
            self.records[req.id]["resolutions"] = list(job.resolutions)
            if req.id in self.waiting_kv:
                self.on_fetch_complete(req.id, td)
            elif req.id in self._unresolved:
                self._resolve_early(req, td)
            else:
                # early-eligible but not yet admitted; settled at admission
                self.records[req.id]["fetch_done_s"] = td

    def _early_check(self, job):
        """Can the not-yet-fetched units be hidden behind layer compute?"""
        u_done = job.decoded // job.chunks_per_unit
        U = job.units
        env = self.env
        bw = estimate_bandwidth(job.history, env.prior_gbps)
        res = select_resolution(bw, 1, job.active, env.table)
        tau_t = env.table.size_bytes(res) * 8.0 / (bw * GBPS)
        tau_d = env.table.tau_dec(res, 1)
        per_unit = job.chunks_per_unit * max(tau_t, tau_d)
        comp_unit = self.engine.first_token_s(job.req.context_tokens) / U
        t_dec = [0.0] * u_done + [per_unit] * (U - u_done)
        return check_nonblocking(PipelineCheck(t_dec, [comp_unit] * U, u_done))

    def _early_first_token(self, req, job, admit_t):
        """Layer co-simulation: compute start waits for each unit's arrival."""
        comp_unit = self.engine.first_token_s(req.context_tokens) / job.units
        comp_end = admit_t
        stall = 0.0
        for avail in job.unit_avail:
            start = max(comp_end, avail)
            stall += start - comp_end
            comp_end = start + comp_unit
        return comp_end + self.env.epilogue_s, stall

    def _resolve_early(self, req, td):
        job, admit_t = self._unresolved.pop(req.id)
        ft, stall = self._early_first_token(req, job, admit_t)
        rec = self.records[req.id]
        rec["fetch_done_s"] = td
        rec["stall_s"] = stall
        self._finish_request(req, ft)
        self._seq += 1
        heapq.heappush(self.releases, (max(ft, self.t), self._seq, req.context_tokens))

    # ----- engine side -----------------------------------------------------

    def _admit(self, t):
        cap = self.engine.batch_capacity_tokens
        while self.waiting or self.eligible:
            heads = []
            if self.waiting:
                r = self.waiting[0]
                heads.append((r.arrival_s, self._order[r.id], "w", r))
            if self.eligible:
                a, s, r = self.eligible[0]
                heads.append((a, s, "e", r))
            _, _, which, req = min(heads)
            if cap is not None and self.batch_tokens + req.context_tokens > cap:
                self._adm_blocked = True
                return
            if which == "w":
                self.waiting.popleft()
            else:
                self.eligible.pop(0)
            rec = self.records[req.id]
            rec["admitted_s"] = t
            self._mark(req, t, "running")
            if not req.reuse:
                ft = t + self.engine.t_prefill(req.context_tokens)
                self._occupy(req, t, ft)
                self._finish_request(req, ft)
            elif rec["early_admitted"]:
                job = self.jobs[req.id]
                if rec["fetch_done_s"] is None:
                    self.batch_tokens += req.context_tokens
                    self._unresolved[req.id] = (job, t)
                else:
                    ft, stall = self._early_first_token(req, job, t)
                    rec["stall_s"] = stall
                    self._occupy(req, t, ft)
                    self._finish_request(req, ft)
            else:
                ft = t + self.env.epilogue_s + self.engine.first_token_s(
                    req.context_tokens
                )
                self._occupy(req, t, ft)
                self._finish_request(req, ft)

    def _occupy(self, req, t, ft):
        if ft > t + EPS:
            self.batch_tokens += req.context_tokens
            self._seq += 1
            heapq.heappush(self.releases, (ft, self._seq, req.context_tokens))

    def _finish_request(self, req, ft):
        rec = self.records[req.id]
        rec["first_token_s"] = ft
        rec["ttft_s"] = ft - req.arrival_s
        req.ttft = rec["ttft_s"]
        self._mark(req, ft, "done")

    # ----- event loop ------------------------------------------------------

    def _advance(self):
        transferring = []
        share = 0.0
        cands = []
        if self.pending:
            cands.append(self.pending[0][0])
        if self.env is not None:
            transferring = self._active_jobs()
            if transferring:
                rate = self.env.bandwidth.rate_at(self.t) * GBPS
                share = rate / len(transferring)
                cands.append(self.t + min(j.rem_bits for j in transferring) / share)
                nb = self.env.bandwidth.next_boundary(self.t)
                if nb != float("inf"):
                    cands.append(nb)
        if self.decode_heap:
            cands.append(self.decode_heap[0][0])
        if self.releases:
            cands.append(self.releases[0][0])
        if (self.waiting or self.eligible) and not self._adm_blocked:
            q = self.engine.quantum_s
            cands.append(math.ceil((self.t - EPS) / q - EPS) * q)
        if not cands:
            return False
        t1 = max(min(cands), self.t)

        if transferring and t1 > self.t:
            dt = t1 - self.t
            for j in transferring:
                j.rem_bits -= share * dt
        self.t = t1

        while self.releases and self.releases[0][0] <= self.t + EPS:
            _, _, tokens = heapq.heappop(self.releases)
            self.batch_tokens -= tokens
            self._adm_blocked = False
        while self.pending and self.pending[0][0] <= self.t + EPS:
            _, _, req = heapq.heappop(self.pending)
            self._arrive(req)
        for j in transferring:
            if j.transferring and j.rem_bits <= EPS_BITS:
                self._finish_transfer(j)
        while self.decode_heap and self.decode_heap[0][0] <= self.t + EPS:
            td, _, job = heapq.heappop(self.decode_heap)
            self._finish_decode(job, td)
        if self.waiting or self.eligible:
            q = self.engine.quantum_s
            on_boundary = abs(self.t / q - round(self.t / q)) * q <= EPS
            if on_boundary and not self._adm_blocked:
                self._admit(self.t)
        return True

    def _arrive(self, req):
        self._mark(req, req.arrival_s, "waiting")
        if req.reuse:
            self._mark(req, req.arrival_s, "waiting_for_KV")
            self.waiting_kv[req.id] = req
            self._start_job(req)
        else:
            self.waiting.append(req)
        self._adm_blocked = False

    # ----- metrics ---------------------------------------------------------

    def metrics(self):
        recs = sorted(
            self.records.values(), key=lambda r: (r["arrival_s"], self._order[r["id"]])
        )
        out = {
            "quantum_s": self.engine.quantum_s,
            "per_class": {},
            "requests": recs,
        }
        for name, flag in (("non_reuse", False), ("reuse", True)):
            vals = [r["ttft_s"] for r in recs if r["reuse"] == flag and r["ttft_s"] is not None]
            if vals:
                arr = np.asarray(vals)
                out["per_class"][name] = {
                    "count": len(vals),
                    "mean_ttft_s": float(arr.mean()),
                    "p50_ttft_s": float(np.percentile(arr, 50)),
                    "p99_ttft_s": float(np.percentile(arr, 99)),
                }
            else:
                out["per_class"][name] = {"count": 0}
        return out


def run_trace(trace, engine: EngineModel, fetch_env: FetchEnv = None):
    """Simulate a full request trace and return the metrics report.

    The trace must be sorted by arrival time. Non-reuse TTFT is admission
    plus prefill; reuse TTFT is fetch completion, admission at the next
    boundary, then the configured epilogue.
    """
    last = -1.0
    for r in trace:
        if r.arrival_s < last - EPS:
            raise ValueError("trace must be sorted by arrival time")
        last = r.arrival_s
    sim = SchedulerSim(engine, fetch_env)
    for r in trace:
        sim.submit(r)
    return sim.run()


# ---------------------------------------------------------------------------
# traces on disk


def gen_request_trace(
    n_requests,
    seed,
    rate_hz=0.2,
    reuse_threshold=40_000,
    ctx_range=(2_000, 120_000),
    chunk_tokens=10_000,
):
    """Synthetic Poisson arrival trace; long contexts become reuse requests."""
    if n_requests < 1:
        raise ValueError("n_requests must be >= 1")
    rng = np.random.default_rng(seed)
    t = 0.0
    out = []
    lo, hi = ctx_range
    for i in range(n_requests):
        t += float(rng.exponential(1.0 / rate_hz))
        ctx = int(rng.integers(lo, hi + 1))
        reuse = ctx >= reuse_threshold
        rid = f"r{i:04d}"
        chunks = []
        if reuse:
            chunks = [f"{rid}/c{k:03d}" for k in range(math.ceil(ctx / chunk_tokens))]
        out.append(Request(rid, t, ctx, reuse, chunks))
    return out


def save_request_trace(path, trace):
    with open(path, "w") as fh:
        for r in trace:
            fh.write(json.dumps(r.to_json()) + "\n")


def load_request_trace(path):
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(Request.from_json(json.loads(line)))
    return out
