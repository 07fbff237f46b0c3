"""Context parallelism for the Mamba scan, simulated over in-process ranks.

Two ways of handing the recurrent state across sequence shards:

* sequential: rank r scans its shard from the state rank r-1 forwarded to it.
* parallel: every rank scans its shard from zero, the per-shard total decays
  (``decay_chunk``) are all-gathered, each rank builds only the cross-shard
  terms whose boundary state it owns, and a reduce-scatter sums those terms
  into every rank's true initial state. Each rank then corrects its outputs
  locally.

All communication goes through ``CpTrace`` so tests can assert its structure.
"""

from __future__ import annotations

import enum
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import PlanError, TraceError
from .ssd import initial_state_readout, ssd_chunked_scan, total_decay


@dataclass(frozen=True)
class CpPlan:
    n_ranks: int
    bounds: tuple[tuple[int, int], ...]
    chunk_size: int = 128

    @property
    def seq_len(self) -> int:
        return self.bounds[-1][1]

    def validate(self) -> None:
        if len(self.bounds) != self.n_ranks:
            raise PlanError(f"{len(self.bounds)} shards for {self.n_ranks} ranks")
        pos = 0
        for a, b in self.bounds:
            if a != pos or b <= a:
                raise PlanError(f"shard [{a}, {b}) breaks contiguity at {pos}")
            pos = b


def shard_sequence(seq_len: int, n_ranks: int, chunk_size: int = 128) -> CpPlan:
    """Contiguous near-equal shards; the first ``seq_len % n_ranks`` get one extra position."""
    if n_ranks < 1:
        raise PlanError("need at least one rank")
    if seq_len < n_ranks:
        raise PlanError(f"cannot split {seq_len} positions over {n_ranks} ranks")
    base, extra = divmod(seq_len, n_ranks)
    bounds, start = [], 0
    for r in range(n_ranks):
        end = start + base + (r < extra)
        bounds.append((start, end))
        start = end
    return CpPlan(n_ranks=n_ranks, bounds=tuple(bounds), chunk_size=chunk_size)


class MessageKind(enum.Enum):
    STATE_FORWARD = "StateForward"
    ALL_GATHER_DECAY_CHUNK = "AllGatherDecayChunk"
    REDUCE_SCATTER_STATES = "ReduceScatterStates"

    @property
    def collective(self) -> bool:
        return self is not MessageKind.STATE_FORWARD


@dataclass(frozen=True)
class CpMessage:
    kind: MessageKind
    src: int | None  # None: the whole CP group
    dst: int | None
    payload_shape: tuple[int, ...]

    def to_line(self) -> str:
        def who(r):
            return "*" if r is None else str(r)

        shape = "x".join(str(d) for d in self.payload_shape)
        return f"{self.kind.value} {who(self.src)} {who(self.dst)} {shape}"


@dataclass(frozen=True)
class Step:
    rank: int
    name: str


@dataclass
class CpTrace:
    """Ordered log of compute steps and messages plus step dependency edges."""

    steps: list[Step] = field(default_factory=list)
    edges: list[tuple[int, int]] = field(default_factory=list)
    messages: list[CpMessage] = field(default_factory=list)

    def step(self, rank: int, name: str, after: list[int] = ()) -> int:
        self.steps.append(Step(rank, name))
        sid = len(self.steps) - 1
        self.edges.extend((a, sid) for a in after)
        return sid

    def send(self, msg: CpMessage, src_steps: list[int], dst_steps: list[int]) -> None:
        self.messages.append(msg)
        self.edges.extend((a, b) for a in src_steps for b in dst_steps)

    def count(self, kind: MessageKind) -> int:
        return sum(m.kind is kind for m in self.messages)

    @property
    def point_to_point(self) -> int:
        return sum(not m.kind.collective for m in self.messages)

    @property
    def collectives(self) -> int:
        return sum(m.kind.collective for m in self.messages)

    def is_topological(self) -> bool:
        return all(a < b for a, b in self.edges)

    def export_lines(self) -> list[str]:
        return [m.to_line() for m in self.messages]


def trace_critical_path(trace: CpTrace) -> int:
    """Number of compute steps on the longest dependency chain."""
    n = len(trace.steps)
    succ = [[] for _ in range(n)]
    indeg = [0] * n
    for a, b in trace.edges:
        if not (0 <= a < n and 0 <= b < n):
            raise TraceError(f"edge ({a}, {b}) references a missing step")
        succ[a].append(b)
        indeg[b] += 1
    depth = [1] * n
    ready = [i for i in range(n) if indeg[i] == 0]
    seen = 0
    while ready:
        i = ready.pop()
        seen += 1
        for j in succ[i]:
            depth[j] = max(depth[j], depth[i] + 1)
            indeg[j] -= 1
            if indeg[j] == 0:
                ready.append(j)
    if seen != n:
        raise TraceError("trace dependencies contain a cycle")
    return max(depth, default=0)


@dataclass
class ScanInputs:
    """Arguments of one scan: A (H,), dt (T, H), x (T, H, P), B/C (T, G, N), D (H,)."""

    A: np.ndarray
    dt: np.ndarray
    x: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray

    def shard(self, a: int, b: int) -> ScanInputs:
        return ScanInputs(self.A, self.dt[a:b], self.x[a:b], self.B[a:b], self.C[a:b], self.D)

    @property
    def state_shape(self) -> tuple[int, int, int]:
        return (self.x.shape[1], self.x.shape[2], self.B.shape[2])

    @classmethod
    def random(cls, rng: np.random.Generator, T: int, n_heads: int = 4, d_head: int = 8,
               n_groups: int = 2, d_state: int = 16, dtype=np.float32) -> ScanInputs:
        dt = np.log1p(np.exp(rng.normal(-1.0, 1.0, size=(T, n_heads))))
        return cls(
            A=(-np.exp(rng.uniform(-1.0, 1.0, size=n_heads))).astype(dtype),
            dt=dt.astype(dtype),
            x=rng.normal(size=(T, n_heads, d_head)).astype(dtype),
            B=rng.normal(size=(T, n_groups, d_state)).astype(dtype),
            C=rng.normal(size=(T, n_groups, d_state)).astype(dtype),
            D=rng.normal(size=n_heads).astype(dtype),
        )


def _check_plan(plan: CpPlan, inp: ScanInputs) -> None:
    plan.validate()
    if plan.seq_len != inp.x.shape[0]:
        raise PlanError(f"plan covers {plan.seq_len} positions, inputs have {inp.x.shape[0]}")


def cp_sequential_scan(plan: CpPlan, inp: ScanInputs, h0=None):
    """Chain of shard scans, each seeded with the previous shard's final state."""
    _check_plan(plan, inp)
    trace = CpTrace()
    state = None if h0 is None else np.asarray(h0, dtype=np.float32)
    ys, prev = [], None
    for r, (a, b) in enumerate(plan.bounds):
        sid = trace.step(r, "scan")
        if prev is not None:
            trace.send(CpMessage(MessageKind.STATE_FORWARD, r - 1, r, inp.state_shape), [prev], [sid])
        s = inp.shard(a, b)
        y, state = ssd_chunked_scan(s.A, s.dt, s.x, s.B, s.C, s.D, state, chunk_size=plan.chunk_size)
        ys.append(y)
        prev = sid
    return np.concatenate(ys), state, trace


def cp_parallel_scan(plan: CpPlan, inp: ScanInputs, h0=None, *, workers: int = 1):
    """All-gather decays, rank-local cross terms, reduce-scatter of initial states.

    ``workers > 1`` runs the per-rank phases on a thread pool; results and the
    trace are identical either way.
    """
    _check_plan(plan, inp)
    R = plan.n_ranks
    H, P, N = inp.state_shape
    trace = CpTrace()
    shards = [inp.shard(a, b) for a, b in plan.bounds]
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    run = pool.map if pool else map

    def local_scan(r):
        s = shards[r]
        y, st = ssd_chunked_scan(s.A, s.dt, s.x, s.B, s.C, s.D, None, chunk_size=plan.chunk_size)
        return y, st.astype(np.float32), total_decay(s.A, s.dt).astype(np.float32)

    try:
        local = list(run(local_scan, range(R)))
        scan_ids = [trace.step(r, "local_scan") for r in range(R)]
        combine_ids = [trace.step(r, "combine") for r in range(R)]
        trace.send(CpMessage(MessageKind.ALL_GATHER_DECAY_CHUNK, None, None, (R, H)), scan_ids, combine_ids)
        decay_chunk = np.stack([d for _, _, d in local])  # the all-gathered table, (R, H)

        def combine(q):
            # Rank q only builds terms carrying its own boundary state s_q:
            # partial[r] = (prod_{q<m<r} D_m) s_q for r > q. Rank 0 also owns h0.
            partial = np.zeros((R, H, P, N), dtype=np.float32)
            carry = local[q][1]
            for r in range(q + 1, R):
                partial[r] = carry
                carry = decay_chunk[r][:, None, None] * carry
            if q == 0 and h0 is not None:
                carry = np.asarray(h0, dtype=np.float32)
                for r in range(R):
                    partial[r] += carry
                    carry = decay_chunk[r][:, None, None] * carry
            return partial

        partials = list(run(combine, range(R)))
        finish_ids = [trace.step(r, "finish") for r in range(R)]
        trace.send(CpMessage(MessageKind.REDUCE_SCATTER_STATES, None, None, (R, H, P, N)), combine_ids, finish_ids)
        init = partials[0].copy()
        for p in partials[1:]:
            init += p

        def finish(r):
            s = shards[r]
            y = local[r][0] + initial_state_readout(s.A, s.dt, s.C, init[r]).astype(local[r][0].dtype)
            return y

        ys = list(run(finish, range(R)))
    finally:
        if pool:
            pool.shutdown()
    h_T = decay_chunk[-1][:, None, None] * init[-1] + local[-1][1]
    return np.concatenate(ys), h_T, trace
