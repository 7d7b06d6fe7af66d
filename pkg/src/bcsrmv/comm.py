"""Logical-rank runtime: message passing between concurrent rank programs.

Ranks execute as threads inside one process; all cross-rank interaction
goes through tagged point-to-point messages with per-(sender, receiver,
tag) FIFO delivery.  A real network transport could be slotted in behind
the same send/receive contract.  Payloads are handed over by reference and
must not be mutated by the sender afterwards.
"""

from __future__ import annotations

import json
import threading
import time
from collections import deque

import numpy as np

from .errors import DeadlockError, DomainError, RankFailure, UsageError

_POLL_SECONDS = 0.02


def _payload_bytes(payload) -> int:
    if isinstance(payload, np.ndarray):
        return payload.nbytes
    if isinstance(payload, (tuple, list)):
        return sum(_payload_bytes(p) for p in payload)
    if isinstance(payload, (bytes, bytearray)):
        return len(payload)
    return 0


class _Mailbox:
    def __init__(self):
        self.cond = threading.Condition()
        self.queues: dict[tuple[int, object], deque] = {}

    def put(self, src: int, tag, payload):
        with self.cond:
            self.queues.setdefault((src, tag), deque()).append(payload)
            self.cond.notify_all()


class SendHandle:
    """Completed-at-enqueue handle; waiting twice is a usage error."""

    def __init__(self):
        self._waited = False

    def wait(self):
        if self._waited:
            raise UsageError("handle already waited on")
        self._waited = True


class RecvHandle:
    def __init__(self, runtime: "RankRuntime", me: int, src: int, tag):
        self._rt = runtime
        self._me = me
        self._src = src
        self._tag = tag
        self._waited = False

    def wait(self):
        if self._waited:
            raise UsageError("handle already waited on")
        self._waited = True
        return self._rt._receive(self._me, self._src, self._tag)


def wait_all(handles):
    return [h.wait() for h in handles]


class RankRuntime:
    """Mailboxes plus deadlock bookkeeping for a fixed set of ranks."""

    def __init__(self, n_ranks: int, deadlock_timeout: float = 30.0, trace: bool = False):
        if n_ranks < 1:
            raise DomainError("need at least one rank")
        self.n_ranks = n_ranks
        self.deadlock_timeout = deadlock_timeout
        self._mail = [_Mailbox() for _ in range(n_ranks)]
        self._lock = threading.Lock()
        self._blocked = 0
        self._live = n_ranks
        self._activity = 0
        self._step = 0
        self.trace_records: list[dict] | None = [] if trace else None

    def context(self, rank: int) -> "RankContext":
        if rank < 0 or rank >= self.n_ranks:
            raise DomainError(f"rank {rank} outside [0, {self.n_ranks})")
        return RankContext(self, rank)

    def _send(self, src: int, dst: int, tag, payload):
        if dst < 0 or dst >= self.n_ranks:
            raise DomainError(f"peer {dst} outside [0, {self.n_ranks})")
        with self._lock:
            self._activity += 1
            self._step += 1
            if self.trace_records is not None:
                self.trace_records.append(
                    {
                        "step": self._step,
                        "sender": src,
                        "receiver": dst,
                        "tag": repr(tag),
                        "bytes": _payload_bytes(payload),
                    }
                )
        self._mail[dst].put(src, tag, payload)

    def _receive(self, me: int, src: int, tag):
        mb = self._mail[me]
        key = (src, tag)
        idle = 0.0
        with mb.cond:
            while True:
                q = mb.queues.get(key)
                if q:
                    payload = q.popleft()
                    if not q:
                        del mb.queues[key]
                    with self._lock:
                        self._activity += 1
                    return payload
                with self._lock:
                    self._blocked += 1
                    seen = self._activity
                mb.cond.wait(_POLL_SECONDS)
                with self._lock:
                    self._blocked -= 1
                    if self._activity != seen:
                        idle = 0.0
                        continue
                    idle += _POLL_SECONDS
                    stuck = self._blocked + 1 >= self._live
                if idle >= self.deadlock_timeout and stuck:
                    raise DeadlockError(
                        f"rank {me} blocked on recv(src={src}, tag={tag!r}) with "
                        f"all live ranks idle for {idle:.1f}s"
                    )

    def _rank_done(self):
        with self._lock:
            self._live -= 1

    def write_trace(self, path):
        if self.trace_records is None:
            raise UsageError("runtime was created without tracing")
        with open(path, "w") as fh:
            for rec in self.trace_records:
                fh.write(json.dumps(rec) + "\n")


class RankContext:
    """Per-rank endpoint: nonblocking-style sends/receives and reductions."""

    def __init__(self, runtime: RankRuntime, rank: int):
        self._rt = runtime
        self.rank = rank
        self.n_ranks = runtime.n_ranks
        self._coll_seq = 0
        self._matrix_seq = 0

    def isend(self, peer: int, tag, payload) -> SendHandle:
        self._rt._send(self.rank, peer, tag, payload)
        return SendHandle()

    def irecv(self, peer: int, tag) -> RecvHandle:
        if peer < 0 or peer >= self.n_ranks:
            raise DomainError(f"peer {peer} outside [0, {self.n_ranks})")
        return RecvHandle(self._rt, self.rank, peer, tag)

    def next_matrix_id(self) -> int:
        # Matrices created in identical program order on every rank share ids,
        # which keys their exchange tags.
        self._matrix_seq += 1
        return self._matrix_seq

    def _next_collective(self) -> int:
        self._coll_seq += 1
        return self._coll_seq

    def allreduce_sum(self, value):
        """Global sum with a fixed, rank-ascending reduction order."""
        seq = self._next_collective()
        tag = ("_coll", seq)
        btag = ("_coll_b", seq)
        if self.n_ranks == 1:
            return value
        if self.rank == 0:
            acc = value
            for src in range(1, self.n_ranks):
                acc = acc + self.irecv(src, tag).wait()
            for dst in range(1, self.n_ranks):
                self.isend(dst, btag, acc)
            return acc
        self.isend(0, tag, value)
        return self.irecv(0, btag).wait()

    def barrier(self):
        self.allreduce_sum(0)

    def gather(self, value, root: int = 0):
        """List of per-rank values on `root`, None elsewhere."""
        seq = self._next_collective()
        tag = ("_gath", seq)
        if self.rank == root:
            out = [None] * self.n_ranks
            out[self.rank] = value
            for src in range(self.n_ranks):
                if src != root:
                    out[src] = self.irecv(src, tag).wait()
            return out
        self.isend(root, tag, value)
        return None


def run_ranks(n_ranks, program, *shared, deadlock_timeout=30.0, trace_path=None):
    """Run `program(ctx, *shared)` once per rank and collect the results.

    Rank programs run concurrently; shared positional inputs must be
    immutable.  A raising rank produces a RankFailure naming it; a full
    quiescence of all live ranks beyond the timeout raises DeadlockError.
    With `trace_path`, every message is appended to a JSONL log there.
    """
    runtime = RankRuntime(
        n_ranks, deadlock_timeout=deadlock_timeout, trace=trace_path is not None
    )
    results = [None] * n_ranks
    failures: dict[int, BaseException] = {}

    if n_ranks == 1:
        results[0] = program(runtime.context(0), *shared)
        if trace_path is not None:
            runtime.write_trace(trace_path)
        return results

    def worker(rank: int):
        try:
            results[rank] = program(runtime.context(rank), *shared)
        except BaseException as exc:  # collected and re-raised on the caller
            failures[rank] = exc
        finally:
            runtime._rank_done()

    threads = [
        threading.Thread(target=worker, args=(r,), name=f"rank-{r}")
        for r in range(n_ranks)
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if failures:
        primary = {r: e for r, e in failures.items() if not isinstance(e, DeadlockError)}
        raise RankFailure(primary or failures)
    if trace_path is not None:
        runtime.write_trace(trace_path)
    return results


def serial_context() -> RankContext:
    """Single-rank context for building matrices outside run_ranks."""
    return RankRuntime(1).context(0)
