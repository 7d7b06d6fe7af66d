import json

import numpy as np
import pytest

from bcsrmv.comm import RankRuntime, run_ranks, serial_context, wait_all
from bcsrmv.errors import DeadlockError, RankFailure, UsageError


def test_single_rank_returns_id():
    assert run_ranks(1, lambda ctx: ctx.rank) == [0]


def test_ring_pass():
    def program(ctx):
        nxt = (ctx.rank + 1) % ctx.n_ranks
        prv = (ctx.rank - 1) % ctx.n_ranks
        ctx.isend(nxt, "token", ctx.rank)
        return ctx.irecv(prv, "token").wait()

    assert run_ranks(4, program) == [3, 0, 1, 2]


def test_allreduce_rank_ids():
    results = run_ranks(4, lambda ctx: ctx.allreduce_sum(ctx.rank))
    assert results == [6, 6, 6, 6]


def test_allreduce_bit_exact_sequential_order():
    rng = np.random.default_rng(3)
    values = rng.random(5).tolist()

    def program(ctx):
        return ctx.allreduce_sum(values[ctx.rank])

    expected = ((((values[0] + values[1]) + values[2]) + values[3]) + values[4])
    results = run_ranks(5, program)
    assert all(r == expected for r in results)


def test_self_send_roundtrip():
    ctx = serial_context()
    payload = np.arange(7, dtype=np.float64)
    ctx.isend(0, 9, payload)
    back = ctx.irecv(0, 9).wait()
    assert back is payload


def test_tag_matching_not_arrival_order():
    def program(ctx):
        if ctx.rank == 0:
            ctx.isend(1, "a", "first")
            ctx.isend(1, "b", "second")
            return None
        second = ctx.irecv(0, "b").wait()
        first = ctx.irecv(0, "a").wait()
        return (first, second)

    assert run_ranks(2, program)[1] == ("first", "second")


def test_fifo_per_pair_and_tag():
    def program(ctx):
        if ctx.rank == 0:
            for i in range(10):
                ctx.isend(1, "seq", i)
            return None
        return [ctx.irecv(0, "seq").wait() for _ in range(10)]

    assert run_ranks(2, program)[1] == list(range(10))


def test_wait_twice_is_usage_error():
    ctx = serial_context()
    ctx.isend(0, 0, 1)
    h = ctx.irecv(0, 0)
    h.wait()
    with pytest.raises(UsageError):
        h.wait()
    s = ctx.isend(0, 1, 2)
    s.wait()
    with pytest.raises(UsageError):
        s.wait()


def test_random_sparse_exchange_bookkeeping():
    rng = np.random.default_rng(11)
    n = 8
    plan = [
        [(dst, int(rng.integers(100))) for dst in range(n) if rng.random() < 0.4]
        for _ in range(n)
    ]

    def program(ctx):
        me = ctx.rank
        for dst, value in plan[me]:
            ctx.isend(dst, "x", (me, value))
        received = []
        for src in range(n):
            expected_from_src = [v for d, v in plan[src] if d == me]
            for _ in expected_from_src:
                received.append(ctx.irecv(src, "x").wait())
        return sorted(received)

    results = run_ranks(n, program)
    for me in range(n):
        expected = sorted(
            (src, v) for src in range(n) for d, v in plan[src] if d == me
        )
        assert results[me] == expected


def test_deadlock_detection():
    def program(ctx):
        peer = (ctx.rank + 1) % ctx.n_ranks
        return ctx.irecv(peer, "never").wait()

    with pytest.raises(RankFailure) as info:
        run_ranks(2, program, deadlock_timeout=0.4)
    assert all(isinstance(e, DeadlockError) for e in info.value.failures.values())


def test_rank_failure_names_rank():
    def program(ctx):
        if ctx.rank == 2:
            raise ValueError("broken")
        ctx.barrier()
        return ctx.rank

    with pytest.raises(RankFailure) as info:
        run_ranks(4, program, deadlock_timeout=0.5)
    assert 2 in info.value.failures
    assert "2" in str(info.value)


def test_gather():
    results = run_ranks(3, lambda ctx: ctx.gather(ctx.rank * 10))
    assert results[0] == [0, 10, 20]
    assert results[1] is None


def test_trace_log(tmp_path):
    runtime = RankRuntime(1, trace=True)
    ctx = runtime.context(0)
    ctx.isend(0, "t", np.zeros(4))
    ctx.irecv(0, "t").wait()
    path = tmp_path / "trace.jsonl"
    runtime.write_trace(path)
    records = [json.loads(line) for line in path.read_text().splitlines()]
    assert len(records) == 1
    assert records[0]["sender"] == 0
    assert records[0]["receiver"] == 0
    assert records[0]["bytes"] == 32


def test_wait_all():
    ctx = serial_context()
    for i in range(3):
        ctx.isend(0, i, i * i)
    handles = [ctx.irecv(0, i) for i in range(3)]
    assert wait_all(handles) == [0, 1, 4]
