"""In-process simulation of a data-parallel worker group.

``spawn_group`` runs one worker body per rank. Ranks talk only through
per-rank mailboxes; every collective sends the local contribution by value
and each receiver reduces the contributions in ascending rank order, so
results are bit-identical at every rank and independent of arrival order
or thread scheduling.

Two schedulers are available:

``"threads"``
    every rank runs freely in its own thread.
``"serial"``
    ranks take strict round-robin turns, one runnable at a time. A rank
    hands its turn on whenever it has to wait for a peer.
"""
from __future__ import annotations

import itertools
import queue
import threading
from dataclasses import dataclass
from typing import Any, Callable, Sequence

import numpy as np

from .tensor_core import ParamVector

__all__ = [
    "CollectiveError",
    "GroupAborted",
    "GradReport",
    "ParamShard",
    "WorkerHandle",
    "make_even_shards",
    "validate_layout",
    "ordered_reduce",
    "spawn_group",
]

_POLL = 0.02


class CollectiveError(RuntimeError):
    """A collective or worker body failed; names the collective and rank."""

    def __init__(self, message: str, *, collective: str | None = None, rank: int | None = None):
        super().__init__(message)
        self.collective = collective
        self.rank = rank


class GroupAborted(CollectiveError):
    """Raised inside surviving ranks once a peer has failed."""


@dataclass(frozen=True)
class GradReport:
    gradient: ParamVector
    sample_count: int
    worker_rank: int

    def __post_init__(self):
        if self.sample_count < 1:
            raise ValueError("sample_count must be positive")


@dataclass(frozen=True)
class ParamShard:
    owner_rank: int
    start: int
    stop: int

    @property
    def size(self) -> int:
        return self.stop - self.start

    @property
    def slice(self) -> slice:
        return slice(self.start, self.stop)


def make_even_shards(d: int, J: int) -> list[ParamShard]:
    """Contiguous ranges; the first ``d % J`` ranks get one extra coordinate."""
    if J < 1:
        raise ValueError("J must be >= 1")
    if d < J:
        raise ValueError(f"cannot shard d={d} coordinates over J={J} workers")
    base, extra = divmod(d, J)
    shards = []
    start = 0
    for rank in range(J):
        size = base + (1 if rank < extra else 0)
        shards.append(ParamShard(rank, start, start + size))
        start += size
    return shards


def validate_layout(layout: Sequence[ParamShard], d: int, J: int) -> None:
    """Check that ``layout`` assigns one range per rank and partitions [0, d)."""
    if len(layout) != J or sorted(s.owner_rank for s in layout) != list(range(J)):
        raise ValueError("layout must contain exactly one shard per rank")
    pos = 0
    for s in sorted(layout, key=lambda s: s.start):
        if s.start != pos or s.stop < s.start:
            raise ValueError(f"layout is not a partition of [0, {d}): gap or overlap at {pos}")
        pos = s.stop
    if pos != d:
        raise ValueError(f"layout covers [0, {pos}) but the vector has d={d}")


def ordered_reduce(contributions: Sequence[np.ndarray], op: str = "sum") -> np.ndarray:
    """Left fold over contributions in the given (rank) order."""
    if op not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {op!r}")
    acc = np.array(contributions[0], dtype=np.float64, copy=True)
    for c in contributions[1:]:
        acc += c
    if op == "mean":
        acc /= len(contributions)
    return acc


class _Turnstile:
    """Round-robin baton for the serial scheduler."""

    def __init__(self, size: int, abort: threading.Event):
        self._cond = threading.Condition()
        self._current = 0
        self._alive = [True] * size
        self._abort = abort

    def _next_alive(self, rank: int) -> int:
        n = len(self._alive)
        for step in range(1, n + 1):
            cand = (rank + step) % n
            if self._alive[cand]:
                return cand
        return -1

    def wait_turn(self, rank: int) -> None:
        with self._cond:
            while self._current != rank and not self._abort.is_set():
                self._cond.wait(_POLL)

    def pass_turn(self, rank: int) -> None:
        with self._cond:
            self._current = self._next_alive(rank)
            self._cond.notify_all()

    def retire(self, rank: int) -> None:
        with self._cond:
            self._alive[rank] = False
            if self._current == rank:
                self._current = self._next_alive(rank)
            self._cond.notify_all()


class _Group:
    def __init__(self, size: int, scheduler: str, timeout: float | None):
        self.size = size
        self.scheduler = scheduler
        self.timeout = timeout
        self.mailboxes = [queue.Queue() for _ in range(size)]
        self.abort = threading.Event()
        self.failure: tuple[int, BaseException] | None = None
        self._lock = threading.Lock()
        self.turnstile = _Turnstile(size, self.abort) if scheduler == "serial" else None

    def record_failure(self, rank: int, exc: BaseException) -> None:
        with self._lock:
            # Peers that only observed the abort are not the root cause.
            if self.failure is None or (
                isinstance(self.failure[1], GroupAborted) and not isinstance(exc, GroupAborted)
            ):
                self.failure = (rank, exc)
        self.abort.set()


class WorkerHandle:
    """A rank's view of its group. Only collectives cross rank boundaries."""

    def __init__(self, group: _Group, rank: int):
        self._group = group
        self.rank = rank
        self.size = group.size
        self._seq = itertools.count()
        self._pending: dict[tuple[int, int], tuple[str, Any]] = {}

    # -- transport -------------------------------------------------------
    def _send(self, dest: int, seq: int, name: str, payload: Any) -> None:
        self._group.mailboxes[dest].put((seq, name, self.rank, payload))

    def _recv(self, seq: int, name: str, sources: Sequence[int]) -> dict[int, Any]:
        group = self._group
        box = group.mailboxes[self.rank]
        waited = 0.0
        while True:
            while True:
                try:
                    msg_seq, msg_name, src, payload = box.get_nowait()
                except queue.Empty:
                    break
                self._pending[(msg_seq, src)] = (msg_name, payload)
            if all((seq, s) in self._pending for s in sources):
                break
            if group.abort.is_set():
                raise GroupAborted(
                    f"rank {self.rank}: group aborted during {name}", collective=name, rank=self.rank
                )
            if group.turnstile is not None:
                group.turnstile.pass_turn(self.rank)
                group.turnstile.wait_turn(self.rank)
            else:
                try:
                    msg_seq, msg_name, src, payload = box.get(timeout=_POLL)
                    self._pending[(msg_seq, src)] = (msg_name, payload)
                except queue.Empty:
                    waited += _POLL
            if group.timeout is not None and waited > group.timeout:
                raise CollectiveError(
                    f"rank {self.rank}: timed out in {name}", collective=name, rank=self.rank
                )
        out = {}
        for s in sources:
            msg_name, payload = self._pending.pop((seq, s))
            if msg_name != name:
                raise CollectiveError(
                    f"rank {self.rank} called {name} but rank {s} called {msg_name}",
                    collective=name,
                    rank=s,
                )
            out[s] = payload
        return out

    def _exchange(self, name: str, payloads: dict[int, Any]) -> dict[int, Any]:
        """Send ``payloads[dest]`` to each dest, receive one message from every rank."""
        seq = next(self._seq)
        for dest in range(self.size):
            self._send(dest, seq, name, payloads.get(dest))
        return self._recv(seq, name, range(self.size))

    # -- collectives -----------------------------------------------------
    def barrier(self) -> None:
        self._exchange("barrier", {})

    def all_reduce(self, local: ParamVector, op: str = "mean") -> ParamVector:
        local = np.asarray(local, dtype=np.float64)
        got = self._exchange("all_reduce", {d: local for d in range(self.size)})
        contribs = [got[r] for r in range(self.size)]
        for r, c in enumerate(contribs):
            if c.shape != local.shape:
                raise CollectiveError(
                    f"all_reduce: rank {r} contributed shape {c.shape}, rank {self.rank} has {local.shape}",
                    collective="all_reduce",
                    rank=r,
                )
        return ordered_reduce(contribs, op)

    def reduce_scatter(self, local: ParamVector, layout: Sequence[ParamShard], op: str = "mean") -> ParamVector:
        """Return the reduced coordinates of this rank's own shard."""
        local = np.asarray(local, dtype=np.float64)
        validate_layout(layout, local.shape[0], self.size)
        by_owner = {s.owner_rank: s for s in layout}
        got = self._exchange(
            "reduce_scatter", {d: local[by_owner[d].slice] for d in range(self.size)}
        )
        mine = by_owner[self.rank]
        contribs = [got[r] for r in range(self.size)]
        for r, c in enumerate(contribs):
            if c.shape != (mine.size,):
                raise CollectiveError(
                    f"reduce_scatter: rank {r} sent {c.shape[0]} coordinates for shard of size {mine.size}",
                    collective="reduce_scatter",
                    rank=r,
                )
        return ordered_reduce(contribs, op)

    def all_gather(self, shard_values: ParamVector, layout: Sequence[ParamShard]) -> ParamVector:
        """Concatenate every rank's shard contents in coordinate order."""
        shard_values = np.asarray(shard_values, dtype=np.float64)
        d = sum(s.size for s in layout)
        validate_layout(layout, d, self.size)
        got = self._exchange("all_gather", {dst: shard_values for dst in range(self.size)})
        out = np.empty(d, dtype=np.float64)
        for s in layout:
            part = got[s.owner_rank]
            if part is None or part.shape != (s.size,):
                raise CollectiveError(
                    f"all_gather: rank {s.owner_rank} holds no valid shard for [{s.start}, {s.stop})",
                    collective="all_gather",
                    rank=s.owner_rank,
                )
            out[s.slice] = part
        return out


def _run_rank(group: _Group, rank: int, body, results: list) -> None:
    handle = WorkerHandle(group, rank)
    if group.turnstile is not None:
        group.turnstile.wait_turn(rank)
    try:
        results[rank] = body(rank, handle)
    except BaseException as exc:  # noqa: BLE001 - reported by spawn_group
        group.record_failure(rank, exc)
    finally:
        if group.turnstile is not None:
            group.turnstile.retire(rank)


def spawn_group(
    J: int,
    worker_body: Callable[[int, WorkerHandle], Any],
    *,
    scheduler: str = "threads",
    timeout: float | None = None,
) -> list:
    """Run ``worker_body(rank, handle)`` on ``J`` ranks; return results by rank.

    A failure on any rank aborts the others and is re-raised as
    :class:`CollectiveError` naming the failing rank.
    """
    if J < 1:
        raise ValueError("J must be >= 1")
    if scheduler not in ("threads", "serial"):
        raise ValueError(f"unknown scheduler {scheduler!r}")
    group = _Group(J, scheduler, timeout)
    results: list = [None] * J
    if J == 1:
        _run_rank(group, 0, worker_body, results)
    else:
        threads = [
            threading.Thread(target=_run_rank, args=(group, r, worker_body, results), name=f"rank{r}", daemon=True)
            for r in range(J)
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    if group.failure is not None:
        rank, exc = group.failure
        coll = getattr(exc, "collective", None)
        where = f" in {coll}" if coll else ""
        raise CollectiveError(f"worker rank {rank} failed{where}: {exc!r}", collective=coll, rank=rank) from exc
    return results
