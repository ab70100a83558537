"""Ticket state and the virtual-created-time distribution policy.

Ordering rule: every non-completed ticket has a *virtual created time* (VCT):

* never-distributed (and errored-back-to-pending) tickets: their creation time
* distributed tickets: their last distribution time plus the redistribution
  timeout (default five minutes), i.e. an unanswered ticket is treated as if
  it were re-created when the timeout elapses

``next_ticket`` hands out the minimum-VCT ticket whose VCT has arrived. When
nothing qualifies, the already-distributed ticket with the oldest last
distribution is handed out early (work stealing for stragglers). In *every*
path, a ticket that has ever been distributed is withheld until at least
``min_redistribution_interval`` (default 10 s) has passed since its last
distribution, so the tail of a job is never sprayed across many clients.

Time is injected: all operations take ``now`` in epoch milliseconds, which
makes the whole policy testable under a simulated clock. Mutations are
serialized by the owning ``SchedulerService``; the core class itself is
plain single-threaded state.
"""

from __future__ import annotations

import heapq
import logging
import threading
import time
from dataclasses import dataclass, field
from typing import Callable

from .journal import MemoryJournal, Record
from .protocol import (
    COMPLETED,
    DISTRIBUTED,
    FAILED,
    PENDING,
    ACCEPTED,
    DUPLICATE,
    UNKNOWN,
    Blob,
    ErrorReport,
    TaskDescriptor,
    Ticket,
)

log = logging.getLogger(__name__)


class UnknownProjectError(KeyError):
    pass


class TaskConflictError(ValueError):
    """Same task_id registered with a different definition."""


@dataclass
class SchedulerConfig:
    redistribution_timeout: float = 300.0  # seconds
    min_redistribution_interval: float = 10.0  # seconds
    persistence_path: str | None = None
    max_errors: int | None = None  # None: retry forever (paper-style)

    def __post_init__(self) -> None:
        if self.redistribution_timeout <= 0 or self.min_redistribution_interval <= 0:
            raise ValueError("timeouts must be positive")
        if self.redistribution_timeout <= self.min_redistribution_interval:
            # Permitted (tests scale the timeout below the interval; the
            # interval guard then dominates) but unusual in production.
            log.warning(
                "redistribution_timeout %.3fs <= min_redistribution_interval %.3fs",
                self.redistribution_timeout,
                self.min_redistribution_interval,
            )

    @property
    def timeout_ms(self) -> int:
        return int(round(self.redistribution_timeout * 1000))

    @property
    def interval_ms(self) -> int:
        return int(round(self.min_redistribution_interval * 1000))


@dataclass
class ClientInfo:
    worker_id: str
    user_agent: str
    connected_at: int


@dataclass
class ProjectStats:
    project_id: str
    tasks: int
    pending: int  # tickets still waiting to be processed (pending or in flight)
    executed: int
    errors: int
    failed: int = 0
    clients: list[ClientInfo] = field(default_factory=list)


@dataclass
class _ProjectCounters:
    task_ids: set[str] = field(default_factory=set)
    pending: int = 0
    executed: int = 0
    errors: int = 0
    failed: int = 0


def virtual_created_time(ticket: Ticket, cfg: SchedulerConfig) -> int:
    """Sort key of the distribution policy, in epoch ms."""
    if ticket.status == PENDING or not ticket.distributions:
        return ticket.created_at
    return ticket.distributions[-1][1] + cfg.timeout_ms


class TicketScheduler:
    """Owns all ticket state. Single-threaded; see ``SchedulerService``."""

    def __init__(self, cfg: SchedulerConfig | None = None, journal=None):
        self.cfg = cfg or SchedulerConfig()
        self.journal = journal if journal is not None else MemoryJournal()
        self.tickets: dict[str, Ticket] = {}
        self.task_descriptors: dict[str, TaskDescriptor] = {}
        self.clients: dict[str, ClientInfo] = {}
        self._projects: dict[str, _ProjectCounters] = {}
        self._seq = 0
        # Lazy heaps: entries may be stale and are validated on pop.
        self._pending_heap: list[tuple[int, str]] = []  # (created_at, ticket_id)
        self._dist_heap: list[tuple[int, int, str, int]] = []  # (last_at, created_at, id, n_dist)

    # -- registration -------------------------------------------------------

    def register_task(self, project_id: str, task: TaskDescriptor) -> None:
        existing = self.task_descriptors.get(task.task_id)
        if existing is not None:
            if existing != task:
                raise TaskConflictError(
                    f"task {task.task_id!r} already registered with a different definition"
                )
            self._projects.setdefault(project_id, _ProjectCounters()).task_ids.add(task.task_id)
            return
        self.task_descriptors[task.task_id] = task
        self._projects.setdefault(project_id, _ProjectCounters()).task_ids.add(task.task_id)
        self._journal_append(
            {
                "op": "task",
                "project_id": project_id,
                "task": {
                    "task_id": task.task_id,
                    "version": task.version,
                    "resource_deps": list(task.resource_deps),
                    "chunking": task.chunking,
                },
            }
        )

    def register_client(self, worker_id: str, user_agent: str, now: int) -> None:
        self.clients[worker_id] = ClientInfo(worker_id, user_agent, now)

    def drop_client(self, worker_id: str) -> None:
        self.clients.pop(worker_id, None)

    # -- operations ---------------------------------------------------------

    def enqueue(
        self, project_id: str, task: TaskDescriptor, inputs: list[Blob], now: int
    ) -> list[str]:
        """Split ``inputs`` into ⌈n/chunking⌉ tickets, all pending at ``now``."""
        if not inputs:
            raise ValueError("inputs must be nonempty")
        self.register_task(project_id, task)
        ids: list[str] = []
        for start in range(0, len(inputs), task.chunking):
            self._seq += 1
            tid = f"t{self._seq:010d}"
            ticket = Ticket(
                ticket_id=tid,
                project_id=project_id,
                task_id=task.task_id,
                input_index=start,
                args=list(inputs[start : start + task.chunking]),
                created_at=now,
            )
            self.tickets[tid] = ticket
            self._projects[project_id].pending += 1
            heapq.heappush(self._pending_heap, (now, tid))
            ids.append(tid)
            self._journal_append(
                {
                    "op": "enqueue",
                    "ticket_id": tid,
                    "project_id": project_id,
                    "task_id": task.task_id,
                    "input_index": start,
                    "args": ticket.args,
                    "created_at": now,
                }
            )
        return ids

    def _interval_ok(self, ticket: Ticket, now: int) -> bool:
        last = ticket.last_distribution_at
        return last is None or now - last >= self.cfg.interval_ms

    def next_ticket(self, now: int, worker_id: str) -> Ticket | None:
        """Select, mark and return the next ticket for ``worker_id``, if any."""
        best: tuple[int, int, str] | None = None  # (vct, created_at, ticket_id)

        # Minimum-VCT pending ticket. Entries blocked only by the interval
        # guard are set aside and restored afterwards.
        blocked: list[tuple[int, str]] = []
        while self._pending_heap:
            created, tid = self._pending_heap[0]
            ticket = self.tickets.get(tid)
            if ticket is None or ticket.status != PENDING:
                heapq.heappop(self._pending_heap)  # stale entry
                continue
            if created > now:
                break
            if not self._interval_ok(ticket, now):
                blocked.append(heapq.heappop(self._pending_heap))
                continue
            best = (created, created, tid)
            break
        for entry in blocked:
            heapq.heappush(self._pending_heap, entry)

        # Minimum-VCT timed-out distributed ticket. The heap is ordered by
        # last distribution time, which orders VCT as well.
        dist_top: tuple[int, int, str] | None = None  # (last_at, created_at, id), validated
        while self._dist_heap:
            last_at, created, tid, n_dist = self._dist_heap[0]
            ticket = self.tickets.get(tid)
            if (
                ticket is None
                or ticket.status != DISTRIBUTED
                or len(ticket.distributions) != n_dist
            ):
                heapq.heappop(self._dist_heap)
                continue
            dist_top = (last_at, created, tid)
            break
        if dist_top is not None:
            last_at, created, tid = dist_top
            vct = last_at + self.cfg.timeout_ms
            if vct <= now and now - last_at >= self.cfg.interval_ms:
                cand = (vct, created, tid)
                if best is None or cand < best:
                    best = cand

        if best is None and dist_top is not None:
            # Nothing due: redistribute the longest-outstanding ticket early.
            last_at, created, tid = dist_top
            if now - last_at >= self.cfg.interval_ms:
                best = (last_at + self.cfg.timeout_ms, created, tid)

        if best is None:
            return None
        ticket = self.tickets[best[2]]
        ticket.distributions.append((worker_id, now))
        ticket.status = DISTRIBUTED
        heapq.heappush(
            self._dist_heap, (now, ticket.created_at, ticket.ticket_id, len(ticket.distributions))
        )
        self._journal_append(
            {"op": "distribute", "ticket_id": ticket.ticket_id, "worker_id": worker_id, "at": now}
        )
        return ticket

    def submit_result(self, ticket_id: str, worker_id: str, result: Blob, now: int) -> str:
        """First result completes the ticket; later ones are duplicates."""
        ticket = self.tickets.get(ticket_id)
        if ticket is None:
            return UNKNOWN
        if ticket.status == COMPLETED:
            return DUPLICATE
        counters = self._projects[ticket.project_id]
        if ticket.status == FAILED:
            counters.failed -= 1
        else:
            counters.pending -= 1
        ticket.status = COMPLETED
        ticket.result = result
        counters.executed += 1
        self._journal_append(
            {
                "op": "complete",
                "ticket_id": ticket_id,
                "worker_id": worker_id,
                "result": result,
                "at": now,
            }
        )
        return ACCEPTED

    def record_error(self, report: ErrorReport) -> None:
        """Append the report and send the ticket back to the pool."""
        ticket = self.tickets.get(report.ticket_id)
        if ticket is None:
            log.warning("error report for unknown ticket %s dropped", report.ticket_id)
            return
        self._append_error(ticket, report)
        self._journal_append(
            {
                "op": "error",
                "ticket_id": report.ticket_id,
                "worker_id": report.worker_id,
                "message": report.message,
                "trace": report.trace,
                "at": report.at,
            }
        )
        if ticket.status in (COMPLETED, FAILED):
            return
        limit = self.cfg.max_errors
        if limit is not None and len(ticket.error_reports) >= limit:
            self._fail(ticket)
            self._journal_append({"op": "fail", "ticket_id": ticket.ticket_id, "at": report.at})
        elif ticket.status == DISTRIBUTED:
            ticket.status = PENDING
            heapq.heappush(self._pending_heap, (ticket.created_at, ticket.ticket_id))

    def _append_error(self, ticket: Ticket, report: ErrorReport) -> None:
        ticket.error_reports.append(report)
        self._projects[ticket.project_id].errors += 1

    def _fail(self, ticket: Ticket) -> None:
        counters = self._projects[ticket.project_id]
        counters.pending -= 1
        counters.failed += 1
        ticket.status = FAILED

    # -- introspection ------------------------------------------------------

    def project_ids(self) -> list[str]:
        return sorted(self._projects)

    def project_stats(self, project_id: str) -> ProjectStats:
        counters = self._projects.get(project_id)
        if counters is None:
            raise UnknownProjectError(project_id)
        return ProjectStats(
            project_id=project_id,
            tasks=len(counters.task_ids),
            pending=counters.pending,
            executed=counters.executed,
            errors=counters.errors,
            failed=counters.failed,
            clients=list(self.clients.values()),
        )

    def recount(self, project_id: str) -> ProjectStats:
        """Recompute the counters from the tickets (test oracle)."""
        if project_id not in self._projects:
            raise UnknownProjectError(project_id)
        stats = ProjectStats(project_id, 0, 0, 0, 0, clients=list(self.clients.values()))
        task_ids = set()
        for t in self.tickets.values():
            if t.project_id != project_id:
                continue
            task_ids.add(t.task_id)
            stats.errors += len(t.error_reports)
            if t.status == COMPLETED:
                stats.executed += 1
            elif t.status == FAILED:
                stats.failed += 1
            else:
                stats.pending += 1
        task_ids |= self._projects[project_id].task_ids
        stats.tasks = len(task_ids)
        return stats

    # -- persistence --------------------------------------------------------

    def _journal_append(self, record: Record) -> None:
        if self.journal is not None:
            self.journal.append(record)

    @classmethod
    def replay(cls, cfg: SchedulerConfig, records, journal=None) -> "TicketScheduler":
        """Rebuild scheduler state from journal records."""
        sched = cls(cfg, journal=None)
        for rec in records:
            op = rec["op"]
            if op == "task":
                t = rec["task"]
                sched.register_task(
                    rec["project_id"],
                    TaskDescriptor(t["task_id"], t["version"], t["resource_deps"], t["chunking"]),
                )
            elif op == "enqueue":
                tid = rec["ticket_id"]
                ticket = Ticket(
                    ticket_id=tid,
                    project_id=rec["project_id"],
                    task_id=rec["task_id"],
                    input_index=rec["input_index"],
                    args=rec["args"],
                    created_at=rec["created_at"],
                )
                sched.tickets[tid] = ticket
                sched._projects[rec["project_id"]].pending += 1
                heapq.heappush(sched._pending_heap, (ticket.created_at, tid))
                if tid.startswith("t") and tid[1:].isdigit():
                    sched._seq = max(sched._seq, int(tid[1:]))
            elif op == "distribute":
                ticket = sched.tickets[rec["ticket_id"]]
                ticket.distributions.append((rec["worker_id"], rec["at"]))
                ticket.status = DISTRIBUTED
                heapq.heappush(
                    sched._dist_heap,
                    (rec["at"], ticket.created_at, ticket.ticket_id, len(ticket.distributions)),
                )
            elif op == "complete":
                sched.submit_result(rec["ticket_id"], rec["worker_id"], rec["result"], rec["at"])
            elif op == "error":
                ticket = sched.tickets.get(rec["ticket_id"])
                if ticket is not None:
                    sched._append_error(
                        ticket,
                        ErrorReport(
                            rec["ticket_id"],
                            rec["worker_id"],
                            rec["message"],
                            rec["trace"],
                            rec["at"],
                        ),
                    )
                    if ticket.status == DISTRIBUTED:
                        ticket.status = PENDING
                        heapq.heappush(
                            sched._pending_heap, (ticket.created_at, ticket.ticket_id)
                        )
            elif op == "fail":
                ticket = sched.tickets[rec["ticket_id"]]
                if ticket.status not in (COMPLETED, FAILED):
                    sched._fail(ticket)
            else:
                raise ValueError(f"unknown journal record op {op!r}")
        sched.journal = journal
        return sched


def real_clock_ms() -> int:
    return int(time.time() * 1000)


class SchedulerService:
    """Thread-safe single-writer facade over ``TicketScheduler``.

    All mutations are serialized through one lock; completion events wake
    waiters (``wait_for_tickets``) so a project can block until its tickets
    finish.
    """

    def __init__(
        self,
        scheduler: TicketScheduler | None = None,
        clock: Callable[[], int] = real_clock_ms,
    ):
        self.scheduler = scheduler or TicketScheduler()
        self.clock = clock
        self._lock = threading.RLock()
        self._completion = threading.Condition(self._lock)

    @property
    def cfg(self) -> SchedulerConfig:
        return self.scheduler.cfg

    def enqueue(self, project_id: str, task: TaskDescriptor, inputs: list[Blob]) -> list[str]:
        with self._lock:
            return self.scheduler.enqueue(project_id, task, inputs, self.clock())

    def next_ticket(self, worker_id: str) -> Ticket | None:
        with self._lock:
            return self.scheduler.next_ticket(self.clock(), worker_id)

    def submit_result(self, ticket_id: str, worker_id: str, result: Blob) -> str:
        with self._completion:
            status = self.scheduler.submit_result(ticket_id, worker_id, result, self.clock())
            if status == ACCEPTED:
                self._completion.notify_all()
            return status

    def record_error(self, report: ErrorReport) -> None:
        with self._completion:
            self.scheduler.record_error(report)
            self._completion.notify_all()  # permanent failures unblock waiters too

    def register_client(self, worker_id: str, user_agent: str) -> None:
        with self._lock:
            self.scheduler.register_client(worker_id, user_agent, self.clock())

    def drop_client(self, worker_id: str) -> None:
        with self._lock:
            self.scheduler.drop_client(worker_id)

    def task_descriptor(self, task_id: str) -> TaskDescriptor | None:
        with self._lock:
            return self.scheduler.task_descriptors.get(task_id)

    def project_stats(self, project_id: str) -> ProjectStats:
        with self._lock:
            return self.scheduler.project_stats(project_id)

    def stats_snapshot(self) -> dict[str, ProjectStats]:
        with self._lock:
            return {pid: self.scheduler.project_stats(pid) for pid in self.scheduler.project_ids()}

    def ticket(self, ticket_id: str) -> Ticket | None:
        with self._lock:
            return self.scheduler.tickets.get(ticket_id)

    def wait_for_tickets(
        self, ticket_ids: list[str], timeout: float | None = None
    ) -> tuple[list[str], list[str]]:
        """Block until every ticket is completed, permanently failed, or the
        timeout elapses. Returns (incomplete_ids, failed_ids)."""
        deadline = None if timeout is None else time.monotonic() + timeout

        def pending_ids() -> tuple[list[str], list[str]]:
            incomplete, failed = [], []
            for tid in ticket_ids:
                t = self.scheduler.tickets.get(tid)
                if t is None or t.status == FAILED:
                    failed.append(tid)
                elif t.status != COMPLETED:
                    incomplete.append(tid)
            return incomplete, failed

        with self._completion:
            while True:
                incomplete, failed = pending_ids()
                if not incomplete or failed:
                    return incomplete, failed
                if deadline is None:
                    self._completion.wait()
                else:
                    remaining = deadline - time.monotonic()
                    if remaining <= 0 or not self._completion.wait(remaining):
                        return pending_ids()

    def flush(self) -> None:
        with self._lock:
            if self.scheduler.journal is not None:
                self.scheduler.journal.flush()
