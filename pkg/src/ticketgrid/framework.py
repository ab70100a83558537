"""Task SDK: a project creates tasks, feeds them input lists, and collects
results ordered as if the work had run locally.

``calculate`` splits inputs into tickets (``chunking`` inputs per ticket)
and ``block`` waits for every ticket, then flattens the per-ticket result
lists back into input order. Completion order, redistribution and worker
churn are invisible to the caller.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

from .protocol import Blob, TaskDescriptor
from .scheduler import SchedulerService
from .tasks import TaskRegistry, builtin_descriptor, builtin_registry, is_prime

__all__ = [
    "Project",
    "TaskHandle",
    "PartialResultError",
    "UnknownTaskError",
    "ResultShapeError",
    "is_prime",
    "run_prime",
]


class UnknownTaskError(KeyError):
    pass


class ResultShapeError(ValueError):
    pass


class PartialResultError(TimeoutError):
    """Raised by block() when tickets are still incomplete or permanently
    failed; names the stragglers."""

    def __init__(self, incomplete: list[str], failed: list[str]):
        self.incomplete = incomplete
        self.failed = failed
        parts = []
        if incomplete:
            parts.append(f"{len(incomplete)} incomplete: {', '.join(incomplete[:5])}")
            if len(incomplete) > 5:
                parts[-1] += ", ..."
        if failed:
            parts.append(f"{len(failed)} failed: {', '.join(failed[:5])}")
        super().__init__("; ".join(parts) or "no tickets")


@dataclass
class Project:
    """A named consumer of distributed results, bound to a scheduler."""

    name: str
    svc: SchedulerService
    known_tasks: TaskRegistry = field(default_factory=builtin_registry)

    def create_task(self, descriptor: TaskDescriptor) -> "TaskHandle":
        known = self.known_tasks.descriptor(descriptor.task_id)
        if known is None:
            raise UnknownTaskError(f"no worker implementation for task {descriptor.task_id!r}")
        if known.version != descriptor.version:
            raise UnknownTaskError(
                f"task {descriptor.task_id!r} version {descriptor.version} does not match "
                f"the worker implementation ({known.version})"
            )
        return TaskHandle(self, descriptor)


class TaskHandle:
    """Tracks the tickets of one task within one project."""

    def __init__(self, project: Project, descriptor: TaskDescriptor):
        self.project = project
        self.descriptor = descriptor
        self.ticket_ids: list[str] = []
        self.input_count = 0
        self._lock = threading.Lock()

    def calculate(self, inputs: list[Blob]) -> None:
        """Split inputs into tickets and enqueue them, preserving order."""
        if not inputs:
            raise ValueError("inputs must be nonempty")
        ids = self.project.svc.enqueue(self.project.name, self.descriptor, inputs)
        with self._lock:
            self.ticket_ids.extend(ids)
            self.input_count += len(inputs)

    def block(self, timeout: float | None = None) -> list[Blob]:
        """Wait for every ticket; return one result per input, input-ordered.
        Raises PartialResultError on timeout or permanent failures."""
        with self._lock:
            ids = list(self.ticket_ids)
        incomplete, failed = self.project.svc.wait_for_tickets(ids, timeout)
        if incomplete or failed:
            raise PartialResultError(incomplete, failed)
        out: list[Blob] = []
        for tid in ids:
            ticket = self.project.svc.ticket(tid)
            if not isinstance(ticket.result, list) or len(ticket.result) != len(ticket.args):
                raise ResultShapeError(
                    f"ticket {tid} returned {type(ticket.result).__name__}, "
                    f"expected a list of {len(ticket.args)}"
                )
            out.extend(ticket.result)
        return out


def run_prime(
    max_candidate: int = 10_000,
    workers: int = 2,
    chunking: int = 1,
    timeout: float = 300.0,
    mode: str = "thread",
) -> list[int]:
    """Self-hosted end-to-end prime search over 1..max_candidate: starts a
    coordinator on a free port and ``workers`` local worker clients (threads
    or separate processes), then returns the candidates reported prime, in
    order."""
    from .coordinator import Coordinator, CoordinatorConfig, CoordinatorServer
    from .worker import Worker, WorkerConfig, WorkerPool

    if mode not in ("thread", "process"):
        raise ValueError(f"mode must be 'thread' or 'process', not {mode!r}")
    server = CoordinatorServer(Coordinator(CoordinatorConfig())).start()
    stop = threading.Event()
    threads = []
    pool = None
    try:
        if mode == "process":
            pool = WorkerPool(server.ws_url, workers)
        else:
            for i in range(workers):
                w = Worker(
                    WorkerConfig(endpoint=server.ws_url, worker_id=f"prime-w{i}"),
                    registry=builtin_registry(),
                    stop_event=stop,
                )
                t = threading.Thread(target=w.run, name=f"prime-w{i}", daemon=True)
                t.start()
                threads.append(t)
        project = Project("primes", server.coordinator.svc)
        handle = project.create_task(builtin_descriptor("is_prime", chunking=chunking))
        candidates = list(range(1, max_candidate + 1))
        handle.calculate(candidates)
        results = handle.block(timeout=timeout)
        return [c for c, r in zip(candidates, results) if r["is_prime"]]
    finally:
        stop.set()
        for t in threads:
            t.join(timeout=10)
        if pool is not None:
            pool.stop()
        server.stop()
