"""Native worker: the sequential request/execute/submit loop.

One ticket is in flight at a time; scale out by running more worker
processes. The loop survives coordinator restarts with capped exponential
backoff, honors control messages (reload clears caches and restarts the
loop, redirect reconnects elsewhere, stop exits after the in-flight ticket),
and converts every task failure into an error report instead of crashing.
"""

from __future__ import annotations

import hashlib
import logging
import subprocess
import sys
import threading
import time
from dataclasses import dataclass
from urllib.parse import urlsplit

import requests
from websockets.exceptions import ConnectionClosed
from websockets.sync.client import connect

from . import __version__
from .cache import LruCache
from .coordinator import HASH_HEADER
from .protocol import (
    Control,
    DecodeError,
    ErrorSubmit,
    Hello,
    NoTicket,
    ProtocolError,
    ResultAck,
    ResultSubmit,
    TaskPayload,
    TaskRequest,
    TicketGrant,
    TicketRequest,
    decode_message,
    encode_message,
)
from .tasks import TaskContext, TaskRegistry, builtin_registry, execute

log = logging.getLogger(__name__)

DEFAULT_CACHE_BYTES = 256 * 2**20


class StopWorker(Exception):
    pass


class ReloadWorker(Exception):
    """Restart the loop with caches cleared (the self-reload analogue)."""


class RedirectWorker(Exception):
    def __init__(self, url: str):
        super().__init__(url)
        self.url = url


class ResourceIntegrityError(Exception):
    pass


class TaskPreparationError(Exception):
    pass


@dataclass
class WorkerConfig:
    endpoint: str
    cache_capacity: int = DEFAULT_CACHE_BYTES
    restart_on_error: bool = False
    worker_id: str | None = None  # proposal; the server assigns the real one
    user_agent: str = f"ticketgrid-worker/{__version__}"
    backoff_base: float = 0.5
    backoff_cap: float = 30.0
    reply_timeout: float = 60.0  # max wait for a direct reply


@dataclass
class WorkerStats:
    processed: int = 0
    errors: int = 0
    reconnects: int = 0
    reloads: int = 0
    fetched_resources: int = 0


def default_registry() -> TaskRegistry:
    """Built-in tasks plus the distributed-training round."""
    registry = builtin_registry()
    from .disttrain import register_conv_round  # worker <-> disttrain would cycle at import

    register_conv_round(registry)
    return registry


class Worker:
    def __init__(
        self,
        cfg: WorkerConfig,
        registry: TaskRegistry | None = None,
        stop_event: threading.Event | None = None,
    ):
        self.cfg = cfg
        self.registry = registry if registry is not None else default_registry()
        self.cache = LruCache(cfg.cache_capacity)
        self.stats = WorkerStats()
        self.worker_id = cfg.worker_id or ""
        self._stop = stop_event or threading.Event()
        self._endpoint = cfg.endpoint
        self._verified: set[str] = set()  # task_ids version-checked this session
        self._http = requests.Session()

    # -- public ----------------------------------------------------------------

    def stop(self) -> None:
        self._stop.set()

    @property
    def http_base(self) -> str:
        parts = urlsplit(self._endpoint)
        scheme = "https" if parts.scheme == "wss" else "http"
        return f"{scheme}://{parts.netloc}"

    def run(self) -> WorkerStats:
        """Loop until stopped; reconnects with capped exponential backoff."""
        backoff = self.cfg.backoff_base
        while not self._stop.is_set():
            try:
                with connect(self._endpoint, max_size=None) as ws:
                    backoff = self.cfg.backoff_base
                    self._session(ws)
            except StopWorker:
                break
            except ReloadWorker:
                self.stats.reloads += 1
                self.cache.clear()
                self._verified.clear()
                continue
            except RedirectWorker as r:
                self._endpoint = r.url
                self._verified.clear()
                continue
            except (OSError, ConnectionClosed, TimeoutError, ProtocolError) as exc:
                self.stats.reconnects += 1
                log.info("connection lost (%s); retrying in %.1fs", exc, backoff)
                if self._stop.wait(backoff):
                    break
                backoff = min(backoff * 2, self.cfg.backoff_cap)
        return self.stats

    # -- session ------------------------------------------------------------------

    def _session(self, ws) -> None:
        self._send(ws, Hello(worker_id=self.cfg.worker_id, user_agent=self.cfg.user_agent))
        hello = self._recv(ws, Hello, mid_ticket=False)
        self.worker_id = hello.worker_id or ""
        self._verified.clear()
        while True:
            if self._stop.is_set():
                raise StopWorker
            self._send(ws, TicketRequest())
            msg = self._recv(ws, (TicketGrant, NoTicket), mid_ticket=False)
            if isinstance(msg, NoTicket):
                if self._stop.wait(msg.retry_after_ms / 1000.0):
                    raise StopWorker
                continue
            self._run_ticket(ws, msg)

    def _run_ticket(self, ws, grant: TicketGrant) -> None:
        try:
            fn, deps = self._prepare_task(ws, grant.task_id)
            resolver = self.cache_get_or_fetch
            for name in deps:
                resolver(name)  # warm the cache before execution
            ctx = TaskContext(attempt=grant.attempt, resolver=resolver, poster=self.post_json)
        except (ResourceIntegrityError, TaskPreparationError, requests.RequestException) as exc:
            self._report_error(ws, grant.ticket_id, f"{type(exc).__name__}: {exc}", "(setup)")
            return
        outcome = execute(fn, grant.args, ctx)
        if outcome.ok:
            self._send(ws, ResultSubmit(ticket_id=grant.ticket_id, result=outcome.results))
            ack = self._recv(ws, ResultAck, mid_ticket=True)
            if ack.ticket_id != grant.ticket_id:
                raise DecodeError(f"ack for {ack.ticket_id}, expected {grant.ticket_id}")
            self.stats.processed += 1
        else:
            self._report_error(ws, grant.ticket_id, outcome.error_message, outcome.trace)
            if self.cfg.restart_on_error:
                raise ReloadWorker

    def _report_error(self, ws, ticket_id: str, message: str, trace: str) -> None:
        self.stats.errors += 1
        self._send(ws, ErrorSubmit(ticket_id=ticket_id, message=message, trace=trace))

    def _prepare_task(self, ws, task_id: str):
        """Version-check the task against the coordinator once per session."""
        entry = self.registry.get(task_id)
        if task_id not in self._verified:
            self._send(ws, TaskRequest(task_id=task_id))
            payload = self._recv(ws, TaskPayload, mid_ticket=True)
            if not payload.found:
                raise TaskPreparationError(f"coordinator does not know task {task_id!r}")
            if entry is None:
                raise TaskPreparationError(f"task {task_id!r} not registered in this worker")
            if payload.version != entry[0].version:
                raise TaskPreparationError(
                    f"task {task_id!r} version mismatch: "
                    f"coordinator {payload.version}, local {entry[0].version}"
                )
            self._verified.add(task_id)
        elif entry is None:
            raise TaskPreparationError(f"task {task_id!r} not registered in this worker")
        return entry[1], entry[0].resource_deps

    # -- transport helpers -----------------------------------------------------------

    def _send(self, ws, msg) -> None:
        ws.send(encode_message(msg).decode("utf-8"))

    def _recv(self, ws, expect, mid_ticket: bool):
        """Receive until a message of the expected kind arrives; control
        messages are dispatched inline. ``mid_ticket`` defers a stop until the
        in-flight ticket is finished."""
        deadline = time.monotonic() + self.cfg.reply_timeout
        while True:
            if not mid_ticket and self._stop.is_set():
                raise StopWorker
            try:
                raw = ws.recv(timeout=1.0)
            except TimeoutError:
                if time.monotonic() > deadline:
                    raise TimeoutError(f"no {expect} reply within {self.cfg.reply_timeout}s")
                continue
            msg = decode_message(raw.encode("utf-8") if isinstance(raw, str) else raw)
            if isinstance(msg, Control):
                self._on_control(msg)
                continue
            if isinstance(msg, expect):
                return msg
            raise DecodeError(f"unexpected {type(msg).__name__}, wanted {expect}")

    def _on_control(self, msg: Control) -> None:
        if msg.command == "stop":
            # finish the in-flight ticket; the loop exits at the next top
            self._stop.set()
        elif msg.command == "reload":
            raise ReloadWorker
        elif msg.command == "redirect":
            if not msg.url:
                raise DecodeError("redirect control without url")
            raise RedirectWorker(msg.url)
        else:
            log.warning("ignoring unknown control command %r", msg.command)

    # -- resources ------------------------------------------------------------------

    def cache_get_or_fetch(self, name: str) -> bytes:
        hit = self.cache.get(name)
        if hit is not None:
            return hit[0]
        data, digest = self._fetch_resource(name)
        self.cache.put(name, data, digest)
        self.stats.fetched_resources += 1
        return data

    def _fetch_resource(self, name: str) -> tuple[bytes, str]:
        for attempt in (1, 2):
            resp = self._http.get(f"{self.http_base}/resource/{name}", timeout=120)
            resp.raise_for_status()
            data = resp.content
            advertised = resp.headers.get(HASH_HEADER, "")
            digest = hashlib.sha256(data).hexdigest()
            if digest == advertised:
                return data, digest
            log.warning("resource %s hash mismatch on fetch %d", name, attempt)
        raise ResourceIntegrityError(f"resource {name!r} hash mismatch after refetch")

    def post_json(self, path: str, payload: dict) -> dict:
        resp = self._http.post(f"{self.http_base}{path}", json=payload, timeout=120)
        resp.raise_for_status()
        return resp.json()


def run_worker(
    endpoint: str,
    registry: TaskRegistry | None = None,
    cache_capacity: int = DEFAULT_CACHE_BYTES,
    restart_on_error: bool = False,
    worker_id: str | None = None,
    stop_event: threading.Event | None = None,
) -> WorkerStats:
    cfg = WorkerConfig(
        endpoint=endpoint,
        cache_capacity=cache_capacity,
        restart_on_error=restart_on_error,
        worker_id=worker_id,
    )
    return Worker(cfg, registry=registry, stop_event=stop_event).run()


class WorkerPool:
    """N worker clients as separate OS processes against one endpoint."""

    def __init__(
        self,
        endpoint: str,
        count: int,
        restart_on_error: bool = False,
        cache_mb: int = 256,
        inherit_output: bool = False,
    ):
        cmd = [
            sys.executable, "-m", "ticketgrid.cli", "worker",
            "--endpoint", endpoint, "--cache-mb", str(cache_mb),
        ]
        if restart_on_error:
            cmd.append("--restart-on-error")
        sink = None if inherit_output else subprocess.DEVNULL
        self.procs = [
            subprocess.Popen(cmd, stdout=sink, stderr=sink) for _ in range(count)
        ]

    def __enter__(self) -> "WorkerPool":
        return self

    def __exit__(self, *exc) -> None:
        self.stop()

    def alive(self) -> int:
        return sum(1 for p in self.procs if p.poll() is None)

    def stop(self, timeout: float = 10.0) -> None:
        for p in self.procs:
            if p.poll() is None:
                p.terminate()
        for p in self.procs:
            try:
                p.wait(timeout=timeout)
            except subprocess.TimeoutExpired:
                p.kill()
                p.wait()
