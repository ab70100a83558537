"""Network front end: WebSocket ticket distribution plus HTTP endpoints for
status, console commands and resource/dataset serving.

All ticket-state mutations flow through the ``SchedulerService``; the
coordinator only translates wire messages into scheduler calls, so a
malformed or malicious session can at worst close itself. Resources are
immutable-by-name byte blobs (registered in memory or served from a root
directory) addressed as ``GET /resource/{name}`` with a sha256 content hash
header that workers cache by.
"""

from __future__ import annotations

import asyncio
import hashlib
import logging
import threading
from contextlib import asynccontextmanager
from dataclasses import dataclass, field
from pathlib import Path

import uvicorn
from fastapi import FastAPI, HTTPException, Request, Response, WebSocket, WebSocketDisconnect
from fastapi.responses import FileResponse, JSONResponse

from .journal import load_records, open_journal
from .protocol import (
    CONTROL_COMMANDS,
    PROTOCOL_VERSION,
    Control,
    DecodeError,
    ErrorReport,
    ErrorSubmit,
    Hello,
    NoTicket,
    ResultAck,
    ResultSubmit,
    TaskPayload,
    TaskRequest,
    TicketGrant,
    TicketRequest,
    decode_message,
    encode_message,
)
from .scheduler import SchedulerConfig, SchedulerService, TicketScheduler

log = logging.getLogger(__name__)

WS_PATH = "/distributor"
HASH_HEADER = "X-Content-Hash"
ADMIN_HEADER = "X-Admin-Token"


@dataclass
class CoordinatorConfig:
    host: str = "127.0.0.1"
    port: int = 0  # 0: pick a free port
    resource_root: str | None = None
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    admin_token: str | None = None
    static_dir: str | None = None

    def __post_init__(self) -> None:
        if self.resource_root is not None and not Path(self.resource_root).is_dir():
            raise FileNotFoundError(f"resource_root {self.resource_root!r} is not a directory")
        if self.static_dir is not None and not Path(self.static_dir).is_dir():
            raise FileNotFoundError(f"static_dir {self.static_dir!r} is not a directory")


class ResourceStore:
    """Named byte blobs: in-memory registrations plus files under a root
    directory. Names are flat identifiers; anything path-like is rejected."""

    def __init__(self, root: str | None = None):
        self.root = Path(root) if root else None
        self._blobs: dict[str, tuple[bytes, str]] = {}
        self._file_cache: dict[str, tuple[tuple, bytes, str]] = {}
        self._lock = threading.Lock()

    @staticmethod
    def valid_name(name: str) -> bool:
        return bool(name) and "/" not in name and "\\" not in name and ".." not in name

    def register_bytes(self, name: str, data: bytes) -> str:
        if not self.valid_name(name):
            raise ValueError(f"invalid resource name {name!r}")
        digest = hashlib.sha256(data).hexdigest()
        with self._lock:
            self._blobs[name] = (data, digest)
        return digest

    def unregister(self, name: str) -> None:
        with self._lock:
            self._blobs.pop(name, None)

    def names(self) -> list[str]:
        with self._lock:
            return sorted(self._blobs)

    def resolve(self, name: str) -> tuple[bytes, str] | None:
        """(bytes, sha256) or None. Raises PermissionError on traversal."""
        if not self.valid_name(name):
            raise PermissionError(f"resource name {name!r} rejected")
        with self._lock:
            hit = self._blobs.get(name)
        if hit is not None:
            return hit
        if self.root is None:
            return None
        path = self.root / name
        if not path.is_file():
            return None
        stat = path.stat()
        key = (stat.st_mtime_ns, stat.st_size)
        with self._lock:
            cached = self._file_cache.get(name)
            if cached is not None and cached[0] == key:
                return cached[1], cached[2]
        data = path.read_bytes()
        digest = hashlib.sha256(data).hexdigest()
        with self._lock:
            self._file_cache[name] = (key, data, digest)
        return data, digest


@dataclass
class WorkerSession:
    worker_id: str
    ws: WebSocket
    user_agent: str
    connected_at: int
    tickets_in_flight: set[str] = field(default_factory=set)


class Coordinator:
    """Owns the FastAPI app, the scheduler service and the resource store."""

    def __init__(self, cfg: CoordinatorConfig | None = None, svc: SchedulerService | None = None):
        self.cfg = cfg or CoordinatorConfig()
        if svc is None:
            path = self.cfg.scheduler.persistence_path
            records = list(load_records(path)) if path is not None else []
            journal = open_journal(path)
            if records:
                sched = TicketScheduler.replay(self.cfg.scheduler, records, journal=journal)
                log.info("replayed %d journal records from %s", len(records), path)
            else:
                sched = TicketScheduler(self.cfg.scheduler, journal=journal)
            svc = SchedulerService(sched)
        self.svc = svc
        self.resources = ResourceStore(self.cfg.resource_root)
        self.sessions: dict[str, WorkerSession] = {}
        self._session_seq = 0
        self._loop: asyncio.AbstractEventLoop | None = None
        self.app = _build_app(self)

    # -- session plumbing -----------------------------------------------------

    def _assign_worker_id(self, proposed: str | None) -> str:
        self._session_seq += 1
        if proposed and proposed not in self.sessions:
            return proposed
        base = proposed or "w"
        return f"{base}{self._session_seq}"

    async def broadcast(self, msg: Control) -> int:
        """Send a control message to every connected worker."""
        data = encode_message(msg).decode("utf-8")
        delivered = 0
        for session in list(self.sessions.values()):
            try:
                await session.ws.send_text(data)
                delivered += 1
            except Exception:
                log.warning("control broadcast to %s failed", session.worker_id)
        return delivered

    def broadcast_threadsafe(self, command: str, url: str | None = None, timeout: float = 10.0) -> int:
        """Broadcast from outside the event loop (CLI/framework threads)."""
        if self._loop is None:
            return 0
        future = asyncio.run_coroutine_threadsafe(self.broadcast(Control(command, url)), self._loop)
        return future.result(timeout=timeout)

    def register_resource_bytes(self, name: str, data: bytes) -> str:
        return self.resources.register_bytes(name, data)

    def status_doc(self) -> dict:
        projects = {}
        for pid, stats in self.svc.stats_snapshot().items():
            projects[pid] = {
                "tasks": stats.tasks,
                "pending": stats.pending,
                "executed": stats.executed,
                "errors": stats.errors,
                "failed": stats.failed,
            }
        clients = [
            {
                "worker_id": s.worker_id,
                "user_agent": s.user_agent,
                "connected_at": s.connected_at,
                "tickets_in_flight": sorted(s.tickets_in_flight),
            }
            for s in self.sessions.values()
        ]
        return {"protocol_version": PROTOCOL_VERSION, "projects": projects, "clients": clients}


def _build_app(co: Coordinator) -> FastAPI:
    @asynccontextmanager
    async def _lifespan(app: FastAPI):
        co._loop = asyncio.get_running_loop()
        try:
            yield
        finally:
            co.svc.flush()

    app = FastAPI(openapi_url=None, docs_url=None, redoc_url=None, lifespan=_lifespan)

    @app.get("/status")
    async def status() -> JSONResponse:
        return JSONResponse(co.status_doc())

    @app.post("/console")
    async def console(request: Request) -> JSONResponse:
        if co.cfg.admin_token is not None:
            if request.headers.get(ADMIN_HEADER) != co.cfg.admin_token:
                raise HTTPException(status_code=401, detail="bad admin token")
        body = await request.json()
        command = body.get("command")
        if command not in CONTROL_COMMANDS:
            raise HTTPException(status_code=400, detail=f"unknown command {command!r}")
        url = body.get("url")
        if command == "redirect" and not url:
            raise HTTPException(status_code=400, detail="redirect requires url")
        delivered = await co.broadcast(Control(command, url))
        return JSONResponse({"command": command, "delivered": delivered})

    @app.get("/resource/{name:path}")
    async def resource(name: str) -> Response:
        try:
            hit = co.resources.resolve(name)
        except PermissionError:
            raise HTTPException(status_code=403, detail="resource name rejected")
        if hit is None:
            raise HTTPException(status_code=404, detail=f"no resource {name!r}")
        data, digest = hit
        return Response(
            content=data,
            media_type="application/octet-stream",
            headers={HASH_HEADER: digest, "ETag": f'"{digest}"'},
        )

    if co.cfg.static_dir is not None:
        static_dir = Path(co.cfg.static_dir)

        @app.get("/")
        @app.get("/worker.html")
        async def worker_page() -> FileResponse:
            page = static_dir / "worker.html"
            if not page.is_file():
                raise HTTPException(status_code=404, detail="worker.html not built")
            return FileResponse(page, media_type="text/html")

        @app.get("/static/{name}")
        async def static_asset(name: str) -> FileResponse:
            if not ResourceStore.valid_name(name):
                raise HTTPException(status_code=403, detail="asset name rejected")
            path = static_dir / name
            if not path.is_file():
                raise HTTPException(status_code=404, detail=f"no asset {name!r}")
            return FileResponse(path)

    @app.websocket(WS_PATH)
    async def distributor(ws: WebSocket) -> None:
        await ws.accept()
        session: WorkerSession | None = None
        try:
            hello = decode_message((await ws.receive_text()).encode("utf-8"))
            if not isinstance(hello, Hello):
                await ws.close(code=1002, reason="expected hello")
                return
            wid = co._assign_worker_id(hello.worker_id)
            session = WorkerSession(wid, ws, hello.user_agent or "", co.svc.clock())
            co.sessions[wid] = session
            co.svc.register_client(wid, session.user_agent)
            await ws.send_text(encode_message(Hello(worker_id=wid)).decode("utf-8"))
            await _session_loop(co, session)
        except WebSocketDisconnect:
            pass
        except DecodeError as exc:
            log.info("closing session on protocol error: %s", exc)
            try:
                await ws.close(code=1002, reason=str(exc)[:120])
            except RuntimeError:
                pass
        finally:
            if session is not None:
                co.sessions.pop(session.worker_id, None)
                co.svc.drop_client(session.worker_id)

    return app


async def _session_loop(co: Coordinator, session: WorkerSession) -> None:
    """Serve one worker: requests in, grants/payloads/acks out. In-flight
    tickets are simply abandoned on disconnect; the scheduler's timeout
    redistributes them."""
    ws = session.ws
    wid = session.worker_id
    while True:
        msg = decode_message((await ws.receive_text()).encode("utf-8"))
        if isinstance(msg, TicketRequest):
            ticket = co.svc.next_ticket(wid)
            if ticket is None:
                reply = NoTicket()
            else:
                session.tickets_in_flight.add(ticket.ticket_id)
                if len(ticket.distributions) > 1:
                    # the latest distribution now names this worker
                    for other in co.sessions.values():
                        if other is not session:
                            other.tickets_in_flight.discard(ticket.ticket_id)
                reply = TicketGrant(
                    ticket_id=ticket.ticket_id,
                    project_id=ticket.project_id,
                    task_id=ticket.task_id,
                    input_index=ticket.input_index,
                    args=ticket.args,
                    attempt=len(ticket.distributions),
                )
            await ws.send_text(encode_message(reply).decode("utf-8"))
        elif isinstance(msg, TaskRequest):
            descriptor = co.svc.task_descriptor(msg.task_id)
            if descriptor is None:
                payload = TaskPayload(task_id=msg.task_id, found=False)
            else:
                payload = TaskPayload(
                    task_id=descriptor.task_id,
                    found=True,
                    version=descriptor.version,
                    resource_deps=list(descriptor.resource_deps),
                    chunking=descriptor.chunking,
                )
            await ws.send_text(encode_message(payload).decode("utf-8"))
        elif isinstance(msg, ResultSubmit):
            status = co.svc.submit_result(msg.ticket_id, wid, msg.result)
            session.tickets_in_flight.discard(msg.ticket_id)
            ack = ResultAck(ticket_id=msg.ticket_id, status=status)
            await ws.send_text(encode_message(ack).decode("utf-8"))
        elif isinstance(msg, ErrorSubmit):
            report = ErrorReport(
                ticket_id=msg.ticket_id,
                worker_id=wid,
                message=msg.message or "(no message)",
                trace=msg.trace,
                at=co.svc.clock(),
            )
            co.svc.record_error(report)
            session.tickets_in_flight.discard(msg.ticket_id)
        else:
            raise DecodeError(f"unexpected {type(msg).__name__} from worker")


class CoordinatorServer:
    """Runs the coordinator app in a background uvicorn thread."""

    def __init__(self, coordinator: Coordinator):
        self.coordinator = coordinator
        cfg = coordinator.cfg
        self._uv = uvicorn.Server(
            uvicorn.Config(
                coordinator.app,
                host=cfg.host,
                port=cfg.port,
                log_level="warning",
                ws_ping_interval=None,
                ws_ping_timeout=None,
            )
        )
        self._thread: threading.Thread | None = None

    def start(self, timeout: float = 15.0) -> "CoordinatorServer":
        self._thread = threading.Thread(target=self._uv.run, name="coordinator", daemon=True)
        self._thread.start()
        deadline = threading.Event()
        waited = 0.0
        while not self._uv.started:
            if not self._thread.is_alive():
                raise RuntimeError("coordinator failed to start (port in use?)")
            if waited >= timeout:
                raise RuntimeError(f"coordinator not up after {timeout}s")
            deadline.wait(0.02)
            waited += 0.02
        return self

    @property
    def port(self) -> int:
        return self._uv.servers[0].sockets[0].getsockname()[1]

    @property
    def http_base(self) -> str:
        return f"http://{self.coordinator.cfg.host}:{self.port}"

    @property
    def ws_url(self) -> str:
        return f"ws://{self.coordinator.cfg.host}:{self.port}{WS_PATH}"

    def stop(self, timeout: float = 10.0) -> None:
        self._uv.should_exit = True
        if self._thread is not None:
            self._thread.join(timeout=timeout)
        self.coordinator.svc.flush()


def serve(cfg: CoordinatorConfig) -> None:
    """Run a coordinator in the foreground until interrupted; the journal is
    flushed on the way out."""
    coordinator = Coordinator(cfg)
    uvicorn.Server(
        uvicorn.Config(coordinator.app, host=cfg.host, port=cfg.port, log_level="info")
    ).run()
    coordinator.svc.flush()
