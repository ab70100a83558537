#!/usr/bin/env python3
"""Drive live coordinators and scripted sessions for the frontend test suite.

Each subcommand prints one JSON object per line on stdout:

    {"event": "ready", ...}   the server is up and tickets are enqueued
    {"event": "done", ...}    the work completed; payload is mode-specific
    {"event": "error", ...}   something failed; the process exits nonzero

Modes that serve external workers hold the coordinator up after ``done``
until a line arrives on stdin, then broadcast a stop control, linger long
enough for connected workers to drain it, and shut down.

Subcommands:

    primes      run an is_prime project; optionally with in-process native
                workers (the baseline) and optionally serving a built page
                bundle via --static-dir
    crash       run a single crash_gate ticket with fast redistribution, so
                an injected failure is retried and completes on attempt 2
    transcript  run one fixed scripted session and print every frame the
                worker sent, normalized only where noise is inherent
                (identity fields in hello); --native runs the reference
                worker against the script, otherwise the script serves an
                external worker
"""

from __future__ import annotations

import argparse
import json
import sys
import threading
import time

from websockets.sync.server import serve as ws_serve

from ticketgrid.coordinator import Coordinator, CoordinatorConfig, CoordinatorServer
from ticketgrid.framework import Project
from ticketgrid.protocol import (
    Control,
    Hello,
    NoTicket,
    ResultAck,
    TaskPayload,
    TicketGrant,
    encode_message,
)
from ticketgrid.scheduler import SchedulerConfig
from ticketgrid.tasks import builtin_descriptor, builtin_registry
from ticketgrid.worker import Worker, WorkerConfig


def emit(event: str, **payload) -> None:
    print(json.dumps({"event": event, **payload}, sort_keys=True), flush=True)


def wait_for_release() -> None:
    """Block until the harness writes a line (or closes our stdin)."""
    sys.stdin.readline()


# ---------------------------------------------------------------------------
# primes: a full project; workers are either in-process natives or external
# ---------------------------------------------------------------------------


def cmd_primes(args: argparse.Namespace) -> None:
    cfg = CoordinatorConfig(static_dir=args.static_dir)
    server = CoordinatorServer(Coordinator(cfg)).start()
    stop = threading.Event()
    threads: list[threading.Thread] = []
    try:
        for i in range(args.native_workers):
            worker = Worker(
                WorkerConfig(endpoint=server.ws_url, worker_id=f"native-w{i}"),
                registry=builtin_registry(),
                stop_event=stop,
            )
            t = threading.Thread(target=worker.run, name=f"native-w{i}", daemon=True)
            t.start()
            threads.append(t)
        project = Project("primes", server.coordinator.svc)
        handle = project.create_task(builtin_descriptor("is_prime", chunking=args.chunking))
        candidates = list(range(1, args.max_candidate + 1))
        handle.calculate(candidates)
        emit(
            "ready",
            ws_url=server.ws_url,
            http_base=server.http_base,
            tickets=len(handle.ticket_ids),
        )
        results = handle.block(timeout=args.timeout)
        primes = [c for c, r in zip(candidates, results) if r["is_prime"]]
        emit("done", primes=primes, tickets=len(handle.ticket_ids))
        wait_for_release()
    finally:
        server.coordinator.broadcast_threadsafe("stop")
        stop.set()
        for t in threads:
            t.join(timeout=10)
        time.sleep(args.linger)  # let external workers drain the stop control
        server.stop()


# ---------------------------------------------------------------------------
# crash: one crash_gate ticket, redistributed quickly after its error report
# ---------------------------------------------------------------------------


def cmd_crash(args: argparse.Namespace) -> None:
    scheduler = SchedulerConfig(
        redistribution_timeout=args.redistribution_timeout,
        min_redistribution_interval=args.min_redistribution_interval,
    )
    server = CoordinatorServer(Coordinator(CoordinatorConfig(scheduler=scheduler))).start()
    try:
        project = Project("faults", server.coordinator.svc)
        handle = project.create_task(builtin_descriptor("crash_gate", chunking=1))
        handle.calculate([{"fail_attempts": args.fail_attempts, "value": args.value}])
        emit(
            "ready",
            ws_url=server.ws_url,
            http_base=server.http_base,
            tickets=len(handle.ticket_ids),
        )
        results = handle.block(timeout=args.timeout)
        ticket = server.coordinator.svc.ticket(handle.ticket_ids[0])
        emit(
            "done",
            results=results,
            attempts=len(ticket.distributions),
            error_messages=[r.message for r in ticket.error_reports],
            error_traces_present=[bool(r.trace) for r in ticket.error_reports],
        )
        wait_for_release()
    finally:
        server.coordinator.broadcast_threadsafe("stop")
        time.sleep(args.linger)
        server.stop()


# ---------------------------------------------------------------------------
# transcript: one scripted session; record every frame the worker sends
# ---------------------------------------------------------------------------


def build_script() -> list[tuple[str, list[str]]]:
    """(expected kind, scripted replies) pairs for one fixed session."""
    version = builtin_registry().descriptor("is_prime").version
    text = lambda msg: encode_message(msg).decode("utf-8")  # noqa: E731
    grant = lambda tid, index, args: text(  # noqa: E731
        TicketGrant(
            ticket_id=tid,
            project_id="p",
            task_id="is_prime",
            input_index=index,
            args=args,
            attempt=1,
        )
    )
    return [
        ("hello", [text(Hello(worker_id="w-scripted"))]),
        ("ticket_request", [grant("t1", 0, [7919])]),
        (
            "task_request",
            [
                text(
                    TaskPayload(
                        task_id="is_prime",
                        found=True,
                        version=version,
                        resource_deps=[],
                        chunking=1,
                    )
                )
            ],
        ),
        ("result_submit", [text(ResultAck(ticket_id="t1", status="accepted"))]),
        ("ticket_request", [text(NoTicket(retry_after_ms=30))]),
        # the task is verified once per session: this grant must not trigger
        # a second task_request
        ("ticket_request", [grant("t2", 1, [1])]),
        ("result_submit", [text(ResultAck(ticket_id="t2", status="accepted"))]),
        ("ticket_request", [text(Control(command="stop"))]),
    ]


def normalize_frame(raw: str) -> str:
    """Keep frames byte-for-byte except identity fields in hello."""
    frame = json.loads(raw)
    if frame.get("kind") == "hello":
        body = dict(frame.get("body", {}))
        body.pop("worker_id", None)
        body.pop("user_agent", None)
        frame["body"] = body
        return json.dumps(frame, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return raw


def cmd_transcript(args: argparse.Namespace) -> None:
    steps = build_script()
    transcript: list[str] = []
    outcome: dict = {}
    done = threading.Event()

    def handler(ws) -> None:
        try:
            for expected, replies in steps:
                raw = ws.recv(timeout=30)
                frame = json.loads(raw)
                if frame.get("kind") != expected:
                    raise RuntimeError(f"expected {expected}, got {frame.get('kind')}")
                transcript.append(normalize_frame(raw))
                for reply in replies:
                    ws.send(reply)
        except Exception as exc:  # surfaced by the main thread after done.wait
            outcome["error"] = f"{type(exc).__name__}: {exc}"
        finally:
            done.set()

    server = ws_serve(handler, "127.0.0.1", 0)
    port = server.socket.getsockname()[1]
    ws_url = f"ws://127.0.0.1:{port}/distributor"
    server_thread = threading.Thread(target=server.serve_forever, name="scripted", daemon=True)
    server_thread.start()
    try:
        if args.native:
            worker = Worker(
                WorkerConfig(endpoint=ws_url, worker_id="t-native"),
                registry=builtin_registry(),
            )
            # daemon thread: if the script fails mid-session the worker would
            # reconnect-loop, and the main thread must still reach done.wait
            threading.Thread(target=worker.run, name="t-native", daemon=True).start()
        else:
            emit("ready", ws_url=ws_url)
        if not done.wait(timeout=args.timeout):
            raise TimeoutError("scripted session did not complete")
        if "error" in outcome:
            raise RuntimeError(outcome["error"])
        emit("done", transcript=transcript)
    finally:
        server.shutdown()
        server_thread.join(timeout=10)


# ---------------------------------------------------------------------------


def main(argv: list[str] | None = None) -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    sub = parser.add_subparsers(dest="mode", required=True)

    primes = sub.add_parser("primes", help="run an is_prime project")
    primes.add_argument("--max-candidate", type=int, default=2000)
    primes.add_argument("--chunking", type=int, default=5)
    primes.add_argument("--native-workers", type=int, default=0)
    primes.add_argument("--static-dir", default=None)
    primes.add_argument("--timeout", type=float, default=120.0)
    primes.add_argument("--linger", type=float, default=2.0)
    primes.set_defaults(fn=cmd_primes)

    crash = sub.add_parser("crash", help="run one crash_gate ticket")
    crash.add_argument("--fail-attempts", type=int, default=1)
    crash.add_argument("--value", type=json.loads, default=7)
    crash.add_argument("--redistribution-timeout", type=float, default=0.6)
    crash.add_argument("--min-redistribution-interval", type=float, default=0.3)
    crash.add_argument("--timeout", type=float, default=60.0)
    crash.add_argument("--linger", type=float, default=2.0)
    crash.set_defaults(fn=cmd_crash)

    transcript = sub.add_parser("transcript", help="record one scripted session")
    transcript.add_argument("--native", action="store_true")
    transcript.add_argument("--timeout", type=float, default=120.0)
    transcript.set_defaults(fn=cmd_transcript)

    args = parser.parse_args(argv)
    try:
        args.fn(args)
    except Exception as exc:  # make failures visible to the harness
        emit("error", message=f"{type(exc).__name__}: {exc}")
        raise SystemExit(1)


if __name__ == "__main__":
    main()
